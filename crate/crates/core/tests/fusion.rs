mod common;

use common::*;
use mood_reader::fusion::{loss, pair_softmax, Classifier, FinalFusion, PairFusion, UnifiedProjection};
use mood_reader::nn::{gradient_check, Ctx, Mode, ParamStore, RngState, Tensor};
use mood_reader::Error;
use proptest::prelude::*;

fn row(v: &[f64]) -> Tensor {
    Tensor::row(v.to_vec())
}

#[test]
fn projection_shapes_and_zero_input() {
    let mut rng = RngState::new(1);
    let mut store = ParamStore::new();
    let p = UnifiedProjection::new(&mut store, "p_st", 62, 20, 32, &mut rng).unwrap();
    let q = UnifiedProjection::new(&mut store, "p_ts", 4, 310, 32, &mut rng).unwrap();
    let e = UnifiedProjection::pooled(&mut store, "p_eeg", 16, 32, &mut rng).unwrap();
    randomize(&mut store, 2);
    let mut ctx = Ctx::eval(&store);
    let a = ctx.tape.constant(random_tensor(&mut rng, 62, 20));
    let b = ctx.tape.constant(random_tensor(&mut rng, 4, 310));
    let c = ctx.tape.constant(random_tensor(&mut rng, 80, 16));
    for (proj, x) in [(&p, a), (&q, b), (&e, c)] {
        let y = proj.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), (1, 32));
    }
    let z = ctx.tape.constant(Tensor::zeros(&[62, 20]));
    let y = p.forward(&mut ctx, z).unwrap();
    // a zero row normalises to exactly the shift vector
    let shift = store.value(p.norm.shift).data().to_vec();
    let tiled: Vec<f64> = (0..62).flat_map(|_| shift.clone()).collect();
    assert_close(ctx.value(y), &linear(&store, &p.linear, &vec![tiled]), 1e-12);
}

fn pair(d: usize, seed: u64) -> (PairFusion, ParamStore) {
    let mut store = ParamStore::new();
    let p = PairFusion::new(&mut store, "pair", d, &mut RngState::new(seed)).unwrap();
    (p, store)
}

#[test]
fn equal_scores_average_the_pair() {
    let (p, mut store) = pair(3, 1);
    for id in [p.w_a, p.w_b] {
        store.set_value(id, Tensor::zeros(&[3, 3])).unwrap();
    }
    let mut ctx = Ctx::eval(&store);
    let a = ctx.tape.constant(row(&[1.0, -2.0, 4.0]));
    let b = ctx.tape.constant(row(&[3.0, 0.0, -4.0]));
    let out = p.forward(&mut ctx, a, b).unwrap();
    assert_eq!(ctx.value(out.fused).data(), &[2.0, -1.0, 0.0]);
}

#[test]
fn saturated_score_selects_first_operand() {
    let (p, mut store) = pair(2, 2);
    store.set_value(p.w_a, Tensor::matrix(2, 2, vec![1e4, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    store.set_value(p.w_b, Tensor::zeros(&[2, 2])).unwrap();
    let mut ctx = Ctx::eval(&store);
    let a = ctx.tape.constant(row(&[1.0, 5.0]));
    let b = ctx.tape.constant(row(&[-3.0, 7.0]));
    let out = p.forward(&mut ctx, a, b).unwrap();
    let f = ctx.value(out.fused).data();
    assert!((f[0] - 1.0).abs() < 1e-12);
    assert!((f[1] - 6.0).abs() < 1e-12);
}

#[test]
fn two_dimensional_pair_matches_scalar_oracle() {
    let (p, store) = pair(2, 3);
    let (fa, fb) = ([0.7, -1.2], [0.1, 2.0]);
    let wa = mat(store.value(p.w_a));
    let wb = mat(store.value(p.w_b));
    let mut want = vec![0.0; 2];
    for j in 0..2 {
        let sa = fa[0] * wa[0][j] + fa[1] * wa[1][j];
        let sb = fb[0] * wb[0][j] + fb[1] * wb[1][j];
        let ca = sa.exp() / (sa.exp() + sb.exp());
        want[j] = ca * fa[j] + (1.0 - ca) * fb[j];
    }
    let mut ctx = Ctx::eval(&store);
    let a = ctx.tape.constant(row(&fa));
    let b = ctx.tape.constant(row(&fb));
    let out = p.forward(&mut ctx, a, b).unwrap();
    assert_close(ctx.value(out.fused), &vec![want], 1e-14);
    let bad = ctx.tape.constant(row(&[1.0, 2.0, 3.0]));
    assert!(matches!(p.forward(&mut ctx, a, bad), Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn pair_weights_are_convex_and_shift_invariant(
        fa in prop::collection::vec(-5.0f64..5.0, 4),
        fb in prop::collection::vec(-5.0f64..5.0, 4),
        shift in prop::collection::vec(-50.0f64..50.0, 4),
        seed in any::<u64>(),
    ) {
        let (p, store) = pair(4, seed);
        let mut ctx = Ctx::eval(&store);
        let a = ctx.tape.constant(row(&fa));
        let b = ctx.tape.constant(row(&fb));
        let out = p.forward(&mut ctx, a, b).unwrap();
        let (ca, cb, f) = (ctx.value(out.c_a).clone(), ctx.value(out.c_b).clone(), ctx.value(out.fused).clone());
        for j in 0..4 {
            prop_assert!(ca.data()[j] >= 0.0 && cb.data()[j] >= 0.0);
            prop_assert!((ca.data()[j] + cb.data()[j] - 1.0).abs() < 1e-12);
            let (lo, hi) = (fa[j].min(fb[j]), fa[j].max(fb[j]));
            prop_assert!(f.data()[j] >= lo - 1e-12 && f.data()[j] <= hi + 1e-12);
        }
        let sa = ctx.tape.constant(row(&fa));
        let sb = ctx.tape.constant(row(&fb));
        let (u, _) = pair_softmax(&mut ctx, sa, sb).unwrap();
        let sa2 = ctx.tape.constant(row(&fa.iter().zip(&shift).map(|(x, s)| x + s).collect::<Vec<_>>()));
        let sb2 = ctx.tape.constant(row(&fb.iter().zip(&shift).map(|(x, s)| x + s).collect::<Vec<_>>()));
        let (v, _) = pair_softmax(&mut ctx, sa2, sb2).unwrap();
        prop_assert!(ctx.value(u).max_abs_diff(ctx.value(v)) < 1e-12);
    }
}

#[test]
fn final_fusion_shape_symmetry_and_zero_values() {
    let mut rng = RngState::new(4);
    let mut store = ParamStore::new();
    let f = FinalFusion::new(&mut store, "final", 8, None, &mut rng).unwrap();
    randomize(&mut store, 5);
    let x = random_tensor(&mut rng, 1, 8);
    let y = random_tensor(&mut rng, 1, 8);
    {
        let mut ctx = Ctx::eval(&store);
        let (a, b) = (ctx.tape.constant(x.clone()), ctx.tape.constant(y.clone()));
        let m = f.forward(&mut ctx, a, b).unwrap();
        assert_eq!(ctx.tape.shape(m), (1, 16));
        let same = f.forward(&mut ctx, a, a).unwrap();
        let d = ctx.value(same).data();
        assert_eq!(d[..8], d[8..]);
    }
    for id in [f.attention.value.weight, f.attention.value.bias.unwrap()] {
        let z = store.value(id).map(|_| 0.0);
        store.set_value(id, z).unwrap();
    }
    let bias = store.value(f.attention.output.bias.unwrap()).data().to_vec();
    let want: Vec<f64> = bias.iter().chain(&bias).copied().collect();
    let mut ctx = Ctx::eval(&store);
    for (p, q) in [(x.clone(), y.clone()), (y, x)] {
        let (a, b) = (ctx.tape.constant(p), ctx.tape.constant(q));
        let m = f.forward(&mut ctx, a, b).unwrap();
        assert_eq!(ctx.value(m).data(), &want[..]);
    }
}

#[test]
fn classifier_outputs_distributions() {
    let mut rng = RngState::new(6);
    let mut store = ParamStore::new();
    let c3 = Classifier::new(&mut store, "c3", 16, 8, 3, &mut rng).unwrap();
    let c5 = Classifier::new(&mut store, "c5", 16, 8, 5, &mut rng).unwrap();
    let x = random_tensor(&mut rng, 2000, 16);
    let mut ctx = Ctx::eval(&store);
    let xv = ctx.tape.constant(x);
    let p3 = c3.forward(&mut ctx, xv).unwrap();
    let p5 = c5.forward(&mut ctx, xv).unwrap();
    assert_eq!(ctx.tape.shape(p5), (2000, 5));
    let p = ctx.value(p3);
    let mut mean = [0.0; 3];
    for r in 0..2000 {
        let s: f64 = p.row_slice(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for k in 0..3 {
            mean[k] += p.at(r, k) / 2000.0;
        }
    }
    for m in mean {
        assert!((m - 1.0 / 3.0).abs() < 0.1, "{mean:?}");
    }
}

#[test]
fn training_batch_of_one_is_rejected() {
    let mut rng = RngState::new(7);
    let mut store = ParamStore::new();
    let c = Classifier::new(&mut store, "c", 4, 4, 3, &mut rng).unwrap();
    let mut ctx = Ctx::train(&store, &mut rng);
    let x = ctx.tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(c.forward(&mut ctx, x), Err(Error::Degenerate(_))));
}

#[test]
fn loss_reference_values() {
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);
    let onehot = ctx.tape.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let l = loss(&mut ctx, onehot, &[0, 2]).unwrap();
    assert_eq!(ctx.value(l).data()[0], 0.0);
    let uniform = ctx.tape.constant(Tensor::filled(&[4, 5], 0.2));
    let l = loss(&mut ctx, uniform, &[0, 1, 2, 4]).unwrap();
    assert!((ctx.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    assert!((5f64.ln() - 1.6094).abs() < 1e-4);
}

#[test]
fn fusion_to_loss_gradient_check() {
    for point in 0..3 {
        let mut rng = RngState::new(10 + point);
        let mut store = ParamStore::new();
        let pa = PairFusion::new(&mut store, "st", 4, &mut rng).unwrap();
        let pb = PairFusion::new(&mut store, "ee", 4, &mut rng).unwrap();
        let fin = FinalFusion::new(&mut store, "final", 4, None, &mut rng).unwrap();
        let cls = Classifier::new(&mut store, "cls", 8, 4, 3, &mut rng).unwrap();
        randomize(&mut store, 20 + point);
        let inputs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, 3, 4)).collect();
        let labels = [0usize, 2, 1];
        let report = gradient_check(&store, &inputs, 1e-5, |ctx, v| {
            assert_eq!(ctx.mode(), Mode::Check);
            let mut rows = Vec::new();
            for i in 0..3 {
                let pick = |ctx: &mut Ctx, k: usize| ctx.tape.slice_rows(v[k], i, i + 1);
                let (a, b, c, d) = (pick(ctx, 0)?, pick(ctx, 1)?, pick(ctx, 2)?, pick(ctx, 3)?);
                let st = pa.forward(ctx, a, b)?.fused;
                let ee = pb.forward(ctx, c, d)?.fused;
                rows.push(fin.forward(ctx, st, ee)?);
            }
            let m = ctx.tape.concat_rows(&rows)?;
            let p = cls.forward(ctx, m)?;
            loss(ctx, p, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
