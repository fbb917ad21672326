use mood_reader::nn::{
    dropout_mask, gradient_check, softmax, AttentionBlock, Ctx, LayerNorm, Linear, MultiHeadAttention,
    ParamStore, RngState, Tensor, LOG_FLOOR,
};
use proptest::prelude::*;

const STEP: f64 = 1e-5;

fn random_tensor(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Weighted sum with fixed weights so that constant-sum outputs (softmax,
/// normalisation) still have informative gradients.
fn probe(ctx: &mut Ctx, v: mood_reader::nn::Var, seed: u64) -> mood_reader::nn::Var {
    let (r, c) = ctx.tape.shape(v);
    let mut rng = RngState::new(seed);
    let w = ctx.tape.constant(random_tensor(&mut rng, r, c));
    let p = ctx.tape.mul(v, w).unwrap();
    ctx.tape.sum(p)
}

#[test]
fn linear_gradients_at_ten_points() {
    for point in 0..10 {
        let mut rng = RngState::new(100 + point);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 3, true, &mut rng).unwrap();
        let bias = store.value(lin.bias.unwrap()).map(|_| rng.normal());
        store.set_value(lin.bias.unwrap(), bias).unwrap();
        let x = random_tensor(&mut rng, 4, 5);
        let report = gradient_check(&store, &[x], STEP, |ctx, v| {
            let y = lin.forward(ctx, v[0])?;
            Ok(ctx.tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "point {point}: {report:?}");
    }
}

#[test]
fn layer_norm_gradients_at_ten_points() {
    for point in 0..10 {
        let mut rng = RngState::new(200 + point);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6).unwrap();
        let g = store.value(ln.gain).map(|_| rng.normal());
        store.set_value(ln.gain, g).unwrap();
        let x = random_tensor(&mut rng, 3, 6);
        let report = gradient_check(&store, &[x], STEP, |ctx, v| {
            let y = ln.forward(ctx, v[0])?;
            Ok(probe(ctx, y, point))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "point {point}: {report:?}");
    }
}

#[test]
fn layer_norm_constant_row_is_finite() {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    let report = gradient_check(&store, &[Tensor::filled(&[1, 4], 2.5)], STEP, |ctx, v| {
        let y = ln.forward(ctx, v[0])?;
        Ok(probe(ctx, y, 9))
    })
    .unwrap();
    assert!(report.max_rel_error.is_finite());
}

#[test]
fn softmax_gradients_at_ten_points() {
    for point in 0..10 {
        let mut rng = RngState::new(300 + point);
        let x = random_tensor(&mut rng, 3, 5);
        let report = gradient_check(&ParamStore::new(), &[x], STEP, |ctx, v| {
            let y = ctx.tape.softmax_rows(v[0]);
            Ok(probe(ctx, y, point))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "point {point}: {report:?}");
    }
}

#[test]
fn cross_entropy_gradients_on_scores() {
    for point in 0..10 {
        let mut rng = RngState::new(400 + point);
        let x = random_tensor(&mut rng, 4, 3);
        let labels = [0, 2, 1, 2];
        let report = gradient_check(&ParamStore::new(), &[x], STEP, |ctx, v| {
            let p = ctx.tape.softmax_rows(v[0]);
            ctx.tape.cross_entropy(p, &labels, LOG_FLOOR)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "point {point}: {report:?}");
    }
}

#[test]
fn cross_entropy_values() {
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);
    let p = ctx.tape.constant(Tensor::matrix(2, 3, vec![1., 0., 0., 0., 0., 1.]).unwrap());
    let l = ctx.tape.cross_entropy(p, &[0, 2], LOG_FLOOR).unwrap();
    assert_eq!(ctx.value(l).data()[0], 0.0);
    let u = ctx.tape.constant(Tensor::filled(&[2, 3], 1.0 / 3.0));
    let l = ctx.tape.cross_entropy(u, &[0, 1], LOG_FLOOR).unwrap();
    assert!((ctx.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    // a confident wrong answer is bounded by the floor
    let l = ctx.tape.cross_entropy(p, &[1, 0], LOG_FLOOR).unwrap();
    assert!((ctx.value(l).data()[0] + LOG_FLOOR.ln()).abs() < 1e-9);
}

#[test]
fn batch_norm_training_gradients() {
    for point in 0..10 {
        let mut rng = RngState::new(500 + point);
        let x = random_tensor(&mut rng, 5, 3);
        let g = random_tensor(&mut rng, 1, 3);
        let s = random_tensor(&mut rng, 1, 3);
        let report = gradient_check(&ParamStore::new(), &[x, g, s], STEP, |ctx, v| {
            let (y, _, _) = ctx.tape.batch_norm(v[0], v[1], v[2], 1e-5)?;
            Ok(probe(ctx, y, point))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "point {point}: {report:?}");
    }
}

#[test]
fn attention_gradients_at_ten_points() {
    for point in 0..10 {
        let mut rng = RngState::new(600 + point);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        let q = random_tensor(&mut rng, 3, 4);
        let kv = random_tensor(&mut rng, 5, 4);
        let report = gradient_check(&store, &[q, kv], STEP, |ctx, v| {
            let (y, _) = mha.forward(ctx, v[0], v[1])?;
            Ok(probe(ctx, y, point))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "point {point}: {report:?}");
    }
}

#[test]
fn attention_block_gradients_composed() {
    for point in 0..10 {
        let mut rng = RngState::new(700 + point);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "blk", 4, 2, 0.1, &mut rng).unwrap();
        let x = random_tensor(&mut rng, 4, 4);
        let report = gradient_check(&store, &[x], STEP, |ctx, v| {
            let y = block.forward(ctx, v[0])?;
            Ok(probe(ctx, y, point))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "point {point}: {report:?}");
    }
}

#[test]
fn single_token_attention_is_value_path() {
    let mut rng = RngState::new(1);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
    let q = random_tensor(&mut rng, 1, 4);
    let kv = random_tensor(&mut rng, 1, 4);
    let mut ctx = Ctx::eval(&store);
    let (qv, kvv) = (ctx.tape.constant(q), ctx.tape.constant(kv.clone()));
    let (y, _) = mha.forward(&mut ctx, qv, kvv).unwrap();
    let wv = store.value(mha.value.weight);
    let wo = store.value(mha.output.weight);
    let want = kv.matmul(wv).unwrap().matmul(wo).unwrap();
    assert!(ctx.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn zero_value_weights_give_bias_projection() {
    let mut rng = RngState::new(2);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 1, &mut rng).unwrap();
    store.set_value(mha.value.weight, Tensor::zeros(&[4, 4])).unwrap();
    store.set_value(mha.value.bias.unwrap(), Tensor::row(vec![0.5, -1.0, 0.0, 2.0])).unwrap();
    store.set_value(mha.output.bias.unwrap(), Tensor::row(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
    let bv = store.value(mha.value.bias.unwrap()).clone();
    let want_row = bv.matmul(store.value(mha.output.weight)).unwrap();
    let want_row: Vec<f64> = want_row.data().iter().zip([0.1, 0.2, 0.3, 0.4]).map(|(a, b)| a + b).collect();
    for seed in 0..3 {
        let mut r = RngState::new(seed);
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(random_tensor(&mut r, 3, 4));
        let (y, _) = mha.forward(&mut ctx, x, x).unwrap();
        for row in 0..3 {
            for (a, b) in ctx.value(y).row_slice(row).iter().zip(&want_row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

/// Brute-force scalar evaluation of single-head attention over two tokens.
#[test]
fn two_token_attention_matches_scalar_oracle() {
    let mut rng = RngState::new(3);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 2, 1, &mut rng).unwrap();
    let wq = [[0.5, -0.2], [0.3, 0.8]];
    let wk = [[1.0, 0.1], [-0.4, 0.6]];
    let wv = [[0.7, 0.0], [0.2, -0.9]];
    let wo = [[1.0, 0.5], [-0.5, 1.0]];
    let set = |store: &mut ParamStore, id, m: [[f64; 2]; 2]| {
        store.set_value(id, Tensor::matrix(2, 2, m.concat()).unwrap()).unwrap();
    };
    set(&mut store, mha.query.weight, wq);
    set(&mut store, mha.key.weight, wk);
    set(&mut store, mha.value.weight, wv);
    set(&mut store, mha.output.weight, wo);
    let x = [[1.0, 2.0], [-1.0, 0.5]];

    let proj = |v: [f64; 2], w: [[f64; 2]; 2]| [v[0] * w[0][0] + v[1] * w[1][0], v[0] * w[0][1] + v[1] * w[1][1]];
    let q: Vec<_> = x.iter().map(|&r| proj(r, wq)).collect();
    let k: Vec<_> = x.iter().map(|&r| proj(r, wk)).collect();
    let v: Vec<_> = x.iter().map(|&r| proj(r, wv)).collect();
    let mut want = Vec::new();
    for qi in &q {
        let s: Vec<f64> = k.iter().map(|kj| (qi[0] * kj[0] + qi[1] * kj[1]) / 2f64.sqrt()).collect();
        let z = s[0].exp() + s[1].exp();
        let a = [s[0].exp() / z, s[1].exp() / z];
        let o = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
        want.extend(proj(o, wo));
    }

    let mut ctx = Ctx::eval(&store);
    let xv = ctx.tape.constant(Tensor::matrix(2, 2, x.concat()).unwrap());
    let (y, probs) = mha.forward(&mut ctx, xv, xv).unwrap();
    for (a, b) in ctx.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(probs.len(), 1);
}

#[test]
fn dropout_zero_fraction_binomial() {
    let mask = dropout_mask(100_000, 0.5, &mut RngState::new(42)).unwrap();
    let zeroed = mask.iter().filter(|&&m| m == 0.0).count() as f64 / 1e5;
    assert!((zeroed - 0.5).abs() < 0.01, "{zeroed}");
    assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..30), shift in -100.0f64..100.0) {
        let x = Tensor::row(values.clone());
        let s = softmax(&x, 1).unwrap();
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        prop_assert!((s.sum() - 1.0).abs() < 1e-6);
        let shifted = softmax(&Tensor::row(values.iter().map(|v| v + shift).collect()), 1).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) < 1e-9);
    }
}
