//! Plain-loop reference implementations used as oracles.
#![allow(dead_code)]

use mood_reader::nn::{Linear, MultiHeadAttention, ParamStore, RngState, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn random_tensor(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = mat(store.value(l.weight));
    let b = l.bias.map(|b| store.value(b).data().to_vec()).unwrap_or(vec![0.0; l.d_out]);
    x.iter()
        .map(|row| (0..l.d_out).map(|j| b[j] + row.iter().zip(&w).map(|(xi, wr)| xi * wr[j]).sum::<f64>()).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], shift: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| gain[j] * (v - mean) / (var + 1e-5).sqrt() + shift[j]).collect()
        })
        .collect()
}

pub fn softmax_row(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Multi-head self-attention over the rows of `x`.
pub fn mha(store: &ParamStore, a: &MultiHeadAttention, x: &Mat) -> Mat {
    let q = linear(store, &a.query, x);
    let k = linear(store, &a.key, x);
    let v = linear(store, &a.value, x);
    let dk = a.width / a.heads;
    let mut cat = vec![vec![0.0; a.width]; x.len()];
    for h in 0..a.heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..x.len() {
            let scores: Vec<f64> = (0..x.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let p = softmax_row(&scores);
            for c in cols.clone() {
                cat[i][c] = (0..x.len()).map(|j| p[j] * v[j][c]).sum();
            }
        }
    }
    linear(store, &a.output, &cat)
}

pub fn block(store: &ParamStore, b: &mood_reader::nn::AttentionBlock, x: &Mat) -> Mat {
    let ln = |l: &mood_reader::nn::LayerNorm, x: &Mat| {
        layer_norm(x, store.value(l.gain).data(), store.value(l.shift).data())
    };
    let xn = ln(&b.norm_in, x);
    let a = mha(store, &b.attention, &xn);
    let sum: Mat = a.iter().zip(&xn).map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect()).collect();
    ln(&b.norm_out, &sum)
}

pub fn assert_close(a: &Tensor, b: &Mat, tol: f64) {
    assert_eq!(a.rows(), b.len());
    for (r, row) in b.iter().enumerate() {
        for (x, y) in a.row_slice(r).iter().zip(row) {
            assert!((x - y).abs() < tol, "row {r}: {x} vs {y}");
        }
    }
}

/// Replaces every trainable value with standard normal draws so no
/// parameter sits at a special point (zero bias, unit gain).
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = RngState::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).trainable {
            let t = store.value(id).map(|_| 0.5 * rng.normal());
            store.set_value(id, t).unwrap();
        }
    }
}
