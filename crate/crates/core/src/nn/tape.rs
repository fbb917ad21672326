//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation in evaluation order. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints for every node that (transitively) depends on a
//! gradient-requiring leaf.

use super::param::ParamId;
use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gain: Var, shift: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { src: Var, map: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { probs: Var, labels: Vec<usize>, floor: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that never tracks gradients; parameters and leaves are plain
    /// constants.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn as_matrix(t: Tensor) -> Tensor {
        let (r, c) = t.dims2();
        if t.shape() == [r, c] {
            t
        } else {
            t.reshape(&[r, c]).expect("same element count")
        }
    }

    /// Input that gradients are tracked for.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Self::as_matrix(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Self::as_matrix(t), Op::Leaf, false)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, t: Tensor, trainable: bool) -> Var {
        self.push(Self::as_matrix(t), Op::Param(id), trainable)
    }

    /// `(ParamId, Var)` for every parameter leaf on the tape.
    pub(crate) fn param_vars(&self) -> Vec<(ParamId, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let (sa, sb) = (self.shape(a), self.shape(b));
            return Err(shape_err(what, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (r, c) = self.shape(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(r, c, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(shape_err(what, &[r, c], &[rr, rc]));
        }
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rv[i % c]))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::matrix(r, c, data)?, op, ng))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` element-wise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Element-wise product with a fixed (non-differentiable) mask.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "mul_const: {} values for tensor of {}",
                c.len(),
                self.value(a).len()
            )));
        }
        let (r, cols) = self.shape(a);
        let data = self.value(a).data().iter().zip(&c).map(|(x, m)| x * m).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(r, cols, data)?, Op::MulConst(a, c), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// Softmax along the trailing axis of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - mx).exp();
                s += *d;
            }
            dst.iter_mut().for_each(|d| *d /= s);
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(r, c, out).expect("softmax shape"), Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalisation to zero mean / unit variance followed by a
    /// per-column gain and shift (`1 × c` rows).
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        self.check_affine(gain, shift, c, "layer_norm")?;
        let src = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * s;
            }
        }
        let out = self.affine(&xhat, r, c, gain, shift);
        let ng = self.ng(x) || self.ng(gain) || self.ng(shift);
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, xhat, rstd }, ng))
    }

    /// Column-wise normalisation with batch statistics. Returns the output
    /// together with the batch mean and (biased) variance per column.
    pub fn batch_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (r, c) = self.shape(x);
        self.check_affine(gain, shift, c, "batch_norm")?;
        if r < 2 {
            return Err(Error::Degenerate(format!("batch_norm needs at least 2 rows in training, got {r}")));
        }
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += src[i * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        for i in 0..r {
            for j in 0..c {
                var[j] += (src[i * c + j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                xhat[i * c + j] = (src[i * c + j] - mean[j]) * rstd[j];
            }
        }
        let out = self.affine(&xhat, r, c, gain, shift);
        let ng = self.ng(x) || self.ng(gain) || self.ng(shift);
        let v = self.push(out, Op::BatchNorm { x, gain, shift, xhat, rstd }, ng);
        Ok((v, mean, var))
    }

    fn check_affine(&self, gain: Var, shift: Var, c: usize, what: &str) -> Result<()> {
        if c == 0 {
            return Err(Error::Shape(format!("{what}: zero-width rows")));
        }
        for p in [gain, shift] {
            let s = self.shape(p);
            if s != (1, c) {
                return Err(shape_err(what, &[1, c], &[s.0, s.1]));
            }
        }
        Ok(())
    }

    fn affine(&self, xhat: &[f64], r: usize, c: usize, gain: Var, shift: Var) -> Tensor {
        let g = self.value(gain).data();
        let b = self.value(shift).data();
        let out = xhat.iter().enumerate().map(|(i, &v)| v * g[i % c] + b[i % c]).collect();
        Tensor::matrix(r, c, out).expect("affine shape")
    }

    /// Flat gather: output entry `i` is `src[map[i]]`, shaped `rows × cols`.
    pub fn gather(&mut self, src: Var, rows: usize, cols: usize, map: Vec<usize>) -> Result<Var> {
        let n = self.value(src).len();
        if map.len() != rows * cols || map.iter().any(|&m| m >= n) {
            return Err(Error::Shape(format!("gather: invalid map for {rows}x{cols} from {n} values")));
        }
        let s = self.value(src).data();
        let data = map.iter().map(|&m| s[m]).collect();
        let ng = self.ng(src);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::Gather { src, map }, ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.gather(a, rows, cols, (0..rows * cols).collect())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let map = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, c, r, map)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather_rows: row {bad} of {r}")));
        }
        let map = rows.iter().flat_map(|&i| (0..c).map(move |j| i * c + j)).collect();
        self.gather(a, rows.len(), c, map)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {c}")));
        }
        let w = end - start;
        let map = (0..r).flat_map(|i| (start..end).map(move |j| i * c + j)).collect();
        self.gather(a, r, w, map)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(shape_err("concat_rows", &[rows, c], &[r, pc]));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(shape_err("concat_cols", &[r, cols], &[pr, pc]));
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(r, cols, data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Column means, `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.value(a).row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(a);
        self.push(Tensor::row(out), Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `-(1/B) Σ_i log max(p[i, label_i], floor)` over a `B × classes`
    /// matrix of probabilities.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let (b, c) = self.shape(probs);
        if labels.len() != b {
            return Err(Error::Data(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let p = self.value(probs);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| p.at(i, l).max(floor).ln())
            .sum::<f64>()
            / b as f64;
        let ng = self.ng(probs);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { probs, labels: labels.to_vec(), floor }, ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (r, c) = node.value.dims2();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |ga| gemm(m, n, k, g, false, bv, true, ga, true));
                self.acc(grads, *b, |gb| gemm(k, m, n, av, true, g, false, gb, true));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).zip(bv).for_each(|((x, y), z)| *x += y * z)
                });
                self.acc(grads, *b, |gb| {
                    gb.iter_mut().zip(g).zip(av).for_each(|((x, y), z)| *x += y * z)
                });
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *row, |gr| {
                    for (i, v) in g.iter().enumerate() {
                        gr[i % c] += v;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a).data();
                let rv = self.value(*row).data();
                self.acc(grads, *a, |ga| {
                    for (i, v) in g.iter().enumerate() {
                        ga[i] += v * rv[i % c];
                    }
                });
                self.acc(grads, *row, |gr| {
                    for (i, v) in g.iter().enumerate() {
                        gr[i % c] += v * av[i];
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s)),
            Op::MulConst(a, m) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).zip(m).for_each(|((x, y), z)| *x += y * z))
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).zip(y).for_each(|((x, gv), yv)| *x += gv * (1.0 - yv * yv))
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(p, q)| p * q).sum();
                        for j in row {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % c] += v * xhat[i];
                    }
                });
                self.acc(grads, *shift, |gs| {
                    for (i, v) in g.iter().enumerate() {
                        gs[i % c] += v;
                    }
                });
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let base = i * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[base + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[base + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            gx[base + j] += rstd[i] * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gain, shift, xhat, rstd } => {
                let gv = self.value(*gain).data();
                self.acc(grads, *gain, |gg| {
                    for (i, v) in g.iter().enumerate() {
                        gg[i % c] += v * xhat[i];
                    }
                });
                self.acc(grads, *shift, |gs| {
                    for (i, v) in g.iter().enumerate() {
                        gs[i % c] += v;
                    }
                });
                self.acc(grads, *x, |gx| {
                    for j in 0..c {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..r {
                            let d = g[i * c + j] * gv[j];
                            m1 += d;
                            m2 += d * xhat[i * c + j];
                        }
                        m1 /= r as f64;
                        m2 /= r as f64;
                        for i in 0..r {
                            let d = g[i * c + j] * gv[j];
                            gx[i * c + j] += rstd[j] * (d - m1 - xhat[i * c + j] * m2);
                        }
                    }
                });
            }
            Op::Gather { src, map } => {
                self.acc(grads, *src, |gs| {
                    for (o, &m) in map.iter().enumerate() {
                        gs[m] += g[o];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    self.acc(grads, p, |gp| {
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * c + col + j];
                            }
                        }
                    });
                    col += pc;
                }
            }
            Op::MeanRows(a) => {
                let (ar, ac) = self.shape(*a);
                self.acc(grads, *a, |ga| {
                    for i in 0..ar {
                        for j in 0..ac {
                            ga[i * ac + j] += g[j] / ar as f64;
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::CrossEntropy { probs, labels, floor } => {
                let p = self.value(*probs);
                let b = labels.len() as f64;
                let pc = p.cols();
                self.acc(grads, *probs, |gp| {
                    for (i, &l) in labels.iter().enumerate() {
                        let y = p.at(i, l);
                        if y > *floor {
                            gp[i * pc + l] -= g[0] / (b * y);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_backward_simple() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let g = t.backward(c).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(3.0));
        let c = t.mul(a, b).unwrap();
        let g = t.backward(c).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn inference_tape_tracks_nothing() {
        let mut t = Tape::inference();
        let a = t.leaf(Tensor::scalar(2.0));
        let b = t.tanh(a);
        let g = t.backward(b).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::row(vec![0.5, 0.5]));
        assert!(matches!(t.cross_entropy(p, &[2], 1e-12), Err(Error::Data(_))));
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0]));
        let g = t.constant(Tensor::row(vec![1.0, 1.0]));
        let s = t.constant(Tensor::row(vec![0.0, 0.0]));
        assert!(matches!(t.batch_norm(x, g, s, 1e-5), Err(Error::Degenerate(_))));
    }
}
