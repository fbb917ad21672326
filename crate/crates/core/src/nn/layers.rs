use super::param::{ParamId, ParamStore};
use super::rng::RngState;
use super::tape::Var;
use super::tensor::Tensor;
use super::Ctx;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.1;
const BN_MOMENTUM: f64 = 0.1;

/// Affine map along the trailing axis: `x · W + b`, with `W` stored
/// `d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!("{name}: zero-width linear layer")));
        }
        let weight = store.register_uniform(&format!("{name}.weight"), &[d_in, d_out], d_in, rng)?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), Tensor::zeros(&[1, d_out]), true)?)
        } else {
            None
        };
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (r, c) = ctx.tape.shape(x);
        if c != self.d_in {
            return Err(Error::Shape(format!(
                "linear: input {r}x{c} vs weight {}x{}",
                self.d_in, self.d_out
            )));
        }
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-row normalisation with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Shape(format!("{name}: layer norm over zero features")));
        }
        let gain = store.register(&format!("{name}.gain"), Tensor::filled(&[1, d], 1.0), true)?;
        let shift = store.register(&format!("{name}.shift"), Tensor::zeros(&[1, d]), true)?;
        Ok(Self { gain, shift, eps: LN_EPS })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gain);
        let s = ctx.param(self.shift);
        ctx.tape.layer_norm(x, g, s, self.eps)
    }
}

/// Dropout mask with survivors pre-scaled by `1 / (1 - rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect())
}

/// Identity outside training mode.
pub fn dropout(ctx: &mut Ctx, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !ctx.training() || rate == 0.0 {
        return Ok(x);
    }
    let n = ctx.value(x).len();
    let mask = dropout_mask(n, rate, ctx.rng()?)?;
    ctx.tape.mul_const(x, mask)
}

/// Scaled dot-product attention with `heads` parallel heads of width
/// `d / heads`, concatenated and mixed by an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut RngState) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{name}: width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), width, width, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), width, width, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), width, width, true, rng)?,
            heads,
            width,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Returns the projected output and each head's `L_q × L_k` attention
    /// probabilities.
    pub fn forward(&self, ctx: &mut Ctx, q_in: Var, kv_in: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(ctx, q_in)?;
        let k = self.key.forward(ctx, kv_in)?;
        let v = self.value.forward(ctx, kv_in)?;
        let dk = self.head_width();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    ctx.tape.slice_cols(q, lo, hi)?,
                    ctx.tape.slice_cols(k, lo, hi)?,
                    ctx.tape.slice_cols(v, lo, hi)?,
                )
            };
            let kt = ctx.tape.transpose(kh)?;
            let scores = ctx.tape.matmul(qh, kt)?;
            let scores = ctx.tape.scale(scores, scale);
            let p = ctx.tape.softmax_rows(scores);
            outs.push(ctx.tape.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.tape.concat_cols(&outs)? };
        Ok((self.output.forward(ctx, cat)?, probs))
    }
}

/// `LayerNorm(Dropout(MHA(X')) + X')` with `X' = LayerNorm(X)`; the
/// sequence axis is the row axis.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm_in: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm_out: LayerNorm,
    pub dropout: f64,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        dropout: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("{name}: dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            norm_in: LayerNorm::new(store, &format!("{name}.norm_in"), width)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.mha"), width, heads, rng)?,
            norm_out: LayerNorm::new(store, &format!("{name}.norm_out"), width)?,
            dropout,
        })
    }

    pub fn width(&self) -> usize {
        self.attention.width
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(ctx, x)?.0)
    }

    pub fn forward_with_attention(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Vec<Var>)> {
        let (_, c) = ctx.tape.shape(x);
        if c != self.width() {
            return Err(Error::Shape(format!("attention block: width {c} vs {}", self.width())));
        }
        let xn = self.norm_in.forward(ctx, x)?;
        let (a, probs) = self.attention.forward(ctx, xn, xn)?;
        let a = dropout(ctx, a, self.dropout)?;
        let sum = ctx.tape.add(a, xn)?;
        Ok((self.norm_out.forward(ctx, sum)?, probs))
    }
}

/// Column-wise normalisation over the batch with running statistics kept
/// as non-trainable parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(&format!("{name}.gain"), Tensor::filled(&[1, d], 1.0), true)?,
            shift: store.register(&format!("{name}.shift"), Tensor::zeros(&[1, d]), true)?,
            running_mean: store.register(&format!("{name}.running_mean"), Tensor::zeros(&[1, d]), false)?,
            running_var: store.register(&format!("{name}.running_var"), Tensor::filled(&[1, d], 1.0), false)?,
            eps: LN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gain);
        let s = ctx.param(self.shift);
        if ctx.training() {
            let (y, mean, var) = ctx.tape.batch_norm(x, g, s, self.eps)?;
            let b = ctx.tape.shape(x).0 as f64;
            let m = self.momentum;
            let old_mean = ctx.store().value(self.running_mean).data().to_vec();
            let old_var = ctx.store().value(self.running_var).data().to_vec();
            let new_mean = old_mean.iter().zip(&mean).map(|(o, n)| (1.0 - m) * o + m * n).collect();
            let new_var = old_var
                .iter()
                .zip(&var)
                .map(|(o, v)| (1.0 - m) * o + m * v * b / (b - 1.0))
                .collect();
            ctx.push_stat_update(self.running_mean, Tensor::row(new_mean));
            ctx.push_stat_update(self.running_var, Tensor::row(new_var));
            Ok(y)
        } else {
            let mean = ctx.store().value(self.running_mean).map(|v| -v);
            let rstd = ctx.store().value(self.running_var).map(|v| 1.0 / (v + self.eps).sqrt());
            let mean = ctx.tape.constant(mean);
            let rstd = ctx.tape.constant(rstd);
            let centred = ctx.tape.add_row(x, mean)?;
            let normed = ctx.tape.mul_row(centred, rstd)?;
            let scaled = ctx.tape.mul_row(normed, g)?;
            ctx.tape.add_row(scaled, s)
        }
    }
}

/// Fixed sine/cosine encodings for the given integer positions.
pub fn sinusoidal_positions(positions: &[usize], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * width);
    for &p in positions {
        for j in 0..width {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
            let angle = p as f64 * freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(positions.len().max(1), width, data).expect("position table")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn store_rng() -> (ParamStore, RngState) {
        (ParamStore::new(), RngState::new(1))
    }

    #[test]
    fn linear_examples() {
        let (mut store, mut rng) = store_rng();
        let lin = Linear::new(&mut store, "l", 2, 2, false, &mut rng).unwrap();
        store.set_value(lin.weight, Tensor::matrix(2, 2, vec![2., 3., 5., 7.]).unwrap()).unwrap();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::row(vec![1., 0.]));
        let y = lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.value(y).data(), &[2., 3.]);

        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::row(vec![1., 2., 3.]));
        let err = lin.forward(&mut ctx, x).unwrap_err();
        assert!(err.to_string().contains("1x3") && err.to_string().contains("2x2"));
    }

    #[test]
    fn layer_norm_examples() {
        let (mut store, _) = store_rng();
        let ln = LayerNorm::new(&mut store, "ln", 3).unwrap();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::row(vec![5., 5., 5.]));
        let y = ln.forward(&mut ctx, x).unwrap();
        assert!(ctx.value(y).data().iter().all(|v| *v == 0.0));

        let ln2 = LayerNorm::new(&mut store, "ln2", 2).unwrap();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.tape.constant(Tensor::row(vec![1., 3.]));
        let y = ln2.forward(&mut ctx, x).unwrap();
        // variance 1, so xhat = ±1/sqrt(1 + eps)
        let want = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((ctx.value(y).data()[0] + want).abs() < 1e-12);
        assert!((ctx.value(y).data()[1] - want).abs() < 1e-12);

        assert!(matches!(LayerNorm::new(&mut store, "bad", 0), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let (store, mut rng) = store_rng();
        let mut ctx = Ctx::train(&store, &mut rng);
        let x = ctx.tape.constant(Tensor::row(vec![1., 2., 3.]));
        assert_eq!(dropout(&mut ctx, x, 0.0).unwrap(), x);
        assert!(matches!(dropout(&mut ctx, x, 1.0), Err(Error::Config(_))));

        let mut ctx = Ctx::new(&store, Mode::Check, None);
        let x = ctx.tape.constant(Tensor::row(vec![1., 2., 3.]));
        assert_eq!(dropout(&mut ctx, x, 0.7).unwrap(), x);
    }

    #[test]
    fn dropout_masks_reproducible() {
        let a = dropout_mask(1000, 0.3, &mut RngState::new(5)).unwrap();
        let b = dropout_mask(1000, 0.3, &mut RngState::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mha_requires_divisible_width() {
        let (mut store, mut rng) = store_rng();
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "m", 10, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_norm_two_rows() {
        let (mut store, mut rng) = store_rng();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        let mut ctx = Ctx::train(&store, &mut rng);
        let x = ctx.tape.constant(Tensor::matrix(2, 1, vec![0., 2.]).unwrap());
        let y = bn.forward(&mut ctx, x).unwrap();
        let want = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((ctx.value(y).data()[0] + want).abs() < 1e-12);
        assert!((ctx.value(y).data()[1] - want).abs() < 1e-12);
        assert_eq!(ctx.take_stat_updates().len(), 2);
    }

    #[test]
    fn batch_norm_constant_column_is_zero_and_single_row_fails() {
        let (mut store, mut rng) = store_rng();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let mut ctx = Ctx::train(&store, &mut rng);
        let x = ctx.tape.constant(Tensor::matrix(3, 2, vec![4., 1., 4., 2., 4., 3.]).unwrap());
        let y = bn.forward(&mut ctx, x).unwrap();
        for r in 0..3 {
            assert_eq!(ctx.value(y).at(r, 0), 0.0);
        }
        let one = ctx.tape.constant(Tensor::row(vec![1., 2.]));
        assert!(matches!(bn.forward(&mut ctx, one), Err(Error::Degenerate(_))));
    }

    #[test]
    fn batch_norm_inference_uses_running_stats() {
        let (mut store, _) = store_rng();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        store.set_value(bn.running_mean, Tensor::row(vec![2.0])).unwrap();
        store.set_value(bn.running_var, Tensor::row(vec![4.0])).unwrap();
        let run = || {
            let mut ctx = Ctx::eval(&store);
            let x = ctx.tape.constant(Tensor::row(vec![6.0]));
            let y = bn.forward(&mut ctx, x).unwrap();
            ctx.value(y).data()[0]
        };
        let a = run();
        assert_eq!(a.to_bits(), run().to_bits());
        assert!((a - 4.0 / (4.0 + LN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(&[0, 1, 50], 8);
        assert_eq!(p.shape(), &[3, 8]);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.at(0, 0), 0.0);
        assert_eq!(p.at(0, 1), 1.0);
    }
}
