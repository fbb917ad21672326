//! Multi-level fusion of the feature streams and the classification head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interlink::auto_heads;
use crate::nn::{
    BatchNorm, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, RngState, Var,
    LOG_FLOOR,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub d_unified: usize,
    pub heads: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { d_unified: 32, heads: None }
    }
}

/// Origin of a unified feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    SpatialTemporal,
    TemporalSpatial,
    Eeg,
    Eye,
}

/// Layer norm over each row, flatten, linear map to `D_unified`.
/// With `pool` set the rows are averaged first, so any row count works.
#[derive(Clone, Debug)]
pub struct UnifiedProjection {
    pub norm: LayerNorm,
    pub linear: Linear,
    pub rows: usize,
    pub cols: usize,
    pub pool: bool,
}

impl UnifiedProjection {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, cols: usize, d: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), cols)?,
            linear: Linear::new(store, &format!("{name}.linear"), rows * cols, d, true, rng)?,
            rows,
            cols,
            pool: false,
        })
    }

    pub fn pooled(store: &mut ParamStore, name: &str, cols: usize, d: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self { pool: true, ..Self::new(store, name, 1, cols, d, rng)? })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (r, c) = ctx.tape.shape(x);
        if c != self.cols || (!self.pool && r != self.rows) {
            return Err(Error::Shape(format!("projection input {r}x{c} vs {}x{}", self.rows, self.cols)));
        }
        let x = if self.pool { ctx.tape.mean_rows(x) } else { x };
        let x = self.norm.forward(ctx, x)?;
        let flat = ctx.tape.reshape(x, 1, self.rows * self.cols)?;
        self.linear.forward(ctx, flat)
    }
}

/// Fused vector plus the per-dimension weights given to each operand.
pub struct PairOutput {
    pub fused: Var,
    pub c_a: Var,
    pub c_b: Var,
}

/// `c = softmax(F_a W_a, F_b W_b)` across the pair at every dimension,
/// output `c_a ⊙ F_a + c_b ⊙ F_b`.
#[derive(Clone, Debug)]
pub struct PairFusion {
    pub w_a: ParamId,
    pub w_b: ParamId,
    pub d: usize,
}

impl PairFusion {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            w_a: store.register_uniform(&format!("{name}.w_a"), &[d, d], d, rng)?,
            w_b: store.register_uniform(&format!("{name}.w_b"), &[d, d], d, rng)?,
            d,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, fa: Var, fb: Var) -> Result<PairOutput> {
        let (ra, ca) = ctx.tape.shape(fa);
        if (ra, ca) != ctx.tape.shape(fb) || ca != self.d {
            return Err(Error::Shape(format!(
                "pair fusion of {:?} and {:?} at width {}",
                (ra, ca),
                ctx.tape.shape(fb),
                self.d
            )));
        }
        let wa = ctx.param(self.w_a);
        let wb = ctx.param(self.w_b);
        let sa = ctx.tape.matmul(fa, wa)?;
        let sb = ctx.tape.matmul(fb, wb)?;
        let (c_a, c_b) = pair_softmax(ctx, sa, sb)?;
        let ta = ctx.tape.mul(c_a, fa)?;
        let tb = ctx.tape.mul(c_b, fb)?;
        Ok(PairOutput { fused: ctx.tape.add(ta, tb)?, c_a, c_b })
    }
}

/// Element-wise two-way softmax between equally shaped score matrices.
pub fn pair_softmax(ctx: &mut Ctx, sa: Var, sb: Var) -> Result<(Var, Var)> {
    let (r, c) = ctx.tape.shape(sa);
    let a = ctx.tape.reshape(sa, r * c, 1)?;
    let b = ctx.tape.reshape(sb, r * c, 1)?;
    let both = ctx.tape.concat_cols(&[a, b])?;
    let p = ctx.tape.softmax_rows(both);
    let pa = ctx.tape.slice_cols(p, 0, 1)?;
    let pb = ctx.tape.slice_cols(p, 1, 2)?;
    Ok((ctx.tape.reshape(pa, r, c)?, ctx.tape.reshape(pb, r, c)?))
}

/// Shared layer norm on both vectors, 2-token self-attention, flatten to
/// `1 × 2·D`.
#[derive(Clone, Debug)]
pub struct FinalFusion {
    pub norm: LayerNorm,
    pub attention: MultiHeadAttention,
    pub d: usize,
}

impl FinalFusion {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: Option<usize>, rng: &mut RngState) -> Result<Self> {
        let heads = heads.unwrap_or_else(|| auto_heads(d));
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.mha"), d, heads, rng)?,
            d,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, f_st: Var, f_ee: Var) -> Result<Var> {
        let pair = ctx.tape.concat_rows(&[f_st, f_ee])?;
        if ctx.tape.shape(pair) != (2, self.d) {
            return Err(Error::Shape(format!("final fusion expects two 1x{} vectors", self.d)));
        }
        let x = self.norm.forward(ctx, pair)?;
        let (m, _) = self.attention.forward(ctx, x, x)?;
        ctx.tape.reshape(m, 1, 2 * self.d)
    }
}

/// Batch norm, then linear/tanh/linear/tanh/linear and a softmax.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub norm: BatchNorm,
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub output: Linear,
    pub classes: usize,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d: usize, classes: usize, rng: &mut RngState) -> Result<Self> {
        if d < 2 || classes < 2 {
            return Err(Error::Config(format!("classifier needs D ≥ 2 and ≥ 2 classes (got {d}, {classes})")));
        }
        Ok(Self {
            norm: BatchNorm::new(store, &format!("{name}.bn"), d_in)?,
            hidden1: Linear::new(store, &format!("{name}.hidden1"), d_in, d, true, rng)?,
            hidden2: Linear::new(store, &format!("{name}.hidden2"), d, d / 2, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d / 2, classes, true, rng)?,
            classes,
        })
    }

    /// `B × classes` probabilities.
    pub fn forward(&self, ctx: &mut Ctx, m: Var) -> Result<Var> {
        let x = self.norm.forward(ctx, m)?;
        let x = self.hidden1.forward(ctx, x)?;
        let x = ctx.tape.tanh(x);
        let x = self.hidden2.forward(ctx, x)?;
        let x = ctx.tape.tanh(x);
        let x = self.output.forward(ctx, x)?;
        Ok(ctx.tape.softmax_rows(x))
    }
}

/// Mean cross-entropy of `probs` against integer labels.
pub fn loss(ctx: &mut Ctx, probs: Var, labels: &[usize]) -> Result<Var> {
    ctx.tape.cross_entropy(probs, labels, LOG_FLOOR)
}
