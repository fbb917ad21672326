//! Spatial and temporal attention over DE representations, the interlink
//! blocks that cross-feed them, and the eye-movement branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, AttentionBlock, Ctx, Linear, MultiHeadAttention, ParamStore, RngState,
    Tensor, Var, DEFAULT_DROPOUT,
};
use crate::preprocess::DeTensor;

/// Largest head count not above 4 that divides `width`.
pub fn auto_heads(width: usize) -> usize {
    (1..=4.min(width)).rev().find(|h| width % h == 0).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterlinkConfig {
    /// Stacked (spatial block, temporal block, interlink pair) stages.
    pub depth: usize,
    pub spatial_heads: Option<usize>,
    pub temporal_heads: Option<usize>,
    pub eye_depth: usize,
    pub eye_heads: Option<usize>,
    pub dropout: f64,
}

impl Default for InterlinkConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            spatial_heads: None,
            temporal_heads: None,
            eye_depth: 2,
            eye_heads: None,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

/// DE tensor dimensions: `n` windows, `f` bands, `c` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeShape {
    pub windows: usize,
    pub bands: usize,
    pub channels: usize,
}

impl DeShape {
    pub fn of(de: &DeTensor) -> Self {
        Self { windows: de.windows, bands: de.bands, channels: de.channels }
    }

    pub fn spatial_width(&self) -> usize {
        self.windows * self.bands
    }

    pub fn temporal_width(&self) -> usize {
        self.channels * self.bands
    }

    /// Flat index into `X̂_T` (`N × C·F`) of each entry of `X̂_S` (`C × N·F`)
    /// in row-major order.
    fn spatial_from_temporal(&self) -> Vec<usize> {
        let (n, f, c) = (self.windows, self.bands, self.channels);
        let mut map = Vec::with_capacity(n * f * c);
        for ci in 0..c {
            for ni in 0..n {
                for fi in 0..f {
                    map.push(ni * c * f + ci * f + fi);
                }
            }
        }
        map
    }

    fn temporal_from_spatial(&self) -> Vec<usize> {
        let (n, f, c) = (self.windows, self.bands, self.channels);
        let mut map = Vec::with_capacity(n * f * c);
        for ni in 0..n {
            for ci in 0..c {
                for fi in 0..f {
                    map.push(ci * n * f + ni * f + fi);
                }
            }
        }
        map
    }
}

/// `(X̂_S, X̂_T)` with `X̂_S[c, n·F+f] = X̂_T[n, c·F+f] = X̂[n, f, c]`.
pub fn to_reps(de: &DeTensor) -> (Tensor, Tensor) {
    let (n, f, c) = (de.windows, de.bands, de.channels);
    let mut s = vec![0.0; n * f * c];
    let mut t = vec![0.0; n * f * c];
    for ni in 0..n {
        for fi in 0..f {
            for ci in 0..c {
                let v = de.get(ni, fi, ci);
                s[ci * n * f + ni * f + fi] = v;
                t[ni * c * f + ci * f + fi] = v;
            }
        }
    }
    (
        Tensor::matrix(c, n * f, s).expect("spatial shape"),
        Tensor::matrix(n, c * f, t).expect("temporal shape"),
    )
}

/// Inverse of the spatial half of [`to_reps`].
pub fn from_spatial(xs: &Tensor, shape: DeShape) -> Result<DeTensor> {
    let (n, f, c) = (shape.windows, shape.bands, shape.channels);
    if xs.shape() != [c, n * f] {
        return Err(Error::Shape(format!("spatial rep {:?} vs {c}x{}", xs.shape(), n * f)));
    }
    let mut v = vec![0.0; n * f * c];
    for ni in 0..n {
        for fi in 0..f {
            for ci in 0..c {
                v[(ni * f + fi) * c + ci] = xs.at(ci, ni * f + fi);
            }
        }
    }
    DeTensor::new(n, f, c, v)
}

/// One interlink block. The primary operand is mapped by a single linear
/// layer, the secondary is transpose-reshaped into the primary's row space
/// and passed through linear, tanh, linear; the two are stacked along the
/// sequence axis, attended jointly, and only the primary rows are kept.
#[derive(Clone, Debug)]
pub struct Interlink {
    pub primary: Linear,
    pub align_in: Linear,
    pub align_out: Linear,
    pub attention: MultiHeadAttention,
    rows: usize,
    width: usize,
    align_map: Vec<usize>,
}

impl Interlink {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        width: usize,
        heads: usize,
        align_map: Vec<usize>,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(Self {
            primary: Linear::new(store, &format!("{name}.primary"), width, width, true, rng)?,
            align_in: Linear::new(store, &format!("{name}.align_in"), width, width, true, rng)?,
            align_out: Linear::new(store, &format!("{name}.align_out"), width, width, true, rng)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.mha"), width, heads, rng)?,
            rows,
            width,
            align_map,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, primary: Var, secondary: Var) -> Result<Var> {
        Ok(self.forward_with_attention(ctx, primary, secondary)?.0)
    }

    pub fn forward_with_attention(&self, ctx: &mut Ctx, primary: Var, secondary: Var) -> Result<(Var, Vec<Var>)> {
        if ctx.tape.shape(primary) != (self.rows, self.width) {
            return Err(Error::Shape(format!(
                "interlink primary {:?} vs {}x{}",
                ctx.tape.shape(primary),
                self.rows,
                self.width
            )));
        }
        let p = self.primary.forward(ctx, primary)?;
        let aligned = ctx.tape.gather(secondary, self.rows, self.width, self.align_map.clone())?;
        let s = self.align_in.forward(ctx, aligned)?;
        let s = ctx.tape.tanh(s);
        let s = self.align_out.forward(ctx, s)?;
        let joint = ctx.tape.concat_rows(&[p, s])?;
        let (out, probs) = self.attention.forward(ctx, joint, joint)?;
        Ok((ctx.tape.slice_rows(out, 0, self.rows)?, probs))
    }
}

/// Output of the spatial-temporal stack for one sample.
pub struct StOutput {
    /// `C × N·F`.
    pub f_st: Var,
    /// `N × C·F`.
    pub f_ts: Var,
    /// Per-head `C × C` probabilities of the last spatial block.
    pub spatial_attention: Vec<Var>,
}

#[derive(Clone, Debug)]
struct Stage {
    spatial: AttentionBlock,
    temporal: AttentionBlock,
    links: Option<(Interlink, Interlink)>,
}

/// Parallel spatial and temporal attention with optional interlinking.
#[derive(Clone, Debug)]
pub struct SpatialTemporal {
    pub shape: DeShape,
    stages: Vec<Stage>,
    spatial_heads: usize,
    temporal_heads: usize,
}

impl SpatialTemporal {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shape: DeShape,
        cfg: &InterlinkConfig,
        interlinked: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("spatial-temporal depth must be at least 1".into()));
        }
        let (sw, tw) = (shape.spatial_width(), shape.temporal_width());
        let sh = cfg.spatial_heads.unwrap_or_else(|| auto_heads(sw));
        let th = cfg.temporal_heads.unwrap_or_else(|| auto_heads(tw));
        let mut stages = Vec::with_capacity(cfg.depth);
        for k in 0..cfg.depth {
            let spatial = AttentionBlock::new(store, &format!("{name}.spatial{k}"), sw, sh, cfg.dropout, rng)?;
            let temporal = AttentionBlock::new(store, &format!("{name}.temporal{k}"), tw, th, cfg.dropout, rng)?;
            let links = if interlinked {
                Some((
                    Interlink::new(store, &format!("{name}.link_s{k}"), shape.channels, sw, sh, shape.spatial_from_temporal(), rng)?,
                    Interlink::new(store, &format!("{name}.link_t{k}"), shape.windows, tw, th, shape.temporal_from_spatial(), rng)?,
                ))
            } else {
                None
            };
            stages.push(Stage { spatial, temporal, links });
        }
        Ok(Self { shape, stages, spatial_heads: sh, temporal_heads: th })
    }

    pub fn interlinked(&self) -> bool {
        self.stages[0].links.is_some()
    }

    pub fn heads(&self) -> (usize, usize) {
        (self.spatial_heads, self.temporal_heads)
    }

    /// Human-readable names of the instantiated sub-blocks.
    pub fn modules(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 0..self.stages.len() {
            out.push(format!("spatial_attention_block[{k}]"));
            out.push(format!("temporal_attention_block[{k}]"));
            if self.stages[k].links.is_some() {
                out.push(format!("spatial_interlink[{k}]"));
                out.push(format!("temporal_interlink[{k}]"));
            }
        }
        out
    }

    pub fn spatial_block(&self, k: usize) -> &AttentionBlock {
        &self.stages[k].spatial
    }

    pub fn temporal_block(&self, k: usize) -> &AttentionBlock {
        &self.stages[k].temporal
    }

    pub fn links(&self, k: usize) -> Option<&(Interlink, Interlink)> {
        self.stages[k].links.as_ref()
    }

    /// Runs every stage on `X̂_S` and `X̂_T`; window positions are added to
    /// the temporal input once, before the first stage.
    pub fn forward(&self, ctx: &mut Ctx, xs: Var, xt: Var) -> Result<StOutput> {
        let s = self.shape;
        if ctx.tape.shape(xs) != (s.channels, s.spatial_width()) || ctx.tape.shape(xt) != (s.windows, s.temporal_width()) {
            return Err(Error::Shape(format!(
                "reps {:?}/{:?} vs configured {s:?}",
                ctx.tape.shape(xs),
                ctx.tape.shape(xt)
            )));
        }
        let pos: Vec<usize> = (0..s.windows).collect();
        let pe = ctx.tape.constant(sinusoidal_positions(&pos, s.temporal_width()));
        let (mut a, mut b) = (xs, ctx.tape.add(xt, pe)?);
        let mut attn = Vec::new();
        for st in &self.stages {
            let (xs_out, probs) = st.spatial.forward_with_attention(ctx, a)?;
            let xt_out = st.temporal.forward(ctx, b)?;
            attn = probs;
            (a, b) = match &st.links {
                Some((ls, lt)) => (ls.forward(ctx, xs_out, xt_out)?, lt.forward(ctx, xt_out, xs_out)?),
                None => (xs_out, xt_out),
            };
        }
        Ok(StOutput { f_st: a, f_ts: b, spatial_attention: attn })
    }
}

/// Stack of temporal attention blocks over the eye-movement sequence.
#[derive(Clone, Debug)]
pub struct EyeBranch {
    pub blocks: Vec<AttentionBlock>,
    pub width: usize,
}

impl EyeBranch {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, cfg: &InterlinkConfig, rng: &mut RngState) -> Result<Self> {
        if cfg.eye_depth == 0 {
            return Err(Error::Config("eye branch needs at least one block".into()));
        }
        let heads = cfg.eye_heads.unwrap_or_else(|| auto_heads(width));
        let blocks = (0..cfg.eye_depth)
            .map(|k| AttentionBlock::new(store, &format!("{name}.block{k}"), width, heads, cfg.dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, width })
    }

    pub fn forward(&self, ctx: &mut Ctx, eye: Var) -> Result<Var> {
        let (rows, cols) = ctx.tape.shape(eye);
        if rows == 0 {
            return Err(Error::Data("empty eye-movement sequence".into()));
        }
        if cols != self.width {
            return Err(Error::Shape(format!("eye features of width {cols} vs {}", self.width)));
        }
        let pos: Vec<usize> = (0..rows).collect();
        let pe = ctx.tape.constant(sinusoidal_positions(&pos, self.width));
        let mut h = ctx.tape.add(eye, pe)?;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }
}
