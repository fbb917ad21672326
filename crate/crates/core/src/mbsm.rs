//! Masked brain-signal modelling: an asymmetric encoder/decoder pretrained
//! to reconstruct masked raw-EEG tokens, and the frozen encoder exported
//! from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{
    cosine_lr, sinusoidal_positions, Adam, AdamConfig, AttentionBlock, Ctx, Linear, Mode,
    ParamId, ParamStore, RngState, Tensor, Var,
};

const TARGET_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MbsmConfig {
    pub token_size: usize,
    pub d_model: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub dropout: f64,
    pub mask_ratio: f64,
    pub normalize_targets: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for MbsmConfig {
    fn default() -> Self {
        Self {
            token_size: 40,
            d_model: 128,
            encoder_depth: 6,
            decoder_depth: 2,
            heads: 4,
            dropout: 0.0,
            mask_ratio: 0.75,
            normalize_targets: true,
            steps: 200,
            batch_size: 8,
            adam: AdamConfig::default(),
        }
    }
}

impl MbsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_size == 0 {
            return Err(Error::Config("token size must be positive".into()));
        }
        if self.decoder_depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.encoder_depth <= self.decoder_depth {
            return Err(Error::Config(format!(
                "encoder depth {} must exceed decoder depth {}",
                self.encoder_depth, self.decoder_depth
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Raw span cut into `L` consecutive all-channel time slices.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `L × (channels · token_size)`; row `l` holds channel `c`'s samples at
    /// columns `c·token_size .. (c+1)·token_size`.
    pub tokens: Tensor,
    pub positions: Vec<usize>,
    pub token_size: usize,
    pub channels: usize,
    /// Sample offset of the span inside its source recording.
    pub source_start: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.token_size
    }

    /// Source sample range `[start, end)` covered by token `i`.
    pub fn token_bounds(&self, i: usize) -> (usize, usize) {
        let p = self.positions[i];
        (self.source_start + p * self.token_size, self.source_start + (p + 1) * self.token_size)
    }
}

/// Tokenizes `span` (channels × samples). Trailing samples that do not fill
/// a whole token are trimmed.
pub fn tokenize(span: &[Vec<f64>], token_size: usize) -> Result<TokenSequence> {
    let channels = span.len();
    let samples = span.first().map_or(0, Vec::len);
    if channels == 0 || span.iter().any(|c| c.len() != samples) {
        return Err(Error::Shape("span must have equal-length channels".into()));
    }
    if token_size == 0 || token_size > samples {
        return Err(Error::Config(format!("token size {token_size} vs span of {samples} samples")));
    }
    let len = samples / token_size;
    let dim = channels * token_size;
    let mut data = Vec::with_capacity(len * dim);
    for l in 0..len {
        for ch in span {
            data.extend_from_slice(&ch[l * token_size..(l + 1) * token_size]);
        }
    }
    Ok(TokenSequence {
        tokens: Tensor::matrix(len, dim, data)?,
        positions: (0..len).collect(),
        token_size,
        channels,
        source_start: 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPattern {
    /// Sorted row indices of masked tokens.
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub len: usize,
}

impl MaskPattern {
    pub fn empty(len: usize) -> Self {
        Self { masked: Vec::new(), ratio: 0.0, len }
    }

    pub fn visible(&self) -> Vec<usize> {
        let mut flags = vec![true; self.len];
        for &m in &self.masked {
            flags[m] = false;
        }
        (0..self.len).filter(|&i| flags[i]).collect()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// Uniformly random subset of exactly `round(ratio · len)` indices.
pub fn sample_mask(len: usize, ratio: f64, rng: &mut RngState) -> Result<MaskPattern> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio * len as f64).round() as usize;
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = i + rng.below(len - i);
        idx.swap(i, j);
    }
    let mut masked = idx[..count].to_vec();
    masked.sort_unstable();
    Ok(MaskPattern { masked, ratio, len })
}

/// Token embedding plus the deep attention stack.
#[derive(Clone, Debug)]
pub struct MbsmEncoder {
    pub embed: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub d_model: usize,
    pub token_size: usize,
    pub channels: usize,
}

impl MbsmEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &MbsmConfig, channels: usize, rng: &mut RngState) -> Result<Self> {
        let dim = channels * cfg.token_size;
        let embed = Linear::new(store, &format!("{prefix}.embed"), dim, cfg.d_model, true, rng)?;
        let blocks = (0..cfg.encoder_depth)
            .map(|i| AttentionBlock::new(store, &format!("{prefix}.block{i}"), cfg.d_model, cfg.heads, cfg.dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self { embed, blocks, d_model: cfg.d_model, token_size: cfg.token_size, channels })
    }

    /// Latents for the visible tokens only, in visible-row order.
    pub fn encode(&self, ctx: &mut Ctx, seq: &TokenSequence, mask: &MaskPattern) -> Result<Var> {
        if seq.channels != self.channels || seq.token_size != self.token_size {
            return Err(Error::Shape(format!(
                "tokens of {}ch×{} vs encoder {}ch×{}",
                seq.channels, seq.token_size, self.channels, self.token_size
            )));
        }
        if mask.len != seq.len() {
            return Err(Error::Shape(format!("mask over {} tokens vs sequence of {}", mask.len, seq.len())));
        }
        let visible = mask.visible();
        if visible.is_empty() {
            return Err(Error::Degenerate("every token is masked".into()));
        }
        let dim = seq.token_dim();
        let rows: Vec<f64> = visible.iter().flat_map(|&i| seq.tokens.row_slice(i).to_vec()).collect();
        let x = ctx.tape.constant(Tensor::matrix(visible.len(), dim, rows)?);
        let x = self.embed.forward(ctx, x)?;
        let pos: Vec<usize> = visible.iter().map(|&i| seq.positions[i]).collect();
        let pe = ctx.tape.constant(sinusoidal_positions(&pos, self.d_model));
        let mut h = ctx.tape.add(x, pe)?;
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    }
}

/// Encoder, shallow decoder and learned mask token.
#[derive(Clone, Debug)]
pub struct MbsmModel {
    pub config: MbsmConfig,
    pub encoder: MbsmEncoder,
    pub decoder_embed: Linear,
    pub mask_token: ParamId,
    pub decoder: Vec<AttentionBlock>,
    pub head: Linear,
}

impl MbsmModel {
    pub fn new(store: &mut ParamStore, cfg: &MbsmConfig, channels: usize, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let encoder = MbsmEncoder::new(store, "encoder", cfg, channels, rng)?;
        let decoder_embed = Linear::new(store, "decoder.embed", d, d, true, rng)?;
        let mask_token = store.register_uniform("decoder.mask_token", &[1, d], d, rng)?;
        let decoder = (0..cfg.decoder_depth)
            .map(|i| AttentionBlock::new(store, &format!("decoder.block{i}"), d, cfg.heads, cfg.dropout, rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, "decoder.head", d, channels * cfg.token_size, true, rng)?;
        Ok(Self { config: cfg.clone(), encoder, decoder_embed, mask_token, decoder, head })
    }

    pub fn encode(&self, ctx: &mut Ctx, seq: &TokenSequence, mask: &MaskPattern) -> Result<Var> {
        self.encoder.encode(ctx, seq, mask)
    }

    /// All `L` token reconstructions from the visible latents.
    pub fn reconstruct(&self, ctx: &mut Ctx, latent: Var, seq: &TokenSequence, mask: &MaskPattern) -> Result<Var> {
        let visible = mask.visible();
        let (rows, _) = ctx.tape.shape(latent);
        if rows != visible.len() || mask.len != seq.len() {
            return Err(Error::Shape(format!(
                "{rows} latents vs {} visible of {} tokens",
                visible.len(),
                mask.len
            )));
        }
        let d = self.decoder_embed.forward(ctx, latent)?;
        let token = ctx.param(self.mask_token);
        let pool = ctx.tape.concat_rows(&[d, token])?;
        let mut order = vec![rows; mask.len];
        for (k, &i) in visible.iter().enumerate() {
            order[i] = k;
        }
        let full = ctx.tape.gather_rows(pool, &order)?;
        let pe = ctx.tape.constant(sinusoidal_positions(&seq.positions, self.config.d_model));
        let mut h = ctx.tape.add(full, pe)?;
        for b in &self.decoder {
            h = b.forward(ctx, h)?;
        }
        self.head.forward(ctx, h)
    }

    /// Mean squared error over masked tokens, `None` when nothing is masked.
    pub fn masked_loss(&self, ctx: &mut Ctx, seq: &TokenSequence, mask: &MaskPattern) -> Result<Option<Var>> {
        if mask.masked.is_empty() {
            return Ok(None);
        }
        let latent = self.encode(ctx, seq, mask)?;
        let recon = self.reconstruct(ctx, latent, seq, mask)?;
        let picked = ctx.tape.gather_rows(recon, &mask.masked)?;
        let target = masked_targets(seq, mask, self.config.normalize_targets)?;
        let target = ctx.tape.constant(target);
        let diff = ctx.tape.sub(picked, target)?;
        let sq = ctx.tape.mul(diff, diff)?;
        Ok(Some(ctx.tape.mean(sq)))
    }
}

/// Masked rows of `seq`, each optionally standardised to zero mean and unit
/// variance.
pub fn masked_targets(seq: &TokenSequence, mask: &MaskPattern, normalize: bool) -> Result<Tensor> {
    let dim = seq.token_dim();
    let mut data = Vec::with_capacity(mask.masked.len() * dim);
    for &i in &mask.masked {
        let row = seq.tokens.row_slice(i);
        if normalize {
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            let sd = (var + TARGET_VAR_FLOOR).sqrt();
            data.extend(row.iter().map(|v| (v - mean) / sd));
        } else {
            data.extend_from_slice(row);
        }
    }
    Tensor::matrix(mask.masked.len(), dim, data)
}

/// Model, parameters and optimizer state for a pretraining run.
pub struct Pretrainer {
    pub model: MbsmModel,
    pub store: ParamStore,
    pub adam: Adam,
    pub step: usize,
}

impl Pretrainer {
    pub fn new(cfg: &MbsmConfig, channels: usize, rng: &mut RngState) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = MbsmModel::new(&mut store, cfg, channels, rng)?;
        let adam = Adam::new(cfg.adam.clone(), &store);
        Ok(Self { model, store, adam, step: 0 })
    }

    /// Draws one mask per sequence, averages the masked losses and applies
    /// one optimizer update. An empty mask everywhere yields 0 and no update.
    pub fn pretrain_step(&mut self, batch: &[TokenSequence], rng: &mut RngState) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("empty pretraining batch".into()));
        }
        let cfg = &self.model.config;
        let masks = batch
            .iter()
            .map(|s| sample_mask(s.len(), cfg.mask_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut drop_rng = rng.fork(self.step as u64);
        let mut ctx = Ctx::new(&self.store, Mode::Train, Some(&mut drop_rng));
        let mut losses = Vec::new();
        for (seq, mask) in batch.iter().zip(&masks) {
            if let Some(l) = self.model.masked_loss(&mut ctx, seq, mask)? {
                losses.push(l);
            }
        }
        if losses.is_empty() {
            return Ok(0.0);
        }
        let stacked = ctx.tape.concat_rows(&losses)?;
        let loss = ctx.tape.mean(stacked);
        let value = ctx.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss {value} at step {}", self.step)));
        }
        let grads = ctx.param_grads(loss)?;
        drop(ctx);
        for (id, g) in grads {
            self.store.accumulate_grad(id, &g);
        }
        let lr = cosine_lr(cfg.adam.lr, self.step, cfg.steps);
        self.adam.step(&mut self.store, lr);
        self.step += 1;
        Ok(value)
    }

    /// Runs `config.steps` updates over `corpus`, cycling through shuffled
    /// mini-batches. Returns the loss trajectory.
    pub fn run(&mut self, corpus: &[TokenSequence], rng: &mut RngState) -> Result<Vec<f64>> {
        if corpus.is_empty() {
            return Err(Error::Data("empty pretraining corpus".into()));
        }
        let bs = self.model.config.batch_size.min(corpus.len());
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut cursor = order.len();
        let mut out = Vec::with_capacity(self.model.config.steps);
        while self.step < self.model.config.steps {
            let mut batch = Vec::with_capacity(bs);
            while batch.len() < bs {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                batch.push(corpus[order[cursor]].clone());
                cursor += 1;
            }
            let loss = self.pretrain_step(&batch, rng)?;
            log::debug!("pretrain step {} loss {loss:.6}", self.step);
            out.push(loss);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Container> {
        let meta = CheckpointMeta { config: self.model.config.clone(), channels: self.model.encoder.channels };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Container::from_params(json, &self.store))
    }

    pub fn export_encoder(&self) -> Result<FrozenEncoder> {
        FrozenEncoder::from_container(&self.checkpoint()?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: MbsmConfig,
    channels: usize,
}

/// Encoder detached from its decoder; extraction always uses an empty mask.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    pub encoder: MbsmEncoder,
    pub store: ParamStore,
}

impl FrozenEncoder {
    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&c.metadata).map_err(|e| Error::Load(format!("checkpoint metadata: {e}")))?;
        let mut store = ParamStore::new();
        let mut rng = RngState::new(0);
        let encoder = MbsmEncoder::new(&mut store, "encoder", &meta.config, meta.channels, &mut rng)?;
        c.load_prefixed(&mut store, "encoder.")?;
        Ok(Self { encoder, store })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn channels(&self) -> usize {
        self.encoder.channels
    }

    pub fn token_size(&self) -> usize {
        self.encoder.token_size
    }

    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    /// `L × d_model` latents for a raw span.
    pub fn extract(&self, span: &[Vec<f64>]) -> Result<Tensor> {
        let seq = tokenize(span, self.encoder.token_size)?;
        let mut ctx = Ctx::eval(&self.store);
        let out = self.encoder.encode(&mut ctx, &seq, &MaskPattern::empty(seq.len()))?;
        Ok(ctx.value(out).clone())
    }
}

/// Multichannel band-limited signals for pretraining. Each channel is a sum
/// of three harmonics of `fs / token_size` with random phases and amplitudes
/// plus a little white noise, so every token shares one waveform per span and
/// masked tokens are recoverable from the visible ones.
pub fn synthetic_spans(
    count: usize,
    channels: usize,
    samples: usize,
    fs: f64,
    token_size: usize,
    rng: &mut RngState,
) -> Vec<Vec<Vec<f64>>> {
    let base = fs / token_size as f64;
    let tau = std::f64::consts::TAU;
    (0..count)
        .map(|_| {
            (0..channels)
                .map(|_| {
                    let comps: Vec<(f64, f64, f64)> = (0..3)
                        .map(|_| {
                            let k = 1 + rng.below(5);
                            (base * k as f64, rng.uniform_in(0.0, tau), rng.uniform_in(0.5, 1.5))
                        })
                        .collect();
                    (0..samples)
                        .map(|i| {
                            let t = i as f64 / fs;
                            comps.iter().map(|&(f, ph, a)| a * (tau * f * t + ph).sin()).sum::<f64>()
                                + 0.05 * rng.normal()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}
