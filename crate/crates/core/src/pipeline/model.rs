//! The assembled classifier: spatial-temporal stack, optional raw-EEG
//! encoder and eye branch, multi-level or concatenation fusion.

use serde::{Deserialize, Serialize};

use super::config::{Ablation, FusionKind};
use super::dataset::DatasetSample;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::fusion::{Classifier, FinalFusion, FusionConfig, PairFusion, Stream, UnifiedProjection};
use crate::interlink::{to_reps, DeShape, EyeBranch, InterlinkConfig, SpatialTemporal};
use crate::mbsm::{tokenize, FrozenEncoder, MaskPattern, MbsmConfig, MbsmEncoder, TokenSequence};
use crate::nn::{Ctx, Linear, ParamStore, RngState, Tensor, Var};

/// Everything needed to rebuild a model; stored as checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub ablation: Ablation,
    pub interlink: InterlinkConfig,
    pub fusion: FusionConfig,
    pub shape: DeShape,
    pub eye_dim: Option<usize>,
    pub class_names: Vec<String>,
    /// Encoder hyperparameters and channel count, when the arm is on.
    pub encoder: Option<(MbsmConfig, usize)>,
    pub fine_tune_encoder: bool,
}

impl ModelSpec {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Debug)]
enum Head {
    Mlf { pair_st: PairFusion, pair_ee: Option<PairFusion>, last: FinalFusion },
    Cf { linear: Linear },
}

/// Model inputs derived once per sample.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub xs: Tensor,
    pub xt: Tensor,
    pub eye: Option<Tensor>,
    /// Tokens for a trainable encoder.
    pub tokens: Option<TokenSequence>,
    /// Cached latents of a frozen encoder.
    pub latent: Option<Tensor>,
}

/// Graph handles of one sample's forward pass.
pub struct SampleTrace {
    /// `1 × 2·D` input to the classifier.
    pub fused: Var,
    pub unified: Vec<(Stream, Var)>,
    /// `(c_a, c_b)` of every pair fusion.
    pub fusion_weights: Vec<(Var, Var)>,
    pub spatial_attention: Vec<Var>,
}

/// Shapes seen along the forward pass of one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeTrace {
    pub x_s: (usize, usize),
    pub x_t: (usize, usize),
    pub f_st: (usize, usize),
    pub f_ts: (usize, usize),
    pub unified: Vec<(Stream, (usize, usize))>,
    pub fused: (usize, usize),
    pub output: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct MoodReader {
    pub spec: ModelSpec,
    pub store: ParamStore,
    st: SpatialTemporal,
    proj_st: UnifiedProjection,
    proj_ts: UnifiedProjection,
    encoder: Option<(MbsmEncoder, UnifiedProjection)>,
    eye: Option<(EyeBranch, UnifiedProjection)>,
    head: Head,
    classifier: Classifier,
}

impl MoodReader {
    pub fn new(spec: ModelSpec, rng: &mut RngState) -> Result<Self> {
        let a = spec.ablation;
        a.validate()?;
        let d = spec.fusion.d_unified;
        let sh = spec.shape;
        let mut store = ParamStore::new();
        let st = SpatialTemporal::new(&mut store, "st", sh, &spec.interlink, a.interlink, rng)?;
        let proj_st = UnifiedProjection::new(&mut store, "proj_st", sh.channels, sh.spatial_width(), d, rng)?;
        let proj_ts = UnifiedProjection::new(&mut store, "proj_ts", sh.windows, sh.temporal_width(), d, rng)?;
        let encoder = if a.encoder {
            let (cfg, channels) = spec
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Config("encoder arm needs encoder hyperparameters".into()))?;
            if *channels != sh.channels {
                return Err(Error::Config(format!("encoder built for {channels} channels, data has {}", sh.channels)));
            }
            let enc = MbsmEncoder::new(&mut store, "encoder", cfg, *channels, rng)?;
            store.set_trainable_prefix("encoder.", spec.fine_tune_encoder);
            let proj = UnifiedProjection::pooled(&mut store, "proj_eeg", cfg.d_model, d, rng)?;
            Some((enc, proj))
        } else {
            None
        };
        let eye = if a.eye {
            let w = spec.eye_dim.ok_or_else(|| Error::Config("eye arm needs eye-movement features".into()))?;
            let branch = EyeBranch::new(&mut store, "eye", w, &spec.interlink, rng)?;
            let proj = UnifiedProjection::new(&mut store, "proj_eye", sh.windows, w, d, rng)?;
            Some((branch, proj))
        } else {
            None
        };
        let head = match a.fusion {
            FusionKind::Mlf => Head::Mlf {
                pair_st: PairFusion::new(&mut store, "fuse_st", d, rng)?,
                pair_ee: if a.encoder && a.eye { Some(PairFusion::new(&mut store, "fuse_ee", d, rng)?) } else { None },
                last: FinalFusion::new(&mut store, "fuse_final", d, spec.fusion.heads, rng)?,
            },
            FusionKind::Cf => {
                let k = 2 + a.encoder as usize + a.eye as usize;
                Head::Cf { linear: Linear::new(&mut store, "concat", k * d, 2 * d, true, rng)? }
            }
        };
        let classifier = Classifier::new(&mut store, "classifier", 2 * d, d, spec.classes(), rng)?;
        Ok(Self { spec, store, st, proj_st, proj_ts, encoder, eye, head, classifier })
    }

    /// Copies pretrained encoder weights into the model.
    pub fn load_encoder(&mut self, frozen: &FrozenEncoder) -> Result<()> {
        let (enc, _) = self.encoder.as_ref().ok_or_else(|| Error::Config("model has no encoder".into()))?;
        if frozen.channels() != enc.channels || frozen.token_size() != enc.token_size || frozen.d_model() != enc.d_model {
            return Err(Error::Config("pretrained encoder does not match the configured one".into()));
        }
        for p in frozen.store.iter() {
            let id = self
                .store
                .id(&p.name)
                .ok_or_else(|| Error::Load(format!("unexpected encoder parameter `{}`", p.name)))?;
            self.store.set_value(id, p.value.clone())?;
        }
        Ok(())
    }

    /// Names of the instantiated modules, in construction order.
    pub fn modules(&self) -> Vec<String> {
        let mut out = self.st.modules();
        out.push("spatial_projection".into());
        out.push("temporal_projection".into());
        if self.encoder.is_some() {
            out.push("mbsm_encoder".into());
            out.push("encoder_projection".into());
        }
        if self.eye.is_some() {
            out.push("eye_branch".into());
            out.push("eye_projection".into());
        }
        match &self.head {
            Head::Mlf { pair_ee, .. } => {
                out.push("pair_fusion[st]".into());
                if pair_ee.is_some() {
                    out.push("pair_fusion[ee]".into());
                }
                out.push("final_fusion".into());
            }
            Head::Cf { .. } => out.push("concat_fusion".into()),
        }
        out.push("classifier".into());
        out
    }

    pub fn prepare(&self, s: &DatasetSample) -> Result<Prepared> {
        let sh = self.spec.shape;
        if DeShape::of(&s.de) != sh {
            return Err(Error::Shape(format!("sample DE {:?} vs model {sh:?}", DeShape::of(&s.de))));
        }
        if s.label >= self.spec.classes() {
            return Err(Error::Data(format!("label {} outside {} classes", s.label, self.spec.classes())));
        }
        let (xs, xt) = to_reps(&s.de);
        let eye = match &self.eye {
            Some(_) => Some(s.eye.clone().ok_or_else(|| Error::Data("eye arm enabled but sample has no eye features".into()))?),
            None => None,
        };
        let (mut tokens, mut latent) = (None, None);
        if let Some((enc, _)) = &self.encoder {
            let raw = s.raw_f64().ok_or_else(|| Error::Data("encoder arm enabled but sample has no raw span".into()))?;
            let seq = tokenize(&raw, enc.token_size)?;
            if self.spec.fine_tune_encoder {
                tokens = Some(seq);
            } else {
                let mut ctx = Ctx::eval(&self.store);
                let v = enc.encode(&mut ctx, &seq, &MaskPattern::empty(seq.len()))?;
                latent = Some(ctx.value(v).clone());
            }
        }
        Ok(Prepared { xs, xt, eye, tokens, latent })
    }

    pub fn forward_sample(&self, ctx: &mut Ctx, p: &Prepared) -> Result<SampleTrace> {
        let xs = ctx.tape.constant(p.xs.clone());
        let xt = ctx.tape.constant(p.xt.clone());
        let st = self.st.forward(ctx, xs, xt)?;
        let f_st = self.proj_st.forward(ctx, st.f_st)?;
        let f_ts = self.proj_ts.forward(ctx, st.f_ts)?;
        let mut unified = vec![(Stream::SpatialTemporal, f_st), (Stream::TemporalSpatial, f_ts)];
        if let Some((enc, proj)) = &self.encoder {
            let lat = match (&p.latent, &p.tokens) {
                (Some(l), _) => ctx.tape.constant(l.clone()),
                (None, Some(seq)) => enc.encode(ctx, seq, &MaskPattern::empty(seq.len()))?,
                (None, None) => return Err(Error::Data("sample prepared without encoder input".into())),
            };
            unified.push((Stream::Eeg, proj.forward(ctx, lat)?));
        }
        if let Some((branch, proj)) = &self.eye {
            let e = p.eye.as_ref().ok_or_else(|| Error::Data("sample prepared without eye features".into()))?;
            let e = ctx.tape.constant(e.clone());
            let h = branch.forward(ctx, e)?;
            unified.push((Stream::Eye, proj.forward(ctx, h)?));
        }
        let mut fusion_weights = Vec::new();
        let fused = match &self.head {
            Head::Mlf { pair_st, pair_ee, last } => {
                let a = pair_st.forward(ctx, f_st, f_ts)?;
                fusion_weights.push((a.c_a, a.c_b));
                let rest: Vec<Var> = unified[2..].iter().map(|u| u.1).collect();
                let ee = match (pair_ee, rest.as_slice()) {
                    (Some(pf), [eeg, eye]) => {
                        let b = pf.forward(ctx, *eeg, *eye)?;
                        fusion_weights.push((b.c_a, b.c_b));
                        b.fused
                    }
                    (None, [one]) => *one,
                    _ => return Err(Error::Config("multi-level fusion needs one or two auxiliary streams".into())),
                };
                last.forward(ctx, a.fused, ee)?
            }
            Head::Cf { linear } => {
                let parts: Vec<Var> = unified.iter().map(|u| u.1).collect();
                let cat = ctx.tape.concat_cols(&parts)?;
                linear.forward(ctx, cat)?
            }
        };
        Ok(SampleTrace { fused, unified, fusion_weights, spatial_attention: st.spatial_attention })
    }

    /// `B × classes` probabilities and the per-sample traces.
    pub fn forward_batch(&self, ctx: &mut Ctx, batch: &[&Prepared]) -> Result<(Var, Vec<SampleTrace>)> {
        let traces = batch.iter().map(|p| self.forward_sample(ctx, p)).collect::<Result<Vec<_>>>()?;
        let rows: Vec<Var> = traces.iter().map(|t| t.fused).collect();
        let m = ctx.tape.concat_rows(&rows)?;
        Ok((self.classifier.forward(ctx, m)?, traces))
    }

    /// Class probabilities in inference mode.
    pub fn predict(&self, inputs: &[Prepared]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(inputs.len() * self.spec.classes());
        for chunk in inputs.chunks(64) {
            let mut ctx = Ctx::eval(&self.store);
            let refs: Vec<&Prepared> = chunk.iter().collect();
            let (p, _) = self.forward_batch(&mut ctx, &refs)?;
            rows.extend_from_slice(ctx.value(p).data());
        }
        Tensor::matrix(inputs.len(), self.spec.classes(), rows)
    }

    /// Per-head spatial attention of the last block for each input.
    pub fn spatial_attention(&self, inputs: &[Prepared]) -> Result<Vec<Vec<Tensor>>> {
        inputs
            .iter()
            .map(|p| {
                let mut ctx = Ctx::eval(&self.store);
                let xs = ctx.tape.constant(p.xs.clone());
                let xt = ctx.tape.constant(p.xt.clone());
                let out = self.st.forward(&mut ctx, xs, xt)?;
                Ok(out.spatial_attention.iter().map(|&v| ctx.value(v).clone()).collect())
            })
            .collect()
    }

    pub fn shape_trace(&self, p: &Prepared) -> Result<ShapeTrace> {
        let mut ctx = Ctx::eval(&self.store);
        let t = self.forward_sample(&mut ctx, p)?;
        let probs = self.classifier.forward(&mut ctx, t.fused)?;
        let xs = ctx.tape.constant(p.xs.clone());
        let xt = ctx.tape.constant(p.xt.clone());
        let st = self.st.forward(&mut ctx, xs, xt)?;
        Ok(ShapeTrace {
            x_s: p.xs.dims2(),
            x_t: p.xt.dims2(),
            f_st: ctx.tape.shape(st.f_st),
            f_ts: ctx.tape.shape(st.f_ts),
            unified: t.unified.iter().map(|&(s, v)| (s, ctx.tape.shape(v))).collect(),
            fused: ctx.tape.shape(t.fused),
            output: ctx.tape.shape(probs),
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::to_string(&self.spec).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Container::from_params(meta, &self.store))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let spec: ModelSpec =
            serde_json::from_str(&c.metadata).map_err(|e| Error::Load(format!("model checkpoint metadata: {e}")))?;
        let mut m = Self::new(spec, &mut RngState::new(0))?;
        c.load_params(&mut m.store)?;
        Ok(m)
    }

    /// Overwrites every parameter from a checkpoint of the same model.
    pub fn restore(&mut self, c: &Container) -> Result<()> {
        c.load_params(&mut self.store)
    }
}

/// Arm name implied by a module list, for checking a construction against
/// the preset it was built from.
pub fn audit_name(modules: &[String]) -> String {
    let has = |s: &str| modules.iter().any(|m| m.contains(s));
    let a = Ablation {
        interlink: has("interlink"),
        encoder: has("mbsm_encoder"),
        eye: has("eye_branch"),
        fusion: if has("final_fusion") { FusionKind::Mlf } else { FusionKind::Cf },
    };
    a.to_string()
}
