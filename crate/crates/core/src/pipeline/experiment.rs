//! End-to-end runs: data, split, optional encoder pretraining, training
//! over seeded repetitions, evaluation and the ablation matrix.

use serde::{Deserialize, Serialize};

use super::attention::seed62_layout;
use super::config::{Ablation, ExperimentConfig};
use super::dataset::{load_dataset, Dataset};
use super::metrics::{accuracy, Metrics};
use super::model::{audit_name, ModelSpec, MoodReader, Prepared};
use super::split::{split, Split};
use super::synth::synth_generate;
use super::train::{fit, predict_labels, FitData, TrainReport};
use crate::error::{Error, Result};
use crate::interlink::DeShape;
use crate::mbsm::{tokenize, FrozenEncoder, MbsmConfig, Pretrainer};
use crate::nn::RngState;

/// Loads the manifest named by the config, or generates the synthetic
/// corpus when there is none.
pub fn load_data(cfg: &ExperimentConfig, keep_raw: bool) -> Result<Dataset> {
    let ds = match &cfg.data.manifest {
        Some(path) => load_dataset(path, &cfg.preprocess, keep_raw)?,
        None => synth_generate(&cfg.data.synth, &cfg.preprocess, keep_raw, cfg.seed)?,
    };
    if ds.samples.is_empty() {
        return Err(Error::Data("dataset has no samples".into()));
    }
    Ok(ds)
}

pub fn split_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Split> {
    split(ds, cfg.train.split_ratio, cfg.train.split_by, cfg.seed)
}

/// Pretrains the masked-signal model on the raw spans of `idx`.
pub fn pretrain_encoder(cfg: &MbsmConfig, ds: &Dataset, idx: &[usize], seed: u64) -> Result<(Pretrainer, Vec<f64>)> {
    let corpus = idx
        .iter()
        .map(|&i| {
            let raw = ds.samples[i]
                .raw_f64()
                .ok_or_else(|| Error::Data("pretraining needs raw EEG spans".into()))?;
            tokenize(&raw, cfg.token_size)
        })
        .collect::<Result<Vec<_>>>()?;
    let channels = ds.shape()?.channels;
    let mut rng = RngState::new(seed).fork(0x6d62_736d);
    let mut p = Pretrainer::new(cfg, channels, &mut rng)?;
    let losses = p.run(&corpus, &mut rng)?;
    if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
        log::info!("pretraining loss {a:.4} -> {b:.4} over {} steps", losses.len());
    }
    Ok((p, losses))
}

/// Encoder for an arm that needs one: the configured checkpoint, else a
/// fresh pretraining run on the training split.
pub fn encoder_for(cfg: &ExperimentConfig, ds: &Dataset, train: &[usize]) -> Result<FrozenEncoder> {
    match &cfg.model.encoder_checkpoint {
        Some(path) => FrozenEncoder::load(path),
        None => pretrain_encoder(&cfg.mbsm, ds, train, cfg.seed)?.0.export_encoder(),
    }
}

pub fn model_spec(cfg: &ExperimentConfig, ablation: Ablation, ds: &Dataset, encoder: Option<&FrozenEncoder>) -> Result<ModelSpec> {
    let shape: DeShape = ds.shape()?;
    let encoder = match (ablation.encoder, encoder) {
        (false, _) => None,
        (true, Some(e)) => {
            let heads = e.encoder.blocks.first().map_or(1, |b| b.attention.heads);
            let c = MbsmConfig {
                token_size: e.token_size(),
                d_model: e.d_model(),
                encoder_depth: e.encoder.blocks.len(),
                heads,
                ..cfg.mbsm.clone()
            };
            Some((c, e.channels()))
        }
        (true, None) => return Err(Error::Config("encoder arm needs a pretrained encoder".into())),
    };
    Ok(ModelSpec {
        ablation,
        interlink: cfg.model.interlink.clone(),
        fusion: cfg.model.fusion.clone(),
        shape,
        eye_dim: ds.eye_dim,
        class_names: ds.class_names.clone(),
        encoder,
        fine_tune_encoder: cfg.model.fine_tune_encoder,
    })
}

pub fn prepare_all(model: &MoodReader, ds: &Dataset, idx: &[usize]) -> Result<Vec<Prepared>> {
    idx.iter().map(|&i| model.prepare(&ds.samples[i])).collect()
}

/// Deterministic inference over `idx`.
pub fn evaluate(model: &MoodReader, ds: &Dataset, idx: &[usize]) -> Result<Metrics> {
    if model.spec.classes() != ds.classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, data has {}",
            model.spec.classes(),
            ds.classes()
        )));
    }
    let inputs = prepare_all(model, ds, idx)?;
    Metrics::from_predictions(&predict_labels(model, &inputs)?, &ds.labels(idx), &ds.class_names)
}

/// One trained arm over every seeded repetition.
pub struct RunOutcome {
    pub arm: String,
    pub modules: Vec<String>,
    pub metrics: Metrics,
    /// Mean inference-mode accuracy on the training split.
    pub train_accuracy: f64,
    pub reports: Vec<TrainReport>,
    /// Model of the first repetition.
    pub model: MoodReader,
}

pub fn train_arm(
    cfg: &ExperimentConfig,
    ablation: Ablation,
    ds: &Dataset,
    sp: &Split,
    encoder: Option<&FrozenEncoder>,
) -> Result<RunOutcome> {
    let spec = model_spec(cfg, ablation, ds, encoder)?;
    let layout = seed62_layout();
    let train_labels = ds.labels(&sp.train);
    let test_labels = ds.labels(&sp.test);
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    let mut train_acc = Vec::new();
    let mut first: Option<MoodReader> = None;
    for r in 0..cfg.train.repeats.max(1) {
        let seed = cfg.seed.wrapping_add(r as u64);
        let mut model = MoodReader::new(spec.clone(), &mut RngState::new(seed).fork(1))?;
        if let (true, Some(e)) = (ablation.encoder, encoder) {
            model.load_encoder(e)?;
        }
        let train = prepare_all(&model, ds, &sp.train)?;
        let test = prepare_all(&model, ds, &sp.test)?;
        let snap_inputs = if test.is_empty() { &train } else { &test };
        let snapshots = (r == 0 && spec.shape.channels == layout.len()).then_some((snap_inputs.as_slice(), layout.as_slice()));
        let data = FitData {
            train: &train,
            train_labels: &train_labels,
            test: Some((&test, &test_labels)),
            snapshots,
        };
        let report = fit(&mut model, &data, &cfg.train, seed)?;
        train_acc.push(accuracy(&predict_labels(&model, &train)?, &train_labels));
        runs.push(Metrics::from_predictions(&predict_labels(&model, &test)?, &test_labels, &ds.class_names)?);
        reports.push(report);
        first.get_or_insert(model);
    }
    let model = first.ok_or_else(|| Error::Config("no repetitions".into()))?;
    Ok(RunOutcome {
        arm: ablation.to_string(),
        modules: model.modules(),
        metrics: Metrics::combine(&runs)?,
        train_accuracy: train_acc.iter().sum::<f64>() / train_acc.len() as f64,
        reports,
        model,
    })
}

/// Loads data, splits it, pretrains if needed and trains the configured arm.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(RunOutcome, Split)> {
    cfg.validate()?;
    let ablation = cfg.model.resolved_ablation()?;
    let ds = load_data(cfg, ablation.encoder)?;
    let sp = split_dataset(cfg, &ds)?;
    let encoder = if ablation.encoder { Some(encoder_for(cfg, &ds, &sp.train)?) } else { None };
    Ok((train_arm(cfg, ablation, &ds, &sp, encoder.as_ref())?, sp))
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub runs: Vec<f64>,
    pub train_accuracy: f64,
    /// Arm name recovered from the instantiated modules.
    pub audit: String,
    pub modules: Vec<String>,
}

/// Trains every named arm on one dataset and one split.
pub fn run_ablation(cfg: &ExperimentConfig, arms: &[String]) -> Result<(Vec<AblationRow>, Split)> {
    cfg.validate()?;
    let parsed = arms.iter().map(|a| Ablation::preset(a)).collect::<Result<Vec<_>>>()?;
    let need_raw = parsed.iter().any(|a| a.encoder);
    let ds = load_data(cfg, need_raw)?;
    let sp = split_dataset(cfg, &ds)?;
    let encoder = if need_raw { Some(encoder_for(cfg, &ds, &sp.train)?) } else { None };
    let mut rows = Vec::new();
    for (name, a) in arms.iter().zip(parsed) {
        log::info!("ablation arm {name}");
        let out = train_arm(cfg, a, &ds, &sp, encoder.as_ref())?;
        let audit = audit_name(&out.modules);
        if &audit != name {
            return Err(Error::Config(format!("arm {name} instantiated modules of {audit}: {:?}", out.modules)));
        }
        log::info!("modules of {name}: {}", out.modules.join(", "));
        rows.push(AblationRow {
            arm: name.clone(),
            accuracy: out.metrics.accuracy,
            accuracy_std: out.metrics.accuracy_std,
            runs: out.metrics.runs.clone(),
            train_accuracy: out.train_accuracy,
            audit,
            modules: out.modules,
        });
    }
    Ok((rows, sp))
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<18} {:>9} {:>8} {:>10}\n", "arm", "acc %", "std %", "train %");
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>9.2} {:>8.2} {:>10.2}\n",
            r.arm,
            100.0 * r.accuracy,
            100.0 * r.accuracy_std,
            100.0 * r.train_accuracy
        ));
    }
    s
}
