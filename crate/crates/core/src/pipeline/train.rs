//! Mini-batch training with per-epoch evaluation and attention snapshots.

use serde::{Deserialize, Serialize};

use super::attention::{channel_attention, AttentionMap, Electrode};
use super::config::TrainConfig;
use super::metrics::accuracy;
use super::model::{MoodReader, Prepared};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::fusion::loss;
use crate::nn::{cosine_lr, Adam, Ctx, RngState};

/// Tolerance of the online check that pair-fusion weights sum to one.
pub const FUSION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights the model holds after training.
    pub best_epoch: usize,
    pub snapshots: Vec<AttentionMap>,
    /// Fusion weight entries checked during training.
    pub fusion_checked: usize,
    pub fusion_max_deviation: f64,
}

/// Shuffled mini-batches; a trailing batch of one is merged into the
/// previous batch so batch normalisation always sees two rows.
pub fn batches(n: usize, size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap_or_default();
        if let Some(prev) = out.last_mut() {
            prev.extend(last);
        }
    }
    out
}

/// Training-set view plus where to take attention snapshots from.
pub struct FitData<'a> {
    pub train: &'a [Prepared],
    pub train_labels: &'a [usize],
    pub test: Option<(&'a [Prepared], &'a [usize])>,
    /// Inputs averaged into each attention snapshot, with their layout.
    pub snapshots: Option<(&'a [Prepared], &'a [Electrode])>,
}

/// Epochs after which snapshots are taken, tagged.
pub fn snapshot_epochs(epochs: usize) -> Vec<(&'static str, usize)> {
    let at = |f: f64| ((f * epochs as f64).round() as usize).clamp(1, epochs.max(1));
    vec![("init", 0), ("25pct", at(0.25)), ("50pct", at(0.5)), ("final", epochs)]
}

pub fn attention_snapshot(
    model: &MoodReader,
    inputs: &[Prepared],
    layout: &[Electrode],
    tag: &str,
    epoch: usize,
) -> Result<AttentionMap> {
    if inputs.is_empty() {
        return Err(Error::Data("no samples for the attention snapshot".into()));
    }
    let mut total = vec![0.0; model.spec.shape.channels];
    for heads in model.spatial_attention(inputs)? {
        for (t, v) in total.iter_mut().zip(channel_attention(&heads)?) {
            *t += v;
        }
    }
    let mean: Vec<f64> = total.iter().map(|v| v / inputs.len() as f64).collect();
    AttentionMap::new(tag, epoch, &mean, layout)
}

/// Trains `model` in place. On return the model holds the weights of the
/// epoch with the lowest mean training loss. A non-finite loss aborts the
/// run after restoring those weights.
pub fn fit(model: &mut MoodReader, data: &FitData, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    let n = data.train.len();
    if n < 2 || data.train_labels.len() != n {
        return Err(Error::Data(format!("{n} training inputs for {} labels; need at least 2", data.train_labels.len())));
    }
    let mut rng = RngState::new(seed).fork(0x7472_6169_6e);
    let mut adam = Adam::new(cfg.adam.clone(), &model.store);
    let per_epoch = batches(n, cfg.batch_size, &mut rng.fork(0)).len();
    let total = cfg.epochs * per_epoch;
    let marks = snapshot_epochs(cfg.epochs);
    let mut report = TrainReport::default();
    let snap = |model: &MoodReader, report: &mut TrainReport, epoch: usize| -> Result<()> {
        if let Some((inputs, layout)) = data.snapshots {
            for (tag, _) in marks.iter().filter(|(_, e)| *e == epoch) {
                report.snapshots.push(attention_snapshot(model, inputs, layout, tag, epoch)?);
            }
        }
        Ok(())
    };
    snap(model, &mut report, 0)?;
    let mut best: Option<(f64, Container)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in batches(n, cfg.batch_size, &mut rng) {
            let inputs: Vec<&Prepared> = batch.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.train_labels[i]).collect();
            let mut drop_rng = rng.fork(step as u64);
            let mut ctx = Ctx::train(&model.store, &mut drop_rng);
            let (probs, traces) = model.forward_batch(&mut ctx, &inputs)?;
            for (ca, cb) in traces.iter().flat_map(|t| &t.fusion_weights) {
                for (a, b) in ctx.value(*ca).data().iter().zip(ctx.value(*cb).data()) {
                    let dev = (a + b - 1.0).abs();
                    report.fusion_max_deviation = report.fusion_max_deviation.max(dev);
                    report.fusion_checked += 1;
                    if !(dev <= FUSION_TOLERANCE) {
                        return Err(Error::NonFinite(format!("fusion weights sum to {} at step {step}", a + b)));
                    }
                }
            }
            let l = loss(&mut ctx, probs, &labels)?;
            let value = ctx.value(l).data()[0];
            if !value.is_finite() {
                drop(ctx);
                if let Some((_, c)) = &best {
                    model.restore(c)?;
                }
                return Err(Error::NonFinite(format!(
                    "training loss {value} at step {step}; weights restored to epoch {}",
                    report.best_epoch
                )));
            }
            hits += ctx.value(probs).argmax_rows().iter().zip(&labels).filter(|(p, l)| p == l).count();
            let grads = ctx.param_grads(l)?;
            let stats = ctx.take_stat_updates();
            drop(ctx);
            for (id, g) in grads {
                model.store.accumulate_grad(id, &g);
            }
            for (id, t) in stats {
                model.store.set_value(id, t)?;
            }
            let lr = if cfg.cosine_decay { cosine_lr(cfg.adam.lr, step, total) } else { cfg.adam.lr };
            adam.step(&mut model.store, lr);
            report.losses.push(value);
            loss_sum += value * labels.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / n as f64;
        let test_accuracy = match data.test {
            Some((inputs, labels)) if !inputs.is_empty() => {
                Some(accuracy(&model.predict(inputs)?.argmax_rows(), labels))
            }
            _ => None,
        };
        let rec = EpochRecord { epoch, train_loss, train_accuracy: hits as f64 / n as f64, test_accuracy };
        log::info!(
            "epoch {epoch}/{} loss {train_loss:.4} train acc {:.3}{}",
            cfg.epochs,
            rec.train_accuracy,
            test_accuracy.map(|a| format!(" test acc {a:.3}")).unwrap_or_default()
        );
        report.epochs.push(rec);
        if best.as_ref().is_none_or(|(b, _)| train_loss < *b) {
            best = Some((train_loss, model.to_container()?));
            report.best_epoch = epoch;
        }
        snap(model, &mut report, epoch)?;
    }
    if let Some((_, c)) = &best {
        model.restore(c)?;
    }
    Ok(report)
}

/// Arg-max predictions of a trained model.
pub fn predict_labels(model: &MoodReader, inputs: &[Prepared]) -> Result<Vec<usize>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    Ok(model.predict(inputs)?.argmax_rows())
}
