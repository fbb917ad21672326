use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::attention::seed62_layout;
use crate::error::{Error, Result};
use crate::interlink::DeShape;
use crate::nn::Tensor;
use crate::preprocess::{preprocess_trial, DeTensor, PreprocessConfig, RawRecording};

/// One grouped sample with every modality that was available for it.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub de: DeTensor,
    /// Processed raw EEG covering the sample, `channels × samples`.
    pub raw_span: Option<Vec<Vec<f32>>>,
    /// `windows × eye_dim` features aligned with the DE windows.
    pub eye: Option<Tensor>,
    pub label: usize,
    pub subject: u32,
    pub trial: u32,
}

impl DatasetSample {
    pub fn raw_f64(&self) -> Option<Vec<Vec<f64>>> {
        self.raw_span.as_ref().map(|r| r.iter().map(|c| c.iter().map(|&v| v as f64).collect()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<DatasetSample>,
    pub class_names: Vec<String>,
    pub channel_names: Vec<String>,
    pub eye_dim: Option<usize>,
    /// Sampling rate of the processed signal.
    pub fs: f64,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn shape(&self) -> Result<DeShape> {
        self.samples.first().map(|s| DeShape::of(&s.de)).ok_or_else(|| Error::Data("empty dataset".into()))
    }

    pub fn has_raw(&self) -> bool {
        self.samples.iter().all(|s| s.raw_span.is_some())
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }
}

/// One recorded trial listed in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub subject: u32,
    pub trial: u32,
    #[serde(default)]
    pub session: Option<u32>,
    pub label: usize,
    /// CSV, one row per channel.
    pub eeg: PathBuf,
    /// CSV, one row per DE window.
    #[serde(default)]
    pub eye: Option<PathBuf>,
    #[serde(default)]
    pub fs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    pub classes: Vec<String>,
    pub fs: f64,
    #[serde(default)]
    pub channels: Option<Vec<String>>,
    #[serde(default)]
    pub eye_dim: Option<usize>,
    #[serde(default, rename = "trial")]
    pub trials: Vec<TrialEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Load(format!("{} row {}: {e}", path.display(), rows.len() + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_matrix_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Preprocesses one trial and cuts it into grouped samples, attaching the
/// eye rows of each sample's windows.
pub fn trial_samples(
    rec: &RawRecording,
    eye_rows: Option<&[Vec<f64>]>,
    label: usize,
    subject: u32,
    trial: u32,
    pre: &PreprocessConfig,
    keep_raw: bool,
) -> Result<Vec<DatasetSample>> {
    let feats = preprocess_trial(rec, pre)?;
    if let Some(rows) = eye_rows {
        if rows.len() != feats.windows.len() {
            return Err(Error::Data(format!(
                "subject {subject} trial {trial}: {} eye rows for {} windows",
                rows.len(),
                feats.windows.len()
            )));
        }
    }
    feats
        .groups
        .iter()
        .map(|g| {
            let eye = match eye_rows {
                Some(rows) => Some(Tensor::from_rows(&rows[g.first_window..g.first_window + pre.group])?),
                None => None,
            };
            let raw_span = keep_raw.then(|| feats.span(g).into_iter().map(|c| c.into_iter().map(|v| v as f32).collect()).collect());
            Ok(DatasetSample { de: g.de.clone(), raw_span, eye, label, subject, trial })
        })
        .collect()
}

/// Loads and preprocesses every trial of a manifest. Relative paths are
/// resolved against the manifest's directory.
pub fn load_dataset(path: &Path, pre: &PreprocessConfig, keep_raw: bool) -> Result<Dataset> {
    let m = Manifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if m.trials.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no trials", path.display())));
    }
    if m.classes.len() < 2 {
        return Err(Error::Config(format!("{}: at least two classes required", path.display())));
    }
    let mut samples = Vec::new();
    let mut channel_names = m.channels.clone();
    for t in &m.trials {
        let who = format!("subject {} trial {}", t.subject, t.trial);
        if t.label >= m.classes.len() {
            return Err(Error::Data(format!("{who}: label {} outside {} classes", t.label, m.classes.len())));
        }
        if let Some(fs) = t.fs {
            if fs != m.fs {
                return Err(Error::Data(format!("{who}: sampling rate {fs} Hz differs from manifest {} Hz", m.fs)));
            }
        }
        let data = read_matrix_csv(&base.join(&t.eeg)).map_err(|e| Error::Load(format!("{who}: {e}")))?;
        let names = channel_names.get_or_insert_with(|| default_channel_names(data.len())).clone();
        let rec = RawRecording::new(data, m.fs, names).map_err(|e| Error::Data(format!("{who}: {e}")))?;
        let eye = match &t.eye {
            Some(p) => {
                let rows = read_matrix_csv(&base.join(p)).map_err(|e| Error::Load(format!("{who}: {e}")))?;
                if let Some(d) = m.eye_dim {
                    if rows.iter().any(|r| r.len() != d) {
                        return Err(Error::Data(format!("{who}: eye rows must have {d} columns")));
                    }
                }
                if rows.is_empty() {
                    return Err(Error::Data(format!("{who}: empty eye-movement file")));
                }
                Some(rows)
            }
            None if m.eye_dim.is_some() => return Err(Error::Data(format!("{who}: eye features missing"))),
            None => None,
        };
        let s = trial_samples(&rec, eye.as_deref(), t.label, t.subject, t.trial, pre, keep_raw)
            .map_err(|e| Error::Data(format!("{who}: {e}")))?;
        samples.extend(s);
    }
    if samples.is_empty() {
        log::warn!("{}: no trial is long enough for one sample", path.display());
    }
    Ok(Dataset {
        samples,
        class_names: m.classes,
        channel_names: channel_names.unwrap_or_default(),
        eye_dim: m.eye_dim,
        fs: pre.target_fs,
    })
}

/// Standard 62-electrode names when the count matches, else `ch0, ch1, …`.
pub fn default_channel_names(n: usize) -> Vec<String> {
    let layout = seed62_layout();
    if n == layout.len() {
        layout.into_iter().map(|e| e.name).collect()
    } else {
        (0..n).map(|i| format!("ch{i}")).collect()
    }
}
