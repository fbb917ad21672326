//! Seeded synthetic corpus with class information in EEG band power on a
//! few designated channels and in the mean of the eye features.

use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::dataset::{default_channel_names, trial_samples, write_matrix_csv, Dataset, Manifest, TrialEntry};
use crate::error::{Error, Result};
use crate::nn::RngState;
use crate::preprocess::{PreprocessConfig, RawRecording};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub subjects: usize,
    pub trials_per_subject: usize,
    pub samples_per_trial: usize,
    pub channels: usize,
    /// Channels `0..signal_channels` carry the class-dependent band power.
    pub signal_channels: usize,
    pub separability: f64,
    /// Class band log-power boost per unit separability.
    pub eeg_effect: f64,
    /// Eye features per window; 0 disables the modality.
    pub eye_dim: usize,
    /// Norm of the eye class mean per unit separability.
    pub eye_effect: f64,
    /// Standard deviation of subject-level log-power and eye offsets.
    pub subject_spread: f64,
    /// Standard deviation of trial-level log-power and eye offsets.
    pub trial_spread: f64,
    pub fs: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            subjects: 10,
            trials_per_subject: 6,
            samples_per_trial: 5,
            channels: 62,
            signal_channels: 8,
            separability: 2.0,
            eeg_effect: 0.15,
            eye_dim: 8,
            eye_effect: 1.5,
            subject_spread: 0.3,
            trial_spread: 0.3,
            fs: 200.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.subjects == 0 || self.trials_per_subject == 0 || self.samples_per_trial == 0 {
            return Err(Error::Config("synthetic corpus needs ≥ 2 classes and at least one subject, trial and sample".into()));
        }
        if self.channels == 0 || self.signal_channels > self.channels {
            return Err(Error::Config(format!(
                "{} signal channels of {} channels",
                self.signal_channels, self.channels
            )));
        }
        if self.separability < 0.0 {
            return Err(Error::Config("separability must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.subjects * self.trials_per_subject * self.samples_per_trial
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    match n {
        3 => ["negative", "neutral", "positive"].map(String::from).to_vec(),
        5 => ["disgust", "fear", "sad", "neutral", "happy"].map(String::from).to_vec(),
        _ => (0..n).map(|k| format!("class{k}")).collect(),
    }
}

/// Band whose power class `k` raises.
pub fn class_band(k: usize, bands: usize) -> usize {
    (k + 1) % bands
}

/// One generated trial before preprocessing.
pub struct SynthTrial {
    pub recording: RawRecording,
    pub eye: Option<Vec<Vec<f64>>>,
    pub label: usize,
    pub subject: u32,
    pub trial: u32,
}

/// Generates every trial of the corpus; each trial lasts exactly
/// `samples_per_trial` groups of windows.
pub fn synth_trials(spec: &SynthSpec, pre: &PreprocessConfig, seed: u64) -> Result<Vec<SynthTrial>> {
    spec.validate()?;
    let windows = spec.samples_per_trial * pre.group;
    let win_len = (pre.window_s * spec.fs).round() as usize;
    let n = windows * win_len;
    let bands = &pre.de.bands;
    let root = RngState::new(seed);
    let mut means = root.fork(u64::MAX);
    let eye_means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.eye_dim).map(|_| means.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm * spec.eye_effect * spec.separability).collect()
        })
        .collect();
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(n);
    let names = default_channel_names(spec.channels);
    let mut out = Vec::with_capacity(spec.subjects * spec.trials_per_subject);
    for s in 0..spec.subjects {
        let mut srng = root.fork(1 + s as u64);
        let ch_gain: Vec<f64> = (0..spec.channels).map(|_| spec.subject_spread * srng.normal()).collect();
        let band_off: Vec<f64> = bands.iter().map(|_| spec.subject_spread * srng.normal()).collect();
        let eye_off: Vec<f64> = (0..spec.eye_dim).map(|_| spec.subject_spread * srng.normal()).collect();
        for t in 0..spec.trials_per_subject {
            let label = t % spec.classes;
            let mut rng = srng.fork(1000 + t as u64);
            let boost_band = class_band(label, bands.len());
            let mut data = Vec::with_capacity(spec.channels);
            for (c, gain) in ch_gain.iter().enumerate() {
                let log_band: Vec<f64> = (0..bands.len())
                    .map(|b| {
                        let mut v = gain + band_off[b] + spec.trial_spread * rng.normal();
                        if c < spec.signal_channels && b == boost_band {
                            v += spec.separability * spec.eeg_effect;
                        }
                        v
                    })
                    .collect();
                let mut spec_bins = vec![Complex::new(0.0, 0.0); n];
                for k in 1..=n / 2 {
                    let f = k as f64 * spec.fs / n as f64;
                    let mut log_p = -(1.0 + f / 5.0).ln();
                    if let Some(b) = bands.iter().position(|b| f >= b.low && f < b.high) {
                        log_p += log_band[b];
                    }
                    let amp = (0.5 * log_p).exp();
                    let z = if k == n / 2 && n % 2 == 0 {
                        Complex::new(amp * rng.normal(), 0.0)
                    } else {
                        Complex::new(amp * rng.normal(), amp * rng.normal()) * std::f64::consts::FRAC_1_SQRT_2
                    };
                    spec_bins[k] = z;
                    if k != n - k {
                        spec_bins[n - k] = z.conj();
                    }
                }
                ifft.process(&mut spec_bins);
                let scale = 1.0 / (n as f64).sqrt();
                data.push(spec_bins.iter().map(|z| z.re * scale).collect());
            }
            let eye = (spec.eye_dim > 0).then(|| {
                let trial_off: Vec<f64> = (0..spec.eye_dim).map(|_| spec.trial_spread * rng.normal()).collect();
                (0..windows)
                    .map(|_| {
                        (0..spec.eye_dim)
                            .map(|d| eye_means[label][d] + eye_off[d] + trial_off[d] + rng.normal())
                            .collect()
                    })
                    .collect()
            });
            out.push(SynthTrial {
                recording: RawRecording::new(data, spec.fs, names.clone())?,
                eye,
                label,
                subject: s as u32,
                trial: t as u32,
            });
        }
    }
    Ok(out)
}

/// Generates and preprocesses the corpus in memory.
pub fn synth_generate(spec: &SynthSpec, pre: &PreprocessConfig, keep_raw: bool, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(spec.sample_count());
    for t in synth_trials(spec, pre, seed)? {
        samples.extend(trial_samples(&t.recording, t.eye.as_deref(), t.label, t.subject, t.trial, pre, keep_raw)?);
    }
    Ok(Dataset {
        samples,
        class_names: class_names(spec.classes),
        channel_names: default_channel_names(spec.channels),
        eye_dim: (spec.eye_dim > 0).then_some(spec.eye_dim),
        fs: pre.target_fs,
    })
}

/// Writes the corpus as CSV files plus a manifest; returns the manifest path.
pub fn write_synth_corpus(spec: &SynthSpec, pre: &PreprocessConfig, seed: u64, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("eeg"))?;
    if spec.eye_dim > 0 {
        std::fs::create_dir_all(dir.join("eye"))?;
    }
    let mut trials = Vec::new();
    for t in synth_trials(spec, pre, seed)? {
        let stem = format!("s{:02}_t{:02}.csv", t.subject, t.trial);
        let eeg = PathBuf::from("eeg").join(&stem);
        write_matrix_csv(&dir.join(&eeg), &t.recording.data)?;
        let eye = match &t.eye {
            Some(rows) => {
                let p = PathBuf::from("eye").join(&stem);
                write_matrix_csv(&dir.join(&p), rows)?;
                Some(p)
            }
            None => None,
        };
        trials.push(TrialEntry {
            subject: t.subject,
            trial: t.trial,
            session: Some(1),
            label: t.label,
            eeg,
            eye,
            fs: None,
        });
    }
    let manifest = Manifest {
        name: "synthetic".into(),
        classes: class_names(spec.classes),
        fs: spec.fs,
        channels: Some(default_channel_names(spec.channels)),
        eye_dim: (spec.eye_dim > 0).then_some(spec.eye_dim),
        trials,
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
