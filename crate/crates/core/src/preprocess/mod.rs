//! Raw EEG → differential-entropy feature tensors.
//!
//! Band-pass, notch, decimation, reverse-anchored Hann segmentation, STFT
//! band variances, DE, and grouping of consecutive windows into samples
//! with their matching raw spans.

mod de;
mod filter;
mod resample;
mod segment;

pub use de::{band_variances, de_features, gaussian_de, standard_bands, Band, DeConfig, SegmentDe};
pub use filter::{Biquad, Sos};
pub use resample::resample;
pub use segment::{hann, reverse_windows, segment, Segment, Segmentation};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multichannel EEG, `channels × samples` in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub data: Vec<Vec<f64>>,
    pub fs: f64,
    pub channel_names: Vec<String>,
}

impl RawRecording {
    pub fn new(data: Vec<Vec<f64>>, fs: f64, channel_names: Vec<String>) -> Result<Self> {
        if !(fs > 0.0) {
            return Err(Error::Config(format!("sampling rate {fs} Hz")));
        }
        if channel_names.len() != data.len() {
            return Err(Error::Data(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                data.len()
            )));
        }
        if let Some(first) = data.first() {
            if data.iter().any(|c| c.len() != first.len()) {
                return Err(Error::Data("channels have different lengths".into()));
            }
        }
        Ok(Self { data, fs, channel_names })
    }

    /// Channels named `ch0`, `ch1`, ...
    pub fn unnamed(data: Vec<Vec<f64>>, fs: f64) -> Result<Self> {
        let names = (0..data.len()).map(|i| format!("ch{i}")).collect();
        Self::new(data, fs, names)
    }

    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass { low: f64, high: f64 },
    Notch { freq: f64, q: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub kind: FilterKind,
    pub order: usize,
}

impl FilterSpec {
    pub fn bandpass(low: f64, high: f64, order: usize) -> Self {
        Self { kind: FilterKind::Bandpass { low, high }, order }
    }

    pub fn notch(freq: f64, q: f64) -> Self {
        Self { kind: FilterKind::Notch { freq, q }, order: 2 }
    }
}

/// Zero-phase band-pass.
pub fn bandpass(rec: &RawRecording, spec: &FilterSpec) -> Result<RawRecording> {
    match spec.kind {
        FilterKind::Bandpass { .. } => filter::apply(rec, spec),
        FilterKind::Notch { .. } => Err(Error::Config("bandpass called with a notch spec".into())),
    }
}

/// Zero-phase notch at `freq` Hz.
pub fn notch(rec: &RawRecording, freq: f64, q: f64) -> Result<RawRecording> {
    filter::apply(rec, &FilterSpec::notch(freq, q))
}

/// Differential-entropy features, `windows × bands × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeTensor {
    pub windows: usize,
    pub bands: usize,
    pub channels: usize,
    values: Vec<f64>,
}

impl DeTensor {
    pub fn new(windows: usize, bands: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if windows * bands * channels != values.len() || values.is_empty() {
            return Err(Error::Shape(format!(
                "DE tensor {windows}x{bands}x{channels} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DE tensor entry".into()));
        }
        Ok(Self { windows, bands, channels, values })
    }

    pub fn get(&self, n: usize, f: usize, c: usize) -> f64 {
        self.values[(n * self.bands + f) * self.channels + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// DE of one window plus the source range it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowFeatures {
    pub start: usize,
    pub end: usize,
    /// `channels × bands`.
    pub de: Vec<Vec<f64>>,
}

/// One training sample: grouped DE windows and the contiguous source span
/// they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedWindows {
    pub de: DeTensor,
    pub span: (usize, usize),
    /// Index of the sample's first window within the trial.
    pub first_window: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grouping {
    pub groups: Vec<GroupedWindows>,
    pub dropped: usize,
    pub warning: Option<String>,
}

/// Groups consecutive windows into samples of `group` windows each.
///
/// Grouping follows the same end anchoring as segmentation: the last
/// `group` windows form the last sample and any remainder is taken from
/// the trial head.
pub fn group_windows(windows: &[WindowFeatures], group: usize) -> Result<Grouping> {
    if group == 0 {
        return Err(Error::Config("group size 0".into()));
    }
    let n = windows.len() / group;
    if n == 0 {
        return Ok(Grouping {
            groups: Vec::new(),
            dropped: windows.len(),
            warning: Some(format!("{} windows cannot fill a group of {group}", windows.len())),
        });
    }
    let skip = windows.len() - n * group;
    let groups = windows[skip..]
        .chunks(group)
        .enumerate()
        .map(|(k, chunk)| {
            let channels = chunk[0].de.len();
            let bands = chunk[0].de.first().map_or(0, Vec::len);
            let mut values = Vec::with_capacity(group * bands * channels);
            for w in chunk {
                for f in 0..bands {
                    for c in 0..channels {
                        values.push(w.de[c][f]);
                    }
                }
            }
            Ok(GroupedWindows {
                de: DeTensor::new(group, bands, channels, values)?,
                span: (chunk[0].start, chunk[chunk.len() - 1].end),
                first_window: skip + k * group,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Grouping { groups, dropped: skip, warning: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub bandpass_low: f64,
    pub bandpass_high: f64,
    pub bandpass_order: usize,
    pub notch_freq: f64,
    pub notch_q: f64,
    pub target_fs: f64,
    pub window_s: f64,
    pub group: usize,
    pub de: DeConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bandpass_low: 0.1,
            bandpass_high: 70.0,
            bandpass_order: 4,
            notch_freq: 50.0,
            notch_q: 30.0,
            target_fs: 200.0,
            window_s: 4.0,
            group: 4,
            de: DeConfig::default(),
        }
    }
}

/// Output of the full chain for one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialFeatures {
    /// The filtered, decimated recording.
    pub signal: RawRecording,
    pub windows: Vec<WindowFeatures>,
    pub groups: Vec<GroupedWindows>,
    pub warnings: Vec<String>,
}

impl TrialFeatures {
    /// `channels × (span length)` slice of the processed signal.
    pub fn span(&self, g: &GroupedWindows) -> Vec<Vec<f64>> {
        self.signal.data.iter().map(|ch| ch[g.span.0..g.span.1].to_vec()).collect()
    }
}

/// Band-pass → notch → resample → segment → DE → group.
pub fn preprocess_trial(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<TrialFeatures> {
    let filtered = bandpass(rec, &FilterSpec::bandpass(cfg.bandpass_low, cfg.bandpass_high, cfg.bandpass_order))?;
    let filtered = notch(&filtered, cfg.notch_freq, cfg.notch_q)?;
    let signal = resample(&filtered, cfg.target_fs)?;
    let seg = segment(&signal, cfg.window_s);
    let mut warnings: Vec<String> = seg.warning.into_iter().collect();
    let mut windows = Vec::with_capacity(seg.segments.len());
    for s in &seg.segments {
        let de = de_features(s, signal.fs, &cfg.de)?;
        if de.floored {
            warnings.push(format!("zero band power floored in window {}..{}", s.start, s.end));
        }
        windows.push(WindowFeatures { start: s.start, end: s.end, de: de.values });
    }
    let grouping = group_windows(&windows, cfg.group)?;
    warnings.extend(grouping.warning);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(TrialFeatures { signal, windows, groups: grouping.groups, warnings })
}
