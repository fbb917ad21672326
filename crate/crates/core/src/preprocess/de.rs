use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::segment::{hann, Segment};
use crate::error::{Error, Result};

/// Frequency band `[low, high)` in Hz; a band whose upper edge reaches the
/// Nyquist frequency includes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

impl Band {
    pub fn new(name: &str, low: f64, high: f64) -> Self {
        Self { name: name.to_string(), low, high }
    }
}

/// delta, theta, alpha, beta, gamma.
pub fn standard_bands() -> Vec<Band> {
    vec![
        Band::new("delta", 1.0, 4.0),
        Band::new("theta", 4.0, 8.0),
        Band::new("alpha", 8.0, 14.0),
        Band::new("beta", 14.0, 31.0),
        Band::new("gamma", 31.0, 50.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeConfig {
    pub bands: Vec<Band>,
    /// STFT frame length in seconds.
    pub frame_s: f64,
    /// Fractional overlap between consecutive frames.
    pub overlap: f64,
    /// Lower clamp on band variance before the logarithm.
    pub power_floor: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self { bands: standard_bands(), frame_s: 1.0, overlap: 0.5, power_floor: 1e-12 }
    }
}

/// Per-channel DE values of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentDe {
    /// `channels × bands`, in nats.
    pub values: Vec<Vec<f64>>,
    /// Set when some band variance hit the floor.
    pub floored: bool,
}

/// Band variances of every channel of `seg`, estimated from Hann-framed STFT
/// power averaged over frames and normalised by the combined taper energy so
/// that a stationary signal's estimate is independent of the windows used.
pub fn band_variances(seg: &Segment, fs: f64, cfg: &DeConfig) -> Result<Vec<Vec<f64>>> {
    let m = seg.end - seg.start;
    let frame = (cfg.frame_s * fs).round() as usize;
    if frame == 0 || frame > m {
        return Err(Error::Config(format!("STFT frame of {frame} samples for a {m}-sample segment")));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::Config(format!("STFT overlap {}", cfg.overlap)));
    }
    let hop = ((frame as f64) * (1.0 - cfg.overlap)).round().max(1.0) as usize;
    let starts: Vec<usize> = (0..).map(|j| j * hop).take_while(|s| s + frame <= m).collect();
    let win = hann(frame);
    let nyq = fs / 2.0;
    let bins: Vec<Vec<(usize, f64)>> = cfg
        .bands
        .iter()
        .map(|b| {
            (0..=frame / 2)
                .filter(|&k| {
                    let f = k as f64 * fs / frame as f64;
                    f >= b.low && (f < b.high || (b.high >= nyq && f <= nyq))
                })
                .map(|k| (k, if k == 0 || (frame % 2 == 0 && k == frame / 2) { 1.0 } else { 2.0 }))
                .collect()
        })
        .collect();
    let energy: f64 = starts
        .iter()
        .map(|&s| (0..frame).map(|i| (seg.taper[s + i] * win[i]).powi(2)).sum::<f64>())
        .sum::<f64>()
        * frame as f64;
    if energy <= 0.0 {
        return Err(Error::Degenerate("segment taper has no energy".into()));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame);
    let mut buf = vec![Complex64::new(0.0, 0.0); frame];
    Ok(seg
        .data
        .iter()
        .map(|ch| {
            let mut acc = vec![0.0; cfg.bands.len()];
            for &s in &starts {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(ch[s + i] * win[i], 0.0);
                }
                fft.process(&mut buf);
                for (a, band) in acc.iter_mut().zip(&bins) {
                    *a += band.iter().map(|&(k, w)| w * buf[k].norm_sqr()).sum::<f64>();
                }
            }
            acc.into_iter().map(|a| a / energy).collect()
        })
        .collect())
}

/// Gaussian differential entropy `½ ln(2πe σ²)` per channel and band.
pub fn de_features(seg: &Segment, fs: f64, cfg: &DeConfig) -> Result<SegmentDe> {
    let vars = band_variances(seg, fs, cfg)?;
    let mut floored = false;
    let values = vars
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|v| {
                    if v < cfg.power_floor {
                        floored = true;
                    }
                    gaussian_de(v.max(cfg.power_floor))
                })
                .collect()
        })
        .collect();
    Ok(SegmentDe { values, floored })
}

pub fn gaussian_de(variance: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * variance).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::segment::segment;
    use crate::preprocess::RawRecording;

    fn seg_of(ch: Vec<f64>) -> Segment {
        let rec = RawRecording::new(vec![ch], 200.0, vec!["X".into()]).unwrap();
        segment(&rec, 4.0).segments.remove(0)
    }

    #[test]
    fn zero_signal_is_floored() {
        let de = de_features(&seg_of(vec![0.0; 800]), 200.0, &DeConfig::default()).unwrap();
        assert!(de.floored);
        assert!(de.values[0].iter().all(|&v| (v - gaussian_de(1e-12)).abs() < 1e-12));
    }

    #[test]
    fn scaling_by_two_adds_ln2() {
        let ch: Vec<f64> = (0..800).map(|i| ((i * 7919) % 113) as f64 / 50.0 - 1.1).collect();
        let cfg = DeConfig::default();
        let a = de_features(&seg_of(ch.clone()), 200.0, &cfg).unwrap();
        let b = de_features(&seg_of(ch.iter().map(|v| 2.0 * v).collect()), 200.0, &cfg).unwrap();
        for (x, y) in a.values[0].iter().zip(&b.values[0]) {
            assert!((y - x - 2f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_longer_than_segment_rejected() {
        let cfg = DeConfig { frame_s: 5.0, ..Default::default() };
        assert!(de_features(&seg_of(vec![1.0; 800]), 200.0, &cfg).is_err());
    }
}
