//! IIR filtering with second-order sections applied forward and backward.

use std::f64::consts::PI;

use super::{FilterKind, FilterSpec, RawRecording};
use crate::error::{Error, Result};

/// One second-order section, `a0` normalised to 1, evaluated in transposed
/// direct form II.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalised(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [a1 / a0, a2 / a0] }
    }

    pub fn lowpass(f0: f64, fs: f64, q: f64) -> Self {
        let (cw, alpha) = rbj(f0, fs, q);
        Self::normalised([(1.0 - cw) / 2.0, 1.0 - cw, (1.0 - cw) / 2.0], 1.0 + alpha, -2.0 * cw, 1.0 - alpha)
    }

    pub fn highpass(f0: f64, fs: f64, q: f64) -> Self {
        let (cw, alpha) = rbj(f0, fs, q);
        Self::normalised([(1.0 + cw) / 2.0, -(1.0 + cw), (1.0 + cw) / 2.0], 1.0 + alpha, -2.0 * cw, 1.0 - alpha)
    }

    pub fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let (cw, alpha) = rbj(f0, fs, q);
        Self::normalised([1.0, -2.0 * cw, 1.0], 1.0 + alpha, -2.0 * cw, 1.0 - alpha)
    }

    /// First-order sections stored as degenerate biquads.
    pub fn lowpass1(f0: f64, fs: f64) -> Self {
        let k = (PI * f0 / fs).tan();
        Self { b: [k / (1.0 + k), k / (1.0 + k), 0.0], a: [(k - 1.0) / (k + 1.0), 0.0] }
    }

    pub fn highpass1(f0: f64, fs: f64) -> Self {
        let k = (PI * f0 / fs).tan();
        Self { b: [1.0 / (1.0 + k), -1.0 / (1.0 + k), 0.0], a: [(k - 1.0) / (k + 1.0), 0.0] }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude of the frequency response at `f` Hz.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let nr = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let ni = -(self.b[1] * s1 + self.b[2] * s2);
        let dr = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let di = -(self.a[0] * s1 + self.a[1] * s2);
        ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
    }
}

fn rbj(f0: f64, fs: f64, q: f64) -> (f64, f64) {
    let w0 = 2.0 * PI * f0 / fs;
    (w0.cos(), w0.sin() / (2.0 * q))
}

/// Butterworth sections of order `m` (pairs of poles become biquads, an odd
/// pole a first-order section).
fn butterworth(m: usize, f0: f64, fs: f64, high: bool) -> Vec<Biquad> {
    let mut out = Vec::new();
    for k in 1..=m / 2 {
        let theta = PI * (2 * k + m - 1) as f64 / (2 * m) as f64;
        let q = -1.0 / (2.0 * theta.cos());
        out.push(if high { Biquad::highpass(f0, fs, q) } else { Biquad::lowpass(f0, fs, q) });
    }
    if m % 2 == 1 {
        out.push(if high { Biquad::highpass1(f0, fs) } else { Biquad::lowpass1(f0, fs) });
    }
    out
}

/// Cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Band-pass of total order `order`: a Butterworth high-pass at `low`
    /// cascaded with a Butterworth low-pass at `high`, each of order
    /// `order / 2`.
    pub fn bandpass(low: f64, high: f64, fs: f64, order: usize) -> Result<Self> {
        let nyq = fs / 2.0;
        if !(low > 0.0 && low < high && high < nyq) {
            return Err(Error::Config(format!(
                "band-pass edges {low}..{high} Hz need 0 < low < high < Nyquist ({nyq} Hz)"
            )));
        }
        if order < 2 || order % 2 != 0 {
            return Err(Error::Config(format!("band-pass order {order} must be even and ≥ 2")));
        }
        let mut sections = butterworth(order / 2, low, fs, true);
        sections.extend(butterworth(order / 2, high, fs, false));
        Ok(Self { sections })
    }

    pub fn notch(freq: f64, fs: f64, q: f64) -> Result<Self> {
        if !(freq > 0.0 && freq < fs / 2.0) {
            return Err(Error::Config(format!("notch at {freq} Hz must lie below Nyquist ({} Hz)", fs / 2.0)));
        }
        if q <= 0.0 {
            return Err(Error::Config(format!("notch quality {q} must be positive")));
        }
        Ok(Self { sections: vec![Biquad::notch(freq, fs, q)] })
    }

    /// Single-pass magnitude response.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        self.sections.iter().map(|s| s.magnitude(f, fs)).product()
    }

    /// Causal filtering starting from the steady state of a constant input
    /// equal to `x[0]`.
    pub fn lfilter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let u = y.first().copied().unwrap_or(0.0);
            let g = s.dc_gain();
            let out = g * u;
            let mut z2 = s.b[2] * u - s.a[1] * out;
            let mut z1 = s.b[1] * u - s.a[0] * out + z2;
            for v in y.iter_mut() {
                let xin = *v;
                let yo = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[0] * yo + z2;
                z2 = s.b[2] * xin - s.a[1] * yo;
                *v = yo;
            }
        }
        y
    }

    /// Zero-phase filtering: odd extension at both ends, forward pass,
    /// backward pass, extension stripped.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let mut y = self.lfilter(&ext);
        y.reverse();
        let mut y = self.lfilter(&y);
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}

/// Applies `spec` zero-phase to every channel.
pub fn apply(rec: &RawRecording, spec: &FilterSpec) -> Result<RawRecording> {
    let sos = match spec.kind {
        FilterKind::Bandpass { low, high } => Sos::bandpass(low, high, rec.fs, spec.order)?,
        FilterKind::Notch { freq, q } => Sos::notch(freq, rec.fs, q)?,
    };
    let data = rec.data.iter().map(|ch| sos.filtfilt(ch)).collect();
    RawRecording::new(data, rec.fs, rec.channel_names.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn butterworth_half_power_at_edges() {
        let sos = Sos::bandpass(0.1, 70.0, 1000.0, 4).unwrap();
        let db = |f: f64| 20.0 * sos.magnitude(f, 1000.0).log10();
        assert!((db(70.0) + 3.01).abs() < 0.05);
        assert!((db(0.1) + 3.01).abs() < 0.05);
        assert!(db(10.0).abs() < 0.01);
    }

    #[test]
    fn odd_order_sections() {
        assert_eq!(butterworth(3, 10.0, 200.0, false).len(), 2);
        let lp = Sos { sections: butterworth(3, 10.0, 200.0, false) };
        assert!((lp.magnitude(10.0, 200.0) - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn constant_passes_lowpass_without_transient() {
        let lp = Sos { sections: butterworth(2, 10.0, 200.0, false) };
        let y = lp.filtfilt(&[3.0; 50]);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-9));
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(Sos::bandpass(0.1, 70.0, 128.0, 4).is_err());
        assert!(Sos::bandpass(10.0, 5.0, 200.0, 4).is_err());
        assert!(Sos::bandpass(0.1, 70.0, 200.0, 3).is_err());
        assert!(Sos::notch(120.0, 200.0, 30.0).is_err());
    }
}
