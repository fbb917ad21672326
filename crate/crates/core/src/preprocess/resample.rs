use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::RawRecording;
use crate::error::{Error, Result};

/// Frequency-domain decimation: the spectrum is truncated to the new
/// Nyquist band (an ideal anti-aliasing low-pass) and inverted at the new
/// length `round(T · target / fs)`.
pub fn resample(rec: &RawRecording, target: f64) -> Result<RawRecording> {
    if target <= 0.0 {
        return Err(Error::Config(format!("target rate {target} Hz")));
    }
    if target > rec.fs {
        return Err(Error::Unsupported(format!(
            "upsampling from {} Hz to {target} Hz",
            rec.fs
        )));
    }
    if target == rec.fs {
        return Ok(rec.clone());
    }
    let n_in = rec.samples();
    let n_out = ((n_in as f64) * target / rec.fs).round() as usize;
    if n_out == 0 {
        return Err(Error::Data(format!("{n_in} samples vanish when resampled to {target} Hz")));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_in);
    let inv = planner.plan_fft_inverse(n_out);
    let keep = (n_out - 1) / 2; // positive bins kept besides DC; Nyquist dropped
    let data = rec
        .data
        .iter()
        .map(|ch| {
            let mut spec: Vec<Complex64> = ch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fwd.process(&mut spec);
            let mut out = vec![Complex64::new(0.0, 0.0); n_out];
            out[0] = spec[0];
            for k in 1..=keep {
                out[k] = spec[k];
                out[n_out - k] = spec[n_in - k];
            }
            inv.process(&mut out);
            let scale = 1.0 / n_in as f64;
            out.iter().map(|c| c.re * scale).collect()
        })
        .collect();
    RawRecording::new(data, target, rec.channel_names.clone())
}
