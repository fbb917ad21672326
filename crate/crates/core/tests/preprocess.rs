use std::f64::consts::PI;

use mood_reader::nn::RngState;
use mood_reader::preprocess::{
    bandpass, de_features, notch, preprocess_trial, resample, segment, Band, DeConfig, FilterSpec,
    PreprocessConfig, RawRecording,
};

fn sine(fs: f64, secs: f64, freq: f64, amp: f64) -> Vec<f64> {
    let n = (fs * secs) as usize;
    (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect()
}

fn rec(ch: Vec<f64>, fs: f64) -> RawRecording {
    RawRecording::unnamed(vec![ch], fs).unwrap()
}

/// Amplitude of the `freq` component over the central half of `x`, by a
/// direct single-bin DFT (the window holds an integer number of cycles).
fn amplitude(x: &[f64], fs: f64, freq: f64) -> f64 {
    let (lo, hi) = (x.len() / 4, 3 * x.len() / 4);
    let n = (hi - lo) as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x[lo..hi].iter().enumerate() {
        let a = 2.0 * PI * freq * i as f64 / fs;
        re += v * a.cos();
        im -= v * a.sin();
    }
    2.0 * (re * re + im * im).sqrt() / n
}

fn db(ratio: f64) -> f64 {
    20.0 * ratio.log10()
}

fn spec() -> FilterSpec {
    FilterSpec::bandpass(0.1, 70.0, 4)
}

#[test]
fn bandpass_passes_10hz_and_rejects_90hz() {
    let y = bandpass(&rec(sine(200.0, 40.0, 10.0, 1.0), 200.0), &spec()).unwrap();
    assert!(db(amplitude(&y.data[0], 200.0, 10.0)).abs() < 1.0);
    let y = bandpass(&rec(sine(200.0, 40.0, 90.0, 1.0), 200.0), &spec()).unwrap();
    assert!(db(amplitude(&y.data[0], 200.0, 90.0)) <= -20.0);
}

#[test]
fn bandpass_removes_dc() {
    let y = bandpass(&rec(vec![5.0; 4000], 200.0), &spec()).unwrap();
    assert!(y.data[0].iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn bandpass_rejects_cutoff_above_nyquist() {
    assert!(bandpass(&rec(vec![0.0; 100], 128.0), &spec()).is_err());
}

#[test]
fn notch_contract() {
    let y = notch(&rec(sine(200.0, 40.0, 50.0, 1.0), 200.0), 50.0, 30.0).unwrap();
    let mid = &y.data[0][2000..6000];
    assert!(mid.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 0.1);
    assert!(db(amplitude(&y.data[0], 200.0, 50.0)) <= -20.0);
    for f in [10.0, 45.0, 55.0] {
        let y = notch(&rec(sine(200.0, 40.0, f, 1.0), 200.0), 50.0, 30.0).unwrap();
        let tol = if f == 10.0 { 1.0 } else { 2.0 };
        assert!(db(amplitude(&y.data[0], 200.0, f)).abs() < tol, "{f} Hz");
    }
    let z = notch(&rec(vec![0.0; 1000], 200.0), 50.0, 30.0).unwrap();
    assert!(z.data[0].iter().all(|&v| v == 0.0));
}

/// Band-pass followed by notch, probed at 21 frequencies against the
/// per-band dB bounds of each filter contract.
#[test]
fn chain_meets_bounds_at_21_probes() {
    let pass = [1.0, 2.0, 5.0, 8.0, 10.0, 12.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0];
    let shoulder = [45.0, 55.0];
    let stop = [50.0, 85.0, 88.0, 90.0, 92.0, 95.0, 98.0];
    let mut probes = 0;
    let chain = |f: f64| {
        let y = bandpass(&rec(sine(200.0, 40.0, f, 1.0), 200.0), &spec()).unwrap();
        let y = notch(&y, 50.0, 30.0).unwrap();
        db(amplitude(&y.data[0], 200.0, f))
    };
    for f in pass {
        assert!(chain(f).abs() < 1.0, "{f} Hz: {}", chain(f));
        probes += 1;
    }
    for f in shoulder {
        assert!(chain(f).abs() < 2.0, "{f} Hz");
        probes += 1;
    }
    for f in stop {
        assert!(chain(f) <= -20.0, "{f} Hz: {}", chain(f));
        probes += 1;
    }
    assert_eq!(probes, 21);
}

#[test]
fn resample_preserves_10hz() {
    let y = resample(&rec(sine(1000.0, 10.0, 10.0, 1.0), 1000.0), 200.0).unwrap();
    assert_eq!(y.samples(), 2000);
    assert!(db(amplitude(&y.data[0], 200.0, 10.0)).abs() < 1.0);
}

fn full_band() -> DeConfig {
    DeConfig { bands: vec![Band::new("all", 0.0, 100.0)], ..Default::default() }
}

#[test]
fn white_noise_full_band_de_monte_carlo() {
    let mut rng = RngState::new(2024);
    let cfg = full_band();
    let mut total = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..800).map(|_| rng.normal()).collect();
        let seg = segment(&rec(x, 200.0), 4.0).segments.remove(0);
        total += de_features(&seg, 200.0, &cfg).unwrap().values[0][0];
    }
    let mean = total / 100.0;
    let want = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
    assert!((want - 1.4189).abs() < 1e-4);
    assert!((mean - want).abs() < 0.05, "{mean}");
}

#[test]
fn sine_alpha_exceeds_gamma() {
    let seg = segment(&rec(sine(200.0, 4.0, 10.0, 1.0), 200.0), 4.0).segments.remove(0);
    let de = de_features(&seg, 200.0, &DeConfig::default()).unwrap();
    assert!(de.values[0][2] > de.values[0][4]);
}

fn noisy_trial(seed: u64, secs: f64) -> RawRecording {
    let mut rng = RngState::new(seed);
    let n = (200.0 * secs) as usize;
    let data = (0..3)
        .map(|c| {
            (0..n)
                .map(|i| (2.0 * PI * (6.0 + 4.0 * c as f64) * i as f64 / 200.0).sin() + 0.5 * rng.normal())
                .collect()
        })
        .collect();
    RawRecording::unnamed(data, 200.0).unwrap()
}

#[test]
fn pipeline_scale_covariance_and_offset_invariance() {
    let cfg = PreprocessConfig::default();
    let base = preprocess_trial(&noisy_trial(1, 40.0), &cfg).unwrap();
    let mut scaled = noisy_trial(1, 40.0);
    scaled.data.iter_mut().flatten().for_each(|v| *v *= 3.0);
    let scaled = preprocess_trial(&scaled, &cfg).unwrap();
    let mut shifted = noisy_trial(1, 40.0);
    shifted.data.iter_mut().flatten().for_each(|v| *v += 25.0);
    let shifted = preprocess_trial(&shifted, &cfg).unwrap();
    for ((a, b), c) in base.windows.iter().zip(&scaled.windows).zip(&shifted.windows) {
        for ch in 0..3 {
            for f in 0..5 {
                assert!((b.de[ch][f] - a.de[ch][f] - 3f64.ln()).abs() < 1e-6);
                assert!((c.de[ch][f] - a.de[ch][f]).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn pipeline_is_bit_deterministic_and_groups() {
    let cfg = PreprocessConfig::default();
    let a = preprocess_trial(&noisy_trial(5, 50.0), &cfg).unwrap();
    let b = preprocess_trial(&noisy_trial(5, 50.0), &cfg).unwrap();
    assert_eq!(a, b);
    // 10000 samples -> 12 windows -> 3 samples of 4 windows
    assert_eq!(a.windows.len(), 12);
    assert_eq!(a.groups.len(), 3);
    assert_eq!(a.groups[2].span, (6800, 10000));
    let span = a.span(&a.groups[0]);
    assert_eq!(span[0].len(), 3200);
    assert_eq!(span[1][0], a.signal.data[1][400]);
}

#[test]
fn short_trial_warns() {
    let cfg = PreprocessConfig::default();
    let out = preprocess_trial(&noisy_trial(2, 10.0), &cfg).unwrap();
    assert_eq!(out.windows.len(), 2);
    assert!(out.groups.is_empty());
    assert_eq!(out.warnings.len(), 1);
}
