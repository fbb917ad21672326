use super::RawRecording;

/// One tapered analysis window and its location in the source recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// First source sample (inclusive).
    pub start: usize,
    /// One past the last source sample.
    pub end: usize,
    /// `channels × (end - start)` tapered samples.
    pub data: Vec<Vec<f64>>,
    pub taper: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Segmentation {
    /// Windows in chronological order.
    pub segments: Vec<Segment>,
    pub warning: Option<String>,
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Source ranges of non-overlapping windows of `len` samples tiled backward
/// from the end of a `total`-sample trial, returned in chronological order.
/// The head remainder is not covered.
pub fn reverse_windows(total: usize, len: usize) -> Vec<(usize, usize)> {
    if len == 0 {
        return Vec::new();
    }
    let n = total / len;
    (0..n).rev().map(|k| (total - (k + 1) * len, total - k * len)).collect()
}

/// Cuts `rec` into `window_s`-second Hann-tapered windows anchored at the
/// trial end.
pub fn segment(rec: &RawRecording, window_s: f64) -> Segmentation {
    let len = (window_s * rec.fs).round() as usize;
    let ranges = reverse_windows(rec.samples(), len);
    if ranges.is_empty() {
        return Segmentation {
            segments: Vec::new(),
            warning: Some(format!(
                "trial of {} samples is shorter than one {len}-sample window",
                rec.samples()
            )),
        };
    }
    let taper = hann(len);
    let segments = ranges
        .into_iter()
        .map(|(start, end)| Segment {
            start,
            end,
            data: rec
                .data
                .iter()
                .map(|ch| ch[start..end].iter().zip(&taper).map(|(x, w)| x * w).collect())
                .collect(),
            taper: taper.clone(),
        })
        .collect();
    Segmentation { segments, warning: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(n: usize) -> RawRecording {
        RawRecording::new(vec![vec![1.0; n]], 200.0, vec!["X".into()]).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(segment(&flat(800), 4.0).segments.len(), 1);
        let s = segment(&flat(799), 4.0);
        assert!(s.segments.is_empty());
        assert!(s.warning.is_some());
    }

    #[test]
    fn reverse_anchoring_discards_head() {
        let s = segment(&flat(2000), 4.0);
        let ranges: Vec<_> = s.segments.iter().map(|g| (g.start, g.end)).collect();
        assert_eq!(ranges, vec![(400, 1200), (1200, 2000)]);
    }

    #[test]
    fn taper_applied() {
        let s = segment(&flat(800), 4.0);
        assert_eq!(s.segments[0].data[0][0], 0.0);
        assert!((s.segments[0].data[0][400] - hann(800)[400]).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn count_and_coverage(total in 0usize..20_000, len in 1usize..2000) {
            let w = reverse_windows(total, len);
            prop_assert_eq!(w.len(), total / len);
            for pair in w.windows(2) {
                prop_assert_eq!(pair[0].1, pair[1].0);
            }
            if let Some(last) = w.last() {
                prop_assert_eq!(last.1, total);
                prop_assert_eq!(w[0].0, total % len);
            }
        }
    }
}
