//! Per-channel spatial attention maps and scalp topomaps.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

const LAYOUT_CSV: &str = include_str!("../../data/seed62_layout.csv");

/// Electrode position with the head circle at radius 1, nose towards +y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// The 62-electrode extended 10–20 montage.
pub fn seed62_layout() -> Vec<Electrode> {
    csv::Reader::from_reader(LAYOUT_CSV.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<Electrode>, _>>()
        .expect("bundled electrode layout is well formed")
}

/// Attention received by each channel: column means of every head's
/// `C × C` probability matrix, averaged over heads.
pub fn channel_attention(heads: &[Tensor]) -> Result<Vec<f64>> {
    let first = heads.first().ok_or_else(|| Error::Data("no attention heads".into()))?;
    let (r, c) = first.dims2();
    if r != c {
        return Err(Error::Shape(format!("spatial attention must be square, got {r}x{c}")));
    }
    let mut out = vec![0.0; c];
    for h in heads {
        if h.dims2() != (r, c) {
            return Err(Error::Shape("attention heads differ in shape".into()));
        }
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(h.row_slice(i)) {
                *o += v;
            }
        }
    }
    let denom = (r * heads.len()) as f64;
    Ok(out.into_iter().map(|v| v / denom).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeight {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub weight: f64,
}

/// Normalized per-channel attention at one training snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// `init`, `25pct`, `50pct` or `final`.
    pub tag: String,
    /// Completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub channels: Vec<ChannelWeight>,
}

impl AttentionMap {
    /// Normalizes `weights` to sum 1 and attaches layout coordinates.
    pub fn new(tag: &str, epoch: usize, weights: &[f64], layout: &[Electrode]) -> Result<Self> {
        if weights.len() != layout.len() {
            return Err(Error::Config(format!(
                "layout error: {} channel weights for a {}-electrode layout",
                weights.len(),
                layout.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Data("attention weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate("attention weights sum to zero".into()));
        }
        let channels = layout
            .iter()
            .zip(weights)
            .map(|(e, w)| ChannelWeight { name: e.name.clone(), x: e.x, y: e.y, weight: w / total })
            .collect();
        Ok(Self { tag: tag.into(), epoch, channels })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.weight).collect()
    }

    /// Total weight on the given channel indices.
    pub fn mass(&self, idx: impl IntoIterator<Item = usize>) -> f64 {
        idx.into_iter().map(|i| self.channels[i].weight).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.channels {
            w.serialize(c).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Inverse-distance interpolation of the weights at `(x, y)`.
    pub fn interpolate(&self, x: f64, y: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for c in &self.channels {
            let d2 = (c.x - x).powi(2) + (c.y - y).powi(2);
            if d2 < 1e-12 {
                return c.weight;
            }
            let w = 1.0 / (d2 * d2);
            num += w * c.weight;
            den += w;
        }
        num / den
    }

    /// RGB topomap of side `size` pixels: interpolated weights inside the
    /// head circle, electrodes marked in black.
    pub fn render(&self, size: usize) -> Vec<u8> {
        let weights = self.weights();
        let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi - lo > 1e-15 { hi - lo } else { 1.0 };
        let mut img = vec![255u8; size * size * 3];
        let to_unit = |p: usize| (p as f64 + 0.5) / size as f64 * 2.4 - 1.2;
        for py in 0..size {
            for px in 0..size {
                let (x, y) = (to_unit(px), -to_unit(py));
                let r = (x * x + y * y).sqrt();
                let rgb = if (r - 1.0).abs() < 0.012 {
                    [0, 0, 0]
                } else if r < 1.0 {
                    colormap((self.interpolate(x, y) - lo) / span)
                } else {
                    continue;
                };
                img[(py * size + px) * 3..][..3].copy_from_slice(&rgb);
            }
        }
        let dot = (size / 120).max(1) as isize;
        for c in &self.channels {
            let cx = ((c.x + 1.2) / 2.4 * size as f64) as isize;
            let cy = ((1.2 - c.y) / 2.4 * size as f64) as isize;
            for dy in -dot..=dot {
                for dx in -dot..=dot {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                        img[(y as usize * size + x as usize) * 3..][..3].fill(0);
                    }
                }
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path, size: usize) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(&self.render(size)).map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>.png` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        let png = dir.join(format!("{stem}.png"));
        std::fs::write(&json, self.to_json()?)?;
        std::fs::write(&csv, self.to_csv()?)?;
        self.save_png(&png, 256)?;
        Ok(vec![json, csv, png])
    }
}

/// Blue, white, red.
fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let s = t / 0.5;
        (0.2 + 0.8 * s, 0.3 + 0.7 * s, 1.0)
    } else {
        let s = (t - 0.5) / 0.5;
        (1.0, 1.0 - 0.8 * s, 1.0 - 0.8 * s)
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_has_62_electrodes_on_the_disc() {
        let l = seed62_layout();
        assert_eq!(l.len(), 62);
        assert_eq!(l[0].name, "FP1");
        // cerebellar sites sit just below the head circle
        assert!(l.iter().all(|e| (e.x * e.x + e.y * e.y).sqrt() <= 1.12));
        let mut names: Vec<_> = l.iter().map(|e| &e.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 62);
    }

    #[test]
    fn maps_normalise_and_check_the_layout() {
        let l = seed62_layout();
        let m = AttentionMap::new("final", 3, &vec![2.0; 62], &l).unwrap();
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.weights().iter().all(|&w| (w - 1.0 / 62.0).abs() < 1e-15));
        assert!(matches!(AttentionMap::new("x", 0, &[1.0; 61], &l), Err(Error::Config(_))));
        assert!(AttentionMap::new("x", 0, &[0.0; 62], &l).is_err());
    }

    #[test]
    fn uniform_weights_give_a_flat_topomap() {
        let m = AttentionMap::new("init", 0, &vec![1.0; 62], &seed62_layout()).unwrap();
        for (x, y) in [(0.0, 0.0), (0.3, -0.5), (-0.7, 0.2)] {
            assert!((m.interpolate(x, y) - 1.0 / 62.0).abs() < 1e-15);
        }
    }

    #[test]
    fn column_means_over_heads() {
        let a = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.7, 0.3]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let w = channel_attention(&[a, b]).unwrap();
        assert!((w[0] - 0.65).abs() < 1e-12 && (w[1] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_record_per_channel() {
        let m = AttentionMap::new("final", 1, &vec![1.0; 62], &seed62_layout()).unwrap();
        let text = m.to_csv().unwrap();
        assert_eq!(text.lines().count(), 63);
        assert!(text.starts_with("name,x,y,weight"));
    }
}
