use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to a channel's standard deviation before dividing.
pub const STD_GUARD: f64 = 1e-8;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Stats {
    /// Per-channel `(lo, hi)` that raw pixels in `[0, 1]` map to.
    pub fn bounds(&self) -> Vec<(f32, f32)> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| {
                let s = s.max(STD_GUARD);
                (((0.0 - m) / s) as f32, ((1.0 - m) / s) as f32)
            })
            .collect()
    }
}

/// Luminance conversion `0.299 R + 0.587 G + 0.114 B`. Single-channel data
/// is returned unchanged.
pub fn to_grayscale(ds: &Dataset) -> Result<Dataset> {
    let [c, h, w] = ds.sample_shape();
    match c {
        1 => return Ok(ds.clone()),
        3 => {}
        _ => {
            return Err(Error::dim(format!(
                "grayscale conversion needs 1 or 3 channels, got {c}"
            )))
        }
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(ds.len() * plane);
    for img in ds.images.data().chunks_exact(3 * plane) {
        out.extend(
            (0..plane).map(|p| {
                LUMA[0] * img[p] + LUMA[1] * img[plane + p] + LUMA[2] * img[2 * plane + p]
            }),
        );
    }
    Ok(Dataset {
        images: Tensor::new(vec![ds.len(), 1, h, w], out)?,
        labels: ds.labels.clone(),
        classes: ds.classes,
        split: ds.split,
        stats: None,
    })
}

/// Per-channel mean and population standard deviation, accumulated in f64.
pub fn compute_stats(train: &Dataset) -> Stats {
    let [c, h, w] = train.sample_shape();
    let plane = h * w;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for img in train.images.data().chunks_exact(c * plane) {
        for ch in 0..c {
            for &v in &img[ch * plane..(ch + 1) * plane] {
                let v = f64::from(v);
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let n = (train.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n - m * m).max(0.0).sqrt())
        .collect();
    Stats { mean, std }
}

fn per_channel(ds: &Dataset, stats: &Stats, f: impl Fn(f64, f64, f64) -> f64) -> Result<Dataset> {
    let [c, h, w] = ds.sample_shape();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::dim(format!(
            "stats for {} channels applied to {c}-channel data",
            stats.mean.len()
        )));
    }
    let plane = h * w;
    let mut images = ds.images.clone();
    for img in images.data_mut().chunks_exact_mut(c * plane) {
        for ch in 0..c {
            let (m, s) = (stats.mean[ch], stats.std[ch].max(STD_GUARD));
            for v in &mut img[ch * plane..(ch + 1) * plane] {
                *v = f(f64::from(*v), m, s) as f32;
            }
        }
    }
    Ok(Dataset {
        images,
        labels: ds.labels.clone(),
        classes: ds.classes,
        split: ds.split,
        stats: None,
    })
}

/// `(x − mean) / std` per channel.
pub fn normalize(ds: &Dataset, stats: &Stats) -> Result<Dataset> {
    let mut out = per_channel(ds, stats, |v, m, s| (v - m) / s)?;
    out.stats = Some(stats.clone());
    Ok(out)
}

pub fn denormalize(ds: &Dataset, stats: &Stats) -> Result<Dataset> {
    per_channel(ds, stats, |v, m, s| v * s + m)
}
