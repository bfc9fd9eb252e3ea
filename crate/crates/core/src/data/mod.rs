//! Datasets, preprocessing, synthetic fixtures, and mini-batch streams.

mod batch;
mod cifar;
mod preprocess;
mod synthetic;

pub use batch::{shuffle_epoch, Batch, BatchStream};
pub use cifar::{
    load_cifar100_binary, load_cifar10_binary, load_cifar10_dir, parse_cifar10, parse_cifar100,
    CIFAR100_RECORD, CIFAR10_RECORD, CIFAR_FILE_RECORDS,
};
pub use preprocess::{compute_stats, denormalize, normalize, to_grayscale, Stats, STD_GUARD};
pub use synthetic::synthetic_blobs;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labelled images, `N×C×H×W`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Statistics the images were normalized with, if any.
    pub stats: Option<Stats>,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!(
                "dataset images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select_batch(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            split: self.split,
            stats: self.stats.clone(),
        })
    }

    /// The first `n` samples (or all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Serializes as two tensors: images, then labels stored as floats.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let labels = Tensor::vector(self.labels.iter().map(|&l| l as f32).collect())?;
        let mut out = Vec::new();
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        write_tensor(&mut out, &self.images).expect("Vec write");
        write_tensor(&mut out, &labels).expect("Vec write");
        std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path, e))?;
        let classes = bytes
            .get(..4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Format {
                offset: 0,
                msg: "truncated dataset header".into(),
            })?;
        let mut rest = &bytes[4..];
        let images = read_tensor::<f32, _>(&mut rest, 4)?;
        let at = (bytes.len() - rest.len()) as u64;
        let labels = read_tensor::<f32, _>(&mut rest, at)?;
        let labels = labels.data().iter().map(|&l| l as usize).collect();
        Dataset::new(images, labels, classes, split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_file_roundtrip() {
        let ds = synthetic_blobs(3, 4, 5, 0.2, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blobs.bin");
        ds.write_to(&p).unwrap();
        let back = Dataset::read_from(&p, Split::Train).unwrap();
        assert!(back.images.bitwise_eq(&ds.images));
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.classes, 3);
    }

    #[test]
    fn rejects_bad_labels() {
        let imgs = Tensor::zeros(vec![2, 1, 1, 1]).unwrap();
        assert!(Dataset::new(imgs, vec![0, 3], 3, Split::Train).is_err());
    }
}
