//! CIFAR-10 / CIFAR-100 binary format.
//!
//! A CIFAR-10 record is one label byte followed by 3072 pixel bytes: the
//! 32×32 red plane, then green, then blue, each row-major. CIFAR-100 records
//! carry a coarse and a fine label byte before the pixels; the fine label is
//! used.

use std::path::{Path, PathBuf};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR100_RECORD: usize = 3074;
/// Records per file in the official distribution.
pub const CIFAR_FILE_RECORDS: usize = 10_000;
const PIXELS: usize = 3 * 32 * 32;

fn parse(bytes: &[u8], label_bytes: usize, classes: usize, split: Split) -> Result<Dataset> {
    let record = label_bytes + PIXELS;
    if bytes.is_empty() {
        return Err(Error::Format {
            offset: 0,
            msg: "empty file".into(),
        });
    }
    if !bytes.len().is_multiple_of(record) {
        let whole = bytes.len() / record;
        return Err(Error::Format {
            offset: (whole * record) as u64,
            msg: format!(
                "truncated record: {} trailing bytes, records are {record} bytes",
                bytes.len() - whole * record
            ),
        });
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label_at = label_bytes - 1;
        let label = rec[label_at] as usize;
        if label >= classes {
            return Err(Error::Format {
                offset: (i * record + label_at) as u64,
                msg: format!("label {label} outside [0, {classes})"),
            });
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&b| f32::from(b) / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, classes, split)
}

/// Parses CIFAR-10 records from memory. Any positive whole number of
/// records is accepted.
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    parse(bytes, 1, 10, split)
}

/// Parses CIFAR-100 records (fine labels).
pub fn parse_cifar100(bytes: &[u8], split: Split) -> Result<Dataset> {
    parse(bytes, 2, 100, split)
}

fn load_files(
    paths: &[impl AsRef<Path>],
    split: Split,
    expect: Option<usize>,
    parser: fn(&[u8], Split) -> Result<Dataset>,
) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Input("no dataset files given".into()));
    }
    let mut parts = Vec::with_capacity(paths.len());
    let mut labels = Vec::new();
    let mut classes = 0;
    for p in paths {
        let p = p.as_ref();
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let ds = parser(&bytes, split).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", p.display()),
            },
            other => other,
        })?;
        if let Some(n) = expect {
            if ds.len() != n {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("{}: expected {n} records, found {}", p.display(), ds.len()),
                });
            }
        }
        classes = ds.classes;
        labels.extend_from_slice(&ds.labels);
        parts.push(ds.images);
    }
    Dataset::new(Tensor::concat_batch(&parts)?, labels, classes, split)
}

/// Loads and concatenates CIFAR-10 binary files, pixels scaled to `[0, 1]`.
pub fn load_cifar10_binary(paths: &[impl AsRef<Path>], split: Split) -> Result<Dataset> {
    load_files(paths, split, None, parse_cifar10)
}

pub fn load_cifar100_binary(paths: &[impl AsRef<Path>], split: Split) -> Result<Dataset> {
    load_files(paths, split, None, parse_cifar100)
}

/// Loads the standard `cifar-10-batches-bin` directory layout
/// (`data_batch_1..5.bin`, `test_batch.bin`), checking that every file holds
/// exactly 10000 records.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let test = [dir.join("test_batch.bin")];
    for p in train.iter().chain(&test) {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR-10 file not found"),
            ));
        }
    }
    Ok((
        load_files(
            &train,
            Split::Train,
            Some(CIFAR_FILE_RECORDS),
            parse_cifar10,
        )?,
        load_files(&test, Split::Test, Some(CIFAR_FILE_RECORDS), parse_cifar10)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..PIXELS).map(fill));
        r
    }

    #[test]
    fn two_record_roundtrip() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |i| if i < 1024 { 255 } else { 0 }));
        let ds = parse_cifar10(&bytes, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        // record 0, green plane, row 1, col 2 -> byte 1024 + 32 + 2
        let v = ds.images.get(&[0, 1, 1, 2]).unwrap();
        assert_eq!(v, ((1024 + 34) % 256) as f32 / 255.0);
        assert_eq!(ds.images.get(&[1, 0, 31, 31]).unwrap(), 1.0);
        assert_eq!(ds.images.get(&[1, 2, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn format_errors_carry_offsets() {
        assert!(matches!(
            parse_cifar10(&[], Split::Train),
            Err(Error::Format { offset: 0, .. })
        ));
        let bad = record(255, |_| 0);
        assert!(matches!(
            parse_cifar10(&bad, Split::Train),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut two = record(1, |_| 0);
        two.extend(record(10, |_| 0));
        assert!(matches!(
            parse_cifar10(&two, Split::Train),
            Err(Error::Format { offset: 3073, .. })
        ));
        let trunc = &two[..3073 + 100];
        assert!(matches!(
            parse_cifar10(trunc, Split::Train),
            Err(Error::Format { offset: 3073, .. })
        ));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![4u8, 87];
        rec.extend(std::iter::repeat_n(0u8, PIXELS));
        let ds = parse_cifar100(&rec, Split::Test).unwrap();
        assert_eq!(ds.labels, vec![87]);
        assert_eq!(ds.classes, 100);
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = load_cifar10_dir("/nonexistent/cifar").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
