//! Dataset ingestion: IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary batches.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Decoded IDX payload: images `[N,1,H,W]` scaled to `[0,1]`, or labels `[N]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let read_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("truncated header, need bytes {offset}..{}", offset + 4),
            })
    };
    let magic = read_u32(0)?;
    let (shape, header, scale) = match magic {
        IDX_LABELS_MAGIC => (vec![read_u32(4)? as usize], 8usize, false),
        IDX_IMAGES_MAGIC => {
            let (n, h, w) = (read_u32(4)? as usize, read_u32(8)? as usize, read_u32(12)? as usize);
            (vec![n, 1, h, w], 16usize, true)
        }
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad IDX magic {other:#010x}"),
            })
        }
    };
    let count: usize = shape.iter().product();
    let body = &bytes[header.min(bytes.len())..];
    if body.len() < count {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: {count} bytes declared, {} present", body.len()),
        });
    }
    let data = body[..count]
        .iter()
        .map(|&b| if scale { b as f32 / 255.0 } else { b as f32 })
        .collect();
    Tensor::new(shape, data)
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_idx(&bytes)
}

fn labels_from(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

/// Images and labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() == 0 || images.shape()[0] != labels.len() {
            return Err(Error::Config(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            images: self.images.slice_rows(0, n)?,
            labels: self.labels[..n].to_vec(),
        })
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.images.gather_rows(rows)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
        ))
    }
}

/// Per-channel standardization constants, measured on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn measure(images: &Tensor) -> Self {
        let s = images.shape();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in images.data().iter().enumerate() {
            let ch = (i / inner) % c;
            mean[ch] += v as f64;
            sq[ch] += (v as f64) * (v as f64);
        }
        let count = (n * inner) as f64;
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, images: &mut Tensor) {
        let s = images.shape().to_vec();
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub train: Split,
    pub test: Split,
    pub normalization: Normalization,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    FashionMnist,
    Cifar10,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "fashion-mnist" => Ok(Self::FashionMnist),
            "cifar10" | "cifar-10" => Ok(Self::Cifar10),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?} (expected mnist, fashion-mnist, cifar10)"
            ))),
        }
    }
}

impl Dataset {
    /// Standardizes both splits with statistics of the training split.
    pub fn from_raw(name: &str, num_classes: usize, mut train: Split, mut test: Split) -> Self {
        let normalization = Normalization::measure(&train.images);
        normalization.apply(&mut train.images);
        normalization.apply(&mut test.images);
        Self {
            name: name.to_string(),
            num_classes,
            train,
            test,
            normalization,
        }
    }

    /// Loads an MNIST-layout directory (`train-images-idx3-ubyte`, ...).
    pub fn load_idx_dir(dir: impl AsRef<Path>, name: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let split = |prefix: &str| -> Result<Split> {
            let images = load_idx(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
            let labels = load_idx(dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
            if labels.rank() != 1 || images.rank() != 4 {
                return Err(Error::Config(format!("{prefix}: image/label files swapped?")));
            }
            Split::new(images, labels_from(&labels), 10)
        };
        Ok(Self::from_raw(name, 10, split("train")?, split("t10k")?))
    }

    /// Loads CIFAR-10 binary batches (`data_batch_{1..5}.bin`, `test_batch.bin`).
    pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut train = Vec::new();
        for i in 1..=5 {
            train.push(parse_cifar10(&fs::read(dir.join(format!("data_batch_{i}.bin")))?)?);
        }
        let images = Tensor::concat_rows(&train.iter().map(|s| s.images.clone()).collect::<Vec<_>>())?;
        let labels = train.into_iter().flat_map(|s| s.labels).collect();
        let test = parse_cifar10(&fs::read(dir.join("test_batch.bin"))?)?;
        Ok(Self::from_raw("cifar10", 10, Split::new(images, labels, 10)?, test))
    }

    pub fn load(kind: DatasetKind, dir: impl AsRef<Path>) -> Result<Self> {
        match kind {
            DatasetKind::Mnist => Self::load_idx_dir(dir, "mnist"),
            DatasetKind::FashionMnist => Self::load_idx_dir(dir, "fashion-mnist"),
            DatasetKind::Cifar10 => Self::load_cifar10_dir(dir),
        }
    }

    /// Keeps at most `train` and `test` samples of each split.
    pub fn truncated(&self, train: Option<usize>, test: Option<usize>) -> Result<Self> {
        Ok(Self {
            train: match train {
                Some(n) => self.train.take(n)?,
                None => self.train.clone(),
            },
            test: match test {
                Some(n) => self.test.take(n)?,
                None => self.test.clone(),
            },
            ..self.clone()
        })
    }
}

pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

/// One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Split> {
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        let whole = bytes.len() / CIFAR10_RECORD * CIFAR10_RECORD;
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!(
                "truncated CIFAR-10 record starting at byte {whole}: {} of {CIFAR10_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR10_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Split::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_fixture() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&4u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend_from_slice(&2u32.to_be_bytes());
        b.extend((0..16u8).map(|v| v * 17));
        b
    }

    #[test]
    fn image_fixture_shape_and_scaling() {
        let t = parse_idx(&images_fixture()).unwrap();
        assert_eq!(t.shape(), &[4, 1, 2, 2]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[15], 1.0);
    }

    #[test]
    fn label_fixture() {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&4u32.to_be_bytes());
        b.extend_from_slice(&[3, 1, 4, 1]);
        let t = parse_idx(&b).unwrap();
        assert_eq!(t.shape(), &[4]);
        assert_eq!(t.data(), &[3.0, 1.0, 4.0, 1.0]);
    }

    #[test]
    fn truncated_file_reports_missing_offset() {
        let mut b = images_fixture();
        b.truncate(16 + 10);
        match parse_idx(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 26),
            other => panic!("{other:?}"),
        }
        match parse_idx(&b[..6]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut b = images_fixture();
        b[3] = 0x99;
        assert!(matches!(parse_idx(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn cifar_records() {
        let mut b = vec![7u8];
        b.extend(std::iter::repeat_n(255u8, 3072));
        b.push(2);
        b.extend(std::iter::repeat_n(0u8, 3072));
        let s = parse_cifar10(&b).unwrap();
        assert_eq!(s.labels, vec![7, 2]);
        assert_eq!(s.images.shape(), &[2, 3, 32, 32]);
        assert!(parse_cifar10(&b[..100]).is_err());
    }

    #[test]
    fn labels_out_of_range_rejected() {
        assert!(Split::new(Tensor::zeros(&[2, 1]), vec![0, 10], 10).is_err());
    }
}
