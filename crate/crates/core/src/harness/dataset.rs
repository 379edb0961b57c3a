use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DatasetConfig, DatasetKind};
use crate::error::{Error, Result};
use crate::semantic_codec::ImageBatch;

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Image counts of the synthetic splits, matching CIFAR-10.
pub const SYNTHETIC_TRAIN_LEN: usize = 50_000;
pub const SYNTHETIC_TEST_LEN: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn content_seed(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Test => 0x7465_7374,
        }
    }
}

#[derive(Debug, Clone)]
enum Source {
    Synthetic { seed: u64 },
    /// `len × side × side × 3` bytes, row-major RGB.
    Stored(Vec<u8>),
}

/// Random-access image collection with 8-bit pixels.
#[derive(Debug, Clone)]
pub struct Dataset {
    source: Source,
    len: usize,
    side: usize,
}

impl Dataset {
    pub fn load(cfg: &DatasetConfig, split: Split, limit: Option<usize>) -> Result<Self> {
        let limit = limit.or(match split {
            Split::Train => cfg.train_limit,
            Split::Test => cfg.test_limit,
        });
        match cfg.kind {
            DatasetKind::Synthetic => {
                let full = match split {
                    Split::Train => SYNTHETIC_TRAIN_LEN,
                    Split::Test => SYNTHETIC_TEST_LEN,
                };
                Ok(Self::synthetic(split, limit.map_or(full, |l| l.min(full)), cfg.image_size))
            }
            DatasetKind::Cifar10 => Self::cifar10(&cfg.path, split, limit),
        }
    }

    pub fn synthetic(split: Split, len: usize, side: usize) -> Self {
        Self {
            source: Source::Synthetic {
                seed: split.content_seed(),
            },
            len,
            side,
        }
    }

    /// Reads the CIFAR-10 binary release from `dir`, stopping after `limit` images.
    pub fn cifar10(dir: &Path, split: Split, limit: Option<usize>) -> Result<Self> {
        let files: Vec<PathBuf> = match split {
            Split::Train => CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect(),
            Split::Test => vec![dir.join(CIFAR_TEST_FILE)],
        };
        let want = limit.unwrap_or(usize::MAX);
        let plane = CIFAR_SIDE * CIFAR_SIDE;
        let mut pixels = Vec::new();
        let mut len = 0;
        for path in files {
            if len >= want {
                break;
            }
            let bytes = std::fs::read(&path).map_err(|e| {
                Error::Dataset(format!(
                    "cannot read CIFAR-10 file {}: {e} (expected the binary release, cifar-10-batches-bin)",
                    path.display()
                ))
            })?;
            if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
                return Err(Error::Dataset(format!(
                    "{} is {} bytes, not a whole number of {CIFAR_RECORD}-byte records",
                    path.display(),
                    bytes.len()
                )));
            }
            for record in bytes.chunks(CIFAR_RECORD) {
                if len >= want {
                    break;
                }
                let img = &record[1..];
                for p in 0..plane {
                    pixels.extend_from_slice(&[img[p], img[plane + p], img[2 * plane + p]]);
                }
                len += 1;
            }
        }
        if let Some(l) = limit {
            if len < l {
                return Err(Error::Dataset(format!("asked for {l} images, CIFAR-10 split has {len}")));
            }
        }
        Ok(Self {
            source: Source::Stored(pixels),
            len,
            side: CIFAR_SIDE,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// RGB bytes of image `i`.
    pub fn image_u8(&self, i: usize) -> Result<Vec<u8>> {
        if i >= self.len {
            return Err(Error::Dataset(format!("image {i} out of range for {} images", self.len)));
        }
        let n = self.side * self.side * 3;
        Ok(match &self.source {
            Source::Stored(px) => px[i * n..(i + 1) * n].to_vec(),
            Source::Synthetic { seed } => synthetic_image(*seed, i, self.side),
        })
    }

    /// Images at `indices`, scaled to `[0, 1]`.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<ImageBatch> {
        let mut data = Vec::with_capacity(indices.len() * self.side * self.side * 3);
        for &i in indices {
            data.extend(self.image_u8(i)?.into_iter().map(|b| f32::from(b) / 255.0));
        }
        ImageBatch::from_vec(data, indices.len(), self.side, self.side, device)?.to_dtype(dtype)
    }

    /// A seeded permutation cut into batches; the last batch may be short.
    pub fn epoch_batches(&self, batch: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Consecutive batches in index order.
    pub fn sequential_batches(&self, batch: usize) -> Vec<Vec<usize>> {
        (0..self.len)
            .collect::<Vec<_>>()
            .chunks(batch.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// A gradient background with a few flat or striped shapes and mild grain.
fn synthetic_image(seed: u64, index: usize, side: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let color = |rng: &mut ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = side as f64;
    let mut img = vec![[0.0f64; 3]; side * side];
    for y in 0..side {
        for x in 0..side {
            let t = (((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) + 0.75) / 1.5;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                img[y * side + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let r = rng.random_range(s / 8.0..s / 3.0);
        let kind = rng.random_range(0..3);
        let period = rng.random_range(2.0..6.0);
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match kind {
                    0 => fx * fx + fy * fy <= r * r,
                    1 => fx.abs() <= r && fy.abs() <= r * 0.6,
                    _ => fx.abs() <= r && fy.abs() <= r && ((x as f64 / period).floor() as i64) % 2 == 0,
                };
                if inside {
                    img[y * side + x] = col;
                }
            }
        }
    }
    img.into_iter()
        .flatten()
        .map(|v| {
            let grain = rng.random_range(-4.0..=4.0) / 255.0;
            ((v + grain).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}
