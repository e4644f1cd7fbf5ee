//! Dataset ingestion: IDX files, binarization, and small synthetic image
//! sets with a known global class.
//!
//! Images are held as intensities in `[0, 1]`, shaped `[N, H, W, C]`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::likelihood::Head;
use crate::relaxation::open_uniform;
use crate::tensor::Tensor;

pub const IDX_LABELS: u32 = 0x0000_0801;
pub const IDX_IMAGES: u32 = 0x0000_0803;

/// Raw contents of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn idx_error(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "IDX file",
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Parses an unsigned-byte IDX file with one (labels) or three (images) dimensions.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.is_empty() {
        return Err(idx_error(0, "empty file"));
    }
    if bytes.len() < 4 {
        return Err(idx_error(bytes.len(), "truncated magic number"));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = match magic {
        IDX_LABELS => 1,
        IDX_IMAGES => 3,
        _ => return Err(idx_error(0, format!("bad magic {magic:#010x}, expected 0x00000801 or 0x00000803"))),
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(idx_error(bytes.len(), "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|d| {
            let at = 4 + 4 * d;
            u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
        })
        .collect();
    let len: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < len {
        return Err(idx_error(
            bytes.len(),
            format!("truncated payload: {} of {len} bytes", body.len()),
        ));
    }
    if body.len() > len {
        return Err(idx_error(header + len, "trailing bytes after payload"));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Images with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f64>,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Option<Vec<u8>>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::shape("dataset images", images.shape(), &[0, 0, 0, 0]));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::shape("dataset labels", &[l.len()], &images.shape()[..1]));
            }
        }
        if !images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image intensities must lie in [0, 1]"));
        }
        Ok(Dataset { images, labels })
    }

    /// Grayscale images from an IDX image array (and optional label array).
    pub fn from_idx(images: &IdxArray, labels: Option<&IdxArray>) -> Result<Self> {
        if images.dims.len() != 3 {
            return Err(Error::invalid("IDX image file must have three dimensions"));
        }
        let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
        let t = Tensor::new([n, h, w, 1], images.data.iter().map(|&b| b as f64 / 255.0).collect())?;
        Dataset::new(t, labels.map(|l| l.data.clone()))
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// Images at `idx`, stacked in order.
    pub fn gather(&self, idx: &[usize]) -> Tensor<f64> {
        let p = self.image_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Tensor::from_fn(shape, |i| self.images.data()[idx[i / p] * p + i % p])
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.gather(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// First `n` images and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// SHA-256 over the shape, the intensities and the labels, as hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            h.update(l);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_binary(&self) -> bool {
        self.images.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// `Bernoulli(intensity)` draw of every pixel.
pub fn binarize(images: &Tensor<f64>, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(images.shape().to_vec(), |i| {
        (open_uniform(rng) < images.data()[i]) as u8 as f64
    })
}

/// Pixels in the convention of `head`: bits for Bernoulli (the images must
/// already be binary), integers `0..=255` for the logistic mixture.
pub fn to_pixels(images: &Tensor<f64>, head: &Head) -> Result<Tensor<f64>> {
    match head {
        Head::Bernoulli => {
            head.check_pixels(images.data())?;
            Ok(images.clone())
        }
        Head::Dlm { .. } => Ok(Tensor::from_fn(images.shape().to_vec(), |i| {
            (images.data()[i] * 255.0).round()
        })),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binarization {
    /// One draw when the data is loaded; binary inputs pass through unchanged.
    #[default]
    Static,
    /// A fresh draw of the training images every epoch.
    Dynamic,
    /// Keep intensities (8-bit models).
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Horizontal or vertical bars; the orientation is the label.
    Bars,
    /// One rectangle outline; label 1 when taller than wide.
    Rectangles,
    /// One of four 3x3 glyphs at a random position; the glyph is the label.
    Sprites,
}

const GLYPHS: [[u8; 9]; 4] = [
    [0, 1, 0, 1, 1, 1, 0, 1, 0],
    [1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 0, 0, 0, 1, 0, 0, 0, 1],
    [1, 1, 1, 0, 1, 0, 0, 1, 0],
];

/// Labeled binary images `[n, size, size, 1]`.
pub fn synth_toy(n: usize, size: usize, kind: ToyKind, rng: &mut impl Rng) -> Result<Dataset> {
    if size < 6 {
        return Err(Error::invalid(format!("synthetic images need size >= 6, got {size}")));
    }
    let mut images = vec![0.0; n * size * size];
    let mut labels = Vec::with_capacity(n);
    for img in images.chunks_mut(size * size) {
        let mut set = |r: usize, c: usize| img[r * size + c] = 1.0;
        let label = match kind {
            ToyKind::Bars => {
                let vertical = rng.gen_bool(0.5);
                // every line is a bar with probability 1/2; keep at least one on and one off
                let lines = loop {
                    let on: Vec<bool> = (0..size).map(|_| rng.gen_bool(0.5)).collect();
                    let count = on.iter().filter(|&&b| b).count();
                    if count > 0 && count < size {
                        break on;
                    }
                };
                for (i, _) in lines.iter().enumerate().filter(|(_, &b)| b) {
                    for j in 0..size {
                        if vertical {
                            set(j, i)
                        } else {
                            set(i, j)
                        }
                    }
                }
                vertical as u8
            }
            ToyKind::Rectangles => {
                let tall = rng.gen_bool(0.5);
                let long = rng.gen_range(size / 2 + 1..=size);
                let short = rng.gen_range(2..long);
                let (h, w) = if tall { (long, short) } else { (short, long) };
                let (top, left) = (rng.gen_range(0..=size - h), rng.gen_range(0..=size - w));
                for r in top..top + h {
                    for c in left..left + w {
                        if r == top || r == top + h - 1 || c == left || c == left + w - 1 {
                            set(r, c);
                        }
                    }
                }
                tall as u8
            }
            ToyKind::Sprites => {
                let g = rng.gen_range(0..GLYPHS.len());
                let (top, left) = (rng.gen_range(0..=size - 3), rng.gen_range(0..=size - 3));
                for (k, &on) in GLYPHS[g].iter().enumerate() {
                    if on == 1 {
                        set(top + k / 3, left + k % 3);
                    }
                }
                g as u8
            }
        };
        labels.push(label);
    }
    Dataset::new(Tensor::new([n, size, size, 1], images)?, Some(labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        kind: ToyKind,
        size: usize,
        n_train: usize,
        n_valid: usize,
        n_test: usize,
    },
    /// Training and test IDX files; validation images are the last
    /// `n_valid` training images.
    Idx {
        train_images: PathBuf,
        train_labels: Option<PathBuf>,
        test_images: PathBuf,
        test_labels: Option<PathBuf>,
        n_valid: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub binarization: Binarization,
    /// Seed of the synthetic generator and of the static binarization draw.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic {
                kind: ToyKind::Bars,
                size: 14,
                n_train: 300,
                n_valid: 100,
                n_test: 100,
            },
            binarization: Binarization::Static,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    /// Loads or generates all splits. Static binarization is applied here to
    /// every split; dynamic binarization binarizes validation and test once
    /// here and the training images every epoch.
    pub fn load(&self) -> Result<Splits> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (train, valid, test) = match &self.source {
            DataSource::Synthetic {
                kind,
                size,
                n_train,
                n_valid,
                n_test,
            } => {
                let all = synth_toy(n_train + n_valid + n_test, *size, *kind, &mut rng)?;
                let (train, rest) = all.split(*n_train);
                let (valid, test) = rest.split(*n_valid);
                (train, valid, test)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                n_valid,
            } => {
                let labels = |p: &Option<PathBuf>| p.as_deref().map(load_idx).transpose();
                let train = Dataset::from_idx(&load_idx(train_images)?, labels(train_labels)?.as_ref())?;
                let test = Dataset::from_idx(&load_idx(test_images)?, labels(test_labels)?.as_ref())?;
                if *n_valid >= train.len() {
                    return Err(Error::Config(format!(
                        "n_valid {n_valid} leaves no training images out of {}",
                        train.len()
                    )));
                }
                let (train, valid) = train.split(train.len() - n_valid);
                (train, valid, test)
            }
        };
        let mut bin = |d: Dataset| Dataset {
            images: binarize(&d.images, &mut rng),
            labels: d.labels,
        };
        Ok(match self.binarization {
            Binarization::Static => Splits {
                train: bin(train),
                valid: bin(valid),
                test: bin(test),
            },
            Binarization::Dynamic => Splits {
                train,
                valid: bin(valid),
                test: bin(test),
            },
            Binarization::None => Splits { train, valid, test },
        })
    }
}

/// Shuffled mini-batch index lists; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
