//! Datasets: a procedural image-classification task, the CIFAR binary
//! format, and the shuffled pair stream that feeds Mixup.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::serialize::{load_tensor, save_tensor};
use crate::autodiff::Tensor;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[M, 3, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let d = Dataset {
            images,
            labels,
            num_classes,
            split,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.rank() != 4 {
            return Err(config_err!("images must be [M,C,H,W], got {:?}", self.images.shape()));
        }
        if self.labels.is_empty() || self.labels.len() != self.images.batch() {
            return Err(config_err!(
                "{} labels for {} images",
                self.labels.len(),
                self.images.batch()
            ));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(config_err!("label {y} out of range for {} classes", self.num_classes));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(config_err!("pixel values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn gather(&self, index: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        Ok((
            self.images.select_rows(index)?,
            index.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// First `n` samples (all if `n >= len`).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx)?;
        Dataset::new(images, labels, self.num_classes, self.split)
    }

    /// Writes `<prefix>.images.mskd` and `<prefix>.labels.mskd` (labels as floats).
    pub fn export(&self, prefix: &Path) -> Result<()> {
        let labels = Tensor::new(
            vec![self.labels.len()],
            self.labels.iter().map(|&y| y as f32).collect(),
        )?;
        save_tensor(&with_suffix(prefix, "images.mskd"), &self.images)?;
        save_tensor(&with_suffix(prefix, "labels.mskd"), &labels)
    }

    pub fn import(prefix: &Path, num_classes: usize, split: Split) -> Result<Self> {
        let images = load_tensor::<f32>(&with_suffix(prefix, "images.mskd"))?;
        let labels = load_tensor::<f32>(&with_suffix(prefix, "labels.mskd"))?;
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("label value {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(images, labels, num_classes, split)
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    s.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            per_class: 64,
            height: 16,
            width: 16,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Noise-free template for class `c`: a ramp oriented at `π·c/C` plus a
/// class-colored Gaussian blob at a class-keyed position.
fn template(c: usize, num_classes: usize, h: usize, w: usize) -> Vec<f64> {
    let frac = c as f64 / num_classes as f64;
    let theta = std::f64::consts::PI * frac;
    let phi = 2.0 * std::f64::consts::PI * frac + std::f64::consts::FRAC_PI_4;
    let (bx, by) = (0.25 * phi.cos(), 0.25 * phi.sin());
    let color: Vec<f64> = (0..3)
        .map(|ch| 0.5 + 0.5 * (2.0 * std::f64::consts::PI * (frac + ch as f64 / 3.0)).cos())
        .collect();
    let mut out = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64 - 0.5;
                let v = (y as f64 + 0.5) / h as f64 - 0.5;
                let ramp = 0.5 + u * theta.cos() + v * theta.sin();
                let blob = (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * 0.12f64.powi(2))).exp();
                out[(ch * h + y) * w + x] = 0.5 * ramp + 0.5 * blob * color[ch];
            }
        }
    }
    out
}

/// Class-keyed procedural images with Gaussian pixel noise, clamped to
/// `[0, 1]`. Samples are stored class-major.
pub fn gen_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.per_class == 0 || spec.height == 0 || spec.width == 0 {
        return Err(config_err!("synthetic dataset needs >= 2 classes and positive sizes: {spec:?}"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(config_err!("noise sigma must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 0,
        Split::Test => 1,
    });
    let (h, w) = (spec.height, spec.width);
    let plane = 3 * h * w;
    let m = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(m * plane);
    let mut labels = Vec::with_capacity(m);
    for c in 0..spec.num_classes {
        let t = template(c, spec.num_classes, h, w);
        for _ in 0..spec.per_class {
            for &v in &t {
                let noise = if spec.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.noise_sigma * z
                } else {
                    0.0
                };
                data.push((v + noise).clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![m, 3, h, w], data)?, labels, spec.num_classes, split)
}

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Parses CIFAR-10 (`label, 3072 pixels`) or CIFAR-100
/// (`coarse label, fine label, 3072 pixels`) records; the 100-class
/// variant keeps the fine label.
pub fn parse_cifar_binary(bytes: &[u8], num_classes: usize, split: Split) -> Result<Dataset> {
    let label_bytes = match num_classes {
        10 => 1,
        100 => 2,
        other => return Err(config_err!("CIFAR has 10 or 100 classes, not {other}")),
    };
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() {
        return Err(Error::Format("empty CIFAR file".into()));
    }
    if bytes.len() % record != 0 {
        let offset = bytes.len() / record * record;
        return Err(Error::Format(format!(
            "truncated CIFAR record at byte offset {offset}: {} bytes left, record size {record}",
            bytes.len() - offset
        )));
    }
    let m = bytes.len() / record;
    let mut labels = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let y = rec[label_bytes - 1] as usize;
        if y >= num_classes {
            return Err(Error::Format(format!(
                "record {i} (byte offset {}) has label {y} >= {num_classes}",
                i * record
            )));
        }
        labels.push(y);
        data.extend(rec[label_bytes..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![m, 3, 32, 32], data)?, labels, num_classes, split)
}

pub fn load_cifar_binary(path: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes, num_classes, split)
}

/// Random crop from a zero-padded image plus a horizontal flip with
/// probability 1/2, per sample, in place.
pub fn augment_crop_flip<R: Rng + ?Sized>(images: &mut Tensor<f32>, pad: usize, rng: &mut R) {
    let s = images.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let data = images.data_mut();
    let mut buf = vec![0.0f32; per];
    for i in 0..n {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        let src = &data[i * per..(i + 1) * per];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                    let sx = sx0 + dx;
                    buf[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        data[i * per..(i + 1) * per].copy_from_slice(&buf);
    }
}

/// One Mixup pair: a batch and the same batch with rows permuted.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    /// Dataset indices of the `xi` rows.
    pub indices: Vec<usize>,
    /// `xj[r] = xi[perm[r]]`.
    pub perm: Vec<usize>,
    pub xi: Tensor<f32>,
    pub yi: Vec<usize>,
    pub xj: Tensor<f32>,
    pub yj: Vec<usize>,
}

/// One epoch of shuffled, full-size pair batches (the remainder is dropped).
pub struct PairBatches<'a, R> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: bool,
    rng: &'a mut R,
}

/// Shuffles the dataset with `rng` and yields `⌊M/B⌋` pair batches.
pub fn batch_pairs<'a, R: Rng>(dataset: &'a Dataset, batch_size: usize, augment: bool, rng: &'a mut R) -> Result<PairBatches<'a, R>> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(config_err!(
            "batch size {batch_size} must be in 1..={}",
            dataset.len()
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    Ok(PairBatches {
        dataset,
        order,
        batch_size,
        pos: 0,
        augment,
        rng,
    })
}

impl<R: Rng> PairBatches<'_, R> {
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl<R: Rng> Iterator for PairBatches<'_, R> {
    type Item = PairBatch;

    fn next(&mut self) -> Option<PairBatch> {
        if self.pos + self.batch_size > self.order.len() {
            return None;
        }
        let indices = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        let mut perm: Vec<usize> = (0..self.batch_size).collect();
        perm.shuffle(self.rng);
        let (mut xi, yi) = self.dataset.gather(&indices).expect("indices in range");
        if self.augment {
            augment_crop_flip(&mut xi, 4, self.rng);
        }
        let xj = xi.select_rows(&perm).expect("perm in range");
        let yj = perm.iter().map(|&p| yi[p]).collect();
        Some(PairBatch {
            indices,
            perm,
            xi,
            yi,
            xj,
            yj,
        })
    }
}
