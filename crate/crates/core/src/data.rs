//! Datasets: the binary image format, a synthetic generator, and batching.
//!
//! Binary layout (little-endian): a 16-byte header
//! `"DCSS" | u8 version | u8 C | u16 H | u16 W | u32 N | u16 num_classes`
//! followed by `N` records of `1 + C*H*W` bytes, a label byte then
//! channel-planar row-major pixels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Targets;
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"DCSS";
const VERSION: u8 = 1;
const HEADER: usize = 16;

/// Per-channel constants applied to pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    /// Regression targets, `[N, 1, H, W]` flattened; empty for classification.
    targets: Vec<f64>,
    normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Regress,
}

impl Dataset {
    pub fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Dimension(format!(
                "{} pixel bytes for {} samples of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Index(format!("label {l} with {num_classes} classes")));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            pixels,
            labels,
            targets: Vec::new(),
            normalization: None,
        })
    }

    /// The samples at `indices`, in that order, without normalization.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let plane = self.height * self.width;
        let mut out = Dataset {
            pixels: Vec::with_capacity(indices.len() * self.sample_size()),
            labels: Vec::with_capacity(indices.len()),
            targets: Vec::new(),
            normalization: None,
            ..*self
        };
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} of {}", self.len())));
            }
            out.pixels.extend_from_slice(self.pixels(i));
            out.labels.push(self.labels[i]);
            if !self.targets.is_empty() {
                out.targets.extend_from_slice(&self.targets[i * plane..(i + 1) * plane]);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn task(&self) -> Task {
        if self.targets.is_empty() {
            Task::Classify
        } else {
            Task::Regress
        }
    }

    fn sample_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let n = self.sample_size();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Per-channel mean and standard deviation of the scaled pixels of `indices`.
    pub fn fit_normalization(&self, indices: &[usize]) -> Result<Normalization> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset("no samples to fit normalization on".into()));
        }
        let plane = self.height * self.width;
        let count = (indices.len() * plane) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for &i in indices {
            for (c, chunk) in self.pixels(i).chunks_exact(plane).enumerate() {
                for &p in chunk {
                    let v = p as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        if norm.mean.len() != self.channels || norm.std.len() != self.channels {
            return Err(Error::Dimension(format!(
                "normalization for {} channels on a {}-channel dataset",
                norm.mean.len(),
                self.channels
            )));
        }
        self.normalization = Some(norm);
        Ok(())
    }

    /// Normalized images and targets of `indices`.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<(Tensor<T>, Targets<T>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let plane = self.height * self.width;
        let mut x = Vec::with_capacity(indices.len() * self.sample_size());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} of {}", self.len())));
            }
            for (c, chunk) in self.pixels(i).chunks_exact(plane).enumerate() {
                let (m, s) = match &self.normalization {
                    Some(n) => (n.mean[c], n.std[c]),
                    None => (0.0, 1.0),
                };
                x.extend(chunk.iter().map(|&p| T::from_f64_lossy((p as f64 / 255.0 - m) / s)));
            }
        }
        let images = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], x)?;
        let targets = match self.task() {
            Task::Classify => Targets::Labels(indices.iter().map(|&i| self.label(i)).collect()),
            Task::Regress => {
                let t: Vec<T> = indices
                    .iter()
                    .flat_map(|&i| &self.targets[i * plane..(i + 1) * plane])
                    .map(|&v| T::from_f64_lossy(v))
                    .collect();
                Targets::Values(Tensor::new(vec![indices.len(), 1, self.height, self.width], t)?)
            }
        };
        Ok((images, targets))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let fits = |v: usize, max: usize, what: &str| {
            if v > max {
                Err(Error::Argument(format!("{what} {v} does not fit the binary header")))
            } else {
                Ok(())
            }
        };
        fits(self.channels, u8::MAX as usize, "channel count")?;
        fits(self.height, u16::MAX as usize, "height")?;
        fits(self.width, u16::MAX as usize, "width")?;
        fits(self.len(), u32::MAX as usize, "sample count")?;
        fits(self.num_classes, u16::MAX as usize, "class count")?;
        let mut out = Vec::with_capacity(HEADER + self.len() * (1 + self.sample_size()));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.pixels(i));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::format(
                bytes.len(),
                format!("header needs {HEADER} bytes, file has {}", bytes.len()),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"DCSS\""));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(4, format!("unsupported version {}", bytes[4])));
        }
        let c = bytes[5] as usize;
        let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let w = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        let n = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let classes = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::format(5, format!("degenerate image shape {c}x{h}x{w}")));
        }
        let record = 1 + c * h * w;
        let body = &bytes[HEADER..];
        if body.len() != n * record {
            let full = body.len() / record;
            let offset = HEADER + full.min(n) * record;
            return Err(Error::format(
                offset,
                format!(
                    "expected {n} records of {record} bytes ({} bytes), found {} bytes",
                    n * record,
                    body.len()
                ),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * (record - 1));
        for (i, r) in body.chunks_exact(record).enumerate() {
            if r[0] as usize >= classes {
                return Err(Error::format(
                    HEADER + i * record,
                    format!("label {} with {classes} classes", r[0]),
                ));
            }
            labels.push(r[0]);
            pixels.extend_from_slice(&r[1..]);
        }
        Dataset::from_parts(c, h, w, classes, pixels, labels)
    }
}

pub fn write_binary_dataset(path: &Path, data: &Dataset) -> Result<()> {
    std::fs::write(path, data.to_bytes()?)?;
    Ok(())
}

pub fn load_binary_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: Task,
    pub num_classes: usize,
    pub n_samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    color: Vec<f64>,
}

fn prototypes<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<Vec<Blob>> {
    (0..spec.num_classes)
        .map(|_| {
            (0..2)
                .map(|_| Blob {
                    cy: rng.gen_range(0.0..spec.height as f64),
                    cx: rng.gen_range(0.0..spec.width as f64),
                    radius: rng.gen_range(0.12..0.3) * spec.height.min(spec.width) as f64,
                    color: (0..spec.channels).map(|_| rng.gen_range(0.2..1.0)).collect(),
                })
                .collect()
        })
        .collect()
}

/// Class-conditional Gaussian-blob images. Each class owns two blobs with
/// fixed centers and colors; samples scale them by a random amplitude and,
/// for `noise > 0`, shift them and add pixel noise of that standard
/// deviation. Regression targets are the 3x3 box-blurred channel mean.
pub fn make_synthetic<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    if spec.n_samples == 0 {
        return Err(Error::EmptyDataset("synthetic dataset with 0 samples".into()));
    }
    if spec.num_classes == 0 || spec.num_classes > 256 || spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Argument(format!("invalid synthetic spec {spec:?}")));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(Error::Argument(format!("noise must be a nonnegative number, got {}", spec.noise)));
    }
    let protos = prototypes(spec, rng);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let pixel_noise = Normal::new(0.0, spec.noise.max(1e-300)).expect("valid std");
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut pixels = Vec::with_capacity(spec.n_samples * c * h * w);
    let mut targets = Vec::new();
    for _ in 0..spec.n_samples {
        let label = rng.gen_range(0..spec.num_classes);
        let amp = rng.gen_range(0.7..1.0);
        let (dy, dx) = if spec.noise > 0.0 {
            (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0))
        } else {
            (0.0, 0.0)
        };
        let mut img = vec![0.0f64; c * h * w];
        for blob in &protos[label] {
            let two_r2 = 2.0 * blob.radius * blob.radius;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - blob.cy - dy).powi(2) + (x as f64 - blob.cx - dx).powi(2);
                    let g = amp * (-d2 / two_r2).exp();
                    for ch in 0..c {
                        img[(ch * h + y) * w + x] += g * blob.color[ch];
                    }
                }
            }
        }
        if spec.noise > 0.0 {
            img.iter_mut().for_each(|v| *v += pixel_noise.sample(rng));
        }
        let bytes: Vec<u8> = img
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        if spec.task == Task::Regress {
            targets.extend(blurred_mean(&bytes, c, h, w));
        }
        labels.push(label as u8);
        pixels.extend(bytes);
    }
    let mut data = Dataset::from_parts(c, h, w, spec.num_classes, pixels, labels)?;
    data.targets = targets;
    Ok(data)
}

/// 3x3 box blur (zero padded) of the channel mean, in `[0, 1]` units.
fn blurred_mean(bytes: &[u8], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mean: Vec<f64> = (0..h * w)
        .map(|p| (0..c).map(|ch| bytes[ch * h * w + p] as f64).sum::<f64>() / (255.0 * c as f64))
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += mean[yy * w + xx];
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

/// Shuffled, disjoint and exhaustive `(train, val)` index lists.
pub fn split_indices<R: Rng>(n: usize, val_fraction: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset("cannot split an empty dataset".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Argument(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Argument(format!(
            "val_fraction {val_fraction} of {n} samples leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// Shuffled mini-batches of `indices`; the last batch may be smaller.
pub fn batches<R: Rng>(indices: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(n: usize) -> SyntheticSpec {
        SyntheticSpec {
            task: Task::Classify,
            num_classes: 4,
            n_samples: n,
            channels: 3,
            height: 8,
            width: 8,
            noise: 0.1,
        }
    }

    #[test]
    fn header_size_arithmetic() {
        let mut bytes = b"DCSS".to_vec();
        bytes.extend([1, 3, 2, 0, 2, 0, 1, 0, 0, 0, 2, 0]);
        bytes.push(1);
        bytes.extend(0..12u8);
        let d = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!((d.len(), d.channels, d.height, d.width), (1, 3, 2, 2));
        assert_eq!(d.pixels(0), &(0..12u8).collect::<Vec<_>>()[..]);
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("expected 1 records of 13 bytes"), "{err}");
        assert!(matches!(Dataset::from_bytes(b"XCSS0000000000000"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = split_indices(50_000, 0.1, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (45_000, 5_000));
        let (a, b) = split_indices(10, 0.5, &mut rng).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(split_indices(1, 0.5, &mut rng).is_err());
        assert!(split_indices(10, 0.0, &mut rng).is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = make_synthetic(&spec(20), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_synthetic(&spec(20), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            make_synthetic(&spec(0), &mut ChaCha8Rng::seed_from_u64(3)),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn normalization_centers_channels() {
        let mut d = make_synthetic(&spec(30), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let all: Vec<usize> = (0..d.len()).collect();
        let n = d.fit_normalization(&all).unwrap();
        d.set_normalization(n).unwrap();
        let (x, _) = d.batch::<f64>(&all).unwrap();
        let plane = 64;
        for c in 0..3 {
            let vals: Vec<f64> = (0..30)
                .flat_map(|i| x.data()[(i * 3 + c) * plane..(i * 3 + c + 1) * plane].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6, "{m} {v}");
        }
    }
}
