//! Seeded synthetic fine-grained classification data and the `UDTD` file
//! format.
//!
//! Every class is a smooth template shared with other classes plus a small
//! class-specific patch; samples add Gaussian pixel noise. Lowering the
//! patch amplitude makes classes that share a template harder to separate.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"UDTD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub channels: usize,
    /// Number of distinct smooth templates; class `k` uses template
    /// `k % templates`.
    pub templates: usize,
    /// Peak patch perturbation as a fraction of the pixel range.
    pub amplitude: f64,
    /// Side of the square class patch in pixels.
    pub patch: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Source task for pretraining at desk scale.
    pub fn desk_source() -> Self {
        SynthSpec {
            classes: 8,
            train_per_class: 100,
            test_per_class: 25,
            resolution: 32,
            channels: 3,
            templates: 4,
            amplitude: 0.3,
            patch: 10,
            noise_sigma: 0.08,
            seed: 1,
        }
    }

    /// Target task for adaptation at desk scale (different templates and K).
    pub fn desk_target() -> Self {
        SynthSpec {
            classes: 10,
            train_per_class: 40,
            test_per_class: 30,
            templates: 5,
            amplitude: 0.2,
            seed: 2,
            ..Self::desk_source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic data: {m}")));
        if self.classes < 2 {
            return fail(format!("need at least two classes, got {}", self.classes));
        }
        if self.templates == 0 || self.templates >= self.classes {
            return fail(format!(
                "templates must be in 1..{} so classes share templates, got {}",
                self.classes, self.templates
            ));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 0.5) {
            return fail(format!("amplitude must lie in (0, 0.5], got {}", self.amplitude));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.resolution == 0 || self.channels == 0 {
            return fail("resolution and channels must be positive".into());
        }
        if self.patch == 0 || self.patch > self.resolution {
            return fail(format!("patch side must be in 1..={}", self.resolution));
        }
        if self.train_per_class == 0 {
            return fail("need at least one training sample per class".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    /// Read from disk; the file format does not record the split.
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} images but {} labels", images.shape().n, labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.slice_batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Writes the dataset as `UDTD`: magic, version, K, n, c, h, w, n labels
    /// and n·c·h·w pixels, all little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = self.images.shape();
        let mut out = Vec::with_capacity(28 + 4 * (s.n + s.len()));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION as usize, self.classes, s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &p in self.images.data() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let mut r = crate::binio::Reader::new(&bytes, path);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let classes = r.u32()? as usize;
        let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let expected = 4 * (shape.n + shape.len());
        if r.remaining() != expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("header declares {expected} payload bytes, found {}", r.remaining()),
            });
        }
        let labels = (0..shape.n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let pixels = r.f32s(shape.len())?;
        Dataset::new(Tensor::from_vec(shape, pixels)?, labels, classes, Split::Unknown)
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sub_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let s = tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)));
    ChaCha8Rng::seed_from_u64(s)
}

const TEMPLATE_TAG: u64 = 1;
const PATCH_TAG: u64 = 2;
const SAMPLE_TAG: u64 = 3;

/// Low-frequency field in roughly `[0.2, 0.8]`: a sum of a few random 2-D
/// cosines per channel.
fn template(spec: &SynthSpec, index: usize) -> Vec<f32> {
    let mut rng = sub_rng(spec.seed, &[TEMPLATE_TAG, index as u64]);
    let r = spec.resolution;
    let mut out = vec![0f32; spec.channels * r * r];
    for ch in out.chunks_mut(r * r) {
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.3..2.0),
                    rng.gen_range(0.3..2.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        for y in 0..r {
            for x in 0..r {
                let (u, v) = (y as f64 / r as f64, x as f64 / r as f64);
                let s: f64 = waves
                    .iter()
                    .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * u + fx * v) + ph).cos())
                    .sum();
                ch[y * r + x] = (0.5 + 0.075 * s) as f32;
            }
        }
    }
    out
}

/// Class prototype: template plus a localized patch of values in
/// `[-amplitude, amplitude]`.
pub fn prototype(spec: &SynthSpec, class: usize) -> Vec<f32> {
    let mut img = template(spec, class % spec.templates);
    let mut rng = sub_rng(spec.seed, &[PATCH_TAG, class as u64]);
    let r = spec.resolution;
    let p = spec.patch;
    let y0 = rng.gen_range(0..=r - p);
    let x0 = rng.gen_range(0..=r - p);
    for ch in img.chunks_mut(r * r) {
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                ch[y * r + x] += rng.gen_range(-spec.amplitude..=spec.amplitude) as f32;
            }
        }
    }
    img
}

fn split_set(spec: &SynthSpec, protos: &[Vec<f32>], per_class: usize, split: Split) -> Result<Dataset> {
    let r = spec.resolution;
    let n = spec.classes * per_class;
    let sample_len = spec.channels * r * r;
    let mut pixels = Vec::with_capacity(n * sample_len);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let split_tag = match split {
        Split::Train => 0,
        _ => 1,
    };
    // interleave classes so that contiguous slices stay balanced
    for i in 0..per_class {
        for (k, proto) in protos.iter().enumerate() {
            let mut rng = sub_rng(spec.seed, &[SAMPLE_TAG, split_tag, k as u64, i as u64]);
            pixels.extend(proto.iter().map(|&v| {
                let e = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                (v + e).clamp(0.0, 1.0)
            }));
            labels.push(k);
        }
    }
    let images = Tensor::from_vec(Shape::new(n, spec.channels, r, r), pixels)?;
    Dataset::new(images, labels, spec.classes, split)
}

/// Deterministic `(train, test)` pair for `spec`.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let protos: Vec<Vec<f32>> = (0..spec.classes).map(|k| prototype(spec, k)).collect();
    Ok((
        split_set(spec, &protos, spec.train_per_class, Split::Train)?,
        split_set(spec, &protos, spec.test_per_class, Split::Test)?,
    ))
}

/// Accuracy of assigning each sample to the nearest noise-free class
/// prototype (clamped like the samples).
pub fn nearest_prototype_accuracy(spec: &SynthSpec, data: &Dataset) -> f64 {
    let protos: Vec<Vec<f32>> = (0..spec.classes)
        .map(|k| prototype(spec, k).into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect();
    let correct = (0..data.len())
        .filter(|&i| {
            let x = data.images.sample(i);
            let best = protos
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let d: f64 = p.iter().zip(x).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
                    (d, k)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            best == data.labels[i]
        })
        .count();
    correct as f64 / data.len().max(1) as f64
}
