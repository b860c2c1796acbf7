//! Synthetic bimodal fine-grained classification data.
//!
//! Every class owns one unit-norm center per modality. Centers are random
//! directions pulled toward a shared anchor so that any two of them subtend
//! roughly `inter_class_angle`. A sample is its class center plus isotropic
//! Gaussian noise: per-coordinate standard deviation `intra_class_spread` for
//! audio and `dominance * intra_class_spread` for visual, so `dominance > 1`
//! makes audio the strong modality.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`; the same
//! config always yields a bit-identical dataset.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 7] = b"MMCDAT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub dim_a: usize,
    pub dim_v: usize,
    /// Approximate pairwise angle between class centers, radians.
    pub inter_class_angle: f64,
    pub intra_class_spread: f64,
    /// Visual-to-audio noise ratio, `>= 1`.
    pub dominance: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_classes: 20,
            dim_a: 32,
            dim_v: 32,
            inter_class_angle: 0.5,
            intra_class_spread: 0.025,
            dominance: 4.0,
            n_train: 1000,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_classes < 2 {
            problems.push(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.dim_a < 2 {
            problems.push(format!("dim_a must be >= 2, got {}", self.dim_a));
        }
        if self.dim_v < 2 {
            problems.push(format!("dim_v must be >= 2, got {}", self.dim_v));
        }
        if !(self.inter_class_angle > 0.0 && self.inter_class_angle < std::f64::consts::FRAC_PI_2) {
            problems.push(format!(
                "inter_class_angle must lie in (0, pi/2), got {}",
                self.inter_class_angle
            ));
        }
        if !(self.intra_class_spread > 0.0 && self.intra_class_spread.is_finite()) {
            problems.push(format!(
                "intra_class_spread must be positive, got {}",
                self.intra_class_spread
            ));
        }
        if !(self.dominance >= 1.0 && self.dominance.is_finite()) {
            problems.push(format!("dominance must be >= 1, got {}", self.dominance));
        }
        if self.n_train == 0 {
            problems.push("n_train must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalSample {
    pub x_a: Vec<f64>,
    pub x_v: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub dim_a: usize,
    pub dim_v: usize,
    pub seed: u64,
    pub train: Vec<BimodalSample>,
    pub test: Vec<BimodalSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPair {
    pub index_1: usize,
    pub index_2: usize,
    pub is_target: bool,
}

/// Per-class centers for audio and visual, in class order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCenters {
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Blends random directions toward an anchor: `cos(alpha)·anchor + sin(alpha)·u`
/// with `u ⊥ anchor`. Two such centers have cosine `cos²(alpha) + sin²(alpha)·u₁·u₂`,
/// which is `cos(angle)` when the residual directions are orthogonal.
fn draw_centers(rng: &mut ChaCha8Rng, n_classes: usize, dim: usize, angle: f64) -> Vec<Vec<f64>> {
    let mut anchor = gaussian_vec(rng, dim);
    normalize(&mut anchor);
    let cos_alpha = angle.cos().sqrt();
    let sin_alpha = (1.0 - cos_alpha * cos_alpha).sqrt();
    (0..n_classes)
        .map(|_| {
            let mut u = gaussian_vec(rng, dim);
            let along: f64 = u.iter().zip(&anchor).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(&anchor).for_each(|(x, a)| *x -= along * a);
            normalize(&mut u);
            let mut c: Vec<f64> = anchor
                .iter()
                .zip(&u)
                .map(|(a, r)| cos_alpha * a + sin_alpha * r)
                .collect();
            normalize(&mut c);
            c
        })
        .collect()
}

fn centers_from_rng(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> PlantedCenters {
    let audio = draw_centers(rng, config.n_classes, config.dim_a, config.inter_class_angle);
    let visual = draw_centers(rng, config.n_classes, config.dim_v, config.inter_class_angle);
    PlantedCenters { audio, visual }
}

pub fn planted_centers(config: &GeneratorConfig) -> Result<PlantedCenters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(centers_from_rng(config, &mut rng))
}

pub fn generate_classification(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers = centers_from_rng(config, &mut rng);
    let sigma_a = config.intra_class_spread;
    let sigma_v = config.intra_class_spread * config.dominance;

    let mut draw = |count: usize| -> Vec<BimodalSample> {
        (0..count)
            .map(|i| {
                let label = i % config.n_classes;
                let x_a = centers.audio[label]
                    .iter()
                    .map(|c| c + sigma_a * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let x_v = centers.visual[label]
                    .iter()
                    .map(|c| c + sigma_v * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                BimodalSample { x_a, x_v, label }
            })
            .collect()
    };
    let train = draw(config.n_train);
    let test = draw(config.n_test);
    Ok(Dataset {
        n_classes: config.n_classes,
        dim_a: config.dim_a,
        dim_v: config.dim_v,
        seed: config.seed,
        train,
        test,
    })
}

/// Samples verification trials over `samples`: `round(n_pairs · target_fraction)`
/// same-class pairs and the rest cross-class, in shuffled order. Self-pairs never occur.
pub fn generate_trials(
    samples: &[BimodalSample],
    n_pairs: usize,
    target_fraction: f64,
    seed: u64,
) -> Result<Vec<TrialPair>> {
    if samples.is_empty() {
        return Err(Error::invalid("dataset", "no samples to pair"));
    }
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs", "must be positive"));
    }
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::invalid(
            "target_fraction",
            format!("must lie in [0, 1], got {target_fraction}"),
        ));
    }
    let n_target = (n_pairs as f64 * target_fraction).round() as usize;
    let n_nontarget = n_pairs - n_target;

    let n_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let multi: Vec<&Vec<usize>> = by_class.iter().filter(|c| c.len() >= 2).collect();
    let populated = by_class.iter().filter(|c| !c.is_empty()).count();
    if n_target > 0 && multi.is_empty() {
        return Err(Error::invalid(
            "target_fraction",
            "target pairs requested but every class has fewer than two samples",
        ));
    }
    if n_nontarget > 0 && populated < 2 {
        return Err(Error::invalid(
            "target_fraction",
            "nontarget pairs requested but the samples cover a single class",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_pairs);
    for _ in 0..n_target {
        let class = multi[rng.random_range(0..multi.len())];
        let i = rng.random_range(0..class.len());
        let mut j = rng.random_range(0..class.len() - 1);
        if j >= i {
            j += 1;
        }
        trials.push(TrialPair {
            index_1: class[i],
            index_2: class[j],
            is_target: true,
        });
    }
    while trials.len() < n_pairs {
        let i = rng.random_range(0..samples.len());
        let j = rng.random_range(0..samples.len());
        if samples[i].label != samples[j].label {
            trials.push(TrialPair {
                index_1: i,
                index_2: j,
                is_target: false,
            });
        }
    }
    trials.shuffle(&mut rng);
    Ok(trials)
}

fn put_u32(out: &mut Vec<u8>, v: usize, field: &'static str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(field, "exceeds u32 range"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Dataset {
    /// Serializes to the `.mmcdat` layout:
    ///
    /// ```text
    /// "MMCDAT1"                           7 bytes
    /// n_classes, dim_a, dim_v,
    /// n_train, n_test                     u32 LE each
    /// seed                                u64 LE
    /// per sample (train, then test):
    ///   x_a                               dim_a × f64 LE
    ///   x_v                               dim_v × f64 LE
    ///   label                             u32 LE
    /// ```
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let per_sample = 8 * (self.dim_a + self.dim_v) + 4;
        let mut out = Vec::with_capacity(35 + per_sample * (self.train.len() + self.test.len()));
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, self.n_classes, "n_classes")?;
        put_u32(&mut out, self.dim_a, "dim_a")?;
        put_u32(&mut out, self.dim_v, "dim_v")?;
        put_u32(&mut out, self.train.len(), "n_train")?;
        put_u32(&mut out, self.test.len(), "n_test")?;
        out.extend_from_slice(&self.seed.to_le_bytes());
        for s in self.train.iter().chain(&self.test) {
            if s.x_a.len() != self.dim_a || s.x_v.len() != self.dim_v {
                return Err(Error::format("dataset", "sample width differs from header"));
            }
            for v in s.x_a.iter().chain(&s.x_v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, s.label, "label")?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 7];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| Error::format("dataset", "truncated header"))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let u32_at = |c: &mut &[u8]| -> Result<usize> {
            let mut b = [0u8; 4];
            c.read_exact(&mut b)
                .map_err(|_| Error::format("dataset", "truncated"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let n_classes = u32_at(&mut cursor)?;
        let dim_a = u32_at(&mut cursor)?;
        let dim_v = u32_at(&mut cursor)?;
        let n_train = u32_at(&mut cursor)?;
        let n_test = u32_at(&mut cursor)?;
        let mut seed = [0u8; 8];
        cursor
            .read_exact(&mut seed)
            .map_err(|_| Error::format("dataset", "truncated header"))?;
        let seed = u64::from_le_bytes(seed);

        let per_sample = 8 * (dim_a + dim_v) + 4;
        let total = n_train + n_test;
        if cursor.len() != per_sample * total {
            return Err(Error::format(
                "dataset",
                format!(
                    "expected {} payload bytes, found {}",
                    per_sample * total,
                    cursor.len()
                ),
            ));
        }
        let mut samples = Vec::with_capacity(total);
        for chunk in cursor.chunks_exact(per_sample) {
            let floats: Vec<f64> = chunk[..8 * (dim_a + dim_v)]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let label = u32::from_le_bytes(chunk[per_sample - 4..].try_into().unwrap()) as usize;
            if label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: n_classes,
                });
            }
            samples.push(BimodalSample {
                x_a: floats[..dim_a].to_vec(),
                x_v: floats[dim_a..].to_vec(),
                label,
            });
        }
        let test = samples.split_off(n_train);
        Ok(Dataset {
            n_classes,
            dim_a,
            dim_v,
            seed,
            train: samples,
            test,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
