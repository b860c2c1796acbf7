//! Imbalance instrumentation: per-class weight norms, ground-truth uni-modal
//! logits, approximate uni-modal accuracy, feature/weight angles, and linear
//! probes on frozen encoder features.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tensor, NORM_EPS};
use crate::error::{Error, Result};
use crate::losses::{ClassifierHead, LossConfig, LossVariant};
use crate::model::FeatureBlocks;

pub const ANGLE_BINS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub epoch: usize,
    pub weight_norms_a: Vec<f64>,
    pub weight_norms_v: Vec<f64>,
    pub mean_gt_logit_a: f64,
    pub mean_gt_logit_v: f64,
    pub approx_acc_a: f64,
    pub approx_acc_v: f64,
    pub joint_acc: f64,
    pub loss: f64,
}

impl DiagnosticsRecord {
    /// `mean_j ‖W_j^a‖ / mean_j ‖W_j^v‖`.
    pub fn norm_ratio(&self) -> f64 {
        mean(&self.weight_norms_a) / mean(&self.weight_norms_v)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-sample angle between each modality's feature and its ground-truth weight column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AngleRecord {
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
}

impl AngleRecord {
    pub fn median_audio(&self) -> f64 {
        median(&self.audio)
    }

    pub fn median_visual(&self) -> f64 {
        median(&self.visual)
    }

    /// Rows of `(step, modality, angle)`.
    pub fn write_csv<W: Write>(&self, mut out: W, step: usize) -> Result<()> {
        for (modality, values) in [("audio", &self.audio), ("visual", &self.visual)] {
            for v in values {
                writeln!(out, "{step},{modality},{v:.17e}")?;
            }
        }
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Uniform histogram over `[0, π]`.
pub fn angle_histogram(angles: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = std::f64::consts::PI / bins as f64;
    for &a in angles {
        let idx = ((a / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

fn modality_scores(features: &Tensor, weights: &Tensor, bias_half: Option<&[f64]>, cosine: bool) -> Vec<Vec<f64>> {
    let n = weights.cols();
    let columns: Vec<Vec<f64>> = (0..n).map(|j| weights.column(j)).collect();
    let col_norms: Vec<f64> = columns.iter().map(|c| kernels::norm(c).max(NORM_EPS)).collect();
    (0..features.rows())
        .map(|i| {
            let x = features.row(i);
            let x_norm = kernels::norm(x).max(NORM_EPS);
            (0..n)
                .map(|j| {
                    let dot = kernels::dot(x, &columns[j]);
                    if cosine {
                        dot / (x_norm * col_norms[j])
                    } else {
                        dot + bias_half.map_or(0.0, |b| 0.5 * b[j])
                    }
                })
                .collect()
        })
        .collect()
}

/// Per-modality argmax predictions of the joint head. Vanilla heads score
/// `W_jᵐᵀφᵐ + b_j/2`; cosine heads score `cos θ_jᵐ`. Ties go to the lowest class.
pub fn approx_unimodal_predictions(
    blocks: &FeatureBlocks,
    head: &ClassifierHead,
    variant: LossVariant,
) -> Result<(Vec<usize>, Vec<usize>)> {
    check_widths(blocks, head)?;
    let cosine = variant == LossVariant::MmCosine;
    let bias = if cosine {
        None
    } else {
        head.b.as_ref().map(|b| b.values())
    };
    let predict = |f: &Tensor, w: &Tensor| -> Vec<usize> {
        modality_scores(f, w, bias, cosine)
            .iter()
            .map(|row| kernels::argmax(row))
            .collect()
    };
    Ok((predict(&blocks.block_a, &head.w_a), predict(&blocks.block_v, &head.w_v)))
}

fn check_widths(blocks: &FeatureBlocks, head: &ClassifierHead) -> Result<()> {
    for (f, w) in [(&blocks.block_a, &head.w_a), (&blocks.block_v, &head.w_v)] {
        if f.cols() != w.rows() {
            return Err(Error::Shape {
                op: "diagnostics",
                lhs: f.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub fn angle_distribution(blocks: &FeatureBlocks, head: &ClassifierHead, labels: &[usize]) -> Result<AngleRecord> {
    check_widths(blocks, head)?;
    let angles = |f: &Tensor, w: &Tensor| -> Vec<f64> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let col = w.column(y);
                let x = f.row(i);
                let cos = kernels::dot(x, &col) / (kernels::norm(x).max(NORM_EPS) * kernels::norm(&col).max(NORM_EPS));
                cos.clamp(-1.0, 1.0).acos()
            })
            .collect()
    };
    Ok(AngleRecord {
        audio: angles(&blocks.block_a, &head.w_a),
        visual: angles(&blocks.block_v, &head.w_v),
    })
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Snapshot of the head and features on an evaluation batch. No side effects.
pub fn record_step(
    step: usize,
    epoch: usize,
    loss_value: f64,
    head: &ClassifierHead,
    blocks: &FeatureBlocks,
    labels: &[usize],
    loss: &LossConfig,
) -> Result<DiagnosticsRecord> {
    check_widths(blocks, head)?;
    let gt_logit = |f: &Tensor, w: &Tensor| -> f64 {
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| kernels::dot(f.row(i), &w.column(y)))
            .sum();
        total / labels.len() as f64
    };
    let (pred_a, pred_v) = approx_unimodal_predictions(blocks, head, loss.variant)?;
    let logits = head.logits(blocks, loss)?;
    let joint: Vec<usize> = (0..logits.rows()).map(|i| kernels::argmax(logits.row(i))).collect();
    Ok(DiagnosticsRecord {
        step,
        epoch,
        weight_norms_a: head.weight_norms_a(),
        weight_norms_v: head.weight_norms_v(),
        mean_gt_logit_a: gt_logit(&blocks.block_a, &head.w_a),
        mean_gt_logit_v: gt_logit(&blocks.block_v, &head.w_v),
        approx_acc_a: accuracy_of(&pred_a, labels),
        approx_acc_v: accuracy_of(&pred_v, labels),
        joint_acc: accuracy_of(&joint, labels),
        loss: loss_value,
    })
}

/// Append-only record list with an off switch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiagnosticsLog {
    enabled: bool,
    records: Vec<DiagnosticsRecord>,
}

impl DiagnosticsLog {
    pub fn new(enabled: bool) -> Self {
        DiagnosticsLog {
            enabled,
            records: Vec::new(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, record: DiagnosticsRecord) {
        if self.enabled {
            self.records.push(record);
        }
    }

    pub fn records(&self) -> &[DiagnosticsRecord] {
        &self.records
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::format("diagnostics", e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Vec<DiagnosticsRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format("diagnostics", e.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_iters: usize,
    /// Stop once the Frobenius norm of the gradient drops below this.
    pub grad_tol: f64,
    /// Z-score features with train statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_iters: 5000,
            grad_tol: 1e-6,
            standardize: true,
        }
    }
}

/// Multinomial logistic regression fit by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(d + 1) × n`, last row is the bias.
    weights: Vec<f64>,
    n_classes: usize,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

fn augment(features: &Tensor, mean: &[f64], scale: &[f64]) -> Vec<f64> {
    let d = features.cols();
    let mut out = Vec::with_capacity(features.rows() * (d + 1));
    for i in 0..features.rows() {
        out.extend(features.row(i).iter().zip(mean.iter().zip(scale)).map(|(x, (m, s))| (x - m) / s));
        out.push(1.0);
    }
    out
}

/// Largest eigenvalue of `XᵀX / N` by power iteration.
fn gram_spectral_norm(x: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let xv = kernels::matmul(x, &v, rows, cols, 1);
        let mut w = kernels::matmul_a_transposed(x, &xv, rows, cols, 1);
        w.iter_mut().for_each(|e| *e /= rows as f64);
        let n = kernels::norm(&w);
        if n == 0.0 {
            return 0.0;
        }
        lambda = n;
        v = w.into_iter().map(|e| e / n).collect();
    }
    lambda
}

impl LinearProbe {
    pub fn fit(features: &Tensor, labels: &[usize], n_classes: usize, config: &ProbeConfig) -> Result<Self> {
        let (rows, d) = (features.rows(), features.cols());
        if rows == 0 || labels.len() != rows {
            return Err(Error::invalid("probe", format!("{} labels for {rows} feature rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: n_classes,
            });
        }
        let (mean, scale) = if config.standardize {
            let mean: Vec<f64> = (0..d).map(|j| features.column(j).iter().sum::<f64>() / rows as f64).collect();
            let scale = (0..d)
                .map(|j| {
                    let var = features.column(j).iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / rows as f64;
                    let sd = var.sqrt();
                    if sd > 1e-12 { sd } else { 1.0 }
                })
                .collect();
            (mean, scale)
        } else {
            (vec![0.0; d], vec![1.0; d])
        };
        let x = augment(features, &mean, &scale);
        let cols = d + 1;
        // Softmax cross-entropy is (λmax/2)-smooth in the weights.
        let smoothness = 0.5 * gram_spectral_norm(&x, rows, cols);
        let lr = if smoothness > 0.0 { 1.0 / smoothness } else { 1.0 };

        let mut weights = vec![0.0; cols * n_classes];
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;
        while iterations < config.max_iters {
            let logits = kernels::matmul(&x, &weights, rows, cols, n_classes);
            let mut residual = Vec::with_capacity(rows * n_classes);
            for (i, &y) in labels.iter().enumerate() {
                let (mut p, _) = kernels::softmax_row(&logits[i * n_classes..(i + 1) * n_classes]);
                p[y] -= 1.0;
                residual.extend(p);
            }
            let mut grad = kernels::matmul_a_transposed(&x, &residual, rows, cols, n_classes);
            grad.iter_mut().for_each(|g| *g /= rows as f64);
            grad_norm = kernels::norm(&grad);
            if grad_norm < config.grad_tol {
                break;
            }
            weights.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
            iterations += 1;
        }
        Ok(LinearProbe {
            mean,
            scale,
            weights,
            n_classes,
            iterations,
            final_grad_norm: grad_norm,
        })
    }

    pub fn predict(&self, features: &Tensor) -> Vec<usize> {
        let x = augment(features, &self.mean, &self.scale);
        let cols = self.mean.len() + 1;
        let logits = kernels::matmul(&x, &self.weights, features.rows(), cols, self.n_classes);
        logits.chunks(self.n_classes).map(kernels::argmax).collect()
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> f64 {
        accuracy_of(&self.predict(features), labels)
    }
}

/// Frozen per-modality features for a probe: train split to fit, test split to score.
#[derive(Debug, Clone)]
pub struct ProbeData<'a> {
    pub train_a: &'a Tensor,
    pub train_v: &'a Tensor,
    pub train_labels: &'a [usize],
    pub test_a: &'a Tensor,
    pub test_v: &'a Tensor,
    pub test_labels: &'a [usize],
}

/// Held-out accuracy of fresh linear classifiers on each modality's features.
/// Only reads its inputs.
pub fn linear_probe(data: &ProbeData<'_>, n_classes: usize, config: &ProbeConfig) -> Result<(f64, f64)> {
    if data.test_labels.is_empty() {
        return Err(Error::invalid("probe", "empty evaluation split"));
    }
    let a = LinearProbe::fit(data.train_a, data.train_labels, n_classes, config)?;
    let v = LinearProbe::fit(data.train_v, data.train_labels, n_classes, config)?;
    Ok((
        a.accuracy(data.test_a, data.test_labels),
        v.accuracy(data.test_v, data.test_labels),
    ))
}
