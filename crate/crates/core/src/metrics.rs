//! Top-1 accuracy, cosine verification scoring, EER and minDCF.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tensor, NORM_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    /// Higher means more likely same class.
    pub score: f64,
    pub is_target: bool,
}

impl ScoredTrial {
    pub fn new(score: f64, is_target: bool) -> Self {
        ScoredTrial { score, is_target }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.01,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_miss > 0.0 && self.c_miss.is_finite()) {
            return Err(Error::invalid("c_miss", format!("must be positive, got {}", self.c_miss)));
        }
        if !(self.c_fa > 0.0 && self.c_fa.is_finite()) {
            return Err(Error::invalid("c_fa", format!("must be positive, got {}", self.c_fa)));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid("p_target", format!("must lie in (0, 1), got {}", self.p_target)));
        }
        Ok(())
    }

    fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)
    }

    fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("labels", "empty input"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(
            "predictions",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Cosine similarity with norms floored at the shared epsilon.
pub fn verification_score(emb_1: &[f64], emb_2: &[f64]) -> Result<f64> {
    if emb_1.len() != emb_2.len() {
        return Err(Error::Shape {
            op: "verification_score",
            lhs: vec![emb_1.len()],
            rhs: vec![emb_2.len()],
        });
    }
    let n1 = kernels::norm(emb_1).max(NORM_EPS);
    let n2 = kernels::norm(emb_2).max(NORM_EPS);
    let dot: f64 = emb_1.iter().zip(emb_2).map(|(a, b)| (a / n1) * (b / n2)).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Row-wise `[φa/‖φa‖ ; φv/‖φv‖]`.
pub fn verification_embeddings(block_a: &Tensor, block_v: &Tensor) -> Result<Tensor> {
    if block_a.rows() != block_v.rows() {
        return Err(Error::Shape {
            op: "verification_embeddings",
            lhs: block_a.shape().to_vec(),
            rhs: block_v.shape().to_vec(),
        });
    }
    let width = block_a.cols() + block_v.cols();
    let mut values = Vec::with_capacity(block_a.rows() * width);
    for i in 0..block_a.rows() {
        for row in [block_a.row(i), block_v.row(i)] {
            let n = kernels::norm(row).max(NORM_EPS);
            values.extend(row.iter().map(|x| x / n));
        }
    }
    Tensor::matrix(block_a.rows(), width, values)
}

/// Error rates at each sweep threshold, ascending from −∞ to +∞.
/// FRR(t) counts targets below `t`; FAR(t) counts nontargets at or above `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f64>,
    pub frr: Vec<f64>,
    pub far: Vec<f64>,
}

pub fn threshold_sweep(trials: &[ScoredTrial]) -> Result<ThresholdSweep> {
    let n_target = trials.iter().filter(|t| t.is_target).count();
    let n_non = trials.len() - n_target;
    if n_target == 0 || n_non == 0 {
        return Err(Error::invalid(
            "trials",
            format!("need targets and nontargets, got {n_target} and {n_non}"),
        ));
    }
    if let Some(t) = trials.iter().find(|t| !t.score.is_finite()) {
        return Err(Error::invalid("trials", format!("non-finite score {}", t.score)));
    }
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut thresholds = vec![f64::NEG_INFINITY];
    let mut frr = vec![0.0];
    let mut far = vec![1.0];
    let (mut targets_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        thresholds.push(t);
        frr.push(targets_below as f64 / n_target as f64);
        far.push((n_non - non_below) as f64 / n_non as f64);
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].is_target {
                targets_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    thresholds.push(f64::INFINITY);
    frr.push(1.0);
    far.push(0.0);
    Ok(ThresholdSweep { thresholds, frr, far })
}

/// Rate at the first sweep point where FRR reaches FAR, linearly
/// interpolated against the previous point.
pub fn eer_from_rates(frr: &[f64], far: &[f64]) -> f64 {
    let mut prev_d = frr[0] - far[0];
    if prev_d >= 0.0 {
        return frr[0];
    }
    for k in 1..frr.len() {
        let d = frr[k] - far[k];
        if d >= 0.0 {
            let alpha = prev_d / (prev_d - d);
            return frr[k - 1] + alpha * (frr[k] - frr[k - 1]);
        }
        prev_d = d;
    }
    frr[frr.len() - 1]
}

pub fn eer(trials: &[ScoredTrial]) -> Result<f64> {
    let sweep = threshold_sweep(trials)?;
    Ok(eer_from_rates(&sweep.frr, &sweep.far))
}

pub fn min_dcf(trials: &[ScoredTrial], params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let sweep = threshold_sweep(trials)?;
    Ok(min_dcf_from_rates(&sweep.frr, &sweep.far, params))
}

pub fn min_dcf_from_rates(frr: &[f64], far: &[f64], params: &DcfParams) -> f64 {
    let best = frr
        .iter()
        .zip(far)
        .map(|(&m, &f)| params.cost(m, f))
        .fold(f64::INFINITY, f64::min);
    best / params.normalizer()
}

/// One `score,is_target` row per trial, scores with 17 significant digits.
pub fn write_trials_csv<W: Write>(mut out: W, trials: &[ScoredTrial]) -> Result<()> {
    writeln!(out, "score,is_target")?;
    for t in trials {
        writeln!(out, "{:.16e},{}", t.score, u8::from(t.is_target))?;
    }
    Ok(())
}

/// Accepts an optional header; targets as `1/0` or `true/false`.
pub fn read_trials_csv<R: BufRead>(input: R) -> Result<Vec<ScoredTrial>> {
    let mut trials = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("score")) {
            continue;
        }
        let bad = |reason: &str| Error::format("trials", format!("line {}: {reason}", lineno + 1));
        let (score, target) = line.split_once(',').ok_or_else(|| bad("expected two fields"))?;
        let score: f64 = score.trim().parse().map_err(|_| bad("unparseable score"))?;
        if !score.is_finite() {
            return Err(bad("non-finite score"));
        }
        let is_target = match target.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad("is_target must be 0/1 or true/false")),
        };
        trials.push(ScoredTrial { score, is_target });
    }
    Ok(trials)
}
