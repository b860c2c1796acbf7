//! Classifier heads and objectives.
//!
//! The vanilla head scores `f_j = W_aⱼᵀφa + W_vⱼᵀφv + b_j`, i.e. a linear layer
//! over the concatenation `[φa; φv]` split into per-modality weight blocks.
//! The cosine head normalizes each modality's features and each class column
//! of its weight block separately and scores `s·(cos θa_j + cos θv_j)`; it has
//! no bias. Both feed the same softmax cross-entropy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::model::{FeatureBlocks, Forward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    Vanilla,
    MmCosine,
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Vanilla => "vanilla",
            LossVariant::MmCosine => "mmcosine",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" | "softmax" => Ok(LossVariant::Vanilla),
            "mmcosine" | "cosine" => Ok(LossVariant::MmCosine),
            other => Err(Error::invalid("loss", format!("unknown loss variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Logit scale for cosine heads (main and auxiliary).
    pub s: f64,
    /// Weight λ on the auxiliary uni-modal losses; 0 disables them.
    pub aux_weight: f64,
}

impl LossConfig {
    pub fn vanilla() -> Self {
        LossConfig {
            variant: LossVariant::Vanilla,
            s: 1.0,
            aux_weight: 0.0,
        }
    }

    pub fn mmcosine(s: f64) -> Self {
        LossConfig {
            variant: LossVariant::MmCosine,
            s,
            aux_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::invalid("s", format!("scale must be positive, got {}", self.s)));
        }
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::invalid(
                "aux_weight",
                format!("must be non-negative, got {}", self.aux_weight),
            ));
        }
        Ok(())
    }

    /// Message when a cosine scale sits below the bound for posterior 0.9.
    pub fn scale_warning(&self, n_classes: usize) -> Option<String> {
        if self.variant != LossVariant::MmCosine {
            return None;
        }
        let min = scale_lower_bound(n_classes, 0.9).ok()?;
        (self.s < min).then(|| {
            format!(
                "scale s = {} is below the lower bound {min:.4} for {n_classes} classes at p = 0.9",
                self.s
            )
        })
    }
}

/// Final-layer weights split by modality: `w_a`, `w_v` are `d × n`, `b` is `[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T = Tensor> {
    pub w_a: T,
    pub w_v: T,
    pub b: Option<T>,
}

impl ClassifierHead<Tensor> {
    pub fn n_classes(&self) -> usize {
        self.w_a.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> ClassifierHead<Var> {
        ClassifierHead {
            w_a: tape.leaf(self.w_a.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            b: self.b.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }

    pub fn vanilla_logits(&self, blocks: &FeatureBlocks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (f, h) = (blocks.bind(&mut tape), self.bind(&mut tape));
        let out = vanilla_logits(&mut tape, &f, &h)?;
        Ok(tape.take(out))
    }

    pub fn mmcosine_logits(&self, blocks: &FeatureBlocks, s: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (f, h) = (blocks.bind(&mut tape), self.bind(&mut tape));
        let out = mmcosine_logits(&mut tape, &f, &h, s)?;
        Ok(tape.take(out))
    }

    pub fn logits(&self, blocks: &FeatureBlocks, loss: &LossConfig) -> Result<Tensor> {
        match loss.variant {
            LossVariant::Vanilla => self.vanilla_logits(blocks),
            LossVariant::MmCosine => self.mmcosine_logits(blocks, loss.s),
        }
    }

    /// Per-class `‖W_j^a‖`.
    pub fn weight_norms_a(&self) -> Vec<f64> {
        column_norms(&self.w_a)
    }

    /// Per-class `‖W_j^v‖`.
    pub fn weight_norms_v(&self) -> Vec<f64> {
        column_norms(&self.w_v)
    }
}

pub fn column_norms(w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|j| kernels::norm(&w.column(j))).collect()
}

/// `φa·W_a + φv·W_v (+ b)`.
pub fn vanilla_logits(
    tape: &mut Tape,
    blocks: &FeatureBlocks<Var>,
    head: &ClassifierHead<Var>,
) -> Result<Var> {
    let audio = tape.matmul(blocks.block_a, head.w_a)?;
    let visual = tape.matmul(blocks.block_v, head.w_v)?;
    let joint = tape.add(audio, visual)?;
    match head.b {
        Some(b) => tape.add(joint, b),
        None => Ok(joint),
    }
}

/// `batch × n` matrix of cosines between feature rows and weight columns,
/// each normalized with the `NORM_EPS` floor (a zero vector scores 0).
pub fn cosine_scores(tape: &mut Tape, features: Var, weights: Var) -> Result<Var> {
    let unit_features = tape.l2_normalize_rows(features, NORM_EPS)?;
    let columns = tape.transpose(weights)?;
    let unit_columns = tape.l2_normalize_rows(columns, NORM_EPS)?;
    let unit_weights = tape.transpose(unit_columns)?;
    tape.matmul(unit_features, unit_weights)
}

/// `s·(cos θa + cos θv)`. The head bias, if any, is ignored.
pub fn mmcosine_logits(
    tape: &mut Tape,
    blocks: &FeatureBlocks<Var>,
    head: &ClassifierHead<Var>,
    s: f64,
) -> Result<Var> {
    let cos_a = cosine_scores(tape, blocks.block_a, head.w_a)?;
    let cos_v = cosine_scores(tape, blocks.block_v, head.w_v)?;
    let total = tape.add(cos_a, cos_v)?;
    tape.scale(total, s)
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Smallest scale that lets a cosine head reach ground-truth posterior `p`
/// over `n_classes` classes: `(C−1)/(2(C+1)) · ln((C−1)p/(1−p))`.
pub fn scale_lower_bound(n_classes: usize, p: f64) -> Result<f64> {
    if n_classes < 2 {
        return Err(Error::invalid(
            "classes",
            format!("need at least 2 classes, got {n_classes}"),
        ));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("posterior", format!("must lie in (0, 1), got {p}")));
    }
    let c = n_classes as f64;
    Ok((c - 1.0) / (2.0 * (c + 1.0)) * ((c - 1.0) * p / (1.0 - p)).ln())
}

/// Bound at `p = 0.9`, rounded up to one decimal and floored at 0.1.
pub fn default_scale(n_classes: usize) -> f64 {
    let bound = scale_lower_bound(n_classes.max(2), 0.9).unwrap_or(0.0);
    ((bound * 10.0).ceil() / 10.0).max(0.1)
}

/// Cross-entropy of `s·cos θ^m` per modality against dedicated heads
/// (`aux.w_a`, `aux.w_v`), both with the same scale.
pub fn aux_unimodal_cosine_losses(
    tape: &mut Tape,
    blocks: &FeatureBlocks<Var>,
    aux: &ClassifierHead<Var>,
    s: f64,
    labels: &[usize],
) -> Result<(Var, Var)> {
    let mut one = |features: Var, weights: Var| -> Result<Var> {
        let cos = cosine_scores(tape, features, weights)?;
        let logits = tape.scale(cos, s)?;
        tape.softmax_cross_entropy(logits, labels)
    };
    let loss_a = one(blocks.block_a, aux.w_a)?;
    let loss_v = one(blocks.block_v, aux.w_v)?;
    Ok((loss_a, loss_v))
}

#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub main: Var,
    pub logits: Var,
    pub aux: Option<(Var, Var)>,
}

/// Main loss on the fused blocks plus `λ·(loss_a + loss_v)` from auxiliary
/// heads on the encoder outputs. With `λ = 0` the auxiliary graph is not built.
pub fn objective(
    tape: &mut Tape,
    forward: &Forward,
    head: &ClassifierHead<Var>,
    aux: Option<&ClassifierHead<Var>>,
    loss: &LossConfig,
    labels: &[usize],
) -> Result<Objective> {
    let logits = match loss.variant {
        LossVariant::Vanilla => vanilla_logits(tape, &forward.fused, head)?,
        LossVariant::MmCosine => mmcosine_logits(tape, &forward.fused, head, loss.s)?,
    };
    let main = cross_entropy_loss(tape, logits, labels)?;
    match aux {
        Some(aux) if loss.aux_weight > 0.0 => {
            let (la, lv) = aux_unimodal_cosine_losses(tape, &forward.encoded, aux, loss.s, labels)?;
            let both = tape.add(la, lv)?;
            let weighted = tape.scale(both, loss.aux_weight)?;
            let total = tape.add(main, weighted)?;
            Ok(Objective {
                total,
                main,
                logits,
                aux: Some((la, lv)),
            })
        }
        _ => Ok(Objective {
            total: main,
            main,
            logits,
            aux: None,
        }),
    }
}
