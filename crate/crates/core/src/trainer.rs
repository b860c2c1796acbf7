//! Deterministic mini-batch SGD with momentum, plus evaluation helpers.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape};
use crate::datagen::{BimodalSample, Dataset, TrialPair};
use crate::diagnostics::{
    angle_distribution, approx_unimodal_predictions, linear_probe, record_step, AngleRecord, DiagnosticsLog,
    ProbeConfig, ProbeData,
};
use crate::error::{Error, Result};
use crate::losses::{default_scale, objective, LossConfig, LossVariant};
use crate::metrics::{eer, min_dcf, top1_accuracy, verification_embeddings, verification_score, DcfParams, ScoredTrial};
use crate::model::{Batch, FusionKind, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    pub fusion: FusionKind,
    pub seed: u64,
    /// Record diagnostics every this many steps; 0 records once per epoch.
    pub diagnostics_every: usize,
    /// Fit linear probes on the frozen encoders after training.
    pub probe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            loss: LossConfig::mmcosine(default_scale(20)),
            fusion: FusionKind::MidConcat,
            seed: 0,
            diagnostics_every: 0,
            probe: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            problems.push(format!(
                "batch_size must be in 1..={n_train}, got {}",
                self.batch_size
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let Err(e) = self.loss.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Encoder architecture; the rest of the model config follows from the
/// dataset and the training config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden_dims: vec![32],
            feature_dim: 16,
        }
    }
}

/// Model config matching `dataset`. The head bias exists only for the
/// vanilla loss and auxiliary heads only when `λ > 0`.
pub fn model_config_for(dataset: &Dataset, arch: &Architecture, train: &TrainConfig) -> ModelConfig {
    ModelConfig {
        dim_a: dataset.dim_a,
        dim_v: dataset.dim_v,
        hidden_dims: arch.hidden_dims.clone(),
        feature_dim: arch.feature_dim,
        n_classes: dataset.n_classes,
        fusion: train.fusion,
        head_bias: train.loss.variant == LossVariant::Vanilla,
        aux_heads: train.loss.aux_weight > 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub joint_acc: f64,
    pub approx_acc_a: f64,
    pub approx_acc_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub eer: f64,
    pub min_dcf: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub acc_a: f64,
    pub acc_v: f64,
}

impl ProbeResult {
    pub fn gap(&self) -> f64 {
        (self.acc_a - self.acc_v).abs()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub train_config: TrainConfig,
    pub test: ClassificationMetrics,
    pub probe: Option<ProbeResult>,
    pub test_angles: AngleRecord,
    pub log: DiagnosticsLog,
    pub steps: usize,
    pub final_loss: f64,
    pub warnings: Vec<String>,
}

impl RunResult {
    /// `mean‖W^a‖ / mean‖W^v‖` at every recorded step.
    pub fn norm_ratio_trajectory(&self) -> Vec<(usize, f64)> {
        self.log.records().iter().map(|r| (r.step, r.norm_ratio())).collect()
    }

    pub fn final_norm_ratio(&self) -> Result<f64> {
        let head = self.model.head()?;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        Ok(mean(head.weight_norms_a()) / mean(head.weight_norms_v()))
    }
}

fn batch_of(samples: &[BimodalSample]) -> Result<Batch> {
    Batch::from_samples(samples.iter())
}

/// Trains a fresh model initialized from `train.seed`.
pub fn train(dataset: &Dataset, model_config: &ModelConfig, train: &TrainConfig) -> Result<RunResult> {
    let model = Model::new(model_config.clone(), train.seed)?;
    train_model(dataset, model, train)
}

/// Continues training `model` in place of a fresh initialization.
pub fn train_model(dataset: &Dataset, mut model: Model, train: &TrainConfig) -> Result<RunResult> {
    train.validate(dataset.train.len())?;
    if model.config.n_classes != dataset.n_classes
        || model.config.dim_a != dataset.dim_a
        || model.config.dim_v != dataset.dim_v
    {
        return Err(Error::invalid("model", "model config does not match the dataset dimensions"));
    }
    if let Some(&bad) = dataset.train.iter().chain(&dataset.test).map(|s| &s.label).find(|&&l| l >= dataset.n_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: dataset.n_classes,
        });
    }
    if train.loss.variant == LossVariant::MmCosine && model.config.head_bias {
        info!("head bias is present but unused by the cosine loss");
    }
    let mut warnings = Vec::new();
    if let Some(msg) = train.loss.scale_warning(dataset.n_classes) {
        warn!("{msg}");
        warnings.push(msg);
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train.seed);
    shuffle_rng.set_stream(2);
    let train_batch = batch_of(&dataset.train)?;
    let use_aux = model.config.aux_heads && train.loss.aux_weight > 0.0;

    let mut velocity: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut log = DiagnosticsLog::new(true);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut step = 0;
    let mut last_finite = f64::NAN;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0;
        for chunk in order.chunks(train.batch_size) {
            let batch = Batch::gather(&dataset.train, chunk)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let fwd = model.forward(&mut tape, &bound, &batch)?;
            let head = bound.head()?;
            let aux = if use_aux { Some(bound.aux_heads()?) } else { None };
            let obj = objective(&mut tape, &fwd, &head, aux.as_ref(), &train.loss, &batch.labels)?;
            let loss_value = tape.value(obj.total).item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = loss_value;
            tape.backward(obj.total)?;

            for (((_, param), var), vel) in model.params.iter_mut().zip(bound.vars()).zip(velocity.iter_mut()) {
                let grad = tape.grad(*var).ok_or(Error::NoGradient)?;
                for ((p, v), g) in param.values_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = train.momentum * *v + g;
                    *p -= train.learning_rate * *v;
                }
            }
            step += 1;
            epoch_loss += loss_value;
            epoch_batches += 1;
            if train.diagnostics_every > 0 && step % train.diagnostics_every == 0 {
                let feats = model.features(&train_batch)?;
                log.push(record_step(step, epoch, loss_value, &model.head()?, &feats.fused, &train_batch.labels, &train.loss)?);
            }
        }
        if train.diagnostics_every == 0 {
            let feats = model.features(&train_batch)?;
            let mean_loss = epoch_loss / epoch_batches as f64;
            log.push(record_step(step, epoch, mean_loss, &model.head()?, &feats.fused, &train_batch.labels, &train.loss)?);
        }
    }

    let test = evaluate_classification(&model, &train.loss, &dataset.test)?;
    let test_batch = batch_of(&dataset.test)?;
    let test_feats = model.features(&test_batch)?;
    let test_angles = angle_distribution(&test_feats.fused, &model.head()?, &test_batch.labels)?;
    let probe = if train.probe {
        Some(probe_model(&model, dataset, &ProbeConfig::default())?)
    } else {
        None
    };
    Ok(RunResult {
        model,
        train_config: train.clone(),
        test,
        probe,
        test_angles,
        log,
        steps: step,
        final_loss: last_finite,
        warnings,
    })
}

/// Linear probes on each modality's encoder output; reads the model only.
pub fn probe_model(model: &Model, dataset: &Dataset, config: &ProbeConfig) -> Result<ProbeResult> {
    let train = model.features(&batch_of(&dataset.train)?)?;
    let test_batch = batch_of(&dataset.test)?;
    let test = model.features(&test_batch)?;
    let train_labels: Vec<usize> = dataset.train.iter().map(|s| s.label).collect();
    let data = ProbeData {
        train_a: &train.encoded.block_a,
        train_v: &train.encoded.block_v,
        train_labels: &train_labels,
        test_a: &test.encoded.block_a,
        test_v: &test.encoded.block_v,
        test_labels: &test_batch.labels,
    };
    let (acc_a, acc_v) = linear_probe(&data, dataset.n_classes, config)?;
    Ok(ProbeResult { acc_a, acc_v })
}

pub fn evaluate_classification(model: &Model, loss: &LossConfig, samples: &[BimodalSample]) -> Result<ClassificationMetrics> {
    let batch = batch_of(samples)?;
    let feats = model.features(&batch)?;
    let head = model.head()?;
    let logits = head.logits(&feats.fused, loss)?;
    let joint: Vec<usize> = (0..logits.rows()).map(|i| kernels::argmax(logits.row(i))).collect();
    let (pa, pv) = approx_unimodal_predictions(&feats.fused, &head, loss.variant)?;
    Ok(ClassificationMetrics {
        joint_acc: top1_accuracy(&joint, &batch.labels)?,
        approx_acc_a: top1_accuracy(&pa, &batch.labels)?,
        approx_acc_v: top1_accuracy(&pv, &batch.labels)?,
    })
}

/// Cosine scores between concatenated unit-normalized fused blocks.
pub fn score_trials(model: &Model, samples: &[BimodalSample], trials: &[TrialPair]) -> Result<Vec<ScoredTrial>> {
    let feats = model.features(&batch_of(samples)?)?;
    let emb = verification_embeddings(&feats.fused.block_a, &feats.fused.block_v)?;
    trials
        .iter()
        .map(|t| {
            if t.index_1 >= samples.len() || t.index_2 >= samples.len() {
                return Err(Error::invalid("trials", format!("pair ({}, {}) out of range", t.index_1, t.index_2)));
            }
            Ok(ScoredTrial::new(verification_score(emb.row(t.index_1), emb.row(t.index_2))?, t.is_target))
        })
        .collect()
}

pub fn evaluate_verification(
    model: &Model,
    samples: &[BimodalSample],
    trials: &[TrialPair],
    dcf: &DcfParams,
) -> Result<VerificationMetrics> {
    let scored = score_trials(model, samples, trials)?;
    Ok(VerificationMetrics {
        eer: eer(&scored)?,
        min_dcf: min_dcf(&scored, dcf)?,
        n_trials: scored.len(),
    })
}
