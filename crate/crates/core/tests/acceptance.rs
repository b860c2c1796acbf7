//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use mmcosine::autodiff::{compare_gradients, finite_diff_gradient, OpKind, Tape, Tensor, Var};
use mmcosine::config::ExperimentConfig;
use mmcosine::datagen::generate_classification;
use mmcosine::diagnostics::{approx_unimodal_predictions, median};
use mmcosine::losses::{objective, scale_lower_bound, ClassifierHead, LossConfig, LossVariant};
use mmcosine::metrics::{eer, min_dcf, DcfParams, ScoredTrial};
use mmcosine::model::{Batch, FeatureBlocks, FusionKind, Model, ModelConfig, ParamStore};
use mmcosine::trainer::{model_config_for, train, RunResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

/// Largest plain relative error over coordinates with magnitude above 1e-6.
fn raw_relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > 1e-6)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries bounded away from zero so ReLU kinks stay out of the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// `Σ R ⊙ op(inputs)` with a fixed random `R`, as a function of input `k`.
fn projected(op: &OpKind, inputs: &[Tensor], weights: &Tensor, k: usize, point: &Tensor) -> mmcosine::Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.constant(if i == k { point.clone() } else { t.clone() }))
        .collect();
    let out = tape.apply(op.clone(), &vars)?;
    let value = tape.value(out);
    Ok(value.values().iter().zip(weights.values()).map(|(a, b)| a * b).sum())
}

fn check_op(op: OpKind, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = tape.apply(op.clone(), &vars).map_err(|e| e.to_string())?;
    let shape = tape.value(out).shape().to_vec();
    let weights = random_tensor(rng, &shape, -1.0, 1.0);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).map_err(|e| e.to_string())?;
    let loss = tape.sum(prod).map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).ok_or("missing gradient")?.to_vec();
        let numeric = finite_diff_gradient(|p| projected(&op, &inputs, &weights, k, p), input, H).map_err(|e| e.to_string())?;
        let r = compare_gradients(&analytic, numeric.values(), ABS_FLOOR);
        worst = worst.max(raw_relative(&analytic, numeric.values()));
        if !r.passes(REL_TOL) {
            return Err(format!("{} input {k}: rel error {:.3e} at {}", op.name(), r.max_rel_error, r.worst_index));
        }
    }
    Ok(worst)
}

fn pipeline_loss(model: &Model, batch: &Batch, loss: &LossConfig) -> mmcosine::Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let fwd = model.forward(&mut tape, &bound, batch)?;
    let head = bound.head()?;
    let aux = if model.config.aux_heads { Some(bound.aux_heads()?) } else { None };
    let obj = objective(&mut tape, &fwd, &head, aux.as_ref(), loss, &batch.labels)?;
    Ok(tape.value(obj.total).item())
}

fn check_pipeline(fusion: FusionKind, loss: LossConfig, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let config = ModelConfig {
        dim_a: 4,
        dim_v: 3,
        hidden_dims: vec![5],
        feature_dim: 4,
        n_classes: 3,
        fusion,
        head_bias: loss.variant == LossVariant::Vanilla,
        aux_heads: loss.aux_weight > 0.0,
    };
    let model = Model::new(config, rng.random()).map_err(|e| e.to_string())?;
    let batch = Batch {
        x_a: random_tensor(rng, &[5, 4], -1.0, 1.0),
        x_v: random_tensor(rng, &[5, 3], -1.0, 1.0),
        labels: vec![0, 1, 2, 1, 0],
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let fwd = model.forward(&mut tape, &bound, &batch).map_err(|e| e.to_string())?;
    let head = bound.head().map_err(|e| e.to_string())?;
    let aux = if model.config.aux_heads { Some(bound.aux_heads().map_err(|e| e.to_string())?) } else { None };
    let obj = objective(&mut tape, &fwd, &head, aux.as_ref(), &loss, &batch.labels).map_err(|e| e.to_string())?;
    tape.backward(obj.total).map_err(|e| e.to_string())?;

    let mut worst: f64 = 0.0;
    for (idx, (name, tensor)) in model.params.iter().enumerate() {
        let analytic = tape.grad(bound.vars()[idx]).ok_or("missing gradient")?.to_vec();
        let numeric = finite_diff_gradient(
            |p| {
                let mut store = ParamStore::default();
                for (n, t) in model.params.iter() {
                    store.push(n, if n == name { p.clone() } else { t.clone() });
                }
                let m = Model::from_params(model.config.clone(), store)?;
                pipeline_loss(&m, &batch, &loss)
            },
            tensor,
            H,
        )
        .map_err(|e| e.to_string())?;
        let r = compare_gradients(&analytic, numeric.values(), ABS_FLOOR);
        worst = worst.max(raw_relative(&analytic, numeric.values()));
        if !r.passes(REL_TOL) {
            return Err(format!("{fusion}/{} `{name}`: rel error {:.3e}", loss.variant, r.max_rel_error));
        }
    }
    Ok(worst)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..5 {
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let cases: Vec<(OpKind, Vec<Tensor>)> = vec![
            (OpKind::MatMul, vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[4, 2], -1.0, 1.0)]),
            (OpKind::Add, vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[3, 4], -1.0, 1.0)]),
            (OpKind::Add, vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[4], -1.0, 1.0)]),
            (OpKind::ElementwiseMul, vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0), random_tensor(&mut rng, &[3, 4], -1.0, 1.0)]),
            (OpKind::Relu, vec![away_from_zero(&mut rng, &[3, 4])]),
            (OpKind::Sigmoid, vec![random_tensor(&mut rng, &[3, 4], -3.0, 3.0)]),
            (OpKind::ConcatLastAxis, vec![random_tensor(&mut rng, &[3, 2], -1.0, 1.0), random_tensor(&mut rng, &[3, 3], -1.0, 1.0)]),
            (OpKind::L2NormalizeRows { eps: 1e-12 }, vec![away_from_zero(&mut rng, &[3, 4])]),
            (OpKind::ScaleByConstant(-2.5), vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)]),
            (OpKind::SoftmaxCrossEntropy { labels: labels.clone() }, vec![random_tensor(&mut rng, &[4, 3], -3.0, 3.0)]),
            (OpKind::Transpose, vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)]),
            (OpKind::Sum, vec![random_tensor(&mut rng, &[3, 4], -1.0, 1.0)]),
        ];
        for (op, inputs) in cases {
            worst = worst.max(check_op(op, inputs, &mut rng)?);
            checked += 1;
        }
    }
    for fusion in FusionKind::ALL {
        for loss in [
            LossConfig::vanilla(),
            LossConfig::mmcosine(2.0),
            LossConfig {
                aux_weight: 0.5,
                ..LossConfig::mmcosine(2.0)
            },
        ] {
            worst = worst.max(check_pipeline(fusion, loss, &mut rng)?);
            checked += 1;
        }
    }
    Ok(format!("{checked} gradient checks, worst relative error {worst:.2e} over coordinates above 1e-6"))
}

fn criterion_2() -> Outcome {
    let b = scale_lower_bound(6, 0.9).map_err(|e| e.to_string())?;
    if (b - 1.3595).abs() > 1e-3 {
        return Err(format!("bound(6, 0.9) = {b}"));
    }
    let z = scale_lower_bound(2, 0.5).map_err(|e| e.to_string())?;
    if z != 0.0 {
        return Err(format!("bound(2, 0.5) = {z}"));
    }
    for c in [3, 6, 60] {
        let values: Vec<f64> = (50..=99)
            .map(|k| scale_lower_bound(c, k as f64 / 100.0).unwrap())
            .collect();
        if let Some(w) = values.windows(2).position(|w| w[1] <= w[0]) {
            return Err(format!("not increasing for C = {c} at p = 0.{}", 50 + w));
        }
    }
    Ok(format!("bound(6, 0.9) = {b:.10}, bound(2, 0.5) = 0, increasing in p"))
}

fn random_head(rng: &mut ChaCha8Rng, d: usize, n: usize) -> ClassifierHead {
    ClassifierHead {
        w_a: random_tensor(rng, &[d, n], -1.0, 1.0),
        w_v: random_tensor(rng, &[d, n], -1.0, 1.0),
        b: Some(random_tensor(rng, &[n], -1.0, 1.0)),
    }
}

fn random_blocks(rng: &mut ChaCha8Rng, batch: usize, d: usize) -> FeatureBlocks {
    FeatureBlocks::new(random_tensor(rng, &[batch, d], -2.0, 2.0), random_tensor(rng, &[batch, d], -2.0, 2.0))
}

fn scaled(t: &Tensor, k: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.values().iter().map(|x| x * k).collect()).unwrap()
}

fn unit_cos(x: &[f64], w: &[f64]) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().zip(w).map(|(a, b)| (a / nx) * (b / nw)).sum()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = 2.4;
    let loss = LossConfig::mmcosine(s);
    let mut worst_invariance: f64 = 0.0;
    let mut vanilla_changed = 0;
    for _ in 0..200 {
        let head = random_head(&mut rng, 5, 6);
        let blocks = random_blocks(&mut rng, 4, 5);
        let k: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..100.0)).collect();
        let head2 = ClassifierHead {
            w_a: scaled(&head.w_a, k[0]),
            w_v: scaled(&head.w_v, k[1]),
            b: head.b.clone(),
        };
        let blocks2 = FeatureBlocks::new(scaled(&blocks.block_a, k[2]), scaled(&blocks.block_v, k[3]));
        let l1 = head.logits(&blocks, &loss).unwrap();
        let l2 = head2.logits(&blocks2, &loss).unwrap();
        for (a, b) in l1.values().iter().zip(l2.values()) {
            worst_invariance = worst_invariance.max((a - b).abs());
            if a.abs() > 2.0 * s + 1e-9 {
                return Err(format!("logit {a} outside [-2s, 2s]"));
            }
        }
        let v1 = head.vanilla_logits(&blocks).unwrap();
        let v2 = head2.vanilla_logits(&blocks2).unwrap();
        if v1.values().iter().zip(v2.values()).any(|(a, b)| (a - b).abs() > 1e-6) {
            vanilla_changed += 1;
        }
    }
    if worst_invariance > 1e-10 {
        return Err(format!("rescaling moved cosine logits by {worst_invariance:.2e}"));
    }
    if vanilla_changed != 200 {
        return Err(format!("vanilla logits changed in only {vanilla_changed}/200 rescalings"));
    }

    let mut worst_trig: f64 = 0.0;
    for _ in 0..10_000 {
        let pick = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..6).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (xa, wa, xv, wv) = (pick(&mut rng), pick(&mut rng), pick(&mut rng), pick(&mut rng));
        let ta = unit_cos(&xa, &wa).clamp(-1.0, 1.0).acos();
        let tv = unit_cos(&xv, &wv).clamp(-1.0, 1.0).acos();
        if !(0.0..=PI).contains(&ta) || !(0.0..=PI).contains(&tv) {
            return Err("angle outside [0, pi]".into());
        }
        let lhs = ta.cos() + tv.cos();
        let rhs = 2.0 * ((ta + tv) / 2.0).cos() * ((ta - tv) / 2.0).cos();
        worst_trig = worst_trig.max((lhs - rhs).abs());
    }
    if worst_trig > 1e-12 {
        return Err(format!("trig identity off by {worst_trig:.2e}"));
    }
    Ok(format!(
        "invariance {worst_invariance:.1e}, vanilla control changed 200/200, trig identity {worst_trig:.1e}"
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (batch, d, n) = (5, 4, 7);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let head = random_head(&mut rng, d, n);
        let blocks = random_blocks(&mut rng, batch, d);
        let logits = head.vanilla_logits(&blocks).unwrap();
        let bias = head.b.as_ref().unwrap();
        let (pa, pv) = approx_unimodal_predictions(&blocks, &head, LossVariant::Vanilla).unwrap();
        for i in 0..batch {
            let mut best = [(0usize, f64::NEG_INFINITY); 2];
            for j in 0..n {
                let mut a_block = 0.0;
                let mut v_block = 0.0;
                for k in 0..d {
                    a_block += blocks.block_a.get(i, k) * head.w_a.get(k, j);
                    v_block += blocks.block_v.get(i, k) * head.w_v.get(k, j);
                }
                let expected = a_block + v_block + bias.values()[j];
                worst = worst.max((logits.get(i, j) - expected).abs());
                for (m, score) in [a_block, v_block].into_iter().enumerate() {
                    let s = score + bias.values()[j] / 2.0;
                    if s > best[m].1 {
                        best[m] = (j, s);
                    }
                }
            }
            if pa[i] != best[0].0 || pv[i] != best[1].0 {
                return Err(format!("approx prediction mismatch at row {i}"));
            }
        }
    }
    if worst > 1e-12 {
        return Err(format!("decomposition off by {worst:.2e}"));
    }
    Ok(format!("500 instances, decomposition error {worst:.1e}, approx predictions exact"))
}

/// Exhaustive enumeration: each candidate threshold re-counts every trial.
fn oracle_metrics(trials: &[ScoredTrial], params: &DcfParams) -> (f64, f64) {
    let mut thresholds = vec![f64::NEG_INFINITY, f64::INFINITY];
    thresholds.extend(trials.iter().map(|t| t.score));
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let nt = trials.iter().filter(|t| t.is_target).count() as f64;
    let nn = trials.len() as f64 - nt;
    let mut frr = Vec::new();
    let mut far = Vec::new();
    for &th in &thresholds {
        frr.push(trials.iter().filter(|t| t.is_target && t.score < th).count() as f64 / nt);
        far.push(trials.iter().filter(|t| !t.is_target && t.score >= th).count() as f64 / nn);
    }
    let mut eer_value = f64::NAN;
    for k in 0..frr.len() {
        let d = frr[k] - far[k];
        if d >= 0.0 {
            eer_value = if k == 0 {
                frr[0]
            } else {
                let dp = frr[k - 1] - far[k - 1];
                let alpha = dp / (dp - d);
                frr[k - 1] + alpha * (frr[k] - frr[k - 1])
            };
            break;
        }
    }
    let norm = (params.c_miss * params.p_target).min(params.c_fa * (1.0 - params.p_target));
    let best = frr
        .iter()
        .zip(&far)
        .map(|(m, f)| params.c_miss * m * params.p_target + params.c_fa * f * (1.0 - params.p_target))
        .fold(f64::INFINITY, f64::min);
    (eer_value, best / norm)
}

fn criterion_5() -> Outcome {
    let hand = |t: &[f64], n: &[f64]| -> Vec<ScoredTrial> {
        t.iter()
            .map(|&s| ScoredTrial::new(s, true))
            .chain(n.iter().map(|&s| ScoredTrial::new(s, false)))
            .collect()
    };
    let half = DcfParams {
        p_target: 0.5,
        ..DcfParams::default()
    };
    let checks = [
        (eer(&hand(&[0.9, 0.8], &[0.1, 0.2])), 0.0),
        (eer(&hand(&[0.8, 0.4], &[0.6, 0.2])), 0.5),
        (eer(&hand(&[0.1], &[0.9])), 1.0),
        (min_dcf(&hand(&[0.9, 0.8], &[0.1, 0.2]), &DcfParams::default()), 0.0),
        (min_dcf(&hand(&[0.3, 0.3], &[0.3, 0.3]), &DcfParams::default()), 1.0),
        (min_dcf(&hand(&[0.8, 0.4], &[0.6, 0.2]), &half), 0.5),
    ];
    for (i, (got, want)) in checks.into_iter().enumerate() {
        let got = got.map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("hand case {i}: got {got}, want {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let param_sets = [DcfParams::default(), half, DcfParams { c_miss: 10.0, c_fa: 1.0, p_target: 0.05 }];
    for set in 0..100 {
        let size = rng.random_range(2..=200);
        let grid = rng.random_bool(0.5);
        let mut trials: Vec<ScoredTrial> = (0..size)
            .map(|_| {
                let score = if grid { rng.random_range(0..12) as f64 / 4.0 } else { rng.random_range(-3.0..3.0) };
                ScoredTrial::new(score, rng.random_bool(0.4))
            })
            .collect();
        trials[0].is_target = true;
        trials[1].is_target = false;
        for p in &param_sets {
            let (oe, od) = oracle_metrics(&trials, p);
            let e = eer(&trials).map_err(|e| e.to_string())?;
            let d = min_dcf(&trials, p).map_err(|e| e.to_string())?;
            if e != oe || d != od {
                return Err(format!("set {set}: eer {e} vs {oe}, minDCF {d} vs {od}"));
            }
        }
    }
    Ok("6 hand cases exact; 100 random trial sets match the exhaustive oracle".into())
}

struct Experiment {
    vanilla: Vec<RunResult>,
    mmcosine: Vec<RunResult>,
    seconds: f64,
}

fn run_experiment() -> Result<Experiment, String> {
    let start = Instant::now();
    let base = ExperimentConfig::default();
    let mut vanilla = Vec::new();
    let mut mmcosine = Vec::new();
    for seed in 0..5u64 {
        let mut cfg = base.clone();
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        let ds = generate_classification(&cfg.data).map_err(|e| e.to_string())?;
        for variant in [LossVariant::Vanilla, LossVariant::MmCosine] {
            cfg.train.loss.variant = variant;
            let tc = cfg.resolved_train();
            let r = train(&ds, &model_config_for(&ds, &cfg.arch, &tc), &tc).map_err(|e| e.to_string())?;
            match variant {
                LossVariant::Vanilla => vanilla.push(r),
                LossVariant::MmCosine => mmcosine.push(r),
            }
        }
    }
    Ok(Experiment {
        vanilla,
        mmcosine,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn med(runs: &[RunResult], f: impl Fn(&RunResult) -> f64) -> f64 {
    median(&runs.iter().map(f).collect::<Vec<_>>())
}

fn probe_a(r: &RunResult) -> f64 {
    r.probe.map_or(f64::NAN, |p| p.acc_a)
}

fn probe_v(r: &RunResult) -> f64 {
    r.probe.map_or(f64::NAN, |p| p.acc_v)
}

fn gap(r: &RunResult) -> f64 {
    r.probe.map_or(f64::NAN, |p| p.gap())
}

fn criterion_6(x: &Experiment) -> Outcome {
    let ratio = med(&x.vanilla, |r| r.final_norm_ratio().unwrap_or(f64::NAN));
    let g = med(&x.vanilla, gap);
    let detail = format!(
        "vanilla median norm ratio {ratio:.3}, probe gap {:.2} points (A {:.2} / V {:.2}), 10 runs in {:.1}s",
        100.0 * g,
        100.0 * med(&x.vanilla, probe_a),
        100.0 * med(&x.vanilla, probe_v),
        x.seconds
    );
    if ratio > 1.2 && g > 0.10 && x.seconds < 300.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7(x: &Experiment) -> Outcome {
    let (gv, gm) = (med(&x.vanilla, gap), med(&x.mmcosine, gap));
    let (wv, wm) = (med(&x.vanilla, probe_v), med(&x.mmcosine, probe_v));
    let (jv, jm) = (med(&x.vanilla, |r| r.test.joint_acc), med(&x.mmcosine, |r| r.test.joint_acc));
    let detail = format!(
        "probe gap {:.2} -> {:.2}, visual probe {:.2} -> {:.2}, joint {:.2} -> {:.2}",
        100.0 * gv,
        100.0 * gm,
        100.0 * wv,
        100.0 * wm,
        100.0 * jv,
        100.0 * jm
    );
    if gm < gv && wm > wv && jm >= jv - 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8(x: &Experiment) -> Outcome {
    let va = med(&x.vanilla, |r| r.test_angles.median_audio());
    let vv = med(&x.vanilla, |r| r.test_angles.median_visual());
    let ma = med(&x.mmcosine, |r| r.test_angles.median_audio());
    let mv = med(&x.mmcosine, |r| r.test_angles.median_visual());
    let detail = format!("median angle audio {va:.3} -> {ma:.3} rad, visual {vv:.3} -> {mv:.3} rad");
    if ma < va && mv < vv {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let mut sink = Vec::new();
    let argv = std::iter::once("mmcosine").chain(args.iter().copied());
    match mmcosine::cli::run_from(argv, &mut sink) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let small = [
        "--set", "n_classes=5", "--set", "n_train=120", "--set", "n_test=60", "--set", "epochs=3", "--set", "batch_size=16",
    ];
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path();
        let p = |name: &str| root.join(name).display().to_string();
        let data = p("data.mmcdat");
        let mut gen = vec!["gen-data", "--seed", "7", "--out", &data];
        gen.extend(small);
        run_cli(&gen)?;
        for (fusion, run) in [("concat", p("run_concat")), ("film", p("run_film")), ("gated", p("run_gated"))] {
            run_cli(&["train", "--data", &data, "--fusion", fusion, "--set", "epochs=3", "--set", "batch_size=16", "--set", "diagnostics_every=2", "--out-dir", &run])?;
        }
        let run = p("run_concat");
        run_cli(&["evaluate", "--run", &run, "--data", &data, "--task", "verification", "--pairs", "300", "--scores-out", &p("scores.csv")])?;
        run_cli(&["diagnose", "--run", &run, "--data", &data, "--out-dir", &p("diag")])?;
        let mut cmp = vec!["compare", "--arms", "vanilla,mmcosine", "--seeds", "2", "--threads", "2", "--out-dir"];
        let cmp_dir = p("compare");
        cmp.push(&cmp_dir);
        cmp.extend(small);
        run_cli(&cmp)?;
        snaps.push(snapshot(root));
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    if a.len() != b.len() {
        return Err(format!("file sets differ: {} vs {}", a.len(), b.len()));
    }
    for ((na, ba), (nb, bb)) in a.iter().zip(b) {
        if na != nb || ba != bb {
            return Err(format!("{na} differs between reruns"));
        }
    }
    let ckpts = a.iter().filter(|(n, _)| n.ends_with(".ckpt")).count();
    Ok(format!("{} files byte-identical across reruns ({ckpts} checkpoints)", a.len()))
}

fn report(id: usize, title: &str, outcome: &Outcome, failures: &mut Vec<usize>) {
    match outcome {
        Ok(detail) => println!("PASS criterion {id} ({title}): {detail}"),
        Err(detail) => {
            println!("FAIL criterion {id} ({title}): {detail}");
            failures.push(id);
        }
    }
}

fn main() {
    let mut failures = Vec::new();
    report(1, "gradient fidelity", &criterion_1(), &mut failures);
    report(2, "scale bound", &criterion_2(), &mut failures);
    report(3, "cosine geometry", &criterion_3(), &mut failures);
    report(4, "logit decomposition", &criterion_4(), &mut failures);
    report(5, "metric oracles", &criterion_5(), &mut failures);
    match run_experiment() {
        Ok(x) => {
            report(6, "imbalance reproduction", &criterion_6(&x), &mut failures);
            report(7, "probe gap remedy", &criterion_7(&x), &mut failures);
            report(8, "angle compaction", &criterion_8(&x), &mut failures);
        }
        Err(e) => {
            for (id, title) in [(6, "imbalance reproduction"), (7, "probe gap remedy"), (8, "angle compaction")] {
                report(id, title, &Err(e.clone()), &mut failures);
            }
        }
    }
    report(9, "determinism", &criterion_9(), &mut failures);
    if failures.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
