use mmcosine::config::ExperimentConfig;
use mmcosine::datagen::{generate_classification, Dataset};
use mmcosine::diagnostics::median;
use mmcosine::losses::{LossConfig, LossVariant};
use mmcosine::model::FusionKind;
use mmcosine::trainer::{evaluate_classification, model_config_for, train, RunResult};

fn vanilla_runs(fusion: FusionKind) -> Vec<(Dataset, RunResult)> {
    (0..5u64)
        .map(|seed| {
            let mut cfg = ExperimentConfig::default();
            cfg.data.seed = seed;
            cfg.train.seed = seed;
            cfg.train.probe = false;
            cfg.train.fusion = fusion;
            cfg.train.loss = LossConfig::vanilla();
            let ds = generate_classification(&cfg.data).unwrap();
            let tc = cfg.resolved_train();
            let r = train(&ds, &model_config_for(&ds, &cfg.arch, &tc), &tc).unwrap();
            (ds, r)
        })
        .collect()
}

#[test]
fn vanilla_audio_weights_outgrow_visual() {
    let runs = vanilla_runs(FusionKind::MidConcat);
    let first: Vec<f64> = runs.iter().map(|(_, r)| r.log.records()[0].norm_ratio()).collect();
    let last: Vec<f64> = runs.iter().map(|(_, r)| r.log.records().last().unwrap().norm_ratio()).collect();
    assert!(median(&last) > median(&first), "{first:?} -> {last:?}");

    let max_ratio: Vec<f64> = runs
        .iter()
        .map(|(_, r)| {
            let h = r.model.head().unwrap();
            let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
            max(h.weight_norms_a()) / max(h.weight_norms_v())
        })
        .collect();
    assert!(median(&max_ratio) > 1.0, "{max_ratio:?}");

    for (_, r) in &runs {
        assert!(r.log.records().iter().all(|rec| rec.loss.is_finite()));
        assert_eq!(r.log.records().len(), r.train_config.epochs);
    }
}

#[test]
fn train_split_scores_at_least_test_split() {
    let runs = vanilla_runs(FusionKind::MidConcat);
    let gaps: Vec<f64> = runs
        .iter()
        .map(|(ds, r)| {
            let train = evaluate_classification(&r.model, &LossConfig::vanilla(), &ds.train).unwrap();
            train.joint_acc - r.test.joint_acc
        })
        .collect();
    assert!(median(&gaps) >= 0.0, "{gaps:?}");
}

#[test]
fn fused_variants_train_with_both_losses() {
    for fusion in [FusionKind::FilmSymmetric, FusionKind::GatedSymmetric] {
        for variant in [LossVariant::Vanilla, LossVariant::MmCosine] {
            let mut cfg = ExperimentConfig::default();
            cfg.data.n_classes = 5;
            cfg.data.n_train = 200;
            cfg.data.n_test = 100;
            cfg.train.epochs = 10;
            cfg.train.batch_size = 20;
            cfg.train.probe = false;
            cfg.train.fusion = fusion;
            cfg.train.loss.variant = variant;
            let ds = generate_classification(&cfg.data).unwrap();
            let tc = cfg.resolved_train();
            let r = train(&ds, &model_config_for(&ds, &cfg.arch, &tc), &tc).unwrap();
            assert!(r.test.joint_acc > 0.5, "{fusion}/{variant}: {}", r.test.joint_acc);
            assert!(r.warnings.is_empty());
        }
    }
}
