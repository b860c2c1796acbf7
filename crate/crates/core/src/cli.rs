//! Command-line front end.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, KeyValues};
use crate::datagen::{generate_classification, generate_trials, Dataset};
use crate::diagnostics::{angle_distribution, angle_histogram, median, record_step, DiagnosticsLog, ProbeConfig, ANGLE_BINS};
use crate::error::Error;
use crate::losses::{scale_lower_bound, LossVariant};
use crate::metrics::{eer, min_dcf, read_trials_csv, write_trials_csv, DcfParams};
use crate::model::{Batch, FusionKind, Model};
use crate::trainer::{evaluate_classification, model_config_for, probe_model, score_trials, train, RunResult};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.cfg";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const ANGLES_FILE: &str = "angles.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTOGRAM_FILE: &str = "angle_histogram.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Parser)]
#[command(name = "mmcosine", version, about = "Multi-modal cosine-loss training lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bimodal dataset.
    GenData {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Output `.mmcdat` file; the resolved config is written to `<out>.cfg`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write checkpoint, diagnostics and metrics.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a trained run, or score a trial file directly.
    Evaluate {
        /// Run directory written by `train`.
        #[arg(long, required_unless_present = "scores")]
        run: Option<PathBuf>,
        #[arg(long, required_unless_present = "scores")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Task::Classification)]
        task: Task,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Number of verification trials.
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 0.5)]
        target_fraction: f64,
        #[arg(long, default_value_t = 0)]
        trial_seed: u64,
        /// Write scored trials as CSV.
        #[arg(long)]
        scores_out: Option<PathBuf>,
        /// Compute EER/minDCF from an existing `score,is_target` CSV.
        #[arg(long, conflicts_with_all = ["run", "data"])]
        scores: Option<PathBuf>,
        #[command(flatten)]
        dcf: DcfArgs,
    },
    /// Linear-probe the frozen encoders of a trained run.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5000)]
        max_iters: usize,
    },
    /// Dump angle distributions and a diagnostics snapshot for a trained run.
    Diagnose {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Lower bound on the cosine scale for C classes and target posterior p.
    Bound {
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0.9)]
        posterior: f64,
    },
    /// Train several loss arms over several seeds and summarize.
    Compare {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_value = "vanilla,mmcosine")]
        arms: Vec<LossVariant>,
        /// Number of seeds, starting at `--seed-start`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed_start: u64,
        /// Worker threads; defaults to the rayon default.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Classification,
    Verification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct DcfArgs {
    #[arg(long, default_value_t = 1.0)]
    c_miss: f64,
    #[arg(long, default_value_t = 1.0)]
    c_fa: f64,
    #[arg(long, default_value_t = 0.01)]
    p_target: f64,
}

impl DcfArgs {
    fn params(&self) -> DcfParams {
        DcfParams {
            c_miss: self.c_miss,
            c_fa: self.c_fa,
            p_target: self.p_target,
        }
    }
}

/// Config file plus flag overrides; flags win.
#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=30`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss: Option<LossVariant>,
    #[arg(long)]
    fusion: Option<FusionKind>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Cosine scale; defaults to the bound at p = 0.9 rounded up.
    #[arg(long)]
    s: Option<f64>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::load(p).map_err(usage)?,
            None => KeyValues::default(),
        };
        for o in &self.overrides {
            let (k, v) = KeyValues::parse_assignment(o).map_err(usage)?;
            kv.set(k, v);
        }
        if let Some(seed) = self.seed {
            kv.set("seed", seed.to_string());
            kv.set("data_seed", seed.to_string());
        }
        if let Some(l) = self.loss {
            kv.set("loss", l.to_string());
        }
        if let Some(f) = self.fusion {
            kv.set("fusion", f.to_string());
        }
        if let Some(e) = self.epochs {
            kv.set("epochs", e.to_string());
        }
        if let Some(s) = self.s {
            kv.set("s", s.to_string());
        }
        let cfg = ExperimentConfig::from_key_values(&kv).map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config values; exit code 2.
    Usage(String),
    /// Failure after validation; exit code 1.
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(Error::Io(e))
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run_from<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("\nFor more information, try '--help'.");
            }
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::GenData { exp, out: path } => gen_data(&exp, &path, out),
        Command::Train { exp, data, out_dir } => train_cmd(&exp, data.as_deref(), &out_dir, out),
        Command::Evaluate {
            run,
            data,
            task,
            split,
            pairs,
            target_fraction,
            trial_seed,
            scores_out,
            scores,
            dcf,
        } => {
            let dcf = dcf.params();
            dcf.validate().map_err(usage)?;
            if let Some(path) = scores {
                let trials = read_trials_csv(BufReader::new(File::open(path)?))?;
                writeln!(out, "trials: {}", trials.len())?;
                writeln!(out, "EER: {}", pct(eer(&trials)?))?;
                writeln!(out, "minDCF: {:.4}", min_dcf(&trials, &dcf)?)?;
                return Ok(());
            }
            let (run, data) = (run.expect("required by clap"), data.expect("required by clap"));
            let (model, cfg) = load_run(&run)?;
            let ds = Dataset::load(&data)?;
            let samples = match split {
                Split::Train => &ds.train,
                Split::Test => &ds.test,
            };
            match task {
                Task::Classification => {
                    let m = evaluate_classification(&model, &cfg.resolved_train().loss, samples)?;
                    writeln!(out, "joint accuracy: {}", pct(m.joint_acc))?;
                    writeln!(out, "approx audio accuracy: {}", pct(m.approx_acc_a))?;
                    writeln!(out, "approx visual accuracy: {}", pct(m.approx_acc_v))?;
                }
                Task::Verification => {
                    let pairs = generate_trials(samples, pairs, target_fraction, trial_seed).map_err(usage)?;
                    let scored = score_trials(&model, samples, &pairs)?;
                    if let Some(p) = scores_out {
                        let mut w = BufWriter::new(File::create(p)?);
                        write_trials_csv(&mut w, &scored)?;
                        w.flush()?;
                    }
                    writeln!(out, "trials: {}", scored.len())?;
                    writeln!(out, "EER: {}", pct(eer(&scored)?))?;
                    writeln!(out, "minDCF: {:.4}", min_dcf(&scored, &dcf)?)?;
                }
            }
            Ok(())
        }
        Command::Probe { run, data, max_iters } => {
            let (model, _) = load_run(&run)?;
            let ds = Dataset::load(&data)?;
            let p = probe_model(
                &model,
                &ds,
                &ProbeConfig {
                    max_iters,
                    ..ProbeConfig::default()
                },
            )?;
            writeln!(out, "probe audio: {}", pct(p.acc_a))?;
            writeln!(out, "probe visual: {}", pct(p.acc_v))?;
            writeln!(out, "probe gap: {}", pct(p.gap()))?;
            Ok(())
        }
        Command::Diagnose {
            run,
            data,
            split,
            out_dir,
        } => diagnose(&run, &data, split, &out_dir, out),
        Command::Bound { classes, posterior } => {
            let b = scale_lower_bound(classes, posterior).map_err(usage)?;
            writeln!(out, "{b}")?;
            Ok(())
        }
        Command::Compare {
            exp,
            arms,
            seeds,
            seed_start,
            threads,
            out_dir,
        } => compare(&exp, &arms, seed_start..seed_start + seeds, threads, &out_dir, out),
    }
}

fn write_config(path: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::write(path, cfg.to_key_values().to_string())?;
    Ok(())
}

fn gen_data(exp: &ExperimentArgs, path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = exp.resolve()?;
    cfg.data.validate().map_err(usage)?;
    let ds = generate_classification(&cfg.data)?;
    ds.save(path)?;
    write_config(&sidecar(path), &cfg)?;
    writeln!(
        out,
        "wrote {} ({} train, {} test, {} classes)",
        path.display(),
        ds.train.len(),
        ds.test.len(),
        ds.n_classes
    )?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

/// Copies the dataset header into the config so the resolved copy matches the data.
fn adopt_dataset(cfg: &mut ExperimentConfig, ds: &Dataset) {
    cfg.data.n_classes = ds.n_classes;
    cfg.data.dim_a = ds.dim_a;
    cfg.data.dim_v = ds.dim_v;
    cfg.data.n_train = ds.train.len();
    cfg.data.n_test = ds.test.len();
    cfg.data.seed = ds.seed;
}

#[derive(Debug, Serialize)]
struct RunSummary {
    joint_acc: f64,
    approx_acc_a: f64,
    approx_acc_v: f64,
    probe_a: Option<f64>,
    probe_v: Option<f64>,
    probe_gap: Option<f64>,
    final_norm_ratio: f64,
    median_angle_a: f64,
    median_angle_v: f64,
    steps: usize,
    final_loss: f64,
    warnings: Vec<String>,
}

fn summarize(r: &RunResult) -> Result<RunSummary, CliError> {
    Ok(RunSummary {
        joint_acc: r.test.joint_acc,
        approx_acc_a: r.test.approx_acc_a,
        approx_acc_v: r.test.approx_acc_v,
        probe_a: r.probe.map(|p| p.acc_a),
        probe_v: r.probe.map(|p| p.acc_v),
        probe_gap: r.probe.map(|p| p.gap()),
        final_norm_ratio: r.final_norm_ratio()?,
        median_angle_a: r.test_angles.median_audio(),
        median_angle_v: r.test_angles.median_visual(),
        steps: r.steps,
        final_loss: r.final_loss,
        warnings: r.warnings.clone(),
    })
}

fn train_cmd(exp: &ExperimentArgs, data: Option<&Path>, out_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = exp.resolve()?;
    let ds = match data {
        Some(p) => {
            let ds = Dataset::load(p)?;
            adopt_dataset(&mut cfg, &ds);
            ds
        }
        None => {
            cfg.data.validate().map_err(usage)?;
            generate_classification(&cfg.data)?
        }
    };
    cfg.validate().map_err(usage)?;
    let tc = cfg.resolved_train();
    let result = train(&ds, &model_config_for(&ds, &cfg.arch, &tc), &tc)?;

    fs::create_dir_all(out_dir)?;
    write_config(&out_dir.join(CONFIG_FILE), &cfg)?;
    result.model.save_checkpoint(out_dir.join(CHECKPOINT_FILE))?;
    let mut w = BufWriter::new(File::create(out_dir.join(DIAGNOSTICS_FILE))?);
    result.log.write_jsonl(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(out_dir.join(ANGLES_FILE))?);
    writeln!(w, "step,modality,angle")?;
    result.test_angles.write_csv(&mut w, result.steps)?;
    w.flush()?;
    let summary = summarize(&result)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::format("metrics", e.to_string()))?;
    fs::write(out_dir.join(METRICS_FILE), json + "\n")?;

    writeln!(out, "loss: {}  fusion: {}  s: {}", tc.loss.variant, tc.fusion, tc.loss.s)?;
    writeln!(out, "joint accuracy: {}", pct(summary.joint_acc))?;
    writeln!(
        out,
        "approx accuracy audio/visual: {} / {}",
        pct(summary.approx_acc_a),
        pct(summary.approx_acc_v)
    )?;
    if let Some(p) = result.probe {
        writeln!(out, "probe audio/visual: {} / {}  gap {}", pct(p.acc_a), pct(p.acc_v), pct(p.gap()))?;
    }
    writeln!(out, "weight-norm ratio a/v: {:.4}", summary.final_norm_ratio)?;
    writeln!(out, "wrote {}", out_dir.display())?;
    Ok(())
}

fn load_run(dir: &Path) -> Result<(Model, ExperimentConfig), CliError> {
    let kv = KeyValues::load(dir.join(CONFIG_FILE))?;
    let cfg = ExperimentConfig::from_key_values(&kv)?;
    let tc = cfg.resolved_train();
    let dims = Dataset {
        n_classes: cfg.data.n_classes,
        dim_a: cfg.data.dim_a,
        dim_v: cfg.data.dim_v,
        seed: cfg.data.seed,
        train: Vec::new(),
        test: Vec::new(),
    };
    let mc = model_config_for(&dims, &cfg.arch, &tc);
    let model = Model::load_checkpoint(mc, dir.join(CHECKPOINT_FILE))?;
    Ok((model, cfg))
}

fn diagnose(run: &Path, data: &Path, split: Split, out_dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, cfg) = load_run(run)?;
    let ds = Dataset::load(data)?;
    let samples = match split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    let batch = Batch::from_samples(samples.iter())?;
    let feats = model.features(&batch)?;
    let head = model.head()?;
    let angles = angle_distribution(&feats.fused, &head, &batch.labels)?;
    let loss = cfg.resolved_train().loss;
    let logits = head.logits(&feats.fused, &loss)?;
    let ce: f64 = batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let (_, lse) = crate::autodiff::kernels::softmax_row(logits.row(i));
            lse - logits.get(i, y)
        })
        .sum::<f64>()
        / batch.len() as f64;

    fs::create_dir_all(out_dir)?;
    let mut w = BufWriter::new(File::create(out_dir.join(ANGLES_FILE))?);
    writeln!(w, "step,modality,angle")?;
    angles.write_csv(&mut w, 0)?;
    w.flush()?;

    let mut hist = String::from("modality,bin,lower,upper,count\n");
    let width = std::f64::consts::PI / ANGLE_BINS as f64;
    for (modality, values) in [("audio", &angles.audio), ("visual", &angles.visual)] {
        for (b, c) in angle_histogram(values, ANGLE_BINS).iter().enumerate() {
            let _ = writeln!(hist, "{modality},{b},{:.6},{:.6},{c}", b as f64 * width, (b + 1) as f64 * width);
        }
    }
    fs::write(out_dir.join(HISTOGRAM_FILE), hist)?;

    let mut log = DiagnosticsLog::new(true);
    log.push(record_step(0, 0, ce, &head, &feats.fused, &batch.labels, &loss)?);
    let mut w = BufWriter::new(File::create(out_dir.join(DIAGNOSTICS_FILE))?);
    log.write_jsonl(&mut w)?;
    w.flush()?;

    writeln!(out, "median angle audio/visual: {:.4} / {:.4} rad", median(&angles.audio), median(&angles.visual))?;
    writeln!(out, "wrote {}", out_dir.display())?;
    Ok(())
}

struct CompareRow {
    arm: LossVariant,
    seed: u64,
    summary: RunSummary,
    trajectory: String,
}

fn compare(
    exp: &ExperimentArgs,
    arms: &[LossVariant],
    seeds: std::ops::Range<u64>,
    threads: Option<usize>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let base = exp.resolve()?;
    if arms.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("compare needs at least one arm and one seed".into()));
    }
    for &arm in arms {
        let mut c = base.clone();
        c.train.loss.variant = arm;
        c.validate().map_err(usage)?;
    }
    fs::create_dir_all(out_dir)?;
    write_config(&out_dir.join(CONFIG_FILE), &base)?;

    let jobs: Vec<(LossVariant, u64)> = arms.iter().flat_map(|&a| seeds.clone().map(move |s| (a, s))).collect();
    let run_job = |&(arm, seed): &(LossVariant, u64)| -> Result<CompareRow, Error> {
        let mut cfg = base.clone();
        cfg.train.loss.variant = arm;
        cfg.train.seed = seed;
        cfg.data.seed = seed;
        let ds = generate_classification(&cfg.data)?;
        let tc = cfg.resolved_train();
        let r = train(&ds, &model_config_for(&ds, &cfg.arch, &tc), &tc)?;
        let mut traj = String::from("step,norm_ratio\n");
        for (step, ratio) in r.norm_ratio_trajectory() {
            let _ = writeln!(traj, "{step},{ratio:.17e}");
        }
        let summary = summarize(&r).map_err(|e| match e {
            CliError::Runtime(e) => e,
            CliError::Usage(m) => Error::invalid("compare", m),
        })?;
        Ok(CompareRow {
            arm,
            seed,
            summary,
            trajectory: traj,
        })
    };
    let results: Vec<Result<CompareRow, Error>> = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid("threads", e.to_string()))?
            .install(|| jobs.par_iter().map(run_job).collect()),
        None => jobs.par_iter().map(run_job).collect(),
    };
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut csv = String::from("arm,seed,joint_acc,probe_a,probe_v,probe_gap,final_norm_ratio,median_angle_a,median_angle_v,trajectory\n");
    let opt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{:.2}", 100.0 * v));
    for row in &rows {
        let name = format!("trajectory_{}_seed{}.csv", row.arm, row.seed);
        fs::write(out_dir.join(&name), &row.trajectory)?;
        let s = &row.summary;
        let _ = writeln!(
            csv,
            "{},{},{:.2},{},{},{},{:.6},{:.6},{:.6},{}",
            row.arm,
            row.seed,
            100.0 * s.joint_acc,
            opt(s.probe_a),
            opt(s.probe_v),
            opt(s.probe_gap),
            s.final_norm_ratio,
            s.median_angle_a,
            s.median_angle_v,
            name
        );
    }
    writeln!(out, "{:<9} {:>8} {:>8} {:>8} {:>8} {:>8}", "arm", "joint", "probe_a", "probe_v", "gap", "ratio")?;
    for &arm in arms {
        let mine: Vec<&RunSummary> = rows.iter().filter(|r| r.arm == arm).map(|r| &r.summary).collect();
        let med = |f: &dyn Fn(&RunSummary) -> f64| median(&mine.iter().map(|s| f(s)).collect::<Vec<_>>());
        let joint = med(&|s| s.joint_acc);
        let pa = med(&|s| s.probe_a.unwrap_or(f64::NAN));
        let pv = med(&|s| s.probe_v.unwrap_or(f64::NAN));
        let gap = med(&|s| s.probe_gap.unwrap_or(f64::NAN));
        let ratio = med(&|s| s.final_norm_ratio);
        let _ = writeln!(
            csv,
            "{arm},median,{:.2},{:.2},{:.2},{:.2},{ratio:.6},{:.6},{:.6},",
            100.0 * joint,
            100.0 * pa,
            100.0 * pv,
            100.0 * gap,
            med(&|s| s.median_angle_a),
            med(&|s| s.median_angle_v)
        );
        writeln!(
            out,
            "{:<9} {:>8} {:>8} {:>8} {:>8} {:>8.4}",
            arm.to_string(),
            pct(joint),
            pct(pa),
            pct(pv),
            pct(gap),
            ratio
        )?;
    }
    fs::write(out_dir.join(SUMMARY_FILE), csv)?;
    writeln!(out, "wrote {}", out_dir.join(SUMMARY_FILE).display())?;
    Ok(())
}
