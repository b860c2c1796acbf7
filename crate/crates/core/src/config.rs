//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, which is how command-line flags layer over a file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorConfig;
use crate::error::{Error, Result};
use crate::losses::{default_scale, LossConfig, LossVariant};
use crate::model::FusionKind;
use crate::trainer::{Architecture, TrainConfig};

/// Ordered key/value pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = KeyValues::default();
        let mut problems = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => out.set(k.trim(), v.trim()),
                _ => problems.push(format!("line {}: expected key = value, got `{line}`", i + 1)),
            }
        }
        if problems.is_empty() {
            Ok(out)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses a single `key=value` override.
    pub fn parse_assignment(s: &str) -> Result<(String, String)> {
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(Error::Config(vec![format!("expected key=value, got `{s}`")])),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.0.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.0 {
            self.set(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Everything needed to generate data and train one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: GeneratorConfig,
    pub arch: Architecture,
    pub train: TrainConfig,
    /// Cosine scale; `None` picks the default for the class count.
    pub scale: Option<f64>,
}

pub const KEYS: &[&str] = &[
    "n_classes",
    "dim_a",
    "dim_v",
    "inter_class_angle",
    "intra_class_spread",
    "dominance",
    "n_train",
    "n_test",
    "data_seed",
    "hidden_dims",
    "feature_dim",
    "epochs",
    "batch_size",
    "learning_rate",
    "momentum",
    "loss",
    "s",
    "aux_weight",
    "fusion",
    "seed",
    "diagnostics_every",
    "probe",
];

fn parse_value<T: FromStr>(key: &str, value: &str, problems: &mut Vec<String>) -> Option<T> {
    match value.parse() {
        Ok(v) => Some(v),
        Err(_) => {
            problems.push(format!("{key}: cannot parse `{value}`"));
            None
        }
    }
}

fn parse_dims(value: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| p.trim().parse()).collect()
}

impl ExperimentConfig {
    /// Applies every assignment in `kv`; unknown keys and bad values are
    /// collected into one error.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let mut problems = Vec::new();
        for (key, value) in kv.iter() {
            let p = &mut problems;
            macro_rules! set {
                ($field:expr) => {
                    if let Some(v) = parse_value(key, value, p) {
                        $field = v;
                    }
                };
            }
            match key {
                "n_classes" => set!(self.data.n_classes),
                "dim_a" => set!(self.data.dim_a),
                "dim_v" => set!(self.data.dim_v),
                "inter_class_angle" => set!(self.data.inter_class_angle),
                "intra_class_spread" => set!(self.data.intra_class_spread),
                "dominance" => set!(self.data.dominance),
                "n_train" => set!(self.data.n_train),
                "n_test" => set!(self.data.n_test),
                "data_seed" => set!(self.data.seed),
                "hidden_dims" => match parse_dims(value) {
                    Ok(d) => self.arch.hidden_dims = d,
                    Err(_) => p.push(format!("hidden_dims: cannot parse `{value}`")),
                },
                "feature_dim" => set!(self.arch.feature_dim),
                "epochs" => set!(self.train.epochs),
                "batch_size" => set!(self.train.batch_size),
                "learning_rate" => set!(self.train.learning_rate),
                "momentum" => set!(self.train.momentum),
                "loss" => match value.parse::<LossVariant>() {
                    Ok(v) => self.train.loss.variant = v,
                    Err(e) => p.push(e.to_string()),
                },
                "s" => {
                    if value == "auto" {
                        self.scale = None;
                    } else if let Some(v) = parse_value(key, value, p) {
                        self.scale = Some(v);
                    }
                }
                "aux_weight" => set!(self.train.loss.aux_weight),
                "fusion" => match value.parse::<FusionKind>() {
                    Ok(v) => self.train.fusion = v,
                    Err(e) => p.push(e.to_string()),
                },
                "seed" => set!(self.train.seed),
                "diagnostics_every" => set!(self.train.diagnostics_every),
                "probe" => set!(self.train.probe),
                other => p.push(format!("unknown key `{other}`")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Training config with the cosine scale resolved.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.loss.s = match (t.loss.variant, self.scale) {
            (_, Some(s)) => s,
            (LossVariant::MmCosine, None) => default_scale(self.data.n_classes),
            (LossVariant::Vanilla, None) => LossConfig::vanilla().s,
        };
        t
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(p)) = self.data.validate() {
            problems.extend(p);
        }
        if let Err(e) = self.resolved_train().validate(self.data.n_train) {
            match e {
                Error::Config(p) => problems.extend(p),
                other => problems.push(other.to_string()),
            }
        }
        if self.arch.feature_dim == 0 || self.arch.hidden_dims.contains(&0) {
            problems.push("layer widths must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Every key with its resolved value.
    pub fn to_key_values(&self) -> KeyValues {
        let t = self.resolved_train();
        let d = &self.data;
        let mut kv = KeyValues::default();
        let dims: Vec<String> = self.arch.hidden_dims.iter().map(|x| x.to_string()).collect();
        for (k, v) in [
            ("n_classes", d.n_classes.to_string()),
            ("dim_a", d.dim_a.to_string()),
            ("dim_v", d.dim_v.to_string()),
            ("inter_class_angle", d.inter_class_angle.to_string()),
            ("intra_class_spread", d.intra_class_spread.to_string()),
            ("dominance", d.dominance.to_string()),
            ("n_train", d.n_train.to_string()),
            ("n_test", d.n_test.to_string()),
            ("data_seed", d.seed.to_string()),
            ("hidden_dims", dims.join(",")),
            ("feature_dim", self.arch.feature_dim.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("momentum", t.momentum.to_string()),
            ("loss", t.loss.variant.to_string()),
            ("s", t.loss.s.to_string()),
            ("aux_weight", t.loss.aux_weight.to_string()),
            ("fusion", t.fusion.to_string()),
            ("seed", t.seed.to_string()),
            ("diagnostics_every", t.diagnostics_every.to_string()),
            ("probe", t.probe.to_string()),
        ] {
            kv.set(k, v);
        }
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply(kv)?;
        Ok(c)
    }
}
