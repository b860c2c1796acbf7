//! Uni-modal MLP encoders, symmetric fusion, and the named parameter store.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::Hasher;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datagen::BimodalSample;
use crate::error::{Error, Result};
use crate::losses::ClassifierHead;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMCCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    MidConcat,
    FilmSymmetric,
    GatedSymmetric,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [
        FusionKind::MidConcat,
        FusionKind::FilmSymmetric,
        FusionKind::GatedSymmetric,
    ];
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::MidConcat => "concat",
            FusionKind::FilmSymmetric => "film",
            FusionKind::GatedSymmetric => "gated",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" | "midconcat" | "mid-concat" => Ok(FusionKind::MidConcat),
            "film" | "filmsymmetric" => Ok(FusionKind::FilmSymmetric),
            "gated" | "gatedsymmetric" => Ok(FusionKind::GatedSymmetric),
            other => Err(Error::invalid("fusion", format!("unknown fusion kind `{other}`"))),
        }
    }
}

/// Shape of one uni-modal encoder: `input → hidden… → output`, ReLU between layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderConfig {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim_a: usize,
    pub dim_v: usize,
    pub hidden_dims: Vec<usize>,
    /// Feature width `d`, shared by both modalities.
    pub feature_dim: usize,
    pub n_classes: usize,
    pub fusion: FusionKind,
    /// Bias on the joint head (vanilla softmax only).
    pub head_bias: bool,
    /// Extra uni-modal cosine heads for auxiliary losses.
    pub aux_heads: bool,
}

impl ModelConfig {
    pub fn encoder_a(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.dim_a,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.feature_dim,
        }
    }

    pub fn encoder_v(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.dim_v,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("dim_a", self.dim_a),
            ("dim_v", self.dim_v),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.hidden_dims.contains(&0) {
            problems.push("hidden layer widths must be positive".into());
        }
        if self.n_classes < 2 {
            problems.push(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Parameter names and shapes in initialization (and checkpoint) order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.feature_dim;
        let n = self.n_classes;
        let mut out = Vec::new();
        for (prefix, enc) in [("enc_a", self.encoder_a()), ("enc_v", self.encoder_v())] {
            for (i, (fan_in, fan_out)) in enc.layer_dims().into_iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), vec![fan_in, fan_out]));
                out.push((format!("{prefix}.{i}.bias"), vec![fan_out]));
            }
        }
        match self.fusion {
            FusionKind::MidConcat => {}
            FusionKind::FilmSymmetric => {
                for map in ["gamma_a", "beta_a", "gamma_v", "beta_v"] {
                    out.push((format!("film.{map}.weight"), vec![d, d]));
                    out.push((format!("film.{map}.bias"), vec![d]));
                }
            }
            FusionKind::GatedSymmetric => {
                out.push(("gate.weight".into(), vec![2 * d, d]));
                out.push(("gate.bias".into(), vec![d]));
            }
        }
        out.push(("head.w_a".into(), vec![d, n]));
        out.push(("head.w_v".into(), vec![d, n]));
        if self.head_bias {
            out.push(("head.b".into(), vec![n]));
        }
        if self.aux_heads {
            out.push(("aux.w_a".into(), vec![d, n]));
            out.push(("aux.w_v".into(), vec![d, n]));
        }
        out
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.entries[i].1)
            .ok_or_else(|| missing(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].1),
            None => Err(missing(name)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Hash of names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.entries {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write_usize(d);
            }
            for v in t.values() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Checkpoint layout (all integers u32 LE, values f64 LE):
    ///
    /// ```text
    /// "MMCCKPT1" | count | count × (name_len | name utf-8 | ndim | dims… | values…)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::format("checkpoint", "truncated");
        let mut c = bytes;
        let mut magic = [0u8; 8];
        c.read_exact(&mut magic).map_err(|_| truncated())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let read_u32 = |c: &mut &[u8]| -> Result<usize> {
            let mut b = [0u8; 4];
            c.read_exact(&mut b).map_err(|_| truncated())?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let count = read_u32(&mut c)?;
        let mut store = ParamStore::default();
        for _ in 0..count {
            let len = read_u32(&mut c)?;
            let mut name = vec![0u8; len];
            c.read_exact(&mut name).map_err(|_| truncated())?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("checkpoint", "tensor name is not utf-8"))?;
            let ndim = read_u32(&mut c)?;
            let shape = (0..ndim)
                .map(|_| read_u32(&mut c))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                c.read_exact(&mut b).map_err(|_| truncated())?;
                values.push(f64::from_le_bytes(b));
            }
            store.push(name, Tensor::new(shape, values)?);
        }
        if !c.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(store)
    }
}

fn missing(name: &str) -> Error {
    Error::Checkpoint {
        name: name.to_string(),
        reason: "tensor not present".into(),
    }
}

/// Pair of per-modality blocks entering a classifier head. `T` is a plain
/// [`Tensor`] for evaluation or a tape [`Var`] while building a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlocks<T = Tensor> {
    pub block_a: T,
    pub block_v: T,
    pub provenance: FusionKind,
}

impl FeatureBlocks<Tensor> {
    pub fn new(block_a: Tensor, block_v: Tensor) -> Self {
        FeatureBlocks {
            block_a,
            block_v,
            provenance: FusionKind::MidConcat,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> FeatureBlocks<Var> {
        FeatureBlocks {
            block_a: tape.leaf(self.block_a.clone()),
            block_v: tape.leaf(self.block_v.clone()),
            provenance: self.provenance,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.block_a.rows()
    }
}

impl FeatureBlocks<Var> {
    pub fn resolve(&self, tape: &Tape) -> FeatureBlocks<Tensor> {
        FeatureBlocks {
            block_a: tape.value(self.block_a).clone(),
            block_v: tape.value(self.block_v).clone(),
            provenance: self.provenance,
        }
    }
}

/// Stacked model inputs for a batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x_a: Tensor,
    pub x_v: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a BimodalSample>,
    {
        let mut rows_a = Vec::new();
        let mut rows_v = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            rows_a.push(s.x_a.as_slice());
            rows_v.push(s.x_v.as_slice());
            labels.push(s.label);
        }
        if labels.is_empty() {
            return Err(Error::invalid("batch", "no samples"));
        }
        Ok(Batch {
            x_a: Tensor::from_rows(&rows_a)?,
            x_v: Tensor::from_rows(&rows_v)?,
            labels,
        })
    }

    pub fn gather(samples: &[BimodalSample], indices: &[usize]) -> Result<Self> {
        Self::from_samples(indices.iter().map(|&i| &samples[i]))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parameters registered on one tape, parallel to the store order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| missing(name))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn head(&self) -> Result<ClassifierHead<Var>> {
        Ok(ClassifierHead {
            w_a: self.get("head.w_a")?,
            w_v: self.get("head.w_v")?,
            b: self.get("head.b").ok(),
        })
    }

    pub fn aux_heads(&self) -> Result<ClassifierHead<Var>> {
        Ok(ClassifierHead {
            w_a: self.get("aux.w_a")?,
            w_v: self.get("aux.w_v")?,
            b: None,
        })
    }
}

/// Encoder and fused outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T = Var> {
    pub encoded: FeatureBlocks<T>,
    pub fused: FeatureBlocks<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization from `ChaCha8Rng(seed)`.
    ///
    /// Biases use the fan-in of their layer; the joint head counts both blocks
    /// (`2d`). FiLM γ-map biases are shifted by +1 so modulation starts near
    /// identity. Auxiliary heads draw from a separate stream, so enabling them
    /// leaves every other parameter unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut main = ChaCha8Rng::seed_from_u64(seed);
        main.set_stream(1);
        let mut aux = ChaCha8Rng::seed_from_u64(seed);
        aux.set_stream(3);

        let d = config.feature_dim;
        let mut params = ParamStore::default();
        let mut fan_in = 0;
        for (name, shape) in config.parameter_layout() {
            if shape.len() == 2 {
                fan_in = shape[0];
            }
            let (rng, fan) = if name.starts_with("aux.") {
                (&mut aux, d)
            } else if name.starts_with("head.") {
                (&mut main, 2 * d)
            } else {
                (&mut main, fan_in)
            };
            let bound = 1.0 / (fan as f64).sqrt();
            let numel: usize = shape.iter().product();
            let offset = if name.starts_with("film.gamma") && name.ends_with(".bias") {
                1.0
            } else {
                0.0
            };
            let values = (0..numel)
                .map(|_| offset + rng.random_range(-bound..bound))
                .collect();
            params.push(name, Tensor::new(shape, values)?);
        }
        Ok(Model { config, params })
    }

    /// Validates a parameter store against this config and adopts it.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        for (name, shape) in &layout {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    reason: format!("expected shape {shape:?}, found {:?}", t.shape()),
                });
            }
        }
        if let Some((extra, _)) = params
            .iter()
            .find(|(n, _)| !layout.iter().any(|(l, _)| l == n))
        {
            return Err(Error::Checkpoint {
                name: extra.to_string(),
                reason: "not part of this model".into(),
            });
        }
        Ok(Model { config, params })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.params.to_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let store = ParamStore::from_bytes(&std::fs::read(path)?)?;
        Self::from_params(config, store)
    }

    /// Registers every parameter on `tape`; `trainable` selects grad tracking.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut names = Vec::with_capacity(self.params.len());
        let mut vars = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            names.push(name.to_string());
            vars.push(if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            });
        }
        BoundParams { names, vars }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, batch: &Batch) -> Result<Forward> {
        let encoded = encode(tape, bound, &self.config, batch)?;
        let fused = fuse(tape, &encoded, self.config.fusion, bound)?;
        Ok(Forward { encoded, fused })
    }

    /// Gradient-free forward pass.
    pub fn features(&self, batch: &Batch) -> Result<Forward<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, batch)?;
        Ok(Forward {
            encoded: out.encoded.resolve(&tape),
            fused: out.fused.resolve(&tape),
        })
    }

    pub fn head(&self) -> Result<ClassifierHead> {
        Ok(ClassifierHead {
            w_a: self.params.get("head.w_a")?.clone(),
            w_v: self.params.get("head.w_v")?.clone(),
            b: self.params.get("head.b").ok().cloned(),
        })
    }
}

fn mlp(tape: &mut Tape, bound: &BoundParams, prefix: &str, layers: usize, input: Var) -> Result<Var> {
    let mut h = input;
    for i in 0..layers {
        let w = bound.get(&format!("{prefix}.{i}.weight"))?;
        let b = bound.get(&format!("{prefix}.{i}.bias"))?;
        h = tape.matmul(h, w)?;
        h = tape.add(h, b)?;
        if i + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Runs both uni-modal encoders; the result carries `MidConcat` provenance.
pub fn encode(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<FeatureBlocks<Var>> {
    let layers = config.hidden_dims.len() + 1;
    let xa = tape.constant(batch.x_a.clone());
    let xv = tape.constant(batch.x_v.clone());
    Ok(FeatureBlocks {
        block_a: mlp(tape, bound, "enc_a", layers, xa)?,
        block_v: mlp(tape, bound, "enc_v", layers, xv)?,
        provenance: FusionKind::MidConcat,
    })
}

fn affine(tape: &mut Tape, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Symmetric fusion. Stream 1 becomes `block_a`, stream 2 becomes `block_v`:
///
/// * `MidConcat`: identity.
/// * `FilmSymmetric`: `γ_a(φa)⊙φv + β_a(φa)` and `γ_v(φv)⊙φa + β_v(φv)`.
/// * `GatedSymmetric`: `z = σ([φa;φv]·W + b)`, streams `z⊙φa` and `(1−z)⊙φv`.
pub fn fuse(
    tape: &mut Tape,
    blocks: &FeatureBlocks<Var>,
    kind: FusionKind,
    bound: &BoundParams,
) -> Result<FeatureBlocks<Var>> {
    let (a, v) = (blocks.block_a, blocks.block_v);
    let (block_a, block_v) = match kind {
        FusionKind::MidConcat => (a, v),
        FusionKind::FilmSymmetric => {
            let gamma_a = affine(tape, bound, "film.gamma_a", a)?;
            let beta_a = affine(tape, bound, "film.beta_a", a)?;
            let gamma_v = affine(tape, bound, "film.gamma_v", v)?;
            let beta_v = affine(tape, bound, "film.beta_v", v)?;
            let s1 = tape.mul(gamma_a, v)?;
            let s1 = tape.add(s1, beta_a)?;
            let s2 = tape.mul(gamma_v, a)?;
            let s2 = tape.add(s2, beta_v)?;
            (s1, s2)
        }
        FusionKind::GatedSymmetric => {
            let joint = tape.concat(&[a, v])?;
            let pre = affine(tape, bound, "gate", joint)?;
            let z = tape.sigmoid(pre)?;
            let shape = tape.value(z).shape().to_vec();
            let ones = tape.constant(Tensor::filled(&shape, 1.0));
            let neg = tape.scale(z, -1.0)?;
            let complement = tape.add(ones, neg)?;
            (tape.mul(z, a)?, tape.mul(complement, v)?)
        }
    };
    Ok(FeatureBlocks {
        block_a,
        block_v,
        provenance: kind,
    })
}
