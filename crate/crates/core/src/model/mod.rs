//! BERT-style post-layer-norm encoder with canonical parameter names.
//!
//! Parameter names:
//!
//! ```text
//! embed.token  embed.position  embed.type  embed.ln.{gamma,beta}
//! layer.{i}.attn.{query,key,value,output}.{weight,bias}
//! layer.{i}.attn.ln.{gamma,beta}
//! layer.{i}.ffn.intermediate.{weight,bias}
//! layer.{i}.ffn.output.{weight,bias}
//! layer.{i}.ffn.ln.{gamma,beta}
//! ```
//!
//! Layers are numbered from 1. Linear weights are stored `[in, out]` and
//! applied as `x · W + b`.

mod encoder;
mod io;

pub(crate) use encoder::validate_input;
pub use encoder::{encode, encode_on_tape, mean_pool, EncodedVars, EncoderOutput, ParamLayout};
pub use io::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, ModelError};
use crate::params::ParamSet;
use crate::seed::{rng_from_seed, sha256_hex};
use crate::surgery::{sample_truncated_normal, ReinitDistribution};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub type_vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            hidden_size: 64,
            num_heads: 4,
            intermediate_size: 128,
            vocab_size: 64 + NUM_SPECIAL as usize,
            max_seq_len: 32,
            type_vocab_size: 2,
        }
    }
}

/// What role a layer parameter plays; surgery treats the roles differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    LnGamma,
    LnBeta,
}

/// Per-layer parameter suffixes in canonical order.
pub const LAYER_PARAMS: [(&str, ParamRole); 16] = [
    ("attn.query.weight", ParamRole::Weight),
    ("attn.query.bias", ParamRole::Bias),
    ("attn.key.weight", ParamRole::Weight),
    ("attn.key.bias", ParamRole::Bias),
    ("attn.value.weight", ParamRole::Weight),
    ("attn.value.bias", ParamRole::Bias),
    ("attn.output.weight", ParamRole::Weight),
    ("attn.output.bias", ParamRole::Bias),
    ("attn.ln.gamma", ParamRole::LnGamma),
    ("attn.ln.beta", ParamRole::LnBeta),
    ("ffn.intermediate.weight", ParamRole::Weight),
    ("ffn.intermediate.bias", ParamRole::Bias),
    ("ffn.output.weight", ParamRole::Weight),
    ("ffn.output.bias", ParamRole::Bias),
    ("ffn.ln.gamma", ParamRole::LnGamma),
    ("ffn.ln.beta", ParamRole::LnBeta),
];

pub const EMBEDDING_PARAMS: [&str; 5] = [
    "embed.token",
    "embed.position",
    "embed.type",
    "embed.ln.gamma",
    "embed.ln.beta",
];

pub fn layer_param_name(layer: usize, suffix: &str) -> String {
    format!("layer.{layer}.{suffix}")
}

/// Splits `layer.{i}.{suffix}` into `(i, suffix)`.
pub fn parse_layer_param(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layer.")?;
    let (idx, suffix) = rest.split_once('.')?;
    Some((idx.parse().ok()?, suffix))
}

pub fn param_role(suffix: &str) -> Option<ParamRole> {
    LAYER_PARAMS.iter().find(|(s, _)| *s == suffix).map(|(_, r)| *r)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1".into());
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.intermediate_size == 0 || self.max_seq_len == 0 || self.type_vocab_size == 0 {
            return bad("sizes must be positive".into());
        }
        if self.vocab_size <= NUM_SPECIAL as usize {
            return bad(format!("vocab_size must exceed {NUM_SPECIAL} specials"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Every canonical parameter with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden_size, self.intermediate_size);
        let mut out = vec![
            ("embed.token".to_string(), vec![self.vocab_size, h]),
            ("embed.position".to_string(), vec![self.max_seq_len, h]),
            ("embed.type".to_string(), vec![self.type_vocab_size, h]),
            ("embed.ln.gamma".to_string(), vec![h]),
            ("embed.ln.beta".to_string(), vec![h]),
        ];
        for layer in 1..=self.num_layers {
            for (suffix, _) in LAYER_PARAMS {
                let shape = match suffix {
                    "ffn.intermediate.weight" => vec![h, f],
                    "ffn.intermediate.bias" => vec![f],
                    "ffn.output.weight" => vec![f, h],
                    s if s.ends_with(".weight") => vec![h, h],
                    _ => vec![h],
                };
                out.push((layer_param_name(layer, suffix), shape));
            }
        }
        out
    }

    /// Closed-form count: per layer `4(h²+h) + (hf+f) + (fh+h) + 4h`, plus embeddings.
    pub fn param_count(&self) -> usize {
        let (h, f) = (self.hidden_size, self.intermediate_size);
        let per_layer = 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h;
        let embed = (self.vocab_size + self.max_seq_len + self.type_vocab_size) * h + 2 * h;
        embed + self.num_layers * per_layer
    }

    pub fn layer_param_names(&self, layer: usize) -> Vec<String> {
        LAYER_PARAMS
            .iter()
            .map(|(s, _)| layer_param_name(layer, s))
            .collect()
    }
}

/// A configuration plus one tensor for every canonical parameter name.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    /// Checks that exactly the canonical names are present with config-consistent shapes.
    pub fn new(config: ModelConfig, params: ParamSet<f32>) -> Result<Self, CheckpointError> {
        config
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let shapes = config.param_shapes();
        for (name, shape) in &shapes {
            let t = params
                .get(name)
                .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeForConfig {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if params.len() != shapes.len() {
            let extra = params
                .names()
                .iter()
                .find(|n| !shapes.iter().any(|(s, _)| s == *n))
                .cloned()
                .unwrap_or_default();
            return Err(CheckpointError::UnexpectedParameter(extra));
        }
        // re-insert in canonical order so file layout is independent of construction order
        let mut ordered = ParamSet::new();
        for (name, _) in &shapes {
            ordered.insert(name.clone(), params.get(name).unwrap().clone());
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config && self.params.bit_eq(&other.params)
    }

    /// SHA-256 over every parameter's name and little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.params.num_elements() * 4);
        for (name, t) in self.params.iter() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// Fresh checkpoint: every weight and bias (embeddings included) drawn from the
/// truncated normal reinitialization distribution; layer norms at γ=1, β=0.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint, ModelError> {
    config.validate()?;
    let dist = ReinitDistribution::default();
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    for (name, shape) in config.param_shapes() {
        let t = if name.ends_with("ln.gamma") {
            Tensor::filled(&shape, 1.0)
        } else if name.ends_with("ln.beta") {
            Tensor::zeros(&shape)
        } else {
            sample_truncated_normal(&dist, &shape, &mut rng)
        };
        params.insert(name, t);
    }
    Ok(Checkpoint::new(config.clone(), params).expect("canonical construction"))
}
