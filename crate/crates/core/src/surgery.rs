//! Checkpoint surgery: partial reinitialization and layer permutation.
//!
//! Every intervention is a pure function of `(checkpoint, plan)`; the source
//! checkpoint is never mutated. Embedding parameters are never touched.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::SurgeryError;
use crate::model::{layer_param_name, Checkpoint, ParamRole, EMBEDDING_PARAMS, LAYER_PARAMS};
use crate::params::ParamSet;
use crate::seed::{derive_rng, rng_from_seed, Rng};
use crate::tensor::Tensor;

/// Normal distribution conditioned on the open interval `(lower, upper)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinitDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for ReinitDistribution {
    fn default() -> Self {
        Self {
            mu: 0.0,
            sigma: 0.02,
            lower: -0.04,
            upper: 0.04,
        }
    }
}

impl ReinitDistribution {
    pub fn is_valid(&self) -> bool {
        self.sigma > 0.0 && self.lower < self.mu && self.mu < self.upper
    }
}

/// I.i.d. draws by rejection: out-of-range values are redrawn. The range
/// check is done after rounding to `f32`, so stored values are strictly inside.
pub fn sample_truncated_normal(dist: &ReinitDistribution, shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    debug_assert!(dist.is_valid());
    let (lo, hi) = (dist.lower as f32, dist.upper as f32);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        let x = (dist.mu + dist.sigma * z) as f32;
        if x > lo && x < hi {
            data.push(x);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("sized to shape")
}

fn default_block_len() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanKind {
    /// Keep layers `1..=k`, reinitialize `k+1..=L`.
    Progressive {
        k: usize,
    },
    /// Reinitialize layers `start..start+len`.
    BlockReinit {
        start: usize,
        #[serde(default = "default_block_len")]
        len: usize,
    },
    /// Keep layers `start..start+len`, reinitialize the rest.
    BlockPreserve {
        start: usize,
        #[serde(default = "default_block_len")]
        len: usize,
    },
    SingleLayer {
        k: usize,
    },
    /// `permutation[i-1]` is the new position of source layer `i`.
    Permute {
        permutation: Vec<usize>,
    },
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryPlan {
    #[serde(flatten)]
    pub kind: PlanKind,
    #[serde(default)]
    pub preserve_layer_norm: bool,
    #[serde(default)]
    pub zero_biases: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SurgeryPlan {
    pub fn new(kind: PlanKind, seed: u64) -> Self {
        Self {
            kind,
            preserve_layer_norm: false,
            zero_biases: false,
            seed,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), SurgeryError> {
        let layers = num_layers;
        match &self.kind {
            PlanKind::Progressive { k } if *k > layers => Err(SurgeryError::InvalidK { k: *k, layers }),
            PlanKind::BlockReinit { start, len } | PlanKind::BlockPreserve { start, len }
                if *len == 0 || *start == 0 || start + len - 1 > layers =>
            {
                Err(SurgeryError::InvalidBlock {
                    start: *start,
                    len: *len,
                    layers,
                })
            }
            PlanKind::SingleLayer { k } if *k == 0 || *k > layers => {
                Err(SurgeryError::InvalidLayer { k: *k, layers })
            }
            PlanKind::Permute { permutation } if !is_permutation(permutation, layers) => {
                Err(SurgeryError::InvalidPermutation {
                    permutation: permutation.clone(),
                    layers,
                })
            }
            _ => Ok(()),
        }
    }

    /// Layers whose parameters are resampled, ascending. Empty for permutations.
    pub fn reinit_layers(&self, num_layers: usize) -> Vec<usize> {
        let all = 1..=num_layers;
        match &self.kind {
            PlanKind::Progressive { k } => (k + 1..=num_layers).collect(),
            PlanKind::BlockReinit { start, len } => (*start..start + len).collect(),
            PlanKind::BlockPreserve { start, len } => {
                all.filter(|i| !(*start..start + len).contains(i)).collect()
            }
            PlanKind::SingleLayer { k } => vec![*k],
            PlanKind::Permute { .. } | PlanKind::Identity => Vec::new(),
        }
    }

    /// Short stable label, e.g. `progressive-k3`, used in cell keys.
    pub fn label(&self) -> String {
        let mut s = match &self.kind {
            PlanKind::Progressive { k } => format!("progressive-k{k}"),
            PlanKind::BlockReinit { start, len } => format!("block-reinit-s{start}-l{len}"),
            PlanKind::BlockPreserve { start, len } => format!("block-preserve-s{start}-l{len}"),
            PlanKind::SingleLayer { k } => format!("single-k{k}"),
            PlanKind::Permute { permutation } => format!(
                "permute-{}",
                permutation
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(".")
            ),
            PlanKind::Identity => "identity".to_string(),
        };
        if self.preserve_layer_norm {
            s.push_str("-keepln");
        }
        if self.zero_biases {
            s.push_str("-zerobias");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMove {
    pub from: String,
    pub to: String,
}

/// Accounting of what happened to each parameter. Every source parameter name
/// appears in exactly one of the three lists (for moves, as `from`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub reinitialized: Vec<String>,
    pub preserved: Vec<String>,
    pub moved: Vec<ParamMove>,
}

impl SurgeryReport {
    pub fn is_reinitialized(&self, name: &str) -> bool {
        self.reinitialized.iter().any(|n| n == name)
    }

    /// Report for an untouched checkpoint.
    pub fn identity(checkpoint: &Checkpoint) -> Self {
        Self {
            preserved: checkpoint.params.names().to_vec(),
            ..Self::default()
        }
    }
}

pub fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n + 1];
    for &v in p {
        if v == 0 || v > n || seen[v] {
            return false;
        }
        seen[v] = true;
    }
    true
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &to) in p.iter().enumerate() {
        inv[to - 1] = i + 1;
    }
    inv
}

/// Layer permutation for run `run_index`: Fisher–Yates over `1..=num_layers`
/// seeded by `(master_seed, "perm", run_index)`. It does not depend on the
/// task, so run `n` of every task shares one permutation.
pub fn derive_permutation(master_seed: u64, run_index: usize, num_layers: usize) -> Vec<usize> {
    let mut rng = derive_rng(master_seed, &["perm", &run_index.to_string()]);
    let mut p: Vec<usize> = (1..=num_layers).collect();
    for i in (1..p.len()).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Block starts for windows of `len` consecutive layers with the given stride.
pub fn block_starts(num_layers: usize, len: usize, stride: usize) -> Vec<usize> {
    if len == 0 || len > num_layers {
        return Vec::new();
    }
    (1..=num_layers - len + 1).step_by(stride.max(1)).collect()
}

pub fn apply(
    checkpoint: &Checkpoint,
    plan: &SurgeryPlan,
) -> Result<(Checkpoint, SurgeryReport), SurgeryError> {
    let layers = checkpoint.config.num_layers;
    plan.validate(layers)?;
    let mut report = SurgeryReport::default();
    let mut params: ParamSet<f32> = checkpoint.params.clone();

    report
        .preserved
        .extend(EMBEDDING_PARAMS.iter().map(|s| s.to_string()));

    if let PlanKind::Permute { permutation } = &plan.kind {
        for (i, &to) in permutation.iter().enumerate() {
            let from = i + 1;
            for (suffix, _) in LAYER_PARAMS {
                let src = layer_param_name(from, suffix);
                let dst = layer_param_name(to, suffix);
                params.insert(dst.clone(), checkpoint.params.get(&src).unwrap().clone());
                if from == to {
                    report.preserved.push(src);
                } else {
                    report.moved.push(ParamMove { from: src, to: dst });
                }
            }
        }
        let ck = Checkpoint {
            config: checkpoint.config.clone(),
            params,
        };
        return Ok((ck, report));
    }

    let reinit = plan.reinit_layers(layers);
    let dist = ReinitDistribution::default();
    let mut rng = rng_from_seed(plan.seed);
    for layer in 1..=layers {
        let resample = reinit.contains(&layer);
        for (suffix, role) in LAYER_PARAMS {
            let name = layer_param_name(layer, suffix);
            if !resample {
                report.preserved.push(name);
                continue;
            }
            let shape = checkpoint.params.get(&name).unwrap().shape().to_vec();
            let fresh = match role {
                ParamRole::Weight => sample_truncated_normal(&dist, &shape, &mut rng),
                ParamRole::Bias if plan.zero_biases => Tensor::zeros(&shape),
                ParamRole::Bias => sample_truncated_normal(&dist, &shape, &mut rng),
                ParamRole::LnGamma | ParamRole::LnBeta if plan.preserve_layer_norm => {
                    report.preserved.push(name);
                    continue;
                }
                ParamRole::LnGamma => Tensor::filled(&shape, 1.0),
                ParamRole::LnBeta => Tensor::zeros(&shape),
            };
            params.insert(name.clone(), fresh);
            report.reinitialized.push(name);
        }
    }
    let ck = Checkpoint {
        config: checkpoint.config.clone(),
        params,
    };
    Ok((ck, report))
}
