//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use relab_core::autodiff::{Tape, Var};
use relab_core::model::{encode_on_tape, init_model, mean_pool, ModelConfig, ParamLayout, CLS, PAD, SEP};
use relab_core::params::ParamSet;
use relab_core::seed::{rng_from_seed, Rng};
use relab_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;
const STRUCTURAL_ZERO: f64 = 1e-12;
const FD_NOISE: f64 = 1e-7;

pub fn random_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// Largest per-tensor relative error `‖g − ĝ‖ / (‖g‖ + ‖ĝ‖)` between the
/// tape gradient `g` and central differences `ĝ` with step [`FD_STEP`].
pub fn grad_check<B>(params: &ParamSet<f64>, build: B) -> (f64, String)
where
    B: Fn(&mut Tape<'_, f64>) -> Var,
{
    let loss_of = |p: &ParamSet<f64>| {
        let mut tape = Tape::new(p);
        let l = build(&mut tape);
        tape.value(l).item()
    };
    let analytic = {
        let mut tape = Tape::new(params);
        let l = build(&mut tape);
        tape.backward(l).unwrap()
    };
    let mut worst = (0.0, String::new());
    let mut p = params.clone();
    for i in 0..params.len() {
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for j in 0..params.at(i).numel() {
            let x = params.at(i).data()[j];
            p.at_mut(i).data_mut()[j] = x + FD_STEP;
            let up = loss_of(&p);
            p.at_mut(i).data_mut()[j] = x - FD_STEP;
            let down = loss_of(&p);
            p.at_mut(i).data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.at(i).data()[j];
            diff += (a - numeric) * (a - numeric);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let (norm_a, norm_n) = (norm_a.sqrt(), norm_n.sqrt());
        // Gradients that vanish identically (the attention key bias shifts
        // every score of a row equally) leave only rounding noise in ĝ.
        let rel = if norm_a < STRUCTURAL_ZERO {
            if norm_n < FD_NOISE {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff.sqrt() / (norm_a + norm_n)
        };
        if rel > worst.0 {
            worst = (rel, params.name(i).to_string());
        }
    }
    worst
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element carries a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = random_tensor(&shape, 1.0, &mut rng_from_seed(seed));
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

pub type Builder = Box<dyn Fn(&mut Tape<'_, f64>) -> Var>;

fn params_of(shapes: &[(&str, &[usize])], seed: u64) -> ParamSet<f64> {
    let mut rng = rng_from_seed(seed);
    let mut p = ParamSet::new();
    for (name, shape) in shapes {
        p.insert(*name, random_tensor(shape, 1.0, &mut rng));
    }
    p
}

/// One gradient check per differentiable primitive.
pub fn primitive_cases() -> Vec<(&'static str, ParamSet<f64>, Builder)> {
    let mut cases: Vec<(&'static str, ParamSet<f64>, Builder)> = Vec::new();
    let mut add = |name, shapes: &[(&str, &[usize])], f: Builder| {
        cases.push((name, params_of(shapes, cases.len() as u64 + 1), f));
    };
    add(
        "matmul",
        &[("a", &[3, 4]), ("b", &[4, 5])],
        Box::new(|t| {
            let (a, b) = (t.param("a").unwrap(), t.param("b").unwrap());
            let y = t.matmul(a, b).unwrap();
            weighted_sum(t, y, 100)
        }),
    );
    add(
        "matmul_nt",
        &[("a", &[3, 4]), ("b", &[5, 4])],
        Box::new(|t| {
            let (a, b) = (t.param("a").unwrap(), t.param("b").unwrap());
            let y = t.matmul_nt(a, b).unwrap();
            weighted_sum(t, y, 101)
        }),
    );
    add(
        "add_broadcast",
        &[("a", &[3, 4]), ("b", &[4])],
        Box::new(|t| {
            let (a, b) = (t.param("a").unwrap(), t.param("b").unwrap());
            let y = t.add(a, b).unwrap();
            weighted_sum(t, y, 102)
        }),
    );
    add(
        "mul",
        &[("a", &[3, 4]), ("b", &[3, 4])],
        Box::new(|t| {
            let (a, b) = (t.param("a").unwrap(), t.param("b").unwrap());
            let y = t.mul(a, b).unwrap();
            weighted_sum(t, y, 103)
        }),
    );
    add(
        "scale",
        &[("a", &[2, 3])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.scale(a, -0.37);
            weighted_sum(t, y, 104)
        }),
    );
    add(
        "gelu",
        &[("a", &[4, 5])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.gelu(a);
            weighted_sum(t, y, 105)
        }),
    );
    add(
        "softmax_rows",
        &[("a", &[3, 5])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.softmax(a, 1).unwrap();
            weighted_sum(t, y, 106)
        }),
    );
    add(
        "softmax_cols",
        &[("a", &[3, 5])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.softmax(a, 0).unwrap();
            weighted_sum(t, y, 107)
        }),
    );
    add(
        "softmax_masked",
        &[("a", &[4, 4])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.softmax_masked(a, 1, Some(&[true, false, true, true])).unwrap();
            weighted_sum(t, y, 108)
        }),
    );
    add(
        "layer_norm",
        &[("x", &[3, 6]), ("g", &[6]), ("b", &[6])],
        Box::new(|t| {
            let (x, g, b) = (
                t.param("x").unwrap(),
                t.param("g").unwrap(),
                t.param("b").unwrap(),
            );
            let y = t.layer_norm(x, g, b).unwrap();
            weighted_sum(t, y, 109)
        }),
    );
    add(
        "embedding",
        &[("table", &[5, 3])],
        Box::new(|t| {
            let table = t.param("table").unwrap();
            let y = t.embedding(table, &[4, 0, 4, 2]).unwrap();
            weighted_sum(t, y, 110)
        }),
    );
    add(
        "mean_axis0",
        &[("a", &[4, 3])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.mean(a, 0).unwrap();
            weighted_sum(t, y, 111)
        }),
    );
    add(
        "mean_axis1",
        &[("a", &[4, 3])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.mean(a, 1).unwrap();
            weighted_sum(t, y, 112)
        }),
    );
    add(
        "sum",
        &[("a", &[2, 2])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.mul(a, a).unwrap();
            t.sum(y)
        }),
    );
    add(
        "cross_entropy",
        &[("logits", &[4, 3])],
        Box::new(|t| {
            let a = t.param("logits").unwrap();
            t.cross_entropy(a, &[0, 2, 1, 2]).unwrap()
        }),
    );
    add(
        "slice_cols",
        &[("a", &[3, 6])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.slice_cols(a, 2, 3).unwrap();
            weighted_sum(t, y, 113)
        }),
    );
    add(
        "concat_cols",
        &[("a", &[3, 2]), ("b", &[3, 4])],
        Box::new(|t| {
            let (a, b) = (t.param("a").unwrap(), t.param("b").unwrap());
            let y = t.concat_cols(&[b, a, b]).unwrap();
            weighted_sum(t, y, 114)
        }),
    );
    add(
        "gather_rows",
        &[("a", &[5, 3])],
        Box::new(|t| {
            let a = t.param("a").unwrap();
            let y = t.gather_rows(a, &[3, 0, 3]).unwrap();
            weighted_sum(t, y, 115)
        }),
    );
    cases
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        intermediate_size: 32,
        vocab_size: 12,
        max_seq_len: 10,
        type_vocab_size: 2,
    }
}

/// 2-layer, hidden-16 encoder plus a 2-way head on the mean-pooled last
/// layer, with weights scaled so attention is neither uniform nor saturated.
pub fn encoder_case() -> (ParamSet<f64>, Builder) {
    let cfg = tiny_config();
    let mut params = init_model(&cfg, 9).unwrap().params.cast::<f64>();
    let mut rng = rng_from_seed(10);
    for i in 0..params.len() {
        let t = params.at_mut(i);
        for x in t.data_mut() {
            *x = *x * 5.0 + rng.random_range(-0.1..0.1);
        }
    }
    params.insert("head.weight", random_tensor(&[16, 2], 0.2, &mut rng));
    params.insert("head.bias", random_tensor(&[2], 0.5, &mut rng));
    let tokens = vec![CLS, 5, 7, 9, SEP, 11, 4, SEP, PAD, PAD];
    let types = vec![0, 0, 0, 0, 0, 1, 1, 1, 0, 0];
    let build: Builder = Box::new(move |t| {
        let layout = ParamLayout::resolve(t.params(), &cfg).unwrap();
        let enc = encode_on_tape(t, &layout, &cfg, &tokens, &types).unwrap();
        let last = *enc.hidden.last().unwrap();
        let pooled = mean_pool(t, last, &tokens).unwrap();
        let w = t.param("head.weight").unwrap();
        let b = t.param("head.bias").unwrap();
        let logits = t.matmul(pooled, w).unwrap();
        let logits = t.add(logits, b).unwrap();
        t.cross_entropy(logits, &[1]).unwrap()
    });
    (params, build)
}

pub mod surgery_suite {
    use std::collections::BTreeSet;

    use relab_core::model::{
        init_model, layer_param_name, Checkpoint, ModelConfig, EMBEDDING_PARAMS, LAYER_PARAMS,
    };
    use relab_core::surgery::{apply, invert_permutation, PlanKind, SurgeryPlan};

    pub fn config(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            hidden_size: 8,
            num_heads: 2,
            intermediate_size: 16,
            vocab_size: 12,
            max_seq_len: 8,
            type_vocab_size: 2,
        }
    }

    pub fn checkpoint(layers: usize, seed: u64) -> Checkpoint {
        init_model(&config(layers), seed).unwrap()
    }

    /// A valid plan drawn from `u`, a stream of random words.
    pub fn plan_from(layers: usize, mut u: impl FnMut() -> u64) -> SurgeryPlan {
        let l = layers as u64;
        let kind = match u() % 6 {
            0 => PlanKind::Progressive {
                k: (u() % (l + 1)) as usize,
            },
            1 | 2 => {
                let len = 1 + u() % l;
                let start = 1 + u() % (l - len + 1);
                let (start, len) = (start as usize, len as usize);
                if u().is_multiple_of(2) {
                    PlanKind::BlockReinit { start, len }
                } else {
                    PlanKind::BlockPreserve { start, len }
                }
            }
            3 => PlanKind::SingleLayer {
                k: (1 + u() % l) as usize,
            },
            _ => {
                let mut p: Vec<usize> = (1..=layers).collect();
                for i in (1..layers).rev() {
                    p.swap(i, (u() % (i as u64 + 1)) as usize);
                }
                PlanKind::Permute { permutation: p }
            }
        };
        SurgeryPlan {
            kind,
            preserve_layer_norm: u().is_multiple_of(4),
            zero_biases: u().is_multiple_of(4),
            seed: u(),
        }
    }

    fn layer_of_block(kind: &PlanKind, layers: usize) -> Option<BTreeSet<usize>> {
        match kind {
            PlanKind::BlockReinit { start, len } => Some((*start..start + len).collect()),
            PlanKind::BlockPreserve { start, len } => Some(
                (1..=layers)
                    .filter(|i| !(*start..start + len).contains(i))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Checks every structural guarantee of one surgery application.
    pub fn check(src: &Checkpoint, plan: &SurgeryPlan) -> Result<(), String> {
        let layers = src.config.num_layers;
        let (out, report) = apply(src, plan).map_err(|e| e.to_string())?;
        let same = |a: &Checkpoint, name: &str, b: &Checkpoint, other: &str| {
            a.params.get(name).unwrap().bit_eq(b.params.get(other).unwrap())
        };

        for name in EMBEDDING_PARAMS {
            if !same(&out, name, src, name) {
                return Err(format!("embedding {name} changed"));
            }
        }

        let mut covered: Vec<&str> = report.preserved.iter().map(String::as_str).collect();
        covered.extend(report.reinitialized.iter().map(String::as_str));
        covered.extend(report.moved.iter().map(|m| m.from.as_str()));
        covered.sort_unstable();
        let mut all: Vec<&str> = src.params.names().iter().map(String::as_str).collect();
        all.sort_unstable();
        if covered != all {
            return Err("report does not cover every parameter exactly once".into());
        }

        for name in &report.preserved {
            if !same(&out, name, src, name) {
                return Err(format!("preserved {name} changed"));
            }
        }

        match &plan.kind {
            PlanKind::Permute { permutation } => {
                for (i, &to) in permutation.iter().enumerate() {
                    for (suffix, _) in LAYER_PARAMS {
                        if !same(
                            &out,
                            &layer_param_name(to, suffix),
                            src,
                            &layer_param_name(i + 1, suffix),
                        ) {
                            return Err(format!("layer {} did not land at {to}", i + 1));
                        }
                    }
                }
                let back = SurgeryPlan::new(
                    PlanKind::Permute {
                        permutation: invert_permutation(permutation),
                    },
                    0,
                );
                let (round, _) = apply(&out, &back).map_err(|e| e.to_string())?;
                if !round.bit_eq(src) {
                    return Err("permutation round trip is not the identity".into());
                }
                if permutation.iter().enumerate().all(|(i, &p)| p == i + 1) && !out.bit_eq(src) {
                    return Err("identity permutation changed the checkpoint".into());
                }
            }
            kind => {
                let reinit: BTreeSet<usize> = plan.reinit_layers(layers).into_iter().collect();
                if let Some(expected) = layer_of_block(kind, layers) {
                    if reinit != expected {
                        return Err(format!("block partition {reinit:?} != {expected:?}"));
                    }
                }
                if *kind == (PlanKind::Progressive { k: layers }) && !out.bit_eq(src) {
                    return Err("progressive k=L is not the identity".into());
                }
                for name in &report.reinitialized {
                    let t = out.params.get(name).unwrap();
                    let ok = if name.ends_with("ln.gamma") {
                        t.data().iter().all(|&x| x == 1.0)
                    } else if name.ends_with("ln.beta") || (plan.zero_biases && name.ends_with(".bias")) {
                        t.data().iter().all(|&x| x == 0.0)
                    } else {
                        t.data().iter().all(|&x| x > -0.04 && x < 0.04) && !same(&out, name, src, name)
                    };
                    if !ok {
                        return Err(format!("reinitialized {name} has unexpected values"));
                    }
                    let layer: usize = name.split('.').nth(1).unwrap().parse().unwrap();
                    if !reinit.contains(&layer) {
                        return Err(format!("{name} reinitialized outside {reinit:?}"));
                    }
                }
                for layer in &reinit {
                    for (suffix, _) in LAYER_PARAMS {
                        let name = layer_param_name(*layer, suffix);
                        let is_ln = suffix.contains("ln.");
                        if !(is_ln && plan.preserve_layer_norm) && !report.reinitialized.contains(&name) {
                            return Err(format!("{name} should have been reinitialized"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub mod store {
    use std::collections::BTreeMap;
    use std::fs;
    use std::path::{Path, PathBuf};

    use relab_core::model::{init_model, save_checkpoint, ModelConfig};

    /// Relative path → bytes for every file below `root`.
    pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
            let Ok(rd) = fs::read_dir(dir) else { return };
            for e in rd {
                let p = e.unwrap().path();
                if p.is_dir() {
                    walk(root, &p, out);
                } else {
                    out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(root, root, &mut out);
        out
    }

    pub fn small_config(layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            hidden_size: 8,
            num_heads: 2,
            intermediate_size: 16,
            ..ModelConfig::default()
        }
    }

    /// Saves a randomly initialized small checkpoint under `dir`.
    pub fn write_checkpoint(dir: &Path, layers: usize) -> PathBuf {
        let path = dir.join("ck.rlab");
        save_checkpoint(&init_model(&small_config(layers), 5).unwrap(), &path).unwrap();
        path
    }

    /// Manifest JSON for a fast grid over a pool of 60 examples.
    pub fn manifest_json(kind: &str, tasks: &[&str], checkpoint: &Path, extra: &str) -> String {
        let tasks: Vec<String> = tasks.iter().map(|t| format!("\"{t}\"")).collect();
        format!(
            r#"{{"schema_version": 1, "name": "small", "experiment": "{kind}",
                "tasks": [{}], "sizes": [20], "master_seed": 3,
                "checkpoint": {:?},
                "data": {{"pool_size": 60}},
                "hyper": {{"learning_rate": 0.001, "epochs": 1}}{extra}}}"#,
            tasks.join(", "),
            checkpoint
        )
    }
}
