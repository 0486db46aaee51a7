use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::CorpusSequence;
use crate::error::{TensorError, TrainError};
use crate::model::{
    encode_on_tape, init_model, validate_input, Checkpoint, ModelConfig, ParamLayout, MASK, NUM_SPECIAL,
};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamSet;
use crate::seed::{derive_rng, Rng};
use crate::tensor::Tensor;

use super::batch_gradients;

/// Output bias of the masked-LM decoder; the decoder weight is tied to the
/// token embedding table. The head is discarded after pretraining.
pub const MLM_BIAS: &str = "mlm.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            mask_prob: 0.15,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub checkpoint: Checkpoint,
    pub mlm_bias: Tensor<f32>,
    /// Mean masked-token loss per step.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedInput {
    pub tokens: Vec<u32>,
    pub types: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Selects each non-special position with probability `prob`; a selected
/// token becomes `[MASK]` 80% of the time, a uniformly random regular token
/// 10% of the time, and stays unchanged otherwise.
pub fn mask_tokens(
    tokens: &[u32],
    types: &[u32],
    vocab_size: usize,
    prob: f64,
    rng: &mut Rng,
) -> MaskedInput {
    let mut out = tokens.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        if t < NUM_SPECIAL || !rng.random_bool(prob) {
            continue;
        }
        positions.push(i);
        targets.push(t as usize);
        let r: f64 = rng.random();
        if r < 0.8 {
            out[i] = MASK;
        } else if r < 0.9 {
            out[i] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    MaskedInput {
        tokens: out,
        types: types.to_vec(),
        positions,
        targets,
    }
}

struct MlmSlots {
    layout: ParamLayout,
    token: usize,
    bias: usize,
}

fn mlm_logits(
    tape: &mut Tape<'_, f32>,
    slots: &MlmSlots,
    config: &ModelConfig,
    input: &MaskedInput,
) -> Result<Var, TensorError> {
    let enc = encode_on_tape(tape, &slots.layout, config, &input.tokens, &input.types)?;
    let last = *enc.hidden.last().expect("at least the embedding state");
    let picked = tape.gather_rows(last, &input.positions)?;
    let table = tape.param_at(slots.token);
    let bias = tape.param_at(slots.bias);
    let logits = tape.matmul_nt(picked, table)?;
    tape.add(logits, bias)
}

fn with_head(checkpoint: &Checkpoint, bias: Tensor<f32>) -> Result<(ParamSet<f32>, MlmSlots), TensorError> {
    let mut params = checkpoint.params.clone();
    let bias = params.insert(MLM_BIAS, bias);
    let layout = ParamLayout::resolve(&params, &checkpoint.config)?;
    let token = params.require("embed.token")?;
    Ok((params, MlmSlots { layout, token, bias }))
}

fn check_corpus(config: &ModelConfig, corpus: &[CorpusSequence]) -> Result<(), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::Empty);
    }
    for seq in corpus {
        let (tokens, types) = seq.to_input();
        validate_input(config, &tokens, &types)?;
    }
    Ok(())
}

/// Masked-LM pretraining from `init_model(config, seed)`. With `steps == 0`
/// the initial checkpoint is returned unchanged.
pub fn pretrain_mlm(
    config: &ModelConfig,
    corpus: &[CorpusSequence],
    hyper: &PretrainHyper,
    seed: u64,
) -> Result<Pretrained, TrainError> {
    if hyper.batch_size == 0 || !(0.0..1.0).contains(&hyper.mask_prob) || hyper.learning_rate <= 0.0 {
        return Err(TrainError::Hyper(format!("{hyper:?}")));
    }
    let init = init_model(config, seed)?;
    let bias = Tensor::zeros(&[config.vocab_size]);
    if hyper.steps == 0 {
        return Ok(Pretrained {
            checkpoint: init,
            mlm_bias: bias,
            losses: Vec::new(),
        });
    }
    check_corpus(config, corpus)?;
    let inputs: Vec<(Vec<u32>, Vec<u32>)> = corpus.iter().map(|s| s.to_input()).collect();

    let (mut params, slots) = with_head(&init, bias)?;
    let mut adam = AdamState::new(&params);
    let mut rng = derive_rng(seed, &["mlm"]);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        while batch.len() < hyper.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (tokens, types) = &inputs[order[cursor]];
            cursor += 1;
            let m = mask_tokens(tokens, types, config.vocab_size, hyper.mask_prob, &mut rng);
            if !m.positions.is_empty() {
                batch.push(m);
            }
        }
        let total: usize = batch.iter().map(|m| m.positions.len()).sum();
        let weight = 1.0 / total as f32;
        let (loss, grads) = batch_gradients(&params, &batch, |m| {
            let mut tape = Tape::new(&params);
            let logits = mlm_logits(&mut tape, &slots, config, m)?;
            let ce = tape.cross_entropy(logits, &m.targets)?;
            let share = tape.scale(ce, m.positions.len() as f32 * weight);
            let value = tape.value(share).item() as f64;
            Ok((value, tape.backward(share)?))
        })?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "loss",
                step,
                detail: format!("masked-LM loss {loss}"),
            });
        }
        adam_step(&mut params, &grads, &mut adam, |_| hyper.learning_rate)?;
        losses.push(loss);
    }

    let mlm_bias = params.at(slots.bias).clone();
    let encoder = params.filtered(|n| n != MLM_BIAS);
    let checkpoint = Checkpoint::new(config.clone(), encoder).expect("canonical parameters");
    Ok(Pretrained {
        checkpoint,
        mlm_bias,
        losses,
    })
}

/// Fraction of masked positions whose original token is the arg-max prediction.
pub fn mlm_accuracy(
    pretrained: &Pretrained,
    corpus: &[CorpusSequence],
    mask_prob: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    let config = &pretrained.checkpoint.config;
    check_corpus(config, corpus)?;
    let (params, slots) = with_head(&pretrained.checkpoint, pretrained.mlm_bias.clone())?;
    let mut rng = derive_rng(seed, &["mlm-eval"]);
    let masked: Vec<MaskedInput> = corpus
        .iter()
        .map(|s| {
            let (t, ty) = s.to_input();
            mask_tokens(&t, &ty, config.vocab_size, mask_prob, &mut rng)
        })
        .filter(|m| !m.positions.is_empty())
        .collect();
    let counts: Vec<Result<(usize, usize), TrainError>> = masked
        .par_iter()
        .map(|m| {
            let mut tape = Tape::new(&params);
            let logits = mlm_logits(&mut tape, &slots, config, m)?;
            let lv = tape.value(logits);
            let hits = m
                .targets
                .iter()
                .enumerate()
                .filter(|&(r, &t)| {
                    let row = lv.row(r);
                    let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    best == t
                })
                .count();
            Ok((hits, m.targets.len()))
        })
        .collect();
    let (mut hits, mut total) = (0, 0);
    for c in counts {
        let (h, t) = c?;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(TrainError::Empty);
    }
    Ok(hits as f64 / total as f64)
}

/// Accuracy on `heldout` of always predicting the most frequent regular token
/// of `train`.
pub fn unigram_baseline(train: &[CorpusSequence], heldout: &[CorpusSequence]) -> f64 {
    let regular = |c: &[CorpusSequence]| -> Vec<u32> {
        c.iter()
            .flat_map(|s| s.segments.iter().flatten().copied())
            .collect()
    };
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    for t in regular(train) {
        *counts.entry(t).or_default() += 1;
    }
    let Some((&top, _)) = counts.iter().max_by_key(|&(t, c)| (*c, std::cmp::Reverse(*t))) else {
        return 0.0;
    };
    let held = regular(heldout);
    if held.is_empty() {
        return 0.0;
    }
    held.iter().filter(|&&t| t == top).count() as f64 / held.len() as f64
}
