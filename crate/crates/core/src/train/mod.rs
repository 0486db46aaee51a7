//! The three training regimes: masked-LM pretraining, classification
//! finetuning and frozen-encoder probing, plus evaluation metrics and the
//! per-trial record they produce.

mod finetune;
mod mlm;
mod probe;

pub use finetune::{finetune, finetune_with_params, predict, FinetuneHyper};
pub use mlm::{
    mask_tokens, mlm_accuracy, pretrain_mlm, unigram_baseline, MaskedInput, PretrainHyper, Pretrained,
    MLM_BIAS,
};
pub use probe::{probe, probe_layers, ProbeFeatures, ProbeHyper};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::Task;
use crate::error::{TensorError, TrainError};
use crate::params::ParamSet;
use crate::seed::Rng;
use crate::surgery::{sample_truncated_normal, ReinitDistribution};
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
pub const NUM_LABELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub matthews: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_predictions(predictions: &[u8], labels: &[u8]) -> Result<Self, TrainError> {
        if predictions.len() != labels.len() {
            return Err(TrainError::LengthMismatch {
                predictions: predictions.len(),
                labels: labels.len(),
            });
        }
        if predictions.is_empty() {
            return Err(TrainError::Empty);
        }
        let mut c = Self::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == 1, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.tn + self.fn_;
        (self.tp + self.tn) as f64 / total as f64
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn matthews(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            return 0.0;
        }
        (tp * tn - fp * fn_) / denom.sqrt()
    }
}

pub fn evaluate(predictions: &[u8], labels: &[u8]) -> Result<Metrics, TrainError> {
    let c = Confusion::from_predictions(predictions, labels)?;
    Ok(Metrics {
        accuracy: c.accuracy(),
        matthews: c.matthews(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
    pub validation_matthews: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub preserved: f64,
    pub reinitialized: f64,
    pub head: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    /// Seed of the training subset (the subsample seed, or the generation seed).
    pub data: u64,
    /// Seed of head initialization and per-epoch shuffling.
    pub train: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Finetune,
    Probe { layer: usize },
}

/// Result of one finetuning or probing trial.
///
/// `cell`, `plan` and `trial_index` are filled in by whoever schedules the
/// trial; the training functions leave them empty. Wall-clock time is kept out
/// of the serialized form so identical trials produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub cell: String,
    pub task: Task,
    pub size: usize,
    pub plan: Option<String>,
    pub trial_index: usize,
    pub regime: Regime,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub final_matthews: f64,
    pub learning_rates: LearningRates,
    pub seeds: TrialSeeds,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrialRecord {
    /// Headline metric for the task: Matthews correlation for acceptability,
    /// accuracy otherwise.
    pub fn metric(&self) -> f64 {
        match self.task {
            Task::ToyAccept => self.final_matthews,
            _ => self.final_accuracy,
        }
    }
}

/// Fresh classification head: truncated-normal weight, zero bias.
pub fn init_head(hidden: usize, rng: &mut Rng) -> (Tensor<f32>, Tensor<f32>) {
    let w = sample_truncated_normal(&ReinitDistribution::default(), &[hidden, NUM_LABELS], rng);
    (w, Tensor::zeros(&[NUM_LABELS]))
}

pub(crate) fn head_logits(
    tape: &mut Tape<'_, f32>,
    pooled: Var,
    (w, b): (usize, usize),
) -> Result<Var, TensorError> {
    let w = tape.param_at(w);
    let b = tape.param_at(b);
    let y = tape.matmul(pooled, w)?;
    tape.add(y, b)
}

pub(crate) fn argmax_label(logits: &Tensor<f32>) -> u8 {
    let d = logits.data();
    (d[1] > d[0]) as u8
}

/// Computes `(loss, gradients)` for every item in parallel and sums them in
/// item order, so the result does not depend on the thread count.
pub(crate) fn batch_gradients<T, G>(
    params: &ParamSet<f32>,
    items: &[T],
    per_item: G,
) -> Result<(f64, Gradients<f32>), TrainError>
where
    T: Sync,
    G: Fn(&T) -> Result<(f64, Gradients<f32>), TrainError> + Sync,
{
    let parts: Vec<Result<(f64, Gradients<f32>), TrainError>> = items.par_iter().map(&per_item).collect();
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.accumulate(&g);
    }
    Ok((loss, total))
}
