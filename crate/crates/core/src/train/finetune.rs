use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{LabeledExample, TaskDataset};
use crate::error::{TensorError, TrainError};
use crate::model::{encode_on_tape, mean_pool, validate_input, Checkpoint, ModelConfig, ParamLayout};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamSet;
use crate::seed::derive_rng;
use crate::surgery::SurgeryReport;

use super::{
    argmax_label, batch_gradients, evaluate, head_logits, init_head, EpochRecord, LearningRates, Regime,
    TrialRecord, TrialSeeds, HEAD_BIAS, HEAD_WEIGHT,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fixed epoch count; `None` means 3, or 5 when the training set has exactly 500 examples.
    pub epochs: Option<usize>,
    pub reinit_lr_multiplier: f64,
    pub seed: u64,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 2e-5,
            epochs: None,
            reinit_lr_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneHyper {
    pub fn epochs_for(&self, train_size: usize) -> usize {
        self.epochs.unwrap_or(if train_size == 500 { 5 } else { 3 })
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0
            || self.epochs == Some(0)
            || self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.reinit_lr_multiplier.is_nan()
            || self.reinit_lr_multiplier <= 0.0
        {
            return Err(TrainError::Hyper(format!("{self:?}")));
        }
        Ok(())
    }
}

pub(crate) struct Classifier {
    pub layout: ParamLayout,
    pub head: (usize, usize),
}

impl Classifier {
    pub fn resolve(params: &ParamSet<f32>, config: &ModelConfig) -> Result<Self, TensorError> {
        Ok(Self {
            layout: ParamLayout::resolve(params, config)?,
            head: (params.require(HEAD_WEIGHT)?, params.require(HEAD_BIAS)?),
        })
    }

    fn logits<'p>(
        &self,
        tape: &mut Tape<'p, f32>,
        config: &ModelConfig,
        ex: &LabeledExample,
    ) -> Result<crate::autodiff::Var, TensorError> {
        let enc = encode_on_tape(tape, &self.layout, config, &ex.tokens, &ex.types)?;
        let last = *enc.hidden.last().expect("at least the embedding state");
        let pooled = mean_pool(tape, last, &ex.tokens)?;
        head_logits(tape, pooled, self.head)
    }
}

/// Arg-max predictions of an encoder-plus-head parameter set.
pub fn predict(
    params: &ParamSet<f32>,
    config: &ModelConfig,
    examples: &[LabeledExample],
) -> Result<Vec<u8>, TrainError> {
    let clf = Classifier::resolve(params, config)?;
    examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(params);
            let logits = clf.logits(&mut tape, config, ex)?;
            Ok(argmax_label(tape.value(logits)))
        })
        .collect()
}

fn check_examples(config: &ModelConfig, examples: &[LabeledExample]) -> Result<(), TrainError> {
    for ex in examples {
        validate_input(config, &ex.tokens, &ex.types)?;
        if ex.label > 1 {
            return Err(TrainError::Hyper(format!("non-binary label {}", ex.label)));
        }
    }
    Ok(())
}

/// Trains a fresh mean-pool classification head together with every encoder
/// parameter. Parameters listed as reinitialized in `report` use the base
/// learning rate times `reinit_lr_multiplier`.
pub fn finetune(
    checkpoint: &Checkpoint,
    report: &SurgeryReport,
    dataset: &TaskDataset,
    hyper: &FinetuneHyper,
) -> Result<TrialRecord, TrainError> {
    finetune_with_params(checkpoint, report, dataset, hyper).map(|(record, _)| record)
}

/// [`finetune`], also returning the trained encoder-plus-head parameters.
pub fn finetune_with_params(
    checkpoint: &Checkpoint,
    report: &SurgeryReport,
    dataset: &TaskDataset,
    hyper: &FinetuneHyper,
) -> Result<(TrialRecord, ParamSet<f32>), TrainError> {
    let started = Instant::now();
    hyper.validate()?;
    let config = &checkpoint.config;
    if dataset.train.is_empty() || dataset.validation.is_empty() {
        return Err(TrainError::Empty);
    }
    check_examples(config, &dataset.train)?;
    check_examples(config, &dataset.validation)?;

    let mut params = checkpoint.params.clone();
    let (w, b) = init_head(config.hidden_size, &mut derive_rng(hyper.seed, &["head"]));
    params.insert(HEAD_WEIGHT, w);
    params.insert(HEAD_BIAS, b);
    let clf = Classifier::resolve(&params, config)?;

    let rates = LearningRates {
        preserved: hyper.learning_rate,
        reinitialized: hyper.learning_rate * hyper.reinit_lr_multiplier,
        head: hyper.learning_rate,
    };
    let lr: Vec<f64> = params
        .names()
        .iter()
        .map(|n| {
            if report.is_reinitialized(n) {
                rates.reinitialized
            } else {
                rates.preserved
            }
        })
        .collect();

    let mut adam = AdamState::new(&params);
    let labels: Vec<u8> = dataset.validation.iter().map(|e| e.label).collect();
    let num_epochs = hyper.epochs_for(dataset.train.len());
    let mut epochs = Vec::with_capacity(num_epochs);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 0..num_epochs {
        order.shuffle(&mut derive_rng(hyper.seed, &["epoch", &epoch.to_string()]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let scale = 1.0 / chunk.len() as f32;
            let (loss, grads) = batch_gradients(&params, chunk, |&i| {
                let ex = &dataset.train[i];
                let mut tape = Tape::new(&params);
                let logits = clf.logits(&mut tape, config, ex)?;
                let ce = tape.cross_entropy(logits, &[ex.label as usize])?;
                let share = tape.scale(ce, scale);
                let value = tape.value(ce).item() as f64;
                Ok((value, tape.backward(share)?))
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss",
                    step: adam.step as usize,
                    detail: format!("finetuning loss {loss} in epoch {epoch}"),
                });
            }
            loss_sum += loss;
            adam_step(&mut params, &grads, &mut adam, |i| lr[i])?;
        }
        let preds = predict(&params, config, &dataset.validation)?;
        let m = evaluate(&preds, &labels)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / dataset.train.len() as f64,
            validation_accuracy: m.accuracy,
            validation_matthews: m.matthews,
        });
    }

    let last = epochs.last().expect("at least one epoch");
    let record = TrialRecord {
        cell: String::new(),
        task: dataset.task,
        size: dataset.train.len(),
        plan: None,
        trial_index: 0,
        regime: Regime::Finetune,
        final_accuracy: last.validation_accuracy,
        final_matthews: last.validation_matthews,
        epochs,
        learning_rates: rates,
        seeds: TrialSeeds {
            data: dataset.seed,
            train: hyper.seed,
        },
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((record, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_rule() {
        let h = FinetuneHyper::default();
        assert_eq!(h.epochs_for(500), 5);
        assert_eq!(h.epochs_for(5000), 3);
        assert_eq!(h.epochs_for(499), 3);
        let fixed = FinetuneHyper { epochs: Some(2), ..h };
        assert_eq!(fixed.epochs_for(500), 2);
    }
}
