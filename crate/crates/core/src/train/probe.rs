use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{LabeledExample, TaskDataset};
use crate::error::TrainError;
use crate::model::{encode, Checkpoint, PAD};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamSet;
use crate::seed::derive_rng;
use crate::tensor::Tensor;

use super::{
    argmax_label, evaluate, head_logits, init_head, EpochRecord, LearningRates, Regime, TrialRecord,
    TrialSeeds, HEAD_BIAS, HEAD_WEIGHT,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Mean-pooled hidden states of every layer for both splits, computed once
/// per (checkpoint, dataset) so all layers can be probed cheaply.
#[derive(Clone, Debug)]
pub struct ProbeFeatures {
    /// `train[k]` is `[n_train, hidden]` for layer `k` (0 = embeddings).
    pub train: Vec<Tensor<f32>>,
    pub validation: Vec<Tensor<f32>>,
    pub train_labels: Vec<u8>,
    pub validation_labels: Vec<u8>,
    pub encoder_checksum: String,
    task: crate::data::Task,
    data_seed: u64,
}

fn pooled_states(
    checkpoint: &Checkpoint,
    examples: &[LabeledExample],
) -> Result<Vec<Tensor<f32>>, TrainError> {
    let hidden = checkpoint.config.hidden_size;
    let layers = checkpoint.config.num_layers + 1;
    let per_example: Vec<Result<Vec<Vec<f32>>, TrainError>> = examples
        .par_iter()
        .map(|ex| {
            let out = encode(checkpoint, &ex.tokens, &ex.types)?;
            let rows: Vec<usize> = (0..ex.tokens.len()).filter(|&i| ex.tokens[i] != PAD).collect();
            Ok(out
                .hidden_states
                .iter()
                .map(|h| {
                    let mut acc = vec![0f32; hidden];
                    for &r in &rows {
                        for (a, &v) in acc.iter_mut().zip(h.row(r)) {
                            *a += v;
                        }
                    }
                    let n = rows.len() as f32;
                    acc.iter_mut().for_each(|a| *a /= n);
                    acc
                })
                .collect())
        })
        .collect();
    let mut mats = vec![Vec::with_capacity(examples.len() * hidden); layers];
    for ex in per_example {
        for (k, v) in ex?.into_iter().enumerate() {
            mats[k].extend_from_slice(&v);
        }
    }
    Ok(mats
        .into_iter()
        .map(|d| Tensor::new(vec![examples.len(), hidden], d).expect("rows × hidden"))
        .collect())
}

impl ProbeFeatures {
    pub fn compute(checkpoint: &Checkpoint, dataset: &TaskDataset) -> Result<Self, TrainError> {
        if dataset.train.is_empty() || dataset.validation.is_empty() {
            return Err(TrainError::Empty);
        }
        Ok(Self {
            train: pooled_states(checkpoint, &dataset.train)?,
            validation: pooled_states(checkpoint, &dataset.validation)?,
            train_labels: dataset.train.iter().map(|e| e.label).collect(),
            validation_labels: dataset.validation.iter().map(|e| e.label).collect(),
            encoder_checksum: checkpoint.checksum(),
            task: dataset.task,
            data_seed: dataset.seed,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.train.len() - 1
    }

    fn rows(features: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
        let h = features.cols();
        let mut data = Vec::with_capacity(idx.len() * h);
        for &i in idx {
            data.extend_from_slice(features.row(i));
        }
        Tensor::new(vec![idx.len(), h], data).expect("rows × hidden")
    }

    fn predict(head: &ParamSet<f32>, features: &Tensor<f32>) -> Result<Vec<u8>, TrainError> {
        let idx: Vec<usize> = (0..features.rows()).collect();
        let mut tape = Tape::new(head);
        let x = tape.constant(Self::rows(features, &idx));
        let logits = head_logits(&mut tape, x, (0, 1))?;
        let lv = tape.value(logits);
        Ok((0..lv.rows())
            .map(|r| argmax_label(&Tensor::from_vec(lv.row(r).to_vec())))
            .collect())
    }

    /// Trains a linear head on layer `layer`'s cached features.
    pub fn train_head(&self, layer: usize, hyper: &ProbeHyper) -> Result<TrialRecord, TrainError> {
        let started = Instant::now();
        if layer > self.num_layers() {
            return Err(TrainError::InvalidLayer {
                k: layer,
                layers: self.num_layers(),
            });
        }
        if hyper.epochs == 0
            || hyper.batch_size == 0
            || hyper.learning_rate.is_nan()
            || hyper.learning_rate <= 0.0
        {
            return Err(TrainError::Hyper(format!("{hyper:?}")));
        }
        let feats = &self.train[layer];
        let hidden = feats.cols();
        let mut head = ParamSet::new();
        let (w, b) = init_head(hidden, &mut derive_rng(hyper.seed, &["probe-head"]));
        head.insert(HEAD_WEIGHT, w);
        head.insert(HEAD_BIAS, b);
        let mut adam = AdamState::new(&head);
        let mut order: Vec<usize> = (0..feats.rows()).collect();
        let mut epochs = Vec::with_capacity(hyper.epochs);

        for epoch in 0..hyper.epochs {
            order.shuffle(&mut derive_rng(hyper.seed, &["probe-epoch", &epoch.to_string()]));
            let mut loss_sum = 0.0;
            for chunk in order.chunks(hyper.batch_size) {
                let labels: Vec<usize> = chunk.iter().map(|&i| self.train_labels[i] as usize).collect();
                let mut tape = Tape::new(&head);
                let x = tape.constant(Self::rows(feats, chunk));
                let logits = head_logits(&mut tape, x, (0, 1))?;
                let loss = tape.cross_entropy(logits, &labels)?;
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: "loss",
                        step: adam.step as usize,
                        detail: format!("probe loss {value} at layer {layer}"),
                    });
                }
                loss_sum += value * chunk.len() as f64;
                let grads = tape.backward(loss)?;
                drop(tape);
                adam_step(&mut head, &grads, &mut adam, |_| hyper.learning_rate)?;
            }
            let preds = Self::predict(&head, &self.validation[layer])?;
            let m = evaluate(&preds, &self.validation_labels)?;
            epochs.push(EpochRecord {
                epoch,
                train_loss: loss_sum / feats.rows() as f64,
                validation_accuracy: m.accuracy,
                validation_matthews: m.matthews,
            });
        }
        let last = epochs.last().expect("at least one epoch");
        Ok(TrialRecord {
            cell: String::new(),
            task: self.task,
            size: feats.rows(),
            plan: None,
            trial_index: 0,
            regime: Regime::Probe { layer },
            final_accuracy: last.validation_accuracy,
            final_matthews: last.validation_matthews,
            epochs,
            learning_rates: LearningRates {
                preserved: 0.0,
                reinitialized: 0.0,
                head: hyper.learning_rate,
            },
            seeds: TrialSeeds {
                data: self.data_seed,
                train: hyper.seed,
            },
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Probes every layer in `layers` against one frozen encoder.
///
/// # Panics
/// If the encoder checksum differs after training, which would mean the
/// frozen contract was broken.
pub fn probe_layers(
    checkpoint: &Checkpoint,
    layers: &[usize],
    dataset: &TaskDataset,
    hyper: &ProbeHyper,
) -> Result<Vec<TrialRecord>, TrainError> {
    let features = ProbeFeatures::compute(checkpoint, dataset)?;
    let records = layers
        .iter()
        .map(|&k| features.train_head(k, hyper))
        .collect::<Result<Vec<_>, _>>()?;
    assert_eq!(
        checkpoint.checksum(),
        features.encoder_checksum,
        "encoder changed during probing"
    );
    Ok(records)
}

pub fn probe(
    checkpoint: &Checkpoint,
    layer: usize,
    dataset: &TaskDataset,
    hyper: &ProbeHyper,
) -> Result<TrialRecord, TrainError> {
    if layer > checkpoint.config.num_layers {
        return Err(TrainError::InvalidLayer {
            k: layer,
            layers: checkpoint.config.num_layers,
        });
    }
    Ok(probe_layers(checkpoint, &[layer], dataset, hyper)?.remove(0))
}
