//! Synthetic language and the three binary downstream tasks.
//!
//! * `toy-sent`: label is the majority effective polarity of the polarity
//!   tokens in one chain; a negator flips the token right after it.
//! * `toy-pair`: `[CLS] A [SEP] B [SEP]`; label 1 iff B continues A's chain
//!   under A's topic (negatives continue under a different topic).
//! * `toy-accept`: label 1 iff the chain is unperturbed; negatives have two
//!   adjacent-token swaps and are ungrammatical under every topic.

mod grammar;

pub use grammar::{gen_pretrain_corpus, CorpusSequence, GrammarParams, GrammarSpec, TokenClass};

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::model::{PAD, SEP};
use crate::seed::{derive_rng, derive_seed, Rng};
use grammar::assemble;

pub const VALIDATION_SIZE: usize = 1000;
pub const MIN_TASK_SIZE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "toy-sent")]
    ToySent,
    #[serde(rename = "toy-pair")]
    ToyPair,
    #[serde(rename = "toy-accept")]
    ToyAccept,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::ToySent, Task::ToyPair, Task::ToyAccept];

    pub fn key(self) -> &'static str {
        match self {
            Task::ToySent => "toy-sent",
            Task::ToyPair => "toy-pair",
            Task::ToyAccept => "toy-accept",
        }
    }

    /// Headline metric name: Matthews correlation for acceptability, accuracy otherwise.
    pub fn metric(self) -> &'static str {
        match self {
            Task::ToyAccept => "matthews",
            _ => "accuracy",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key().to_uppercase())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "toy-sent" => Ok(Task::ToySent),
            "toy-pair" => Ok(Task::ToyPair),
            "toy-accept" => Ok(Task::ToyAccept),
            _ => Err(DataError::UnknownTask(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<u32>,
    pub types: Vec<u32>,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub seed: u64,
}

impl TaskDataset {
    pub fn label_balance(examples: &[LabeledExample]) -> f64 {
        let pos = examples.iter().filter(|e| e.label == 1).count();
        pos as f64 / examples.len().max(1) as f64
    }
}

/// Effective polarity score: +1 per positive, −1 per negative, sign flipped
/// when the preceding token is a negator.
pub fn polarity_score(grammar: &GrammarSpec, chain: &[u32]) -> i32 {
    let mut score = 0;
    for (i, &tok) in chain.iter().enumerate() {
        let base = match grammar.class_of(tok) {
            Some(TokenClass::Positive) => 1,
            Some(TokenClass::Negative) => -1,
            _ => continue,
        };
        let negated = i > 0 && matches!(grammar.class_of(chain[i - 1]), Some(TokenClass::Negator));
        score += if negated { -base } else { base };
    }
    score
}

/// Majority effective polarity, or `None` on a tie.
pub fn sentiment_label(grammar: &GrammarSpec, chain: &[u32]) -> Option<u8> {
    match polarity_score(grammar, chain) {
        0 => None,
        s if s > 0 => Some(1),
        _ => Some(0),
    }
}

fn single(chain: &[u32], label: u8) -> LabeledExample {
    let (tokens, types) = assemble(&[chain.to_vec()]);
    LabeledExample { tokens, types, label }
}

fn pair(a: &[u32], b: &[u32], label: u8) -> LabeledExample {
    let (tokens, types) = assemble(&[a.to_vec(), b.to_vec()]);
    LabeledExample { tokens, types, label }
}

/// Two random adjacent swaps, retried until the result is ungrammatical under
/// every topic.
fn perturb(grammar: &GrammarSpec, chain: &[u32], rng: &mut Rng) -> Option<Vec<u32>> {
    if chain.len() < 2 {
        return None;
    }
    for _ in 0..32 {
        let mut c = chain.to_vec();
        for _ in 0..2 {
            let i = rng.random_range(0..c.len() - 1);
            c.swap(i, i + 1);
        }
        if !grammar.is_grammatical(&c) {
            return Some(c);
        }
    }
    None
}

fn balanced_labels(n: usize, rng: &mut Rng) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(rng);
    labels
}

fn gen_examples(
    task: Task,
    grammar: &GrammarSpec,
    n: usize,
    rng: &mut Rng,
    exclude: &HashSet<Vec<u32>>,
) -> Vec<LabeledExample> {
    let topics = grammar.num_topics();
    let labels = balanced_labels(n, rng);
    let mut out = Vec::with_capacity(n);
    for &label in &labels {
        loop {
            let topic = rng.random_range(0..topics);
            let ex = match task {
                Task::ToySent => {
                    let len = grammar.sample_len(grammar.params.single_len, rng);
                    let chain = grammar.sample_chain(topic, len, rng);
                    match sentiment_label(grammar, &chain) {
                        Some(l) if l == label => single(&chain, l),
                        _ => continue,
                    }
                }
                Task::ToyPair => {
                    let la = grammar.sample_len(grammar.params.segment_len, rng);
                    let lb = grammar.sample_len(grammar.params.segment_len, rng);
                    let a = grammar.sample_chain(topic, la, rng);
                    let b_topic = if label == 1 {
                        topic
                    } else {
                        (topic + rng.random_range(1..topics)) % topics
                    };
                    let b = grammar.continue_chain(b_topic, *a.last().unwrap(), lb, rng);
                    pair(&a, &b, label)
                }
                Task::ToyAccept => {
                    let len = grammar.sample_len(grammar.params.single_len, rng);
                    let chain = grammar.sample_chain(topic, len, rng);
                    if label == 1 {
                        single(&chain, 1)
                    } else {
                        match perturb(grammar, &chain, rng) {
                            Some(bad) => single(&bad, 0),
                            None => continue,
                        }
                    }
                }
            };
            if !exclude.contains(&ex.tokens) {
                out.push(ex);
                break;
            }
        }
    }
    out
}

/// Generates `n` training and [`VALIDATION_SIZE`] validation examples.
/// Validation token sequences never occur in the training split.
pub fn gen_task(task: Task, grammar: &GrammarSpec, n: usize, seed: u64) -> Result<TaskDataset, DataError> {
    if n < MIN_TASK_SIZE {
        return Err(DataError::TooSmall {
            n,
            min: MIN_TASK_SIZE,
        });
    }
    let mut rng = derive_rng(seed, &[task.key(), "train"]);
    let train = gen_examples(task, grammar, n, &mut rng, &HashSet::new());
    let seen: HashSet<Vec<u32>> = train.iter().map(|e| e.tokens.clone()).collect();
    let mut rng = derive_rng(seed, &[task.key(), "validation"]);
    let validation = gen_examples(task, grammar, VALIDATION_SIZE, &mut rng, &seen);
    Ok(TaskDataset {
        task,
        train,
        validation,
        seed,
    })
}

/// Uniform sample of `size` training examples without replacement, keyed by
/// `(master_seed, "subsample", task, size, trial_index)`. Validation is untouched.
pub fn subsample(
    dataset: &TaskDataset,
    size: usize,
    trial_index: usize,
    master_seed: u64,
) -> Result<TaskDataset, DataError> {
    if size > dataset.train.len() {
        return Err(DataError::SubsampleTooLarge {
            requested: size,
            available: dataset.train.len(),
        });
    }
    let seed = derive_seed(
        master_seed,
        &[
            "subsample",
            dataset.task.key(),
            &size.to_string(),
            &trial_index.to_string(),
        ],
    );
    let mut rng = crate::seed::rng_from_seed(seed);
    let mut idx = sample_indices(&mut rng, dataset.train.len(), size).into_vec();
    idx.sort_unstable();
    Ok(TaskDataset {
        task: dataset.task,
        train: idx.iter().map(|&i| dataset.train[i].clone()).collect(),
        validation: dataset.validation.clone(),
        seed,
    })
}

fn segments(example: &LabeledExample) -> Vec<&[u32]> {
    let body = &example.tokens[1..];
    body.split(|&t| t == SEP)
        .filter(|s| !s.is_empty() && s.iter().all(|&t| t != PAD))
        .collect()
}

/// Classifier derived from the generating grammar.
pub fn bayes_predict(task: Task, grammar: &GrammarSpec, example: &LabeledExample) -> u8 {
    let segs = segments(example);
    match task {
        Task::ToySent => sentiment_label(grammar, segs[0]).unwrap_or(1),
        Task::ToyAccept => grammar.is_grammatical(segs[0]) as u8,
        Task::ToyPair => {
            let (a, b) = (segs[0], segs[1]);
            let topics = grammar.num_topics();
            let prev = *a.last().unwrap();
            let post: Vec<f64> = (0..topics).map(|t| grammar.chain_log_prob(t, a).exp()).collect();
            let z: f64 = post.iter().sum();
            let cont: Vec<f64> = (0..topics)
                .map(|t| grammar.continuation_log_prob(t, prev, b).exp())
                .collect();
            let mut same = 0.0;
            let mut diff = 0.0;
            for t in 0..topics {
                let w = post[t] / z;
                same += w * cont[t];
                let others: f64 = (0..topics).filter(|&u| u != t).map(|u| cont[u]).sum();
                diff += w * others / (topics - 1) as f64;
            }
            (same >= diff) as u8
        }
    }
}

pub fn write_jsonl<W: Write>(examples: &[LabeledExample], mut out: W) -> std::io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
