//! Topic-conditioned first-order Markov grammar over the regular vocabulary.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::model::{CLS, NUM_SPECIAL, SEP};
use crate::seed::{rng_from_seed, Rng};

/// Sizes of the functional token classes and sequence-length ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarParams {
    pub num_topics: usize,
    pub regular_vocab: usize,
    pub positive: usize,
    pub negative: usize,
    pub negators: usize,
    /// Content successors per transition row.
    pub content_fanout: usize,
    /// Polarity successors per non-negator row.
    pub polarity_fanout: usize,
    pub polarity_mass: f64,
    pub negator_mass: f64,
    pub single_len: (usize, usize),
    pub segment_len: (usize, usize),
}

impl Default for GrammarParams {
    fn default() -> Self {
        Self {
            num_topics: 4,
            regular_vocab: 64,
            positive: 8,
            negative: 8,
            negators: 2,
            content_fanout: 4,
            polarity_fanout: 2,
            polarity_mass: 0.14,
            negator_mass: 0.06,
            single_len: (8, 16),
            segment_len: (5, 10),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    TopicMarker(usize),
    Positive,
    Negative,
    Negator,
    Content,
}

/// A concrete grammar: token classes plus per-topic start and transition
/// distributions over the regular (non-special) tokens.
#[derive(Clone, Debug)]
pub struct GrammarSpec {
    pub params: GrammarParams,
    pub seed: u64,
    pub topic_markers: Vec<u32>,
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
    pub negators: Vec<u32>,
    pub content: Vec<u32>,
    /// `start[topic][r]`, `r = token - NUM_SPECIAL`.
    pub start: Vec<Vec<f64>>,
    /// `transitions[topic][from][to]`, indexed like `start`.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

fn slot(token: u32) -> usize {
    (token - NUM_SPECIAL) as usize
}

fn token_at(slot: usize) -> u32 {
    slot as u32 + NUM_SPECIAL
}

fn categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_nonzero = i;
            if u < acc {
                return i;
            }
        }
    }
    last_nonzero
}

fn choose(pool: &[u32], k: usize, rng: &mut Rng) -> Vec<u32> {
    sample_indices(rng, pool.len(), k.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

impl GrammarSpec {
    pub fn generate(params: GrammarParams, seed: u64) -> Result<Self, DataError> {
        let p = &params;
        let classes = p.num_topics + p.positive + p.negative + p.negators;
        if p.num_topics < 2 || classes + p.content_fanout > p.regular_vocab {
            return Err(DataError::Grammar(format!(
                "{} regular tokens cannot hold {} class tokens plus content",
                p.regular_vocab, classes
            )));
        }
        if p.polarity_mass + p.negator_mass >= 1.0 || p.single_len.0 < 2 || p.segment_len.0 < 2 {
            return Err(DataError::Grammar("inconsistent masses or lengths".into()));
        }
        let mut next = NUM_SPECIAL;
        let mut take = |n: usize| {
            let v: Vec<u32> = (next..next + n as u32).collect();
            next += n as u32;
            v
        };
        let topic_markers = take(p.num_topics);
        let positive = take(p.positive);
        let negative = take(p.negative);
        let negators = take(p.negators);
        let content = take(p.regular_vocab - classes);
        let polarity: Vec<u32> = positive.iter().chain(&negative).copied().collect();

        let mut rng = rng_from_seed(seed);
        let v = p.regular_vocab;
        let mut start = Vec::with_capacity(p.num_topics);
        let mut transitions = Vec::with_capacity(p.num_topics);
        for &marker in &topic_markers {
            let mut s = vec![0.0; v];
            s[slot(marker)] = 0.5;
            let openers = choose(&content, 6, &mut rng);
            for &t in &openers {
                s[slot(t)] += 0.5 / openers.len() as f64;
            }
            start.push(s);

            let mut table = Vec::with_capacity(v);
            for from in 0..v {
                let mut row = vec![0.0; v];
                if negators.contains(&token_at(from)) {
                    let targets = choose(&polarity, 4, &mut rng);
                    let w: Vec<f64> = targets.iter().map(|_| rng.random_range(0.5..1.5)).collect();
                    let total: f64 = w.iter().sum();
                    for (t, w) in targets.iter().zip(&w) {
                        row[slot(*t)] += w / total;
                    }
                } else {
                    let content_mass = 1.0 - p.polarity_mass - p.negator_mass;
                    let targets = choose(&content, p.content_fanout, &mut rng);
                    let w: Vec<f64> = targets.iter().map(|_| rng.random_range(0.5..1.5)).collect();
                    let total: f64 = w.iter().sum();
                    for (t, w) in targets.iter().zip(&w) {
                        row[slot(*t)] += content_mass * w / total;
                    }
                    let pol = choose(&polarity, p.polarity_fanout, &mut rng);
                    for t in &pol {
                        row[slot(*t)] += p.polarity_mass / pol.len() as f64;
                    }
                    let neg = choose(&negators, 1, &mut rng);
                    row[slot(neg[0])] += p.negator_mass;
                }
                table.push(row);
            }
            transitions.push(table);
        }
        let g = Self {
            params,
            seed,
            topic_markers,
            positive,
            negative,
            negators,
            content,
            start,
            transitions,
        };
        g.check_rows()?;
        Ok(g)
    }

    fn check_rows(&self) -> Result<(), DataError> {
        for (t, table) in self.transitions.iter().enumerate() {
            let s: f64 = self.start[t].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(DataError::Grammar(format!("start row of topic {t} sums to {s}")));
            }
            for (r, row) in table.iter().enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(DataError::Grammar(format!(
                        "transition row {r} of topic {t} sums to {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_topics(&self) -> usize {
        self.params.num_topics
    }

    /// Total vocabulary including specials.
    pub fn vocab_size(&self) -> usize {
        self.params.regular_vocab + NUM_SPECIAL as usize
    }

    pub fn class_of(&self, token: u32) -> Option<TokenClass> {
        if let Some(t) = self.topic_markers.iter().position(|&m| m == token) {
            return Some(TokenClass::TopicMarker(t));
        }
        if self.positive.contains(&token) {
            Some(TokenClass::Positive)
        } else if self.negative.contains(&token) {
            Some(TokenClass::Negative)
        } else if self.negators.contains(&token) {
            Some(TokenClass::Negator)
        } else if self.content.contains(&token) {
            Some(TokenClass::Content)
        } else {
            None
        }
    }

    pub fn start_prob(&self, topic: usize, token: u32) -> f64 {
        if token < NUM_SPECIAL {
            return 0.0;
        }
        self.start[topic].get(slot(token)).copied().unwrap_or(0.0)
    }

    pub fn transition_prob(&self, topic: usize, from: u32, to: u32) -> f64 {
        if from < NUM_SPECIAL || to < NUM_SPECIAL {
            return 0.0;
        }
        self.transitions[topic]
            .get(slot(from))
            .and_then(|row| row.get(slot(to)))
            .copied()
            .unwrap_or(0.0)
    }

    /// Fresh chain under `topic` of exactly `len` tokens.
    pub fn sample_chain(&self, topic: usize, len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(token_at(categorical(&self.start[topic], rng)));
        out.extend(self.continue_chain(topic, out[0], len - 1, rng));
        out
    }

    /// `len` tokens continuing a chain whose last token was `prev`.
    pub fn continue_chain(&self, topic: usize, prev: u32, len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = prev;
        for _ in 0..len {
            cur = token_at(categorical(&self.transitions[topic][slot(cur)], rng));
            out.push(cur);
        }
        out
    }

    pub fn chain_log_prob(&self, topic: usize, tokens: &[u32]) -> f64 {
        let Some(&first) = tokens.first() else { return 0.0 };
        let mut lp = self.start_prob(topic, first).ln();
        for w in tokens.windows(2) {
            lp += self.transition_prob(topic, w[0], w[1]).ln();
        }
        lp
    }

    pub fn continuation_log_prob(&self, topic: usize, prev: u32, tokens: &[u32]) -> f64 {
        let mut lp = 0.0;
        let mut cur = prev;
        for &t in tokens {
            lp += self.transition_prob(topic, cur, t).ln();
            cur = t;
        }
        lp
    }

    /// Whether some topic gives the chain nonzero probability.
    pub fn is_grammatical(&self, tokens: &[u32]) -> bool {
        (0..self.num_topics()).any(|t| self.chain_log_prob(t, tokens) > f64::NEG_INFINITY)
    }

    pub fn sample_len(&self, (lo, hi): (usize, usize), rng: &mut Rng) -> usize {
        rng.random_range(lo..=hi)
    }
}

/// One pretraining sequence: a single segment or a same-topic pair whose
/// second segment continues the first chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSequence {
    pub topic: usize,
    pub segments: Vec<Vec<u32>>,
}

impl CorpusSequence {
    /// `[CLS] A [SEP] (B [SEP])` with segment ids.
    pub fn to_input(&self) -> (Vec<u32>, Vec<u32>) {
        assemble(&self.segments)
    }
}

pub(crate) fn assemble(segments: &[Vec<u32>]) -> (Vec<u32>, Vec<u32>) {
    let mut tokens = vec![CLS];
    let mut types = vec![0];
    for (i, seg) in segments.iter().enumerate() {
        tokens.extend_from_slice(seg);
        tokens.push(SEP);
        types.extend(std::iter::repeat_n(i as u32, seg.len() + 1));
    }
    (tokens, types)
}

/// Deterministic pretraining corpus; half single segments, half pairs.
pub fn gen_pretrain_corpus(grammar: &GrammarSpec, num_sequences: usize, seed: u64) -> Vec<CorpusSequence> {
    let mut rng = rng_from_seed(seed);
    (0..num_sequences)
        .map(|_| {
            let topic = rng.random_range(0..grammar.num_topics());
            if rng.random_bool(0.5) {
                let len = grammar.sample_len(grammar.params.single_len, &mut rng);
                CorpusSequence {
                    topic,
                    segments: vec![grammar.sample_chain(topic, len, &mut rng)],
                }
            } else {
                let la = grammar.sample_len(grammar.params.segment_len, &mut rng);
                let lb = grammar.sample_len(grammar.params.segment_len, &mut rng);
                let a = grammar.sample_chain(topic, la, &mut rng);
                let b = grammar.continue_chain(topic, *a.last().unwrap(), lb, &mut rng);
                CorpusSequence {
                    topic,
                    segments: vec![a, b],
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grammar() -> GrammarSpec {
        GrammarSpec::generate(GrammarParams::default(), 5).unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let g = grammar();
        for t in 0..g.num_topics() {
            assert!((g.start[t].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for row in &g.transitions[t] {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn negators_always_precede_polarity() {
        let g = grammar();
        for t in 0..g.num_topics() {
            for &n in &g.negators {
                for to in NUM_SPECIAL..g.vocab_size() as u32 {
                    if g.transition_prob(t, n, to) > 0.0 {
                        assert!(matches!(
                            g.class_of(to),
                            Some(TokenClass::Positive | TokenClass::Negative)
                        ));
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let g = grammar();
        let a = gen_pretrain_corpus(&g, 200, 9);
        assert_eq!(a, gen_pretrain_corpus(&g, 200, 9));
        assert_ne!(a, gen_pretrain_corpus(&g, 200, 10));
        for s in &a {
            for seg in &s.segments {
                for &tok in seg {
                    assert!(tok >= NUM_SPECIAL && (tok as usize) < g.vocab_size());
                }
            }
            let all: Vec<u32> = s.segments.concat();
            assert!(g.chain_log_prob(s.topic, &all).is_finite());
        }
    }

    #[test]
    fn assemble_marks_segments() {
        let (tokens, types) = assemble(&[vec![10, 11], vec![12]]);
        assert_eq!(tokens, vec![CLS, 10, 11, SEP, 12, SEP]);
        assert_eq!(types, vec![0, 0, 0, 0, 1, 1]);
    }
}
