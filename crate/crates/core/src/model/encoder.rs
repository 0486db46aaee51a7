use crate::autodiff::{Tape, Var};
use crate::error::{ModelError, TensorError};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

use super::{layer_param_name, Checkpoint, ModelConfig, PAD};

/// Hidden states after the embedding block and after each layer (`L + 1` entries).
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub hidden_states: Vec<Tensor<f32>>,
    /// `attention[layer][head]`, each `[seq, seq]`.
    pub attention: Vec<Vec<Tensor<f32>>>,
}

#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub hidden: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
struct LayerSlots {
    query: (usize, usize),
    key: (usize, usize),
    value: (usize, usize),
    output: (usize, usize),
    attn_ln: (usize, usize),
    intermediate: (usize, usize),
    ffn_out: (usize, usize),
    ffn_ln: (usize, usize),
}

/// Slot indices of the canonical parameters inside a [`ParamSet`], resolved
/// once so the forward pass does no string lookups.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    token: usize,
    position: usize,
    types: usize,
    embed_ln: (usize, usize),
    layers: Vec<LayerSlots>,
}

impl ParamLayout {
    pub fn resolve<F: Scalar>(params: &ParamSet<F>, config: &ModelConfig) -> Result<Self, TensorError> {
        let pair = |a: &str, b: &str| -> Result<(usize, usize), TensorError> {
            Ok((params.require(a)?, params.require(b)?))
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 1..=config.num_layers {
            let n = |s: &str| layer_param_name(i, s);
            layers.push(LayerSlots {
                query: pair(&n("attn.query.weight"), &n("attn.query.bias"))?,
                key: pair(&n("attn.key.weight"), &n("attn.key.bias"))?,
                value: pair(&n("attn.value.weight"), &n("attn.value.bias"))?,
                output: pair(&n("attn.output.weight"), &n("attn.output.bias"))?,
                attn_ln: pair(&n("attn.ln.gamma"), &n("attn.ln.beta"))?,
                intermediate: pair(&n("ffn.intermediate.weight"), &n("ffn.intermediate.bias"))?,
                ffn_out: pair(&n("ffn.output.weight"), &n("ffn.output.bias"))?,
                ffn_ln: pair(&n("ffn.ln.gamma"), &n("ffn.ln.beta"))?,
            });
        }
        Ok(Self {
            token: params.require("embed.token")?,
            position: params.require("embed.position")?,
            types: params.require("embed.type")?,
            embed_ln: pair("embed.ln.gamma", "embed.ln.beta")?,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

fn linear<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, (w, b): (usize, usize)) -> Result<Var, TensorError> {
    let w = tape.param_at(w);
    let b = tape.param_at(b);
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layer_norm<F: Scalar>(tape: &mut Tape<'_, F>, x: Var, (g, b): (usize, usize)) -> Result<Var, TensorError> {
    let g = tape.param_at(g);
    let b = tape.param_at(b);
    tape.layer_norm(x, g, b)
}

pub(crate) fn validate_input(config: &ModelConfig, tokens: &[u32], types: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Empty);
    }
    if tokens.len() != types.len() {
        return Err(ModelError::LengthMismatch {
            tokens: tokens.len(),
            types: types.len(),
        });
    }
    if tokens.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    for (position, (&id, &ty)) in tokens.iter().zip(types).enumerate() {
        if id as usize >= config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                position,
                vocab: config.vocab_size,
            });
        }
        if ty as usize >= config.type_vocab_size {
            return Err(ModelError::TypeOutOfRange {
                id: ty,
                position,
                vocab: config.type_vocab_size,
            });
        }
    }
    if tokens.iter().all(|&t| t == PAD) {
        return Err(ModelError::Empty);
    }
    Ok(())
}

/// Records the encoder forward pass on `tape`. Inputs must already be validated.
///
/// Per layer: self-attention → residual add → layer norm → feed-forward →
/// residual add → layer norm. Keys at `[PAD]` positions are masked out.
pub fn encode_on_tape<F: Scalar>(
    tape: &mut Tape<'_, F>,
    layout: &ParamLayout,
    config: &ModelConfig,
    tokens: &[u32],
    types: &[u32],
) -> Result<EncodedVars, TensorError> {
    let n = tokens.len();
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let type_ids: Vec<usize> = types.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let keep: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
    let mask = keep.iter().any(|&k| !k).then_some(keep.as_slice());

    let tok_table = tape.param_at(layout.token);
    let pos_table = tape.param_at(layout.position);
    let type_table = tape.param_at(layout.types);
    let tok = tape.embedding(tok_table, &ids)?;
    let pos = tape.embedding(pos_table, &positions)?;
    let ty = tape.embedding(type_table, &type_ids)?;
    let sum = tape.add(tok, pos)?;
    let sum = tape.add(sum, ty)?;
    let mut h = layer_norm(tape, sum, layout.embed_ln)?;

    let mut hidden = vec![h];
    let mut attention = Vec::with_capacity(layout.layers.len());
    let d = config.head_dim();
    let inv_sqrt_d = F::one() / F::from_usize(d).unwrap().sqrt();

    for slots in &layout.layers {
        let q = linear(tape, h, slots.query)?;
        let k = linear(tape, h, slots.key)?;
        let v = linear(tape, h, slots.value)?;
        let mut contexts = Vec::with_capacity(config.num_heads);
        let mut probs = Vec::with_capacity(config.num_heads);
        for head in 0..config.num_heads {
            let qh = tape.slice_cols(q, head * d, d)?;
            let kh = tape.slice_cols(k, head * d, d)?;
            let vh = tape.slice_cols(v, head * d, d)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt_d);
            let p = tape.softmax_masked(scores, 1, mask)?;
            probs.push(p);
            contexts.push(tape.matmul(p, vh)?);
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            tape.concat_cols(&contexts)?
        };
        let attn_out = linear(tape, ctx, slots.output)?;
        let res = tape.add(h, attn_out)?;
        let h1 = layer_norm(tape, res, slots.attn_ln)?;
        let inter = linear(tape, h1, slots.intermediate)?;
        let inter = tape.gelu(inter);
        let ffn = linear(tape, inter, slots.ffn_out)?;
        let res = tape.add(h1, ffn)?;
        h = layer_norm(tape, res, slots.ffn_ln)?;
        hidden.push(h);
        attention.push(probs);
    }
    Ok(EncodedVars { hidden, attention })
}

/// Mean over the non-`[PAD]` rows of `hidden`.
pub fn mean_pool<F: Scalar>(tape: &mut Tape<'_, F>, hidden: Var, tokens: &[u32]) -> Result<Var, TensorError> {
    if tokens.iter().all(|&t| t != PAD) {
        return tape.mean(hidden, 0);
    }
    let rows: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, _)| i)
        .collect();
    let kept = tape.gather_rows(hidden, &rows)?;
    tape.mean(kept, 0)
}

/// Pure forward pass over a checkpoint.
pub fn encode(
    checkpoint: &Checkpoint,
    token_ids: &[u32],
    type_ids: &[u32],
) -> Result<EncoderOutput, ModelError> {
    validate_input(&checkpoint.config, token_ids, type_ids)?;
    let layout = ParamLayout::resolve(&checkpoint.params, &checkpoint.config)?;
    let mut tape = Tape::new(&checkpoint.params);
    let vars = encode_on_tape(&mut tape, &layout, &checkpoint.config, token_ids, type_ids)?;
    Ok(EncoderOutput {
        hidden_states: vars.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
        attention: vars
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, CLS, SEP};

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            hidden_size: 16,
            num_heads: 2,
            intermediate_size: 32,
            vocab_size: 20,
            max_seq_len: 10,
            type_vocab_size: 2,
        }
    }

    fn plain_layer_norm(x: &[f32]) -> Vec<f32> {
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let rs = 1.0 / (var + 1e-12).sqrt();
        x.iter().map(|&v| ((v as f64 - mean) * rs) as f32).collect()
    }

    #[test]
    fn output_has_one_state_per_layer_plus_embeddings() {
        let ck = init_model(&small(), 3).unwrap();
        let out = encode(&ck, &[CLS, 5, 6, SEP], &[0; 4]).unwrap();
        assert_eq!(out.hidden_states.len(), 4);
        for h in &out.hidden_states {
            assert_eq!(h.shape(), &[4, 16]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let ck = init_model(&small(), 3).unwrap();
        let out = encode(&ck, &[CLS, 5, 6, 7, SEP, PAD], &[0, 0, 0, 1, 1, 0]).unwrap();
        for layer in &out.attention {
            for head in layer {
                for r in 0..head.rows() {
                    let s: f32 = head.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    // padded key gets no mass
                    assert_eq!(head.row(r)[5], 0.0);
                }
            }
        }
    }

    #[test]
    fn zeroed_layer_reduces_to_double_layer_norm() {
        let cfg = small();
        let mut ck = init_model(&cfg, 9).unwrap();
        let target = 2;
        for name in cfg.layer_param_names(target) {
            let t = ck.params.get_mut(&name).unwrap();
            let fill = if name.ends_with("ln.gamma") { 1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        let out = encode(&ck, &[CLS, 4, 8, 12, SEP], &[0; 5]).unwrap();
        let prev = &out.hidden_states[target - 1];
        let got = &out.hidden_states[target];
        for r in 0..prev.rows() {
            let want = plain_layer_norm(&plain_layer_norm(prev.row(r)));
            for (a, b) in got.row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn position_embeddings_break_permutation_symmetry() {
        let ck = init_model(&small(), 5).unwrap();
        let a = encode(&ck, &[7, 11], &[0, 0]).unwrap();
        let b = encode(&ck, &[11, 7], &[0, 0]).unwrap();
        let last = ck.config.num_layers;
        // row of token 7 in `a` vs row of token 7 in `b`
        let differs = a.hidden_states[last]
            .row(0)
            .iter()
            .zip(b.hidden_states[last].row(1))
            .any(|(x, y)| x != y);
        assert!(differs);
    }

    #[test]
    fn encode_is_pure() {
        let ck = init_model(&small(), 5).unwrap();
        let a = encode(&ck, &[CLS, 4, 9, SEP], &[0; 4]).unwrap();
        let b = encode(&ck, &[CLS, 4, 9, SEP], &[0; 4]).unwrap();
        for (x, y) in a.hidden_states.iter().zip(&b.hidden_states) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn input_errors() {
        let ck = init_model(&small(), 5).unwrap();
        assert!(matches!(
            encode(&ck, &[CLS, 20], &[0, 0]),
            Err(ModelError::TokenOutOfRange {
                id: 20,
                position: 1,
                ..
            })
        ));
        assert!(matches!(
            encode(&ck, &[CLS, 4], &[0, 2]),
            Err(ModelError::TypeOutOfRange { .. })
        ));
        assert!(matches!(
            encode(&ck, &[4; 11], &[0; 11]),
            Err(ModelError::SequenceTooLong { .. })
        ));
        assert!(matches!(encode(&ck, &[], &[]), Err(ModelError::Empty)));
    }
}
