//! Localized context pooling.
//!
//! For every candidate pair the head and tail attention distributions are
//! multiplied element-wise, renormalised, and used to average the token
//! embeddings into a pair-specific context vector. Each entity vector is
//! then refined with that context through its own two-layer network and a
//! `tanh`.

use ndarray::{Array1, Array2, Axis};

use crate::autodiff::{Activation, Tape, Var};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::FeedForward;
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

#[derive(Clone, Debug)]
pub struct LopHead {
    /// `2D → D → D`
    pub ffn_head: FeedForward,
    pub ffn_tail: FeedForward,
}

impl LopHead {
    pub fn new(store: &mut ParamStore, dim: usize, activation: Activation) -> Self {
        Self {
            ffn_head: FeedForward::new(
                store,
                "heads.lop_head",
                (2 * dim, dim, dim),
                activation,
                ParamGroup::Heads,
            ),
            ffn_tail: FeedForward::new(
                store,
                "heads.lop_tail",
                (2 * dim, dim, dim),
                activation,
                ParamGroup::Heads,
            ),
        }
    }

    /// `tanh(FFN_side([entity ; context]))`, batched over rows.
    pub fn refine<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        entity: Var<'t>,
        context: Var<'t>,
        side: Side,
    ) -> Var<'t> {
        let ffn = match side {
            Side::Head => &self.ffn_head,
            Side::Tail => &self.ffn_tail,
        };
        ffn.forward(tape, store, tape.concat_cols(&[entity, context]))
            .tanh()
    }
}

/// `E × L` weights whose row `e` averages, over the entity's mentions, the
/// mean of one-hot rows at each mention's first-subword positions.
pub fn entity_token_weights(entities: &[Vec<Vec<usize>>], width: usize) -> Array2<f64> {
    let mut w = Array2::zeros((entities.len(), width));
    for (e, mentions) in entities.iter().enumerate() {
        let per_mention = 1.0 / mentions.len() as f64;
        for positions in mentions {
            let per_pos = per_mention / positions.len() as f64;
            for &p in positions {
                w[[e, p]] += per_pos;
            }
        }
    }
    w
}

/// Per-entity attention `E × L` from token weights and the `L × L` attention.
pub fn entity_attention_rows<'t>(
    tape: &'t Tape,
    attention: Var<'t>,
    weights: Array2<f64>,
) -> Var<'t> {
    tape.constant(weights).matmul(attention)
}

/// Context vectors `P × D` from per-pair head and tail attention `P × L`
/// and token embeddings `L × D`. Also returns how many pairs had zero joint
/// attention mass and fell back to a uniform average.
pub fn localized_context<'t>(
    head_att: Var<'t>,
    tail_att: Var<'t>,
    tokens: Var<'t>,
) -> (Var<'t>, usize) {
    let (weights, fallbacks) = head_att.mul(tail_att).normalize_rows();
    (weights.matmul(tokens), fallbacks)
}

/// Attention vector of one entity; `mentions[i]` holds the first-subword
/// positions of mention `i`'s surviving words.
pub fn entity_attention(enc: &EncoderOutput, mentions: &[Vec<usize>]) -> Result<Array1<f64>> {
    let mentions: Vec<Vec<usize>> = mentions.iter().filter(|m| !m.is_empty()).cloned().collect();
    if mentions.is_empty() {
        return Err(Error::Empty("entity dropped by truncation"));
    }
    let tape = Tape::new();
    let a = tape.constant(enc.attention.clone());
    let weights = entity_token_weights(&[mentions], enc.attention.nrows());
    Ok(entity_attention_rows(&tape, a, weights)
        .to_array()
        .row(0)
        .to_owned())
}

/// Context vector for one pair. The second value is `true` when the joint
/// attention had no mass and the uniform fallback was used.
pub fn localized_context_single(
    head_att: &Array1<f64>,
    tail_att: &Array1<f64>,
    enc: &EncoderOutput,
) -> (Array1<f64>, bool) {
    let tape = Tape::new();
    let h = tape.constant(head_att.clone().insert_axis(Axis(0)));
    let t = tape.constant(tail_att.clone().insert_axis(Axis(0)));
    let tokens = tape.constant(enc.token_embeddings.clone());
    let (c, fallbacks) = localized_context(h, t, tokens);
    (c.to_array().row(0).to_owned(), fallbacks > 0)
}
