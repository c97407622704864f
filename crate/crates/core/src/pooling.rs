//! Mention and entity aggregation.
//!
//! A mention is the mean of its words' first-subword embeddings. An entity
//! aggregates its mentions with the configured [`PoolingStrategy`].

use ndarray::{Array1, Array2, Axis};

use crate::autodiff::{Tape, Var};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolingStrategy {
    #[default]
    Mean,
    LogSumExp,
}

impl std::str::FromStr for PoolingStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "logsumexp" | "lse" => Ok(Self::LogSumExp),
            other => Err(format!("unknown pooling `{other}`")),
        }
    }
}

impl std::fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolingStrategy::Mean => "mean",
            PoolingStrategy::LogSumExp => "logsumexp",
        })
    }
}

/// `groups.len() × width` matrix whose row `i` averages the columns in `groups[i]`.
pub(crate) fn averaging_matrix(groups: &[Vec<usize>], width: usize) -> Array2<f64> {
    let mut m = Array2::zeros((groups.len(), width));
    for (r, g) in groups.iter().enumerate() {
        let w = 1.0 / g.len() as f64;
        for &c in g {
            m[[r, c]] += w;
        }
    }
    m
}

/// Mention vectors `M × D` from token vectors `L × D`; `mentions[i]` lists
/// the first-subword positions of mention `i`'s surviving words.
pub fn mention_vectors<'t>(tape: &'t Tape, tokens: Var<'t>, mentions: &[Vec<usize>]) -> Var<'t> {
    let width = tokens.shape().0;
    tape.constant(averaging_matrix(mentions, width))
        .matmul(tokens)
}

/// Entity vectors `E × D` from mention vectors; `entities[e]` lists the
/// mention rows belonging to entity `e`.
pub fn entity_vectors<'t>(
    tape: &'t Tape,
    mentions: Var<'t>,
    entities: &[Vec<usize>],
    strategy: PoolingStrategy,
) -> Var<'t> {
    match strategy {
        PoolingStrategy::Mean => {
            let width = mentions.shape().0;
            tape.constant(averaging_matrix(entities, width))
                .matmul(mentions)
        }
        PoolingStrategy::LogSumExp => {
            let rows: Vec<Var<'t>> = entities
                .iter()
                .map(|g| mentions.select_rows(g).lse_rows())
                .collect();
            if rows.len() == 1 {
                rows[0]
            } else {
                tape.concat_rows(&rows)
            }
        }
    }
}

/// Mean of the first-subword embeddings of the given words.
///
/// Words at or beyond `enc.word_map.len()` were truncated away; a mention
/// with no surviving word is reported as dropped.
pub fn pool_mention(enc: &EncoderOutput, words: std::ops::Range<usize>) -> Result<Array1<f64>> {
    let surviving: Vec<usize> = words
        .filter(|&w| w < enc.word_map.len())
        .map(|w| enc.word_map[w])
        .collect();
    if surviving.is_empty() {
        return Err(Error::Empty("mention dropped by truncation"));
    }
    Ok(enc
        .token_embeddings
        .select(Axis(0), &surviving)
        .mean_axis(Axis(0))
        .expect("non-empty"))
}

/// Aggregate mention vectors into one entity vector.
pub fn pool_entity(mention_vecs: &[Array1<f64>], strategy: PoolingStrategy) -> Result<Array1<f64>> {
    if mention_vecs.is_empty() {
        return Err(Error::Empty("entity has no mentions"));
    }
    let dim = mention_vecs[0].len();
    if mention_vecs.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("mention vectors differ in width".into()));
    }
    let mut stacked = Array2::zeros((mention_vecs.len(), dim));
    for (i, v) in mention_vecs.iter().enumerate() {
        stacked.row_mut(i).assign(v);
    }
    let tape = Tape::new();
    let m = tape.constant(stacked);
    let all: Vec<usize> = (0..mention_vecs.len()).collect();
    let out = entity_vectors(&tape, m, &[all], strategy);
    Ok(out.to_array().row(0).to_owned())
}
