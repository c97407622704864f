//! Document and label encoders.
//!
//! Both sides of the bi-encoder are small post-norm transformer stacks with
//! learned positional embeddings. The document encoder returns contextual
//! token embeddings together with the last layer's attention probabilities
//! averaged over heads; the label encoder mean-pools the token embeddings of
//! each relation name.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use ndarray::Array2;

use crate::autodiff::{Activation, Tape, Var};
use crate::data::{Document, RelationLabelSet};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tokenizer::Vocab;

/// How encoder weights come into existence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    /// Loaded from an earlier checkpoint directory (`pretrained_dir`).
    Pretrained,
    /// Randomly initialised from the model seed.
    Tiny,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "tiny" => Ok(Self::Tiny),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Pretrained => "pretrained",
            BackendKind::Tiny => "tiny",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub backend_kind: BackendKind,
    pub pretrained_dir: Option<PathBuf>,
    /// Maximum number of subword tokens per document.
    pub max_length: usize,
    /// Document encoder width `D`.
    pub hidden_size: usize,
    /// Label encoder width `D'`.
    pub label_hidden_size: usize,
    /// Shared matching space. Defaults to `hidden_size`.
    pub latent_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_size: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend_kind: BackendKind::Tiny,
            pretrained_dir: None,
            max_length: 512,
            hidden_size: 32,
            label_hidden_size: 32,
            latent_size: 32,
            layers: 2,
            heads: 2,
            ffn_size: 64,
            activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |arg, reason: &str| {
            Err(Error::InvalidArgument {
                arg,
                reason: reason.to_string(),
            })
        };
        if self.max_length == 0 {
            return bad("max_length", "must be positive");
        }
        if self.hidden_size == 0 || self.label_hidden_size == 0 || self.latent_size == 0 {
            return bad("hidden_size", "must be positive");
        }
        if self.heads == 0
            || !self.hidden_size.is_multiple_of(self.heads)
            || !self.label_hidden_size.is_multiple_of(self.heads)
        {
            return bad("heads", "must divide the hidden sizes");
        }
        if self.backend_kind == BackendKind::Pretrained && self.pretrained_dir.is_none() {
            return bad("pretrained_dir", "required for the pretrained backend");
        }
        Ok(())
    }
}

/// Contextual embeddings plus head-averaged last-layer attention.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `L × D`
    pub token_embeddings: Array2<f64>,
    /// `L × L`, row-stochastic.
    pub attention: Array2<f64>,
    /// First subword index of every word that survived truncation.
    pub word_map: Vec<usize>,
}

/// Tape handles for one encoded sequence.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars<'t> {
    pub embeddings: Var<'t>,
    pub attention: Var<'t>,
}

/// Subword ids of a document and where each word starts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedDoc {
    pub ids: Vec<u32>,
    pub word_map: Vec<usize>,
    /// Words lost to truncation (counted from the end of the document).
    pub truncated_words: usize,
}

/// Subword-tokenize a document, hard-truncating at `max_length`.
pub fn tokenize_document(vocab: &Vocab, doc: &Document, max_length: usize) -> Result<TokenizedDoc> {
    let total = doc.num_words();
    if total == 0 {
        return Err(Error::EmptyDocument(doc.doc_id.clone()));
    }
    let mut ids = Vec::new();
    let mut word_map = Vec::with_capacity(total);
    for word in doc.words() {
        if ids.len() >= max_length {
            break;
        }
        word_map.push(ids.len());
        let pieces = vocab.tokenize_word(word);
        let room = max_length - ids.len();
        ids.extend(pieces.into_iter().take(room));
    }
    let truncated_words = total - word_map.len();
    if truncated_words > 0 {
        log::warn!(
            "document `{}` truncated at {} subwords: {} of {} words dropped",
            doc.doc_id,
            max_length,
            truncated_words,
            total
        );
    }
    Ok(TokenizedDoc {
        ids,
        word_map,
        truncated_words,
    })
}

#[derive(Clone, Debug)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

/// Post-norm transformer encoder over subword ids.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub prefix: String,
    pub hidden: usize,
    pub heads: usize,
    pub max_length: usize,
    token_embedding: crate::params::ParamId,
    position_embedding: crate::params::ParamId,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        hidden: usize,
        cfg: &EncoderConfig,
    ) -> Self {
        let g = ParamGroup::Encoder;
        let token_embedding =
            store.normal(&format!("{prefix}.tok_emb"), vocab_size, hidden, 0.1, g);
        let position_embedding =
            store.normal(&format!("{prefix}.pos_emb"), cfg.max_length, hidden, 0.1, g);
        let embed_norm = LayerNorm::new(store, &format!("{prefix}.emb_norm"), hidden, g);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Block {
                    query: Linear::new(store, &format!("{p}.q"), hidden, hidden, g),
                    key: Linear::new(store, &format!("{p}.k"), hidden, hidden, g),
                    value: Linear::new(store, &format!("{p}.v"), hidden, hidden, g),
                    output: Linear::new(store, &format!("{p}.o"), hidden, hidden, g),
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), hidden, g),
                    ffn: FeedForward::new(
                        store,
                        &format!("{p}.ffn"),
                        (hidden, cfg.ffn_size, hidden),
                        cfg.activation,
                        g,
                    ),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), hidden, g),
                }
            })
            .collect();
        Self {
            prefix: prefix.to_string(),
            hidden,
            heads: cfg.heads,
            max_length: cfg.max_length,
            token_embedding,
            position_embedding,
            embed_norm,
            blocks,
        }
    }

    /// Encode one sequence of at most `max_length` ids.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[u32]) -> EncodedVars<'t> {
        assert!(!ids.is_empty(), "cannot encode an empty sequence");
        assert!(
            ids.len() <= self.max_length,
            "sequence longer than max_length"
        );
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.param(store, self.token_embedding).select_rows(&idx);
        let pos = tape
            .param(store, self.position_embedding)
            .select_rows(&positions);
        let mut x = self.embed_norm.forward(tape, store, tok.add(pos));

        let head_dim = self.hidden / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut last_attention = None;
        for block in &self.blocks {
            let q = block.query.forward(tape, store, x);
            let k = block.key.forward(tape, store, x);
            let v = block.value.forward(tape, store, x);
            let mut contexts = Vec::with_capacity(self.heads);
            let mut probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (a, b) = (h * head_dim, (h + 1) * head_dim);
                let p = q
                    .slice_cols(a, b)
                    .matmul_t(k.slice_cols(a, b))
                    .scale(scale)
                    .softmax_rows();
                contexts.push(p.matmul(v.slice_cols(a, b)));
                probs.push(p);
            }
            let ctx = if contexts.len() == 1 {
                contexts[0]
            } else {
                tape.concat_cols(&contexts)
            };
            let attn_out = block.output.forward(tape, store, ctx);
            x = block.attn_norm.forward(tape, store, x.add(attn_out));
            let f = block.ffn.forward(tape, store, x);
            x = block.ffn_norm.forward(tape, store, x.add(f));

            let mut avg = probs[0];
            for p in &probs[1..] {
                avg = avg.add(*p);
            }
            last_attention = Some(avg.scale(1.0 / self.heads as f64));
        }
        let attention = last_attention.unwrap_or_else(|| {
            // No layers: uniform attention keeps the row-stochastic contract.
            let n = ids.len();
            tape.constant(Array2::from_elem((n, n), 1.0 / n as f64))
        });
        EncodedVars {
            embeddings: x,
            attention,
        }
    }
}

/// Mean-pooled label-name embeddings, `K × D'`, on the tape.
pub fn label_matrix<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    encoder: &TransformerEncoder,
    vocab: &Vocab,
    labels: &RelationLabelSet,
) -> Result<Var<'t>> {
    if labels.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    let mut rows = Vec::with_capacity(labels.len());
    for (id, name) in labels.iter() {
        let mut ids = vocab.tokenize_label(name);
        if ids.is_empty() {
            return Err(Error::EmptyLabel(id.to_string()));
        }
        ids.truncate(encoder.max_length);
        rows.push(encoder.forward(tape, store, &ids).embeddings.mean_rows());
    }
    Ok(if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat_rows(&rows)
    })
}

/// Maps label embeddings into the matching space when widths differ.
#[derive(Clone, Debug)]
pub struct LabelProjection {
    pub ffn: Option<FeedForward>,
}

impl LabelProjection {
    pub fn new(
        store: &mut ParamStore,
        label_dim: usize,
        latent: usize,
        activation: Activation,
    ) -> Self {
        let ffn = (label_dim != latent).then(|| {
            FeedForward::new(
                store,
                "heads.label_proj",
                (label_dim, latent, latent),
                activation,
                ParamGroup::Heads,
            )
        });
        Self { ffn }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, labels: Var<'t>) -> Var<'t> {
        match &self.ffn {
            Some(ffn) => ffn.forward(tape, store, labels),
            None => labels,
        }
    }
}

/// Label embeddings keyed by the label set and the weights that produce them.
#[derive(Debug, Default)]
pub struct LabelCache {
    entries: Mutex<HashMap<String, Array2<f64>>>,
}

impl LabelCache {
    pub fn key(labels: &RelationLabelSet, store: &ParamStore) -> String {
        format!(
            "{}:{}",
            labels.digest(),
            store.digest(&["encoder_label.", "heads.label_proj."])
        )
    }

    pub fn get_or_compute(
        &self,
        key: String,
        compute: impl FnOnce() -> Result<Array2<f64>>,
    ) -> Result<Array2<f64>> {
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let value = compute()?;
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key, value.clone());
        Ok(value)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.lock().expect("cache lock").clear();
    }
}
