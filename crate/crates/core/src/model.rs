//! The full relation extractor: document encoder, label encoder, pooling,
//! optional localized context refinement, pair representation and label
//! matching.

use std::collections::HashMap;

use ndarray::{Array1, Array2};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::data::{enumerate_pairs, pair_cap, Document, RelationLabelSet};
use crate::dataset::Prediction;
use crate::encoder::{
    label_matrix, tokenize_document, EncoderConfig, LabelCache, LabelProjection, TransformerEncoder,
};
use crate::error::{Error, Result};
use crate::lop::{entity_attention_rows, entity_token_weights, localized_context, LopHead, Side};
use crate::losses::{
    adaptive_decide, adaptive_threshold_loss, focal_loss, FocalParams, LossKind, LossReduction,
    ThresholdHead,
};
use crate::params::ParamStore;
use crate::pooling::{entity_vectors, mention_vectors, PoolingStrategy};
use crate::relation::{check_threshold, decide, match_logits, RelationHead, DEFAULT_THRESHOLD};
use crate::tokenizer::{label_words, Vocab};

pub const DOC_ENCODER: &str = "encoder_doc";
pub const LABEL_ENCODER: &str = "encoder_label";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingStrategy,
    pub lop: bool,
    pub loss: LossKind,
    pub focal: FocalParams,
    pub loss_reduction: LossReduction,
    pub threshold: f64,
    /// Seeds weight initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pooling: PoolingStrategy::Mean,
            lop: true,
            loss: LossKind::Focal,
            focal: FocalParams::default(),
            loss_reduction: LossReduction::Mean,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        check_threshold(self.threshold)?;
        FocalParams::new(self.focal.gamma, self.focal.alpha_pos)?;
        Ok(())
    }
}

/// Vocabulary over the words of `documents` and every label name.
pub fn build_vocab<'a>(
    documents: &[Document],
    label_sets: impl IntoIterator<Item = &'a RelationLabelSet>,
) -> Vocab {
    let mut words: Vec<String> = documents
        .iter()
        .flat_map(|d| d.words().map(str::to_string))
        .collect();
    for labels in label_sets {
        for (_, name) in labels.iter() {
            words.extend(label_words(name));
        }
    }
    Vocab::build(words.iter().map(String::as_str), 1, None)
}

/// A document mapped onto encoder positions.
#[derive(Clone, Debug)]
pub struct PreparedDoc {
    pub ids: Vec<u32>,
    /// First-subword positions of each surviving mention's surviving words.
    pub mention_tokens: Vec<Vec<usize>>,
    /// For each live entity, its rows in `mention_tokens`.
    pub entity_mentions: Vec<Vec<usize>>,
    /// Original index → live row, `None` when every mention was truncated away.
    pub entity_row: Vec<Option<usize>>,
    pub dropped_entities: Vec<usize>,
    /// Live-entity attention weights over token positions.
    pub entity_token_weights: Array2<f64>,
}

impl PreparedDoc {
    /// Candidate pairs whose entities both survived truncation, head-major.
    pub fn live_pairs(&self, doc: &Document) -> Result<Vec<(usize, usize)>> {
        Ok(enumerate_pairs(doc)?
            .into_iter()
            .filter(|&(h, t)| self.entity_row[h].is_some() && self.entity_row[t].is_some())
            .collect())
    }
}

/// Forward results for one document.
pub struct DocForward<'t> {
    pub pairs: Vec<(usize, usize)>,
    pub relations: Var<'t>,
    pub logits: Var<'t>,
    pub lop_fallbacks: usize,
}

/// Logits and scores for every live pair of a document.
#[derive(Clone, Debug)]
pub struct ScoredDoc {
    /// Document id; written to the `title` field of predictions.
    pub title: String,
    pub pairs: Vec<(usize, usize)>,
    pub logits: Array2<f64>,
    /// Per-pair threshold logits, adaptive-threshold models only.
    pub th_logits: Option<Array1<f64>>,
}

impl ScoredDoc {
    pub fn scores(&self) -> Array2<f64> {
        self.logits.mapv(sigmoid)
    }

    /// Decided triplets at a global threshold `tau`, or at the learned
    /// per-pair thresholds when present.
    pub fn predictions(&self, labels: &RelationLabelSet, tau: f64) -> Vec<Prediction> {
        let scores = self.scores();
        let mut out = Vec::new();
        for (p, &(h, t)) in self.pairs.iter().enumerate() {
            let row: Vec<f64> = scores.row(p).to_vec();
            let chosen = match &self.th_logits {
                Some(th) => adaptive_decide(&self.logits.row(p).to_vec(), th[p]),
                None => decide(&row, tau),
            };
            for k in chosen {
                out.push(Prediction {
                    title: self.title.clone(),
                    h_idx: h,
                    t_idx: t,
                    r: labels.id(k).to_string(),
                    score: row[k],
                });
            }
        }
        out
    }
}

/// Batch loss with its bookkeeping.
pub struct BatchLoss<'t> {
    pub loss: Var<'t>,
    pub pairs: usize,
    pub positives: usize,
    pub lop_fallbacks: usize,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub doc_encoder: TransformerEncoder,
    pub label_encoder: TransformerEncoder,
    pub label_proj: LabelProjection,
    pub relation: RelationHead,
    pub lop: Option<LopHead>,
    pub threshold_head: Option<ThresholdHead>,
    label_cache: LabelCache,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.clone(),
            doc_encoder: self.doc_encoder.clone(),
            label_encoder: self.label_encoder.clone(),
            label_proj: self.label_proj.clone(),
            relation: self.relation.clone(),
            lop: self.lop.clone(),
            threshold_head: self.threshold_head.clone(),
            label_cache: LabelCache::default(),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let act = enc.activation;
        let mut store = ParamStore::new(config.seed);
        let doc_encoder =
            TransformerEncoder::new(&mut store, DOC_ENCODER, vocab.len(), enc.hidden_size, enc);
        let label_encoder = TransformerEncoder::new(
            &mut store,
            LABEL_ENCODER,
            vocab.len(),
            enc.label_hidden_size,
            enc,
        );
        let label_proj =
            LabelProjection::new(&mut store, enc.label_hidden_size, enc.latent_size, act);
        let lop = config
            .lop
            .then(|| LopHead::new(&mut store, enc.hidden_size, act));
        let relation = RelationHead::new(
            &mut store,
            enc.hidden_size,
            enc.latent_size,
            act,
            config.threshold,
        )?;
        let threshold_head = (config.loss == LossKind::AdaptiveThreshold)
            .then(|| ThresholdHead::new(&mut store, enc.latent_size, act));
        Ok(Self {
            config,
            vocab,
            store,
            doc_encoder,
            label_encoder,
            label_proj,
            relation,
            lop,
            threshold_head,
            label_cache: LabelCache::default(),
        })
    }

    pub fn prepare(&self, doc: &Document) -> Result<PreparedDoc> {
        if doc.entities.is_empty() {
            return Err(Error::NoEntities(doc.doc_id.clone()));
        }
        let tok = tokenize_document(&self.vocab, doc, self.config.encoder.max_length)?;
        let offsets = doc.sentence_offsets();
        let mut mention_tokens = Vec::new();
        let mut entity_mentions = Vec::new();
        let mut entity_row = Vec::with_capacity(doc.entities.len());
        let mut dropped = Vec::new();
        for e in &doc.entities {
            let mut rows = Vec::new();
            for m in &e.mentions {
                let positions: Vec<usize> = doc
                    .mention_range(m, &offsets)
                    .filter(|&w| w < tok.word_map.len())
                    .map(|w| tok.word_map[w])
                    .collect();
                if !positions.is_empty() {
                    rows.push(mention_tokens.len());
                    mention_tokens.push(positions);
                }
            }
            if rows.is_empty() {
                dropped.push(e.entity_index);
                entity_row.push(None);
            } else {
                entity_row.push(Some(entity_mentions.len()));
                entity_mentions.push(rows);
            }
        }
        if !dropped.is_empty() {
            log::warn!(
                "document `{}`: entities {:?} lost every mention to truncation; their pairs are scored as no relation",
                doc.doc_id,
                dropped
            );
        }
        let grouped: Vec<Vec<Vec<usize>>> = entity_mentions
            .iter()
            .map(|rows: &Vec<usize>| rows.iter().map(|&r| mention_tokens[r].clone()).collect())
            .collect();
        let weights = entity_token_weights(&grouped, tok.ids.len());
        Ok(PreparedDoc {
            ids: tok.ids,
            mention_tokens,
            entity_mentions,
            entity_row,
            dropped_entities: dropped,
            entity_token_weights: weights,
        })
    }

    /// Projected label embeddings `K × D_latent` on the tape.
    pub fn label_vars<'t>(&self, tape: &'t Tape, labels: &RelationLabelSet) -> Result<Var<'t>> {
        let raw = label_matrix(tape, &self.store, &self.label_encoder, &self.vocab, labels)?;
        Ok(self.label_proj.forward(tape, &self.store, raw))
    }

    /// Projected label embeddings, cached by label set and weights.
    pub fn label_embeddings(&self, labels: &RelationLabelSet) -> Result<Array2<f64>> {
        let key = LabelCache::key(labels, &self.store);
        self.label_cache.get_or_compute(key, || {
            let tape = Tape::new();
            Ok(self.label_vars(&tape, labels)?.to_array())
        })
    }

    pub fn label_cache_len(&self) -> usize {
        self.label_cache.len()
    }

    /// Drop cached label embeddings, e.g. once weights have moved on.
    pub fn clear_label_cache(&self) {
        self.label_cache.clear();
    }

    /// Entity vectors for every live entity, `E × D`, plus the encoder outputs.
    fn entities<'t>(&self, tape: &'t Tape, prep: &PreparedDoc) -> (Var<'t>, Var<'t>, Var<'t>) {
        let enc = self.doc_encoder.forward(tape, &self.store, &prep.ids);
        let mentions = mention_vectors(tape, enc.embeddings, &prep.mention_tokens);
        let ents = entity_vectors(tape, mentions, &prep.entity_mentions, self.config.pooling);
        (ents, enc.embeddings, enc.attention)
    }

    /// Run the document side for the given pairs (original entity indices;
    /// both entities must be live) and match against `labels`.
    pub fn forward_doc<'t>(
        &self,
        tape: &'t Tape,
        prep: &PreparedDoc,
        pairs: &[(usize, usize)],
        labels: Var<'t>,
    ) -> Result<DocForward<'t>> {
        if pairs.is_empty() {
            return Err(Error::Empty("no live pairs"));
        }
        let row = |e: usize| {
            prep.entity_row
                .get(e)
                .copied()
                .flatten()
                .ok_or_else(|| Error::InvalidArgument {
                    arg: "pairs",
                    reason: format!("entity {e} is not live"),
                })
        };
        let mut head_rows = Vec::with_capacity(pairs.len());
        let mut tail_rows = Vec::with_capacity(pairs.len());
        for &(h, t) in pairs {
            head_rows.push(row(h)?);
            tail_rows.push(row(t)?);
        }
        let (ents, tokens, attention) = self.entities(tape, prep);
        let mut heads = ents.select_rows(&head_rows);
        let mut tails = ents.select_rows(&tail_rows);
        let mut lop_fallbacks = 0;
        if let Some(lop) = &self.lop {
            let att = entity_attention_rows(tape, attention, prep.entity_token_weights.clone());
            let (context, fallbacks) = localized_context(
                att.select_rows(&head_rows),
                att.select_rows(&tail_rows),
                tokens,
            );
            lop_fallbacks = fallbacks;
            heads = lop.refine(tape, &self.store, heads, context, Side::Head);
            tails = lop.refine(tape, &self.store, tails, context, Side::Tail);
        }
        let relations = self
            .relation
            .relation_repr(tape, &self.store, heads, tails)?;
        let logits = match_logits(relations, labels);
        Ok(DocForward {
            pairs: pairs.to_vec(),
            relations,
            logits,
            lop_fallbacks,
        })
    }

    /// Training loss over a batch. Pairs are optionally capped per document
    /// (gold pairs kept first); gold facts whose relation is not in `labels`
    /// are ignored.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        batch: &[(&Document, &PreparedDoc)],
        labels: &RelationLabelSet,
        cap: Option<usize>,
        cap_seed: u64,
    ) -> Result<BatchLoss<'t>> {
        let label_vars = self.label_vars(tape, labels)?;
        let mut logits = Vec::new();
        let mut relations = Vec::new();
        let mut target_rows: Vec<Vec<f64>> = Vec::new();
        let mut lop_fallbacks = 0;
        for (i, (doc, prep)) in batch.iter().enumerate() {
            let live = prep.live_pairs(doc)?;
            let pairs = pair_cap(
                &live,
                cap,
                cap_seed.wrapping_add(i as u64),
                &doc.gold_pairs(),
            );
            if pairs.is_empty() {
                continue;
            }
            let fwd = self.forward_doc(tape, prep, &pairs, label_vars)?;
            lop_fallbacks += fwd.lop_fallbacks;
            let index: HashMap<(usize, usize), usize> =
                pairs.iter().enumerate().map(|(r, &p)| (p, r)).collect();
            let mut targets = vec![vec![0.0; labels.len()]; pairs.len()];
            for g in &doc.gold_labels {
                if let (Some(&r), Some(k)) = (
                    index.get(&(g.head_index, g.tail_index)),
                    labels.index_of(&g.relation_id),
                ) {
                    targets[r][k] = 1.0;
                }
            }
            target_rows.extend(targets);
            logits.push(fwd.logits);
            relations.push(fwd.relations);
        }
        if logits.is_empty() {
            return Err(Error::Empty("batch has no live pairs"));
        }
        let stack = |parts: &[Var<'t>]| {
            if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat_rows(parts)
            }
        };
        let logits = stack(&logits);
        let pairs = target_rows.len();
        let targets = Array2::from_shape_fn((pairs, labels.len()), |(r, k)| target_rows[r][k]);
        let positives = targets.iter().filter(|&&t| t == 1.0).count();
        let loss = match (&self.threshold_head, self.config.loss) {
            (Some(th_head), LossKind::AdaptiveThreshold) => {
                let th = th_head.forward(tape, &self.store, stack(&relations), label_vars);
                adaptive_threshold_loss(tape, logits, th, &targets)?
            }
            _ => focal_loss(
                tape,
                logits,
                &targets,
                self.config.focal,
                self.config.loss_reduction,
            )?,
        };
        Ok(BatchLoss {
            loss,
            pairs,
            positives,
            lop_fallbacks,
        })
    }

    /// Logits for every live pair of `doc`.
    pub fn score_document(&self, doc: &Document, labels: &RelationLabelSet) -> Result<ScoredDoc> {
        let label_embs = self.label_embeddings(labels)?;
        let prep = self.prepare(doc)?;
        let pairs = prep.live_pairs(doc)?;
        if pairs.is_empty() {
            return Ok(ScoredDoc {
                title: doc.doc_id.clone(),
                pairs,
                logits: Array2::zeros((0, labels.len())),
                th_logits: self.threshold_head.as_ref().map(|_| Array1::zeros(0)),
            });
        }
        let tape = Tape::new();
        let label_vars = tape.constant(label_embs);
        let fwd = self.forward_doc(&tape, &prep, &pairs, label_vars)?;
        let th_logits = self.threshold_head.as_ref().map(|h| {
            h.forward(&tape, &self.store, fwd.relations, label_vars)
                .to_array()
                .column(0)
                .to_owned()
        });
        Ok(ScoredDoc {
            title: doc.doc_id.clone(),
            pairs,
            logits: fwd.logits.to_array(),
            th_logits,
        })
    }

    pub fn score_corpus(
        &self,
        documents: &[Document],
        labels: &RelationLabelSet,
    ) -> Result<Vec<ScoredDoc>> {
        documents
            .iter()
            .map(|d| self.score_document(d, labels))
            .collect()
    }

    /// Decided triplets for every document at the configured threshold.
    pub fn predict(
        &self,
        documents: &[Document],
        labels: &RelationLabelSet,
    ) -> Result<Vec<Prediction>> {
        let tau = self.relation.score_threshold;
        Ok(self
            .score_corpus(documents, labels)?
            .iter()
            .flat_map(|s| s.predictions(labels, tau))
            .collect())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::data::{Entity, GoldFact, Mention};

    pub fn sentence_doc(
        text: &str,
        spans: &[&[(usize, usize)]],
        gold: &[(usize, usize, &str)],
    ) -> Document {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let entities = spans
            .iter()
            .enumerate()
            .map(|(i, ms)| Entity {
                entity_index: i,
                mentions: ms
                    .iter()
                    .map(|&(s, e)| Mention {
                        sent_index: 0,
                        token_start: s,
                        token_end: e,
                        surface: words[s..e].join(" "),
                    })
                    .collect(),
                entity_type: String::new(),
            })
            .collect();
        let gold = gold
            .iter()
            .map(|&(h, t, r)| GoldFact {
                head_index: h,
                tail_index: t,
                relation_id: r.to_string(),
            })
            .collect();
        Document::new(text, text, vec![words], entities, gold, None).unwrap()
    }

    pub fn labels() -> RelationLabelSet {
        RelationLabelSet::new(vec![
            ("P19".into(), "place of birth".into()),
            ("P108".into(), "employer".into()),
        ])
        .unwrap()
    }

    pub fn small_config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.encoder.hidden_size = 8;
        c.encoder.label_hidden_size = 8;
        c.encoder.latent_size = 8;
        c.encoder.ffn_size = 16;
        c.encoder.max_length = 24;
        c.encoder.activation = Activation::Gelu;
        c
    }

    fn model(cfg: ModelConfig, doc: &Document) -> Model {
        let vocab = build_vocab(std::slice::from_ref(doc), [&labels()]);
        Model::new(cfg, vocab).unwrap()
    }

    fn doc() -> Document {
        sentence_doc(
            "alice was born in paris and works for acme in paris",
            &[&[(0, 1)], &[(4, 5), (10, 11)], &[(8, 9)]],
            &[(0, 1, "P19"), (0, 2, "P108")],
        )
    }

    #[test]
    fn prepare_maps_mentions_to_first_subwords() {
        let d = doc();
        let m = model(small_config(), &d);
        let prep = m.prepare(&d).unwrap();
        assert_eq!(prep.entity_mentions, vec![vec![0], vec![1, 2], vec![3]]);
        assert_eq!(prep.entity_token_weights.nrows(), 3);
        for row in prep.entity_token_weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(prep.dropped_entities.is_empty());
    }

    #[test]
    fn truncation_drops_entities_and_their_pairs() {
        let d = doc();
        let mut cfg = small_config();
        cfg.encoder.max_length = 8;
        let m = model(cfg, &d);
        let prep = m.prepare(&d).unwrap();
        // "paris" at word 10 is gone, word 4 survives; "acme" at word 8 is gone.
        assert_eq!(prep.dropped_entities, vec![2]);
        assert_eq!(prep.entity_mentions, vec![vec![0], vec![1]]);
        let scored = m.score_document(&d, &labels()).unwrap();
        assert_eq!(scored.pairs, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn scoring_is_deterministic_and_label_cache_hits() {
        let d = doc();
        let m = model(small_config(), &d);
        let a = m.score_document(&d, &labels()).unwrap();
        let b = m.score_document(&d, &labels()).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits.dim(), (9, 2));
        assert_eq!(m.label_cache_len(), 1);
        let fresh = {
            let tape = Tape::new();
            m.label_vars(&tape, &labels()).unwrap().to_array()
        };
        assert_eq!(m.label_embeddings(&labels()).unwrap(), fresh);
    }

    #[test]
    fn label_cache_invalidates_on_weight_change() {
        let d = doc();
        let mut m = model(small_config(), &d);
        let before = m.label_embeddings(&labels()).unwrap();
        let id = m.store.id("encoder_label.tok_emb").unwrap();
        let tok = m.vocab.tokenize_word("employer")[0] as usize;
        m.store.get_mut(id)[[tok, 0]] += 0.5;
        let after = m.label_embeddings(&labels()).unwrap();
        assert_ne!(before, after);
        assert_eq!(m.label_cache_len(), 2);
    }

    #[test]
    fn lop_off_matches_a_direct_pipeline_without_refinement() {
        let d = doc();
        let mut cfg = small_config();
        cfg.lop = false;
        let m = model(cfg, &d);
        assert!(m.lop.is_none());
        assert!(m
            .store
            .iter()
            .all(|(_, p)| !p.name.starts_with("heads.lop")));
        let scored = m.score_document(&d, &labels()).unwrap();

        let prep = m.prepare(&d).unwrap();
        let tape = Tape::new();
        let enc = m.doc_encoder.forward(&tape, &m.store, &prep.ids);
        let mentions = mention_vectors(&tape, enc.embeddings, &prep.mention_tokens);
        let ents = entity_vectors(
            &tape,
            mentions,
            &prep.entity_mentions,
            PoolingStrategy::Mean,
        );
        let pairs = enumerate_pairs(&d).unwrap();
        let h: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let t: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let rel = m
            .relation
            .relation_repr(&tape, &m.store, ents.select_rows(&h), ents.select_rows(&t))
            .unwrap();
        let direct = rel
            .matmul_t(tape.constant(m.label_embeddings(&labels()).unwrap()))
            .to_array();
        assert_eq!(scored.logits, direct);
    }

    #[test]
    fn batch_loss_targets_and_gradients_reach_every_head() {
        let d = doc();
        for loss in [LossKind::Focal, LossKind::AdaptiveThreshold] {
            let mut cfg = small_config();
            cfg.loss = loss;
            let m = model(cfg, &d);
            let prep = m.prepare(&d).unwrap();
            let tape = Tape::new();
            let out = m
                .batch_loss(&tape, &[(&d, &prep)], &labels(), None, 0)
                .unwrap();
            assert_eq!(out.pairs, 9);
            assert_eq!(out.positives, 2);
            assert!(out.loss.scalar() > 0.0);
            let g = tape.backward(out.loss, m.store.len());
            for prefix in [
                "heads.pair",
                "heads.lop_head",
                "heads.lop_tail",
                "encoder_doc",
                "encoder_label",
            ] {
                let touched = m
                    .store
                    .iter()
                    .filter(|(_, p)| p.name.starts_with(prefix))
                    .any(|(id, _)| g.get(id).is_some_and(|a| a.iter().any(|&v| v != 0.0)));
                assert!(touched, "{prefix} got no gradient under {loss}");
            }
            if loss == LossKind::AdaptiveThreshold {
                let id = m.store.id("heads.threshold.0.w").unwrap();
                assert!(g.get(id).is_some_and(|a| a.iter().any(|&v| v != 0.0)));
            }
        }
    }

    #[test]
    fn pair_cap_limits_training_pairs() {
        let d = doc();
        let m = model(small_config(), &d);
        let prep = m.prepare(&d).unwrap();
        let tape = Tape::new();
        let out = m
            .batch_loss(&tape, &[(&d, &prep)], &labels(), Some(4), 3)
            .unwrap();
        assert_eq!(out.pairs, 4);
        assert_eq!(out.positives, 2);
    }

    #[test]
    fn predictions_follow_scores() {
        let d = doc();
        let m = model(small_config(), &d);
        let scored = m.score_document(&d, &labels()).unwrap();
        let scores = scored.scores();
        let preds = scored.predictions(&labels(), 0.5);
        let expected = scores.iter().filter(|&&s| s > 0.5).count();
        assert_eq!(preds.len(), expected);
        assert!(preds.iter().all(|p| p.score > 0.5));
        assert!(scored.predictions(&labels(), 0.999_999_999).len() <= preds.len());
    }

    #[test]
    fn lop_contexts_differ_across_pairs() {
        let d = doc();
        let m = model(small_config(), &d);
        let prep = m.prepare(&d).unwrap();
        let tape = Tape::new();
        let enc = m.doc_encoder.forward(&tape, &m.store, &prep.ids);
        let att = entity_attention_rows(&tape, enc.attention, prep.entity_token_weights.clone());
        let (ctx, fallbacks) = localized_context(
            att.select_rows(&[0, 0]),
            att.select_rows(&[1, 2]),
            enc.embeddings,
        );
        assert_eq!(fallbacks, 0);
        let c = ctx.to_array();
        assert_ne!(c.row(0), c.row(1));
    }
}
