//! Documents, entities, mentions and gold relation facts.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub sent_index: usize,
    /// Inclusive, sentence-local.
    pub token_start: usize,
    /// Exclusive, sentence-local.
    pub token_end: usize,
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_index: usize,
    pub mentions: Vec<Mention>,
    /// Carried through from the data; the model never reads it.
    pub entity_type: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldFact {
    pub head_index: usize,
    pub tail_index: usize,
    pub relation_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<Entity>,
    pub gold_labels: Vec<GoldFact>,
}

impl Document {
    /// Build a document, checking mention bounds and gold references.
    ///
    /// Relation ids in `gold_labels` are checked against `known_relations`
    /// when one is given.
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        sentences: Vec<Vec<String>>,
        entities: Vec<Entity>,
        gold_labels: Vec<GoldFact>,
        known_relations: Option<&RelationLabelSet>,
    ) -> Result<Self> {
        let doc = Self {
            doc_id: doc_id.into(),
            title: title.into(),
            sentences,
            entities,
            gold_labels,
        };
        doc.validate(known_relations)?;
        Ok(doc)
    }

    pub fn validate(&self, known_relations: Option<&RelationLabelSet>) -> Result<()> {
        let bad = |reason: String| Error::InvalidDocument {
            doc: self.doc_id.clone(),
            reason,
        };
        for (i, e) in self.entities.iter().enumerate() {
            if e.entity_index != i {
                return Err(bad(format!("entity {i} carries index {}", e.entity_index)));
            }
            if e.mentions.is_empty() {
                return Err(bad(format!("entity {i} has no mentions")));
            }
            for m in &e.mentions {
                let Some(sent) = self.sentences.get(m.sent_index) else {
                    return Err(bad(format!(
                        "entity {i}: mention sentence {} out of range",
                        m.sent_index
                    )));
                };
                if m.token_start >= m.token_end || m.token_end > sent.len() {
                    return Err(bad(format!(
                        "entity {i}: mention span [{}, {}) invalid for sentence of length {}",
                        m.token_start,
                        m.token_end,
                        sent.len()
                    )));
                }
            }
        }
        for g in &self.gold_labels {
            if g.head_index >= self.entities.len() || g.tail_index >= self.entities.len() {
                return Err(bad(format!(
                    "gold fact ({}, {}, {}) references a missing entity",
                    g.head_index, g.tail_index, g.relation_id
                )));
            }
            if let Some(known) = known_relations {
                if known.index_of(&g.relation_id).is_none() {
                    return Err(Error::UnknownRelation(g.relation_id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn num_words(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// All words in reading order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flatten().map(String::as_str)
    }

    /// Offset of each sentence's first word in the flattened word sequence.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            offsets.push(acc);
            acc += s.len();
        }
        offsets
    }

    /// Document-global word range `[start, end)` of a mention.
    pub fn mention_range(&self, m: &Mention, offsets: &[usize]) -> std::ops::Range<usize> {
        let base = offsets[m.sent_index];
        base + m.token_start..base + m.token_end
    }

    /// Gold facts as a set of entity pairs.
    pub fn gold_pairs(&self) -> HashSet<(usize, usize)> {
        self.gold_labels
            .iter()
            .map(|g| (g.head_index, g.tail_index))
            .collect()
    }

    /// Stable content hash (title, words and annotations).
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("document serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Ordered relation types. Order is part of the identity: label embeddings
/// and score columns follow it.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RelationLabelSet {
    labels: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl RelationLabelSet {
    pub fn new(labels: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, (id, name)) in labels.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::EmptyLabel(id.clone()));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidArgument {
                    arg: "labels",
                    reason: format!("duplicate relation id `{id}`"),
                });
            }
        }
        Ok(Self { labels, index })
    }

    /// Labels whose id doubles as the name (free-string pretraining labels).
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            names
                .into_iter()
                .map(|n| {
                    let n = n.into();
                    (n.clone(), n)
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.labels[i].0
    }

    pub fn name(&self, i: usize) -> &str {
        &self.labels[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.labels.iter().map(|(i, n)| (i.as_str(), n.as_str()))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, name) in &self.labels {
            h.update((id.len() as u64).to_le_bytes());
            h.update(id.as_bytes());
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Every ordered `(head, tail)` pair, self-pairs included, head-major.
pub fn enumerate_pairs(doc: &Document) -> Result<Vec<(usize, usize)>> {
    let m = doc.entities.len();
    if m == 0 {
        return Err(Error::NoEntities(doc.doc_id.clone()));
    }
    Ok((0..m).flat_map(|h| (0..m).map(move |t| (h, t))).collect())
}

/// Limit the number of training pairs.
///
/// Identity when `cap` is `None` or the list already fits. Otherwise every
/// pair listed in `gold` is kept first (sampled down if there are more gold
/// pairs than `cap`) and the remainder is a seeded uniform sample of the
/// other pairs. The result keeps the input order. Only for training: scoring
/// must see every pair.
pub fn pair_cap(
    pairs: &[(usize, usize)],
    cap: Option<usize>,
    rng_seed: u64,
    gold: &HashSet<(usize, usize)>,
) -> Vec<(usize, usize)> {
    let Some(cap) = cap else {
        return pairs.to_vec();
    };
    if pairs.len() <= cap {
        return pairs.to_vec();
    }
    let mut rng = SeededRng::new(rng_seed);
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..pairs.len()).partition(|&i| gold.contains(&pairs[i]));
    let mut keep: Vec<usize> = if pos.len() >= cap {
        let perm = rng.permutation(pos.len());
        perm[..cap].iter().map(|&i| pos[i]).collect()
    } else {
        let perm = rng.permutation(neg.len());
        pos.iter()
            .copied()
            .chain(perm[..cap - pos.len()].iter().map(|&i| neg[i]))
            .collect()
    };
    keep.sort_unstable();
    keep.into_iter().map(|i| pairs[i]).collect()
}
