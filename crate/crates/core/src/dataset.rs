//! Corpus and prediction files.
//!
//! Supervised corpora use the public DocRED JSON layout (`title`, `sents`,
//! `vertexSet`, `labels`) with a `rel_info.json` id → name map. The
//! pretraining corpus is line-delimited JSON with word offsets and free
//! string labels. Predictions are line-delimited `{title, h_idx, t_idx, r,
//! score}` records.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Document, Entity, GoldFact, Mention, RelationLabelSet};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub split: Split,
    pub documents: Vec<Document>,
}

/// Read `rel_info.json`; labels are ordered by id.
pub fn load_rel_info(path: &Path) -> Result<RelationLabelSet> {
    let map: BTreeMap<String, String> =
        serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
    RelationLabelSet::new(map.into_iter().collect())
}

pub fn save_rel_info(labels: &RelationLabelSet, path: &Path) -> Result<()> {
    let map: BTreeMap<&str, &str> = labels.iter().collect();
    std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

struct Walker<'a> {
    doc: &'a str,
}

impl Walker<'_> {
    fn err(&self, path: &str, reason: impl Into<String>) -> Error {
        Error::Schema {
            doc: self.doc.to_string(),
            path: path.to_string(),
            reason: reason.into(),
        }
    }

    fn array<'v>(&self, v: Option<&'v Value>, path: &str) -> Result<&'v Vec<Value>> {
        match v {
            Some(Value::Array(a)) => Ok(a),
            Some(_) => Err(self.err(path, "expected an array")),
            None => Err(self.err(path, "missing")),
        }
    }

    fn str<'v>(&self, v: Option<&'v Value>, path: &str) -> Result<&'v str> {
        v.and_then(Value::as_str)
            .ok_or_else(|| self.err(path, "expected a string"))
    }

    fn index(&self, v: Option<&Value>, path: &str) -> Result<usize> {
        v.and_then(Value::as_u64)
            .map(|n| n as usize)
            .ok_or_else(|| self.err(path, "expected a non-negative integer"))
    }
}

fn parse_docred(v: &Value, position: usize, labels: &RelationLabelSet) -> Result<Document> {
    let title = v
        .get("title")
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| format!("#{position}"));
    let w = Walker { doc: &title };
    w.str(v.get("title"), "title")?;

    let mut sentences = Vec::new();
    for (i, s) in w.array(v.get("sents"), "sents")?.iter().enumerate() {
        let path = format!("sents[{i}]");
        let words = w
            .array(Some(s), &path)?
            .iter()
            .enumerate()
            .map(|(j, t)| w.str(Some(t), &format!("{path}[{j}]")).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        sentences.push(words);
    }

    let mut entities = Vec::new();
    for (e, vertex) in w.array(v.get("vertexSet"), "vertexSet")?.iter().enumerate() {
        let path = format!("vertexSet[{e}]");
        let raw = w.array(Some(vertex), &path)?;
        if raw.is_empty() {
            return Err(w.err(&path, "entity has no mentions"));
        }
        let mut mentions = Vec::new();
        let mut entity_type = String::new();
        for (m, mv) in raw.iter().enumerate() {
            let mp = format!("{path}[{m}]");
            let pos = w.array(mv.get("pos"), &format!("{mp}.pos"))?;
            if pos.len() != 2 {
                return Err(w.err(&format!("{mp}.pos"), "expected [start, end]"));
            }
            let start = w.index(pos.first(), &format!("{mp}.pos[0]"))?;
            let end = w.index(pos.get(1), &format!("{mp}.pos[1]"))?;
            let sent_index = w.index(mv.get("sent_id"), &format!("{mp}.sent_id"))?;
            if start >= end {
                return Err(w.err(
                    &format!("{mp}.pos"),
                    format!("start {start} is not before end {end}"),
                ));
            }
            let Some(sent) = sentences.get(sent_index) else {
                return Err(w.err(
                    &format!("{mp}.sent_id"),
                    format!("sentence {sent_index} does not exist"),
                ));
            };
            if end > sent.len() {
                return Err(w.err(
                    &format!("{mp}.pos"),
                    format!("end {end} exceeds sentence length {}", sent.len()),
                ));
            }
            if m == 0 {
                entity_type = mv
                    .get("type")
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_string();
            }
            mentions.push(Mention {
                sent_index,
                token_start: start,
                token_end: end,
                surface: w.str(mv.get("name"), &format!("{mp}.name"))?.to_string(),
            });
        }
        entities.push(Entity {
            entity_index: e,
            mentions,
            entity_type,
        });
    }

    let mut gold = Vec::new();
    if let Some(raw) = v.get("labels") {
        for (i, l) in w.array(Some(raw), "labels")?.iter().enumerate() {
            let path = format!("labels[{i}]");
            let head_index = w.index(l.get("h"), &format!("{path}.h"))?;
            let tail_index = w.index(l.get("t"), &format!("{path}.t"))?;
            let relation_id = w.str(l.get("r"), &format!("{path}.r"))?.to_string();
            if head_index >= entities.len() || tail_index >= entities.len() {
                return Err(w.err(&path, "entity index out of range"));
            }
            gold.push(GoldFact {
                head_index,
                tail_index,
                relation_id,
            });
        }
    }
    Document::new(
        title.clone(),
        title,
        sentences,
        entities,
        gold,
        Some(labels),
    )
}

/// Load a DocRED-layout JSON array. Document ids are the titles, with a
/// `#k` suffix on repeats so ids stay unique.
pub fn load_corpus(path: &Path, rel_info: &RelationLabelSet, split: Split) -> Result<CorpusFile> {
    let raw: Value = serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
    let Value::Array(items) = raw else {
        return Err(Error::Schema {
            doc: path.display().to_string(),
            path: "$".into(),
            reason: "expected a JSON array of documents".into(),
        });
    };
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut documents = Vec::with_capacity(items.len());
    for (i, v) in items.iter().enumerate() {
        let mut doc = parse_docred(v, i, rel_info)?;
        let n = seen.entry(doc.doc_id.clone()).or_default();
        if *n > 0 {
            doc.doc_id = format!("{}#{n}", doc.doc_id);
        }
        *n += 1;
        documents.push(doc);
    }
    Ok(CorpusFile {
        path: path.to_path_buf(),
        split,
        documents,
    })
}

/// Write documents back out in the DocRED layout.
pub fn save_corpus(documents: &[Document], path: &Path) -> Result<()> {
    let items: Vec<Value> = documents
        .iter()
        .map(|d| {
            serde_json::json!({
                "title": d.title,
                "sents": d.sentences,
                "vertexSet": d.entities.iter().map(|e| e.mentions.iter().map(|m| serde_json::json!({
                    "name": m.surface,
                    "sent_id": m.sent_index,
                    "pos": [m.token_start, m.token_end],
                    "type": e.entity_type,
                })).collect::<Vec<_>>()).collect::<Vec<_>>(),
                "labels": d.gold_labels.iter().map(|g| serde_json::json!({
                    "h": g.head_index,
                    "t": g.tail_index,
                    "r": g.relation_id,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    std::fs::write(path, serde_json::to_string(&items)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            sizes: vec![1, 5, 10, 50, 100, 500, 1000],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl FewShotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::InvalidArgument {
                arg: "sizes",
                reason: "sizes must be a non-empty list of positive integers".into(),
            });
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument {
                arg: "seeds",
                reason: "at least one seed is required".into(),
            });
        }
        Ok(())
    }
}

/// `n` documents drawn uniformly without replacement, returned in corpus
/// order. For a fixed seed the draw is a prefix of one permutation, so
/// smaller subsets are contained in larger ones.
pub fn sample_fewshot(documents: &[Document], n: usize, seed: u64) -> Result<Vec<Document>> {
    if n > documents.len() {
        return Err(Error::InvalidArgument {
            arg: "n",
            reason: format!("{n} exceeds corpus size {}", documents.len()),
        });
    }
    let mut chosen = SeededRng::new(seed).permutation(documents.len());
    chosen.truncate(n);
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| documents[i].clone()).collect())
}

pub const DEFAULT_MAX_PRETRAIN_WORDS: usize = 1024;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub total: usize,
    pub malformed: usize,
    pub over_length: usize,
    pub kept: usize,
}

/// Word offsets into the whitespace-split text, end exclusive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainMention {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEntity {
    /// Integer or string.
    pub id: Value,
    pub mentions: Vec<PretrainMention>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRelation {
    pub head: Value,
    pub tail: Value,
    pub label: String,
}

/// One line of the pretraining corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub text: String,
    pub entities: Vec<PretrainEntity>,
    #[serde(default)]
    pub relations: Vec<PretrainRelation>,
}

/// Why a pretraining record would be skipped by the loader.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PretrainSkip {
    Malformed(String),
    OverLength,
}

/// Apply the loader's checks to one record.
pub fn check_pretrain_record(
    rec: &PretrainRecord,
    max_words: usize,
) -> std::result::Result<Document, PretrainSkip> {
    record_to_document(rec, "check".into(), max_words)
}

fn id_key(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_pretrain_line(
    line: &str,
    doc_id: String,
    max_words: usize,
) -> std::result::Result<Document, PretrainSkip> {
    let rec: PretrainRecord =
        serde_json::from_str(line).map_err(|e| PretrainSkip::Malformed(e.to_string()))?;
    record_to_document(&rec, doc_id, max_words)
}

fn record_to_document(
    rec: &PretrainRecord,
    doc_id: String,
    max_words: usize,
) -> std::result::Result<Document, PretrainSkip> {
    let words: Vec<String> = rec.text.split_whitespace().map(str::to_string).collect();
    if words.is_empty() {
        return Err(PretrainSkip::Malformed("empty text".into()));
    }
    if words.len() > max_words {
        return Err(PretrainSkip::OverLength);
    }
    if rec.entities.is_empty() {
        return Err(PretrainSkip::Malformed("no entities".into()));
    }
    let mut by_id = HashMap::new();
    let mut entities = Vec::with_capacity(rec.entities.len());
    for (i, e) in rec.entities.iter().enumerate() {
        let key =
            id_key(&e.id).ok_or_else(|| PretrainSkip::Malformed(format!("entity {i}: bad id")))?;
        if by_id.insert(key, i).is_some() {
            return Err(PretrainSkip::Malformed(format!("entity {i}: duplicate id")));
        }
        let mut mentions = Vec::with_capacity(e.mentions.len());
        for m in &e.mentions {
            if m.start >= m.end || m.end > words.len() {
                return Err(PretrainSkip::Malformed(format!(
                    "entity {i}: span [{}, {}) invalid",
                    m.start, m.end
                )));
            }
            mentions.push(Mention {
                sent_index: 0,
                token_start: m.start,
                token_end: m.end,
                surface: words[m.start..m.end].join(" "),
            });
        }
        entities.push(Entity {
            entity_index: i,
            mentions,
            entity_type: String::new(),
        });
    }
    let mut gold = Vec::with_capacity(rec.relations.len());
    for r in &rec.relations {
        let find = |v: &Value| id_key(v).and_then(|k| by_id.get(&k).copied());
        let (Some(head_index), Some(tail_index)) = (find(&r.head), find(&r.tail)) else {
            return Err(PretrainSkip::Malformed(
                "relation references an unknown entity".into(),
            ));
        };
        if r.label.trim().is_empty() {
            return Err(PretrainSkip::Malformed("empty relation label".into()));
        }
        gold.push(GoldFact {
            head_index,
            tail_index,
            relation_id: r.label.clone(),
        });
    }
    Document::new(doc_id.clone(), doc_id, vec![words], entities, gold, None)
        .map_err(|e| PretrainSkip::Malformed(e.to_string()))
}

/// Load the line-delimited pretraining corpus. Malformed and over-length
/// records are skipped and counted; more than half skipped is an error.
pub fn load_pretrain_corpus(path: &Path, max_words: usize) -> Result<(CorpusFile, SkipReport)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut report = SkipReport::default();
    let mut documents = Vec::new();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("pretrain");
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.total += 1;
        match parse_pretrain_line(&line, format!("{stem}:{}", i + 1), max_words) {
            Ok(doc) => documents.push(doc),
            Err(PretrainSkip::OverLength) => {
                log::debug!("{}:{}: over length, skipped", path.display(), i + 1);
                report.over_length += 1;
            }
            Err(PretrainSkip::Malformed(reason)) => {
                log::debug!("{}:{}: malformed, skipped: {reason}", path.display(), i + 1);
                report.malformed += 1;
            }
        }
    }
    report.kept = documents.len();
    let skipped = report.malformed + report.over_length;
    if skipped * 2 > report.total {
        return Err(Error::CorruptCorpus {
            path: path.display().to_string(),
            skipped,
            total: report.total,
        });
    }
    Ok((
        CorpusFile {
            path: path.to_path_buf(),
            split: Split::Train,
            documents,
        },
        report,
    ))
}

/// One predicted triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub title: String,
    pub h_idx: usize,
    pub t_idx: usize,
    pub r: String,
    pub score: f64,
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut preds = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let v: Value = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        for field in ["title", "h_idx", "t_idx", "r", "score"] {
            if v.get(field).is_none() {
                return Err(err(format!("missing field `{field}`")));
            }
        }
        preds.push(serde_json::from_value(v).map_err(|e| err(e.to_string()))?);
    }
    Ok(preds)
}
