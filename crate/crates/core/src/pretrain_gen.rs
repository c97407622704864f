//! Synthetic pretraining corpus generation: prompt an annotation model per
//! raw document, parse its JSON, repair spans and filter.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{
    check_pretrain_record, PretrainEntity, PretrainMention, PretrainRecord, PretrainRelation,
    PretrainSkip, DEFAULT_MAX_PRETRAIN_WORDS,
};
use crate::error::{Error, Result};
use crate::llm::{complete_with_retry, map_in_flight, text_hash, CompletionClient, RetryPolicy};

pub const DOCUMENT_PLACEHOLDER: &str = "{document}";

/// Reconstructed annotation prompt; supply your own with the same
/// `{document}` placeholder to replace it.
pub const DEFAULT_TEMPLATE: &str = r#"You are an expert annotator for information extraction.
Read the document below. List every named entity and every relation that the
document states between two entities.

Answer with a single JSON object and nothing else, using this schema:
{"entities": [{"id": <int>, "text": <string>, "type": <string>,
               "mentions": [{"start": <char offset>, "end": <char offset, exclusive>}]}],
 "relations": [{"head": <entity id>, "tail": <entity id>, "label": <UPPER_SNAKE_CASE relation name>}]}

Character offsets count from 0 over the document exactly as given.
Use short, reusable relation names such as WORKS_FOR or IS_LOCATED_IN.

Document:
{document}
"#;

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub temperature: f64,
    pub max_words: usize,
    pub in_flight: usize,
    pub retry: RetryPolicy,
    /// Largest character distance a span edge may be moved to reach a word
    /// boundary.
    pub snap_chars: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_words: DEFAULT_MAX_PRETRAIN_WORDS,
            in_flight: 4,
            retry: RetryPolicy::default(),
            snap_chars: 2,
        }
    }
}

/// `kept = returned - malformed_json - over_length`. `bad_spans` is the part
/// of `malformed_json` whose JSON parsed but whose spans could not be placed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenReport {
    pub requested: usize,
    pub returned: usize,
    pub malformed_json: usize,
    pub over_length: usize,
    pub kept: usize,
    pub unique_labels: usize,
    pub client_failures: usize,
    pub resumed: usize,
    pub bad_spans: usize,
}

#[derive(Deserialize)]
struct RawSpan {
    start: usize,
    end: usize,
}

#[derive(Deserialize)]
struct RawEntity {
    id: Value,
    mentions: Vec<RawSpan>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    entities: Vec<RawEntity>,
    #[serde(default)]
    relations: Vec<PretrainRelation>,
}

#[derive(Debug, PartialEq, Eq)]
enum Outcome {
    Malformed(String),
    BadSpan(String),
    OverLength,
}

/// Character ranges of the whitespace-separated words of `text`.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        spans.push((s, n));
    }
    spans
}

/// Map a character span to word offsets, moving each edge at most `snap`
/// characters to the nearest word boundary.
pub fn char_span_to_words(
    text: &str,
    start: usize,
    end: usize,
    snap: usize,
) -> Option<(usize, usize)> {
    let len = text.chars().count();
    if start >= end || end > len {
        return None;
    }
    let words = word_spans(text);
    let nearest = |target: usize, edge: fn(&(usize, usize)) -> usize| {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| (edge(w).abs_diff(target), i))
            .min()
            .filter(|(d, _)| *d <= snap)
            .map(|(_, i)| i)
    };
    let first = nearest(start, |w| w.0)?;
    let last = nearest(end, |w| w.1)?;
    (first <= last).then_some((first, last + 1))
}

/// Pull the JSON object out of a completion, tolerating code fences and
/// surrounding prose.
fn json_payload(completion: &str) -> &str {
    let s = completion.trim();
    match (s.find('{'), s.rfind('}')) {
        (Some(a), Some(b)) if a < b => &s[a..=b],
        _ => s,
    }
}

fn annotate(
    text: &str,
    completion: &str,
    cfg: &GenConfig,
) -> std::result::Result<PretrainRecord, Outcome> {
    if text.split_whitespace().count() > cfg.max_words {
        return Err(Outcome::OverLength);
    }
    let raw: RawAnnotation = serde_json::from_str(json_payload(completion))
        .map_err(|e| Outcome::Malformed(e.to_string()))?;
    let mut entities = Vec::with_capacity(raw.entities.len());
    for (i, e) in raw.entities.iter().enumerate() {
        let mut mentions = Vec::with_capacity(e.mentions.len());
        for m in &e.mentions {
            let (start, end) = char_span_to_words(text, m.start, m.end, cfg.snap_chars)
                .ok_or_else(|| {
                    Outcome::BadSpan(format!(
                        "entity {i}: character span [{}, {}) does not fit the text",
                        m.start, m.end
                    ))
                })?;
            let span = PretrainMention { start, end };
            if !mentions.contains(&span) {
                mentions.push(span);
            }
        }
        if mentions.is_empty() {
            return Err(Outcome::BadSpan(format!("entity {i} has no mentions")));
        }
        entities.push(PretrainEntity {
            id: e.id.clone(),
            mentions,
        });
    }
    let record = PretrainRecord {
        text: text.to_string(),
        entities,
        relations: raw.relations,
    };
    match check_pretrain_record(&record, cfg.max_words) {
        Ok(_) => Ok(record),
        Err(PretrainSkip::OverLength) => Err(Outcome::OverLength),
        Err(PretrainSkip::Malformed(reason)) => Err(Outcome::Malformed(reason)),
    }
}

pub fn render_generation_prompt(template: &str, text: &str) -> String {
    template.replace(DOCUMENT_PLACEHOLDER, text)
}

/// Annotate every document of `raw_docs` whose hash is not in `done`.
/// Kept records come back in input order.
pub fn generate(
    raw_docs: &[String],
    client: &dyn CompletionClient,
    template: &str,
    cfg: &GenConfig,
    done: &HashSet<String>,
) -> Result<(Vec<PretrainRecord>, GenReport)> {
    if !template.contains(DOCUMENT_PLACEHOLDER) {
        return Err(Error::Config(format!(
            "prompt template has no {DOCUMENT_PLACEHOLDER} placeholder"
        )));
    }
    let mut report = GenReport::default();
    let todo: Vec<(&String, String)> = raw_docs
        .iter()
        .map(|t| (t, text_hash(t)))
        .filter(|(_, h)| {
            let seen = done.contains(h);
            report.resumed += seen as usize;
            !seen
        })
        .collect();
    report.requested = todo.len();
    let completions = map_in_flight(&todo, cfg.in_flight, |(text, hash)| {
        let prompt = render_generation_prompt(template, text);
        complete_with_retry(client, &prompt, cfg.temperature, cfg.retry, hash)
    });
    let mut records = Vec::new();
    let mut labels = BTreeSet::new();
    for ((text, hash), completion) in todo.iter().zip(completions) {
        let Ok(completion) = completion else {
            report.client_failures += 1;
            continue;
        };
        report.returned += 1;
        match annotate(text, &completion, cfg) {
            Ok(rec) => {
                labels.extend(rec.relations.iter().map(|r| r.label.clone()));
                records.push(rec);
            }
            Err(Outcome::OverLength) => report.over_length += 1,
            Err(Outcome::Malformed(reason)) => {
                log::debug!("doc={hash}: malformed annotation: {reason}");
                report.malformed_json += 1;
            }
            Err(Outcome::BadSpan(reason)) => {
                log::debug!("doc={hash}: {reason}");
                report.malformed_json += 1;
                report.bad_spans += 1;
            }
        }
    }
    report.kept = records.len();
    report.unique_labels = labels.len();
    Ok((records, report))
}

/// Upper snake case: trim, collapse whitespace runs to `_`, uppercase.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
        .to_uppercase()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelNormalization {
    /// Original label to normalised label.
    pub mapping: BTreeMap<String, String>,
    /// Relations removed because their label normalised to nothing.
    pub dropped: usize,
}

pub fn normalize_labels(records: Vec<PretrainRecord>) -> (Vec<PretrainRecord>, LabelNormalization) {
    let mut norm = LabelNormalization::default();
    let records = records
        .into_iter()
        .map(|mut rec| {
            let before = rec.relations.len();
            rec.relations = rec
                .relations
                .into_iter()
                .filter_map(|mut r| {
                    let n = normalize_label(&r.label);
                    if n.is_empty() {
                        return None;
                    }
                    norm.mapping.insert(r.label.clone(), n.clone());
                    r.label = n;
                    Some(r)
                })
                .collect();
            norm.dropped += before - rec.relations.len();
            rec
        })
        .collect();
    (records, norm)
}

/// Raw documents from a directory of text files (sorted by name, one
/// document per file) or from a file with one document per line.
pub fn read_raw_documents(path: &Path) -> Result<Vec<String>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        files
            .into_iter()
            .map(|p| Ok(std::fs::read_to_string(p)?.trim().to_string()))
            .filter(|t| !matches!(t, Ok(s) if s.is_empty()))
            .collect()
    } else {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut out = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(line.trim().to_string());
            }
        }
        Ok(out)
    }
}

/// Hashes of the texts already present in an output file.
pub fn existing_hashes(path: &Path) -> Result<HashSet<String>> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = HashSet::new();
    for line in f.lines() {
        let line = line?;
        if let Ok(v) = serde_json::from_str::<HashMap<String, Value>>(&line) {
            if let Some(Value::String(t)) = v.get("text") {
                out.insert(text_hash(t));
            }
        }
    }
    Ok(out)
}

pub fn write_records(records: &[PretrainRecord], path: &Path, append: bool) -> Result<()> {
    let f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
