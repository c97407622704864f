//! Zero-shot baseline with a text-completion model: mentions are tagged
//! inline, the model answers with `(head, relation, tail)` lines, and the
//! parsed triplets go through the usual metrics.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{Document, RelationLabelSet};
use crate::dataset::Prediction;
use crate::error::{Error, Result};
use crate::llm::{complete_with_retry, map_in_flight, CompletionClient, RetryPolicy};
use crate::metrics::{evaluate, EvalReport, TrainFactSet};

pub const DOCUMENT_PLACEHOLDER: &str = "{document}";
pub const LABELS_PLACEHOLDER: &str = "{labels}";

/// Reconstructed zero-shot prompt; any template with the `{document}` and
/// `{labels}` placeholders can replace it.
pub const DEFAULT_TEMPLATE: &str = r#"Extract the relations stated in the document below.
Entity mentions are marked as <eN> ... </eN>, where N is the entity index.
Mentions sharing an index refer to the same entity.

Allowed relations (id: description):
{labels}

Write one triplet per line as (head_index, relation_id, tail_index), for
example (0, P17, 2). Use only the relation ids listed above. Write nothing
else.

Document:
{document}
"#;

/// Opening and closing tag tokens for entity `i`.
pub fn tags(i: usize) -> (String, String) {
    (format!("<e{i}>"), format!("</e{i}>"))
}

static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^</?e\d+>$").expect("static regex"));
static TRIPLET: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\(\s*(\d+)\s*,\s*([^\s,()]+)\s*,\s*(\d+)\s*\)$").expect("static regex")
});

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedDocument {
    pub text: String,
    /// Mentions left untagged because they overlapped a longer one.
    pub dropped_mentions: usize,
}

/// Whitespace-joined document text with every mention wrapped in its
/// entity's tags. Overlapping mentions keep the outermost (longest, then
/// earliest, then lowest entity index).
pub fn tag_document(doc: &Document) -> TaggedDocument {
    let mut mentions: Vec<(usize, usize, usize, usize)> = doc
        .entities
        .iter()
        .enumerate()
        .flat_map(|(e, ent)| {
            ent.mentions
                .iter()
                .map(move |m| (m.sent_index, m.token_start, m.token_end, e))
        })
        .collect();
    mentions.sort_by_key(|&(s, a, b, e)| (s, std::cmp::Reverse(b - a), a, e));
    let mut kept: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut dropped = 0;
    for m in mentions {
        if kept.iter().any(|k| k.0 == m.0 && k.1 < m.2 && m.1 < k.2) {
            log::warn!(
                "{}: mention of entity {} overlaps a longer mention and is not tagged",
                doc.doc_id,
                m.3
            );
            dropped += 1;
        } else {
            kept.push(m);
        }
    }
    let mut out: Vec<String> = Vec::new();
    for (s, words) in doc.sentences.iter().enumerate() {
        for (i, w) in words.iter().enumerate() {
            for k in kept.iter().filter(|k| k.0 == s && k.1 == i) {
                out.push(tags(k.3).0);
            }
            out.push(w.clone());
            for k in kept.iter().filter(|k| k.0 == s && k.2 == i + 1) {
                out.push(tags(k.3).1);
            }
        }
    }
    TaggedDocument {
        text: out.join(" "),
        dropped_mentions: dropped,
    }
}

/// Remove tag tokens from tagged text.
pub fn strip_tags(text: &str) -> String {
    text.split_whitespace()
        .filter(|t| !TAG.is_match(t))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn render_labels(labels: &RelationLabelSet) -> String {
    labels
        .iter()
        .map(|(id, name)| format!("- {id}: {name}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_prompt(doc: &Document, labels: &RelationLabelSet, template: &str) -> Result<String> {
    check_template(template)?;
    Ok(template
        .replace(LABELS_PLACEHOLDER, &render_labels(labels))
        .replace(DOCUMENT_PLACEHOLDER, &tag_document(doc).text))
}

fn check_template(template: &str) -> Result<()> {
    for p in [DOCUMENT_PLACEHOLDER, LABELS_PLACEHOLDER] {
        if !template.contains(p) {
            return Err(Error::Config(format!(
                "zero-shot template has no {p} placeholder"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectCounts {
    pub unknown_relation: usize,
    pub out_of_range: usize,
    pub malformed: usize,
    pub duplicate: usize,
}

impl RejectCounts {
    pub fn total(&self) -> usize {
        self.unknown_relation + self.out_of_range + self.malformed + self.duplicate
    }

    fn add(&mut self, o: &RejectCounts) {
        self.unknown_relation += o.unknown_relation;
        self.out_of_range += o.out_of_range;
        self.malformed += o.malformed;
        self.duplicate += o.duplicate;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedTriplets {
    pub triplets: Vec<(usize, String, usize)>,
    pub rejects: RejectCounts,
    /// Lines that start with `(`; each is either accepted or rejected.
    pub candidates: usize,
}

/// Read `(head, relation_id, tail)` lines from a completion. Other lines are
/// ignored. Never fails.
pub fn parse_triplets(
    completion: &str,
    doc: &Document,
    labels: &RelationLabelSet,
) -> ParsedTriplets {
    let mut out = ParsedTriplets::default();
    let mut seen = HashSet::new();
    let n = doc.entities.len();
    for line in completion
        .lines()
        .map(str::trim)
        .filter(|l| l.starts_with('('))
    {
        out.candidates += 1;
        let Some(c) = TRIPLET.captures(line) else {
            log::debug!("{}: malformed triplet line `{line}`", doc.doc_id);
            out.rejects.malformed += 1;
            continue;
        };
        let (Ok(h), Ok(t)) = (c[1].parse::<usize>(), c[3].parse::<usize>()) else {
            out.rejects.out_of_range += 1;
            continue;
        };
        let r = c[2].to_string();
        if labels.index_of(&r).is_none() {
            log::debug!("{}: unknown relation in `{line}`", doc.doc_id);
            out.rejects.unknown_relation += 1;
        } else if h >= n || t >= n {
            log::debug!("{}: entity index out of range in `{line}`", doc.doc_id);
            out.rejects.out_of_range += 1;
        } else if !seen.insert((h, r.clone(), t)) {
            out.rejects.duplicate += 1;
        } else {
            out.triplets.push((h, r, t));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct ZeroShotConfig {
    pub in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub eval: EvalReport,
    pub documents: usize,
    pub failed_documents: Vec<String>,
    pub rejects: RejectCounts,
    pub candidates: usize,
    /// More than a tenth of the documents failed.
    pub degraded: bool,
}

/// Prompt the client for every document at temperature 0 and score the
/// parsed triplets. Documents whose request fails are skipped and counted.
pub fn run_zeroshot(
    docs: &[Document],
    labels: &RelationLabelSet,
    client: &dyn CompletionClient,
    template: &str,
    train_facts: &TrainFactSet,
    cfg: &ZeroShotConfig,
) -> Result<(Vec<Prediction>, ZeroShotReport)> {
    check_template(template)?;
    let prompts: Vec<String> = docs
        .iter()
        .map(|d| render_prompt(d, labels, template))
        .collect::<Result<_>>()?;
    let completions = map_in_flight(&prompts, cfg.in_flight, |p| {
        let hash = crate::llm::text_hash(p);
        complete_with_retry(client, p, 0.0, cfg.retry, &hash)
    });
    let mut preds = Vec::new();
    let mut failed = Vec::new();
    let mut rejects = RejectCounts::default();
    let mut candidates = 0;
    for (doc, completion) in docs.iter().zip(completions) {
        match completion {
            Ok(text) => {
                let parsed = parse_triplets(&text, doc, labels);
                rejects.add(&parsed.rejects);
                candidates += parsed.candidates;
                preds.extend(parsed.triplets.into_iter().map(|(h, r, t)| Prediction {
                    title: doc.doc_id.clone(),
                    h_idx: h,
                    t_idx: t,
                    r,
                    score: 1.0,
                }));
            }
            Err(e) => {
                log::warn!("{}: completion failed: {e}", doc.doc_id);
                failed.push(doc.doc_id.clone());
            }
        }
    }
    let eval = evaluate(&preds, docs, train_facts)?;
    let degraded = failed.len() * 10 > docs.len();
    if degraded {
        log::warn!(
            "{} of {} documents failed; run is degraded",
            failed.len(),
            docs.len()
        );
    }
    Ok((
        preds,
        ZeroShotReport {
            eval,
            documents: docs.len(),
            failed_documents: failed,
            rejects,
            candidates,
            degraded,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::FnClient;
    use crate::model::tests::{labels, sentence_doc};
    use std::time::Duration;

    fn doc() -> Document {
        sentence_doc(
            "ann smith was born in rome and ann works for acme",
            &[&[(0, 2), (7, 8)], &[(5, 6)], &[(10, 11)]],
            &[(0, 1, "P19"), (0, 2, "P108")],
        )
    }

    fn fast() -> ZeroShotConfig {
        ZeroShotConfig {
            in_flight: 2,
            retry: RetryPolicy {
                attempts: 1,
                base_delay: Duration::ZERO,
            },
        }
    }

    #[test]
    fn tags_every_mention_and_strips_back() {
        let d = doc();
        let t = tag_document(&d);
        assert_eq!(
            t.text,
            "<e0> ann smith </e0> was born in <e1> rome </e1> and <e0> ann </e0> works for <e2> acme </e2>"
        );
        assert_eq!(strip_tags(&t.text), d.sentences[0].join(" "));
        let single = sentence_doc("ann sings", &[&[(0, 1)]], &[]);
        let p = render_prompt(&single, &labels(), DEFAULT_TEMPLATE).unwrap();
        assert_eq!(p.matches("<e0>").count(), 1);
        assert_eq!(p.matches("</e0>").count(), 1);
        assert!(p.contains("- P19: place of birth"));
    }

    #[test]
    fn overlapping_mentions_keep_the_outermost() {
        let d = sentence_doc(
            "new york city hall",
            &[&[(0, 2)], &[(0, 3)], &[(0, 3)]],
            &[],
        );
        let t = tag_document(&d);
        assert_eq!(t.text, "<e1> new york city </e1> hall");
        assert_eq!(t.dropped_mentions, 2);
        assert_eq!(tag_document(&d), t);
        assert_eq!(strip_tags(&t.text), "new york city hall");
    }

    #[test]
    fn grammar_and_rejects() {
        let d = doc();
        let l = labels();
        let one = parse_triplets("(0, P19, 1)", &d, &l);
        assert_eq!(one.triplets, vec![(0, "P19".to_string(), 1)]);
        let unk = parse_triplets("(0, P999, 2)", &d, &l);
        assert!(unk.triplets.is_empty());
        assert_eq!(unk.rejects.unknown_relation, 1);
        let text = "Sure, here are the relations:\n(0, P19, 1)\n(0,P108,2)\n  (2, P19, 1)  \n(0, P19, 1)\nThat is all.";
        let p = parse_triplets(text, &d, &l);
        assert_eq!(p.triplets.len(), 3);
        assert_eq!(p.rejects.duplicate, 1);
        // independent scan: count distinct well-formed lines
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| l.starts_with('('))
            .collect();
        let distinct: HashSet<String> = lines.iter().map(|l| l.replace(' ', "")).collect();
        assert_eq!(p.triplets.len(), distinct.len());
        assert_eq!(p.rejects.duplicate, lines.len() - distinct.len());
        let bad = parse_triplets(
            "(0, P19)\n(9, P19, 1)\n(a, P19, 1)\n(99999999999999999999999, P19, 1)",
            &d,
            &l,
        );
        assert_eq!(bad.rejects.malformed, 2);
        assert_eq!(bad.rejects.out_of_range, 2);
        assert_eq!(bad.candidates, bad.rejects.total());
    }

    proptest::proptest! {
        #[test]
        fn parser_is_total(s in "\\PC{0,200}", lines in proptest::collection::vec("\\(?[0-9a-zP, ]{0,12}\\)?", 0..10)) {
            let d = doc();
            let text = format!("{s}\n{}", lines.join("\n"));
            let p = parse_triplets(&text, &d, &labels());
            proptest::prop_assert_eq!(p.candidates, p.triplets.len() + p.rejects.total());
        }
    }

    #[test]
    fn oracle_and_empty_clients() {
        let docs = vec![
            doc(),
            sentence_doc(
                "bob works for ibm",
                &[&[(0, 1)], &[(3, 4)]],
                &[(0, 1, "P108")],
            ),
        ];
        let l = labels();
        let gold_answer = |prompt: &str| -> Result<String> {
            let d = docs
                .iter()
                .find(|d| prompt.contains(&tag_document(d).text))
                .unwrap();
            Ok(d.gold_labels
                .iter()
                .map(|g| format!("({}, {}, {})", g.head_index, g.relation_id, g.tail_index))
                .collect::<Vec<_>>()
                .join("\n"))
        };
        let facts = TrainFactSet::default();
        let (preds, r) = run_zeroshot(
            &docs,
            &l,
            &FnClient(gold_answer),
            DEFAULT_TEMPLATE,
            &facts,
            &fast(),
        )
        .unwrap();
        assert_eq!(r.eval.f1, 1.0);
        assert!(preds.iter().all(|p| p.score == 1.0));
        let (preds, r) = run_zeroshot(
            &docs,
            &l,
            &FnClient(|_: &str| Ok(String::new())),
            DEFAULT_TEMPLATE,
            &facts,
            &fast(),
        )
        .unwrap();
        assert!(preds.is_empty());
        assert_eq!(r.eval.f1, 0.0);
        assert_eq!(r.rejects.total(), 0);
        assert!(!r.degraded);
    }

    #[test]
    fn failures_mark_the_run_degraded() {
        let docs = vec![
            doc(),
            sentence_doc(
                "bob works for ibm",
                &[&[(0, 1)], &[(3, 4)]],
                &[(0, 1, "P108")],
            ),
        ];
        let client = FnClient(|p: &str| {
            if p.contains("bob") {
                Err(Error::Client("timeout".into()))
            } else {
                Ok("(0, P19, 1)".to_string())
            }
        });
        let (preds, r) = run_zeroshot(
            &docs,
            &labels(),
            &client,
            DEFAULT_TEMPLATE,
            &TrainFactSet::default(),
            &fast(),
        )
        .unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(r.failed_documents.len(), 1);
        assert!(r.degraded);
        assert!(run_zeroshot(
            &docs,
            &labels(),
            &client,
            "{document}",
            &TrainFactSet::default(),
            &fast()
        )
        .is_err());
    }
}
