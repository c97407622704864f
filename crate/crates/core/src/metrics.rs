//! Micro F1 and Ign F1 over relation triplets.
//!
//! Ign F1 follows the official DocRED scorer: a correct prediction whose
//! `(head name, tail name, relation)` fact also appears in the training
//! annotations (under any mention name of either entity) is removed from
//! both the true positives and the prediction count. Recall is unchanged.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::Document;
use crate::dataset::Prediction;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ign_precision: f64,
    pub ign_recall: f64,
    pub ign_f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ignored_correct: usize,
    pub predictions: usize,
    pub gold: usize,
    pub duplicates: usize,
}

/// Relational facts from training data, as entity name strings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainFactSet(HashSet<(String, String, String)>);

impl TrainFactSet {
    pub fn from_documents(documents: &[Document]) -> Self {
        let mut facts = HashSet::new();
        for d in documents {
            for g in &d.gold_labels {
                for hm in &d.entities[g.head_index].mentions {
                    for tm in &d.entities[g.tail_index].mentions {
                        facts.insert((
                            hm.surface.clone(),
                            tm.surface.clone(),
                            g.relation_id.clone(),
                        ));
                    }
                }
            }
        }
        Self(facts)
    }

    pub fn contains(&self, head: &str, tail: &str, relation: &str) -> bool {
        self.0
            .contains(&(head.to_string(), tail.to_string(), relation.to_string()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Score predictions against gold documents. Predictions name documents by
/// `doc_id` in their `title` field.
pub fn evaluate(
    preds: &[Prediction],
    gold_docs: &[Document],
    train_facts: &TrainFactSet,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Document> =
        gold_docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut gold: HashSet<(&str, usize, usize, &str)> = HashSet::new();
    for d in gold_docs {
        for g in &d.gold_labels {
            gold.insert((
                d.doc_id.as_str(),
                g.head_index,
                g.tail_index,
                g.relation_id.as_str(),
            ));
        }
    }

    let mut seen = HashSet::new();
    let mut duplicates = 0;
    let mut tp = 0;
    let mut ignored_correct = 0;
    for p in preds {
        let Some(doc) = by_id.get(p.title.as_str()) else {
            return Err(Error::UnknownDocument(p.title.clone()));
        };
        if p.h_idx >= doc.entities.len() || p.t_idx >= doc.entities.len() {
            return Err(Error::InvalidArgument {
                arg: "predictions",
                reason: format!(
                    "`{}`: entity index out of range in ({}, {})",
                    p.title, p.h_idx, p.t_idx
                ),
            });
        }
        if !seen.insert((p.title.as_str(), p.h_idx, p.t_idx, p.r.as_str())) {
            duplicates += 1;
            continue;
        }
        if !gold.contains(&(doc.doc_id.as_str(), p.h_idx, p.t_idx, p.r.as_str())) {
            continue;
        }
        tp += 1;
        let in_train = doc.entities[p.h_idx].mentions.iter().any(|hm| {
            doc.entities[p.t_idx]
                .mentions
                .iter()
                .any(|tm| train_facts.contains(&hm.surface, &tm.surface, &p.r))
        });
        if in_train {
            ignored_correct += 1;
        }
    }
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate predictions ignored");
    }

    let predictions = seen.len();
    let precision = ratio(tp, predictions);
    let recall = ratio(tp, gold.len());
    let ign_precision = ratio(tp - ignored_correct, predictions - ignored_correct);
    Ok(EvalReport {
        precision,
        recall,
        f1: harmonic(precision, recall),
        ign_precision,
        ign_recall: recall,
        ign_f1: harmonic(ign_precision, recall),
        tp,
        fp: predictions - tp,
        fn_: gold.len() - tp,
        ignored_correct,
        predictions,
        gold: gold.len(),
        duplicates,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// Divides by `n - 1`.
    #[default]
    Sample,
    /// Divides by `n`.
    Population,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64], kind: StdKind) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("no values to aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(MeanStd { mean, std: 0.0 });
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let den = match kind {
        StdKind::Sample => n - 1.0,
        StdKind::Population => n,
    };
    Ok(MeanStd {
        mean,
        std: (ss / den).sqrt(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub ign_precision: MeanStd,
    pub ign_recall: MeanStd,
    pub ign_f1: MeanStd,
}

pub fn aggregate_runs(reports: &[EvalReport], kind: StdKind) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to aggregate"));
    }
    let col = |f: fn(&EvalReport) -> f64| -> Result<MeanStd> {
        mean_std(&reports.iter().map(f).collect::<Vec<_>>(), kind)
    };
    Ok(Aggregate {
        runs: reports.len(),
        precision: col(|r| r.precision)?,
        recall: col(|r| r.recall)?,
        f1: col(|r| r.f1)?,
        ign_precision: col(|r| r.ign_precision)?,
        ign_recall: col(|r| r.ign_recall)?,
        ign_f1: col(|r| r.ign_f1)?,
    })
}

/// Aligned two-column text table of a report.
pub fn render_report(report: &EvalReport) -> String {
    let rows: Vec<(&str, String)> = vec![
        ("precision", format!("{:.4}", report.precision)),
        ("recall", format!("{:.4}", report.recall)),
        ("f1", format!("{:.4}", report.f1)),
        ("ign_precision", format!("{:.4}", report.ign_precision)),
        ("ign_recall", format!("{:.4}", report.ign_recall)),
        ("ign_f1", format!("{:.4}", report.ign_f1)),
        ("tp", report.tp.to_string()),
        ("fp", report.fp.to_string()),
        ("fn", report.fn_.to_string()),
        ("ignored_correct", report.ignored_correct.to_string()),
        ("predictions", report.predictions.to_string()),
        ("gold", report.gold.to_string()),
    ];
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let vwidth = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    rows.iter()
        .map(|(k, v)| format!("{k:<width$}  {v:>vwidth$}\n"))
        .collect()
}

/// Distinct relation ids among predictions, for debugging dumps.
pub fn predicted_relations(preds: &[Prediction]) -> BTreeSet<&str> {
    preds.iter().map(|p| p.r.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Entity, GoldFact, Mention};
    use crate::rng::SeededRng;

    fn doc(id: &str, names: &[&str], gold: &[(usize, usize, &str)]) -> Document {
        let words: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let entities = (0..names.len())
            .map(|i| Entity {
                entity_index: i,
                mentions: vec![Mention {
                    sent_index: 0,
                    token_start: i,
                    token_end: i + 1,
                    surface: names[i].to_string(),
                }],
                entity_type: String::new(),
            })
            .collect();
        let gold = gold
            .iter()
            .map(|&(h, t, r)| GoldFact {
                head_index: h,
                tail_index: t,
                relation_id: r.into(),
            })
            .collect();
        Document::new(id, id, vec![words], entities, gold, None).unwrap()
    }

    fn pred(title: &str, h: usize, t: usize, r: &str) -> Prediction {
        Prediction {
            title: title.into(),
            h_idx: h,
            t_idx: t,
            r: r.into(),
            score: 1.0,
        }
    }

    fn gold_as_preds(docs: &[Document]) -> Vec<Prediction> {
        docs.iter()
            .flat_map(|d| {
                d.gold_labels
                    .iter()
                    .map(move |g| pred(&d.doc_id, g.head_index, g.tail_index, &g.relation_id))
            })
            .collect()
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let docs = vec![doc("a", &["x", "y", "z"], &[(0, 1, "P1"), (2, 0, "P2")])];
        let r = evaluate(&gold_as_preds(&docs), &docs, &TrainFactSet::default()).unwrap();
        assert_eq!((r.f1, r.ign_f1), (1.0, 1.0));
        let r = evaluate(&[], &docs, &TrainFactSet::default()).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn worked_ign_example() {
        let test = vec![doc(
            "t",
            &["x", "y", "z"],
            &[(0, 1, "P1"), (1, 2, "P1"), (2, 0, "P2")],
        )];
        let train = vec![doc("tr", &["x", "y"], &[(0, 1, "P1")])];
        let facts = TrainFactSet::from_documents(&train);
        let preds = vec![pred("t", 0, 1, "P1"), pred("t", 0, 2, "P3")];
        let r = evaluate(&preds, &test, &facts).unwrap();
        assert_eq!(
            (r.tp, r.predictions, r.gold, r.ignored_correct),
            (1, 2, 3, 1)
        );
        assert!((r.f1 - 0.4).abs() < 1e-12);
        assert_eq!(r.ign_f1, 0.0);
    }

    #[test]
    fn train_fact_names_cover_every_mention() {
        let mut train = doc("tr", &["Paris", "France"], &[(0, 1, "P17")]);
        train.entities[0].mentions.push(Mention {
            sent_index: 0,
            token_start: 1,
            token_end: 2,
            surface: "City of Light".into(),
        });
        let facts = TrainFactSet::from_documents(&[train]);
        assert!(facts.contains("City of Light", "France", "P17"));
        assert!(facts.contains("Paris", "France", "P17"));
        assert!(!facts.contains("France", "Paris", "P17"));
    }

    #[test]
    fn duplicates_and_unknown_documents() {
        let docs = vec![doc("a", &["x", "y"], &[(0, 1, "P1")])];
        let preds = vec![pred("a", 0, 1, "P1"), pred("a", 0, 1, "P1")];
        let r = evaluate(&preds, &docs, &TrainFactSet::default()).unwrap();
        assert_eq!((r.tp, r.predictions, r.duplicates), (1, 1, 1));
        assert!(matches!(
            evaluate(&[pred("zz", 0, 0, "P1")], &docs, &TrainFactSet::default()),
            Err(Error::UnknownDocument(_))
        ));
    }

    /// Quadratic matcher written independently of `evaluate`.
    fn brute_force(
        preds: &[Prediction],
        docs: &[Document],
        train: &[Document],
    ) -> (usize, usize, usize, usize) {
        let mut unique: Vec<&Prediction> = Vec::new();
        for p in preds {
            if !unique.iter().any(|q| {
                q.title == p.title && q.h_idx == p.h_idx && q.t_idx == p.t_idx && q.r == p.r
            }) {
                unique.push(p);
            }
        }
        let mut gold_list = Vec::new();
        for d in docs {
            for g in &d.gold_labels {
                let key = (
                    d.doc_id.clone(),
                    g.head_index,
                    g.tail_index,
                    g.relation_id.clone(),
                );
                if !gold_list.contains(&key) {
                    gold_list.push(key);
                }
            }
        }
        let mut tp = 0;
        let mut ign = 0;
        for p in &unique {
            let hit = gold_list
                .iter()
                .any(|g| g.0 == p.title && g.1 == p.h_idx && g.2 == p.t_idx && g.3 == p.r);
            if !hit {
                continue;
            }
            tp += 1;
            let d = docs.iter().find(|d| d.doc_id == p.title).unwrap();
            let mut found = false;
            for td in train {
                for g in &td.gold_labels {
                    if g.relation_id != p.r {
                        continue;
                    }
                    for a in &td.entities[g.head_index].mentions {
                        for b in &td.entities[g.tail_index].mentions {
                            for x in &d.entities[p.h_idx].mentions {
                                for y in &d.entities[p.t_idx].mentions {
                                    if a.surface == x.surface && b.surface == y.surface {
                                        found = true;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if found {
                ign += 1;
            }
        }
        (tp, unique.len(), gold_list.len(), ign)
    }

    pub(crate) fn random_corpus(
        rng: &mut SeededRng,
        prefix: &str,
        names: &[&str],
    ) -> Vec<Document> {
        let rels = ["P1", "P2", "P3"];
        (0..1 + rng.below(5) as usize)
            .map(|i| {
                let m = 1 + rng.below(6) as usize;
                let ents: Vec<&str> = (0..m)
                    .map(|_| names[rng.below(names.len() as u64) as usize])
                    .collect();
                let gold: Vec<(usize, usize, &str)> = (0..rng.below(8))
                    .map(|_| {
                        (
                            rng.below(m as u64) as usize,
                            rng.below(m as u64) as usize,
                            rels[rng.below(3) as usize],
                        )
                    })
                    .collect();
                doc(&format!("{prefix}{i}"), &ents, &gold)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_corpora() {
        let names = ["a", "b", "c", "d"];
        let mut rng = SeededRng::new(77);
        for _ in 0..100 {
            let docs = random_corpus(&mut rng, "d", &names);
            let train = random_corpus(&mut rng, "tr", &names);
            let mut preds = Vec::new();
            for d in &docs {
                let m = d.entities.len() as u64;
                for _ in 0..rng.below(10) {
                    preds.push(pred(
                        &d.doc_id,
                        rng.below(m) as usize,
                        rng.below(m) as usize,
                        ["P1", "P2", "P3"][rng.below(3) as usize],
                    ));
                }
            }
            let r = evaluate(&preds, &docs, &TrainFactSet::from_documents(&train)).unwrap();
            let (tp, np, ng, ign) = brute_force(&preds, &docs, &train);
            assert_eq!(
                (r.tp, r.predictions, r.gold, r.ignored_correct),
                (tp, np, ng, ign)
            );
            assert_eq!(r.fp + r.tp, r.predictions);
            assert_eq!(r.fn_ + r.tp, r.gold);
            let gp = evaluate(&gold_as_preds(&docs), &docs, &TrainFactSet::default()).unwrap();
            if gp.gold > 0 {
                assert_eq!(gp.f1, 1.0);
            }
        }
    }

    #[test]
    fn aggregation() {
        let mk = |f1: f64| EvalReport {
            f1,
            ..Default::default()
        };
        let a = aggregate_runs(&[mk(0.7)], StdKind::Sample).unwrap();
        assert_eq!((a.f1.mean, a.f1.std), (0.7, 0.0));
        let a = aggregate_runs(&[mk(0.5), mk(0.5), mk(0.5)], StdKind::Sample).unwrap();
        assert_eq!(a.f1.std, 0.0);
        let a = aggregate_runs(&[mk(0.2), mk(0.4)], StdKind::Sample).unwrap();
        assert!((a.f1.mean - 0.3).abs() < 1e-12);
        assert!((a.f1.std - (0.02f64).sqrt()).abs() < 1e-12);
        let p = aggregate_runs(&[mk(0.2), mk(0.4)], StdKind::Population).unwrap();
        assert!((p.f1.std - 0.1).abs() < 1e-12);
        assert!(aggregate_runs(&[], StdKind::Sample).is_err());
    }

    #[test]
    fn table_is_aligned() {
        let t = render_report(&EvalReport::default());
        let widths: HashSet<usize> = t.lines().map(str::len).collect();
        assert_eq!(widths.len(), 1);
        assert!(t.contains("ign_f1"));
    }
}
