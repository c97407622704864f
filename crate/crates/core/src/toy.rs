//! Small synthetic corpus with two relations, for smoke tests and demos.
//!
//! Each document tells short stories about one or two people. `X was born
//! in Y` states `P19`, `X works for Z` states `P108`, and sentences such as
//! `X visited Y` mention the same entity types without any relation.

use std::collections::HashMap;

use crate::data::{Document, Entity, GoldFact, Mention, RelationLabelSet};
use crate::error::Result;
use crate::rng::SeededRng;

const PEOPLE: &[&str] = &[
    "alice", "bruno", "chen", "dara", "emil", "fatima", "goran", "hana", "ivan", "julia", "kofi",
    "lena", "mateo", "nadia", "oscar", "priya", "quinn", "rosa", "sven", "tomas",
];
const CITIES: &[&str] = &[
    "paris", "lagos", "lima", "oslo", "quito", "hanoi", "porto", "dakar", "riga", "perth", "turin",
    "omaha",
];
const ORGS: &[&str] = &[
    "acme corp",
    "globex",
    "initech",
    "umbrella labs",
    "stark industries",
    "wayne group",
    "hooli",
    "vandelay imports",
];

pub fn toy_labels() -> RelationLabelSet {
    RelationLabelSet::new(vec![
        ("P19".into(), "place of birth".into()),
        ("P108".into(), "employer".into()),
    ])
    .expect("static labels")
}

struct Builder {
    sentences: Vec<Vec<String>>,
    entities: Vec<Entity>,
    by_name: HashMap<String, usize>,
    gold: Vec<GoldFact>,
}

impl Builder {
    fn entity(&mut self, name: &str, kind: &str) -> usize {
        if let Some(&i) = self.by_name.get(name) {
            return i;
        }
        let i = self.entities.len();
        self.entities.push(Entity {
            entity_index: i,
            mentions: vec![],
            entity_type: kind.into(),
        });
        self.by_name.insert(name.into(), i);
        i
    }

    /// Append a sentence from `parts`; `Some((name, kind))` parts become
    /// mentions. Returns the entity index of each mention part.
    fn sentence(&mut self, parts: &[(&str, Option<&str>)]) -> Vec<usize> {
        let sent_index = self.sentences.len();
        let mut words = Vec::new();
        let mut ids = Vec::new();
        for (text, kind) in parts {
            let start = words.len();
            words.extend(text.split_whitespace().map(str::to_string));
            if let Some(kind) = kind {
                let e = self.entity(text, kind);
                self.entities[e].mentions.push(Mention {
                    sent_index,
                    token_start: start,
                    token_end: words.len(),
                    surface: text.to_string(),
                });
                ids.push(e);
            }
        }
        words.push(".".into());
        self.sentences.push(words);
        ids
    }
}

/// `n` documents drawn deterministically from `seed`.
pub fn toy_corpus(n: usize, seed: u64) -> Result<Vec<Document>> {
    let mut rng = SeededRng::new(seed);
    let labels = toy_labels();
    let pick =
        |pool: &[&'static str], rng: &mut SeededRng| pool[rng.below(pool.len() as u64) as usize];
    let mut docs = Vec::with_capacity(n);
    for d in 0..n {
        let mut b = Builder {
            sentences: vec![],
            entities: vec![],
            by_name: HashMap::new(),
            gold: vec![],
        };
        let people = 1 + rng.below(2) as usize;
        let mut plans: Vec<(u8, &str, &str)> = Vec::new();
        let mut used = Vec::new();
        for _ in 0..people {
            let p = loop {
                let p = pick(PEOPLE, &mut rng);
                if !used.contains(&p) {
                    break p;
                }
            };
            used.push(p);
            let mut any = false;
            if rng.unit() < 0.7 {
                plans.push((0, p, pick(CITIES, &mut rng)));
                any = true;
            }
            if rng.unit() < 0.7 || !any {
                plans.push((1, p, pick(ORGS, &mut rng)));
            }
            if rng.unit() < 0.5 {
                plans.push((2, p, pick(CITIES, &mut rng)));
            }
            if rng.unit() < 0.3 {
                plans.push((3, p, pick(ORGS, &mut rng)));
            }
        }
        rng.shuffle(&mut plans);
        for (kind, p, o) in plans {
            let (verb, okind, rel) = match kind {
                0 => ("was born in", "LOC", Some("P19")),
                1 => ("works for", "ORG", Some("P108")),
                2 => ("visited", "LOC", None),
                _ => ("once sued", "ORG", None),
            };
            let ids = b.sentence(&[(p, Some("PER")), (verb, None), (o, Some(okind))]);
            if let Some(rel) = rel {
                let fact = GoldFact {
                    head_index: ids[0],
                    tail_index: ids[1],
                    relation_id: rel.into(),
                };
                if !b.gold.contains(&fact) {
                    b.gold.push(fact);
                }
            }
        }
        let id = format!("toy-{seed}-{d}");
        docs.push(Document::new(
            id.clone(),
            id,
            b.sentences,
            b.entities,
            b.gold,
            Some(&labels),
        )?);
    }
    Ok(docs)
}
