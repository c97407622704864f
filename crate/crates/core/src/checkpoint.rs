//! Checkpoint directories.
//!
//! ```text
//! <dir>/encoder_doc/params.json
//! <dir>/encoder_label/params.json
//! <dir>/heads/params.json
//! <dir>/vocab.txt
//! <dir>/labels.json      relation schema, when known
//! <dir>/config           key = value
//! <dir>/metadata.json    git hash, seed, step, dev F1
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::RelationLabelSet;
use crate::dataset::{load_rel_info, save_rel_info};
use crate::encoder::BackendKind;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, DOC_ENCODER, LABEL_ENCODER};
use crate::tokenizer::Vocab;
use crate::trainer::TrainConfig;

const HEADS: &str = "heads";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub git_hash: String,
    pub seed: u64,
    pub step: usize,
    pub dev_f1: Option<f64>,
}

impl Metadata {
    pub fn new(seed: u64, step: usize, dev_f1: Option<f64>) -> Self {
        Self {
            git_hash: git_hash(),
            seed,
            step,
            dev_f1,
        }
    }
}

/// Current commit of the working directory, or `unknown`.
pub fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn section(name: &str) -> &'static str {
    if name.starts_with(&format!("{DOC_ENCODER}.")) {
        DOC_ENCODER
    } else if name.starts_with(&format!("{LABEL_ENCODER}.")) {
        LABEL_ENCODER
    } else {
        HEADS
    }
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save(
    dir: &Path,
    model: &Model,
    labels: Option<&RelationLabelSet>,
    metadata: &Metadata,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let mut sections: BTreeMap<&str, BTreeMap<&str, Tensor>> = BTreeMap::new();
    for s in [DOC_ENCODER, LABEL_ENCODER, HEADS] {
        sections.insert(s, BTreeMap::new());
    }
    for (_, p) in model.store.iter() {
        let (rows, cols) = p.value.dim();
        let tensor = Tensor {
            rows,
            cols,
            data: p.value.iter().copied().collect(),
        };
        sections
            .get_mut(section(&p.name))
            .expect("known section")
            .insert(&p.name, tensor);
    }
    for (name, tensors) in &sections {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub)?;
        let f = std::io::BufWriter::new(std::fs::File::create(sub.join("params.json"))?);
        serde_json::to_writer(f, tensors)?;
    }
    model.vocab.save(&dir.join("vocab.txt"))?;
    if let Some(labels) = labels {
        save_rel_info(labels, &dir.join("labels.json"))?;
    }
    let run = RunConfig {
        model: model.config.clone(),
        train: train.cloned().unwrap_or_default(),
    };
    std::fs::write(dir.join("config"), run.render())?;
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(metadata)?,
    )?;
    Ok(())
}

fn read_section(dir: &Path, name: &str) -> Result<BTreeMap<String, Array2<f64>>> {
    let path = dir.join(name).join("params.json");
    let text = std::fs::read_to_string(&path).map_err(|e| ckpt_err(&path, e.to_string()))?;
    let raw: BTreeMap<String, Tensor> =
        serde_json::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
    raw.into_iter()
        .map(|(k, t)| {
            let arr = Array2::from_shape_vec((t.rows, t.cols), t.data)
                .map_err(|e| ckpt_err(&path, format!("tensor `{k}`: {e}")))?;
            Ok((k, arr))
        })
        .collect()
}

/// Overwrite every parameter whose name is in `tensors`. Every parameter
/// matching one of `prefixes` must be present with the right shape.
fn install(
    model: &mut Model,
    tensors: &BTreeMap<String, Array2<f64>>,
    prefixes: &[&str],
    dir: &Path,
) -> Result<()> {
    let mut used = 0;
    for (_, p) in model.store.iter_mut() {
        if !prefixes
            .iter()
            .any(|pre| p.name.starts_with(&format!("{pre}.")))
        {
            continue;
        }
        let t = tensors
            .get(&p.name)
            .ok_or_else(|| ckpt_err(dir, format!("missing parameter `{}`", p.name)))?;
        if t.dim() != p.value.dim() {
            return Err(ckpt_err(
                dir,
                format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.dim(),
                    p.value.dim()
                ),
            ));
        }
        p.value.assign(t);
        used += 1;
    }
    if used != tensors.len() {
        return Err(ckpt_err(
            dir,
            format!(
                "{} stored parameters have no counterpart in the model",
                tensors.len() - used
            ),
        ));
    }
    model.clear_label_cache();
    Ok(())
}

pub struct Checkpoint {
    pub model: Model,
    pub labels: Option<RelationLabelSet>,
    pub config: RunConfig,
    pub metadata: Metadata,
    pub path: PathBuf,
}

pub fn read_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join("config");
    let text = std::fs::read_to_string(&path).map_err(|e| ckpt_err(&path, e.to_string()))?;
    RunConfig::from_text(&text).map_err(|e| ckpt_err(&path, e.to_string()))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let config = read_config(dir)?;
    let vocab =
        Vocab::load(&dir.join("vocab.txt")).map_err(|e| ckpt_err(dir, format!("vocab: {e}")))?;
    let mut model = Model::new(config.model.clone(), vocab)?;
    let mut all = BTreeMap::new();
    for s in [DOC_ENCODER, LABEL_ENCODER, HEADS] {
        all.extend(read_section(dir, s)?);
    }
    install(&mut model, &all, &[DOC_ENCODER, LABEL_ENCODER, HEADS], dir)?;
    let labels_path = dir.join("labels.json");
    let labels = if labels_path.exists() {
        Some(load_rel_info(&labels_path)?)
    } else {
        None
    };
    let meta_path = dir.join("metadata.json");
    let metadata = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| ckpt_err(&meta_path, e.to_string()))?;
    Ok(Checkpoint {
        model,
        labels,
        config,
        metadata,
        path: dir.to_path_buf(),
    })
}

/// Build a model for training. The tiny backend initialises everything from
/// the seed with `vocab`. The pretrained backend takes the vocabulary, encoder
/// architecture and encoder weights from `pretrained_dir`; heads stay fresh.
pub fn init_model(config: ModelConfig, vocab: impl FnOnce() -> Vocab) -> Result<Model> {
    config.validate()?;
    match config.encoder.backend_kind {
        BackendKind::Tiny => Model::new(config, vocab()),
        BackendKind::Pretrained => {
            let dir = config.encoder.pretrained_dir.clone().expect("validated");
            let source = read_config(&dir)?.model.encoder;
            let mut config = config;
            let enc = &mut config.encoder;
            enc.max_length = source.max_length;
            enc.hidden_size = source.hidden_size;
            enc.label_hidden_size = source.label_hidden_size;
            enc.layers = source.layers;
            enc.heads = source.heads;
            enc.ffn_size = source.ffn_size;
            enc.activation = source.activation;
            let vocab = Vocab::load(&dir.join("vocab.txt"))
                .map_err(|e| ckpt_err(&dir, format!("vocab: {e}")))?;
            let mut model = Model::new(config, vocab)?;
            let mut enc_params = read_section(&dir, DOC_ENCODER)?;
            enc_params.extend(read_section(&dir, LABEL_ENCODER)?);
            install(&mut model, &enc_params, &[DOC_ENCODER, LABEL_ENCODER], &dir)?;
            Ok(model)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::TrainFactSet;
    use crate::model::build_vocab;
    use crate::model::tests::{labels, sentence_doc, small_config};
    use crate::trainer::{evaluate_model, train};

    fn docs() -> Vec<crate::data::Document> {
        vec![
            sentence_doc(
                "ann was born in rome",
                &[&[(0, 1)], &[(4, 5)]],
                &[(0, 1, "P19")],
            ),
            sentence_doc(
                "bob works for acme",
                &[&[(0, 1)], &[(3, 4)]],
                &[(0, 1, "P108")],
            ),
        ]
    }

    fn trained() -> Model {
        let d = docs();
        let m = Model::new(small_config(), build_vocab(&d, [&labels()])).unwrap();
        let cfg = TrainConfig {
            steps: 10,
            batch_size: 2,
            lr_encoder: 1e-3,
            lr_heads: 1e-2,
            eval_every: 5,
            ..TrainConfig::default()
        };
        train(m, &d, None, Some(&labels()), &cfg, None)
            .unwrap()
            .model
    }

    #[test]
    fn round_trip_is_exact() {
        let m = trained();
        let dir = tempfile::tempdir().unwrap();
        save(
            dir.path(),
            &m,
            Some(&labels()),
            &Metadata::new(3, 10, Some(0.5)),
            None,
        )
        .unwrap();
        for f in [
            "encoder_doc/params.json",
            "encoder_label/params.json",
            "heads/params.json",
            "vocab.txt",
            "labels.json",
            "config",
            "metadata.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let ck = load(dir.path()).unwrap();
        let sorted = |l: &RelationLabelSet| {
            let mut v: Vec<(String, String)> =
                l.iter().map(|(a, b)| (a.into(), b.into())).collect();
            v.sort();
            v
        };
        assert_eq!(sorted(ck.labels.as_ref().unwrap()), sorted(&labels()));
        assert_eq!(ck.metadata.seed, 3);
        assert_eq!(ck.model.config, m.config);
        for ((_, a), (_, b)) in m.store.iter().zip(ck.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let facts = TrainFactSet::default();
        let before = evaluate_model(&m, &docs(), &labels(), &facts).unwrap();
        let after = evaluate_model(&ck.model, &docs(), &labels(), &facts).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn pretrained_backend_copies_encoders_only() {
        let m = trained();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &m, None, &Metadata::new(0, 10, None), None).unwrap();
        let mut cfg = small_config();
        cfg.seed = 99;
        cfg.encoder.backend_kind = BackendKind::Pretrained;
        cfg.encoder.pretrained_dir = Some(dir.path().to_path_buf());
        cfg.encoder.hidden_size = 64;
        let fresh = init_model(cfg, || unreachable!()).unwrap();
        assert_eq!(
            fresh.config.encoder.hidden_size,
            m.config.encoder.hidden_size
        );
        assert_eq!(fresh.vocab, m.vocab);
        let prefixes = [DOC_ENCODER, LABEL_ENCODER];
        assert_eq!(fresh.store.digest(&prefixes), m.store.digest(&prefixes));
        assert_ne!(fresh.store.digest(&["heads"]), m.store.digest(&["heads"]));
    }

    #[test]
    fn corrupt_checkpoints_are_reported() {
        let m = trained();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &m, None, &Metadata::new(0, 1, None), None).unwrap();
        std::fs::write(dir.path().join("heads/params.json"), "{}").unwrap();
        let err = load(dir.path()).err().unwrap();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        assert!(load(&dir.path().join("nowhere")).is_err());
    }
}
