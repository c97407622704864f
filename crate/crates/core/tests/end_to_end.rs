use std::path::PathBuf;

use docre::checkpoint;
use docre::dataset::{load_corpus, load_rel_info, save_corpus, save_rel_info, Split};
use docre::metrics::TrainFactSet;
use docre::model::{build_vocab, Model, ModelConfig};
use docre::toy::{toy_corpus, toy_labels};
use docre::trainer::{evaluate_model, train, TrainConfig};

#[test]
fn files_train_checkpoint_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let labels = toy_labels();
    let rel_info = dir.path().join("rel_info.json");
    save_rel_info(&labels, &rel_info).unwrap();
    save_corpus(&toy_corpus(12, 0).unwrap(), &dir.path().join("train.json")).unwrap();
    save_corpus(&toy_corpus(6, 1).unwrap(), &dir.path().join("dev.json")).unwrap();

    let labels = load_rel_info(&rel_info).unwrap();
    let train_docs = load_corpus(&dir.path().join("train.json"), &labels, Split::Train)
        .unwrap()
        .documents;
    let dev_docs = load_corpus(&dir.path().join("dev.json"), &labels, Split::Dev)
        .unwrap()
        .documents;
    assert_eq!(train_docs, toy_corpus(12, 0).unwrap());

    let mut mc = ModelConfig::default();
    mc.encoder.max_length = 96;
    mc.encoder.hidden_size = 16;
    mc.encoder.label_hidden_size = 16;
    mc.encoder.latent_size = 16;
    let model = Model::new(mc, build_vocab(&train_docs, [&labels])).unwrap();
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 4,
        lr_encoder: 1e-3,
        lr_heads: 3e-3,
        eval_every: 20,
        ..TrainConfig::default()
    };
    let ckpt = dir.path().join("ckpt");
    let out = train(
        model,
        &train_docs,
        Some(&dev_docs),
        Some(&labels),
        &cfg,
        Some(&ckpt),
    )
    .unwrap();
    assert_eq!(out.checkpoint.as_deref(), Some(ckpt.as_path()));
    assert_eq!(out.log.evals.len(), 3);

    let facts = TrainFactSet::from_documents(&train_docs);
    let before = evaluate_model(&out.model, &dev_docs, &labels, &facts).unwrap();
    let loaded = checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.metadata.step, out.log.best_step);
    assert_eq!(loaded.config.train.steps, 60);
    let after = evaluate_model(&loaded.model, &dev_docs, &labels, &facts).unwrap();
    assert_eq!(before, after);
    assert_eq!(
        out.model
            .score_document(&dev_docs[0], &labels)
            .unwrap()
            .logits,
        loaded
            .model
            .score_document(&dev_docs[0], &labels)
            .unwrap()
            .logits
    );
}

/// Runs only when `DOCRE_REDOCRED_DIR` points at a Re-DocRED release
/// (`train_revised.json` and `rel_info.json`).
#[test]
fn redocred_train_split_loads() {
    let Some(dir) = std::env::var_os("DOCRE_REDOCRED_DIR").map(PathBuf::from) else {
        eprintln!("DOCRE_REDOCRED_DIR not set; skipping");
        return;
    };
    let labels = load_rel_info(&dir.join("rel_info.json")).unwrap();
    assert_eq!(labels.len(), 96);
    let corpus = load_corpus(&dir.join("train_revised.json"), &labels, Split::Train).unwrap();
    assert_eq!(corpus.documents.len(), 3053);
}
