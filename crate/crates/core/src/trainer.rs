//! Training loop, dev-set model selection, few-shot suite and threshold
//! tuning.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Document, RelationLabelSet};
use crate::dataset::{sample_fewshot, FewShotSpec};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, evaluate, Aggregate, EvalReport, StdKind, TrainFactSet};
use crate::model::{Model, PreparedDoc, DOC_ENCODER, LABEL_ENCODER};
use crate::optim::{AdamW, OptimConfig};
use crate::params::ParamGroup;
use crate::relation::check_threshold;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    #[default]
    Finetune,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune" => Ok(Self::Finetune),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Pretrain => "pretrain",
            TrainMode::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    /// Seeds data order and pair sampling.
    pub seed: u64,
    pub eval_every: usize,
    pub mode: TrainMode,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub max_grad_norm: Option<f64>,
    /// Per-document cap on training pairs, gold pairs kept first.
    pub pair_cap: Option<usize>,
    /// Extra labels per pretraining batch drawn from other documents.
    pub negative_labels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 16,
            lr_encoder: 1e-5,
            lr_heads: 1e-4,
            seed: 0,
            eval_every: 500,
            mode: TrainMode::Finetune,
            weight_decay: 0.01,
            warmup_ratio: 0.06,
            max_grad_norm: Some(1.0),
            pair_cap: None,
            negative_labels: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "steps, batch_size and eval_every must be positive".into(),
            ));
        }
        self.optim().validate()
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr_encoder: self.lr_encoder,
            lr_heads: self.lr_heads,
            weight_decay: self.weight_decay,
            warmup_ratio: self.warmup_ratio,
            total_steps: self.steps,
            max_grad_norm: self.max_grad_norm,
            ..OptimConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub pairs: usize,
    pub positives: usize,
    pub grad_norm: f64,
    pub lop_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub dev: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best_step: usize,
    pub best_dev_f1: Option<f64>,
}

impl TrainLog {
    pub fn dev_f1_trajectory(&self) -> Vec<f64> {
        self.evals.iter().map(|e| e.dev.f1).collect()
    }
}

pub struct TrainOutcome {
    /// Weights of the best dev evaluation (final weights without a dev set).
    pub model: Model,
    pub log: TrainLog,
    pub checkpoint: Option<PathBuf>,
}

/// Every encoder parameter must train at the encoder rate and everything
/// else at the head rate.
pub fn check_param_groups(model: &Model) -> Result<()> {
    for (_, p) in model.store.iter() {
        let is_encoder = p.name.starts_with(&format!("{DOC_ENCODER}."))
            || p.name.starts_with(&format!("{LABEL_ENCODER}."));
        let expected = if is_encoder {
            ParamGroup::Encoder
        } else {
            ParamGroup::Heads
        };
        if p.group != expected {
            return Err(Error::Config(format!(
                "parameter `{}` is in group {:?}, expected {:?}",
                p.name, p.group, expected
            )));
        }
    }
    Ok(())
}

/// Endless shuffled stream of document indices, reshuffled each epoch.
struct Batcher {
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let order = rng.permutation(n);
        Self {
            rng,
            order,
            cursor: 0,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = self.rng.permutation(self.order.len());
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Label set for a pretraining batch: the batch's own relation strings plus
/// up to `negatives` others drawn from the rest of the corpus.
fn pretrain_labels(
    batch: &[&Document],
    pool: &[String],
    negatives: usize,
    rng: &mut SeededRng,
) -> Result<RelationLabelSet> {
    let mut names: BTreeSet<String> = batch
        .iter()
        .flat_map(|d| d.gold_labels.iter().map(|g| g.relation_id.clone()))
        .collect();
    let others: Vec<&String> = pool.iter().filter(|l| !names.contains(*l)).collect();
    let take = negatives.min(others.len());
    let mut order = rng.permutation(others.len());
    order.truncate(take);
    names.extend(order.into_iter().map(|i| others[i].clone()));
    if names.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    RelationLabelSet::from_names(names)
}

/// Dev evaluation of the current weights.
pub fn evaluate_model(
    model: &Model,
    docs: &[Document],
    labels: &RelationLabelSet,
    train_facts: &TrainFactSet,
) -> Result<EvalReport> {
    let preds = model.predict(docs, labels)?;
    evaluate(&preds, docs, train_facts)
}

/// Train `model` on `train_docs`.
///
/// In finetune mode `labels` is the fixed relation schema. In pretrain mode
/// each batch builds its own label set from free-string relations and
/// `labels` is only used for dev evaluation. With a dev set the weights of
/// the best dev F1 are kept; `out_dir` receives that checkpoint.
pub fn train(
    mut model: Model,
    train_docs: &[Document],
    dev_docs: Option<&[Document]>,
    labels: Option<&RelationLabelSet>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_param_groups(&model)?;
    if train_docs.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if cfg.mode == TrainMode::Finetune && labels.is_none() {
        return Err(Error::Config(
            "finetuning needs a relation label set".into(),
        ));
    }
    if dev_docs.is_some() && labels.is_none() {
        return Err(Error::Config(
            "dev evaluation needs a relation label set".into(),
        ));
    }
    let prepared: Vec<PreparedDoc> = train_docs
        .iter()
        .map(|d| model.prepare(d))
        .collect::<Result<_>>()?;
    let pool: Vec<String> = train_docs
        .iter()
        .flat_map(|d| d.gold_labels.iter().map(|g| g.relation_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let train_facts = TrainFactSet::from_documents(train_docs);

    let mut opt = AdamW::new(cfg.optim(), &model.store);
    let mut batcher = Batcher::new(train_docs.len(), cfg.seed);
    let mut label_rng = SeededRng::new(cfg.seed ^ 0x6c61_6265_6c73);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<ndarray::Array2<f64>>)> = None;

    for step in 0..cfg.steps {
        let idx = batcher.next_batch(cfg.batch_size);
        let batch: Vec<(&Document, &PreparedDoc)> = idx
            .iter()
            .map(|&i| (&train_docs[i], &prepared[i]))
            .collect();
        let batch_labels = match cfg.mode {
            TrainMode::Finetune => labels.expect("checked above").clone(),
            TrainMode::Pretrain => {
                let docs: Vec<&Document> = batch.iter().map(|b| b.0).collect();
                pretrain_labels(&docs, &pool, cfg.negative_labels, &mut label_rng)?
            }
        };
        let tape = Tape::new();
        let out = match model.batch_loss(
            &tape,
            &batch,
            &batch_labels,
            cfg.pair_cap,
            cfg.seed.wrapping_add(step as u64),
        ) {
            Ok(out) => out,
            Err(Error::Empty(_)) => continue,
            Err(e) => return Err(e),
        };
        let loss = out.loss.scalar();
        if !loss.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|b| b.0.doc_id.as_str()).collect();
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {loss} over {} pairs ({} positive, {} context fallbacks); documents {:?}",
                    out.pairs, out.positives, out.lop_fallbacks, ids
                ),
            });
        }
        let mut grads = tape.backward(out.loss, model.store.len());
        let grad_norm = opt.step(&mut model.store, &mut grads);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {grad_norm} at loss {loss}"),
            });
        }
        log.steps.push(StepRecord {
            step: step + 1,
            loss,
            pairs: out.pairs,
            positives: out.positives,
            grad_norm,
            lop_fallbacks: out.lop_fallbacks,
        });

        let done = step + 1;
        if let (Some(dev), Some(labels)) = (dev_docs, labels) {
            if done % cfg.eval_every == 0 || done == cfg.steps {
                let report = evaluate_model(&model, dev, labels, &train_facts)?;
                model.clear_label_cache();
                log::info!("step {done}: loss {loss:.5}, dev f1 {:.4}", report.f1);
                let better = best.as_ref().is_none_or(|(f, _)| report.f1 > *f);
                if better {
                    best = Some((report.f1, model.store.snapshot()));
                    log.best_step = done;
                    log.best_dev_f1 = Some(report.f1);
                }
                log.evals.push(EvalRecord {
                    step: done,
                    dev: report,
                });
            }
        }
    }
    if let Some((_, snapshot)) = best {
        model.store.restore(&snapshot);
    } else {
        log.best_step = cfg.steps;
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            crate::checkpoint::save(
                dir,
                &model,
                labels,
                &crate::checkpoint::Metadata::new(cfg.seed, log.best_step, log.best_dev_f1),
                Some(cfg),
            )?;
            Some(dir.to_path_buf())
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        log,
        checkpoint,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRun {
    pub size: usize,
    pub seed: u64,
    pub documents: Vec<String>,
    pub test: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRow {
    pub size: usize,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotTable {
    pub runs: Vec<FewShotRun>,
    pub rows: Vec<FewShotRow>,
}

impl FewShotTable {
    /// One row per model, one `mean ± std` F1 column (in percent) per size.
    pub fn render(&self, model_name: &str) -> String {
        let header: Vec<String> = self
            .rows
            .iter()
            .map(|r| format!("N = {}", r.size))
            .collect();
        let cells: Vec<String> = self
            .rows
            .iter()
            .map(|r| {
                format!(
                    "{:.2} ± {:.2}",
                    100.0 * r.aggregate.f1.mean,
                    100.0 * r.aggregate.f1.std
                )
            })
            .collect();
        let widths: Vec<usize> = header
            .iter()
            .zip(&cells)
            .map(|(h, c)| h.chars().count().max(c.chars().count()))
            .collect();
        let name_w = model_name.len().max("Model".len());
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
        let mut out = pad("Model", name_w);
        for (h, w) in header.iter().zip(&widths) {
            out.push_str(" | ");
            out.push_str(&pad(h, *w));
        }
        out.push('\n');
        out.push_str(&pad(model_name, name_w));
        for (c, w) in cells.iter().zip(&widths) {
            out.push_str(" | ");
            out.push_str(&pad(c, *w));
        }
        out.push('\n');
        out
    }
}

/// Train and test one model per `(size, seed)` and aggregate per size.
/// `make_model` builds the starting model for a seed.
pub fn run_fewshot_suite(
    make_model: &dyn Fn(u64) -> Result<Model>,
    train_docs: &[Document],
    dev_docs: Option<&[Document]>,
    test_docs: &[Document],
    labels: &RelationLabelSet,
    spec: &FewShotSpec,
    cfg: &TrainConfig,
) -> Result<FewShotTable> {
    spec.validate()?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &size in &spec.sizes {
        let mut reports = Vec::new();
        for &seed in &spec.seeds {
            let subset = sample_fewshot(train_docs, size, seed)?;
            let run_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let outcome = train(
                make_model(seed)?,
                &subset,
                dev_docs,
                Some(labels),
                &run_cfg,
                None,
            )?;
            let facts = TrainFactSet::from_documents(&subset);
            let report = evaluate_model(&outcome.model, test_docs, labels, &facts)?;
            log::info!("few-shot N={size} seed={seed}: test f1 {:.4}", report.f1);
            reports.push(report.clone());
            runs.push(FewShotRun {
                size,
                seed,
                documents: subset.iter().map(|d| d.doc_id.clone()).collect(),
                test: report,
            });
        }
        rows.push(FewShotRow {
            size,
            aggregate: aggregate_runs(&reports, StdKind::Sample)?,
        });
    }
    Ok(FewShotTable { runs, rows })
}

/// Global threshold maximising dev F1; ties go to the value nearest 0.5,
/// then to the smaller value.
pub fn tune_threshold(
    model: &Model,
    dev_docs: &[Document],
    labels: &RelationLabelSet,
    grid: &[f64],
    train_facts: &TrainFactSet,
) -> Result<(f64, Vec<(f64, EvalReport)>)> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    for &tau in grid {
        check_threshold(tau)?;
    }
    let scored = model.score_corpus(dev_docs, labels)?;
    let mut results = Vec::with_capacity(grid.len());
    for &tau in grid {
        let preds: Vec<_> = scored
            .iter()
            .flat_map(|s| s.predictions(labels, tau))
            .collect();
        results.push((tau, evaluate(&preds, dev_docs, train_facts)?));
    }
    Ok((pick_threshold(&results), results))
}

pub(crate) fn pick_threshold(results: &[(f64, EvalReport)]) -> f64 {
    let mut best = results[0].0;
    let mut best_f1 = results[0].1.f1;
    for (tau, r) in &results[1..] {
        let (d, best_d) = ((tau - 0.5).abs(), (best - 0.5).abs());
        let closer = d < best_d - 1e-12 || ((d - best_d).abs() <= 1e-12 && *tau < best);
        if r.f1 > best_f1 || (r.f1 == best_f1 && closer) {
            best = *tau;
            best_f1 = r.f1;
        }
    }
    best
}
