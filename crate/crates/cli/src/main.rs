use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use docre::checkpoint::{self, init_model, Metadata};
use docre::config::RunConfig;
use docre::data::{Document, RelationLabelSet};
use docre::dataset::{
    load_corpus, load_pretrain_corpus, load_rel_info, save_corpus, save_rel_info,
    write_predictions, FewShotSpec, Split, DEFAULT_MAX_PRETRAIN_WORDS,
};
use docre::llm::{HttpClient, RetryPolicy};
use docre::metrics::{evaluate, render_report, TrainFactSet};
use docre::model::build_vocab;
use docre::pretrain_gen::{self, GenConfig};
use docre::toy::{toy_corpus, toy_labels};
use docre::trainer::{run_fewshot_suite, train, tune_threshold, TrainMode};
use docre::zeroshot::{self, ZeroShotConfig};

const CHECKPOINT_ROOT_ENV: &str = "DOCRE_CHECKPOINT_ROOT";

#[derive(Parser)]
#[command(
    name = "docre",
    version,
    about = "Document-level relation extraction with a bi-encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune on a labelled corpus.
    Train(TrainArgs),
    /// Pretrain on a free-label JSONL corpus.
    Pretrain(PretrainArgs),
    /// Score a corpus with a checkpoint and print the metrics.
    Evaluate(EvalArgs),
    /// Write predictions for a corpus.
    Predict(PredictArgs),
    /// Train on sampled subsets for several sizes and seeds.
    Fewshot(FewShotArgs),
    /// Choose the decision threshold that maximises dev F1.
    TuneThreshold(TuneArgs),
    /// Annotate raw text with a completion endpoint.
    GenPretrain(GenArgs),
    /// Zero-shot baseline through a completion endpoint.
    Zeroshot(ZeroShotArgs),
    /// Write a small synthetic corpus.
    MakeToy(ToyArgs),
}

/// Model and training settings. Values from `--config` win over flags.
#[derive(Args, Clone, Default)]
struct Settings {
    /// `key = value` file applied after the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied before the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr_encoder: Option<String>,
    #[arg(long)]
    lr_heads: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    warmup_ratio: Option<String>,
    /// A number or `none`.
    #[arg(long)]
    max_grad_norm: Option<String>,
    /// A number or `none`.
    #[arg(long)]
    pair_cap: Option<String>,
    #[arg(long)]
    negative_labels: Option<String>,
    /// `tiny` or `pretrained`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    pretrained_dir: Option<String>,
    #[arg(long)]
    max_length: Option<String>,
    #[arg(long)]
    hidden_size: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    /// `mean` or `logsumexp`.
    #[arg(long)]
    pooling: Option<String>,
    /// `true` or `false`.
    #[arg(long)]
    lop: Option<String>,
    /// `focal` or `adaptive_threshold`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    init_seed: Option<String>,
}

impl Settings {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let flags = [
            ("steps", &self.steps),
            ("batch_size", &self.batch_size),
            ("lr_encoder", &self.lr_encoder),
            ("lr_heads", &self.lr_heads),
            ("seed", &self.seed),
            ("eval_every", &self.eval_every),
            ("weight_decay", &self.weight_decay),
            ("warmup_ratio", &self.warmup_ratio),
            ("max_grad_norm", &self.max_grad_norm),
            ("pair_cap", &self.pair_cap),
            ("negative_labels", &self.negative_labels),
            ("backend", &self.backend),
            ("pretrained_dir", &self.pretrained_dir),
            ("max_length", &self.max_length),
            ("hidden_size", &self.hidden_size),
            ("label_hidden_size", &self.hidden_size),
            ("latent_size", &self.hidden_size),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("pooling", &self.pooling),
            ("lop", &self.lop),
            ("loss", &self.loss),
            ("threshold", &self.threshold),
            ("init_seed", &self.init_seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)
                    .with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(path) = &self.config {
            cfg.apply_file(path)
                .with_context(|| format!("reading {}", path.display()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Relative checkpoint paths live under `$DOCRE_CHECKPOINT_ROOT` when set.
fn checkpoint_path(p: &Path) -> PathBuf {
    match std::env::var_os(CHECKPOINT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    rel_info: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct PretrainArgs {
    /// Line-delimited pretraining records.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_PRETRAIN_WORDS)]
    max_words: usize,
    /// Optional labelled dev corpus for model selection.
    #[arg(long, requires = "rel_info")]
    dev: Option<PathBuf>,
    #[arg(long)]
    rel_info: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Relation schema; defaults to the one stored in the checkpoint.
    #[arg(long)]
    rel_info: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Training corpus whose facts are ignored for Ign F1.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FewShotArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    rel_info: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = FewShotSpec::default().sizes)]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = FewShotSpec::default().seeds)]
    seeds: Vec<u64>,
    /// JSON file for every run and the aggregated rows.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "docre")]
    name: String,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = (1..20).map(|i| i as f64 / 20.0).collect::<Vec<_>>())]
    grid: Vec<f64>,
    /// Store the chosen threshold in the checkpoint config.
    #[arg(long)]
    write: bool,
}

#[derive(Args, Clone)]
struct EndpointArgs {
    /// Chat-completions URL.
    #[arg(long, env = "DOCRE_LLM_ENDPOINT")]
    endpoint: String,
    #[arg(long, env = "DOCRE_LLM_MODEL")]
    model: String,
    #[arg(long, env = "DOCRE_LLM_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 4)]
    in_flight: usize,
    /// Prompt template file; the built-in template is used otherwise.
    #[arg(long)]
    template: Option<PathBuf>,
}

impl EndpointArgs {
    fn client(&self) -> HttpClient {
        HttpClient::new(
            &self.endpoint,
            &self.model,
            Duration::from_secs(self.timeout_secs),
            self.api_key.clone(),
        )
    }

    fn template(&self, default: &str) -> Result<String> {
        match &self.template {
            Some(p) => {
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
            }
            None => Ok(default.to_string()),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Directory of text files or a file with one document per line.
    #[arg(long)]
    raw: PathBuf,
    /// Output JSONL; existing records are kept and their texts skipped.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_PRETRAIN_WORDS)]
    max_words: usize,
    /// Keep relation labels exactly as returned.
    #[arg(long)]
    no_normalize: bool,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct ZeroShotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    rel_info: PathBuf,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train_docs: usize,
    #[arg(long, default_value_t = 50)]
    dev_docs: usize,
    #[arg(long, default_value_t = 50)]
    test_docs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn corpus(path: &Path, labels: &RelationLabelSet, split: Split) -> Result<Vec<Document>> {
    Ok(load_corpus(path, labels, split)
        .with_context(|| format!("loading {}", path.display()))?
        .documents)
}

fn train_facts(path: Option<&Path>, labels: &RelationLabelSet) -> Result<TrainFactSet> {
    Ok(match path {
        Some(p) => TrainFactSet::from_documents(&corpus(p, labels, Split::Train)?),
        None => TrainFactSet::default(),
    })
}

fn open_checkpoint(args: &CorpusArgs) -> Result<(checkpoint::Checkpoint, RelationLabelSet)> {
    let dir = checkpoint_path(&args.checkpoint);
    let ck =
        checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let labels = match (&args.rel_info, &ck.labels) {
        (Some(p), _) => load_rel_info(p)?,
        (None, Some(l)) => l.clone(),
        (None, None) => bail!("checkpoint has no relation schema; pass --rel-info"),
    };
    Ok((ck, labels))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let mut cfg = a.settings.resolve()?;
            cfg.train.mode = TrainMode::Finetune;
            let labels = load_rel_info(&a.rel_info)?;
            let train_docs = corpus(&a.train, &labels, Split::Train)?;
            let dev = a
                .dev
                .as_deref()
                .map(|p| corpus(p, &labels, Split::Dev))
                .transpose()?;
            let model = init_model(cfg.model.clone(), || build_vocab(&train_docs, [&labels]))?;
            let out = checkpoint_path(&a.out);
            let outcome = train(
                model,
                &train_docs,
                dev.as_deref(),
                Some(&labels),
                &cfg.train,
                Some(&out),
            )?;
            write_json(&out.join("train_log.json"), &outcome.log)?;
            match outcome.log.best_dev_f1 {
                Some(f1) => println!("best dev F1 {f1:.4} at step {}", outcome.log.best_step),
                None => println!("trained {} steps", cfg.train.steps),
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Pretrain(a) => {
            let mut cfg = a.settings.resolve()?;
            cfg.train.mode = TrainMode::Pretrain;
            let (pre, skips) = load_pretrain_corpus(&a.corpus, a.max_words)?;
            println!(
                "pretraining corpus: {} kept, {} malformed, {} over length",
                skips.kept, skips.malformed, skips.over_length
            );
            let free: BTreeSet<String> = pre
                .documents
                .iter()
                .flat_map(|d| d.gold_labels.iter().map(|g| g.relation_id.clone()))
                .collect();
            let free = RelationLabelSet::from_names(free)?;
            let dev_labels = a.rel_info.as_deref().map(load_rel_info).transpose()?;
            let dev = match (&a.dev, &dev_labels) {
                (Some(p), Some(l)) => Some(corpus(p, l, Split::Dev)?),
                _ => None,
            };
            let mut sets = vec![&free];
            sets.extend(dev_labels.as_ref());
            let model = init_model(cfg.model.clone(), || build_vocab(&pre.documents, sets))?;
            let out = checkpoint_path(&a.out);
            let outcome = train(
                model,
                &pre.documents,
                dev.as_deref(),
                dev_labels.as_ref(),
                &cfg.train,
                Some(&out),
            )?;
            write_json(&out.join("train_log.json"), &outcome.log)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Evaluate(a) => {
            let (ck, labels) = open_checkpoint(&a.corpus)?;
            let docs = corpus(&a.corpus.data, &labels, Split::Test)?;
            let preds = ck.model.predict(&docs, &labels)?;
            let report = evaluate(&preds, &docs, &train_facts(a.train.as_deref(), &labels)?)?;
            print!("{}", render_report(&report));
            if let Some(p) = &a.report {
                write_json(p, &report)?;
            }
        }
        Command::Predict(a) => {
            let (ck, labels) = open_checkpoint(&a.corpus)?;
            let docs = corpus(&a.corpus.data, &labels, Split::Test)?;
            let preds = ck.model.predict(&docs, &labels)?;
            write_predictions(&preds, &a.out)?;
            println!("{} predictions written to {}", preds.len(), a.out.display());
        }
        Command::Fewshot(a) => {
            let cfg = a.settings.resolve()?;
            let labels = load_rel_info(&a.rel_info)?;
            let train_docs = corpus(&a.train, &labels, Split::Train)?;
            let dev = a
                .dev
                .as_deref()
                .map(|p| corpus(p, &labels, Split::Dev))
                .transpose()?;
            let test = corpus(&a.test, &labels, Split::Test)?;
            let spec = FewShotSpec {
                sizes: a.sizes,
                seeds: a.seeds,
            };
            let make = |seed: u64| {
                let mut m = cfg.model.clone();
                m.seed = seed;
                init_model(m, || build_vocab(&train_docs, [&labels]))
            };
            let table = run_fewshot_suite(
                &make,
                &train_docs,
                dev.as_deref(),
                &test,
                &labels,
                &spec,
                &cfg.train,
            )?;
            print!("{}", table.render(&a.name));
            if let Some(p) = &a.report {
                write_json(p, &table)?;
            }
        }
        Command::TuneThreshold(a) => {
            let (ck, labels) = open_checkpoint(&a.corpus)?;
            let docs = corpus(&a.corpus.data, &labels, Split::Dev)?;
            let facts = train_facts(a.train.as_deref(), &labels)?;
            let (best, results) = tune_threshold(&ck.model, &docs, &labels, &a.grid, &facts)?;
            for (tau, r) in &results {
                println!("tau {tau:.3}  F1 {:.4}  Ign F1 {:.4}", r.f1, r.ign_f1);
            }
            println!("best threshold {best}");
            if a.write {
                let mut model = ck.model;
                model.config.threshold = best;
                model.relation.score_threshold = best;
                let meta = Metadata::new(ck.metadata.seed, ck.metadata.step, ck.metadata.dev_f1);
                checkpoint::save(
                    &ck.path,
                    &model,
                    ck.labels.as_ref(),
                    &meta,
                    Some(&ck.config.train),
                )?;
                println!("threshold stored in {}", ck.path.display());
            }
        }
        Command::GenPretrain(a) => {
            let raw = pretrain_gen::read_raw_documents(&a.raw)?;
            let template = a.endpoint.template(pretrain_gen::DEFAULT_TEMPLATE)?;
            let cfg = GenConfig {
                temperature: a.temperature,
                max_words: a.max_words,
                in_flight: a.endpoint.in_flight,
                retry: RetryPolicy::default(),
                ..GenConfig::default()
            };
            let done = pretrain_gen::existing_hashes(&a.out)?;
            let (records, report) =
                pretrain_gen::generate(&raw, &a.endpoint.client(), &template, &cfg, &done)?;
            let records = if a.no_normalize {
                records
            } else {
                let (records, norm) = pretrain_gen::normalize_labels(records);
                let mut map_path = a.out.clone().into_os_string();
                map_path.push(".labels.json");
                write_json(Path::new(&map_path), &norm)?;
                records
            };
            pretrain_gen::write_records(&records, &a.out, true)?;
            let mut report_path = a.out.clone().into_os_string();
            report_path.push(".report.json");
            write_json(Path::new(&report_path), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Zeroshot(a) => {
            let labels = load_rel_info(&a.rel_info)?;
            let docs = corpus(&a.data, &labels, Split::Test)?;
            let template = a.endpoint.template(zeroshot::DEFAULT_TEMPLATE)?;
            let cfg = ZeroShotConfig {
                in_flight: a.endpoint.in_flight,
                retry: RetryPolicy::default(),
            };
            let facts = train_facts(a.train.as_deref(), &labels)?;
            let (preds, report) = zeroshot::run_zeroshot(
                &docs,
                &labels,
                &a.endpoint.client(),
                &template,
                &facts,
                &cfg,
            )?;
            print!("{}", render_report(&report.eval));
            println!(
                "failed documents {}, rejected lines {}{}",
                report.failed_documents.len(),
                report.rejects.total(),
                if report.degraded {
                    " (degraded run)"
                } else {
                    ""
                }
            );
            if let Some(p) = &a.out {
                write_predictions(&preds, p)?;
            }
        }
        Command::MakeToy(a) => {
            std::fs::create_dir_all(&a.out)?;
            let total = a.train_docs + a.dev_docs + a.test_docs;
            let docs = toy_corpus(total, a.seed)?;
            let (train_docs, rest) = docs.split_at(a.train_docs);
            let (dev, test) = rest.split_at(a.dev_docs);
            save_corpus(train_docs, &a.out.join("train.json"))?;
            save_corpus(dev, &a.out.join("dev.json"))?;
            save_corpus(test, &a.out.join("test.json"))?;
            save_rel_info(&toy_labels(), &a.out.join("rel_info.json"))?;
            println!("toy corpus written to {}", a.out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_is_well_formed() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn config_file_overrides_flags() {
        let dir = std::env::temp_dir().join(format!("docre-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("run.cfg");
        std::fs::write(&file, "steps = 7\n").unwrap();
        let cli = Cli::parse_from([
            "docre",
            "train",
            "--train",
            "t",
            "--rel-info",
            "r",
            "--out",
            "o",
            "--steps",
            "3",
            "--batch-size",
            "2",
            "--config",
            file.to_str().unwrap(),
        ]);
        let Command::Train(a) = cli.command else {
            panic!()
        };
        let cfg = a.settings.resolve().unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.batch_size, 2);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
