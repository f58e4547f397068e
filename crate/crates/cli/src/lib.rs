//! Command-line driver for preprocessing, training and reporting.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use idasr_core::corpus::Split;
use idasr_core::corpus::{load_interactions, write_interactions, InteractionLog, SequenceDataset};
use idasr_core::embeddings::{read_emb, write_emb, ItemEmbeddingMatrix};
use idasr_core::evaluation::{coldstart_report, evaluate_poprec, write_coldstart_csv, RankReport};
use idasr_core::model::{read_checkpoint, write_checkpoint, ItemSource, Model};
use idasr_core::pipeline::{
    ablate, align_embeddings, end_to_end, evaluate_model, prepare_dataset, synthetic_inputs, write_ablation_csv,
    RunConfig,
};
use idasr_core::training::{finetune, pretrain, train_id_baseline, write_metrics_csv, FinetuneMode, TrainOutcome};

#[derive(Parser, Debug)]
#[command(name = "idasr", version, about = "Sequential recommendation over text-derived item embeddings")]
pub struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `data.interactions`.
    #[arg(long, global = true)]
    pub interactions: Option<PathBuf>,
    /// Overrides `data.embeddings`.
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// 5-core filter and split a log; writes items.txt, users.txt, sequences.tsv.
    Preprocess,
    /// Writes interactions.tsv, exempt_items.txt and items.emb from the synthetic generator.
    GenSynthetic,
    /// Pre-trains a text model; writes pretrained.idac.
    Pretrain {
        /// Directory written by `preprocess`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Fine-tunes a pre-trained checkpoint; writes finetuned.idac.
    Finetune {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Trains the ID-only baseline; writes baseline.idac.
    Baseline {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Ranks every user's held-out item; writes report.csv and summary.txt.
    Evaluate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// A checkpoint, or omit for the popularity baseline.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Full model against each single-task removal; writes ablation.csv.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Per-bucket rank improvement of one report over another; writes coldstart.csv.
    ColdstartReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Preprocess, pretrain, finetune, baseline, evaluate and cold-start report.
    RunAll,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Text,
    TextId,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

/// Config file plus command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(p) = &cli.interactions {
        config.data.interactions = Some(p.clone());
    }
    if let Some(p) = &cli.embeddings {
        config.data.embeddings = Some(p.clone());
    }
    Ok(config)
}

pub fn read_exempt(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn write_exempt(items: &BTreeSet<String>, path: &Path) -> Result<()> {
    let mut text = String::new();
    for t in items {
        text.push_str(t);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// The run's log and text embeddings. Whatever is not configured comes
/// from the synthetic generator.
struct Inputs {
    log: Option<InteractionLog>,
    emb: Option<ItemEmbeddingMatrix>,
}

fn load_inputs(config: &RunConfig, need_log: bool) -> Result<Inputs> {
    let emb = match &config.data.embeddings {
        Some(p) => Some(read_emb(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    match &config.data.interactions {
        Some(path) if need_log => {
            let mut log = load_interactions(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(p) = &config.data.exempt_items {
                log.exempt_items = read_exempt(p)?;
            }
            Ok(Inputs { log: Some(log), emb })
        }
        Some(_) => Ok(Inputs { log: None, emb }),
        None if need_log || emb.is_none() => {
            let (log, synthetic) = synthetic_inputs(config).context("gen-synthetic")?;
            Ok(Inputs { log: need_log.then_some(log), emb: emb.or(Some(synthetic)) })
        }
        None => Ok(Inputs { log: None, emb }),
    }
}

/// Dataset from a `preprocess` directory, or built from the configured log.
fn load_dataset(config: &RunConfig, dataset: Option<&Path>) -> Result<(SequenceDataset, Option<ItemEmbeddingMatrix>)> {
    let inputs = load_inputs(config, dataset.is_none())?;
    let ds = match dataset {
        Some(dir) => SequenceDataset::load(dir, config.data.max_len)
            .with_context(|| format!("loading dataset from {}", dir.display()))?,
        None => prepare_dataset(inputs.log.as_ref().expect("log requested"), config.data.max_len)?,
    };
    // Coverage is checked here, before any training starts.
    let emb = inputs.emb.map(|e| align_embeddings(&e, &ds)).transpose()?;
    Ok((ds, emb))
}

fn require_emb(emb: Option<&ItemEmbeddingMatrix>) -> Result<&ItemEmbeddingMatrix> {
    emb.context("this command needs item embeddings: set data.embeddings or pass --embeddings")
}

fn model_config(
    config: &RunConfig,
    ds: &SequenceDataset,
    emb: Option<&ItemEmbeddingMatrix>,
) -> idasr_core::model::ModelConfig {
    // ID-only models ignore the text width.
    config.model_config(emb.map_or(1, ItemEmbeddingMatrix::dim), ds.num_items())
}

fn save_outcome(out: &Path, name: &str, outcome: &TrainOutcome) -> Result<()> {
    write_checkpoint(&outcome.model, out.join(format!("{name}.idac")))?;
    write_metrics_csv(&outcome.history, out.join(format!("{name}_metrics.csv")))?;
    log::info!("{name}: best epoch {}, valid NDCG@10 {:?}", outcome.best_epoch, outcome.best_ndcg10);
    Ok(())
}

fn write_report(out: &Path, name: &str, report: &RankReport) -> Result<String> {
    report.write_csv(out.join(format!("{name}.csv")))?;
    Ok(report.summary()?)
}

pub fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    let resolved = toml::to_string(&config)?;
    log::info!("resolved config:\n{resolved}");
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("resolved_config.toml"), &resolved)?;

    match &cli.command {
        Command::Preprocess => {
            let Some(path) = &config.data.interactions else {
                bail!("preprocess needs an interaction log: set data.interactions or pass --interactions");
            };
            let mut log = load_interactions(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(p) = &config.data.exempt_items {
                log.exempt_items = read_exempt(p)?;
            }
            let ds = prepare_dataset(&log, config.data.max_len)?;
            ds.save(out)?;
            log::info!("{} users, {} items", ds.len(), ds.num_items());
        }
        Command::GenSynthetic => {
            let (log, emb) = synthetic_inputs(&config).context("gen-synthetic")?;
            write_interactions(&log, out.join("interactions.tsv"))?;
            write_exempt(&log.exempt_items, &out.join("exempt_items.txt"))?;
            write_emb(&emb, out.join("items.emb"))?;
            log::info!("{} events over {} items", log.len(), emb.len());
        }
        Command::Pretrain { dataset } => {
            let (ds, emb) = load_dataset(&config, dataset.as_deref())?;
            let emb = require_emb(emb.as_ref())?;
            let outcome = pretrain(&ds, emb, model_config(&config, &ds, Some(emb)), &config.pretrain_plan())
                .context("pretrain")?;
            save_outcome(out, "pretrained", &outcome)?;
        }
        Command::Finetune { dataset, checkpoint, mode } => {
            let mut config = config.clone();
            if let Some(m) = mode {
                config.finetune.mode = match m {
                    ModeArg::Text => FinetuneMode::Text,
                    ModeArg::TextId => FinetuneMode::TextId,
                };
            }
            let (ds, emb) = load_dataset(&config, dataset.as_deref())?;
            let emb = require_emb(emb.as_ref())?;
            let model = read_checkpoint(checkpoint, &model_config(&config, &ds, Some(emb)))
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            let outcome =
                finetune(&ds, emb, model, config.finetune.mode, &config.finetune_plan()).context("finetune")?;
            save_outcome(out, "finetuned", &outcome)?;
        }
        Command::Baseline { dataset } => {
            let (ds, emb) = load_dataset(&config, dataset.as_deref())?;
            let outcome = train_id_baseline(&ds, model_config(&config, &ds, emb.as_ref()), &config.baseline_plan())
                .context("baseline")?;
            save_outcome(out, "baseline", &outcome)?;
        }
        Command::Evaluate { dataset, checkpoint, split } => {
            let (ds, emb) = load_dataset(&config, dataset.as_deref())?;
            let split = match split {
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let report = match checkpoint {
                Some(path) => {
                    let model: Model<f32> = read_checkpoint(path, &model_config(&config, &ds, emb.as_ref()))
                        .with_context(|| format!("reading {}", path.display()))?;
                    let text = match model.source() {
                        ItemSource::IdOnly => None,
                        _ => Some(require_emb(emb.as_ref())?),
                    };
                    evaluate_model(&model, text, &ds, split)?
                }
                None => evaluate_poprec(&ds, split)?,
            };
            let summary = write_report(out, "report", &report)?;
            fs::write(out.join("summary.txt"), &summary)?;
            println!("{summary}");
        }
        Command::Ablate { dataset } => {
            let (ds, emb) = load_dataset(&config, dataset.as_deref())?;
            let rows = ablate(&ds, require_emb(emb.as_ref())?, &config).context("ablate")?;
            write_ablation_csv(&rows, out.join("ablation.csv"))?;
            for r in &rows {
                println!("{}\tHR@10 {:.4}\tNDCG@10 {:.4}", r.variant, r.hr10, r.ndcg10);
            }
        }
        Command::ColdstartReport { model, baseline } => {
            let a = RankReport::read_csv(model).with_context(|| format!("reading {}", model.display()))?;
            let b = RankReport::read_csv(baseline).with_context(|| format!("reading {}", baseline.display()))?;
            let rows = coldstart_report(&a, &b)?;
            write_coldstart_csv(&rows, out.join("coldstart.csv"))?;
            for r in &rows {
                let high = r.bucket_high.map_or("inf".to_string(), |h| h.to_string());
                println!("[{}, {high})\t{}\t{:+.2}", r.bucket_low, r.count, r.improved_mean_rank);
            }
        }
        Command::RunAll => {
            let (ds, emb) = load_dataset(&config, None).context("preprocess")?;
            ds.save(out)?;
            let emb = require_emb(emb.as_ref())?;
            let run = end_to_end(&ds, emb, &config)?;
            save_outcome(out, "pretrained", &run.pretrained)?;
            save_outcome(out, "finetuned", &run.finetuned)?;
            save_outcome(out, "baseline", &run.baseline)?;
            let mut summary = String::new();
            for (name, report) in [
                ("report_model", &run.model_report),
                ("report_baseline", &run.baseline_report),
                ("report_poprec", &run.poprec_report),
            ] {
                summary.push_str(&format!("{name}\n{}\n", write_report(out, name, report)?));
            }
            write_coldstart_csv(&run.coldstart, out.join("coldstart.csv"))?;
            fs::write(out.join("summary.txt"), &summary)?;
            println!("{summary}");
        }
    }
    Ok(())
}
