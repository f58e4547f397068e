//! Whole-experiment plumbing shared by the command line and the tests:
//! run configuration, dataset preparation, the ablation sweep and the
//! end-to-end run against the ID-only baseline.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::corpus::{five_core_filter, generate_synthetic, leave_one_out_split, InteractionLog, SequenceDataset};
use crate::corpus::{Split, SyntheticSpec, Task};
use crate::embeddings::{align_to_vocab, pseudo_embed, ItemEmbeddingMatrix, PseudoSource};
use crate::error::{Error, Result};
use crate::evaluation::{coldstart_report, evaluate, evaluate_poprec, ColdStartRow, RankReport};
use crate::model::{text_tensor, Activation, Model, ModelConfig};
use crate::training::{finetune, pretrain, train_id_baseline, FinetuneMode, Stage, TrainOutcome, TrainPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// TSV interaction log (`user<TAB>item<TAB>timestamp`).
    pub interactions: Option<PathBuf>,
    /// Items exempt from the popularity filter, one token per line.
    pub exempt_items: Option<PathBuf>,
    /// Item text embeddings in `.emb` format.
    pub embeddings: Option<PathBuf>,
    /// Model window; longer contexts keep their most recent items.
    pub max_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { interactions: None, exempt_items: None, embeddings: None, max_len: 50 }
    }
}

/// Pseudo text embeddings projected from the synthetic latent attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub dim: usize,
    pub noise: f64,
}

impl Default for PseudoSection {
    fn default() -> Self {
        PseudoSection { dim: 32, noise: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            dim: d.dim,
            layers: d.layers,
            heads: d.heads,
            ffn_mult: d.ffn_mult,
            dropout: d.dropout,
            activation: d.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub select_best: bool,
    pub optimizer: AdamConfig,
}

impl StageSection {
    fn with_epochs(epochs: usize) -> Self {
        StageSection { epochs, batch_size: 128, select_best: true, optimizer: AdamConfig::default() }
    }
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection::with_epochs(30)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub tasks: Vec<Task>,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub select_best: bool,
    pub optimizer: AdamConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let s = StageSection::with_epochs(20);
        PretrainSection {
            tasks: Task::ALL.to_vec(),
            mask_ratio: 0.2,
            epochs: s.epochs,
            batch_size: s.batch_size,
            select_best: s.select_best,
            optimizer: s.optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub select_best: bool,
    pub optimizer: AdamConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let s = StageSection::with_epochs(40);
        FinetuneSection {
            mode: FinetuneMode::Text,
            epochs: s.epochs,
            batch_size: s.batch_size,
            select_best: s.select_best,
            optimizer: s.optimizer,
        }
    }
}

/// Every knob of a run. Unknown keys are rejected when deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    /// Generator settings; its `seed` is replaced by the run seed.
    pub synthetic: SyntheticSpec,
    pub pseudo: PseudoSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub baseline: StageSection,
}

impl RunConfig {
    pub fn model_config(&self, text_dim: usize, num_items: usize) -> ModelConfig {
        ModelConfig {
            text_dim,
            dim: self.model.dim,
            layers: self.model.layers,
            heads: self.model.heads,
            ffn_mult: self.model.ffn_mult,
            max_len: self.data.max_len,
            dropout: self.model.dropout,
            activation: self.model.activation,
            num_items,
        }
    }

    pub fn pretrain_plan(&self) -> TrainPlan {
        let p = &self.pretrain;
        TrainPlan {
            stage: Stage::Pretrain,
            tasks: p.tasks.clone(),
            epochs: p.epochs,
            batch_size: p.batch_size,
            optimizer: p.optimizer,
            seed: self.seed,
            mask_ratio: p.mask_ratio,
            select_best: p.select_best,
        }
    }

    pub fn finetune_plan(&self) -> TrainPlan {
        let f = &self.finetune;
        TrainPlan {
            stage: f.mode.stage(),
            tasks: vec![Task::Next],
            epochs: f.epochs,
            batch_size: f.batch_size,
            optimizer: f.optimizer,
            seed: self.seed,
            mask_ratio: self.pretrain.mask_ratio,
            select_best: f.select_best,
        }
    }

    pub fn baseline_plan(&self) -> TrainPlan {
        let b = &self.baseline;
        TrainPlan {
            stage: Stage::BaselineIdOnly,
            tasks: vec![Task::Next],
            epochs: b.epochs,
            batch_size: b.batch_size,
            optimizer: b.optimizer,
            seed: self.seed,
            mask_ratio: self.pretrain.mask_ratio,
            select_best: b.select_best,
        }
    }

    /// The synthetic spec with the run seed applied.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec { seed: self.seed, ..self.synthetic.clone() }
    }
}

/// 5-core filtering followed by the leave-one-out split.
pub fn prepare_dataset(log: &InteractionLog, max_len: usize) -> Result<SequenceDataset> {
    let ds = leave_one_out_split(&five_core_filter(log), max_len)?;
    if ds.is_empty() {
        return Err(Error::Argument("empty dataset after filtering".into()));
    }
    Ok(ds)
}

/// Synthetic log plus pseudo text embeddings projected from its latent
/// item attributes.
pub fn synthetic_inputs(config: &RunConfig) -> Result<(InteractionLog, ItemEmbeddingMatrix)> {
    let data = generate_synthetic(&config.synthetic_spec())?;
    let emb = pseudo_embed(
        &data.item_tokens,
        PseudoSource::Attributes { rows: &data.attributes, noise: config.pseudo.noise },
        config.pseudo.dim,
        config.seed,
    )?;
    Ok((data.log, emb))
}

/// Rows reordered to the dataset vocabulary; fails before any training when
/// an item has no row.
pub fn align_embeddings(emb: &ItemEmbeddingMatrix, ds: &SequenceDataset) -> Result<ItemEmbeddingMatrix> {
    align_to_vocab(emb, &ds.items)
}

/// Pre-trains on `tasks`, fine-tunes in the configured mode and returns both
/// outcomes with the fine-tuned model's test report.
pub fn pretrain_finetune(
    ds: &SequenceDataset,
    emb: &ItemEmbeddingMatrix,
    config: &RunConfig,
    tasks: &[Task],
) -> Result<(TrainOutcome, TrainOutcome, RankReport)> {
    let emb = &align_embeddings(emb, ds)?;
    let model_config = config.model_config(emb.dim(), ds.num_items());
    let plan = TrainPlan { tasks: tasks.to_vec(), ..config.pretrain_plan() };
    let pre = pretrain(ds, emb, model_config, &plan)?;
    let ft = finetune(ds, emb, pre.model.clone(), config.finetune.mode, &config.finetune_plan())?;
    let report = evaluate(&ft.model, Some(&text_tensor(emb)), ds, Split::Test)?;
    Ok((pre, ft, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(rename = "HR@10")]
    pub hr10: f64,
    #[serde(rename = "NDCG@10")]
    pub ndcg10: f64,
}

/// `full` plus one variant per removed pre-training task.
pub fn ablation_variants() -> Vec<(String, Vec<Task>)> {
    let mut out = vec![("full".to_string(), Task::ALL.to_vec())];
    for drop in Task::ALL {
        out.push((format!("-{}", drop.short()), Task::ALL.into_iter().filter(|&t| t != drop).collect()));
    }
    out
}

pub fn ablate(ds: &SequenceDataset, emb: &ItemEmbeddingMatrix, config: &RunConfig) -> Result<Vec<AblationRow>> {
    let emb = &align_embeddings(emb, ds)?;
    let mut rows = Vec::new();
    for (variant, tasks) in ablation_variants() {
        log::info!("ablation variant {variant}");
        let (_, _, report) = pretrain_finetune(ds, emb, config, &tasks)?;
        let (hr10, ndcg10) = report.hr_ndcg(10)?;
        rows.push(AblationRow { variant, hr10, ndcg10 });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything an end-to-end run produces.
pub struct EndToEnd {
    pub pretrained: TrainOutcome,
    pub finetuned: TrainOutcome,
    pub baseline: TrainOutcome,
    pub model_report: RankReport,
    pub baseline_report: RankReport,
    pub poprec_report: RankReport,
    pub coldstart: Vec<ColdStartRow>,
}

/// A pipeline stage failure, carrying the stage name.
fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Argument(m) => Error::Argument(format!("{name}: {m}")),
        Error::Shape(m) => Error::Shape(format!("{name}: {m}")),
        Error::Mode(m) => Error::Mode(format!("{name}: {m}")),
        Error::Divergence(m) => Error::Divergence(format!("{name}: {m}")),
        other => other,
    })
}

pub fn end_to_end(ds: &SequenceDataset, emb: &ItemEmbeddingMatrix, config: &RunConfig) -> Result<EndToEnd> {
    let emb = &align_embeddings(emb, ds)?;
    let (pretrained, finetuned, model_report) =
        stage("pretrain/finetune", pretrain_finetune(ds, emb, config, &config.pretrain.tasks))?;
    let baseline = stage(
        "baseline",
        train_id_baseline(ds, config.model_config(emb.dim(), ds.num_items()), &config.baseline_plan()),
    )?;
    let baseline_report = stage("evaluate", evaluate(&baseline.model, None, ds, Split::Test))?;
    let poprec_report = stage("evaluate", evaluate_poprec(ds, Split::Test))?;
    let coldstart = stage("coldstart-report", coldstart_report(&model_report, &baseline_report))?;
    Ok(EndToEnd { pretrained, finetuned, baseline, model_report, baseline_report, poprec_report, coldstart })
}

/// Shorthand for evaluating a loaded text or text+ID model on one split.
pub fn evaluate_model(
    model: &Model<f32>,
    emb: Option<&ItemEmbeddingMatrix>,
    ds: &SequenceDataset,
    split: Split,
) -> Result<RankReport> {
    let text = emb.map(|e| align_embeddings(e, ds)).transpose()?.map(|e| text_tensor(&e));
    evaluate(model, text.as_ref(), ds, split)
}
