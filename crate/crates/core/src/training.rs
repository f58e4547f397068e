//! Pre-training, fine-tuning and the ID-only baseline.
//!
//! All stages share one loop: shuffle users, cut batches, pick the task for
//! the step round-robin, take an Adam step, then score the validation split
//! and keep the best epoch by NDCG@10.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::corpus::{make_pretrain_batch, BatchSpec, SequenceDataset, Split, Task};
use crate::embeddings::ItemEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{text_tensor, ItemSource, Model, ModelConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    FinetuneText,
    FinetuneTextId,
    BaselineIdOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Text,
    TextId,
}

impl FinetuneMode {
    pub fn stage(self) -> Stage {
        match self {
            FinetuneMode::Text => Stage::FinetuneText,
            FinetuneMode::TextId => Stage::FinetuneTextId,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    /// Tasks cycled through step by step; only pre-training reads this.
    pub tasks: Vec<Task>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub mask_ratio: f64,
    /// Score the validation split after every epoch and return the best one.
    pub select_best: bool,
}

impl TrainPlan {
    pub fn new(stage: Stage) -> Self {
        TrainPlan {
            stage,
            tasks: Task::ALL.to_vec(),
            epochs: 10,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            seed: 0,
            mask_ratio: 0.2,
            select_best: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be positive".into()));
        }
        if self.stage == Stage::Pretrain && self.tasks.is_empty() {
            return Err(Error::Argument("pre-training needs at least one task".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Argument(format!("mask_ratio {} outside (0, 1]", self.mask_ratio)));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::Argument(format!("plan is for {:?}, called as {:?}", self.stage, stage)));
        }
        Ok(())
    }
}

/// Mean training loss of one task over one epoch, with the validation
/// metrics measured after that epoch (NaN when validation is off).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
    #[serde(rename = "valid_HR@10")]
    pub valid_hr10: f64,
    #[serde(rename = "valid_NDCG@10")]
    pub valid_ndcg10: f64,
}

pub fn write_metrics_csv(records: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned parameters; 0 means untrained.
    pub best_epoch: usize,
    pub best_ndcg10: Option<f64>,
}

/// Independent random streams, so e.g. a next-only run draws the same user
/// order and dropout masks whether or not other tasks could consume
/// randomness.
struct Streams {
    order: ChaCha8Rng,
    batch: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams { order: stream(1), batch: stream(2), dropout: stream(3) }
    }
}

fn check_text(model: &Model<f32>, text: Option<&ItemEmbeddingMatrix>) -> Result<Option<Tensor<f32>>> {
    match (model.source(), text) {
        (ItemSource::IdOnly, Some(_)) => Err(Error::Mode("the ID-only baseline takes no text embeddings".into())),
        (ItemSource::IdOnly, None) => Ok(None),
        (_, None) => Err(Error::Mode("text model needs item text embeddings".into())),
        (_, Some(m)) => {
            if m.len() != model.config.num_items || m.dim() != model.config.text_dim {
                return Err(Error::Shape(format!(
                    "embeddings {}×{}, model expects {}×{}",
                    m.len(),
                    m.dim(),
                    model.config.num_items,
                    model.config.text_dim
                )));
            }
            Ok(Some(text_tensor(m)))
        }
    }
}

fn run(
    mut model: Model<f32>,
    text: Option<&Tensor<f32>>,
    ds: &SequenceDataset,
    plan: &TrainPlan,
    tasks: &[Task],
) -> Result<TrainOutcome> {
    if ds.num_items() != model.config.num_items {
        return Err(Error::Shape(format!("dataset has {} items, model {}", ds.num_items(), model.config.num_items)));
    }
    let spec = BatchSpec { max_len: model.config.max_len, mask_ratio: plan.mask_ratio, mask_index: ds.num_items() };
    let mut rngs = Streams::new(plan.seed);
    let mut adam = AdamState::new(plan.optimizer);
    let mut users: Vec<usize> = (0..ds.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut step = 0usize;

    for epoch in 1..=plan.epochs {
        users.shuffle(&mut rngs.order);
        let mut sums = vec![(0.0f64, 0usize); tasks.len()];
        for chunk in users.chunks(plan.batch_size) {
            let slot = step % tasks.len();
            let task = tasks[slot];
            let Some(batch) = make_pretrain_batch(ds, chunk, task, &spec, &mut rngs.batch)? else {
                continue;
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, text)?;
            let loss = model.loss(&mut tape, &bound, &batch, Some(&mut rngs.dropout))?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Divergence(format!("loss {value} at epoch {epoch}, step {step}, task {task}")));
            }
            tape.backward(loss)?;
            model.collect_grads(&tape, &bound);
            adam.step(&mut model.params.slots_mut())?;
            sums[slot].0 += value;
            sums[slot].1 += 1;
            step += 1;
        }

        let (hr, ndcg) = if plan.select_best {
            evaluate(&model, text, ds, Split::Valid)?.hr_ndcg(10)?
        } else {
            (f64::NAN, f64::NAN)
        };
        for (task, &(total, n)) in tasks.iter().zip(&sums) {
            let loss = if n > 0 { total / n as f64 } else { f64::NAN };
            history.push(EpochRecord { epoch, task: task.short().into(), loss, valid_hr10: hr, valid_ndcg10: ndcg });
        }
        log::info!("epoch {epoch}: {}", epoch_line(&history[history.len() - tasks.len()..]));
        if plan.select_best && best.as_ref().is_none_or(|(b, _, _)| ndcg > *b) {
            best = Some((ndcg, epoch, model.clone()));
        }
    }

    Ok(match best {
        Some((ndcg, epoch, m)) => TrainOutcome { model: m, history, best_epoch: epoch, best_ndcg10: Some(ndcg) },
        None => TrainOutcome { best_epoch: plan.epochs, model, history, best_ndcg10: None },
    })
}

fn epoch_line(records: &[EpochRecord]) -> String {
    let losses: Vec<String> = records.iter().map(|r| format!("{} loss {:.4}", r.task, r.loss)).collect();
    let r = &records[0];
    format!("{}; valid HR@10 {:.4} NDCG@10 {:.4}", losses.join(", "), r.valid_hr10, r.valid_ndcg10)
}

/// Pre-trains a fresh text model on the plan's task cycle.
pub fn pretrain(
    ds: &SequenceDataset,
    text: &ItemEmbeddingMatrix,
    config: ModelConfig,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    plan.expect(Stage::Pretrain)?;
    let model = Model::new(config, ItemSource::Text, plan.seed)?;
    let t = check_text(&model, Some(text))?;
    run(model, t.as_ref(), ds, plan, &plan.tasks)
}

/// Next-item fine-tuning of a pre-trained text model. `TextId` first adds a
/// zero ID table, so the starting model scores exactly like its source.
pub fn finetune(
    ds: &SequenceDataset,
    text: &ItemEmbeddingMatrix,
    mut model: Model<f32>,
    mode: FinetuneMode,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    plan.expect(mode.stage())?;
    match (mode, model.source()) {
        (FinetuneMode::TextId, ItemSource::Text) => model.add_id_table()?,
        (FinetuneMode::Text, ItemSource::Text) | (FinetuneMode::TextId, ItemSource::TextId) => {}
        (m, s) => return Err(Error::Mode(format!("cannot fine-tune a {s:?} model in {m:?} mode"))),
    }
    let t = check_text(&model, Some(text))?;
    run(model, t.as_ref(), ds, plan, &[Task::Next])
}

/// Next-item training of a fresh ID-only model.
pub fn train_id_baseline(ds: &SequenceDataset, config: ModelConfig, plan: &TrainPlan) -> Result<TrainOutcome> {
    plan.expect(Stage::BaselineIdOnly)?;
    let model = Model::new(config, ItemSource::IdOnly, plan.seed)?;
    run(model, None, ds, plan, &[Task::Next])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{leave_one_out_split, Event, InteractionLog};
    use crate::embeddings::{pseudo_embed, PseudoSource};

    fn tiny() -> (SequenceDataset, ItemEmbeddingMatrix, ModelConfig) {
        let mut events = Vec::new();
        for u in 0..12 {
            for t in 0..6 {
                events.push(Event { user: format!("u{u:02}"), item: format!("i{}", (u + t) % 8), timestamp: t });
            }
        }
        let ds = leave_one_out_split(&InteractionLog::new(events), 5).unwrap();
        let emb = pseudo_embed(ds.items.tokens(), PseudoSource::Hash, 8, 3).unwrap();
        let config = ModelConfig {
            text_dim: 8,
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 5,
            dropout: 0.1,
            num_items: ds.num_items(),
            ..ModelConfig::default()
        };
        (ds, emb, config)
    }

    fn plan(stage: Stage, epochs: usize) -> TrainPlan {
        TrainPlan { epochs, batch_size: 5, ..TrainPlan::new(stage) }
    }

    #[test]
    fn stage_mismatch_is_rejected() {
        let (ds, emb, config) = tiny();
        let p = plan(Stage::FinetuneText, 1);
        assert!(matches!(pretrain(&ds, &emb, config, &p), Err(Error::Argument(_))));
    }

    #[test]
    fn baseline_rejects_text_and_finetune_rejects_id_only() {
        let (ds, emb, config) = tiny();
        let base = train_id_baseline(&ds, config, &plan(Stage::BaselineIdOnly, 0)).unwrap().model;
        assert!(check_text(&base, Some(&emb)).is_err());
        let r = finetune(&ds, &emb, base, FinetuneMode::Text, &plan(Stage::FinetuneText, 1));
        assert!(matches!(r, Err(Error::Mode(_))));
    }

    #[test]
    fn same_seed_same_result() {
        let (ds, emb, config) = tiny();
        let p = plan(Stage::Pretrain, 2);
        let a = pretrain(&ds, &emb, config.clone(), &p).unwrap();
        let b = pretrain(&ds, &emb, config, &p).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 6);
    }

    #[test]
    fn next_only_pretrain_matches_text_finetune() {
        let (ds, emb, config) = tiny();
        let p = TrainPlan { tasks: vec![Task::Next], ..plan(Stage::Pretrain, 1) };
        let pre = pretrain(&ds, &emb, config.clone(), &p).unwrap();
        let start = Model::new(config, ItemSource::Text, p.seed).unwrap();
        let ft =
            finetune(&ds, &emb, start, FinetuneMode::Text, &TrainPlan { stage: Stage::FinetuneText, ..p }).unwrap();
        assert_eq!(pre.history, ft.history);
        assert_eq!(pre.model, ft.model);
    }

    #[test]
    fn zero_epochs_returns_the_input() {
        let (ds, emb, config) = tiny();
        let pre = pretrain(&ds, &emb, config, &plan(Stage::Pretrain, 1)).unwrap().model;
        let ft = finetune(&ds, &emb, pre.clone(), FinetuneMode::Text, &plan(Stage::FinetuneText, 0)).unwrap();
        assert_eq!(ft.model, pre);
        assert_eq!(ft.best_epoch, 0);
    }

    #[test]
    fn diverging_loss_aborts() {
        let (ds, emb, config) = tiny();
        let mut model = Model::new(config, ItemSource::Text, 0).unwrap();
        model.params.final_gain.data_mut()[0] = f32::NAN;
        let r = finetune(&ds, &emb, model, FinetuneMode::Text, &plan(Stage::FinetuneText, 1));
        assert!(matches!(r, Err(Error::Divergence(_))));
    }

    #[test]
    fn metrics_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rec = EpochRecord { epoch: 1, task: "np".into(), loss: 1.5, valid_hr10: 0.25, valid_ndcg10: 0.125 };
        write_metrics_csv(&[rec], &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "epoch,task,loss,valid_HR@10,valid_NDCG@10\n1,np,1.5,0.25,0.125\n");
    }
}
