//! Browser demo: rank a score vector, filter a pasted log, and train a tiny
//! text-embedding recommender in the page.
//!
//! The plain functions hold the logic and are tested natively; the
//! `#[wasm_bindgen]` items only convert errors to JS values.

use idasr_core::corpus::{five_core_filter, generate_synthetic, leave_one_out_split, Event, InteractionLog};
use idasr_core::corpus::{SequenceDataset, SyntheticSpec};
use idasr_core::embeddings::{align_to_vocab, pseudo_embed, ItemEmbeddingMatrix, PseudoSource};
use idasr_core::evaluation::{evaluate_train_last, hr_ndcg, rank_target};
use idasr_core::model::{text_tensor, Model, ModelConfig};
use idasr_core::tensor::Tensor;
use idasr_core::training::{finetune, pretrain, FinetuneMode, Stage, TrainPlan};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct RankOut {
    rank: usize,
    hr: f64,
    ndcg: f64,
}

fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("cannot parse {s:?}")))
        .collect()
}

/// Rank of `target` among comma-separated scores, plus HR@k and NDCG@k for
/// that single case.
pub fn rank_json(scores: &str, target: usize, exclude: &str, k: usize) -> Result<String, String> {
    let scores: Vec<f64> = parse_list(scores)?;
    let exclude: Vec<usize> = parse_list(exclude)?;
    let rank = rank_target(&scores, target, &exclude).map_err(|e| e.to_string())?;
    let (hr, ndcg) = hr_ndcg(&[rank], k).map_err(|e| e.to_string())?;
    serde_json::to_string(&RankOut { rank, hr, ndcg }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct FilterOut {
    events_in: usize,
    events_out: usize,
    users: usize,
    items: usize,
    sequences: Vec<SplitRow>,
}

#[derive(Serialize)]
struct SplitRow {
    user: String,
    train: Vec<String>,
    valid: String,
    test: String,
}

fn parse_log(text: &str) -> Result<InteractionLog, String> {
    let mut events = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(['\t', ' ']).filter(|s| !s.is_empty()).collect();
        let [user, item, ts] = f[..] else {
            return Err(format!("line {}: expected user, item, timestamp", n + 1));
        };
        let timestamp = ts.parse().map_err(|_| format!("line {}: bad timestamp {ts:?}", n + 1))?;
        events.push(Event { user: user.into(), item: item.into(), timestamp });
    }
    Ok(InteractionLog::new(events))
}

/// 5-core filter and leave-one-out split of a pasted `user item timestamp` log.
pub fn filter_json(log: &str) -> Result<String, String> {
    let log = parse_log(log)?;
    let kept = five_core_filter(&log);
    let ds = leave_one_out_split(&kept, 50).map_err(|e| e.to_string())?;
    let tok = |i: usize| ds.items.token(i).to_string();
    let sequences = ds
        .sequences
        .iter()
        .take(20)
        .map(|s| SplitRow {
            user: ds.users.token(s.user).into(),
            train: s.train().iter().map(|&i| tok(i)).collect(),
            valid: tok(s.valid()),
            test: tok(s.test()),
        })
        .collect();
    serde_json::to_string(&FilterOut {
        events_in: log.len(),
        events_out: kept.len(),
        users: ds.len(),
        items: ds.num_items(),
        sequences,
    })
    .map_err(|e| e.to_string())
}

/// A small synthetic corpus with a text model trained on it.
pub struct Trainer {
    ds: SequenceDataset,
    emb: ItemEmbeddingMatrix,
    text: Tensor<f32>,
    model: Model<f32>,
    seed: u64,
    epochs: usize,
}

#[derive(Serialize)]
struct TrainOut {
    epochs: usize,
    loss: f64,
    train_hr1: f64,
}

#[derive(Serialize)]
struct Recommendation {
    item: String,
    score: f32,
}

impl Trainer {
    pub fn new(seed: u64) -> Result<Self, String> {
        let spec = SyntheticSpec {
            users: 40,
            items: 24,
            attributes: 4,
            min_len: 6,
            max_len: 10,
            rare_fraction: 0.0,
            seed,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
        let ds = leave_one_out_split(&data.log, 12).map_err(|e| e.to_string())?;
        let raw =
            pseudo_embed(&data.item_tokens, PseudoSource::Attributes { rows: &data.attributes, noise: 0.1 }, 16, seed)
                .map_err(|e| e.to_string())?;
        let emb = align_to_vocab(&raw, &ds.items).map_err(|e| e.to_string())?;
        let config = ModelConfig {
            text_dim: 16,
            dim: 16,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 12,
            dropout: 0.0,
            num_items: ds.num_items(),
            ..ModelConfig::default()
        };
        let plan = TrainPlan { epochs: 5, batch_size: 8, seed, select_best: false, ..TrainPlan::new(Stage::Pretrain) };
        let model = pretrain(&ds, &emb, config, &plan).map_err(|e| e.to_string())?.model;
        let text = text_tensor(&emb);
        Ok(Trainer { ds, emb, text, model, seed, epochs: 0 })
    }

    pub fn items(&self) -> Vec<String> {
        self.ds.items.tokens().to_vec()
    }

    /// Runs `epochs` more text fine-tuning epochs.
    pub fn train(&mut self, epochs: usize) -> Result<String, String> {
        let plan = TrainPlan {
            stage: Stage::FinetuneText,
            epochs,
            batch_size: 8,
            seed: self.seed + self.epochs as u64,
            select_best: false,
            ..TrainPlan::new(Stage::FinetuneText)
        };
        let outcome =
            finetune(&self.ds, &self.emb, self.model.clone(), FinetuneMode::Text, &plan).map_err(|e| e.to_string())?;
        self.model = outcome.model;
        self.epochs += epochs;
        let loss = outcome.history.last().map_or(f64::NAN, |r| r.loss);
        let report = evaluate_train_last(&self.model, Some(&self.text), &self.ds).map_err(|e| e.to_string())?;
        let (train_hr1, _) = report.hr_ndcg(1).map_err(|e| e.to_string())?;
        serde_json::to_string(&TrainOut { epochs: self.epochs, loss, train_hr1 }).map_err(|e| e.to_string())
    }

    /// Top `n` next items after a comma-separated context of item tokens.
    pub fn recommend(&self, context: &str, n: usize) -> Result<String, String> {
        let ctx = context
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|t| self.ds.items.get(t).ok_or_else(|| format!("unknown item {t:?}")))
            .collect::<Result<Vec<_>, _>>()?;
        if ctx.is_empty() {
            return Err("context is empty".into());
        }
        let scores = self.model.context_scores(Some(&self.text), &[&ctx]).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..scores[0].len()).collect();
        order.sort_by(|&a, &b| scores[0][b].total_cmp(&scores[0][a]).then(a.cmp(&b)));
        let top: Vec<Recommendation> = order
            .into_iter()
            .take(n)
            .map(|i| Recommendation { item: self.ds.items.token(i).into(), score: scores[0][i] })
            .collect();
        serde_json::to_string(&top).map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
pub fn rank(scores: &str, target: usize, exclude: &str, k: usize) -> Result<String, JsValue> {
    rank_json(scores, target, exclude, k).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn filter_log(log: &str) -> Result<String, JsValue> {
    filter_json(log).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub struct Demo(Trainer);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsValue> {
        Trainer::new(seed as u64).map(Demo).map_err(|e| JsValue::from_str(&e))
    }

    pub fn items(&self) -> String {
        self.0.items().join(" ")
    }

    pub fn train(&mut self, epochs: usize) -> Result<String, JsValue> {
        self.0.train(epochs).map_err(|e| JsValue::from_str(&e))
    }

    pub fn recommend(&self, context: &str, n: usize) -> Result<String, JsValue> {
        self.0.recommend(context, n).map_err(|e| JsValue::from_str(&e))
    }
}
