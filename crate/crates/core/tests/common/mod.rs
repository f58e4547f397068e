#![allow(dead_code)]

use idasr_core::corpus::{masked_batch_with, next_batch, permuted_batch_with, TrainingBatch};
use idasr_core::model::{ItemSource, Model, ModelConfig};
use idasr_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EPS: f64 = 1e-4;

/// d=8, L=2, h=2, n=6, twelve items.
pub fn grad_config() -> ModelConfig {
    ModelConfig {
        text_dim: 5,
        dim: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_len: 6,
        dropout: 0.0,
        num_items: 12,
        ..ModelConfig::default()
    }
}

pub fn random_text(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// A model whose weights are far enough from zero that every nonlinearity
/// is exercised.
pub fn spread_model(source: ItemSource, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(grad_config(), source, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = m.params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(m.params.slots_mut()) {
        let base = if name.ends_with("gain") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = base + 0.4 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// Next, masked and permuted batches over sequences of up to six positions,
/// including a padded row.
pub fn grad_batches() -> Vec<TrainingBatch> {
    let seqs: Vec<Vec<usize>> = vec![vec![0, 3, 5, 7, 2, 9, 11], vec![4, 1, 8], vec![6, 10, 2, 3, 0]];
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let next = next_batch(&refs, 6).unwrap();
    let masks = vec![
        vec![false, true, false, false, true, false],
        vec![true, false, false],
        vec![false, false, true, false, true],
    ];
    let masked = masked_batch_with(&refs, 6, 12, &masks).unwrap().unwrap();
    let perms = vec![vec![6, 0, 5, 1, 4, 2, 3], vec![2, 0, 1], vec![4, 3, 2, 1, 0]];
    let permuted = permuted_batch_with(&refs, 6, &perms).unwrap().unwrap();
    vec![next, masked, permuted]
}

pub fn loss_value(model: &Model<f64>, text: Option<&Tensor<f64>>, batch: &TrainingBatch) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, text).unwrap();
    let loss = model.loss(&mut tape, &bound, batch, None).unwrap();
    tape.value(loss).data()[0]
}

pub fn analytic_grads(model: &Model<f64>, text: Option<&Tensor<f64>>, batch: &TrainingBatch) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, text).unwrap();
    let loss = m.loss(&mut tape, &bound, batch, None).unwrap();
    tape.backward(loss).unwrap();
    m.collect_grads(&tape, &bound);
    m.params.slots_mut().into_iter().map(|t| t.grad.clone().unwrap()).collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)` per parameter group, where `n` comes from
/// central differences. The floor matters for groups whose true gradient is
/// zero, such as the key bias (softmax cancels a per-query constant).
pub fn grad_check(model: &Model<f64>, text: Option<&Tensor<f64>>, batch: &TrainingBatch) -> Vec<(String, f64)> {
    let analytic = analytic_grads(model, text, batch);
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut work = model.clone();
    let mut out = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let len = analytic[g].len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.params.slots_mut()[g].data()[i];
            work.params.slots_mut()[g].data_mut()[i] = orig + EPS;
            let up = loss_value(&work, text, batch);
            work.params.slots_mut()[g].data_mut()[i] = orig - EPS;
            let down = loss_value(&work, text, batch);
            work.params.slots_mut()[g].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * EPS);
        }
        let diff: f64 = analytic[g].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic[g].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        out.push((name.clone(), diff / na.max(nn).max(1e-6)));
    }
    out
}

/// Worst relative error per group across the three task batches and all
/// three item sources.
pub fn full_grad_suite() -> Vec<(String, f64)> {
    let text = random_text(12, 5, 7);
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (k, source) in [ItemSource::Text, ItemSource::TextId, ItemSource::IdOnly].into_iter().enumerate() {
        let mut model = spread_model(source, 11 + k as u64);
        if source == ItemSource::TextId {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for v in model.params.id_table.as_mut().unwrap().data_mut() {
                *v = 0.4 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let t = (source != ItemSource::IdOnly).then_some(&text);
        for batch in grad_batches() {
            if source == ItemSource::IdOnly && batch.input.inputs.contains(&12) {
                continue;
            }
            for (name, err) in grad_check(&model, t, &batch) {
                let key = format!("{source:?}/{name}");
                match worst.iter_mut().find(|(n, _)| *n == key) {
                    Some(w) => w.1 = w.1.max(err),
                    None => worst.push((key, err)),
                }
            }
        }
    }
    worst
}
