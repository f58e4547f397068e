//! Attribute-driven synthetic interaction logs.
//!
//! Items carry a latent attribute vector with one dominant attribute. Each user
//! holds a preference vector that drifts over time and is pulled towards the
//! attributes of what they just consumed; the next item is drawn from a softmax
//! over preference·attribute plus an item popularity bias. A pool of rare items
//! is kept out of regular sampling and appears only a handful of times in
//! training positions, plus as some users' final (test) item.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Event, InteractionLog, CORE};
use crate::embeddings::ItemEmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Latent attribute count K.
    pub attributes: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Std of the per-step Gaussian random walk on preferences.
    pub drift: f64,
    /// Probability of a uniformly random pick instead of a preference draw.
    pub noise: f64,
    /// Inverse temperature on preference·attribute scores.
    pub sharpness: f64,
    /// How far a consumed item pulls the preference towards its attributes.
    pub item_pull: f64,
    /// Std of off-dominant item attribute values.
    pub attribute_jitter: f64,
    /// Std of the user's initial preference around its dominant attribute.
    pub preference_spread: f64,
    /// Std of per-item log-popularity bias.
    pub popularity_skew: f64,
    pub rare_fraction: f64,
    /// Probability that a user's final item is drawn from the rare pool.
    pub rare_test_rate: f64,
    /// Per-step probability of a rare draw at a training position.
    pub rare_train_rate: f64,
    /// Most training appearances any rare item may have.
    pub rare_train_cap: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 2000,
            items: 500,
            attributes: 16,
            min_len: 8,
            max_len: 16,
            drift: 0.05,
            noise: 0.05,
            sharpness: 8.0,
            item_pull: 0.3,
            attribute_jitter: 0.25,
            preference_spread: 0.3,
            popularity_skew: 0.7,
            rare_fraction: 0.1,
            rare_test_rate: 0.15,
            rare_train_rate: 0.02,
            rare_train_cap: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        if self.users == 0 || self.items == 0 || self.attributes == 0 {
            return bad("user, item and attribute counts must be positive");
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return bad("sequence lengths need 3 <= min_len <= max_len");
        }
        if self.items < self.max_len * 2 {
            return bad("need at least twice as many items as the longest sequence");
        }
        for p in [self.noise, self.rare_fraction, self.rare_test_rate, self.rare_train_rate, self.item_pull] {
            if !(0.0..=1.0).contains(&p) {
                return bad("rates must lie in [0, 1]");
            }
        }
        if self.rare_train_cap >= CORE {
            return bad("rare_train_cap must stay below the 5-core threshold");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// Raw log; rare items are listed in `exempt_items`.
    pub log: InteractionLog,
    pub item_tokens: Vec<String>,
    /// Ground-truth attribute vector per item, aligned with `item_tokens`.
    pub attributes: Vec<Vec<f64>>,
    /// Dominant attribute per item.
    pub item_topic: Vec<usize>,
    /// Dominant attribute per user, aligned with user index.
    pub user_topic: Vec<usize>,
}

impl SyntheticData {
    /// Attribute matrix in the embedding file layout (dim = K).
    pub fn attribute_matrix(&self) -> ItemEmbeddingMatrix {
        let data = self.attributes.iter().flatten().map(|&v| v as f32).collect();
        ItemEmbeddingMatrix::new(self.item_tokens.clone(), self.attributes[0].len(), data).expect("rows match tokens")
    }
}

pub fn user_token(u: usize) -> String {
    format!("u{u:05}")
}

pub fn item_token(i: usize) -> String {
    format!("i{i:04}")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws an index from `candidates` with probability ∝ exp(score).
fn draw(candidates: &[usize], score: impl Fn(usize) -> f64, rng: &mut ChaCha8Rng) -> usize {
    let scores: Vec<f64> = candidates.iter().map(|&i| score(i)).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&c, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return c;
        }
        u -= w;
    }
    *candidates.last().unwrap()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.attributes;

    let mut item_topic = Vec::with_capacity(spec.items);
    let mut attributes = Vec::with_capacity(spec.items);
    for _ in 0..spec.items {
        let topic = rng.random_range(0..k);
        let mut a: Vec<f64> = (0..k).map(|_| spec.attribute_jitter * gaussian(&mut rng)).collect();
        a[topic] += 1.0;
        item_topic.push(topic);
        attributes.push(a);
    }
    let bias: Vec<f64> = (0..spec.items).map(|_| spec.popularity_skew * gaussian(&mut rng)).collect();

    let mut order: Vec<usize> = (0..spec.items).collect();
    order.shuffle(&mut rng);
    let n_rare = (spec.rare_fraction * spec.items as f64).round() as usize;
    let mut is_rare = vec![false; spec.items];
    for &i in &order[..n_rare] {
        is_rare[i] = true;
    }
    let mut rare_budget = vec![0usize; spec.items];

    let mut events = Vec::new();
    let mut user_topic = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let topic = rng.random_range(0..k);
        user_topic.push(topic);
        let mut pref: Vec<f64> = (0..k).map(|_| spec.preference_spread * gaussian(&mut rng)).collect();
        pref[topic] += 1.0;
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut consumed = vec![false; spec.items];
        for t in 0..len {
            let use_rare = if t + 1 == len {
                rng.random::<f64>() < spec.rare_test_rate
            } else if t + 2 < len {
                rng.random::<f64>() < spec.rare_train_rate
            } else {
                false
            };
            let training_pos = t + 2 < len;
            let mut candidates: Vec<usize> = (0..spec.items)
                .filter(|&i| {
                    !consumed[i]
                        && is_rare[i] == use_rare
                        && (!use_rare || !training_pos || rare_budget[i] < spec.rare_train_cap)
                })
                .collect();
            if candidates.is_empty() {
                candidates = (0..spec.items).filter(|&i| !consumed[i] && !is_rare[i]).collect();
            }
            let item = if rng.random::<f64>() < spec.noise {
                candidates[rng.random_range(0..candidates.len())]
            } else {
                let score = |i: usize| {
                    let dot: f64 = pref.iter().zip(&attributes[i]).map(|(p, a)| p * a).sum();
                    spec.sharpness * dot + bias[i]
                };
                draw(&candidates, score, &mut rng)
            };
            consumed[item] = true;
            if is_rare[item] && training_pos {
                rare_budget[item] += 1;
            }
            events.push(Event { user: user_token(u), item: item_token(item), timestamp: t as i64 });
            for (p, a) in pref.iter_mut().zip(&attributes[item]) {
                *p = (1.0 - spec.item_pull) * *p + spec.item_pull * a;
            }
            for p in pref.iter_mut() {
                *p += spec.drift * gaussian(&mut rng);
            }
        }
    }

    let mut log = InteractionLog::new(events);
    log.exempt_items = (0..spec.items).filter(|&i| is_rare[i]).map(item_token).collect::<BTreeSet<_>>();
    Ok(SyntheticData {
        log,
        item_tokens: (0..spec.items).map(item_token).collect(),
        attributes,
        item_topic,
        user_topic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{five_core_filter, leave_one_out_split};

    fn small() -> SyntheticSpec {
        SyntheticSpec { users: 300, items: 120, attributes: 8, ..Default::default() }
    }

    #[test]
    fn seed_determines_output() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.attributes, b.attributes);
        let c = generate_synthetic(&SyntheticSpec { seed: 9, ..small() }).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn dominant_attribute_drives_choices() {
        let spec = SyntheticSpec {
            noise: 0.0,
            drift: 0.0,
            preference_spread: 0.0,
            rare_fraction: 0.0,
            users: 300,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let mut agree = 0;
        for e in data.log.events() {
            let u: usize = e.user[1..].parse().unwrap();
            let i: usize = e.item[1..].parse().unwrap();
            if data.item_topic[i] == data.user_topic[u] {
                agree += 1;
            }
        }
        let share = agree as f64 / data.log.len() as f64;
        assert!(share >= 0.9, "share {share}");
    }

    #[test]
    fn popularity_covers_cold_buckets() {
        let data = generate_synthetic(&small()).unwrap();
        let filtered = five_core_filter(&data.log);
        let ds = leave_one_out_split(&filtered, 50).unwrap();
        let pop = ds.train_popularity();
        let tested: Vec<usize> = ds.sequences.iter().map(|s| pop[s.test()]).collect();
        assert!(tested.iter().any(|&p| p < 5), "no test targets in [0,5)");
        assert!(pop.iter().any(|&p| (5..10).contains(&p)), "no items in [5,10)");
    }

    #[test]
    fn rare_items_stay_rare_in_training() {
        let data = generate_synthetic(&small()).unwrap();
        let ds = leave_one_out_split(&five_core_filter(&data.log), 50).unwrap();
        let pop = ds.train_popularity();
        for tok in &data.log.exempt_items {
            if let Some(i) = ds.items.get(tok) {
                assert!(pop[i] < CORE, "{tok} seen {} times", pop[i]);
            }
        }
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate_synthetic(&SyntheticSpec { users: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { rare_train_cap: 5, ..small() }).is_err());
    }
}
