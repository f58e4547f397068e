use idasr_core::adam::{AdamConfig, AdamState};
use idasr_core::tensor::{gelu_scalar, softmax};
use idasr_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn gelu_matches_wide_reference() {
    assert_eq!(gelu_scalar(0.0f32), 0.0);
    assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-4);
    assert!((gelu_scalar(-0.5f32) as f64 - gelu_ref(-0.5)).abs() < 1e-6);
}

#[test]
fn softmax_matches_wide_reference() {
    let p = softmax(&[1.0f32, 2.0, 3.0]);
    let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
    for (k, &pk) in p.iter().enumerate() {
        assert!((pk as f64 - ((k + 1) as f64).exp() / z).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_matches_wide_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits: Vec<f64> = (0..10).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let targets = [3usize, 0];
    let mut expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * 5..(r + 1) * 5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        expected += (lse - row[t]) / 2.0;
    }
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&Tensor::new(vec![2, 5], logits.iter().map(|&v| v as f32).collect()).unwrap());
    let loss = tape.cross_entropy(x, &targets).unwrap();
    assert!((tape.value(loss).data()[0] as f64 - expected).abs() < 1e-6);
}

#[test]
fn matmul_gradient_tight_at_double_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
    let b = Tensor::new(vec![4, 2], (0..8).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let f = |a: &[f64]| {
        let mut tape = Tape::new();
        let av = tape.leaf(&Tensor::new(vec![3, 4], a.to_vec()).unwrap().with_grad());
        let bv = tape.constant(b.clone());
        let y = tape.matmul(av, bv).unwrap();
        let s = tape.sum(y);
        let value = tape.value(s).data()[0];
        tape.backward(s).unwrap();
        (value, tape.grad(av).unwrap().to_vec())
    };
    let (_, g) = f(&a);
    let h = 1e-5;
    for i in 0..a.len() {
        let mut up = a.clone();
        up[i] += h;
        let mut down = a.clone();
        down[i] -= h;
        let numeric = (f(&up).0 - f(&down).0) / (2.0 * h);
        assert!((g[i] - numeric).abs() / g[i].abs().max(1e-12) < 1e-6);
    }
}

/// Scalar Adam at 64 bits, written out independently of the library.
fn adam_oracle(w0: f64, lr: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for t in 1..=steps as i32 {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);
    }
    w
}

#[test]
fn adam_descends_quadratic_bowl() {
    let config = AdamConfig { lr: 0.1, ..AdamConfig::default() };
    let mut state = AdamState::<f32>::new(config);
    let mut w = Tensor::new(vec![1], vec![1.0f32]).unwrap().with_grad();
    for _ in 0..100 {
        w.grad = Some(vec![2.0 * w.data()[0]]);
        state.step(&mut [&mut w]).unwrap();
    }
    let oracle = adam_oracle(1.0, 0.1, 100);
    assert!((w.data()[0] as f64).abs() < 0.05);
    assert!((w.data()[0] as f64 - oracle).abs() < 1e-4, "{} vs {oracle}", w.data()[0]);
    assert_eq!(state.step_count(), 100);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e4f32..1e4, 1..40)) {
        let total: f64 = softmax(&row).iter().map(|&p| p as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }
}
