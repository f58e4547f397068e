use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SequenceDataset;
use crate::error::{Error, Result};

/// Self-supervised task a batch was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Next,
    Masked,
    Permuted,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Next, Task::Masked, Task::Permuted];

    /// Short tag used in ablation tables.
    pub fn short(self) -> &'static str {
        match self {
            Task::Next => "np",
            Task::Masked => "mp",
            Task::Permuted => "pp",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Next => "next",
            Task::Masked => "masked",
            Task::Permuted => "permuted",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "next" | "np" => Ok(Task::Next),
            "masked" | "mp" => Ok(Task::Masked),
            "permuted" | "pp" => Ok(Task::Permuted),
            other => Err(Error::Argument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

/// Right-padded index matrix fed to the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputBatch {
    pub batch: usize,
    pub len: usize,
    /// `batch × len` item indices; the mask token is `num_items`.
    pub inputs: Vec<usize>,
    pub pad: Vec<bool>,
    pub mode: AttentionMode,
    /// Number of real positions per row.
    pub lengths: Vec<usize>,
}

impl InputBatch {
    fn from_rows(rows: &[Vec<usize>], mode: AttentionMode) -> Self {
        let batch = rows.len();
        let len = rows.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let mut inputs = vec![0; batch * len];
        let mut pad = vec![true; batch * len];
        for (b, row) in rows.iter().enumerate() {
            for (t, &item) in row.iter().enumerate() {
                inputs[b * len + t] = item;
                pad[b * len + t] = false;
            }
        }
        InputBatch { batch, len, inputs, pad, mode, lengths: rows.iter().map(Vec::len).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingBatch {
    pub task: Task,
    pub input: InputBatch,
    /// `(flat position b·len + t, target item)` pairs: the predicted set.
    pub targets: Vec<(usize, usize)>,
    /// For permuted batches, the order applied to each row's window.
    pub permutations: Option<Vec<Vec<usize>>>,
}

impl TrainingBatch {
    pub fn target_positions(&self) -> Vec<usize> {
        self.targets.iter().map(|&(p, _)| p).collect()
    }

    pub fn target_items(&self) -> Vec<usize> {
        self.targets.iter().map(|&(_, i)| i).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSpec {
    pub max_len: usize,
    pub mask_ratio: f64,
    /// Index the masked task writes in place of a hidden item.
    pub mask_index: usize,
}

fn window(seq: &[usize], keep: usize) -> &[usize] {
    &seq[seq.len().saturating_sub(keep)..]
}

/// Shifted next-item batch: the input at position `t` predicts item `t + 1`.
/// Uses the most recent `max_len + 1` items of each sequence; sequences with
/// fewer than two items are skipped.
pub fn next_batch(seqs: &[&[usize]], max_len: usize) -> Option<TrainingBatch> {
    let windows: Vec<&[usize]> = seqs.iter().map(|s| window(s, max_len + 1)).filter(|w| w.len() >= 2).collect();
    if windows.is_empty() {
        return None;
    }
    let rows: Vec<Vec<usize>> = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
    let input = InputBatch::from_rows(&rows, AttentionMode::Causal);
    let mut targets = Vec::new();
    for (b, w) in windows.iter().enumerate() {
        for t in 0..w.len() - 1 {
            targets.push((b * input.len + t, w[t + 1]));
        }
    }
    Some(TrainingBatch { task: Task::Next, input, targets, permutations: None })
}

/// Next-item prediction over windows reordered by `perms` (one permutation
/// of the `max_len + 1`-item window per usable sequence).
pub fn permuted_batch_with(seqs: &[&[usize]], max_len: usize, perms: &[Vec<usize>]) -> Result<Option<TrainingBatch>> {
    let windows: Vec<&[usize]> = seqs.iter().map(|s| window(s, max_len + 1)).filter(|w| w.len() >= 2).collect();
    if windows.len() != perms.len() {
        return Err(Error::Argument(format!("{} permutations for {} sequences", perms.len(), windows.len())));
    }
    let mut permuted = Vec::with_capacity(windows.len());
    for (w, p) in windows.iter().zip(perms) {
        let mut sorted = p.clone();
        sorted.sort_unstable();
        if sorted != (0..w.len()).collect::<Vec<_>>() {
            return Err(Error::Argument(format!("{p:?} is not a permutation of a {}-item window", w.len())));
        }
        permuted.push(p.iter().map(|&i| w[i]).collect::<Vec<usize>>());
    }
    let refs: Vec<&[usize]> = permuted.iter().map(Vec::as_slice).collect();
    Ok(next_batch(&refs, max_len).map(|mut b| {
        b.task = Task::Permuted;
        b.permutations = Some(perms.to_vec());
        b
    }))
}

/// Cloze batch with explicit mask decisions, one flag vector per usable sequence.
pub fn masked_batch_with(
    seqs: &[&[usize]],
    max_len: usize,
    mask_index: usize,
    masks: &[Vec<bool>],
) -> Result<Option<TrainingBatch>> {
    let windows: Vec<&[usize]> = seqs.iter().map(|s| window(s, max_len)).filter(|w| !w.is_empty()).collect();
    if windows.len() != masks.len() {
        return Err(Error::Argument(format!("{} masks for {} sequences", masks.len(), windows.len())));
    }
    if windows.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(windows.len());
    for (w, m) in windows.iter().zip(masks) {
        if m.len() != w.len() {
            return Err(Error::Argument(format!("mask of {} for window of {}", m.len(), w.len())));
        }
        rows.push(w.iter().zip(m).map(|(&i, &hide)| if hide { mask_index } else { i }).collect::<Vec<_>>());
    }
    let input = InputBatch::from_rows(&rows, AttentionMode::Bidirectional);
    let mut targets = Vec::new();
    for (b, (w, m)) in windows.iter().zip(masks).enumerate() {
        for t in 0..w.len() {
            if m[t] {
                targets.push((b * input.len + t, w[t]));
            }
        }
    }
    Ok(Some(TrainingBatch { task: Task::Masked, input, targets, permutations: None }))
}

/// Builds a pre-training batch for `task` from the training prefixes of `users`.
///
/// Masked: every position is hidden independently with probability
/// `mask_ratio`, and one position is forced when none was drawn. Permuted:
/// each window is shuffled uniformly before the next-item shift.
pub fn make_pretrain_batch<R: Rng + ?Sized>(
    ds: &SequenceDataset,
    users: &[usize],
    task: Task,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Option<TrainingBatch>> {
    let seqs: Vec<&[usize]> = users.iter().map(|&u| ds.sequences[u].train()).collect();
    match task {
        Task::Next => Ok(next_batch(&seqs, spec.max_len)),
        Task::Masked => {
            let mut masks = Vec::new();
            for s in &seqs {
                let w = window(s, spec.max_len);
                if w.is_empty() {
                    continue;
                }
                let mut m: Vec<bool> = (0..w.len()).map(|_| rng.random::<f64>() < spec.mask_ratio).collect();
                if !m.iter().any(|&x| x) {
                    m[rng.random_range(0..w.len())] = true;
                }
                masks.push(m);
            }
            masked_batch_with(&seqs, spec.max_len, spec.mask_index, &masks)
        }
        Task::Permuted => {
            let mut perms = Vec::new();
            for s in &seqs {
                let w = window(s, spec.max_len + 1);
                if w.len() < 2 {
                    continue;
                }
                let mut p: Vec<usize> = (0..w.len()).collect();
                p.shuffle(rng);
                perms.push(p);
            }
            permuted_batch_with(&seqs, spec.max_len, &perms)
        }
    }
}

/// Causal inference batch over contexts (each truncated to `max_len`).
pub fn context_batch(contexts: &[&[usize]], max_len: usize) -> InputBatch {
    let rows: Vec<Vec<usize>> = contexts.iter().map(|c| window(c, max_len).to_vec()).collect();
    InputBatch::from_rows(&rows, AttentionMode::Causal)
}
