//! Leave-one-out full-catalog ranking, HR/NDCG, the popularity baseline and
//! the cold-start bucket report.
//!
//! Every item the user has not interacted with is a candidate; the user's
//! other items are removed. Ties are broken by ascending item index so ranks
//! are reproducible bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SequenceDataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

/// Cut-offs reported for every evaluation.
pub const REPORT_KS: [usize; 2] = [5, 10];
pub const BUCKET_WIDTH: usize = 5;
/// Popularities at or above this collapse into one open bucket.
pub const BUCKET_CAP: usize = 50;

const SCORE_CHUNK: usize = 256;

/// 1-based rank of `target` among `(all items \ exclude) ∪ {target}`.
///
/// An item outranks the target if it scores higher, or scores equal and has
/// a smaller index.
pub fn rank_target<F: Scalar>(scores: &[F], target: usize, exclude: &[usize]) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::Index(format!("target {target} with {} scores", scores.len())));
    }
    if exclude.contains(&target) {
        return Err(Error::Argument(format!("target {target} is in the exclusion set")));
    }
    let s = scores[target];
    if s.is_nan() {
        return Err(Error::Argument(format!("target {target} has a NaN score")));
    }
    let mut excluded = vec![false; scores.len()];
    for &i in exclude {
        if i >= scores.len() {
            return Err(Error::Index(format!("excluded item {i} with {} scores", scores.len())));
        }
        excluded[i] = true;
    }
    let above = scores.iter().enumerate().filter(|&(i, &v)| !excluded[i] && (v > s || (v == s && i < target))).count();
    Ok(above + 1)
}

/// `(HR@k, NDCG@k)` for single-target ranks.
pub fn hr_ndcg(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::UndefinedMetric("no ranks to average".into()));
    }
    let mut hits = 0.0;
    let mut gain = 0.0;
    for &r in ranks {
        if r == 0 {
            return Err(Error::Argument("ranks start at 1".into()));
        }
        if r <= k {
            hits += 1.0;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok((hits / n, gain / n))
}

/// Non-personalized scores: training interaction counts.
pub fn poprec_scores(ds: &SequenceDataset) -> Vec<f64> {
    ds.train_popularity().into_iter().map(|c| c as f64).collect()
}

/// One ranked test case.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRow {
    pub user: String,
    pub target: String,
    /// Training interaction count of the target.
    pub popularity: usize,
    pub candidates: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

/// Test cases grouped by target popularity; `high` is `None` for the open
/// top bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub low: usize,
    pub high: Option<usize>,
    pub count: usize,
    pub mean_rank: f64,
}

fn bucket_of(popularity: usize) -> usize {
    popularity.min(BUCKET_CAP) / BUCKET_WIDTH
}

fn bucket_bounds(b: usize) -> (usize, Option<usize>) {
    let low = b * BUCKET_WIDTH;
    (low, (low < BUCKET_CAP).then_some(low + BUCKET_WIDTH))
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RankReport {
    pub rows: Vec<RankRow>,
}

impl RankReport {
    pub fn ranks(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.rank).collect()
    }

    pub fn hr_ndcg(&self, k: usize) -> Result<(f64, f64)> {
        hr_ndcg(&self.ranks(), k)
    }

    pub fn metrics(&self) -> Result<Vec<MetricRow>> {
        REPORT_KS.iter().map(|&k| self.hr_ndcg(k).map(|(hr, ndcg)| MetricRow { k, hr, ndcg })).collect()
    }

    /// Non-empty popularity buckets in ascending order.
    pub fn buckets(&self) -> Vec<Bucket> {
        let mut sums = [(0usize, 0.0f64); BUCKET_CAP / BUCKET_WIDTH + 1];
        for r in &self.rows {
            let s = &mut sums[bucket_of(r.popularity)];
            s.0 += 1;
            s.1 += r.rank as f64;
        }
        sums.iter()
            .enumerate()
            .filter(|(_, s)| s.0 > 0)
            .map(|(b, &(count, total))| {
                let (low, high) = bucket_bounds(b);
                Bucket { low, high, count, mean_rank: total / count as f64 }
            })
            .collect()
    }

    /// HR@k restricted to one popularity bucket; `None` if it is empty.
    pub fn bucket_hr(&self, low: usize, k: usize) -> Option<f64> {
        let ranks: Vec<usize> =
            self.rows.iter().filter(|r| bucket_of(r.popularity) == bucket_of(low)).map(|r| r.rank).collect();
        hr_ndcg(&ranks, k).ok().map(|(hr, _)| hr)
    }

    pub fn summary(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "users: {}", self.rows.len()).unwrap();
        for m in self.metrics()? {
            writeln!(s, "HR@{k}: {:.4}  NDCG@{k}: {:.4}", m.hr, m.ndcg, k = m.k).unwrap();
        }
        for b in self.buckets() {
            let high = b.high.map_or("inf".to_string(), |h| h.to_string());
            writeln!(s, "popularity [{}, {high}): count {} mean rank {:.2}", b.low, b.count, b.mean_rank).unwrap();
        }
        Ok(s)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<RankRow>, _>>()?;
        Ok(RankReport { rows })
    }
}

/// One ranking case: user index, model context, target, excluded items.
pub struct Case<'a> {
    pub user: usize,
    pub context: &'a [usize],
    pub target: usize,
    pub exclude: Vec<usize>,
}

/// Validation or test cases, one per user.
pub fn split_cases(ds: &SequenceDataset, split: Split) -> Vec<Case<'_>> {
    (0..ds.len())
        .map(|u| {
            let c = ds.eval_case(u, split);
            Case { user: u, context: c.context, target: c.target, exclude: c.exclude }
        })
        .collect()
}

/// The last transition of each training prefix: predict the final training
/// item from the ones before it. Users whose prefix has one item are skipped.
pub fn train_last_cases(ds: &SequenceDataset) -> Vec<Case<'_>> {
    ds.sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.train().len() >= 2)
        .map(|(u, s)| {
            let train = s.train();
            let (context, target) = (&train[..train.len() - 1], train[train.len() - 1]);
            let mut exclude: Vec<usize> = context.iter().copied().filter(|&i| i != target).collect();
            exclude.sort_unstable();
            exclude.dedup();
            let context = &context[context.len().saturating_sub(ds.max_len)..];
            Case { user: u, context, target, exclude }
        })
        .collect()
}

/// Ranks every case with scores produced chunk by chunk by `score`.
pub fn rank_cases<F, S>(ds: &SequenceDataset, cases: &[Case<'_>], mut score: S) -> Result<RankReport>
where
    F: Scalar,
    S: FnMut(&[&[usize]]) -> Result<Vec<Vec<F>>>,
{
    let pop = ds.train_popularity();
    let mut rows = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(SCORE_CHUNK) {
        let contexts: Vec<&[usize]> = chunk.iter().map(|c| c.context).collect();
        let scores = score(&contexts)?;
        if scores.len() != chunk.len() {
            return Err(Error::Shape(format!("{} score rows for {} cases", scores.len(), chunk.len())));
        }
        for (c, s) in chunk.iter().zip(&scores) {
            if s.len() != ds.num_items() {
                return Err(Error::Shape(format!("{} scores for {} items", s.len(), ds.num_items())));
            }
            rows.push(RankRow {
                user: ds.users.token(ds.sequences[c.user].user).to_string(),
                target: ds.items.token(c.target).to_string(),
                popularity: pop[c.target],
                candidates: ds.num_items() - c.exclude.len(),
                rank: rank_target(s, c.target, &c.exclude)?,
            });
        }
    }
    Ok(RankReport { rows })
}

pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    text: Option<&Tensor<F>>,
    ds: &SequenceDataset,
    split: Split,
) -> Result<RankReport> {
    rank_cases(ds, &split_cases(ds, split), |ctx| model.context_scores(text, ctx))
}

/// HR@1 style report over the last training transition of every user.
pub fn evaluate_train_last<F: Scalar>(
    model: &Model<F>,
    text: Option<&Tensor<F>>,
    ds: &SequenceDataset,
) -> Result<RankReport> {
    rank_cases(ds, &train_last_cases(ds), |ctx| model.context_scores(text, ctx))
}

pub fn evaluate_poprec(ds: &SequenceDataset, split: Split) -> Result<RankReport> {
    let scores = poprec_scores(ds);
    rank_cases(ds, &split_cases(ds, split), |ctx| Ok(vec![scores.clone(); ctx.len()]))
}

/// Improvement of model A over baseline B in one popularity bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartRow {
    pub bucket_low: usize,
    /// Empty for the open top bucket.
    pub bucket_high: Option<usize>,
    pub count: usize,
    /// `meanRank_B − meanRank_A`; positive means A ranks the target higher.
    pub improved_mean_rank: f64,
}

pub fn coldstart_report(a: &RankReport, b: &RankReport) -> Result<Vec<ColdStartRow>> {
    if a.rows.len() != b.rows.len() {
        return Err(Error::Argument(format!("reports cover {} and {} users", a.rows.len(), b.rows.len())));
    }
    let mut by_user: Vec<&RankRow> = b.rows.iter().collect();
    by_user.sort_by(|x, y| x.user.cmp(&y.user));
    let mut sums = [(0usize, 0.0f64); BUCKET_CAP / BUCKET_WIDTH + 1];
    for ra in &a.rows {
        let rb = by_user
            .binary_search_by(|r| r.user.as_str().cmp(&ra.user))
            .map(|i| by_user[i])
            .map_err(|_| Error::Argument(format!("user {} missing from the baseline report", ra.user)))?;
        if rb.target != ra.target {
            return Err(Error::Argument(format!("user {} has targets {} and {}", ra.user, ra.target, rb.target)));
        }
        let s = &mut sums[bucket_of(ra.popularity)];
        s.0 += 1;
        s.1 += rb.rank as f64 - ra.rank as f64;
    }
    Ok(sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(i, &(count, total))| {
            let (bucket_low, bucket_high) = bucket_bounds(i);
            ColdStartRow { bucket_low, bucket_high, count, improved_mean_rank: total / count as f64 }
        })
        .collect())
}

pub fn write_coldstart_csv(rows: &[ColdStartRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{UserSequence, Vocab};

    #[test]
    fn strict_top_is_rank_one() {
        assert_eq!(rank_target(&[0.1, 0.9, 0.3], 1, &[]).unwrap(), 1);
    }

    #[test]
    fn ties_break_by_index() {
        let s = [1.0f32; 5];
        assert_eq!(rank_target(&s, 0, &[]).unwrap(), 1);
        assert_eq!(rank_target(&s, 4, &[]).unwrap(), 5);
        assert_eq!(rank_target(&s, 4, &[0, 2]).unwrap(), 3);
    }

    #[test]
    fn excluded_target_is_rejected() {
        assert!(matches!(rank_target(&[1.0, 2.0], 1, &[1]), Err(Error::Argument(_))));
        assert!(matches!(rank_target(&[1.0, 2.0], 2, &[]), Err(Error::Index(_))));
    }

    #[test]
    fn excluded_items_never_outrank() {
        assert_eq!(rank_target(&[5.0, 4.0, 3.0, 1.0], 3, &[0, 1, 2]).unwrap(), 1);
    }

    #[test]
    fn metric_closed_forms() {
        assert_eq!(hr_ndcg(&[1, 1, 1], 10).unwrap(), (1.0, 1.0));
        assert_eq!(hr_ndcg(&[3], 10).unwrap(), (1.0, 0.5));
        assert_eq!(hr_ndcg(&[1, 11], 10).unwrap(), (0.5, 0.5));
        assert!(matches!(hr_ndcg(&[], 10), Err(Error::UndefinedMetric(_))));
        assert!(matches!(hr_ndcg(&[1], 0), Err(Error::Argument(_))));
    }

    fn dataset() -> SequenceDataset {
        let items = Vocab::from_tokens((0..6).map(|i| format!("i{i}")));
        let users = Vocab::from_tokens(["a", "b", "c"]);
        let sequences = vec![
            UserSequence::new(0, vec![0, 1, 2, 3]).unwrap(),
            UserSequence::new(1, vec![0, 1, 4, 5]).unwrap(),
            UserSequence::new(2, vec![0, 2, 4]).unwrap(),
        ];
        SequenceDataset { items, users, sequences, max_len: 3, excluded_users: 0 }
    }

    #[test]
    fn poprec_orders_by_training_count() {
        let ds = dataset();
        assert_eq!(poprec_scores(&ds), vec![3.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let r = evaluate_poprec(&ds, Split::Test).unwrap();
        // user a: excluded {0,1,2}, target 3 ties with 4 and 5 at zero and wins by index.
        assert_eq!(r.rows[0].rank, 1);
        assert_eq!(r.rows[0].candidates, 3);
        // user b: excluded {0,1,4}; 2 and 3 tie with target 5 at zero and come first.
        assert_eq!(r.rows[1].rank, 3);
        // user c: excluded {0,2}; item 1 scores higher, item 3 ties with a smaller index.
        assert_eq!(r.rows[2].rank, 3);
    }

    #[test]
    fn train_last_cases_skip_one_item_prefixes() {
        let ds = dataset();
        let cases = train_last_cases(&ds);
        assert_eq!(cases.len(), 2);
        assert_eq!((cases[0].context, cases[0].target), (&[0][..], 1));
    }

    fn report(rows: &[(&str, usize, usize)]) -> RankReport {
        RankReport {
            rows: rows
                .iter()
                .map(|&(u, popularity, rank)| RankRow {
                    user: u.into(),
                    target: format!("t{u}"),
                    popularity,
                    candidates: 100,
                    rank,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_reports_show_no_improvement() {
        let a = report(&[("a", 0, 3), ("b", 7, 9), ("c", 80, 1)]);
        let rows = coldstart_report(&a, &a).unwrap();
        assert!(rows.iter().all(|r| r.improved_mean_rank == 0.0));
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 3);
        assert_eq!(rows.last().unwrap().bucket_high, None);
        assert_eq!(rows.last().unwrap().bucket_low, 50);
    }

    #[test]
    fn uniform_gain_shows_in_every_bucket() {
        let a = report(&[("a", 0, 3), ("b", 7, 9), ("c", 12, 1), ("d", 3, 5)]);
        let b = report(&[("d", 3, 7), ("c", 12, 3), ("b", 7, 11), ("a", 0, 5)]);
        let rows = coldstart_report(&a, &b).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.improved_mean_rank == 2.0));
        assert_eq!((rows[0].bucket_low, rows[0].bucket_high, rows[0].count), (0, Some(5), 2));
    }

    #[test]
    fn user_mismatch_is_rejected() {
        let a = report(&[("a", 0, 3)]);
        let b = report(&[("z", 0, 3)]);
        assert!(matches!(coldstart_report(&a, &b), Err(Error::Argument(_))));
        let c = report(&[("a", 0, 3), ("b", 0, 1)]);
        assert!(matches!(coldstart_report(&a, &c), Err(Error::Argument(_))));
    }

    #[test]
    fn report_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = report(&[("a,b", 0, 3), ("q\"x", 7, 9)]);
        r.write_csv(&path).unwrap();
        assert_eq!(RankReport::read_csv(&path).unwrap(), r);
        assert!(r.summary().unwrap().contains("HR@10: 1.0000"));
    }
}
