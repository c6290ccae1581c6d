//! Top-K recommendation, ranking metrics and popularity / cold-start reports.

mod metrics;

use std::cmp::Ordering;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

pub use metrics::{aggregate, mean_ci, metrics_for_user, AtK, MetricReport, MetricSummary, UserMetrics, NDCG_CUTOFF};

use crate::data::{DatasetSplit, InteractionMatrix, PopularityProfile};
use crate::error::{Error, Result};
use crate::network::{forward, Heads, TwoHeadedModel};

/// Users scored per forward pass during evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<u32>,
}

/// Indices of the `k` highest scores outside `exclude` (sorted), ties broken by
/// ascending index. Returns fewer than `k` when the catalogue runs out.
pub fn top_k(scores: &[f64], exclude: &[u32], k: usize) -> Vec<u32> {
    let mut candidates: Vec<u32> = (0..scores.len() as u32)
        .filter(|j| exclude.binary_search(j).is_err())
        .collect();
    let order = |a: &u32, b: &u32| -> Ordering {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, order);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(order);
    candidates
}

/// Scores from the chosen heads for a batch of users' training rows.
fn score_rows(model: &TwoHeadedModel, heads: Heads, train: &InteractionMatrix, users: &[usize]) -> Result<Array2<f64>> {
    let n = model.n_items();
    let mut input = Array2::<f64>::zeros((users.len(), n));
    for (mut row, &u) in input.rows_mut().into_iter().zip(users) {
        for &j in train.row(u) {
            row[j as usize] = 1.0;
        }
    }
    let cache = forward(model, input, heads)?;
    Ok(match heads {
        Heads::Contrast => cache.contrast_scores,
        _ => cache.mse_scores,
    }
    .expect("requested head was evaluated"))
}

/// Top-K list for one user from the model's serving head, with the user's
/// training items masked out.
pub fn recommend_topk(model: &TwoHeadedModel, user: usize, train_row: &[u32], k: usize) -> Result<RankedList> {
    let n = model.n_items();
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if k + train_row.len() > n {
        return Err(Error::invalid(format!(
            "K = {k} exceeds the {} items left after masking",
            n - train_row.len().min(n)
        )));
    }
    let row = InteractionMatrix::from_rows(n, vec![train_row.to_vec()])?;
    let scores = score_rows(model, model.serving_heads(), &row, &[0])?;
    Ok(RankedList {
        user,
        items: top_k(scores.row(0).as_slice().expect("standard layout"), row.row(0), k),
    })
}

/// Ranked lists for many users; `depth(u)` gives each user's list length.
pub fn recommend_many(
    model: &TwoHeadedModel,
    heads: Heads,
    train: &InteractionMatrix,
    users: &[usize],
    depth: impl Fn(usize) -> usize + Sync,
) -> Result<Vec<RankedList>> {
    Error::check_dim(model.n_items(), train.n_items())?;
    let chunks: Vec<Result<Vec<RankedList>>> = users
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let scores = score_rows(model, heads, train, chunk)?;
            Ok(chunk
                .iter()
                .zip(scores.rows())
                .map(|(&u, s)| RankedList {
                    user: u,
                    items: top_k(s.as_slice().expect("standard layout"), train.row(u), depth(u)),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(users.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Users with both a training row to encode and a nonempty target row.
pub fn evaluable_users(train: &InteractionMatrix, target: &InteractionMatrix) -> Vec<usize> {
    (0..train.n_users())
        .filter(|&u| train.row_len(u) > 0 && target.row_len(u) > 0)
        .collect()
}

fn ranking_depth(ks: &[usize], relevant: usize) -> usize {
    ks.iter().copied().max().unwrap_or(0).max(NDCG_CUTOFF).max(relevant)
}

/// Per-user metrics for the given users using the chosen heads.
pub fn user_metrics(
    model: &TwoHeadedModel,
    heads: Heads,
    train: &InteractionMatrix,
    target: &InteractionMatrix,
    users: &[usize],
    ks: &[usize],
) -> Result<Vec<UserMetrics>> {
    let lists = recommend_many(model, heads, train, users, |u| ranking_depth(ks, target.row_len(u)))?;
    lists
        .iter()
        .map(|l| metrics_for_user(&l.items, target.row(l.user), ks))
        .collect()
}

/// Mean NDCG over `users` from the chosen heads; the training signal for early stopping.
pub fn mean_ndcg(
    model: &TwoHeadedModel,
    heads: Heads,
    train: &InteractionMatrix,
    target: &InteractionMatrix,
    users: &[usize],
) -> Result<f64> {
    if users.is_empty() {
        return Ok(0.0);
    }
    let per_user = user_metrics(model, heads, train, target, users, &[])?;
    Ok(per_user.iter().map(|m| m.ndcg).sum::<f64>() / per_user.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub users: Vec<usize>,
    pub per_user: Vec<UserMetrics>,
}

/// Full metric report of a model's serving head on `target`, skipping users
/// with an empty training or target row.
pub fn evaluate(model: &TwoHeadedModel, train: &InteractionMatrix, target: &InteractionMatrix, ks: &[usize]) -> Result<Evaluation> {
    let users = evaluable_users(train, target);
    let per_user = user_metrics(model, model.serving_heads(), train, target, &users, ks)?;
    Ok(Evaluation {
        report: aggregate(&per_user)?,
        users,
        per_user,
    })
}

/// Popularity of recommended items for one recommender.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityReport {
    pub model: String,
    /// Equal-width bins over `[0, max count]`; bin `b` holds counts `c` with
    /// `⌊c · bins / (max + 1)⌋ = b`.
    pub histogram: Vec<u64>,
    pub max_count: u64,
    pub mean_popularity: f64,
    pub recommendations: u64,
}

impl PopularityReport {
    pub fn bin_of(count: u64, max_count: u64, bins: usize) -> usize {
        ((count as u128 * bins as u128) / (max_count as u128 + 1)) as usize
    }

    /// Inclusive lower count edge of bin `b`.
    pub fn bin_lower(&self, b: usize) -> u64 {
        let bins = self.histogram.len() as u128;
        ((b as u128 * (self.max_count as u128 + 1)).div_ceil(bins)) as u64
    }
}

pub const POPULARITY_BINS: usize = 20;

/// Histogram of training popularity over a set of ranked lists.
pub fn popularity_of_lists(model: &str, lists: &[RankedList], profile: &PopularityProfile, bins: usize) -> PopularityReport {
    let max_count = profile.counts.iter().copied().max().unwrap_or(0);
    let bins = bins.max(1);
    let mut histogram = vec![0u64; bins];
    let mut total = 0u64;
    let mut recommendations = 0u64;
    for j in lists.iter().flat_map(|l| &l.items) {
        let c = profile.counts[*j as usize];
        histogram[PopularityReport::bin_of(c, max_count, bins)] += 1;
        total += c;
        recommendations += 1;
    }
    PopularityReport {
        model: model.to_string(),
        histogram,
        max_count,
        mean_popularity: if recommendations == 0 {
            0.0
        } else {
            total as f64 / recommendations as f64
        },
        recommendations,
    }
}

/// Popularity reports of each model's top-K lists over the evaluable users of
/// `data` (nonempty train and test rows). Popularity is measured on `data.train`.
pub fn popularity_report(
    models: &[(&str, &TwoHeadedModel)],
    data: &DatasetSplit,
    profile: &PopularityProfile,
    k: usize,
) -> Result<Vec<PopularityReport>> {
    Error::check_dim(profile.n_items(), data.n_items())?;
    let users = evaluable_users(&data.train, &data.test);
    models
        .iter()
        .map(|(name, model)| {
            let lists = recommend_many(model, model.serving_heads(), &data.train, &users, |_| k)?;
            Ok(popularity_of_lists(name, &lists, profile, POPULARITY_BINS))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColdStartRow {
    pub user: usize,
    /// One NDCG per compared model, in model order.
    pub ndcg: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColdStartReport {
    pub models: Vec<String>,
    pub rows: Vec<ColdStartRow>,
    /// Held-out users with test items but nothing to fold in.
    pub skipped_empty_fold_in: usize,
}

impl ColdStartReport {
    pub fn mean_ndcg(&self, model: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.ndcg[model]).sum::<f64>() / self.rows.len() as f64
    }
}

/// NDCG of held-out users whose training rows are folded in through each
/// frozen model. `heldout` must only contain users unseen in training.
pub fn cold_start_eval(models: &[(&str, &TwoHeadedModel)], heldout: &DatasetSplit, k: usize) -> Result<ColdStartReport> {
    let with_test: Vec<usize> = (0..heldout.n_users())
        .filter(|&u| heldout.test.row_len(u) > 0)
        .collect();
    let users: Vec<usize> = with_test
        .iter()
        .copied()
        .filter(|&u| heldout.train.row_len(u) > 0)
        .collect();
    let mut columns = Vec::with_capacity(models.len());
    for (_, model) in models {
        let lists = recommend_many(model, model.serving_heads(), &heldout.train, &users, |u| {
            k.max(NDCG_CUTOFF).max(heldout.test.row_len(u))
        })?;
        let ndcg = lists
            .iter()
            .map(|l| metrics_for_user(&l.items, heldout.test.row(l.user), &[]).map(|m| m.ndcg))
            .collect::<Result<Vec<_>>>()?;
        columns.push(ndcg);
    }
    let rows = users
        .iter()
        .enumerate()
        .map(|(i, &user)| ColdStartRow {
            user,
            ndcg: columns.iter().map(|c| c[i]).collect(),
        })
        .collect();
    Ok(ColdStartReport {
        models: models.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
        skipped_empty_fold_in: with_test.len() - users.len(),
    })
}

/// `model,metric,k,mean,ci` rows; `k` is empty for R-Precision.
pub fn write_metrics_table(mut out: impl Write, reports: &[(&str, &MetricReport)]) -> std::io::Result<()> {
    writeln!(out, "model,metric,k,mean,ci,users")?;
    for (model, report) in reports {
        for e in &report.entries {
            let k = e.k.map(|k| k.to_string()).unwrap_or_default();
            writeln!(out, "{model},{},{k},{},{},{}", e.metric, e.mean, e.ci, report.users)?;
        }
    }
    Ok(())
}

/// `model,popularity_bin,bin_lower,count` rows.
pub fn write_popularity_table(mut out: impl Write, reports: &[PopularityReport]) -> std::io::Result<()> {
    writeln!(out, "model,popularity_bin,bin_lower,count")?;
    for r in reports {
        for (b, c) in r.histogram.iter().enumerate() {
            writeln!(out, "{},{b},{},{c}", r.model, r.bin_lower(b))?;
        }
    }
    Ok(())
}

/// `user,<model>_ndcg,...` rows.
pub fn write_cold_start_table(mut out: impl Write, report: &ColdStartReport) -> std::io::Result<()> {
    write!(out, "user")?;
    for m in &report.models {
        write!(out, ",{m}_ndcg")?;
    }
    writeln!(out)?;
    for row in &report.rows {
        write!(out, "{}", row.user)?;
        for v in &row.ndcg {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
