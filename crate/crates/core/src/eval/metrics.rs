use crate::error::{Error, Result};

/// NDCG is truncated at this rank, with binary gains.
pub const NDCG_CUTOFF: usize = 50;

/// Cutoff-dependent metrics of one user at one `K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub r_precision: f64,
    pub ndcg: f64,
    pub at_k: Vec<AtK>,
}

/// Ranking metrics of one user.
///
/// `ranked` is the recommendation list in rank order and `relevant` the
/// user's sorted test items. A list shorter than a cutoff simply contributes
/// no hits past its end.
pub fn metrics_for_user(ranked: &[u32], relevant: &[u32], ks: &[usize]) -> Result<UserMetrics> {
    if relevant.is_empty() {
        return Err(Error::invalid("metrics need at least one relevant item"));
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::invalid("cutoffs must be positive"));
    }
    let rel: Vec<bool> = ranked
        .iter()
        .map(|j| relevant.binary_search(j).is_ok())
        .collect();
    let n_rel = relevant.len();
    let hits_at = |k: usize| rel.iter().take(k).filter(|&&r| r).count();

    let r_precision = hits_at(n_rel) as f64 / n_rel as f64;

    let dcg: f64 = rel
        .iter()
        .take(NDCG_CUTOFF)
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..n_rel.min(NDCG_CUTOFF))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ndcg = dcg / idcg;

    let at_k = ks
        .iter()
        .map(|&k| {
            let hits = hits_at(k);
            let precision = hits as f64 / k as f64;
            let recall = hits as f64 / n_rel as f64;
            let f1 = if hits == 0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            let mut running = 0usize;
            let mut ap_sum = 0.0;
            for (i, &r) in rel.iter().take(k).enumerate() {
                if r {
                    running += 1;
                    ap_sum += running as f64 / (i + 1) as f64;
                }
            }
            AtK {
                k,
                precision,
                recall,
                f1,
                average_precision: ap_sum / n_rel.min(k) as f64,
            }
        })
        .collect();

    Ok(UserMetrics {
        r_precision,
        ndcg,
        at_k,
    })
}

/// Mean and 95% confidence half-width of one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub k: Option<usize>,
    pub mean: f64,
    pub ci: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<MetricSummary>,
    pub users: usize,
}

impl MetricReport {
    pub fn get(&self, metric: &str, k: Option<usize>) -> Option<&MetricSummary> {
        self.entries.iter().find(|e| e.metric == metric && e.k == k)
    }

    pub fn ndcg(&self) -> f64 {
        self.get("ndcg", Some(NDCG_CUTOFF)).map_or(0.0, |e| e.mean)
    }
}

/// Mean and `1.96 · s / √u` half-width, `s` the sample standard deviation.
pub fn mean_ci(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid("confidence intervals need at least two users"));
    }
    let u = values.len() as f64;
    let mean = values.iter().sum::<f64>() / u;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (u - 1.0);
    Ok((mean, 1.96 * var.sqrt() / u.sqrt()))
}

/// Summarizes per-user metrics. The cutoffs must agree across users.
pub fn aggregate(per_user: &[UserMetrics]) -> Result<MetricReport> {
    if per_user.len() < 2 {
        return Err(Error::invalid("aggregation needs at least two users"));
    }
    let ks: Vec<usize> = per_user[0].at_k.iter().map(|a| a.k).collect();
    if per_user
        .iter()
        .any(|m| m.at_k.iter().map(|a| a.k).ne(ks.iter().copied()))
    {
        return Err(Error::invalid("users were evaluated at different cutoffs"));
    }
    let summarize = |metric: &'static str, k: Option<usize>, f: &dyn Fn(&UserMetrics) -> f64| {
        let values: Vec<f64> = per_user.iter().map(f).collect();
        let (mean, ci) = mean_ci(&values)?;
        Ok(MetricSummary { metric, k, mean, ci })
    };
    let mut entries = vec![
        summarize("r_precision", None, &|m| m.r_precision)?,
        summarize("ndcg", Some(NDCG_CUTOFF), &|m| m.ndcg)?,
    ];
    for (i, &k) in ks.iter().enumerate() {
        entries.push(summarize("map", Some(k), &|m| m.at_k[i].average_precision)?);
        entries.push(summarize("precision", Some(k), &|m| m.at_k[i].precision)?);
        entries.push(summarize("recall", Some(k), &|m| m.at_k[i].recall)?);
        entries.push(summarize("f1", Some(k), &|m| m.at_k[i].f1)?);
    }
    Ok(MetricReport {
        entries,
        users: per_user.len(),
    })
}
