//! Synthetic explicit-rating data shaped like a small movie-ratings dump.
//!
//! Items carry a heavy-tailed popularity and a latent taste vector; users
//! carry a taste vector and a log-normal activity level. Each user picks
//! their items by Gumbel top-k on `a·ln pop + τ·u·v`, so choices mix
//! popularity with taste, and rates them higher the better the taste match.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::RatingRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    /// Target mean ratings per user before clipping to the catalogue.
    pub mean_activity: f64,
    pub min_activity: usize,
    /// Spread of the log-normal activity distribution.
    pub activity_sigma: f64,
    /// Zipf exponent of the item popularity weights.
    pub zipf: f64,
    /// Weight of log-popularity in the choice logits.
    pub popularity_weight: f64,
    /// Weight of taste affinity in the choice logits.
    pub taste_weight: f64,
    pub factors: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 943,
            items: 1682,
            mean_activity: 106.0,
            min_activity: 20,
            activity_sigma: 0.9,
            zipf: 0.9,
            popularity_weight: 1.0,
            taste_weight: 5.0,
            factors: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.users < 2 || self.items < 2 || self.factors == 0 {
            return Err(Error::invalid("synthetic data needs at least two users, two items and one factor"));
        }
        if self.min_activity == 0 || self.min_activity > self.items {
            return Err(Error::invalid("min_activity must lie in 1..=items"));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.zipf) && ok(self.popularity_weight) && ok(self.taste_weight) && ok(self.activity_sigma))
            || !(self.mean_activity.is_finite() && self.mean_activity > 0.0)
        {
            return Err(Error::invalid("synthetic weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Generates rating records keyed `"u<i>"`/`"i<j>"` with ratings in 1..=5
/// and strictly increasing timestamps per user.
pub fn generate(config: &SynthConfig) -> Result<Vec<RatingRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.items;

    // popularity ranks are shuffled so item index carries no signal
    let mut ranks: Vec<usize> = (1..=n).collect();
    rand::seq::SliceRandom::shuffle(ranks.as_mut_slice(), &mut rng);
    let log_pop: Vec<f64> = ranks.iter().map(|&r| -config.zipf * (r as f64).ln()).collect();
    let item_taste: Vec<Vec<f64>> = (0..n).map(|_| unit_vector(&mut rng, config.factors)).collect();

    let sigma = config.activity_sigma;
    let activity = LogNormal::new(config.mean_activity.ln() - 0.5 * sigma * sigma, sigma)
        .map_err(|e| Error::invalid(format!("activity distribution: {e}")))?;

    let mut records = Vec::new();
    for u in 0..config.users {
        let taste = unit_vector(&mut rng, config.factors);
        let k = (activity.sample(&mut rng).round() as usize).clamp(config.min_activity, n);
        let affinity: Vec<f64> = item_taste
            .iter()
            .map(|v| v.iter().zip(&taste).map(|(a, b)| a * b).sum())
            .collect();
        let mut keyed: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let g: f64 = -(-rng.random::<f64>().max(f64::MIN_POSITIVE).ln()).ln();
                (config.popularity_weight * log_pop[j] + config.taste_weight * affinity[j] + g, j)
            })
            .collect();
        keyed.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0));
        let chosen = &mut keyed[..k];
        rand::seq::SliceRandom::shuffle(chosen, &mut rng);

        let mut t = 880_000_000 + rng.random_range(0..10_000_000u64);
        for &(_, j) in chosen.iter() {
            t += rng.random_range(1..50_000u64);
            let noise: f64 = rng.sample(StandardNormal);
            let rating = (3.2 + 2.0 * affinity[j] + 0.8 * noise).round().clamp(1.0, 5.0);
            records.push(RatingRecord {
                user_key: format!("u{}", u + 1),
                item_key: format!("i{}", j + 1),
                rating,
                timestamp: Some(t),
            });
        }
    }
    Ok(records)
}

/// Writes records as headerless `user\titem\trating\ttimestamp` lines.
pub fn write_tsv(records: &[RatingRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.user_key,
            r.item_key,
            r.rating,
            r.timestamp.map(|t| t.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}
