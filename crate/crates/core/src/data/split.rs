use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ingest::{collapse_duplicates, IdVocabulary, RatingRecord};
use super::matrix::{DatasetSplit, InteractionMatrix};
use crate::error::{Error, Result};

/// Fractions of each user's interactions sent to train, validation and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.5,
            validation: 0.2,
            test: 0.3,
        }
    }
}

// Guards the ceiling against products like 0.2 * 15 = 3.0000000000000004.
const CEIL_SLACK: f64 = 1e-9;

fn ceil_count(ratio: f64, k: usize) -> usize {
    ((ratio * k as f64 - CEIL_SLACK).ceil().max(0.0)) as usize
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid("split ratios must be nonnegative"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split ratios must sum to 1"));
        }
        Ok(())
    }

    /// Per-user sizes for `k` interactions: train takes `⌈train·k⌉`,
    /// validation `⌈validation·k⌉` capped by what is left, test the remainder.
    pub fn sizes(&self, k: usize) -> (usize, usize, usize) {
        let train = ceil_count(self.train, k).min(k);
        let validation = ceil_count(self.validation, k).min(k - train);
        (train, validation, k - train - validation)
    }
}

fn assemble(
    n_items: usize,
    ordered_rows: impl Iterator<Item = Vec<u32>>,
    ratios: &SplitRatios,
) -> Result<DatasetSplit> {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for row in ordered_rows {
        let (a, b, _) = ratios.sizes(row.len());
        train.push(row[..a].to_vec());
        validation.push(row[a..a + b].to_vec());
        test.push(row[a + b..].to_vec());
    }
    DatasetSplit::new(
        InteractionMatrix::from_rows(n_items, train)?,
        InteractionMatrix::from_rows(n_items, validation)?,
        InteractionMatrix::from_rows(n_items, test)?,
    )
}

/// Splits every user's interactions in timestamp order (ties by item index).
///
/// Timestamps come from the same duplicate collapse used by binarization, so
/// each stored entry carries the timestamp of the rating that produced it.
pub fn split_temporal(
    matrix: &InteractionMatrix,
    records: &[RatingRecord],
    vocab: &IdVocabulary,
    ratios: &SplitRatios,
) -> Result<DatasetSplit> {
    ratios.validate()?;
    Error::check_dim(vocab.n_users(), matrix.n_users())?;
    let latest = collapse_duplicates(records, vocab);
    let mut rows = Vec::with_capacity(matrix.n_users());
    for user in 0..matrix.n_users() {
        let mut stamped = Vec::with_capacity(matrix.row_len(user));
        for &item in matrix.row(user) {
            let ts = latest
                .get(&(user as u32, item))
                .and_then(|l| l.timestamp)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "temporal split needs a timestamp for user {:?}, item {:?}",
                        vocab.user_key(user).unwrap_or("?"),
                        vocab.item_key(item as usize).unwrap_or("?")
                    ))
                })?;
            stamped.push((ts, item));
        }
        stamped.sort_unstable();
        rows.push(stamped.into_iter().map(|(_, item)| item).collect());
    }
    assemble(matrix.n_items(), rows.into_iter(), ratios)
}

/// Splits every user's interactions over a seeded uniform permutation.
pub fn split_random(matrix: &InteractionMatrix, ratios: &SplitRatios, seed: u64) -> Result<DatasetSplit> {
    ratios.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = matrix.rows().map(|row| {
        let mut row = row.to_vec();
        row.shuffle(&mut rng);
        row
    });
    assemble(matrix.n_items(), rows, ratios)
}

/// Seeded choice of `⌈fraction·m⌉` users; `true` marks a held-out user.
pub fn select_holdout(n_users: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
    }
    let count = ceil_count(fraction, n_users);
    if count == 0 {
        return Err(Error::invalid("holdout fraction selects no users"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags = vec![false; n_users];
    for u in rand::seq::index::sample(&mut rng, n_users, count) {
        flags[u] = true;
    }
    Ok(flags)
}

/// Moves a seeded sample of users into a separate matrix. Both outputs keep
/// the full `m × n` shape; the rows not belonging to each side are empty.
pub fn holdout_users(
    matrix: &InteractionMatrix,
    fraction: f64,
    seed: u64,
) -> Result<(InteractionMatrix, InteractionMatrix)> {
    let held = select_holdout(matrix.n_users(), fraction, seed)?;
    let kept: Vec<bool> = held.iter().map(|h| !h).collect();
    Ok((matrix.mask_rows(&kept), matrix.mask_rows(&held)))
}
