//! Popularity-distributed negative sampling with replacement, stored as
//! per-user integer counts.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::data::{InteractionMatrix, PopularityProfile};
use crate::error::{Error, Result};

/// Users per parallel block. Each block owns an RNG stream derived from the
/// sampler seed, so results do not depend on the number of threads.
pub const USER_BLOCK: usize = 64;

/// Above `DIRECT_DRAW_FACTOR × support` draws per user the counts are
/// produced by an equivalent multinomial draw instead of one draw at a time.
const DIRECT_DRAW_FACTOR: usize = 4;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of user block `block` in draw round `round`:
/// `splitmix64(splitmix64(seed ⊕ splitmix64(round)) ⊕ block)`.
pub fn block_seed(seed: u64, round: u64, block: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(round)) ^ block)
}

/// Inverse-CDF sampler over item indices.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    probs: Vec<f64>,
    seed: u64,
}

pub fn build_sampler(profile: &PopularityProfile, seed: u64) -> Result<WeightedSampler> {
    if profile.probs.is_empty() || profile.total == 0 {
        return Err(Error::invalid("cannot sample from an empty popularity profile"));
    }
    let mut acc = 0.0;
    let cumulative = profile
        .probs
        .iter()
        .map(|&p| {
            acc += p;
            acc
        })
        .collect();
    Ok(WeightedSampler {
        cumulative,
        probs: profile.probs.clone(),
        seed,
    })
}

impl WeightedSampler {
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn n_items(&self) -> usize {
        self.cumulative.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One item index; zero-probability items are never returned.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("nonempty table");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.last_positive())
    }

    fn last_positive(&self) -> usize {
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    fn support(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    /// Counts of `draws` i.i.d. draws, as sorted `(item, count)` pairs.
    fn draw_row<R: Rng + ?Sized>(&self, draws: usize, rng: &mut R) -> Vec<(u32, u32)> {
        if draws > DIRECT_DRAW_FACTOR * self.support() {
            return self.multinomial_row(draws, rng);
        }
        let mut picks: Vec<u32> = (0..draws).map(|_| self.draw(rng) as u32).collect();
        picks.sort_unstable();
        let mut row: Vec<(u32, u32)> = Vec::new();
        for j in picks {
            match row.last_mut() {
                Some((item, c)) if *item == j => *c += 1,
                _ => row.push((j, 1)),
            }
        }
        row
    }

    /// Multinomial counts via the chain of conditional binomials.
    fn multinomial_row<R: Rng + ?Sized>(&self, draws: usize, rng: &mut R) -> Vec<(u32, u32)> {
        let last = self.last_positive();
        let mut remaining = draws as u64;
        let mut mass_left = 1.0f64;
        let mut row = Vec::new();
        for (j, &p) in self.probs.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            if p <= 0.0 {
                continue;
            }
            let c = if j == last {
                remaining
            } else {
                let q = (p / mass_left).clamp(0.0, 1.0);
                Binomial::new(remaining, q).expect("valid binomial").sample(rng)
            };
            if c > 0 {
                row.push((j as u32, c as u32));
            }
            remaining -= c;
            mass_left -= p;
        }
        row
    }
}

/// Sparse per-user negative-sample counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleCountMatrix {
    n_items: usize,
    per_user: usize,
    indptr: Vec<usize>,
    items: Vec<u32>,
    counts: Vec<u32>,
}

impl SampleCountMatrix {
    pub fn n_users(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Draws per active user.
    pub fn per_user(&self) -> usize {
        self.per_user
    }

    pub fn row(&self, user: usize) -> (&[u32], &[u32]) {
        let span = self.indptr[user]..self.indptr[user + 1];
        (&self.items[span.clone()], &self.counts[span])
    }

    pub fn row_total(&self, user: usize) -> u64 {
        self.row(user).1.iter().map(|&c| c as u64).sum()
    }

    pub fn fill_dense(&self, user: usize, out: &mut [u32]) {
        out.fill(0);
        let (items, counts) = self.row(user);
        for (&j, &c) in items.iter().zip(counts) {
            out[j as usize] = c;
        }
    }

    /// Pooled counts per item over all users.
    pub fn item_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.n_items];
        for (&j, &c) in self.items.iter().zip(&self.counts) {
            totals[j as usize] += c as u64;
        }
        totals
    }

    /// Writes `user<TAB>item<TAB>count` triplets with a header line.
    pub fn write_triplets(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "user\titem\tcount")?;
        for user in 0..self.n_users() {
            let (items, counts) = self.row(user);
            for (j, c) in items.iter().zip(counts) {
                writeln!(out, "{user}\t{j}\t{c}")?;
            }
        }
        Ok(())
    }

    /// A count matrix that mirrors the given matrix entry for entry. Useful
    /// for exercising the balanced case of the negative-sampling loss.
    pub fn from_interactions(matrix: &InteractionMatrix) -> Self {
        SampleCountMatrix {
            n_items: matrix.n_items(),
            per_user: 0,
            indptr: matrix.indptr().to_vec(),
            items: matrix.indices().to_vec(),
            counts: vec![1; matrix.nnz()],
        }
    }
}

/// Draws `per_user` negatives for every user with a nonempty row of `users`.
/// Positives are not excluded; users with empty rows get no samples.
pub fn draw_counts(sampler: &WeightedSampler, per_user: usize, users: &InteractionMatrix) -> Result<SampleCountMatrix> {
    draw_counts_round(sampler, per_user, users, 0)
}

/// [`draw_counts`] for an explicit draw round, used when negatives are
/// redrawn every epoch.
pub fn draw_counts_round(
    sampler: &WeightedSampler,
    per_user: usize,
    users: &InteractionMatrix,
    round: u64,
) -> Result<SampleCountMatrix> {
    if per_user < 1 {
        return Err(Error::invalid("at least one negative sample per user is required"));
    }
    Error::check_dim(sampler.n_items(), users.n_items())?;
    let m = users.n_users();
    let blocks: Vec<Vec<Vec<(u32, u32)>>> = (0..m.div_ceil(USER_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(block_seed(sampler.seed, round, b as u64));
            (b * USER_BLOCK..((b + 1) * USER_BLOCK).min(m))
                .map(|u| {
                    if users.row_len(u) == 0 {
                        Vec::new()
                    } else {
                        sampler.draw_row(per_user, &mut rng)
                    }
                })
                .collect()
        })
        .collect();

    let mut indptr = Vec::with_capacity(m + 1);
    let mut items = Vec::new();
    let mut counts = Vec::new();
    indptr.push(0);
    for row in blocks.into_iter().flatten() {
        for (j, c) in row {
            items.push(j);
            counts.push(c);
        }
        indptr.push(items.len());
    }
    Ok(SampleCountMatrix {
        n_items: users.n_items(),
        per_user,
        indptr,
        items,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(counts: &[u64]) -> PopularityProfile {
        PopularityProfile::from_counts(counts.to_vec()).unwrap()
    }

    #[test]
    fn cumulative_table() {
        let s = build_sampler(&profile(&[2, 1, 1]), 0).unwrap();
        assert_eq!(s.cumulative(), &[0.5, 0.75, 1.0]);
    }

    #[test]
    fn zero_probability_items_are_never_drawn() {
        let s = build_sampler(&profile(&[0, 5, 0, 3, 0]), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = [0u32; 5];
        for _ in 0..1_000_000 {
            seen[s.draw(&mut rng)] += 1;
        }
        assert_eq!(seen[0] + seen[2] + seen[4], 0);
        assert!(seen[1] > seen[3]);
    }

    #[test]
    fn same_seed_same_sequence() {
        let s = build_sampler(&profile(&[3, 1, 4, 1, 5]), 7).unwrap();
        let users = InteractionMatrix::from_rows(5, vec![vec![0]; 200]).unwrap();
        assert_eq!(draw_counts(&s, 9, &users).unwrap(), draw_counts(&s, 9, &users).unwrap());
        let other = build_sampler(&profile(&[3, 1, 4, 1, 5]), 8).unwrap();
        assert_ne!(draw_counts(&s, 9, &users).unwrap(), draw_counts(&other, 9, &users).unwrap());
        assert_ne!(
            draw_counts_round(&s, 9, &users, 0).unwrap(),
            draw_counts_round(&s, 9, &users, 1).unwrap()
        );
    }

    #[test]
    fn single_item_catalogue() {
        let s = build_sampler(&profile(&[4]), 0).unwrap();
        let users = InteractionMatrix::from_rows(1, vec![vec![0], vec![], vec![0]]).unwrap();
        let counts = draw_counts(&s, 5, &users).unwrap();
        assert_eq!(counts.row(0), (&[0u32][..], &[5u32][..]));
        assert_eq!(counts.row_total(1), 0);
        assert_eq!(counts.row(2).1, &[5]);
    }

    #[test]
    fn row_sums_hold_for_both_routes() {
        let s = build_sampler(&profile(&[10, 0, 3, 7, 1]), 3).unwrap();
        let users = InteractionMatrix::from_rows(5, vec![vec![1]; 130]).unwrap();
        for n in [1, 5, 16, 17, 500, 500_000] {
            let counts = draw_counts(&s, n, &users).unwrap();
            for u in 0..130 {
                assert_eq!(counts.row_total(u), n as u64);
                assert!(!counts.row(u).0.contains(&1));
            }
        }
        assert!(draw_counts(&s, 0, &users).is_err());
    }

    #[test]
    fn multinomial_route_matches_distribution() {
        let p = profile(&[5, 3, 2]);
        let s = build_sampler(&p, 11).unwrap();
        let users = InteractionMatrix::from_rows(3, vec![vec![0]; 10]).unwrap();
        let totals = draw_counts(&s, 100_000, &users).unwrap().item_totals();
        let all: u64 = totals.iter().sum();
        for (t, q) in totals.iter().zip(&p.probs) {
            assert!((*t as f64 / all as f64 - q).abs() < 0.003);
        }
    }

    #[test]
    fn triplet_export() {
        let s = build_sampler(&profile(&[1]), 0).unwrap();
        let users = InteractionMatrix::from_rows(1, vec![vec![0], vec![0]]).unwrap();
        let mut out = Vec::new();
        draw_counts(&s, 3, &users).unwrap().write_triplets(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "user\titem\tcount\n0\t0\t3\n1\t0\t3\n");
    }
}
