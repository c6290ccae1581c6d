//! Per-user losses for the decoder heads and the closed-form NCE targets.
//!
//! Every loss returns its value together with the gradient with respect to
//! the head's scores; the network turns those into parameter gradients.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{InteractionMatrix, PopularityProfile};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    Error::check_dim(a, b)
}

/// `Σ_j (r_j − r̂_j)²` over all `n` entries, unobserved entries counting as 0.
pub fn mse_loss(target: &[f64], scores: &[f64]) -> Result<LossValue> {
    check_lengths(target.len(), scores.len())?;
    let mut value = 0.0;
    let grad = target
        .iter()
        .zip(scores)
        .map(|(&r, &s)| {
            let d = s - r;
            value += d * d;
            2.0 * d
        })
        .collect();
    Ok(LossValue { value, grad })
}

/// Negated aggregated negative-sampling objective for one user:
/// `−[ rᵀs̃ − (‖r‖₁/‖s‖₁) · sᵀs̃ ]` where `s` holds negative-sample counts.
///
/// A user without positives contributes nothing.
pub fn ns_loss(positives: &[f64], counts: &[u32], scores: &[f64]) -> Result<LossValue> {
    check_lengths(positives.len(), scores.len())?;
    check_lengths(positives.len(), counts.len())?;
    let n_pos: f64 = positives.iter().sum();
    if n_pos == 0.0 {
        return Ok(LossValue {
            value: 0.0,
            grad: vec![0.0; scores.len()],
        });
    }
    let n_neg: u64 = counts.iter().map(|&c| c as u64).sum();
    if n_neg == 0 {
        return Err(Error::invalid("user has positives but no negative samples"));
    }
    let balance = n_pos / n_neg as f64;
    let mut value = 0.0;
    let grad = positives
        .iter()
        .zip(counts)
        .zip(scores)
        .map(|((&r, &c), &s)| {
            let g = -r + balance * c as f64;
            value += g * s;
            g
        })
        .collect();
    Ok(LossValue { value, grad })
}

/// `Σ_j (r*_j − r̃_j)²`: regression of the contrastive head onto the
/// closed-form targets, including the implicit zeros.
pub fn nce_loss(targets: &[f64], scores: &[f64]) -> Result<LossValue> {
    mse_loss(targets, scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NceConfig {
    /// Popularity sensitivity applied to the log item count.
    pub beta: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig { beta: 1.0 }
    }
}

/// Closed-form NCE targets over the training sparsity pattern.
///
/// The target of a stored entry depends only on its item, so the matrix is
/// kept as one value per item plus the (shared) pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct NceTargetMatrix {
    pub item_targets: Vec<f64>,
    pub pattern: InteractionMatrix,
}

impl NceTargetMatrix {
    pub fn n_users(&self) -> usize {
        self.pattern.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.pattern.n_items()
    }

    pub fn get(&self, user: usize, item: u32) -> f64 {
        if self.pattern.contains(user, item) {
            self.item_targets[item as usize]
        } else {
            0.0
        }
    }

    /// Dense target row of one user.
    pub fn fill_dense(&self, user: usize, out: &mut [f64]) {
        out.fill(0.0);
        for &j in self.pattern.row(user) {
            out[j as usize] = self.item_targets[j as usize];
        }
    }

    /// Writes the per-item targets as `item<TAB>target` lines with a header.
    /// Items that never occur in the pattern are omitted.
    pub fn write_table(&self, mut out: impl Write) -> std::io::Result<()> {
        let counts = self.pattern.column_counts();
        writeln!(out, "item\ttarget")?;
        for (j, (&t, &c)) in self.item_targets.iter().zip(&counts).enumerate() {
            if c > 0 {
                writeln!(out, "{j}\t{t}")?;
            }
        }
        Ok(())
    }
}

/// Target of an observed entry for an item seen `count` times out of `total`:
/// `max(log T − β log c, 0)`, which for `β = 1` is evaluated as `log(T / c)`.
pub fn nce_item_target(total: u64, count: u64, beta: f64) -> f64 {
    let t = total as f64;
    let c = count as f64;
    let raw = if beta == 1.0 {
        (t / c).ln()
    } else {
        t.ln() - beta * c.ln()
    };
    raw.max(0.0)
}

pub fn nce_targets(
    profile: &PopularityProfile,
    config: &NceConfig,
    train: &InteractionMatrix,
) -> Result<NceTargetMatrix> {
    if !(config.beta > 0.0 && config.beta.is_finite()) {
        return Err(Error::invalid("beta must be positive"));
    }
    Error::check_dim(profile.n_items(), train.n_items())?;
    let present = train.column_counts();
    let mut item_targets = vec![0.0; train.n_items()];
    for (j, (&seen, &count)) in present.iter().zip(&profile.counts).enumerate() {
        if seen == 0 {
            continue;
        }
        if count == 0 {
            return Err(Error::invalid(format!(
                "item {j} is observed in training but has zero popularity"
            )));
        }
        item_targets[j] = nce_item_target(profile.total, count, config.beta);
    }
    Ok(NceTargetMatrix {
        item_targets,
        pattern: train.clone(),
    })
}

/// `log σ(x)` without overflow in either tail.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Per-entry NCE surrogate `log σ(x) + p · log σ(−x)`.
pub fn nce_surrogate(x: f64, p: f64) -> f64 {
    log_sigmoid(x) + p * log_sigmoid(-x)
}

const GOLDEN_LOWER: f64 = -30.0;
const GOLDEN_UPPER: f64 = 30.0;
const GOLDEN_TOL: f64 = 1e-8;

/// Maximizer of the per-entry NCE surrogate found numerically by
/// golden-section search on `[-30, 30]`.
///
/// The surrogate is strictly concave, so the search converges to the unique
/// stationary point `log(1/p)`; this routine never uses that formula and is
/// meant as an independent check on it.
pub fn nce_scalar_oracle(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("item probability must lie in (0, 1)"));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |x: f64| nce_surrogate(x, p);
    let (mut a, mut b) = (GOLDEN_LOWER, GOLDEN_UPPER);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    Ok(0.5 * (a + b))
}
