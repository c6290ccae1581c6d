//! Minibatch training of the four model kinds under the four schedules.
//!
//! Every update descends a sum of per-user losses plus the L2 penalty on the
//! layers it touches, after clipping the gradient norm. Each schedule is a
//! sequence of phases; a phase repeats a fixed list of updates per batch and
//! ends by early stopping on validation NDCG, restoring its best parameters.

mod grid;
mod optim;

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grid::{grid_search, pick_best, train_and_validate, GridOutcome, GridResult, GridSpace};
pub use optim::{clip_norm, masked_norm, Adam, LayerMask};

use crate::data::{popularity, InteractionMatrix};
use crate::error::{Error, Result};
use crate::eval::{evaluable_users, mean_ndcg};
use crate::network::{backward, forward, init_model, l2_penalty, Heads, ModelKind, ScoreGradients, TwoHeadedModel};
use crate::objectives::{mse_loss, nce_loss, nce_targets, ns_loss, NceConfig, NceTargetMatrix};
use crate::sampler::{build_sampler, draw_counts, draw_counts_round, SampleCountMatrix, WeightedSampler};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Both objectives summed in every update.
    #[default]
    Joint,
    /// Per batch: one contrastive update, then one squared-error update.
    Alternating,
    /// Contrastive phase to convergence, then the squared-error head alone
    /// on a frozen encoder.
    LimitedFineTune,
    /// Contrastive phase to convergence, then encoder and squared-error head.
    FullFineTune,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Joint,
        TrainMode::Alternating,
        TrainMode::LimitedFineTune,
        TrainMode::FullFineTune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::Alternating => "alternating",
            TrainMode::LimitedFineTune => "limited_fine_tune",
            TrainMode::FullFineTune => "full_fine_tune",
        }
    }

    pub fn is_two_phase(self) -> bool {
        matches!(self, TrainMode::LimitedFineTune | TrainMode::FullFineTune)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_").to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown training mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub latent_dim: usize,
    pub lambda: f64,
    pub beta: f64,
    /// Negative samples drawn per user; required by the NS kinds.
    pub negatives: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation NDCG improvement before a phase stops.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` or infinity disables clipping.
    pub clip_norm: Option<f64>,
    /// Redraw negatives at the start of every epoch instead of once.
    pub resample_negatives: bool,
    /// Size of the seeded validation subsample used for early stopping.
    pub validation_users: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Joint,
            latent_dim: 100,
            lambda: 1e-5,
            beta: 1.0,
            negatives: None,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 300,
            patience: 5,
            seed: 0,
            clip_norm: Some(5.0),
            resample_negatives: false,
            validation_users: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.latent_dim == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("latent_dim, batch_size and max_epochs must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be finite and nonnegative"));
        }
        if !positive(self.beta) || !positive(self.learning_rate) {
            return Err(Error::invalid("beta and learning_rate must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.negatives == Some(0) {
            return Err(Error::invalid("negatives must be at least 1"));
        }
        Ok(())
    }
}

/// Negative-sample counts or closed-form targets feeding the contrastive head.
#[derive(Clone, Debug)]
pub enum Precomputed {
    Negatives {
        counts: SampleCountMatrix,
        /// Needed only when negatives are redrawn each epoch.
        sampler: Option<WeightedSampler>,
    },
    Targets(NceTargetMatrix),
}

impl Precomputed {
    fn check_shape(&self, train: &InteractionMatrix) -> Result<()> {
        let (m, n) = match self {
            Precomputed::Negatives { counts, .. } => (counts.n_users(), counts.n_items()),
            Precomputed::Targets(t) => (t.n_users(), t.n_items()),
        };
        Error::check_dim(train.n_users(), m)?;
        Error::check_dim(train.n_items(), n)
    }
}

/// Builds what the contrastive head of `kind` trains on: popularity negatives
/// for the NS kinds, closed-form targets for NCE, nothing for AutoRec.
pub fn prepare_contrast(kind: ModelKind, train: &InteractionMatrix, config: &TrainConfig) -> Result<Option<Precomputed>> {
    match kind {
        ModelKind::AutoRec => Ok(None),
        ModelKind::Ohns | ModelKind::Ns => {
            let per_user = config
                .negatives
                .ok_or_else(|| Error::invalid(format!("model kind {kind} needs the negatives count N")))?;
            let sampler = build_sampler(&popularity(train)?, config.seed)?;
            let counts = draw_counts(&sampler, per_user, train)?;
            Ok(Some(Precomputed::Negatives {
                counts,
                sampler: config.resample_negatives.then_some(sampler),
            }))
        }
        ModelKind::Nce => {
            let profile = popularity(train)?;
            let targets = nce_targets(&profile, &NceConfig { beta: config.beta }, train)?;
            Ok(Some(Precomputed::Targets(targets)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Global epoch counter across phases, starting at 1.
    pub epoch: usize,
    pub phase: usize,
    pub mse_loss: Option<f64>,
    pub contrast_loss: Option<f64>,
    pub l2: f64,
    pub val_ndcg: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: ModelKind,
    pub mode: TrainMode,
    pub epochs: Vec<EpochRecord>,
    pub phase_seconds: Vec<f64>,
    /// First epoch of the second phase, for two-phase schedules.
    pub phase_boundary: Option<usize>,
    pub stopped_epoch: usize,
    /// Every phase stopped on patience rather than on `max_epochs`.
    pub converged: bool,
    pub best_val_ndcg: f64,
    /// User rows pushed through a training forward pass.
    pub forward_rows: u64,
}

impl TrainReport {
    pub fn total_seconds(&self) -> f64 {
        self.phase_seconds.iter().sum()
    }

    /// The report with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainReport {
        let mut r = self.clone();
        r.phase_seconds.iter_mut().for_each(|s| *s = 0.0);
        r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        r
    }

    /// Tab-separated per-epoch table with a header row.
    pub fn write_table(&self, mut out: impl Write) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "epoch\tphase\tmse_loss\tcontrast_loss\tl2\tval_ndcg\tseconds")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch,
                e.phase,
                opt(e.mse_loss),
                opt(e.contrast_loss),
                e.l2,
                e.val_ndcg,
                e.seconds
            )?;
        }
        Ok(())
    }
}

/// Parameters whose absolute value exceeds this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One optimizer update: which losses it descends and which layers move.
#[derive(Clone, Copy, Debug)]
struct Update {
    mse: bool,
    contrast: bool,
    mask: LayerMask,
}

impl Update {
    fn heads(&self) -> Heads {
        match (self.mse, self.contrast) {
            (true, true) => Heads::Both,
            (true, false) => Heads::Mse,
            _ => Heads::Contrast,
        }
    }
}

const ALL_LAYERS: LayerMask = LayerMask {
    encoder: true,
    mse_head: true,
    contrast_head: true,
};

fn mse_only(freeze_encoder: bool) -> Update {
    Update {
        mse: true,
        contrast: false,
        mask: LayerMask {
            encoder: !freeze_encoder,
            mse_head: true,
            contrast_head: false,
        },
    }
}

const CONTRAST_ONLY: Update = Update {
    mse: false,
    contrast: true,
    mask: LayerMask {
        encoder: true,
        mse_head: false,
        contrast_head: true,
    },
};

const BOTH: Update = Update {
    mse: true,
    contrast: true,
    mask: ALL_LAYERS,
};

struct Phase {
    updates: Vec<Update>,
    eval_heads: Heads,
}

fn schedule(kind: ModelKind, mode: TrainMode) -> Vec<Phase> {
    let mse_phase = |freeze| Phase {
        updates: vec![mse_only(freeze)],
        eval_heads: Heads::Mse,
    };
    let contrast_phase = || Phase {
        updates: vec![CONTRAST_ONLY],
        eval_heads: Heads::Contrast,
    };
    match kind {
        ModelKind::AutoRec => vec![mse_phase(false)],
        ModelKind::Ohns => vec![contrast_phase()],
        ModelKind::Ns | ModelKind::Nce => match mode {
            TrainMode::Joint => vec![Phase {
                updates: vec![BOTH],
                eval_heads: Heads::Mse,
            }],
            TrainMode::Alternating => vec![Phase {
                updates: vec![CONTRAST_ONLY, mse_only(false)],
                eval_heads: Heads::Mse,
            }],
            TrainMode::LimitedFineTune => vec![contrast_phase(), mse_phase(true)],
            TrainMode::FullFineTune => vec![contrast_phase(), mse_phase(false)],
        },
    }
}

struct Trainer<'a> {
    train: &'a InteractionMatrix,
    validation: &'a InteractionMatrix,
    config: &'a TrainConfig,
    contrast: Option<Precomputed>,
    active: Vec<usize>,
    val_users: Vec<usize>,
    shuffle_rng: ChaCha8Rng,
    forward_rows: u64,
    epoch: usize,
    draw_round: u64,
}

#[derive(Default)]
struct EpochLosses {
    mse: Option<f64>,
    contrast: Option<f64>,
    l2: f64,
}

fn accumulate(slot: &mut Option<f64>, v: f64) {
    *slot = Some(slot.unwrap_or(0.0) + v);
}

impl<'a> Trainer<'a> {
    fn new(
        train: &'a InteractionMatrix,
        validation: &'a InteractionMatrix,
        config: &'a TrainConfig,
        contrast: Option<Precomputed>,
    ) -> Result<Self> {
        config.validate()?;
        Error::check_dim(train.n_users(), validation.n_users())?;
        Error::check_dim(train.n_items(), validation.n_items())?;
        let active = train.active_users();
        if active.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        if let Some(c) = &contrast {
            c.check_shape(train)?;
        }
        let mut val_users = evaluable_users(train, validation);
        if val_users.len() > config.validation_users {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7A1D);
            val_users = rand::seq::index::sample(&mut rng, val_users.len(), config.validation_users)
                .into_iter()
                .map(|i| val_users[i])
                .collect();
            val_users.sort_unstable();
        }
        Ok(Trainer {
            train,
            validation,
            config,
            contrast,
            active,
            val_users,
            shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            forward_rows: 0,
            epoch: 0,
            draw_round: 0,
        })
    }

    fn dense_rows(&self, users: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((users.len(), self.train.n_items()));
        for (mut row, &u) in x.rows_mut().into_iter().zip(users) {
            for &j in self.train.row(u) {
                row[j as usize] = 1.0;
            }
        }
        x
    }

    fn contrast_gradients(&self, users: &[usize], input: &Array2<f64>, scores: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let n = self.train.n_items();
        let mut grad = Array2::zeros(scores.raw_dim());
        let mut total = 0.0;
        match self.contrast.as_ref() {
            Some(Precomputed::Targets(t)) => {
                let mut target = vec![0.0; n];
                for (i, &u) in users.iter().enumerate() {
                    t.fill_dense(u, &mut target);
                    let l = nce_loss(&target, scores.row(i).as_slice().unwrap())?;
                    total += l.value;
                    grad.row_mut(i).assign(&ndarray::ArrayView1::from(&l.grad));
                }
            }
            Some(Precomputed::Negatives { counts, .. }) => {
                let mut s = vec![0u32; n];
                for (i, &u) in users.iter().enumerate() {
                    counts.fill_dense(u, &mut s);
                    let l = ns_loss(input.row(i).as_slice().unwrap(), &s, scores.row(i).as_slice().unwrap())?;
                    total += l.value;
                    grad.row_mut(i).assign(&ndarray::ArrayView1::from(&l.grad));
                }
            }
            None => return Err(Error::invalid("contrastive update without precomputed negatives or targets")),
        }
        Ok((total, grad))
    }

    fn apply(&mut self, model: &mut TwoHeadedModel, adam: &mut Adam, update: Update, users: &[usize], losses: &mut EpochLosses) -> Result<()> {
        let input = self.dense_rows(users);
        let cache = forward(model, input, update.heads())?;
        self.forward_rows += users.len() as u64;

        let mut d = ScoreGradients::default();
        if update.mse {
            let scores = cache.mse_scores.as_ref().expect("mse head evaluated");
            let mut grad = Array2::zeros(scores.raw_dim());
            let mut total = 0.0;
            for (i, (target, s)) in cache.input.rows().into_iter().zip(scores.rows()).enumerate() {
                let l = mse_loss(target.as_slice().unwrap(), s.as_slice().unwrap())?;
                total += l.value;
                grad.row_mut(i).assign(&ndarray::ArrayView1::from(&l.grad));
            }
            accumulate(&mut losses.mse, total);
            d.mse = Some(grad);
        }
        if update.contrast {
            let scores = cache.contrast_scores.as_ref().expect("contrast head evaluated");
            let (total, grad) = self.contrast_gradients(users, &cache.input, scores)?;
            accumulate(&mut losses.contrast, total);
            d.contrast = Some(grad);
        }
        let loss_total = losses.mse.unwrap_or(0.0) + losses.contrast.unwrap_or(0.0);
        if !loss_total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                reason: "loss is not finite".into(),
            });
        }

        let mut grads = backward(model, &cache, &d, !update.mask.encoder)?;
        let (l2_value, l2_grads) = l2_penalty(model, self.config.lambda)?;
        grads.add_assign(&l2_grads);
        losses.l2 = l2_value;
        if let Some(max_norm) = self.config.clip_norm {
            clip_norm(&mut grads, update.mask, max_norm);
        }
        adam.step(model, &grads, update.mask);
        Ok(())
    }

    fn check_divergence(&self, model: &TwoHeadedModel) -> Result<()> {
        if !model.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                reason: "parameters are not finite".into(),
            });
        }
        let max = model.max_abs();
        if max > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                epoch: self.epoch,
                reason: format!("parameter magnitude {max:.3e} exceeds {DIVERGENCE_LIMIT:e}"),
            });
        }
        Ok(())
    }

    fn maybe_resample(&mut self) -> Result<()> {
        if let Some(Precomputed::Negatives {
            counts,
            sampler: Some(sampler),
        }) = self.contrast.as_mut()
        {
            if self.draw_round > 0 {
                *counts = draw_counts_round(sampler, counts.per_user(), self.train, self.draw_round)?;
            }
        }
        self.draw_round += 1;
        Ok(())
    }

    /// Runs one phase to early stopping; returns whether patience (rather
    /// than the epoch budget) ended it.
    fn run_phase(
        &mut self,
        model: &mut TwoHeadedModel,
        phase: &Phase,
        index: usize,
        report: &mut TrainReport,
        observer: &mut dyn FnMut(&EpochRecord, &TwoHeadedModel),
    ) -> Result<bool> {
        let started = Instant::now();
        let mut optimizers: Vec<Adam> = phase
            .updates
            .iter()
            .map(|_| Adam::new(self.config.learning_rate))
            .collect();
        let mut best: Option<(f64, TwoHeadedModel)> = None;
        let mut stale = 0usize;
        let mut converged = false;

        for _ in 0..self.config.max_epochs {
            let epoch_start = Instant::now();
            self.epoch += 1;
            if phase.updates.iter().any(|u| u.contrast) {
                self.maybe_resample()?;
            }
            let mut order = self.active.clone();
            order.shuffle(&mut self.shuffle_rng);
            let mut losses = EpochLosses::default();
            for batch in order.chunks(self.config.batch_size) {
                for (update, adam) in phase.updates.iter().zip(&mut optimizers) {
                    self.apply(model, adam, *update, batch, &mut losses)?;
                }
            }
            self.check_divergence(model)?;

            let val_ndcg = mean_ndcg(model, phase.eval_heads, self.train, self.validation, &self.val_users)?;
            let record = EpochRecord {
                epoch: self.epoch,
                phase: index,
                mse_loss: losses.mse,
                contrast_loss: losses.contrast,
                l2: losses.l2,
                val_ndcg,
                seconds: epoch_start.elapsed().as_secs_f64(),
            };
            observer(&record, model);
            report.epochs.push(record);

            if best.as_ref().is_none_or(|(b, _)| val_ndcg > *b) {
                best = Some((val_ndcg, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.patience {
                    converged = true;
                    break;
                }
            }
        }
        if let Some((score, params)) = best {
            *model = params;
            report.best_val_ndcg = score;
        }
        report.phase_seconds.push(started.elapsed().as_secs_f64());
        Ok(converged)
    }
}

fn run(
    kind: ModelKind,
    train: &InteractionMatrix,
    validation: &InteractionMatrix,
    config: &TrainConfig,
    contrast: Option<Precomputed>,
    observer: &mut dyn FnMut(&EpochRecord, &TwoHeadedModel),
) -> Result<(TwoHeadedModel, TrainReport)> {
    let mut trainer = Trainer::new(train, validation, config, contrast)?;
    let mut model = init_model(kind, train.n_items(), config.latent_dim, config.seed, None)?;
    let mut report = TrainReport {
        kind,
        mode: config.mode,
        epochs: Vec::new(),
        phase_seconds: Vec::new(),
        phase_boundary: None,
        stopped_epoch: 0,
        converged: true,
        best_val_ndcg: 0.0,
        forward_rows: 0,
    };
    for (index, phase) in schedule(kind, config.mode).iter().enumerate() {
        if index > 0 {
            report.phase_boundary = Some(trainer.epoch + 1);
        }
        let converged = trainer.run_phase(&mut model, phase, index, &mut report, observer)?;
        report.converged &= converged;
    }
    report.stopped_epoch = trainer.epoch;
    report.forward_rows = trainer.forward_rows;
    Ok((model, report))
}

/// Plain autoencoder on the squared-error objective.
pub fn train_autorec(train: &InteractionMatrix, validation: &InteractionMatrix, config: &TrainConfig) -> Result<(TwoHeadedModel, TrainReport)> {
    run(ModelKind::AutoRec, train, validation, config, None, &mut |_, _| {})
}

/// Single-head model trained on the negative-sampling objective only.
pub fn train_ohns(
    train: &InteractionMatrix,
    validation: &InteractionMatrix,
    negatives: Precomputed,
    config: &TrainConfig,
) -> Result<(TwoHeadedModel, TrainReport)> {
    if !matches!(negatives, Precomputed::Negatives { .. }) {
        return Err(Error::invalid("OHNS trains on negative-sample counts"));
    }
    run(ModelKind::Ohns, train, validation, config, Some(negatives), &mut |_, _| {})
}

/// Two-headed NS or NCE model under `config.mode`.
pub fn train_two_headed(
    kind: ModelKind,
    train: &InteractionMatrix,
    validation: &InteractionMatrix,
    config: &TrainConfig,
    precomputed: Precomputed,
) -> Result<(TwoHeadedModel, TrainReport)> {
    match (kind, &precomputed) {
        (ModelKind::Ns, Precomputed::Negatives { .. }) | (ModelKind::Nce, Precomputed::Targets(_)) => {
            run(kind, train, validation, config, Some(precomputed), &mut |_, _| {})
        }
        (ModelKind::Ns | ModelKind::Nce, _) => Err(Error::invalid(format!(
            "model kind {kind} was given the wrong precomputed artifact"
        ))),
        _ => Err(Error::invalid(format!("{kind} is not a two-headed kind"))),
    }
}

/// Builds whatever the kind needs and trains it.
pub fn train_model(
    kind: ModelKind,
    train: &InteractionMatrix,
    validation: &InteractionMatrix,
    config: &TrainConfig,
) -> Result<(TwoHeadedModel, TrainReport)> {
    train_model_observed(kind, train, validation, config, |_, _| {})
}

/// [`train_model`] that hands every finished epoch and the parameters it
/// produced to `observer`, before any early-stopping restore.
pub fn train_model_observed(
    kind: ModelKind,
    train: &InteractionMatrix,
    validation: &InteractionMatrix,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &TwoHeadedModel),
) -> Result<(TwoHeadedModel, TrainReport)> {
    config.validate()?;
    let contrast = prepare_contrast(kind, train, config)?;
    run(kind, train, validation, config, contrast, &mut observer)
}
