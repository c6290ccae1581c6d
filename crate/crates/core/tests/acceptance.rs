//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to stderr
//! (uncaptured, so it shows in plain `cargo test` output) and appends it to
//! `target/tmp/acceptance.log` together with the desk-scale run details.
//!
//! Criteria 1 to 6 are hard gates. The desk-scale directional criteria (7 to
//! 9) report their verdict without failing the build unless
//! `OCCF_STRICT_ACCEPTANCE=1` is set; criterion 10 is a logged observation.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use occf_core::data::{
    binarize, popularity, split_temporal, DatasetSplit, IdVocabulary, InteractionMatrix, PopularityProfile,
    SplitRatios,
};
use occf_core::eval::{evaluate, metrics_for_user, popularity_report, NDCG_CUTOFF};
use occf_core::objectives::{nce_scalar_oracle, nce_targets, NceConfig};
use occf_core::sampler::{build_sampler, draw_counts};
use occf_core::synth::{generate, SynthConfig};
use occf_core::trainer::{grid_search, train_model, train_model_observed, GridSpace};
use occf_core::{ModelKind, TrainConfig, TrainMode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_LATENT: [usize; 2] = [50, 100];
const DESK_LAMBDA: [f64; 2] = [10.0, 100.0];
const DESK_NEGATIVES: usize = 500;
const TOP_K: usize = 10;

fn log_line(line: &str) {
    static LOG: OnceLock<Mutex<std::fs::File>> = OnceLock::new();
    let file = LOG.get_or_init(|| {
        let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.log");
        Mutex::new(std::fs::File::create(path).expect("acceptance log"))
    });
    let _ = writeln!(file.lock().unwrap(), "{line}");
}

fn verdict(n: usize, pass: bool, detail: &str) {
    let line = format!("{} criterion {n}: {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    log_line(&line);
}

/// Runs a hard criterion; a panic inside is reported as FAIL and re-raised.
fn gate(n: usize, name: &str, body: impl FnOnce() -> String) {
    let started = Instant::now();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(detail) => verdict(n, true, &format!("{name}: {detail} ({:.2}s)", started.elapsed().as_secs_f64())),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(n, false, &format!("{name}: {msg}"));
            resume_unwind(e);
        }
    }
}

fn strict() -> bool {
    std::env::var("OCCF_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1")
}

/// Desk-scale runs take this lock so wall-clock timings are not shared with
/// another heavy test on the same cores.
fn heavy() -> std::sync::MutexGuard<'static, ()> {
    static HEAVY: Mutex<()> = Mutex::new(());
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn majority(flags: &[bool]) -> bool {
    2 * flags.iter().filter(|&&f| f).count() > flags.len()
}

#[test]
fn c01_closed_form_nce_targets() {
    gate(1, "closed-form NCE target", || {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let p = (rng.random_range((1e-4f64).ln()..(0.99f64).ln())).exp();
            let x = nce_scalar_oracle(p).unwrap();
            let err = (x - (1.0 / p).ln()).abs();
            worst = worst.max(err);
            assert!(err < 1e-6, "p = {p}: golden section {x}, closed form {}", (1.0 / p).ln());
        }

        // 1,000 items with probabilities spread over (1e-4, 0.99)
        let total: u64 = 10_000_000;
        let mut counts: Vec<u64> = (0..999).map(|_| rng.random_range(1_001..=9_000)).collect();
        counts.push(9_899_000);
        let rest: u64 = counts.iter().sum::<u64>() - 9_899_000;
        *counts.last_mut().unwrap() = total - rest;
        let profile = PopularityProfile::from_counts(counts.clone()).unwrap();
        assert_eq!(profile.total, total);
        let all_items = InteractionMatrix::from_rows(1000, vec![(0..1000).collect()]).unwrap();
        let targets = nce_targets(&profile, &NceConfig { beta: 1.0 }, &all_items).unwrap();
        let mut compared = 0;
        for (j, &c) in counts.iter().enumerate() {
            let p = c as f64 / total as f64;
            assert!(p > 1e-4 && p < 0.99);
            let t = targets.get(0, j as u32);
            assert_eq!(t, (total as f64 / c as f64).ln(), "item {j}");
            assert!((t - (1.0 / p).ln()).abs() < 1e-12);
            compared += 1;
        }
        let secs = started.elapsed().as_secs_f64();
        assert!(secs < 5.0, "took {secs:.2}s");
        format!("1000 golden-section maxima within {worst:.1e} of log(1/p); {compared} targets exact")
    });
}

#[test]
fn c02_gradient_suite() {
    use common::{check, check_l2, Objective};
    gate(2, "finite-difference gradients", || {
        let started = Instant::now();
        let mut checked = check(Objective::Mse, ModelKind::AutoRec, 100);
        checked += check(Objective::Ns, ModelKind::Ns, 100);
        checked += check(Objective::Nce, ModelKind::Nce, 100);
        checked += check_l2(100);
        let secs = started.elapsed().as_secs_f64();
        assert!(secs < 30.0, "took {secs:.2}s");
        format!("{checked} coordinates over 4 x 50 random models within relative error {}", common::TOL)
    });
}

#[test]
fn c03_sampler_fidelity() {
    gate(3, "negative sampler fidelity", || {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let counts: Vec<u64> = (0..100).map(|j| rng.random_range(1..50) * (1 + (j % 7 == 0) as u64 * 20)).collect();
        let profile = PopularityProfile::from_counts(counts).unwrap();
        let sampler = build_sampler(&profile, 33).unwrap();
        let mut worst = 0.0f64;
        // one draw at a time, and the direct multinomial path for large N
        for (users, per_user) in [(10_000, 100), (1_000, 1_000)] {
            let rows = vec![vec![0u32]; users];
            let m = InteractionMatrix::from_rows(100, rows).unwrap();
            let drawn = draw_counts(&sampler, per_user, &m).unwrap();
            for u in 0..users {
                assert_eq!(drawn.row_total(u), per_user as u64, "user {u}");
            }
            let totals = drawn.item_totals();
            let pooled: u64 = totals.iter().sum();
            assert_eq!(pooled, 1_000_000);
            let tv: f64 = 0.5
                * totals
                    .iter()
                    .zip(&profile.probs)
                    .map(|(&c, &p)| (c as f64 / pooled as f64 - p).abs())
                    .sum::<f64>();
            assert!(tv < 0.01, "total variation {tv} with N = {per_user}");
            worst = worst.max(tv);
        }
        let secs = started.elapsed().as_secs_f64();
        assert!(secs < 10.0, "took {secs:.2}s");
        format!("two pools of 1e6 draws, worst total variation {worst:.4}; every row sums to N")
    });
}

fn small_instance() -> (InteractionMatrix, InteractionMatrix) {
    let config = SynthConfig {
        users: 200,
        items: 150,
        mean_activity: 25.0,
        min_activity: 8,
        seed: 4,
        ..SynthConfig::default()
    };
    let records = generate(&config).unwrap();
    let vocab = IdVocabulary::from_records(&records);
    let m = binarize(&records, &vocab, 3.0).unwrap();
    let split = split_temporal(&m, &records, &vocab, &SplitRatios::default()).unwrap();
    (split.train, split.validation)
}

#[test]
fn c04_freezing_contract() {
    gate(4, "encoder freezing", || {
        let (train, val) = small_instance();
        assert_eq!(train.n_users(), 200);
        let base = TrainConfig {
            latent_dim: 16,
            learning_rate: 0.01,
            max_epochs: 12,
            patience: 3,
            ..TrainConfig::default()
        };
        let mut lines = Vec::new();
        for (mode, frozen) in [(TrainMode::LimitedFineTune, true), (TrainMode::FullFineTune, false)] {
            let config = TrainConfig { mode, ..base.clone() };
            let mut epochs = Vec::new();
            let (model, report) = train_model_observed(ModelKind::Nce, &train, &val, &config, |e, m| {
                epochs.push((e.phase, e.val_ndcg, m.encoder.clone()));
            })
            .unwrap();
            let phase1: Vec<_> = epochs.iter().filter(|e| e.0 == 0).collect();
            let phase2: Vec<_> = epochs.iter().filter(|e| e.0 == 1).collect();
            assert!(!phase2.is_empty());
            assert_eq!(report.phase_boundary, Some(phase1.len() + 1));
            // the encoder phase 2 starts from: the first best epoch of phase 1
            let best = phase1.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
            let start = &phase1.iter().find(|e| e.1 == best).unwrap().2;
            let moved = phase2.iter().filter(|e| e.2 != *start).count();
            if frozen {
                assert_eq!(moved, 0, "limited fine-tune moved the encoder");
                assert_eq!(&model.encoder, start);
            } else {
                assert!(moved > 0, "full fine-tune never moved the encoder");
            }
            lines.push(format!("{}: {moved}/{} phase-2 epochs changed the encoder", mode.name(), phase2.len()));
        }
        lines.join("; ")
    });
}

fn brute_force(ranked: &[u32], relevant: &[u32], k: usize) -> [f64; 6] {
    let is_rel = |j: &u32| relevant.contains(j);
    let r = relevant.len();
    let hits = |cut: usize| ranked.iter().take(cut).filter(|j| is_rel(j)).count() as f64;
    let r_precision = hits(r) / r as f64;
    let mut dcg = 0.0;
    for (i, j) in ranked.iter().take(NDCG_CUTOFF).enumerate() {
        if is_rel(j) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for i in 0..r.min(NDCG_CUTOFF) {
        idcg += 1.0 / ((i + 2) as f64).log2();
    }
    let precision = hits(k) / k as f64;
    let recall = hits(k) / r as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let mut ap = 0.0;
    for i in 0..k.min(ranked.len()) {
        if is_rel(&ranked[i]) {
            ap += hits(i + 1) / (i + 1) as f64;
        }
    }
    ap /= r.min(k) as f64;
    [r_precision, dcg / idcg, precision, recall, f1, ap]
}

#[test]
fn c05_metric_oracles() {
    gate(5, "metric oracles", || {
        let m = metrics_for_user(&[0, 1, 2], &[0, 2], &[3]).unwrap();
        assert!((m.ndcg - 0.9197).abs() < 1e-4, "{}", m.ndcg);
        assert!((m.at_k[0].average_precision - 0.8333).abs() < 1e-4);
        assert_eq!(m.r_precision, 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ks = [1, 3, 5, 10, 20];
        let mut compared = 0;
        for _ in 0..100 {
            let n = rng.random_range(1..=20u32);
            let mut items: Vec<u32> = (0..n).collect();
            items.shuffle(&mut rng);
            let ranked: Vec<u32> = items[..rng.random_range(0..=n as usize)].to_vec();
            items.shuffle(&mut rng);
            let mut relevant: Vec<u32> = items[..rng.random_range(1..=(n as usize).min(10))].to_vec();
            relevant.sort_unstable();
            let got = metrics_for_user(&ranked, &relevant, &ks).unwrap();
            for (i, &k) in ks.iter().enumerate() {
                let want = brute_force(&ranked, &relevant, k);
                let a = &got.at_k[i];
                let have = [got.r_precision, got.ndcg, a.precision, a.recall, a.f1, a.average_precision];
                assert_eq!(have, want, "ranked {ranked:?} relevant {relevant:?} k {k}");
                compared += 1;
            }
        }
        format!("worked example and {compared} random (instance, K) pairs agree exactly")
    });
}

#[test]
fn c06_split_protocol() {
    gate(6, "temporal split protocol", || {
        let config = SynthConfig {
            users: 1000,
            items: 400,
            mean_activity: 30.0,
            min_activity: 1,
            activity_sigma: 1.2,
            seed: 6,
            ..SynthConfig::default()
        };
        let records = generate(&config).unwrap();
        let vocab = IdVocabulary::from_records(&records);
        let m = binarize(&records, &vocab, 3.0).unwrap();
        let split = split_temporal(&m, &records, &vocab, &SplitRatios::default()).unwrap();
        let stamp: HashMap<(usize, u32), u64> = records
            .iter()
            .map(|r| {
                let u = vocab.user_index(&r.user_key).unwrap();
                let j = vocab.item_index(&r.item_key).unwrap() as u32;
                ((u, j), r.timestamp.unwrap())
            })
            .collect();
        let mut sizes_seen = std::collections::BTreeSet::new();
        for u in 0..m.n_users() {
            let k = m.row_len(u);
            // (0.5, 0.2, 0.3) with integer ceilings
            let train = (5 * k).div_ceil(10);
            let val = (2 * k).div_ceil(10).min(k - train);
            let got = (split.train.row_len(u), split.validation.row_len(u), split.test.row_len(u));
            assert_eq!(got, (train, val, k - train - val), "user {u} with {k} interactions");
            sizes_seen.insert(k);
            let times = |row: &[u32]| row.iter().map(|&j| stamp[&(u, j)]).collect::<Vec<_>>();
            let (a, b, c) = (times(split.train.row(u)), times(split.validation.row(u)), times(split.test.row(u)));
            let latest = |t: &[u64]| t.iter().max().copied();
            let earliest = |t: &[u64]| t.iter().min().copied();
            for (before, after) in [(&a, &b), (&b, &c), (&a, &c)] {
                if let (Some(x), Some(y)) = (latest(before), earliest(after)) {
                    assert!(x <= y, "user {u}: temporal order violated");
                }
            }
        }
        assert_eq!(m.n_users(), 1000);
        format!("1000 users ({} distinct row lengths) follow the ceiling rule and time order", sizes_seen.len())
    });
}

/// One trained configuration at desk scale.
#[derive(Clone, Debug)]
struct Trial {
    kind: ModelKind,
    config: TrainConfig,
    val_ndcg: f64,
    test_ndcg: f64,
    popularity: f64,
    seconds: f64,
}

struct DeskRun {
    seed: u64,
    trials: Vec<Trial>,
    selected: HashMap<ModelKind, Trial>,
}

fn desk_split(seed: u64) -> DatasetSplit {
    let records = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let vocab = IdVocabulary::from_records(&records);
    let m = binarize(&records, &vocab, 3.0).unwrap();
    split_temporal(&m, &records, &vocab, &SplitRatios::default()).unwrap()
}

fn desk_run(seed: u64) -> DeskRun {
    let split = desk_split(seed);
    let profile = popularity(&split.train).unwrap();
    let base = TrainConfig {
        negatives: Some(DESK_NEGATIVES),
        seed,
        ..TrainConfig::default()
    };
    let mut trials = Vec::new();
    let mut selected = HashMap::new();
    for kind in ModelKind::ALL {
        let modes = match kind {
            ModelKind::Ns | ModelKind::Nce => TrainMode::ALL.to_vec(),
            _ => vec![TrainMode::Joint],
        };
        let space = GridSpace {
            latent_dim: DESK_LATENT.to_vec(),
            lambda: DESK_LAMBDA.to_vec(),
            mode: modes,
            ..GridSpace::default()
        };
        let mut local = Vec::new();
        let outcome = grid_search(&space.expand(&base), |config| {
            let started = Instant::now();
            let (model, report) = train_model(kind, &split.train, &split.validation, config)?;
            let seconds = started.elapsed().as_secs_f64();
            let test = evaluate(&model, &split.train, &split.test, &[TOP_K])?;
            let pop = popularity_report(&[(kind.name(), &model)], &split, &profile, TOP_K)?;
            let trial = Trial {
                kind,
                config: config.clone(),
                val_ndcg: report.best_val_ndcg,
                test_ndcg: test.report.ndcg(),
                popularity: pop[0].mean_popularity,
                seconds,
            };
            log_line(&format!(
                "desk seed {seed} {:8} r {:3} lambda {:5} {:18} val {:.4} test {:.4} top10-pop {:6.1} {:5.1}s epochs {}",
                kind.name(),
                config.latent_dim,
                config.lambda,
                config.mode.name(),
                trial.val_ndcg,
                trial.test_ndcg,
                trial.popularity,
                seconds,
                report.stopped_epoch
            ));
            local.push(trial);
            Ok(report.best_val_ndcg)
        })
        .unwrap();
        selected.insert(kind, local[outcome.best].clone());
        trials.extend(local);
    }
    DeskRun { seed, trials, selected }
}

fn desk() -> &'static [DeskRun] {
    static RUNS: OnceLock<Vec<DeskRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _heavy = heavy();
        let runs: Vec<DeskRun> = DESK_SEEDS.iter().map(|&s| desk_run(s)).collect();
        for run in &runs {
            for kind in ModelKind::ALL {
                let t = &run.selected[&kind];
                log_line(&format!(
                    "selected seed {} {:8} r {} lambda {} {} val {:.4} test {:.4} top10-pop {:.1}",
                    run.seed,
                    kind.name(),
                    t.config.latent_dim,
                    t.config.lambda,
                    t.config.mode.name(),
                    t.val_ndcg,
                    t.test_ndcg,
                    t.popularity
                ));
            }
        }
        runs
    })
}

fn directional(n: usize, pass: bool, detail: String) {
    verdict(n, pass, &detail);
    if strict() {
        assert!(pass, "criterion {n} failed: {detail}");
    }
}

#[test]
fn c07_depopularization_order() {
    let runs = desk();
    let mut outer = Vec::new();
    let mut parts = Vec::new();
    for run in runs {
        let pop = |k: ModelKind| run.selected[&k].popularity;
        let (o, nce, ns, a) = (pop(ModelKind::Ohns), pop(ModelKind::Nce), pop(ModelKind::Ns), pop(ModelKind::AutoRec));
        let ok = o < nce && o < ns && nce < a && ns < a && a >= 1.1 * nce;
        outer.push(ok);
        // diagnostic: the same comparison with λ held fixed
        for &lambda in &DESK_LAMBDA {
            let best_at = |k: ModelKind| {
                run.trials
                    .iter()
                    .filter(|t| t.kind == k && t.config.lambda == lambda)
                    .max_by(|x, y| x.val_ndcg.total_cmp(&y.val_ndcg))
                    .map(|t| t.popularity)
                    .unwrap()
            };
            log_line(&format!(
                "matched lambda {lambda} seed {}: OHNS {:.1}, NCE {:.1}, NS {:.1}, AutoRec {:.1}",
                run.seed,
                best_at(ModelKind::Ohns),
                best_at(ModelKind::Nce),
                best_at(ModelKind::Ns),
                best_at(ModelKind::AutoRec)
            ));
        }
        parts.push(format!(
            "seed {}: OHNS {o:.1}, NCE {nce:.1}, NS {ns:.1}, AutoRec {a:.1} (AutoRec/NCE {:.2}{})",
            run.seed,
            a / nce,
            if nce <= ns { "" } else { ", NCE > NS" }
        ));
    }
    directional(
        7,
        majority(&outer),
        format!("mean top-{TOP_K} train popularity, validation-tuned; {}", parts.join("; ")),
    );
}

#[test]
fn c08_directional_quality() {
    let runs = desk();
    let mut flags = Vec::new();
    let mut parts = Vec::new();
    for run in runs {
        let ndcg = |k: ModelKind| run.selected[&k].test_ndcg;
        let (nce, auto, ohns) = (ndcg(ModelKind::Nce), ndcg(ModelKind::AutoRec), ndcg(ModelKind::Ohns));
        flags.push(nce >= auto && ohns < auto);
        parts.push(format!("seed {}: NCE {nce:.4}, AutoRec {auto:.4}, OHNS {ohns:.4}", run.seed));
    }
    directional(8, majority(&flags), format!("test NDCG@{NDCG_CUTOFF} after validation tuning; {}", parts.join("; ")));
}

#[test]
fn c09_negative_count_sweep() {
    let _heavy = heavy();
    let mut flags = Vec::new();
    let mut parts = Vec::new();
    for &seed in &DESK_SEEDS {
        let split = desk_split(seed);
        let mut ndcg = Vec::new();
        for n in [5usize, 500, 500_000] {
            let config = TrainConfig {
                latent_dim: 50,
                lambda: 10.0,
                negatives: Some(n),
                seed,
                ..TrainConfig::default()
            };
            let (model, _) = train_model(ModelKind::Ns, &split.train, &split.validation, &config).unwrap();
            let v = evaluate(&model, &split.train, &split.test, &[TOP_K]).unwrap().report.ndcg();
            log_line(&format!("sweep seed {seed} N {n} test ndcg {v:.4}"));
            ndcg.push(v);
        }
        flags.push(ndcg[1] > ndcg[0] && ndcg[1] > ndcg[2]);
        parts.push(format!(
            "seed {seed}: N=5 {:.4}, N=500 {:.4}, N=500000 {:.4}",
            ndcg[0], ndcg[1], ndcg[2]
        ));
    }
    directional(9, majority(&flags), format!("NS-AutoRec joint, r 50, lambda 10; {}", parts.join("; ")));
}

#[test]
fn c10_two_phase_cost() {
    let runs = desk();
    let mut ratios = Vec::new();
    for run in runs {
        let nce: Vec<&Trial> = run.trials.iter().filter(|t| t.kind == ModelKind::Nce).collect();
        for t in &nce {
            if !t.config.mode.is_two_phase() {
                continue;
            }
            let joint = nce
                .iter()
                .find(|j| {
                    j.config.mode == TrainMode::Joint
                        && j.config.latent_dim == t.config.latent_dim
                        && j.config.lambda == t.config.lambda
                })
                .unwrap();
            ratios.push(t.seconds / joint.seconds);
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median = ratios[ratios.len() / 2];
    let inside = ratios.iter().filter(|&&r| (1.5..=3.0).contains(&r)).count();
    // logged observation only
    verdict(
        10,
        (1.5..=3.0).contains(&median),
        &format!(
            "NCE two-phase / joint wall-clock over {} matched configs: median {median:.2}, range {:.2}..{:.2}, {inside} within [1.5, 3] (observation, not gated)",
            ratios.len(),
            ratios[0],
            ratios[ratios.len() - 1]
        ),
    );
}
