//! Central finite-difference checks shared by the gradient and acceptance suites.

use ndarray::Array2;
use occf_core::network::{backward, forward, init_model, l2_penalty, GradientSet, Heads, ScoreGradients};
use occf_core::objectives::{mse_loss, nce_loss, ns_loss};
use occf_core::{ModelKind, TwoHeadedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const KINK: f64 = 1e-6;

struct Instance {
    input: Array2<f64>,
    counts: Vec<Vec<u32>>,
    targets: Array2<f64>,
}

fn instance(rng: &mut ChaCha8Rng, n: usize) -> Instance {
    let b = rng.random_range(1..=4);
    let mut input = Array2::zeros((b, n));
    input.mapv_inplace(|_: f64| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    input[[0, rng.random_range(0..n)]] = 1.0;
    let counts = (0..b)
        .map(|_| {
            let mut c: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
            c[rng.random_range(0..n)] += 1;
            c
        })
        .collect();
    let targets = input.mapv(|x| if x > 0.0 { rng.random_range(0.0..4.0) } else { 0.0 });
    Instance { input, counts, targets }
}

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Mse,
    Ns,
    Nce,
}

/// Loss summed over the batch and its gradient set.
fn evaluate(model: &TwoHeadedModel, inst: &Instance, obj: Objective) -> (f64, GradientSet, Array2<f64>) {
    let heads = match obj {
        Objective::Mse => Heads::Mse,
        _ => Heads::Contrast,
    };
    let cache = forward(model, inst.input.clone(), heads).unwrap();
    let scores = match obj {
        Objective::Mse => cache.mse_scores.as_ref().unwrap(),
        _ => cache.contrast_scores.as_ref().unwrap(),
    };
    let mut total = 0.0;
    let mut d = Array2::zeros(scores.dim());
    for u in 0..scores.nrows() {
        let x = inst.input.row(u).to_vec();
        let s = scores.row(u).to_vec();
        let l = match obj {
            Objective::Mse => mse_loss(&x, &s),
            Objective::Ns => ns_loss(&x, &inst.counts[u], &s),
            Objective::Nce => nce_loss(inst.targets.row(u).as_slice().unwrap(), &s),
        }
        .unwrap();
        total += l.value;
        d.row_mut(u).assign(&ndarray::Array1::from(l.grad));
    }
    let up = match obj {
        Objective::Mse => ScoreGradients { mse: Some(d), contrast: None },
        _ => ScoreGradients { mse: None, contrast: Some(d) },
    };
    let grads = backward(model, &cache, &up, false).unwrap();
    (total, grads, cache.pre_activation)
}

/// Coordinates as (layer, is_bias, flat index); layer 0 is the encoder.
fn coordinates(model: &TwoHeadedModel) -> Vec<(usize, bool, usize)> {
    let mut out = Vec::new();
    let layers = [Some(&model.encoder), model.mse_head.as_ref(), model.contrast_head.as_ref()];
    for (l, layer) in layers.iter().enumerate() {
        if let Some(p) = layer {
            out.extend((0..p.weights.len()).map(|i| (l, false, i)));
            out.extend((0..p.bias.len()).map(|i| (l, true, i)));
        }
    }
    out
}

fn param(model: &mut TwoHeadedModel, (l, bias, i): (usize, bool, usize)) -> &mut f64 {
    let layer = match l {
        0 => &mut model.encoder,
        1 => model.mse_head.as_mut().unwrap(),
        _ => model.contrast_head.as_mut().unwrap(),
    };
    if bias {
        &mut layer.bias.as_slice_mut().unwrap()[i]
    } else {
        &mut layer.weights.as_slice_mut().unwrap()[i]
    }
}

fn grad_at(grads: &GradientSet, (l, bias, i): (usize, bool, usize)) -> f64 {
    let layer = match l {
        0 => &grads.encoder,
        1 => grads.mse_head.as_ref().unwrap(),
        _ => grads.contrast_head.as_ref().unwrap(),
    };
    if bias {
        layer.bias[i]
    } else {
        layer.weights.as_slice().unwrap()[i]
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Encoder coordinates whose hidden unit sits near the ReLU kink for some
/// row, where a central difference straddles the nondifferentiable point.
fn near_kink(pre: &Array2<f64>, input: &Array2<f64>, model: &TwoHeadedModel, c: (usize, bool, usize)) -> bool {
    if c.0 != 0 {
        return false;
    }
    let n = model.n_items();
    let unit = if c.1 { c.2 } else { c.2 / n };
    (0..pre.nrows()).any(|u| {
        let shift = if c.1 { EPS } else { EPS * input[[u, c.2 % n]].abs() };
        pre[[u, unit]].abs() < KINK + shift
    })
}

/// Checks every coordinate of 50 random models; returns how many were compared.
pub fn check(obj: Objective, kind: ModelKind, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (obj as u64 * 1000 + kind as u64));
    let mut checked = 0;
    for trial in 0..50 {
        let n = rng.random_range(2..=10);
        let r = rng.random_range(1..=4);
        let mut model = init_model(kind, n, r, trial, Some(1.0)).unwrap();
        model.encoder.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let inst = instance(&mut rng, n);
        let (_, grads, pre) = evaluate(&model, &inst, obj);
        for c in coordinates(&model) {
            if near_kink(&pre, &inst.input, &model, c) {
                continue;
            }
            let orig = *param(&mut model, c);
            *param(&mut model, c) = orig + EPS;
            let up = evaluate(&model, &inst, obj).0;
            *param(&mut model, c) = orig - EPS;
            let down = evaluate(&model, &inst, obj).0;
            *param(&mut model, c) = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grad_at(&grads, c);
            assert!(
                relative_error(analytic, numeric) < TOL,
                "{obj:?} trial {trial} coordinate {c:?}: analytic {analytic}, numeric {numeric}"
            );
            checked += 1;
        }
    }
    checked
}

pub fn check_l2(seed: u64) -> usize {
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..50 {
        let n = rng.random_range(2..=10);
        let r = rng.random_range(1..=4);
        let lambda = rng.random_range(1e-3..2.0);
        let mut model = init_model(ModelKind::Nce, n, r, trial, Some(1.0)).unwrap();
        let (_, grads) = l2_penalty(&model, lambda).unwrap();
        for c in coordinates(&model) {
            let orig = *param(&mut model, c);
            *param(&mut model, c) = orig + EPS;
            let up = l2_penalty(&model, lambda).unwrap().0;
            *param(&mut model, c) = orig - EPS;
            let down = l2_penalty(&model, lambda).unwrap().0;
            *param(&mut model, c) = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grad_at(&grads, c);
            assert!(
                (analytic - numeric).abs() < 1e-9 || relative_error(analytic, numeric) < TOL,
                "trial {trial} coordinate {c:?}: analytic {analytic}, numeric {numeric}"
            );
            checked += 1;
        }
    }
    checked
}
