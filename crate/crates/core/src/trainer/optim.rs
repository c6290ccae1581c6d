use ndarray::{Array1, Array2, Zip};

use crate::network::{GradientSet, LayerParams, TwoHeadedModel};

/// Which layers an update is allowed to change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub encoder: bool,
    pub mse_head: bool,
    pub contrast_head: bool,
}

impl LayerMask {
    fn flags(self) -> [bool; 3] {
        [self.encoder, self.mse_head, self.contrast_head]
    }
}

fn layer_slots(model: &mut TwoHeadedModel) -> [Option<&mut LayerParams>; 3] {
    [
        Some(&mut model.encoder),
        model.mse_head.as_mut(),
        model.contrast_head.as_mut(),
    ]
}

fn grad_slots(grads: &GradientSet) -> [Option<&LayerParams>; 3] {
    [
        Some(&grads.encoder),
        grads.mse_head.as_ref(),
        grads.contrast_head.as_ref(),
    ]
}

fn grad_slots_mut(grads: &mut GradientSet) -> [Option<&mut LayerParams>; 3] {
    [
        Some(&mut grads.encoder),
        grads.mse_head.as_mut(),
        grads.contrast_head.as_mut(),
    ]
}

/// Euclidean norm over the masked gradient tensors.
pub fn masked_norm(grads: &GradientSet, mask: LayerMask) -> f64 {
    grad_slots(grads)
        .into_iter()
        .zip(mask.flags())
        .filter_map(|(g, on)| g.filter(|_| on))
        .flat_map(|g| g.weights.iter().chain(g.bias.iter()))
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales the masked gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_norm(grads: &mut GradientSet, mask: LayerMask, max_norm: f64) -> f64 {
    let norm = masked_norm(grads, mask);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (g, on) in grad_slots_mut(grads).into_iter().zip(mask.flags()) {
            if let Some(g) = g.filter(|_| on) {
                g.weights *= scale;
                g.bias *= scale;
            }
        }
    }
    norm
}

struct Moments {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
    steps: i32,
}

/// Adaptive-moment gradient descent with per-layer step counters, so layers
/// that sit out some updates still get correct bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: [Option<Moments>; 3],
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: [None, None, None],
        }
    }

    pub fn step(&mut self, model: &mut TwoHeadedModel, grads: &GradientSet, mask: LayerMask) {
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let layers = layer_slots(model);
        let gs = grad_slots(grads);
        for (((layer, g), on), state) in layers.into_iter().zip(gs).zip(mask.flags()).zip(&mut self.state) {
            let (Some(layer), Some(g), true) = (layer, g, on) else {
                continue;
            };
            let s = state.get_or_insert_with(|| Moments {
                m_w: Array2::zeros(layer.weights.raw_dim()),
                v_w: Array2::zeros(layer.weights.raw_dim()),
                m_b: Array1::zeros(layer.bias.raw_dim()),
                v_b: Array1::zeros(layer.bias.raw_dim()),
                steps: 0,
            });
            s.steps += 1;
            let c1 = 1.0 - b1.powi(s.steps);
            let c2 = 1.0 - b2.powi(s.steps);
            let update = |p: &mut f64, m: &mut f64, v: &mut f64, &g: &f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            Zip::from(&mut layer.weights)
                .and(&mut s.m_w)
                .and(&mut s.v_w)
                .and(&g.weights)
                .for_each(update);
            Zip::from(&mut layer.bias)
                .and(&mut s.m_b)
                .and(&mut s.v_b)
                .and(&g.bias)
                .for_each(update);
        }
    }
}
