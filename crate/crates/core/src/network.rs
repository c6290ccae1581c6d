//! Single-hidden-layer autoencoder with one shared ReLU encoder and up to two
//! linear decoder heads, plus hand-written backpropagation.
//!
//! Batches are row-major `b × n` matrices: one row per user. The encoder maps
//! `n → r`, each head maps `r → n`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Plain autoencoder trained on squared error.
    AutoRec,
    /// One head trained only on the negative-sampling objective.
    Ohns,
    /// Negative-sampling head plus squared-error head.
    Ns,
    /// Closed-form NCE regression head plus squared-error head.
    Nce,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::AutoRec, ModelKind::Ohns, ModelKind::Ns, ModelKind::Nce];

    pub fn has_mse_head(self) -> bool {
        self != ModelKind::Ohns
    }

    pub fn has_contrast_head(self) -> bool {
        self != ModelKind::AutoRec
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AutoRec => "autorec",
            ModelKind::Ohns => "ohns",
            ModelKind::Ns => "ns",
            ModelKind::Nce => "nce",
        }
    }

    fn code(self) -> u8 {
        match self {
            ModelKind::AutoRec => 0,
            ModelKind::Ohns => 1,
            ModelKind::Ns => 2,
            ModelKind::Nce => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Snapshot(format!("unknown model kind {code}")))
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown model kind {s:?}")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Affine layer `y = W x + b` with `W` stored as `output × input`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(output_dim: usize, input_dim: usize) -> Self {
        LayerParams {
            weights: Array2::zeros((output_dim, input_dim)),
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Row-wise affine map of a `b × input` batch.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weights.t());
        out += &self.bias;
        out
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoHeadedModel {
    pub kind: ModelKind,
    pub encoder: LayerParams,
    pub mse_head: Option<LayerParams>,
    pub contrast_head: Option<LayerParams>,
}

/// Which decoder heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Mse,
    Contrast,
    Both,
}

impl Heads {
    fn mse(self) -> bool {
        matches!(self, Heads::Mse | Heads::Both)
    }

    fn contrast(self) -> bool {
        matches!(self, Heads::Contrast | Heads::Both)
    }
}

/// Default initialization half-width `sqrt(6 / (n + r))`.
pub fn default_init_scale(n: usize, r: usize) -> f64 {
    (6.0 / (n + r) as f64).sqrt()
}

/// Weights i.i.d. uniform in `[-scale, scale]`, biases zero. The draw order is
/// encoder, squared-error head, contrastive head, each row-major.
pub fn init_model(kind: ModelKind, n: usize, r: usize, seed: u64, scale: Option<f64>) -> Result<TwoHeadedModel> {
    if n == 0 || r == 0 {
        return Err(Error::invalid("model dimensions must be positive"));
    }
    let scale = scale.unwrap_or_else(|| default_init_scale(n, r));
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::invalid("initialization scale must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |out: usize, inp: usize| {
        let mut p = LayerParams::zeros(out, inp);
        p.weights
            .iter_mut()
            .for_each(|w| *w = scale * (2.0 * rng.random::<f64>() - 1.0));
        p
    };
    let encoder = layer(r, n);
    let mse_head = kind.has_mse_head().then(|| layer(n, r));
    let contrast_head = kind.has_contrast_head().then(|| layer(n, r));
    Ok(TwoHeadedModel {
        kind,
        encoder,
        mse_head,
        contrast_head,
    })
}

impl TwoHeadedModel {
    pub fn n_items(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// The head recommendations are served from: the squared-error head, or
    /// the single contrastive head of an OHNS model.
    pub fn serving_head(&self) -> &LayerParams {
        self.mse_head
            .as_ref()
            .or(self.contrast_head.as_ref())
            .expect("every model kind has at least one head")
    }

    pub fn serving_heads(&self) -> Heads {
        if self.mse_head.is_some() {
            Heads::Mse
        } else {
            Heads::Contrast
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, r) = (self.n_items(), self.latent_dim());
        if self.mse_head.is_some() != self.kind.has_mse_head()
            || self.contrast_head.is_some() != self.kind.has_contrast_head()
        {
            return Err(Error::invalid(format!("head layout does not match kind {}", self.kind)));
        }
        for head in self.mse_head.iter().chain(self.contrast_head.iter()) {
            Error::check_dim(r, head.input_dim())?;
            Error::check_dim(n, head.output_dim())?;
        }
        Error::check_dim(r, self.encoder.bias.len())?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.mse_head.as_ref().is_none_or(LayerParams::is_finite)
            && self.contrast_head.as_ref().is_none_or(LayerParams::is_finite)
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        self.layers()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        std::iter::once(&self.encoder)
            .chain(self.mse_head.iter())
            .chain(self.contrast_head.iter())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        w.u8(self.kind.code());
        w.u64(self.n_items() as u64);
        w.u64(self.latent_dim() as u64);
        for layer in self.layers() {
            w.f64s(layer.weights.as_slice().expect("standard layout"));
            w.f64s(layer.bias.as_slice().expect("standard layout"));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, MODEL_MAGIC)?;
        if version != MODEL_VERSION {
            return Err(Error::Snapshot(format!("unsupported model version {version}")));
        }
        let kind = ModelKind::from_code(r.u8()?)?;
        let n = r.len()?;
        let latent = r.len()?;
        let mut read_layer = |out: usize, inp: usize| -> Result<LayerParams> {
            let weights = r.f64s()?;
            let bias = r.f64s()?;
            Error::check_dim(out * inp, weights.len())?;
            Error::check_dim(out, bias.len())?;
            Ok(LayerParams {
                weights: Array2::from_shape_vec((out, inp), weights).expect("length checked"),
                bias: Array1::from(bias),
            })
        };
        let encoder = read_layer(latent, n)?;
        let mse_head = kind.has_mse_head().then(|| read_layer(n, latent)).transpose()?;
        let contrast_head = kind.has_contrast_head().then(|| read_layer(n, latent)).transpose()?;
        r.finish()?;
        let model = TwoHeadedModel {
            kind,
            encoder,
            mse_head,
            contrast_head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"OCCFMODL";
const MODEL_VERSION: u32 = 1;

fn check_finite(values: ArrayView1<f64>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("input contains non-finite values"))
    }
}

/// Latent code `max(0, W x + b)` of one dense input vector.
pub fn encode(model: &TwoHeadedModel, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    Error::check_dim(model.n_items(), x.len())?;
    check_finite(x)?;
    let mut h = model.encoder.weights.dot(&x) + &model.encoder.bias;
    h.mapv_inplace(|v| v.max(0.0));
    Ok(h)
}

/// Scores `W' h + b'` of one head for one latent vector.
pub fn decode(head: &LayerParams, h: ArrayView1<f64>) -> Result<Array1<f64>> {
    Error::check_dim(head.input_dim(), h.len())?;
    check_finite(h)?;
    Ok(head.weights.dot(&h) + &head.bias)
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub pre_activation: Array2<f64>,
    pub latent: Array2<f64>,
    pub mse_scores: Option<Array2<f64>>,
    pub contrast_scores: Option<Array2<f64>>,
}

/// Batched forward pass over `b × n` inputs.
pub fn forward(model: &TwoHeadedModel, input: Array2<f64>, heads: Heads) -> Result<ForwardCache> {
    Error::check_dim(model.n_items(), input.ncols())?;
    let pre_activation = model.encoder.forward(input.view());
    let latent = pre_activation.mapv(|v| v.max(0.0));
    let head_scores = |want: bool, head: &Option<LayerParams>| -> Result<Option<Array2<f64>>> {
        match (want, head) {
            (false, _) => Ok(None),
            (true, Some(h)) => Ok(Some(h.forward(latent.view()))),
            (true, None) => Err(Error::invalid(format!(
                "model kind {} lacks the requested head",
                model.kind
            ))),
        }
    };
    let mse_scores = head_scores(heads.mse(), &model.mse_head)?;
    let contrast_scores = head_scores(heads.contrast(), &model.contrast_head)?;
    Ok(ForwardCache {
        input,
        pre_activation,
        latent,
        mse_scores,
        contrast_scores,
    })
}

/// Gradient of the batch loss with respect to each head's scores.
#[derive(Clone, Debug, Default)]
pub struct ScoreGradients {
    pub mse: Option<Array2<f64>>,
    pub contrast: Option<Array2<f64>>,
}

/// One gradient tensor per model parameter tensor, shaped like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub encoder: LayerParams,
    pub mse_head: Option<LayerParams>,
    pub contrast_head: Option<LayerParams>,
}

impl GradientSet {
    pub fn zeros_like(model: &TwoHeadedModel) -> Self {
        let zero = |l: &LayerParams| LayerParams::zeros(l.output_dim(), l.input_dim());
        GradientSet {
            encoder: zero(&model.encoder),
            mse_head: model.mse_head.as_ref().map(zero),
            contrast_head: model.contrast_head.as_ref().map(zero),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        fn add(a: &mut LayerParams, b: &LayerParams) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
        add(&mut self.encoder, &other.encoder);
        if let (Some(a), Some(b)) = (self.mse_head.as_mut(), other.mse_head.as_ref()) {
            add(a, b);
        }
        if let (Some(a), Some(b)) = (self.contrast_head.as_mut(), other.contrast_head.as_ref()) {
            add(a, b);
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        std::iter::once(&self.encoder)
            .chain(self.mse_head.iter())
            .chain(self.contrast_head.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        std::iter::once(&mut self.encoder)
            .chain(self.mse_head.iter_mut())
            .chain(self.contrast_head.iter_mut())
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }
}

fn head_backward(
    head: &LayerParams,
    d_scores: &Array2<f64>,
    latent: &Array2<f64>,
    d_latent: &mut Array2<f64>,
) -> LayerParams {
    let weights = d_scores.t().dot(latent);
    let bias = d_scores.sum_axis(Axis(0));
    *d_latent += &d_scores.dot(&head.weights);
    LayerParams { weights, bias }
}

/// Exact gradients of a loss whose per-score gradients are `d_scores`.
///
/// With `freeze_encoder` the encoder gradient is left at zero and the
/// backward pass stops at the latent layer. The ReLU derivative at exactly
/// zero is taken as zero.
pub fn backward(
    model: &TwoHeadedModel,
    cache: &ForwardCache,
    d_scores: &ScoreGradients,
    freeze_encoder: bool,
) -> Result<GradientSet> {
    let batch = cache.input.nrows();
    let mut grads = GradientSet::zeros_like(model);
    let mut d_latent = Array2::<f64>::zeros((batch, model.latent_dim()));

    let pairs = [
        (&d_scores.mse, &model.mse_head, &mut grads.mse_head),
        (&d_scores.contrast, &model.contrast_head, &mut grads.contrast_head),
    ];
    for (upstream, head, slot) in pairs {
        let Some(upstream) = upstream else { continue };
        let head = head
            .as_ref()
            .ok_or_else(|| Error::invalid("score gradient supplied for a missing head"))?;
        Error::check_dim(batch, upstream.nrows())?;
        Error::check_dim(model.n_items(), upstream.ncols())?;
        *slot = Some(head_backward(head, upstream, &cache.latent, &mut d_latent));
    }

    if !freeze_encoder {
        Zip::from(&mut d_latent)
            .and(&cache.pre_activation)
            .for_each(|d, &pre| {
                if pre <= 0.0 {
                    *d = 0.0;
                }
            });
        grads.encoder.weights = d_latent.t().dot(&cache.input);
        grads.encoder.bias = d_latent.sum_axis(Axis(0));
    }
    Ok(grads)
}

/// `λ · Σ W²` over every weight matrix (biases excluded) and its gradient `2λW`.
pub fn l2_penalty(model: &TwoHeadedModel, lambda: f64) -> Result<(f64, GradientSet)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("L2 strength must be finite and nonnegative"));
    }
    let mut grads = GradientSet::zeros_like(model);
    let mut value = 0.0;
    for (layer, grad) in model.layers().zip(grads.layers_mut()) {
        value += layer.weights.iter().map(|w| w * w).sum::<f64>();
        grad.weights = layer.weights.mapv(|w| 2.0 * lambda * w);
    }
    Ok((lambda * value, grads))
}
