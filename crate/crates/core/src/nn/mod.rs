//! Network architectures and their parameter storage.
//!
//! A [`NetworkSpec`] describes a fully connected tanh network: plain MLP or
//! the gated Modified-MLP with two input encoders, optionally preceded by a
//! frozen random Fourier-feature embedding, with optional random weight
//! factorization (RWF) of every affine layer. [`ParamStore`] keeps all
//! trainable parameters in one flat vector plus a layout table.
//!
//! Two evaluation paths exist. [`tape`] records a single point on the scalar
//! autodiff tape and is the reference implementation. [`jet`] propagates
//! values together with first and diagonal second input derivatives through
//! whole layers for a batch of points; training uses it.

pub mod checkpoint;
pub mod jet;
pub mod tape;

#[cfg(test)]
mod tests;

use std::f64::consts::PI;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Mlp,
    ModifiedMlp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Embedding {
    None,
    /// `features` is the embedding size `e`; the first affine layer then
    /// consumes `2e` inputs.
    Fourier { features: usize, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factorization {
    None,
    /// Per-neuron scale `s = exp(N(mean, std^2))`.
    Rwf { mean: f64, std: f64 },
}

impl Factorization {
    pub const DEFAULT_RWF: Factorization = Factorization::Rwf { mean: 0.5, std: 0.1 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub architecture: Architecture,
    pub embedding: Embedding,
    pub factorization: Factorization,
    /// Fixed input normalization `x' = (x - shift) * scale`, applied before
    /// the embedding. Not trainable.
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Plain tanh MLP with identity input normalization.
    pub fn mlp(input_dim: usize, output_dim: usize, hidden_layers: usize, hidden_width: usize) -> Self {
        NetworkSpec {
            input_dim,
            output_dim,
            hidden_layers,
            hidden_width,
            activation: Activation::Tanh,
            architecture: Architecture::Mlp,
            embedding: Embedding::None,
            factorization: Factorization::None,
            input_shift: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            seed: 0,
        }
    }

    pub fn with_architecture(mut self, architecture: Architecture) -> Self {
        self.architecture = architecture;
        self
    }

    pub fn with_embedding(mut self, embedding: Embedding) -> Self {
        self.embedding = embedding;
        self
    }

    pub fn with_factorization(mut self, factorization: Factorization) -> Self {
        self.factorization = factorization;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Maps the box `[lo, hi]` onto `[-1, 1]` in every input dimension.
    pub fn with_input_box(mut self, lo: &[f64], hi: &[f64]) -> Self {
        self.input_shift = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
        self.input_scale = lo
            .iter()
            .zip(hi)
            .map(|(l, h)| if h > l { 2.0 / (h - l) } else { 1.0 })
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("network input and output dimensions must be positive"));
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::config("hidden-layers and hidden-width must be at least 1"));
        }
        if self.input_shift.len() != self.input_dim || self.input_scale.len() != self.input_dim {
            return Err(Error::config("input normalization must have one entry per input dimension"));
        }
        if self.input_scale.iter().chain(&self.input_shift).any(|v| !v.is_finite()) {
            return Err(Error::config("input normalization must be finite"));
        }
        if let Embedding::Fourier { features, sigma } = self.embedding {
            if features == 0 || !(sigma > 0.0) {
                return Err(Error::config("fourier embedding needs e >= 1 and sigma > 0"));
            }
        }
        if let Factorization::Rwf { std, mean } = self.factorization {
            if !(std >= 0.0) || !mean.is_finite() {
                return Err(Error::config("rwf needs a finite mean and non-negative std"));
            }
        }
        Ok(())
    }

    /// Width of the vector fed to the first affine layer(s).
    pub fn feature_dim(&self) -> usize {
        match self.embedding {
            Embedding::None => self.input_dim,
            Embedding::Fourier { features, .. } => 2 * features,
        }
    }

    /// Affine layers in parameter-layout order.
    pub fn layers(&self) -> Vec<LayerShape> {
        let f = self.feature_dim();
        let w = self.hidden_width;
        let mut layers = Vec::with_capacity(self.hidden_layers + 3);
        if self.architecture == Architecture::ModifiedMlp {
            layers.push(LayerShape { id: LayerId::EncoderU, fan_in: f, fan_out: w });
            layers.push(LayerShape { id: LayerId::EncoderV, fan_in: f, fan_out: w });
        }
        for l in 0..self.hidden_layers {
            let fan_in = if l == 0 { f } else { w };
            layers.push(LayerShape { id: LayerId::Hidden(l), fan_in, fan_out: w });
        }
        layers.push(LayerShape { id: LayerId::Output, fan_in: w, fan_out: self.output_dim });
        layers
    }

    pub fn num_params(&self) -> usize {
        let per_layer = match self.factorization {
            Factorization::None => |l: &LayerShape| l.fan_out * l.fan_in + l.fan_out,
            Factorization::Rwf { .. } => |l: &LayerShape| l.fan_out * l.fan_in + 2 * l.fan_out,
        };
        self.layers().iter().map(per_layer).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerId {
    EncoderU,
    EncoderV,
    Hidden(usize),
    Output,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::EncoderU => write!(f, "encoder-u"),
            LayerId::EncoderV => write!(f, "encoder-v"),
            LayerId::Hidden(l) => write!(f, "hidden-{l}"),
            LayerId::Output => write!(f, "output"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub id: LayerId,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    /// RWF per-neuron scale `s`.
    Scale,
    /// RWF direction matrix `v`.
    Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSlot {
    pub layer: LayerId,
    pub role: TensorRole,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one affine layer's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineSlots {
    pub shape: LayerShape,
    /// Dense weight, or the RWF direction `v`; `fan_out x fan_in` row-major.
    pub weight: usize,
    pub bias: usize,
    /// RWF scale offset, when factorized.
    pub scale: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    layout: Vec<TensorSlot>,
    affine: Vec<AffineSlots>,
    /// Frozen Fourier matrix `B`, `e x d` row-major.
    fourier: Option<Vec<f64>>,
}

fn build_layout(spec: &NetworkSpec) -> (Vec<TensorSlot>, Vec<AffineSlots>) {
    let rwf = matches!(spec.factorization, Factorization::Rwf { .. });
    let mut slots = Vec::new();
    let mut affine = Vec::new();
    let mut offset = 0;
    let mut push = |slots: &mut Vec<TensorSlot>, layer, role, rows, cols| {
        let slot = TensorSlot { layer, role, offset, rows, cols };
        offset += rows * cols;
        slots.push(slot);
        slot.offset
    };
    for shape in spec.layers() {
        let (scale, weight) = if rwf {
            let s = push(&mut slots, shape.id, TensorRole::Scale, shape.fan_out, 1);
            let v = push(&mut slots, shape.id, TensorRole::Direction, shape.fan_out, shape.fan_in);
            (Some(s), v)
        } else {
            (None, push(&mut slots, shape.id, TensorRole::Weight, shape.fan_out, shape.fan_in))
        };
        let bias = push(&mut slots, shape.id, TensorRole::Bias, shape.fan_out, 1);
        affine.push(AffineSlots { shape, weight, bias, scale });
    }
    (slots, affine)
}

impl ParamStore {
    /// Xavier-normal weights, zero biases, RWF split of each weight row and
    /// a Gaussian Fourier matrix, all drawn from `spec.seed`.
    pub fn init(spec: &NetworkSpec) -> Result<ParamStore> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // scales come from their own stream so that factorizing a network
        // leaves its effective initial weights unchanged
        let mut scale_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        scale_rng.set_stream(1);
        let fourier = match spec.embedding {
            Embedding::None => None,
            Embedding::Fourier { features, sigma } => {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
                Some((0..features * spec.input_dim).map(|_| normal.sample(&mut rng)).collect())
            }
        };
        let (layout, affine) = build_layout(spec);
        let mut values = vec![0.0; spec.num_params()];
        for slots in &affine {
            let LayerShape { fan_in, fan_out, .. } = slots.shape;
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let xavier = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| xavier.sample(&mut rng)).collect();
            match (spec.factorization, slots.scale) {
                (Factorization::Rwf { mean, std }, Some(scale_at)) => {
                    let log_scale =
                        Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
                    for o in 0..fan_out {
                        let s = log_scale.sample(&mut scale_rng).exp();
                        values[scale_at + o] = s;
                        for i in 0..fan_in {
                            values[slots.weight + o * fan_in + i] = w[o * fan_in + i] / s;
                        }
                    }
                }
                _ => values[slots.weight..slots.weight + w.len()].copy_from_slice(&w),
            }
        }
        Ok(ParamStore { values, layout, affine, fourier })
    }

    /// Rebuilds a store from raw parts, checking them against `spec`.
    pub fn from_parts(spec: &NetworkSpec, values: Vec<f64>, fourier: Option<Vec<f64>>) -> Result<ParamStore> {
        spec.validate()?;
        if values.len() != spec.num_params() {
            return Err(Error::Dimension {
                expected: spec.num_params(),
                got: values.len(),
                context: "parameter vector",
            });
        }
        let expected_b = match spec.embedding {
            Embedding::None => 0,
            Embedding::Fourier { features, .. } => features * spec.input_dim,
        };
        if fourier.as_ref().map_or(0, Vec::len) != expected_b {
            return Err(Error::Dimension {
                expected: expected_b,
                got: fourier.as_ref().map_or(0, Vec::len),
                context: "fourier matrix",
            });
        }
        let (layout, affine) = build_layout(spec);
        Ok(ParamStore { values, layout, affine, fourier })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[TensorSlot] {
        &self.layout
    }

    pub fn affine_layers(&self) -> &[AffineSlots] {
        &self.affine
    }

    pub fn slot(&self, layer: LayerId, role: TensorRole) -> Option<TensorSlot> {
        self.layout.iter().copied().find(|s| s.layer == layer && s.role == role)
    }

    pub fn fourier(&self) -> Option<&[f64]> {
        self.fourier.as_deref()
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// A network specification together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Network> {
        let params = ParamStore::init(&spec)?;
        Ok(Network { spec, params })
    }

    pub fn from_parts(spec: NetworkSpec, values: Vec<f64>, fourier: Option<Vec<f64>>) -> Result<Network> {
        let params = ParamStore::from_parts(&spec, values, fourier)?;
        Ok(Network { spec, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_factorized(&self) -> bool {
        matches!(self.spec.factorization, Factorization::Rwf { .. })
    }

    /// Dense weight of every affine layer (materializing `s * v` under RWF),
    /// in layout order.
    pub(crate) fn dense_weights(&self) -> Vec<Vec<f64>> {
        let values = &self.params.values;
        self.params
            .affine
            .iter()
            .map(|slots| {
                let LayerShape { fan_in, fan_out, .. } = slots.shape;
                let v = &values[slots.weight..slots.weight + fan_in * fan_out];
                match slots.scale {
                    None => v.to_vec(),
                    Some(s_at) => {
                        let mut w = v.to_vec();
                        for (o, row) in w.chunks_exact_mut(fan_in).enumerate() {
                            let s = values[s_at + o];
                            for x in row {
                                *x *= s;
                            }
                        }
                        w
                    }
                }
            })
            .collect()
    }

    /// The effective weights `w = s * v` of a factorized network.
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        if !self.is_factorized() {
            return Err(Error::usage("effective_weights requires a factorized (rwf) network"));
        }
        Ok(self
            .params
            .affine
            .iter()
            .zip(self.dense_weights())
            .map(|(slots, data)| Matrix { rows: slots.shape.fan_out, cols: slots.shape.fan_in, data })
            .collect())
    }

    /// Equivalent unfactorized network whose weights are the current
    /// effective weights.
    pub fn materialized(&self) -> Network {
        let spec = NetworkSpec { factorization: Factorization::None, ..self.spec.clone() };
        let (_, affine) = build_layout(&spec);
        let mut values = vec![0.0; spec.num_params()];
        for ((dst, src), w) in affine.iter().zip(&self.params.affine).zip(self.dense_weights()) {
            values[dst.weight..dst.weight + w.len()].copy_from_slice(&w);
            let n = src.shape.fan_out;
            values[dst.bias..dst.bias + n].copy_from_slice(&self.params.values[src.bias..src.bias + n]);
        }
        Network::from_parts(spec, values, self.params.fourier.clone())
            .expect("materialized layout is consistent by construction")
    }

    /// Maps dense-weight gradients (layout order) onto the flat gradient,
    /// applying the RWF chain rule where needed.
    pub(crate) fn scatter_weight_grads(&self, dense: &[Vec<f64>], grad: &mut [f64]) {
        let values = &self.params.values;
        for (slots, gw) in self.params.affine.iter().zip(dense) {
            let fan_in = slots.shape.fan_in;
            match slots.scale {
                None => {
                    for (g, d) in grad[slots.weight..slots.weight + gw.len()].iter_mut().zip(gw) {
                        *g += d;
                    }
                }
                Some(s_at) => {
                    for (o, grow) in gw.chunks_exact(fan_in).enumerate() {
                        let s = values[s_at + o];
                        let vrow = &values[slots.weight + o * fan_in..slots.weight + (o + 1) * fan_in];
                        let mut gs = 0.0;
                        for (i, (&gwi, &vi)) in grow.iter().zip(vrow).enumerate() {
                            gs += gwi * vi;
                            grad[slots.weight + o * fan_in + i] += s * gwi;
                        }
                        grad[s_at + o] += gs;
                    }
                }
            }
        }
    }
}

/// `gamma(x) = [cos(2 pi B x), sin(2 pi B x)]` for a single point.
pub fn fourier_embed(x: &[f64], b: &[f64], features: usize) -> Result<Vec<f64>> {
    let d = x.len();
    if b.len() != features * d {
        return Err(Error::Dimension { expected: features * d, got: b.len(), context: "fourier matrix" });
    }
    let phase: Vec<f64> = b
        .chunks_exact(d)
        .map(|row| 2.0 * PI * row.iter().zip(x).map(|(bk, xk)| bk * xk).sum::<f64>())
        .collect();
    Ok(phase.iter().map(|p| p.cos()).chain(phase.iter().map(|p| p.sin())).collect())
}
