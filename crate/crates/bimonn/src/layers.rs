//! Differentiable morphological neurons.
//!
//! The basic unit convolves an image with reparametrized positive-ish weights,
//! subtracts a bias, scales by a learnable factor `p` and squashes through the
//! smooth threshold [`xi`]. Depending on its parameters the thresholded output
//! equals a binary dilation or erosion exactly (see [`crate::binarize`]).
//!
//! Channel-mixing units ("LUI") are the same neuron with a tubular kernel
//! across channels: spatially 1x1, realizing unions and intersections once
//! binarized. Stacks of these are assembled in [`crate::network`].
//!
//! Inputs are expected to be binary or level-set-decomposed before the first
//! layer; raw gray values are never fed to a neuron directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, AutodiffError, NodeId, Tape, Tensor};
use crate::morphology::BitImage;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("non-finite parameter in {0}")]
    NonFinite(&'static str),
    #[error("dual reparametrization: softplus weights sum underflowed to {0}")]
    DualUnderflow(f64),
    #[error("value {value} at index {index} lies inside the forbidden band (0.5 +/- {delta})")]
    InsideBand { index: usize, value: f64, delta: f64 },
    #[error("value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("delta must lie in (0, 1/2], got {0}")]
    BadDelta(f64),
    #[error("level-set thresholds must be nonempty and strictly increasing")]
    BadThresholds,
    #[error("expected a (C, H, W) image, got shape {0:?}")]
    BadImageShape(Vec<usize>),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Smooth threshold `xi(u) = tanh(u)/2 + 1/2`.
///
/// Fixed point of every layer: `xi(0) = 1/2`, `xi(u) + xi(-u) = 1`, strictly
/// increasing with range (0, 1).
pub fn xi(u: f64) -> f64 {
    0.5 * u.tanh() + 0.5
}

/// Inverse of [`xi`] on (0, 1).
pub fn xi_inv(y: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&y));
    f64::atanh(2.0 * y - 1.0)
}

/// Inverse of the softplus, clamped away from zero for tiny weights.
pub fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-10);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Scale used by the dual weight reparametrization: weights are normalized to
/// sum to `2 xi^{-1}(0.95)`.
pub fn dual_scale_default() -> f64 {
    2.0 * xi_inv(0.95)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Identity,
    Positive,
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    Identity,
    Positive,
    /// Softplus in the forward pass; after each optimizer step the raw value
    /// is reset so the effective bias is the Euclidean projection onto
    /// [`bias_range`].
    Projected,
    /// Clamp onto [`bias_range`] inside the forward pass itself.
    ProjectedReparam,
}

/// Raw learnable state of one neuron plus its reparametrization choices.
///
/// `omega` has the kernel shape for spatial neurons, or `[n]` across channels
/// for tubular (LUI) neurons. The effective weights and bias seen by the
/// convolution are derived through the configured modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiseParams {
    pub omega: Vec<f64>,
    pub kernel_shape: Vec<usize>,
    pub beta: f64,
    pub p: f64,
    pub weight_mode: WeightMode,
    pub bias_mode: BiasMode,
    pub dual_scale_k: f64,
}

impl BiseParams {
    pub fn new(kernel_shape: Vec<usize>, weight_mode: WeightMode, bias_mode: BiasMode) -> Self {
        let n: usize = kernel_shape.iter().product();
        Self {
            omega: vec![0.0; n],
            kernel_shape,
            beta: 0.0,
            p: 1.0,
            weight_mode,
            bias_mode,
            dual_scale_k: dual_scale_default(),
        }
    }

    pub fn cell_count(&self) -> usize {
        self.omega.len()
    }

    /// Effective weights after reparametrization.
    pub fn effective_weights(&self) -> Result<Vec<f64>, LayerError> {
        if self.omega.iter().any(|v| !v.is_finite()) {
            return Err(LayerError::NonFinite("omega"));
        }
        match self.weight_mode {
            WeightMode::Identity => Ok(self.omega.clone()),
            WeightMode::Positive => Ok(self.omega.iter().map(|&w| softplus(w)).collect()),
            WeightMode::Dual => {
                let sp: Vec<f64> = self.omega.iter().map(|&w| softplus(w)).collect();
                let total: f64 = sp.iter().sum();
                if !(total.is_finite() && total > 0.0) {
                    return Err(LayerError::DualUnderflow(total));
                }
                Ok(sp.iter().map(|&w| self.dual_scale_k * w / total).collect())
            }
        }
    }

    /// Effective bias for the forward pass, given already-computed effective
    /// weights (needed by the clamping mode).
    pub fn effective_bias(&self, weights: &[f64]) -> Result<f64, LayerError> {
        if !self.beta.is_finite() {
            return Err(LayerError::NonFinite("beta"));
        }
        Ok(match self.bias_mode {
            BiasMode::Identity => self.beta,
            BiasMode::Positive | BiasMode::Projected => softplus(self.beta),
            BiasMode::ProjectedReparam => {
                let (lo, hi) = bias_range(weights);
                softplus(self.beta).clamp(lo, hi)
            }
        })
    }

    /// Post-optimizer-step projection for [`BiasMode::Projected`]: resets the
    /// raw bias so the effective bias is the closest point of [`bias_range`].
    pub fn post_step_bias_projection(&mut self) -> Result<(), LayerError> {
        if self.bias_mode != BiasMode::Projected {
            return Ok(());
        }
        let weights = self.effective_weights()?;
        let (lo, hi) = bias_range(&weights);
        let eff = softplus(self.beta);
        let clamped = eff.clamp(lo, hi);
        if clamped != eff {
            self.beta = softplus_inv(clamped);
        }
        Ok(())
    }
}

/// Coherent bias interval `[(W1 + W2)/2, sum(w) - W1/2]` built from the two
/// smallest distinct weight values `W1 < W2`. With a single distinct value
/// `w` the interval degenerates to `[w, sum(w) - w/2]`.
pub fn bias_range(weights: &[f64]) -> (f64, f64) {
    assert!(!weights.is_empty());
    let (i1, i2) = smallest_two_distinct(weights);
    let total: f64 = weights.iter().sum();
    let lo = 0.5 * (weights[i1] + weights[i2]);
    let hi = total - 0.5 * weights[i1];
    (lo, hi)
}

/// Indices of the smallest value and of the smallest strictly larger value
/// (the first index again when all values are equal).
fn smallest_two_distinct(weights: &[f64]) -> (usize, usize) {
    let mut i1 = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w < weights[i1] {
            i1 = i;
        }
    }
    let mut i2 = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > weights[i1] && i2.is_none_or(|j: usize| w < weights[j]) {
            i2 = Some(i);
        }
    }
    (i1, i2.unwrap_or(i1))
}

/// Tape-side handles to one neuron's raw parameters.
#[derive(Debug, Clone, Copy)]
pub struct BiseNodes {
    pub omega: NodeId,
    pub beta: NodeId,
    pub p: NodeId,
}

impl BiseParams {
    /// Registers the raw parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape) -> BiseNodes {
        let omega = tape.leaf(Tensor::new(self.kernel_shape.clone(), self.omega.clone()));
        let beta = tape.leaf(Tensor::scalar(self.beta));
        let p = tape.leaf(Tensor::scalar(self.p));
        BiseNodes { omega, beta, p }
    }

    /// Effective-weight subgraph.
    pub fn weights_node(&self, tape: &mut Tape, nodes: BiseNodes) -> Result<NodeId, LayerError> {
        Ok(match self.weight_mode {
            WeightMode::Identity => nodes.omega,
            WeightMode::Positive => tape.softplus(nodes.omega),
            WeightMode::Dual => {
                let sp = tape.softplus(nodes.omega);
                let total = tape.sum(sp);
                if tape.value(total).item() <= 0.0 {
                    return Err(LayerError::DualUnderflow(tape.value(total).item()));
                }
                let normalized = tape.div_scalar(sp, total)?;
                tape.mul_const(normalized, self.dual_scale_k)
            }
        })
    }

    /// Effective-bias subgraph; `w` must be the matching effective weights.
    pub fn bias_node(&self, tape: &mut Tape, nodes: BiseNodes, w: NodeId) -> Result<NodeId, LayerError> {
        Ok(match self.bias_mode {
            BiasMode::Identity => nodes.beta,
            BiasMode::Positive | BiasMode::Projected => tape.softplus(nodes.beta),
            BiasMode::ProjectedReparam => {
                let raw = tape.softplus(nodes.beta);
                let (lo, hi) = bias_bounds_nodes(tape, w)?;
                tape.clamp(raw, lo, hi)?
            }
        })
    }
}

/// Bias interval bounds as tape nodes, with the selection indices frozen at
/// the current weight values so gradients flow into the bounding weights.
pub fn bias_bounds_nodes(tape: &mut Tape, w: NodeId) -> Result<(NodeId, NodeId), AutodiffError> {
    let values = tape.value(w).data().to_vec();
    let (i1, i2) = smallest_two_distinct(&values);
    let pair = tape.gather(w, vec![i1, i2])?;
    let sum_pair = tape.sum(pair);
    let lo = tape.mul_const(sum_pair, 0.5);
    let w1 = tape.gather(w, vec![i1])?;
    let half_w1 = tape.mul_const(w1, 0.5);
    let total = tape.sum(w);
    let hi = tape.sub(total, half_w1)?;
    Ok((lo, hi))
}

/// Output and the effective parameter nodes of one neuron's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NeuronForward {
    pub out: NodeId,
    pub eff_weights: NodeId,
    pub eff_bias: NodeId,
    pub p: NodeId,
}

/// Spatial neuron: `xi(p (x conv W - b))`, same spatial shape as `x`.
///
/// `x` is `(B, H, W)`; the kernel shape of `params` must be odd in both
/// extents.
pub fn bise_forward(
    tape: &mut Tape,
    x: NodeId,
    params: &BiseParams,
    nodes: BiseNodes,
) -> Result<NeuronForward, LayerError> {
    let w = params.weights_node(tape, nodes)?;
    let b = params.bias_node(tape, nodes, w)?;
    let conv = tape.conv2d_same(x, w)?;
    let pre = tape.sub_scalar(conv, b)?;
    let scaled = tape.scale(pre, nodes.p)?;
    let out = tape.smooth_threshold(scaled);
    Ok(NeuronForward { out, eff_weights: w, eff_bias: b, p: nodes.p })
}

/// Tubular neuron across channels: `x` is `(B, N, H, W)`, kernel shape `[N]`,
/// output `(B, H, W)`. Binarized, it realizes a union (dilation across
/// channels) or intersection (erosion).
pub fn lui_forward(
    tape: &mut Tape,
    x: NodeId,
    params: &BiseParams,
    nodes: BiseNodes,
) -> Result<NeuronForward, LayerError> {
    let w = params.weights_node(tape, nodes)?;
    let b = params.bias_node(tape, nodes, w)?;
    let mixed = tape.chan_sum(x, w)?;
    let pre = tape.sub_scalar(mixed, b)?;
    let scaled = tape.scale(pre, nodes.p)?;
    let out = tape.smooth_threshold(scaled);
    Ok(NeuronForward { out, eff_weights: w, eff_bias: b, p: nodes.p })
}

/// Real image whose values keep a margin `delta` away from 1/2.
///
/// The associated binary image is the strict `> 1/2` threshold; ties at
/// exactly 1/2 resolve to 0.
#[derive(Debug, Clone)]
pub struct AlmostBinaryImage {
    values: Tensor,
    delta: f64,
}

impl AlmostBinaryImage {
    /// Validates range and the forbidden band `(1/2 - delta, 1/2 + delta)`.
    pub fn new(values: Tensor, delta: f64) -> Result<Self, LayerError> {
        if !(delta > 0.0 && delta <= 0.5) {
            return Err(LayerError::BadDelta(delta));
        }
        for (index, &value) in values.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(LayerError::OutOfRange { index, value });
            }
            if (value - 0.5).abs() < delta {
                return Err(LayerError::InsideBand { index, value, delta });
            }
        }
        Ok(Self { values, delta })
    }

    /// Exactly binary image seen as almost binary with the maximal margin.
    pub fn from_binary(img: &BitImage) -> Self {
        let data: Vec<f64> = img.to_bools().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self { values: Tensor::new(vec![img.height(), img.width()], data), delta: 0.5 }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// The associated binary image (`values > 1/2`). Requires a 2-D tensor.
    pub fn binary(&self) -> BitImage {
        let [h, w]: [usize; 2] = self.values.shape().try_into().expect("2-D image");
        let data = self.values.data();
        BitImage::from_fn(w, h, |r, c| data[r * w + c] > 0.5)
    }

    /// Largest margin valid for `values`, if any.
    pub fn margin_of(values: &Tensor) -> Option<f64> {
        let m = values.data().iter().map(|v| (v - 0.5).abs()).fold(f64::INFINITY, f64::min);
        (m > 0.0).then(|| m.min(0.5))
    }
}

/// Thresholds for decomposing a gray channel into nested binary channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSetConfig {
    thresholds: Vec<f64>,
}

impl LevelSetConfig {
    pub fn new(thresholds: Vec<f64>) -> Result<Self, LayerError> {
        if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LayerError::BadThresholds);
        }
        Ok(Self { thresholds })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
}

/// Upper level sets of a `(C, H, W)` image: output channel `c * N + t` is
/// `(image_c >= threshold_t)`. Channels for increasing thresholds are nested
/// decreasing.
pub fn level_set_decompose(image: &Tensor, cfg: &LevelSetConfig) -> Result<Vec<BitImage>, LayerError> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| LayerError::BadImageShape(image.shape().to_vec()))?;
    let mut out = Vec::with_capacity(c * cfg.thresholds.len());
    for ci in 0..c {
        let chan = &image.data()[ci * h * w..(ci + 1) * h * w];
        for &tau in &cfg.thresholds {
            out.push(BitImage::from_fn(w, h, |r, col| chan[r * w + col] >= tau));
        }
    }
    Ok(out)
}

/// Level sets as a `{0,1}`-valued tensor `(C*N, H, W)` ready to feed a network.
pub fn level_set_tensor(image: &Tensor, cfg: &LevelSetConfig) -> Result<Tensor, LayerError> {
    let channels = level_set_decompose(image, cfg)?;
    let (h, w) = (channels[0].height(), channels[0].width());
    let mut data = Vec::with_capacity(channels.len() * h * w);
    for img in &channels {
        data.extend(img.to_bools().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok(Tensor::new(vec![channels.len(), h, w], data))
}

/// Converts binary images to a batched `(B, H, W)` tensor of 0/1 values.
pub fn bit_images_to_batch(images: &[&BitImage]) -> Tensor {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert!(img.height() == h && img.width() == w);
        data.extend(img.to_bools().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Tensor::new(vec![images.len(), h, w], data)
}
