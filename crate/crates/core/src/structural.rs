//! Structural vulnerability analysis.
//!
//! Counting arguments decide whether a conv + pool block can map many inputs
//! to one output, decoupled objectives describe the set of inputs a max-pool
//! or ReLU cannot tell apart, and the amplification model bounds how much a
//! stack of convolutions can magnify gaussian input noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::network::{LayerSpec, Network, NetworkError, NetworkSpec};
use crate::par;
use crate::tensor::ops::{self, Padding};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum StructuralError {
    #[error("invalid block geometry: {0}")]
    Geometry(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

type Result<T> = std::result::Result<T, StructuralError>;

/// Shape of one convolution followed by a pooling layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockGeometry {
    /// Input channels.
    pub c: usize,
    /// Input width and height.
    pub a: usize,
    /// Number of conv kernels.
    pub k: usize,
    /// Conv kernel size.
    pub m: usize,
    /// Pooling kernel size and stride.
    pub n: usize,
    pub padding: Padding,
}

impl BlockGeometry {
    pub fn new(c: usize, a: usize, k: usize, m: usize, n: usize, padding: Padding) -> Result<Self> {
        if [c, a, k, m, n].contains(&0) {
            return Err(StructuralError::Geometry(
                "all dimensions must be positive".into(),
            ));
        }
        if m > a {
            return Err(StructuralError::Geometry(format!(
                "kernel size {m} exceeds input size {a}"
            )));
        }
        let g = Self {
            c,
            a,
            k,
            m,
            n,
            padding,
        };
        let out = g.conv_output_size();
        if !out.is_multiple_of(n) {
            return Err(StructuralError::Geometry(format!(
                "conv output size {out} is not divisible by pool size {n}"
            )));
        }
        Ok(g)
    }

    pub fn conv_output_size(&self) -> usize {
        self.padding.output_size(self.a, self.m)
    }

    /// `a² / (a − m + 1)²` for valid padding, 1 for same padding.
    fn padding_factor(&self) -> f64 {
        let out = self.conv_output_size() as f64;
        let a = self.a as f64;
        (a * a) / (out * out)
    }
}

/// `k < c·n²` (same padding) or `k < c·n²·a²/(a−m+1)²` (valid padding).
///
/// Returns the verdict and `k / bound`; the block is underconstrained exactly
/// when the ratio is below one.
pub fn pooling_underconstrained(g: &BlockGeometry) -> (bool, f64) {
    let bound = (g.c * g.n * g.n) as f64 * g.padding_factor();
    let ratio = g.k as f64 / bound;
    (ratio < 1.0, ratio)
}

/// `k < c` (same padding) or `k < c·a²/(a−m+1)²` (valid padding).
pub fn conv_underconstrained(g: &BlockGeometry) -> (bool, f64) {
    let bound = g.c as f64 * g.padding_factor();
    let ratio = g.k as f64 / bound;
    (ratio < 1.0, ratio)
}

/// Selector masks for max-pool decoupling, tied to the reference's per-patch
/// argmax (first maximum in row-major order).
///
/// `t2[i]` is true at the reference argmax of every patch; `t1` is its
/// complement.
pub fn pool_selectors(x_bar: &Tensor, n: usize) -> Result<(Vec<bool>, Vec<bool>)> {
    let (_, argmax) = ops::maxpool2d(x_bar, n)?;
    let mut t2 = vec![false; x_bar.len()];
    for i in argmax {
        t2[i] = true;
    }
    let t1 = t2.iter().map(|s| !s).collect();
    Ok((t1, t2))
}

/// `J_P = Σ max(x₁ − x₂, 0) + Σ |x₂ − x̄₂|` over all `n×n` patches.
///
/// `x₂` is `x` at the reference's argmax position, `x₁` the remaining patch
/// elements. Zero exactly when every patch of `x` keeps the reference
/// maximum at the same position and no other element exceeds it.
pub fn decoupled_pool_objective(x: &Tensor, x_bar: &Tensor, n: usize) -> Result<f64> {
    x.check_same_shape("decoupled_pool_objective", x_bar)?;
    let (_, argmax) = ops::maxpool2d(x_bar, n)?;
    let (c, h, w) = x.chw("decoupled_pool_objective")?;
    let (ph, pw) = (h / n, w / n);
    let xd = x.data();
    let xb = x_bar.data();
    let mut total = 0.0;
    for ch in 0..c {
        for pi in 0..ph {
            for pj in 0..pw {
                let keep = argmax[(ch * ph + pi) * pw + pj];
                let x2 = xd[keep];
                total += (x2 - xb[keep]).abs();
                for di in 0..n {
                    for dj in 0..n {
                        let idx = (ch * h + pi * n + di) * w + pj * n + dj;
                        if idx != keep {
                            total += (xd[idx] - x2).max(0.0);
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

/// `J_A = Σ max(x₋, 0) + Σ |x₊ − x̄₊|` where `x₊` and `x₋` are the
/// coordinates on which `x̄` is positive and non-positive.
pub fn decoupled_relu_objective(x: &Tensor, x_bar: &Tensor) -> Result<f64> {
    x.check_same_shape("decoupled_relu_objective", x_bar)?;
    Ok(x.data()
        .iter()
        .zip(x_bar.data())
        .map(|(&v, &r)| if r > 0.0 { (v - r).abs() } else { v.max(0.0) })
        .sum())
}

/// Per-layer term of the amplification bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAmplification {
    pub m: usize,
    /// Largest absolute kernel weight.
    pub k_max: f64,
    /// `m²·K`.
    pub factor: f64,
    /// `K > 1/m²`: the layer magnifies perturbations.
    pub amplifies: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmplificationBound {
    /// `Π m_i²·K_i`.
    pub factor: f64,
    pub layers: Vec<LayerAmplification>,
}

/// `Π m_i²·K_i` over a stack of conv kernel tensors (`[k, c, m, m]` each).
///
/// Used as an upper bound on the std multiplier of gaussian input noise
/// through single-channel stacks; the exact multiplier of one layer is the
/// kernel's L2 norm, which never exceeds `m·K`.
pub fn amplification_bound(kernels: &[&Tensor]) -> Result<AmplificationBound> {
    if kernels.is_empty() {
        return Err(StructuralError::Argument(
            "need at least one conv layer".into(),
        ));
    }
    let mut layers = Vec::with_capacity(kernels.len());
    for k in kernels {
        let shape = k.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(StructuralError::Argument(format!(
                "conv kernels must have shape [k, c, m, m], got {shape:?}"
            )));
        }
        let m = shape[2];
        let k_max = k.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let m2 = (m * m) as f64;
        layers.push(LayerAmplification {
            m,
            k_max,
            factor: m2 * k_max,
            amplifies: k_max > 1.0 / m2,
        });
    }
    Ok(AmplificationBound {
        factor: layers.iter().map(|l| l.factor).product(),
        layers,
    })
}

/// Kernel tensors of the conv layers at or before `upto`.
pub fn conv_prefix_kernels(net: &Network, upto: usize) -> Vec<&Tensor> {
    net.spec()
        .layers()
        .iter()
        .enumerate()
        .take(upto + 1)
        .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
        .filter_map(|(i, _)| net.layer_params(i).map(|p| &p.weights))
        .collect()
}

/// Empirical std multiplier of the conv layers at or before `upto`.
///
/// Each trial draws `ε ~ N(0, σ)` per input element and pushes `x` and
/// `x + ε` through the convolutions alone (activations and pooling skipped).
/// Convolutions are affine, so the output delta is the bias-free stack
/// applied to `ε`. The result is the std of all output deltas over all
/// trials divided by `σ`. Trials are seeded individually and can run in
/// parallel without changing the result.
pub fn measure_amplification(
    net: &Network,
    upto: usize,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(StructuralError::Argument(format!(
            "sigma {sigma} must be positive"
        )));
    }
    if trials < 100 {
        return Err(StructuralError::Argument(format!(
            "need at least 100 trials, got {trials}"
        )));
    }
    if upto >= net.spec().layers().len() {
        return Err(StructuralError::Argument(format!(
            "layer {upto} is out of range"
        )));
    }
    let mut convs = Vec::new();
    for (i, layer) in net.spec().layers().iter().enumerate().take(upto + 1) {
        match layer {
            LayerSpec::Conv { padding, .. } => {
                let p = net.layer_params(i).expect("conv layers carry parameters");
                let zero_bias = Tensor::zeros(p.bias.shape());
                convs.push((&p.weights, zero_bias, *padding));
            }
            LayerSpec::Flatten | LayerSpec::Fc { .. } => break,
            _ => {}
        }
    }
    if convs.is_empty() {
        return Err(StructuralError::Argument(format!(
            "no conv layer at or before layer {upto}"
        )));
    }
    let shape = net.spec().input_shape();
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    let sums = par::map_range(trials, |trial| -> Result<(f64, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let noise = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(&mut rng))
            .collect();
        let mut delta = Tensor::new(shape.to_vec(), noise)?;
        for (w, b, padding) in &convs {
            delta = ops::conv2d(&delta, w, b, *padding)?;
        }
        Ok((delta.data().iter().map(|v| v * v).sum(), delta.len()))
    });
    let mut total = 0.0;
    let mut count = 0;
    for s in sums {
        let (sq, n) = s?;
        total += sq;
        count += n;
    }
    Ok((total / count as f64).sqrt() / sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub conv_layer: usize,
    pub pool_layer: usize,
    pub geometry: BlockGeometry,
    pub pooling_underconstrained: bool,
    pub conv_underconstrained: bool,
    /// `k / bound` of the pooling condition.
    pub constraint_ratio: f64,
    pub conv_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvLayerReport {
    pub layer: usize,
    pub m: usize,
    pub k_max: Option<f64>,
    pub amplifies: Option<bool>,
}

/// Underconstraint verdicts for every conv + pool block and, when weights
/// are available, the cumulative amplification factor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralReport {
    pub blocks: Vec<BlockReport>,
    pub conv_layers: Vec<ConvLayerReport>,
    pub amplification_factor: Option<f64>,
}

impl StructuralReport {
    /// A block is the last convolution before each max or mean pool.
    pub fn analyze(spec: &NetworkSpec, weights: Option<&Network>) -> Result<Self> {
        if let Some(net) = weights {
            if net.spec() != spec {
                return Err(StructuralError::Argument(
                    "weights belong to a different architecture".into(),
                ));
            }
        }
        let mut blocks = Vec::new();
        let mut conv_layers = Vec::new();
        let mut last_conv = None;
        for (i, layer) in spec.layers().iter().enumerate() {
            match *layer {
                LayerSpec::Conv { size, .. } => {
                    last_conv = Some(i);
                    let k_max = weights.and_then(|n| n.layer_params(i)).map(|p| {
                        p.weights
                            .data()
                            .iter()
                            .fold(0.0f64, |acc, v| acc.max(v.abs()))
                    });
                    conv_layers.push(ConvLayerReport {
                        layer: i,
                        m: size,
                        k_max,
                        amplifies: k_max.map(|k| k > 1.0 / (size * size) as f64),
                    });
                }
                LayerSpec::MaxPool { size: n } | LayerSpec::MeanPool { size: n } => {
                    let Some(ci) = last_conv.take() else { continue };
                    let LayerSpec::Conv {
                        size: m,
                        kernels,
                        padding,
                    } = spec.layers()[ci]
                    else {
                        unreachable!("last_conv always points at a conv layer")
                    };
                    let input = spec.layer_input_shape(ci);
                    if input[1] != input[2] {
                        return Err(StructuralError::Geometry(format!(
                            "layer {ci} input is not square: {input:?}"
                        )));
                    }
                    let geometry = BlockGeometry::new(input[0], input[1], kernels, m, n, padding)?;
                    let (pooling, constraint_ratio) = pooling_underconstrained(&geometry);
                    let (conv, conv_ratio) = conv_underconstrained(&geometry);
                    blocks.push(BlockReport {
                        conv_layer: ci,
                        pool_layer: i,
                        geometry,
                        pooling_underconstrained: pooling,
                        conv_underconstrained: conv,
                        constraint_ratio,
                        conv_ratio,
                    });
                }
                _ => {}
            }
        }
        let amplification_factor = match weights {
            Some(_) if !conv_layers.is_empty() => Some(
                conv_layers
                    .iter()
                    .map(|l| (l.m * l.m) as f64 * l.k_max.unwrap_or(0.0))
                    .product(),
            ),
            _ => None,
        };
        Ok(Self {
            blocks,
            conv_layers,
            amplification_factor,
        })
    }

    /// Plain-text table, one row per block.
    pub fn render_table(&self) -> String {
        let mut out = String::from(
            "block  conv  pool   c    a    k  m  n  padding  ratio    pool-uc  conv-uc\n",
        );
        for (b, r) in self.blocks.iter().enumerate() {
            let g = &r.geometry;
            let padding = match g.padding {
                Padding::Same => "same",
                Padding::Valid => "valid",
            };
            out.push_str(&format!(
                "{:<5}  {:<4}  {:<4}  {:>3}  {:>3}  {:>3}  {}  {}  {:<7}  {:<7.4}  {:<7}  {}\n",
                b + 1,
                r.conv_layer,
                r.pool_layer,
                g.c,
                g.a,
                g.k,
                g.m,
                g.n,
                padding,
                r.constraint_ratio,
                if r.pooling_underconstrained {
                    "yes"
                } else {
                    "no"
                },
                if r.conv_underconstrained { "yes" } else { "no" },
            ));
        }
        match self.amplification_factor {
            Some(f) => out.push_str(&format!("amplification factor: {f:.6}\n")),
            None => out.push_str("amplification factor: n/a (no weights)\n"),
        }
        out
    }
}
