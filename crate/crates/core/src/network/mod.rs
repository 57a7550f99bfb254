//! Network materialisation and forward execution.

mod spec;
mod weights;

pub use spec::{LayerSpec, NetworkSpec, SpecError, TapKind, TapPoint};
pub use weights::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_MAGIC};

pub use crate::tensor::Padding;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{ops, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid tap: {0}")]
    InvalidTap(String),
    #[error("input shape {found:?} does not match network input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Parameters of a conv or fc layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[k, c, m, m]` for conv, `[u, d]` for fc.
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Graph handles produced by [`Network::record`].
#[derive(Debug, Clone)]
pub struct Recorded {
    /// Output of each recorded layer, in order.
    pub outputs: Vec<Var>,
    /// `(layer index, weights, bias)` for every recorded weighted layer.
    pub params: Vec<(usize, Var, Var)>,
}

impl Recorded {
    pub fn last(&self) -> Var {
        *self.outputs.last().expect("at least one layer recorded")
    }
}

/// A spec plus materialised weights.
///
/// Immutable during inference and attacks; training mutates its own copy
/// through [`Network::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Option<LayerParams>>,
    seed: u64,
    trained: bool,
}

impl Network {
    /// Draws conv/fc weights from `U(-√(3/fan_in), √(3/fan_in))` (zero mean,
    /// standard deviation `1/√fan_in`); biases start at zero.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layers()
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let (wshape, units, fan_in) = match *layer {
                    LayerSpec::Conv { size, kernels, .. } => {
                        let c = spec.layer_input_shape(i)[0];
                        (vec![kernels, c, size, size], kernels, c * size * size)
                    }
                    LayerSpec::Fc { units } => {
                        let d = spec.layer_input_shape(i)[0];
                        (vec![units, d], units, d)
                    }
                    _ => return None,
                };
                let bound = (3.0 / fan_in as f64).sqrt();
                let n: usize = wshape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Some(LayerParams {
                    weights: Tensor::new(wshape, data).expect("shape matches data"),
                    bias: Tensor::zeros(&[units]),
                })
            })
            .collect();
        Self {
            spec: spec.clone(),
            params,
            seed,
            trained: false,
        }
    }

    /// Builds a network from explicit parameters, one slot per layer.
    pub fn from_params(
        spec: &NetworkSpec,
        params: Vec<Option<LayerParams>>,
        seed: u64,
    ) -> Result<Self> {
        if params.len() != spec.layers().len() {
            return Err(NetworkError::Format(format!(
                "expected {} parameter slots, got {}",
                spec.layers().len(),
                params.len()
            )));
        }
        for (i, (layer, p)) in spec.layers().iter().zip(&params).enumerate() {
            let expected = expected_param_shapes(spec, i);
            match (expected, p) {
                (None, None) => {}
                (Some((w, b)), Some(p)) if p.weights.shape() == w && p.bias.shape() == b => {}
                _ => {
                    return Err(NetworkError::Format(format!(
                        "parameters for layer {i} ({}) do not match the spec",
                        layer.name()
                    )))
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            params,
            seed,
            trained: false,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    /// Parameters of layer `i`, if it is weighted.
    pub fn layer_params(&self, i: usize) -> Option<&LayerParams> {
        self.params.get(i).and_then(|p| p.as_ref())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.spec.input_shape();
        if x.shape() != expected {
            return Err(NetworkError::InputShape {
                expected: expected.to_vec(),
                found: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn apply(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let out = match self.spec.layers()[i] {
            LayerSpec::Conv { padding, .. } => {
                let p = self.params[i].as_ref().expect("conv layer has parameters");
                ops::conv2d(x, &p.weights, &p.bias, padding)?
            }
            LayerSpec::Relu => ops::relu(x),
            LayerSpec::MaxPool { size } => ops::maxpool2d(x, size)?.0,
            LayerSpec::MeanPool { size } => ops::meanpool2d(x, size)?,
            LayerSpec::Flatten => x.clone().flatten(),
            LayerSpec::Fc { .. } => {
                let p = self.params[i].as_ref().expect("fc layer has parameters");
                ops::dense(x, &p.weights, &p.bias)?
            }
        };
        Ok(out)
    }

    /// Applies layers `from..to` to an activation that is the input of layer
    /// `from`.
    pub fn forward_range(&self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let expected = self.spec.layer_input_shape(from);
        if x.shape() != expected.as_slice() {
            return Err(NetworkError::InputShape {
                expected,
                found: x.shape().to_vec(),
            });
        }
        let mut cur = x.clone();
        for i in from..to {
            cur = self.apply(i, &cur)?;
        }
        Ok(cur)
    }

    /// Logits computed from the output of layer `layer_index` onward.
    pub fn forward_from(&self, layer_index: usize, activation: &Tensor) -> Result<Tensor> {
        self.forward_range(activation, layer_index + 1, self.spec.layers().len())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.forward_range(x, 0, self.spec.layers().len())
    }

    /// Outputs of every layer, in order.
    pub fn activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut out: Vec<Tensor> = Vec::with_capacity(self.spec.layers().len());
        for i in 0..self.spec.layers().len() {
            let next = self.apply(i, out.last().unwrap_or(x))?;
            out.push(next);
        }
        Ok(out)
    }

    /// One pass returning the logits and, when `tap` is given, the output of
    /// the tap layer (the encoder output, tap layer included).
    pub fn forward_with_tap(
        &self,
        x: &Tensor,
        tap: Option<TapPoint>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        self.check_input(x)?;
        let Some(tap) = tap else {
            return Ok((self.logits(x)?, None));
        };
        self.validate_tap(tap)?;
        let encoded = self.forward_range(x, 0, tap.layer_index + 1)?;
        let logits = self.forward_from(tap.layer_index, &encoded)?;
        Ok((logits, Some(encoded)))
    }

    /// Encoder output at `tap`.
    pub fn encode(&self, x: &Tensor, tap: TapPoint) -> Result<Tensor> {
        self.check_input(x)?;
        self.validate_tap(tap)?;
        self.forward_range(x, 0, tap.layer_index + 1)
    }

    /// Predicted class and its softmax probability.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, f64)> {
        Ok(prediction(&self.logits(x)?))
    }

    pub fn validate_tap(&self, tap: TapPoint) -> Result<()> {
        self.spec
            .validate_tap(tap)
            .map_err(NetworkError::InvalidTap)
    }

    /// Records layers `0..=upto` on `graph`, starting from `x`.
    ///
    /// With `trainable` set, weights and biases become gradient-carrying
    /// leaves; otherwise they are borrowed constants.
    pub fn record<'a>(
        &'a self,
        graph: &mut Graph<'a>,
        x: Var,
        upto: usize,
        trainable: bool,
    ) -> Result<Recorded> {
        if upto >= self.spec.layers().len() {
            return Err(NetworkError::InvalidTap(format!(
                "layer {upto} out of range"
            )));
        }
        let mut cur = x;
        let mut outputs = Vec::with_capacity(upto + 1);
        let mut params = Vec::new();
        for i in 0..=upto {
            cur = match self.spec.layers()[i] {
                LayerSpec::Conv { padding, .. } => {
                    let p = self.params[i].as_ref().expect("conv layer has parameters");
                    let w = graph.leaf_ref(&p.weights, trainable);
                    let b = graph.leaf_ref(&p.bias, trainable);
                    params.push((i, w, b));
                    graph.conv2d(cur, w, b, padding)?
                }
                LayerSpec::Relu => graph.relu(cur),
                LayerSpec::MaxPool { size } => graph.maxpool2d(cur, size)?,
                LayerSpec::MeanPool { size } => graph.meanpool2d(cur, size)?,
                LayerSpec::Flatten => graph.flatten(cur),
                LayerSpec::Fc { .. } => {
                    let p = self.params[i].as_ref().expect("fc layer has parameters");
                    let w = graph.leaf_ref(&p.weights, trainable);
                    let b = graph.leaf_ref(&p.bias, trainable);
                    params.push((i, w, b));
                    graph.dense(cur, w, b)?
                }
            };
            outputs.push(cur);
        }
        Ok(Recorded { outputs, params })
    }

    /// Records the full network and returns the logits node.
    pub fn record_logits<'a>(
        &'a self,
        graph: &mut Graph<'a>,
        x: Var,
        trainable: bool,
    ) -> Result<Recorded> {
        self.record(graph, x, self.spec.layers().len() - 1, trainable)
    }

    /// Replaces the parameters of every layer after `layer_index` with a
    /// fresh draw for `seed`.
    pub fn reinitialize_after(&mut self, layer_index: usize, seed: u64) {
        let fresh = Network::init(&self.spec, seed);
        for (i, p) in fresh.params.into_iter().enumerate().skip(layer_index + 1) {
            self.params[i] = p;
        }
    }
}

/// Argmax class and its softmax probability.
pub fn prediction(logits: &Tensor) -> (usize, f64) {
    let probs = ops::softmax(logits.data());
    let class = logits.argmax();
    (class, probs[class])
}

pub(crate) fn expected_param_shapes(
    spec: &NetworkSpec,
    i: usize,
) -> Option<(Vec<usize>, Vec<usize>)> {
    match spec.layers()[i] {
        LayerSpec::Conv { size, kernels, .. } => {
            let c = spec.layer_input_shape(i)[0];
            Some((vec![kernels, c, size, size], vec![kernels]))
        }
        LayerSpec::Fc { units } => {
            let d = spec.layer_input_shape(i)[0];
            Some((vec![units, d], vec![units]))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = NetworkSpec::mnist_target();
        let a = Network::init(&spec, 7);
        let b = Network::init(&spec, 7);
        assert_eq!(a, b);
        assert_ne!(a, Network::init(&spec, 8));
        for p in a.params().iter().flatten() {
            assert!(p.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fan_in_bound_holds_over_a_million_weights() {
        // fc 392 -> 1024 alone has 401,408 weights; three draws exceed 10^6
        let spec = NetworkSpec::mnist_target();
        let mut sampled = 0usize;
        for seed in 0..3 {
            let net = Network::init(&spec, seed);
            for (i, p) in net.params().iter().enumerate() {
                let Some(p) = p else { continue };
                let fan_in: usize = p.weights.shape()[1..].iter().product();
                let bound = (3.0 / fan_in as f64).sqrt();
                assert!(
                    p.weights.data().iter().all(|w| w.abs() <= bound),
                    "layer {i}"
                );
                sampled += p.weights.len();
            }
        }
        assert!(sampled >= 1_000_000);
    }

    #[test]
    fn zero_input_gives_zero_tap_at_pool2() {
        let spec = NetworkSpec::mnist_target();
        let net = Network::init(&spec, 0);
        let x = Tensor::zeros(&[1, 28, 28]);
        let tap = spec.tap("pool2").unwrap();
        let (_, enc) = net.forward_with_tap(&x, Some(tap)).unwrap();
        let enc = enc.unwrap();
        assert_eq!(enc.shape(), &[8, 7, 7]);
        assert!(enc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tap_is_read_only_and_compositional() {
        let spec = NetworkSpec::mnist_target();
        let net = Network::init(&spec, 3);
        let x = noise(&[1, 28, 28], 11);
        let tap = spec.tap("pool2").unwrap();
        let (logits, enc) = net.forward_with_tap(&x, Some(tap)).unwrap();
        let (plain, none) = net.forward_with_tap(&x, None).unwrap();
        assert!(none.is_none());
        assert_eq!(logits, plain);

        // recompute the first six layers by hand
        let mut cur = x.clone();
        for (i, layer) in spec.layers().iter().take(6).enumerate() {
            cur = match *layer {
                LayerSpec::Conv { padding, .. } => {
                    let p = net.layer_params(i).unwrap();
                    ops::conv2d(&cur, &p.weights, &p.bias, padding).unwrap()
                }
                LayerSpec::Relu => ops::relu(&cur),
                LayerSpec::MaxPool { size } => ops::maxpool2d(&cur, size).unwrap().0,
                _ => unreachable!(),
            };
        }
        assert_eq!(enc.unwrap(), cur);
    }

    #[test]
    fn invalid_tap_rejected() {
        let spec = NetworkSpec::mnist_target();
        let net = Network::init(&spec, 0);
        let x = Tensor::zeros(&[1, 28, 28]);
        let bad = TapPoint {
            layer_index: 2,
            kind: TapKind::Conv,
        };
        assert!(matches!(
            net.forward_with_tap(&x, Some(bad)),
            Err(NetworkError::InvalidTap(_))
        ));
        assert!(matches!(
            net.logits(&Tensor::zeros(&[1, 27, 28])),
            Err(NetworkError::InputShape { .. })
        ));
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let spec = NetworkSpec::mnist_target();
        let net = Network::init(&spec, 5);
        let x = noise(&[1, 28, 28], 2);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let rec = net.record_logits(&mut g, xv, false).unwrap();
        assert_eq!(g.value(rec.last()), &net.logits(&x).unwrap());
    }

    #[test]
    fn reinitialize_after_keeps_prefix() {
        let spec = NetworkSpec::mnist_target();
        let mut net = Network::init(&spec, 5);
        let before = net.clone();
        net.reinitialize_after(5, 99);
        assert_eq!(net.params()[..6], before.params()[..6]);
        assert_ne!(net.params()[7], before.params()[7]);
    }
}
