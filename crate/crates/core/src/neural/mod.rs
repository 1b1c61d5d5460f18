//! Small dense networks with hand-written reverse mode and Adam.
//!
//! Parameters of a model live in one flat `f64` vector (per layer: the `in×out`
//! weight matrix row-major, then the bias), so gradients, optimizer moments and
//! the binary format all share a single layout.

mod adam;
mod codec;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use codec::{deserialize, serialize, ByteReader, ByteWriter, FORMAT_VERSION};

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LeakyRelu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_RELU_SLOPE * z
                }
            }
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Linear => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::LeakyRelu => 1,
            Activation::Linear => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::LeakyRelu),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Optional bounded squash on the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    None,
    Tanh,
}

/// A feed-forward network `x → act(x W₁ + b₁) → … → squash(act(x W_L + b_L))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    squash: Squash,
    params: Vec<f64>,
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer inputs: the network input followed by every hidden activation.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Array2<f64>>,
    /// Output of the last layer before squashing.
    pub raw: Array2<f64>,
    /// Final (possibly squashed) output.
    pub output: Array2<f64>,
}

impl MlpModel {
    /// Builds a network with the given layer widths. `activations[l]` applies after
    /// layer `l`; weights are drawn uniformly from `±√(1/fan_in)`, biases start at zero.
    pub fn new(sizes: &[usize], activations: &[Activation], squash: Squash, seed: u64) -> Result<Self, NeuralError> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 || sizes.contains(&0) {
            return Err(NeuralError::Architecture(format!(
                "{} sizes with {} activations",
                sizes.len(),
                activations.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = (1.0 / w[0] as f64).sqrt();
            params.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..=bound)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self { sizes: sizes.to_vec(), activations: activations.to_vec(), squash, params })
    }

    pub(crate) fn from_parts(
        sizes: Vec<usize>,
        activations: Vec<Activation>,
        squash: Squash,
        params: Vec<f64>,
    ) -> Result<Self, NeuralError> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 || sizes.contains(&0) {
            return Err(NeuralError::Architecture("inconsistent layer table".into()));
        }
        let expected = param_count(&sizes);
        if params.len() != expected {
            return Err(NeuralError::ShapeMismatch { expected, got: params.len() });
        }
        Ok(Self { sizes, activations, squash, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn squash(&self) -> Squash {
        self.squash
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// Weight matrix (`in×out`) and bias of `layer`.
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.layer_offset(layer);
        let w = ArrayView2::from_shape((n_in, n_out), &self.params[off..off + n_in * n_out]).expect("layout");
        (w, &self.params[off + n_in * n_out..off + n_in * n_out + n_out])
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<(), NeuralError> {
        if input.ncols() != self.input_dim() {
            return Err(NeuralError::ShapeMismatch { expected: self.input_dim(), got: input.ncols() });
        }
        Ok(())
    }

    /// Runs a batch (one sample per row) through the network.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        let mut x = self.forward_raw(input)?;
        if self.squash == Squash::Tanh {
            x.mapv_inplace(f64::tanh);
        }
        Ok(x)
    }

    /// Forward pass without the output squash.
    pub fn forward_raw(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        self.check_input(&input)?;
        let mut x = input.to_owned();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut z = Array2::zeros((x.nrows(), w.ncols()));
            general_mat_mul(1.0, &x, &w, 0.0, &mut z);
            let act = self.activations[l];
            for mut row in z.rows_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v = act.apply(*v + bj);
                }
            }
            x = z;
        }
        Ok(x)
    }

    /// Forward pass that keeps everything the backward pass needs.
    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache, NeuralError> {
        self.check_input(&input)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut x = input.to_owned();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let mut z = Array2::zeros((x.nrows(), w.ncols()));
            general_mat_mul(1.0, &x, &w, 0.0, &mut z);
            for mut row in z.rows_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            let act = self.activations[l];
            let a = z.mapv(|v| act.apply(v));
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        let output = match self.squash {
            Squash::Tanh => x.mapv(f64::tanh),
            Squash::None => x.clone(),
        };
        Ok(ForwardCache { inputs, pre, raw: x, output })
    }

    /// Parameter gradient given `dL/d output` (after the squash). Batch rows are summed.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<f64>) -> Result<Vec<f64>, NeuralError> {
        self.check_output_grad(cache, &grad_output)?;
        let grad_raw = match self.squash {
            Squash::Tanh => {
                let mut g = grad_output.to_owned();
                g.zip_mut_with(&cache.output, |g, &y| *g *= 1.0 - y * y);
                g
            }
            Squash::None => grad_output.to_owned(),
        };
        Ok(self.backward_from_raw(cache, grad_raw))
    }

    /// Parameter gradient given `dL/d raw`, the output before the squash.
    pub fn backward_raw(&self, cache: &ForwardCache, grad_raw: ArrayView2<f64>) -> Result<Vec<f64>, NeuralError> {
        self.check_output_grad(cache, &grad_raw)?;
        Ok(self.backward_from_raw(cache, grad_raw.to_owned()))
    }

    fn check_output_grad(&self, cache: &ForwardCache, g: &ArrayView2<f64>) -> Result<(), NeuralError> {
        if g.ncols() != self.output_dim() {
            return Err(NeuralError::ShapeMismatch { expected: self.output_dim(), got: g.ncols() });
        }
        if g.nrows() != cache.output.nrows() {
            return Err(NeuralError::ShapeMismatch { expected: cache.output.nrows(), got: g.nrows() });
        }
        Ok(())
    }

    fn backward_from_raw(&self, cache: &ForwardCache, mut delta: Array2<f64>) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        for l in (0..self.num_layers()).rev() {
            let act = self.activations[l];
            if act != Activation::Linear {
                let a_out = if l + 1 < self.num_layers() { &cache.inputs[l + 1] } else { &cache.raw };
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[l])
                    .and(a_out)
                    .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            }
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                let mut gw = ArrayViewMut2::from_shape((n_in, n_out), gw).expect("layout");
                general_mat_mul(1.0, &cache.inputs[l].t(), &delta, 0.0, &mut gw);
                for (g, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut prev = Array2::zeros((delta.nrows(), n_in));
                general_mat_mul(1.0, &delta, &w.t(), 0.0, &mut prev);
                delta = prev;
            }
        }
        grads
    }

    /// Human-readable export of the weights.
    pub fn to_json(&self) -> serde_json::Value {
        let layers: Vec<serde_json::Value> = (0..self.num_layers())
            .map(|l| {
                let (w, b) = self.layer(l);
                serde_json::json!({
                    "inputs": self.sizes[l],
                    "outputs": self.sizes[l + 1],
                    "activation": self.activations[l],
                    "weights": w.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                    "bias": b,
                })
            })
            .collect();
        serde_json::json!({ "squash": self.squash, "layers": layers })
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}
