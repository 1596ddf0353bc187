//! Minimal dense feed-forward Q-network with analytic backpropagation, MSE
//! loss and an RMSprop optimizer. No external ML framework; everything the
//! training loop needs is explicit here.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PHASE_COUNT: usize = 8;
pub const HIDDEN_WIDTH: usize = 20;

pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_EPSILON: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("non-finite input to the network")]
    NonFiniteInput,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `out x in` weight matrix.
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Feed-forward network with rectified-linear hidden layers and a linear
/// output layer of one Q-value per phase.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    layers: Vec<Layer>,
    sizes: Vec<usize>,
}

/// Per-layer parameter gradients, mirroring [`QNetwork`] shapes.
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Gradients {
    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.w.mapv_inplace(|g| g * factor);
            layer.b.mapv_inplace(|g| g * factor);
        }
    }
}

impl QNetwork {
    /// Standard Q-network: `input -> 20 -> 20 -> 8`.
    pub fn q_network(input: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_layers(&[input, HIDDEN_WIDTH, HIDDEN_WIDTH, PHASE_COUNT], rng)
    }

    /// Arbitrary layer sizes; weights drawn uniformly from
    /// `±sqrt(6/(fan_in+fan_out))`, biases zero.
    pub fn with_layers(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-limit..limit)
            });
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Self {
            layers,
            sizes: sizes.to_vec(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Deterministic forward pass: affine + ReLU on hidden layers, linear
    /// output.
    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>, NeuralError> {
        Ok(self.forward_trace(x)?.pop().unwrap())
    }

    /// Activations after every layer (ReLU already applied on hidden ones);
    /// the last entry is the network output.
    fn forward_trace(&self, x: &Array1<f64>) -> Result<Vec<Array1<f64>>, NeuralError> {
        if x.len() != self.input_size() {
            return Err(NeuralError::ShapeMismatch {
                expected: self.input_size(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NeuralError::NonFiniteInput);
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.w.dot(&a) + &layer.b;
            if i != last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z.clone());
            a = z;
        }
        Ok(acts)
    }

    /// Exact reverse-mode gradients for all parameters plus the gradient
    /// with respect to the input (which feeds the diffusion backward pass).
    pub fn backward(
        &self,
        x: &Array1<f64>,
        grad_out: &Array1<f64>,
    ) -> Result<(Gradients, Array1<f64>), NeuralError> {
        if grad_out.len() != self.output_size() {
            return Err(NeuralError::ShapeMismatch {
                expected: self.output_size(),
                got: grad_out.len(),
            });
        }
        let acts = self.forward_trace(x)?;
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer {
                w: Array2::zeros(l.w.dim()),
                b: Array1::zeros(l.b.len()),
            })
            .collect();

        let mut delta = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input: &Array1<f64> = if i == 0 { x } else { &acts[i - 1] };
            for (r, d) in delta.iter().enumerate() {
                for (c, v) in input.iter().enumerate() {
                    grads[i].w[(r, c)] = d * v;
                }
            }
            grads[i].b.assign(&delta);
            let mut upstream = self.layers[i].w.t().dot(&delta);
            if i > 0 {
                // ReLU gate of the layer below; acts[i-1] is post-activation.
                for (u, a) in upstream.iter_mut().zip(acts[i - 1].iter()) {
                    if *a <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            delta = upstream;
        }
        Ok((Gradients { layers: grads }, delta))
    }

    /// Applies an RMSprop update to every parameter, walking layers in
    /// order so `opt` accumulators stay aligned.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients,
        opt: &mut RmspropState,
    ) -> Result<(), NeuralError> {
        let mut offset = 0;
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            let w = layer.w.as_slice_mut().expect("contiguous weights");
            let gw = grad.w.as_slice().expect("contiguous gradients");
            opt.update_segment(offset, w, gw)?;
            offset += gw.len();
            let b = layer.b.as_slice_mut().expect("contiguous biases");
            let gb = grad.b.as_slice().expect("contiguous gradients");
            opt.update_segment(offset, b, gb)?;
            offset += gb.len();
        }
        Ok(())
    }

    /// Applies a flat gradient vector (in `flat_params` order) through the
    /// optimizer; used to average minibatch gradients before stepping.
    pub fn apply_flat_gradients(
        &mut self,
        flat: &[f64],
        opt: &mut RmspropState,
    ) -> Result<(), NeuralError> {
        if flat.len() != self.param_count() {
            return Err(NeuralError::ShapeMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.w.as_slice_mut().expect("contiguous weights");
            opt.update_segment(offset, w, &flat[offset..offset + w.len()])?;
            offset += w.len();
            let b = layer.b.as_slice_mut().expect("contiguous biases");
            opt.update_segment(offset, b, &flat[offset..offset + b.len()])?;
            offset += b.len();
        }
        Ok(())
    }

    /// Flat parameter view in the same order `apply_gradients` walks.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), NeuralError> {
        if params.len() != self.param_count() {
            return Err(NeuralError::ShapeMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for layer in &mut self.layers {
            for w in layer.w.iter_mut() {
                *w = *it.next().unwrap();
            }
            for b in layer.b.iter_mut() {
                *b = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Flat gradient view matching [`QNetwork::flat_params`] ordering.
    pub fn flatten(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &grads.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }
}

/// Squared-error loss on a single Q-value with its gradient.
pub fn mse_loss(pred: f64, target: f64) -> (f64, f64) {
    let diff = pred - target;
    (diff * diff, 2.0 * diff)
}

/// Per-parameter squared-gradient accumulator for RMSprop.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    acc: Vec<f64>,
    pub rho: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl RmspropState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            acc: vec![0.0; param_count],
            rho: RMSPROP_DECAY,
            epsilon: RMSPROP_EPSILON,
            learning_rate,
        }
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.acc
    }

    pub fn accumulators_mut(&mut self) -> &mut [f64] {
        &mut self.acc
    }

    fn update_segment(
        &mut self,
        offset: usize,
        params: &mut [f64],
        grads: &[f64],
    ) -> Result<(), NeuralError> {
        if params.len() != grads.len() || offset + grads.len() > self.acc.len() {
            return Err(NeuralError::ShapeMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let a = &mut self.acc[offset + i];
            *a = self.rho * *a + (1.0 - self.rho) * g * g;
            *p -= self.learning_rate * g / (a.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// One RMSprop update over a flat parameter vector:
/// `acc <- rho*acc + (1-rho)*g^2`, `p <- p - lr*g/(sqrt(acc)+eps)`.
pub fn rmsprop_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut RmspropState,
) -> Result<(), NeuralError> {
    if state.acc.len() != params.len() {
        return Err(NeuralError::ShapeMismatch {
            expected: state.acc.len(),
            got: params.len(),
        });
    }
    state.update_segment(0, params, grads)
}
