use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::{Error, Result};

/// Nonlinearity applied after every layer except the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(x)`; smooth everywhere, so finite differences stay clean.
    Silu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + libm::exp(-z)),
            Activation::Tanh => libm::tanh(z),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + libm::exp(-z));
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = libm::tanh(z);
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Silu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected network with all parameters in one flat buffer.
///
/// Layer `l` maps `dims[l]` to `dims[l + 1]`. Its parameters are stored as the
/// weight matrix (row-major, `dims[l + 1]` rows of `dims[l]`) followed by the
/// bias vector, and layers follow each other in order. Gradients and optimizer
/// moments use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    hidden: Activation,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    /// Pre-activation values of each layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }
}

pub(crate) fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 {
            return Err(Error::Config("a network needs at least two layer dims".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Config("layer dims must be positive".into()));
        }
        Ok(())
    }

    pub fn zeros(dims: &[usize], hidden: Activation) -> Result<Self> {
        Self::check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            params: vec![0.0; param_count(dims)],
        })
    }

    /// Uniform fan-in initialization: weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn seeded<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = 1.0 / libm::sqrt(fan_in as f64);
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], hidden: Activation, params: Vec<f64>) -> Result<Self> {
        Self::check_dims(dims)?;
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(Error::Shape {
                what: "network parameters",
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            hidden,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access for optimizers. Frozen wrappers never expose it.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut offset = 0;
        for l in 0..self.num_layers() {
            let (z, next) = self.affine(l, offset, &x);
            offset = next;
            x = if l + 1 < self.num_layers() {
                z.into_iter().map(|v| self.hidden.apply(v)).collect()
            } else {
                z
            };
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.dims.len());
        let mut pre = Vec::with_capacity(self.num_layers());
        activations.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.num_layers() {
            let (z, next) = self.affine(l, offset, &activations[l]);
            offset = next;
            let a = if l + 1 < self.num_layers() {
                z.iter().map(|&v| self.hidden.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            activations.push(a);
        }
        Ok(Trace { activations, pre })
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                what: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// `W x + b` for layer `l` whose parameters start at `offset`; returns the
    /// result and the offset of the next layer.
    fn affine(&self, l: usize, offset: usize, x: &[f64]) -> (Vec<f64>, usize) {
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let weights = &self.params[offset..offset + n_in * n_out];
        let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let z = weights
            .chunks_exact(n_in)
            .zip(bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        (z, offset + n_in * n_out + n_out)
    }

    /// Gradients of a scalar loss with respect to all parameters, given the
    /// loss gradient at the output. Recomputes the forward pass.
    pub fn backward(&self, input: &[f64], loss_grad: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        let mut grads = vec![0.0; self.params.len()];
        self.backward_trace(&trace, loss_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward_trace(&self, trace: &Trace, loss_grad: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        if loss_grad.len() != self.output_dim() {
            return Err(Error::Shape {
                what: "loss gradient",
                expected: self.output_dim(),
                got: loss_grad.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape {
                what: "gradient buffer",
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut offset = 0;
        for w in self.dims.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }

        let mut delta = loss_grad.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let start = offsets[l];
            let x = &trace.activations[l];
            {
                let (gw, gb) = grads[start..start + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for (o, &d) in delta.iter().enumerate() {
                    gb[o] += d;
                    if d != 0.0 {
                        for (g, &v) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                            *g += d * v;
                        }
                    }
                }
            }
            let weights = &self.params[start..start + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (row, &d) in weights.chunks_exact(n_in).zip(&delta) {
                for (p, &w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            if l > 0 {
                for (p, &z) in prev.iter_mut().zip(&trace.pre[l - 1]) {
                    *p *= self.hidden.derivative(z);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}
