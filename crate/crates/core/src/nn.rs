//! Trainable layers.
//!
//! Layers own their parameters as plain [`Tensor`]s. A forward pass binds
//! them onto a tape through a [`Binder`], which remembers every bound
//! parameter by name so the optimizer can collect gradients afterwards.

use std::cell::RefCell;

use rand::Rng;

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

type Res<T> = std::result::Result<T, TensorError>;

/// Binds named parameters onto a tape for one forward pass.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    bound: RefCell<Vec<(String, Var<'t>)>>,
}

impl<'t> Binder<'t> {
    /// `trainable = false` binds parameters as constants (inference).
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Binder {
            tape,
            trainable,
            bound: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&self, name: &str, value: &Tensor) -> Var<'t> {
        let v = if self.trainable {
            self.tape.leaf(value.clone())
        } else {
            self.tape.constant(value.clone())
        };
        self.bound.borrow_mut().push((name.to_string(), v));
        v
    }

    pub fn bound(&self) -> Vec<(String, Var<'t>)> {
        self.bound.borrow().clone()
    }

    /// Gradients of every bound parameter after a backward pass; parameters
    /// the root did not depend on get zeros.
    pub fn grads(&self) -> Vec<(String, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, v)| {
                let g = self
                    .tape
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> Real {
    (6.0 / (fan_in + fan_out) as Real).sqrt()
}

fn uniform(shape: &[usize], bound: Real, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Stride-1 convolution that preserves spatial size.
    pub fn same(kernel: usize, cin: usize, cout: usize) -> Self {
        ConvSpec {
            kernel,
            cin,
            cout,
            stride: 1,
            pad: kernel / 2,
        }
    }
}

/// Convolution with kernel `[kh, kw, Cin, Cout]` and bias `[Cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn init(spec: ConvSpec, rng: &mut impl Rng) -> Res<Self> {
        if spec.kernel % 2 == 0 || spec.stride == 0 || spec.cin == 0 || spec.cout == 0 {
            return Err(TensorError::invalid(
                "conv2d layer",
                format!("kernel must be odd with positive stride and channels, got {spec:?}"),
            ));
        }
        let k = spec.kernel;
        let bound = glorot_bound(k * k * spec.cin, k * k * spec.cout);
        Ok(Conv2dLayer {
            kernel: uniform(&[k, k, spec.cin, spec.cout], bound, rng),
            bias: Tensor::zeros(&[spec.cout]),
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    /// Square kernel with zero bias, for tests and hand-built layers.
    pub fn from_parts(kernel: Tensor, bias: Tensor, stride: usize, pad: usize) -> Res<Self> {
        let s = kernel.shape();
        if s.len() != 4 || s[0] % 2 == 0 || s[1] % 2 == 0 || bias.shape() != [s[3]] {
            return Err(TensorError::mismatch("conv2d layer", s, bias.shape()));
        }
        Ok(Conv2dLayer {
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn cin(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn cout(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel.shape()[0]) / self.stride + 1
    }

    pub fn forward<'t>(&self, binder: &Binder<'t>, name: &str, x: Var<'t>) -> Res<Var<'t>> {
        let k = binder.bind(&format!("{name}.kernel"), &self.kernel);
        let b = binder.bind(&format!("{name}.bias"), &self.bias);
        x.conv2d(k, self.stride, self.pad)?.bias_add(b)
    }

    pub fn params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.kernel"), &self.kernel));
        out.push((format!("{name}.bias"), &self.bias));
    }

    pub fn params_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{name}.kernel"), &mut self.kernel));
        out.push((format!("{name}.bias"), &mut self.bias));
    }
}

/// Fully connected layer: `y = x · W + b`, `W` is `[Din, Dout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn init(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        LinearLayer {
            weight: uniform(&[din, dout], glorot_bound(din, dout), rng),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn din(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dout(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'t>(&self, binder: &Binder<'t>, name: &str, x: Var<'t>) -> Res<Var<'t>> {
        let w = binder.bind(&format!("{name}.weight"), &self.weight);
        let b = binder.bind(&format!("{name}.bias"), &self.bias);
        x.matmul(w)?.bias_add(b)
    }

    pub fn params<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.weight"), &self.weight));
        out.push((format!("{name}.bias"), &self.bias));
    }

    pub fn params_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{name}.weight"), &mut self.weight));
        out.push((format!("{name}.bias"), &mut self.bias));
    }
}
