//! Parameter-holding layers. Parameters live outside the tape; each training
//! step binds them onto a fresh tape, runs forward/backward, then reads the
//! gradients back out through the same registry.

use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Self {
            value: Tensor::zeros(shape),
        }
    }

    pub fn filled(shape: Vec<usize>, x: f64) -> Self {
        let n = shape.iter().product();
        Self {
            value: Tensor::new(shape, vec![x; n]).expect("shape matches fill count"),
        }
    }
}

/// Standard normal via Box-Muller; the uniform draw is shifted into (0, 1].
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Param {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| sample_normal(rng) * std).collect();
    Param {
        value: Tensor::new(shape, data).expect("shape matches sample count"),
    }
}

pub fn xavier_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Param {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Param {
        value: Tensor::new(shape, data).expect("shape matches sample count"),
    }
}

/// What a state slot holds: optimizer-visible parameters or running buffers
/// that persist in checkpoints but receive no gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    Param,
    Buffer,
}

impl SlotRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotRole::Param => "param",
            SlotRole::Buffer => "buffer",
        }
    }
}

/// Anything that exposes named state tensors: layers, heads, whole models.
pub trait Stateful {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor));
}

/// Dotted name joining that tolerates an empty prefix.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Records the (name, Var) pairs of every parameter bound onto a tape so the
/// optimizer can pair gradients with their owning parameters afterwards.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    entries: Vec<(String, Var)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Self {
            tape,
            entries: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: String, p: &Param) -> Var {
        let v = self.tape.param(&p.value);
        self.entries.push((name, v));
        v
    }

    /// Bind without tracking gradients (frozen evaluation).
    pub fn bind_frozen(&mut self, p: &Param) -> Var {
        self.tape.leaf(&p.value)
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

// ---- linear ----

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    /// He-normal weights for ReLU-followed layers.
    pub fn he(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: he_normal(vec![in_dim, out_dim], in_dim, rng),
            b: Param::zeros(vec![out_dim]),
        }
    }

    pub fn xavier(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: xavier_uniform(vec![in_dim, out_dim], in_dim, out_dim, rng),
            b: Param::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn bind(&self, b: &mut Binder, name: &str, trainable: bool) -> BoundLinear {
        if trainable {
            BoundLinear {
                w: b.bind(format!("{name}.w"), &self.w),
                b: b.bind(format!("{name}.b"), &self.b),
            }
        } else {
            BoundLinear {
                w: b.bind_frozen(&self.w),
                b: b.bind_frozen(&self.b),
            }
        }
    }
}

impl Stateful for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        f(format!("{prefix}.w"), SlotRole::Param, &mut self.w.value);
        f(format!("{prefix}.b"), SlotRole::Param, &mut self.b.value);
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        tape.affine(x, self.w, self.b)
    }
}

// ---- conv ----

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            w: he_normal(vec![out_ch, in_ch, kernel, kernel], fan_in, rng),
            b: Param::zeros(vec![out_ch]),
            stride,
            pad,
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str, trainable: bool) -> BoundConv2d {
        let (w, bias) = if trainable {
            (
                b.bind(format!("{name}.w"), &self.w),
                b.bind(format!("{name}.b"), &self.b),
            )
        } else {
            (b.bind_frozen(&self.w), b.bind_frozen(&self.b))
        };
        BoundConv2d {
            w,
            b: bias,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl Stateful for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        f(format!("{prefix}.w"), SlotRole::Param, &mut self.w.value);
        f(format!("{prefix}.b"), SlotRole::Param, &mut self.b.value);
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv2d {
    pub w: Var,
    pub b: Var,
    pub stride: usize,
    pub pad: usize,
}

impl BoundConv2d {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        tape.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

// ---- batch norm ----

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::new(vec![channels], vec![1.0; channels])
                .expect("shape matches fill count"),
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

impl Stateful for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        f(
            format!("{prefix}.gamma"),
            SlotRole::Param,
            &mut self.gamma.value,
        );
        f(
            format!("{prefix}.beta"),
            SlotRole::Param,
            &mut self.beta.value,
        );
        f(
            format!("{prefix}.running_mean"),
            SlotRole::Buffer,
            &mut self.running_mean,
        );
        f(
            format!("{prefix}.running_var"),
            SlotRole::Buffer,
            &mut self.running_var,
        );
    }
}

// ---- layer norm ----

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(vec![dim], 1.0),
            beta: Param::zeros(vec![dim]),
            eps: 1e-5,
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str, trainable: bool) -> BoundLayerNorm {
        let (gamma, beta) = if trainable {
            (
                b.bind(format!("{name}.gamma"), &self.gamma),
                b.bind(format!("{name}.beta"), &self.beta),
            )
        } else {
            (b.bind_frozen(&self.gamma), b.bind_frozen(&self.beta))
        };
        BoundLayerNorm {
            gamma,
            beta,
            eps: self.eps,
        }
    }
}

impl Stateful for LayerNorm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotRole, &mut Tensor)) {
        f(
            format!("{prefix}.gamma"),
            SlotRole::Param,
            &mut self.gamma.value,
        );
        f(
            format!("{prefix}.beta"),
            SlotRole::Param,
            &mut self.beta.value,
        );
    }
}

#[derive(Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl BoundLayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, self.gamma, self.beta, self.eps)
    }
}
