//! Define-by-run tape: every operation executes eagerly and records what the
//! backward pass needs. A tape lives for one forward/backward cycle and is
//! confined to a single thread.

use super::kernels;
use super::{Tensor, TensorError};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(super) usize);

#[derive(Debug)]
pub(super) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Matmul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis0(Var),
    MeanAxis0(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    LogSumExp(Var),
    L2NormLast {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        training: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Gap(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    StackRows(Vec<Var>),
    StackElems(Vec<Var>),
    Reshape(Var),
    PairwiseEuclidean {
        a: Var,
        b: Var,
        squared: bool,
    },
}

pub(super) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Running statistics a batch-norm op reads and, in training mode, updates.
pub struct BnStats<'a> {
    pub running_mean: &'a mut [f64],
    pub running_var: &'a mut [f64],
    pub momentum: f64,
}

#[derive(Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_requires(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires(*v))
    }

    /// Constant input: gradients are not tracked through it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Trainable input: participates in backward and accumulates a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![1], vec![x], Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("node shape is valid")
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    // ---- elementwise ----

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.any_requires(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let req = self.requires(a);
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a), req)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let req = self.requires(a);
        self.push(self.shape(a).to_vec(), data, Op::MulScalar(a, c), req)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let req = self.requires(a);
        self.push(self.shape(a).to_vec(), data, op, req)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    // ---- linear algebra ----

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::mm_nn(self.data(a), self.data(b), m, ka, n, &mut data);
        let req = self.any_requires(&[a, b]);
        Ok(self.push(vec![m, n], data, Op::Matmul(a, b), req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("transpose", a)?;
        let mut data = vec![0.0; m * n];
        kernels::transpose(self.data(a), m, n, &mut data);
        let req = self.requires(a);
        Ok(self.push(vec![n, m], data, Op::Transpose(a), req))
    }

    /// Broadcast a rank-1 bias over the rows of a rank-2 tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims2("add_bias", a)?;
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(self.nodes[bias.0].data.iter()) {
                *x += b;
            }
        }
        let req = self.any_requires(&[a, bias]);
        Ok(self.push(vec![n, d], data, Op::AddBias(a, bias), req))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let req = self.requires(a);
        self.push(vec![1], vec![s], Op::SumAll(a), req)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a) as f64;
        let s: f64 = self.data(a).iter().sum();
        let req = self.requires(a);
        self.push(vec![1], vec![s / n], Op::MeanAll(a), req)
    }

    pub fn sum_axis0(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, d) = self.dims2("sum_axis0", a)?;
        let mut out = vec![0.0; d];
        for row in self.data(a).chunks(d) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let req = self.requires(a);
        Ok(self.push(vec![d], out, Op::SumAxis0(a), req))
    }

    pub fn mean_axis0(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, d) = self.dims2("mean_axis0", a)?;
        let mut out = vec![0.0; d];
        for row in self.data(a).chunks(d) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let req = self.requires(a);
        Ok(self.push(vec![d], out, Op::MeanAxis0(a), req))
    }

    // ---- row-wise nonlinearities ----

    fn last_dim(&self, op: &'static str, v: Var) -> Result<usize, TensorError> {
        match self.shape(v).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(TensorError::Empty { op }),
        }
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let d = self.last_dim("softmax", a)?;
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            debug_assert!(m.is_finite(), "softmax over non-finite input");
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::SoftmaxLast(a), req))
    }

    /// log(softmax) along the last axis via the shifted log-sum-exp.
    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let d = self.last_dim("log_softmax", a)?;
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, Op::LogSoftmaxLast(a), req))
    }

    /// log Σ exp over a rank-1 tensor, stabilized by max subtraction. With a
    /// single element this returns that element exactly.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.shape(a).len() != 1 || self.numel(a) == 0 {
            return Err(TensorError::RankMismatch {
                op: "logsumexp",
                expected: 1,
                shape: self.shape(a).to_vec(),
            });
        }
        let m = self.data(a).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self
            .data(a)
            .iter()
            .map(|&x| (x - m).exp())
            .sum::<f64>()
            .ln();
        let req = self.requires(a);
        Ok(self.push(vec![1], vec![lse], Op::LogSumExp(a), req))
    }

    /// ℓ₂-normalize along the last axis; slices with norm below `eps` are
    /// scaled by `1/eps` instead.
    pub fn l2_normalize_last(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let d = self.last_dim("l2_normalize", a)?;
        let mut data = self.data(a).to_vec();
        let mut norms = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            let denom = if norm < eps { eps } else { norm };
            for x in row.iter_mut() {
                *x /= denom;
            }
        }
        let req = self.requires(a);
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            Op::L2NormLast { x: a, eps, norms },
            req,
        ))
    }

    /// Per-row layer normalization with affine parameters, rank-2 input.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (_, d) = self.dims2("layer_norm", a)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mut data = self.data(a).to_vec();
        let g = self.nodes[gamma.0].data.clone();
        let b = self.nodes[beta.0].data.clone();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - mean) * inv * g[j] + b[j];
            }
        }
        let req = self.any_requires(&[a, gamma, beta]);
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                eps,
            },
            req,
        ))
    }

    // ---- convolution stack ----

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 4,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Cross-correlation of a batch [B×C×H×W] with kernels [O×C×KH×KW] plus a
    /// per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (batch, cin, h, width) = self.dims4("conv2d", x)?;
        let (cout, wcin, kh, kw) = self.dims4("conv2d", w)?;
        if wcin != cin || self.shape(b) != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if h + 2 * pad < kh || width + 2 * pad < kw || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: vec![h, width],
                rhs: vec![kh, kw],
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (width + 2 * pad - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let positions = oh * ow;
        let mut out = vec![0.0; batch * cout * positions];
        let mut col = vec![0.0; kdim * positions];
        for bi in 0..batch {
            let img = &self.data(x)[bi * cin * h * width..(bi + 1) * cin * h * width];
            kernels::im2col(img, cin, h, width, kh, kw, stride, pad, &mut col);
            kernels::mm_nn(
                self.data(w),
                &col,
                cout,
                kdim,
                positions,
                &mut out[bi * cout * positions..(bi + 1) * cout * positions],
            );
        }
        let bias = self.nodes[b.0].data.clone();
        for chunk in out.chunks_mut(cout * positions) {
            for (c, row) in chunk.chunks_mut(positions).enumerate() {
                for v in row.iter_mut() {
                    *v += bias[c];
                }
            }
        }
        let req = self.any_requires(&[x, w, b]);
        Ok(self.push(
            vec![batch, cout, oh, ow],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            req,
        ))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (batch, c, h, w) = self.dims4("max_pool2", x)?;
        let oh = h / 2;
        let ow = w / 2;
        if oh == 0 || ow == 0 {
            return Err(TensorError::Empty { op: "max_pool2" });
        }
        let mut out = vec![0.0; batch * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let data = self.data(x);
        for bc in 0..batch * c {
            let plane = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = plane + (oy * 2 + dy) * w + ox * 2 + dx;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = bc * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![batch, c, oh, ow], out, Op::MaxPool2 { x, argmax }, req))
    }

    /// Global average pool [B×C×H×W] → [B×C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let (batch, c, h, w) = self.dims4("global_avg_pool", x)?;
        let hw = (h * w) as f64;
        let data = self.data(x);
        let mut out = vec![0.0; batch * c];
        for (o, plane) in out.iter_mut().zip(data.chunks(h * w)) {
            *o = plane.iter().sum::<f64>() / hw;
        }
        let req = self.requires(x);
        Ok(self.push(vec![batch, c], out, Op::Gap(x), req))
    }

    /// Per-channel batch normalization over [B×C×H×W]. In training mode the
    /// batch statistics normalize and update the running buffers; in eval
    /// mode the running statistics normalize and nothing is updated.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        training: bool,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (batch, c, h, w) = self.dims4("batch_norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let n = (batch * h * w) as f64;
        let plane = h * w;
        let data = self.data(x);
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for bi in 0..batch {
                    let base = (bi * c + ch) * plane;
                    acc += data[base..base + plane].iter().sum::<f64>();
                }
                mean[ch] = acc / n;
                let mut acc2 = 0.0;
                for bi in 0..batch {
                    let base = (bi * c + ch) * plane;
                    acc2 += data[base..base + plane]
                        .iter()
                        .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<f64>();
                }
                var[ch] = acc2 / n;
            }
            for ch in 0..c {
                stats.running_mean[ch] =
                    stats.momentum * stats.running_mean[ch] + (1.0 - stats.momentum) * mean[ch];
                stats.running_var[ch] =
                    stats.momentum * stats.running_var[ch] + (1.0 - stats.momentum) * var[ch];
            }
            (mean, var)
        } else {
            (stats.running_mean.to_vec(), stats.running_var.to_vec())
        };
        let g = self.nodes[gamma.0].data.clone();
        let be = self.nodes[beta.0].data.clone();
        let mut out = vec![0.0; data.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let inv = 1.0 / (var[ch] + eps).sqrt();
                for p in 0..plane {
                    out[base + p] = (data[base + p] - mean[ch]) * inv * g[ch] + be[ch];
                }
            }
        }
        let req = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(
            vec![batch, c, h, w],
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                training,
            },
            req,
        ))
    }

    // ---- indexing and assembly ----

    /// Select rows of a rank-2 tensor; an index may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (n, d) = self.dims2("gather_rows", a)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    extent: n,
                });
            }
            out.extend_from_slice(&self.data(a)[i * d..(i + 1) * d]);
        }
        let req = self.requires(a);
        Ok(self.push(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Select elements of a rank-1 tensor.
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "gather_elems",
                expected: 1,
                shape: s.to_vec(),
            });
        }
        let n = s[0];
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_elems",
                    index: i,
                    extent: n,
                });
            }
            out.push(self.data(a)[i]);
        }
        let req = self.requires(a);
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::GatherElems {
                x: a,
                idx: idx.to_vec(),
            },
            req,
        ))
    }

    /// Stack rank-1 tensors of equal length into a rank-2 tensor.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::Empty { op: "stack_rows" });
        }
        let d = self.numel(rows[0]);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.shape(r).len() != 1 || self.numel(r) != d {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: self.shape(r).to_vec(),
                });
            }
            out.extend_from_slice(self.data(r));
        }
        let req = self.any_requires(rows);
        Ok(self.push(vec![rows.len(), d], out, Op::StackRows(rows.to_vec()), req))
    }

    /// Stack scalars into a rank-1 tensor.
    pub fn stack_elems(&mut self, elems: &[Var]) -> Result<Var, TensorError> {
        if elems.is_empty() {
            return Err(TensorError::Empty { op: "stack_elems" });
        }
        let mut out = Vec::with_capacity(elems.len());
        for &e in elems {
            if self.numel(e) != 1 {
                return Err(TensorError::NotAScalar {
                    shape: self.shape(e).to_vec(),
                });
            }
            out.push(self.data(e)[0]);
        }
        let req = self.any_requires(elems);
        Ok(self.push(vec![elems.len()], out, Op::StackElems(elems.to_vec()), req))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.numel(a) {
            return Err(TensorError::ShapeData {
                shape: shape.to_vec(),
                expected,
                len: self.numel(a),
            });
        }
        let data = self.data(a).to_vec();
        let req = self.requires(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), req))
    }

    /// All pairwise Euclidean distances between the rows of two rank-2
    /// tensors: out[i][k] = ‖a_i − b_k‖.
    pub fn pairwise_euclidean(
        &mut self,
        a: Var,
        b: Var,
        squared: bool,
    ) -> Result<Var, TensorError> {
        let (n, da) = self.dims2("pairwise_euclidean", a)?;
        let (m, db) = self.dims2("pairwise_euclidean", b)?;
        if da != db {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_euclidean",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data(a)[i * da..(i + 1) * da];
            for k in 0..m {
                let brow = &self.data(b)[k * da..(k + 1) * da];
                let sq: f64 = arow
                    .iter()
                    .zip(brow)
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                out[i * m + k] = if squared { sq } else { sq.sqrt() };
            }
        }
        let req = self.any_requires(&[a, b]);
        Ok(self.push(
            vec![n, m],
            out,
            Op::PairwiseEuclidean { a, b, squared },
            req,
        ))
    }

    // ---- composed convenience ops ----

    /// Softmax along `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        match (self.shape(a).len(), axis) {
            (1, 0) => self.softmax_last(a),
            (2, 1) => self.softmax_last(a),
            (2, 0) => {
                let t = self.transpose(a)?;
                let s = self.softmax_last(t)?;
                self.transpose(s)
            }
            _ => Err(TensorError::RankMismatch {
                op: "softmax",
                expected: axis + 1,
                shape: self.shape(a).to_vec(),
            }),
        }
    }

    /// ‖a − b‖₂ between two equally shaped tensors, as a scalar node.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum_all(sq);
        Ok(self.sqrt(s))
    }

    /// Inner product of the two ℓ₂-normalized inputs (rank-1).
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let na = self.l2_normalize_last(a, 1e-12)?;
        let nb = self.l2_normalize_last(b, 1e-12)?;
        let p = self.mul(na, nb)?;
        Ok(self.sum_all(p))
    }

    /// x·W + b for rank-2 x, the column count of x matching W's rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }
}
