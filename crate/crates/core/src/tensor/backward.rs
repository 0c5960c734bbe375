//! Reverse pass over the tape. Nodes are replayed in reverse creation order,
//! which is a valid topological order because ops only reference earlier
//! nodes; every use-site of a value accumulates into the same grad buffer.

use super::kernels;
use super::tape::{Node, Op, Tape, Var};
use super::TensorError;

fn add_into(grad: &mut [f64], contrib: &[f64]) {
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g += c;
    }
}

impl Tape {
    /// Accumulate gradients of `root` (a scalar) into every tape node that
    /// requires them. May be called once per tape.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::NotAScalar {
                shape: self.nodes[root.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if let Some(g) = self.nodes[root.0].grad.as_mut() {
            g[0] = 1.0;
        }
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let grad = node.grad.as_deref().expect("grad allocated above");
            step(before, node, grad);
        }
        #[cfg(debug_assertions)]
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(g) = &node.grad {
                debug_assert!(
                    g.iter().all(|x| x.is_finite()),
                    "non-finite gradient at node {i} ({:?})",
                    node.shape
                );
            }
        }
        Ok(())
    }
}

fn grad_of(before: &mut [Node], v: Var) -> &mut [f64] {
    before[v.0]
        .grad
        .as_deref_mut()
        .expect("inputs of a grad-requiring node have grads allocated")
}

fn wants(before: &[Node], v: Var) -> bool {
    before[v.0].requires_grad
}

fn data_of(before: &[Node], v: Var) -> &[f64] {
    &before[v.0].data
}

fn step(before: &mut [Node], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(before, *a) {
                add_into(grad_of(before, *a), g);
            }
            if wants(before, *b) {
                add_into(grad_of(before, *b), g);
            }
        }
        Op::Sub(a, b) => {
            if wants(before, *a) {
                add_into(grad_of(before, *a), g);
            }
            if wants(before, *b) {
                for (gb, &gv) in grad_of(before, *b).iter_mut().zip(g) {
                    *gb -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(before, *a) {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(data_of(before, *b))
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                add_into(grad_of(before, *a), &contrib);
            }
            if wants(before, *b) {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(data_of(before, *a))
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                add_into(grad_of(before, *b), &contrib);
            }
        }
        Op::Div(a, b) => {
            if wants(before, *a) {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(data_of(before, *b))
                    .map(|(&gv, &bv)| gv / bv)
                    .collect();
                add_into(grad_of(before, *a), &contrib);
            }
            if wants(before, *b) {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(data_of(before, *a).iter().zip(data_of(before, *b)))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                add_into(grad_of(before, *b), &contrib);
            }
        }
        Op::AddScalar(a) => {
            if wants(before, *a) {
                add_into(grad_of(before, *a), g);
            }
        }
        Op::MulScalar(a, c) => {
            if wants(before, *a) {
                let c = *c;
                for (ga, &gv) in grad_of(before, *a).iter_mut().zip(g) {
                    *ga += c * gv;
                }
            }
        }
        Op::Neg(a) => {
            if wants(before, *a) {
                for (ga, &gv) in grad_of(before, *a).iter_mut().zip(g) {
                    *ga -= gv;
                }
            }
        }
        Op::Relu(a) => {
            if wants(before, *a) {
                let mask: Vec<f64> = data_of(before, *a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                add_into(grad_of(before, *a), &mask);
            }
        }
        Op::Exp(a) => {
            if wants(before, *a) {
                let contrib: Vec<f64> = node.data.iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                add_into(grad_of(before, *a), &contrib);
            }
        }
        Op::Log(a) => {
            if wants(before, *a) {
                let contrib: Vec<f64> = data_of(before, *a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gv / x)
                    .collect();
                add_into(grad_of(before, *a), &contrib);
            }
        }
        Op::Sqrt(a) => {
            if wants(before, *a) {
                // Subgradient 0 at exactly zero keeps d(x, x) differentiable in tests.
                let contrib: Vec<f64> = node
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| if y == 0.0 { 0.0 } else { gv / (2.0 * y) })
                    .collect();
                add_into(grad_of(before, *a), &contrib);
            }
        }
        Op::Matmul(a, b) => {
            let m = before[a.0].shape[0];
            let k = before[a.0].shape[1];
            let n = before[b.0].shape[1];
            if wants(before, *a) {
                let mut da = vec![0.0; m * k];
                kernels::mm_nt(g, data_of(before, *b), m, n, k, &mut da);
                add_into(grad_of(before, *a), &da);
            }
            if wants(before, *b) {
                let mut db = vec![0.0; k * n];
                kernels::mm_tn(data_of(before, *a), g, k, m, n, &mut db);
                add_into(grad_of(before, *b), &db);
            }
        }
        Op::Transpose(a) => {
            if wants(before, *a) {
                let m = before[a.0].shape[0];
                let n = before[a.0].shape[1];
                let mut da = vec![0.0; m * n];
                kernels::transpose(g, n, m, &mut da);
                add_into(grad_of(before, *a), &da);
            }
        }
        Op::AddBias(a, bias) => {
            if wants(before, *a) {
                add_into(grad_of(before, *a), g);
            }
            if wants(before, *bias) {
                let d = before[bias.0].data.len();
                let gb = grad_of(before, *bias);
                for row in g.chunks(d) {
                    add_into(gb, row);
                }
            }
        }
        Op::SumAll(a) => {
            if wants(before, *a) {
                let gv = g[0];
                for ga in grad_of(before, *a).iter_mut() {
                    *ga += gv;
                }
            }
        }
        Op::MeanAll(a) => {
            if wants(before, *a) {
                let n = before[a.0].data.len() as f64;
                let gv = g[0] / n;
                for ga in grad_of(before, *a).iter_mut() {
                    *ga += gv;
                }
            }
        }
        Op::SumAxis0(a) => {
            if wants(before, *a) {
                let d = node.data.len();
                for row in grad_of(before, *a).chunks_mut(d) {
                    add_into(row, g);
                }
            }
        }
        Op::MeanAxis0(a) => {
            if wants(before, *a) {
                let d = node.data.len();
                let n = before[a.0].shape[0] as f64;
                for row in grad_of(before, *a).chunks_mut(d) {
                    for (r, &gv) in row.iter_mut().zip(g) {
                        *r += gv / n;
                    }
                }
            }
        }
        Op::SoftmaxLast(a) => {
            if wants(before, *a) {
                let d = *node.shape.last().expect("non-empty shape");
                let mut contrib = vec![0.0; node.data.len()];
                for ((yrow, grow), crow) in node
                    .data
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(contrib.chunks_mut(d))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                    for ((c, &y), &gv) in crow.iter_mut().zip(yrow).zip(grow) {
                        *c = y * (gv - dot);
                    }
                }
                add_into(grad_of(before, *a), &contrib);
            }
        }
        Op::LogSoftmaxLast(a) => {
            if wants(before, *a) {
                let d = *node.shape.last().expect("non-empty shape");
                let mut contrib = vec![0.0; node.data.len()];
                for ((yrow, grow), crow) in node
                    .data
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(contrib.chunks_mut(d))
                {
                    let gsum: f64 = grow.iter().sum();
                    for ((c, &y), &gv) in crow.iter_mut().zip(yrow).zip(grow) {
                        *c = gv - y.exp() * gsum;
                    }
                }
                add_into(grad_of(before, *a), &contrib);
            }
        }
        Op::LogSumExp(a) => {
            if wants(before, *a) {
                let y = node.data[0];
                let gv = g[0];
                let contrib: Vec<f64> = data_of(before, *a)
                    .iter()
                    .map(|&x| gv * (x - y).exp())
                    .collect();
                add_into(grad_of(before, *a), &contrib);
            }
        }
        Op::L2NormLast { x, eps, norms } => {
            if wants(before, *x) {
                let d = *node.shape.last().expect("non-empty shape");
                let mut contrib = vec![0.0; node.data.len()];
                for (r, ((yrow, grow), crow)) in node
                    .data
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(contrib.chunks_mut(d))
                    .enumerate()
                {
                    let norm = norms[r];
                    if norm < *eps {
                        for (c, &gv) in crow.iter_mut().zip(grow) {
                            *c = gv / eps;
                        }
                    } else {
                        let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                        for ((c, &y), &gv) in crow.iter_mut().zip(yrow).zip(grow) {
                            *c = (gv - y * dot) / norm;
                        }
                    }
                }
                add_into(grad_of(before, *x), &contrib);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => {
            let d = node.shape[1];
            let gdata = data_of(before, *gamma).to_vec();
            let xdata = data_of(before, *x);
            let rows = node.shape[0];
            let mut dx = vec![0.0; xdata.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let xrow = &xdata[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                let mean = xrow.iter().sum::<f64>() / d as f64;
                let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * inv).collect();
                let ghat: Vec<f64> = grow.iter().zip(&gdata).map(|(&gv, &gm)| gv * gm).collect();
                let mean_ghat = ghat.iter().sum::<f64>() / d as f64;
                let mean_ghat_xhat =
                    ghat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[r * d + j] = inv * (ghat[j] - mean_ghat - xhat[j] * mean_ghat_xhat);
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                }
            }
            if wants(before, *x) {
                add_into(grad_of(before, *x), &dx);
            }
            if wants(before, *gamma) {
                add_into(grad_of(before, *gamma), &dgamma);
            }
            if wants(before, *beta) {
                add_into(grad_of(before, *beta), &dbeta);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            var,
            eps,
            training,
        } => {
            let b = node.shape[0];
            let c = node.shape[1];
            let plane = node.shape[2] * node.shape[3];
            let n = (b * plane) as f64;
            let xdata = data_of(before, *x);
            let gdata = data_of(before, *gamma).to_vec();
            let mut dx = vec![0.0; xdata.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let mut sum_g = 0.0;
                let mut sum_g_xhat = 0.0;
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for p in 0..plane {
                        let xhat = (xdata[base + p] - mean[ch]) * inv;
                        let gv = g[base + p];
                        sum_g += gv;
                        sum_g_xhat += gv * xhat;
                    }
                }
                dgamma[ch] = sum_g_xhat;
                dbeta[ch] = sum_g;
                let scale = gdata[ch] * inv;
                if *training {
                    let mean_g = sum_g / n;
                    let mean_g_xhat = sum_g_xhat / n;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for p in 0..plane {
                            let xhat = (xdata[base + p] - mean[ch]) * inv;
                            dx[base + p] = scale * (g[base + p] - mean_g - xhat * mean_g_xhat);
                        }
                    }
                } else {
                    // Running statistics are constants in eval mode.
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for p in 0..plane {
                            dx[base + p] = scale * g[base + p];
                        }
                    }
                }
            }
            if wants(before, *x) {
                add_into(grad_of(before, *x), &dx);
            }
            if wants(before, *gamma) {
                add_into(grad_of(before, *gamma), &dgamma);
            }
            if wants(before, *beta) {
                add_into(grad_of(before, *beta), &dbeta);
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let batch = before[x.0].shape[0];
            let cin = before[x.0].shape[1];
            let h = before[x.0].shape[2];
            let width = before[x.0].shape[3];
            let cout = before[w.0].shape[0];
            let kh = before[w.0].shape[2];
            let kw = before[w.0].shape[3];
            let oh = node.shape[2];
            let ow = node.shape[3];
            let kdim = cin * kh * kw;
            let positions = oh * ow;

            let need_x = wants(before, *x);
            let need_w = wants(before, *w);
            let need_b = wants(before, *b);
            let mut dw = vec![0.0; cout * kdim];
            let mut db = vec![0.0; cout];
            let mut dx = if need_x {
                vec![0.0; before[x.0].data.len()]
            } else {
                Vec::new()
            };
            let mut col = vec![0.0; kdim * positions];
            let mut dcol = vec![0.0; kdim * positions];
            let wdata = data_of(before, *w).to_vec();
            let xdata = data_of(before, *x);
            for bi in 0..batch {
                let gout = &g[bi * cout * positions..(bi + 1) * cout * positions];
                if need_b {
                    for (ch, row) in gout.chunks(positions).enumerate() {
                        db[ch] += row.iter().sum::<f64>();
                    }
                }
                if need_w {
                    let img = &xdata[bi * cin * h * width..(bi + 1) * cin * h * width];
                    kernels::im2col(img, cin, h, width, kh, kw, *stride, *pad, &mut col);
                    kernels::mm_nt(gout, &col, cout, positions, kdim, &mut dw);
                }
                if need_x {
                    dcol.fill(0.0);
                    kernels::mm_tn(&wdata, gout, kdim, cout, positions, &mut dcol);
                    kernels::col2im(
                        &dcol,
                        cin,
                        h,
                        width,
                        kh,
                        kw,
                        *stride,
                        *pad,
                        &mut dx[bi * cin * h * width..(bi + 1) * cin * h * width],
                    );
                }
            }
            if need_x {
                add_into(grad_of(before, *x), &dx);
            }
            if need_w {
                add_into(grad_of(before, *w), &dw);
            }
            if need_b {
                add_into(grad_of(before, *b), &db);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if wants(before, *x) {
                let gx = grad_of(before, *x);
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
        }
        Op::Gap(x) => {
            if wants(before, *x) {
                let plane = before[x.0].shape[2] * before[x.0].shape[3];
                let inv = 1.0 / plane as f64;
                for (chunk, &gv) in grad_of(before, *x).chunks_mut(plane).zip(g) {
                    for v in chunk.iter_mut() {
                        *v += gv * inv;
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            if wants(before, *x) {
                let d = node.shape[1];
                let gx = grad_of(before, *x);
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::GatherElems { x, idx } => {
            if wants(before, *x) {
                let gx = grad_of(before, *x);
                for (r, &src) in idx.iter().enumerate() {
                    gx[src] += g[r];
                }
            }
        }
        Op::StackRows(rows) => {
            let d = node.shape[1];
            for (r, &src) in rows.iter().enumerate() {
                if wants(before, src) {
                    add_into(grad_of(before, src), &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::StackElems(elems) => {
            for (e, &src) in elems.iter().enumerate() {
                if wants(before, src) {
                    grad_of(before, src)[0] += g[e];
                }
            }
        }
        Op::Reshape(a) => {
            if wants(before, *a) {
                add_into(grad_of(before, *a), g);
            }
        }
        Op::PairwiseEuclidean { a, b, squared } => {
            let n = node.shape[0];
            let m = node.shape[1];
            let d = before[a.0].shape[1];
            let adata = data_of(before, *a);
            let bdata = data_of(before, *b);
            let mut da = vec![0.0; adata.len()];
            let mut db = vec![0.0; bdata.len()];
            for i in 0..n {
                let arow = &adata[i * d..(i + 1) * d];
                for k in 0..m {
                    let gv = g[i * m + k];
                    if gv == 0.0 {
                        continue;
                    }
                    let brow = &bdata[k * d..(k + 1) * d];
                    let dist = node.data[i * m + k];
                    let factor = if *squared {
                        2.0 * gv
                    } else if dist == 0.0 {
                        0.0
                    } else {
                        gv / dist
                    };
                    for j in 0..d {
                        let diff = (arow[j] - brow[j]) * factor;
                        da[i * d + j] += diff;
                        db[k * d + j] -= diff;
                    }
                }
            }
            if wants(before, *a) {
                add_into(grad_of(before, *a), &da);
            }
            if wants(before, *b) {
                add_into(grad_of(before, *b), &db);
            }
        }
    }
}
