//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! context to run its adjoint. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients for every node that (transitively) depends on a
//! leaf created with `requires_grad = true`.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalization behaviour.
#[derive(Clone, Debug)]
pub enum BnMode<'a> {
    /// Normalize with per-batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, as used for running-average updates.
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    MaxPool { x: Var, argmax: Vec<u32> },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    L2Normalize { x: Var, norms: Vec<f32> },
    Concat { parts: Vec<Var>, axis: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    Sum(Var),
    SumPerSample(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that gradients flow into.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Nodes outside the gradient path never need their backward context.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip(a, b, |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `[m, k] x [k, n]`, or `[m, k] x [n, k]^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (b0, b1) = self.value(b).dims2()?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            0.0,
            &mut out,
        );
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Adds a `[d]` bias to every row of a `[n, d]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.shape(b) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(b).data();
        for r in 0..n {
            for (o, &bv) in out[r * d..(r + 1) * d].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let v = Tensor::new(vec![n, d], out)?;
        Ok(self.push(v, Op::AddBias { x, b }, &[x, b]))
    }

    /// 2-D convolution of `[n, c, h, w]` with `[o, c, k, k]` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c || kh != kw || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        let geom = ConvGeom {
            in_c: c,
            in_h: h,
            in_w: wd,
            kernel: kh,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![0.0; n * o * oh * ow];
        kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            o,
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let v = Tensor::new(vec![n, o, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// Batch normalization over `[n, c, h, w]` or `[n, c]`. In training mode
    /// also returns the batch statistics for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f32,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, spatial) = match shape[..] {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(Error::shape("batch_norm", &shape, &[0, 0])),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm affine", &shape, self.shape(gamma)));
        }
        let m = n * spatial;
        let xd = self.value(x).data();
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in training mode needs more than one value per channel".into(),
                    ));
                }
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        s += xd[base..base + spatial].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        ss += xd[base..base + spatial]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (ss / m as f64) as f32;
                }
                let unbiased = var.iter().map(|v| v * m as f32 / (m - 1) as f32).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &shape, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + bt[ch];
                }
            }
        }
        let train = stats.is_some();
        let v = Tensor::new(shape, out)?;
        let var = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((var, stats))
    }

    /// Max pooling with a square window.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::shape("max_pool2d", self.shape(x), &[kernel, kernel]));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let j = (oy * stride + ky) * w + ox * stride + kx;
                            if plane[j] > best {
                                best = plane[j];
                                idx = j;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = (p * h * w + idx) as u32;
                }
            }
        }
        let v = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        let v = Tensor::new(vec![n, c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[p * oh * ow + oy * ow + ox] = xd[p * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        let v = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(v, Op::Upsample2x(x), &[x]))
    }

    /// Scales each row of `[n, d]` to unit Euclidean norm. Zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            norms.push(norm);
            if norm > 0.0 {
                for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let v = Tensor::new(vec![n, d], out)?;
        Ok(self.push(v, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Concatenation along axis 0 (rows) or axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} unsupported for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Gathers rows (leading-axis slices) in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let w: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= n {
                return Err(Error::InvalidArgument(format!("row {r} out of range {n}")));
            }
            out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
        }
        let mut s = shape;
        s[0] = rows.len();
        let v = Tensor::new(s, out)?;
        Ok(self.push(
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed with a
    /// max shift. Returns a `[1]` tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if targets.len() != n || n == 0 {
            return Err(Error::shape("softmax_cross_entropy", &[n, c], &[targets.len()]));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = &ld[r * c..(r + 1) * c];
            let t = targets[r];
            if t >= c {
                return Err(Error::InvalidArgument(format!("target {t} >= {c} classes")));
            }
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let lse = max as f64 + sum.ln();
            loss += lse - row[t] as f64;
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (((v - max) as f64).exp() / sum) as f32;
            }
        }
        let v = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Sum of all elements, `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f32;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums everything but the leading axis: `[n, ...] -> [n]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let n = self.shape(x)[0];
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(self.value(x).len() / n.max(1))
            .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        self.push(Tensor::from_vec(out), Op::SumPerSample(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Reverse pass from a scalar `loss` node (seed gradient 1).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only nodes that asked for gradients report them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || gd.to_vec());
                self.accum(grads, *b, || gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || gd.to_vec());
                self.accum(grads, *b, || gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, || gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.accum(grads, *b, || gd.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, || gd.iter().zip(vb).map(|(g, y)| g / y).collect());
                self.accum(grads, *b, || {
                    gd.iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect()
                });
            }
            Op::Scale(a, s) => self.accum(grads, *a, || gd.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => self.accum(grads, *a, || gd.to_vec()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accum(grads, *a, || {
                    gd.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect()
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accum(grads, *a, || {
                    gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().expect("checked");
                let n = node.value.shape()[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, || {
                    // dA = G * B^T (or G * B when B was transposed)
                    let mut out = vec![0.0; m * k];
                    kernels::gemm(m, n, k, 1.0, gd, false, vb, !trans_b, 0.0, &mut out);
                    out
                });
                self.accum(grads, *b, || {
                    if *trans_b {
                        // B is [n, k]: dB = G^T * A
                        let mut out = vec![0.0; n * k];
                        kernels::gemm(n, m, k, 1.0, gd, true, va, false, 0.0, &mut out);
                        out
                    } else {
                        let mut out = vec![0.0; k * n];
                        kernels::gemm(k, m, n, 1.0, va, true, gd, false, 0.0, &mut out);
                        out
                    }
                });
            }
            Op::AddBias { x, b } => {
                self.accum(grads, *x, || gd.to_vec());
                let d = self.value(*b).len();
                self.accum(grads, *b, || {
                    let mut out = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let mut dx = self.wants(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; self.value(*w).len()]);
                let mut db = b
                    .filter(|b| self.wants(*b))
                    .map(|b| vec![0.0; self.value(b).len()]);
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    o,
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, || dx);
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, || dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accum(grads, *b, || db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let m = (n * spatial) as f32;
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gx = vec![0.0f32; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            sum_g[ch] += gd[j];
                            sum_gx[ch] += gd[j] * xhat[j];
                        }
                    }
                }
                let gam = self.value(*gamma).data();
                self.accum(grads, *x, || {
                    let mut dx = vec![0.0; gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            let k = gam[ch] * inv_std[ch];
                            for j in base..base + spatial {
                                dx[j] = if *train {
                                    k / m * (m * gd[j] - sum_g[ch] - xhat[j] * sum_gx[ch])
                                } else {
                                    k * gd[j]
                                };
                            }
                        }
                    }
                    dx
                });
                self.accum(grads, *gamma, || sum_gx.clone());
                self.accum(grads, *beta, || sum_g.clone());
            }
            Op::MaxPool { x, argmax } => {
                let len = self.value(*x).len();
                self.accum(grads, *x, || {
                    let mut dx = vec![0.0; len];
                    for (g, &i) in gd.iter().zip(argmax) {
                        dx[i as usize] += g;
                    }
                    dx
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                self.accum(grads, *x, || {
                    gd.iter()
                        .flat_map(|&g| std::iter::repeat(g / hw as f32).take(hw))
                        .collect()
                });
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                self.accum(grads, *x, || {
                    let mut dx = vec![0.0; s.iter().product()];
                    let (oh, ow) = (2 * h, 2 * w);
                    for p in 0..s[0] * s[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dx[p * h * w + (oy / 2) * w + ox / 2] +=
                                    gd[p * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                    dx
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.shape()[1];
                let y = node.value.data();
                self.accum(grads, *x, || {
                    let mut dx = vec![0.0; y.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    dx
                });
            }
            Op::Concat { parts, axis } => {
                let base = node.value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = base[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    let off = offset;
                    self.accum(grads, p, || {
                        let mut out = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            out.extend_from_slice(&gd[o * total + off..o * total + off + len]);
                        }
                        out
                    });
                    offset += len;
                }
            }
            Op::SelectRows { x, rows } => {
                let len = self.value(*x).len();
                let w = len / self.shape(*x)[0];
                self.accum(grads, *x, || {
                    let mut dx = vec![0.0; len];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..w {
                            dx[r * w + j] += gd[i * w + j];
                        }
                    }
                    dx
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let n = targets.len() as f32;
                let scale = gd[0] / n;
                self.accum(grads, *logits, || {
                    let mut dx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dx[r * c + t] -= scale;
                    }
                    dx
                });
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                self.accum(grads, *x, || vec![gd[0]; len]);
            }
            Op::SumPerSample(x) => {
                let len = self.value(*x).len();
                let w = len / gd.len().max(1);
                self.accum(grads, *x, || {
                    gd.iter().flat_map(|&g| std::iter::repeat(g).take(w)).collect()
                });
            }
            Op::Reshape(x) => self.accum(grads, *x, || gd.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: impl FnOnce() -> Vec<f32>) {
        if !self.wants(v) {
            return;
        }
        let d = delta();
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&d) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), d).expect("gradient shape"));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_zeroes_negatives() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = t.l2_normalize(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-7 && (d[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn identity_kernel_convolution() {
        let mut t = Tape::new();
        let data: Vec<f32> = (0..2 * 3 * 4 * 4).map(|i| i as f32 * 0.5 - 7.0).collect();
        let x = t.constant(Tensor::new(vec![2, 3, 4, 4], data.clone()).unwrap());
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = t.constant(Tensor::new(vec![3, 3, 1, 1], w).unwrap());
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &data[..]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![4, 5]));
        let err = t.matmul(a, b, false).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::from_vec(vec![1.0, 2.0]));
        let c = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = t.constant(Tensor::full(vec![1], 1.0));
        let b = t.constant(Tensor::zeros(vec![1]));
        let (y, stats) = t.batch_norm(x, g, b, BnMode::Train, 0.0).unwrap();
        let mean: f32 = t.value(y).data().iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.5]);
        assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-6);
    }
}
