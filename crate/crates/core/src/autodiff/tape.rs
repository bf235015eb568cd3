use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    Conv2d(Var, Var, ConvGeometry),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    /// Σᵢ wᵢ · (logsumexp(zᵢ) − z_{i,yᵢ})
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    /// Σᵢ wᵢ · (−Σₖ t_{ik} log clamp(p_{ik}, ε, 1−ε))
    ClampedSoftCe {
        probs: Var,
        targets: Tensor,
        eps: f64,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Leaves created with [`Tape::param`] receive gradients; leaves created with
/// [`Tape::constant`] do not, and any node whose inputs are all constant is
/// itself constant, so stop-gradient is structural.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// `(n, m) + (m)` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.matrix_dims(x, "add_bias")?;
        if self.value(bias).len() != m {
            return Err(Error::shape(
                "add_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let mut out = self.value(x).clone();
        kernels::add_row_bias(out.data_mut(), self.value(bias).data());
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `(n, c, h, w) + (c)` broadcast over each channel plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = self.value(bias).len();
        if shape.len() != 4 || shape[1] != c {
            return Err(Error::shape(
                "add_channel_bias",
                &shape,
                self.value(bias).shape(),
            ));
        }
        let mut out = self.value(x).clone();
        kernels::add_channel_bias(out.data_mut(), self.value(bias).data(), shape[2] * shape[3]);
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddChannelBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| c * v);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        kernels::relu(out.data_mut());
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", t.shape(), &[0]))?;
        let data = kernels::softmax_rows(t.data(), n);
        let shape = t.shape().to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(a), rg))
    }

    /// Stride-1 zero-padded convolution of `x: (n, c_in, h, w)` with
    /// `kernel: (c_out, c_in, k, k)`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let ([n, cin, h, w], [cout, kcin, k, k2]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(Error::shape("conv2d", &xs, &ks));
        };
        if cin != kcin || k != k2 {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        let geom = ConvGeometry {
            in_channels: *cin,
            out_channels: *cout,
            height: *h,
            width: *w,
            kernel: *k,
            padding,
        };
        let (oh, ow) = geom
            .output_hw()
            .ok_or_else(|| Error::shape("conv2d", &xs, &ks))?;
        let data = kernels::conv2d(self.value(x).data(), self.value(kernel).data(), &geom);
        let rg = self.needs(&[x, kernel]);
        Ok(self.push(
            Tensor::new(vec![*n, *cout, oh, ow], data)?,
            Op::Conv2d(x, kernel, geom),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(a, shape)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Weighted sum of hard-label cross-entropies computed from logits.
    ///
    /// Errors if any logit is non-finite, which is where NaNs produced
    /// upstream surface.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (n, m) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape("cross_entropy", &[n, m], &[targets.len()]));
        }
        let z = self.value(logits);
        z.ensure_finite("cross_entropy logits")?;
        let mut total = 0.0;
        for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            if y >= m {
                return Err(Error::config(format!(
                    "label {y} out of range for {m} classes"
                )));
            }
            let row = z.row(i);
            total += w * (kernels::log_sum_exp(row) - row[y]);
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted sum of soft-target cross-entropies on probability rows that
    /// are clamped (not renormalized) to `[eps, 1 − eps]`.
    pub fn clamped_soft_ce(
        &mut self,
        probs: Var,
        targets: &Tensor,
        eps: f64,
        weights: &[f64],
    ) -> Result<Var> {
        let (n, m) = self.matrix_dims(probs, "clamped_soft_ce")?;
        if targets.shape() != [n, m] || weights.len() != n {
            return Err(Error::shape("clamped_soft_ce", &[n, m], targets.shape()));
        }
        let p = self.value(probs);
        p.ensure_finite("clamped_soft_ce probabilities")?;
        let mut total = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            let ce: f64 = p
                .row(i)
                .iter()
                .zip(targets.row(i))
                .map(|(&pk, &tk)| -tk * pk.clamp(eps, 1.0 - eps).ln())
                .sum();
            total += w * ce;
        }
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::ClampedSoftCe {
                probs,
                targets: targets.clone(),
                eps,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalar(root.value.shape().to_vec()));
        }
        root.value.ensure_finite("loss")?;
        if !root.requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::MatMul(a, b) => {
                    let (m, n) = (out_shape[0], out_shape[1]);
                    let k = self.value(*a).shape()[1];
                    if self.requires_grad(*a) {
                        let ga = kernels::matmul_nt(&g, self.value(*b).data(), m, n, k);
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = kernels::matmul_tn(self.value(*a).data(), &g, m, k, n);
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::AddBias(x, b) => {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(&mut grads, *x, g);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::AddChannelBias(x, b) => {
                    let c = self.value(*b).len();
                    let plane = out_shape[2] * out_shape[3];
                    let mut gb = vec![0.0; c];
                    for sample in g.chunks(c * plane) {
                        for (acc, ch) in gb.iter_mut().zip(sample.chunks(plane)) {
                            *acc += ch.iter().sum::<f64>();
                        }
                    }
                    self.accumulate(&mut grads, *x, g);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let gb = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    let ga = g.iter().map(|v| c * v).collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let n = *out_shape.last().unwrap_or(&1);
                    let s = node.value.data();
                    let mut ga = Vec::with_capacity(s.len());
                    for (srow, grow) in s.chunks(n).zip(g.chunks(n)) {
                        let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        ga.extend(srow.iter().zip(grow).map(|(si, gi)| si * (gi - dot)));
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Conv2d(x, k, geom) => {
                    if self.requires_grad(*x) {
                        let gx = kernels::conv2d_grad_input(&g, self.value(*k).data(), geom);
                        self.accumulate(&mut grads, *x, gx);
                    }
                    if self.requires_grad(*k) {
                        let gk = kernels::conv2d_grad_kernel(&g, self.value(*x).data(), geom);
                        self.accumulate(&mut grads, *k, gk);
                    }
                }
                Op::Reshape(a) => self.accumulate(&mut grads, *a, g),
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                } => {
                    let z = self.value(*logits);
                    let m = z.row_len();
                    let mut gz = kernels::softmax_rows(z.data(), m);
                    for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        let row = &mut gz[i * m..(i + 1) * m];
                        row[y] -= 1.0;
                        for v in row {
                            *v *= w * g[0];
                        }
                    }
                    self.accumulate(&mut grads, *logits, gz);
                }
                Op::ClampedSoftCe {
                    probs,
                    targets,
                    eps,
                    weights,
                } => {
                    let p = self.value(*probs);
                    let m = p.row_len();
                    let mut gp = vec![0.0; p.len()];
                    for (i, &w) in weights.iter().enumerate() {
                        for k in 0..m {
                            let pk = p.data()[i * m + k];
                            if pk > *eps && pk < 1.0 - eps {
                                gp[i * m + k] = -g[0] * w * targets.data()[i * m + k] / pk;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *probs, gp);
                }
            }
        }

        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            slot => *slot = Some(g),
        }
    }
}
