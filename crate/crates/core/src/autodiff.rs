//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! reverse topological traversal. Gradients accumulate additively, which
//! gives the sum rule for values that fan out to several consumers.
//!
//! Image tensors use the `N x C x H x W` layout throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dSpec {
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride-1 convolution whose output keeps the input size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Dropout {
        input: Var,
        mask: Vec<S>,
    },
    PixelShuffle {
        input: Var,
        r: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    AvgPool {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    /// Scalar output whose derivative w.r.t. `input` was computed eagerly.
    Reduce {
        input: Var,
        local_grad: Tensor<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn require4<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    if t.shape().len() != 4 {
        return Err(Error::shape(op, format!("expected N x C x H x W, got {:?}", t.shape())));
    }
    Ok(t.dims4())
}

impl<S: Scalar> Graph<S> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= S::zero() {
                S::one() / (S::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape().len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", t.shape())));
        }
        let (outer, dim, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| o * dim * inner + c * inner + i;
                let mut m = S::neg_infinity();
                for c in 0..dim {
                    m = m.max(src[at(c)]);
                }
                let mut z = S::zero();
                for c in 0..dim {
                    let e = (src[at(c)] - m).exp();
                    out[at(c)] = e;
                    z += e;
                }
                for c in 0..dim {
                    out[at(c)] /= z;
                }
            }
        }
        let out = Tensor::from_vec(t.shape(), out)?;
        Ok(self.push(out, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Zeroes whole channels with probability `p` in training mode and scales
    /// survivors by `1 / (1 - p)`; identity in evaluation mode.
    pub fn spatial_dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::InvalidParams(format!("dropout probability {p} must be < 1")));
        }
        let (n, c, h, w) = require4("spatial_dropout", self.value(a))?;
        let keep = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..n * c)
            .map(|_| if self.rng.gen::<f64>() < p { S::zero() } else { keep })
            .collect();
        let hw = h * w;
        let src = self.value(a).data();
        let data = src
            .iter()
            .enumerate()
            .map(|(i, &x)| x * mask[i / hw])
            .collect();
        let out = Tensor::from_vec(&[n, c, h, w], data)?;
        Ok(self.push(out, Op::Dropout { input: a, mask }, &[a]))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (n, cin, h, w) = require4("conv2d", self.value(input))?;
        let wt = self.value(weight);
        if wt.shape().len() != 4 || wt.shape()[1] != cin {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?} for input channels {cin}", wt.shape()),
            ));
        }
        let (cout, _, kh, kw) = wt.dims4();
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        let geo = ConvGeometry::new(cin, h, w, kh, kw, spec)?;
        let (ho, wo) = (geo.ho, geo.wo);
        let p = ho * wo;
        let mut out = vec![S::zero(); n * cout * p];
        let mut col = Vec::new();
        let x = self.value(input).data();
        for s in 0..n {
            let xs = &x[s * cin * h * w..(s + 1) * cin * h * w];
            let cols: &[S] = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut col);
                &col
            };
            S::gemm(false, false, cout, p, geo.k(), S::one(), wt.data(), cols, S::zero(), &mut out[s * cout * p..(s + 1) * cout * p]);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let bias = bv[i % cout];
                for v in chunk {
                    *v += bias;
                }
            }
        }
        let out = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, spec }, &parents))
    }

    /// Per-channel normalisation. Training mode uses batch statistics over
    /// `N x H x W` and folds them into `running` with `momentum`; evaluation
    /// mode uses `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<S>,
        momentum: S,
        eps: S,
    ) -> Result<Var> {
        let (n, c, h, w) = require4("batch_norm", self.value(input))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] || running.mean.len() != c {
            return Err(Error::shape("batch_norm", format!("affine parameters do not match {c} channels")));
        }
        let hw = h * w;
        let m = n * hw;
        let x = self.value(input).data();
        let batch_stats = self.mode == Mode::Train;
        let mut mean = vec![S::zero(); c];
        let mut inv_std = vec![S::zero(); c];
        if batch_stats {
            let mf = S::from_usize(m).unwrap();
            for ch in 0..c {
                let mut sum = S::zero();
                for s in 0..n {
                    sum += x[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().copied().sum::<S>();
                }
                let mu = sum / mf;
                let mut sq = S::zero();
                for s in 0..n {
                    for &v in &x[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                let var = sq / mf;
                mean[ch] = mu;
                inv_std[ch] = S::one() / (var + eps).sqrt();
                let unbiased = if m > 1 { sq / S::from_usize(m - 1).unwrap() } else { var };
                running.mean[ch] = (S::one() - momentum) * running.mean[ch] + momentum * mu;
                running.var[ch] = (S::one() - momentum) * running.var[ch] + momentum * unbiased;
            }
        } else {
            for ch in 0..c {
                mean[ch] = running.mean[ch];
                inv_std[ch] = S::one() / (running.var[ch] + eps).sqrt();
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![S::zero(); x.len()];
        for (i, chunk) in x.chunks(hw).enumerate() {
            let ch = i % c;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], b[ch]);
            for (o, &v) in out[i * hw..(i + 1) * hw].iter_mut().zip(chunk) {
                *o = (v - mu) * is * ga + be;
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// `N x (C r^2) x H x W -> N x C x (H r) x (W r)`.
    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let t = self.value(input);
        let out = pixel_shuffle_forward(t, r)?;
        Ok(self.push(out, Op::PixelShuffle { input, r }, &[input]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?);
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} of rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == rank && s.iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {:?} on axis {axis}", first.shape())));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = require4("avg_pool2d", self.value(input))?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::shape("avg_pool2d", format!("kernel {kernel} stride {stride} on {h}x{w}")));
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let x = self.value(input).data();
        let norm = S::one() / S::from_usize(kernel * kernel).unwrap();
        let mut out = vec![S::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let xs = &x[plane * h * w..(plane + 1) * h * w];
            let os = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = S::zero();
                    for ky in 0..kernel {
                        let row = &xs[(oy * stride + ky) * w + ox * stride..];
                        for &v in &row[..kernel] {
                            s += v;
                        }
                    }
                    os[oy * wo + ox] = s * norm;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::AvgPool { input, kernel, stride }, &[input]))
    }

    /// Records a scalar-valued function of `input` with its gradient.
    pub fn reduce(&mut self, input: Var, value: S, local_grad: Tensor<S>) -> Result<Var> {
        same_shape("reduce", self.value(input), &local_grad)?;
        Ok(self.push(Tensor::scalar(value), Op::Reduce { input, local_grad }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let v = t.sum();
        let g = Tensor::full(t.shape(), S::one());
        self.push(Tensor::scalar(v), Op::Reduce { input, local_grad: g }, &[input])
    }

    /// `sum(input * weights)` for a fixed weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<S>) -> Result<Var> {
        let t = self.value(input);
        same_shape("weighted_sum", t, weights)?;
        let v = t.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.reduce(input, v, weights.clone())
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(gout);
                continue;
            }
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gout: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let g = zip_map(gout, vb, |g, y| g * y);
                    self.accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let g = zip_map(gout, va, |g, x| g * x);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gout.map(|g| g * s));
            }
            Op::Relu(a) => {
                let g = zip_map(gout, self.value(*a), |g, x| if x > S::zero() { g } else { S::zero() });
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = zip_map(gout, &node.value, |g, y| g * y * (S::one() - y));
                self.accumulate(grads, *a, g);
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (outer, dim, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), gout.data());
                let mut dx = vec![S::zero(); yd.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |c: usize| o * dim * inner + c * inner + k;
                        let dot: S = (0..dim).map(|c| gd[at(c)] * yd[at(c)]).sum();
                        for c in 0..dim {
                            dx[at(c)] = yd[at(c)] * (gd[at(c)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_vec(y.shape(), dx).unwrap());
            }
            Op::Dropout { input, mask } => {
                let (_, _, h, w) = gout.dims4();
                let hw = h * w;
                let data = gout.data().iter().enumerate().map(|(j, &g)| g * mask[j / hw]).collect();
                self.accumulate(grads, *input, Tensor::from_vec(gout.shape(), data).unwrap());
            }
            Op::PixelShuffle { input, r } => {
                let g = pixel_unshuffle_forward(gout, *r).unwrap();
                self.accumulate(grads, *input, g);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(gout.shape(), *axis);
                let mut offset = 0;
                let total = gout.shape()[*axis] * inner;
                for &v in inputs {
                    let shape = self.value(v).shape();
                    let chunk = shape[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            data.extend_from_slice(&gout.data()[start..start + chunk]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(shape, data).unwrap());
                    }
                    offset += chunk;
                }
            }
            Op::AvgPool { input, kernel, stride } => {
                let (n, c, h, w) = self.value(*input).dims4();
                let (_, _, ho, wo) = gout.dims4();
                let norm = S::one() / S::from_usize(kernel * kernel).unwrap();
                let mut dx = vec![S::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gs = &gout.data()[plane * ho * wo..(plane + 1) * ho * wo];
                    let ds = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = gs[oy * wo + ox] * norm;
                            for ky in 0..*kernel {
                                let row = (oy * stride + ky) * w + ox * stride;
                                for d in &mut ds[row..row + kernel] {
                                    *d += g;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::from_vec(&[n, c, h, w], dx).unwrap());
            }
            Op::Reduce { input, local_grad } => {
                let s = gout.data()[0];
                self.accumulate(grads, *input, local_grad.map(|g| g * s));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4();
                let hw = h * w;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for (idx, (xs, gs)) in x.data().chunks(hw).zip(gout.data().chunks(hw)).enumerate() {
                    let ch = idx % c;
                    for (&xv, &gv) in xs.iter().zip(gs) {
                        dbeta[ch] += gv;
                        dgamma[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![S::zero(); x.numel()];
                    let mf = S::from_usize(n * hw).unwrap();
                    for (idx, ((xs, gs), ds)) in x
                        .data()
                        .chunks(hw)
                        .zip(gout.data().chunks(hw))
                        .zip(dx.chunks_mut(hw))
                        .enumerate()
                    {
                        let ch = idx % c;
                        let scale = g[ch] * inv_std[ch];
                        if *batch_stats {
                            let (sum_g, sum_gx) = (dbeta[ch] / mf, dgamma[ch] / mf);
                            for ((&xv, &gv), d) in xs.iter().zip(gs).zip(ds.iter_mut()) {
                                let xhat = (xv - mean[ch]) * inv_std[ch];
                                *d = scale * (gv - sum_g - xhat * sum_gx);
                            }
                        } else {
                            for (&gv, d) in gs.iter().zip(ds.iter_mut()) {
                                *d = scale * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, cin, h, w) = x.dims4();
                let (cout, _, kh, kw) = wt.dims4();
                let geo = ConvGeometry::new(cin, h, w, kh, kw, *spec).unwrap();
                let p = geo.ho * geo.wo;
                let k = geo.k();
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let mut db = vec![S::zero(); cout];
                        for (idx, chunk) in gout.data().chunks(p).enumerate() {
                            db[idx % cout] += chunk.iter().copied().sum::<S>();
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[cout], db).unwrap());
                    }
                }
                let need_w = self.requires_grad(*weight);
                let need_x = self.requires_grad(*input);
                let mut dw = if need_w { vec![S::zero(); cout * k] } else { Vec::new() };
                let mut dx = if need_x { vec![S::zero(); x.numel()] } else { Vec::new() };
                let mut col = Vec::new();
                let mut dcol = if need_x && !geo.is_pointwise() { vec![S::zero(); k * p] } else { Vec::new() };
                for s in 0..n {
                    let gs = &gout.data()[s * cout * p..(s + 1) * cout * p];
                    let xs = &x.data()[s * cin * h * w..(s + 1) * cin * h * w];
                    if need_w {
                        let cols: &[S] = if geo.is_pointwise() {
                            xs
                        } else {
                            geo.im2col(xs, &mut col);
                            &col
                        };
                        S::gemm(false, true, cout, k, p, S::one(), gs, cols, S::one(), &mut dw);
                    }
                    if need_x {
                        let dxs = &mut dx[s * cin * h * w..(s + 1) * cin * h * w];
                        if geo.is_pointwise() {
                            S::gemm(true, false, k, p, cout, S::one(), wt.data(), gs, S::zero(), dxs);
                        } else {
                            S::gemm(true, false, k, p, cout, S::one(), wt.data(), gs, S::zero(), &mut dcol);
                            geo.col2im(&dcol, dxs);
                        }
                    }
                }
                if need_w {
                    self.accumulate(grads, *weight, Tensor::from_vec(wt.shape(), dw).unwrap());
                }
                if need_x {
                    self.accumulate(grads, *input, Tensor::from_vec(x.shape(), dx).unwrap());
                }
            }
        }
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

pub(crate) fn pixel_shuffle_forward<S: Scalar>(t: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = require4("pixel_shuffle", t)?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape("pixel_shuffle", format!("{c} channels not divisible by {r}^2")));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = t.data();
    let mut out = vec![S::zero(); src.len()];
    for s in 0..n {
        for oc in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ic = oc * r * r + i * r + j;
                    let plane = &src[(s * c + ic) * h * w..(s * c + ic + 1) * h * w];
                    let dst = &mut out[(s * co + oc) * ho * wo..(s * co + oc + 1) * ho * wo];
                    for y in 0..h {
                        for x in 0..w {
                            dst[(y * r + i) * wo + x * r + j] = plane[y * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, ho, wo], out)
}

/// Inverse of [`pixel_shuffle_forward`].
pub(crate) fn pixel_unshuffle_forward<S: Scalar>(t: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = require4("pixel_unshuffle", t)?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("{h}x{w} not divisible by {r}")));
    }
    let (hi, wi) = (h / r, w / r);
    let ci = c * r * r;
    let src = t.data();
    let mut out = vec![S::zero(); src.len()];
    for s in 0..n {
        for oc in 0..c {
            let plane = &src[(s * c + oc) * h * w..(s * c + oc + 1) * h * w];
            for i in 0..r {
                for j in 0..r {
                    let ic = oc * r * r + i * r + j;
                    let dst = &mut out[(s * ci + ic) * hi * wi..(s * ci + ic + 1) * hi * wi];
                    for y in 0..hi {
                        for x in 0..wi {
                            dst[y * wi + x] = plane[(y * r + i) * w + x * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, ci, hi, wi], out)
}

pub fn pixel_unshuffle<S: Scalar>(t: &Tensor<S>, r: usize) -> Result<Tensor<S>> {
    pixel_unshuffle_forward(t, r)
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec) -> Result<Self> {
        let d = spec.dilation.max(1);
        let span_h = d * (kh.max(1) - 1) + 1;
        let span_w = d * (kw.max(1) - 1) + 1;
        if kh == 0 || kw == 0 || h + 2 * spec.padding < span_h || w + 2 * spec.padding < span_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} dilation {d} padding {} on {h}x{w}", spec.padding),
            ));
        }
        Ok(Self {
            cin,
            h,
            w,
            kh,
            kw,
            dilation: d,
            padding: spec.padding,
            ho: h + 2 * spec.padding - span_h + 1,
            wo: w + 2 * spec.padding - span_w + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.padding == 0
    }

    /// Valid output column range `[lo, hi)` for kernel column `kx`, and the input offset.
    fn col_span(&self, kx: usize) -> (usize, usize, isize) {
        let shift = (kx * self.dilation) as isize - self.padding as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((self.w as isize - shift).max(0) as usize).min(self.wo);
        (lo, hi.max(lo), shift)
    }

    fn im2col<S: Scalar>(&self, x: &[S], col: &mut Vec<S>) {
        let p = self.ho * self.wo;
        col.clear();
        col.resize(self.k() * p, S::zero());
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let yshift = (ky * self.dilation) as isize - self.padding as isize;
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (lo, hi, xshift) = self.col_span(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = oy as isize + yshift;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..];
                        let start = (lo as isize + xshift) as usize;
                        dst[oy * self.wo + lo..oy * self.wo + hi].copy_from_slice(&src[start..start + hi - lo]);
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, col: &[S], dx: &mut [S]) {
        let p = self.ho * self.wo;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let yshift = (ky * self.dilation) as isize - self.padding as isize;
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi, xshift) = self.col_span(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = oy as isize + yshift;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let start = iy as usize * self.w + (lo as isize + xshift) as usize;
                        for (d, &s) in plane[start..start + hi - lo].iter_mut().zip(&src[oy * self.wo + lo..oy * self.wo + hi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Settings for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Elements probed per input; larger inputs are sampled.
    pub max_per_input: usize,
    /// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Seed for element sampling.
    pub seed: u64,
    /// Mode and seed of every graph built during the check.
    pub mode: Mode,
    pub graph_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_per_input: 64,
            floor: 1e-3,
            seed: 0,
            mode: Mode::Train,
            graph_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<GradMismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `inputs` pairs each tensor with whether it is differentiated. `build`
/// receives a fresh graph and the leaf variables for `inputs`, and returns the
/// scalar output. Every evaluation starts from an identically seeded graph so
/// stochastic layers draw the same masks.
pub fn check_gradients<F>(inputs: &[(Tensor<f64>, bool)], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new(cfg.mode, cfg.graph_seed);
        let vars: Vec<Var> = values
            .iter()
            .zip(inputs)
            .map(|(t, (_, rg))| g.leaf(t.clone(), *rg))
            .collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let (g, vars, out) = eval(&values)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };

    for (which, &(ref _t, differentiate)) in inputs.iter().enumerate() {
        if !differentiate {
            continue;
        }
        let numel = values[which].numel();
        let zeros = Tensor::zeros(values[which].shape());
        let analytic = grads.get(vars[which]).unwrap_or(&zeros).clone();
        let elements: Vec<usize> = if numel <= cfg.max_per_input {
            (0..numel).collect()
        } else {
            (0..cfg.max_per_input).map(|_| rng.gen_range(0..numel)).collect()
        };
        for e in elements {
            let orig = values[which].data()[e];
            values[which].data_mut()[e] = orig + cfg.eps;
            let (gp, _, op) = eval(&values)?;
            let fp = gp.value(op).data()[0];
            values[which].data_mut()[e] = orig - cfg.eps;
            let (gm, _, om) = eval(&values)?;
            let fm = gm.value(om).data()[0];
            values[which].data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = Some(GradMismatch {
                    input: which,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
