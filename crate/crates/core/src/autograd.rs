//! Reverse-mode differentiation over a recorded tape.
//!
//! Only the operators the network, the extractor and the losses need are
//! supported. Values are recorded eagerly; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that depends
//! on a trainable leaf.

use crate::flow::{check_flow_dims, FlowField, OcclusionMask, WarpPlan};
use crate::ops::{self, NormCache, Padding};
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    /// Result of an operation whose inputs need no gradient.
    Detached,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Relu(Var),
    Upsample(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Warp {
        x: Var,
        plan: WarpPlan,
    },
    Luminance(Var),
    BroadcastChannels(Var),
    Gram(Var),
    MeanSquaredError(Var, Var),
    SquaredDistance {
        x: Var,
        target: Tensor<T>,
    },
    TotalVariation(Var),
    MaskedMeanSquare {
        x: Var,
        mask: OcclusionMask,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: Shape, b: Shape) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: a.to_string(),
        actual: b.to_string(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A frozen input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Detached };
        self.push(value, op, rg)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var, TensorError> {
        let y = ops::conv2d_forward(self.value(x), self.value(weight), Some(self.value(bias)), stride, padding)?;
        Ok(self.record(
            y,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            },
            &[x, weight, bias],
        ))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (y, cache) = ops::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.record(y, Op::InstanceNorm { x, gamma, beta, cache }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.record(y, Op::Relu(x), &[x])
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Var {
        let y = ops::upsample_nearest(self.value(x));
        self.record(y, Op::Upsample(x), &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (y, argmax) = ops::max_pool2(self.value(x))?;
        Ok(self.record(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = self
            .value(a)
            .zip_map(self.value(b), |p, q| p + q)
            .map_err(|_| mismatch("add", self.value(a).shape(), self.value(b).shape()))?;
        Ok(self.record(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = self
            .value(a)
            .zip_map(self.value(b), |p, q| p - q)
            .map_err(|_| mismatch("sub", self.value(a).shape(), self.value(b).shape()))?;
        Ok(self.record(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.record(y, Op::Scale(x, factor), &[x])
    }

    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var, TensorError> {
        let y = ops::channel_affine(self.value(x), &scale, &shift)?;
        Ok(self.record(y, Op::ChannelAffine { x, scale }, &[x]))
    }

    pub fn warp(&mut self, x: Var, flow: &FlowField) -> Result<Var, TensorError> {
        check_flow_dims("warp", flow.dims(), self.value(x).shape())?;
        let plan = WarpPlan::new(flow);
        let y = plan.forward(self.value(x));
        Ok(self.record(y, Op::Warp { x, plan }, &[x]))
    }

    pub fn luminance(&mut self, x: Var) -> Result<Var, TensorError> {
        let y = ops::luminance(self.value(x))?;
        Ok(self.record(y, Op::Luminance(x), &[x]))
    }

    /// Repeats a single-channel tensor across `channels` channels.
    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Result<Var, TensorError> {
        let s = self.value(x).shape();
        if s.c != 1 {
            return Err(mismatch("broadcast_channels", Shape::new(s.n, 1, s.h, s.w), s));
        }
        let src = self.value(x);
        let y = Tensor::from_fn(Shape::new(s.n, channels, s.h, s.w), |n, _, h, w| src.at(n, 0, h, w));
        Ok(self.record(y, Op::BroadcastChannels(x), &[x]))
    }

    /// `G = F F^T / (C H W)` for a single-sample feature map, returned as a
    /// `(1, 1, C, C)` tensor.
    pub fn gram(&mut self, x: Var) -> Result<Var, TensorError> {
        let g = gram_matrix(self.value(x))?;
        Ok(self.record(g, Op::Gram(x), &[x]))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mse", va.shape(), vb.shape()));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
            .sum();
        let y = Tensor::scalar(T::from_f64(s / va.len() as f64));
        Ok(self.record(y, Op::MeanSquaredError(a, b), &[a, b]))
    }

    /// Sum over all elements of `(x - target)^2`.
    pub fn squared_distance(&mut self, x: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.shape() != target.shape() {
            return Err(mismatch("squared_distance", target.shape(), vx.shape()));
        }
        let s: f64 = vx
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
            .sum();
        let y = Tensor::scalar(T::from_f64(s));
        Ok(self.record(
            y,
            Op::SquaredDistance {
                x,
                target: target.clone(),
            },
            &[x],
        ))
    }

    /// Squared differences of vertical and horizontal neighbours, summed and
    /// divided by the element count.
    pub fn total_variation(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s = v.shape();
        if s.h < 2 || s.w < 2 {
            return Err(TensorError::TooSmall {
                op: "total_variation",
                h: s.h,
                w: s.w,
                kernel: 2,
            });
        }
        let y = Tensor::scalar(T::from_f64(tv_value(v)));
        Ok(self.record(y, Op::TotalVariation(x), &[x]))
    }

    /// Mean of `x^2` over traceable pixels, all channels and samples. Zero
    /// when nothing is traceable.
    pub fn masked_mean_square(&mut self, x: Var, mask: &OcclusionMask) -> Result<Var, TensorError> {
        let v = self.value(x);
        check_flow_dims("masked_mean_square", mask.dims(), v.shape())?;
        let y = Tensor::scalar(T::from_f64(masked_mean_square_value(v, mask)));
        Ok(self.record(y, Op::MaskedMeanSquare { x, mask: mask.clone() }, &[x]))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, TensorError> {
        let mut acc = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(TensorError::NotScalar(t.shape()));
            }
            acc += w.as_f64() * t.item().as_f64();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.record(
            Tensor::scalar(T::from_f64(acc)),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, d: Tensor<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_scaled(&d, T::one()),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf | Op::Detached => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let cg = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*weight),
                        *stride,
                        *padding,
                        &g,
                        self.requires_grad(*x),
                    )?;
                    if let Some(dx) = cg.input {
                        acc(*x, dx);
                    }
                    acc(*weight, cg.weight);
                    acc(*bias, cg.bias);
                }
                Op::InstanceNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = ops::instance_norm_backward(cache, self.value(*gamma), &g);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::Relu(x) => acc(*x, ops::relu_backward(self.value(*x), &g)),
                Op::Upsample(x) => acc(*x, ops::upsample_nearest_backward(&g)),
                Op::MaxPool { x, argmax } => {
                    acc(*x, ops::max_pool2_backward(self.value(*x).shape(), argmax, &g))
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Scale(x, f) => acc(*x, g.map(|v| v * *f)),
                Op::ChannelAffine { x, scale } => {
                    let zeros = vec![T::zero(); scale.len()];
                    acc(*x, ops::channel_affine(&g, scale, &zeros)?);
                }
                Op::Warp { x, plan } => acc(*x, plan.backward(&g)),
                Op::Luminance(x) => {
                    let s = g.shape();
                    let coef = ops::LUMA.map(T::from_f64);
                    let d = Tensor::from_fn(Shape::new(s.n, 3, s.h, s.w), |n, c, h, w| coef[c] * g.at(n, 0, h, w));
                    acc(*x, d);
                }
                Op::BroadcastChannels(x) => {
                    let s = g.shape();
                    let d = Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, h, w| {
                        (0..s.c).map(|c| g.at(n, c, h, w)).sum()
                    });
                    acc(*x, d);
                }
                Op::Gram(x) => acc(*x, gram_backward(self.value(*x), &g)),
                Op::MeanSquaredError(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = g.item() * T::from_f64(2.0 / va.len() as f64);
                    let d = va.zip_map(vb, |p, q| k * (p - q))?;
                    acc(*b, d.map(|v| -v));
                    acc(*a, d);
                }
                Op::SquaredDistance { x, target } => {
                    let k = g.item() * T::from_f64(2.0);
                    acc(*x, self.value(*x).zip_map(target, |p, q| k * (p - q))?);
                }
                Op::TotalVariation(x) => acc(*x, tv_backward(self.value(*x), g.item())),
                Op::MaskedMeanSquare { x, mask } => {
                    acc(*x, masked_mean_square_backward(self.value(*x), mask, g.item()))
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(v, Tensor::scalar(g.item() * w));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn gram_matrix<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    if s.n != 1 {
        return Err(mismatch("gram", Shape::new(1, s.c, s.h, s.w), s));
    }
    let p = s.plane();
    let norm = T::from_f64(1.0 / (s.c * p) as f64);
    let mut g = Tensor::<T>::zeros(Shape::new(1, 1, s.c, s.c));
    T::gemm(
        s.c,
        p,
        s.c,
        norm,
        x.data(),
        (p as isize, 1),
        x.data(),
        (1, p as isize),
        T::zero(),
        g.data_mut(),
        (s.c as isize, 1),
    );
    Ok(g)
}

fn gram_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let c = s.c;
    let p = s.plane();
    let norm = T::from_f64(1.0 / (c * p) as f64);
    // (dG + dG^T) F / (C H W)
    let sym = Tensor::from_fn(Shape::new(1, 1, c, c), |_, _, i, j| g.at(0, 0, i, j) + g.at(0, 0, j, i));
    let mut dx = Tensor::<T>::zeros(s);
    T::gemm(
        c,
        c,
        p,
        norm,
        sym.data(),
        (c as isize, 1),
        x.data(),
        (p as isize, 1),
        T::zero(),
        dx.data_mut(),
        (p as isize, 1),
    );
    dx
}

fn tv_value<T: Scalar>(x: &Tensor<T>) -> f64 {
    let s = x.shape();
    let mut acc = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let v = p[i * s.w + j].as_f64();
                    if i + 1 < s.h {
                        acc += (p[(i + 1) * s.w + j].as_f64() - v).powi(2);
                    }
                    if j + 1 < s.w {
                        acc += (p[i * s.w + j + 1].as_f64() - v).powi(2);
                    }
                }
            }
        }
    }
    acc / s.numel() as f64
}

fn tv_backward<T: Scalar>(x: &Tensor<T>, g: T) -> Tensor<T> {
    let s = x.shape();
    let k = g.as_f64() * 2.0 / s.numel() as f64;
    let mut dx = Tensor::<T>::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let p = x.plane(n, c).to_vec();
            let d = dx.plane_mut(n, c);
            for i in 0..s.h {
                for j in 0..s.w {
                    let at = i * s.w + j;
                    let v = p[at].as_f64();
                    let mut acc = 0.0;
                    if i + 1 < s.h {
                        acc -= p[at + s.w].as_f64() - v;
                    }
                    if i > 0 {
                        acc += v - p[at - s.w].as_f64();
                    }
                    if j + 1 < s.w {
                        acc -= p[at + 1].as_f64() - v;
                    }
                    if j > 0 {
                        acc += v - p[at - 1].as_f64();
                    }
                    d[at] = T::from_f64(k * acc);
                }
            }
        }
    }
    dx
}

fn masked_mean_square_value<T: Scalar>(x: &Tensor<T>, mask: &OcclusionMask) -> f64 {
    let s = x.shape();
    let traceable = mask.traceable_count();
    if traceable == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            for (v, &m) in x.plane(n, c).iter().zip(mask.as_slice()) {
                if m {
                    acc += v.as_f64().powi(2);
                }
            }
        }
    }
    acc / (traceable * s.c * s.n) as f64
}

fn masked_mean_square_backward<T: Scalar>(x: &Tensor<T>, mask: &OcclusionMask, g: T) -> Tensor<T> {
    let s = x.shape();
    let traceable = mask.traceable_count();
    let mut dx = Tensor::<T>::zeros(s);
    if traceable == 0 {
        return dx;
    }
    let k = T::from_f64(2.0 * g.as_f64() / (traceable * s.c * s.n) as f64);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c).to_vec();
            for ((d, v), &m) in dx.plane_mut(n, c).iter_mut().zip(src).zip(mask.as_slice()) {
                if m {
                    *d = k * v;
                }
            }
        }
    }
    dx
}
