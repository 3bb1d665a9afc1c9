//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in execution order. Values are
//! referred to by [`Var`] handles. [`Graph::backward`] walks the tape in
//! reverse once, so every recorded op is visited exactly once per call.
//!
//! Leaf gradients accumulate across repeated `backward` calls until
//! [`Graph::zero_grad`]; gradients of intermediate nodes are recomputed from
//! scratch on every call.

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvArgs, Needs};
use crate::kernels::deform::{self, DeformNeeds};
use crate::kernels::dynamic;
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        args: ConvArgs,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    DeformConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        offsets: Option<Var>,
        modulation: Var,
        dilation: usize,
    },
    DynamicFilter {
        features: Var,
        filters: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulChannel {
        attn: Var,
        features: Var,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    SoftmaxChannels(Var),
    Mse(Var, Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::DeformConv2d { .. } => "deform_conv2d",
            Op::DynamicFilter { .. } => "apply_dynamic_filter",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulChannel { .. } => "mul_channel",
            Op::Concat(_) => "concat_channels",
            Op::Narrow { .. } => "narrow_channels",
            Op::SoftmaxChannels(_) => "softmax_channels",
            Op::Mse(..) => "mse",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<S: Real>(dst: &mut Tensor<S>, src: &Tensor<S>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d = *d + *s;
    }
}

fn zip_map<S: Real>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf that accumulates gradients.
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drop every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shapes(op, sa, sb));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, args: ConvArgs) -> Result<Var> {
        let out =
            conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), args)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Conv2d { x, w, b, args }, &inputs)
    }

    /// Transposed convolution producing `stride ×` the input resolution.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv::deconv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            out,
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Modulated deformable convolution. `offsets = None` pins every
    /// displacement to zero while keeping the modulation.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        offsets: Option<Var>,
        modulation: Var,
        dilation: usize,
    ) -> Result<Var> {
        let out = deform::deform_conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            offsets.map(|o| self.value(o)),
            self.value(modulation),
            dilation,
        )?;
        let inputs: Vec<Var> = [Some(x), Some(w), b, offsets, Some(modulation)]
            .into_iter()
            .flatten()
            .collect();
        self.push(
            out,
            Op::DeformConv2d {
                x,
                w,
                b,
                offsets,
                modulation,
                dilation,
            },
            &inputs,
        )
    }

    pub fn apply_dynamic_filter(&mut self, features: Var, filters: Var) -> Result<Var> {
        let out = dynamic::dynamic_filter_forward(self.value(features), self.value(filters))?;
        self.push(
            out,
            Op::DynamicFilter { features, filters },
            &[features, filters],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = S::of(factor);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// Multiply every channel of `features` by the single-channel `attn`.
    pub fn mul_channel(&mut self, attn: Var, features: Var) -> Result<Var> {
        let (sa, sf) = (self.shape(attn), self.shape(features));
        if sa != sf.with_c(1) {
            return Err(Error::shapes("mul_channel", sa, sf));
        }
        let a = self.value(attn);
        let f = self.value(features);
        let out = Tensor::from_fn(sf, |n, c, y, x| a.at(n, 0, y, x) * f.at(n, c, y, x));
        self.push(out, Op::MulChannel { attn, features }, &[attn, features])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat_channels", "no inputs"))?;
        let s0 = self.shape(first);
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.with_c(s0.c) != s0 {
                return Err(Error::shapes("concat_channels", s0, s));
            }
            c_total += s.c;
        }
        let shape = s0.with_c(c_total);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s0.n {
            for &v in xs {
                data.extend_from_slice(self.value(v).item(n));
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        self.push(out, Op::Concat(xs.to_vec()), xs)
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return Err(Error::dims(
                "narrow_channels",
                s,
                format!("channels {start}..{}", start + len),
            ));
        }
        let shape = s.with_c(len);
        let t = self.value(x);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            let item = t.item(n);
            data.extend_from_slice(&item[start * s.plane()..(start + len) * s.plane()]);
        }
        let out = Tensor::from_vec(shape, data)?;
        self.push(out, Op::Narrow { x, start }, &[x])
    }

    /// Inverse of [`Graph::concat_channels`] for the given channel widths.
    pub fn split_channels(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let total: usize = widths.iter().sum();
        if total != self.shape(x).c {
            return Err(Error::dims(
                "split_channels",
                self.shape(x),
                format!("widths {widths:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.narrow_channels(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Softmax across channels independently at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let t = self.value(x);
        let mut out = Tensor::zeros(s);
        let plane = s.plane();
        for n in 0..s.n {
            let src = t.item(n);
            let start = out.index(n, 0, 0, 0);
            let dst = &mut out.data_mut()[start..start + s.item()];
            for p in 0..plane {
                let mut max = S::neg_infinity();
                for c in 0..s.c {
                    max = max.max(src[c * plane + p]);
                }
                let mut sum = 0.0f64;
                for c in 0..s.c {
                    let e = (src[c * plane + p] - max).exp();
                    dst[c * plane + p] = e;
                    sum += e.f64();
                }
                let inv = S::of(1.0 / sum);
                for c in 0..s.c {
                    dst[c * plane + p] = dst[c * plane + p] * inv;
                }
            }
        }
        self.push(out, Op::SoftmaxChannels(x), &[x])
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = x.f64() - y.f64();
                d * d
            })
            .sum();
        let n = self.value(a).numel().max(1) as f64;
        self.push(Tensor::scalar(S::of(sum / n)), Op::Mse(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        self.push(Tensor::scalar(S::of(total)), Op::Sum(x), &[x])
    }

    /// Accumulate `d loss / d v` into every reachable leaf with
    /// `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract(
                "backward",
                "loss does not depend on any trainable value",
            ));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_op(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => add_into(acc, &dv),
                    None => node.grad = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let mut out = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, args } => {
                let needs = Needs {
                    input: self.wants(x),
                    weight: self.wants(w),
                    bias: b.is_some_and(|b| self.wants(b)),
                };
                let gr = conv::conv2d_backward(self.value(x), self.value(w), g, args, needs)?;
                push_grads(
                    &mut out,
                    [(Some(x), gr.input), (Some(w), gr.weight), (b, gr.bias)],
                );
            }
            &Op::Deconv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let needs = Needs {
                    input: self.wants(x),
                    weight: self.wants(w),
                    bias: b.is_some_and(|b| self.wants(b)),
                };
                let gr =
                    conv::deconv2d_backward(self.value(x), self.value(w), g, stride, pad, needs)?;
                push_grads(
                    &mut out,
                    [(Some(x), gr.input), (Some(w), gr.weight), (b, gr.bias)],
                );
            }
            &Op::DeformConv2d {
                x,
                w,
                b,
                offsets,
                modulation,
                dilation,
            } => {
                let needs = DeformNeeds {
                    input: self.wants(x),
                    weight: self.wants(w),
                    bias: b.is_some_and(|b| self.wants(b)),
                    offsets: offsets.is_some_and(|o| self.wants(o)),
                    modulation: self.wants(modulation),
                };
                let gr = deform::deform_conv2d_backward(
                    self.value(x),
                    self.value(w),
                    offsets.map(|o| self.value(o)),
                    self.value(modulation),
                    dilation,
                    g,
                    needs,
                )?;
                push_grads(
                    &mut out,
                    [
                        (Some(x), gr.input),
                        (Some(w), gr.weight),
                        (b, gr.bias),
                        (offsets, gr.offsets),
                        (Some(modulation), gr.modulation),
                    ],
                );
            }
            &Op::DynamicFilter { features, filters } => {
                let (df, dk) = dynamic::dynamic_filter_backward(
                    self.value(features),
                    self.value(filters),
                    g,
                    self.wants(features),
                    self.wants(filters),
                )?;
                push_grads(&mut out, [(Some(features), df), (Some(filters), dk)]);
            }
            &Op::Relu(x) => {
                out.push((
                    x,
                    zip_map(
                        self.value(x),
                        g,
                        |v, d| if v > S::zero() { d } else { S::zero() },
                    ),
                ));
            }
            &Op::Sigmoid(x) => {
                out.push((x, zip_map(&node.value, g, |y, d| d * y * (S::one() - y))));
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.map(|d| -d)));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, zip_map(g, self.value(b), |d, y| d * y)));
                }
                if self.wants(b) {
                    out.push((b, zip_map(g, self.value(a), |d, x| d * x)));
                }
            }
            &Op::Scale(x, f) => {
                let f = S::of(f);
                out.push((x, g.map(|d| d * f)));
            }
            &Op::MulChannel { attn, features } => {
                let a = self.value(attn);
                let f = self.value(features);
                let s = f.shape();
                if self.wants(features) {
                    out.push((
                        features,
                        Tensor::from_fn(s, |n, c, y, x| g.at(n, c, y, x) * a.at(n, 0, y, x)),
                    ));
                }
                if self.wants(attn) {
                    let da = Tensor::from_fn(a.shape(), |n, _, y, x| {
                        let mut acc = 0.0f64;
                        for c in 0..s.c {
                            acc += (g.at(n, c, y, x) * f.at(n, c, y, x)).f64();
                        }
                        S::of(acc)
                    });
                    out.push((attn, da));
                }
            }
            Op::Concat(xs) => {
                let s = g.shape();
                let mut start = 0;
                for &v in xs {
                    let vs = self.shape(v);
                    if self.wants(v) {
                        out.push((v, slice_channels(g, start, vs.c)));
                    }
                    start += vs.c;
                    debug_assert!(start <= s.c);
                }
            }
            &Op::Narrow { x, start } => {
                let xs = self.shape(x);
                let gs = g.shape();
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    let base = dx.index(n, start, 0, 0);
                    dx.data_mut()[base..base + gs.item()].copy_from_slice(g.item(n));
                }
                out.push((x, dx));
            }
            &Op::SoftmaxChannels(x) => {
                let y = &node.value;
                let s = y.shape();
                let plane = s.plane();
                let mut dx = Tensor::zeros(s);
                for n in 0..s.n {
                    let (yi, gi) = (y.item(n), g.item(n));
                    let base = dx.index(n, 0, 0, 0);
                    let dst = &mut dx.data_mut()[base..base + s.item()];
                    for p in 0..plane {
                        let mut dot = 0.0f64;
                        for c in 0..s.c {
                            dot += (yi[c * plane + p] * gi[c * plane + p]).f64();
                        }
                        let dot = S::of(dot);
                        for c in 0..s.c {
                            let j = c * plane + p;
                            dst[j] = yi[j] * (gi[j] - dot);
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::Mse(a, b) => {
                let ta = self.value(a);
                let k = S::of(2.0 / ta.numel().max(1) as f64) * g.data()[0];
                let da = zip_map(ta, self.value(b), |x, y| k * (x - y));
                if self.wants(b) {
                    out.push((b, da.map(|v| -v)));
                }
                out.push((a, da));
            }
            &Op::Sum(x) => {
                out.push((x, Tensor::full(self.shape(x), g.data()[0])));
            }
        }
        Ok(out)
    }
}

fn push_grads<S, const N: usize>(
    out: &mut Vec<(Var, Tensor<S>)>,
    pairs: [(Option<Var>, Option<Tensor<S>>); N],
) {
    for (v, t) in pairs {
        if let (Some(v), Some(t)) = (v, t) {
            out.push((v, t));
        }
    }
}

fn slice_channels<S: Real>(t: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let s = t.shape();
    let shape = s.with_c(len);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..s.n {
        data.extend_from_slice(&t.item(n)[start * s.plane()..(start + len) * s.plane()]);
    }
    Tensor::from_vec(shape, data).expect("slice shape")
}
