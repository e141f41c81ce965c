//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass. Each
//! node keeps its value and a backward closure mapping the output gradient to
//! gradients of its parents. [`Graph::backward`] walks the tape once in
//! reverse; interior gradients are dropped as soon as they have been
//! propagated.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tensor_core::conv::{conv2d, conv2d_backward};
use crate::tensor_core::deform::{deform_conv2d_backward, deform_conv2d_raw, DeformNeeds};
use crate::tensor_core::{sigmoid, ConvOpts};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Everything a backward closure may read.
pub struct Backprop<'a, T> {
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each parent needs a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&Backprop<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    track_params: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: HashMap::new(),
            track_params: true,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Forward-only graph: parameters are constants and no backward state is kept.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph was built without a parameter store");
        let v = self.push_leaf(store.value(id).clone(), self.track_params);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a custom operation. The closure receives the output gradient and
    /// must return one entry per parent (`None` where `needs` is false).
    pub fn custom(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss elements", 1, self.value(loss).len()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = Backprop {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, "operands", sa, sb));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- layers

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, opts: ConvOpts) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(weight), bias.map(|b| self.value(b)), &opts)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.custom(
            out,
            &parents,
            Box::new(move |ctx| {
                let g = conv2d_backward(ctx.inputs[0], ctx.inputs[1], &opts, ctx.grad, ctx.needs[0])
                    .expect("shapes validated in forward");
                let mut v = vec![g.input, Some(g.weight)];
                if has_bias {
                    v.push(Some(g.bias));
                }
                v
            }),
        ))
    }

    /// Modulated deformable convolution; see [`crate::tensor_core::OffsetField`] for the layout.
    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        masks: Var,
        weight: Var,
        bias: Option<Var>,
        opts: ConvOpts,
    ) -> Result<Var> {
        let out = deform_conv2d_raw(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            self.value(offsets),
            self.value(masks),
            &opts,
        )?;
        let mut parents = vec![x, offsets, masks, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.custom(
            out,
            &parents,
            Box::new(move |ctx| {
                let needs = DeformNeeds {
                    input: ctx.needs[0],
                    offsets: ctx.needs[1],
                    masks: ctx.needs[2],
                };
                let g = deform_conv2d_backward(ctx.inputs[0], ctx.inputs[3], ctx.inputs[1], ctx.inputs[2], &opts, ctx.grad, needs)
                    .expect("shapes validated in forward");
                let mut v = vec![g.input, g.offsets, g.masks, Some(g.weight)];
                if has_bias {
                    v.push(Some(g.bias));
                }
                v
            }),
        ))
    }

    // ----------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.custom(out, &[a, b], Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-T::one()))]),
        ))
    }

    /// `a * s` for a constant `s`.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.custom(out, &[a], Box::new(move |ctx| vec![Some(ctx.grad.scale(s))]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { v * slope });
        self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                vec![Some(zip(ctx.grad, ctx.inputs[0], |g, x| if x > T::zero() { g } else { g * slope }))]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.custom(
            out,
            &[a],
            Box::new(|ctx| vec![Some(zip(ctx.grad, ctx.inputs[0], |g, x| if x > T::zero() { g } else { T::zero() }))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.custom(
            out,
            &[a],
            Box::new(|ctx| vec![Some(zip(ctx.grad, ctx.output, |g, s| g * s * (T::one() - s)))]),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.exp());
        self.custom(out, &[a], Box::new(|ctx| vec![Some(zip(ctx.grad, ctx.output, |g, e| g * e))]))
    }

    /// Broadcasting product of a rank-3 `a` with `b`, where every dimension of
    /// `b` equals that of `a` or is 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).chw()?, self.value(b).chw()?);
        let bc = Bcast::new(sa, sb)?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = va.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= vb.data()[bc.map(i)];
        }
        Ok(self.custom(
            out,
            &[a, b],
            Box::new(move |ctx| {
                let (va, vb, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let da = ctx.needs[0].then(|| {
                    let mut d = g.clone();
                    for (i, v) in d.data_mut().iter_mut().enumerate() {
                        *v *= vb.data()[bc.map(i)];
                    }
                    d
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = Tensor::zeros(vb.shape());
                    for (i, (&gv, &av)) in g.data().iter().zip(va.data()).enumerate() {
                        d.data_mut()[bc.map(i)] += gv * av;
                    }
                    d
                });
                vec![da, db]
            }),
        ))
    }

    // ------------------------------------------------------------ structural

    /// Concatenate rank-3 tensors along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&vals)?;
        let sizes: Vec<usize> = vals.iter().map(|v| v.len()).collect();
        Ok(self.custom(
            out,
            parts,
            Box::new(move |ctx| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(&ctx.inputs)
                    .zip(&ctx.needs)
                    .map(|((&n, inp), &need)| {
                        let slice = &ctx.grad.data()[start..start + n];
                        start += n;
                        need.then(|| Tensor::from_vec(inp.shape(), slice.to_vec()).expect("slice size"))
                    })
                    .collect()
            }),
        ))
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_channels(start, len)?;
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let (_, h, w) = ctx.inputs[0].dims3();
                let mut d = Tensor::zeros(ctx.inputs[0].shape());
                d.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(ctx.grad.data());
                vec![Some(d)]
            }),
        ))
    }

    // ------------------------------------------------------------ reductions

    /// Global average pool to `[c, 1, 1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let pooled = crate::tensor_core::global_avg_pool(self.value(a))?;
        let out = Tensor::from_vec(&[c, 1, 1], pooled)?;
        let inv = T::lit(1.0 / (h * w) as f64);
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut d = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let g = ctx.grad.data()[ci] * inv;
                    d.data_mut()[ci * h * w..(ci + 1) * h * w].fill(g);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Channel-wise mean, `[1, h, w]`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let n = h * w;
        let inv = T::lit(1.0 / c as f64);
        let mut out = Tensor::zeros(&[1, h, w]);
        for ci in 0..c {
            for (o, &v) in out.data_mut().iter_mut().zip(&self.value(a).data()[ci * n..(ci + 1) * n]) {
                *o += v;
            }
        }
        let out = out.scale(inv);
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut d = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for (o, &g) in d.data_mut()[ci * n..(ci + 1) * n].iter_mut().zip(ctx.grad.data()) {
                        *o = g * inv;
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Channel-wise max, `[1, h, w]`; the gradient goes to the first maximiser.
    pub fn channel_max(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let n = h * w;
        let v = self.value(a).data();
        let mut arg = vec![0usize; n];
        let mut out = Tensor::full(&[1, h, w], T::neg_infinity());
        for ci in 0..c {
            for p in 0..n {
                if v[ci * n + p] > out.data()[p] {
                    out.data_mut()[p] = v[ci * n + p];
                    arg[p] = ci;
                }
            }
        }
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut d = Tensor::zeros(&[c, h, w]);
                for (p, &ci) in arg.iter().enumerate() {
                    d.data_mut()[ci * n + p] = ctx.grad.data()[p];
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Bilinear ×2 upsampling (half-pixel centres, edge clamped).
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        let (ys, xs) = (upsample_taps(h), upsample_taps(w));
        let (h2, w2) = (2 * h, 2 * w);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[c, h2, w2]);
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            let dst = &mut out.data_mut()[ci * h2 * w2..(ci + 1) * h2 * w2];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let (ly, lx) = (T::lit(ly), T::lit(lx));
                    let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                    dst[oy * w2 + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        Ok(self.custom(
            out,
            &[a],
            Box::new(move |ctx| {
                let mut d = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    let g = &ctx.grad.data()[ci * h2 * w2..(ci + 1) * h2 * w2];
                    let plane = &mut d.data_mut()[ci * h * w..(ci + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let (ly, lx) = (T::lit(ly), T::lit(lx));
                            let gv = g[oy * w2 + ox];
                            plane[y0 * w + x0] += gv * (T::one() - ly) * (T::one() - lx);
                            plane[y0 * w + x1] += gv * (T::one() - ly) * lx;
                            plane[y1 * w + x0] += gv * ly * (T::one() - lx);
                            plane[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Mean absolute difference, a single-element tensor.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("l1", a, b)?;
        let n = T::lit(self.value(a).len() as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        Ok(self.custom(
            Tensor::scalar(s / n),
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] / n;
                let d = zip(ctx.inputs[0], ctx.inputs[1], |x, y| {
                    if x > y {
                        g
                    } else if x < y {
                        -g
                    } else {
                        T::zero()
                    }
                });
                let neg = ctx.needs[1].then(|| d.scale(-T::one()));
                vec![Some(d), neg]
            }),
        ))
    }

    /// `sum_i w_i * x_i` over single-element terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum", "term elements", 1, self.value(v).len()));
            }
            s += self.value(v).data()[0] * w;
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.custom(
            Tensor::scalar(s),
            &parents,
            Box::new(move |ctx| weights.iter().map(|&w| Some(Tensor::scalar(ctx.grad.data()[0] * w))).collect()),
        ))
    }

    /// Weighted mean binary cross-entropy on logits: `sum w_i bce(x_i, y_i) / sum w_i`.
    /// Returns zero when the weights sum to zero.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != targets.shape() || x.shape() != weights.shape() {
            return Err(Error::shape("bce", "targets", x.shape(), targets.shape()));
        }
        let wsum: T = weights.sum();
        let norm = if wsum > T::zero() { T::one() / wsum } else { T::zero() };
        let mut s = T::zero();
        for ((&xv, &y), &w) in x.data().iter().zip(targets.data()).zip(weights.data()) {
            if w != T::zero() {
                s += w * bce_logit(xv, y);
            }
        }
        let (targets, weights) = (targets.clone(), weights.clone());
        Ok(self.custom(
            Tensor::scalar(s * norm),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] * norm;
                let mut d = Tensor::zeros(ctx.inputs[0].shape());
                for (i, o) in d.data_mut().iter_mut().enumerate() {
                    let w = weights.data()[i];
                    if w != T::zero() {
                        *o = g * w * (sigmoid(ctx.inputs[0].data()[i]) - targets.data()[i]);
                    }
                }
                vec![Some(d)]
            }),
        ))
    }
}

/// Numerically stable `-(y ln s(x) + (1 - y) ln(1 - s(x)))`.
pub fn bce_logit<T: Scalar>(x: T, y: T) -> T {
    x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p()
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Source taps `(i0, i1, frac)` for each output index of a ×2 upsample.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Index map from a rank-3 output position to the broadcast operand.
#[derive(Clone, Copy)]
struct Bcast {
    a: (usize, usize, usize),
    b: (usize, usize, usize),
}

impl Bcast {
    fn new(a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<Self> {
        let ok = |x: usize, y: usize| y == x || y == 1;
        if !(ok(a.0, b.0) && ok(a.1, b.1) && ok(a.2, b.2)) {
            return Err(Error::shape("mul", "broadcast operand", a, b));
        }
        Ok(Self { a, b })
    }

    #[inline]
    fn map(&self, i: usize) -> usize {
        let (_, h, w) = self.a;
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (bc, bh, bw) = self.b;
        let c = if bc == 1 { 0 } else { c };
        let y = if bh == 1 { 0 } else { y };
        let x = if bw == 1 { 0 } else { x };
        (c * bh + y) * bw + x
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every parameter touched by the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }
}
