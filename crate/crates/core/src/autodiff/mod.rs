//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already a topological order of the computation. [`Graph::backward`] walks it
//! in reverse and adds `dLoss/dNode` into the persistent `grad` of every node
//! that requires a gradient. Gradients accumulate across calls until
//! [`Graph::zero_grad`] is called.
//!
//! Only bias-add broadcasts; every other binary operation requires identical
//! shapes.

mod check;
pub(crate) mod kernels;

use std::collections::BTreeMap;

pub use check::{finite_diff_check, finite_diff_check_sampled};
pub use kernels::{conv2d, leaky_relu, pixel_shuffle, pixel_unshuffle};

use crate::error::{Error, Result};
use crate::losses::contextual::{self, CxParams, FeatureLayout};
use crate::tensor::Tensor;
use crate::wavelet;
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LeakyRelu(NodeId, f64),
    Abs(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    PixelShuffle(NodeId, usize),
    HaarDwt(NodeId),
    HaarIdwt(NodeId),
    Narrow {
        input: NodeId,
        start: usize,
        len: usize,
    },
    Concat(Vec<NodeId>),
    Blur {
        input: NodeId,
        taps: Vec<f64>,
    },
    GlobalAvgPool(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    BceWithLogits {
        logits: NodeId,
        target: f64,
    },
    Contextual {
        features: NodeId,
        target: Tensor,
        layout: FeatureLayout,
        params: CxParams,
    },
}

/// One recorded value with its gradient slot and the rule that produced it.
#[derive(Clone, Debug)]
pub struct CompGraphNode {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

impl CompGraphNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// The recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<CompGraphNode>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &CompGraphNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A constant copy of an existing node's value. Gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(CompGraphNode {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(CompGraphNode {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- operations -------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let geom = ConvGeom::resolve(self.value(input), self.value(weight), stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.o] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.value(b).shape(), geom.o),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[geom.n, geom.o, geom.oh, geom.ow], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &parents,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::contract("leaky_relu", format!("slope {slope} not in [0,1)")));
        }
        let v = kernels::leaky_relu(self.value(a), slope);
        Ok(self.push(v, Op::LeakyRelu(a, slope), &[a]))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn pixel_shuffle(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let v = kernels::pixel_shuffle(self.value(a), r)?;
        Ok(self.push(v, Op::PixelShuffle(a, r), &[a]))
    }

    /// Packed one-level Haar transform, `[N,C,H,W] -> [N,4C,H/2,W/2]`.
    pub fn haar_dwt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = wavelet::dwt2_haar_packed(self.value(a))?;
        Ok(self.push(v, Op::HaarDwt(a), &[a]))
    }

    pub fn haar_idwt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = wavelet::idwt2_haar_packed(self.value(a))?;
        Ok(self.push(v, Op::HaarIdwt(a), &[a]))
    }

    /// Channels `start..start+len` of a 4-d tensor.
    pub fn narrow_channels(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(a).dims4("narrow_channels")?;
        if start + len > c || len == 0 {
            return Err(Error::dim(
                "narrow_channels",
                format!("axis 1: range {start}..{} out of {c}", start + len),
            ));
        }
        let plane = h * w;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            let base = (s * c + start) * plane;
            out.extend_from_slice(&src[base..base + len * plane]);
        }
        let v = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.push(v, Op::Narrow { input: a, start, len }, &[a]))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_channels", "nothing to concatenate"));
        };
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!("axes 0,2,3 disagree: {:?} vs {:?}", self.value(p).shape(), self.value(first).shape()),
                ));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(n * total * h * w);
        for s in 0..n {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape()[1] * h * w;
                out.extend_from_slice(&v.data()[s * per..(s + 1) * per]);
            }
        }
        let v = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Depthwise Gaussian blur with reflect padding.
    pub fn gaussian_blur(&mut self, a: NodeId, ksize: usize, sigma: f64) -> Result<NodeId> {
        let taps = wavelet::gaussian_taps(ksize, sigma)?;
        let (n, c, h, w) = self.value(a).dims4("gaussian_lowpass")?;
        let tmp = wavelet::blur_axis(self.value(a).data(), n * c, h, w, &taps, false);
        let out = wavelet::blur_axis(&tmp, n * c, h, w, &taps, true);
        let v = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(v, Op::Blur { input: a, taps }, &[a]))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(a).dims4("global_avg_pool")?;
        let plane = h * w;
        let src = self.value(a).data();
        let out: Vec<f64> = (0..n * c)
            .map(|k| src[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let v = Tensor::new(&[n, c], out)?;
        Ok(self.push(v, Op::GlobalAvgPool(a), &[a]))
    }

    /// Affine map `[N,K] x [O,K]^T + [O] -> [N,O]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(weight).shape(), self.value(bias).shape());
        let ([n, k], [o, wk], [bo]) = (xs, ws, bs) else {
            return Err(Error::dim("linear", format!("shapes {xs:?}, {ws:?}, {bs:?}")));
        };
        let (n, k, o) = (*n, *k, *o);
        if *wk != k || *bo != o {
            return Err(Error::dim("linear", format!("shapes {xs:?}, {ws:?}, {bs:?}")));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = vec![0.0; n * o];
        for s in 0..n {
            for j in 0..o {
                let row = &wd[j * k..(j + 1) * k];
                out[s * o + j] = bd[j] + row.iter().zip(&xd[s * k..(s + 1) * k]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let v = Tensor::new(&[n, o], out)?;
        Ok(self.push(
            v,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
            &[x, weight, bias],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a fixed label,
    /// evaluated in the overflow-free form `max(z,0) - z*t + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: f64) -> NodeId {
        let v = Tensor::scalar(bce_value(self.value(logits), target));
        self.push(v, Op::BceWithLogits { logits, target }, &[logits])
    }

    /// Batch mean of `-ln CX` between feature maps `[N, D, Hp, Wp]`; the
    /// target features are constant.
    pub fn contextual(&mut self, features: NodeId, target: Tensor, params: CxParams) -> Result<NodeId> {
        let (n, d, hp, wp) = self.value(features).dims4("contextual_loss")?;
        self.value(features).ensure_same_shape(&target, "contextual_loss")?;
        if hp * wp < 2 {
            return Err(Error::contract("contextual_loss", "need at least 2 patches"));
        }
        let layout = FeatureLayout {
            batch: n,
            dim: d,
            positions: hp * wp,
        };
        let v = Tensor::scalar(contextual::loss(layout, self.value(features).data(), target.data(), params));
        Ok(self.push(
            v,
            Op::Contextual {
                features,
                target,
                layout,
                params,
            },
            &[features],
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates `dLoss/dNode` into every reachable node that requires a
    /// gradient. `loss` must hold exactly one value.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each of its parents.
    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = [self.wants(*input), self.wants(*weight), bias.is_some_and(|b| self.wants(b))];
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    need,
                );
                let mut v = Vec::new();
                if let Some(gi) = grads.input {
                    v.push((*input, Tensor::new(self.value(*input).shape(), gi)?));
                }
                if let Some(gw) = grads.weight {
                    v.push((*weight, Tensor::new(self.value(*weight).shape(), gw)?));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    v.push((*b, Tensor::new(&[geom.o], gb)?));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.value(*b), |x, y| x * y)?),
                (*b, g.zip_map(self.value(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                vec![(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { s * gv })?)]
            }
            Op::Abs(a) => vec![(*a, g.zip_map(self.value(*a), |gv, x| gv * sign(x))?)],
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                vec![(*a, Tensor::full(self.value(*a).shape(), g.item() / n))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.value(*a).shape())?)],
            Op::PixelShuffle(a, r) => vec![(*a, kernels::pixel_unshuffle(g, *r)?)],
            // Orthonormal transform: adjoint == inverse.
            Op::HaarDwt(a) => vec![(*a, wavelet::idwt2_haar_packed(g)?)],
            Op::HaarIdwt(a) => vec![(*a, wavelet::dwt2_haar_packed(g)?)],
            Op::Narrow { input, start, len } => {
                let (n, c, h, w) = self.value(*input).dims4("narrow_channels")?;
                let plane = h * w;
                let mut out = vec![0.0; n * c * plane];
                for s in 0..n {
                    let dst = (s * c + start) * plane;
                    let src = s * len * plane;
                    out[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                }
                vec![(*input, Tensor::new(self.value(*input).shape(), out)?)]
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = g.dims4("concat_channels")?;
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    let mut out = Vec::with_capacity(n * c * h * w);
                    for s in 0..n {
                        let base = (s * total + offset) * h * w;
                        out.extend_from_slice(&g.data()[base..base + c * h * w]);
                    }
                    offset += c;
                    v.push((p, Tensor::new(self.value(p).shape(), out)?));
                }
                v
            }
            Op::Blur { input, taps } => {
                let (n, c, h, w) = g.dims4("gaussian_lowpass")?;
                let tmp = wavelet::blur_axis_adjoint(g.data(), n * c, h, w, taps, true);
                let out = wavelet::blur_axis_adjoint(&tmp, n * c, h, w, taps, false);
                vec![(*input, Tensor::new(g.shape(), out)?)]
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = self.value(*a).dims4("global_avg_pool")?;
                let plane = (h * w) as f64;
                let out: Vec<f64> = (0..n * c)
                    .flat_map(|k| std::iter::repeat_n(g.data()[k] / plane, h * w))
                    .collect();
                vec![(*a, Tensor::new(&[n, c, h, w], out)?)]
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, k) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                let mut gx = vec![0.0; n * k];
                let mut gw = vec![0.0; o * k];
                let mut gb = vec![0.0; o];
                for s in 0..n {
                    for j in 0..o {
                        let gv = g.data()[s * o + j];
                        gb[j] += gv;
                        for t in 0..k {
                            gx[s * k + t] += gv * w.data()[j * k + t];
                            gw[j * k + t] += gv * x.data()[s * k + t];
                        }
                    }
                }
                vec![
                    (*input, Tensor::new(&[n, k], gx)?),
                    (*weight, Tensor::new(&[o, k], gw)?),
                    (*bias, Tensor::new(&[o], gb)?),
                ]
            }
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits);
                let n = z.len() as f64;
                let gv = g.item();
                vec![(*logits, z.map(|v| gv * (sigmoid(v) - target) / n))]
            }
            Op::Contextual {
                features,
                target,
                layout,
                params,
            } => {
                let grad = contextual::loss_grad(*layout, self.value(*features).data(), target.data(), *params, g.item());
                vec![(*features, Tensor::new(self.value(*features).shape(), grad)?)]
            }
        };
        Ok(out)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_value(logits: &Tensor, target: f64) -> f64 {
    let n = logits.len() as f64;
    logits
        .data()
        .iter()
        .map(|&z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

/// Named trainable tensors. Iteration is sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    map: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::contract("ParameterSet::insert", format!("duplicate name {name}")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Records every parameter on `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            ids: self.map.iter().map(|(k, v)| (k.clone(), g.variable(v.clone()))).collect(),
        }
    }

    /// Records every parameter as a constant: a forward pass that does not
    /// train these parameters.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            ids: self.map.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect(),
        }
    }
}

/// Node handles of a [`ParameterSet`] recorded on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {name} is not bound")))
    }

    /// Gradients of the bound parameters; parameters the loss did not reach
    /// get zeros.
    pub fn grads(&self, g: &Graph) -> Gradients {
        Gradients {
            map: self
                .ids
                .iter()
                .map(|(k, &id)| {
                    let grad = g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(g.value(id).shape()));
                    (k.clone(), grad)
                })
                .collect(),
        }
    }
}

/// Gradients keyed like the [`ParameterSet`] they belong to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}
