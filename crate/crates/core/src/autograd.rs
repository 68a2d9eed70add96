//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an arena of nodes. Every operation appends a node whose
//! operands already live in the arena, so node order is a topological order
//! and the provenance graph is acyclic by construction. [`Graph::backward`]
//! walks the arena in reverse and *accumulates* into each node's gradient;
//! call [`Graph::zero_grads`] to reset.
//!
//! ```
//! use xlsor::autograd::Graph;
//! use xlsor::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let loss = g.mse_loss(x, &Tensor::scalar(0.0)).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).data(), &[6.0]);
//! ```

use std::borrow::Cow;

use crate::cca::{crisscross_coord, crisscross_len};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, params: ConvParams },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax { x: NodeId, axis: usize },
    Mse { pred: NodeId, target: Tensor },
    UpsampleNearest { x: NodeId, factor: usize },
    UpsampleBilinear { x: NodeId, factor: usize },
    AttnAffinity { q: NodeId, k: NodeId, kind: AttentionKind },
    AttnAggregate { attn: NodeId, v: NodeId, kind: AttentionKind },
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Relu(x) | Op::Sigmoid(x) | Op::Scale(x, _) => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::Softmax { x, .. } => vec![*x],
            Op::Mse { pred, .. } => vec![*pred],
            Op::UpsampleNearest { x, .. } | Op::UpsampleBilinear { x, .. } => vec![*x],
            Op::AttnAffinity { q, k, .. } => vec![*q, *k],
            Op::AttnAggregate { attn, v, .. } => vec![*attn, *v],
        }
    }
}

/// Which set of positions each pixel attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// The pixel's own row and column, `H+W-1` positions.
    CrissCross,
    /// Every pixel of the map, `H*W` positions.
    NonLocal,
}

impl AttentionKind {
    pub fn set_len(self, h: usize, w: usize) -> usize {
        match self {
            AttentionKind::CrissCross => crisscross_len(h, w),
            AttentionKind::NonLocal => h * w,
        }
    }

    /// Coordinate `(x, y)` of the `j`-th attended position for pixel `(x, y)`.
    #[inline]
    fn coord(self, j: usize, x: usize, y: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            AttentionKind::CrissCross => crisscross_coord(j, x, y, h),
            AttentionKind::NonLocal => (j % w, j / w),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Arena of differentiable nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf; backward accumulates into its gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`; zeros if nothing has reached it yet.
    pub fn grad(&self, id: NodeId) -> Cow<'_, Tensor> {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(Tensor::zeros(node.value.shape())),
        }
    }

    pub fn zero_grads(&mut self, ids: &[NodeId]) {
        for id in ids {
            self.nodes[id.0].grad = None;
        }
    }

    /// Operand nodes recorded for `id`, empty for leaves.
    pub fn provenance(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.operands()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.operands().iter().any(|o| self.nodes[o.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, c, h, wd) = x.dims4()?;
        let (o, wc, kh, kw) = w.dims4()?;
        if wc != c {
            return Err(shape_err!("conv2d: input has {c} channels, weight expects {wc}"));
        }
        if params.stride == 0 || params.dilation == 0 {
            return Err(arg_err!("conv2d: stride and dilation must be >= 1"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(shape_err!("conv2d: bias must have shape [{o}]"));
            }
        }
        let oh = conv_out_len(h, kh, params).ok_or_else(|| shape_err!("conv2d: empty output height"))?;
        let ow = conv_out_len(wd, kw, params).ok_or_else(|| shape_err!("conv2d: empty output width"))?;

        let xd = x.data();
        let wdat = w.data();
        let mut out = vec![0.0; n * o * oh * ow];
        let geo = ConvGeometry { h, w: wd, kh, kw, oh, ow, p: params };
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                if let Some(b) = bias {
                    plane.fill(self.nodes[b.0].value.data()[oi]);
                }
                for ci in 0..c {
                    let xplane = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    let kbase = (oi * c + ci) * kh * kw;
                    geo.for_each_tap(|ky, kx, oy, iy, ox_range, ix0| {
                        let wv = wdat[kbase + ky * kw + kx];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[iy * wd..(iy + 1) * wd];
                        let s = params.stride;
                        for (k, ox) in ox_range.enumerate() {
                            orow[ox] += wv * xrow[ix0 + k * s];
                        }
                    });
                }
            }
        }
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        Ok(self.push_op(value, Op::Conv2d { input, weight, bias, params }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push_op(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push_op(value, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b))?;
        Ok(self.push_op(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        self.push_op(value, Op::Scale(x, c))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for a in 0..outer {
            for i in 0..inner {
                let base = a * len * inner + i;
                let max = (0..len).map(|j| src[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push_op(value, Op::Softmax { x, axis }))
    }

    /// Mean squared error against a constant target; yields a scalar node.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err!("mse_loss: {:?} vs {:?}", p.shape(), target.shape()));
        }
        let sum: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / p.len() as f64);
        Ok(self.push_op(value, Op::Mse { pred, target: target.clone() }))
    }

    /// Replicates each spatial value into a `factor×factor` block.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 1 {
            return Err(arg_err!("upsample factor must be >= 1, got {factor}"));
        }
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let src = t.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(p * oh + oy) * ow + ox] = src[(p * h + oy / factor) * w + ox / factor];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push_op(value, Op::UpsampleNearest { x, factor }))
    }

    /// Bilinear upsampling with half-pixel centers and edge clamping.
    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 1 {
            return Err(arg_err!("upsample factor must be >= 1, got {factor}"));
        }
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let ys = bilinear_taps(h, factor);
        let xs = bilinear_taps(w, factor);
        let src = t.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(p * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push_op(value, Op::UpsampleBilinear { x, factor }))
    }

    /// Raw affinities `e[n, j, y, x] = <q[n, :, y, x], k[n, :, p_j]>` where
    /// `p_j` runs over the attention set of `(x, y)`.
    pub fn attention_affinity(&mut self, q: NodeId, k: NodeId, kind: AttentionKind) -> Result<NodeId> {
        let qt = self.value(q);
        let kt = self.value(k);
        if qt.shape() != kt.shape() {
            return Err(shape_err!("affinity: query {:?} vs key {:?}", qt.shape(), kt.shape()));
        }
        let (n, c, h, w) = qt.dims4()?;
        let len = kind.set_len(h, w);
        let hw = h * w;
        let (qd, kd) = (qt.data(), kt.data());
        let mut out = vec![0.0; n * len * hw];
        for ni in 0..n {
            let qb = &qd[ni * c * hw..(ni + 1) * c * hw];
            let kb = &kd[ni * c * hw..(ni + 1) * c * hw];
            let ob = &mut out[ni * len * hw..(ni + 1) * len * hw];
            for y in 0..h {
                for x in 0..w {
                    let u = y * w + x;
                    for j in 0..len {
                        let (px, py) = kind.coord(j, x, y, h, w);
                        let p = py * w + px;
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += qb[ci * hw + u] * kb[ci * hw + p];
                        }
                        ob[j * hw + u] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, len, h, w], out)?;
        Ok(self.push_op(value, Op::AttnAffinity { q, k, kind }))
    }

    /// Weighted aggregation `out[n, c, y, x] = sum_j a[n, j, y, x] v[n, c, p_j]`.
    pub fn attention_aggregate(&mut self, attn: NodeId, v: NodeId, kind: AttentionKind) -> Result<NodeId> {
        let at = self.value(attn);
        let vt = self.value(v);
        let (n, c, h, w) = vt.dims4()?;
        let len = kind.set_len(h, w);
        if at.shape() != [n, len, h, w] {
            return Err(shape_err!("aggregate: attention {:?} does not match values {:?}", at.shape(), vt.shape()));
        }
        let hw = h * w;
        let (ad, vd) = (at.data(), vt.data());
        let mut out = vec![0.0; n * c * hw];
        for ni in 0..n {
            let ab = &ad[ni * len * hw..(ni + 1) * len * hw];
            let vb = &vd[ni * c * hw..(ni + 1) * c * hw];
            let ob = &mut out[ni * c * hw..(ni + 1) * c * hw];
            for y in 0..h {
                for x in 0..w {
                    let u = y * w + x;
                    for j in 0..len {
                        let (px, py) = kind.coord(j, x, y, h, w);
                        let p = py * w + px;
                        let a = ab[j * hw + u];
                        for ci in 0..c {
                            ob[ci * hw + u] += a * vb[ci * hw + p];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push_op(value, Op::AttnAggregate { attn, v, kind }))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::ContractViolation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (operand, contrib) in self.local_grads(idx, &g)? {
                match &mut pending[operand.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for each operand needing a gradient.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut grads = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let d = g.data().iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    grads.push((*x, Tensor::new(g.shape(), d)?));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                    grads.push((*x, Tensor::new(g.shape(), d)?));
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.needs(*id) {
                        grads.push((*id, g.clone()));
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    grads.push((*x, g.map(|v| v * c)));
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let (outer, len, inner) = axis_split(out.shape(), *axis)?;
                    let (y, gd) = (out.data(), g.data());
                    let mut d = vec![0.0; y.len()];
                    for a in 0..outer {
                        for i in 0..inner {
                            let base = a * len * inner + i;
                            let dot: f64 = (0..len).map(|j| gd[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let at = base + j * inner;
                                d[at] = y[at] * (gd[at] - dot);
                            }
                        }
                    }
                    grads.push((*x, Tensor::new(out.shape(), d)?));
                }
            }
            Op::Mse { pred, target } => {
                if self.needs(*pred) {
                    let p = self.value(*pred);
                    let scale = 2.0 * g.data()[0] / p.len() as f64;
                    let d = p.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
                    grads.push((*pred, Tensor::new(p.shape(), d)?));
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if self.needs(*x) {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let (oh, ow) = (h * factor, w * factor);
                    let gd = g.data();
                    let mut d = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                d[(p * h + oy / factor) * w + ox / factor] += gd[(p * oh + oy) * ow + ox];
                            }
                        }
                    }
                    grads.push((*x, Tensor::new(&[n, c, h, w], d)?));
                }
            }
            Op::UpsampleBilinear { x, factor } => {
                if self.needs(*x) {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let (oh, ow) = (h * factor, w * factor);
                    let ys = bilinear_taps(h, *factor);
                    let xs = bilinear_taps(w, *factor);
                    let gd = g.data();
                    let mut d = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        let plane = &mut d[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let gv = gd[(p * oh + oy) * ow + ox];
                                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                                plane[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                    grads.push((*x, Tensor::new(&[n, c, h, w], d)?));
                }
            }
            Op::Conv2d { input, weight, bias, params } => {
                grads.extend(self.conv2d_grads(*input, *weight, *bias, *params, g)?);
            }
            Op::AttnAffinity { q, k, kind } => {
                let (qt, kt) = (self.value(*q), self.value(*k));
                let (n, c, h, w) = qt.dims4()?;
                let len = kind.set_len(h, w);
                let hw = h * w;
                let (qd, kd, gd) = (qt.data(), kt.data(), g.data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                for ni in 0..n {
                    let off = ni * c * hw;
                    let gb = &gd[ni * len * hw..(ni + 1) * len * hw];
                    for y in 0..h {
                        for x in 0..w {
                            let u = y * w + x;
                            for j in 0..len {
                                let gv = gb[j * hw + u];
                                let (px, py) = kind.coord(j, x, y, h, w);
                                let p = py * w + px;
                                for ci in 0..c {
                                    dq[off + ci * hw + u] += gv * kd[off + ci * hw + p];
                                    dk[off + ci * hw + p] += gv * qd[off + ci * hw + u];
                                }
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    grads.push((*q, Tensor::new(qt.shape(), dq)?));
                }
                if self.needs(*k) {
                    grads.push((*k, Tensor::new(kt.shape(), dk)?));
                }
            }
            Op::AttnAggregate { attn, v, kind } => {
                let (at, vt) = (self.value(*attn), self.value(*v));
                let (n, c, h, w) = vt.dims4()?;
                let len = kind.set_len(h, w);
                let hw = h * w;
                let (ad, vd, gd) = (at.data(), vt.data(), g.data());
                let mut da = vec![0.0; ad.len()];
                let mut dv = vec![0.0; vd.len()];
                for ni in 0..n {
                    let aoff = ni * len * hw;
                    let voff = ni * c * hw;
                    for y in 0..h {
                        for x in 0..w {
                            let u = y * w + x;
                            for j in 0..len {
                                let (px, py) = kind.coord(j, x, y, h, w);
                                let p = py * w + px;
                                let a = ad[aoff + j * hw + u];
                                let mut acc = 0.0;
                                for ci in 0..c {
                                    let gv = gd[voff + ci * hw + u];
                                    acc += gv * vd[voff + ci * hw + p];
                                    dv[voff + ci * hw + p] += a * gv;
                                }
                                da[aoff + j * hw + u] = acc;
                            }
                        }
                    }
                }
                if self.needs(*attn) {
                    grads.push((*attn, Tensor::new(at.shape(), da)?));
                }
                if self.needs(*v) {
                    grads.push((*v, Tensor::new(vt.shape(), dv)?));
                }
            }
        }
        Ok(grads)
    }

    fn conv2d_grads(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        params: ConvParams,
        g: &Tensor,
    ) -> Result<Vec<(NodeId, Tensor)>> {
        let (xt, wt) = (self.value(input), self.value(weight));
        let (n, c, h, wd) = xt.dims4()?;
        let (o, _, kh, kw) = wt.dims4()?;
        let (_, _, oh, ow) = g.dims4()?;
        let (xd, wdat, gd) = (xt.data(), wt.data(), g.data());
        let want_x = self.needs(input);
        let want_w = self.needs(weight);
        let mut dx = vec![0.0; if want_x { xd.len() } else { 0 }];
        let mut dw = vec![0.0; if want_w { wdat.len() } else { 0 }];
        let geo = ConvGeometry { h, w: wd, kh, kw, oh, ow, p: params };
        let s = params.stride;
        for ni in 0..n {
            for oi in 0..o {
                let gplane = &gd[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                for ci in 0..c {
                    let xoff = (ni * c + ci) * h * wd;
                    let kbase = (oi * c + ci) * kh * kw;
                    geo.for_each_tap(|ky, kx, oy, iy, ox_range, ix0| {
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let widx = kbase + ky * kw + kx;
                        if want_x {
                            let wv = wdat[widx];
                            let drow = &mut dx[xoff + iy * wd..xoff + (iy + 1) * wd];
                            for (k, ox) in ox_range.clone().enumerate() {
                                drow[ix0 + k * s] += wv * grow[ox];
                            }
                        }
                        if want_w {
                            let xrow = &xd[xoff + iy * wd..xoff + (iy + 1) * wd];
                            let mut acc = 0.0;
                            for (k, ox) in ox_range.enumerate() {
                                acc += grow[ox] * xrow[ix0 + k * s];
                            }
                            dw[widx] += acc;
                        }
                    });
                }
            }
        }
        let mut grads = Vec::new();
        if want_x {
            grads.push((input, Tensor::new(xt.shape(), dx)?));
        }
        if want_w {
            grads.push((weight, Tensor::new(wt.shape(), dw)?));
        }
        if let Some(b) = bias.filter(|b| self.needs(*b)) {
            let mut db = vec![0.0; o];
            for ni in 0..n {
                for (oi, acc) in db.iter_mut().enumerate() {
                    *acc += gd[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow].iter().sum::<f64>();
                }
            }
            grads.push((b, Tensor::new(&[o], db)?));
        }
        Ok(grads)
    }
}

/// Output length of a convolution along one axis, `None` when empty.
pub fn conv_out_len(len: usize, k: usize, p: ConvParams) -> Option<usize> {
    let span = p.dilation * (k - 1) + 1;
    let padded = len + 2 * p.padding;
    (padded >= span).then(|| (padded - span) / p.stride + 1)
}

struct ConvGeometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    p: ConvParams,
}

impl ConvGeometry {
    /// Calls `f(ky, kx, oy, iy, valid_ox_range, first_ix)` for every kernel tap
    /// and output row whose input row is in bounds.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, std::ops::Range<usize>, usize)) {
        for ky in 0..self.kh {
            let yoff = (ky * self.p.dilation) as isize - self.p.padding as isize;
            let oys = valid_range(self.oh, self.h, self.p.stride, yoff);
            for kx in 0..self.kw {
                let xoff = (kx * self.p.dilation) as isize - self.p.padding as isize;
                let oxs = valid_range(self.ow, self.w, self.p.stride, xoff);
                if oxs.is_empty() {
                    continue;
                }
                let ix0 = (oxs.start as isize * self.p.stride as isize + xoff) as usize;
                for oy in oys.clone() {
                    let iy = (oy as isize * self.p.stride as isize + yoff) as usize;
                    f(ky, kx, oy, iy, oxs.clone(), ix0);
                }
            }
        }
    }
}

/// Output indices `o < out_len` with `0 <= o*stride + offset < in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return 0..0;
    }
    let hi = (last / s + 1).min(out_len as isize);
    if hi <= lo {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

/// Per output coordinate: the two source indices and the weight of the second.
fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
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
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Direct six-fold loop convolution, independent of the tap iterator.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, p: ConvParams) -> Vec<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * p.padding - p.dilation * (kh - 1) - 1) / p.stride + 1;
        let ow = (wd + 2 * p.padding - p.dilation * (kw - 1) - 1) / p.stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[oi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let xi = g.constant(x.clone());
        let w = g.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv2d(xi, w, Some(b), ConvParams::default()).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv_sum_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = g.leaf(t(&[1, 1, 2, 2], &[1.0; 4]));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), ConvParams::default()).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, ConvParams::default()), Err(Error::InvalidShape(_))));
        let big = g.leaf(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(g.conv2d(x, big, None, ConvParams::default()), Err(Error::InvalidShape(_))));
        let bias = g.leaf(Tensor::zeros(&[2]));
        let w1 = g.leaf(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(g.conv2d(x, w1, Some(bias), ConvParams::default()).is_err());
    }

    #[test]
    fn conv_matches_naive_loops_over_param_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for stride in [1, 2] {
            for padding in [0, 1, 2] {
                for dilation in [1, 2] {
                    let p = ConvParams { stride, padding, dilation };
                    let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
                    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
                    let b = Tensor::randn(&[4], 1.0, &mut rng);
                    let expected = naive_conv(&x, &w, &b, p);
                    let mut g = Graph::new();
                    let (xi, wi, bi) = (g.constant(x), g.leaf(w), g.leaf(b));
                    let y = g.conv2d(xi, wi, Some(bi), p).unwrap();
                    for (a, e) in g.value(y).data().iter().zip(&expected) {
                        assert!((a - e).abs() <= 1e-12, "{p:?}: {a} vs {e}");
                    }
                }
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.leaf(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.add(x, a), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn scale_gradient_is_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.25));
        let y = g.scale(x, 3.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[3.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[0.0, 0.0, 0.0]));
        let sa = g.softmax(a, 0).unwrap();
        for v in g.value(sa).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let b = g.leaf(t(&[2], &[1000.0, 0.0]));
        let sb = g.softmax(b, 0).unwrap();
        assert!((g.value(sb).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(sb).data()[1].abs() < 1e-12);
        assert!(g.value(sb).is_finite());
        let c = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sc = g.softmax(c, 0).unwrap();
        // e^{-2}, e^{-1}, 1 normalized, evaluated independently.
        let (e2, e1) = ((-2.0f64).exp(), (-1.0f64).exp());
        let z = e2 + e1 + 1.0;
        let expected = [e2 / z, e1 / z, 1.0 / z];
        for (v, e) in g.value(sc).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(matches!(g.softmax(c, 1), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let p = g.leaf(t(&[2], &[0.0, 0.0]));
        let l = g.mse_loss(p, &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(g.value(l).data(), &[1.0]);
        let l0 = g.mse_loss(p, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(g.value(l0).data(), &[0.0]);
        assert!(g.mse_loss(p, &Tensor::zeros(&[3])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
        let mut direct = 0.0;
        for i in 0..32 {
            direct += (a.data()[i] - b.data()[i]).powi(2);
        }
        direct /= 32.0;
        let ai = g.leaf(a);
        let l = g.mse_loss(ai, &b).unwrap();
        assert!((g.value(l).data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn backward_scalar_square_and_accumulation() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let loss = g.mse_loss(x, &Tensor::scalar(0.0)).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[6.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[12.0]);
        g.zero_grads(&[x]);
        assert_eq!(g.grad(x).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn upsample_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1, 1], &[5.0]));
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[5.0; 4]);
        let z = g.upsample_nearest(x, 1).unwrap();
        assert_eq!(g.value(z), g.value(x));
        assert!(matches!(g.upsample_nearest(x, 0), Err(Error::InvalidArgument(_))));
        let b = g.upsample_bilinear(x, 3).unwrap();
        assert_eq!(g.value(b).data(), &[5.0; 9]);
    }

    #[test]
    fn bilinear_interpolates_between_centers() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 1, 1, 2], &[0.0, 4.0]));
        let y = g.upsample_bilinear(x, 2).unwrap();
        // Output centers at source coords -0.25, 0.25, 0.75, 1.25.
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(1.0));
        let s = g.add(c, x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(c).data(), &[0.0]);
        assert_eq!(g.grad(x).data(), &[1.0]);
        assert_eq!(g.provenance(s), vec![c, x]);
        assert!(g.provenance(x).is_empty());
    }

    #[test]
    fn valid_range_bounds() {
        assert_eq!(valid_range(5, 5, 1, -1), 1..5);
        assert_eq!(valid_range(3, 5, 2, 0), 0..3);
        assert_eq!(valid_range(3, 5, 2, 1), 0..2);
        assert_eq!(valid_range(3, 2, 1, 4), 0..0);
    }
}
