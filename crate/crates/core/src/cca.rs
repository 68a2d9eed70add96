//! Criss-cross attention.
//!
//! Each pixel `u = (x, y)` attends over its criss-cross set: the full column
//! `x` (top to bottom, which contains `u` itself) followed by row `y` left to
//! right with `u` skipped. The set has exactly `H + W - 1` members. One pass
//! mixes information along rows and columns; a second pass with the same
//! weights lets every pixel reach every other pixel.
//!
//! The dense [`nonlocal_forward`] variant attends over all `H*W` pixels and
//! serves as both a reference oracle and the cost baseline.

use rand::Rng;

use crate::autograd::{AttentionKind, ConvParams, Graph, NodeId};
use crate::error::{arg_err, shape_err, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

pub fn crisscross_len(h: usize, w: usize) -> usize {
    h + w - 1
}

/// The `j`-th member of the criss-cross set of pixel `(x, y)` on a map of height `h`.
#[inline]
pub fn crisscross_coord(j: usize, x: usize, y: usize, h: usize) -> (usize, usize) {
    if j < h {
        (x, j)
    } else {
        let k = j - h;
        (if k < x { k } else { k + 1 }, y)
    }
}

/// Ordered criss-cross set of `(x, y)` on an `h×w` map.
pub fn crisscross_set(x: usize, y: usize, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    if x >= w || y >= h {
        return Err(arg_err!("pixel ({x}, {y}) outside a {h}x{w} map"));
    }
    Ok((0..crisscross_len(h, w)).map(|j| crisscross_coord(j, x, y, h)).collect())
}

/// Reduced query/key width for `channels` input channels.
pub fn reduced_channels(channels: usize) -> usize {
    (channels / 8).max(1)
}

/// Projection weights of one attention module, shared across recurrent passes.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl CcaWeights {
    pub fn new(query: Tensor, key: Tensor, value: Tensor) -> Result<Self> {
        let w = Self { query, key, value };
        w.channels()?;
        Ok(w)
    }

    /// Fan-in scaled normal initialization for `channels` input channels.
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let cr = reduced_channels(channels);
        let std = (2.0 / channels as f64).sqrt();
        Self {
            query: Tensor::randn(&[cr, channels, 1, 1], std, rng),
            key: Tensor::randn(&[cr, channels, 1, 1], std, rng),
            value: Tensor::randn(&[channels, channels, 1, 1], std, rng),
        }
    }

    /// `(C, C')` after validating the projection shapes.
    pub fn channels(&self) -> Result<(usize, usize)> {
        let (cr, c, kh, kw) = self.query.dims4()?;
        if self.key.shape() != self.query.shape() {
            return Err(shape_err!("key {:?} differs from query {:?}", self.key.shape(), self.query.shape()));
        }
        if (kh, kw) != (1, 1) || self.value.shape() != [c, c, 1, 1] {
            return Err(shape_err!(
                "projections must be 1x1 with value {c}x{c}, got query {:?} value {:?}",
                self.query.shape(),
                self.value.shape()
            ));
        }
        Ok((c, cr))
    }

    /// Registers the weights as trainable leaves of `g`.
    pub fn register(&self, g: &mut Graph) -> CcaNodes {
        CcaNodes { query: g.leaf(self.query.clone()), key: g.leaf(self.key.clone()), value: g.leaf(self.value.clone()) }
    }

    /// Runs `passes` recurrent passes of `kind` attention outside any caller graph.
    pub fn apply(&self, h: &Tensor, kind: AttentionKind, passes: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.register(&mut g);
        let x = g.constant(h.clone());
        let y = recurrent_forward(&mut g, x, &w, kind, passes)?;
        Ok(g.value(y).clone())
    }
}

/// Graph handles of a registered [`CcaWeights`].
#[derive(Debug, Clone, Copy)]
pub struct CcaNodes {
    pub query: NodeId,
    pub key: NodeId,
    pub value: NodeId,
}

/// Per-pixel attention distributions, `N×L×H×W` with `L` the set size.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub kind: AttentionKind,
    pub weights: Tensor,
}

impl AttentionMap {
    /// Largest deviation from 1 of any per-pixel distribution's sum.
    pub fn max_normalization_error(&self) -> f64 {
        let [n, l, h, w] = self.weights.shape()[..] else { return f64::INFINITY };
        let d = self.weights.data();
        let mut worst: f64 = 0.0;
        for ni in 0..n {
            for u in 0..h * w {
                let s: f64 = (0..l).map(|j| d[(ni * l + j) * h * w + u]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    /// The distribution for pixel `(x, y)` of sample `n`.
    pub fn distribution(&self, n: usize, x: usize, y: usize) -> Vec<f64> {
        let [_, l, h, w] = self.weights.shape()[..] else { return vec![] };
        (0..l).map(|j| self.weights.data()[((n * l + j) * h + y) * w + x]).collect()
    }
}

/// One attention pass with a residual connection; returns `(output, attention)`.
pub fn attention_forward(g: &mut Graph, h: NodeId, w: &CcaNodes, kind: AttentionKind) -> Result<(NodeId, NodeId)> {
    let c = g.value(h).dims4()?.1;
    let wc = g.value(w.value).dims4()?.1;
    if c != wc {
        return Err(shape_err!("attention: input has {c} channels, weights expect {wc}"));
    }
    let q = g.conv2d(h, w.query, None, ConvParams::default())?;
    let k = g.conv2d(h, w.key, None, ConvParams::default())?;
    let v = g.conv2d(h, w.value, None, ConvParams::default())?;
    let energy = g.attention_affinity(q, k, kind)?;
    let attn = g.softmax(energy, 1)?;
    let agg = g.attention_aggregate(attn, v, kind)?;
    let out = g.add(agg, h)?;
    Ok((out, attn))
}

/// Single criss-cross pass.
pub fn cca_forward(g: &mut Graph, h: NodeId, w: &CcaNodes) -> Result<(NodeId, AttentionMap)> {
    let (out, attn) = attention_forward(g, h, w, AttentionKind::CrissCross)?;
    Ok((out, AttentionMap { kind: AttentionKind::CrissCross, weights: g.value(attn).clone() }))
}

/// Dense attention over every pixel; same projections and residual as [`cca_forward`].
pub fn nonlocal_forward(g: &mut Graph, h: NodeId, w: &CcaNodes) -> Result<NodeId> {
    Ok(attention_forward(g, h, w, AttentionKind::NonLocal)?.0)
}

/// `passes` criss-cross passes sharing one set of weights.
pub fn rcca_forward(g: &mut Graph, h: NodeId, w: &CcaNodes, passes: usize) -> Result<NodeId> {
    recurrent_forward(g, h, w, AttentionKind::CrissCross, passes)
}

pub fn recurrent_forward(g: &mut Graph, h: NodeId, w: &CcaNodes, kind: AttentionKind, passes: usize) -> Result<NodeId> {
    if passes < 1 {
        return Err(arg_err!("need at least one attention pass"));
    }
    let mut x = h;
    for _ in 0..passes {
        x = attention_forward(g, x, w, kind)?.0;
    }
    Ok(x)
}

/// Marks output pixels whose value moves when the input at `source` is nudged.
///
/// Every channel at `source` is perturbed by `+1e-3` in turn; an output pixel
/// is marked if any of its channels changes by more than `1e-12`.
pub fn influence_map<F>(forward: F, h: &Tensor, source: (usize, usize)) -> Result<Mask>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (_, c, height, width) = h.dims4()?;
    let (sx, sy) = source;
    if sx >= width || sy >= height {
        return Err(arg_err!("source ({sx}, {sy}) outside a {height}x{width} map"));
    }
    let base = forward(h)?;
    let (_, oc, oh, ow) = base.dims4()?;
    if (oh, ow) != (height, width) {
        return Err(shape_err!("influence probe needs a spatially aligned output"));
    }
    let mut marked = Mask::zeros(height, width);
    for ci in 0..c {
        let mut probe = h.clone();
        probe.data_mut()[(ci * height + sy) * width + sx] += 1e-3;
        let out = forward(&probe)?;
        for y in 0..height {
            for x in 0..width {
                let moved = (0..oc).any(|k| {
                    let i = (k * height + y) * width + x;
                    (out.data()[i] - base.data()[i]).abs() > 1e-12
                });
                if moved {
                    marked.set(x, y, true);
                }
            }
        }
    }
    Ok(marked)
}

/// Multiplies spent on affinities and aggregation for one pass, excluding the
/// 1×1 projections that both kinds share.
pub fn attention_cost(h: usize, w: usize, channels: usize, reduced: usize, kind: AttentionKind) -> u128 {
    let pixels = (h * w) as u128;
    pixels * kind.set_len(h, w) as u128 * (reduced + channels) as u128
}
