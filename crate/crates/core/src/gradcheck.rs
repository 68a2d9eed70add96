//! Central finite-difference checks for every differentiable operation.
//!
//! Each check draws seeded random inputs, reduces the operation's output to a
//! scalar (MSE against a random target unless the op is already scalar), and
//! compares the engine's gradient of every input element with
//! `(f(x + eps) - f(x - eps)) / (2 eps)`.
//!
//! A case's error is norm-wise over the whole gradient (every input element
//! concatenated): `|a - n|_2 / max(|a|_2, |n|_2, 1e-12)`. A check reports the
//! worst case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::derive_seed;
use crate::autograd::{AttentionKind, ConvParams, Graph, NodeId};
use crate::cca::{attention_forward, rcca_forward, reduced_channels, CcaNodes};
use crate::error::Result;
use crate::segnet::{Segmentor, SegmentorConfig};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;

/// Scalar-valued function of graph inputs.
type LossFn<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

/// Norm-wise relative error between analytic and numeric gradients of `loss` w.r.t. `inputs`.
pub fn relative_error(inputs: &[Tensor], loss: &LossFn<'_>, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = loss(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id).into_owned()).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = loss(&mut g, &ids)?;
        Ok(g.value(out).data()[0])
    };

    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for (e, &ae) in a.data().iter().enumerate() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + eps;
            let plus = eval(&xs)?;
            xs[i].data_mut()[e] = orig - eps;
            let minus = eval(&xs)?;
            xs[i].data_mut()[e] = orig;
            let ne = (plus - minus) / (2.0 * eps);
            diff2 += (ae - ne) * (ae - ne);
            a2 += ae * ae;
            n2 += ne * ne;
        }
    }
    Ok(diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12))
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Random inputs plus a loss closure for one case.
struct Case {
    inputs: Vec<Tensor>,
    loss: Box<LossFn<'static>>,
}

type CaseGen = fn(&mut ChaCha8Rng) -> Case;

fn mse_to(target: Tensor) -> impl Fn(&mut Graph, NodeId) -> Result<NodeId> {
    move |g, out| g.mse_loss(out, &target)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normal values pushed at least 0.05 away from zero (keeps ReLU off its kink).
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, rng).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let p = ConvParams {
        stride: rng.random_range(1..3),
        padding: rng.random_range(0..3),
        dilation: rng.random_range(1..3),
    };
    let span = p.dilation * (k - 1) + 1;
    let h = rng.random_range(span.max(3)..7);
    let w = rng.random_range(span.max(3)..7);
    let x = randn(&[n, c, h, w], rng);
    let wt = randn(&[o, c, k, k], rng);
    let b = randn(&[o], rng);
    let oh = (h + 2 * p.padding - span) / p.stride + 1;
    let ow = (w + 2 * p.padding - span) / p.stride + 1;
    let reduce = mse_to(randn(&[n, o, oh, ow], rng));
    Case {
        inputs: vec![x, wt, b],
        loss: Box::new(move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), p)?;
            reduce(g, y)
        }),
    }
}

fn elementwise_case(rng: &mut ChaCha8Rng, op: fn(&mut Graph, NodeId) -> NodeId) -> Case {
    let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
    let x = off_kink(&shape, rng);
    let reduce = mse_to(randn(&shape, rng));
    Case {
        inputs: vec![x],
        loss: Box::new(move |g, ids| {
            let y = op(g, ids[0]);
            reduce(g, y)
        }),
    }
}

fn relu_case(rng: &mut ChaCha8Rng) -> Case {
    elementwise_case(rng, |g, x| g.relu(x))
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Case {
    elementwise_case(rng, |g, x| g.sigmoid(x))
}

fn scale_case(rng: &mut ChaCha8Rng) -> Case {
    let c = rng.random_range(-3.0..3.0);
    let shape = [2, 3];
    let reduce = mse_to(randn(&shape, rng));
    Case {
        inputs: vec![randn(&shape, rng)],
        loss: Box::new(move |g, ids| {
            let y = g.scale(ids[0], c);
            reduce(g, y)
        }),
    }
}

fn add_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let reduce = mse_to(randn(&shape, rng));
    Case {
        inputs: vec![randn(&shape, rng), randn(&shape, rng)],
        loss: Box::new(move |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            reduce(g, y)
        }),
    }
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [rng.random_range(1..3), rng.random_range(2..5), rng.random_range(1..4)];
    let axis = rng.random_range(0..3);
    let reduce = mse_to(randn(&shape, rng));
    Case {
        inputs: vec![randn(&shape, rng).map(|v| 2.0 * v)],
        loss: Box::new(move |g, ids| {
            let y = g.softmax(ids[0], axis)?;
            reduce(g, y)
        }),
    }
}

fn mse_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = [rng.random_range(1..3), 1, rng.random_range(2..5), rng.random_range(2..5)];
    let target = randn(&shape, rng);
    Case { inputs: vec![randn(&shape, rng)], loss: Box::new(move |g, ids| g.mse_loss(ids[0], &target)) }
}

fn upsample_case(rng: &mut ChaCha8Rng, bilinear: bool) -> Case {
    let factor = rng.random_range(1..4);
    let shape = [1, 2, 3, rng.random_range(2..4)];
    let reduce = mse_to(randn(&[1, 2, 3 * factor, shape[3] * factor], rng));
    Case {
        inputs: vec![randn(&shape, rng)],
        loss: Box::new(move |g, ids| {
            let y = if bilinear { g.upsample_bilinear(ids[0], factor)? } else { g.upsample_nearest(ids[0], factor)? };
            reduce(g, y)
        }),
    }
}

fn nearest_case(rng: &mut ChaCha8Rng) -> Case {
    upsample_case(rng, false)
}

fn bilinear_case(rng: &mut ChaCha8Rng) -> Case {
    upsample_case(rng, true)
}

fn attention_case(rng: &mut ChaCha8Rng, kind: AttentionKind, passes: usize) -> Case {
    let c = 4;
    let cr = reduced_channels(c);
    let (h, w) = (3, 4);
    let s = 0.7;
    let inputs = vec![
        randn(&[1, c, h, w], rng),
        randn(&[cr, c, 1, 1], rng).map(|v| s * v),
        randn(&[cr, c, 1, 1], rng).map(|v| s * v),
        randn(&[c, c, 1, 1], rng).map(|v| s * v),
    ];
    let reduce = mse_to(randn(&[1, c, h, w], rng));
    Case {
        inputs,
        loss: Box::new(move |g, ids| {
            let nodes = CcaNodes { query: ids[1], key: ids[2], value: ids[3] };
            let y = if passes == 1 {
                attention_forward(g, ids[0], &nodes, kind)?.0
            } else {
                rcca_forward(g, ids[0], &nodes, passes)?
            };
            reduce(g, y)
        }),
    }
}

fn cca_case(rng: &mut ChaCha8Rng) -> Case {
    attention_case(rng, AttentionKind::CrissCross, 1)
}

fn rcca_case(rng: &mut ChaCha8Rng) -> Case {
    attention_case(rng, AttentionKind::CrissCross, 2)
}

fn nonlocal_case(rng: &mut ChaCha8Rng) -> Case {
    attention_case(rng, AttentionKind::NonLocal, 1)
}

fn affinity_case(rng: &mut ChaCha8Rng, kind: AttentionKind) -> Case {
    let (n, cr, h, w) =
        (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5));
    let reduce = mse_to(randn(&[n, kind.set_len(h, w), h, w], rng));
    Case {
        inputs: vec![randn(&[n, cr, h, w], rng), randn(&[n, cr, h, w], rng)],
        loss: Box::new(move |g, ids| {
            let y = g.attention_affinity(ids[0], ids[1], kind)?;
            reduce(g, y)
        }),
    }
}

fn aggregate_case(rng: &mut ChaCha8Rng, kind: AttentionKind) -> Case {
    let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
    let reduce = mse_to(randn(&[n, c, h, w], rng));
    Case {
        inputs: vec![randn(&[n, kind.set_len(h, w), h, w], rng), randn(&[n, c, h, w], rng)],
        loss: Box::new(move |g, ids| {
            let y = g.attention_aggregate(ids[0], ids[1], kind)?;
            reduce(g, y)
        }),
    }
}

fn cc_affinity_case(rng: &mut ChaCha8Rng) -> Case {
    affinity_case(rng, AttentionKind::CrissCross)
}

fn nl_affinity_case(rng: &mut ChaCha8Rng) -> Case {
    affinity_case(rng, AttentionKind::NonLocal)
}

fn cc_aggregate_case(rng: &mut ChaCha8Rng) -> Case {
    aggregate_case(rng, AttentionKind::CrissCross)
}

fn nl_aggregate_case(rng: &mut ChaCha8Rng) -> Case {
    aggregate_case(rng, AttentionKind::NonLocal)
}

/// The tiny end-to-end configuration: 8×8 input, two base channels.
pub fn tiny_segmentor_config(seed: u64) -> SegmentorConfig {
    SegmentorConfig { input_size: [8, 8], base_channels: 2, ..SegmentorConfig::with_seed(seed) }
}

fn segmentor_case(rng: &mut ChaCha8Rng) -> Case {
    let net = Segmentor::build(&tiny_segmentor_config(rng.random())).expect("valid tiny config");
    let mut inputs = vec![Tensor::rand_uniform(&[2, 1, 8, 8], 0.0, 1.0, rng)];
    // Zero-initialised biases put fully switched-off units exactly on the ReLU
    // kink, where a two-sided difference is meaningless; randomise them.
    for p in net.params() {
        let biased = p.name.ends_with("bias");
        inputs.push(if biased { randn(p.value.shape(), rng).map(|v| 0.3 * v) } else { p.value.clone() });
    }
    let target = Tensor::rand_uniform(&[2, 1, 8, 8], 0.0, 1.0, rng).map(|v| v.round());
    Case {
        inputs,
        loss: Box::new(move |g, ids| {
            let prob = net.forward(g, ids[0], &ids[1..])?;
            g.mse_loss(prob, &target)
        }),
    }
}

const OP_CHECKS: &[(&str, CaseGen)] = &[
    ("conv2d", conv_case),
    ("relu", relu_case),
    ("sigmoid", sigmoid_case),
    ("add", add_case),
    ("scale", scale_case),
    ("softmax", softmax_case),
    ("mse_loss", mse_case),
    ("upsample_nearest", nearest_case),
    ("upsample_bilinear", bilinear_case),
    ("affinity_crisscross", cc_affinity_case),
    ("affinity_nonlocal", nl_affinity_case),
    ("aggregate_crisscross", cc_aggregate_case),
    ("aggregate_nonlocal", nl_aggregate_case),
    ("cca_forward", cca_case),
    ("rcca_forward", rcca_case),
    ("nonlocal_forward", nonlocal_case),
];

fn run_check(index: usize, name: &str, gen: CaseGen, cases: usize, seed: u64, tolerance: f64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64, case as u64));
        let Case { inputs, loss } = gen(&mut rng);
        worst = worst.max(relative_error(&inputs, loss.as_ref(), FD_EPS)?);
    }
    Ok(CheckResult { name: name.to_string(), cases, max_rel_error: worst, tolerance, passed: worst < tolerance })
}

/// Runs every operation check and the end-to-end segmentor check.
pub fn run_suite(cases: usize, seed: u64) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for (i, (name, gen)) in OP_CHECKS.iter().enumerate() {
        checks.push(run_check(i, name, *gen, cases, seed, OP_TOLERANCE)?);
    }
    checks.push(run_check(OP_CHECKS.len(), "segmentor_end_to_end", segmentor_case, cases, seed, END_TO_END_TOLERANCE)?);
    Ok(GradcheckReport { checks })
}
