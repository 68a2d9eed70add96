//! Criss-cross versus dense attention: multiply counts and wall times.
//!
//! Everything runs on the calling thread. `seconds` and `time_ratio` are wall
//! times; every other field is a pure function of the arguments.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::AttentionKind;
use crate::cca::{attention_cost, CcaWeights};
use crate::error::{arg_err, Result};
use crate::tensor::Tensor;

pub const BENCH_CHANNELS: usize = 16;

#[derive(Debug, Clone, Serialize)]
pub struct KindTiming {
    pub multiplies: u128,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeResult {
    pub size: usize,
    pub crisscross: KindTiming,
    pub nonlocal: KindTiming,
    /// `nonlocal.multiplies / crisscross.multiplies`.
    pub cost_ratio: f64,
    /// `nonlocal.seconds / crisscross.seconds`.
    pub time_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub channels: usize,
    pub reduced_channels: usize,
    pub repeats: usize,
    pub seed: u64,
    pub results: Vec<SizeResult>,
}

/// Best-of-`repeats` time of one attention pass over a `1×C×size×size` map.
pub fn time_attention(weights: &CcaWeights, h: &Tensor, kind: AttentionKind, repeats: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats {
        let start = Instant::now();
        let out = weights.apply(h, kind, 1)?;
        best = best.min(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(best)
}

pub fn run_bench(sizes: &[usize], repeats: usize, seed: u64) -> Result<BenchReport> {
    if sizes.is_empty() || sizes.contains(&0) || repeats == 0 {
        return Err(arg_err!("bench needs non-empty positive sizes and repeats >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = CcaWeights::init(BENCH_CHANNELS, &mut rng);
    let (c, cr) = weights.channels()?;
    let mut results = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let h = Tensor::randn(&[1, c, size, size], 1.0, &mut rng);
        let timing = |kind| -> Result<KindTiming> {
            Ok(KindTiming {
                multiplies: attention_cost(size, size, c, cr, kind),
                seconds: time_attention(&weights, &h, kind, repeats)?,
            })
        };
        let crisscross = timing(AttentionKind::CrissCross)?;
        let nonlocal = timing(AttentionKind::NonLocal)?;
        results.push(SizeResult {
            size,
            cost_ratio: nonlocal.multiplies as f64 / crisscross.multiplies as f64,
            time_ratio: nonlocal.seconds / crisscross.seconds,
            crisscross,
            nonlocal,
        });
    }
    Ok(BenchReport { channels: c, reduced_channels: cr, repeats, seed, results })
}
