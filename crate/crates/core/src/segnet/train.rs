use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{binarize, Segmentor, SegmentorConfig};
use super::optim::{poly_lr, Sgd};
use crate::autograd::Graph;
use crate::error::{shape_err, Error, Result};
use crate::mask::Mask;
use crate::metrics::mean_dice;
use crate::tensor::Tensor;

/// An image (`1×H×W`, values in `[0, 1]`) with a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub image: Tensor,
    pub mask: Mask,
}

impl MaskPair {
    pub fn new(image: Tensor, mask: Mask) -> Result<Self> {
        if image.shape() != [1, mask.height(), mask.width()] {
            return Err(shape_err!(
                "image {:?} does not match a {}x{} mask",
                image.shape(),
                mask.height(),
                mask.width()
            ));
        }
        Ok(Self { image, mask })
    }
}

/// Stacks pair images into an `N×1×H×W` batch.
pub fn stack_images<'a>(pairs: impl IntoIterator<Item = &'a MaskPair>) -> Result<Tensor> {
    let parts = pairs
        .into_iter()
        .map(|p| {
            let [c, h, w] = p.image.shape()[..] else { unreachable!("checked in MaskPair::new") };
            p.image.clone().reshape(&[1, c, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_iter: usize,
    /// Validation DICE is measured every this many iterations and after the last one.
    #[serde(default = "default_val_interval")]
    pub val_interval: usize,
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.02
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.0005
}
fn default_power() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    4
}
fn default_val_interval() -> usize {
    100
}

impl TrainConfig {
    pub fn new(max_iter: usize, seed: u64) -> Self {
        Self {
            initial_lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            power: default_power(),
            batch_size: default_batch_size(),
            max_iter,
            val_interval: default_val_interval(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.initial_lr.is_nan() || self.initial_lr <= 0.0 {
            return bad("initial_lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.power.is_nan() || self.power <= 0.0 {
            return bad("power must be > 0");
        }
        if self.batch_size < 1 || self.max_iter < 1 || self.val_interval < 1 {
            return bad("batch_size, max_iter and val_interval must be >= 1");
        }
        Ok(())
    }
}

/// Seeded shuffled pass over `0..len`, reshuffled at every epoch boundary.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// `iter,lr,loss` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.iter, r.lr, r.loss).expect("writing to a String");
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation checkpoint (the final ones without a validation set).
    pub segmentor: Segmentor,
    pub log: TrainLog,
    /// `(iter, mean validation DICE)` at every validation point.
    pub val_history: Vec<(usize, f64)>,
    pub best_iter: usize,
}

/// Trains a fresh segmentor on `train_set` with MSE loss, momentum SGD and the
/// poly schedule, keeping the checkpoint with the best validation DICE.
pub fn train(
    train_set: &[MaskPair],
    val_set: &[MaskPair],
    seg_cfg: &SegmentorConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut net = Segmentor::build(seg_cfg)?;
    let val_images = if val_set.is_empty() { None } else { Some(stack_images(val_set)?) };
    let val_masks: Vec<Mask> = val_set.iter().map(|p| p.mask.clone()).collect();
    let targets: Vec<Tensor> = train_set.iter().map(|p| p.mask.to_tensor()).collect();

    let mut sampler = BatchSampler::new(train_set.len(), cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut val_history = Vec::new();
    let mut best: Option<(f64, usize, Segmentor)> = None;

    for iter in 0..cfg.max_iter {
        let lr = poly_lr(cfg.initial_lr, iter, cfg.max_iter, cfg.power)?;
        let idx = sampler.next_batch(cfg.batch_size);
        let images = stack_images(idx.iter().map(|&i| &train_set[i]))?;
        let target = Tensor::stack(&idx.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let nodes = net.register(&mut g);
        let x = g.constant(images);
        let prob = net.forward(&mut g, x, &nodes)?;
        let loss = g.mse_loss(prob, &target)?;
        g.backward(loss)?;
        let loss_value = g.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::InvalidState(format!("loss diverged at iteration {iter}")));
        }
        let grads: Vec<Tensor> = nodes.iter().map(|&n| g.grad(n).into_owned()).collect();
        drop(g);
        opt.step(net.params_mut(), &grads, lr)?;
        log.rows.push(LogRow { iter, lr, loss: loss_value });

        let done = iter + 1;
        if let Some(images) = &val_images {
            if done % cfg.val_interval == 0 || done == cfg.max_iter {
                let preds = binarize(&net.predict(images)?, 0.5)?;
                let dice = mean_dice(&preds, &val_masks)?;
                val_history.push((done, dice));
                if best.as_ref().is_none_or(|(b, _, _)| dice > *b) {
                    best = Some((dice, done, net.clone()));
                }
            }
        }
    }
    let (segmentor, best_iter) = match best {
        Some((_, it, s)) => (s, it),
        None => (net, cfg.max_iter),
    };
    Ok(TrainOutcome { segmentor, log, val_history, best_iter })
}
