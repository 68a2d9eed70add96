//! Trains the segmentor on 40 synthetic phantoms and scores the test split.
//!
//!     cargo run --release --example train_phantoms -- [iterations]

use xlsor::augment::Split;
use xlsor::dataset::DataSpec;
use xlsor::metrics::evaluate_dataset;
use xlsor::segnet::{stack_images, train, MaskPair, SegmentorConfig, TrainConfig};

fn main() -> xlsor::Result<()> {
    let iters = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let data = DataSpec { height: 64, width: 64, n_phantoms: 40, seed: 1, test_corruption: None };
    let phantoms = data.phantoms()?;
    let splits = data.splits();
    let pick = |s: Split| -> Vec<MaskPair> {
        phantoms.iter().zip(&splits).filter(|(_, &sp)| sp == s).map(|(p, _)| p.to_pair()).collect()
    };
    let (train_set, val_set, test_set) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));

    let cfg = TrainConfig { val_interval: 50, ..TrainConfig::new(iters, 7) };
    let out = train(&train_set, &val_set, &SegmentorConfig::with_seed(3), &cfg)?;
    for row in out.log.rows.iter().step_by((iters / 10).max(1)) {
        println!("iter {:>5}  lr {:.5}  loss {:.5}", row.iter, row.lr, row.loss);
    }
    for (it, dice) in &out.val_history {
        println!("val dice {dice:.4} at iter {it}");
    }

    let preds = out.segmentor.segment(&stack_images(&test_set)?, 0.5)?;
    let gts: Vec<_> = test_set.into_iter().map(|p| p.mask).collect();
    println!("best checkpoint from iter {}; test report:", out.best_iter);
    println!("{}", evaluate_dataset(&preds, &gts)?.to_json()?);
    Ok(())
}
