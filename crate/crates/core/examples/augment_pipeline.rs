//! Builds an augmented set: a segmentor trained on normal phantoms labels new
//! normal phantoms, and each label is reused for abnormal variants of that image.
//! Writes the pairs as PGM files plus a manifest.
//!
//!     cargo run --release --example augment_pipeline -- [out_dir]

use std::path::PathBuf;

use xlsor::augment::{build_augmented_set, Split};
use xlsor::dataset::{write_augmented_dataset, DataSpec};
use xlsor::metrics::mean_dice;
use xlsor::segnet::{train, MaskPair, SegmentorConfig, TrainConfig};

fn main() -> xlsor::Result<()> {
    let out_dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xlsor_aug"));
    let data = DataSpec { height: 64, width: 64, n_phantoms: 40, seed: 1, test_corruption: None };
    let phantoms = data.phantoms()?;
    let splits = data.splits();
    let pick = |s: Split| -> Vec<MaskPair> {
        phantoms.iter().zip(&splits).filter(|(_, &sp)| sp == s).map(|(p, _)| p.to_pair()).collect()
    };
    println!("training the labelling segmentor ...");
    let net =
        train(&pick(Split::Train), &pick(Split::Val), &SegmentorConfig::with_seed(3), &TrainConfig::new(1500, 7))?
            .segmentor;

    let pairs = build_augmented_set(20, 5, Some(&net), 77, (64, 64))?;
    let (pseudo, truth): (Vec<_>, Vec<_>) =
        pairs.iter().filter(|p| p.style.is_none()).map(|p| (p.pseudo_mask.clone(), p.true_mask.clone())).unzip();
    println!("{} pairs; pseudo-mask DICE against true geometry {:.4}", pairs.len(), mean_dice(&pseudo, &truth)?);
    for p in pairs.iter().take(6) {
        let style = p.style.map_or("normal".to_string(), |s| format!("{} @ {:.2}", s.style_id.name(), s.intensity));
        println!("  {:<10} from {}  {style}", p.id, p.source_id);
    }
    let m = write_augmented_dataset(&out_dir, &pairs, 77)?;
    println!("wrote {} pairs to {}", m.pairs.len(), out_dir.display());
    Ok(())
}
