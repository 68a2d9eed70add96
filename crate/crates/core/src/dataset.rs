//! On-disk datasets: `<id>_img.pgm` / `<id>_mask.pgm` pairs plus `manifest.json`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{
    assign_splits, corrupted_variants, derive_seed, generate_phantom, AbnormalityStyle, AugmentedPair, Phantom, Split,
};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::pgm;
use crate::segnet::MaskPair;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

const STREAM_PHANTOM: u64 = 0x50;
const STREAM_SPLIT: u64 = 0x5B;
const STREAM_CORRUPT: u64 = 0x43;

/// The `data` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_phantoms: usize,
    pub seed: u64,
    /// When set, every test phantom also gets one variant per abnormality
    /// style at this intensity, in the `test_corrupted` split.
    #[serde(default)]
    pub test_corruption: Option<f64>,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_phantoms < 1 {
            return Err(Error::InvalidConfig("data.n_phantoms must be >= 1".into()));
        }
        if self.height < crate::augment::MIN_PHANTOM_SIZE || self.width < crate::augment::MIN_PHANTOM_SIZE {
            return Err(Error::InvalidConfig(format!(
                "data size must be at least {0}x{0}",
                crate::augment::MIN_PHANTOM_SIZE
            )));
        }
        if let Some(t) = self.test_corruption {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig("data.test_corruption must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn phantom_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, STREAM_PHANTOM, index as u64)
    }

    pub fn phantoms(&self) -> Result<Vec<Phantom>> {
        (0..self.n_phantoms).map(|i| generate_phantom(self.height, self.width, self.phantom_seed(i))).collect()
    }

    pub fn splits(&self) -> Vec<Split> {
        assign_splits(self.n_phantoms, derive_seed(self.seed, STREAM_SPLIT, 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Phantoms,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub split: Split,
    /// Phantom the image was rendered from.
    pub source_id: String,
    pub source_seed: u64,
    pub style: Option<AbnormalityStyle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub pairs: Vec<PairEntry>,
}

impl Manifest {
    pub fn source_seeds(&self) -> HashSet<u64> {
        self.pairs.iter().map(|p| p.source_seed).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.pairs.iter().filter(|p| p.split == split).count()
    }
}

struct PendingPair<'a> {
    id: String,
    image: &'a Tensor,
    mask: &'a Mask,
    split: Split,
    source_id: String,
    source_seed: u64,
    style: Option<AbnormalityStyle>,
}

fn write_pairs(dir: &Path, pending: Vec<PendingPair<'_>>, mut manifest: Manifest) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    for p in pending {
        let image = format!("{}_img.pgm", p.id);
        let mask = format!("{}_mask.pgm", p.id);
        pgm::save_image(&dir.join(&image), &pgm::image_from_tensor(p.image)?)?;
        pgm::save_image(&dir.join(&mask), &pgm::image_from_mask(p.mask))?;
        manifest.pairs.push(PairEntry {
            id: p.id,
            image,
            mask,
            split: p.split,
            source_id: p.source_id,
            source_seed: p.source_seed,
            style: p.style,
        });
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Renders the phantom set described by `spec` into `dir`.
pub fn write_phantom_dataset(dir: &Path, spec: &DataSpec) -> Result<Manifest> {
    spec.validate()?;
    let phantoms = spec.phantoms()?;
    let splits = spec.splits();
    let mut corrupted = Vec::new();
    if let Some(intensity) = spec.test_corruption {
        for (i, (p, &split)) in phantoms.iter().zip(&splits).enumerate() {
            if split == Split::Test {
                corrupted
                    .push((i, corrupted_variants(p, intensity, derive_seed(spec.seed, STREAM_CORRUPT, i as u64))?));
            }
        }
    }
    let mut pending = Vec::new();
    for (i, (p, &split)) in phantoms.iter().zip(&splits).enumerate() {
        pending.push(PendingPair {
            id: format!("p{i:04}"),
            image: &p.image,
            mask: &p.true_mask,
            split,
            source_id: format!("p{i:04}"),
            source_seed: p.seed,
            style: None,
        });
    }
    for (i, variants) in &corrupted {
        let p = &phantoms[*i];
        for (style, image) in variants {
            pending.push(PendingPair {
                id: format!("p{i:04}_{}", style.style_id.name()),
                image,
                mask: &p.true_mask,
                split: Split::TestCorrupted,
                source_id: format!("p{i:04}"),
                source_seed: p.seed,
                style: Some(*style),
            });
        }
    }
    let manifest = Manifest {
        kind: DatasetKind::Phantoms,
        height: spec.height,
        width: spec.width,
        seed: spec.seed,
        pairs: vec![],
    };
    write_pairs(dir, pending, manifest)
}

/// Writes augmented pairs (all in the `train` split) with their pseudo masks.
pub fn write_augmented_dataset(dir: &Path, pairs: &[AugmentedPair], seed: u64) -> Result<Manifest> {
    let first = pairs.first().ok_or_else(|| Error::InvalidInput("no augmented pairs to write".into()))?;
    let (height, width) = (first.pseudo_mask.height(), first.pseudo_mask.width());
    let pending = pairs
        .iter()
        .map(|a| PendingPair {
            id: a.id.clone(),
            image: &a.image,
            mask: &a.pseudo_mask,
            split: Split::Train,
            source_id: a.source_id.clone(),
            source_seed: a.source_seed,
            style: a.style,
        })
        .collect();
    write_pairs(dir, pending, Manifest { kind: DatasetKind::Augmented, height, width, seed, pairs: vec![] })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut ids = HashSet::new();
    for p in &manifest.pairs {
        if !ids.insert(&p.id) {
            return Err(Error::InvalidInput(format!("duplicate pair id {:?}", p.id)));
        }
    }
    Ok(manifest)
}

/// Loads the pairs of `split` (every pair when `None`) in manifest order.
pub fn load_pairs(dir: &Path, manifest: &Manifest, split: Option<Split>) -> Result<Vec<MaskPair>> {
    manifest
        .pairs
        .iter()
        .filter(|p| split.is_none_or(|s| s == p.split))
        .map(|p| {
            let image = pgm::tensor_from_image(&pgm::load_image(&dir.join(&p.image))?);
            let mask = pgm::mask_from_image(&pgm::load_image(&dir.join(&p.mask))?)?;
            if mask.height() != manifest.height || mask.width() != manifest.width {
                return Err(Error::InvalidInput(format!(
                    "pair {:?} is {}x{}, manifest says {}x{}",
                    p.id,
                    mask.height(),
                    mask.width(),
                    manifest.height,
                    manifest.width
                )));
            }
            MaskPair::new(image, mask).map_err(|e| Error::InvalidInput(format!("pair {:?}: {e}", p.id)))
        })
        .collect()
}
