//! Synthetic chest phantoms, abnormality synthesis and pseudo-mask propagation.
//!
//! A [`Phantom`] is a procedurally rendered frontal chest image whose two lung
//! fields are ellipses, so its ground-truth mask is known exactly. Abnormal
//! variants are produced by brightening lung regions in one of four
//! [`StyleId`]s; geometry is never moved. The augmented training set pairs
//! every abnormal variant with the mask a segmentor predicted on the *normal*
//! source image.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::mask::Mask;
use crate::segnet::{MaskPair, Segmentor};
use crate::tensor::Tensor;

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED69);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A rotated ellipse in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub rx: f64,
    /// Semi-axis along the rotated y direction.
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Normalized radius: 0 at the center, 1 on the boundary.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        (u * u + v * v).sqrt()
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        self.radius(x as f64 + 0.5, y as f64 + 0.5) <= 1.0
    }

    pub fn rasterize(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |x, y| self.contains_pixel(x, y))
    }

    /// Boundary point at parametric angle `t`.
    pub fn boundary_point(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (self.rx * t.cos(), self.ry * t.sin());
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }
}

/// Shape and texture parameters a phantom was rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    /// Image-left and image-right lung fields.
    pub lungs: [Ellipse; 2],
    /// Rib bands across the frame height.
    pub rib_frequency: f64,
    pub rib_phase: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// `1×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub true_mask: Mask,
    pub seed: u64,
    pub params: PhantomParams,
}

impl Phantom {
    pub fn height(&self) -> usize {
        self.true_mask.height()
    }

    pub fn width(&self) -> usize {
        self.true_mask.width()
    }

    pub fn lung_masks(&self) -> [Mask; 2] {
        let (h, w) = (self.height(), self.width());
        self.params.lungs.map(|e| e.rasterize(h, w))
    }

    pub fn to_pair(&self) -> MaskPair {
        MaskPair { image: self.image.clone(), mask: self.true_mask.clone() }
    }
}

pub const MIN_PHANTOM_SIZE: usize = 32;

fn sample_lungs(h: usize, w: usize, rng: &mut ChaCha8Rng) -> [Ellipse; 2] {
    let (hf, wf) = (h as f64, w as f64);
    let mut lung = |center: f64| Ellipse {
        cx: wf * (center + rng.random_range(-0.03..0.03)),
        cy: hf * rng.random_range(0.45..0.55),
        rx: wf * rng.random_range(0.11..0.15),
        ry: hf * rng.random_range(0.25..0.32),
        angle: rng.random_range(-0.15..0.15),
    };
    [lung(0.30), lung(0.70)]
}

/// Renders a deterministic phantom for `seed`.
pub fn generate_phantom(h: usize, w: usize, seed: u64) -> Result<Phantom> {
    if h < MIN_PHANTOM_SIZE || w < MIN_PHANTOM_SIZE {
        return Err(arg_err!("phantoms need at least {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE} pixels, got {h}x{w}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Resample until the rasterized lungs are disjoint; with the ranges above
    // this only triggers for strongly non-square frames.
    let lungs = loop {
        let lungs = sample_lungs(h, w, &mut rng);
        if !lungs[0].rasterize(h, w).intersects(&lungs[1].rasterize(h, w)) {
            break lungs;
        }
    };
    let params = PhantomParams {
        lungs,
        rib_frequency: rng.random_range(4.0..7.0),
        rib_phase: rng.random_range(0.0..2.0 * PI),
        noise_sigma: rng.random_range(0.01..0.05),
    };
    let noise = Normal::new(0.0, params.noise_sigma).expect("positive sigma");
    let (hf, wf) = (h as f64, w as f64);
    let body = Ellipse { cx: wf * 0.5, cy: hf * 0.56, rx: wf * 0.47, ry: hf * 0.55, angle: 0.0 };
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = if body.radius(px, py) <= 1.0 {
                let ribs = 0.07 * (0.5 + 0.5 * (2.0 * PI * params.rib_frequency * py / hf + params.rib_phase).sin());
                let spine = 0.22 * (-((px - wf * 0.5) / (wf * 0.06)).powi(2)).exp();
                0.55 + ribs + spine
            } else {
                0.08
            };
            for lung in &params.lungs {
                let r = lung.radius(px, py);
                if r <= 1.0 {
                    // Dark field, darkest at the center.
                    v = 0.22
                        + 0.12 * r * r
                        + 0.07 * (0.5 + 0.5 * (2.0 * PI * params.rib_frequency * py / hf + params.rib_phase).sin());
                }
                v += 0.18 * (-((r - 1.0) / 0.06).powi(2)).exp();
            }
            v += noise.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0) + 0.0);
        }
    }
    let image = Tensor::new(&[1, h, w], data)?;
    let [l, r] = params.lungs.map(|e| e.rasterize(h, w));
    let true_mask = l.union(&r)?;
    Ok(Phantom { image, true_mask, seed, params })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleId {
    OpacityBlobs,
    DiffuseHaze,
    BasalGradient,
    BorderOcclusion,
}

impl StyleId {
    pub const ALL: [StyleId; 4] =
        [StyleId::OpacityBlobs, StyleId::DiffuseHaze, StyleId::BasalGradient, StyleId::BorderOcclusion];

    pub fn name(self) -> &'static str {
        match self {
            StyleId::OpacityBlobs => "opacity_blobs",
            StyleId::DiffuseHaze => "diffuse_haze",
            StyleId::BasalGradient => "basal_gradient",
            StyleId::BorderOcclusion => "border_occlusion",
        }
    }
}

impl std::str::FromStr for StyleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StyleId::ALL.into_iter().find(|id| id.name() == s).ok_or_else(|| arg_err!("unknown abnormality style {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbnormalityStyle {
    pub style_id: StyleId,
    pub intensity: f64,
    pub seed: u64,
}

/// Smooth weight: 1 inside either lung, decaying with normalized distance outside.
fn lung_proximity(lungs: &[Ellipse; 2], x: f64, y: f64) -> f64 {
    lungs
        .iter()
        .map(|e| {
            let out = (e.radius(x, y) - 1.0).max(0.0);
            (-(out / 0.3).powi(2)).exp()
        })
        .fold(0.0, f64::max)
}

fn gaussian(x: f64, y: f64, cx: f64, cy: f64, sigma: f64) -> f64 {
    (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
}

/// Corrupts the phantom's image with `style`; the lung geometry is untouched.
pub fn synthesize_abnormal(phantom: &Phantom, style: &AbnormalityStyle) -> Result<Tensor> {
    let intensity = style.intensity;
    if !(0.0..=1.0).contains(&intensity) {
        return Err(arg_err!("style intensity {intensity} outside [0, 1]"));
    }
    if intensity == 0.0 {
        return Ok(phantom.image.clone());
    }
    let (h, w) = (phantom.height(), phantom.width());
    let (hf, wf) = (h as f64, w as f64);
    let scale = hf.min(wf);
    let lungs = &phantom.params.lungs;
    let mut rng = ChaCha8Rng::seed_from_u64(style.seed);

    let field: Box<dyn Fn(f64, f64) -> f64> = match style.style_id {
        StyleId::OpacityBlobs => {
            let inside = phantom.true_mask.foreground();
            let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    let (bx, by) = inside[rng.random_range(0..inside.len())];
                    let sigma = scale * rng.random_range(0.05..0.10);
                    let amp = 0.6 * rng.random_range(0.7..1.0);
                    (bx as f64 + 0.5, by as f64 + 0.5, sigma, amp)
                })
                .collect();
            Box::new(move |x, y| blobs.iter().map(|&(bx, by, s, a)| a * gaussian(x, y, bx, by, s)).sum())
        }
        StyleId::DiffuseHaze => {
            let (fx, fy) = (rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
            let phase = rng.random_range(0.0..2.0 * PI);
            let lungs = *lungs;
            Box::new(move |x, y| {
                let wave = 0.7 + 0.3 * (2.0 * PI * (fx * x / wf + fy * y / hf) + phase).sin();
                0.45 * wave * lung_proximity(&lungs, x, y)
            })
        }
        StyleId::BasalGradient => {
            let which = rng.random_range(0..3usize);
            let starts: Vec<f64> = lungs.iter().map(|e| e.cy + hf * rng.random_range(-0.05..0.12)).collect();
            let lungs = *lungs;
            Box::new(move |x, y| {
                let mut best: f64 = 0.0;
                for (i, e) in lungs.iter().enumerate() {
                    if which != 2 && which != i {
                        continue;
                    }
                    let ramp = ((y - starts[i]) / (0.2 * hf)).clamp(0.0, 1.0);
                    let near = (-((e.radius(x, y) - 1.0).max(0.0) / 0.3).powi(2)).exp();
                    best = best.max(0.6 * ramp * near);
                }
                best
            })
        }
        StyleId::BorderOcclusion => {
            let lung = lungs[rng.random_range(0..2usize)];
            let t = rng.random_range(0.0..2.0 * PI);
            let (bx, by) = lung.boundary_point(t);
            let sigma = scale * rng.random_range(0.06..0.10);
            Box::new(move |x, y| 0.65 * gaussian(x, y, bx, by, sigma))
        }
    };

    let mut out = phantom.image.clone();
    for y in 0..h {
        for x in 0..w {
            let v = &mut out.data_mut()[y * w + x];
            *v = (*v + intensity * field(x as f64 + 0.5, y as f64 + 0.5)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Anything that can segment a `1×H×W` image.
pub trait MaskPredictor {
    fn predict_masks(&self, images: &[&Tensor]) -> Result<Vec<Mask>>;
}

impl MaskPredictor for Segmentor {
    fn predict_masks(&self, images: &[&Tensor]) -> Result<Vec<Mask>> {
        let parts = images
            .iter()
            .map(|t| {
                let [c, h, w] = t.shape()[..] else { return Err(crate::error::shape_err!("expected a 1×H×W image")) };
                (*t).clone().reshape(&[1, c, h, w])
            })
            .collect::<Result<Vec<_>>>()?;
        self.segment(&Tensor::stack(&parts)?, 0.5)
    }
}

/// Segments the normal image and binarizes at 0.5; the result is the pseudo
/// mask for every abnormal variant of that image.
pub fn propagate_mask<P: MaskPredictor + ?Sized>(predictor: Option<&P>, normal_image: &Tensor) -> Result<Mask> {
    let predictor =
        predictor.ok_or_else(|| Error::InvalidState("no segmentor available for mask propagation".into()))?;
    predictor
        .predict_masks(&[normal_image])?
        .pop()
        .ok_or_else(|| Error::InvalidState("segmentor returned no mask".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub id: String,
    pub image: Tensor,
    pub pseudo_mask: Mask,
    pub source_id: String,
    pub source_seed: u64,
    /// `None` for the normal pair itself.
    pub style: Option<AbnormalityStyle>,
    /// Exact geometry of the source phantom, kept for auditing pseudo masks.
    pub true_mask: Mask,
}

impl AugmentedPair {
    pub fn to_pair(&self) -> MaskPair {
        MaskPair { image: self.image.clone(), mask: self.pseudo_mask.clone() }
    }
}

const STREAM_ROUND: u64 = 0xA5;
const STREAM_NORMAL: u64 = 0x4E;
const STREAM_STYLE: u64 = 0x53;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub n_normal: usize,
    #[serde(default = "default_per_normal")]
    pub per_normal: usize,
    /// Number of nested construction rounds; round `i` yields `A^i`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    pub seed: u64,
}

fn default_per_normal() -> usize {
    5
}
fn default_rounds() -> usize {
    1
}

/// One construction round: `n_normal` fresh normal phantoms, each followed by
/// `per_normal` abnormal variants sharing its propagated mask.
pub fn build_augmented_set<P: MaskPredictor + ?Sized>(
    n_normal: usize,
    per_normal: usize,
    predictor: Option<&P>,
    seed: u64,
    (h, w): (usize, usize),
) -> Result<Vec<AugmentedPair>> {
    build_round(n_normal, per_normal, predictor, seed, (h, w), "a")
}

fn build_round<P: MaskPredictor + ?Sized>(
    n_normal: usize,
    per_normal: usize,
    predictor: Option<&P>,
    seed: u64,
    (h, w): (usize, usize),
    prefix: &str,
) -> Result<Vec<AugmentedPair>> {
    if n_normal < 1 || per_normal < 1 {
        return Err(arg_err!("n_normal and per_normal must be >= 1"));
    }
    let predictor =
        predictor.ok_or_else(|| Error::InvalidState("no segmentor available for mask propagation".into()))?;
    let phantoms = (0..n_normal)
        .map(|i| generate_phantom(h, w, derive_seed(seed, STREAM_NORMAL, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<&Tensor> = phantoms.iter().map(|p| &p.image).collect();
    let masks = predictor.predict_masks(&images)?;

    let mut out = Vec::with_capacity(n_normal * (1 + per_normal));
    for (i, (phantom, mask)) in phantoms.iter().zip(masks).enumerate() {
        let source_id = format!("{prefix}{i:04}");
        out.push(AugmentedPair {
            id: format!("{source_id}_n"),
            image: phantom.image.clone(),
            pseudo_mask: mask.clone(),
            source_id: source_id.clone(),
            source_seed: phantom.seed,
            style: None,
            true_mask: phantom.true_mask.clone(),
        });
        for k in 0..per_normal {
            let global = (i * per_normal + k) as u64;
            let style_seed = derive_seed(seed, STREAM_STYLE, global);
            let intensity = ChaCha8Rng::seed_from_u64(style_seed).random_range(0.4..1.0);
            let style = AbnormalityStyle { style_id: StyleId::ALL[(global % 4) as usize], intensity, seed: style_seed };
            out.push(AugmentedPair {
                id: format!("{source_id}_s{k}"),
                image: synthesize_abnormal(phantom, &style)?,
                pseudo_mask: mask.clone(),
                source_id: source_id.clone(),
                source_seed: phantom.seed,
                style: Some(style),
                true_mask: phantom.true_mask.clone(),
            });
        }
    }
    Ok(out)
}

/// `A^rounds`: the union of `rounds` independent construction rounds, so
/// `A^i` is a prefix of `A^{i+1}`.
pub fn build_nested_sets<P: MaskPredictor + ?Sized>(
    spec: &AugmentSpec,
    predictor: Option<&P>,
    size: (usize, usize),
) -> Result<Vec<AugmentedPair>> {
    if spec.rounds < 1 {
        return Err(arg_err!("rounds must be >= 1"));
    }
    let mut all = Vec::new();
    for r in 0..spec.rounds {
        let seed = derive_seed(spec.seed, STREAM_ROUND, r as u64);
        all.extend(build_round(spec.n_normal, spec.per_normal, predictor, seed, size, &format!("a{}_", r + 1))?);
    }
    Ok(all)
}

/// Shuffled 70/10/20 train/validation/test assignment.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Abnormal variants of test phantoms, scored against their true masks.
    TestCorrupted,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::TestCorrupted => "test_corrupted",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test, Split::TestCorrupted]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| arg_err!("unknown split {s:?}"))
    }
}

/// The four corrupted variants (one per style) of a phantom at fixed intensity.
pub fn corrupted_variants(phantom: &Phantom, intensity: f64, seed: u64) -> Result<Vec<(AbnormalityStyle, Tensor)>> {
    StyleId::ALL
        .iter()
        .enumerate()
        .map(|(k, &style_id)| {
            let style = AbnormalityStyle { style_id, intensity, seed: derive_seed(seed, STREAM_STYLE, k as u64) };
            Ok((style, synthesize_abnormal(phantom, &style)?))
        })
        .collect()
}
