//! Pixel-wise segmentation metrics: REC, PRE, DICE, AVD and VS.
//!
//! Overlap scores come from [`ConfusionCounts`]. When a score's denominator is
//! zero it is 1.0 if the two masks agree (both empty) and 0.0 otherwise.
//! The averaged Hausdorff distance is the larger of the two directed mean
//! nearest-neighbour distances and is undefined when either mask is empty.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        ratio(2 * self.tp, denom, true)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn volumetric_similarity(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 1.0;
        }
        1.0 - self.fp.abs_diff(self.fn_) as f64 / denom as f64
    }
}

fn ratio(num: u64, denom: u64, agree_when_empty: bool) -> f64 {
    match denom {
        0 if agree_when_empty => 1.0,
        0 => 0.0,
        d => num as f64 / d as f64,
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::InvalidInput(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Averaged Hausdorff distance in pixels.
pub fn averaged_hausdorff(a: &Mask, b: &Mask) -> Result<f64> {
    averaged_hausdorff_with_spacing(a, b, 1.0)
}

/// Averaged Hausdorff distance with isotropic pixel `spacing`.
pub fn averaged_hausdorff_with_spacing(a: &Mask, b: &Mask, spacing: f64) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(shape_err!("averaged Hausdorff needs masks of equal shape"));
    }
    let pa = a.foreground();
    let pb = b.foreground();
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::UndefinedMetric("averaged Hausdorff distance to an empty mask".into()));
    }
    let ab = directed_mean_distance(&pa, &pb);
    let ba = directed_mean_distance(&pb, &pa);
    Ok(spacing * ab.max(ba))
}

fn directed_mean_distance(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(x, y)| {
            let best = to
                .iter()
                .map(|&(u, v)| {
                    let dx = x.abs_diff(u) as u64;
                    let dy = y.abs_diff(v) as u64;
                    dx * dx + dy * dy
                })
                .min()
                .expect("non-empty target set");
            (best as f64).sqrt()
        })
        .sum();
    total / from.len() as f64
}

/// All five metrics for one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub rec: f64,
    pub pre: f64,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub avd: Option<f64>,
    pub vs: f64,
}

pub fn image_metrics(pred: &Mask, gt: &Mask) -> Result<ImageMetrics> {
    let c = confusion(pred, gt)?;
    let avd = match averaged_hausdorff(pred, gt) {
        Ok(d) => Some(d),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ImageMetrics { rec: c.recall(), pre: c.precision(), dice: c.dice(), avd, vs: c.volumetric_similarity() })
}

/// Mean and population standard deviation of one metric over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub n_undefined: usize,
}

impl MetricSummary {
    fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut n_undefined = 0;
        for v in values {
            match v {
                Some(v) => defined.push(v),
                None => n_undefined += 1,
            }
        }
        if defined.is_empty() {
            return Self { mean: None, std: None, n: 0, n_undefined };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean: Some(mean), std: Some(var.sqrt()), n: defined.len(), n_undefined }
    }

    /// Mean, or NaN when no image had a defined value.
    pub fn mean_or_nan(&self) -> f64 {
        self.mean.unwrap_or(f64::NAN)
    }
}

/// Dataset-level report; the JSON form carries exactly the five summaries
/// in REC, PRE, DICE, AVD, VS order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rec: MetricSummary,
    pub pre: MetricSummary,
    pub dice: MetricSummary,
    pub avd: MetricSummary,
    pub vs: MetricSummary,
    #[serde(skip)]
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let pick = |f: fn(&ImageMetrics) -> Option<f64>| MetricSummary::from_values(per_image.iter().map(f));
        Self {
            rec: pick(|m| Some(m.rec)),
            pre: pick(|m| Some(m.pre)),
            dice: pick(|m| Some(m.dice)),
            avd: pick(|m| m.avd),
            vs: pick(|m| Some(m.vs)),
            per_image,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate_dataset(preds: &[Mask], gts: &[Mask]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let per_image = preds.iter().zip(gts).map(|(p, g)| image_metrics(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(per_image))
}

/// Mean DICE over aligned mask pairs.
pub fn mean_dice(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::InvalidInput("mean_dice needs equal, non-empty sequences".into()));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += confusion(p, g)?.dice();
    }
    Ok(total / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        Mask::from_fn(h, w, |x, y| on.contains(&(x, y)))
    }

    #[test]
    fn identical_masks() {
        let m = mask(4, 4, &[(0, 0), (1, 2), (3, 3)]);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 3, fp: 0, fn_: 0, tn: 13 });
        assert_eq!((c.dice(), c.precision(), c.recall(), c.volumetric_similarity()), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(averaged_hausdorff(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn all_ones_against_empty() {
        let c = confusion(&Mask::from_fn(4, 4, |_, _| true), &Mask::zeros(4, 4)).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 16, fn_: 0, tn: 0 });
        assert_eq!(c.precision(), 0.0);
        assert_eq!(c.recall(), 0.0);
        assert_eq!(c.dice(), 0.0);
    }

    #[test]
    fn both_empty_is_perfect() {
        let c = confusion(&Mask::zeros(3, 3), &Mask::zeros(3, 3)).unwrap();
        assert_eq!((c.dice(), c.precision(), c.recall(), c.volumetric_similarity()), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn worked_counts() {
        let c = ConfusionCounts { tp: 6, fp: 2, fn_: 2, tn: 0 };
        assert_eq!(c.dice(), 0.75);
        assert_eq!(c.volumetric_similarity(), 1.0);
        let disjoint = ConfusionCounts { tp: 0, fp: 3, fn_: 5, tn: 8 };
        assert_eq!(disjoint.dice(), 0.0);
        assert_eq!(disjoint.volumetric_similarity(), 1.0 - 2.0 / 8.0);
    }

    #[test]
    fn avd_examples() {
        let a = mask(4, 4, &[(0, 0)]);
        let b = mask(4, 4, &[(0, 3)]);
        assert_eq!(averaged_hausdorff(&a, &b).unwrap(), 3.0);
        let a = mask(4, 4, &[(0, 0), (0, 1)]);
        let b = mask(4, 4, &[(0, 2)]);
        assert_eq!(averaged_hausdorff(&a, &b).unwrap(), 1.5);
        assert!(matches!(averaged_hausdorff(&a, &Mask::zeros(4, 4)), Err(Error::UndefinedMetric(_))));
        assert_eq!(averaged_hausdorff_with_spacing(&a, &b, 0.5).unwrap(), 0.75);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(matches!(confusion(&Mask::zeros(2, 2), &Mask::zeros(2, 3)), Err(Error::InvalidInput(_))));
        assert!(evaluate_dataset(&[Mask::zeros(2, 2)], &[]).is_err());
    }

    #[test]
    fn dataset_aggregation() {
        let m = mask(4, 4, &[(1, 1), (2, 1)]);
        let r = evaluate_dataset(std::slice::from_ref(&m), std::slice::from_ref(&m)).unwrap();
        let means: Vec<f64> = [r.rec, r.pre, r.dice, r.avd, r.vs].iter().map(|s| s.mean.unwrap()).collect();
        assert_eq!(means, vec![1.0, 1.0, 1.0, 0.0, 1.0]);
        assert!([r.rec, r.pre, r.dice, r.avd, r.vs].iter().all(|s| s.std == Some(0.0)));

        // dice 1.0 and 0.5: tp=1, fp=1, fn=1 gives 2/4.
        let gt = mask(4, 4, &[(0, 0), (1, 0)]);
        let half = mask(4, 4, &[(0, 0), (2, 0)]);
        let r = evaluate_dataset(&[gt.clone(), half], &[gt.clone(), gt]).unwrap();
        assert_eq!(r.dice.mean, Some(0.75));
        assert_eq!(r.dice.std, Some(0.25));
    }

    #[test]
    fn json_key_order_and_undefined_avd() {
        let gt = mask(3, 3, &[(1, 1)]);
        let r = evaluate_dataset(&[Mask::zeros(3, 3), gt.clone()], &[gt.clone(), gt]).unwrap();
        assert_eq!((r.avd.n, r.avd.n_undefined), (1, 1));
        let json = r.to_json().unwrap();
        let pos: Vec<usize> =
            ["\"rec\"", "\"pre\"", "\"dice\"", "\"avd\"", "\"vs\""].iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 5);
        for k in ["rec", "pre", "dice", "avd", "vs"] {
            let inner = v[k].as_object().unwrap();
            let mut ik: Vec<&str> = inner.keys().map(|s| s.as_str()).collect();
            ik.sort();
            assert_eq!(ik, vec!["mean", "n", "n_undefined", "std"]);
        }
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |bits| Mask::new(h, w, bits.into_iter().map(|b| b as u8).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn symmetric_metrics(a in arb_mask(6, 7), b in arb_mask(6, 7)) {
            prop_assert_eq!(confusion(&a, &b).unwrap().dice(), confusion(&b, &a).unwrap().dice());
            if !a.is_empty() && !b.is_empty() {
                prop_assert_eq!(averaged_hausdorff(&a, &b).unwrap(), averaged_hausdorff(&b, &a).unwrap());
            }
        }

        #[test]
        fn dice_is_harmonic_mean_of_pre_and_rec(a in arb_mask(5, 5), b in arb_mask(5, 5)) {
            let c = confusion(&a, &b).unwrap();
            let (p, r) = (c.precision(), c.recall());
            if p + r > 0.0 {
                prop_assert!((c.dice() - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
            prop_assert_eq!(c.total(), 25);
        }

        #[test]
        fn avd_translation_invariant(a in arb_mask(4, 4), b in arb_mask(4, 4), dx in 0usize..4, dy in 0usize..4) {
            prop_assume!(!a.is_empty() && !b.is_empty());
            let shift = |m: &Mask| Mask::from_fn(8, 8, |x, y| x >= dx && y >= dy && x - dx < 4 && y - dy < 4 && m.get(x - dx, y - dy));
            let pad = |m: &Mask| Mask::from_fn(8, 8, |x, y| x < 4 && y < 4 && m.get(x, y));
            prop_assert_eq!(
                averaged_hausdorff(&pad(&a), &pad(&b)).unwrap(),
                averaged_hausdorff(&shift(&a), &shift(&b)).unwrap()
            );
        }

        #[test]
        fn self_comparison_is_perfect(a in arb_mask(6, 6)) {
            let m = image_metrics(&a, &a).unwrap();
            prop_assert_eq!((m.dice, m.pre, m.rec, m.vs), (1.0, 1.0, 1.0, 1.0));
            if !a.is_empty() {
                prop_assert_eq!(m.avd, Some(0.0));
            }
        }
    }
}
