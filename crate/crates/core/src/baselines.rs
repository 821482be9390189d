//! Reference detectors to compare against: random pixel subsets and
//! thresholded predictive uncertainty from Monte-Carlo dropout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::grid::{Image, Map, MaskProvenance, Shape, TamperMask};
use crate::math;
use crate::metrics;
use crate::model::ModelParams;
use crate::rng;
use crate::{Error, Result};

/// Number of quantile steps the threshold sweep uses by default.
pub const DEFAULT_GRANULARITY: usize = 256;
pub const DEFAULT_DROP_RATE: f64 = 0.2;
pub const DEFAULT_PASSES: usize = 20;

/// Flags exactly `round(fraction · H · W)` pixels, chosen uniformly.
pub fn random_baseline(shape: Shape, fraction: f64, seed: u64) -> Result<TamperMask> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!("fraction must be in [0, 1], got {fraction}")));
    }
    let n = math::round(fraction * shape.area() as f64) as usize;
    let mut r = rng::seeded(rng::derive(seed, 0xba5e, 0));
    let mut flags = vec![false; shape.area()];
    for i in sample(&mut r, shape.area(), n) {
        flags[i] = true;
    }
    TamperMask::from_flags(shape, flags, MaskProvenance::Predicted)
}

/// Nonnegative per-pixel uncertainty of the density output.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap(Map);

impl UncertaintyMap {
    pub fn new(values: Map) -> Result<Self> {
        if values.as_slice().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("uncertainty must be finite and nonnegative".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Map {
        &self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }
}

/// Per-pixel variance of the density prediction over `n_passes` dropout
/// passes.
pub fn dropout_uncertainty(model: &ModelParams, image: &Image, n_passes: usize, drop_rate: f64, seed: u64) -> Result<UncertaintyMap> {
    if n_passes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 passes, got {n_passes}")));
    }
    let mut r = rng::seeded(rng::derive(seed, 0xd0, 0));
    let area = model.shape().area();
    // shifted accumulation: exact zero when every pass agrees
    let mut shift: Option<Vec<f64>> = None;
    let mut sum = vec![0.0; area];
    let mut sum_sq = vec![0.0; area];
    for _ in 0..n_passes {
        let p = model.forward_stochastic(image, drop_rate, &mut r)?;
        let d = p.density.as_slice();
        let k = shift.get_or_insert_with(|| d.to_vec());
        for i in 0..area {
            let v = d[i] - k[i];
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = n_passes as f64;
    let var: Vec<f64> = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, q)| ((q - s * s / n) / n).max(0.0))
        .collect();
    UncertaintyMap::new(Map::from_vec(model.shape(), var)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice {
    pub masks: Vec<TamperMask>,
    /// Pixels strictly above this value are flagged; `-inf` flags everything.
    pub threshold: f64,
    pub miou: f64,
    /// Every value was identical, so only "all" or "nothing" was possible.
    pub degenerate: bool,
}

/// Candidate thresholds: the `k/g` quantiles of the pooled values for
/// `k = 0..=g`, plus `-inf`. Doubling `g` yields a superset.
pub fn quantile_candidates(maps: &[UncertaintyMap], granularity: usize) -> Vec<f64> {
    let mut pooled: Vec<f64> = maps.iter().flat_map(|m| m.values().as_slice().iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    let mut out = vec![f64::NEG_INFINITY];
    if pooled.is_empty() || granularity == 0 {
        return out;
    }
    let last = (pooled.len() - 1) as u128;
    for k in 0..=granularity as u128 {
        // exact integer index so k/g and 2k/2g pick the same element
        let idx = (k * last + granularity as u128 / 2) / granularity as u128;
        out.push(pooled[idx as usize]);
    }
    out.dedup();
    out
}

/// Picks, with knowledge of the true masks, the single threshold that
/// maximises mIoU over the frames. Ties go to the lowest candidate.
pub fn threshold_uncertainty(maps: &[UncertaintyMap], gt_masks: &[TamperMask], granularity: usize) -> Result<ThresholdChoice> {
    if maps.is_empty() {
        return Err(Error::Empty("uncertainty maps"));
    }
    if maps.len() != gt_masks.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} masks", maps.len()),
            actual: format!("{} masks", gt_masks.len()),
        });
    }
    for (m, g) in maps.iter().zip(gt_masks) {
        m.shape().ensure_eq(g.shape())?;
    }
    let candidates = quantile_candidates(maps, granularity);
    let first = maps[0].values().as_slice()[0];
    let degenerate = maps
        .iter()
        .all(|m| m.values().as_slice().iter().all(|&v| v == first));

    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &t in &candidates {
        let masks = apply_threshold(maps, t);
        let m = metrics::miou(&masks, gt_masks, None)?;
        if m > best.1 {
            best = (t, m);
        }
    }
    Ok(ThresholdChoice {
        masks: apply_threshold(maps, best.0),
        threshold: best.0,
        miou: best.1,
        degenerate,
    })
}

pub fn apply_threshold(maps: &[UncertaintyMap], threshold: f64) -> Vec<TamperMask> {
    maps.iter()
        .map(|m| {
            let v = m.values();
            TamperMask::from_fn(v.shape(), MaskProvenance::Predicted, |r, c| v.get(r, c) > threshold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{expected_random_iou, miou};
    use crate::model::Architecture;
    use crate::scene::quarter_mask;
    use rand::Rng as _;

    #[test]
    fn random_baseline_cardinality_and_determinism() {
        let s = Shape::new(100, 100);
        assert_eq!(random_baseline(s, 0.25, 1).unwrap().count(), 2500);
        assert_eq!(random_baseline(s, 0.5, 1).unwrap().count(), 5000);
        assert_eq!(random_baseline(s, 0.25, 7).unwrap(), random_baseline(s, 0.25, 7).unwrap());
        assert_ne!(random_baseline(s, 0.25, 7).unwrap(), random_baseline(s, 0.25, 8).unwrap());
        assert!(random_baseline(s, 1.5, 0).is_err());
    }

    #[test]
    fn random_baseline_converges_to_analytic_iou() {
        let s = Shape::new(40, 40);
        let gt: Vec<TamperMask> = (0..200).map(|i| quarter_mask(s, (i % 4) as u8).unwrap()).collect();
        for k in [0.5, 0.25] {
            let preds: Vec<TamperMask> = (0..200).map(|i| random_baseline(s, k, i).unwrap()).collect();
            let m = miou(&preds, &gt, None).unwrap();
            assert!((m - expected_random_iou(k)).abs() < 0.01, "{k}: {m}");
        }
    }

    fn model() -> ModelParams {
        ModelParams::init(Architecture::new(8, 8).with_widths(&[4, 6, 8], &[6, 4]), 2).unwrap()
    }

    #[test]
    fn zero_drop_rate_has_zero_variance() {
        let img = Image::filled(Shape::new(8, 8), 120.0);
        let u = dropout_uncertainty(&model(), &img, 5, 0.0, 1).unwrap();
        assert!(u.values().as_slice().iter().all(|&v| v == 0.0));
        assert!(dropout_uncertainty(&model(), &img, 1, 0.2, 1).is_err());
        let noisy = dropout_uncertainty(&model(), &img, 5, 0.3, 1).unwrap();
        assert!(noisy.values().max() > 0.0);
        assert_eq!(noisy, dropout_uncertainty(&model(), &img, 5, 0.3, 1).unwrap());
    }

    #[test]
    fn variance_ignores_constant_shift() {
        // the shift is applied to the samples the estimator sees
        let mut r = rng::seeded(3);
        let samples: Vec<f64> = (0..20).map(|_| r.gen_range(0.0..1.0)).collect();
        let var = |xs: &[f64]| {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
        };
        let shifted: Vec<f64> = samples.iter().map(|x| x + 5.0).collect();
        assert!((var(&samples) - var(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn informative_map_gives_perfect_iou() {
        let s = Shape::new(6, 6);
        let gts: Vec<TamperMask> = (0..4).map(|q| quarter_mask(s, q).unwrap()).collect();
        let maps: Vec<UncertaintyMap> = gts
            .iter()
            .map(|g| UncertaintyMap::new(Map::from_fn(s, |r, c| if g.get(r, c) { 1.0 } else { 0.0 })).unwrap())
            .collect();
        let best = threshold_uncertainty(&maps, &gts, DEFAULT_GRANULARITY).unwrap();
        assert_eq!(best.miou, 1.0);
        assert!(!best.degenerate);
    }

    #[test]
    fn constant_map_picks_better_extreme() {
        let s = Shape::new(4, 4);
        let gts = vec![quarter_mask(s, 0).unwrap()];
        let maps = vec![UncertaintyMap::new(Map::filled(s, 0.3)).unwrap()];
        let best = threshold_uncertainty(&maps, &gts, DEFAULT_GRANULARITY).unwrap();
        assert!(best.degenerate);
        let all = metrics::iou(&TamperMask::full(s, MaskProvenance::Predicted), &gts[0], None).unwrap();
        let none = metrics::iou(&TamperMask::empty(s, MaskProvenance::Predicted), &gts[0], None).unwrap();
        assert_eq!(best.miou, all.max(none));
    }

    #[test]
    fn finer_sweep_never_worse() {
        let s = Shape::new(10, 10);
        let mut r = rng::seeded(5);
        let gts: Vec<TamperMask> = (0..6).map(|i| quarter_mask(s, (i % 4) as u8).unwrap()).collect();
        let maps: Vec<UncertaintyMap> = gts
            .iter()
            .map(|g| UncertaintyMap::new(Map::from_fn(s, |row, c| r.gen_range(0.0..1.0) + if g.get(row, c) { 0.3 } else { 0.0 })).unwrap())
            .collect();
        let mut prev = 0.0;
        for g in [4, 8, 16, 32, 64, 128, 256, 512] {
            let c = quantile_candidates(&maps, g);
            let c2 = quantile_candidates(&maps, 2 * g);
            assert!(c.iter().all(|v| c2.contains(v)));
            let m = threshold_uncertainty(&maps, &gts, g).unwrap().miou;
            assert!(m >= prev);
            prev = m;
        }
        // oracle bound over any fixed threshold
        for t in [0.1, 0.5, 0.9, 1.2] {
            let fixed = miou(&apply_threshold(&maps, t), &gts, None).unwrap();
            assert!(threshold_uncertainty(&maps, &gts, 10_000).unwrap().miou >= fixed);
        }
    }
}
