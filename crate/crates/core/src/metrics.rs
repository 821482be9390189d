//! Detection and regression metrics: mask IoU, count errors and depth error
//! over tampered pixels.

use alloc::format;
use alloc::vec::Vec;

use crate::grid::{Map, TamperMask};
use crate::math;
use crate::{Error, Result};

/// IoU of two masks, restricted to `roi` when given. Two empty masks agree
/// perfectly and score 1.
pub fn iou(pred: &TamperMask, gt: &TamperMask, roi: Option<&TamperMask>) -> Result<f64> {
    pred.shape().ensure_eq(gt.shape())?;
    if let Some(r) = roi {
        pred.shape().ensure_eq(r.shape())?;
    }
    let (mut inter, mut uni) = (0usize, 0usize);
    for (i, (&p, &g)) in pred.flags().iter().zip(gt.flags()).enumerate() {
        if roi.map_or(false, |r| !r.flags()[i]) {
            continue;
        }
        inter += (p && g) as usize;
        uni += (p || g) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

/// Mean per-frame IoU.
pub fn miou(pred: &[TamperMask], gt: &[TamperMask], roi: Option<&TamperMask>) -> Result<f64> {
    Ok(mean(&per_frame_iou(pred, gt, roi)?))
}

pub fn per_frame_iou(pred: &[TamperMask], gt: &[TamperMask], roi: Option<&TamperMask>) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} masks", gt.len()),
            actual: format!("{} masks", pred.len()),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("mask list"));
    }
    pred.iter().zip(gt).map(|(p, g)| iou(p, g, roi)).collect()
}

/// Count error summary.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CountErrors {
    pub dmae: f64,
    pub rmse: f64,
}

/// DMAE and RMSE between integrated density maps and ground-truth counts.
pub fn count_errors(density_est: &[Map], gt_counts: &[f64]) -> Result<CountErrors> {
    if density_est.len() != gt_counts.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} counts", density_est.len()),
            actual: format!("{} counts", gt_counts.len()),
        });
    }
    let estimates: Vec<f64> = density_est.iter().map(Map::sum).collect();
    count_errors_from_totals(&estimates, gt_counts)
}

pub fn count_errors_from_totals(estimates: &[f64], gt_counts: &[f64]) -> Result<CountErrors> {
    if estimates.is_empty() {
        return Err(Error::Empty("frame list"));
    }
    if estimates.len() != gt_counts.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} counts", estimates.len()),
            actual: format!("{} counts", gt_counts.len()),
        });
    }
    let n = estimates.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (e, g) in estimates.iter().zip(gt_counts) {
        let d = e - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok(CountErrors {
        dmae: abs / n,
        rmse: math::sqrt(sq / n),
    })
}

/// Mean absolute depth error over tampered pixels, averaged over frames.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Zmae {
    pub value: f64,
    pub per_frame: Vec<Option<f64>>,
    /// Frames without tampered pixels, left out of the average.
    pub skipped: Vec<usize>,
}

pub fn zmae(depth_est: &[Map], depth_ref: &[Map], masks: &[TamperMask]) -> Result<Zmae> {
    if depth_est.len() != depth_ref.len() || depth_est.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames", depth_est.len()),
            actual: format!("{} refs / {} masks", depth_ref.len(), masks.len()),
        });
    }
    let mut per_frame = Vec::with_capacity(masks.len());
    let mut skipped = Vec::new();
    for (i, ((e, r), m)) in depth_est.iter().zip(depth_ref).zip(masks).enumerate() {
        let err = e.zip_map(r, |a, b| (a - b).abs())?;
        let v = err.masked_mean(m);
        if v.is_none() {
            skipped.push(i);
        }
        per_frame.push(v);
    }
    let used: Vec<f64> = per_frame.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(Zmae {
        value: mean(&used),
        per_frame,
        skipped,
    })
}

/// Expected IoU of a uniformly random prediction covering fraction `k` of the
/// frame against a quarter-frame ground truth, in the large-frame limit.
pub fn expected_random_iou(k: f64) -> f64 {
    let inter = k / 4.0;
    inter / (0.25 + k - inter)
}

/// Summary of one evaluated frame set.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub miou: Option<f64>,
    pub dmae: f64,
    pub rmse: f64,
    pub zmae: Option<f64>,
    pub n_frames: usize,
    pub per_frame: Vec<FrameEval>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameEval {
    pub count_est: f64,
    pub count_gt: f64,
    pub iou: Option<f64>,
    pub zmae: Option<f64>,
}

/// Inputs for one frame of [`evaluate`].
pub struct FrameInput<'a> {
    pub density_est: &'a Map,
    pub count_gt: f64,
    pub depth_est: &'a Map,
    pub depth_ref: &'a Map,
    /// Pixels the attacker touched; `None` for clean frames.
    pub gt_mask: Option<&'a TamperMask>,
    pub pred_mask: Option<&'a TamperMask>,
}

pub fn evaluate(frames: &[FrameInput<'_>], roi: Option<&TamperMask>) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::Empty("frame list"));
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in frames {
        let iou_v = match (f.pred_mask, f.gt_mask) {
            (Some(p), Some(g)) => Some(iou(p, g, roi)?),
            _ => None,
        };
        let z = match f.gt_mask {
            Some(m) => f.depth_est.zip_map(f.depth_ref, |a, b| (a - b).abs())?.masked_mean(m),
            None => None,
        };
        per_frame.push(FrameEval {
            count_est: f.density_est.sum(),
            count_gt: f.count_gt,
            iou: iou_v,
            zmae: z,
        });
    }
    let est: Vec<f64> = per_frame.iter().map(|f| f.count_est).collect();
    let gt: Vec<f64> = per_frame.iter().map(|f| f.count_gt).collect();
    let ce = count_errors_from_totals(&est, &gt)?;
    let ious: Vec<f64> = per_frame.iter().filter_map(|f| f.iou).collect();
    let zs: Vec<f64> = per_frame.iter().filter_map(|f| f.zmae).collect();
    Ok(EvalReport {
        miou: (!ious.is_empty()).then(|| mean(&ious)),
        dmae: ce.dmae,
        rmse: ce.rmse,
        zmae: (!zs.is_empty()).then(|| mean(&zs)),
        n_frames: frames.len(),
        per_frame,
    })
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64;
    (m, math::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{MaskProvenance, Shape};
    use crate::rng;
    use crate::scene::quarter_mask;
    use alloc::vec;
    use rand::seq::index::sample;
    use rand::Rng as _;

    const P: MaskProvenance = MaskProvenance::Predicted;

    #[test]
    fn iou_basics() {
        let s = Shape::new(4, 4);
        let q0 = quarter_mask(s, 0).unwrap();
        let q1 = quarter_mask(s, 1).unwrap();
        assert_eq!(iou(&q0, &q0, None).unwrap(), 1.0);
        assert_eq!(iou(&q0, &q1, None).unwrap(), 0.0);
        assert_eq!(iou(&TamperMask::empty(s, P), &TamperMask::empty(s, P), None).unwrap(), 1.0);
        assert_eq!(iou(&TamperMask::empty(s, P), &q0, None).unwrap(), 0.0);
        // roi restricted to quadrant 1: q0 vanishes on both sides
        assert_eq!(iou(&q0, &TamperMask::empty(s, P), Some(&q1)).unwrap(), 1.0);
        assert!(miou(&[q0.clone()], &[], None).is_err());
    }

    #[test]
    fn miou_symmetric_and_bounded() {
        let s = Shape::new(6, 7);
        let mut r = rng::seeded(4);
        let a: Vec<TamperMask> = (0..20).map(|_| TamperMask::from_fn(s, P, |_, _| r.gen_bool(0.3))).collect();
        let b: Vec<TamperMask> = (0..20).map(|_| TamperMask::from_fn(s, P, |_, _| r.gen_bool(0.6))).collect();
        assert_eq!(miou(&a, &b, None).unwrap(), miou(&b, &a, None).unwrap());
        for v in per_frame_iou(&a, &b, None).unwrap() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn count_error_examples() {
        let e = count_errors_from_totals(&[1.0, -3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(e.dmae, 2.0);
        assert!((e.rmse - 5f64.sqrt()).abs() < 1e-15);
        let single = count_errors_from_totals(&[7.5], &[5.0]).unwrap();
        assert_eq!((single.dmae, single.rmse), (2.5, 2.5));
        let perfect = count_errors(&[Map::filled(Shape::new(2, 2), 0.25)], &[1.0]).unwrap();
        assert_eq!((perfect.dmae, perfect.rmse), (0.0, 0.0));
        assert!(count_errors_from_totals(&[], &[]).is_err());
    }

    #[test]
    fn dmae_never_exceeds_rmse() {
        let mut r = rng::seeded(9);
        for _ in 0..200 {
            let n = r.gen_range(1..30);
            let est: Vec<f64> = (0..n).map(|_| r.gen_range(-50.0..50.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..30.0)).collect();
            let e = count_errors_from_totals(&est, &gt).unwrap();
            assert!(e.dmae <= e.rmse * (1.0 + 1e-12));
            let mse = est.iter().zip(&gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
            assert!((e.rmse * e.rmse - mse).abs() <= 1e-9 * mse.max(1.0));
        }
    }

    #[test]
    fn zmae_examples() {
        let s = Shape::new(1, 3);
        let est = Map::from_vec(s, vec![0.6, 0.3, 9.0]).unwrap();
        let refm = Map::from_vec(s, vec![0.5, 0.6, 0.0]).unwrap();
        let mask = TamperMask::from_flags(s, vec![true, true, false], P).unwrap();
        let z = zmae(&[est.clone()], &[refm.clone()], &[mask.clone()]).unwrap();
        assert!((z.value - 0.2).abs() < 1e-12);
        // untampered pixel is irrelevant
        let mut other = est.clone();
        other.as_mut_slice()[2] = -123.0;
        assert_eq!(zmae(&[other], &[refm.clone()], &[mask.clone()]).unwrap().value, z.value);
        // doubling the errors doubles the value
        let doubled = est.zip_map(&refm, |e, r| r + 2.0 * (e - r)).unwrap();
        let z2 = zmae(&[doubled], &[refm.clone()], &[mask.clone()]).unwrap();
        assert!((z2.value - 2.0 * z.value).abs() < 1e-12);
        assert_eq!(zmae(&[est.clone()], &[est.clone()], &[mask.clone()]).unwrap().value, 0.0);
        // empty frame is skipped
        let z3 = zmae(&[est.clone(), est.clone()], &[refm.clone(), refm.clone()], &[mask, TamperMask::empty(s, P)]).unwrap();
        assert_eq!(z3.skipped, vec![1]);
        assert_eq!(z3.value, z.value);
    }

    #[test]
    fn analytic_random_iou() {
        assert!((expected_random_iou(0.5) - 0.2).abs() < 1e-15);
        assert!((expected_random_iou(0.25) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_matches_analytic_random_iou() {
        let s = Shape::new(32, 32);
        let gt = quarter_mask(s, 0).unwrap();
        let mut r = rng::seeded(1);
        for k in [0.5, 0.25] {
            let n = (k * s.area() as f64) as usize;
            let preds: Vec<TamperMask> = (0..300)
                .map(|_| {
                    let mut flags = vec![false; s.area()];
                    for i in sample(&mut r, s.area(), n) {
                        flags[i] = true;
                    }
                    TamperMask::from_flags(s, flags, P).unwrap()
                })
                .collect();
            let gts = vec![gt.clone(); preds.len()];
            let m = miou(&preds, &gts, None).unwrap();
            assert!((m - expected_random_iou(k)).abs() < 0.01, "k={k}: {m}");
        }
    }

    #[test]
    fn evaluate_clean_only() {
        let s = Shape::new(2, 2);
        let d = Map::filled(s, 1.0);
        let z = Map::filled(s, 0.5);
        let rep = evaluate(
            &[FrameInput { density_est: &d, count_gt: 3.0, depth_est: &z, depth_ref: &z, gt_mask: None, pred_mask: None }],
            None,
        )
        .unwrap();
        assert_eq!(rep.miou, None);
        assert_eq!(rep.zmae, None);
        assert_eq!(rep.dmae, 1.0);
    }
}
