//! Pixel-wise tamper detection from depth consistency.
//!
//! The depth stream shares its encoder with the density stream, so an
//! adversarial perturbation aimed at the density output also disturbs the
//! depth output. Comparing the estimated depth against a trusted reference
//! with the relative error `|z_est − z_ref| / z_ref` exposes the attacked
//! pixels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::grid::{Image, Map, MaskProvenance, Shape, TamperMask};
use crate::model::Regressor;
use crate::{Error, Result};

/// Reference depths below this value are replaced by it before dividing.
pub const REFERENCE_FLOOR: f64 = 1e-3;

/// Default fraction of the largest training indicator used as threshold.
pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.05;

/// Relative depth error and the pixels whose reference had to be floored.
#[derive(Debug, Clone, PartialEq)]
pub struct Indicator {
    pub values: Map,
    pub floored: TamperMask,
}

impl Indicator {
    pub fn floored_count(&self) -> usize {
        self.floored.count()
    }
}

/// `|z_est − z_ref| / max(z_ref, floor)` per pixel.
pub fn indicator(z_est: &Map, z_ref: &Map) -> Result<Indicator> {
    z_est.shape().ensure_eq(z_ref.shape())?;
    let shape = z_est.shape();
    let values = z_est.zip_map(z_ref, |e, r| {
        let r = if r > REFERENCE_FLOOR { r } else { REFERENCE_FLOOR };
        (e - r).abs() / r
    })?;
    let floored = TamperMask::from_fn(shape, MaskProvenance::Predicted, |row, col| {
        !(z_ref.get(row, col) > REFERENCE_FLOOR)
    });
    Ok(Indicator { values, floored })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectionThreshold {
    pub tau: f64,
    /// Largest indicator value seen on clean training frames.
    pub calibration_max: f64,
    /// `tau / calibration_max`.
    pub fraction: f64,
}

impl DetectionThreshold {
    pub fn from_max(calibration_max: f64, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0) || !fraction.is_finite() {
            return Err(Error::InvalidConfig(format!("threshold fraction must be > 0, got {fraction}")));
        }
        if !(calibration_max > 0.0) || !calibration_max.is_finite() {
            return Err(Error::DegenerateCalibration(calibration_max));
        }
        Ok(Self {
            tau: fraction * calibration_max,
            calibration_max,
            fraction,
        })
    }

    /// Same calibration at another fraction.
    pub fn with_fraction(&self, fraction: f64) -> Result<Self> {
        Self::from_max(self.calibration_max, fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ProviderKind {
    GroundTruth,
    StaticGeometry,
    External,
}

/// What a provider may look at to produce a reference map.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef<'a> {
    pub id: &'a str,
    pub depth_gt: Option<&'a Map>,
}

/// Supplies the trusted depth map `z_ref` for a frame.
pub trait ReferenceDepthProvider {
    fn kind(&self) -> ProviderKind;
    fn reference(&self, frame: FrameRef<'_>) -> Result<Map>;
}

/// Uses the sensor depth stored with the frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthProvider;

impl ReferenceDepthProvider for GroundTruthProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::GroundTruth
    }

    fn reference(&self, frame: FrameRef<'_>) -> Result<Map> {
        frame
            .depth_gt
            .cloned()
            .ok_or_else(|| Error::MissingReference(format!("frame {} has no ground-truth depth", frame.id)))
    }
}

/// A single scene-geometry depth field shared by all frames of a camera.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryProvider {
    pub depth: Map,
}

impl ReferenceDepthProvider for GeometryProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::StaticGeometry
    }

    fn reference(&self, _frame: FrameRef<'_>) -> Result<Map> {
        Ok(self.depth.clone())
    }
}

/// Per-frame maps from some external estimator, looked up by frame id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalProvider {
    pub maps: BTreeMap<String, Map>,
}

impl ReferenceDepthProvider for ExternalProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::External
    }

    fn reference(&self, frame: FrameRef<'_>) -> Result<Map> {
        self.maps
            .get(frame.id)
            .cloned()
            .ok_or_else(|| Error::MissingReference(format!("no external depth for frame {}", frame.id)))
    }
}

/// A clean frame used for calibration.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationFrame<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub depth_gt: Option<&'a Map>,
}

/// Largest indicator over every pixel of the clean frames, scaled by
/// `fraction`.
pub fn calibrate_threshold<M, P>(
    model: &M,
    frames: &[CalibrationFrame<'_>],
    provider: &P,
    fraction: f64,
) -> Result<DetectionThreshold>
where
    M: Regressor + ?Sized,
    P: ReferenceDepthProvider + ?Sized,
{
    if frames.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut max = 0.0f64;
    for f in frames {
        let z_ref = provider.reference(FrameRef {
            id: f.id,
            depth_gt: f.depth_gt,
        })?;
        let pred = model.predict(f.image)?;
        let ind = indicator(&pred.depth, &z_ref)?;
        max = max.max(ind.values.max());
    }
    DetectionThreshold::from_max(max, fraction)
}

/// Optional clean-up applied to the raw per-pixel flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum PostFilter {
    #[default]
    None,
    /// Keep a flag only if most of its 3×3 neighbourhood is flagged.
    Majority3x3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: TamperMask,
    pub indicator: Indicator,
}

/// Flags pixels whose indicator exceeds `tau`.
pub fn detect_with_reference(z_est: &Map, z_ref: &Map, threshold: &DetectionThreshold, filter: PostFilter) -> Result<Detection> {
    let ind = indicator(z_est, z_ref)?;
    let shape = ind.values.shape();
    let raw = TamperMask::from_fn(shape, MaskProvenance::Predicted, |r, c| ind.values.get(r, c) > threshold.tau);
    let mask = match filter {
        PostFilter::None => raw,
        PostFilter::Majority3x3 => majority(&raw),
    };
    Ok(Detection { mask, indicator: ind })
}

pub fn detect<M, P>(
    model: &M,
    image: &Image,
    frame: FrameRef<'_>,
    provider: &P,
    threshold: &DetectionThreshold,
    filter: PostFilter,
) -> Result<Detection>
where
    M: Regressor + ?Sized,
    P: ReferenceDepthProvider + ?Sized,
{
    let z_ref = provider.reference(frame)?;
    let pred = model.predict(image)?;
    detect_with_reference(&pred.depth, &z_ref, threshold, filter)
}

fn majority(mask: &TamperMask) -> TamperMask {
    let s = mask.shape();
    TamperMask::from_fn(s, MaskProvenance::Predicted, |r, c| {
        let (mut on, mut all) = (0, 0);
        for rr in r.saturating_sub(1)..(r + 2).min(s.height) {
            for cc in c.saturating_sub(1)..(c + 2).min(s.width) {
                all += 1;
                on += mask.get(rr, cc) as usize;
            }
        }
        2 * on > all
    })
}

/// Per-pixel depth range and mean over a fixed-camera sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthStats {
    pub z_min: Map,
    pub z_max: Map,
    pub mean: Map,
    pub n_frames: usize,
}

impl DepthStats {
    pub fn shape(&self) -> Shape {
        self.z_min.shape()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        s.ensure_eq(self.z_max.shape())?;
        s.ensure_eq(self.mean.shape())?;
        if self.n_frames == 0 {
            return Err(Error::Empty("depth statistics"));
        }
        let ordered = self
            .z_min
            .as_slice()
            .iter()
            .zip(self.mean.as_slice())
            .zip(self.z_max.as_slice())
            .all(|((lo, m), hi)| lo <= m && m <= hi);
        if !ordered {
            return Err(Error::InvalidConfig("depth statistics need min <= mean <= max".into()));
        }
        Ok(())
    }
}

/// Exact per-pixel min, max and mean.
///
/// The mean sums each pixel's values in sorted order so the result does not
/// depend on the order of `maps`; it is stored at f32 precision and kept
/// inside `[min, max]`.
pub fn fit_depth_stats(maps: &[Map]) -> Result<DepthStats> {
    let first = maps.first().ok_or(Error::Empty("depth map list"))?;
    let shape = first.shape();
    for m in maps {
        shape.ensure_eq(m.shape())?;
    }
    let n = maps.len();
    let mut z_min = Vec::with_capacity(shape.area());
    let mut z_max = Vec::with_capacity(shape.area());
    let mut mean = Vec::with_capacity(shape.area());
    let mut column = Vec::with_capacity(n);
    for p in 0..shape.area() {
        column.clear();
        column.extend(maps.iter().map(|m| m.as_slice()[p]));
        column.sort_by(f64::total_cmp);
        let lo = column[0];
        let hi = column[n - 1];
        let avg = column.iter().sum::<f64>() / n as f64;
        z_min.push(lo);
        z_max.push(hi);
        mean.push((avg as f32 as f64).clamp(lo, hi));
    }
    Ok(DepthStats {
        z_min: Map::from_vec(shape, z_min)?,
        z_max: Map::from_vec(shape, z_max)?,
        mean: Map::from_vec(shape, mean)?,
        n_frames: n,
    })
}

/// `t = ż + β·μ` per pixel.
pub fn tamper_reference(reference: &Map, beta: f64, mean: &Map) -> Result<Map> {
    reference.zip_map(mean, |z, m| z + beta * m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCheck {
    pub mask: TamperMask,
    /// Flagged fraction of the tampered pixels.
    pub rate: f64,
}

/// Flags pixels of `candidate` outside the recorded `[z_min, z_max]` range.
/// The rate is taken over `tampered` (all pixels when `None`).
pub fn detect_reference_tampering(candidate: &Map, stats: &DepthStats, tampered: Option<&TamperMask>) -> Result<ReferenceCheck> {
    let s = stats.shape();
    s.ensure_eq(candidate.shape())?;
    if let Some(t) = tampered {
        s.ensure_eq(t.shape())?;
    }
    let mask = TamperMask::from_fn(s, MaskProvenance::Predicted, |r, c| {
        let v = candidate.get(r, c);
        v < stats.z_min.get(r, c) || v > stats.z_max.get(r, c)
    });
    let (hit, total) = match tampered {
        Some(t) => (
            mask.flags().iter().zip(t.flags()).filter(|(m, t)| **m && **t).count(),
            t.count(),
        ),
        None => (mask.count(), s.area()),
    };
    let rate = if total == 0 { 0.0 } else { hit as f64 / total as f64 };
    Ok(ReferenceCheck { mask, rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelParams};
    use crate::rng;
    use crate::scene::quarter_mask;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn random_map(shape: Shape, seed: u64, lo: f64, hi: f64) -> Map {
        let mut r = rng::seeded(seed);
        Map::from_fn(shape, |_, _| r.gen_range(lo..hi))
    }

    #[test]
    fn indicator_examples() {
        let s = Shape::new(3, 4);
        let z = random_map(s, 1, 0.1, 1.0);
        assert!(indicator(&z, &z).unwrap().values.as_slice().iter().all(|&v| v == 0.0));
        let one = |v: f64| Map::filled(Shape::new(1, 1), v);
        let i = indicator(&one(0.6), &one(0.5)).unwrap();
        assert!((i.values.get(0, 0) - 0.2).abs() < 1e-12);
        let e = random_map(s, 2, 0.1, 1.0);
        let a = indicator(&e, &z).unwrap().values;
        let b = indicator(&e.map(|v| v * 3.0), &z.map(|v| v * 3.0)).unwrap().values;
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        let floored = indicator(&one(0.5), &one(0.0)).unwrap();
        assert_eq!(floored.floored_count(), 1);
        assert!((floored.values.get(0, 0) - (0.5 - 1e-3) / 1e-3).abs() < 1e-6);
    }

    #[test]
    fn threshold_construction() {
        let t = DetectionThreshold::from_max(0.8, DEFAULT_THRESHOLD_FRACTION).unwrap();
        assert!((t.tau - 0.04).abs() < 1e-15);
        assert_eq!(DetectionThreshold::from_max(0.0, 0.05).unwrap_err(), Error::DegenerateCalibration(0.0));
    }

    #[test]
    fn perfect_depth_head_is_degenerate() {
        struct Oracle(Map);
        impl Regressor for Oracle {
            fn input_shape(&self) -> Shape {
                self.0.shape()
            }
            fn predict(&self, _: &Image) -> Result<crate::model::Prediction> {
                Ok(crate::model::Prediction { density: Map::zeros(self.0.shape()), depth: self.0.clone() })
            }
            fn input_gradient(&self, _: &Image, _: &crate::model::LossSpec<'_>) -> Result<crate::model::InputGradient> {
                unimplemented!()
            }
        }
        let s = Shape::new(4, 4);
        let z = random_map(s, 3, 0.2, 0.9);
        let img = Image::zeros(s);
        let frames = [CalibrationFrame { id: "a", image: &img, depth_gt: Some(&z) }];
        let err = calibrate_threshold(&Oracle(z.clone()), &frames, &GroundTruthProvider, 0.05).unwrap_err();
        assert!(matches!(err, Error::DegenerateCalibration(_)));
        assert_eq!(calibrate_threshold(&Oracle(z), &[], &GroundTruthProvider, 0.05).unwrap_err(), Error::EmptyTrainingSet);
    }

    #[test]
    fn calibration_is_deterministic() {
        let s = Shape::new(8, 8);
        let m = ModelParams::init(Architecture::new(8, 8).with_widths(&[4, 6, 8], &[6, 4]), 1).unwrap();
        let img = Image::filled(s, 90.0);
        let z = random_map(s, 4, 0.1, 0.9);
        let frames = [CalibrationFrame { id: "a", image: &img, depth_gt: Some(&z) }];
        let a = calibrate_threshold(&m, &frames, &GroundTruthProvider, 0.05).unwrap();
        let b = calibrate_threshold(&m, &frames, &GroundTruthProvider, 0.05).unwrap();
        assert_eq!(a, b);
        assert!(a.tau > 0.0);
    }

    #[test]
    fn scaled_quadrant_is_fully_flagged() {
        let s = Shape::new(6, 6);
        let z_ref = random_map(s, 5, 0.1, 1.0);
        let t = DetectionThreshold::from_max(1.0, 0.05).unwrap();
        let q = quarter_mask(s, 2).unwrap();
        let z_est = Map::from_fn(s, |r, c| if q.get(r, c) { z_ref.get(r, c) * (1.0 + 2.0 * t.tau) } else { z_ref.get(r, c) });
        let d = detect_with_reference(&z_est, &z_ref, &t, PostFilter::None).unwrap();
        assert_eq!(d.mask.flags(), q.flags());
        assert_eq!(d.mask.provenance(), MaskProvenance::Predicted);
    }

    #[test]
    fn raising_tau_shrinks_the_mask() {
        let s = Shape::new(10, 10);
        let z_ref = random_map(s, 6, 0.1, 1.0);
        let z_est = random_map(s, 7, 0.1, 1.0);
        let mut prev: Option<TamperMask> = None;
        for f in [0.001, 0.01, 0.05, 0.1, 0.5] {
            let t = DetectionThreshold::from_max(2.0, f).unwrap();
            let m = detect_with_reference(&z_est, &z_ref, &t, PostFilter::None).unwrap().mask;
            if let Some(p) = prev {
                assert!(m.is_subset_of(&p));
            }
            prev = Some(m);
        }
    }

    #[test]
    fn majority_filter_removes_isolated_pixels() {
        let s = Shape::new(5, 5);
        let z_ref = Map::filled(s, 0.5);
        let mut z_est = z_ref.clone();
        z_est.set(2, 2, 0.9);
        let t = DetectionThreshold::from_max(1.0, 0.05).unwrap();
        assert_eq!(detect_with_reference(&z_est, &z_ref, &t, PostFilter::None).unwrap().mask.count(), 1);
        assert!(detect_with_reference(&z_est, &z_ref, &t, PostFilter::Majority3x3).unwrap().mask.is_empty());
    }

    #[test]
    fn providers() {
        let s = Shape::new(2, 2);
        let z = Map::filled(s, 0.4);
        assert!(GroundTruthProvider.reference(FrameRef { id: "x", depth_gt: None }).is_err());
        assert_eq!(GroundTruthProvider.reference(FrameRef { id: "x", depth_gt: Some(&z) }).unwrap(), z);
        let g = GeometryProvider { depth: z.clone() };
        assert_eq!(g.reference(FrameRef { id: "y", depth_gt: None }).unwrap(), z);
        let mut e = ExternalProvider::default();
        e.maps.insert("f1".into(), z.clone());
        assert!(e.reference(FrameRef { id: "f2", depth_gt: None }).is_err());
        assert_eq!(e.reference(FrameRef { id: "f1", depth_gt: None }).unwrap(), z);
    }

    #[test]
    fn depth_stats_examples() {
        let s = Shape::new(2, 3);
        let a = random_map(s, 8, 0.0, 1.0);
        let st = fit_depth_stats(&[a.clone()]).unwrap();
        assert_eq!(st.z_min, a);
        assert_eq!(st.z_max, a);
        assert_eq!(st.mean, a);
        let one = Shape::new(1, 1);
        let st = fit_depth_stats(&[Map::filled(one, 0.3), Map::filled(one, 0.5)]).unwrap();
        assert_eq!((st.z_min.get(0, 0), st.z_max.get(0, 0)), (0.3, 0.5));
        assert!((st.mean.get(0, 0) - 0.4).abs() < 1e-7);
        assert!(fit_depth_stats(&[]).is_err());
        assert!(fit_depth_stats(&[Map::zeros(s), Map::zeros(one)]).is_err());
    }

    #[test]
    fn depth_stats_permutation_invariant() {
        let s = Shape::new(4, 4);
        let mut maps: Vec<Map> = (0..9).map(|i| random_map(s, 20 + i, 0.05, 1.0)).collect();
        let a = fit_depth_stats(&maps).unwrap();
        maps.shuffle(&mut rng::seeded(3));
        let b = fit_depth_stats(&maps).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn tamper_reference_examples() {
        let one = Shape::new(1, 1);
        let z = Map::filled(one, 0.3);
        let mu = Map::filled(one, 0.5);
        assert_eq!(tamper_reference(&z, 0.0, &mu).unwrap(), z);
        assert!((tamper_reference(&z, 0.01, &mu).unwrap().get(0, 0) - 0.305).abs() < 1e-15);
        assert!((tamper_reference(&z, -0.01, &mu).unwrap().get(0, 0) - 0.295).abs() < 1e-15);
    }

    #[test]
    fn reference_check_flags_out_of_range() {
        let s = Shape::new(3, 3);
        let maps: Vec<Map> = (0..5).map(|i| random_map(s, 40 + i, 0.2, 0.8)).collect();
        let st = fit_depth_stats(&maps).unwrap();
        let inside = st.mean.clone();
        assert!(detect_reference_tampering(&inside, &st, None).unwrap().mask.is_empty());
        let mut above = inside.clone();
        above.set(1, 1, st.z_max.get(1, 1) + 1e-6);
        let chk = detect_reference_tampering(&above, &st, None).unwrap();
        assert!(chk.mask.get(1, 1));
        assert_eq!(chk.mask.count(), 1);
        let only = TamperMask::from_fn(s, MaskProvenance::GroundTruth, |r, c| (r, c) == (1, 1));
        assert_eq!(detect_reference_tampering(&above, &st, Some(&only)).unwrap().rate, 1.0);
    }

    #[test]
    fn reference_rate_is_monotone_in_beta() {
        let s = Shape::new(8, 8);
        let maps: Vec<Map> = (0..20).map(|i| random_map(s, 60 + i, 0.2, 0.8)).collect();
        let st = fit_depth_stats(&maps).unwrap();
        let base = maps[3].clone();
        let mut prev = 0.0;
        for beta in [0.0, 0.001, 0.01, 0.1, 0.5, 1.0, 2.0] {
            let t = tamper_reference(&base, beta, &st.mean).unwrap();
            let rate = detect_reference_tampering(&t, &st, None).unwrap().rate;
            assert!(rate >= prev);
            prev = rate;
        }
        assert_eq!(prev, 1.0);
    }
}
