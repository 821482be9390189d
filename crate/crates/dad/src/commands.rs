//! The work behind each command-line verb, callable from code.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use dad_core::attack::{masked_attack, AttackConfig, AttackReference};
use dad_core::baselines::{self, UncertaintyMap};
use dad_core::defense::{
    self, calibrate_threshold, detect_with_reference, fit_depth_stats, CalibrationFrame, DetectionThreshold,
    ExternalProvider, FrameRef, GeometryProvider, GroundTruthProvider, PostFilter, ProviderKind, ReferenceDepthProvider,
    REFERENCE_FLOOR,
};
use dad_core::metrics::{self, EvalReport, FrameInput};
use dad_core::model::{train, Architecture, ModelParams, TrainConfig, TrainLog};
use dad_core::scene::{background_depth, quarter_mask, SceneSpec, Split};
use dad_core::{MaskProvenance, TamperMask};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    self, AttackIndex, AttackRecord, Calibration, DensityReference, FramePrediction, PredictionIndex,
    PredictionSummary, QuadrantRule,
};
use crate::dataset::{self, Dataset};
use crate::io;
use crate::params;

/// Where detection takes its trusted depth from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefSpec {
    GroundTruth,
    Geometry,
    /// Directory of `<frame id>.f32` maps.
    File(PathBuf),
}

impl RefSpec {
    pub fn kind(&self) -> ProviderKind {
        match self {
            RefSpec::GroundTruth => ProviderKind::GroundTruth,
            RefSpec::Geometry => ProviderKind::StaticGeometry,
            RefSpec::File(_) => ProviderKind::External,
        }
    }

    pub fn provider(&self, data: &Dataset, ids: &[&str]) -> Result<Box<dyn ReferenceDepthProvider>> {
        Ok(match self {
            RefSpec::GroundTruth => Box::new(GroundTruthProvider),
            RefSpec::Geometry => Box::new(GeometryProvider {
                depth: background_depth(&data.manifest.spec),
            }),
            RefSpec::File(dir) => {
                let mut maps = BTreeMap::new();
                for id in ids {
                    let m = io::read_map(&dir.join(format!("{id}.f32")), data.manifest.shape())?;
                    maps.insert(id.to_string(), m);
                }
                Box::new(ExternalProvider { maps })
            }
        })
    }
}

impl FromStr for RefSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(RefSpec::GroundTruth),
            "geometry" => Ok(RefSpec::Geometry),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(RefSpec::File(PathBuf::from(p))),
                _ => bail!("reference must be gt, geometry or file:PATH, got {s:?}"),
            },
        }
    }
}

pub fn gen(out: &Path, seed: u64, n_train: usize, n_test: usize, spec: &SceneSpec) -> Result<dataset::Manifest> {
    dataset::write_dataset(out, seed, n_train, n_test, spec)
}

/// Encoder and decoder channel widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
}

impl Default for Widths {
    fn default() -> Self {
        let a = Architecture::new(1, 1);
        Self {
            encoder: a.encoder_widths,
            decoder: a.decoder_widths,
        }
    }
}

pub fn architecture_for(data: &Dataset, widths: &Widths) -> Architecture {
    let s = data.manifest.shape();
    Architecture::new(s.height, s.width).with_widths(&widths.encoder, &widths.decoder)
}

/// Trains on the training split and writes the parameter file plus a
/// `<out>.log.json` loss log.
pub fn train_model(data_dir: &Path, widths: &Widths, cfg: &TrainConfig, out: &Path) -> Result<(ModelParams, TrainLog)> {
    let data = dataset::load_dataset(data_dir)?;
    let mut model = ModelParams::init(architecture_for(&data, widths), cfg.seed)?;
    let samples: Vec<_> = data.train.iter().map(|f| f.sample.clone()).collect();
    let log = train(&mut model, &samples, cfg)?;
    params::save_params(out, &model, Some(cfg))?;
    io::write_json(&log_path(out), &log)?;
    Ok((model, log))
}

pub fn log_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".log.json");
    PathBuf::from(s)
}

pub struct AttackArgs<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub config: AttackConfig,
    pub quadrant: QuadrantRule,
    pub reference: DensityReference,
    pub out: &'a Path,
}

/// Attacks every test frame inside one quadrant and writes, per frame,
/// `adv_image.png`, `perturbation.f32` (H·W·3, channel-interleaved),
/// `gt_mask.png` and `attack.json`.
pub fn attack(args: &AttackArgs<'_>) -> Result<AttackIndex> {
    args.config.validate()?;
    let model = params::load_params(args.model)?;
    let data = dataset::load_dataset(args.data)?;
    ensure!(!data.test.is_empty(), "{} has no test frames to attack", args.data.display());
    let mut ids = Vec::with_capacity(data.test.len());
    for (i, f) in data.test.iter().enumerate() {
        let s = &f.sample;
        let q = args.quadrant.quadrant(i);
        let clean = model.forward(&s.image)?;
        let density = match args.reference {
            DensityReference::GroundTruth => &s.density_gt,
            DensityReference::Clean => &clean.density,
        };
        let r = AttackReference::for_family(args.config.family, args.config.target_rule, density, &clean.density, &clean.depth);
        let adv = masked_attack(&model, &s.image, &r, args.config, quarter_mask(s.shape(), q)?)
            .with_context(|| format!("attacking {}", f.id))?;
        let dir = artifacts::attack_frame_dir(args.out, &f.id);
        let pert = adv.perturbation(&s.image);
        io::write_png_rgb(&dir.join("adv_image.png"), &adv.adv_image)?;
        io::write_atomic(&dir.join("perturbation.f32"), &io::encode_f32(pert.as_slice()))?;
        io::write_png_mask(&dir.join("gt_mask.png"), &adv.gt_mask)?;
        let record = AttackRecord {
            id: f.id.clone(),
            config: args.config,
            quadrant: q,
            reference: args.reference,
            loss_trace: adv.loss_trace.clone(),
            linf: pert.as_slice().iter().fold(0.0, |m, v| m.max(v.abs())),
        };
        io::write_json(&dir.join("attack.json"), &record)?;
        ids.push(f.id.clone());
    }
    let index = AttackIndex {
        data: std::fs::canonicalize(args.data)?,
        model_sha256: io::hash_file(args.model)?,
        config: args.config,
        quadrant: args.quadrant,
        reference: args.reference,
        frames: ids,
    };
    io::write_json(&args.out.join(artifacts::ATTACK_INDEX), &index)?;
    Ok(index)
}

/// Threshold from the clean training frames.
pub fn calibrate(model_path: &Path, data_dir: &Path, reference: &RefSpec, fraction: f64, out: &Path) -> Result<Calibration> {
    let model = params::load_params(model_path)?;
    let data = dataset::load_dataset(data_dir)?;
    let ids: Vec<&str> = data.train.iter().map(|f| f.id.as_str()).collect();
    let provider = reference.provider(&data, &ids)?;
    let frames: Vec<CalibrationFrame<'_>> = data
        .train
        .iter()
        .map(|f| CalibrationFrame {
            id: &f.id,
            image: &f.sample.image,
            depth_gt: Some(&f.sample.depth_gt),
        })
        .collect();
    let threshold = calibrate_threshold(&model, &frames, provider.as_ref(), fraction)?;
    let mut floored_pixels = 0;
    for f in &data.train {
        let z = provider.reference(FrameRef {
            id: &f.id,
            depth_gt: Some(&f.sample.depth_gt),
        })?;
        floored_pixels += z.as_slice().iter().filter(|&&v| !(v > REFERENCE_FLOOR)).count();
    }
    let c = Calibration {
        threshold,
        provider: reference.kind(),
        n_frames: frames.len(),
        floored_pixels,
    };
    artifacts::write_calibration(out, &c)?;
    Ok(c)
}

pub struct DetectArgs<'a> {
    pub model: &'a Path,
    pub frames: &'a Path,
    pub reference: &'a RefSpec,
    pub calibration: &'a Path,
    /// Overrides the calibrated fraction.
    pub fraction: Option<f64>,
    pub filter: PostFilter,
    pub out: &'a Path,
}

pub fn detect(args: &DetectArgs<'_>) -> Result<PredictionIndex> {
    let model = params::load_params(args.model)?;
    let cal = artifacts::read_calibration(args.calibration)?;
    ensure!(
        cal.provider == args.reference.kind(),
        "threshold was calibrated with a {:?} reference but detection uses {:?}",
        cal.provider,
        args.reference.kind()
    );
    let threshold = match args.fraction {
        Some(f) => cal.threshold.with_fraction(f)?,
        None => cal.threshold,
    };
    let (frames, data) = artifacts::load_frames(args.frames)?;
    let ids: Vec<&str> = frames.iter().map(|f| f.id.as_str()).collect();
    let provider = args.reference.provider(&data, &ids)?;
    let mut summaries = Vec::with_capacity(frames.len());
    for f in &frames {
        let z_ref = provider.reference(FrameRef {
            id: &f.id,
            depth_gt: Some(&f.sample.depth_gt),
        })?;
        let pred = model.forward(&f.image)?;
        let det = detect_with_reference(&pred.depth, &z_ref, &threshold, args.filter)?;
        let fdir = args.out.join("frames").join(&f.id);
        io::write_map(&fdir.join("indicator.f32"), &det.indicator.values)?;
        summaries.push(PredictionSummary {
            id: f.id.clone(),
            flagged: det.mask.count(),
            count_est: pred.density.sum(),
        });
        artifacts::write_prediction(
            &fdir,
            &FramePrediction {
                mask: det.mask,
                density_est: pred.density,
                depth_est: pred.depth,
                depth_ref: Some(z_ref),
            },
        )?;
    }
    let index = PredictionIndex {
        detector: format!("dad@{}", threshold.fraction),
        frames: summaries,
    };
    io::write_json(&args.out.join(artifacts::PREDICTION_INDEX), &index)?;
    Ok(index)
}

/// Per-pixel statistics of the training split's depth maps.
pub fn depthstats(data_dir: &Path, out: &Path) -> Result<defense::DepthStats> {
    let data = dataset::load_dataset(data_dir)?;
    let maps: Vec<_> = data.train.iter().map(|f| f.sample.depth_gt.clone()).collect();
    let stats = fit_depth_stats(&maps)?;
    artifacts::write_stats(out, &stats)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefCheckReport {
    pub beta: f64,
    /// Flagged fraction over every pixel of every tampered map.
    pub rate: f64,
    /// Flagged fraction of the untampered maps.
    pub clean_rate: f64,
    pub per_frame: Vec<(String, f64)>,
}

/// Tampers each reference map of `split` with `t = z + β·μ` and reports how
/// many pixels leave the recorded range.
pub fn check_ref(stats_path: &Path, ref_dir: &Path, beta: f64, split: Split) -> Result<RefCheckReport> {
    let stats = artifacts::read_stats(stats_path)?;
    let data = dataset::load_dataset(ref_dir)?;
    let frames = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    ensure!(!frames.is_empty(), "no {split:?} frames in {}", ref_dir.display());
    let (mut hit, mut clean_hit, mut total) = (0.0, 0.0, 0.0);
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in frames {
        let z = &f.sample.depth_gt;
        let t = defense::tamper_reference(z, beta, &stats.mean)?;
        let r = defense::detect_reference_tampering(&t, &stats, None)?;
        let c = defense::detect_reference_tampering(z, &stats, None)?;
        let n = z.shape().area() as f64;
        hit += r.rate * n;
        clean_hit += c.rate * n;
        total += n;
        per_frame.push((f.id.clone(), r.rate));
    }
    Ok(RefCheckReport {
        beta,
        rate: hit / total,
        clean_rate: clean_hit / total,
        per_frame,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    RandHalf,
    RandQuarter,
    Bayesian,
}

impl FromStr for BaselineKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "randhalf" => Ok(BaselineKind::RandHalf),
            "randquarter" => Ok(BaselineKind::RandQuarter),
            "bayesian" => Ok(BaselineKind::Bayesian),
            _ => bail!("baseline must be randhalf, randquarter or bayesian, got {s:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub seed: u64,
    pub passes: usize,
    pub drop_rate: f64,
    pub granularity: usize,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            passes: baselines::DEFAULT_PASSES,
            drop_rate: baselines::DEFAULT_DROP_RATE,
            granularity: baselines::DEFAULT_GRANULARITY,
        }
    }
}

/// Runs a comparison detector. The Bayesian threshold is chosen with
/// knowledge of the true masks, so `frames` must be an attack directory.
pub fn baseline(kind: BaselineKind, model_path: &Path, frames_dir: &Path, opts: &BaselineOptions, out: &Path) -> Result<PredictionIndex> {
    let model = params::load_params(model_path)?;
    let (frames, _) = artifacts::load_frames(frames_dir)?;
    let preds: Vec<_> = frames.iter().map(|f| model.forward(&f.image)).collect::<Result<_, _>>()?;
    let masks: Vec<TamperMask> = match kind {
        BaselineKind::RandHalf | BaselineKind::RandQuarter => {
            let k = if kind == BaselineKind::RandHalf { 0.5 } else { 0.25 };
            frames
                .iter()
                .enumerate()
                .map(|(i, f)| baselines::random_baseline(f.image.shape(), k, dad_core::rng::derive(opts.seed, 0xba, i as u64)))
                .collect::<Result<_, _>>()?
        }
        BaselineKind::Bayesian => {
            let gts: Vec<TamperMask> = frames
                .iter()
                .map(|f| f.gt_mask.clone().context("the oracle threshold needs ground-truth masks (an attack directory)"))
                .collect::<Result<_>>()?;
            let maps: Vec<UncertaintyMap> = frames
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    baselines::dropout_uncertainty(&model, &f.image, opts.passes, opts.drop_rate, dad_core::rng::derive(opts.seed, 0xbe, i as u64))
                })
                .collect::<Result<_, _>>()?;
            let choice = baselines::threshold_uncertainty(&maps, &gts, opts.granularity)?;
            for (f, m) in frames.iter().zip(&maps) {
                io::write_map(&out.join("frames").join(&f.id).join("uncertainty.f32"), m.values())?;
            }
            io::write_json(
                &out.join("threshold.json"),
                &serde_json::json!({
                    "threshold": choice.threshold,
                    "miou": choice.miou,
                    "degenerate": choice.degenerate,
                }),
            )?;
            choice.masks
        }
    };
    let mut summaries = Vec::with_capacity(frames.len());
    for ((f, p), mask) in frames.iter().zip(preds).zip(masks) {
        summaries.push(PredictionSummary {
            id: f.id.clone(),
            flagged: mask.count(),
            count_est: p.density.sum(),
        });
        artifacts::write_prediction(
            &out.join("frames").join(&f.id),
            &FramePrediction {
                mask,
                density_est: p.density,
                depth_est: p.depth,
                depth_ref: None,
            },
        )?;
    }
    let index = PredictionIndex {
        detector: serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string(),
        frames: summaries,
    };
    io::write_json(&out.join(artifacts::PREDICTION_INDEX), &index)?;
    Ok(index)
}

/// What ZMAE compares the estimated depth against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZmaeReference {
    /// The reference the detector used, falling back to ground truth.
    #[default]
    Detection,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub detector: String,
    pub zmae_reference: ZmaeReference,
    pub ids: Vec<String>,
    pub report: EvalReport,
}

/// Column order of the per-frame CSV written next to the JSON report.
pub const EVAL_CSV_COLUMNS: [&str; 6] = ["id", "count_gt", "count_est", "abs_error", "iou", "zmae"];

pub fn eval(pred_dir: &Path, gt_dir: &Path, roi: Option<&Path>, zref: ZmaeReference) -> Result<EvalOutput> {
    let index: PredictionIndex = io::read_json(&pred_dir.join(artifacts::PREDICTION_INDEX))?;
    let (frames, data) = artifacts::load_frames(gt_dir)?;
    let pred_ids: Vec<&str> = index.frames.iter().map(|f| f.id.as_str()).collect();
    let gt_ids: Vec<&str> = frames.iter().map(|f| f.id.as_str()).collect();
    ensure!(pred_ids == gt_ids, "frame ids differ between {} and {}", pred_dir.display(), gt_dir.display());
    let shape = data.manifest.shape();
    let roi = roi.map(|p| io::read_png_mask(p, MaskProvenance::GroundTruth)).transpose()?;
    let preds: Vec<FramePrediction> = frames
        .iter()
        .map(|f| artifacts::read_prediction(&pred_dir.join("frames").join(&f.id), shape))
        .collect::<Result<_>>()?;
    let inputs: Vec<FrameInput<'_>> = frames
        .iter()
        .zip(&preds)
        .map(|(f, p)| FrameInput {
            density_est: &p.density_est,
            count_gt: f.sample.count() as f64,
            depth_est: &p.depth_est,
            depth_ref: match (zref, &p.depth_ref) {
                (ZmaeReference::Detection, Some(r)) => r,
                _ => &f.sample.depth_gt,
            },
            gt_mask: f.gt_mask.as_ref(),
            pred_mask: f.gt_mask.as_ref().map(|_| &p.mask),
        })
        .collect();
    let report = metrics::evaluate(&inputs, roi.as_ref())?;
    Ok(EvalOutput {
        detector: index.detector,
        zmae_reference: zref,
        ids: frames.into_iter().map(|f| f.id).collect(),
        report,
    })
}

pub fn write_eval(out: &Path, e: &EvalOutput) -> Result<()> {
    io::write_json(out, e)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVAL_CSV_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (id, f) in e.ids.iter().zip(&e.report.per_frame) {
        w.write_record([
            id.clone(),
            format!("{:.0}", f.count_gt),
            format!("{:.6}", f.count_est),
            format!("{:.6}", (f.count_est - f.count_gt).abs()),
            opt(f.iou),
            opt(f.zmae),
        ])?;
    }
    io::write_atomic(&out.with_extension("csv"), &w.into_inner()?)
}

/// Default threshold fraction, spelled out for config files.
pub fn default_fraction() -> f64 {
    defense::DEFAULT_THRESHOLD_FRACTION
}

pub fn threshold_at(cal: &Calibration, fraction: f64) -> Result<DetectionThreshold> {
    Ok(cal.threshold.with_fraction(fraction)?)
}
