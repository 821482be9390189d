//! Files exchanged between pipeline stages: attack outputs, calibration,
//! depth statistics and per-frame predictions.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dad_core::attack::AttackConfig;
use dad_core::defense::{DepthStats, DetectionThreshold, ProviderKind};
use dad_core::scene::SceneSample;
use dad_core::{Image, Map, MaskProvenance, Shape, TamperMask};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset};
use crate::io;

pub const ATTACK_INDEX: &str = "attack-index.json";
pub const PREDICTION_INDEX: &str = "predictions.json";

/// Density the untargeted attack loss is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityReference {
    /// Ground-truth density of the frame.
    #[default]
    GroundTruth,
    /// The model's own clean prediction; its gradient vanishes at the
    /// clean image, so single-step attacks do nothing.
    Clean,
}

/// Which quadrant each frame's attack is confined to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadrantRule {
    Fixed(u8),
    /// Frame `i` uses quadrant `i mod 4`.
    Cycle,
}

impl QuadrantRule {
    pub fn quadrant(self, index: usize) -> u8 {
        match self {
            QuadrantRule::Fixed(q) => q,
            QuadrantRule::Cycle => (index % 4) as u8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "cycle" {
            return Ok(QuadrantRule::Cycle);
        }
        let q: u8 = s.parse().with_context(|| format!("quadrant must be 0-3 or 'cycle', got {s:?}"))?;
        ensure!(q < 4, "quadrant must be 0-3 or 'cycle', got {q}");
        Ok(QuadrantRule::Fixed(q))
    }
}

/// Directory-level description of an attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackIndex {
    /// Dataset the clean frames come from.
    pub data: PathBuf,
    pub model_sha256: String,
    pub config: AttackConfig,
    pub quadrant: QuadrantRule,
    pub reference: DensityReference,
    pub frames: Vec<String>,
}

/// `attack.json` of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub id: String,
    pub config: AttackConfig,
    pub quadrant: u8,
    pub reference: DensityReference,
    /// Attack loss before the first step and after each step.
    pub loss_trace: Vec<f64>,
    /// Largest absolute perturbation, before 8-bit export.
    pub linf: f64,
}

pub fn attack_frame_dir(root: &Path, id: &str) -> PathBuf {
    root.join("frames").join(id)
}

/// A frame to run a detector on, with whatever ground truth is known.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    pub id: String,
    /// Adversarial image for attack directories, the clean image otherwise.
    pub image: Image,
    pub sample: SceneSample,
    pub gt_mask: Option<TamperMask>,
}

/// Frames of an attack directory (adversarial images and their masks) or of
/// a dataset (clean test frames), together with the dataset they belong to.
pub fn load_frames(dir: &Path) -> Result<(Vec<EvalFrame>, Dataset)> {
    let index_path = dir.join(ATTACK_INDEX);
    if index_path.exists() {
        let index: AttackIndex = io::read_json(&index_path)?;
        let data = dataset::load_dataset(&index.data)?;
        let frames = index
            .frames
            .iter()
            .map(|id| {
                let sample = data
                    .frame(id)
                    .with_context(|| format!("frame {id} missing from {}", index.data.display()))?
                    .sample
                    .clone();
                let fdir = attack_frame_dir(dir, id);
                let image = io::read_png_rgb(&fdir.join("adv_image.png"))?;
                let gt_mask = io::read_png_mask(&fdir.join("gt_mask.png"), MaskProvenance::GroundTruth)?;
                ensure!(image.shape() == sample.shape(), "{id}: adversarial image shape differs from the dataset");
                Ok(EvalFrame {
                    id: id.clone(),
                    image,
                    sample,
                    gt_mask: Some(gt_mask),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok((frames, data));
    }
    if dir.join(dataset::MANIFEST).exists() {
        let data = dataset::load_dataset(dir)?;
        let frames = data
            .test
            .iter()
            .map(|f| EvalFrame {
                id: f.id.clone(),
                image: f.sample.image.clone(),
                sample: f.sample.clone(),
                gt_mask: None,
            })
            .collect();
        return Ok((frames, data));
    }
    bail!("{} is neither an attack directory nor a dataset", dir.display())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: DetectionThreshold,
    pub provider: ProviderKind,
    pub n_frames: usize,
    /// Calibration pixels whose reference depth was floored.
    pub floored_pixels: usize,
}

pub fn write_calibration(path: &Path, c: &Calibration) -> Result<()> {
    io::write_json(path, c)
}

pub fn read_calibration(path: &Path) -> Result<Calibration> {
    io::read_json(path)
}

/// `stats.f32x3`: `u32` height, width and frame count (little-endian), then
/// the min, max and mean planes as row-major `f32`.
pub fn encode_stats(stats: &DepthStats) -> Result<Vec<u8>> {
    stats.validate()?;
    let s = stats.shape();
    let mut out = Vec::with_capacity(12 + 12 * s.area());
    for v in [s.height, s.width, stats.n_frames] {
        out.extend_from_slice(&u32::try_from(v)?.to_le_bytes());
    }
    for m in [&stats.z_min, &stats.z_max, &stats.mean] {
        out.extend(io::encode_f32(m.as_slice()));
    }
    Ok(out)
}

pub fn decode_stats(bytes: &[u8]) -> Result<DepthStats> {
    ensure!(bytes.len() >= 12, "truncated depth statistics");
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let shape = Shape::new(word(0), word(1));
    let n = shape.area();
    ensure!(bytes.len() == 12 + 12 * n, "depth statistics size does not match {shape}");
    let plane = |k: usize| -> Result<Map> {
        let v = io::decode_f32(&bytes[12 + 4 * n * k..12 + 4 * n * (k + 1)])?;
        Ok(Map::from_vec(shape, v)?)
    };
    let stats = DepthStats {
        z_min: plane(0)?,
        z_max: plane(1)?,
        mean: plane(2)?,
        n_frames: word(2),
    };
    stats.validate()?;
    Ok(stats)
}

pub fn write_stats(path: &Path, stats: &DepthStats) -> Result<()> {
    io::write_atomic(path, &encode_stats(stats)?)
}

pub fn read_stats(path: &Path) -> Result<DepthStats> {
    decode_stats(&io::read(path)?).with_context(|| format!("loading {}", path.display()))
}

/// Per-frame output of a detector (`detect` or `baseline`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub detector: String,
    pub frames: Vec<PredictionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub id: String,
    pub flagged: usize,
    pub count_est: f64,
}

/// Maps written per frame: `mask.png`, `density_est.f32`, `depth_est.f32`
/// and, when a reference was used, `depth_ref.f32`.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub mask: TamperMask,
    pub density_est: Map,
    pub depth_est: Map,
    pub depth_ref: Option<Map>,
}

pub fn write_prediction(dir: &Path, p: &FramePrediction) -> Result<()> {
    io::write_png_mask(&dir.join("mask.png"), &p.mask)?;
    io::write_map(&dir.join("density_est.f32"), &p.density_est)?;
    io::write_map(&dir.join("depth_est.f32"), &p.depth_est)?;
    if let Some(r) = &p.depth_ref {
        io::write_map(&dir.join("depth_ref.f32"), r)?;
    }
    Ok(())
}

pub fn read_prediction(dir: &Path, shape: Shape) -> Result<FramePrediction> {
    let mask = io::read_png_mask(&dir.join("mask.png"), MaskProvenance::Predicted)?;
    ensure!(mask.shape() == shape, "{}: mask is {}, expected {shape}", dir.display(), mask.shape());
    let r = dir.join("depth_ref.f32");
    Ok(FramePrediction {
        mask,
        density_est: io::read_map(&dir.join("density_est.f32"), shape)?,
        depth_est: io::read_map(&dir.join("depth_est.f32"), shape)?,
        depth_ref: if r.exists() { Some(io::read_map(&r, shape)?) } else { None },
    })
}
