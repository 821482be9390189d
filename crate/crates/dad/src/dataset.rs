//! On-disk synthetic datasets.
//!
//! ```text
//! <root>/manifest.json
//! <root>/frames/<id>/image.png     8-bit RGB
//! <root>/frames/<id>/depth.f32     H·W little-endian f32, normalised depth
//! <root>/frames/<id>/density.f32   H·W little-endian f32, people per pixel
//! <root>/frames/<id>/meta.json     width, height, count, heads as [x, y, depth]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dad_core::scene::{frame_seed, generate_scene, HeadAnnotation, SceneSample, SceneSpec, Split};
use dad_core::Shape;
use serde::{Deserialize, Serialize};

use crate::io;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub spec: SceneSpec,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn shape(&self) -> Shape {
        self.spec.shape()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// `[x, y, depth in meters]` per head.
    pub heads: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub split: Split,
    pub sample: SceneSample,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

impl Dataset {
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.train.iter().chain(&self.test)
    }

    pub fn frame(&self, id: &str) -> Option<&Frame> {
        self.frames().find(|f| f.id == id)
    }
}

pub fn frame_id(split: Split, index: usize) -> String {
    match split {
        Split::Train => format!("train-{index:04}"),
        Split::Test => format!("test-{index:04}"),
    }
}

pub fn frame_dir(root: &Path, id: &str) -> PathBuf {
    root.join("frames").join(id)
}

/// Renders every frame and writes the dataset. Byte-identical for equal
/// arguments.
pub fn write_dataset(root: &Path, seed: u64, n_train: usize, n_test: usize, spec: &SceneSpec) -> Result<Manifest> {
    if n_train == 0 {
        bail!("empty training set");
    }
    spec.validate()?;
    let mut manifest = Manifest {
        version: FORMAT_VERSION,
        seed,
        spec: *spec,
        train: Vec::with_capacity(n_train),
        test: Vec::with_capacity(n_test),
    };
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        for i in 0..n {
            let id = frame_id(split, i);
            let sample = generate_scene(frame_seed(seed, split, i), spec).with_context(|| format!("rendering {id}"))?;
            write_frame(&frame_dir(root, &id), &sample)?;
            match split {
                Split::Train => manifest.train.push(id),
                Split::Test => manifest.test.push(id),
            }
        }
    }
    io::write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn write_frame(dir: &Path, sample: &SceneSample) -> Result<()> {
    let s = sample.shape();
    io::write_png_rgb(&dir.join("image.png"), &sample.image)?;
    io::write_map(&dir.join("depth.f32"), &sample.depth_gt)?;
    io::write_map(&dir.join("density.f32"), &sample.density_gt)?;
    let meta = FrameMeta {
        width: s.width,
        height: s.height,
        count: sample.count(),
        heads: sample.heads.iter().map(|h| [h.x, h.y, h.depth]).collect(),
    };
    io::write_json(&dir.join("meta.json"), &meta)
}

pub fn read_frame(dir: &Path) -> Result<SceneSample> {
    let meta: FrameMeta = io::read_json(&dir.join("meta.json"))?;
    let shape = Shape::new(meta.height, meta.width);
    ensure!(meta.heads.len() == meta.count, "{}: count {} but {} heads", dir.display(), meta.count, meta.heads.len());
    let image = io::read_png_rgb(&dir.join("image.png"))?;
    ensure!(image.shape() == shape, "{}: image is {}, meta says {shape}", dir.display(), image.shape());
    Ok(SceneSample {
        image,
        density_gt: io::read_map(&dir.join("density.f32"), shape)?,
        depth_gt: io::read_map(&dir.join("depth.f32"), shape)?,
        heads: meta.heads.iter().map(|&[x, y, depth]| HeadAnnotation { x, y, depth }).collect(),
    })
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let m: Manifest = io::read_json(&root.join(MANIFEST))?;
    ensure!(m.version == FORMAT_VERSION, "{}: unsupported dataset version {}", root.display(), m.version);
    Ok(m)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let load = |ids: &[String], split| -> Result<Vec<Frame>> {
        ids.iter()
            .map(|id| {
                let sample = read_frame(&frame_dir(root, id))?;
                ensure!(sample.shape() == manifest.shape(), "frame {id} does not match the manifest shape");
                Ok(Frame { id: id.clone(), split, sample })
            })
            .collect()
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        train: load(&manifest.train, Split::Train)?,
        test: load(&manifest.test, Split::Test)?,
        manifest,
    })
}
