//! Synthetic RGB-D crowd scenes with head annotations and ground-truth maps.
//!
//! A fixed virtual camera looks down on a textured ground plane. People are
//! ellipsoidal blobs standing on the plane; their pixel height falls off with
//! depth and atmospheric haze tints everything toward a sky colour with
//! distance, so both density and depth are recoverable from appearance.
//! Ground-truth densities place one truncated, unit-mass Gaussian per head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::grid::{Image, Map, MaskProvenance, Shape, TamperMask};
use crate::math;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Head position in pixel coordinates (column `x`, row `y`) and its depth in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadAnnotation {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Gaussian kernel used to spread each head into the density map.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct DensityConfig {
    pub sigma: f64,
    pub truncation_radius: f64,
}

impl DensityConfig {
    /// Kernel truncated at four standard deviations.
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            truncation_radius: 4.0 * sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "density sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.truncation_radius >= 3.0 * self.sigma) {
            return Err(Error::InvalidConfig(format!(
                "truncation radius {} is below 3 sigma ({})",
                self.truncation_radius,
                3.0 * self.sigma
            )));
        }
        Ok(())
    }
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self::with_sigma(4.0)
    }
}

/// Builds a density map with one unit-mass Gaussian per head.
///
/// Each kernel is sampled at pixel centres within `truncation_radius` of the
/// head and renormalised to sum to one over that disc; the part of the disc
/// that falls outside the image is dropped, so only heads near the border
/// lose mass.
pub fn make_density_map(
    heads: &[HeadAnnotation],
    shape: Shape,
    cfg: &DensityConfig,
) -> Result<Map> {
    cfg.validate()?;
    if shape.area() == 0 {
        return Err(Error::InvalidConfig(format!("empty frame shape {shape}")));
    }
    let (h, w) = (shape.height as f64, shape.width as f64);
    for (index, head) in heads.iter().enumerate() {
        let inside = head.x >= 0.0 && head.x < w && head.y >= 0.0 && head.y < h;
        if !inside || !head.x.is_finite() || !head.y.is_finite() {
            return Err(Error::HeadOutOfBounds {
                index,
                x: head.x,
                y: head.y,
                width: shape.width,
                height: shape.height,
            });
        }
    }

    let mut density = Map::zeros(shape);
    let radius = cfg.truncation_radius;
    let r2 = radius * radius;
    let inv_two_var = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let mut weights = Vec::new();
    for head in heads {
        let row_lo = math::ceil(head.y - radius) as i64;
        let row_hi = math::floor(head.y + radius) as i64;
        let col_lo = math::ceil(head.x - radius) as i64;
        let col_hi = math::floor(head.x + radius) as i64;

        weights.clear();
        let mut total = 0.0;
        for row in row_lo..=row_hi {
            let dy = row as f64 - head.y;
            for col in col_lo..=col_hi {
                let dx = col as f64 - head.x;
                let d2 = dx * dx + dy * dy;
                if d2 <= r2 {
                    let wgt = math::exp(-d2 * inv_two_var);
                    total += wgt;
                    weights.push((row, col, wgt));
                }
            }
        }
        for &(row, col, wgt) in &weights {
            if row >= 0 && col >= 0 && (row as usize) < shape.height && (col as usize) < shape.width
            {
                let (r, c) = (row as usize, col as usize);
                density.set(r, c, density.get(r, c) + wgt / total);
            }
        }
    }
    Ok(density)
}

/// Appearance of the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BackgroundTexture {
    /// Relative albedo modulation of the value-noise texture.
    pub contrast: f64,
    /// Lattice spacing of the value noise, in pixels.
    pub cell_size: f64,
}

impl Default for BackgroundTexture {
    fn default() -> Self {
        Self {
            contrast: 0.35,
            cell_size: 6.0,
        }
    }
}

/// Parameters of a synthetic fixed-camera sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Valid sensor range in meters; depth maps are normalised by `depth_max`.
    pub depth_min: f64,
    pub depth_max: f64,
    /// Ground-plane depth at the bottom and top image rows.
    pub ground_near: f64,
    pub ground_far: f64,
    /// Focal length as a fraction of the image height.
    pub focal_scale: f64,
    pub person_height: f64,
    /// Haze extinction coefficient per meter.
    pub haze: f64,
    pub noise_std: f64,
    pub background: BackgroundTexture,
    pub density: DensityConfig,
    /// Seed of the fixed camera: ground texture and tilt are shared by every
    /// frame of the sequence.
    pub camera_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            count_min: 5,
            count_max: 30,
            depth_min: 1.0,
            depth_max: 20.0,
            ground_near: 4.0,
            ground_far: 18.0,
            focal_scale: 0.35,
            person_height: 1.7,
            haze: 0.1,
            noise_std: 2.0,
            background: BackgroundTexture::default(),
            density: DensityConfig::default(),
            camera_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn with_count(mut self, count: usize) -> Self {
        self.count_min = count;
        self.count_max = count;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.density.validate()?;
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.width == 0 || self.height == 0 {
            return bad("scene dimensions must be positive");
        }
        if self.count_min > self.count_max {
            return bad("count_min exceeds count_max");
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return bad("depth range must satisfy 0 < depth_min < depth_max");
        }
        if !(self.depth_min <= self.ground_near
            && self.ground_near < self.ground_far
            && self.ground_far <= self.depth_max)
        {
            return bad("ground depths must lie inside the depth range with near < far");
        }
        if !(self.focal_scale > 0.0 && self.person_height > 0.0) {
            return bad("focal_scale and person_height must be positive");
        }
        if !(self.haze >= 0.0 && self.noise_std >= 0.0 && self.background.cell_size > 0.0) {
            return bad("haze, noise_std and cell_size must be nonnegative (cell_size positive)");
        }
        Ok(())
    }

    /// Heads keep this distance from the left, right and top borders.
    fn head_margin(&self) -> f64 {
        2.0 * self.density.sigma
    }

    fn focal(&self) -> f64 {
        self.focal_scale * self.height as f64
    }

    /// Camera roll, fixed per sequence: relative inverse-depth change across the width.
    fn tilt(&self) -> f64 {
        let u = (rng::derive(self.camera_seed, 0x7117, 0) >> 11) as f64 / (1u64 << 53) as f64;
        0.3 * (u - 0.5)
    }

    /// Ground-plane depth in meters at a pixel (people excluded).
    pub fn ground_depth(&self, row: f64, col: f64) -> f64 {
        let v = if self.height > 1 {
            row / (self.height - 1) as f64
        } else {
            1.0
        };
        let u = if self.width > 1 {
            col / (self.width - 1) as f64 - 0.5
        } else {
            0.0
        };
        let inv_far = 1.0 / self.ground_far;
        let inv_near = 1.0 / self.ground_near;
        let inv = (inv_far + (inv_near - inv_far) * v) * (1.0 + self.tilt() * u);
        (1.0 / inv).clamp(self.depth_min, self.depth_max)
    }

    pub fn normalize_depth(&self, meters: f64) -> f64 {
        (meters / self.depth_max).clamp(0.0, 1.0)
    }
}

/// Normalised depth of the empty scene: the static-geometry reference.
pub fn background_depth(spec: &SceneSpec) -> Map {
    Map::from_fn(spec.shape(), |row, col| {
        to_f32(spec.normalize_depth(spec.ground_depth(row as f64, col as f64)))
    })
}

/// One synthetic frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    /// People per pixel.
    pub density_gt: Map,
    /// Nearest-surface depth normalised to [0, 1].
    pub depth_gt: Map,
    pub heads: Vec<HeadAnnotation>,
}

impl SceneSample {
    pub fn count(&self) -> usize {
        self.heads.len()
    }

    pub fn shape(&self) -> Shape {
        self.image.shape()
    }
}

#[derive(Debug, Clone, Copy)]
struct Person {
    col: f64,
    foot_row: f64,
    depth: f64,
    pixel_height: f64,
    body: [f64; 3],
    head: [f64; 3],
}

impl Person {
    fn head_center(&self) -> (f64, f64) {
        (self.col, self.foot_row - 0.88 * self.pixel_height)
    }

    fn head_radius(&self) -> f64 {
        0.12 * self.pixel_height
    }

    /// Surface depth and albedo where this person covers the pixel.
    fn cover(&self, row: f64, col: f64) -> Option<(f64, [f64; 3])> {
        const BULGE: f64 = 0.25;
        let (hx, hy) = self.head_center();
        let hr = self.head_radius().max(0.5);
        let dh2 = ((col - hx) * (col - hx) + (row - hy) * (row - hy)) / (hr * hr);
        if dh2 <= 1.0 {
            let shade = 0.75 + 0.25 * math::sqrt(1.0 - dh2);
            return Some((
                self.depth - 0.5 * BULGE * math::sqrt(1.0 - dh2),
                self.head.map(|a| a * shade),
            ));
        }
        let cy = self.foot_row - 0.4 * self.pixel_height;
        let ry = (0.4 * self.pixel_height).max(0.5);
        let rx = (0.2 * self.pixel_height).max(0.5);
        let db2 = ((col - self.col) / rx) * ((col - self.col) / rx) + ((row - cy) / ry) * ((row - cy) / ry);
        if db2 <= 1.0 {
            let shade = 0.6 + 0.4 * math::sqrt(1.0 - db2);
            return Some((
                self.depth - BULGE * math::sqrt(1.0 - db2),
                self.body.map(|a| a * shade),
            ));
        }
        None
    }
}

/// Smooth value noise in [-1, 1] on a lattice fixed by `seed`.
fn value_noise(seed: u64, row: f64, col: f64, cell: f64) -> f64 {
    let gy = row / cell;
    let gx = col / cell;
    let (y0, x0) = (math::floor(gy), math::floor(gx));
    let (fy, fx) = (gy - y0, gx - x0);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let lattice = |y: f64, x: f64| {
        let h = rng::derive(seed, y as i64 as u64, x as i64 as u64);
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let (sy, sx) = (smooth(fy), smooth(fx));
    let top = lattice(y0, x0) * (1.0 - sx) + lattice(y0, x0 + 1.0) * sx;
    let bottom = lattice(y0 + 1.0, x0) * (1.0 - sx) + lattice(y0 + 1.0, x0 + 1.0) * sx;
    top * (1.0 - sy) + bottom * sy
}

const SKY: [f64; 3] = [0.78, 0.82, 0.88];
const GROUND: [f64; 3] = [0.42, 0.38, 0.30];

fn ground_albedo(spec: &SceneSpec, row: f64, col: f64) -> [f64; 3] {
    let c = spec.background.cell_size;
    let coarse = value_noise(spec.camera_seed, row, col, c);
    let fine = value_noise(spec.camera_seed ^ 0xF1E, row, col, c * 0.5);
    let m = 1.0 + spec.background.contrast * (0.7 * coarse + 0.3 * fine);
    GROUND.map(|g| (g * m).clamp(0.0, 1.0))
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(core::f64::consts::TAU * u2)
}

fn place_people(spec: &SceneSpec, count: usize, rng: &mut Rng) -> Result<Vec<Person>> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let margin = spec.head_margin();
    if count > 0 && (w - 2.0 * margin <= 0.0 || h - margin <= 0.0) {
        return Err(Error::InfeasibleScene(format!(
            "no admissible head positions in a {}x{} frame with a {margin} px margin",
            spec.width, spec.height
        )));
    }
    let admissible = ((w - 2.0 * margin) * (h - margin)).max(0.0) as usize;
    if count > admissible {
        return Err(Error::InfeasibleScene(format!(
            "{count} people requested but only {admissible} head positions exist"
        )));
    }

    let mut people: Vec<Person> = Vec::with_capacity(count);
    let mut taken: Vec<(i64, i64)> = Vec::with_capacity(count);
    let max_attempts = 1000 * count.max(1);
    let mut attempts = 0;
    while people.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InfeasibleScene(format!(
                "placed only {} of {count} people after {max_attempts} attempts",
                people.len()
            )));
        }
        let foot_row = rng.gen_range(0.0..h);
        let col = rng.gen_range(margin..w - margin);
        let depth = spec.ground_depth(foot_row, col);
        let pixel_height = spec.person_height * spec.focal() / depth;
        let body = [rng.gen_range(0.05..0.7), rng.gen_range(0.05..0.7), rng.gen_range(0.05..0.7)];
        let skin = rng.gen_range(0.35..0.85);
        let person = Person {
            col,
            foot_row,
            depth,
            pixel_height,
            body,
            head: [skin, skin * 0.8, skin * 0.65],
        };
        let (hx, hy) = person.head_center();
        if hy < margin {
            continue;
        }
        let key = (math::round(hx) as i64, math::round(hy) as i64);
        if taken.contains(&key) {
            continue;
        }
        taken.push(key);
        people.push(person);
    }
    Ok(people)
}

/// Renders one frame. A pure function of `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let shape = spec.shape();
    let mut rng = rng::seeded(rng::derive(seed, 0x5CE0E, spec.camera_seed));
    let count = rng.gen_range(spec.count_min..=spec.count_max);
    let mut people = place_people(spec, count, &mut rng)?;
    // far to near
    people.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let mut image = Image::zeros(shape);
    let mut depth = Map::zeros(shape);
    for row in 0..shape.height {
        for col in 0..shape.width {
            let (r, c) = (row as f64, col as f64);
            let mut z = spec.ground_depth(r, c);
            let mut albedo = ground_albedo(spec, r, c);
            for p in &people {
                if let Some((pz, pa)) = p.cover(r, c) {
                    if pz < z {
                        z = pz.max(spec.depth_min);
                        albedo = pa;
                    }
                }
            }
            let t = math::exp(-spec.haze * z);
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                let v = 255.0 * (albedo[ch] * t + SKY[ch] * (1.0 - t))
                    + spec.noise_std * gaussian(&mut rng);
                rgb[ch] = math::round(v.clamp(0.0, 255.0));
            }
            image.set_pixel(row, col, rgb);
            depth.set(row, col, to_f32(spec.normalize_depth(z)));
        }
    }

    let heads: Vec<HeadAnnotation> = people
        .iter()
        .map(|p| {
            let (x, y) = p.head_center();
            HeadAnnotation {
                x,
                y,
                depth: p.depth,
            }
        })
        .collect();
    let density = make_density_map(&heads, shape, &spec.density)?.map(to_f32);
    Ok(SceneSample {
        image,
        density_gt: density,
        depth_gt: depth,
        heads,
    })
}

/// Dataset split; train and test frames draw seeds from disjoint streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
}

pub fn frame_seed(seed: u64, split: Split, index: usize) -> u64 {
    let stream = match split {
        Split::Train => 0x7A41,
        Split::Test => 0x7E57,
    };
    rng::derive(seed, stream, index as u64)
}

/// Generates `n_train` training and `n_test` test frames in memory.
pub fn generate_split(
    seed: u64,
    n_train: usize,
    n_test: usize,
    spec: &SceneSpec,
) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    if n_train == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let train = (0..n_train)
        .map(|i| generate_scene(frame_seed(seed, Split::Train, i), spec))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..n_test)
        .map(|i| generate_scene(frame_seed(seed, Split::Test, i), spec))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

/// Ground-truth tamper region covering one image quadrant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuarterProtocol {
    pub quadrant_index: u8,
    pub tamper_mask: TamperMask,
}

impl QuarterProtocol {
    pub fn new(shape: Shape, quadrant_index: u8) -> Result<Self> {
        Ok(Self {
            quadrant_index,
            tamper_mask: quarter_mask(shape, quadrant_index)?,
        })
    }
}

/// Mask of one quadrant: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
/// Odd dimensions split at the ceiling, so quadrant 0 is the largest.
pub fn quarter_mask(shape: Shape, quadrant_index: u8) -> Result<TamperMask> {
    if quadrant_index > 3 {
        return Err(Error::InvalidConfig(format!(
            "quadrant index must be in 0..=3, got {quadrant_index}"
        )));
    }
    let split_row = shape.height.div_ceil(2);
    let split_col = shape.width.div_ceil(2);
    let top = quadrant_index < 2;
    let left = quadrant_index % 2 == 0;
    Ok(TamperMask::from_fn(
        shape,
        MaskProvenance::GroundTruth,
        |row, col| (row < split_row) == top && (col < split_col) == left,
    ))
}
