//! The fast-gradient-sign attack family against the density regressor.
//!
//! Four families: untargeted (U) ascends the density loss, targeted (T)
//! descends toward a wrong density map, and their exposed variants (UE, TE)
//! add a depth term that tries to keep the depth stream unchanged.
//!
//! Single-step attacks move every pixel by `ε·sign(∇)`. Multi-step attacks take
//! `n` steps of size `α`, each followed by projection onto the L∞ ball of
//! radius `ε` around the clean image and clamping to [0, 255]. `sign(0) = 0`,
//! so pixels with no gradient never move.

use alloc::format;
use alloc::vec::Vec;

use crate::grid::{Image, Map, MaskProvenance, TamperMask};
use crate::math;
use crate::model::{LossSpec, Regressor};
use crate::{Error, Result};

/// Largest valid intensity.
pub const MAX_INTENSITY: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttackFamily {
    /// Untargeted, unexposed.
    U,
    /// Targeted, unexposed.
    T,
    /// Untargeted, exposed to the depth stream.
    UE,
    /// Targeted, exposed to the depth stream.
    TE,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 4] = [AttackFamily::U, AttackFamily::T, AttackFamily::UE, AttackFamily::TE];

    pub fn is_targeted(self) -> bool {
        matches!(self, AttackFamily::T | AttackFamily::TE)
    }

    pub fn is_exposed(self) -> bool {
        matches!(self, AttackFamily::UE | AttackFamily::TE)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::U => "u",
            AttackFamily::T => "t",
            AttackFamily::UE => "ue",
            AttackFamily::TE => "te",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "u" => Some(AttackFamily::U),
            "t" => Some(AttackFamily::T),
            "ue" => Some(AttackFamily::UE),
            "te" => Some(AttackFamily::TE),
            _ => None,
        }
    }

    /// +1 for loss ascent, −1 for descent toward a target.
    fn direction(self) -> f64 {
        if self.is_targeted() {
            -1.0
        } else {
            1.0
        }
    }
}

impl core::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the target density `D_t` of a targeted attack is derived from the
/// clean prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TargetRule {
    /// Every pixel's density plus one.
    #[default]
    PerPixelPlusOne,
    /// One extra person spread uniformly over the frame.
    TotalPlusOne,
}

impl TargetRule {
    pub fn target(self, clean_density: &Map) -> Map {
        let add = match self {
            TargetRule::PerPixelPlusOne => 1.0,
            TargetRule::TotalPlusOne => 1.0 / clean_density.shape().area() as f64,
        };
        clean_density.map(|v| v + add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// L∞ budget on the 0–255 scale.
    pub epsilon: f64,
    /// Step size of the iterative scheme.
    pub alpha: f64,
    pub steps: usize,
    /// Weight of the depth term for exposed families.
    pub lambda_att: f64,
    pub target_rule: TargetRule,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            family: AttackFamily::U,
            epsilon: 15.0,
            alpha: 1.0,
            steps: 19,
            lambda_att: 0.01,
            target_rule: TargetRule::PerPixelPlusOne,
        }
    }
}

impl AttackConfig {
    pub fn new(family: AttackFamily, epsilon: f64, steps: usize) -> Self {
        Self {
            family,
            epsilon,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if self.steps == 0 {
            return bad("attack needs at least one step".into());
        }
        if self.steps > 1 && !(self.alpha > 0.0) {
            return bad(format!("alpha must be > 0 for multi-step attacks, got {}", self.alpha));
        }
        if !(self.lambda_att >= 0.0) {
            return bad(format!("lambda_att must be >= 0, got {}", self.lambda_att));
        }
        Ok(())
    }

    /// Short label such as `u19` or `te1`.
    pub fn label(&self) -> alloc::string::String {
        format!("{}{}", self.family.name(), self.steps)
    }
}

/// Step count for budget `ε`: `min(round(ε + 4), round(1.25·ε))`, at least 1.
///
/// Each operand is rounded half-up before taking the minimum, so the default
/// budget of 15 yields 19 steps.
pub fn schedule_steps(epsilon: f64) -> usize {
    if !(epsilon > 0.0) {
        return 1;
    }
    let half_up = |v: f64| math::floor(v + 0.5);
    let n = half_up(epsilon + 4.0).min(half_up(1.25 * epsilon));
    if n < 1.0 {
        1
    } else {
        n as usize
    }
}

/// Reference maps the attack loss is measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReference {
    /// `D` for untargeted families, `D_t` for targeted ones.
    pub density: Map,
    /// `z`, the depth map associated with the clean image (exposed families).
    pub depth: Map,
}

impl AttackReference {
    /// References for `family`: untargeted attacks push away from
    /// `density`, targeted attacks pull toward `rule.target(clean_density)`.
    pub fn for_family(
        family: AttackFamily,
        rule: TargetRule,
        density: &Map,
        clean_density: &Map,
        depth: &Map,
    ) -> Self {
        let density = if family.is_targeted() {
            rule.target(clean_density)
        } else {
            density.clone()
        };
        Self {
            density,
            depth: depth.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialResult {
    pub adv_image: Image,
    /// Attack loss at every iterate `I_0 … I_n`.
    pub loss_trace: Vec<f64>,
    /// Pixels the attacker was allowed to touch.
    pub gt_mask: TamperMask,
}

impl AdversarialResult {
    pub fn perturbation(&self, clean: &Image) -> Image {
        let data = self
            .adv_image
            .as_slice()
            .iter()
            .zip(clean.as_slice())
            .map(|(a, c)| a - c)
            .collect();
        Image::from_vec(clean.shape(), data).expect("same shape")
    }
}

/// An attack configuration, optionally confined to a tamper region.
#[derive(Debug, Clone, PartialEq)]
pub struct Attack {
    pub config: AttackConfig,
    pub mask: Option<TamperMask>,
}

impl Attack {
    pub fn new(config: AttackConfig) -> Self {
        Self { config, mask: None }
    }

    /// Confines the perturbation to `mask`: the gradient is zeroed outside it
    /// before the sign step.
    pub fn masked(config: AttackConfig, mask: TamperMask) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            config,
            mask: Some(mask.with_provenance(MaskProvenance::GroundTruth)),
        })
    }

    fn loss_spec<'a>(&self, reference: &'a AttackReference) -> LossSpec<'a> {
        let c = &self.config;
        match c.family {
            AttackFamily::U | AttackFamily::T => LossSpec::density(&reference.density),
            // ascend L_d − λ·L_z
            AttackFamily::UE => LossSpec::joint(&reference.density, &reference.depth, -c.lambda_att),
            // descend L_d + λ·L_z
            AttackFamily::TE => LossSpec::joint(&reference.density, &reference.depth, c.lambda_att),
        }
    }

    pub fn run<M: Regressor + ?Sized>(
        &self,
        model: &M,
        image: &Image,
        reference: &AttackReference,
    ) -> Result<AdversarialResult> {
        let c = &self.config;
        c.validate()?;
        let shape = model.input_shape();
        shape.ensure_eq(image.shape())?;
        shape.ensure_eq(reference.density.shape())?;
        shape.ensure_eq(reference.depth.shape())?;
        if let Some(mask) = &self.mask {
            shape.ensure_eq(mask.shape())?;
        }
        if image
            .as_slice()
            .iter()
            .any(|v| !(0.0..=MAX_INTENSITY).contains(v))
        {
            return Err(Error::InvalidConfig("image intensities must lie in [0, 255]".into()));
        }

        let spec = self.loss_spec(reference);
        let dir = c.family.direction();
        let mut adv = image.clone();
        let mut trace = Vec::with_capacity(c.steps + 1);
        let single = c.steps == 1;
        let step_size = if single { c.epsilon } else { c.alpha };

        for step in 0..c.steps {
            let g = model.input_gradient(&adv, &spec)?;
            trace.push(g.loss.total);
            if g.gradient.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { step });
            }
            let flags = self.mask.as_ref().map(|m| m.flags());
            for (i, (a, &gv)) in adv.as_mut_slice().iter_mut().zip(g.gradient.as_slice()).enumerate() {
                let allowed = flags.map_or(true, |f| f[i / 3]);
                if allowed {
                    *a += dir * step_size * math::sign(gv);
                }
            }
            project(&mut adv, image, c.epsilon);
        }
        let final_pred = model.predict(&adv)?;
        trace.push(spec.evaluate(&final_pred.density, &final_pred.depth)?.0.total);

        let gt_mask = match &self.mask {
            Some(m) => m.clone(),
            None => TamperMask::full(shape, MaskProvenance::GroundTruth),
        };
        Ok(AdversarialResult {
            adv_image: adv,
            loss_trace: trace,
            gt_mask,
        })
    }
}

/// Clamps to the valid range and to the ε-ball around `clean`, exactly:
/// after this, `|adv − clean| ≤ ε` holds in floating point.
fn project(adv: &mut Image, clean: &Image, epsilon: f64) {
    for (a, &c) in adv.as_mut_slice().iter_mut().zip(clean.as_slice()) {
        let lo = (c - epsilon).max(0.0);
        let hi = (c + epsilon).min(MAX_INTENSITY);
        let mut v = a.clamp(lo, hi);
        while (v - c).abs() > epsilon {
            v = math::step_toward(v, c);
        }
        *a = v;
    }
}

/// Runs `config` against `model`, perturbing only pixels inside `mask`.
pub fn masked_attack<M: Regressor + ?Sized>(
    model: &M,
    image: &Image,
    reference: &AttackReference,
    config: AttackConfig,
    mask: TamperMask,
) -> Result<AdversarialResult> {
    Attack::masked(config, mask)?.run(model, image, reference)
}
