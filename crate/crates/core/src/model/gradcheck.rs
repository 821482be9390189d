//! Central finite-difference check of the analytic input gradient.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{LossSpec, ModelParams, Prediction, Regressor};
use crate::grid::{Image, Map};
use crate::rng;
use crate::{Error, Result};

/// Gives up after this many draws per requested sample.
const MAX_DRAWS_PER_SAMPLE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    /// Index into the channel-interleaved image buffer.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|numeric − analytic| / max(|numeric|, |analytic|)`, 0 when both vanish.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
    /// Draws rejected because a ReLU changed sign inside the stencil.
    pub kinks_skipped: usize,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn nonzero(&self) -> usize {
        self.samples.iter().filter(|s| s.analytic != 0.0 || s.numeric != 0.0).count()
    }
}

/// `L(a) − L(b)` for the squared-error loss, summed per pixel as
/// `½(a−b)(a+b−2r)` so the large loss totals never cancel.
fn loss_difference(spec: &LossSpec<'_>, a: &Prediction, b: &Prediction) -> f64 {
    let term = |x: &Map, y: &Map, r: &Map| -> f64 {
        x.as_slice()
            .iter()
            .zip(y.as_slice())
            .zip(r.as_slice())
            .map(|((&x, &y), &r)| 0.5 * (x - y) * (x + y - 2.0 * r))
            .sum()
    };
    let mut d = spec.density_weight * term(&a.density, &b.density, spec.density_ref);
    if let Some(zr) = spec.depth_ref {
        d += spec.depth_weight * term(&a.depth, &b.depth, zr);
    }
    d
}

/// Compares the analytic gradient with `(L(x+h) − L(x−h)) / 2h` at
/// `n_samples` random coordinates. Coordinates whose stencil crosses a ReLU
/// kink are redrawn, so every accepted sample lies where the loss is smooth.
pub fn check_input_gradient(
    model: &ModelParams,
    image: &Image,
    spec: &LossSpec<'_>,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheck> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {h}")));
    }
    let analytic = model.input_gradient(image, spec)?.gradient;
    let base = model.activation_pattern(image)?;
    let mut r = rng::seeded(rng::derive(seed, 0x6c4e, 0));
    let mut samples = Vec::with_capacity(n_samples);
    let mut kinks_skipped = 0;
    let mut draws = 0;
    while samples.len() < n_samples {
        draws += 1;
        if draws > MAX_DRAWS_PER_SAMPLE * n_samples.max(1) {
            return Err(Error::InvalidConfig(format!(
                "only {} of {n_samples} coordinates avoided ReLU kinks",
                samples.len()
            )));
        }
        let index = r.gen_range(0..image.as_slice().len());
        let shifted = |delta: f64| {
            let mut img = image.clone();
            img.as_mut_slice()[index] += delta;
            img
        };
        let (plus, minus) = (shifted(h), shifted(-h));
        if model.activation_pattern(&plus)? != base || model.activation_pattern(&minus)? != base {
            kinks_skipped += 1;
            continue;
        }
        let numeric = loss_difference(spec, &model.forward(&plus)?, &model.forward(&minus)?) / (2.0 * h);
        let a = analytic.as_slice()[index];
        let scale = numeric.abs().max(a.abs());
        let rel_error = if scale == 0.0 { 0.0 } else { (numeric - a).abs() / scale };
        samples.push(GradSample {
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheck { samples, kinks_skipped })
}
