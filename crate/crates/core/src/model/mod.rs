//! The two-stream density/depth regressor.
//!
//! A shared convolutional encoder downsamples the image; two decoders with
//! identical structure upsample the features back to full resolution, one
//! producing a nonnegative density map and the other a depth map. Gradients
//! are computed by hand-written reverse mode, both for training and for the
//! input gradients the attack engine needs.

pub mod gradcheck;
mod layers;
mod train;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::grid::{Image, Map, Shape};
use crate::rng::{self, Rng};
use crate::{Error, Result};

use layers::Act;

pub use train::{train, EpochLog, LrSchedule, Optimizer, TrainConfig, TrainLog};

/// Layer shapes of the network.
///
/// Encoder block `k`: 3×3 conv to `encoder_widths[k]` channels, ReLU, 2×2
/// average pool. Each decoder mirrors it: 2× upsample, 3×3 conv, ReLU, with
/// widths `decoder_widths` and a final single-channel conv without ReLU.
/// With `skip_connections`, each decoder conv input also receives the
/// matching encoder activation (additively), which requires the decoder
/// widths to mirror the encoder's. With `coord_channels`, the normalised
/// row and column are fed as two extra input planes, which lets a fixed
/// camera's scene geometry be learned directly.
/// The density head is `density_gain · max(raw, 0)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// People per pixel represented by one unit of raw density activation.
    pub density_gain: f64,
    pub skip_connections: bool,
    pub coord_channels: bool,
}

impl Architecture {
    pub const IMAGE_CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            encoder_widths: vec![16, 32, 64],
            decoder_widths: vec![32, 16],
            density_gain: 0.01,
            skip_connections: true,
            coord_channels: true,
        }
    }

    pub fn in_channels(&self) -> usize {
        Self::IMAGE_CHANNELS + if self.coord_channels { 2 } else { 0 }
    }

    pub fn without_extras(mut self) -> Self {
        self.skip_connections = false;
        self.coord_channels = false;
        self
    }

    pub fn with_widths(mut self, encoder: &[usize], decoder: &[usize]) -> Self {
        self.encoder_widths = encoder.to_vec();
        self.decoder_widths = decoder.to_vec();
        self
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn levels(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 || levels > 16 {
            return Err(Error::InvalidConfig(format!(
                "encoder needs between 1 and 16 blocks, got {levels}"
            )));
        }
        if self.decoder_widths.len() + 1 != levels {
            return Err(Error::InvalidConfig(format!(
                "decoder needs {} hidden widths for {levels} encoder blocks, got {}",
                levels - 1,
                self.decoder_widths.len()
            )));
        }
        if !(self.density_gain > 0.0 && self.density_gain.is_finite()) {
            return Err(Error::InvalidConfig("density gain must be positive".into()));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&c| c == 0) {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        if self.skip_connections {
            let mirrored = self
                .decoder_widths
                .iter()
                .zip(self.encoder_widths[..levels - 1].iter().rev())
                .all(|(d, e)| d == e);
            if !mirrored {
                return Err(Error::InvalidConfig(format!(
                    "skip connections need decoder widths {:?} to mirror encoder widths {:?}",
                    self.decoder_widths, self.encoder_widths
                )));
            }
        }
        let step = 1usize << levels;
        if self.height == 0 || self.width == 0 || self.height % step != 0 || self.width % step != 0 {
            return Err(Error::InvalidConfig(format!(
                "frame {}x{} is not divisible by {step}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `(cin, cout)` of every conv, in parameter order: encoder, density
    /// decoder, depth decoder.
    fn convs(&self) -> Vec<(usize, usize)> {
        let mut convs = Vec::new();
        let mut cin = self.in_channels();
        for &c in &self.encoder_widths {
            convs.push((cin, c));
            cin = c;
        }
        let features = cin;
        for _ in 0..2 {
            let mut cin = features;
            for &c in self.decoder_widths.iter().chain(core::iter::once(&1)) {
                convs.push((cin, c));
                cin = c;
            }
        }
        convs
    }

    fn layout(&self) -> Vec<ConvSlot> {
        let mut offset = 0;
        self.convs()
            .into_iter()
            .map(|(cin, cout)| {
                let slot = ConvSlot {
                    cin,
                    cout,
                    weights: offset,
                    bias: offset + cin * cout * 9,
                };
                offset = slot.bias + cout;
                slot
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().last().map_or(0, |s| s.bias + s.cout)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    cin: usize,
    cout: usize,
    weights: usize,
    bias: usize,
}

impl ConvSlot {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.weights..self.bias]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.bias..self.bias + self.cout]
    }
}

/// Weights of the shared encoder and both decoders, stored as `f32` so that
/// the on-disk payload is lossless. All arithmetic runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub weights: Vec<f32>,
    /// Loss balance the weights were trained with (bookkeeping only).
    pub lambda: f64,
    pub seed: u64,
}

/// Which head a parameter index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    DensityDecoder,
    DepthDecoder,
}

impl ModelParams {
    /// He-initialised weights; the depth head starts at mid range.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::seeded(rng::derive(seed, 0x1417, 0));
        let layout = arch.layout();
        let levels = arch.levels();
        let mut weights = vec![0f32; arch.parameter_count()];
        for (i, slot) in layout.iter().enumerate() {
            let fan_in = (slot.cin * 9) as f64;
            let depth_out = i == 3 * levels - 1;
            let std = crate::math::sqrt(2.0 / fan_in) * if depth_out { 0.1 } else { 1.0 };
            for w in &mut weights[slot.weights..slot.bias] {
                *w = (std * normal(&mut rng)) as f32;
            }
        }
        let depth_out = layout[3 * levels - 1];
        weights[depth_out.bias] = 0.4;
        Ok(Self {
            arch,
            weights,
            lambda: 0.0,
            seed,
        })
    }

    pub fn shape(&self) -> Shape {
        self.arch.shape()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.weights.len() != self.arch.parameter_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights", self.arch.parameter_count()),
                actual: format!("{} weights", self.weights.len()),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("non-finite weight".into()));
        }
        Ok(())
    }

    /// Index ranges of each parameter group.
    pub fn group_ranges(&self) -> [(ParamGroup, core::ops::Range<usize>); 3] {
        let layout = self.arch.layout();
        let l = self.arch.levels();
        let end = |s: &ConvSlot| s.bias + s.cout;
        [
            (ParamGroup::Encoder, 0..end(&layout[l - 1])),
            (ParamGroup::DensityDecoder, layout[l].weights..end(&layout[2 * l - 1])),
            (ParamGroup::DepthDecoder, layout[2 * l].weights..end(&layout[3 * l - 1])),
        ]
    }

    /// Zeroes the weights and bias of the final conv of the density decoder.
    pub fn zero_density_output(&mut self) {
        let slot = self.arch.layout()[2 * self.arch.levels() - 1];
        self.weights[slot.weights..slot.bias + slot.cout].fill(0.0);
    }

    /// Zeroes every encoder conv kernel, cutting both heads off from the
    /// input (biases are kept).
    pub fn zero_encoder_weights(&mut self) {
        for slot in &self.arch.layout()[..self.arch.levels()] {
            self.weights[slot.weights..slot.bias].fill(0.0);
        }
    }

    pub fn forward(&self, image: &Image) -> Result<Prediction> {
        let net = self.unpacked();
        let x = self.input_activation(image)?;
        Ok(net.forward(x, None).prediction())
    }

    /// Forward pass with inverted dropout on the encoder features and on every
    /// hidden decoder activation.
    pub fn forward_stochastic(&self, image: &Image, drop_rate: f64, rng: &mut Rng) -> Result<Prediction> {
        if !(0.0..1.0).contains(&drop_rate) {
            return Err(Error::InvalidConfig(format!(
                "drop rate must be in [0, 1), got {drop_rate}"
            )));
        }
        let net = self.unpacked();
        let x = self.input_activation(image)?;
        Ok(net.forward(x, Some((drop_rate, rng))).prediction())
    }

    fn input_activation(&self, image: &Image) -> Result<Act> {
        self.shape().ensure_eq(image.shape())?;
        let (h, w) = (self.arch.height, self.arch.width);
        let mut x = Act::zeros(self.arch.in_channels(), h, w);
        for (p, px) in image.as_slice().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                x.data[ch * h * w + p] = px[ch] * INPUT_SCALE - 0.5;
            }
        }
        if self.arch.coord_channels {
            let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
            for y in 0..h {
                for xx in 0..w {
                    x.data[3 * h * w + y * w + xx] = norm(y, h);
                    x.data[4 * h * w + y * w + xx] = norm(xx, w);
                }
            }
        }
        Ok(x)
    }

    /// Signs of every ReLU input in the network; the loss is a quadratic
    /// function of the image as long as this pattern does not change.
    pub(crate) fn activation_pattern(&self, image: &Image) -> Result<Vec<bool>> {
        let net = self.unpacked();
        let trace = net.forward(self.input_activation(image)?, None);
        let mut out = Vec::new();
        for a in &trace.enc_relu {
            out.extend(a.data.iter().map(|&v| v > 0.0));
        }
        for dec in [&trace.density_dec, &trace.depth_dec] {
            for a in &dec.hidden {
                out.extend(a.data.iter().map(|&v| v > 0.0));
            }
        }
        out.extend(trace.density_dec.raw.data.iter().map(|&v| v > 0.0));
        Ok(out)
    }

    fn unpacked(&self) -> Unpacked<'_> {
        Unpacked {
            arch: &self.arch,
            layout: self.arch.layout(),
            params: self.weights.iter().map(|&w| w as f64).collect(),
        }
    }

    /// Loss of one sample; its gradient w.r.t. the weights is accumulated
    /// into `grads`. `drop` enables dropout for this pass.
    pub(crate) fn sample_gradient(
        &self,
        image: &Image,
        spec: &LossSpec<'_>,
        grads: &mut [f64],
        drop: Option<(f64, &mut Rng)>,
    ) -> Result<LossParts> {
        let net = self.unpacked();
        let x = self.input_activation(image)?;
        let trace = net.forward(x, drop);
        let (parts, dd, dz) = spec.evaluate(&trace.density, &trace.depth)?;
        net.backward(&trace, dd, dz, Some(grads), false);
        Ok(parts)
    }
}

const INPUT_SCALE: f64 = 1.0 / 255.0;

fn normal(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    crate::math::sqrt(-2.0 * crate::math::ln(u1)) * crate::math::cos(core::f64::consts::TAU * u2)
}

struct Unpacked<'a> {
    arch: &'a Architecture,
    layout: Vec<ConvSlot>,
    params: Vec<f64>,
}

struct DecoderTrace {
    /// Conv inputs (upsampled activations), one per block.
    inputs: Vec<Act>,
    /// Conv outputs after ReLU (after dropout, if any) for hidden blocks.
    hidden: Vec<Act>,
    /// Dropout multipliers per hidden block.
    drop: Vec<Option<Vec<f64>>>,
    /// Raw output of the last conv.
    raw: Act,
}

struct Trace {
    enc_inputs: Vec<Act>,
    enc_relu: Vec<Act>,
    features_drop: Option<Vec<f64>>,
    density_dec: DecoderTrace,
    depth_dec: DecoderTrace,
    density: Map,
    depth: Map,
}

impl Trace {
    fn prediction(self) -> Prediction {
        Prediction {
            density: self.density,
            depth: self.depth,
        }
    }
}

fn dropout(a: &mut Act, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..a.data.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    for (v, m) in a.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

impl Unpacked<'_> {
    fn forward(&self, x: Act, mut drop: Option<(f64, &mut Rng)>) -> Trace {
        let l = self.arch.levels();
        let mut enc_inputs = Vec::with_capacity(l);
        let mut enc_relu = Vec::with_capacity(l);
        let mut a = x;
        for slot in &self.layout[..l] {
            let mut y = layers::conv3x3(&a, slot.weights(&self.params), slot.bias(&self.params), slot.cout);
            layers::relu_inplace(&mut y);
            let pooled = layers::avg_pool2(&y);
            enc_inputs.push(a);
            enc_relu.push(y);
            a = pooled;
        }
        let mut features = a;
        let features_drop = drop.as_mut().map(|(rate, rng)| dropout(&mut features, *rate, rng));

        let density_dec = self.decode(&features, &enc_relu, &self.layout[l..2 * l], drop.as_mut().map(|(r, g)| (*r, &mut **g)));
        let depth_dec = self.decode(&features, &enc_relu, &self.layout[2 * l..3 * l], drop.as_mut().map(|(r, g)| (*r, &mut **g)));
        let shape = self.arch.shape();
        let gain = self.arch.density_gain;
        let density = Map::from_vec(shape, density_dec.raw.data.iter().map(|&v| gain * v.max(0.0)).collect())
            .expect("decoder output matches frame");
        let depth = Map::from_vec(shape, depth_dec.raw.data.clone()).expect("decoder output matches frame");
        Trace {
            enc_inputs,
            enc_relu,
            features_drop,
            density_dec,
            depth_dec,
            density,
            depth,
        }
    }

    fn decode(&self, features: &Act, skips: &[Act], slots: &[ConvSlot], mut drop: Option<(f64, &mut Rng)>) -> DecoderTrace {
        let mut inputs = Vec::with_capacity(slots.len());
        let mut hidden = Vec::with_capacity(slots.len() - 1);
        let mut drops = Vec::with_capacity(slots.len() - 1);
        let mut a = layers::upsample2(features);
        for (i, slot) in slots.iter().enumerate() {
            if self.arch.skip_connections {
                let skip = &skips[slots.len() - 1 - i];
                for (v, s) in a.data.iter_mut().zip(&skip.data) {
                    *v += s;
                }
            }
            let mut y = layers::conv3x3(&a, slot.weights(&self.params), slot.bias(&self.params), slot.cout);
            inputs.push(a);
            if i + 1 == slots.len() {
                return DecoderTrace {
                    inputs,
                    hidden,
                    drop: drops,
                    raw: y,
                };
            }
            layers::relu_inplace(&mut y);
            drops.push(drop.as_mut().map(|(rate, rng)| dropout(&mut y, *rate, rng)));
            a = layers::upsample2(&y);
            hidden.push(y);
        }
        unreachable!("decoder has at least one block")
    }

    /// Returns the gradient w.r.t. the normalised input when `need_input`.
    fn backward(
        &self,
        trace: &Trace,
        d_density: Map,
        d_depth: Map,
        mut grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Act> {
        let l = self.arch.levels();
        let (h, w) = (self.arch.height, self.arch.width);

        // nonnegativity map on the density head
        let mut g_density = Act::zeros(1, h, w);
        for ((g, &d), &raw) in g_density
            .data
            .iter_mut()
            .zip(d_density.as_slice())
            .zip(&trace.density_dec.raw.data)
        {
            *g = if raw > 0.0 { self.arch.density_gain * d } else { 0.0 };
        }
        let g_depth = Act {
            c: 1,
            h,
            w,
            data: d_depth.into_vec(),
        };

        let (mut g_features, skip1) = self.decode_backward(&trace.density_dec, &self.layout[l..2 * l], g_density, grads.as_deref_mut());
        let (g2, skip2) = self.decode_backward(&trace.depth_dec, &self.layout[2 * l..3 * l], g_depth, grads.as_deref_mut());
        for (a, b) in g_features.data.iter_mut().zip(&g2.data) {
            *a += b;
        }
        if let Some(mask) = &trace.features_drop {
            for (g, m) in g_features.data.iter_mut().zip(mask) {
                *g *= m;
            }
        }

        let mut g = g_features;
        for k in (0..l).rev() {
            let slot = self.layout[k];
            let mut gy = layers::avg_pool2_backward(&g);
            if self.arch.skip_connections {
                // decoder block l-1-k read this activation
                for skip in [&skip1, &skip2] {
                    for (a, b) in gy.data.iter_mut().zip(&skip[l - 1 - k].data) {
                        *a += b;
                    }
                }
            }
            layers::relu_backward_inplace(&trace.enc_relu[k], &mut gy);
            let want_input = k > 0 || need_input;
            let pg = grads.as_deref_mut().map(|gr| split_slot(gr, slot));
            match layers::conv3x3_backward(&trace.enc_inputs[k], slot.weights(&self.params), &gy, pg, want_input) {
                Some(gi) => g = gi,
                None => return None,
            }
        }
        Some(g)
    }

    fn decode_backward(
        &self,
        dec: &DecoderTrace,
        slots: &[ConvSlot],
        g_out: Act,
        mut grads: Option<&mut [f64]>,
    ) -> (Act, Vec<Act>) {
        let mut g = g_out;
        let mut input_grads: Vec<Option<Act>> = (0..slots.len()).map(|_| None).collect();
        for i in (0..slots.len()).rev() {
            let slot = slots[i];
            if i + 1 < slots.len() {
                if let Some(mask) = &dec.drop[i] {
                    for (gv, m) in g.data.iter_mut().zip(mask) {
                        *gv *= m;
                    }
                }
                layers::relu_backward_inplace(&dec.hidden[i], &mut g);
            }
            let pg = grads.as_deref_mut().map(|gr| split_slot(gr, slot));
            let gi = layers::conv3x3_backward(&dec.inputs[i], slot.weights(&self.params), &g, pg, true)
                .expect("input gradient requested");
            g = layers::upsample2_backward(&gi);
            if self.arch.skip_connections {
                input_grads[i] = Some(gi);
            }
        }
        let skips = input_grads.into_iter().flatten().collect();
        (g, skips)
    }
}

fn split_slot(grads: &mut [f64], slot: ConvSlot) -> (&mut [f64], &mut [f64]) {
    let (head, tail) = grads.split_at_mut(slot.bias);
    (&mut head[slot.weights..], &mut tail[..slot.cout])
}

/// Output of both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub density: Map,
    pub depth: Map,
}

impl Prediction {
    pub fn count(&self) -> f64 {
        self.density.sum()
    }
}

/// The two halved squared-error terms of a loss and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub density: f64,
    pub depth: f64,
    pub total: f64,
}

/// `L_d + λ·L_z` for a batch, with `L = 1/(2B) Σ ‖gt − est‖²` per head.
pub fn batch_loss(items: &[(&Prediction, &Map, &Map)], lambda: f64) -> Result<LossParts> {
    if items.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let b = items.len() as f64;
    let mut ld = 0.0;
    let mut lz = 0.0;
    for (pred, dgt, zgt) in items {
        ld += squared_error(&pred.density, dgt)?;
        lz += squared_error(&pred.depth, zgt)?;
    }
    let density = ld / (2.0 * b);
    let depth = lz / (2.0 * b);
    Ok(LossParts {
        density,
        depth,
        total: density + lambda * depth,
    })
}

/// Single-sample form of [`batch_loss`].
pub fn loss(prediction: &Prediction, density_gt: &Map, depth_gt: &Map, lambda: f64) -> Result<LossParts> {
    batch_loss(&[(prediction, density_gt, depth_gt)], lambda)
}

fn squared_error(a: &Map, b: &Map) -> Result<f64> {
    a.shape().ensure_eq(b.shape())?;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// A scalar objective over one image:
/// `density_weight·½‖D − D_ref‖² + depth_weight·½‖Z − Z_ref‖²`.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a> {
    pub density_ref: &'a Map,
    pub density_weight: f64,
    pub depth_ref: Option<&'a Map>,
    pub depth_weight: f64,
}

impl<'a> LossSpec<'a> {
    /// Density term only.
    pub fn density(density_ref: &'a Map) -> Self {
        Self {
            density_ref,
            density_weight: 1.0,
            depth_ref: None,
            depth_weight: 0.0,
        }
    }

    pub fn joint(density_ref: &'a Map, depth_ref: &'a Map, depth_weight: f64) -> Self {
        Self {
            density_ref,
            density_weight: 1.0,
            depth_ref: Some(depth_ref),
            depth_weight,
        }
    }

    /// Value, and the gradients with respect to both outputs.
    pub fn evaluate(&self, density: &Map, depth: &Map) -> Result<(LossParts, Map, Map)> {
        let dd = density.zip_map(self.density_ref, |e, r| e - r)?;
        let ld = 0.5 * dd.as_slice().iter().map(|v| v * v).sum::<f64>();
        let (lz, dz) = match self.depth_ref {
            Some(zr) => {
                let dz = depth.zip_map(zr, |e, r| e - r)?;
                (0.5 * dz.as_slice().iter().map(|v| v * v).sum::<f64>(), dz)
            }
            None => (0.0, Map::zeros(depth.shape())),
        };
        let parts = LossParts {
            density: ld,
            depth: lz,
            total: self.density_weight * ld + self.depth_weight * lz,
        };
        let (wd, wz) = (self.density_weight, self.depth_weight);
        Ok((parts, dd.map(|v| v * wd), dz.map(|v| v * wz)))
    }
}

/// Value of a [`LossSpec`] and its gradient with respect to the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub loss: LossParts,
    pub gradient: Image,
}

/// A differentiable image-to-(density, depth) regressor.
pub trait Regressor {
    fn input_shape(&self) -> Shape;

    fn predict(&self, image: &Image) -> Result<Prediction>;

    /// Exact gradient of the scalar described by `spec` w.r.t. the image
    /// intensities (0–255 scale, channel-interleaved like the image).
    fn input_gradient(&self, image: &Image, spec: &LossSpec<'_>) -> Result<InputGradient>;
}

impl Regressor for ModelParams {
    fn input_shape(&self) -> Shape {
        self.shape()
    }

    fn predict(&self, image: &Image) -> Result<Prediction> {
        self.forward(image)
    }

    fn input_gradient(&self, image: &Image, spec: &LossSpec<'_>) -> Result<InputGradient> {
        let net = self.unpacked();
        let x = self.input_activation(image)?;
        let trace = net.forward(x, None);
        let (loss, dd, dz) = spec.evaluate(&trace.density, &trace.depth)?;
        let gx = net
            .backward(&trace, dd, dz, None, true)
            .expect("input gradient requested");
        let (h, w) = (self.arch.height, self.arch.width);
        let mut grad = Image::zeros(self.shape());
        for (p, px) in grad.as_mut_slice().chunks_exact_mut(3).enumerate() {
            for ch in 0..3 {
                px[ch] = gx.data[ch * h * w + p] * INPUT_SCALE;
            }
        }
        Ok(InputGradient { loss, gradient: grad })
    }
}

/// Per-pixel linear regressor `D(p) = Σ_c w_d[p,c]·I[p,c]`, likewise for depth.
///
/// Its input gradient has the closed form `(D − D_ref)·w_d` (plus the depth
/// term), which makes it a reference model for checking the attack engine.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressor {
    shape: Shape,
    density_weights: Vec<f64>,
    depth_weights: Vec<f64>,
}

impl LinearRegressor {
    pub fn new(shape: Shape, density_weights: Vec<f64>) -> Result<Self> {
        let n = shape.area() * 3;
        if density_weights.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} weights"),
                actual: format!("{} weights", density_weights.len()),
            });
        }
        Ok(Self {
            shape,
            density_weights,
            depth_weights: vec![0.0; n],
        })
    }

    pub fn with_depth_weights(mut self, depth_weights: Vec<f64>) -> Result<Self> {
        if depth_weights.len() != self.density_weights.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights", self.density_weights.len()),
                actual: format!("{} weights", depth_weights.len()),
            });
        }
        self.depth_weights = depth_weights;
        Ok(self)
    }

    fn apply(&self, weights: &[f64], image: &Image) -> Map {
        let data = image
            .as_slice()
            .chunks_exact(3)
            .zip(weights.chunks_exact(3))
            .map(|(px, w)| px[0] * w[0] + px[1] * w[1] + px[2] * w[2])
            .collect();
        Map::from_vec(self.shape, data).expect("shape checked")
    }
}

impl Regressor for LinearRegressor {
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn predict(&self, image: &Image) -> Result<Prediction> {
        self.shape.ensure_eq(image.shape())?;
        Ok(Prediction {
            density: self.apply(&self.density_weights, image),
            depth: self.apply(&self.depth_weights, image),
        })
    }

    fn input_gradient(&self, image: &Image, spec: &LossSpec<'_>) -> Result<InputGradient> {
        let p = self.predict(image)?;
        let (loss, dd, dz) = spec.evaluate(&p.density, &p.depth)?;
        let mut grad = Image::zeros(self.shape);
        for (i, g) in grad.as_mut_slice().iter_mut().enumerate() {
            let px = i / 3;
            *g = dd.as_slice()[px] * self.density_weights[i] + dz.as_slice()[px] * self.depth_weights[i];
        }
        Ok(InputGradient { loss, gradient: grad })
    }
}

#[cfg(test)]
mod tests;
