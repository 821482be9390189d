use super::*;
use crate::scene::{generate_split, DensityConfig, SceneSpec};

fn small_arch(h: usize, w: usize) -> Architecture {
    Architecture::new(h, w).with_widths(&[4, 6, 8], &[6, 4])
}

fn random_image(shape: Shape, seed: u64) -> Image {
    let mut rng = rng::seeded(seed);
    let data = (0..shape.area() * 3).map(|_| rng.gen_range(0.0..255.0)).collect();
    Image::from_vec(shape, data).unwrap()
}

fn random_map(shape: Shape, seed: u64, scale: f64) -> Map {
    let mut rng = rng::seeded(seed);
    Map::from_fn(shape, |_, _| rng.gen_range(0.0..scale))
}

fn check_gradient(model: &ModelParams, image: &Image, spec: &LossSpec<'_>, seed: u64) {
    let c = gradcheck::check_input_gradient(model, image, spec, 20, 1e-3, seed).unwrap();
    for s in &c.samples {
        assert!(s.rel_error < 1e-4, "{s:?}");
    }
    assert!(c.nonzero() > 0, "all sampled gradients vanished");
}

#[test]
fn architecture_validation() {
    assert!(Architecture::new(64, 64).validate().is_ok());
    assert!(Architecture::new(60, 64).validate().is_err());
    assert!(Architecture::new(64, 64).with_widths(&[4, 8], &[4, 2]).validate().is_err());
    let a = Architecture::new(8, 8);
    // rgb + 2 coordinate planes -> 16 -> 32 -> 64, two decoders 64->32->16->1
    let convs = [(5, 16), (16, 32), (32, 64), (64, 32), (32, 16), (16, 1)];
    let mut expected: usize = convs[..3].iter().map(|(i, o)| i * o * 9 + o).sum();
    expected += 2 * convs[3..].iter().map(|(i, o)| i * o * 9 + o).sum::<usize>();
    assert_eq!(a.parameter_count(), expected);
    let plain = Architecture::new(8, 8).without_extras();
    assert_eq!(plain.parameter_count(), expected - 2 * 9 * 16);
    // skips need mirrored widths
    assert!(Architecture::new(64, 64).with_widths(&[8, 16, 32], &[8, 8]).validate().is_err());
    assert!(Architecture::new(64, 64).with_widths(&[8, 16, 32], &[8, 8]).without_extras().validate().is_ok());
}

#[test]
fn zero_output_layer_gives_zero_density() {
    let mut params = ModelParams::init(small_arch(16, 16), 3).unwrap();
    params.zero_density_output();
    let p = params.forward(&Image::zeros(Shape::new(16, 16))).unwrap();
    assert!(p.density.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic_and_checks_shape() {
    let params = ModelParams::init(small_arch(16, 16), 1).unwrap();
    let img = random_image(Shape::new(16, 16), 9);
    assert_eq!(params.forward(&img).unwrap(), params.forward(&img).unwrap());
    assert!(params.forward(&Image::zeros(Shape::new(8, 16))).is_err());
    let p = params.forward(&img).unwrap();
    assert!(p.density.as_slice().iter().all(|&v| v >= 0.0));
}

#[test]
fn loss_examples() {
    let s = Shape::new(1, 1);
    let pred = Prediction {
        density: Map::filled(s, 0.0),
        depth: Map::filled(s, 0.3),
    };
    let dgt = Map::filled(s, 1.0);
    let zgt = Map::filled(s, 0.3);
    let l = loss(&pred, &dgt, &zgt, 0.01).unwrap();
    assert_eq!(l.total, 0.5);
    let exact = loss(&Prediction { density: dgt.clone(), depth: zgt.clone() }, &dgt, &zgt, 0.7).unwrap();
    assert_eq!(exact.total, 0.0);
    let zgt2 = Map::filled(s, 0.5);
    assert_eq!(loss(&pred, &dgt, &zgt2, 0.0).unwrap().total, 0.5);
}

#[test]
fn loss_is_affine_in_lambda() {
    let s = Shape::new(4, 5);
    let pred = Prediction {
        density: random_map(s, 1, 1.0),
        depth: random_map(s, 2, 1.0),
    };
    let dgt = random_map(s, 3, 1.0);
    let zgt = random_map(s, 4, 1.0);
    let base = loss(&pred, &dgt, &zgt, 0.0).unwrap();
    for lambda in [0.01, 0.5, 2.0, 100.0] {
        let l = loss(&pred, &dgt, &zgt, lambda).unwrap();
        let diff = l.total - base.total;
        assert!((diff - lambda * l.depth).abs() <= 1e-12 * l.total.abs().max(1.0));
        assert_eq!(l.density, base.density);
        assert_eq!(l.depth, base.depth);
    }
}

#[test]
fn batch_loss_halves_mean_per_sample() {
    let s = Shape::new(1, 2);
    let a = Prediction { density: Map::filled(s, 1.0), depth: Map::filled(s, 0.0) };
    let b = Prediction { density: Map::filled(s, 3.0), depth: Map::filled(s, 0.0) };
    let z = Map::zeros(s);
    // ||1||^2 = 2, ||3||^2 = 18 -> (2 + 18) / (2*2) = 5
    let l = batch_loss(&[(&a, &z, &z), (&b, &z, &z)], 1.0).unwrap();
    assert_eq!(l.density, 5.0);
    assert!(batch_loss(&[], 1.0).is_err());
}

#[test]
fn input_gradient_matches_finite_differences() {
    let shape = Shape::new(8, 8);
    for seed in 0..4u64 {
        let arch = if seed % 2 == 0 { small_arch(8, 8) } else { small_arch(8, 8).without_extras() };
        let params = ModelParams::init(arch, 100 + seed).unwrap();
        let img = random_image(shape, 200 + seed);
        // references near the prediction keep the loss small relative to its
        // slope, so the differences stay far above roundoff
        let p = params.forward(&img).unwrap();
        let dref = p.density.zip_map(&random_map(shape, 300 + seed, 1e-3), |a, b| a + b - 5e-4).unwrap();
        let zref = p.depth.zip_map(&random_map(shape, 400 + seed, 0.02), |a, b| a + b - 0.01).unwrap();
        check_gradient(&params, &img, &LossSpec::density(&dref), seed);
        check_gradient(&params, &img, &LossSpec::joint(&dref, &zref, -0.01), seed + 10);
        check_gradient(&params, &img, &LossSpec::joint(&dref, &zref, 5.0), seed + 20);
    }
}

#[test]
fn zeroed_encoder_output_decouples_both_heads() {
    let shape = Shape::new(8, 8);
    let mut params = ModelParams::init(small_arch(8, 8), 7).unwrap();
    params.zero_encoder_weights();
    let img = random_image(shape, 1);
    let dref = random_map(shape, 2, 0.05);
    let zref = random_map(shape, 3, 1.0);
    let g = params.input_gradient(&img, &LossSpec::joint(&dref, &zref, 1.0)).unwrap();
    assert!(g.gradient.as_slice().iter().all(|&v| v == 0.0));
    let other = random_image(shape, 99);
    assert_eq!(params.forward(&img).unwrap(), params.forward(&other).unwrap());
}

#[test]
fn linear_regressor_gradient_is_closed_form() {
    let shape = Shape::new(3, 4);
    let mut rng = rng::seeded(5);
    let weights: Vec<f64> = (0..shape.area() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let model = LinearRegressor::new(shape, weights.clone()).unwrap();
    let img = random_image(shape, 6);
    let d = random_map(shape, 7, 10.0);
    let g = model.input_gradient(&img, &LossSpec::density(&d)).unwrap();
    for p in 0..shape.area() {
        let wi: f64 = (0..3).map(|c| weights[3 * p + c] * img.as_slice()[3 * p + c]).sum();
        for c in 0..3 {
            let expected = (wi - d.as_slice()[p]) * weights[3 * p + c];
            assert!((g.gradient.as_slice()[3 * p + c] - expected).abs() < 1e-10);
        }
    }
}

fn tiny_dataset() -> Vec<crate::scene::SceneSample> {
    let spec = SceneSpec {
        width: 16,
        height: 16,
        count_min: 1,
        count_max: 3,
        density: DensityConfig::with_sigma(1.0),
        ..SceneSpec::default()
    };
    generate_split(11, 4, 0, &spec).unwrap().0
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let data = tiny_dataset();
    let mut params = ModelParams::init(small_arch(16, 16), 2).unwrap();
    let before = params.weights.clone();
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        batch_size: 1,
        ..TrainConfig::default()
    };
    train(&mut params, &data[..1], &cfg).unwrap();
    assert_eq!(params.weights, before);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = tiny_dataset();
    let cfg = TrainConfig {
        epochs: 6,
        learning_rate: 2e-3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut a = ModelParams::init(small_arch(16, 16), 2).unwrap();
    let mut b = a.clone();
    let log_a = train(&mut a, &data, &cfg).unwrap();
    let log_b = train(&mut b, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert!(log_a.final_density_loss() < log_a.initial.loss_density);
    assert_eq!(a.lambda, 0.01);
}

#[test]
fn training_rejects_empty_split_and_divergence() {
    let mut params = ModelParams::init(small_arch(16, 16), 2).unwrap();
    assert_eq!(train(&mut params, &[], &TrainConfig::default()).unwrap_err(), Error::EmptyTrainingSet);
    let data = tiny_dataset();
    let cfg = TrainConfig {
        epochs: 50,
        learning_rate: 1e12,
        optimizer: Optimizer::sgd(),
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut params, &data, &cfg), Err(Error::Diverged { .. })));
}

#[test]
fn dropout_rate_zero_is_deterministic() {
    let params = ModelParams::init(small_arch(8, 8), 4).unwrap();
    let img = random_image(Shape::new(8, 8), 4);
    let mut r = rng::seeded(0);
    let a = params.forward_stochastic(&img, 0.0, &mut r).unwrap();
    assert_eq!(a, params.forward(&img).unwrap());
    assert!(params.forward_stochastic(&img, 1.0, &mut r).is_err());
    let b = params.forward_stochastic(&img, 0.5, &mut r).unwrap();
    assert_ne!(b, a);
}
