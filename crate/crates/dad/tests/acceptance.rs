//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 4–8 and 10 share one desk benchmark run per seed.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dad::bench::{self, BenchConfig, SeedResult};
use dad::report;
use dad_core::attack::AttackFamily;
use dad_core::baselines::random_baseline;
use dad_core::metrics::{expected_random_iou, iou, miou, zmae};
use dad_core::model::gradcheck::check_input_gradient;
use dad_core::model::{train, Architecture, LinearRegressor, LossSpec, ModelParams, Regressor, TrainConfig};
use dad_core::scene::{generate_split, quarter_mask, SceneSpec};
use dad_core::{rng, Image, Map, MaskProvenance, Shape, TamperMask};
use rand::Rng as _;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

// Criterion 1.
const RANDOM_FRAMES: usize = 1000;
const RANDHALF_EXPECTED: f64 = 0.20;
const RANDQUARTER_EXPECTED: f64 = 0.14;
const RANDOM_TOLERANCE: f64 = 0.02;
// Criterion 2.
const BUDGET_EPSILONS: [f64; 3] = [1.0, 15.0, 35.0];
// Criterion 3.
const FD_STEP: f64 = 1e-3;
const FD_PIXELS: usize = 20;
const FD_REL_TOLERANCE: f64 = 1e-4;
const LINEAR_TOLERANCE: f64 = 1e-10;
// Criterion 4.
const DMAE_RATIO: f64 = 3.0;
// Criterion 5.
const OVER_TAU_FRACTION: f64 = 0.25;
// Criterion 6.
const RANDHALF_MIOU: f64 = 0.20;
const BAYES_MARGIN: f64 = 0.05;
// Criterion 8.
const RATE_AT_BETA_ONE: f64 = 0.99;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn report_dir() -> PathBuf {
    match std::env::var_os(dad::harness::OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join("acceptance"),
        None => PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"),
    }
}

fn random_baselines() -> Outcome {
    let shape = SceneSpec::default();
    let shape = Shape::new(shape.height, shape.width);
    let gt: Vec<TamperMask> = (0..RANDOM_FRAMES).map(|i| quarter_mask(shape, (i % 4) as u8).unwrap()).collect();
    let score = |fraction: f64, stream: u64| {
        let pred: Vec<TamperMask> = (0..RANDOM_FRAMES)
            .map(|i| random_baseline(shape, fraction, rng::derive(2024, stream, i as u64)).unwrap())
            .collect();
        miou(&pred, &gt, None).unwrap()
    };
    let half = score(0.5, 1);
    let quarter = score(0.25, 2);
    let pass = (half - RANDHALF_EXPECTED).abs() <= RANDOM_TOLERANCE && (quarter - RANDQUARTER_EXPECTED).abs() <= RANDOM_TOLERANCE;
    outcome(
        pass,
        format!(
            "RANDHALF {half:.4} (closed form {:.4}, want {RANDHALF_EXPECTED}±{RANDOM_TOLERANCE}), RANDQUARTER {quarter:.4} (closed form {:.4}, want {RANDQUARTER_EXPECTED}±{RANDOM_TOLERANCE}) over {RANDOM_FRAMES} frames",
            expected_random_iou(0.5),
            expected_random_iou(0.25)
        ),
    )
}

fn budget(results: &[SeedResult]) -> Outcome {
    let grid = &results[0].budget_checks;
    let expected = AttackFamily::ALL.len() * BUDGET_EPSILONS.len() * 2;
    let mut bad: Vec<String> = grid
        .iter()
        .filter(|b| b.violations > 0 || b.max_linf > b.config.epsilon)
        .map(|b| format!("{} ε={} ({} frames, max {})", b.config.label(), b.config.epsilon, b.violations, b.max_linf))
        .collect();
    let mut others = 0;
    for r in results {
        for row in &r.attacks {
            others += 1;
            if row.budget_violations > 0 {
                bad.push(format!("seed {} {}", r.seed, row.label));
            }
        }
        for p in r.lambda_sweep.iter().chain(&r.epsilon_sweep) {
            others += 1;
            if p.budget_violations > 0 {
                bad.push(format!("seed {} {}{} ε={} λ={}", r.seed, p.family, p.steps, p.epsilon, p.lambda_att));
            }
        }
    }
    let worst = grid.iter().map(|b| b.max_linf / b.config.epsilon).fold(0.0, f64::max);
    outcome(
        grid.len() == expected && bad.is_empty(),
        format!(
            "{} grid configurations (4 families × ε {{1,15,35}} × n {{1,19}}) on the trained seed-{} model plus {others} benchmark attacks; worst max|adv−input|/ε = {worst:.3}; violations: {}",
            grid.len(),
            results[0].seed,
            if bad.is_empty() { "none".to_string() } else { bad.join(", ") }
        ),
    )
}

fn random_image(shape: Shape, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    Image::from_vec(shape, (0..shape.area() * 3).map(|_| r.gen_range(0.0..255.0)).collect()).unwrap()
}

fn random_map(shape: Shape, seed: u64, scale: f64) -> Map {
    let mut r = rng::seeded(seed);
    Map::from_fn(shape, |_, _| r.gen_range(0.0..scale))
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    let mut failures = Vec::new();
    let mut check = |name: String, model: &ModelParams, image: &Image, spec: &LossSpec<'_>, seed: u64| {
        configs += 1;
        match check_input_gradient(model, image, spec, FD_PIXELS, FD_STEP, seed) {
            Ok(c) => {
                worst = worst.max(c.max_rel_error());
                if c.max_rel_error() >= FD_REL_TOLERANCE || c.nonzero() == 0 {
                    failures.push(format!("{name}: max rel error {:.2e}, {} nonzero", c.max_rel_error(), c.nonzero()));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    };

    // Untrained networks of several shapes under every loss an attack uses.
    let arches = [
        Architecture::new(8, 8).with_widths(&[4, 6], &[4]),
        Architecture::new(16, 16).with_widths(&[4, 6, 8], &[6, 4]),
        Architecture::new(16, 32).with_widths(&[8, 16, 32], &[16, 8]),
    ];
    for (k, arch) in arches.iter().enumerate() {
        let shape = Shape::new(arch.height, arch.width);
        let model = ModelParams::init(arch.clone(), 100 + k as u64).unwrap();
        let image = random_image(shape, 200 + k as u64);
        let p = model.forward(&image).unwrap();
        let dref = random_map(shape, 300 + k as u64, 0.05);
        let targeted = p.density.map(|v| v + 1.0);
        let specs = [
            ("density", LossSpec::density(&dref)),
            ("targeted", LossSpec::density(&targeted)),
            ("exposed λ=0.01", LossSpec { depth_weight: -0.01, ..LossSpec::joint(&dref, &p.depth, 0.0) }),
            ("joint λ=1", LossSpec::joint(&targeted, &p.depth, 1.0)),
        ];
        for (j, (name, spec)) in specs.iter().enumerate() {
            check(format!("{}×{} {name}", arch.height, arch.width), &model, &image, spec, (k * 10 + j) as u64);
        }
    }

    // A briefly trained desk-shaped model on a real frame.
    let cfg = BenchConfig::desk();
    let (train_set, test) = generate_split(9, 8, 1, &cfg.spec).unwrap();
    let arch = Architecture::new(cfg.spec.height, cfg.spec.width).with_widths(&cfg.widths.encoder, &cfg.widths.decoder);
    let mut model = ModelParams::init(arch, 9).unwrap();
    train(&mut model, &train_set, &TrainConfig { epochs: 5, seed: 9, ..cfg.train }).unwrap();
    let s = &test[0];
    let p = model.forward(&s.image).unwrap();
    let targeted = p.density.map(|v| v + 1.0);
    check("trained desk density".into(), &model, &s.image, &LossSpec::density(&s.density_gt), 91);
    check("trained desk joint".into(), &model, &s.image, &LossSpec::joint(&targeted, &p.depth, 0.01), 92);

    // Closed form for the per-pixel linear model.
    let shape = Shape::new(6, 5);
    let mut r = rng::seeded(5);
    let wd: Vec<f64> = (0..shape.area() * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
    let wz: Vec<f64> = (0..shape.area() * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
    let lin = LinearRegressor::new(shape, wd.clone()).unwrap().with_depth_weights(wz.clone()).unwrap();
    let img = random_image(shape, 6);
    let d = random_map(shape, 7, 10.0);
    let z = random_map(shape, 8, 10.0);
    let lambda = 0.37;
    let g = lin.input_gradient(&img, &LossSpec::joint(&d, &z, lambda)).unwrap();
    let x = img.as_slice();
    let mut linear_err: f64 = 0.0;
    for p in 0..shape.area() {
        let dp: f64 = (0..3).map(|c| wd[3 * p + c] * x[3 * p + c]).sum();
        let zp: f64 = (0..3).map(|c| wz[3 * p + c] * x[3 * p + c]).sum();
        for c in 0..3 {
            let expected = (dp - d.as_slice()[p]) * wd[3 * p + c] + lambda * (zp - z.as_slice()[p]) * wz[3 * p + c];
            linear_err = linear_err.max((g.gradient.as_slice()[3 * p + c] - expected).abs());
        }
    }
    if linear_err >= LINEAR_TOLERANCE {
        failures.push(format!("linear oracle error {linear_err:.2e}"));
    }
    outcome(
        failures.is_empty(),
        format!(
            "{configs} network configurations × {FD_PIXELS} pixels, h={FD_STEP}: worst rel error {worst:.2e} (< {FD_REL_TOLERANCE:.0e}); linear closed form max abs error {linear_err:.2e} (< {LINEAR_TOLERANCE:.0e}){}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join("; ")) }
        ),
    )
}

fn seed_mean(results: &[SeedResult], label: &str, f: impl Fn(&bench::AttackRow) -> f64) -> f64 {
    mean(results.iter().map(|r| f(r.attacks.iter().find(|a| a.label == label).expect(label))))
}

fn effectiveness(results: &[SeedResult]) -> Outcome {
    let clean = mean(results.iter().map(|r| r.clean.dmae));
    let mut parts = vec![format!("clean DMAE {clean:.3}")];
    let mut pass = true;
    for label in ["u19", "t19"] {
        let d = seed_mean(results, label, |a| a.dmae);
        pass &= d >= DMAE_RATIO * clean;
        parts.push(format!("{label} {d:.3} ({:.1}×)", d / clean));
    }
    outcome(pass, format!("{} (want ≥ {DMAE_RATIO}×, mean of {} seeds)", parts.join(", "), results.len()))
}

fn side_effect(results: &[SeedResult]) -> Outcome {
    let tau = mean(results.iter().map(|r| r.clean.tau));
    let mut pass = true;
    let mut parts = Vec::new();
    for label in ["u1", "u19", "t1", "t19"] {
        let over = seed_mean(results, label, |a| a.attacked_over_tau);
        let ind = seed_mean(results, label, |a| a.attacked_indicator);
        pass &= over >= OVER_TAU_FRACTION;
        parts.push(format!("{label} {:.1}% over τ (mean indicator {ind:.3})", 100.0 * over));
    }
    outcome(pass, format!("{}; mean τ {tau:.4}, want ≥ {:.0}% of attacked pixels", parts.join(", "), 100.0 * OVER_TAU_FRACTION))
}

fn dominance(results: &[SeedResult]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in &results[0].attacks {
        let ours = seed_mean(results, &a.label, |r| r.miou);
        let bayes = seed_mean(results, &a.label, |r| r.bayes_miou.unwrap_or(f64::NAN));
        let half = seed_mean(results, &a.label, |r| r.randhalf_miou);
        let ok = ours > RANDHALF_MIOU && ours - bayes >= BAYES_MARGIN;
        pass &= ok;
        parts.push(format!("{} {ours:.3} vs BAYES {bayes:.3} / RANDHALF {half:.3}{}", a.label, if ok { "" } else { " ✗" }));
    }
    outcome(pass, format!("{} (want > {RANDHALF_MIOU} and ≥ BAYES + {BAYES_MARGIN})", parts.join("; ")))
}

fn trade_off(results: &[SeedResult]) -> Outcome {
    let cfg = BenchConfig::desk();
    let mut pass = true;
    let mut parts = Vec::new();
    for fam in [AttackFamily::UE, AttackFamily::TE] {
        let at = |l: f64, f: &dyn Fn(&bench::SweepPoint) -> f64| {
            mean(results.iter().map(|r| f(r.lambda_sweep.iter().find(|p| p.family == fam && p.lambda_att == l).unwrap())))
        };
        let dmae: Vec<f64> = cfg.sweep_lambdas.iter().map(|&l| at(l, &|p| p.dmae)).collect();
        let m: Vec<f64> = cfg.sweep_lambdas.iter().map(|&l| at(l, &|p| p.miou)).collect();
        let dec = dmae.windows(2).all(|w| w[1] < w[0]);
        let noninc = m.windows(2).all(|w| w[1] <= w[0]);
        pass &= dec && noninc;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" → ");
        parts.push(format!("{fam}: DMAE {} ({}), mIoU {} ({})", fmt(&dmae), if dec { "decreasing" } else { "NOT decreasing" }, fmt(&m), if noninc { "non-increasing" } else { "INCREASES" }));
    }
    outcome(pass, format!("λ_att {:?}: {}", cfg.sweep_lambdas, parts.join("; ")))
}

fn reference_tampering(results: &[SeedResult]) -> Outcome {
    let betas: Vec<f64> = results[0].reference_tampering.iter().map(|r| r.beta).collect();
    let mut pass = true;
    let mut per_seed = Vec::new();
    for r in results {
        let rates: Vec<f64> = r.reference_tampering.iter().map(|x| x.rate).collect();
        let mono = rates.windows(2).all(|w| w[1] >= w[0]);
        let top = *rates.last().unwrap();
        pass &= mono && top >= RATE_AT_BETA_ONE && betas.last() == Some(&1.0);
        if !mono {
            per_seed.push(format!("seed {} not monotone {rates:?}", r.seed));
        }
    }
    let avg: Vec<f64> = (0..betas.len()).map(|i| mean(results.iter().map(|r| r.reference_tampering[i].rate))).collect();
    let at = |b: f64| betas.iter().position(|&x| x == b).map(|i| avg[i]).unwrap_or(f64::NAN);
    let held: Vec<f64> = (0..betas.len()).map(|i| mean(results.iter().map(|r| r.reference_tampering[i].held_out_rate))).collect();
    outcome(
        pass,
        format!(
            "rates over β {betas:?} = [{}] (mean of {} seeds, monotone on every seed: {}); β=1 → {:.4} (want ≥ {RATE_AT_BETA_ONE}); β=0.01 → {:.4} (reported; paper: over 0.90); held-out test maps [{}]{}",
            avg.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "),
            results.len(),
            per_seed.is_empty(),
            at(1.0),
            at(0.01),
            held.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "),
            if per_seed.is_empty() { String::new() } else { format!("; {}", per_seed.join("; ")) }
        ),
    )
}

fn metric_identities(results: &[SeedResult]) -> Outcome {
    let mut failures = Vec::new();
    let mut sets = 0;
    for r in results {
        sets += 1;
        if r.clean.dmae > r.clean.rmse {
            failures.push(format!("seed {} clean DMAE > RMSE", r.seed));
        }
        for a in &r.attacks {
            sets += 1;
            if a.dmae > a.rmse {
                failures.push(format!("seed {} {} DMAE > RMSE", r.seed, a.label));
            }
            let mut ious = vec![a.miou, a.randhalf_miou, a.randquarter_miou];
            ious.extend(a.bayes_miou);
            ious.extend(&a.fraction_miou);
            if ious.iter().any(|v| !(0.0..=1.0).contains(v)) {
                failures.push(format!("seed {} {} mIoU outside [0,1]", r.seed, a.label));
            }
        }
    }

    // Symmetry, bounds and identity of IoU on random mask pairs, including empty ones.
    let mut r = rng::seeded(77);
    let mut pairs = 0;
    for _ in 0..500 {
        let shape = Shape::new(r.gen_range(1..20), r.gen_range(1..20));
        let density_a: f64 = r.gen_range(0.0..1.0);
        let density_b: f64 = r.gen_range(0.0..1.0);
        let a = TamperMask::from_fn(shape, MaskProvenance::Predicted, |_, _| r.gen_bool(density_a));
        let b = TamperMask::from_fn(shape, MaskProvenance::GroundTruth, |_, _| r.gen_bool(density_b));
        let (ab, ba) = (iou(&a, &b, None).unwrap(), iou(&b, &a, None).unwrap());
        pairs += 1;
        if ab != ba || !(0.0..=1.0).contains(&ab) || iou(&a, &a, None).unwrap() != 1.0 {
            failures.push(format!("IoU identity broken on {shape}"));
            break;
        }
    }

    // ZMAE ignores every pixel outside the tamper mask.
    let spec = BenchConfig::desk().spec;
    let (_, test) = generate_split(5, 1, 8, &spec).unwrap();
    let refs: Vec<Map> = test.iter().map(|s| s.depth_gt.clone()).collect();
    let est: Vec<Map> = refs.iter().enumerate().map(|(i, z)| z.map(|v| v * (1.0 + 0.01 * i as f64))).collect();
    let masks: Vec<TamperMask> = test.iter().enumerate().map(|(i, s)| quarter_mask(s.shape(), (i % 4) as u8).unwrap()).collect();
    let base = zmae(&est, &refs, &masks).unwrap().value;
    let noisy: Vec<Map> = est
        .iter()
        .zip(&masks)
        .map(|(z, m)| {
            let mut z = z.clone();
            let shape = z.shape();
            for row in 0..shape.height {
                for col in 0..shape.width {
                    if !m.get(row, col) {
                        z.set(row, col, r.gen_range(0.0..1e6));
                    }
                }
            }
            z
        })
        .collect();
    let moved = zmae(&noisy, &refs, &masks).unwrap().value;
    if base != moved {
        failures.push(format!("ZMAE changed from {base} to {moved} when only untampered pixels moved"));
    }
    outcome(
        failures.is_empty(),
        format!(
            "DMAE ≤ RMSE and mIoU ∈ [0,1] on {sets} evaluated sets; IoU symmetric/bounded/reflexive on {pairs} random pairs; ZMAE unchanged ({base:.6}) under arbitrary untampered-pixel edits{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn threshold_report(results: &[SeedResult]) -> Outcome {
    let runs: Vec<_> = results.iter().map(SeedResult::summary).collect();
    let (a, b) = match (report::render(&runs), report::render(&runs)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("rendering failed: {e:#}")),
    };
    let dir = report_dir();
    let written = report::emit_report(&runs, &dir);
    let raw = serde_json::to_vec_pretty(results).map(|j| std::fs::write(dir.join("seed-results.json"), j));
    let curves = String::from_utf8_lossy(&a["curves.csv"]).into_owned();
    let cfg = BenchConfig::desk();
    let mut missing = Vec::new();
    let mut best = Vec::new();
    for row in &results[0].attacks {
        let mut top = (f64::NAN, f64::NEG_INFINITY);
        for &f in &cfg.sweep_fractions {
            let x = bench::percent(f);
            let prefix = format!("threshold_percent,miou,{},{x},", row.label);
            match curves.lines().find(|l| l.starts_with(&prefix)) {
                Some(line) => {
                    let m: f64 = line.split(',').nth(5).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
                    if m > top.1 {
                        top = (x, m);
                    }
                }
                None => missing.push(format!("{} @{x}%", row.label)),
            }
        }
        best.push(format!("{} {}%", row.label, top.0));
    }
    let pass = a == b && missing.is_empty() && written.is_ok() && matches!(raw, Ok(Ok(())));
    outcome(
        pass,
        format!(
            "{{1,3,5,10}}% sweep for {} attack configurations, byte-identical on re-render: {}; best threshold per configuration (reported): {}; written to {}{}",
            results[0].attacks.len(),
            a == b,
            best.join(", "),
            dir.display(),
            if missing.is_empty() { String::new() } else { format!("; missing {}", missing.join(", ")) }
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut lines: Vec<(usize, &str, Outcome)> = Vec::new();
    let record = |n: usize, name: &'static str, o: Outcome, lines: &mut Vec<(usize, &str, Outcome)>| {
        println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((n, name, o));
    };
    println!("acceptance: {} seeds {SEEDS:?}", SEEDS.len());
    record(1, "analytic random baselines", random_baselines(), &mut lines);
    record(3, "gradient oracle", gradients(), &mut lines);

    let mut results = Vec::new();
    for (i, &seed) in SEEDS.iter().enumerate() {
        let mut cfg = BenchConfig::desk();
        if i == 0 {
            cfg.budget_epsilons = BUDGET_EPSILONS.to_vec();
        }
        let t = Instant::now();
        match bench::run_seed(&cfg, seed, &mut |m| eprintln!("  {m}")) {
            Ok(r) => results.push(r),
            Err(e) => {
                println!("criterion  4–10 [FAIL] benchmark seed {seed} failed: {e:#}");
                return ExitCode::FAILURE;
            }
        }
        eprintln!("  seed {seed} finished in {:.0}s", t.elapsed().as_secs_f64());
    }
    record(2, "perturbation budget", budget(&results), &mut lines);
    record(4, "attack effectiveness", effectiveness(&results), &mut lines);
    record(5, "depth side-effect", side_effect(&results), &mut lines);
    record(6, "detector dominance", dominance(&results), &mut lines);
    record(7, "exposed-attack trade-off", trade_off(&results), &mut lines);
    record(8, "reference tampering", reference_tampering(&results), &mut lines);
    record(9, "metric identities", metric_identities(&results), &mut lines);
    record(10, "threshold sweep report", threshold_report(&results), &mut lines);

    lines.sort_by_key(|l| l.0);
    println!("\nsummary ({:.0}s):", start.elapsed().as_secs_f64());
    for (n, name, o) in &lines {
        println!("  {n:>2} {} {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    if lines.iter().all(|l| l.2.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
