//! The desk-scale benchmark: every measurement behind the summary tables,
//! computed in memory for one seed at a time.

use anyhow::{Context, Result};
use dad_core::attack::{masked_attack, schedule_steps, AttackConfig, AttackFamily, AttackReference};
use dad_core::baselines::{self, UncertaintyMap};
use dad_core::defense::{
    calibrate_threshold, detect_with_reference, fit_depth_stats, tamper_reference, CalibrationFrame,
    DetectionThreshold, GroundTruthProvider, PostFilter,
};
use dad_core::metrics::{self, count_errors, count_errors_from_totals, miou, zmae};
use dad_core::model::{train, ModelParams, Prediction, TrainConfig};
use dad_core::rng;
use dad_core::scene::{generate_split, quarter_mask, DensityConfig, SceneSample, SceneSpec};
use dad_core::{Image, Map, TamperMask};
use serde::{Deserialize, Serialize};

use crate::artifacts::DensityReference;
use crate::commands::Widths;
use crate::report::{ConfigMetrics, CurvePoint, RunSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesConfig {
    /// Dropout rate the baseline model is trained with.
    pub train_dropout: f64,
    pub drop_rate: f64,
    pub passes: usize,
    pub granularity: usize,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            train_dropout: baselines::DEFAULT_DROP_RATE,
            drop_rate: baselines::DEFAULT_DROP_RATE,
            passes: baselines::DEFAULT_PASSES,
            granularity: baselines::DEFAULT_GRANULARITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub widths: Widths,
    pub train: TrainConfig,
    pub threshold_fraction: f64,
    pub reference: DensityReference,
    pub attacks: Vec<AttackConfig>,
    /// `None` skips the Bayesian baseline.
    pub bayes: Option<BayesConfig>,
    pub sweep_fractions: Vec<f64>,
    pub sweep_lambdas: Vec<f64>,
    pub sweep_epsilons: Vec<f64>,
    pub betas: Vec<f64>,
    /// Also attack every family at each of these budgets with one and
    /// nineteen steps, recording the budget check (empty skips it).
    pub budget_epsilons: Vec<f64>,
}

impl BenchConfig {
    /// 64 training and 16 test frames at 64×64, the eight attack
    /// configurations at ε = 15, and all sweeps.
    pub fn desk() -> Self {
        let spec = SceneSpec {
            width: 64,
            height: 64,
            density: DensityConfig::with_sigma(2.0),
            ..SceneSpec::default()
        };
        Self {
            spec,
            n_train: 64,
            n_test: 16,
            widths: Widths {
                encoder: vec![8, 16, 32],
                decoder: vec![16, 8],
            },
            train: TrainConfig::default(),
            threshold_fraction: dad_core::defense::DEFAULT_THRESHOLD_FRACTION,
            reference: DensityReference::GroundTruth,
            attacks: default_attacks(),
            bayes: Some(BayesConfig::default()),
            sweep_fractions: vec![0.01, 0.03, 0.05, 0.10],
            sweep_lambdas: vec![0.01, 1.0, 100.0],
            sweep_epsilons: vec![1.0, 15.0, 35.0],
            betas: vec![0.0, 0.001, 0.01, 0.1, 1.0],
            budget_epsilons: Vec::new(),
        }
    }
}

/// Every family with one and nineteen steps at ε = 15.
pub fn default_attacks() -> Vec<AttackConfig> {
    AttackFamily::ALL
        .iter()
        .flat_map(|&f| [1, 19].map(|n| AttackConfig::new(f, 15.0, n)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRow {
    pub dmae: f64,
    pub rmse: f64,
    /// Depth error over the quadrants that the attacks later target.
    pub zmae: f64,
    /// DMAE of always predicting the mean training count.
    pub mean_count_dmae: f64,
    pub calibration_max: f64,
    pub tau: f64,
    /// Flagged fraction of clean test pixels.
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub label: String,
    pub config: AttackConfig,
    pub dmae: f64,
    pub rmse: f64,
    pub zmae: f64,
    pub miou: f64,
    /// Fraction of attacked pixels whose indicator exceeds τ, frame mean.
    pub attacked_over_tau: f64,
    /// Mean indicator over attacked pixels, frame mean.
    pub attacked_indicator: f64,
    /// Flagged fraction of the untouched quadrants, frame mean.
    pub outside_flagged: f64,
    pub bayes_miou: Option<f64>,
    pub randhalf_miou: f64,
    pub randquarter_miou: f64,
    /// Frames whose density moved closer to the target (targeted families).
    pub target_closer: Option<f64>,
    /// Frames whose perturbation left the budget or the mask (must be 0).
    pub budget_violations: usize,
    /// Per-threshold-fraction mIoU, aligned with `sweep_fractions`.
    pub fraction_miou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub steps: usize,
    pub lambda_att: f64,
    pub dmae: f64,
    pub miou: f64,
    pub budget_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub config: AttackConfig,
    pub frames: usize,
    /// Frames whose perturbation left the budget or the mask.
    pub violations: usize,
    /// Largest `|adv − input|` over all frames.
    pub max_linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefRow {
    pub beta: f64,
    /// Over the fixed-camera sequence the statistics were fitted on.
    pub rate: f64,
    /// Over held-out test maps, which may already sit outside [min, max].
    pub held_out_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub initial_density_loss: f64,
    pub final_density_loss: f64,
    pub clean: CleanRow,
    pub attacks: Vec<AttackRow>,
    pub sweep_fractions: Vec<f64>,
    pub lambda_sweep: Vec<SweepPoint>,
    pub epsilon_sweep: Vec<SweepPoint>,
    pub reference_tampering: Vec<RefRow>,
    pub budget_checks: Vec<BudgetCheck>,
}

/// Per-frame outcome of one attack on the detector's model.
struct Attacked {
    masks: Vec<TamperMask>,
    preds: Vec<Prediction>,
    violations: usize,
    max_linf: f64,
    target_closer: usize,
}

struct Ctx<'a> {
    cfg: &'a BenchConfig,
    model: &'a ModelParams,
    test: &'a [SceneSample],
    clean: &'a [Prediction],
    threshold: DetectionThreshold,
}

impl Ctx<'_> {
    fn reference(&self, s: &SceneSample, clean: &Prediction, c: &AttackConfig) -> AttackReference {
        let d = match self.cfg.reference {
            DensityReference::GroundTruth => &s.density_gt,
            DensityReference::Clean => &clean.density,
        };
        AttackReference::for_family(c.family, c.target_rule, d, &clean.density, &clean.depth)
    }

    fn attack(&self, c: &AttackConfig) -> Result<Attacked> {
        let mut out = Attacked {
            masks: Vec::new(),
            preds: Vec::new(),
            violations: 0,
            max_linf: 0.0,
            target_closer: 0,
        };
        for (i, (s, clean)) in self.test.iter().zip(self.clean).enumerate() {
            let mask = quarter_mask(s.shape(), (i % 4) as u8)?;
            let r = self.reference(s, clean, c);
            let adv = masked_attack(self.model, &s.image, &r, *c, mask.clone())?;
            if !within_budget(&s.image, &adv.adv_image, &mask, c.epsilon) {
                out.violations += 1;
            }
            out.max_linf = out.max_linf.max(adv.adv_image.linf_distance(&s.image)?);
            let p = self.model.forward(&adv.adv_image.quantized())?;
            if c.family.is_targeted() && sq_dist(&p.density, &r.density) < sq_dist(&clean.density, &r.density) {
                out.target_closer += 1;
            }
            out.masks.push(mask);
            out.preds.push(p);
        }
        Ok(out)
    }

    fn counts(&self) -> Vec<f64> {
        self.test.iter().map(|s| s.count() as f64).collect()
    }

    fn detect_miou(&self, a: &Attacked, threshold: &DetectionThreshold) -> Result<f64> {
        let preds = a
            .preds
            .iter()
            .zip(self.test)
            .map(|(p, s)| Ok(detect_with_reference(&p.depth, &s.depth_gt, threshold, PostFilter::None)?.mask))
            .collect::<Result<Vec<_>>>()?;
        Ok(miou(&preds, &a.masks, None)?)
    }

    fn point(&self, c: &AttackConfig) -> Result<SweepPoint> {
        let a = self.attack(c)?;
        let dens: Vec<Map> = a.preds.iter().map(|p| p.density.clone()).collect();
        Ok(SweepPoint {
            family: c.family,
            epsilon: c.epsilon,
            steps: c.steps,
            lambda_att: c.lambda_att,
            dmae: count_errors(&dens, &self.counts())?.dmae,
            miou: self.detect_miou(&a, &self.threshold)?,
            budget_violations: a.violations,
        })
    }
}

/// Exact check: `|adv − clean| ≤ ε` everywhere, zero outside `mask`, and a
/// valid intensity range.
pub fn within_budget(clean: &Image, adv: &Image, mask: &TamperMask, epsilon: f64) -> bool {
    clean
        .as_slice()
        .iter()
        .zip(adv.as_slice())
        .enumerate()
        .all(|(i, (&c, &a))| {
            let d = (a - c).abs();
            let p = i / 3;
            let inside = mask.flags()[p];
            (0.0..=255.0).contains(&a) && d <= epsilon && (inside || d == 0.0)
        })
}

fn sq_dist(a: &Map, b: &Map) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Runs the benchmark for one seed. `log` receives progress lines.
pub fn run_seed(cfg: &BenchConfig, seed: u64, log: &mut dyn FnMut(&str)) -> Result<SeedResult> {
    let spec = SceneSpec {
        camera_seed: seed,
        ..cfg.spec
    };
    let (train_set, test) = generate_split(seed, cfg.n_train, cfg.n_test, &spec)?;
    let arch = dad_core::model::Architecture::new(spec.height, spec.width).with_widths(&cfg.widths.encoder, &cfg.widths.decoder);
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let mut model = ModelParams::init(arch.clone(), seed)?;
    let tlog = train(&mut model, &train_set, &train_cfg).context("training the detector model")?;
    log(&format!("seed {seed}: trained, density loss {:.5} -> {:.5}", tlog.initial.loss_density, tlog.final_density_loss()));

    let frames: Vec<CalibrationFrame<'_>> = train_set
        .iter()
        .map(|s| CalibrationFrame {
            id: "",
            image: &s.image,
            depth_gt: Some(&s.depth_gt),
        })
        .collect();
    let threshold = calibrate_threshold(&model, &frames, &GroundTruthProvider, cfg.threshold_fraction)?;
    let clean: Vec<Prediction> = test.iter().map(|s| model.forward(&s.image)).collect::<Result<_, _>>()?;
    let counts: Vec<f64> = test.iter().map(|s| s.count() as f64).collect();
    let quads: Vec<TamperMask> = test
        .iter()
        .enumerate()
        .map(|(i, s)| quarter_mask(s.shape(), (i % 4) as u8))
        .collect::<Result<_, _>>()?;
    let clean_dens: Vec<Map> = clean.iter().map(|p| p.density.clone()).collect();
    let ce = count_errors(&clean_dens, &counts)?;
    let train_mean = mean(train_set.iter().map(|s| s.count() as f64));
    let mut fp = Vec::new();
    for (s, p) in test.iter().zip(&clean) {
        let d = detect_with_reference(&p.depth, &s.depth_gt, &threshold, PostFilter::None)?;
        fp.push(d.mask.count() as f64 / s.shape().area() as f64);
    }
    let clean_row = CleanRow {
        dmae: ce.dmae,
        rmse: ce.rmse,
        zmae: zmae(
            &clean.iter().map(|p| p.depth.clone()).collect::<Vec<_>>(),
            &test.iter().map(|s| s.depth_gt.clone()).collect::<Vec<_>>(),
            &quads,
        )?
        .value,
        mean_count_dmae: count_errors_from_totals(&vec![train_mean; counts.len()], &counts)?.dmae,
        calibration_max: threshold.calibration_max,
        tau: threshold.tau,
        false_positive_rate: mean(fp),
    };

    let bayes_model = match &cfg.bayes {
        Some(b) => {
            let bseed = rng::derive(seed, 0xbae5, 0);
            let mut m = ModelParams::init(arch, bseed)?;
            let c = TrainConfig {
                seed: bseed,
                dropout: b.train_dropout,
                ..cfg.train
            };
            train(&mut m, &train_set, &c).context("training the dropout baseline")?;
            log(&format!("seed {seed}: trained dropout baseline"));
            Some(m)
        }
        None => None,
    };

    let ctx = Ctx {
        cfg,
        model: &model,
        test: &test,
        clean: &clean,
        threshold,
    };
    let mut rows = Vec::new();
    for c in &cfg.attacks {
        rows.push(attack_row(&ctx, c, bayes_model.as_ref(), seed)?);
        log(&format!("seed {seed}: {} done", c.label()));
    }

    let find = |c: &AttackConfig| rows.iter().find(|r| r.config == *c);
    let mut lambda_sweep = Vec::new();
    for fam in [AttackFamily::UE, AttackFamily::TE] {
        for &l in &cfg.sweep_lambdas {
            let c = AttackConfig {
                lambda_att: l,
                ..AttackConfig::new(fam, 15.0, 19)
            };
            lambda_sweep.push(match find(&c) {
                Some(r) => point_from_row(r),
                None => ctx.point(&c)?,
            });
        }
    }
    log(&format!("seed {seed}: attacker-lambda sweep done"));
    let mut epsilon_sweep = Vec::new();
    for fam in AttackFamily::ALL {
        for &e in &cfg.sweep_epsilons {
            let c = AttackConfig::new(fam, e, schedule_steps(e));
            epsilon_sweep.push(match find(&c) {
                Some(r) => point_from_row(r),
                None => ctx.point(&c)?,
            });
        }
    }
    log(&format!("seed {seed}: epsilon sweep done"));

    let mut budget_checks = Vec::new();
    for fam in AttackFamily::ALL {
        for &e in &cfg.budget_epsilons {
            for n in [1, 19] {
                let c = AttackConfig::new(fam, e, n);
                let a = ctx.attack(&c)?;
                budget_checks.push(BudgetCheck {
                    config: c,
                    frames: a.masks.len(),
                    violations: a.violations,
                    max_linf: a.max_linf,
                });
            }
        }
    }
    if !budget_checks.is_empty() {
        log(&format!("seed {seed}: budget grid done"));
    }

    let stats = fit_depth_stats(&train_set.iter().map(|s| s.depth_gt.clone()).collect::<Vec<_>>())?;
    let mut reference_tampering = Vec::new();
    let rate = |maps: &[SceneSample], beta: f64| -> Result<f64> {
        let (mut hit, mut total) = (0.0, 0.0);
        for s in maps {
            let t = tamper_reference(&s.depth_gt, beta, &stats.mean)?;
            let r = dad_core::defense::detect_reference_tampering(&t, &stats, None)?;
            hit += r.mask.count() as f64;
            total += s.shape().area() as f64;
        }
        Ok(hit / total)
    };
    for &beta in &cfg.betas {
        reference_tampering.push(RefRow { beta, rate: rate(&train_set, beta)?, held_out_rate: rate(&test, beta)? });
    }

    Ok(SeedResult {
        seed,
        initial_density_loss: tlog.initial.loss_density,
        final_density_loss: tlog.final_density_loss(),
        clean: clean_row,
        attacks: rows,
        sweep_fractions: cfg.sweep_fractions.clone(),
        lambda_sweep,
        epsilon_sweep,
        reference_tampering,
        budget_checks,
    })
}

/// Fraction as a percentage without binary noise (0.03 → 3, not 3.0000000000000004).
pub fn percent(fraction: f64) -> f64 {
    (fraction * 1e4).round() / 100.0
}

fn point_from_row(r: &AttackRow) -> SweepPoint {
    SweepPoint {
        family: r.config.family,
        epsilon: r.config.epsilon,
        steps: r.config.steps,
        lambda_att: r.config.lambda_att,
        dmae: r.dmae,
        miou: r.miou,
        budget_violations: r.budget_violations,
    }
}

fn attack_row(ctx: &Ctx<'_>, c: &AttackConfig, bayes_model: Option<&ModelParams>, seed: u64) -> Result<AttackRow> {
    let a = ctx.attack(c)?;
    let dens: Vec<Map> = a.preds.iter().map(|p| p.density.clone()).collect();
    let ce = count_errors(&dens, &ctx.counts())?;
    let z = zmae(
        &a.preds.iter().map(|p| p.depth.clone()).collect::<Vec<_>>(),
        &ctx.test.iter().map(|s| s.depth_gt.clone()).collect::<Vec<_>>(),
        &a.masks,
    )?;
    let (mut over, mut ind_mean, mut outside) = (Vec::new(), Vec::new(), Vec::new());
    for ((p, s), m) in a.preds.iter().zip(ctx.test).zip(&a.masks) {
        let d = detect_with_reference(&p.depth, &s.depth_gt, &ctx.threshold, PostFilter::None)?;
        let inside = d.mask.intersection(m)?.count();
        over.push(inside as f64 / m.count() as f64);
        ind_mean.push(d.indicator.values.masked_mean(m).unwrap_or(0.0));
        outside.push((d.mask.count() - inside) as f64 / (m.shape().area() - m.count()) as f64);
    }
    let fraction_miou = ctx
        .cfg
        .sweep_fractions
        .iter()
        .map(|&f| ctx.detect_miou(&a, &ctx.threshold.with_fraction(f)?))
        .collect::<Result<Vec<_>>>()?;

    let bayes_miou = match (bayes_model, &ctx.cfg.bayes) {
        (Some(bm), Some(b)) => {
            let mut maps = Vec::with_capacity(ctx.test.len());
            for (i, (s, m)) in ctx.test.iter().zip(&a.masks).enumerate() {
                // the baseline model is attacked with full knowledge of its own weights
                let bc = bm.forward(&s.image)?;
                let d = match ctx.cfg.reference {
                    DensityReference::GroundTruth => &s.density_gt,
                    DensityReference::Clean => &bc.density,
                };
                let r = AttackReference::for_family(c.family, c.target_rule, d, &bc.density, &bc.depth);
                let adv = masked_attack(bm, &s.image, &r, *c, m.clone())?;
                let u: UncertaintyMap = baselines::dropout_uncertainty(
                    bm,
                    &adv.adv_image.quantized(),
                    b.passes,
                    b.drop_rate,
                    rng::derive(seed, 0xd209, i as u64),
                )?;
                maps.push(u);
            }
            Some(baselines::threshold_uncertainty(&maps, &a.masks, b.granularity)?.miou)
        }
        _ => None,
    };
    let random = |k: f64, stream: u64| -> Result<f64> {
        let preds = a
            .masks
            .iter()
            .enumerate()
            .map(|(i, m)| baselines::random_baseline(m.shape(), k, rng::derive(seed, stream, i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(metrics::miou(&preds, &a.masks, None)?)
    };
    Ok(AttackRow {
        label: c.label(),
        config: *c,
        dmae: ce.dmae,
        rmse: ce.rmse,
        zmae: z.value,
        miou: ctx.detect_miou(&a, &ctx.threshold)?,
        attacked_over_tau: mean(over),
        attacked_indicator: mean(ind_mean),
        outside_flagged: mean(outside),
        bayes_miou,
        randhalf_miou: random(0.5, 0x4a1f)?,
        randquarter_miou: random(0.25, 0x4a14)?,
        target_closer: c.family.is_targeted().then(|| a.target_closer as f64 / ctx.test.len() as f64),
        budget_violations: a.violations,
        fraction_miou,
    })
}

impl SeedResult {
    /// Rows and curves for the shared report renderer.
    pub fn summary(&self) -> RunSummary {
        let mut rows = vec![ConfigMetrics {
            config: "clean".into(),
            dmae: self.clean.dmae,
            rmse: self.clean.rmse,
            zmae: Some(self.clean.zmae),
            miou: None,
            bayes_miou: None,
            randhalf_miou: None,
            randquarter_miou: None,
        }];
        for r in &self.attacks {
            rows.push(ConfigMetrics {
                config: r.label.clone(),
                dmae: r.dmae,
                rmse: r.rmse,
                zmae: Some(r.zmae),
                miou: Some(r.miou),
                bayes_miou: r.bayes_miou,
                randhalf_miou: Some(r.randhalf_miou),
                randquarter_miou: Some(r.randquarter_miou),
            });
        }
        let mut curves = Vec::new();
        let mut push = |axis: &str, series: &str, x: f64, metric: &str, y: f64| {
            curves.push(CurvePoint {
                axis: axis.into(),
                series: series.into(),
                x,
                metric: metric.into(),
                y,
            })
        };
        for r in &self.attacks {
            for (&f, &m) in self.sweep_fractions.iter().zip(&r.fraction_miou) {
                push("threshold_percent", &r.label, percent(f), "miou", m);
            }
        }
        for p in &self.lambda_sweep {
            push("lambda_att", p.family.name(), p.lambda_att, "miou", p.miou);
            push("lambda_att", p.family.name(), p.lambda_att, "dmae", p.dmae);
        }
        for p in &self.epsilon_sweep {
            push("epsilon", p.family.name(), p.epsilon, "miou", p.miou);
            push("epsilon", p.family.name(), p.epsilon, "dmae", p.dmae);
        }
        for r in &self.reference_tampering {
            push("beta", "reference", r.beta, "detection_rate", r.rate);
            push("beta", "reference_held_out", r.beta, "detection_rate", r.held_out_rate);
        }
        RunSummary {
            seed: self.seed,
            rows,
            curves,
        }
    }
}
