//! Experiment orchestration on disk: gen → train → attack → detect → eval.
//!
//! Every unit of work writes into its own directory and leaves a stamp in
//! `<root>/stages/` holding the hash of its inputs and of each output file.
//! A unit is skipped when its stamp matches and its outputs are intact, so
//! re-running an unchanged configuration does no work, and deleting one
//! unit's outputs recomputes only that unit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use dad_core::attack::{schedule_steps, AttackConfig, AttackFamily, TargetRule};
use dad_core::defense::PostFilter;
use dad_core::metrics::EvalReport;
use dad_core::model::TrainConfig;
use dad_core::scene::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::artifacts::{DensityReference, QuadrantRule};
use crate::bench::{self, BayesConfig};
use crate::commands::{self, AttackArgs, BaselineKind, BaselineOptions, DetectArgs, RefSpec, Widths, ZmaeReference};
use crate::io;
use crate::report::{self, ConfigMetrics, CurvePoint, RunSummary};

/// Optional variable that relative output roots are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "DAD_OUTPUT_ROOT";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// The five stage kinds every record lists.
pub const STAGES: [&str; 5] = ["gen", "train", "attack", "detect", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub spec: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let desk = bench::BenchConfig::desk();
        Self {
            seed: 0,
            n_train: desk.n_train,
            n_test: desk.n_test,
            spec: desk.spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSet {
    /// RANDHALF and RANDQUARTER.
    pub random: bool,
    /// Separately trained dropout model, attacked with its own gradients.
    pub bayesian: Option<BayesConfig>,
}

impl Default for BaselineSet {
    fn default() -> Self {
        Self {
            random: true,
            bayesian: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub epsilon: Vec<f64>,
    pub threshold_percent: Vec<f64>,
    pub lambda_att: Vec<f64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            epsilon: vec![1.0, 15.0, 35.0],
            threshold_percent: vec![1.0, 3.0, 5.0, 10.0],
            lambda_att: vec![0.01, 1.0, 100.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    ThresholdPercent,
    LambdaAtt,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::ThresholdPercent => "threshold_percent",
            SweepAxis::LambdaAtt => "lambda_att",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "epsilon" | "eps" => SweepAxis::Epsilon,
            "threshold" | "threshold_percent" => SweepAxis::ThresholdPercent,
            "lambda" | "lambda_att" => SweepAxis::LambdaAtt,
            _ => bail!("sweep axis must be epsilon, threshold or lambda, got {s:?}"),
        })
    }
}

/// Everything a run depends on. Missing fields take the defaults, which are
/// written back into the run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub widths: Widths,
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    pub quadrant: QuadrantRule,
    pub density_reference: DensityReference,
    pub reference: RefSpec,
    pub threshold_percent: f64,
    pub post_filter: PostFilter,
    pub baselines: BaselineSet,
    pub sweep: SweepAxes,
    pub output_root: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = bench::BenchConfig::desk();
        Self {
            dataset: DatasetConfig::default(),
            widths: desk.widths,
            train: desk.train,
            attacks: desk.attacks,
            quadrant: QuadrantRule::Cycle,
            density_reference: DensityReference::GroundTruth,
            reference: RefSpec::GroundTruth,
            threshold_percent: 5.0,
            post_filter: PostFilter::None,
            baselines: BaselineSet::default(),
            sweep: SweepAxes::default(),
            output_root: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = io::read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dataset.n_train > 0, "empty training set");
        self.dataset.spec.validate()?;
        self.train.validate()?;
        for a in &self.attacks {
            a.validate()?;
        }
        ensure!(self.dataset.n_test > 0 || self.attacks.is_empty(), "attacks need test frames");
        ensure!(
            self.threshold_percent > 0.0 && self.threshold_percent.is_finite(),
            "threshold_percent must be positive"
        );
        if let RefSpec::File(p) = &self.reference {
            ensure!(p.is_dir(), "external reference directory {} does not exist", p.display());
        }
        Ok(())
    }

    /// `output_root`, placed under `$DAD_OUTPUT_ROOT` when relative.
    pub fn root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(base) if self.output_root.is_relative() => PathBuf::from(base).join(&self.output_root),
            _ => self.output_root.clone(),
        }
    }

    pub fn sweep_values(&self, axis: SweepAxis) -> &[f64] {
        match axis {
            SweepAxis::Epsilon => &self.sweep.epsilon,
            SweepAxis::ThresholdPercent => &self.sweep.threshold_percent,
            SweepAxis::LambdaAtt => &self.sweep.lambda_att,
        }
    }
}

/// Directory-safe name that spells out every attack parameter.
pub fn attack_key(c: &AttackConfig) -> String {
    let rule = match c.target_rule {
        TargetRule::PerPixelPlusOne => "",
        TargetRule::TotalPlusOne => "_total",
    };
    format!("{}_e{}_a{}_l{}{rule}", c.label(), c.epsilon, c.alpha, c.lambda_att)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub unit: String,
    pub stage: String,
    pub input_hash: String,
    pub output_hash: String,
    pub artifacts: Vec<Artifact>,
    pub skipped: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEval {
    /// `clean`, an attack key, or `<baseline>:<attack key>`.
    pub name: String,
    pub detector: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    pub evals: Vec<NamedEval>,
    /// Hash of everything above except `skipped` and `seconds`.
    pub record_hash: String,
}

impl RunRecord {
    pub fn compute_hash(&self) -> Result<String> {
        let stages: Vec<_> = self
            .stages
            .iter()
            .map(|s| (&s.unit, &s.stage, &s.input_hash, &s.output_hash, &s.artifacts))
            .collect();
        let v = serde_json::json!({
            "tool_version": self.tool_version,
            "config": self.config,
            "stages": stages,
            "evals": self.evals,
        });
        Ok(io::sha256_hex(&serde_json::to_vec(&v)?))
    }

    pub fn stage_kinds(&self) -> Vec<&str> {
        let mut kinds: Vec<&str> = Vec::new();
        for s in &self.stages {
            if !kinds.contains(&s.stage.as_str()) {
                kinds.push(&s.stage);
            }
        }
        kinds
    }

    fn eval(&self, name: &str) -> Option<&EvalReport> {
        self.evals.iter().find(|e| e.name == name).map(|e| &e.report)
    }

    /// Rows for the summary tables.
    pub fn summary(&self) -> RunSummary {
        let mut rows = Vec::new();
        if let Some(c) = self.eval("clean") {
            rows.push(ConfigMetrics {
                config: "clean".into(),
                dmae: c.dmae,
                rmse: c.rmse,
                zmae: c.zmae,
                miou: None,
                bayes_miou: None,
                randhalf_miou: None,
                randquarter_miou: None,
            });
        }
        for a in &self.config.attacks {
            let key = attack_key(a);
            let Some(e) = self.eval(&format!("{key}@{}", self.config.threshold_percent)) else {
                continue;
            };
            let other = |b: &str| self.eval(&format!("{b}:{key}")).and_then(|r| r.miou);
            rows.push(ConfigMetrics {
                config: key.clone(),
                dmae: e.dmae,
                rmse: e.rmse,
                zmae: e.zmae,
                miou: e.miou,
                bayes_miou: other("bayesian"),
                randhalf_miou: other("randhalf"),
                randquarter_miou: other("randquarter"),
            });
        }
        RunSummary {
            seed: self.config.dataset.seed,
            rows,
            curves: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    unit: String,
    input_hash: String,
    outputs: BTreeMap<String, String>,
}

struct Runner<'a> {
    root: PathBuf,
    stages: Vec<StageRecord>,
    progress: &'a mut dyn FnMut(&str),
}

fn hash_parts(parts: &[&str]) -> String {
    io::sha256_hex(parts.join("\u{1f}").as_bytes())
}

fn sanitize(unit: &str) -> String {
    unit.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.@".contains(c) { c } else { '_' }).collect()
}

impl Runner<'_> {
    fn stamp_path(&self, unit: &str) -> PathBuf {
        self.root.join("stages").join(format!("{}.json", sanitize(unit)))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn hash_outputs(&self, dir: &Path) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for e in walkdir::WalkDir::new(dir).sort_by_file_name() {
            let e = e?;
            if e.file_type().is_file() {
                out.insert(self.rel(e.path()), io::hash_file(e.path())?);
            }
        }
        Ok(out)
    }

    /// Runs `work` to (re)build `dir` unless the stamp for `unit` shows the
    /// same inputs and intact outputs. Returns the output hash.
    fn unit(&mut self, stage: &str, unit: &str, inputs: &[&str], dir: &Path, work: impl FnOnce() -> Result<()>) -> Result<String> {
        let input_hash = hash_parts(&[&[unit], inputs].concat());
        let stamp_path = self.stamp_path(unit);
        let t = Instant::now();
        let current = if stamp_path.exists() && dir.exists() {
            let s: Stamp = io::read_json(&stamp_path)?;
            let outputs = self.hash_outputs(dir)?;
            (s.input_hash == input_hash && s.outputs == outputs).then_some(outputs)
        } else {
            None
        };
        let skipped = current.is_some();
        let outputs = match current {
            Some(o) => o,
            None => {
                (self.progress)(&format!("running {unit}"));
                if dir.exists() {
                    fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
                }
                work().with_context(|| format!("stage {unit} failed"))?;
                let outputs = self.hash_outputs(dir)?;
                io::write_json(
                    &stamp_path,
                    &Stamp {
                        unit: unit.into(),
                        input_hash: input_hash.clone(),
                        outputs: outputs.clone(),
                    },
                )?;
                outputs
            }
        };
        let listing: Vec<String> = outputs.iter().map(|(p, h)| format!("{p}={h}")).collect();
        let output_hash = hash_parts(&listing.iter().map(String::as_str).collect::<Vec<_>>());
        self.stages.push(StageRecord {
            unit: unit.into(),
            stage: stage.into(),
            input_hash,
            output_hash: output_hash.clone(),
            artifacts: outputs.into_iter().map(|(path, sha256)| Artifact { path, sha256 }).collect(),
            skipped,
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(output_hash)
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string(v)?)
}

/// Runs (or confirms) every stage of `config` and writes
/// `<root>/record.json`.
pub fn run_pipeline(config: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<RunRecord> {
    config.validate()?;
    let root = config.root();
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let mut r = Runner {
        root: root.clone(),
        stages: Vec::new(),
        progress,
    };
    let data = root.join("data");
    let d = &config.dataset;
    let data_hash = r.unit("gen", "gen", &[&json(d)?], &data, || {
        commands::gen(&data, d.seed, d.n_train, d.n_test, &d.spec).map(|_| ())
    })?;

    let model_dir = root.join("model");
    let model = model_dir.join("model.dad");
    let model_hash = r.unit("train", "train", &[&data_hash, &json(&config.widths)?, &json(&config.train)?], &model_dir, || {
        commands::train_model(&data, &config.widths, &config.train, &model).map(|_| ())
    })?;

    let calib_dir = root.join("calibration");
    let calib = calib_dir.join("calib.json");
    let calib_hash = r.unit("detect", "calibrate", &[&data_hash, &model_hash, &json(&config.reference)?], &calib_dir, || {
        commands::calibrate(&model, &data, &config.reference, commands::default_fraction(), &calib).map(|_| ())
    })?;

    let bayes_model = root.join("model-bayesian").join("model.dad");
    let bayes_hash = match &config.baselines.bayesian {
        Some(b) => {
            let cfg = TrainConfig {
                dropout: b.train_dropout,
                seed: dad_core::rng::derive(config.train.seed, 0xbae5, 0),
                ..config.train
            };
            let dir = bayes_model.parent().unwrap().to_path_buf();
            Some(r.unit("train", "train:bayesian", &[&data_hash, &json(&config.widths)?, &json(&cfg)?], &dir, || {
                commands::train_model(&data, &config.widths, &cfg, &bayes_model).map(|_| ())
            })?)
        }
        None => None,
    };

    let mut evals = Vec::new();
    let clean_dir = root.join("detect").join("clean");
    let fraction = config.threshold_percent / 100.0;
    let detect_inputs = |frames_hash: &str| -> Result<Vec<String>> {
        Ok(vec![
            frames_hash.to_string(),
            model_hash.clone(),
            calib_hash.clone(),
            json(&config.reference)?,
            json(&config.post_filter)?,
            fraction.to_string(),
        ])
    };
    let run_detect = |frames: &Path, out: &Path| -> Result<()> {
        commands::detect(&DetectArgs {
            model: &model,
            frames,
            reference: &config.reference,
            calibration: &calib,
            fraction: Some(fraction),
            filter: config.post_filter,
            out,
        })
        .map(|_| ())
    };
    let inputs = detect_inputs(&data_hash)?;
    let clean_hash = r.unit("detect", "detect:clean", &refs(&inputs), &clean_dir, || run_detect(&data, &clean_dir))?;
    evals.push(eval_unit(&mut r, "clean", &clean_dir, &clean_hash, &data, &data_hash)?);

    for a in &config.attacks {
        let key = attack_key(a);
        let adir = root.join("attacks").join(&key);
        let attack_inputs = [
            data_hash.clone(),
            model_hash.clone(),
            json(a)?,
            json(&config.quadrant)?,
            json(&config.density_reference)?,
        ];
        let ahash = r.unit("attack", &format!("attack:{key}"), &refs(&attack_inputs), &adir, || {
            commands::attack(&AttackArgs {
                model: &model,
                data: &data,
                config: *a,
                quadrant: config.quadrant,
                reference: config.density_reference,
                out: &adir,
            })
            .map(|_| ())
        })?;
        let name = format!("{key}@{}", config.threshold_percent);
        let ddir = root.join("detect").join(&name);
        let inputs = detect_inputs(&ahash)?;
        let dhash = r.unit("detect", &format!("detect:{name}"), &refs(&inputs), &ddir, || run_detect(&adir, &ddir))?;
        evals.push(eval_unit(&mut r, &name, &ddir, &dhash, &adir, &ahash)?);

        if config.baselines.random {
            for (kind, tag) in [(BaselineKind::RandHalf, "randhalf"), (BaselineKind::RandQuarter, "randquarter")] {
                let name = format!("{tag}:{key}");
                let bdir = root.join("baselines").join(tag).join(&key);
                let opts = BaselineOptions {
                    seed: config.dataset.seed,
                    ..BaselineOptions::default()
                };
                let inputs = [ahash.clone(), model_hash.clone(), json(&opts)?];
                let bhash = r.unit("detect", &format!("baseline:{name}"), &refs(&inputs), &bdir, || {
                    commands::baseline(kind, &model, &adir, &opts, &bdir).map(|_| ())
                })?;
                evals.push(eval_unit(&mut r, &name, &bdir, &bhash, &adir, &ahash)?);
            }
        }
        if let (Some(b), Some(bh)) = (&config.baselines.bayesian, &bayes_hash) {
            let badir = root.join("attacks-bayesian").join(&key);
            let attack_inputs = [
                data_hash.clone(),
                bh.clone(),
                json(a)?,
                json(&config.quadrant)?,
                json(&config.density_reference)?,
            ];
            let bahash = r.unit("attack", &format!("attack:bayesian:{key}"), &refs(&attack_inputs), &badir, || {
                commands::attack(&AttackArgs {
                    model: &bayes_model,
                    data: &data,
                    config: *a,
                    quadrant: config.quadrant,
                    reference: config.density_reference,
                    out: &badir,
                })
                .map(|_| ())
            })?;
            let name = format!("bayesian:{key}");
            let bdir = root.join("baselines").join("bayesian").join(&key);
            let opts = BaselineOptions {
                seed: config.dataset.seed,
                passes: b.passes,
                drop_rate: b.drop_rate,
                granularity: b.granularity,
            };
            let inputs = [bahash.clone(), bh.clone(), json(&opts)?];
            let bhash = r.unit("detect", &format!("baseline:{name}"), &refs(&inputs), &bdir, || {
                commands::baseline(BaselineKind::Bayesian, &bayes_model, &badir, &opts, &bdir).map(|_| ())
            })?;
            evals.push(eval_unit(&mut r, &name, &bdir, &bhash, &badir, &bahash)?);
        }
    }

    let mut record = RunRecord {
        tool_version: TOOL_VERSION.into(),
        config: config.clone(),
        stages: r.stages,
        evals,
        record_hash: String::new(),
    };
    record.record_hash = record.compute_hash()?;
    for s in &record.stages {
        for a in &s.artifacts {
            ensure!(root.join(&a.path).is_file(), "artifact {} vanished before the record was written", a.path);
        }
    }
    io::write_json(&root.join("record.json"), &record)?;
    Ok(record)
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn eval_unit(r: &mut Runner<'_>, name: &str, pred: &Path, pred_hash: &str, gt: &Path, gt_hash: &str) -> Result<NamedEval> {
    let dir = r.root.join("eval").join(sanitize(name));
    let out = dir.join("report.json");
    r.unit("eval", &format!("eval:{name}"), &[pred_hash, gt_hash], &dir, || {
        let e = commands::eval(pred, gt, None, ZmaeReference::Detection)?;
        commands::write_eval(&out, &e)
    })?;
    let e: commands::EvalOutput = io::read_json(&out)?;
    Ok(NamedEval {
        name: name.into(),
        detector: e.detector,
        report: e.report,
    })
}

/// Variant of `config` for one sweep value.
pub fn sweep_variant(config: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut c = config.clone();
    match axis {
        SweepAxis::Epsilon => {
            let mut fams: Vec<AttackFamily> = Vec::new();
            for a in &config.attacks {
                if !fams.contains(&a.family) {
                    fams.push(a.family);
                }
            }
            c.attacks = fams
                .into_iter()
                .map(|f| AttackConfig {
                    epsilon: value,
                    steps: schedule_steps(value),
                    ..config.attacks.iter().find(|a| a.family == f).copied().unwrap()
                })
                .collect();
        }
        SweepAxis::ThresholdPercent => c.threshold_percent = value,
        SweepAxis::LambdaAtt => {
            let exposed: Vec<AttackConfig> = config.attacks.iter().filter(|a| a.family.is_exposed()).copied().collect();
            let base = if exposed.is_empty() {
                vec![AttackConfig::new(AttackFamily::UE, 15.0, 19), AttackConfig::new(AttackFamily::TE, 15.0, 19)]
            } else {
                exposed
            };
            c.attacks = base.into_iter().map(|a| AttackConfig { lambda_att: value, ..a }).collect();
        }
    }
    c
}

/// Runs one pipeline per axis value (sharing data, model and calibration)
/// and writes the curves to `<root>/sweeps/<axis>/`.
pub fn sweep(config: &ExperimentConfig, axis: SweepAxis, progress: &mut dyn FnMut(&str)) -> Result<Vec<CurvePoint>> {
    let values = config.sweep_values(axis).to_vec();
    ensure!(!values.is_empty(), "the {} sweep has no values", axis.name());
    let dir = config.root().join("sweeps").join(axis.name());
    let mut points = Vec::new();
    for v in values {
        let variant = sweep_variant(config, axis, v);
        let record = run_pipeline(&variant, progress)?;
        io::write_json(&dir.join("records").join(format!("{v}.json")), &record)?;
        for a in &variant.attacks {
            let name = format!("{}@{}", attack_key(a), variant.threshold_percent);
            let e = record
                .eval(&name)
                .with_context(|| format!("missing evaluation {name}"))?;
            let series = if axis == SweepAxis::ThresholdPercent {
                a.label()
            } else {
                a.family.name().to_string()
            };
            for (metric, y) in [("miou", e.miou.unwrap_or(f64::NAN)), ("dmae", e.dmae)] {
                points.push(CurvePoint {
                    axis: axis.name().into(),
                    series: series.clone(),
                    x: v,
                    metric: metric.into(),
                    y,
                });
            }
        }
    }
    // Leave the root record describing the base configuration.
    run_pipeline(config, progress)?;
    io::write_json(&dir.join("points.json"), &points)?;
    report::emit_report(
        &[RunSummary {
            seed: config.dataset.seed,
            rows: Vec::new(),
            curves: points.clone(),
        }],
        &dir,
    )?;
    Ok(points)
}

/// Reads `record.json` files.
pub fn load_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    paths
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join("record.json") } else { p.clone() };
            let rec: RunRecord = io::read_json(&file)?;
            let root = file.parent().unwrap_or(Path::new("."));
            let missing: Vec<String> = rec
                .stages
                .iter()
                .flat_map(|s| &s.artifacts)
                .filter(|a| !root.join(&a.path).is_file())
                .map(|a| a.path.clone())
                .collect();
            ensure!(missing.is_empty(), "{} references missing artifacts: {}", file.display(), missing.join(", "));
            Ok(rec)
        })
        .collect()
}
