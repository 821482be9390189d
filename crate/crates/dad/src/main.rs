use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dad::artifacts::{DensityReference, QuadrantRule};
use dad::commands::{self, AttackArgs, BaselineKind, BaselineOptions, DetectArgs, RefSpec, Widths, ZmaeReference};
use dad::harness::{self, ExperimentConfig, SweepAxis};
use dad::report::{self, RunSummary};
use dad::io;
use dad_core::attack::{schedule_steps, AttackConfig, AttackFamily};
use dad_core::defense::PostFilter;
use dad_core::model::TrainConfig;
use dad_core::scene::{DensityConfig, SceneSpec, Split};

#[derive(Parser)]
#[command(name = "dad", version, about = "Density-and-depth tamper detection for crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowd dataset.
    Gen(GenArgs),
    /// Train the two-stream density/depth model.
    Train(TrainArgs),
    /// Attack every test frame inside one quadrant.
    Attack(AttackCli),
    /// Fit the detection threshold on clean training frames.
    Calibrate(CalibrateArgs),
    /// Flag pixels whose estimated depth departs from the reference.
    Detect(DetectCli),
    /// Per-pixel min/max/mean depth over the training frames.
    Depthstats(DepthstatsArgs),
    /// Detection rate for reference depth maps shifted by beta times the mean.
    CheckRef(CheckRefArgs),
    /// Run a comparison detector.
    Baseline(BaselineArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run a configuration once per value of one axis.
    Sweep(SweepArgs),
    /// Aggregate run records into tables and plots.
    Report(ReportArgs),
    /// Run the full staged pipeline from a configuration file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "train")]
    n_train: usize,
    #[arg(long = "test")]
    n_test: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count_min: Option<usize>,
    #[arg(long)]
    count_max: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

/// Comma-separated layer widths.
#[derive(Clone, Debug)]
struct WidthList(Vec<usize>);

fn parse_widths(s: &str) -> Result<WidthList, String> {
    s.split(',')
        .map(|w| w.trim().parse().map_err(|e| format!("{w:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(WidthList)
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Comma-separated encoder widths.
    #[arg(long, value_parser = parse_widths)]
    encoder: Option<WidthList>,
    /// Comma-separated decoder widths.
    #[arg(long, value_parser = parse_widths)]
    decoder: Option<WidthList>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_family(s: &str) -> Result<AttackFamily, String> {
    AttackFamily::parse(s).ok_or_else(|| format!("family must be u, t, ue or te, got {s:?}"))
}

fn parse_quadrant(s: &str) -> Result<QuadrantRule, String> {
    QuadrantRule::parse(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct AttackCli {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_family)]
    family: AttackFamily,
    #[arg(long, default_value_t = 15.0)]
    eps: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Defaults to the schedule for `--eps`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    lambda_att: f64,
    /// 0–3, or `cycle` to rotate per frame.
    #[arg(long, default_value = "0", value_parser = parse_quadrant)]
    quadrant: QuadrantRule,
    /// Density the untargeted attack moves away from: `gt` or `clean`.
    #[arg(long, default_value = "gt")]
    density_ref: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "ref", default_value = "gt")]
    reference: RefSpec,
    /// Threshold as a fraction of the calibration maximum.
    #[arg(long, default_value_t = commands::default_fraction())]
    fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectCli {
    #[arg(long)]
    model: PathBuf,
    /// Attack directory or dataset.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long = "ref", default_value = "gt")]
    reference: RefSpec,
    #[arg(long)]
    tau_file: PathBuf,
    /// Overrides the calibrated fraction.
    #[arg(long)]
    fraction: Option<f64>,
    /// Apply a 3×3 majority filter to the mask.
    #[arg(long)]
    majority: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DepthstatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckRefArgs {
    #[arg(long)]
    stats: PathBuf,
    /// Dataset whose depth maps serve as the reference; each is tampered
    /// with `t = z + beta * mean` before checking.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    kind: BaselineKind,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    drop_rate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    roi: Option<PathBuf>,
    /// Compare depth against ground truth rather than the detection reference.
    #[arg(long)]
    zmae_gt: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// epsilon, threshold or lambda.
    #[arg(long)]
    axis: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, `record.json` files or `runs.json` files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_summaries(inputs: &[PathBuf]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_file() && p.file_name().is_some_and(|n| n == "runs.json") {
            let runs: Vec<RunSummary> = io::read_json(p)?;
            out.extend(runs);
        } else {
            out.extend(harness::load_records(std::slice::from_ref(p))?.iter().map(|r| r.summary()));
        }
    }
    Ok(out)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => {
            let mut spec = SceneSpec::default();
            if let Some(v) = a.count_min {
                spec.count_min = v;
            }
            if let Some(v) = a.count_max {
                spec.count_max = v;
            }
            if let Some(v) = a.sigma {
                spec.density = DensityConfig::with_sigma(v);
            }
            if let Some(v) = a.width {
                spec.width = v;
            }
            if let Some(v) = a.height {
                spec.height = v;
            }
            print_json(&commands::gen(&a.out, a.seed, a.n_train, a.n_test, &spec)?)
        }
        Command::Train(a) => {
            let d = Widths::default();
            let widths = Widths {
                encoder: a.encoder.map_or(d.encoder, |w| w.0),
                decoder: a.decoder.map_or(d.decoder, |w| w.0),
            };
            let cfg = TrainConfig {
                lambda: a.lambda,
                epochs: a.epochs,
                seed: a.seed,
                learning_rate: a.lr,
                batch_size: a.batch_size,
                dropout: a.dropout,
                ..TrainConfig::default()
            };
            let (_, log) = commands::train_model(&a.data, &widths, &cfg, &a.out)?;
            eprintln!("wrote {} and {}", a.out.display(), commands::log_path(&a.out).display());
            if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
                eprintln!("density loss {:.6} -> {:.6}", first.loss_density, last.loss_density);
            }
            Ok(())
        }
        Command::Attack(a) => {
            let reference = match a.density_ref.as_str() {
                "gt" => DensityReference::GroundTruth,
                "clean" => DensityReference::Clean,
                s => bail!("density reference must be gt or clean, got {s:?}"),
            };
            let config = AttackConfig {
                alpha: a.alpha,
                lambda_att: a.lambda_att,
                ..AttackConfig::new(a.family, a.eps, a.steps.unwrap_or_else(|| schedule_steps(a.eps)))
            };
            let index = commands::attack(&AttackArgs {
                model: &a.model,
                data: &a.data,
                config,
                quadrant: a.quadrant,
                reference,
                out: &a.out,
            })?;
            eprintln!("attacked {} frames into {}", index.frames.len(), a.out.display());
            Ok(())
        }
        Command::Calibrate(a) => print_json(&commands::calibrate(&a.model, &a.data, &a.reference, a.fraction, &a.out)?),
        Command::Detect(a) => {
            let index = commands::detect(&DetectArgs {
                model: &a.model,
                frames: &a.frames,
                reference: &a.reference,
                calibration: &a.tau_file,
                fraction: a.fraction,
                filter: if a.majority { PostFilter::Majority3x3 } else { PostFilter::None },
                out: &a.out,
            })?;
            let flagged: usize = index.frames.iter().map(|f| f.flagged).sum();
            eprintln!("{} frames, {flagged} pixels flagged", index.frames.len());
            Ok(())
        }
        Command::Depthstats(a) => {
            let s = commands::depthstats(&a.data, &a.out)?;
            let shape = s.shape();
            eprintln!("wrote {}×{} statistics over {} frames", shape.height, shape.width, s.n_frames);
            Ok(())
        }
        Command::CheckRef(a) => {
            let split = match a.split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                s => bail!("split must be train or test, got {s:?}"),
            };
            let r = commands::check_ref(&a.stats, &a.reference, a.beta, split)?;
            if let Some(out) = &a.out {
                io::write_json(out, &r)?;
            }
            print_json(&r)
        }
        Command::Baseline(a) => {
            let d = BaselineOptions::default();
            let opts = BaselineOptions {
                seed: a.seed,
                passes: a.passes.unwrap_or(d.passes),
                drop_rate: a.drop_rate.unwrap_or(d.drop_rate),
                granularity: d.granularity,
            };
            let index = commands::baseline(a.kind, &a.model, &a.frames, &opts, &a.out)?;
            eprintln!("{} frames into {}", index.frames.len(), a.out.display());
            Ok(())
        }
        Command::Eval(a) => {
            let zref = if a.zmae_gt { ZmaeReference::GroundTruth } else { ZmaeReference::Detection };
            let e = commands::eval(&a.pred, &a.gt, a.roi.as_deref(), zref)?;
            commands::write_eval(&a.out, &e)?;
            print_json(&serde_json::json!({
                "detector": e.detector,
                "n_frames": e.report.n_frames,
                "miou": e.report.miou,
                "dmae": e.report.dmae,
                "rmse": e.report.rmse,
                "zmae": e.report.zmae,
            }))
        }
        Command::Sweep(a) => {
            let config = ExperimentConfig::load(&a.config)?;
            let axis = SweepAxis::parse(&a.axis)?;
            let points = harness::sweep(&config, axis, &mut progress)?;
            eprintln!(
                "{} points written to {}",
                points.len(),
                config.root().join("sweeps").join(axis.name()).display()
            );
            Ok(())
        }
        Command::Report(a) => {
            let runs = load_summaries(&a.inputs)?;
            for p in report::emit_report(&runs, &a.out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Run(a) => {
            let mut config = load_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                config.dataset.seed = s;
                config.train.seed = s;
            }
            if let Some(o) = a.out {
                config.output_root = o;
            }
            let record = harness::run_pipeline(&config, &mut progress)?;
            let ran = record.stages.iter().filter(|s| !s.skipped).count();
            eprintln!(
                "{} units ({ran} run, {} up to date); record {}",
                record.stages.len(),
                record.stages.len() - ran,
                record.record_hash
            );
            let root = config.root();
            report::emit_report(&[record.summary()], &root.join("report")).context("writing the report")?;
            Ok(())
        }
    }
}
