//! Command-line surface: dataset generation, training, sampling,
//! evaluation, the baseline, benchmarking, and the two visualizations.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Errors print
//! to stderr as single lines. `IKDP_THREADS` caps the worker count
//! (default: hardware parallelism); training with one worker runs the
//! bit-deterministic reference mode.

use std::path::{Path, PathBuf};

use crate::baselines::{self, MlpBaselineConfig, MlpCheckpoint};
use crate::dataset::Dataset;
use crate::diffusion::{NoiseSchedule, Parameterization, SampleOptions};
use crate::kinematics::{forward_kinematics_slice, target_distance, ChainSpec, Point2};
use crate::tensor::Rng;
use crate::trainer::{self, Checkpoint, TrainingConfig};
use crate::viz;

struct Failure {
    code: i32,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure { code: 2, msg: msg.to_string() }
}

macro_rules! impl_runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for Failure {
            fn from(e: $ty) -> Failure { runtime(e) }
        })*
    };
}

impl_runtime_from!(
    crate::trainer::TrainError,
    crate::dataset::DatasetError,
    crate::viz::VizError,
    crate::diffusion::DiffusionError,
    crate::kinematics::KinematicsError,
    std::io::Error
);

/// Parse and dispatch; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.msg.replace('\n', " "));
            f.code
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), Failure> {
    let Some(command) = args.first() else {
        return Err(usage(
            "missing command; expected one of gen, train, sample, eval, baseline, bench, viz-noising, viz-trace",
        ));
    };
    let rest = &args[1..];
    match command.as_str() {
        "gen" => cmd_gen(rest),
        "train" => cmd_train(rest),
        "sample" => cmd_sample(rest, false),
        "viz-trace" => cmd_sample(rest, true),
        "eval" => cmd_eval(rest),
        "baseline" => cmd_baseline(rest),
        "bench" => cmd_bench(rest),
        "viz-noising" => cmd_viz_noising(rest),
        other => Err(usage(format!("unknown command {other}"))),
    }
}

struct Flags {
    entries: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Flags, Failure> {
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut it = args.iter();
        while let Some(token) = it.next() {
            let Some(key) = token.strip_prefix("--") else {
                return Err(usage(format!("expected a --flag, found {token}")));
            };
            if !allowed.contains(&key) {
                return Err(usage(format!("unknown flag --{key}")));
            }
            if entries.iter().any(|(k, _)| k == key) {
                return Err(usage(format!("duplicate flag --{key}")));
            }
            let Some(value) = it.next() else {
                return Err(usage(format!("flag --{key} needs a value")));
            };
            entries.push((key.to_string(), value.clone()));
        }
        Ok(Flags { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, Failure> {
        self.get(key)
            .ok_or_else(|| usage(format!("missing required flag --{key}")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, Failure> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| usage(format!("flag --{key} has invalid value {v}"))),
        }
    }

    fn parsed_required<T: std::str::FromStr>(&self, key: &str) -> Result<T, Failure> {
        let v = self.required(key)?;
        v.parse()
            .map_err(|_| usage(format!("flag --{key} has invalid value {v}")))
    }
}

fn worker_count() -> usize {
    match std::env::var("IKDP_THREADS") {
        Ok(v) => v.parse().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

fn parse_target(spec: &str) -> Result<Point2, Failure> {
    let (x, y) = spec
        .split_once(',')
        .ok_or_else(|| usage(format!("target {spec} must be x,y")))?;
    let px: f64 = x
        .trim()
        .parse()
        .map_err(|_| usage(format!("bad target coordinate {x}")))?;
    let py: f64 = y
        .trim()
        .parse()
        .map_err(|_| usage(format!("bad target coordinate {y}")))?;
    Ok(Point2::new(px, py))
}

fn cmd_gen(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["joints", "count", "seed", "out"])?;
    let joints: usize = flags.parsed_required("joints")?;
    let count: usize = flags.parsed("count", 100_000)?;
    let seed: u64 = flags.parsed_required("seed")?;
    let out = PathBuf::from(flags.required("out")?);
    let chain = ChainSpec::unit(joints)?;
    let ds = Dataset::generate(&chain, count, seed);
    ds.save_csv(&out)?;
    println!("wrote {} ({} records, N={joints}, seed={seed})", out.display(), ds.len());
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(
        args,
        &[
            "data", "timesteps", "beta-start", "beta-end", "epochs", "batch", "lr", "param",
            "seed", "out", "log",
        ],
    )?;
    let data = PathBuf::from(flags.required("data")?);
    let epochs: usize = flags.parsed_required("epochs")?;
    let seed: u64 = flags.parsed_required("seed")?;
    let out = PathBuf::from(flags.required("out")?);
    let mut cfg = TrainingConfig::new(epochs, seed);
    cfg.t_max = flags.parsed("timesteps", 80)?;
    cfg.beta_start = flags.parsed("beta-start", 1e-4)?;
    cfg.beta_end = flags.parsed("beta-end", 0.02)?;
    cfg.batch_size = flags.parsed("batch", 128)?;
    cfg.lr = flags.parsed("lr", 1e-3)?;
    cfg.param = match flags.get("param").unwrap_or("x0") {
        "x0" => Parameterization::PredictX0,
        "eps" => Parameterization::PredictEps,
        other => return Err(usage(format!("flag --param must be x0 or eps, got {other}"))),
    };
    cfg.workers = worker_count();
    cfg.checkpoint_path = Some(out.clone());
    cfg.log_path = flags.get("log").map(PathBuf::from);
    cfg.progress = true;

    let ds = Dataset::load_csv(&data)?;
    let (ckpt, log) = trainer::train(&ds, &cfg)?;
    let final_loss = log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} records (N={}); final loss {final_loss:.6}; checkpoint {}",
        ckpt.step_count,
        ds.len(),
        ds.num_joints(),
        out.display()
    );
    Ok(())
}

fn cmd_sample(args: &[String], trace_required: bool) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["ckpt", "target", "seed", "trace", "count"])?;
    let ckpt_path = PathBuf::from(flags.required("ckpt")?);
    let target = parse_target(flags.required("target")?)?;
    let seed: u64 = flags.parsed_required("seed")?;
    let count: usize = flags.parsed("count", 1)?;
    let trace_path = flags.get("trace").map(PathBuf::from);
    if trace_required && trace_path.is_none() {
        return Err(usage("missing required flag --trace"));
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let chain = ckpt.chain();
    let mut rng = Rng::new(seed);
    for s in 0..count.max(1) {
        let opts = SampleOptions {
            trace: s == 0 && trace_path.is_some(),
            deterministic: false,
        };
        let out = trainer::solve(&ckpt, target, &mut rng, opts)?;
        let tip = forward_kinematics_slice(&chain, &out.theta0);
        let dist = target_distance(tip, target);
        let angles = out
            .theta0
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect::<Vec<_>>()
            .join(", ");
        println!(
            "sample {s}: theta = [{angles}]  tip = ({:.4}, {:.4})  dist = {dist:.4}",
            tip.x, tip.y
        );
        if let (Some(path), Some(trace)) = (&trace_path, &out.trace) {
            viz::emit_trace_svg(trace, &chain, target, path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["ckpt", "data", "report", "samples", "seed"])?;
    let ckpt = Checkpoint::load(Path::new(flags.required("ckpt")?))?;
    let ds = Dataset::load_csv(Path::new(flags.required("data")?))?;
    let report_path = PathBuf::from(flags.required("report")?);
    let samples: usize = flags.parsed("samples", 1)?;
    let seed: u64 = flags.parsed("seed", 0)?;
    let report = trainer::eval(&ckpt, &ds, samples, seed, worker_count())?;
    std::fs::write(&report_path, report.to_csv_string())?;
    println!(
        "evaluated {} targets: mean angle distance {:.4}, mean target distance {:.4}; report {}",
        report.n_targets,
        report.mean_angle_distance,
        report.mean_target_distance,
        report_path.display()
    );
    Ok(())
}

fn cmd_baseline(args: &[String]) -> Result<(), Failure> {
    let Some(action) = args.first() else {
        return Err(usage("baseline needs a subaction: train or eval"));
    };
    let rest = &args[1..];
    match action.as_str() {
        "train" => {
            let flags = Flags::parse(
                rest,
                &["data", "hidden", "epochs", "batch", "lr", "seed", "out"],
            )?;
            let ds = Dataset::load_csv(Path::new(flags.required("data")?))?;
            let epochs: usize = flags.parsed_required("epochs")?;
            let seed: u64 = flags.parsed_required("seed")?;
            let out = PathBuf::from(flags.required("out")?);
            let mut cfg = MlpBaselineConfig::new(epochs, seed);
            if let Some(h) = flags.get("hidden") {
                cfg.hidden = h
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| usage(format!("flag --hidden has invalid value {h}")))?;
            }
            cfg.batch_size = flags.parsed("batch", 128)?;
            cfg.lr = flags.parsed("lr", 1e-3)?;
            let (ckpt, log) = baselines::mlp_train(&ds, &cfg)?;
            ckpt.save(&out)?;
            let final_loss = log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained mlp baseline {} steps; final loss {final_loss:.6}; checkpoint {}",
                ckpt.step_count,
                out.display()
            );
            Ok(())
        }
        "eval" => {
            let flags = Flags::parse(rest, &["ckpt", "data", "report"])?;
            let ckpt = MlpCheckpoint::load(Path::new(flags.required("ckpt")?))?;
            let ds = Dataset::load_csv(Path::new(flags.required("data")?))?;
            let report_path = PathBuf::from(flags.required("report")?);
            let report = baselines::mlp_eval(&ckpt, &ds)?;
            std::fs::write(&report_path, report.to_csv_string())?;
            println!(
                "evaluated {} targets: mean angle distance {:.4}, mean target distance {:.4}; report {}",
                report.n_targets,
                report.mean_angle_distance,
                report.mean_target_distance,
                report_path.display()
            );
            Ok(())
        }
        other => Err(usage(format!("unknown baseline subaction {other}"))),
    }
}

fn cmd_bench(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["ckpt", "baseline-ckpt", "targets", "reps", "report", "seed"])?;
    let ckpt = Checkpoint::load(Path::new(flags.required("ckpt")?))?;
    let mlp = MlpCheckpoint::load(Path::new(flags.required("baseline-ckpt")?))?;
    let targets_ds = Dataset::load_csv(Path::new(flags.required("targets")?))?;
    let reps: usize = flags.parsed_required("reps")?;
    let seed: u64 = flags.parsed("seed", 0)?;
    let report_path = PathBuf::from(flags.required("report")?);
    let targets: Vec<Point2> = (0..targets_ds.len()).map(|i| targets_ds.target(i)).collect();
    let d = baselines::benchmark_diffusion(&ckpt, &targets, reps, seed)?;
    let m = baselines::benchmark_mlp(&mlp, &targets, reps)?;
    let csv = baselines::bench_report_csv(&[d, m]);
    std::fs::write(&report_path, &csv)?;
    print!("{csv}");
    println!("report {}", report_path.display());
    Ok(())
}

fn cmd_viz_noising(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["data", "timesteps", "steps", "bins", "out"])?;
    let ds = Dataset::load_csv(Path::new(flags.required("data")?))?;
    let t_max: usize = flags.parsed("timesteps", 80)?;
    let bins: usize = flags.parsed("bins", 20)?;
    let out = PathBuf::from(flags.required("out")?);
    let steps_spec = flags.get("steps").unwrap_or("0,20,40,80");
    // a literal 0 in the list refers to the always-present raw panel
    let mut steps = Vec::new();
    for part in steps_spec.split(',') {
        let v: usize = part
            .trim()
            .parse()
            .map_err(|_| usage(format!("flag --steps has invalid value {steps_spec}")))?;
        if v > 0 {
            steps.push(v);
        }
    }
    if steps.iter().any(|&t| t > t_max) {
        return Err(usage(format!("flag --steps contains a step beyond --timesteps {t_max}")));
    }
    let sched = NoiseSchedule::linear(t_max, 1e-4, 0.02)?;
    viz::emit_noising_histogram(&ds, &sched, &steps, bins, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
