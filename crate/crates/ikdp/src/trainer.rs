//! Training loop, metric logging, typed checkpoints, and held-out
//! evaluation.
//!
//! Each step draws a per-sample step index and noise, forms the noised
//! batch in closed form, runs the denoiser conditioned on each record's
//! target, and backpropagates the mean squared error against the clean
//! angles (or the injected noise, per parameterization). The logged
//! `dist` column is the mean tip-to-target distance of a few held-out
//! solves; it is diagnostic only and never backpropagated.
//!
//! Reference mode (`workers = 1`) is strictly sequential and
//! bit-deterministic. With more workers each batch is sharded, every
//! random draw still happens up front in sample order, and shard
//! gradients are reduced in shard order, so results are deterministic
//! for a fixed worker count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{CheckpointError, CheckpointFile};
use crate::dataset::{Dataset, DatasetError};
use crate::denoiser::{self, DenoiserConfig, DenoiserError, DenoiserParams};
use crate::diffusion::{
    self, DiffusionError, NoiseSchedule, Parameterization, SampleOptions, SampleResult,
};
use crate::kinematics::{
    forward_kinematics_slice, target_distance, ChainSpec, JointAngles, KinematicsError, Point2,
};
use crate::optim::{Adam, AdamConfig, GradBuffers};
use crate::tensor::{Rng, Shape, TensorError};

const SPLIT_SALT: u64 = 0x5350_4C49;
const SHUFFLE_SALT: u64 = 0x5348_5546;
const NOISE_SALT: u64 = 0x4E4F_4953;
const EVAL_SALT: u64 = 0x4556_414C;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no evaluation targets")]
    EmptyTargets,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint chain ({expected} joints) does not match data ({got} joints)")]
    ChainMismatch { expected: usize, got: usize },
    #[error("checkpoint is of kind {0}, expected {1}")]
    WrongKind(String, &'static str),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub param: Parameterization,
    pub seed: u64,
    /// Held-out fraction used for the logged dist metric.
    pub eval_fraction: f64,
    /// Steps between dist evaluations in the log.
    pub eval_every: u64,
    /// Held-out targets solved per dist evaluation.
    pub eval_targets: usize,
    /// 1 = bit-deterministic reference mode; >1 shards each batch.
    pub workers: usize,
    /// Report evaluated steps on stderr (never touches the log files).
    pub progress: bool,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl TrainingConfig {
    pub fn new(epochs: usize, seed: u64) -> TrainingConfig {
        TrainingConfig {
            epochs,
            batch_size: 128,
            lr: 1e-3,
            t_max: 80,
            beta_start: 1e-4,
            beta_end: 0.02,
            param: Parameterization::PredictX0,
            seed,
            eval_fraction: 0.02,
            eval_every: 100,
            eval_targets: 16,
            workers: 1,
            progress: false,
            checkpoint_path: None,
            log_path: None,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig("lr must be positive".into()));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(TrainError::BadConfig(
                "eval_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.workers == 0 {
            return Err(TrainError::BadConfig("workers must be positive".into()));
        }
        Ok(())
    }
}

/// One log line: training loss every step, dist when evaluated.
#[derive(Clone, Copy, Debug)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub dist: Option<f64>,
}

/// In-memory training log; serializes to the `step,loss,dist` CSV.
#[derive(Clone, Debug)]
pub struct TrainLog {
    pub mode: &'static str,
    pub workers: usize,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# mode={} threads={}", self.mode, self.workers);
        out.push_str("step,loss,dist\n");
        for row in &self.rows {
            match row.dist {
                Some(d) => {
                    let _ = writeln!(out, "{},{},{}", row.step, row.loss, d);
                }
                None => {
                    let _ = writeln!(out, "{},{},", row.step, row.loss);
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_csv_string())
    }
}

/// Self-describing training artifact: architecture, schedule, chain,
/// weights, and provenance. Loadable with no external config.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub bone_lengths: Vec<f32>,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub params: DenoiserParams,
    pub step_count: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn chain(&self) -> ChainSpec {
        ChainSpec::new(self.bone_lengths.clone()).expect("checkpoint chain is valid")
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
            .expect("checkpoint schedule is valid")
    }

    pub fn to_file(&self) -> CheckpointFile {
        let c = &self.config;
        let bones = self
            .bone_lengths
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let meta = vec![
            ("kind".to_string(), "diffusion".to_string()),
            ("n_joints".to_string(), c.n_joints.to_string()),
            ("bone_lengths".to_string(), bones),
            ("embed_dim".to_string(), c.embed_dim.to_string()),
            ("num_heads".to_string(), c.num_heads.to_string()),
            ("enc_layers".to_string(), c.enc_layers.to_string()),
            ("dec_layers".to_string(), c.dec_layers.to_string()),
            ("mlp_hidden".to_string(), c.mlp_hidden.to_string()),
            ("time_embed_dim".to_string(), c.time_embed_dim.to_string()),
            ("param".to_string(), c.param.as_str().to_string()),
            ("timesteps".to_string(), self.t_max.to_string()),
            ("beta_start".to_string(), self.beta_start.to_string()),
            ("beta_end".to_string(), self.beta_end.to_string()),
            ("step_count".to_string(), self.step_count.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        CheckpointFile {
            meta,
            tensors: self.params.set().clone(),
        }
    }

    pub fn from_file(file: CheckpointFile) -> Result<Checkpoint, TrainError> {
        let kind = file.require("kind")?;
        if kind != "diffusion" {
            return Err(TrainError::WrongKind(kind.to_string(), "diffusion"));
        }
        let parse_usize = |key: &'static str| -> Result<usize, TrainError> {
            file.require(key)?
                .parse()
                .map_err(|_| CheckpointError::BadMetadata(key.to_string()).into())
        };
        let parse_f64 = |key: &'static str| -> Result<f64, TrainError> {
            file.require(key)?
                .parse()
                .map_err(|_| CheckpointError::BadMetadata(key.to_string()).into())
        };
        let param = Parameterization::parse(file.require("param")?)
            .ok_or_else(|| CheckpointError::BadMetadata("param".to_string()))?;
        let config = DenoiserConfig {
            n_joints: parse_usize("n_joints")?,
            embed_dim: parse_usize("embed_dim")?,
            num_heads: parse_usize("num_heads")?,
            enc_layers: parse_usize("enc_layers")?,
            dec_layers: parse_usize("dec_layers")?,
            mlp_hidden: parse_usize("mlp_hidden")?,
            time_embed_dim: parse_usize("time_embed_dim")?,
            param,
        };
        let bone_lengths: Vec<f32> = file
            .require("bone_lengths")?
            .split(',')
            .map(|s| s.parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::BadMetadata("bone_lengths".to_string()))?;
        let step_count = file
            .require("step_count")?
            .parse()
            .map_err(|_| CheckpointError::BadMetadata("step_count".to_string()))?;
        let seed = file
            .require("seed")?
            .parse()
            .map_err(|_| CheckpointError::BadMetadata("seed".to_string()))?;
        let t_max = parse_usize("timesteps")?;
        let beta_start = parse_f64("beta_start")?;
        let beta_end = parse_f64("beta_end")?;
        let params = DenoiserParams::from_set(&config, file.tensors)?;
        Ok(Checkpoint {
            config,
            bone_lengths,
            t_max,
            beta_start,
            beta_end,
            params,
            step_count,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.to_file().save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        Checkpoint::from_file(CheckpointFile::load(path)?)
    }
}

struct ShardResult {
    grads: GradBuffers,
    loss: f64,
}

fn run_shard(
    params: &DenoiserParams,
    arch: &DenoiserConfig,
    chain: &ChainSpec,
    theta_t: &[f32],
    ts: &[usize],
    targets: &[Point2],
    truth: &[f32],
    weight: f64,
) -> Result<ShardResult, TrainError> {
    let mut bf = denoiser::forward_batch_graph(params, arch, chain, theta_t, ts, targets)?;
    let truth_leaf = bf
        .tape
        .leaf_slice(truth, Shape::d2(truth.len(), 1))?;
    let loss_node = bf.tape.mse(bf.output, truth_leaf)?;
    let loss = bf.tape.scalar_f64(loss_node);
    let grads = bf.tape.backward(loss_node)?;
    let mut gb = GradBuffers::zeros(params.set());
    for (i, node) in bf.param_nodes.iter().enumerate() {
        gb.add_scaled(i, grads.grad(*node), weight);
    }
    Ok(ShardResult {
        grads: gb,
        loss: loss * weight,
    })
}

/// Train with the default architecture for the dataset's joint count.
pub fn train(ds: &Dataset, cfg: &TrainingConfig) -> Result<(Checkpoint, TrainLog), TrainError> {
    let mut arch = DenoiserConfig::new(ds.num_joints());
    arch.param = cfg.param;
    train_with_arch(ds, cfg, &arch)
}

/// Train with an explicit architecture (used for shrunken test runs).
pub fn train_with_arch(
    ds: &Dataset,
    cfg: &TrainingConfig,
    arch: &DenoiserConfig,
) -> Result<(Checkpoint, TrainLog), TrainError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if arch.n_joints != ds.num_joints() {
        return Err(TrainError::ChainMismatch {
            expected: arch.n_joints,
            got: ds.num_joints(),
        });
    }
    let mut arch = *arch;
    arch.param = cfg.param;
    let chain = ds.chain().clone();
    let n = arch.n_joints;
    let sched = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let mut params = DenoiserParams::init(&arch, &mut Rng::new(cfg.seed))?;
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        params.set(),
    );

    // Held-out records feed the periodic dist metric only.
    let (train_ds, eval_ds) = match ds.split(1.0 - cfg.eval_fraction, cfg.seed ^ SPLIT_SALT) {
        Ok(parts) => parts,
        Err(_) => (ds.clone(), ds.clone()),
    };

    let mut shuffle_rng = Rng::new(cfg.seed ^ SHUFFLE_SALT);
    let mut noise_rng = Rng::new(cfg.seed ^ NOISE_SALT);
    let workers = cfg.workers;
    let mode = if workers == 1 { "reference" } else { "parallel" };
    let mut log = TrainLog {
        mode,
        workers,
        rows: Vec::new(),
    };

    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for _epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch_ids in order.chunks(cfg.batch_size) {
            let b = batch_ids.len();
            // all stochastic draws happen here, in sample order
            let mut theta_t = vec![0.0f32; b * n];
            let mut truth = vec![0.0f32; b * n];
            let mut ts = vec![0usize; b];
            let mut targets = vec![Point2::new(0.0, 0.0); b];
            for (s, &rec) in batch_ids.iter().enumerate() {
                let theta0 = train_ds.angles_row(rec);
                let t = noise_rng.uniform_step(cfg.t_max);
                let eps = noise_rng.randn(Shape::d1(n));
                let noised = diffusion::q_sample(theta0, t, eps.values(), &sched)?;
                theta_t[s * n..(s + 1) * n].copy_from_slice(&noised);
                ts[s] = t;
                targets[s] = train_ds.target(rec);
                let tr = &mut truth[s * n..(s + 1) * n];
                match cfg.param {
                    Parameterization::PredictX0 => tr.copy_from_slice(theta0),
                    Parameterization::PredictEps => tr.copy_from_slice(eps.values()),
                }
            }

            step += 1;
            let (mut total, loss) = if workers == 1 {
                let r = run_shard(&params, &arch, &chain, &theta_t, &ts, &targets, &truth, 1.0)?;
                (r.grads, r.loss)
            } else {
                let shard_len = b.div_ceil(workers);
                let mut results: Vec<Option<Result<ShardResult, TrainError>>> = Vec::new();
                results.resize_with(workers, || None);
                let params_ref = &params;
                let arch_ref = &arch;
                let chain_ref = &chain;
                std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    for (w, slot) in results.iter_mut().enumerate() {
                        let lo = (w * shard_len).min(b);
                        let hi = ((w + 1) * shard_len).min(b);
                        if lo >= hi {
                            continue;
                        }
                        let theta_s = &theta_t[lo * n..hi * n];
                        let truth_s = &truth[lo * n..hi * n];
                        let ts_s = &ts[lo..hi];
                        let tg_s = &targets[lo..hi];
                        let weight = (hi - lo) as f64 / b as f64;
                        handles.push(scope.spawn(move || {
                            *slot = Some(run_shard(
                                params_ref, arch_ref, chain_ref, theta_s, ts_s, tg_s, truth_s,
                                weight,
                            ));
                        }));
                    }
                    for h in handles {
                        let _ = h.join();
                    }
                });
                // reduce in shard order
                let mut total = GradBuffers::zeros(params.set());
                let mut loss = 0.0f64;
                for slot in results {
                    if let Some(r) = slot {
                        let r = r?;
                        total.merge(&r.grads);
                        loss += r.loss;
                    }
                }
                (total, loss)
            };
            let _ = &mut total;

            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            adam.step(params.set_mut(), &total)?;

            let dist = if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !eval_ds.is_empty() {
                Some(dist_probe(
                    &params, &arch, &chain, &sched, &eval_ds, cfg.eval_targets, cfg.seed, step,
                )?)
            } else {
                None
            };
            if cfg.progress {
                if let Some(d) = dist {
                    eprintln!("step {step}: loss {loss:.6} dist {d:.4}");
                }
            }
            log.rows.push(LogRow { step, loss, dist });
        }
    }

    let ckpt = Checkpoint {
        config: arch,
        bone_lengths: chain.bone_lengths().to_vec(),
        t_max: cfg.t_max,
        beta_start: cfg.beta_start,
        beta_end: cfg.beta_end,
        params,
        step_count: step,
        seed: cfg.seed,
    };
    if let Some(path) = &cfg.checkpoint_path {
        ckpt.save(path)?;
    }
    if let Some(path) = &cfg.log_path {
        log.save(path)?;
    }
    Ok((ckpt, log))
}

// Mean tip distance over a few held-out targets, one solve each.
#[allow(clippy::too_many_arguments)]
fn dist_probe(
    params: &DenoiserParams,
    arch: &DenoiserConfig,
    chain: &ChainSpec,
    sched: &NoiseSchedule,
    eval_ds: &Dataset,
    k: usize,
    seed: u64,
    step: u64,
) -> Result<f64, TrainError> {
    let k = k.min(eval_ds.len()).max(1);
    let n = arch.n_joints;
    let mut acc = 0.0f64;
    for i in 0..k {
        let target = eval_ds.target(i);
        let mut rng = Rng::new(seed ^ EVAL_SALT ^ (step.wrapping_mul(1315423911)) ^ i as u64);
        let mut cb = |state: &[f32], t: usize, cond: Point2| {
            denoiser::forward(params, arch, chain, state, t, cond)
                .unwrap_or_else(|_| vec![f32::NAN; n])
        };
        let out = diffusion::sample(
            &mut cb,
            n,
            target,
            sched,
            arch.param,
            &mut rng,
            SampleOptions::default(),
        )?;
        let tip = forward_kinematics_slice(chain, &out.theta0);
        acc += target_distance(tip, target);
    }
    Ok(acc / k as f64)
}

/// One full reverse-process solve for a target.
pub fn solve(
    ckpt: &Checkpoint,
    target: Point2,
    rng: &mut Rng,
    opts: SampleOptions,
) -> Result<SampleResult, TrainError> {
    let chain = ckpt.chain();
    let sched = ckpt.schedule();
    let n = ckpt.config.n_joints;
    // surface config problems eagerly with their own error types
    denoiser::forward(
        &ckpt.params,
        &ckpt.config,
        &chain,
        &vec![0.0; n],
        sched.t_max(),
        target,
    )?;
    let mut cb = |state: &[f32], t: usize, cond: Point2| {
        denoiser::forward(&ckpt.params, &ckpt.config, &chain, state, t, cond)
            .unwrap_or_else(|_| vec![f32::NAN; n])
    };
    Ok(diffusion::sample(
        &mut cb, n, target, &sched, ckpt.config.param, rng, opts,
    )?)
}

/// Evaluation metrics over a held-out set, reported as means.
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub n_targets: usize,
    pub samples_per_target: usize,
    pub mean_angle_distance: f64,
    pub mean_target_distance: f64,
}

impl EvalReport {
    /// CSV with explicit mean-prefixed headers.
    pub fn to_csv_string(&self) -> String {
        format!(
            "n_targets,samples_per_target,mean_angle_distance,mean_target_distance\n{},{},{},{}\n",
            self.n_targets,
            self.samples_per_target,
            self.mean_angle_distance,
            self.mean_target_distance
        )
    }
}

pub(crate) fn eval_records<F>(
    ds: &Dataset,
    samples_per_target: usize,
    workers: usize,
    solve_one: F,
) -> Result<EvalReport, TrainError>
where
    F: Fn(usize, usize) -> Result<Vec<f32>, TrainError> + Sync,
{
    if ds.is_empty() {
        return Err(TrainError::EmptyTargets);
    }
    let spt = samples_per_target.max(1);
    let count = ds.len();
    let workers = workers.max(1).min(count);
    let shard_len = count.div_ceil(workers);
    // per-target metric pairs, reduced sequentially afterwards so the
    // result is independent of the worker count
    let mut per_target: Vec<Result<(f64, f64), TrainError>> = Vec::new();
    per_target.resize_with(count, || Ok((0.0, 0.0)));
    let solve_ref = &solve_one;
    std::thread::scope(|scope| {
        let mut rest: &mut [Result<(f64, f64), TrainError>] = &mut per_target;
        let mut lo = 0usize;
        let mut handles = Vec::new();
        while lo < count {
            let hi = (lo + shard_len).min(count);
            let (shard, tail) = rest.split_at_mut(hi - lo);
            rest = tail;
            let base = lo;
            handles.push(scope.spawn(move || {
                for (off, slot) in shard.iter_mut().enumerate() {
                    let i = base + off;
                    let run = || -> Result<(f64, f64), TrainError> {
                        let truth = JointAngles::new(ds.angles_row(i).to_vec())?;
                        let mut angle_acc = 0.0f64;
                        let mut tip_acc = 0.0f64;
                        for s in 0..spt {
                            let theta = solve_one_checked(solve_ref, i, s, ds.num_joints())?;
                            let got = JointAngles::new(theta.clone())?;
                            angle_acc += crate::kinematics::angle_distance(&truth, &got)?;
                            let tip = forward_kinematics_slice(ds.chain(), &theta);
                            tip_acc += target_distance(tip, ds.target(i));
                        }
                        Ok((angle_acc, tip_acc))
                    };
                    *slot = run();
                }
            }));
            lo = hi;
        }
        for h in handles {
            let _ = h.join();
        }
    });
    let mut angle_acc = 0.0f64;
    let mut tip_acc = 0.0f64;
    for slot in per_target {
        let (a, t) = slot?;
        angle_acc += a;
        tip_acc += t;
    }
    let denom = (count * spt) as f64;
    Ok(EvalReport {
        n_targets: count,
        samples_per_target: spt,
        mean_angle_distance: angle_acc / denom,
        mean_target_distance: tip_acc / denom,
    })
}

fn solve_one_checked<F>(
    solve_one: &F,
    i: usize,
    s: usize,
    n: usize,
) -> Result<Vec<f32>, TrainError>
where
    F: Fn(usize, usize) -> Result<Vec<f32>, TrainError>,
{
    let theta = solve_one(i, s)?;
    if theta.len() != n {
        return Err(TrainError::ChainMismatch { expected: n, got: theta.len() });
    }
    Ok(theta)
}

/// Solve every record's target and report mean angle and tip distances.
/// Per-target sampling seeds derive from `seed`, target index, and
/// sample index, so results do not depend on the worker count.
pub fn eval(
    ckpt: &Checkpoint,
    ds: &Dataset,
    samples_per_target: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalReport, TrainError> {
    if ckpt.config.n_joints != ds.num_joints() {
        return Err(TrainError::ChainMismatch {
            expected: ckpt.config.n_joints,
            got: ds.num_joints(),
        });
    }
    let chain = ckpt.chain();
    let sched = ckpt.schedule();
    let n = ckpt.config.n_joints;
    let spt = samples_per_target.max(1);
    eval_records(ds, spt, workers, |i, s| {
        let mut rng = Rng::new(
            seed.wrapping_add(((i * spt + s) as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let mut cb = |state: &[f32], t: usize, cond: Point2| {
            denoiser::forward(&ckpt.params, &ckpt.config, &chain, state, t, cond)
                .unwrap_or_else(|_| vec![f32::NAN; n])
        };
        let out = diffusion::sample(
            &mut cb,
            n,
            ds.target(i),
            &sched,
            ckpt.config.param,
            &mut rng,
            SampleOptions::default(),
        )?;
        Ok(out.theta0)
    })
}
