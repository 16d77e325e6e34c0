//! Direct-regression MLP baseline and wall-clock solve benchmarking.
//!
//! The baseline maps a normalized target straight to joint angles
//! (2 -> 256 -> 256 -> N with GELU) and trains on the same records as
//! the diffusion model. It stands in for the single-shot learned
//! solvers the diffusion approach is compared against: one forward
//! pass per solve, so it is fast, but it regresses the conditional
//! mean of a multi-solution posterior.

use std::path::Path;
use std::time::Instant;

use crate::checkpoint::{CheckpointError, CheckpointFile};
use crate::dataset::Dataset;
use crate::denoiser::normalized_target;
use crate::diffusion::SampleOptions;
use crate::kinematics::{forward_kinematics_slice, target_distance, ChainSpec, Point2};
use crate::optim::{Adam, AdamConfig, GradBuffers, ParamSet};
use crate::tensor::{Array, Rng, Shape};
use crate::autograd::{NodeId, Tape};
use crate::trainer::{Checkpoint, LogRow, TrainError, TrainLog};

#[derive(Clone, Debug)]
pub struct MlpBaselineConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl MlpBaselineConfig {
    pub fn new(epochs: usize, seed: u64) -> MlpBaselineConfig {
        MlpBaselineConfig {
            hidden: vec![256, 256],
            lr: 1e-3,
            epochs,
            batch_size: 128,
            seed,
        }
    }
}

/// Baseline weights in the shared checkpoint container (kind = mlp).
#[derive(Clone, Debug)]
pub struct MlpCheckpoint {
    pub bone_lengths: Vec<f32>,
    pub hidden: Vec<usize>,
    pub params: ParamSet,
    pub step_count: u64,
    pub seed: u64,
}

fn layer_dims(hidden: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::new();
    let mut prev = 2;
    for &h in hidden {
        dims.push((prev, h));
        prev = h;
    }
    dims.push((prev, n));
    dims
}

fn init_mlp(hidden: &[usize], n: usize, rng: &mut Rng) -> ParamSet {
    let mut set = ParamSet::new();
    for (i, (fan_in, fan_out)) in layer_dims(hidden, n).into_iter().enumerate() {
        let std = (1.0 / fan_in as f64).sqrt() as f32;
        let mut w = rng.randn(Shape::d2(fan_in, fan_out));
        for v in w.values_mut() {
            *v *= std;
        }
        set.push(&format!("l{i}.w"), w);
        set.push(&format!("l{i}.b"), Array::zeros(Shape::d1(fan_out)));
    }
    set
}

fn mlp_graph<'a>(
    set: &'a ParamSet,
    n_layers: usize,
    inputs: &'a [f32],
    batch: usize,
) -> Result<(Tape<'a>, NodeId, Vec<NodeId>), TrainError> {
    let mut tape = Tape::new();
    let pn: Vec<NodeId> = (0..set.len()).map(|i| tape.param(set.array(i))).collect();
    let mut x = tape.leaf_slice(inputs, Shape::d2(batch, 2))?;
    for l in 0..n_layers {
        x = tape.linear(x, pn[2 * l], pn[2 * l + 1])?;
        if l + 1 < n_layers {
            x = tape.gelu(x);
        }
    }
    Ok((tape, x, pn))
}

impl MlpCheckpoint {
    pub fn chain(&self) -> ChainSpec {
        ChainSpec::new(self.bone_lengths.clone()).expect("checkpoint chain is valid")
    }

    pub fn n_joints(&self) -> usize {
        self.bone_lengths.len()
    }

    /// One forward pass: target angles for one target.
    pub fn solve(&self, target: Point2) -> Result<Vec<f32>, TrainError> {
        let chain = self.chain();
        let inp = normalized_target(&chain, target);
        let (tape, out, _) = mlp_graph(&self.params, self.hidden.len() + 1, &inp, 1)?;
        Ok(tape.values(out).to_vec())
    }

    pub fn to_file(&self) -> CheckpointFile {
        let bones = self
            .bone_lengths
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let hidden = self
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        CheckpointFile {
            meta: vec![
                ("kind".to_string(), "mlp".to_string()),
                ("n_joints".to_string(), self.n_joints().to_string()),
                ("bone_lengths".to_string(), bones),
                ("hidden".to_string(), hidden),
                ("step_count".to_string(), self.step_count.to_string()),
                ("seed".to_string(), self.seed.to_string()),
            ],
            tensors: self.params.clone(),
        }
    }

    pub fn from_file(file: CheckpointFile) -> Result<MlpCheckpoint, TrainError> {
        let kind = file.require("kind")?;
        if kind != "mlp" {
            return Err(TrainError::WrongKind(kind.to_string(), "mlp"));
        }
        let bone_lengths: Vec<f32> = file
            .require("bone_lengths")?
            .split(',')
            .map(|s| s.parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::BadMetadata("bone_lengths".to_string()))?;
        let hidden: Vec<usize> = file
            .require("hidden")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::BadMetadata("hidden".to_string()))?;
        let step_count = file
            .require("step_count")?
            .parse()
            .map_err(|_| CheckpointError::BadMetadata("step_count".to_string()))?;
        let seed = file
            .require("seed")?
            .parse()
            .map_err(|_| CheckpointError::BadMetadata("seed".to_string()))?;
        let n = bone_lengths.len();
        for (i, (fan_in, fan_out)) in layer_dims(&hidden, n).into_iter().enumerate() {
            let widx = file
                .tensors
                .index_of(&format!("l{i}.w"))
                .ok_or_else(|| CheckpointError::BadMetadata(format!("missing l{i}.w")))?;
            if file.tensors.array(widx).shape() != Shape::d2(fan_in, fan_out) {
                return Err(CheckpointError::BadMetadata(format!(
                    "l{i}.w shape {} does not match hidden widths",
                    file.tensors.array(widx).shape()
                ))
                .into());
            }
        }
        Ok(MlpCheckpoint {
            bone_lengths,
            hidden,
            params: file.tensors,
            step_count,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.to_file().save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MlpCheckpoint, TrainError> {
        MlpCheckpoint::from_file(CheckpointFile::load(path)?)
    }
}

/// Train target -> angles regression with MSE on the angles.
pub fn mlp_train(ds: &Dataset, cfg: &MlpBaselineConfig) -> Result<(MlpCheckpoint, TrainLog), TrainError> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.hidden.is_empty() || cfg.hidden.iter().any(|&h| h == 0) {
        return Err(TrainError::BadConfig("hidden widths must be positive".into()));
    }
    let n = ds.num_joints();
    let chain = ds.chain().clone();
    let mut set = init_mlp(&cfg.hidden, n, &mut Rng::new(cfg.seed));
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &set);
    let mut shuffle_rng = Rng::new(cfg.seed ^ 0x4D4C50);
    let n_layers = cfg.hidden.len() + 1;

    let mut log = TrainLog { mode: "reference", workers: 1, rows: Vec::new() };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut step = 0u64;
    for _epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch_ids in order.chunks(cfg.batch_size) {
            let b = batch_ids.len();
            let mut inputs = Vec::with_capacity(b * 2);
            let mut truth = Vec::with_capacity(b * n);
            for &rec in batch_ids {
                inputs.extend_from_slice(&normalized_target(&chain, ds.target(rec)));
                truth.extend_from_slice(ds.angles_row(rec));
            }
            let (mut tape, out, pn) = mlp_graph(&set, n_layers, &inputs, b)?;
            let truth_leaf = tape.leaf_slice(&truth, Shape::d2(b, n))?;
            let loss_node = tape.mse(out, truth_leaf)?;
            let loss = tape.scalar_f64(loss_node);
            let grads = tape.backward(loss_node)?;
            let mut gb = GradBuffers::zeros(&set);
            for (i, node) in pn.iter().enumerate() {
                gb.add_scaled(i, grads.grad(*node), 1.0);
            }
            step += 1;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            adam.step(&mut set, &gb)?;
            log.rows.push(LogRow { step, loss, dist: None });
        }
    }
    Ok((
        MlpCheckpoint {
            bone_lengths: chain.bone_lengths().to_vec(),
            hidden: cfg.hidden.clone(),
            params: set,
            step_count: step,
            seed: cfg.seed,
        },
        log,
    ))
}

/// Mean tip distance of the baseline over a record set.
pub fn mlp_eval(ckpt: &MlpCheckpoint, ds: &Dataset) -> Result<crate::trainer::EvalReport, TrainError> {
    if ckpt.n_joints() != ds.num_joints() {
        return Err(TrainError::ChainMismatch {
            expected: ckpt.n_joints(),
            got: ds.num_joints(),
        });
    }
    crate::trainer::eval_records(ds, 1, 1, |i, _s| ckpt.solve(ds.target(i)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Diffusion,
    Mlp,
}

impl SolverKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::Diffusion => "diffusion",
            SolverKind::Mlp => "mlp",
        }
    }
}

/// Wall-clock statistics of single-target solves.
#[derive(Clone, Debug)]
pub struct BenchStats {
    pub solver: SolverKind,
    pub n_joints: usize,
    pub t_max: Option<usize>,
    pub mean_target_distance: f64,
    pub mean_seconds_per_solve: f64,
    pub median_seconds_per_solve: f64,
}

const WARMUP_SOLVES: usize = 10;

fn finish_stats(
    solver: SolverKind,
    n_joints: usize,
    t_max: Option<usize>,
    mut times: Vec<f64>,
    dists: Vec<f64>,
) -> BenchStats {
    let mean_t = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_t = times[times.len() / 2];
    let mean_d = dists.iter().sum::<f64>() / dists.len() as f64;
    BenchStats {
        solver,
        n_joints,
        t_max,
        mean_target_distance: mean_d,
        mean_seconds_per_solve: mean_t,
        median_seconds_per_solve: median_t,
    }
}

/// Time diffusion solves: `repetitions` passes over the targets, one
/// sample per target, after warmup solves that are excluded.
pub fn benchmark_diffusion(
    ckpt: &Checkpoint,
    targets: &[Point2],
    repetitions: usize,
    seed: u64,
) -> Result<BenchStats, TrainError> {
    if repetitions == 0 || targets.is_empty() {
        return Err(TrainError::BadConfig(
            "benchmark needs at least one repetition and one target".into(),
        ));
    }
    let chain = ckpt.chain();
    let mut rng = Rng::new(seed);
    for w in 0..WARMUP_SOLVES {
        let t = targets[w % targets.len()];
        crate::trainer::solve(ckpt, t, &mut rng, SampleOptions::default())?;
    }
    let mut times = Vec::with_capacity(repetitions * targets.len());
    let mut dists = Vec::with_capacity(times.capacity());
    for _ in 0..repetitions {
        for &t in targets {
            let start = Instant::now();
            let out = crate::trainer::solve(ckpt, t, &mut rng, SampleOptions::default())?;
            times.push(start.elapsed().as_secs_f64());
            let tip = forward_kinematics_slice(&chain, &out.theta0);
            dists.push(target_distance(tip, t));
        }
    }
    Ok(finish_stats(
        SolverKind::Diffusion,
        ckpt.config.n_joints,
        Some(ckpt.t_max),
        times,
        dists,
    ))
}

/// Time baseline solves under the same protocol.
pub fn benchmark_mlp(
    ckpt: &MlpCheckpoint,
    targets: &[Point2],
    repetitions: usize,
) -> Result<BenchStats, TrainError> {
    if repetitions == 0 || targets.is_empty() {
        return Err(TrainError::BadConfig(
            "benchmark needs at least one repetition and one target".into(),
        ));
    }
    let chain = ckpt.chain();
    for w in 0..WARMUP_SOLVES {
        ckpt.solve(targets[w % targets.len()])?;
    }
    let mut times = Vec::with_capacity(repetitions * targets.len());
    let mut dists = Vec::with_capacity(times.capacity());
    for _ in 0..repetitions {
        for &t in targets {
            let start = Instant::now();
            let theta = ckpt.solve(t)?;
            times.push(start.elapsed().as_secs_f64());
            let tip = forward_kinematics_slice(&chain, &theta);
            dists.push(target_distance(tip, t));
        }
    }
    Ok(finish_stats(SolverKind::Mlp, ckpt.n_joints(), None, times, dists))
}

/// The benchmark report layout, one row per solver, with the host noted.
pub fn bench_report_csv(stats: &[BenchStats]) -> String {
    let mut out = format!(
        "# arch={} os={} threads=1\n",
        std::env::consts::ARCH,
        std::env::consts::OS
    );
    out.push_str("solver,n_joints,T,mean_target_distance,mean_seconds_per_solve\n");
    for s in stats {
        let t = s.t_max.map(|t| t.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.solver.as_str(),
            s.n_joints,
            t,
            s.mean_target_distance,
            s.mean_seconds_per_solve
        ));
    }
    out
}
