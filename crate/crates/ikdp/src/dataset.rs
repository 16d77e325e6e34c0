//! Generation, storage, and loading of ground-truth (theta, target) records.
//!
//! Records are produced shard-by-shard with `shard_seed = seed XOR
//! shard_index`, so a sharded parallel generator and the sequential path
//! emit bit-identical datasets. Targets are stored explicitly; loading
//! re-checks forward-kinematics consistency of every row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::kinematics::{
    forward_kinematics_slice, ChainSpec, JointAngles, KinematicsError, Point2,
};
use crate::tensor::Rng;

/// Records per generation shard.
const SHARD: usize = 65_536;

/// Load-time forward-kinematics consistency tolerance.
const FK_LOAD_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset header: {0:?}")]
    MalformedHeader(String),
    #[error("row {row}: expected {expected} columns, got {got}")]
    ColumnCount { row: usize, expected: usize, got: usize },
    #[error("row {row}: non-finite or unparseable field {column}")]
    NonFiniteField { row: usize, column: String },
    #[error("row {row}: stored target is {distance:.6} away from the forward-kinematics tip")]
    FkInconsistent { row: usize, distance: f64 },
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("split would leave one side empty")]
    DegenerateSplit,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// One ground-truth pair: joint angles and the tip they reach.
#[derive(Clone, Debug)]
pub struct IKRecord {
    pub theta: JointAngles,
    pub target: Point2,
}

/// An ordered set of records over one chain, with the seed that made it.
#[derive(Clone, Debug)]
pub struct Dataset {
    chain: ChainSpec,
    seed: u64,
    // count x N angles, row-major, plus one (t_x, t_y) per record.
    angles: Vec<f32>,
    targets: Vec<(f32, f32)>,
}

impl Dataset {
    /// Draw `count` records with every angle independent uniform over
    /// [-pi, pi); targets come from a single vectorized pass over the
    /// angle block. Deterministic given `seed`.
    pub fn generate(chain: &ChainSpec, count: usize, seed: u64) -> Dataset {
        let n = chain.num_joints();
        let mut angles = vec![0.0f32; count * n];
        let mut shard_start = 0usize;
        let mut shard_index = 0u64;
        while shard_start < count {
            let len = SHARD.min(count - shard_start);
            let mut rng = Rng::new(seed ^ shard_index);
            let lo = -std::f64::consts::PI;
            let span = std::f64::consts::TAU;
            for v in &mut angles[shard_start * n..(shard_start + len) * n] {
                *v = (lo + span * rng.next_f64()) as f32;
            }
            shard_start += len;
            shard_index += 1;
        }
        let mut targets = Vec::with_capacity(count);
        for row in angles.chunks_exact(n.max(1)) {
            let tip = forward_kinematics_slice(chain, row);
            targets.push((tip.x as f32, tip.y as f32));
        }
        if n == 0 {
            targets.clear();
        }
        Dataset {
            chain: chain.clone(),
            seed,
            angles,
            targets,
        }
    }

    pub fn chain(&self) -> &ChainSpec {
        &self.chain
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.chain.num_joints()
    }

    pub fn angles_row(&self, i: usize) -> &[f32] {
        let n = self.num_joints();
        &self.angles[i * n..(i + 1) * n]
    }

    pub fn target(&self, i: usize) -> Point2 {
        let (x, y) = self.targets[i];
        Point2::new(x as f64, y as f64)
    }

    pub fn record(&self, i: usize) -> IKRecord {
        IKRecord {
            theta: JointAngles::new(self.angles_row(i).to_vec()).expect("stored angles finite"),
            target: self.target(i),
        }
    }

    /// Copy keeping only records the predicate accepts.
    pub fn filtered(&self, mut keep: impl FnMut(&IKRecord) -> bool) -> Dataset {
        let mut angles = Vec::new();
        let mut targets = Vec::new();
        for i in 0..self.len() {
            if keep(&self.record(i)) {
                angles.extend_from_slice(self.angles_row(i));
                targets.push(self.targets[i]);
            }
        }
        Dataset {
            chain: self.chain.clone(),
            seed: self.seed,
            angles,
            targets,
        }
    }

    /// Seeded shuffle, then split at floor(fraction * len). The two
    /// parts are disjoint and exhaustive.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DatasetError::BadFraction(train_fraction));
        }
        let k = (train_fraction * self.len() as f64) as usize;
        if k == 0 || k == self.len() {
            return Err(DatasetError::DegenerateSplit);
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        let gather = |ids: &[usize]| -> Dataset {
            let n = self.num_joints();
            let mut angles = Vec::with_capacity(ids.len() * n);
            let mut targets = Vec::with_capacity(ids.len());
            for &i in ids {
                angles.extend_from_slice(self.angles_row(i));
                targets.push(self.targets[i]);
            }
            Dataset {
                chain: self.chain.clone(),
                seed: self.seed,
                angles,
                targets,
            }
        };
        Ok((gather(&idx[..k]), gather(&idx[k..])))
    }

    fn expected_header(n: usize) -> String {
        let mut h = String::new();
        for i in 0..n {
            let _ = write!(h, "theta_{i},");
        }
        h.push_str("t_x,t_y");
        h
    }

    /// Write the pinned CSV layout: a version comment, a header, then one
    /// row per record with shortest round-trip f32 decimals, LF endings.
    pub fn save_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let n = self.num_joints();
        let mut out = String::new();
        let _ = writeln!(out, "# ikdp-dataset v1 N={} seed={}", n, self.seed);
        let _ = writeln!(out, "{}", Self::expected_header(n));
        for i in 0..self.len() {
            for &a in self.angles_row(i) {
                let _ = write!(out, "{a},");
            }
            let (tx, ty) = self.targets[i];
            let _ = writeln!(out, "{tx},{ty}");
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Load a CSV written by [`Dataset::save_csv`], validating the header
    /// and every row's forward-kinematics consistency (unit bones).
    pub fn load_csv(path: &Path) -> Result<Dataset, DatasetError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let comment = lines
            .next()
            .ok_or_else(|| DatasetError::MalformedHeader(String::new()))?;
        let (n, seed) = parse_comment(comment)?;
        let chain = ChainSpec::unit(n)?;
        let header = lines
            .next()
            .ok_or_else(|| DatasetError::MalformedHeader(String::from("missing column header")))?;
        if header != Self::expected_header(n) {
            return Err(DatasetError::MalformedHeader(header.to_string()));
        }
        let mut angles = Vec::new();
        let mut targets = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n + 2 {
                return Err(DatasetError::ColumnCount {
                    row,
                    expected: n + 2,
                    got: fields.len(),
                });
            }
            let mut parsed = Vec::with_capacity(n + 2);
            for (col, field) in fields.iter().enumerate() {
                let v: f32 = field.parse().map_err(|_| DatasetError::NonFiniteField {
                    row,
                    column: column_name(col, n),
                })?;
                if !v.is_finite() {
                    return Err(DatasetError::NonFiniteField {
                        row,
                        column: column_name(col, n),
                    });
                }
                parsed.push(v);
            }
            let tip = forward_kinematics_slice(&chain, &parsed[..n]);
            let stored = Point2::new(parsed[n] as f64, parsed[n + 1] as f64);
            let d = crate::kinematics::target_distance(tip, stored);
            if d > FK_LOAD_TOL {
                return Err(DatasetError::FkInconsistent { row, distance: d });
            }
            angles.extend_from_slice(&parsed[..n]);
            targets.push((parsed[n], parsed[n + 1]));
        }
        Ok(Dataset {
            chain,
            seed,
            angles,
            targets,
        })
    }
}

fn column_name(col: usize, n: usize) -> String {
    if col < n {
        format!("theta_{col}")
    } else if col == n {
        "t_x".to_string()
    } else {
        "t_y".to_string()
    }
}

fn parse_comment(line: &str) -> Result<(usize, u64), DatasetError> {
    let bad = || DatasetError::MalformedHeader(line.to_string());
    let rest = line.strip_prefix("# ikdp-dataset v1 ").ok_or_else(bad)?;
    let mut n = None;
    let mut seed = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("N=") {
            n = v.parse::<usize>().ok();
        } else if let Some(v) = part.strip_prefix("seed=") {
            seed = v.parse::<u64>().ok();
        }
    }
    match (n, seed) {
        (Some(n), Some(seed)) if n >= 1 => Ok((n, seed)),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{forward_kinematics, target_distance};
    use tempfile::tempdir;

    #[test]
    fn single_record_satisfies_fk() {
        let chain = ChainSpec::unit(2).unwrap();
        let ds = Dataset::generate(&chain, 1, 9);
        let rec = ds.record(0);
        let tip = forward_kinematics(&chain, &rec.theta).unwrap();
        assert!(target_distance(tip, rec.target) < 1e-6);
    }

    #[test]
    fn generation_is_deterministic() {
        let chain = ChainSpec::unit(3).unwrap();
        let a = Dataset::generate(&chain, 70_000, 4);
        let b = Dataset::generate(&chain, 70_000, 4);
        assert_eq!(a.angles, b.angles);
        assert_eq!(a.targets, b.targets);
    }

    #[test]
    fn shard_seeding_matches_documented_derivation() {
        // second shard begins at 65_536 and must restart from seed ^ 1
        let chain = ChainSpec::unit(1).unwrap();
        let ds = Dataset::generate(&chain, SHARD + 10, 12);
        let mut rng = Rng::new(12u64 ^ 1);
        let expect = (-std::f64::consts::PI + std::f64::consts::TAU * rng.next_f64()) as f32;
        assert_eq!(ds.angles_row(SHARD)[0], expect);
    }

    #[test]
    fn angle_means_are_near_zero() {
        let chain = ChainSpec::unit(4).unwrap();
        let ds = Dataset::generate(&chain, 100_000, 7);
        for j in 0..4 {
            let mean: f64 = (0..ds.len()).map(|i| ds.angles_row(i)[j] as f64).sum::<f64>()
                / ds.len() as f64;
            assert!(mean.abs() < 0.02, "column {j} mean {mean}");
        }
    }

    #[test]
    fn every_target_is_reachable() {
        let chain = ChainSpec::unit(4).unwrap();
        let ds = Dataset::generate(&chain, 20_000, 3);
        for i in 0..ds.len() {
            assert!(crate::kinematics::reachable(&chain, ds.target(i)));
        }
    }

    #[test]
    fn arccos_of_tx_is_uniform_for_single_joint() {
        // Kolmogorov-Smirnov against the uniform CDF on [0, pi].
        let chain = ChainSpec::unit(1).unwrap();
        let ds = Dataset::generate(&chain, 100_000, 42);
        let mut xs: Vec<f64> = (0..ds.len())
            .map(|i| (ds.target(i).x.clamp(-1.0, 1.0)).acos())
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = x / std::f64::consts::PI;
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            ks = ks.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn generation_speed() {
        let chain = ChainSpec::unit(8).unwrap();
        let start = std::time::Instant::now();
        let ds = Dataset::generate(&chain, 100_000, 1);
        let elapsed = start.elapsed();
        assert_eq!(ds.len(), 100_000);
        assert!(elapsed.as_secs_f64() < 1.0, "generation took {elapsed:?}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let chain = ChainSpec::unit(3).unwrap();
        let ds = Dataset::generate(&chain, 500, 5);
        ds.save_csv(&path).unwrap();
        let loaded = Dataset::load_csv(&path).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.seed(), 5);
        for i in 0..ds.len() {
            for (a, b) in ds.angles_row(i).iter().zip(loaded.angles_row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        // shortest round-trip decimals reload to identical bits
        assert_eq!(ds.angles, loaded.angles);
    }

    #[test]
    fn csv_rejects_wrong_column_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(
            &path,
            "# ikdp-dataset v1 N=2 seed=0\ntheta_0,theta_1,t_x,t_y\n0,0,0,2,0\n",
        )
        .unwrap();
        match Dataset::load_csv(&path) {
            Err(DatasetError::ColumnCount { expected: 4, got: 5, .. }) => {}
            other => panic!("expected column-count error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_unreachable_row() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("far.csv");
        fs::write(
            &path,
            "# ikdp-dataset v1 N=2 seed=0\ntheta_0,theta_1,t_x,t_y\n0,0,5,0\n",
        )
        .unwrap();
        match Dataset::load_csv(&path) {
            Err(DatasetError::FkInconsistent { row: 0, .. }) => {}
            other => panic!("expected FK-inconsistency error, got {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_bad_header_and_fields() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.csv");
        fs::write(&path, "N=2 seed=0\ntheta_0,theta_1,t_x,t_y\n").unwrap();
        assert!(matches!(
            Dataset::load_csv(&path),
            Err(DatasetError::MalformedHeader(_))
        ));

        fs::write(
            &path,
            "# ikdp-dataset v1 N=2 seed=0\ntheta_0,theta_1,t_x,t_y\n0,NaN,1,1\n",
        )
        .unwrap();
        match Dataset::load_csv(&path) {
            Err(DatasetError::NonFiniteField { row: 0, column }) => {
                assert_eq!(column, "theta_1");
            }
            other => panic!("expected non-finite-field error, got {other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_union() {
        let chain = ChainSpec::unit(2).unwrap();
        let ds = Dataset::generate(&chain, 10, 8);
        let (train, eval) = ds.split(0.8, 1).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(eval.len(), 2);

        let mut all: Vec<Vec<u32>> = Vec::new();
        for part in [&train, &eval] {
            for i in 0..part.len() {
                all.push(part.angles_row(i).iter().map(|v| v.to_bits()).collect());
            }
        }
        let mut orig: Vec<Vec<u32>> = (0..ds.len())
            .map(|i| ds.angles_row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);

        // identical seeds give identical splits
        let (t2, _) = ds.split(0.8, 1).unwrap();
        assert_eq!(train.angles, t2.angles);
    }

    #[test]
    fn degenerate_splits_rejected() {
        let chain = ChainSpec::unit(2).unwrap();
        let ds = Dataset::generate(&chain, 3, 8);
        assert!(matches!(ds.split(0.01, 0), Err(DatasetError::DegenerateSplit)));
        assert!(matches!(ds.split(1.5, 0), Err(DatasetError::BadFraction(_))));
    }
}
