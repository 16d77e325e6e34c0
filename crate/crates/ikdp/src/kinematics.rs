//! Closed-form planar forward kinematics and the two evaluation metrics.
//!
//! Angles are absolute: each bone's angle is measured from the +x axis in
//! the world frame, so the tip is simply `(sum b cos theta, sum b sin theta)`.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("chain needs at least one joint")]
    EmptyChain,
    #[error("bone length must be strictly positive, got {0}")]
    NonPositiveBone(f32),
    #[error("angle count {got} does not match chain joint count {expected}")]
    JointCountMismatch { expected: usize, got: usize },
    #[error("non-finite joint angle at index {0}")]
    NonFiniteAngle(usize),
}

/// Joint count and per-bone lengths of a planar chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSpec {
    bone_lengths: Vec<f32>,
}

impl ChainSpec {
    pub fn new(bone_lengths: Vec<f32>) -> Result<ChainSpec, KinematicsError> {
        if bone_lengths.is_empty() {
            return Err(KinematicsError::EmptyChain);
        }
        if let Some(&bad) = bone_lengths.iter().find(|b| !(**b > 0.0)) {
            return Err(KinematicsError::NonPositiveBone(bad));
        }
        Ok(ChainSpec { bone_lengths })
    }

    /// Chain of `n` unit-length bones, the configuration used throughout.
    pub fn unit(n: usize) -> Result<ChainSpec, KinematicsError> {
        ChainSpec::new(vec![1.0; n.max(0)])
    }

    pub fn num_joints(&self) -> usize {
        self.bone_lengths.len()
    }

    pub fn bone_lengths(&self) -> &[f32] {
        &self.bone_lengths
    }

    /// Total reach: the radius of the disk of attainable tips.
    pub fn reach(&self) -> f64 {
        self.bone_lengths.iter().map(|&b| b as f64).sum()
    }
}

/// The diffusion state: one absolute angle (radians) per bone.
#[derive(Clone, Debug, PartialEq)]
pub struct JointAngles(Vec<f32>);

impl JointAngles {
    pub fn new(angles: Vec<f32>) -> Result<JointAngles, KinematicsError> {
        if let Some(i) = angles.iter().position(|a| !a.is_finite()) {
            return Err(KinematicsError::NonFiniteAngle(i));
        }
        Ok(JointAngles(angles))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

impl std::ops::Index<usize> for JointAngles {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.0[i]
    }
}

/// A point in the bone-length unit plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Point2 {
        Point2 { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

fn check_len(chain: &ChainSpec, angles: &[f32]) -> Result<(), KinematicsError> {
    if angles.len() != chain.num_joints() {
        return Err(KinematicsError::JointCountMismatch {
            expected: chain.num_joints(),
            got: angles.len(),
        });
    }
    Ok(())
}

/// Tip position `(sum b cos theta, sum b sin theta)`, accumulated in f64.
pub fn forward_kinematics(chain: &ChainSpec, angles: &JointAngles) -> Result<Point2, KinematicsError> {
    check_len(chain, angles.as_slice())?;
    Ok(forward_kinematics_slice(chain, angles.as_slice()))
}

/// As [`forward_kinematics`] but over a raw slice whose length is trusted.
pub(crate) fn forward_kinematics_slice(chain: &ChainSpec, angles: &[f32]) -> Point2 {
    let mut x = 0.0f64;
    let mut y = 0.0f64;
    for (&b, &a) in chain.bone_lengths().iter().zip(angles) {
        let (s, c) = (a as f64).sin_cos();
        x += b as f64 * c;
        y += b as f64 * s;
    }
    Point2 { x, y }
}

/// All joint positions from the origin to the tip (N+1 points).
pub fn joint_positions(
    chain: &ChainSpec,
    angles: &JointAngles,
) -> Result<Vec<Point2>, KinematicsError> {
    check_len(chain, angles.as_slice())?;
    let mut pts = Vec::with_capacity(chain.num_joints() + 1);
    let mut p = Point2::new(0.0, 0.0);
    pts.push(p);
    for (&b, &a) in chain.bone_lengths().iter().zip(angles.as_slice()) {
        let (s, c) = (a as f64).sin_cos();
        p = Point2::new(p.x + b as f64 * c, p.y + b as f64 * s);
        pts.push(p);
    }
    Ok(pts)
}

/// Euclidean distance between a target and an achieved tip.
pub fn target_distance(t: Point2, t_hat: Point2) -> f64 {
    (t.x - t_hat.x).hypot(t.y - t_hat.y)
}

/// Plain L2 distance over joint angles, no wrapping. This is the metric
/// compared against ground truth; training backpropagates through an MSE
/// of the same differences.
pub fn angle_distance(a: &JointAngles, b: &JointAngles) -> Result<f64, KinematicsError> {
    if a.len() != b.len() {
        return Err(KinematicsError::JointCountMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Diagnostic variant of [`angle_distance`] with each difference wrapped
/// into [-pi, pi). Never used as a training signal.
pub fn angle_distance_wrapped(a: &JointAngles, b: &JointAngles) -> Result<f64, KinematicsError> {
    if a.len() != b.len() {
        return Err(KinematicsError::JointCountMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let tau = std::f64::consts::TAU;
    let mut acc = 0.0f64;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let mut d = (x as f64 - y as f64) % tau;
        if d < -std::f64::consts::PI {
            d += tau;
        } else if d >= std::f64::consts::PI {
            d -= tau;
        }
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Whether a target lies inside the chain's reach disk. A single-bone
/// chain can only touch the circle of radius b0 (within 1e-9).
pub fn reachable(chain: &ChainSpec, t: Point2) -> bool {
    let r = t.norm();
    if chain.num_joints() == 1 {
        (r - chain.bone_lengths()[0] as f64).abs() <= 1e-9
    } else {
        r <= chain.reach()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use std::f32::consts::PI;

    fn angles(v: Vec<f32>) -> JointAngles {
        JointAngles::new(v).unwrap()
    }

    #[test]
    fn straight_chain_reaches_full_extent() {
        let chain = ChainSpec::unit(4).unwrap();
        let t = forward_kinematics(&chain, &angles(vec![0.0; 4])).unwrap();
        assert!((t.x - 4.0).abs() < 1e-9 && t.y.abs() < 1e-9);
    }

    #[test]
    fn vertical_two_link() {
        let chain = ChainSpec::unit(2).unwrap();
        let t = forward_kinematics(&chain, &angles(vec![PI / 2.0, PI / 2.0])).unwrap();
        assert!(t.x.abs() < 1e-6 && (t.y - 2.0).abs() < 1e-6);
    }

    #[test]
    fn antipodal_cancellation() {
        let chain = ChainSpec::unit(2).unwrap();
        let t = forward_kinematics(&chain, &angles(vec![0.0, PI])).unwrap();
        assert!(t.x.abs() < 1e-6 && t.y.abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let chain = ChainSpec::unit(3).unwrap();
        let err = forward_kinematics(&chain, &angles(vec![0.0; 2])).unwrap_err();
        assert_eq!(err, KinematicsError::JointCountMismatch { expected: 3, got: 2 });
    }

    #[test]
    fn joint_positions_simple_cases() {
        let chain = ChainSpec::unit(1).unwrap();
        let pts = joint_positions(&chain, &angles(vec![0.0])).unwrap();
        assert_eq!(pts.len(), 2);
        assert!((pts[1].x - 1.0).abs() < 1e-9 && pts[1].y.abs() < 1e-9);

        let chain = ChainSpec::unit(2).unwrap();
        let pts = joint_positions(&chain, &angles(vec![0.0, PI / 2.0])).unwrap();
        assert!((pts[1].x - 1.0).abs() < 1e-6);
        assert!((pts[2].x - 1.0).abs() < 1e-6 && (pts[2].y - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tip_agrees_with_cumulative_positions() {
        let mut rng = Rng::new(101);
        let chain = ChainSpec::unit(8).unwrap();
        for _ in 0..200 {
            let th: Vec<f32> = (0..8).map(|_| (rng.next_f64() * 6.28 - 3.14) as f32).collect();
            let th = angles(th);
            let tip = forward_kinematics(&chain, &th).unwrap();
            let pts = joint_positions(&chain, &th).unwrap();
            let last = pts.last().unwrap();
            assert!(target_distance(tip, *last) < 1e-6);
        }
    }

    #[test]
    fn non_unit_bones_scale_the_sum() {
        let chain = ChainSpec::new(vec![2.0, 0.5]).unwrap();
        let t = forward_kinematics(&chain, &angles(vec![0.0, PI / 2.0])).unwrap();
        assert!((t.x - 2.0).abs() < 1e-6 && (t.y - 0.5).abs() < 1e-6);
    }

    #[test]
    fn metric_basics() {
        assert_eq!(target_distance(Point2::new(0.0, 0.0), Point2::new(3.0, 4.0)), 5.0);
        assert_eq!(target_distance(Point2::new(1.0, 1.0), Point2::new(1.0, 1.0)), 0.0);

        let a = angles(vec![0.0, 0.0]);
        let b = angles(vec![3.0, 4.0]);
        assert!((angle_distance(&a, &b).unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(angle_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_symmetric_and_triangular() {
        let mut rng = Rng::new(55);
        for _ in 0..200 {
            let p = Point2::new(rng.next_f64() * 4.0 - 2.0, rng.next_f64() * 4.0 - 2.0);
            let q = Point2::new(rng.next_f64() * 4.0 - 2.0, rng.next_f64() * 4.0 - 2.0);
            let r = Point2::new(rng.next_f64() * 4.0 - 2.0, rng.next_f64() * 4.0 - 2.0);
            assert!((target_distance(p, q) - target_distance(q, p)).abs() < 1e-12);
            assert!(target_distance(p, r) <= target_distance(p, q) + target_distance(q, r) + 1e-12);

            let a = angles(vec![rng.next_f64() as f32, rng.next_f64() as f32]);
            let b = angles(vec![rng.next_f64() as f32, rng.next_f64() as f32]);
            let c = angles(vec![rng.next_f64() as f32, rng.next_f64() as f32]);
            let ab = angle_distance(&a, &b).unwrap();
            let ba = angle_distance(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(
                angle_distance(&a, &c).unwrap()
                    <= ab + angle_distance(&b, &c).unwrap() + 1e-12
            );
        }
    }

    #[test]
    fn wrapped_distance_ignores_full_turns() {
        let a = angles(vec![0.0]);
        let b = angles(vec![2.0 * PI]);
        assert!(angle_distance(&a, &b).unwrap() > 6.0);
        assert!(angle_distance_wrapped(&a, &b).unwrap() < 1e-5);
    }

    #[test]
    fn reach_boundary() {
        let chain = ChainSpec::unit(4).unwrap();
        assert!(reachable(&chain, Point2::new(4.0, 0.0)));
        assert!(!reachable(&chain, Point2::new(4.01, 0.0)));
        let single = ChainSpec::unit(1).unwrap();
        assert!(reachable(&single, Point2::new(0.0, 1.0)));
        assert!(!reachable(&single, Point2::new(0.5, 0.0)));
    }

    #[test]
    fn tips_never_exceed_reach() {
        let mut rng = Rng::new(77);
        let chain = ChainSpec::unit(5).unwrap();
        for _ in 0..10_000 {
            let th: Vec<f32> = (0..5).map(|_| (rng.next_f64() * 6.28 - 3.14) as f32).collect();
            let tip = forward_kinematics(&chain, &angles(th)).unwrap();
            assert!(tip.norm() <= chain.reach() + 1e-9);
        }
    }

    #[test]
    fn global_rotation_rotates_the_tip() {
        let mut rng = Rng::new(88);
        let chain = ChainSpec::unit(4).unwrap();
        for _ in 0..500 {
            let th: Vec<f32> = (0..4).map(|_| (rng.next_f64() * 6.28 - 3.14) as f32).collect();
            let delta = (rng.next_f64() * 6.28 - 3.14) as f32;
            let tip = forward_kinematics(&chain, &angles(th.clone())).unwrap();
            let shifted: Vec<f32> = th.iter().map(|&a| a + delta).collect();
            let tip2 = forward_kinematics(&chain, &angles(shifted)).unwrap();
            let (s, c) = (delta as f64).sin_cos();
            let rot = Point2::new(c * tip.x - s * tip.y, s * tip.x + c * tip.y);
            assert!(target_distance(tip2, rot) < 1e-6);
        }
    }

    #[test]
    fn invalid_chains_rejected() {
        assert_eq!(ChainSpec::new(vec![]).unwrap_err(), KinematicsError::EmptyChain);
        assert_eq!(
            ChainSpec::new(vec![1.0, 0.0]).unwrap_err(),
            KinematicsError::NonPositiveBone(0.0)
        );
        assert!(JointAngles::new(vec![f32::NAN]).is_err());
    }
}
