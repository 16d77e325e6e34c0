//! Dense array storage and the seeded random generator.
//!
//! Arrays store row-major `f32` values with rank at most 3. Reductions
//! elsewhere in the crate accumulate in `f64` before rounding back to
//! storage precision.

use std::fmt;

use thiserror::Error;

/// Errors raised by array construction and tape operations.
#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("{op}: unsupported shape {shape}")]
    BadShape { op: &'static str, shape: String },
    #[error("array of shape {shape} expects {expected} values, got {got}")]
    LengthMismatch {
        shape: String,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss node, got shape {shape}")]
    NonScalarLoss { shape: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}

/// Row-major extents, rank 1 to 3.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 3],
    rank: u8,
}

impl Shape {
    pub fn d1(n: usize) -> Shape {
        Shape { dims: [n, 1, 1], rank: 1 }
    }

    pub fn d2(rows: usize, cols: usize) -> Shape {
        Shape { dims: [rows, cols, 1], rank: 2 }
    }

    pub fn d3(a: usize, b: usize, c: usize) -> Shape {
        Shape { dims: [a, b, c], rank: 3 }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Rows of a rank-2 shape (a rank-1 shape counts as a single row).
    pub fn rows(&self) -> usize {
        if self.rank == 1 {
            1
        } else {
            self.dims[0]
        }
    }

    /// Columns of a rank-1 or rank-2 shape.
    pub fn cols(&self) -> usize {
        if self.rank == 1 {
            self.dims[0]
        } else {
            self.dims[1]
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.dims();
        for (i, x) in d.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Shape({self})")
    }
}

/// Dense row-major `f32` array, rank <= 3.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Shape,
    values: Vec<f32>,
}

impl Array {
    pub fn zeros(shape: Shape) -> Array {
        Array {
            shape,
            values: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: Shape, v: f32) -> Array {
        Array {
            shape,
            values: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: f32) -> Array {
        Array {
            shape: Shape::d1(1),
            values: vec![v],
        }
    }

    pub fn from_vec(shape: Shape, values: Vec<f32>) -> Result<Array, TensorError> {
        if shape.numel() != values.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_string(),
                expected: shape.numel(),
                got: values.len(),
            });
        }
        Ok(Array { shape, values })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array[{}] {:?}", self.shape, &self.values)
    }
}

/// Seeded generator: xorshift64* over a splitmix64-scrambled seed.
///
/// The stream is a pure integer recurrence, so identical seeds give
/// identical draws on every platform and release. Normal deviates come
/// from the Box-Muller transform
/// `z0 = sqrt(-2 ln u1) cos(2 pi u2)`, `z1 = sqrt(-2 ln u1) sin(2 pi u2)`
/// with `u1` in (0, 1]; the second deviate of each pair is cached.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        // splitmix64 finalizer; also guarantees a nonzero xorshift state.
        let mut z = seed.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        Rng {
            state: if z == 0 { 0x1C0FFEE } else { z },
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One standard-normal deviate.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64(); // (0, 1]: ln is finite
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    /// Standard-normal array.
    pub fn randn(&mut self, shape: Shape) -> Array {
        let values = (0..shape.numel())
            .map(|_| self.next_normal() as f32)
            .collect();
        Array { shape, values }
    }

    /// Uniform array over [lo, hi).
    pub fn rand_uniform(&mut self, lo: f32, hi: f32, shape: Shape) -> Array {
        let span = (hi - lo) as f64;
        let values = (0..shape.numel())
            .map(|_| (lo as f64 + span * self.next_f64()) as f32)
            .collect();
        Array { shape, values }
    }

    /// Uniform diffusion step in {1, ..., t_max} via floor of a unit draw.
    pub fn uniform_step(&mut self, t_max: usize) -> usize {
        debug_assert!(t_max >= 1);
        let u = self.next_f64();
        1 + ((u * t_max as f64) as usize).min(t_max - 1)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let u = self.next_f64();
            let j = ((u * (i + 1) as f64) as usize).min(i);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_display_and_numel() {
        assert_eq!(Shape::d2(3, 4).to_string(), "3x4");
        assert_eq!(Shape::d3(2, 3, 4).numel(), 24);
        assert_eq!(Shape::d1(5).numel(), 5);
    }

    #[test]
    fn from_vec_validates_length() {
        let err = Array::from_vec(Shape::d2(2, 2), vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { expected: 4, got: 3, .. }));
    }

    #[test]
    fn rng_is_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f32> = (0..8).map(|_| a.next_normal() as f32).collect();
        let ys: Vec<f32> = (0..8).map(|_| b.next_normal() as f32).collect();
        assert_eq!(xs, ys);

        let arr1 = Rng::new(7).randn(Shape::d2(4, 4));
        let arr2 = Rng::new(7).randn(Shape::d2(4, 4));
        assert_eq!(arr1.values(), arr2.values());
    }

    #[test]
    fn rng_seeds_differ() {
        let a = Rng::new(1).randn(Shape::d1(8));
        let b = Rng::new(2).randn(Shape::d1(8));
        assert_ne!(a.values(), b.values());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(123);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let z = rng.next_normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn uniform_step_covers_range() {
        let mut rng = Rng::new(5);
        let mut seen = [false; 80];
        for _ in 0..20_000 {
            let t = rng.uniform_step(80);
            assert!((1..=80).contains(&t));
            seen[t - 1] = true;
        }
        assert!(seen.iter().all(|&s| s), "all steps drawn at 20k samples");
    }

    #[test]
    fn uniform_range() {
        let mut rng = Rng::new(9);
        let a = rng.rand_uniform(-1.5, 2.5, Shape::d1(1000));
        assert!(a.values().iter().all(|&v| (-1.5..2.5).contains(&v)));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(3);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, (0..50).collect::<Vec<_>>());
    }
}
