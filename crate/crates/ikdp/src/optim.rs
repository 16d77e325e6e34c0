//! Named parameter storage and the Adam optimizer.

use crate::tensor::{Array, TensorError};

/// Ordered collection of uniquely named weight arrays. The order is the
/// serialization order, so it must stay stable for a given architecture.
#[derive(Clone, Debug)]
pub struct ParamSet {
    entries: Vec<(String, Array)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { entries: Vec::new() }
    }

    /// Append a tensor, returning its index handle.
    pub fn push(&mut self, name: &str, arr: Array) -> usize {
        debug_assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), arr));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn array(&self, i: usize) -> &Array {
        &self.entries[i].1
    }

    pub fn array_mut(&mut self, i: usize) -> &mut Array {
        &mut self.entries[i].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.is_finite())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Per-parameter `f64` gradient accumulators, aligned with a [`ParamSet`].
/// Batch averaging and cross-shard reduction happen here before the
/// optimizer sees a gradient.
pub struct GradBuffers {
    bufs: Vec<Vec<f64>>,
}

impl GradBuffers {
    pub fn zeros(params: &ParamSet) -> GradBuffers {
        GradBuffers {
            bufs: params.iter().map(|(_, a)| vec![0.0f64; a.numel()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, i: usize, grad: &[f32], scale: f64) {
        for (o, &g) in self.bufs[i].iter_mut().zip(grad) {
            *o += g as f64 * scale;
        }
    }

    /// Reduce another shard's buffers into this one (call in shard order).
    pub fn merge(&mut self, other: &GradBuffers) {
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for buf in &mut self.bufs {
            for v in buf.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn buf(&self, i: usize) -> &[f64] {
        &self.bufs[i]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment state kept in `f64`.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Adam {
        let m = params.iter().map(|(_, a)| vec![0.0f64; a.numel()]).collect();
        let v = params.iter().map(|(_, a)| vec![0.0f64; a.numel()]).collect();
        Adam { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters from mean gradients.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradBuffers) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads.buf(i);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    what: format!("gradient of parameter {}", params.name(i)),
                });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let vals = params.array_mut(i).values_mut();
            for j in 0..g.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                vals[j] = (vals[j] as f64 - self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn one_param(v: Vec<f32>) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Array::from_vec(Shape::d1(v.len()), v).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = one_param(vec![1.0, -2.0, 3.0]);
        let before = params.array(0).values().to_vec();
        let grads = GradBuffers::zeros(&params);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params.array(0).values(), &before[..]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // bias-corrected first step: delta ~ -lr * sign(g) when |g| >> eps
        let mut params = one_param(vec![0.0, 0.0]);
        let mut grads = GradBuffers::zeros(&params);
        grads.add_scaled(0, &[0.5, -3.0], 1.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &grads).unwrap();
        let vals = params.array(0).values();
        assert!((vals[0] + 1e-3).abs() < 1e-6, "{}", vals[0]);
        assert!((vals[1] - 1e-3).abs() < 1e-6, "{}", vals[1]);
    }

    #[test]
    fn three_steps_descend_quadratic() {
        // f(x) = x^2, grad = 2x
        let mut params = one_param(vec![1.0]);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &params);
        let mut last = 1.0f32;
        for _ in 0..3 {
            let x = params.array(0).values()[0];
            let mut grads = GradBuffers::zeros(&params);
            grads.add_scaled(0, &[2.0 * x], 1.0);
            adam.step(&mut params, &grads).unwrap();
            let fx = params.array(0).values()[0].powi(2);
            assert!(fx < last * last, "f went {last}^2 -> {fx}");
            last = params.array(0).values()[0];
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = one_param(vec![1.0]);
        let mut grads = GradBuffers::zeros(&params);
        grads.add_scaled(0, &[f32::NAN], 1.0);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }

    #[test]
    fn shard_merge_matches_sequential_sum() {
        let params = one_param(vec![0.0; 4]);
        let mut a = GradBuffers::zeros(&params);
        let mut b = GradBuffers::zeros(&params);
        a.add_scaled(0, &[1.0, 2.0, 3.0, 4.0], 0.5);
        b.add_scaled(0, &[4.0, 3.0, 2.0, 1.0], 0.5);
        a.merge(&b);
        assert_eq!(a.buf(0), &[2.5, 2.5, 2.5, 2.5]);
    }
}
