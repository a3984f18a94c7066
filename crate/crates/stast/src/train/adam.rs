//! Adam with bias correction and global-norm gradient clipping, plus the
//! warmup / inverse-square-root learning-rate schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::{c, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPS: f64 = 1e-9;
pub const CLIP_NORM: f64 = 5.0;

/// Linear warmup to `peak` at `warmup`, then decay as 1/sqrt(step).
pub fn lr_at(step: u64, warmup: u64, peak: f64) -> f64 {
    assert!(step >= 1 && warmup >= 1);
    let s = step as f64;
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Optimizer state: first/second moment per parameter, shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub step: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Adam { m: ParamStore::default(), v: ParamStore::default(), step: 0 }
    }

    pub fn from_parts(m: ParamStore<F>, v: ParamStore<F>, step: u64) -> Self {
        Adam { m, v, step }
    }

    /// One update over every parameter present in `grads`. Gradients are
    /// clipped jointly to global norm `CLIP_NORM` first. Returns the
    /// pre-clip global norm.
    pub fn step(
        &mut self,
        params: &mut ParamStore<F>,
        grads: &IndexMap<String, Vec<F>>,
        lr: f64,
    ) -> Result<f64> {
        self.step += 1;
        let mut sq_sum = 0.0f64;
        for (name, g) in grads {
            for &v in g {
                let v = v.to_f64().unwrap();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {name} at optimizer step {}",
                        self.step
                    )));
                }
                sq_sum += v * v;
            }
        }
        let norm = sq_sum.sqrt();
        let clip = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };

        let bias1 = 1.0 - BETA1.powi(self.step as i32);
        let bias2 = 1.0 - BETA2.powi(self.step as i32);
        let b1 = c::<F>(BETA1);
        let b2 = c::<F>(BETA2);
        let one_m_b1 = c::<F>(1.0 - BETA1);
        let one_m_b2 = c::<F>(1.0 - BETA2);
        let eps = c::<F>(EPS);
        let step_size = c::<F>(lr / bias1);
        let inv_sqrt_bias2 = c::<F>(1.0 / bias2.sqrt());
        let clip_f = c::<F>(clip);

        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            let n = p.values.len();
            if g.len() != n {
                return Err(Error::Dim { op: "adam_step", lhs: vec![n], rhs: vec![g.len()] });
            }
            let m = self.m.entry_zeros(name, p.rows, p.cols);
            for i in 0..n {
                let gi = g[i] * clip_f;
                m[i] = b1 * m[i] + one_m_b1 * gi;
            }
            let v = self.v.entry_zeros(name, p.rows, p.cols);
            for i in 0..n {
                let gi = g[i] * clip_f;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            }
            let m = &self.m.get(name).unwrap().values;
            let v = &self.v.get(name).unwrap().values;
            for i in 0..n {
                let denom = (v[i] * inv_sqrt_bias2 * inv_sqrt_bias2).sqrt() + eps;
                p.values[i] = p.values[i] - step_size * m[i] / denom;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn store(vals: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.insert("w", 1, vals.len(), vals);
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = store(vec![1.0, -2.0]);
        let mut adam = Adam::new();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        adam.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().values, vec![1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn quadratic_converges_to_optimum() {
        // f(w) = (w - 3)^2, grad = 2(w - 3)
        let mut params = store(vec![0.0]);
        let mut adam = Adam::new();
        for _ in 0..500 {
            let w = params.get("w").unwrap().values[0];
            let mut grads = IndexMap::new();
            grads.insert("w".to_string(), vec![2.0 * (w - 3.0)]);
            adam.step(&mut params, &grads, 0.05).unwrap();
        }
        let w = params.get("w").unwrap().values[0];
        assert!((w - 3.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn matches_hand_rolled_two_step_trace() {
        let g1 = 0.5f64;
        let g2 = -0.25f64;
        let lr = 0.01;
        let mut w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [(1, g1), (2, g2)] {
            m = BETA1 * m + (1.0 - BETA1) * g;
            v = BETA2 * v + (1.0 - BETA2) * g * g;
            let mh = m / (1.0 - BETA1.powi(t));
            let vh = v / (1.0 - BETA2.powi(t));
            w -= lr * mh / (vh.sqrt() + EPS);
        }

        let mut params = store(vec![1.0]);
        let mut adam = Adam::new();
        for g in [g1, g2] {
            let mut grads = IndexMap::new();
            grads.insert("w".to_string(), vec![g]);
            adam.step(&mut params, &grads, lr).unwrap();
        }
        let got = params.get("w").unwrap().values[0];
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_step() {
        let mut params = store(vec![1.0]);
        let mut adam = Adam::new();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        let err = adam.step(&mut params, &grads, 0.1).unwrap_err().to_string();
        assert!(err.contains('w') && err.contains('1'), "{err}");
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut a = store(vec![0.0, 0.0]);
        let mut b = store(vec![0.0, 0.0]);
        // same direction, one far above the clip norm: first Adam step
        // normalizes by |g| elementwise, so updates coincide
        let mut ga = IndexMap::new();
        ga.insert("w".to_string(), vec![30.0, 40.0]);
        let norm = Adam::new().step(&mut a, &ga, 0.1).unwrap();
        assert_eq!(norm, 50.0);
        let mut gb = IndexMap::new();
        gb.insert("w".to_string(), vec![3.0, 4.0]);
        Adam::new().step(&mut b, &gb, 0.1).unwrap();
        let (av, bv) = (&a.get("w").unwrap().values, &b.get("w").unwrap().values);
        for i in 0..2 {
            assert!((av[i] - bv[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_shape() {
        let peak = 2e-3;
        assert_eq!(lr_at(400, 400, peak), peak);
        assert!((lr_at(1600, 400, peak) - peak / 2.0).abs() < 1e-15);
        let mut prev = 0.0;
        for s in 1..=400 {
            let lr = lr_at(s, 400, peak);
            assert!(lr >= prev);
            prev = lr;
        }
        assert!(lr_at(401, 400, peak) < peak);
    }
}
