//! Adam with the inverse-square-root Transformer learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// lr(step) = scale · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub scale: f64,
    pub d_model: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        assert!(step >= 1, "schedule is defined for steps >= 1");
        let s = step as f64;
        let w = self.warmup_steps as f64;
        self.scale * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }

    /// The schedule peaks exactly at `step == warmup_steps`.
    pub fn peak(&self) -> f64 {
        self.scale * (self.d_model as f64).powf(-0.5) * (self.warmup_steps as f64).powf(-0.5)
    }
}

struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Optimizer state: first/second moments per parameter, keyed by the
/// parameter's stable name. Parameters that never receive a gradient are
/// never registered and never move.
pub struct Adam<S> {
    beta1: S,
    beta2: S,
    eps: S,
    moments: HashMap<String, Moments<S>>,
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam {
            beta1: S::from_f64c(BETA1),
            beta2: S::from_f64c(BETA2),
            eps: S::from_f64c(ADAM_EPS),
            moments: HashMap::new(),
        }
    }

    /// One Adam update for one parameter. `step` is the global 1-based step
    /// count used for bias correction.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut [S],
        grad: &[S],
        lr: S,
        step: usize,
    ) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.to_string() });
        }
        let slot = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: vec![S::zero(); param.len()], v: vec![S::zero(); param.len()] });
        debug_assert_eq!(slot.m.len(), param.len(), "parameter {name} changed size");

        let one = S::one();
        let t = step as i32;
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for ((p, &g), (m, v)) in
            param.iter_mut().zip(grad).zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn moments_of(&self, name: &str) -> Option<(&[S], &[S])> {
        self.moments.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        let sched = LrSchedule { scale: 1.0, d_model: 64, warmup_steps: 200 };
        let peak = sched.peak();
        assert!((sched.lr(200) - peak).abs() < 1e-15);
        assert!(sched.lr(199) < peak);
        assert!(sched.lr(201) < peak);
        // closed form: scale · d^-0.5 · warmup^-0.5
        assert!((peak - 0.008838834764831844).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_from_fresh_state_leaves_params_unchanged() {
        let mut adam = Adam::<f64>::new();
        let mut p = vec![1.5, -0.25, 3.0];
        let before = p.clone();
        adam.update("w", &mut p, &[0.0, 0.0, 0.0], 0.1, 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grad_decays_existing_moments() {
        let mut adam = Adam::<f64>::new();
        let mut p = vec![1.0];
        adam.update("w", &mut p, &[2.0], 0.01, 1).unwrap();
        let (m1, v1) = adam.moments_of("w").map(|(m, v)| (m[0], v[0])).unwrap();
        adam.update("w", &mut p, &[0.0], 0.01, 2).unwrap();
        let (m2, v2) = adam.moments_of("w").map(|(m, v)| (m[0], v[0])).unwrap();
        assert!((m2 - BETA1 * m1).abs() < 1e-15);
        assert!((v2 - BETA2 * v1).abs() < 1e-15);
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut adam = Adam::<f64>::new();
            let mut p = vec![0.5, -1.0];
            for step in 1..=10 {
                let g = [0.3 * step as f64, -0.1];
                adam.update("w", &mut p, &g, 0.01, step).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same state and inputs must give bit-identical params");
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut adam = Adam::<f64>::new();
        let mut p = vec![1.0];
        let err = adam.update("mle0.ffn.w1", &mut p, &[f64::NAN], 0.1, 1).unwrap_err();
        assert!(err.to_string().contains("mle0.ffn.w1"));
    }
}
