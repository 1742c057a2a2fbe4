//! Variance schedules and the closed-form forward noising marginal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Per-step `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π_{i≤t} α_i`, indexed by `t = 1..=len`.
///
/// `timesteps[t-1]` is the model timestep conditioned on at step `t`; it is the
/// identity for a schedule built by [`make_schedule`] and a strided subset for a
/// [`NoiseSchedule::respaced`] one.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    timesteps: Vec<usize>,
}

pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("make_schedule", "step count must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(
            "make_schedule",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
        ));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Schedule from explicit betas (non-decreasing, each in `(0, 1)`).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule", "no steps"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("schedule", "every beta must lie in (0, 1)"));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("schedule", "betas must be non-decreasing"));
        }
        let timesteps = (1..=beta.len()).collect();
        Ok(Self::assemble(beta, timesteps))
    }

    fn assemble(beta: Vec<f64>, timesteps: Vec<usize>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            timesteps,
        }
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            (1..=self.len()).contains(&t),
            "step {t} outside 1..={}",
            self.len()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Model timestep conditioned on at step `t`.
    pub fn model_timestep(&self, t: usize) -> usize {
        self.timesteps[self.idx(t)]
    }

    /// Shorter schedule over `steps` evenly strided timesteps of this one.
    ///
    /// `β'_k = 1 − ᾱ_{τ_k} / ᾱ_{τ_{k−1}}`, so the cumulative products at the
    /// retained timesteps are preserved exactly and ancestral sampling stays a
    /// valid DDPM chain. `steps == len()` returns an identical schedule.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::invalid(
                "respaced",
                format!("steps must be in 1..={total}, got {steps}"),
            ));
        }
        if steps == total {
            return Ok(self.clone());
        }
        let taus: Vec<usize> = (1..=steps)
            .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
            .collect();
        let mut prev_bar = 1.0;
        let mut beta = Vec::with_capacity(steps);
        for &tau in &taus {
            let bar = self.alpha_bar(tau);
            beta.push(1.0 - bar / prev_bar);
            prev_bar = bar;
        }
        let timesteps = taus.iter().map(|&tau| self.model_timestep(tau)).collect();
        Ok(Self::assemble(beta, timesteps))
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 || t > schedule.len() {
        return Err(Error::invalid(
            "forward_noise",
            format!("step {t} outside 1..={}", schedule.len()),
        ));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::shape("forward_noise", x0.shape(), eps.shape()));
    }
    let ab = schedule.alpha_bar(t);
    let (cx, ce) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(eps, |x, e| cx * x + ce * e)
}

/// Recovers `x0` from `x_t` given the exact noise; the algebraic inverse of [`forward_noise`].
pub fn invert_forward_noise(
    x_t: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t);
    let (cx, ce) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x_t.zip_map(eps, |x, e| (x - ce * e) / cx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn explicit_betas_cumulative_product() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let want = [0.9, 0.72, 0.504, 0.3024];
        for (got, want) in s.alpha_bars().iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let s = make_schedule(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn linear_endpoints_and_bounds() {
        let s = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(200) - 0.02).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = make_schedule(ScheduleKind::Linear, 50, 1e-3, 0.05).unwrap();
        let x0 = Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f32 - 1.5);
        let zero = Tensor::zeros(vec![1, 1, 2, 2]);
        let t = 20;
        let ab = s.alpha_bar(t);
        let out = forward_noise(&x0, t, &zero, &s).unwrap();
        assert!(out.bit_eq(&x0.map(|v| ab.sqrt() as f32 * v)));
        let eps = Tensor::from_fn(vec![1, 1, 2, 2], |i| 0.3 * i as f32);
        let out = forward_noise(&zero, t, &eps, &s).unwrap();
        assert!(out.bit_eq(&eps.map(|v| (1.0 - ab).sqrt() as f32 * v)));
        assert!(forward_noise(&x0, 0, &zero, &s).is_err());
        assert!(forward_noise(&x0, 51, &zero, &s).is_err());
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let s = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
        let t = 120;
        let mut rng = seeded_rng(9);
        let eps = rng.normal_tensor(&[10_000]);
        let x0 = Tensor::zeros(vec![10_000]);
        let xt = forward_noise(&x0, t, &eps, &s).unwrap();
        let m = xt.mean();
        let var = xt.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 9_999.0;
        let want = 1.0 - s.alpha_bar(t);
        assert!((var - want).abs() / want < 0.05, "{var} vs {want}");
    }

    #[test]
    fn respacing_preserves_alpha_bar() {
        let s = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
        let r = s.respaced(20).unwrap();
        assert_eq!(r.len(), 20);
        for k in 1..=20 {
            let tau = r.model_timestep(k);
            assert_eq!(tau, k * 10);
            assert!((r.alpha_bar(k) - s.alpha_bar(tau)).abs() < 1e-12);
        }
        assert_eq!(s.respaced(200).unwrap(), s);
        assert!(s.respaced(0).is_err() && s.respaced(201).is_err());
    }
}
