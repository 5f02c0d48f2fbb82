//! Linear noise schedule, the closed-form transition kernel of the
//! mean-reverting forward SDE
//!
//! `dx = ½ β_t (x̄₀ − x) dt + √β_t dW`
//!
//! and an Euler–Maruyama integrator for its time reversal
//!
//! `dx = (½ (x̄₀ − x) − s(x, t)) β_t dt + √β_t dW̄`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::rng::normal;

pub const DEFAULT_T_MIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { beta0: 0.05, beta1: 20.0 }
    }
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta1: f64) -> Result<Self> {
        let s = Self { beta0, beta1 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta0 <= self.beta1 && self.beta1.is_finite()) {
            return Err(Error::contract(format!(
                "noise schedule needs 0 < beta0 <= beta1, got ({}, {})",
                self.beta0, self.beta1
            )));
        }
        Ok(())
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// `β_t = β₀ + t (β₁ − β₀)`.
    pub fn beta_at(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.beta0 + t * (self.beta1 - self.beta0))
    }

    /// `B(t) = ∫₀ᵗ β_s ds = β₀ t + ½ (β₁ − β₀) t²`.
    pub fn noise_integral(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t)
    }

    /// Kernel variance `λ_t = 1 − exp(−B(t))`, also the score-matching weight.
    pub fn lambda_at(&self, t: f64) -> Result<f64> {
        Ok(1.0 - (-self.noise_integral(t)?).exp())
    }
}

/// One draw from the forward transition kernel `p_{t|0}(· | x₀)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardDraw {
    pub t: f64,
    pub x_t: Tensor,
    pub mu_t: Tensor,
    pub lambda_t: f64,
    pub true_score: Tensor,
}

/// Kernel mean `x̄₀ + (x₀ − x̄₀) e^{−B(t)/2}`.
pub fn kernel_mean(x0: &Tensor, xbar0: &Tensor, t: f64, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != xbar0.shape() {
        return Err(Error::shape("forward_sample", format!("x0 {:?} vs xbar0 {:?}", x0.shape(), xbar0.shape())));
    }
    let decay = (-0.5 * sched.noise_integral(t)?).exp();
    xbar0.zip_map(x0, "kernel_mean", |b, x| b + (x - b) * decay)
}

pub fn forward_sample<R: Rng + ?Sized>(
    x0: &Tensor,
    xbar0: &Tensor,
    t: f64,
    t_min: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ForwardDraw> {
    if t < t_min {
        return Err(Error::contract(format!("time {t} below t_min {t_min}")));
    }
    let mu_t = kernel_mean(x0, xbar0, t, sched)?;
    let lambda_t = sched.lambda_at(t)?;
    let sd = lambda_t.sqrt();
    let x_t = mu_t.map(|m| m + sd * normal(rng));
    let true_score = analytic_score(&x_t, &mu_t, lambda_t)?;
    Ok(ForwardDraw { t, x_t, mu_t, lambda_t, true_score })
}

/// Score of `Normal(mu_t, lambda_t I)` at `x_t`: `−(x_t − mu_t) / lambda_t`.
pub fn analytic_score(x_t: &Tensor, mu_t: &Tensor, lambda_t: f64) -> Result<Tensor> {
    if !(lambda_t > 0.0) {
        return Err(Error::contract(format!("kernel variance must be positive, got {lambda_t}")));
    }
    x_t.zip_map(mu_t, "analytic_score", |x, m| -(x - m) / lambda_t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverseConfig {
    pub n_steps: usize,
    pub stochastic: bool,
    pub t_min: f64,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        Self { n_steps: 100, stochastic: true, t_min: DEFAULT_T_MIN }
    }
}

impl ReverseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::contract(format!(
                "reverse config needs n_steps >= 1 and 0 < t_min < 1, got {} / {}",
                self.n_steps, self.t_min
            )));
        }
        Ok(())
    }
}

/// Integrates the reverse SDE from `t = 1` down to `t_min` and returns the
/// final state. `score_fn(x, t)` must return a tensor shaped like `x`.
///
/// Without `x_init` the start is drawn from `Normal(x̄₀, λ₁ I)`.
pub fn reverse_integrate<F, R>(
    mut score_fn: F,
    xbar0: &Tensor,
    cfg: &ReverseConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
    x_init: Option<Tensor>,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let mut x = match x_init {
        Some(x) => {
            if x.shape() != xbar0.shape() {
                return Err(Error::shape("reverse_integrate", "x_init and xbar0 differ"));
            }
            x
        }
        None => {
            let sd = sched.lambda_at(1.0)?.sqrt();
            xbar0.map(|m| m + sd * normal(rng))
        }
    };
    let h = (1.0 - cfg.t_min) / cfg.n_steps as f64;
    for step in 0..cfg.n_steps {
        let t = 1.0 - step as f64 * h;
        let beta = sched.beta_at(t)?;
        let score = score_fn(&x, t)?;
        if score.shape() != x.shape() {
            return Err(Error::shape("reverse_integrate", format!("score {:?} for state {:?}", score.shape(), x.shape())));
        }
        let noise_sd = (beta * h).sqrt();
        let data = x.data_mut();
        for j in 0..data.len() {
            let drift = 0.5 * (xbar0.data()[j] - data[j]) - score.data()[j];
            data[j] -= h * beta * drift;
            if cfg.stochastic {
                data[j] += noise_sd * normal(rng);
            }
        }
        if !x.all_finite() {
            return Err(Error::Divergence { context: "reverse_integrate".into(), step });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(s.beta_at(0.0).unwrap(), 0.05);
        assert_eq!(s.beta_at(1.0).unwrap(), 20.0);
        assert!((s.beta_at(0.5).unwrap() - 10.025).abs() < 1e-12);
        assert!(s.beta_at(1.5).is_err());
        assert!(s.beta_at(-0.1).is_err());
    }

    #[test]
    fn integral_values() {
        let s = sched();
        assert_eq!(s.noise_integral(0.0).unwrap(), 0.0);
        assert!((s.noise_integral(1.0).unwrap() - 10.025).abs() < 1e-12);
        let grid: Vec<f64> = (0..=100).map(|i| s.noise_integral(i as f64 / 100.0).unwrap()).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn lambda_values() {
        let s = sched();
        assert_eq!(s.lambda_at(0.0).unwrap(), 0.0);
        let l1 = s.lambda_at(1.0).unwrap();
        assert!((l1 - (1.0 - (-10.025f64).exp())).abs() < 1e-15);
        assert!((l1 - 0.9999557).abs() < 1e-7);
        let grid: Vec<f64> = (0..=100).map(|i| s.lambda_at(i as f64 / 100.0).unwrap()).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0] && w[1] < 1.0));
        for t in [0.0, 0.013, 0.4, 1.0] {
            assert_eq!(s.lambda_at(t).unwrap(), 1.0 - (-s.noise_integral(t).unwrap()).exp());
        }
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(NoiseSchedule::new(0.0, 1.0).is_err());
        assert!(NoiseSchedule::new(2.0, 1.0).is_err());
        assert!(NoiseSchedule::new(1.0, 1.0).is_ok());
    }

    #[test]
    fn kernel_limits() {
        let s = sched();
        let x0 = Tensor::vector(vec![1.0, -2.0]);
        let xbar = Tensor::vector(vec![0.5, 0.5]);
        let mu = kernel_mean(&x0, &xbar, 0.0, &s).unwrap();
        assert_eq!(mu, x0);
        for t in [0.1, 0.7, 1.0] {
            assert_eq!(kernel_mean(&xbar, &xbar, t, &s).unwrap(), xbar);
        }
        let mu1 = kernel_mean(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0]), 1.0, &s).unwrap();
        assert!((mu1.item() - (-5.0125f64).exp()).abs() < 1e-15);
        assert!((mu1.item() - 0.00665).abs() < 1e-5);
    }

    #[test]
    fn forward_draw_is_consistent() {
        let s = sched();
        let mut rng = seeded(5);
        let x0 = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let xbar = Tensor::vector(vec![0.0, 1.0, -1.0]);
        let d = forward_sample(&x0, &xbar, 0.3, DEFAULT_T_MIN, &s, &mut rng).unwrap();
        assert!((d.lambda_t - (1.0 - (-s.noise_integral(0.3).unwrap()).exp())).abs() < 1e-12);
        for j in 0..3 {
            let expect = -(d.x_t.data()[j] - d.mu_t.data()[j]) / d.lambda_t;
            assert!((d.true_score.data()[j] - expect).abs() < 1e-9);
        }
        assert!(forward_sample(&x0, &xbar, 0.001, DEFAULT_T_MIN, &s, &mut rng).is_err());
        assert!(forward_sample(&x0, &Tensor::vector(vec![0.0]), 0.3, DEFAULT_T_MIN, &s, &mut rng).is_err());
    }

    #[test]
    fn analytic_score_examples() {
        let z = analytic_score(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![1.0]), 0.3).unwrap();
        assert_eq!(z.item(), 0.0);
        let s = analytic_score(&Tensor::vector(vec![2.0]), &Tensor::vector(vec![1.0]), 0.5).unwrap();
        assert_eq!(s.item(), -2.0);
        assert!(analytic_score(&Tensor::vector(vec![2.0]), &Tensor::vector(vec![1.0]), 0.0).is_err());
    }

    #[test]
    fn analytic_score_matches_log_density_differences() {
        let mu = [0.3, -1.2];
        let lambda = 0.37;
        let logp = |x: &[f64]| -> f64 { x.iter().zip(&mu).map(|(a, m)| -(a - m) * (a - m) / (2.0 * lambda)).sum() };
        let x = [1.1, 0.4];
        let s = analytic_score(&Tensor::vector(x.to_vec()), &Tensor::vector(mu.to_vec()), lambda).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (logp(&xp) - logp(&xm)) / (2.0 * h);
            assert!((fd - s.data()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_score_reverse_drift_expands_by_known_factors() {
        let s = sched();
        let cfg = ReverseConfig { n_steps: 50, stochastic: false, t_min: DEFAULT_T_MIN };
        let xbar = Tensor::vector(vec![1.0, 0.0]);
        let x0 = Tensor::vector(vec![1.5, -0.2]);
        // Without a score the reverse drift only undoes the pull towards x̄₀:
        // the deviation grows by (1 + ½hβ(t_i)) per step.
        let out = reverse_integrate(|x, _| Ok(Tensor::zeros(x.shape())), &xbar, &cfg, &s, &mut seeded(0), Some(x0.clone()))
            .unwrap();
        let h = (1.0 - cfg.t_min) / cfg.n_steps as f64;
        let factor: f64 = (0..cfg.n_steps).map(|i| 1.0 + 0.5 * h * s.beta_at(1.0 - i as f64 * h).unwrap()).product();
        assert!((out.data()[0] - (1.0 + 0.5 * factor)).abs() < 1e-9 * factor);
        assert!((out.data()[1] + 0.2 * factor).abs() < 1e-9 * factor);
    }

    #[test]
    fn reverse_divergence_names_step() {
        let s = sched();
        let cfg = ReverseConfig { n_steps: 10, stochastic: false, t_min: DEFAULT_T_MIN };
        let xbar = Tensor::vector(vec![0.0]);
        let err = reverse_integrate(
            |x, t| Ok(if t < 0.5 { x.map(|_| f64::INFINITY) } else { Tensor::zeros(x.shape()) }),
            &xbar,
            &cfg,
            &s,
            &mut seeded(0),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 6, .. }), "{err}");
    }

    #[test]
    fn reverse_is_seed_deterministic() {
        let s = sched();
        let cfg = ReverseConfig::default();
        let xbar = Tensor::vector(vec![0.5, -0.5, 1.0]);
        let run = |seed| {
            reverse_integrate(|x, t| analytic_score(x, &xbar, s.lambda_at(t).unwrap()), &xbar, &cfg, &s, &mut seeded(seed), None).unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
