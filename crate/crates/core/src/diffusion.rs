//! Pixel-space DDPM mathematics: variance schedules, the closed-form forward
//! marginal, the noise-parameterized reverse step, ancestral sampling and the
//! training / diagnostic losses.
//!
//! Steps are 1-based (`t = 1..=T`) with `alpha_bar(0) == 1`. Images live in
//! `[-1, 1]` internally; [`to_internal`] and [`to_external`] convert from and
//! to the `[0, 1]` range used everywhere else.

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::rng::standard_normal_grid;

/// Linear-schedule parameters, kept so a schedule can be rebuilt and checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// The shorter chain used for CPU-sized runs.
    pub fn desk() -> Self {
        Self {
            steps: 200,
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    // alpha_bars[0] == 1, alpha_bars[t] = prod_{s=1..t} alphas
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidConfig("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidConfig(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            let next = prev * a;
            if next <= 0.0 || next >= prev {
                return Err(Error::InvalidConfig(format!(
                    "cumulative alpha stops decreasing at step {} (underflow)",
                    alpha_bars.len()
                )));
            }
            alpha_bars.push(next);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Argument(format!(
                "step {t} outside [1, {}]",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative signal fraction; defined for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

pub fn to_internal(image: &Array2<f64>) -> Array2<f64> {
    image.mapv(|v| v * 2.0 - 1.0)
}

pub fn to_external(image: &Array2<f64>) -> Array2<f64> {
    image.mapv(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct NoisySample {
    pub x0: Array2<f64>,
    pub t: usize,
    pub epsilon: Array2<f64>,
    pub xt: Array2<f64>,
}

pub fn q_sample(
    x0: &Array2<f64>,
    t: usize,
    epsilon: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<NoisySample> {
    check_shape(x0.shape(), epsilon.shape())?;
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let xt = Zip::from(x0)
        .and(epsilon)
        .map_collect(|&x, &e| signal * x + noise * e);
    Ok(NoisySample {
        x0: x0.clone(),
        t,
        epsilon: epsilon.clone(),
        xt,
    })
}

#[derive(Debug, Clone)]
pub struct ReverseStepParams {
    pub mu: Array2<f64>,
    pub sigma2: f64,
}

/// Reverse-step mean from a noise prediction, with the variance fixed at the
/// true posterior variance `beta_tilde_t`.
pub fn posterior_mean_variance(
    xt: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<ReverseStepParams> {
    check_shape(xt.shape(), eps_hat.shape())?;
    schedule.check_step(t)?;
    let beta = schedule.beta(t);
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let scale = 1.0 / schedule.alpha(t).sqrt();
    let mu = Zip::from(xt)
        .and(eps_hat)
        .map_collect(|&x, &e| scale * (x - coef * e));
    let sigma2 = if t == 1 {
        0.0
    } else {
        schedule.posterior_variance(t)
    };
    Ok(ReverseStepParams { mu, sigma2 })
}

pub fn reverse_step<R: Rng + ?Sized>(
    xt: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let ReverseStepParams { mu, sigma2 } = posterior_mean_variance(xt, t, eps_hat, schedule)?;
    if sigma2 == 0.0 {
        return Ok(mu);
    }
    let sigma = sigma2.sqrt();
    let z = standard_normal_grid(rng, mu.dim());
    Ok(mu + z * sigma)
}

/// Anything that predicts the noise component of a noised batch.
///
/// `xts` holds one internal-range grid per conditioning entry; the returned
/// predictions must match each input's shape.
pub trait NoisePredictor {
    type Conditioning;

    fn predict_noise(
        &self,
        xts: &[Array2<f64>],
        t: usize,
        conditioning: &[&Self::Conditioning],
    ) -> Result<Vec<Array2<f64>>>;
}

/// Runs the full reverse chain from `x_T ~ N(0, I)` for a batch of
/// conditionings. Each entry owns its RNG so results do not depend on which
/// other entries share the batch. Outputs are clamped and mapped to `[0, 1]`.
pub fn ancestral_sample_batch<P, R>(
    denoiser: &P,
    conditioning: &[&P::Conditioning],
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    rngs: &mut [R],
) -> Result<Vec<Array2<f64>>>
where
    P: NoisePredictor,
    R: Rng,
{
    if rngs.len() != conditioning.len() {
        return Err(Error::Argument(format!(
            "{} rngs for {} conditioning entries",
            rngs.len(),
            conditioning.len()
        )));
    }
    let mut xs: Vec<Array2<f64>> = rngs
        .iter_mut()
        .map(|rng| standard_normal_grid(rng, shape))
        .collect();
    for t in (1..=schedule.steps()).rev() {
        let eps = denoiser.predict_noise(&xs, t, conditioning)?;
        if eps.len() != xs.len() {
            return Err(Error::Contract(format!(
                "denoiser returned {} predictions for {} inputs",
                eps.len(),
                xs.len()
            )));
        }
        for ((x, e), rng) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            if e.dim() != shape {
                return Err(Error::Contract(format!(
                    "prediction shape {:?}, expected {:?}",
                    e.dim(),
                    shape
                )));
            }
            *x = reverse_step(x, t, e, schedule, rng)?;
        }
    }
    Ok(xs.iter().map(to_external).collect())
}

pub fn ancestral_sample<P, R>(
    denoiser: &P,
    conditioning: &P::Conditioning,
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    rng: &mut R,
) -> Result<Array2<f64>>
where
    P: NoisePredictor,
    R: Rng,
{
    let mut one = [rng];
    let mut out = ancestral_sample_batch(denoiser, &[conditioning], schedule, shape, &mut one)?;
    Ok(out.pop().unwrap())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossReport {
    pub simple_loss: f64,
    /// `L_0, L_1, ..., L_T` in step order; `vlb_terms[0]` is the
    /// reconstruction term and the last entry is the prior term `L_T`.
    pub vlb_terms: Option<Vec<f64>>,
}

pub fn simple_loss(epsilon: &Array2<f64>, eps_hat: &Array2<f64>) -> Result<LossReport> {
    check_shape(epsilon.shape(), eps_hat.shape())?;
    let n = epsilon.len().max(1) as f64;
    let sum: f64 = Zip::from(epsilon)
        .and(eps_hat)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(LossReport {
        simple_loss: sum / n,
        vlb_terms: None,
    })
}

/// KL(N(m1, v1) || N(m2, v2)) for scalars.
pub fn gaussian_kl(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    1.0 - erfc(x)
}

// Chebyshev fit, relative error below 1.2e-7 everywhere.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87
                                    + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Negative log-probability of `x` under a Gaussian integrated over the
/// 8-bit bin of width `2/255` that contains it (internal range); the outer
/// bins extend to infinity.
fn discretized_gaussian_nll(x: f64, mean: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    let half = 1.0 / 255.0;
    let upper = if x > 1.0 - 1e-9 {
        1.0
    } else {
        std_normal_cdf((x + half - mean) / sd)
    };
    let lower = if x < -1.0 + 1e-9 {
        0.0
    } else {
        std_normal_cdf((x - half - mean) / sd)
    };
    -((upper - lower).max(1e-12)).ln()
}

/// Per-term variational bound diagnostics for a single image.
///
/// `noise_draws[t-1]` is the noise used to form `x_t` for the term at step
/// `t`; the prior term needs no draw. Terms are summed over pixels.
pub fn vlb_diagnostics<P: NoisePredictor>(
    x0: &Array2<f64>,
    noise_draws: &[Array2<f64>],
    denoiser: &P,
    conditioning: &P::Conditioning,
    schedule: &NoiseSchedule,
) -> Result<LossReport> {
    let steps = schedule.steps();
    if noise_draws.len() != steps {
        return Err(Error::Argument(format!(
            "need {steps} noise draws, got {}",
            noise_draws.len()
        )));
    }
    let mut terms = Vec::with_capacity(steps + 1);
    let mut simple = 0.0;
    for t in 1..=steps {
        let sample = q_sample(x0, t, &noise_draws[t - 1], schedule)?;
        let eps_hat = denoiser
            .predict_noise(std::slice::from_ref(&sample.xt), t, &[conditioning])?
            .pop()
            .ok_or_else(|| Error::Contract("empty prediction".into()))?;
        check_shape(x0.shape(), eps_hat.shape())
            .map_err(|e| Error::Contract(e.to_string()))?;
        simple += simple_loss(&sample.epsilon, &eps_hat)?.simple_loss;
        let model = posterior_mean_variance(&sample.xt, t, &eps_hat, schedule)?;
        if t == 1 {
            // reconstruction: the reverse variance is zero here, so the
            // forward variance beta_1 is used for the likelihood.
            let var = schedule.beta(1);
            let nll = Zip::from(x0)
                .and(&model.mu)
                .fold(0.0, |acc, &x, &m| acc + discretized_gaussian_nll(x, m, var));
            terms.push(nll);
        } else {
            let q_mean = true_posterior_mean(x0, &sample.xt, t, schedule);
            let var = schedule.posterior_variance(t);
            let kl = Zip::from(&q_mean)
                .and(&model.mu)
                .fold(0.0, |acc, &a, &b| acc + gaussian_kl(a, var, b, var));
            terms.push(kl.max(0.0));
        }
    }
    let ab = schedule.alpha_bar(steps);
    let prior = x0.iter().fold(0.0, |acc, &x| {
        acc + gaussian_kl(ab.sqrt() * x, 1.0 - ab, 0.0, 1.0)
    });
    terms.push(prior.max(0.0));
    Ok(LossReport {
        simple_loss: simple / steps as f64,
        vlb_terms: Some(terms),
    })
}

/// Mean of `q(x_{t-1} | x_t, x_0)` written in its `(x_0, x_t)` form.
pub fn true_posterior_mean(
    x0: &Array2<f64>,
    xt: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Array2<f64> {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta = schedule.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Zip::from(x0).and(xt).map_collect(|&a, &b| c0 * a + ct * b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn constant_schedule_matches_power() {
        let s = NoiseSchedule::linear(10, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(10) - 0.9f64.powi(10)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let x0 = array![[0.5, -0.25], [1.0, 0.0]];
        let out = q_sample(&x0, 20, &Array2::zeros((2, 2)), &s).unwrap();
        let k = s.alpha_bar(20).sqrt();
        for (a, b) in out.xt.iter().zip(x0.iter()) {
            assert_eq!(*a, k * b);
        }
    }

    #[test]
    fn q_sample_argument_errors() {
        let s = NoiseSchedule::linear(5, 1e-3, 0.05).unwrap();
        let x0 = Array2::<f64>::zeros((2, 2));
        assert!(q_sample(&x0, 0, &x0, &s).is_err());
        assert!(q_sample(&x0, 6, &x0, &s).is_err());
        assert!(matches!(
            q_sample(&x0, 1, &Array2::zeros((3, 2)), &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn final_step_is_deterministic_mean() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let xt = array![[0.1, 0.2], [0.3, -0.4]];
        let eps = array![[0.5, -0.5], [0.0, 1.0]];
        let p = posterior_mean_variance(&xt, 1, &eps, &s).unwrap();
        assert_eq!(p.sigma2, 0.0);
        let out = reverse_step(&xt, 1, &eps, &s, &mut seeded(3)).unwrap();
        assert_eq!(out, p.mu);
    }

    #[test]
    fn reverse_step_is_seed_deterministic() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let xt = array![[0.1, 0.2], [0.3, -0.4]];
        let eps = array![[0.5, -0.5], [0.0, 1.0]];
        let a = reverse_step(&xt, 7, &eps, &s, &mut seeded(11)).unwrap();
        let b = reverse_step(&xt, 7, &eps, &s, &mut seeded(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simple_loss_examples() {
        let a = Array2::<f64>::ones((3, 3));
        let z = Array2::<f64>::zeros((3, 3));
        assert_eq!(simple_loss(&a, &a).unwrap().simple_loss, 0.0);
        assert_eq!(simple_loss(&a, &z).unwrap().simple_loss, 1.0);
        assert!(simple_loss(&a, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn discretized_nll_is_nonnegative() {
        for &(x, m, v) in &[(0.0, 0.0, 1e-4), (1.0, 0.9, 1e-4), (-1.0, 0.3, 0.5)] {
            assert!(discretized_gaussian_nll(x, m, v) >= 0.0);
        }
    }
}
