//! Variance-preserving noise schedule and deterministic DDIM sampling with
//! classifier-free guidance.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::field::ScoreField;
use crate::{Error, Result};

/// Discrete VP schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `T` linearly spaced betas in `[beta_min, beta_max]`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("schedule needs at least 2 steps"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let n = (steps - 1) as f64;
        let beta = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / n)
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let mut log_acc = 0.0;
        let alpha_bar = beta
            .iter()
            .map(|b: &f64| {
                log_acc += (-b).ln_1p();
                log_acc.exp()
            })
            .collect();
        Self { beta, alpha_bar }
    }

    /// The usual `T = 1000`, `beta in [1e-4, 0.02]`.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }
    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
    /// Last timestep index, `T - 1`.
    pub fn last(&self) -> usize {
        self.beta.len() - 1
    }
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside [0, {})", self.len())))
    }

    /// Noise level `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar_at(t)?).sqrt())
    }

    /// Hex digest of the beta values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.beta {
            h.update(b.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// `sqrt(a_t) x0 + sqrt(1 - a_t) eps`.
pub fn perturb(x0: &DVector<f64>, t: usize, eps: &DVector<f64>, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::invalid("x0 and eps differ in dimension"));
    }
    let ab = schedule.alpha_bar_at(t)?;
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

fn noise_scale(t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let ab = schedule.alpha_bar_at(t)?;
    if ab >= 1.0 {
        return Err(Error::invalid(format!("alpha_bar is 1 at t={t}; score and noise are not interchangeable")));
    }
    Ok((1.0 - ab).sqrt())
}

/// `eps = -sigma_t s`.
pub fn eps_from_score(s: &DVector<f64>, t: usize, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
    Ok(s * -noise_scale(t, schedule)?)
}

/// `s = -eps / sigma_t`.
pub fn score_from_eps(eps: &DVector<f64>, t: usize, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
    Ok(eps / -noise_scale(t, schedule)?)
}

/// Where a DDIM step lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Step(usize),
    /// The noise-free endpoint, `alpha_bar = 1`.
    Clean,
}

fn ddim_update(x_t: &DVector<f64>, eps_hat: &DVector<f64>, ab_t: f64, ab_prev: f64) -> DVector<f64> {
    let x0 = (x_t - eps_hat * (1.0 - ab_t).sqrt()) / ab_t.sqrt();
    x0 * ab_prev.sqrt() + eps_hat * (1.0 - ab_prev).sqrt()
}

/// One deterministic DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &DVector<f64>,
    eps_hat: &DVector<f64>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    if t_prev > t {
        return Err(Error::invalid(format!("t_prev {t_prev} is after t {t}")));
    }
    let ab_t = schedule.alpha_bar_at(t)?;
    let ab_p = schedule.alpha_bar_at(t_prev)?;
    if t_prev == t {
        return Ok(x_t.clone());
    }
    Ok(ddim_update(x_t, eps_hat, ab_t, ab_p))
}

/// Classifier-free guided noise prediction `(1 - w) eps_u + w eps_c`.
pub fn cfg_eps<F: ScoreField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: usize,
    cond: Option<&str>,
    w: f64,
) -> Result<DVector<f64>> {
    let sigma = noise_scale(t, field.schedule())?;
    let eps_u = field.score(x, t, None)? * -sigma;
    let Some(c) = cond else {
        return Ok(eps_u);
    };
    let eps_c = field.score(x, t, Some(c))? * -sigma;
    Ok(combine_guidance(&eps_u, &eps_c, w))
}

/// Guidance combination; exact at `w = 0` and `w = 1`.
pub fn combine_guidance(eps_u: &DVector<f64>, eps_c: &DVector<f64>, w: f64) -> DVector<f64> {
    if w == 0.0 {
        eps_u.clone()
    } else if w == 1.0 {
        eps_c.clone()
    } else {
        eps_u * (1.0 - w) + eps_c * w
    }
}

/// DDIM sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub inference_steps: usize,
    pub guidance: f64,
    #[serde(default)]
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { inference_steps: 50, guidance: 1.0, eta: 0.0 }
    }
}

/// Descending timesteps with uniform stride, first entry `T - 1`.
pub fn timestep_grid(schedule_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > schedule_len {
        return Err(Error::invalid(format!("inference steps {steps} outside [1, {schedule_len}]")));
    }
    let stride = schedule_len / steps;
    let offset = schedule_len - 1 - (steps - 1) * stride;
    Ok((0..steps).rev().map(|i| offset + i * stride).collect())
}

/// A point along a sampling trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub at: Target,
    pub x: DVector<f64>,
}

/// Runs the reverse chain from `x_T` and returns every visited state.
///
/// The last entry is the generated sample at `alpha_bar = 1`.
pub fn sample<F: ScoreField + ?Sized>(
    field: &F,
    x_t: &DVector<f64>,
    cond: Option<&str>,
    config: &SamplerConfig,
) -> Result<Vec<TrajectoryPoint>> {
    if config.eta != 0.0 {
        return Err(Error::invalid("only deterministic sampling (eta = 0) is supported"));
    }
    if !(config.guidance >= 0.0) {
        return Err(Error::invalid("guidance scale must be nonnegative"));
    }
    let schedule = field.schedule();
    let grid = timestep_grid(schedule.len(), config.inference_steps)?;
    let mut out = Vec::with_capacity(grid.len() + 1);
    let mut x = x_t.clone();
    for (i, &t) in grid.iter().enumerate() {
        out.push(TrajectoryPoint { at: Target::Step(t), x: x.clone() });
        let eps = cfg_eps(field, &x, t, cond, config.guidance)?;
        let ab_t = schedule.alpha_bar_at(t)?;
        let ab_p = match grid.get(i + 1) {
            Some(&tp) => schedule.alpha_bar_at(tp)?,
            None => 1.0,
        };
        x = ddim_update(&x, &eps, ab_t, ab_p);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { iteration: i, what: "sampler state".into() });
        }
    }
    out.push(TrajectoryPoint { at: Target::Clean, x });
    Ok(out)
}

/// Final sample only.
pub fn generate<F: ScoreField + ?Sized>(
    field: &F,
    x_t: &DVector<f64>,
    cond: Option<&str>,
    config: &SamplerConfig,
) -> Result<DVector<f64>> {
    let mut traj = sample(field, x_t, cond, config)?;
    Ok(traj.pop().expect("trajectory is nonempty").x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn geometric_when_constant() {
        let s = NoiseSchedule::linear(50, 0.03, 0.03).unwrap();
        for (t, ab) in s.alpha_bars().iter().enumerate() {
            assert!((ab - 0.97f64.powi(t as i32 + 1)).abs() < 1e-14);
        }
    }

    #[test]
    fn default_end_is_tiny() {
        let s = NoiseSchedule::default_linear();
        assert!(s.alpha_bars()[999] < 5e-5);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn bad_bounds() {
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn conversions() {
        let s = NoiseSchedule::linear(10, 0.81, 0.81).unwrap();
        let eps = eps_from_score(&DVector::from_vec(vec![1.0, 0.0]), 0, &s).unwrap();
        assert!((eps[0] + 0.9).abs() < 1e-15 && eps[1] == 0.0);
        let back = score_from_eps(&eps, 0, &s).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_rules() {
        let s = NoiseSchedule::default_linear();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let z = DVector::zeros(2);
        assert_eq!(ddim_step(&x, &z, 10, 10, &s).unwrap(), x);
        assert!(ddim_step(&x, &z, 10, 11, &s).is_err());
        let y = ddim_step(&x, &z, 500, 100, &s).unwrap();
        let r = (s.alpha_bars()[100] / s.alpha_bars()[500]).sqrt();
        assert!((y - &x * r).amax() < 1e-12);
    }

    #[test]
    fn grid_starts_at_last() {
        let g = timestep_grid(1000, 50).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 999);
        assert_eq!(g[49], 19);
        let g = timestep_grid(1000, 500).unwrap();
        assert_eq!((g[0], g[499]), (999, 1));
        assert!(timestep_grid(10, 11).is_err());
    }
}
