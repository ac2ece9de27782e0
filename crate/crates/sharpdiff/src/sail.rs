//! Initial-noise optimization that lowers the conditional/unconditional
//! sharpness gap at the first reverse step.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::ScoreField;
use crate::metrics::{fmt_f64, hvp_delta, quantile, score_delta};
use crate::random;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    GradientDescent,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    /// Central differences of the loss, `2d` evaluations.
    FiniteDifference,
    /// Closed-form chain rule through Hessian-vector products. Assumes a
    /// symmetric score Jacobian.
    Adjoint,
}

/// Which sharpness term the loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `||s^D(x + delta s^D) - s^D(x)||^2`.
    Taylor,
    /// `||s^D(x)||^2`.
    WenSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SailConfig {
    pub alpha: f64,
    pub delta: f64,
    pub eta: f64,
    pub threshold: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Divide the sharpness term by `delta^2`.
    pub inverse_delta_sq: bool,
    /// Probe along the unit vector of `s^D` instead of `s^D` itself.
    pub normalize_probe: bool,
    pub optimizer: Optimizer,
    pub gradient: GradientMethod,
    pub objective: Objective,
    /// Step of the finite-difference gradient.
    pub fd_step: f64,
}

impl Default for SailConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            delta: 1e-3,
            eta: 1e-2,
            threshold: 0.0,
            max_iters: 100,
            seed: 0,
            inverse_delta_sq: false,
            normalize_probe: false,
            optimizer: Optimizer::GradientDescent,
            gradient: GradientMethod::FiniteDifference,
            objective: Objective::Taylor,
            fd_step: 1e-5,
        }
    }
}

impl SailConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be nonnegative"));
        }
        for (name, v) in [("delta", self.delta), ("eta", self.eta), ("fd_step", self.fd_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.threshold.is_nan() {
            return Err(Error::invalid("threshold is NaN"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.gradient == GradientMethod::Adjoint && self.normalize_probe {
            return Err(Error::invalid("the adjoint gradient does not support normalized probes"));
        }
        Ok(())
    }

    fn sharp_scale(&self) -> f64 {
        if self.inverse_delta_sq && self.objective == Objective::Taylor {
            1.0 / (self.delta * self.delta)
        } else {
            1.0
        }
    }
}

/// Loss split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SailLoss {
    pub total: f64,
    pub sharpness: f64,
    /// `||x_T||^2`, before the `alpha` weight.
    pub prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Threshold,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SailTrace {
    pub losses: Vec<SailLoss>,
    pub reason: StopReason,
    pub initial: DVector<f64>,
    pub final_x: DVector<f64>,
}

impl SailTrace {
    pub const HEADER: [&'static str; 4] = ["iteration", "loss", "sharpness", "prior"];

    pub fn rows(&self) -> Vec<Vec<String>> {
        self.losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), fmt_f64(l.total), fmt_f64(l.sharpness), fmt_f64(l.prior)])
            .collect()
    }
}

fn check_x(x: &DVector<f64>, dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::invalid(format!("x_T has dimension {}, field has {dim}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x_T is not finite"));
    }
    Ok(())
}

fn probe(sd: &DVector<f64>, config: &SailConfig) -> DVector<f64> {
    if config.normalize_probe {
        let n = sd.norm();
        if n > 0.0 {
            return sd * (config.delta / n);
        }
    }
    sd * config.delta
}

/// Loss at the first reverse step.
pub fn sail_loss<F: ScoreField + ?Sized>(field: &F, x: &DVector<f64>, cond: &str, config: &SailConfig) -> Result<SailLoss> {
    check_x(x, field.dim())?;
    let t = field.schedule().last();
    let sd = score_delta(field, x, t, cond)?;
    let raw = match config.objective {
        Objective::WenSquared => sd.norm_squared(),
        Objective::Taylor => {
            let y = x + probe(&sd, config);
            (score_delta(field, &y, t, cond)? - sd).norm_squared()
        }
    };
    let sharpness = raw * config.sharp_scale();
    let prior = x.norm_squared();
    Ok(SailLoss { total: sharpness + config.alpha * prior, sharpness, prior })
}

fn finite_loss<F: ScoreField + ?Sized>(field: &F, x: &DVector<f64>, cond: &str, config: &SailConfig) -> Result<f64> {
    let l = sail_loss(field, x, cond, config)?.total;
    if !l.is_finite() {
        return Err(Error::Numeric { iteration: 0, what: "SAIL loss".into() });
    }
    Ok(l)
}

/// Gradient of [`sail_loss`] in `x_T`.
pub fn sail_grad<F: ScoreField + ?Sized>(field: &F, x: &DVector<f64>, cond: &str, config: &SailConfig) -> Result<DVector<f64>> {
    check_x(x, field.dim())?;
    match config.gradient {
        GradientMethod::FiniteDifference => {
            let h = config.fd_step;
            let mut g = DVector::zeros(x.len());
            let mut p = x.clone();
            for i in 0..x.len() {
                p[i] = x[i] + h;
                let up = finite_loss(field, &p, cond, config)?;
                p[i] = x[i] - h;
                let down = finite_loss(field, &p, cond, config)?;
                p[i] = x[i];
                g[i] = (up - down) / (2.0 * h);
            }
            Ok(g)
        }
        GradientMethod::Adjoint => adjoint_grad(field, x, cond, config),
    }
}

fn adjoint_grad<F: ScoreField + ?Sized>(field: &F, x: &DVector<f64>, cond: &str, config: &SailConfig) -> Result<DVector<f64>> {
    let t = field.schedule().last();
    let sd = score_delta(field, x, t, cond)?;
    let sharp = match config.objective {
        Objective::WenSquared => hvp_delta(field, x, t, cond, &sd)? * 2.0,
        Objective::Taylor => {
            let y = x + &sd * config.delta;
            let r = score_delta(field, &y, t, cond)? - &sd;
            let hy_r = hvp_delta(field, &y, t, cond, &r)?;
            let back = hvp_delta(field, x, t, cond, &hy_r)? * config.delta + &hy_r - hvp_delta(field, x, t, cond, &r)?;
            back * (2.0 * config.sharp_scale())
        }
    };
    let g = sharp + x * (2.0 * config.alpha);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { iteration: 0, what: "SAIL gradient".into() });
    }
    Ok(g)
}

/// Gradient steps on `x_T` until the loss reaches the threshold.
pub fn sail_optimize<F: ScoreField + ?Sized>(
    field: &F,
    x_init: &DVector<f64>,
    cond: &str,
    config: &SailConfig,
) -> Result<(DVector<f64>, SailTrace)> {
    config.validate()?;
    check_x(x_init, field.dim())?;
    let d = x_init.len();
    let mut x = x_init.clone();
    let (mut m, mut v) = (DVector::zeros(d), DVector::<f64>::zeros(d));
    let mut losses = Vec::new();
    let mut reason = StopReason::MaxIters;
    for it in 0..config.max_iters {
        let l = sail_loss(field, &x, cond, config)?;
        if !l.total.is_finite() {
            return Err(Error::Numeric { iteration: it, what: "SAIL loss".into() });
        }
        losses.push(l);
        if l.total <= config.threshold {
            reason = StopReason::Threshold;
            break;
        }
        let g = sail_grad(field, &x, cond, config).map_err(|e| match e {
            Error::Numeric { what, .. } => Error::Numeric { iteration: it, what },
            other => other,
        })?;
        match config.optimizer {
            Optimizer::GradientDescent => x -= g * config.eta,
            Optimizer::Adam => {
                let (b1, b2) = (0.9f64, 0.999f64);
                m = &m * b1 + &g * (1.0 - b1);
                v = &v * b2 + g.component_mul(&g) * (1.0 - b2);
                let k = it as i32 + 1;
                let mh = &m / (1.0 - b1.powi(k));
                let vh = &v / (1.0 - b2.powi(k));
                x -= mh.zip_map(&vh, |a, b| a / (b.sqrt() + 1e-8)) * config.eta;
            }
        }
    }
    Ok((x.clone(), SailTrace { losses, reason, initial: x_init.clone(), final_x: x }))
}

/// Independent runs over several initializations.
pub fn sail_optimize_batch<F: ScoreField + ?Sized>(
    field: &F,
    inits: &[DVector<f64>],
    cond: &str,
    config: &SailConfig,
) -> Result<Vec<(DVector<f64>, SailTrace)>> {
    inits.par_iter().map(|x| sail_optimize(field, x, cond, config)).collect()
}

/// `q`-quantile of the loss over `draws` fresh standard-normal `x_T`.
pub fn calibrate_threshold<F: ScoreField + ?Sized>(
    field: &F,
    cond: &str,
    config: &SailConfig,
    draws: usize,
    q: f64,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::invalid("calibration needs at least one draw"));
    }
    let mut rng = random::stream(config.seed, 7);
    let xs: Vec<DVector<f64>> = (0..draws).map(|_| random::normal_vector(field.dim(), &mut rng)).collect();
    let losses = xs
        .par_iter()
        .map(|x| sail_loss(field, x, cond, config).map(|l| l.total))
        .collect::<Result<Vec<f64>>>()?;
    quantile(&losses, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use crate::field::{GmmField, LinearField};
    use crate::gmm::{Gaussian, GaussianMixture};
    use nalgebra::{dmatrix, dvector, DMatrix};

    fn flat(d: usize) -> LinearField {
        LinearField::new(DMatrix::zeros(d, d), DVector::zeros(d), NoiseSchedule::default_linear()).unwrap()
    }

    fn two_mode() -> GmmField {
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![
                Gaussian::isotropic(dvector![2.0, 1.0], 0.05).unwrap(),
                Gaussian::isotropic(dvector![-1.0, 0.5], 1.0).unwrap(),
            ],
            vec![Some("sharp".into()), Some("broad".into())],
        )
        .unwrap();
        GmmField::new(mix, NoiseSchedule::linear(1000, 1e-4, 0.006).unwrap())
    }

    #[test]
    fn zero_gap_is_prior_only() {
        let f = flat(3);
        let x = dvector![1.0, -2.0, 0.5];
        let cfg = SailConfig::default();
        let l = sail_loss(&f, &x, "c", &cfg).unwrap();
        assert_eq!(l.sharpness, 0.0);
        assert!((l.total - 0.05 * 5.25).abs() < 1e-15);
        let g = sail_grad(&f, &x, "c", &SailConfig { gradient: GradientMethod::Adjoint, ..cfg.clone() }).unwrap();
        assert!((g - &x * 0.1).amax() < 1e-15);
    }

    #[test]
    fn linear_gap_by_hand() {
        let s = NoiseSchedule::default_linear();
        let f = LinearField::new(DMatrix::zeros(2, 2), DVector::zeros(2), s)
            .unwrap()
            .with_condition(dmatrix![1.0, 2.0; 0.0, -1.0], DVector::zeros(2))
            .unwrap();
        let cfg = SailConfig { alpha: 0.0, delta: 0.1, ..SailConfig::default() };
        let x = dvector![1.0, 1.0];
        let a = dmatrix![1.0, 2.0; 0.0, -1.0];
        let want = (&a * (&a * &x) * 0.1).norm_squared();
        assert!((sail_loss(&f, &x, "c", &cfg).unwrap().total - want).abs() < 1e-14);
    }

    #[test]
    fn constant_gap_has_zero_gradient() {
        let s = NoiseSchedule::default_linear();
        let f = LinearField::new(DMatrix::zeros(2, 2), DVector::zeros(2), s)
            .unwrap()
            .with_condition(DMatrix::zeros(2, 2), dvector![1.0, -3.0])
            .unwrap();
        let cfg = SailConfig { alpha: 0.0, ..SailConfig::default() };
        let g = sail_grad(&f, &dvector![0.3, 0.2], "c", &cfg).unwrap();
        assert!(g.amax() < 1e-9);
    }

    #[test]
    fn adjoint_matches_finite_difference_on_mixture() {
        let f = two_mode();
        let cfg = SailConfig { delta: 0.05, inverse_delta_sq: true, ..SailConfig::default() };
        for x in [dvector![0.4, -0.3], dvector![1.5, 0.9], dvector![-0.7, 1.2]] {
            let fd = sail_grad(&f, &x, "sharp", &cfg).unwrap();
            let ad = sail_grad(&f, &x, "sharp", &SailConfig { gradient: GradientMethod::Adjoint, ..cfg.clone() }).unwrap();
            assert!((&fd - &ad).norm() <= 1e-4 * ad.norm().max(1e-8), "{fd} vs {ad}");
        }
    }

    #[test]
    fn one_step_quadratic_shrinkage() {
        let f = flat(2);
        let x = dvector![2.0, -1.0];
        let cfg = SailConfig { max_iters: 1, threshold: -1.0, ..SailConfig::default() };
        let (y, trace) = sail_optimize(&f, &x, "c", &cfg).unwrap();
        assert!((y - &x * (1.0 - 2.0 * cfg.eta * cfg.alpha)).amax() < 1e-9);
        assert_eq!(trace.reason, StopReason::MaxIters);
        assert_eq!(trace.losses.len(), 1);
    }

    #[test]
    fn huge_threshold_stops_immediately() {
        let f = two_mode();
        let cfg = SailConfig { threshold: 1e300, ..SailConfig::default() };
        let x = dvector![0.1, 0.2];
        let (y, trace) = sail_optimize(&f, &x, "sharp", &cfg).unwrap();
        assert_eq!(trace.reason, StopReason::Threshold);
        assert_eq!(trace.losses.len(), 1);
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SailConfig { max_iters: 0, ..SailConfig::default() }.validate().is_err());
        assert!(SailConfig { delta: 0.0, ..SailConfig::default() }.validate().is_err());
    }
}
