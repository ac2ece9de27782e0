//! The score-field interface and its analytic implementations.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::diffusion::NoiseSchedule;
use crate::gmm::GaussianMixture;
use crate::{Error, Result};

/// Anything that can report a (possibly conditional) score and its
/// Hessian-vector products over a diffusion schedule.
///
/// `cond = None` is the unconditional field.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;
    fn score(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DVector<f64>>;
    fn hvp(&self, x: &DVector<f64>, t: usize, cond: Option<&str>, v: &DVector<f64>) -> Result<DVector<f64>>;

    /// Score and `H v` together; override when they share work.
    fn score_and_hvp(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: Option<&str>,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        Ok((self.score(x, t, cond)?, self.hvp(x, t, cond, v)?))
    }

    /// Dense Jacobian of the score, one column per basis vector.
    fn jacobian(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            h.set_column(j, &self.hvp(x, t, cond, &e)?);
        }
        Ok(h)
    }
}

impl<F: ScoreField + ?Sized> ScoreField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
    fn score(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DVector<f64>> {
        (**self).score(x, t, cond)
    }
    fn hvp(&self, x: &DVector<f64>, t: usize, cond: Option<&str>, v: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).hvp(x, t, cond, v)
    }
    fn score_and_hvp(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: Option<&str>,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        (**self).score_and_hvp(x, t, cond, v)
    }
}

type MarginalKey = (usize, Option<String>);

/// Exact score field of a Gaussian mixture pushed through a VP schedule.
///
/// Conditional fields restrict to components with the matching label.
pub struct GmmField {
    mixture: GaussianMixture,
    schedule: NoiseSchedule,
    cache: RwLock<HashMap<MarginalKey, Arc<GaussianMixture>>>,
}

impl GmmField {
    pub fn new(mixture: GaussianMixture, schedule: NoiseSchedule) -> Self {
        Self { mixture, schedule, cache: RwLock::new(HashMap::new()) }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    /// The (cached) marginal at `t` for `cond`.
    pub fn marginal(&self, t: usize, cond: Option<&str>) -> Result<Arc<GaussianMixture>> {
        let key = (t, cond.map(str::to_owned));
        if let Some(m) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(self.mixture.conditional_view(cond)?.diffuse(&self.schedule, t)?);
        self.cache.write().expect("cache lock").insert(key, Arc::clone(&m));
        Ok(m)
    }

    pub fn hessian(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DMatrix<f64>> {
        self.marginal(t, cond)?.hessian(x)
    }

    pub fn hessian_trace(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<f64> {
        self.marginal(t, cond)?.hessian_trace(x)
    }

    pub fn log_density(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<f64> {
        self.marginal(t, cond)?.log_density(x)
    }
}

impl ScoreField for GmmField {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn score(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DVector<f64>> {
        self.marginal(t, cond)?.score(x)
    }
    fn hvp(&self, x: &DVector<f64>, t: usize, cond: Option<&str>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.marginal(t, cond)?.hvp(x, v)
    }
    fn score_and_hvp(
        &self,
        x: &DVector<f64>,
        t: usize,
        cond: Option<&str>,
        v: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.marginal(t, cond)?.score_and_hvp(x, v)
    }
    fn jacobian(&self, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<DMatrix<f64>> {
        self.hessian(x, t, cond)
    }
}

/// Affine score `s(x) = A x + b`, with an optional conditional map.
///
/// Same at every timestep. Handy as an exactly linear test field.
pub struct LinearField {
    uncond: (DMatrix<f64>, DVector<f64>),
    cond: Option<(DMatrix<f64>, DVector<f64>)>,
    schedule: NoiseSchedule,
}

impl LinearField {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, schedule: NoiseSchedule) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != b.len() {
            return Err(Error::invalid("linear field needs square A matching b"));
        }
        Ok(Self { uncond: (a, b), cond: None, schedule })
    }

    pub fn with_condition(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.shape() != self.uncond.0.shape() || b.len() != self.uncond.1.len() {
            return Err(Error::invalid("conditional map has the wrong shape"));
        }
        self.cond = Some((a, b));
        Ok(self)
    }

    fn pick(&self, cond: Option<&str>) -> &(DMatrix<f64>, DVector<f64>) {
        match (cond, &self.cond) {
            (Some(_), Some(c)) => c,
            _ => &self.uncond,
        }
    }
}

impl ScoreField for LinearField {
    fn dim(&self) -> usize {
        self.uncond.1.len()
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    fn score(&self, x: &DVector<f64>, _t: usize, cond: Option<&str>) -> Result<DVector<f64>> {
        let (a, b) = self.pick(cond);
        Ok(a * x + b)
    }
    fn hvp(&self, _x: &DVector<f64>, _t: usize, cond: Option<&str>, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.pick(cond).0 * v)
    }
}

/// Central-difference Hessian-vector product from scores alone.
pub fn hvp_fd<F: ScoreField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: usize,
    cond: Option<&str>,
    v: &DVector<f64>,
    delta: f64,
) -> Result<DVector<f64>> {
    if !(delta > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("direction must be finite"));
    }
    if v.iter().all(|&c| c == 0.0) {
        return Ok(DVector::zeros(v.len()));
    }
    let plus = field.score(&(x + v * delta), t, cond)?;
    let minus = field.score(&(x - v * delta), t, cond)?;
    let out = (plus - minus) / (2.0 * delta);
    if out.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric { iteration: 0, what: "finite-difference hvp".into() });
    }
    Ok(out)
}
