//! Gaussian mixtures with exact score, Hessian and diffusion marginals.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::spectral::is_symmetric;
use crate::{Error, Result};

/// A multivariate normal with cached factorization.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    prec: DMatrix<f64>,
    logdet: f64,
    /// Variances when the covariance is diagonal.
    diag: Option<DVector<f64>>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid(format!(
                "covariance must be {d}x{d}, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian parameters must be finite"));
        }
        if !is_symmetric(&cov) {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        let is_diag = (0..d).all(|i| (0..d).all(|j| i == j || cov[(i, j)] == 0.0));
        if is_diag {
            let var = cov.diagonal();
            if var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid("covariance is not positive definite"));
            }
            return Ok(Self::from_diag_unchecked(mean, var));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::invalid("covariance is not positive definite"))?;
        let l = chol.l();
        let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let prec = chol.inverse();
        let prec = (&prec + prec.transpose()) * 0.5;
        Ok(Self { mean, cov, chol: l, prec, logdet, diag: None })
    }

    /// Diagonal covariance given as variances.
    pub fn diagonal(mean: DVector<f64>, var: DVector<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::invalid("mean and variance lengths differ"));
        }
        if var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("variances must be positive and finite"));
        }
        Ok(Self::from_diag_unchecked(mean, var))
    }

    /// `N(mean, var * I)`.
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::diagonal(mean, DVector::from_element(d, var))
    }

    fn from_diag_unchecked(mean: DVector<f64>, var: DVector<f64>) -> Self {
        let cov = DMatrix::from_diagonal(&var);
        let chol = DMatrix::from_diagonal(&var.map(f64::sqrt));
        let prec = DMatrix::from_diagonal(&var.map(|v| 1.0 / v));
        let logdet = var.iter().map(|v| v.ln()).sum();
        Self { mean, cov, chol, prec, logdet, diag: Some(var) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.prec
    }
    /// Lower Cholesky factor of the covariance.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }
    pub fn log_det(&self) -> f64 {
        self.logdet
    }

    /// `Sigma^{-1} v`.
    pub fn apply_precision(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.diag {
            Some(var) => v.component_div(var),
            None => &self.prec * v,
        }
    }

    pub fn trace_precision(&self) -> f64 {
        match &self.diag {
            Some(var) => var.iter().map(|v| 1.0 / v).sum(),
            None => self.prec.trace(),
        }
    }

    /// `Sigma^{-1} (mu - x)`.
    pub fn pull(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply_precision(&(&self.mean - x))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let r = &self.mean - x;
        let quad = r.dot(&self.apply_precision(&r));
        -0.5 * quad - 0.5 * self.logdet - 0.5 * self.dim() as f64 * (2.0 * PI).ln()
    }

    /// Marginal after VP noising with cumulative signal `alpha_bar`.
    pub fn diffuse(&self, alpha_bar: f64) -> Self {
        let a = alpha_bar.sqrt();
        let mean = &self.mean * a;
        match &self.diag {
            Some(var) => Self::from_diag_unchecked(mean, var.map(|v| alpha_bar * v + (1.0 - alpha_bar))),
            None => {
                let d = self.dim();
                let cov = &self.cov * alpha_bar + DMatrix::identity(d, d) * (1.0 - alpha_bar);
                Self::new(mean, cov).expect("diffusion of an SPD covariance stays SPD")
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = crate::random::normal_vector(self.dim(), rng);
        match &self.diag {
            Some(var) => &self.mean + z.component_mul(&var.map(f64::sqrt)),
            None => &self.mean + &self.chol * z,
        }
    }
}

/// A finite Gaussian mixture with optional component labels.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Gaussian>,
    labels: Vec<Option<String>>,
}

/// JSON form of a mixture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl GaussianMixture {
    /// Weights must be positive; they are normalized to sum to one.
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>, labels: Vec<Option<String>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if weights.len() != components.len() || labels.len() != components.len() {
            return Err(Error::invalid("weights, components and labels must have equal length"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive and finite"));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("components have different dimensions"));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, log_weights, components, labels })
    }

    pub fn unlabeled(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        let n = components.len();
        Self::new(weights, components, vec![None; n])
    }

    pub fn single(g: Gaussian) -> Self {
        Self::unlabeled(vec![1.0], vec![g]).expect("one component is valid")
    }

    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        let mut comps = Vec::with_capacity(spec.components.len());
        let mut labels = Vec::with_capacity(spec.components.len());
        for (k, c) in spec.components.iter().enumerate() {
            let d = c.mean.len();
            if c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                return Err(Error::invalid(format!("component {k}: covariance must be {d}x{d}")));
            }
            let cov = DMatrix::from_fn(d, d, |i, j| c.cov[i][j]);
            let g = Gaussian::new(DVector::from_vec(c.mean.clone()), cov)
                .map_err(|e| Error::invalid(format!("component {k}: {e}")))?;
            comps.push(g);
            labels.push(c.label.clone());
        }
        Self::new(spec.weights.clone(), comps, labels)
    }

    pub fn to_spec(&self) -> MixtureSpec {
        MixtureSpec {
            weights: self.weights.clone(),
            components: self
                .components
                .iter()
                .zip(&self.labels)
                .map(|(g, l)| ComponentSpec {
                    mean: g.mean.iter().copied().collect(),
                    cov: (0..g.dim()).map(|i| g.cov.row(i).iter().copied().collect()).collect(),
                    label: l.clone(),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }
    pub fn labels(&self) -> &[Option<String>] {
        &self.labels
    }

    /// Distinct labels in first-appearance order.
    pub fn known_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in self.labels.iter().flatten() {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("point has dimension {}, mixture has {}", x.len(), self.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point has non-finite coordinates"));
        }
        Ok(())
    }

    /// Posterior responsibilities and the log density, via log-sum-exp.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<(Vec<f64>, f64)> {
        self.check_point(x)?;
        let lp: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(g, lw)| lw + g.log_density(x))
            .collect();
        let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lp.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        Ok((lp.iter().map(|v| (v - lse).exp()).collect(), lse))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.responsibilities(x)?.1)
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (g, _) = self.responsibilities(x)?;
        let mut s = DVector::zeros(self.dim());
        for (gk, c) in g.iter().zip(&self.components) {
            if *gk > 0.0 {
                s.axpy(*gk, &c.pull(x), 1.0);
            }
        }
        Ok(s)
    }

    /// Score, and the per-component pulls with their responsibilities.
    fn parts(&self, x: &DVector<f64>) -> Result<(Vec<f64>, Vec<DVector<f64>>, DVector<f64>)> {
        let (g, _) = self.responsibilities(x)?;
        let u: Vec<DVector<f64>> = self.components.iter().map(|c| c.pull(x)).collect();
        let mut s = DVector::zeros(self.dim());
        for (gk, uk) in g.iter().zip(&u) {
            s.axpy(*gk, uk, 1.0);
        }
        Ok((g, u, s))
    }

    /// Dense Hessian of the log density.
    pub fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (g, u, s) = self.parts(x)?;
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for ((gk, uk), c) in g.iter().zip(&u).zip(&self.components) {
            if *gk == 0.0 {
                continue;
            }
            h.ger(*gk, uk, uk, 1.0);
            h -= c.precision() * *gk;
        }
        h.ger(-1.0, &s, &s, 1.0);
        Ok((&h + h.transpose()) * 0.5)
    }

    /// Hessian-vector product without forming the Hessian.
    pub fn hvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::invalid("direction has wrong dimension"));
        }
        let (g, u, s) = self.parts(x)?;
        let mut out = DVector::zeros(self.dim());
        for ((gk, uk), c) in g.iter().zip(&u).zip(&self.components) {
            if *gk == 0.0 {
                continue;
            }
            out.axpy(*gk * uk.dot(v), uk, 1.0);
            out.axpy(-*gk, &c.apply_precision(v), 1.0);
        }
        out.axpy(-s.dot(v), &s, 1.0);
        Ok(out)
    }

    /// Both the score and `H v`.
    pub fn score_and_hvp(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (g, u, s) = self.parts(x)?;
        let mut out = DVector::zeros(self.dim());
        for ((gk, uk), c) in g.iter().zip(&u).zip(&self.components) {
            if *gk == 0.0 {
                continue;
            }
            out.axpy(*gk * uk.dot(v), uk, 1.0);
            out.axpy(-*gk, &c.apply_precision(v), 1.0);
        }
        out.axpy(-s.dot(v), &s, 1.0);
        Ok((s, out))
    }

    /// `tr H(x)` without forming the Hessian.
    pub fn hessian_trace(&self, x: &DVector<f64>) -> Result<f64> {
        let (g, u, s) = self.parts(x)?;
        let mut tr = -s.norm_squared();
        for ((gk, uk), c) in g.iter().zip(&u).zip(&self.components) {
            tr += gk * (uk.norm_squared() - c.trace_precision());
        }
        Ok(tr)
    }

    /// Marginal at cumulative signal level `alpha_bar`.
    pub fn diffuse_alpha_bar(&self, alpha_bar: f64) -> Result<Self> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::invalid(format!("alpha_bar {alpha_bar} outside (0, 1]")));
        }
        if alpha_bar == 1.0 {
            return Ok(self.clone());
        }
        Ok(Self {
            weights: self.weights.clone(),
            log_weights: self.log_weights.clone(),
            components: self.components.iter().map(|c| c.diffuse(alpha_bar)).collect(),
            labels: self.labels.clone(),
        })
    }

    /// Marginal at timestep `t` of `schedule`.
    pub fn diffuse(&self, schedule: &NoiseSchedule, t: usize) -> Result<Self> {
        self.diffuse_alpha_bar(schedule.alpha_bar_at(t)?)
    }

    /// Restriction to components carrying `label`; `None` gives the full mixture.
    pub fn conditional_view(&self, label: Option<&str>) -> Result<Self> {
        let Some(label) = label else {
            return Ok(self.clone());
        };
        let idx: Vec<usize> = (0..self.components.len())
            .filter(|&k| self.labels[k].as_deref() == Some(label))
            .collect();
        if idx.is_empty() {
            return Err(Error::invalid(format!(
                "unknown condition {label:?}; known: {:?}",
                self.known_labels()
            )));
        }
        Self::new(
            idx.iter().map(|&k| self.weights[k]).collect(),
            idx.iter().map(|&k| self.components[k].clone()).collect(),
            idx.iter().map(|&k| self.labels[k].clone()).collect(),
        )
    }

    /// Draws with the index of the generating component.
    pub fn sample_with_components<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<(usize, DVector<f64>)> {
        let pick = WeightedIndex::new(&self.weights).expect("weights are positive");
        (0..n)
            .map(|_| {
                let k = pick.sample(rng);
                (k, self.components[k].sample(rng))
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<DVector<f64>> {
        self.sample_with_components(rng, n).into_iter().map(|(_, x)| x).collect()
    }

    /// Applies an orthogonal map `Q` to the input space.
    pub fn rotated(&self, q: &DMatrix<f64>) -> Result<Self> {
        let comps = self
            .components
            .iter()
            .map(|c| {
                let cov = q * c.cov() * q.transpose();
                Gaussian::new(q * c.mean(), (&cov + cov.transpose()) * 0.5)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.weights.clone(), comps, self.labels.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn standard_normal_density() {
        let m = GaussianMixture::single(Gaussian::isotropic(v(&[0.0, 0.0]), 1.0).unwrap());
        assert!((m.log_density(&v(&[0.0, 0.0])).unwrap() + (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let mu = v(&[1.5, -0.5]);
        let m = GaussianMixture::unlabeled(
            vec![0.5, 0.5],
            vec![Gaussian::isotropic(mu.clone(), 1.0).unwrap(), Gaussian::isotropic(-&mu, 1.0).unwrap()],
        )
        .unwrap();
        let x = v(&[0.0, 0.0]);
        let ld = m.log_density(&x).unwrap();
        assert!((ld - (-mu.norm_squared() / 2.0 - (2.0 * PI).ln())).abs() < 1e-12);
        assert!(m.score(&x).unwrap().norm() < 1e-15);
        let h = m.hessian(&x).unwrap();
        let expect = &mu * mu.transpose() - DMatrix::identity(2, 2);
        assert!((h - expect).amax() < 1e-12);
    }

    #[test]
    fn single_component_hessian_is_minus_precision() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let g = Gaussian::new(v(&[1.0, 2.0]), cov.clone()).unwrap();
        let m = GaussianMixture::single(g);
        let h = m.hessian(&v(&[-3.0, 0.7])).unwrap();
        let inv = cov.try_inverse().unwrap();
        assert!((h + &inv).amax() < 1e-12);
        let e1 = v(&[1.0, 0.0]);
        let hv = m.hvp(&v(&[5.0, 5.0]), &e1).unwrap();
        assert!((hv + inv.column(0)).amax() < 1e-12);
    }

    #[test]
    fn diffuse_examples() {
        let g = Gaussian::new(v(&[2.0, -2.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let m = GaussianMixture::single(g);
        let q = m.diffuse_alpha_bar(0.25).unwrap();
        let c = &q.components()[0];
        assert!((c.mean() - v(&[1.0, -1.0])).amax() < 1e-15);
        let expect = DMatrix::from_row_slice(2, 2, &[0.5 + 0.75, 0.125, 0.125, 0.25 + 0.75]);
        assert!((c.cov() - expect).amax() < 1e-15);
        let same = m.diffuse_alpha_bar(1.0).unwrap();
        assert_eq!(same.components()[0].cov(), m.components()[0].cov());
    }

    #[test]
    fn conditional_view_rules() {
        let a = Gaussian::isotropic(v(&[0.0]), 1e-4).unwrap();
        let b = Gaussian::isotropic(v(&[1.0]), 0.5).unwrap();
        let m = GaussianMixture::new(vec![5.0, 95.0], vec![a, b], vec![Some("sharp".into()), Some("broad".into())]).unwrap();
        let s = m.conditional_view(Some("sharp")).unwrap();
        assert_eq!(s.weights(), &[1.0]);
        assert_eq!(s.components()[0].cov()[(0, 0)], 1e-4);
        let err = m.conditional_view(Some("nope")).unwrap_err().to_string();
        assert!(err.contains("sharp") && err.contains("broad"));
        assert_eq!(m.conditional_view(None).unwrap().weights().len(), 2);
    }

    #[test]
    fn sampling_is_seeded() {
        let m = GaussianMixture::single(Gaussian::isotropic(v(&[0.0, 0.0]), 1.0).unwrap());
        let a = m.sample(&mut ChaCha8Rng::seed_from_u64(3), 5);
        let b = m.sample(&mut ChaCha8Rng::seed_from_u64(3), 5);
        assert_eq!(a, b);
        assert_eq!(m.sample(&mut ChaCha8Rng::seed_from_u64(3), 1).len(), 1);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Gaussian::new(v(&[0.0, 0.0]), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        let m = GaussianMixture::single(Gaussian::isotropic(v(&[0.0, 0.0]), 1.0).unwrap());
        assert!(m.score(&v(&[f64::NAN, 0.0])).is_err());
        assert!(m.score(&v(&[0.0])).is_err());
    }
}
