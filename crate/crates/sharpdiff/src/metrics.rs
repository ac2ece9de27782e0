//! Sharpness metrics and Monte-Carlo verifiers for the Gaussian identities
//! that relate score norms to Hessian traces.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::field::ScoreField;
use crate::gmm::{Gaussian, GaussianMixture};
use crate::spectral::{self, RitzSpectrum};
use crate::{Error, Result};

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// `||s(x, t, cond)||^2`.
pub fn score_norm_sq<F: ScoreField + ?Sized>(field: &F, x: &DVector<f64>, t: usize, cond: Option<&str>) -> Result<f64> {
    Ok(field.score(x, t, cond)?.norm_squared())
}

/// Conditional minus unconditional score.
pub fn score_delta<F: ScoreField + ?Sized>(field: &F, x: &DVector<f64>, t: usize, cond: &str) -> Result<DVector<f64>> {
    Ok(field.score(x, t, Some(cond))? - field.score(x, t, None)?)
}

/// `H^Delta v` through two Hessian-vector products.
pub fn hvp_delta<F: ScoreField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: usize,
    cond: &str,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(field.hvp(x, t, Some(cond), v)? - field.hvp(x, t, None, v)?)
}

/// `||s(x, c) - s(x)||`.
pub fn wen_metric<F: ScoreField + ?Sized>(field: &F, x: &DVector<f64>, t: usize, cond: &str) -> Result<f64> {
    Ok(score_delta(field, x, t, cond)?.norm())
}

/// `||H^Delta s^Delta||^2`, matrix-free.
pub fn hsp_exact<F: ScoreField + ?Sized>(field: &F, x: &DVector<f64>, t: usize, cond: &str) -> Result<f64> {
    let sd = score_delta(field, x, t, cond)?;
    Ok(hvp_delta(field, x, t, cond, &sd)?.norm_squared())
}

/// `||s^Delta(x + delta s^Delta(x)) - s^Delta(x)||^2 / delta^2`.
pub fn hsp_taylor<F: ScoreField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: usize,
    cond: &str,
    delta: f64,
) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::invalid("probe step must be positive"));
    }
    let sd = score_delta(field, x, t, cond)?;
    let moved = score_delta(field, &(x + &sd * delta), t, cond)?;
    Ok((moved - sd).norm_squared() / (delta * delta))
}

/// Ritz values of the field's Hessian at `(x, t)` from `m` Arnoldi steps.
pub fn spectrum_at<F: ScoreField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: usize,
    cond: Option<&str>,
    m: usize,
    seed: u64,
) -> Result<RitzSpectrum> {
    let b = spectral::unit_start_vector(field.dim(), seed);
    let eps = spectral::default_breakdown_eps(&b);
    let res = spectral::arnoldi(|v| field.hvp(x, t, cond, v), &b, m, eps)?;
    spectral::ritz_values(&res)
}

/// Memorization label attached to a metric record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemLabel {
    Memorized,
    NonMemorized,
    Unknown,
}

impl MemLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            MemLabel::Memorized => "memorized",
            MemLabel::NonMemorized => "non-memorized",
            MemLabel::Unknown => "unknown",
        }
    }
}

/// Every metric at one `(sample, t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub sample_id: usize,
    pub t: usize,
    pub score_norm_sq: f64,
    pub wen: f64,
    pub hsp_exact: f64,
    pub hsp_taylor: f64,
    pub label: MemLabel,
}

impl MetricRecord {
    pub const HEADER: [&'static str; 7] = ["sample_id", "t", "score_norm_sq", "wen", "hsp_exact", "hsp_taylor", "label"];

    pub fn evaluate<F: ScoreField + ?Sized>(
        field: &F,
        sample_id: usize,
        x: &DVector<f64>,
        t: usize,
        cond: &str,
        delta: f64,
        label: MemLabel,
    ) -> Result<Self> {
        Ok(Self {
            sample_id,
            t,
            score_norm_sq: score_norm_sq(field, x, t, Some(cond))?,
            wen: wen_metric(field, x, t, cond)?,
            hsp_exact: hsp_exact(field, x, t, cond)?,
            hsp_taylor: hsp_taylor(field, x, t, cond, delta)?,
            label,
        })
    }

    pub fn row(&self) -> Vec<String> {
        vec![
            self.sample_id.to_string(),
            self.t.to_string(),
            fmt_f64(self.score_norm_sq),
            fmt_f64(self.wen),
            fmt_f64(self.hsp_exact),
            fmt_f64(self.hsp_taylor),
            self.label.as_str().to_string(),
        ]
    }
}

/// Linear-interpolation quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile level {q} outside [0, 1]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("quantile of a sample containing NaN"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Running mean and standard error.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAcc {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAcc {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }
    pub fn count(&self) -> u64 {
        self.n
    }
    pub fn mean(&self) -> f64 {
        self.mean
    }
    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            return f64::INFINITY;
        }
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Outcome of one Monte-Carlo identity check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub analytic: f64,
    pub closed_form: f64,
    pub mc_estimate: f64,
    pub mc_se: f64,
    pub samples: u64,
}

impl LemmaReport {
    pub const HEADER: [&'static str; 7] = ["lemma", "analytic", "closed_form", "mc_estimate", "mc_se", "samples", "pass"];

    /// Within `k` standard errors.
    pub fn within(&self, k: f64) -> bool {
        (self.closed_form - self.mc_estimate).abs() <= k * self.mc_se
    }

    /// The 4-standard-error gate.
    pub fn passes(&self) -> bool {
        self.within(4.0)
    }

    pub fn z_score(&self) -> f64 {
        (self.closed_form - self.mc_estimate) / self.mc_se
    }

    pub fn row(&self) -> Vec<String> {
        vec![
            self.lemma.clone(),
            fmt_f64(self.analytic),
            fmt_f64(self.closed_form),
            fmt_f64(self.mc_estimate),
            fmt_f64(self.mc_se),
            self.samples.to_string(),
            self.passes().to_string(),
        ]
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid("need at least two Monte-Carlo samples"));
    }
    Ok(())
}

fn eigen_sum(sigma: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<f64> {
    Ok(spectral::dense_symmetric_eigvals(sigma)?.into_iter().map(f).sum())
}

/// `E ||s(x)||^2 = tr(Sigma^{-1})` for `x ~ N(0, Sigma)`.
pub fn verify_lemma_score_norm(sigma: &DMatrix<f64>, n: usize, seed: u64) -> Result<LemmaReport> {
    check_samples(n)?;
    let d = sigma.nrows();
    let g = Gaussian::new(DVector::zeros(d), sigma.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = MeanAcc::default();
    for _ in 0..n {
        let x = g.sample(&mut rng);
        acc.push(g.pull(&x).norm_squared());
    }
    Ok(LemmaReport {
        lemma: "score-norm".into(),
        analytic: g.trace_precision(),
        closed_form: eigen_sum(sigma, |l| 1.0 / l)?,
        mc_estimate: acc.mean(),
        mc_se: acc.std_error(),
        samples: n as u64,
    })
}

/// Mixture form: `E ||s||^2` against `E[-tr H]` on paired draws.
///
/// `closed_form` holds the mean of `-tr H`, `mc_estimate` the mean of
/// `||s||^2`, and `mc_se` the standard error of their paired difference.
pub fn verify_lemma_score_norm_mixture(mix: &GaussianMixture, n: usize, seed: u64) -> Result<LemmaReport> {
    check_samples(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut norm, mut tr, mut diff) = (MeanAcc::default(), MeanAcc::default(), MeanAcc::default());
    for x in mix.sample(&mut rng, n) {
        let s = mix.score(&x)?.norm_squared();
        let t = -mix.hessian_trace(&x)?;
        norm.push(s);
        tr.push(t);
        diff.push(s - t);
    }
    Ok(LemmaReport {
        lemma: "score-norm-mixture".into(),
        analytic: tr.mean(),
        closed_form: tr.mean(),
        mc_estimate: norm.mean(),
        mc_se: diff.std_error(),
        samples: n as u64,
    })
}

/// `||Sigma^{-1}(mu_c - mu)||^2 + tr((Sigma^{-1} - Sigma_c^{-1})^2 Sigma_c)`.
pub fn score_difference_closed_form(
    mu: &DVector<f64>,
    mu_c: &DVector<f64>,
    sigma: &DMatrix<f64>,
    sigma_c: &DMatrix<f64>,
) -> Result<f64> {
    let g = Gaussian::new(mu.clone(), sigma.clone())?;
    let gc = Gaussian::new(mu_c.clone(), sigma_c.clone())?;
    let diff = g.precision() - gc.precision();
    let mean_term = g.apply_precision(&(mu_c - mu)).norm_squared();
    Ok(mean_term + (&diff * &diff * sigma_c).trace())
}

/// The same expectation written as `tr((H - H_c)^2 H_c^{-1})` with
/// `H = -Sigma^{-1}`; evaluates to minus the trace term.
pub fn score_difference_statement_form(sigma: &DMatrix<f64>, sigma_c: &DMatrix<f64>) -> Result<f64> {
    let d = sigma.nrows();
    let h = -Gaussian::new(DVector::zeros(d), sigma.clone())?.precision().clone();
    let hc = -Gaussian::new(DVector::zeros(d), sigma_c.clone())?.precision().clone();
    let diff = &h - &hc;
    let hc_inv = -sigma_c.clone();
    Ok((&diff * &diff * hc_inv).trace())
}

/// `sum_i (l_i - l_ci)^2 / l_ci` over precision eigenvalues.
pub fn commuting_score_difference(prec: &[f64], prec_c: &[f64]) -> Result<f64> {
    if prec.len() != prec_c.len() || prec.iter().chain(prec_c).any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("precision eigenvalues must be positive and paired"));
    }
    Ok(prec.iter().zip(prec_c).map(|(l, lc)| (l - lc).powi(2) / lc).sum())
}

/// `sum_i (l_i - l_ci)^4 / l_ci` over precision eigenvalues.
pub fn commuting_hsp_expectation(prec: &[f64], prec_c: &[f64]) -> Result<f64> {
    if prec.len() != prec_c.len() || prec.iter().chain(prec_c).any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("precision eigenvalues must be positive and paired"));
    }
    Ok(prec.iter().zip(prec_c).map(|(l, lc)| (l - lc).powi(4) / lc).sum())
}

/// `E ||s_c - s||^2` over `x ~ N(mu_c, Sigma_c)`.
pub fn verify_lemma_score_difference(
    mu: &DVector<f64>,
    mu_c: &DVector<f64>,
    sigma: &DMatrix<f64>,
    sigma_c: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> Result<LemmaReport> {
    check_samples(n)?;
    let g = Gaussian::new(mu.clone(), sigma.clone())?;
    let gc = Gaussian::new(mu_c.clone(), sigma_c.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = MeanAcc::default();
    for _ in 0..n {
        let x = gc.sample(&mut rng);
        acc.push((gc.pull(&x) - g.pull(&x)).norm_squared());
    }
    let analytic = score_difference_closed_form(mu, mu_c, sigma, sigma_c)?;
    let closed_form = match (diagonal_of(sigma), diagonal_of(sigma_c)) {
        (Some(a), Some(b)) if mu == mu_c => {
            let pa: Vec<f64> = a.iter().map(|v| 1.0 / v).collect();
            let pb: Vec<f64> = b.iter().map(|v| 1.0 / v).collect();
            commuting_score_difference(&pa, &pb)?
        }
        _ => analytic,
    };
    Ok(LemmaReport {
        lemma: "score-difference".into(),
        analytic,
        closed_form,
        mc_estimate: acc.mean(),
        mc_se: acc.std_error(),
        samples: n as u64,
    })
}

fn diagonal_of(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = m.nrows();
    let diag = (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0));
    diag.then(|| m.diagonal().iter().copied().collect())
}

/// `E ||H s||^2 = tr(Sigma^{-3})` for `x ~ N(0, Sigma)`.
pub fn verify_lemma_score_cubic(sigma: &DMatrix<f64>, n: usize, seed: u64) -> Result<LemmaReport> {
    check_samples(n)?;
    let d = sigma.nrows();
    let g = Gaussian::new(DVector::zeros(d), sigma.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = MeanAcc::default();
    for _ in 0..n {
        let x = g.sample(&mut rng);
        let s = g.pull(&x);
        acc.push(g.apply_precision(&s).norm_squared());
    }
    let p = g.precision();
    Ok(LemmaReport {
        lemma: "score-cubic".into(),
        analytic: (p * p * p).trace(),
        closed_form: eigen_sum(sigma, |l| l.powi(-3))?,
        mc_estimate: acc.mean(),
        mc_se: acc.std_error(),
        samples: n as u64,
    })
}

/// `E ||H^Delta s^Delta||^2` for a Gaussian pair: with `D = Sigma^{-1} - Sigma_c^{-1}`,
/// `tr(D^2 Sigma_c D^2) + ||D Sigma^{-1} (mu_c - mu)||^2`.
pub fn hsp_gaussian_closed_form(
    mu: &DVector<f64>,
    mu_c: &DVector<f64>,
    sigma: &DMatrix<f64>,
    sigma_c: &DMatrix<f64>,
) -> Result<f64> {
    let g = Gaussian::new(mu.clone(), sigma.clone())?;
    let gc = Gaussian::new(mu_c.clone(), sigma_c.clone())?;
    let dm = g.precision() - gc.precision();
    let d2 = &dm * &dm;
    let mean_term = (&dm * g.apply_precision(&(mu_c - mu))).norm_squared();
    Ok((&d2 * sigma_c * &d2).trace() + mean_term)
}

/// Monte-Carlo check of the quartic expectation over conditional draws.
pub fn verify_hsp_expectation(
    mu: &DVector<f64>,
    mu_c: &DVector<f64>,
    sigma: &DMatrix<f64>,
    sigma_c: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> Result<LemmaReport> {
    check_samples(n)?;
    let g = Gaussian::new(mu.clone(), sigma.clone())?;
    let gc = Gaussian::new(mu_c.clone(), sigma_c.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = MeanAcc::default();
    for _ in 0..n {
        let x = gc.sample(&mut rng);
        let sd = gc.pull(&x) - g.pull(&x);
        let hsd = g.apply_precision(&sd) - gc.apply_precision(&sd);
        acc.push(hsd.norm_squared());
    }
    let analytic = hsp_gaussian_closed_form(mu, mu_c, sigma, sigma_c)?;
    let closed_form = match (diagonal_of(sigma), diagonal_of(sigma_c)) {
        (Some(a), Some(b)) if mu == mu_c => {
            let pa: Vec<f64> = a.iter().map(|v| 1.0 / v).collect();
            let pb: Vec<f64> = b.iter().map(|v| 1.0 / v).collect();
            commuting_hsp_expectation(&pa, &pb)?
        }
        _ => analytic,
    };
    Ok(LemmaReport {
        lemma: "hsp-quartic".into(),
        analytic,
        closed_form,
        mc_estimate: acc.mean(),
        mc_se: acc.std_error(),
        samples: n as u64,
    })
}

/// Generalized eigenvalues of `Sigma^{-1} v = l Sigma_c^{-1} v`, ascending.
pub fn generalized_eigenvalues(sigma: &DMatrix<f64>, sigma_c: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = sigma.nrows();
    let g = Gaussian::new(DVector::zeros(d), sigma.clone())?;
    Gaussian::new(DVector::zeros(d), sigma_c.clone())?;
    let root = spectral::symmetric_function(sigma_c, f64::sqrt)?;
    let s = &root * g.precision() * &root;
    spectral::dense_symmetric_eigvals(&((&s + s.transpose()) * 0.5))
}

/// Squared affine-invariant distance `||log(Sigma_c^{-1/2} Sigma Sigma_c^{-1/2})||_F^2`.
pub fn fisher_rao_sq(sigma: &DMatrix<f64>, sigma_c: &DMatrix<f64>) -> Result<f64> {
    let inv_root = spectral::symmetric_function(sigma_c, |l| 1.0 / l.sqrt())?;
    let a = &inv_root * sigma * &inv_root;
    let a = (&a + a.transpose()) * 0.5;
    let (vals, _) = spectral::symmetric_eigen(&a)?;
    if vals.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("matrices must be positive definite"));
    }
    Ok(vals.iter().map(|l| l.ln().powi(2)).sum())
}

/// One row of [`fisher_rao_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FisherRaoRow {
    pub scale: f64,
    pub score_difference: f64,
    pub fisher_rao_sq: f64,
    pub ratio: f64,
}

/// Compares `E ||s^Delta||^2` with the squared Fisher-Rao distance for
/// `Sigma_c = Sigma + scale * direction` with shared means.
pub fn fisher_rao_check(sigma: &DMatrix<f64>, direction: &DMatrix<f64>, scales: &[f64]) -> Result<Vec<FisherRaoRow>> {
    let d = sigma.nrows();
    if direction.shape() != sigma.shape() || !spectral::is_symmetric(direction) {
        return Err(Error::invalid("direction must be a symmetric matrix shaped like sigma"));
    }
    let zero = DVector::zeros(d);
    scales
        .iter()
        .map(|&scale| {
            let sigma_c = sigma + direction * scale;
            let (vals, _) = spectral::symmetric_eigen(&sigma_c)?;
            if vals[0] <= 0.0 {
                return Err(Error::invalid(format!("perturbed covariance is indefinite at scale {scale}")));
            }
            let sd = score_difference_closed_form(&zero, &zero, sigma, &sigma_c)?;
            let fr = fisher_rao_sq(sigma, &sigma_c)?;
            let ratio = if fr == 0.0 { if sd == 0.0 { 1.0 } else { f64::INFINITY } } else { sd / fr };
            Ok(FisherRaoRow { scale, score_difference: sd, fisher_rao_sq: fr, ratio })
        })
        .collect()
}

/// Limit of the ratio column as the scale goes to zero:
/// `tr(P E P^2 E) / tr(P E P E)` with `P = Sigma^{-1}`.
pub fn fisher_rao_limit_ratio(sigma: &DMatrix<f64>, direction: &DMatrix<f64>) -> Result<f64> {
    let d = sigma.nrows();
    let p = Gaussian::new(DVector::zeros(d), sigma.clone())?.precision().clone();
    let pe = &p * direction;
    let num = (&pe * &p * &pe).trace();
    let den = (&pe * &pe).trace();
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn score_difference_fixtures() {
        let z = DVector::zeros(2);
        let v = score_difference_closed_form(&z, &z, &DMatrix::identity(2, 2), &diag(&[0.25, 1.0])).unwrap();
        assert!((v - 2.25).abs() < 1e-12);
        let mu = DVector::from_vec(vec![1.0, 0.0]);
        let v = score_difference_closed_form(&mu, &z, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let s = score_difference_statement_form(&DMatrix::identity(2, 2), &diag(&[0.25, 1.0])).unwrap();
        assert!((s + 2.25).abs() < 1e-12);
    }

    #[test]
    fn quartic_fixture() {
        let v = commuting_hsp_expectation(&[1.0], &[4.0]).unwrap();
        assert_eq!(v, 20.25);
        let z = DVector::zeros(1);
        let c = hsp_gaussian_closed_form(&z, &z, &diag(&[1.0]), &diag(&[0.25])).unwrap();
        assert!((c - 20.25).abs() < 1e-12);
    }

    #[test]
    fn generalized_commuting() {
        let ev = generalized_eigenvalues(&diag(&[1.0, 2.0]), &diag(&[4.0, 2.0])).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fisher_rao_fixture() {
        let fr = fisher_rao_sq(&DMatrix::identity(2, 2), &diag(&[std::f64::consts::E, 1.0])).unwrap();
        assert!((fr - 1.0).abs() < 1e-12);
        let rows = fisher_rao_check(&DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), &[0.1]).unwrap();
        assert_eq!(rows[0].fisher_rao_sq, 0.0);
        assert_eq!(rows[0].score_difference, 0.0);
        assert!(fisher_rao_check(&DMatrix::identity(2, 2), &-DMatrix::identity(2, 2), &[2.0]).is_err());
    }

    #[test]
    fn mean_acc() {
        let mut a = MeanAcc::default();
        for v in [1.0, 2.0, 3.0, 4.0] {
            a.push(v);
        }
        assert_eq!(a.mean(), 2.5);
        assert!((a.variance() - 5.0 / 3.0).abs() < 1e-15);
    }
}
