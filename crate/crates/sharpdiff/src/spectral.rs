//! Matrix-free Arnoldi iteration, Hessenberg eigenvalues and a dense
//! symmetric eigensolver.

use nalgebra::{Complex, DMatrix, DVector};
use crate::{Error, Result};

/// Output of [`arnoldi`].
#[derive(Debug, Clone)]
pub struct ArnoldiResult {
    /// Orthonormal Krylov basis `q_1..q_k`.
    pub basis: Vec<DVector<f64>>,
    /// Upper Hessenberg projection, `k x k`.
    pub hessenberg: DMatrix<f64>,
    /// The coupling `h_{k+1,k}` to the next basis vector.
    pub residual_coupling: f64,
    pub broke_down: bool,
    /// `q_{k+1}`, present when the iteration did not break down.
    pub next: Option<DVector<f64>>,
}

impl ArnoldiResult {
    pub fn steps(&self) -> usize {
        self.basis.len()
    }

    /// `max |Q^T Q - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.basis.len();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((self.basis[i].dot(&self.basis[j]) - target).abs());
            }
        }
        worst
    }

    /// Residual of `A Q = Q H + h q_next e_k^T`, relative to `max |A_ij|`.
    pub fn relation_residual(&self, a: &DMatrix<f64>) -> f64 {
        let k = self.basis.len();
        let d = a.nrows();
        let q = DMatrix::from_fn(d, k, |i, j| self.basis[j][i]);
        let mut r = a * &q - &q * &self.hessenberg;
        if let Some(next) = &self.next {
            for i in 0..d {
                r[(i, k - 1)] -= self.residual_coupling * next[i];
            }
        }
        let scale = a.amax().max(f64::MIN_POSITIVE);
        r.amax() / scale
    }
}

/// Ritz values sorted by descending magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct RitzSpectrum {
    pub values: Vec<Complex<f64>>,
}

impl RitzSpectrum {
    /// The Ritz value with the smallest real part.
    pub fn min_real(&self) -> f64 {
        self.values.iter().map(|z| z.re).fold(f64::INFINITY, f64::min)
    }

    pub fn max_real(&self) -> f64 {
        self.values.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest-magnitude value.
    pub fn leading(&self) -> Option<Complex<f64>> {
        self.values.first().copied()
    }
}

/// Deterministic pseudo-random unit vector.
pub fn unit_start_vector(d: usize, seed: u64) -> DVector<f64> {
    let v = crate::random::normal_vector(d, &mut crate::random::rng(seed));
    let n = v.norm();
    v / n
}

/// Default breakdown threshold for a start vector.
pub fn default_breakdown_eps(b: &DVector<f64>) -> f64 {
    1e-12 * b.norm()
}

/// Arnoldi iteration using only matrix-vector products.
///
/// Modified Gram-Schmidt with one reorthogonalization pass. Stops early
/// when the new residual norm drops to `eps` or below.
pub fn arnoldi<F>(mut apply: F, b: &DVector<f64>, m: usize, eps: f64) -> Result<ArnoldiResult>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let d = b.len();
    let bn = b.norm();
    if !(bn > 0.0) || !bn.is_finite() {
        return Err(Error::invalid("arnoldi start vector must be nonzero and finite"));
    }
    if m == 0 || m > d {
        return Err(Error::invalid(format!("arnoldi needs 1 <= m <= d, got m={m}, d={d}")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("breakdown threshold must be positive"));
    }

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(m);
    basis.push(b / bn);
    let mut h = DMatrix::zeros(m, m);

    for k in 0..m {
        let mut w = apply(&basis[k])?;
        if w.len() != d {
            return Err(Error::invalid(format!("apply returned dimension {} != {d}", w.len())));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { iteration: k, what: "operator output".into() });
        }
        for _pass in 0..2 {
            for (j, q) in basis.iter().enumerate() {
                let c = q.dot(&w);
                h[(j, k)] += c;
                w.axpy(-c, q, 1.0);
            }
        }
        let beta = w.norm();
        if beta <= eps {
            let k1 = k + 1;
            return Ok(ArnoldiResult {
                basis,
                hessenberg: h.view((0, 0), (k1, k1)).into_owned(),
                residual_coupling: beta,
                broke_down: true,
                next: None,
            });
        }
        let q = w / beta;
        if k + 1 < m {
            h[(k + 1, k)] = beta;
            basis.push(q);
        } else {
            return Ok(ArnoldiResult {
                basis,
                hessenberg: h,
                residual_coupling: beta,
                broke_down: false,
                next: Some(q),
            });
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// All eigenvalues of an upper Hessenberg matrix, by descending magnitude.
pub fn ritz_values(result: &ArnoldiResult) -> Result<RitzSpectrum> {
    hessenberg_eigenvalues(&result.hessenberg)
}

/// Eigenvalues of an upper Hessenberg matrix by implicit double-shift QR.
pub fn hessenberg_eigenvalues(h: &DMatrix<f64>) -> Result<RitzSpectrum> {
    let n = h.nrows();
    if n == 0 || h.ncols() != n {
        return Err(Error::invalid("hessenberg matrix must be square and nonempty"));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("hessenberg matrix has non-finite entries"));
    }
    for i in 0..n {
        for j in 0..i.saturating_sub(1) {
            if h[(i, j)] != 0.0 {
                return Err(Error::invalid(format!("entry ({i},{j}) below the subdiagonal is nonzero")));
            }
        }
    }
    let mut values = hqr(h.clone())?;
    values.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.re.partial_cmp(&a.re).unwrap_or(std::cmp::Ordering::Equal))
            .then(b.im.partial_cmp(&a.im).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(RitzSpectrum { values })
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

fn hqr(mut a: DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let n = a.nrows() as isize;
    let max_sweeps = 100 * n as usize;
    let mut sweeps = 0usize;
    let mut wr = vec![0.0; n as usize];
    let mut wi = vec![0.0; n as usize];
    let mut anorm = 0.0;
    for i in 0..n as usize {
        for j in i.saturating_sub(1)..n as usize {
            anorm += a[(i, j)].abs();
        }
    }
    let at = |a: &DMatrix<f64>, i: isize, j: isize| a[(i as usize, j as usize)];

    let mut nn = n - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l >= 1 {
                let mut s = at(&a, l - 1, l - 1).abs() + at(&a, l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if at(&a, l, l - 1).abs() + s == s {
                    a[(l as usize, l as usize - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = at(&a, nn, nn);
            if l == nn {
                wr[nn as usize] = x + t;
                wi[nn as usize] = 0.0;
                nn -= 1;
            } else {
                let mut y = at(&a, nn - 1, nn - 1);
                let mut w = at(&a, nn, nn - 1) * at(&a, nn - 1, nn);
                if l == nn - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x += t;
                    let (i1, i0) = (nn as usize, nn as usize - 1);
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        wr[i0] = x + z;
                        wr[i1] = x + z;
                        if z != 0.0 {
                            wr[i1] = x - w / z;
                        }
                        wi[i0] = 0.0;
                        wi[i1] = 0.0;
                    } else {
                        wr[i0] = x + p;
                        wr[i1] = x + p;
                        wi[i0] = -z;
                        wi[i1] = z;
                    }
                    nn -= 2;
                } else {
                    if sweeps >= max_sweeps {
                        return Err(Error::Convergence { sweeps });
                    }
                    if its == 10 || its == 20 {
                        t += x;
                        for i in 0..=nn as usize {
                            a[(i, i)] -= x;
                        }
                        let s = at(&a, nn, nn - 1).abs() + at(&a, nn - 1, nn - 2).abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    sweeps += 1;
                    let (mut p, mut q, mut r);
                    let mut m = nn - 2;
                    loop {
                        let z = at(&a, m, m);
                        let rr = x - z;
                        let ss = y - z;
                        p = (rr * ss - w) / at(&a, m + 1, m) + at(&a, m, m + 1);
                        q = at(&a, m + 1, m + 1) - z - rr - ss;
                        r = at(&a, m + 2, m + 1);
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = at(&a, m, m - 1).abs() * (q.abs() + r.abs());
                        let v = p.abs()
                            * (at(&a, m - 1, m - 1).abs() + z.abs() + at(&a, m + 1, m + 1).abs());
                        if u + v == v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in (m + 2)..=nn {
                        a[(i as usize, i as usize - 2)] = 0.0;
                        if i != m + 2 {
                            a[(i as usize, i as usize - 3)] = 0.0;
                        }
                    }
                    let mut k = m;
                    while k < nn {
                        if k != m {
                            p = at(&a, k, k - 1);
                            q = at(&a, k + 1, k - 1);
                            r = 0.0;
                            if k + 1 != nn {
                                r = at(&a, k + 2, k - 1);
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != 0.0 {
                            let (ku, k1, k2) = (k as usize, k as usize + 1, k as usize + 2);
                            if k == m {
                                if l != m {
                                    a[(ku, ku - 1)] = -a[(ku, ku - 1)];
                                }
                            } else {
                                a[(ku, ku - 1)] = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            let z = r / s;
                            q /= p;
                            r /= p;
                            for j in ku..=nn as usize {
                                let mut pp = a[(ku, j)] + q * a[(k1, j)];
                                if k + 1 != nn {
                                    pp += r * a[(k2, j)];
                                    a[(k2, j)] -= pp * z;
                                }
                                a[(k1, j)] -= pp * y;
                                a[(ku, j)] -= pp * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l as usize..=mmin as usize {
                                let mut pp = x * a[(i, ku)] + y * a[(i, k1)];
                                if k + 1 != nn {
                                    pp += z * a[(i, k2)];
                                    a[(i, k2)] -= pp * r;
                                }
                                a[(i, k1)] -= pp * q;
                                a[(i, ku)] -= pp;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if l >= nn - 1 {
                break;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex::new(re, im)).collect())
}

/// Checks `max |A - A^T| <= 1e-10 * max |A|`.
pub fn is_symmetric(a: &DMatrix<f64>) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = a.amax();
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return false;
            }
        }
    }
    true
}

/// All eigenvalues of a symmetric matrix in ascending order.
pub fn dense_symmetric_eigvals(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.nrows() != a.ncols() {
        return Err(Error::invalid("expected a nonempty square matrix"));
    }
    if !is_symmetric(a) {
        return Err(Error::invalid("matrix is not symmetric"));
    }
    let sym = (a + a.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ev)
}

/// Symmetric eigendecomposition `(eigenvalues ascending, eigenvectors as columns)`.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !is_symmetric(a) {
        return Err(Error::invalid("matrix is not symmetric"));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, idx[c])]);
    Ok((vals, vecs))
}

/// `f(A)` for symmetric `A` through its eigendecomposition.
pub fn symmetric_function<F: Fn(f64) -> f64>(a: &DMatrix<f64>, f: F) -> Result<DMatrix<f64>> {
    let (vals, vecs) = symmetric_eigen(a)?;
    let fd = DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|&v| f(v))));
    Ok(&vecs * fd * vecs.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diag_full_krylov() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 1.0, 0.1]));
        let b = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let res = arnoldi(|v| Ok(&a * v), &b, 3, 1e-12).unwrap();
        let ritz = ritz_values(&res).unwrap();
        let got: Vec<f64> = ritz.values.iter().map(|z| z.re).collect();
        for (g, e) in got.iter().zip([5.0, 1.0, 0.1]) {
            assert!((g - e).abs() < 1e-8, "{got:?}");
        }
    }

    #[test]
    fn rayleigh_quotient_single_step() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 1.0, 0.1]));
        let b = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let res = arnoldi(|v| Ok(&a * v), &b, 1, 1e-12).unwrap();
        let r = ritz_values(&res).unwrap();
        assert_eq!(r.values.len(), 1);
        assert!((r.values[0].re - 6.1 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_and_scalar() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = hessenberg_eigenvalues(&h).unwrap();
        assert!((r.values[0].re - 3.0).abs() < 1e-14 && (r.values[1].re - 1.0).abs() < 1e-14);
        let s = hessenberg_eigenvalues(&DMatrix::from_element(1, 1, -7.5)).unwrap();
        assert_eq!(s.values, vec![Complex::new(-7.5, 0.0)]);
    }

    #[test]
    fn rotation_gives_conjugate_pair() {
        let h = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let r = hessenberg_eigenvalues(&h).unwrap();
        assert!((r.values[0].im.abs() - 1.0).abs() < 1e-14);
        assert!((r.values[0].im + r.values[1].im).abs() < 1e-14);
    }

    #[test]
    fn errors() {
        let b = DVector::zeros(3);
        assert!(matches!(arnoldi(|v| Ok(v.clone()), &b, 2, 1e-12), Err(Error::InvalidInput(_))));
        let b = DVector::from_element(3, 1.0);
        assert!(matches!(arnoldi(|v| Ok(v.clone()), &b, 4, 1e-12), Err(Error::InvalidInput(_))));
        let err = arnoldi(|v| Ok(v * f64::NAN), &b, 2, 1e-12).unwrap_err();
        assert!(matches!(err, Error::Numeric { iteration: 0, .. }));
    }

    #[test]
    fn identity_breaks_down_immediately() {
        let b = DVector::from_element(4, 1.0);
        let res = arnoldi(|v| Ok(v.clone()), &b, 4, 1e-12).unwrap();
        assert!(res.broke_down);
        assert_eq!(res.steps(), 1);
    }

    #[test]
    fn dense_eigs() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -3.0, 0.0]));
        assert_eq!(dense_symmetric_eigvals(&a).unwrap(), vec![-3.0, 0.0, 2.0]);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(dense_symmetric_eigvals(&asym).is_err());
    }
}
