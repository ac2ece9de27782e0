//! Matrix-free Arnoldi on a planted spectrum.

use nalgebra::{DMatrix, DVector};
use sharpdiff::spectral;

fn main() -> sharpdiff::Result<()> {
    let d = 50;
    let mut rng = sharpdiff::random::rng(1);
    let (_, q) = spectral::symmetric_eigen(&{
        let g = DMatrix::from_fn(d, d, |_, _| sharpdiff::random::normal_vector(1, &mut rng)[0]);
        &g + g.transpose()
    })?;
    let planted: Vec<f64> = (0..d).map(|i| if i < 3 { -40.0 - i as f64 } else { -(i as f64) / d as f64 }).collect();
    let a = &q * DMatrix::from_diagonal(&DVector::from_vec(planted)) * q.transpose();

    let start = spectral::unit_start_vector(d, 0);
    let res = spectral::arnoldi(|v: &DVector<f64>| Ok(&a * v), &start, 12, 1e-12)?;
    let ritz = spectral::ritz_values(&res)?;
    println!("steps {}, orthonormality error {:.1e}", res.steps(), res.orthonormality_error());
    println!("Ritz range [{:.4}, {:.4}] (planted -42 and -0.06; the bulk end converges slowly)", ritz.min_real(), ritz.max_real());
    Ok(())
}
