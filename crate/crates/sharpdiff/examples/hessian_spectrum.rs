//! Late-trajectory Hessian spectra for a sharp and a broad condition.

use sharpdiff::diffusion::NoiseSchedule;
use sharpdiff::field::GmmField;
use sharpdiff::harness::data::{build_toy_dataset, ToyConfig, BROAD, SHARP};
use sharpdiff::harness::eval;
use sharpdiff::harness::experiments::{run_spectra, SpectrumConfig};

fn main() -> sharpdiff::Result<()> {
    let toy = build_toy_dataset(&ToyConfig::default(), 0)?;
    let field = GmmField::new(toy.mixture, NoiseSchedule::default_linear());
    let cfg = SpectrumConfig { conditions: vec![SHARP.into(), BROAD.into()], seeds: 20, ..Default::default() };
    let trajs = run_spectra(&field, &cfg, 0)?;
    let of = |c: &str| -> Vec<f64> { trajs.iter().filter(|t| t.condition == c).map(|t| t.min_eig()).collect() };
    let (sharp, broad) = (of(SHARP), of(BROAD));
    println!("median min eigenvalue: sharp {:.1}, broad {:.1}", eval::median(&sharp)?, eval::median(&broad)?);
    println!("one-sided Mann-Whitney p {:.2e}", eval::mann_whitney(&sharp, &broad)?.p_less);
    Ok(())
}
