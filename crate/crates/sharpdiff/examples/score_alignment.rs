//! Correlation of Hessian trace statistics with score-norm statistics.

use sharpdiff::diffusion::NoiseSchedule;
use sharpdiff::field::GmmField;
use sharpdiff::harness::data::{build_toy_dataset, ToyConfig};
use sharpdiff::harness::experiments::{alignment_at, alignment_correlations, marginal_probes};

fn main() -> sharpdiff::Result<()> {
    let toy = build_toy_dataset(&ToyConfig { dim: 16, ..Default::default() }, 0)?;
    let field = GmmField::new(toy.mixture, NoiseSchedule::default_linear());
    let probes = marginal_probes(&field, None, 200, (0, 999), 0)?;
    let rows = alignment_at(&field, &probes, None)?;
    let (r1, r2) = alignment_correlations(&rows)?;
    println!("r(-tr H, |s|^2) {r1:.4}");
    println!("r(-tr H^3, |Hs|^2) {r2:.4}");
    Ok(())
}
