//! Deterministic DDIM sampling with classifier-free guidance on an exact
//! mixture score.

use sharpdiff::diffusion::{NoiseSchedule, SamplerConfig};
use sharpdiff::field::GmmField;
use sharpdiff::harness::data::{build_toy_dataset, ToyConfig, BROAD, SHARP};
use sharpdiff::harness::experiments::generate_samples;

fn main() -> sharpdiff::Result<()> {
    let toy = build_toy_dataset(&ToyConfig::default(), 0)?;
    let field = GmmField::new(toy.mixture, NoiseSchedule::default_linear());
    for w in [1.0, 4.0] {
        let cfg = SamplerConfig { inference_steps: 50, guidance: w, eta: 0.0 };
        for cond in [SHARP, BROAD] {
            let xs = generate_samples(&field, Some(cond), 200, &cfg, 0)?;
            let spread = xs.iter().map(|x| x.norm()).sum::<f64>() / xs.len() as f64;
            println!("w {w:<4} {cond:<6} mean |x| {spread:.3}");
        }
    }
    Ok(())
}
