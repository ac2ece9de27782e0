//! Optimizes initial noise away from a sharp memorized component.

use sharpdiff::diffusion::NoiseSchedule;
use sharpdiff::field::GmmField;
use sharpdiff::harness::data::{build_spike_toy, SpikeConfig, MEMORIZED};
use sharpdiff::harness::experiments::initial_noise;
use sharpdiff::sail::{sail_loss, sail_optimize, GradientMethod, SailConfig};

fn main() -> sharpdiff::Result<()> {
    let toy = build_spike_toy(&SpikeConfig::default(), 0)?;
    let field = GmmField::new(toy.mixture, NoiseSchedule::default_linear());
    let cfg = SailConfig { gradient: GradientMethod::Adjoint, max_iters: 30, ..Default::default() };
    let d = field.mixture().dim();
    for seed in 0..4 {
        let x = initial_noise(d, 0, seed);
        let before = sail_loss(&field, &x, MEMORIZED, &cfg)?;
        let (y, trace) = sail_optimize(&field, &x, MEMORIZED, &cfg)?;
        let after = sail_loss(&field, &y, MEMORIZED, &cfg)?;
        println!(
            "seed {seed}: sharpness {:.3e} -> {:.3e}, |x|^2/d {:.3} -> {:.3}, {} iters",
            before.sharpness,
            after.sharpness,
            x.norm_squared() / d as f64,
            y.norm_squared() / d as f64,
            trace.losses.len()
        );
    }
    Ok(())
}
