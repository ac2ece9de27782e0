//! Trains a small conditional score network on the toy mixture and compares
//! its Hessian trace with the exact one.

use sharpdiff::diffusion::NoiseSchedule;
use sharpdiff::field::GmmField;
use sharpdiff::harness::data::{build_toy_dataset, ToyConfig};
use sharpdiff::harness::experiments::{marginal_probes, trace_correlation, train_network, NetShape};
use sharpdiff::scorenet::{NetField, TrainConfig};

fn main() -> sharpdiff::Result<()> {
    let sched = NoiseSchedule::default_linear();
    let toy = build_toy_dataset(&ToyConfig::default(), 0)?;
    let oracle = GmmField::new(toy.mixture.clone(), sched.clone());
    let train = TrainConfig { epochs: 60, learning_rate: 3e-3, cosine_decay: true, ..Default::default() };
    let (net, report) = train_network(&toy.examples, &NetShape::default(), &train, &sched)?;
    println!("loss {:.4} -> {:.4} over {} epochs", report.initial_loss, report.final_loss, report.epoch_losses.len());
    let probes = marginal_probes(&oracle, None, 50, (250, 750), 1)?;
    let r = trace_correlation(&NetField::new(net, sched), &oracle, &probes, None)?;
    println!("trace correlation with the exact field {r:.3}");
    Ok(())
}
