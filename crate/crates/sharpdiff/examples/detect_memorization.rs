//! Scores a bank of conditions by score-difference norm and by the sharpness
//! probe, then reports AUC against the known labels.

use sharpdiff::diffusion::NoiseSchedule;
use sharpdiff::field::GmmField;
use sharpdiff::harness::data::{build_condition_bank, BankConfig};
use sharpdiff::harness::experiments::{run_detection, DetectConfig};

fn main() -> sharpdiff::Result<()> {
    let bank = build_condition_bank(&BankConfig::default(), 0)?;
    let field = GmmField::new(bank.mixture, NoiseSchedule::default_linear());
    for r in run_detection(&field, &bank.conditions, &DetectConfig::default(), 0)? {
        println!("{:?}: AUC {:.3}, TPR@1%FPR {:.3}, shuffled AUC {:.3}", r.metric, r.auc, r.tpr_at_fpr, r.null_auc);
    }
    Ok(())
}
