//! Monte-Carlo checks of the closed-form score identities.

use sharpdiff::harness::experiments::{run_lemmas, LemmaConfig};

fn main() -> sharpdiff::Result<()> {
    let cfg = LemmaConfig { matrices: 3, samples: 20_000, mixtures: 1, mixture_samples: 20_000, ..Default::default() };
    for r in run_lemmas(&cfg, 0)? {
        println!(
            "{:<24} closed {:>12.5} mc {:>12.5} ± {:.5}  z {:+.2} {}",
            r.lemma,
            r.closed_form,
            r.mc_estimate,
            r.mc_se,
            r.z_score(),
            if r.passes() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
