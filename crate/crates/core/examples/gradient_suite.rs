//! Runs the finite-difference gradient suites and reports the worst case of each.

use meddino::gradsuite::{run_suite, Suite, TOLERANCE};

fn main() -> anyhow::Result<()> {
    for suite in [Suite::Ops, Suite::Losses, Suite::Blocks] {
        let t = std::time::Instant::now();
        let results = run_suite(suite)?;
        let (worst, err) = results
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .cloned()
            .unwrap_or_default();
        println!(
            "{suite:?}: {} cases in {:.1}s, worst {worst} at {err:.2e} ({})",
            results.len(),
            t.elapsed().as_secs_f64(),
            if err < TOLERANCE { "pass" } else { "FAIL" }
        );
    }
    Ok(())
}
