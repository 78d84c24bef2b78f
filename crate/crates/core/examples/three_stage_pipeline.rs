//! Runs stage 1, then gram-anchored stage 2, then the high-resolution
//! stage 3, each resuming from the previous final checkpoint.
//!
//! Usage: `three_stage_pipeline [STAGE1_ITERS] [LATE_ITERS]`.

use meddino::data::{generate_dataset, load_split, Split};
use meddino::train::{run_stage, PretrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let n1: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let n_late: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(4);
    let dir = tempfile::tempdir()?;
    let manifest = generate_dataset(&dir.path().join("data"), 60, 96, 2)?;
    let base = PretrainConfig::default();

    let mut resume = None;
    for (stage, iters) in [(1u8, n1), (2, n_late), (3, n_late)] {
        let cfg = PretrainConfig { iterations: Some(iters), ..base.clone() };
        let data = load_split(&manifest, Split::Train, cfg.data_size(stage), cfg.window)?;
        let t = std::time::Instant::now();
        let out = dir.path().join(format!("stage{stage}"));
        let run = run_stage(&cfg, stage, &data, resume.as_deref(), &out)?;
        let last = run.trace.last().expect("non-empty budget");
        println!(
            "stage {stage}: {iters} iterations in {:.1}s, ends at global iteration {} with loss {:.4} (gram {:?})",
            t.elapsed().as_secs_f64(),
            run.state.iteration,
            last.total,
            last.parts.gram
        );
        resume = run.checkpoints.last().cloned();
    }
    Ok(())
}
