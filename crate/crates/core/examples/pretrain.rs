//! Stage-1 pretraining on a generated phantom set.
//!
//! Usage: `pretrain [ITERATIONS] [OUT_DIR]`. Checkpoints and the loss trace
//! land in OUT_DIR (a temporary directory when omitted).

use meddino::data::{generate_dataset, load_split, Split};
use meddino::train::{run_stage, PretrainConfig};
use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let tmp = tempfile::tempdir()?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| tmp.path().join("run"));

    let manifest = generate_dataset(&tmp.path().join("data"), 100, 96, 7)?;
    let cfg = PretrainConfig { iterations: Some(iterations), ..Default::default() };
    let data = load_split(&manifest, Split::Train, cfg.image_size, cfg.window)?;
    let t = std::time::Instant::now();
    let run = run_stage(&cfg, 1, &data, None, &out)?;
    let every = (run.trace.len() / 10).max(1);
    println!("{}", meddino::train::TRACE_HEADER);
    for row in run.trace.iter().step_by(every) {
        println!("{}", row.csv());
    }
    println!(
        "{} iterations in {:.1}s; final checkpoint {}",
        run.trace.len(),
        t.elapsed().as_secs_f64(),
        run.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}
