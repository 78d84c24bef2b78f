//! Fine-tunes a segmentation model from random init, or from a pretraining
//! checkpoint given as the first argument, and reports validation DSC.

use meddino::data::{generate_dataset, load_split, Split};
use meddino::train::{encoder_from_checkpoint, finetune, Checkpoint, FinetuneConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = tempfile::tempdir()?;
    let manifest = generate_dataset(dir.path(), 200, 96, 11)?;
    let cfg = FinetuneConfig::default();
    let train = load_split(&manifest, Split::Train, cfg.image_size, cfg.window)?;
    let val = load_split(&manifest, Split::Val, cfg.image_size, cfg.window)?;
    let encoder = match std::env::args().nth(1) {
        Some(p) => Some(encoder_from_checkpoint(&Checkpoint::read(p.as_ref())?)?),
        None => None,
    };
    let t = std::time::Instant::now();
    let run = finetune(&cfg, &train, &val, encoder.as_ref(), None)?;
    for row in &run.epochs {
        println!("{}", row.csv());
    }
    println!("{:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
