//! Writes a pretraining state to an MD3C checkpoint, reads it back and
//! checks that a second write reproduces the same bytes.

use meddino::train::{checkpoint_name, list_checkpoints, Checkpoint, PretrainConfig, TrainState};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = PretrainConfig::default();
    let state = TrainState::init(&cfg)?;
    let path = dir.path().join(checkpoint_name(state.iteration));
    state.to_checkpoint(&cfg)?.write(&path)?;

    let ck = Checkpoint::read(&path)?;
    println!("{} entries, meta iteration {}", ck.entries.len(), ck.meta["iteration"]);
    for (name, payload) in ck.entries.iter().take(5) {
        println!("  {name} {} {:?}", payload.dtype(), payload.shape());
    }
    let restored = TrainState::from_checkpoint(&ck)?;
    let again = restored.to_checkpoint(&cfg)?.to_bytes()?;
    println!("byte-identical rewrite: {}", again == std::fs::read(&path)?);
    println!("listing: {:?}", list_checkpoints(dir.path())?);
    Ok(())
}
