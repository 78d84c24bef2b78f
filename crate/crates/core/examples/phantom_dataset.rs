//! Generates a small phantom dataset and summarizes it.

use meddino::data::{generate_dataset, load_split, Manifest, Split, MANIFEST_NAME, NUM_CLASSES};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let written = generate_dataset(dir.path(), 10, 96, 3)?;
    let manifest = Manifest::load(&dir.path().join(MANIFEST_NAME))?;
    assert_eq!(written.records.len(), manifest.records.len());

    for r in manifest.records.iter().take(3) {
        let s = manifest.read_slice(r)?;
        let label = s.label.as_deref().unwrap_or_default();
        let mut counts = [0usize; NUM_CLASSES];
        for &l in label {
            counts[l as usize] += 1;
        }
        let (lo, hi) = s.pixels.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "{} {:?} {}×{} spacing {:.3}×{:.3} mm, HU [{lo:.0}, {hi:.0}], pixels per class {counts:?}",
            r.image, r.split, s.height(), s.width(), s.spacing.0, s.spacing.1
        );
    }
    let train = load_split(&manifest, Split::Train, 64, Default::default())?;
    let val = load_split(&manifest, Split::Val, 64, Default::default())?;
    println!("preprocessed: {} train, {} val slices at 64×64", train.len(), val.len());
    Ok(())
}
