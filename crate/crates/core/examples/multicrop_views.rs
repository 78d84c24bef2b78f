//! Preprocesses one phantom and draws the global and local crops, the
//! block mask of the masked crop and the 2× gram-teacher crop.

use meddino::data::{generate_phantom, multicrop, preprocess_slice, CropPlan, Window, TARGET_SPACING_MM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let raw = generate_phantom(5, 96)?;
    let rec = preprocess_slice(&raw, TARGET_SPACING_MM, 64, Window::default())?;
    println!("raw {}×{} at {:?} mm → {}×{} at {:?} mm", raw.height(), raw.width(), raw.spacing, rec.height(), rec.width(), rec.spacing);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, plan) in [("stage 1", CropPlan::default()), ("stage 3", CropPlan::stage3())] {
        let plan = CropPlan { gram_hr: true, ..plan };
        let set = multicrop(&rec.pixels, &plan, &mut rng)?;
        println!(
            "{name}: {} global {:?}, {} local {:?}, gram crop {:?}",
            set.global.len(),
            set.global[0].shape(),
            set.local.len(),
            set.local[0].shape(),
            set.gram_hr.as_ref().map(|t| t.shape().to_vec())
        );
        let g = set.global[0].shape()[0] / plan.patch_size;
        println!("  mask of crop {} ({} of {} patches):", set.masked_crop, set.mask.iter().filter(|&&m| m).count(), set.mask.len());
        for row in set.mask.chunks(g) {
            println!("  {}", row.iter().map(|&m| if m { '#' } else { '.' }).collect::<String>());
        }
    }
    Ok(())
}
