//! Phantom slices, preprocessing, multi-crop views and on-disk formats.

mod manifest;
mod multicrop;
mod phantom;
mod preprocess;
mod slice;

pub use manifest::{split_for, Manifest, ManifestRecord, MANIFEST_NAME};
pub use multicrop::{block_mask, multicrop, multicrop_sized, CropPlan, CropSet, Region, SizeRange};
pub use phantom::{generate_phantom, AIR_HU, BODY_HU, NOISE_SIGMA, NUM_CLASSES, ORGAN_HU};
pub use preprocess::{preprocess_slice, resize_bilinear, resize_nearest, sample_region, Window, TARGET_SPACING_MM};
pub use slice::{read_header, SliceRecord, Split, LABEL_MAGIC, MD3S_MAGIC, MD3S_VERSION};

use crate::error::Result;
use std::path::Path;

/// Writes `count` phantoms of side `size` plus a manifest into `out`.
pub fn generate_dataset(out: &Path, count: usize, size: usize, seed: u64) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let rec = generate_phantom(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size)?;
        rec.write(&out.join(format!("phantom_{i:05}.md3s")))?;
    }
    let m = Manifest::build(out)?;
    m.write(&out.join(MANIFEST_NAME))?;
    Ok(m)
}

/// Preprocessed slices of one split, loaded from a manifest.
pub fn load_split(m: &Manifest, split: Split, size: usize, window: Window) -> Result<Vec<SliceRecord>> {
    m.split(split)
        .map(|r| preprocess_slice(&m.read_slice(r)?, TARGET_SPACING_MM, size, window))
        .collect()
}
