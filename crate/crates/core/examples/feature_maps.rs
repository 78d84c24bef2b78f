//! Renders PCA and cosine-similarity maps of encoder patch features.
//!
//! Usage: `feature_maps [CHECKPOINT] [OUT_DIR]`. Without a checkpoint the
//! encoder is randomly initialised.

use meddino::data::{generate_phantom, preprocess_slice, Window, TARGET_SPACING_MM};
use meddino::metrics::{cossim_map, foreground_patches, heat_raster, pca_map};
use meddino::model::{patch_features, Encoder, Init, ViTConfig};
use meddino::train::Checkpoint;
use meddino::{Graph, Precision};
use rand::SeedableRng;
use std::path::PathBuf;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (vit, precision, params) = match args.first() {
        Some(p) => meddino::cli::encoder_for_viz(&Checkpoint::read(p.as_ref())?)?,
        None => {
            let vit = ViTConfig::default();
            let enc = Encoder::new(vit.clone())?;
            let p = enc.init(&mut Init::new(rand_chacha::ChaCha8Rng::seed_from_u64(0)));
            (vit, Precision::F32, p)
        }
    };
    let out = args.get(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("meddino_maps"));
    std::fs::create_dir_all(&out)?;

    let enc = Encoder::new(vit)?;
    let size = enc.cfg.image_size;
    let rec = preprocess_slice(&generate_phantom(7, 96)?, TARGET_SPACING_MM, size, Window::default())?;
    let img = rec.pixels.clone().reshape(vec![1, size, size])?;
    let (feats, grid) = patch_features(&enc, &params, &img, precision)?;
    let feats = feats.reshape(vec![grid.0 * grid.1, enc.cfg.dim])?;

    let fg = foreground_patches(&rec.pixels, enc.cfg.patch_size)?;
    println!("{} of {} patches in the foreground", fg.iter().filter(|&&f| f).count(), fg.len());
    let pca = pca_map(&feats, grid, &fg)?.upscale(enc.cfg.patch_size);
    pca.write(&out.join("pca.ppm"))?;

    let mut g = Graph::inference(Precision::F64);
    let v = g.input(feats)?;
    let unit = g.l2_normalize(v)?;
    let centre = grid.0 / 2 * grid.1 + grid.1 / 2;
    let sims = cossim_map(g.value(unit), grid, centre)?;
    heat_raster(&sims, grid).upscale(enc.cfg.patch_size).write(&out.join("cossim.pgm"))?;
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
    println!("cosine similarity to patch {centre}: min {lo:.3}, max {:.3}", sims.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    println!("wrote {} and {}", out.join("pca.ppm").display(), out.join("cossim.pgm").display());
    Ok(())
}
