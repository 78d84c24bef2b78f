//! Multi-crop views and block-wise patch masks.

use super::preprocess::sample_region;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Crop side: a fixed size or an inclusive range sampled per batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

impl SizeRange {
    pub fn fixed(s: usize) -> Self {
        Self { min: s, max: s }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropPlan {
    pub n_global: usize,
    pub n_local: usize,
    pub global_size: SizeRange,
    pub local_size: SizeRange,
    /// Fraction of the image area covered by a global / local crop.
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flip: bool,
    pub mask_ratio: f64,
    /// Index of the global crop the student sees masked.
    pub masked_crop: usize,
    /// Also produce a copy of global crop 0 at twice its size.
    pub gram_hr: bool,
    pub patch_size: usize,
}

impl Default for CropPlan {
    /// Stage 1/2 toy plan.
    fn default() -> Self {
        Self {
            n_global: 2,
            n_local: 6,
            global_size: SizeRange::fixed(64),
            local_size: SizeRange::fixed(32),
            global_scale: (0.32, 1.0),
            local_scale: (0.05, 0.32),
            flip: true,
            mask_ratio: 0.3,
            masked_crop: 1,
            gram_hr: false,
            patch_size: 8,
        }
    }
}

impl CropPlan {
    /// Stage 3 toy plan with crop sides drawn from ranges.
    pub fn stage3() -> Self {
        Self {
            global_size: SizeRange { min: 128, max: 192 },
            local_size: SizeRange { min: 28, max: 84 },
            gram_hr: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_global == 0 || self.masked_crop >= self.n_global {
            return bad(format!("masked crop {} needs at least {} global crops", self.masked_crop, self.masked_crop + 1));
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        for (name, r) in [("global", self.global_size), ("local", self.local_size)] {
            if r.min > r.max || r.max < self.patch_size {
                return bad(format!("{name} size range {r:?} invalid for patch {}", self.patch_size));
            }
        }
        for (name, (lo, hi)) in [("global", self.global_scale), ("local", self.local_scale)] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} scale ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        Ok(())
    }

    /// Draws `(global, local)` sides, each a multiple of the patch size.
    pub fn sample_sizes(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let p = self.patch_size;
        let mut draw = |r: SizeRange| {
            let s = if r.min == r.max { r.min } else { rng.random_range(r.min..=r.max) };
            (((s as f64 / p as f64).round() as usize).max(1)) * p
        };
        let g = draw(self.global_size);
        let l = draw(self.local_size);
        (g, l)
    }
}

/// Source region of a crop, in pixels of the source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub y0: f64,
    pub x0: f64,
    pub h: f64,
    pub w: f64,
    pub flip: bool,
}

#[derive(Clone, Debug)]
pub struct CropSet {
    pub global: Vec<Tensor>,
    pub local: Vec<Tensor>,
    pub global_regions: Vec<Region>,
    pub local_regions: Vec<Region>,
    /// Patch mask for `global[masked_crop]`, row-major over its patch grid.
    pub mask: Vec<bool>,
    pub masked_crop: usize,
    /// Global crop 0's region at twice the global side.
    pub gram_hr: Option<Tensor>,
}

fn sample_region_box(rng: &mut ChaCha8Rng, ih: usize, iw: usize, (lo, hi): (f64, f64)) -> (f64, f64, f64, f64) {
    let area = (ih * iw) as f64;
    let (ih, iw) = (ih as f64, iw as f64);
    let target = area * rng.random_range(lo..=hi);
    let log_r = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
    let r = log_r.exp();
    let w = (target * r).sqrt().min(iw);
    let h = (target / r).sqrt().min(ih);
    let y0 = rng.random_range(0.0..=ih - h);
    let x0 = rng.random_range(0.0..=iw - w);
    (y0, x0, h, w)
}

/// Random-resized crops of an `[H, W]` raster at the given sides.
pub fn multicrop_sized(img: &Tensor, plan: &CropPlan, (gs, ls): (usize, usize), rng: &mut ChaCha8Rng) -> Result<CropSet> {
    plan.validate()?;
    if img.rank() != 2 {
        return Err(Error::shape("multicrop", format!("expected H×W, got {:?}", img.shape())));
    }
    let (ih, iw) = (img.shape()[0], img.shape()[1]);
    let crop = |scale, side, rng: &mut ChaCha8Rng| {
        let (y0, x0, h, w) = sample_region_box(rng, ih, iw, scale);
        let flip = plan.flip && rng.random_bool(0.5);
        let t = sample_region(img, (y0, x0, h, w), (side, side), flip);
        (t, Region { y0, x0, h, w, flip })
    };
    let (mut global, mut global_regions) = (Vec::new(), Vec::new());
    for _ in 0..plan.n_global {
        let (t, r) = crop(plan.global_scale, gs, rng);
        global.push(t);
        global_regions.push(r);
    }
    let (mut local, mut local_regions) = (Vec::new(), Vec::new());
    for _ in 0..plan.n_local {
        let (t, r) = crop(plan.local_scale, ls, rng);
        local.push(t);
        local_regions.push(r);
    }
    let grid = gs / plan.patch_size;
    let mask = block_mask(grid, grid, plan.mask_ratio, rng);
    let gram_hr = plan.gram_hr.then(|| {
        let r = global_regions[0];
        sample_region(img, (r.y0, r.x0, r.h, r.w), (2 * gs, 2 * gs), r.flip)
    });
    Ok(CropSet {
        global,
        local,
        global_regions,
        local_regions,
        mask,
        masked_crop: plan.masked_crop,
        gram_hr,
    })
}

/// [`multicrop_sized`] with sides drawn from the plan.
pub fn multicrop(img: &Tensor, plan: &CropPlan, rng: &mut ChaCha8Rng) -> Result<CropSet> {
    let sizes = plan.sample_sizes(rng);
    multicrop_sized(img, plan, sizes, rng)
}

/// Block-wise mask over a `gh×gw` grid with exactly `round(ratio·P)` patches set.
///
/// Rectangles of random area and aspect are added until the target is
/// reached; a block that would overshoot contributes only its first cells,
/// and any shortfall after the attempt budget is filled with random patches.
pub fn block_mask(gh: usize, gw: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = gh * gw;
    let target = (ratio * n as f64).round() as usize;
    let mut mask = vec![false; n];
    let mut count = 0;
    let min_block = 4.0f64.min(target as f64).max(1.0);
    let mut attempts = 0;
    while count < target && attempts < 100 {
        attempts += 1;
        let remaining = (target - count) as f64;
        let area = rng.random_range(min_block..=remaining.max(min_block));
        let aspect = rng.random_range(0.3f64.ln()..=(1.0f64 / 0.3).ln()).exp();
        let h = ((area * aspect).sqrt().round() as usize).clamp(1, gh);
        let w = ((area / aspect).sqrt().round() as usize).clamp(1, gw);
        let top = rng.random_range(0..=gh - h);
        let left = rng.random_range(0..=gw - w);
        for y in top..top + h {
            for x in left..left + w {
                if count < target && !mask[y * gw + x] {
                    mask[y * gw + x] = true;
                    count += 1;
                }
            }
        }
    }
    while count < target {
        let i = rng.random_range(0..n);
        if !mask[i] {
            mask[i] = true;
            count += 1;
        }
    }
    mask
}
