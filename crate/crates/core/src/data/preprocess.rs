//! Spacing normalization, resizing and intensity windowing.

use super::slice::SliceRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// In-plane spacing every slice is resampled to before resizing (mm).
pub const TARGET_SPACING_MM: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Window {
    fn default() -> Self {
        Self { lo: -200.0, hi: 400.0 }
    }
}

impl Window {
    /// Clips to `[lo, hi]` and rescales to `[0, 1]`; a degenerate window maps everything to 0.
    pub fn apply(&self, x: f64) -> f64 {
        if self.hi <= self.lo {
            return 0.0;
        }
        (x.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }
}

/// Bilinear sample of the region `[y0, y0+h) × [x0, x0+w)` of an `[H, W]`
/// raster onto an `oh × ow` grid, using pixel centres and clamping at the
/// border. `flip` mirrors the output horizontally.
pub fn sample_region(
    img: &Tensor,
    (y0, x0, h, w): (f64, f64, f64, f64),
    (oh, ow): (usize, usize),
    flip: bool,
) -> Tensor {
    let (ih, iw) = (img.shape()[0], img.shape()[1]);
    let taps = |start: f64, len: f64, n: usize, lim: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|o| {
                let src = (start + (o as f64 + 0.5) * len / n as f64 - 0.5).clamp(0.0, (lim - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(lim - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ty = taps(y0, h, oh, ih);
    let tx = taps(x0, w, ow, iw);
    let d = img.data();
    Tensor::from_fn(vec![oh, ow], |i| {
        let (oy, ox) = (i / ow, i % ow);
        let ox = if flip { ow - 1 - ox } else { ox };
        let (y_lo, y_hi, fy) = ty[oy];
        let (x_lo, x_hi, fx) = tx[ox];
        let top = if fx == 0.0 { d[y_lo * iw + x_lo] } else { d[y_lo * iw + x_lo] * (1.0 - fx) + d[y_lo * iw + x_hi] * fx };
        if fy == 0.0 {
            return top;
        }
        let bot = if fx == 0.0 { d[y_hi * iw + x_lo] } else { d[y_hi * iw + x_lo] * (1.0 - fx) + d[y_hi * iw + x_hi] * fx };
        top * (1.0 - fy) + bot * fy
    })
}

/// Bilinear resize of a whole `[H, W]` raster; same size is the identity.
pub fn resize_bilinear(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (img.shape()[0] as f64, img.shape()[1] as f64);
    sample_region(img, (0.0, 0.0, h, w), (oh, ow), false)
}

/// Nearest-neighbour resize of a row-major `h × w` label map.
pub fn resize_nearest(labels: &[u8], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<u8> {
    let pick = |o: usize, n: usize, lim: usize| (((o as f64 + 0.5) * lim as f64 / n as f64).floor() as usize).min(lim - 1);
    let ys: Vec<usize> = (0..oh).map(|o| pick(o, oh, h)).collect();
    let xs: Vec<usize> = (0..ow).map(|o| pick(o, ow, w)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for &y in &ys {
        for &x in &xs {
            out.push(labels[y * w + x]);
        }
    }
    out
}

/// Resamples to `target_spacing`, resizes to `target_size²`, then windows
/// intensities to `[0, 1]`.
///
/// The output carries its effective spacing and is flagged normalized; a
/// normalized record already at `target_size` is returned unchanged.
pub fn preprocess_slice(rec: &SliceRecord, target_spacing: f64, target_size: usize, window: Window) -> Result<SliceRecord> {
    if target_spacing.is_nan() || target_spacing <= 0.0 || target_size == 0 {
        return Err(Error::invalid(format!(
            "target spacing {target_spacing} and size {target_size} must be positive"
        )));
    }
    if rec.normalized && rec.height() == target_size && rec.width() == target_size {
        return Ok(rec.clone());
    }
    if window.hi <= window.lo && !rec.normalized {
        log::warn!("degenerate intensity window [{}, {}]; output is all zeros", window.lo, window.hi);
    }
    let (h, w) = (rec.height(), rec.width());
    let mh = ((h as f64 * rec.spacing.0 / target_spacing).round() as usize).max(1);
    let mw = ((w as f64 * rec.spacing.1 / target_spacing).round() as usize).max(1);
    let mid = resize_bilinear(&rec.pixels, mh, mw);
    let mut pixels = resize_bilinear(&mid, target_size, target_size);
    if !rec.normalized {
        pixels = pixels.map(|x| window.apply(x));
    }
    let label = rec.label.as_ref().map(|l| {
        let mid = resize_nearest(l, (h, w), (mh, mw));
        resize_nearest(&mid, (mh, mw), (target_size, target_size))
    });
    let spacing = (
        target_spacing * mh as f64 / target_size as f64,
        target_spacing * mw as f64 / target_size as f64,
    );
    Ok(SliceRecord {
        pixels,
        spacing,
        label,
        split: rec.split,
        normalized: true,
    })
}
