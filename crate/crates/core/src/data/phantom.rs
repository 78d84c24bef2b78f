//! Synthetic CT-like phantoms: an elliptical body with non-overlapping organs.

use super::slice::SliceRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const AIR_HU: f64 = -1000.0;
pub const BODY_HU: f64 = 20.0;
pub const NOISE_SIGMA: f64 = 20.0;
/// Mean intensity of organ classes 2..=7.
pub const ORGAN_HU: [f64; 6] = [-120.0, 90.0, 160.0, 230.0, 300.0, 380.0];
pub const NUM_CLASSES: usize = 2 + ORGAN_HU.len();

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Deterministic phantom of `size × size` pixels.
pub fn generate_phantom(seed: u64, size: usize) -> Result<SliceRecord> {
    if size < 32 {
        return Err(Error::invalid(format!("phantom size {size} < 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let spacing = rng.random_range(0.6..0.9);
    let body = Ellipse {
        cy: s / 2.0 + rng.random_range(-0.03..0.03) * s,
        cx: s / 2.0 + rng.random_range(-0.03..0.03) * s,
        ry: rng.random_range(0.34..0.42) * s,
        rx: rng.random_range(0.40..0.47) * s,
        cos: 1.0,
        sin: 0.0,
    };
    let mut label = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            if body.contains(y as f64 + 0.5, x as f64 + 0.5) {
                label[y * size + x] = 1;
            }
        }
    }

    let want = rng.random_range(3..=6usize);
    let mut types: Vec<usize> = (0..ORGAN_HU.len()).collect();
    for i in (1..types.len()).rev() {
        types.swap(i, rng.random_range(0..=i));
    }
    let mut placed = 0;
    let mut scale = 1.0;
    let mut attempts = 0;
    while placed < want {
        attempts += 1;
        if attempts > 5000 && placed > 0 {
            break;
        }
        if attempts % 40 == 0 {
            scale *= 0.8;
        }
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let e = Ellipse {
            cy: body.cy + rng.random_range(-0.6..0.6) * body.ry,
            cx: body.cx + rng.random_range(-0.6..0.6) * body.rx,
            ry: rng.random_range(0.05..0.12) * s * scale,
            rx: rng.random_range(0.06..0.14) * s * scale,
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let (y0, y1) = bounds(e.cy, e.ry.max(e.rx), size);
        let (x0, x1) = bounds(e.cx, e.ry.max(e.rx), size);
        let mut pixels = Vec::new();
        let mut ok = true;
        'scan: for y in y0..y1 {
            for x in x0..x1 {
                if e.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    // keep one body pixel of clearance around every organ
                    for (dy, dx) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || xx < 0 || yy >= size as i64 || xx >= size as i64
                            || label[yy as usize * size + xx as usize] != 1
                        {
                            ok = false;
                            break 'scan;
                        }
                    }
                    pixels.push(y * size + x);
                }
            }
        }
        if ok && pixels.len() >= 6 {
            let class = 2 + types[placed] as u8;
            for p in pixels {
                label[p] = class;
            }
            placed += 1;
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let pixels = Tensor::from_fn(vec![size, size], |i| {
        let base = match label[i] {
            0 => AIR_HU,
            1 => BODY_HU,
            c => ORGAN_HU[c as usize - 2],
        };
        (base + noise.sample(&mut rng)) as f32 as f64
    });
    SliceRecord::new(pixels, (spacing as f32 as f64, spacing as f32 as f64), Some(label))
}

fn bounds(c: f64, r: f64, size: usize) -> (usize, usize) {
    let lo = (c - r - 1.0).floor().max(0.0) as usize;
    let hi = ((c + r + 2.0).ceil() as usize).min(size);
    (lo, hi)
}
