//! Overlap and surface metrics on label rasters.

use crate::error::{Error, Result};

/// Per-class scores of one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub dsc: Vec<f64>,
    pub nsd: Vec<f64>,
    /// Class occurs in the prediction or the reference.
    pub present: Vec<bool>,
    pub tau_mm: f64,
}

impl MetricReport {
    /// Mean over classes `1..K` that are present.
    pub fn mean_foreground(values: &[f64], present: &[bool]) -> f64 {
        let sel: Vec<f64> = (1..values.len()).filter(|&c| present[c]).map(|c| values[c]).collect();
        if sel.is_empty() {
            1.0
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape("metric", format!("masks of {a} and {b} pixels")));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` for the pixels equal to `class`; 1.0 when both are empty.
pub fn dsc(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (pa, gb) = (p == class, g == class);
        a += pa as usize;
        b += gb as usize;
        both += (pa && gb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Foreground pixels with a 4-neighbour (or the image edge) outside the mask.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Squared distance transform along one line of samples spaced `step` apart:
/// `d[q] = min_p ((q-p)·step)² + f[p]` (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let pos = |i: usize| i as f64 * step;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if first.is_none() {
            first = Some(q);
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if first.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * step;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (mm²) from every pixel to the nearest set pixel.
pub fn squared_edt(set: &[bool], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    let mut cols = vec![0.0; h * w];
    let mut f = vec![0.0; h];
    let mut o = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = if set[y * w + x] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&f, spacing.0, &mut o);
        for y in 0..h {
            cols[y * w + x] = o[y];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        edt_1d(&cols[y * w..(y + 1) * w], spacing.1, &mut out[y * w..(y + 1) * w]);
    }
    out
}

/// Normalized surface dice of two binary masks with tolerance `tau` mm.
/// Returns the score and whether both boundaries were empty.
pub fn nsd_binary(a: &[bool], b: &[bool], h: usize, w: usize, spacing: (f64, f64), tau: f64) -> Result<(f64, bool)> {
    check_len(a.len(), b.len())?;
    check_len(a.len(), h * w)?;
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("NSD tolerance must be positive, got {tau}")));
    }
    let ba = boundary(a, h, w);
    let bb = boundary(b, h, w);
    let (na, nb) = (ba.iter().filter(|&&x| x).count(), bb.iter().filter(|&&x| x).count());
    match (na, nb) {
        (0, 0) => return Ok((1.0, true)),
        (0, _) | (_, 0) => return Ok((0.0, false)),
        _ => {}
    }
    let da = squared_edt(&ba, h, w, spacing);
    let db = squared_edt(&bb, h, w, spacing);
    let t2 = tau * tau;
    let close_a = (0..h * w).filter(|&i| ba[i] && db[i] <= t2).count();
    let close_b = (0..h * w).filter(|&i| bb[i] && da[i] <= t2).count();
    Ok(((close_a + close_b) as f64 / (na + nb) as f64, false))
}

/// NSD of one class of two label rasters.
pub fn nsd(pred: &[u8], gt: &[u8], class: u8, h: usize, w: usize, spacing: (f64, f64), tau: f64) -> Result<f64> {
    let a: Vec<bool> = pred.iter().map(|&p| p == class).collect();
    let b: Vec<bool> = gt.iter().map(|&g| g == class).collect();
    Ok(nsd_binary(&a, &b, h, w, spacing, tau)?.0)
}

/// DSC and NSD of every class of one `h × w` slice.
pub fn evaluate_slice(pred: &[u8], gt: &[u8], h: usize, w: usize, spacing: (f64, f64), num_classes: usize, tau: f64) -> Result<MetricReport> {
    let mut r = MetricReport {
        dsc: Vec::with_capacity(num_classes),
        nsd: Vec::with_capacity(num_classes),
        present: Vec::with_capacity(num_classes),
        tau_mm: tau,
    };
    for c in 0..num_classes as u8 {
        r.dsc.push(dsc(pred, gt, c)?);
        r.nsd.push(nsd(pred, gt, c, h, w, spacing, tau)?);
        r.present.push(pred.iter().chain(gt).any(|&v| v == c));
    }
    Ok(r)
}
