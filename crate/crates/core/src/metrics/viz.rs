//! PCA colour maps and cosine-similarity heat maps of patch features.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use std::path::Path;

/// 8-bit raster with 1 (grey) or 3 (RGB) channels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, k: usize) -> Raster {
        let (h, w, c) = (self.height * k, self.width * k, self.channels);
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let i = ((y / k) * self.width + x / k) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        Raster { height: h, width: w, channels: c, data }
    }

    /// Binary PPM (P6) for RGB, PGM (P5) for grey.
    pub fn to_netpbm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_netpbm())?;
        Ok(())
    }
}

fn check_features(features: &Tensor, grid: (usize, usize)) -> Result<(usize, usize)> {
    if features.rank() != 2 {
        return Err(Error::shape("features", format!("expected [P, d], got {:?}", features.shape())));
    }
    let (p, d) = (features.shape()[0], features.shape()[1]);
    if p != grid.0 * grid.1 {
        return Err(Error::shape("features", format!("{p} patches for a {}×{} grid", grid.0, grid.1)));
    }
    Ok((p, d))
}

/// Patches whose pixels are mostly above the window minimum (value > 0 after windowing).
pub fn foreground_patches(image: &Tensor, patch: usize) -> Result<Vec<bool>> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if image.rank() != 2 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("foreground_patches", format!("{:?} with patch {patch}", image.shape())));
    }
    let (gh, gw) = (h / patch, w / patch);
    let px = image.data();
    Ok((0..gh * gw)
        .map(|i| {
            let (py, pxx) = (i / gw, i % gw);
            let mut n = 0;
            for y in py * patch..(py + 1) * patch {
                for x in pxx * patch..(pxx + 1) * patch {
                    n += (px[y * w + x] > 0.0) as usize;
                }
            }
            2 * n > patch * patch
        })
        .collect())
}

/// Principal axes of the rows of `x` (already centred), strongest first,
/// with the sign fixed so each axis has a positive largest-magnitude entry.
pub fn principal_axes(x: &DMatrix<f64>, count: usize) -> Vec<(f64, Vec<f64>)> {
    let n = x.nrows().max(1) as f64;
    let cov = x.transpose() * x / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order
        .into_iter()
        .take(count)
        .map(|i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            if big < 0.0 {
                v.iter_mut().for_each(|a| *a = -*a);
            }
            (eig.eigenvalues[i], v)
        })
        .collect()
}

/// First three principal components of the foreground patches, each
/// min-max scaled to `[0, 255]` as one RGB channel. Background is black; a
/// component without spread renders as mid-grey.
pub fn pca_map(features: &Tensor, grid: (usize, usize), fg: &[bool]) -> Result<Raster> {
    let (p, d) = check_features(features, grid)?;
    if fg.len() != p {
        return Err(Error::shape("pca_map", format!("mask of {} for {p} patches", fg.len())));
    }
    let rows: Vec<usize> = (0..p).filter(|&i| fg[i]).collect();
    if rows.len() < 4 {
        return Err(Error::invalid(format!("pca_map needs at least 4 foreground patches, got {}", rows.len())));
    }
    let mut mean = vec![0.0; d];
    for &r in &rows {
        for (m, v) in mean.iter_mut().zip(features.row(r)) {
            *m += v / rows.len() as f64;
        }
    }
    let x = DMatrix::from_fn(rows.len(), d, |i, j| features.row(rows[i])[j] - mean[j]);
    let axes = principal_axes(&x, 3);
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut data = vec![0u8; p * 3];
    for (c, (_, axis)) in axes.iter().enumerate() {
        let proj: Vec<f64> = (0..rows.len()).map(|i| x.row(i).iter().zip(axis).map(|(a, b)| a * b).sum()).collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, &r) in rows.iter().enumerate() {
            data[r * 3 + c] = if hi - lo <= 1e-9 * scale {
                128
            } else {
                ((proj[i] - lo) / (hi - lo) * 255.0).round() as u8
            };
        }
    }
    // fewer than three feature dimensions: missing channels are mid-grey
    for c in axes.len()..3 {
        for &r in &rows {
            data[r * 3 + c] = 128;
        }
    }
    Ok(Raster { height: grid.0, width: grid.1, channels: 3, data })
}

/// Cosine similarity of every patch with patch `reference`; rows must be unit length.
pub fn cossim_map(features: &Tensor, grid: (usize, usize), reference: usize) -> Result<Vec<f64>> {
    let (p, _) = check_features(features, grid)?;
    if reference >= p {
        return Err(Error::invalid(format!("reference patch {reference} out of range for {p} patches")));
    }
    for i in 0..p {
        let n: f64 = features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("patch {i} has norm {n}, expected unit rows")));
        }
    }
    let r = features.row(reference);
    Ok((0..p)
        .map(|i| features.row(i).iter().zip(r).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
        .collect())
}

/// Grey heat map with −1 → 0 and 1 → 255.
pub fn heat_raster(values: &[f64], grid: (usize, usize)) -> Raster {
    Raster {
        height: grid.0,
        width: grid.1,
        channels: 1,
        data: values.iter().map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect(),
    }
}
