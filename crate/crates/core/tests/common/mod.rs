//! Brute-force oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `2|A∩B| / (|A|+|B|)` from explicit index sets.
pub fn dsc_oracle(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let a: std::collections::BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
    let b: std::collections::BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == class).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

fn surface(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// All-pairs surface distances: the share of surface pixels of each mask
/// within `tau` mm of the other surface, pooled over both surfaces.
pub fn nsd_oracle(a: &[bool], b: &[bool], h: usize, w: usize, spacing: (f64, f64), tau: f64) -> f64 {
    let (sa, sb) = (surface(a, h, w), surface(b, h, w));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    if sa.is_empty() || sb.is_empty() {
        return 0.0;
    }
    let near = |p: (usize, usize), other: &[(usize, usize)]| {
        other.iter().any(|q| {
            let dy = (p.0 as f64 - q.0 as f64) * spacing.0;
            let dx = (p.1 as f64 - q.1 as f64) * spacing.1;
            (dy * dy + dx * dx).sqrt() <= tau
        })
    };
    let hits = sa.iter().filter(|&&p| near(p, &sb)).count() + sb.iter().filter(|&&p| near(p, &sa)).count();
    hits as f64 / (sa.len() + sb.len()) as f64
}

/// Random `n × n` orthogonal matrix from Gram–Schmidt on a Gaussian-ish draw, row-major.
pub fn random_orthogonal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q.concat()
}

/// `[rows × k] · [k × cols]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, k: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..k).map(|t| a[i * k + t] * b[t * cols + j]).sum();
        }
    }
    out
}

/// Leading eigenvectors of a symmetric `d × d` matrix by power iteration with deflation.
pub fn power_eigvecs(mut m: Vec<f64>, d: usize, count: usize) -> Vec<(f64, Vec<f64>)> {
    let mut out = Vec::new();
    for k in 0..count {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.37 * ((i + 3 * k) as f64).sin()).collect();
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let mv = matmul(&m, &v, d, d, 1);
            let n = mv.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n == 0.0 {
                break;
            }
            v = mv.iter().map(|a| a / n).collect();
            lambda = n;
        }
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

/// RGB of the top three principal components of the foreground rows,
/// min-max scaled per component; background stays black.
pub fn pca_oracle(features: &[f64], p: usize, d: usize, fg: &[bool]) -> Vec<u8> {
    let rows: Vec<usize> = (0..p).filter(|&i| fg[i]).collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|&r| features[r * d + j]).sum::<f64>() / n).collect();
    let x: Vec<f64> = rows.iter().flat_map(|&r| (0..d).map(move |j| (r, j))).map(|(r, j)| features[r * d + j] - mean[j]).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = (0..rows.len()).map(|r| x[r * d + i] * x[r * d + j]).sum::<f64>() / n;
        }
    }
    let mut out = vec![0u8; p * 3];
    for (c, (_, v)) in power_eigvecs(cov, d, 3).into_iter().enumerate() {
        let proj: Vec<f64> = (0..rows.len()).map(|r| (0..d).map(|j| x[r * d + j] * v[j]).sum()).collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, &r) in rows.iter().enumerate() {
            out[r * 3 + c] = ((proj[i] - lo) / (hi - lo) * 255.0).round() as u8;
        }
    }
    out
}

/// Every channel agrees within one level, directly or after a sign flip of its component.
pub fn same_up_to_sign(a: &[u8], b: &[u8], fg: &[bool]) -> bool {
    (0..3).all(|c| {
        let px: Vec<usize> = (0..fg.len()).filter(|&i| fg[i]).collect();
        let direct = px.iter().all(|&i| (a[i * 3 + c] as i32 - b[i * 3 + c] as i32).abs() <= 1);
        let flipped = px.iter().all(|&i| (a[i * 3 + c] as i32 - (255 - b[i * 3 + c] as i32)).abs() <= 1);
        direct || flipped
    }) && (0..fg.len()).filter(|&i| !fg[i]).all(|i| a[i * 3..i * 3 + 3] == [0, 0, 0] && b[i * 3..i * 3 + 3] == [0, 0, 0])
}

/// Random label raster of `h × w` with classes `0..k`, drawn as a few blobs.
pub fn random_labels(h: usize, w: usize, k: u8, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..rng.random_range(0..4) {
        let c = rng.random_range(1..k.max(2));
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = c;
            }
        }
    }
    // salt a few isolated pixels so boundaries are not only rectangles
    for _ in 0..rng.random_range(0..4) {
        m[rng.random_range(0..h * w)] = rng.random_range(0..k);
    }
    m
}
