//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_element: Vec<GradCheckEntry>,
}

/// `|a - b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Compares the analytic gradient of `f` w.r.t. `leaf` against central
/// differences, for every element of `leaf`.
///
/// `f` builds a scalar from the leaf on a fresh 64-bit graph; it is called
/// once for the analytic pass and twice per element.
pub fn grad_check<F>(f: F, leaf: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..leaf.numel()).collect();
    grad_check_at(f, leaf, eps, &all)
}

/// Like [`grad_check`], restricted to the given flat element indices.
pub fn grad_check_at<F>(f: F, leaf: &Tensor, eps: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.param(leaf.clone())?;
    let root = f(&mut g, x)?;
    let grads = g.backward(root)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(t)?;
        let root = f(&mut g, x)?;
        Ok(g.value(root).item())
    };

    let mut per_element = Vec::with_capacity(indices.len());
    let mut max_rel_err = 0.0f64;
    for &i in indices {
        let mut plus = leaf.clone();
        plus.data_mut()[i] += eps;
        let mut minus = leaf.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel_err = relative_error(a, numeric);
        max_rel_err = max_rel_err.max(rel_err);
        per_element.push(GradCheckEntry {
            index: i,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport {
        max_rel_err,
        per_element,
    })
}

/// Up to `count` evenly spread flat indices of a tensor with `numel` elements.
pub fn spread_indices(numel: usize, count: usize) -> Vec<usize> {
    if count >= numel {
        return (0..numel).collect();
    }
    (0..count).map(|i| i * numel / count).collect()
}

/// Scalar readout `sum(w ⊙ v)` with fixed pseudo-random weights, so that
/// tensor-valued ops can be checked without degenerate (all-zero) gradients.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let w = g.input(w)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

/// Tensor of uniform values in `[lo, hi)` from a seed.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);

/// Every substrate op, each on three input shapes, with a random readout.
/// Returns `(case name, max relative error)` per case.
pub fn op_catalog(eps: f64) -> Result<Vec<(String, f64)>> {
    let mut cases: Vec<OpCase> = Vec::new();
    let shapes2 = [vec![2, 3], vec![3, 5], vec![4, 2]];
    for s in &shapes2 {
        let (r, c) = (s[0], s[1]);
        cases.push(("matmul", s.clone(), Box::new(move |g, x| {
            let w = g.input(random_tensor(&[c, 4], -1.0, 1.0, 11))?;
            let y = g.matmul(x, w)?;
            weighted_sum(g, y, 1)
        })));
        cases.push(("matmul_rhs", s.clone(), Box::new(move |g, x| {
            let a = g.input(random_tensor(&[3, r], -1.0, 1.0, 12))?;
            let y = g.matmul(a, x)?;
            weighted_sum(g, y, 2)
        })));
        cases.push(("transpose", s.clone(), Box::new(|g, x| {
            let y = g.transpose(x)?;
            weighted_sum(g, y, 3)
        })));
        cases.push(("softmax", s.clone(), Box::new(|g, x| {
            let y = g.softmax(x)?;
            weighted_sum(g, y, 4)
        })));
        cases.push(("log_softmax", s.clone(), Box::new(|g, x| {
            let y = g.log_softmax(x)?;
            weighted_sum(g, y, 5)
        })));
        cases.push(("layernorm", s.clone(), Box::new(|g, x| {
            let y = g.layernorm(x, 1e-6)?;
            weighted_sum(g, y, 6)
        })));
        cases.push(("l2_normalize", s.clone(), Box::new(|g, x| {
            let y = g.l2_normalize(x)?;
            weighted_sum(g, y, 7)
        })));
        let ss = s.clone();
        cases.push(("add_sub_mul_div", s.clone(), Box::new(move |g, x| {
            let b = g.input(random_tensor(&ss, 0.5, 1.5, 13))?;
            let a = g.add(x, b)?;
            let m = g.mul(a, x)?;
            let d = g.div(m, b)?;
            let y = g.sub(d, x)?;
            weighted_sum(g, y, 8)
        })));
        cases.push(("add_mul_bcast", s.clone(), Box::new(move |g, x| {
            let b = g.input(random_tensor(&[c], -1.0, 1.0, 14))?;
            let y = g.add_bcast(x, b)?;
            let y = g.mul_bcast(y, b)?;
            let row = g.narrow(x, 0, 0, 1)?;
            let row = g.reshape(row, &[c])?;
            let z = g.mul_bcast(y, row)?;
            weighted_sum(g, z, 9)
        })));
        cases.push(("scale_shift_exp_log_sqrt", s.clone(), Box::new(|g, x| {
            let y = g.scale(x, 0.7)?;
            let y = g.exp(y)?;
            let y = g.add_scalar(y, 0.3)?;
            let y = g.log(y)?;
            let y = g.add_scalar(y, 2.0)?;
            let y = g.sqrt(y)?;
            weighted_sum(g, y, 10)
        })));
        cases.push(("gelu", s.clone(), Box::new(|g, x| {
            let y = g.gelu(x)?;
            weighted_sum(g, y, 11)
        })));
        cases.push(("reductions", s.clone(), Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let rows = g.sum_last(sq)?;
            let w = weighted_sum(g, rows, 12)?;
            let m = g.mean(x)?;
            let s = g.sum(x)?;
            let t = g.add(w, m)?;
            let s2 = g.mul(s, s)?;
            g.add(t, s2)
        })));
        cases.push(("reshape_concat_narrow", s.clone(), Box::new(move |g, x| {
            let y = g.reshape(x, &[c, r])?;
            let z = g.reshape(y, &[r, c])?;
            let cat = g.concat(&[x, z, x], 1)?;
            let cat0 = g.concat(&[x, z], 0)?;
            let n = g.narrow(cat, 1, 1, 2 * c - 1)?;
            let a = weighted_sum(g, n, 13)?;
            let b = weighted_sum(g, cat0, 14)?;
            g.add(a, b)
        })));
        cases.push(("gather_gather_rows", s.clone(), Box::new(move |g, x| {
            let n = r * c;
            let idx: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).chain([0, n - 1]).collect();
            let len = idx.len();
            let y = g.gather(x, idx, &[len])?;
            let rows = g.gather_rows(x, vec![r - 1, 0, r - 1])?;
            let a = weighted_sum(g, y, 15)?;
            let b = weighted_sum(g, rows, 16)?;
            g.add(a, b)
        })));
    }
    for (i, s) in [vec![1, 3, 3, 2], vec![2, 4, 3, 1], vec![1, 5, 4, 3]].into_iter().enumerate() {
        let ci = s[3];
        cases.push(("conv2d", s.clone(), Box::new(move |g, x| {
            let w = g.param(random_tensor(&[3, 3, ci, 2], -1.0, 1.0, 20 + i as u64))?;
            let y = g.conv2d(x, w, 1 + i % 2, 1)?;
            weighted_sum(g, y, 17)
        })));
        cases.push(("conv2d_weight", vec![2, 2, ci, 3], Box::new(move |g, w| {
            let x = g.input(random_tensor(&[1, 4, 5, ci], -1.0, 1.0, 30 + i as u64))?;
            let y = g.conv2d(x, w, 1, i % 2)?;
            weighted_sum(g, y, 18)
        })));
        cases.push(("conv_transpose2d", s.clone(), Box::new(move |g, x| {
            let w = g.input(random_tensor(&[2 + i % 2, 2, ci, 2], -1.0, 1.0, 40 + i as u64))?;
            let y = g.conv_transpose2d(x, w, 2, i / 2)?;
            weighted_sum(g, y, 19)
        })));
        cases.push(("conv_transpose2d_weight", vec![2, 2, ci, 2], Box::new(move |g, w| {
            let x = g.input(random_tensor(&[1, 3, 2, ci], -1.0, 1.0, 50 + i as u64))?;
            let y = g.conv_transpose2d(x, w, 2, 0)?;
            weighted_sum(g, y, 20)
        })));
        cases.push(("bilinear", s.clone(), Box::new(move |g, x| {
            let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
            let y = g.bilinear(x, 2 * h + i, w + 1)?;
            let z = g.bilinear(y, h.max(2) - 1, w)?;
            let a = weighted_sum(g, y, 21)?;
            let b = weighted_sum(g, z, 22)?;
            g.add(a, b)
        })));
    }
    for (i, (b, t, heads, dh)) in [(1, 4, 2, 4), (2, 3, 1, 3), (1, 5, 3, 2)].into_iter().enumerate() {
        let d = heads * dh;
        cases.push(("attention", vec![b, t, d], Box::new(move |g, x| {
            let kx = g.input(random_tensor(&[b, t, d], -1.0, 1.0, 60 + i as u64))?;
            let k = g.add(x, kx)?;
            let v = g.scale(x, -0.5)?;
            let y = g.attention(x, k, v, heads)?;
            weighted_sum(g, y, 23)
        })));
    }
    let mut out = Vec::with_capacity(cases.len());
    for (k, (name, shape, f)) in cases.into_iter().enumerate() {
        let leaf = random_tensor(&shape, -1.0, 1.0, 1000 + k as u64);
        let report = grad_check(|g, x| f(g, x), &leaf, eps)?;
        out.push((format!("{name}{shape:?}"), report.max_rel_err));
    }
    Ok(out)
}
