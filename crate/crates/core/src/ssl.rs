//! Self-distillation objectives and stage combinators.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `softmax((logits − center) / t_t)` per row; a constant target.
pub fn teacher_probs(logits: &Tensor, center: &Tensor, t_t: f64) -> Result<Tensor> {
    let k = logits.cols();
    if center.numel() != k {
        return Err(Error::shape(
            "teacher_probs",
            format!("center has {} entries for {k} prototypes", center.numel()),
        ));
    }
    if t_t <= 0.0 {
        return Err(Error::invalid(format!("teacher temperature {t_t} must be > 0")));
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let mut max = f64::NEG_INFINITY;
        for (x, c) in row.iter_mut().zip(center.data()) {
            *x = (*x - c) / t_t;
            max = max.max(*x);
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(out)
}

/// Row mean of `[..., K]` logits, the per-batch statistic fed to [`update_center`].
pub fn batch_mean(logits: &Tensor) -> Tensor {
    let k = logits.cols();
    let n = logits.rows().max(1) as f64;
    let mut m = vec![0.0; k];
    for row in logits.data().chunks(k) {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::from_fn(vec![k], |i| m[i] / n)
}

/// `center ← m·center + (1−m)·mean`.
pub fn update_center(center: &mut Tensor, mean: &Tensor, m: f64) -> Result<()> {
    if center.shape() != mean.shape() {
        return Err(Error::shape(
            "update_center",
            format!("{:?} vs {:?}", center.shape(), mean.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("center momentum {m} outside [0, 1]")));
    }
    for (c, x) in center.data_mut().iter_mut().zip(mean.data()) {
        *c = m * *c + (1.0 - m) * x;
    }
    Ok(())
}

/// `−Σ p ⊙ log_softmax(s / t_s)` averaged over rows.
fn cross_entropy(g: &mut Graph, student: Var, target: Var, t_s: f64) -> Result<Var> {
    let s = g.scale(student, 1.0 / t_s)?;
    let ls = g.log_softmax(s)?;
    let prod = g.mul(ls, target)?;
    let rows = g.sum_last(prod)?;
    let m = g.mean(rows)?;
    g.scale(m, -1.0)
}

/// Cross-entropy between teacher targets (one per global crop) and student
/// scores (global crops first, then local), averaged over every pair except
/// a crop with itself. Each entry is `[B, K]`.
pub fn dino_loss(g: &mut Graph, student: &[Var], teacher: &[Tensor], t_s: f64) -> Result<Var> {
    if t_s <= 0.0 {
        return Err(Error::invalid(format!("student temperature {t_s} must be > 0")));
    }
    let mut terms = Vec::new();
    for (i, t) in teacher.iter().enumerate() {
        let target = g.input(t.clone())?;
        for (j, &s) in student.iter().enumerate() {
            if i == j {
                continue;
            }
            if g.shape(s) != t.shape() {
                return Err(Error::shape(
                    "dino_loss",
                    format!("student {:?} vs teacher {:?}", g.shape(s), t.shape()),
                ));
            }
            terms.push(cross_entropy(g, s, target, t_s)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("dino_loss has no (teacher, student) pairs"));
    }
    let n = terms.len() as f64;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / n)
}

#[derive(Clone, Copy, Debug)]
pub struct IbotLoss {
    pub loss: Var,
    /// Set when the mask selected nothing; `loss` is then the constant 0.
    pub empty: bool,
}

/// Patch-level cross-entropy over masked positions only.
///
/// `student` is `[B, P, K]` (or `[B·P, K]`), `teacher` holds matching
/// target probabilities, `mask` has one flag per patch.
pub fn ibot_loss(g: &mut Graph, student: Var, teacher: &Tensor, mask: &[bool], t_s: f64) -> Result<IbotLoss> {
    let k = *g.shape(student).last().unwrap_or(&0);
    let n = g.value(student).rows();
    if teacher.cols() != k || teacher.rows() != n || mask.len() != n {
        return Err(Error::shape(
            "ibot_loss",
            format!(
                "student {:?}, teacher {:?}, mask of {}",
                g.shape(student),
                teacher.shape(),
                mask.len()
            ),
        ));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        let loss = g.input(Tensor::scalar(0.0))?;
        return Ok(IbotLoss { loss, empty: true });
    }
    let flat = g.reshape(student, &[n, k])?;
    let picked = g.gather_rows(flat, rows.clone())?;
    let mut target = Vec::with_capacity(rows.len() * k);
    for &r in &rows {
        target.extend_from_slice(teacher.row(r));
    }
    let target = g.input(Tensor::new(vec![rows.len(), k], target)?)?;
    let loss = cross_entropy(g, picked, target, t_s)?;
    Ok(IbotLoss { loss, empty: false })
}

/// Index of the nearest other row (Euclidean), ties to the lowest index.
pub fn nearest_neighbours(z: &Tensor) -> Vec<usize> {
    let n = z.rows();
    (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, i);
            for j in (0..n).filter(|&j| j != i) {
                let d: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// `−(1/n)·Σ log(‖zᵢ − z_nn(i)‖ + eps)` over L2-normalized rows of `[n, d]`.
pub fn koleo_loss(g: &mut Graph, feats: Var, eps: f64) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::invalid(format!("koleo_loss needs at least 2 rows, got {s:?}")));
    }
    let z = g.l2_normalize(feats)?;
    let nn = nearest_neighbours(g.value(z));
    let other = g.gather_rows(z, nn)?;
    let diff = g.sub(z, other)?;
    let sq = g.mul(diff, diff)?;
    let d2 = g.sum_last(sq)?;
    let d = g.sqrt(d2)?;
    let d = g.add_scalar(d, eps)?;
    let l = g.log(d)?;
    let m = g.mean(l)?;
    g.scale(m, -1.0)
}

/// `‖X_S·X_Sᵀ − X_G·X_Gᵀ‖²_F` for `[P, d]` operands; for `[B, P, d]`
/// the per-image values are averaged. Rows are used as given.
pub fn gram_loss(g: &mut Graph, xs: Var, xg: Var) -> Result<Var> {
    let (ss, sg) = (g.shape(xs).to_vec(), g.shape(xg).to_vec());
    if ss != sg || !(ss.len() == 2 || ss.len() == 3) {
        return Err(Error::shape("gram_loss", format!("{ss:?} vs {sg:?}")));
    }
    if ss.len() == 2 {
        return gram_single(g, xs, xg);
    }
    let (b, p, d) = (ss[0], ss[1], ss[2]);
    let mut acc: Option<Var> = None;
    for i in 0..b {
        let a = g.narrow(xs, 0, i, 1)?;
        let a = g.reshape(a, &[p, d])?;
        let c = g.narrow(xg, 0, i, 1)?;
        let c = g.reshape(c, &[p, d])?;
        let l = gram_single(g, a, c)?;
        acc = Some(match acc {
            Some(s) => g.add(s, l)?,
            None => l,
        });
    }
    g.scale(acc.expect("batch is non-empty"), 1.0 / b as f64)
}

fn gram_single(g: &mut Graph, xs: Var, xg: Var) -> Result<Var> {
    let ts = g.transpose(xs)?;
    let gs = g.matmul(xs, ts)?;
    let tg = g.transpose(xg)?;
    let gg = g.matmul(xg, tg)?;
    let diff = g.sub(gs, gg)?;
    let sq = g.mul(diff, diff)?;
    g.sum(sq)
}

/// Scalar loss components of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub dino: f64,
    pub ibot: f64,
    pub koleo: f64,
    pub gram: Option<f64>,
}

/// Coefficient on the gram term in stages 2 and 3.
pub const GRAM_WEIGHT: f64 = 2.0;
/// KoLeo coefficient in stage 1.
pub const KOLEO_WEIGHT: f64 = 0.1;

fn check_stage(stage: u8, has_gram: bool) -> Result<()> {
    match (stage, has_gram) {
        (1, false) | (2, true) | (3, true) => Ok(()),
        (1, true) => Err(Error::invalid("stage 1 loss takes no gram term")),
        (2 | 3, false) => Err(Error::invalid(format!("stage {stage} loss requires a gram term"))),
        _ => Err(Error::invalid(format!("unknown stage {stage}"))),
    }
}

/// Stage 1: `dino + ibot + 0.1·koleo`. Stages 2–3: `dino + ibot + w_k·koleo + 2·gram`.
pub fn stage_loss(stage: u8, parts: &LossParts, w_k: f64) -> Result<f64> {
    check_stage(stage, parts.gram.is_some())?;
    let base = parts.dino + parts.ibot;
    Ok(match parts.gram {
        None => base + KOLEO_WEIGHT * parts.koleo,
        Some(gram) => base + w_k * parts.koleo + GRAM_WEIGHT * gram,
    })
}

/// Graph form of [`stage_loss`].
pub fn stage_loss_var(
    g: &mut Graph,
    stage: u8,
    dino: Var,
    ibot: Var,
    koleo: Var,
    gram: Option<Var>,
    w_k: f64,
) -> Result<Var> {
    check_stage(stage, gram.is_some())?;
    let base = g.add(dino, ibot)?;
    match gram {
        None => {
            let k = g.scale(koleo, KOLEO_WEIGHT)?;
            g.add(base, k)
        }
        Some(gram) => {
            let k = g.scale(koleo, w_k)?;
            let gr = g.scale(gram, GRAM_WEIGHT)?;
            let s = g.add(base, k)?;
            g.add(s, gr)
        }
    }
}

/// Teacher temperature: linear from `start` to `end` over `warmup` iterations, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherTemp {
    pub start: f64,
    pub end: f64,
    pub warmup: u64,
}

impl TeacherTemp {
    pub fn at(&self, iteration: u64) -> f64 {
        if iteration >= self.warmup || self.warmup == 0 {
            self.end
        } else {
            self.start + (self.end - self.start) * iteration as f64 / self.warmup as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, random_tensor};
    use proptest::prelude::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    /// Plain-loop evaluation of the KoLeo estimator.
    fn koleo_oracle(x: &Tensor, eps: f64) -> f64 {
        let n = x.rows();
        let z: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let r = x.row(i);
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / norm).collect()
            })
            .collect();
        let mut acc = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if i != j {
                    let d = z[i].iter().zip(&z[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    best = best.min(d);
                }
            }
            acc += (best + eps).ln();
        }
        -acc / n as f64
    }

    #[test]
    fn dino_uniform_student_one_hot_teacher() {
        let mut g = Graph::new();
        let s0 = g.param(t(&[1, 2], &[0.3, 0.3])).unwrap();
        let s1 = g.param(t(&[1, 2], &[-1.0, -1.0])).unwrap();
        let teacher = [t(&[1, 2], &[1.0, 0.0])];
        let l = dino_loss(&mut g, &[s0, s1], &teacher, 0.1).unwrap();
        assert!((scalar(&g, l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dino_matching_limit_and_shift_invariance() {
        let teacher = [t(&[1, 3], &[0.0, 1.0, 0.0])];
        let mut g = Graph::new();
        let s0 = g.input(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let s1 = g.input(t(&[1, 3], &[-5.0, 5.0, -5.0])).unwrap();
        let l = dino_loss(&mut g, &[s0, s1], &teacher, 0.1).unwrap();
        assert!(scalar(&g, l) < 1e-12);

        let x = random_tensor(&[2, 5], -1.0, 1.0, 1);
        let tp = [teacher_probs(&random_tensor(&[2, 5], -1.0, 1.0, 2), &Tensor::zeros(vec![5]), 0.05).unwrap()];
        let mut g = Graph::new();
        let a0 = g.input(Tensor::zeros(vec![2, 5])).unwrap();
        let a = g.input(x.clone()).unwrap();
        let b = g.input(x.map(|v| v + 3.0)).unwrap();
        let la = dino_loss(&mut g, &[a0, a], &tp, 0.1).unwrap();
        let lb = dino_loss(&mut g, &[a0, b], &tp, 0.1).unwrap();
        assert!((scalar(&g, la) - scalar(&g, lb)).abs() < 1e-12);
    }

    #[test]
    fn dino_pairs_skip_same_crop() {
        // 2 teacher crops, 2 student crops: only (0,1) and (1,0) count
        let tp = [t(&[1, 2], &[1.0, 0.0]), t(&[1, 2], &[0.0, 1.0])];
        let mut g = Graph::new();
        let s0 = g.input(t(&[1, 2], &[0.0, 100.0])).unwrap();
        let s1 = g.input(t(&[1, 2], &[100.0, 0.0])).unwrap();
        let l = dino_loss(&mut g, &[s0, s1], &tp, 1.0).unwrap();
        assert!(scalar(&g, l) < 1e-12);
        assert!(dino_loss(&mut g, &[s0], &tp[..1], 1.0).is_err());
    }

    #[test]
    fn teacher_probs_center_and_temperature() {
        let p = teacher_probs(&t(&[1, 2], &[1.0, 0.0]), &t(&[2], &[1.0, 0.0]), 0.04).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = teacher_probs(&t(&[1, 2], &[0.1, 0.0]), &t(&[2], &[0.0, 0.0]), 0.05).unwrap();
        let e = (2.0f64).exp();
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ibot_empty_mask() {
        let mut g = Graph::new();
        let s = g.param(random_tensor(&[2, 3, 4], -1.0, 1.0, 1)).unwrap();
        let out = ibot_loss(&mut g, s, &Tensor::full(vec![2, 3, 4], 0.25), &[false; 6], 0.1).unwrap();
        assert!(out.empty);
        assert_eq!(scalar(&g, out.loss), 0.0);
    }

    #[test]
    fn ibot_single_masked_patch() {
        let mut g = Graph::new();
        let s = g.param(t(&[1, 2, 4], &[0.0, 0.0, 0.0, 0.0, 9.0, 1.0, 2.0, 3.0])).unwrap();
        let mut teacher = Tensor::zeros(vec![1, 2, 4]);
        teacher.data_mut()[2] = 1.0;
        teacher.data_mut()[4] = 1.0;
        let out = ibot_loss(&mut g, s, &teacher, &[true, false], 0.1).unwrap();
        assert!(!out.empty);
        assert!((scalar(&g, out.loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ibot_gradient_vanishes_on_unmasked_rows() {
        let mask = [true, false, false, true, false, true];
        let mut g = Graph::new();
        let s = g.param(random_tensor(&[2, 3, 5], -1.0, 1.0, 1)).unwrap();
        let tp = teacher_probs(&random_tensor(&[2, 3, 5], -1.0, 1.0, 2), &Tensor::zeros(vec![5]), 0.07).unwrap();
        let out = ibot_loss(&mut g, s, &tp, &mask, 0.1).unwrap();
        let grads = g.backward(out.loss).unwrap();
        let gs = grads.get(s).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            let row = gs.row(i);
            if m {
                assert!(row.iter().any(|&v| v != 0.0));
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn koleo_two_points() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let l = koleo_loss(&mut g, x, 0.0).unwrap();
        assert!((scalar(&g, l) + 2f64.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn koleo_coincident_rows() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[0.2, 0.5, 1.0, 0.2, 0.5, 1.0])).unwrap();
        let l = koleo_loss(&mut g, x, 1e-8).unwrap();
        assert!((scalar(&g, l) + 1e-8f64.ln()).abs() < 1e-6);
        let one = g.input(t(&[1, 3], &[1.0, 0.0, 0.0])).unwrap();
        assert!(koleo_loss(&mut g, one, 1e-8).is_err());
    }

    #[test]
    fn koleo_matches_loop_oracle() {
        for seed in 0..20 {
            let x = random_tensor(&[7, 4], -1.0, 1.0, seed);
            let mut g = Graph::new();
            let v = g.input(x.clone()).unwrap();
            let l = koleo_loss(&mut g, v, 1e-8).unwrap();
            assert!((scalar(&g, l) - koleo_oracle(&x, 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn koleo_rotation_invariance() {
        let x = random_tensor(&[5, 2], -1.0, 1.0, 3);
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let r = Tensor::from_fn(vec![5, 2], |i| {
            let row = x.row(i / 2);
            if i % 2 == 0 { c * row[0] - s * row[1] } else { s * row[0] + c * row[1] }
        });
        assert!((koleo_oracle(&x, 1e-8) - koleo_oracle(&r, 1e-8)).abs() < 1e-12);
        let mut g = Graph::new();
        let (a, b) = (g.input(x).unwrap(), g.input(r).unwrap());
        let (la, lb) = (koleo_loss(&mut g, a, 1e-8).unwrap(), koleo_loss(&mut g, b, 1e-8).unwrap());
        assert!((scalar(&g, la) - scalar(&g, lb)).abs() < 1e-12);
    }

    #[test]
    fn gram_examples() {
        let mut g = Graph::new();
        let xs = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let xg = g.input(t(&[2, 2], &[1.0, 0.0, 1.0, 0.0])).unwrap();
        let l = gram_loss(&mut g, xs, xg).unwrap();
        assert_eq!(scalar(&g, l), 2.0);
        let same = gram_loss(&mut g, xs, xs).unwrap();
        assert_eq!(scalar(&g, same), 0.0);
        let bad = g.input(Tensor::zeros(vec![3, 2])).unwrap();
        assert!(gram_loss(&mut g, xs, bad).is_err());
    }

    #[test]
    fn gram_batch_is_mean_of_images() {
        let a = random_tensor(&[3, 4, 2], -1.0, 1.0, 1);
        let b = random_tensor(&[3, 4, 2], -1.0, 1.0, 2);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()).unwrap(), g.input(b.clone()).unwrap());
        let batched = gram_loss(&mut g, va, vb).unwrap();
        let mut acc = 0.0;
        for i in 0..3 {
            let (x, y) = (a.slice_rows(i, 1).unwrap(), b.slice_rows(i, 1).unwrap());
            let x = g.input(x.reshape(vec![4, 2]).unwrap()).unwrap();
            let y = g.input(y.reshape(vec![4, 2]).unwrap()).unwrap();
            let l = gram_loss(&mut g, x, y).unwrap();
            acc += scalar(&g, l);
        }
        assert!((scalar(&g, batched) - acc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn stage_combinators() {
        let ones = LossParts { dino: 1.0, ibot: 1.0, koleo: 1.0, gram: None };
        assert!((stage_loss(1, &ones, 0.1).unwrap() - 2.1).abs() < 1e-12);
        let with_gram = LossParts { gram: Some(1.0), ..ones };
        assert!((stage_loss(2, &with_gram, 0.1).unwrap() - 4.1).abs() < 1e-12);
        assert!((stage_loss(3, &with_gram, 1.0).unwrap() - 5.0).abs() < 1e-12);
        let zero_gram = LossParts { gram: Some(0.0), ..ones };
        assert_eq!(stage_loss(2, &zero_gram, 0.1).unwrap(), stage_loss(1, &ones, 0.1).unwrap());
        assert!(stage_loss(2, &ones, 0.1).is_err());
        assert!(stage_loss(1, &with_gram, 0.1).is_err());
        assert!(stage_loss(4, &ones, 0.1).is_err());

        let mut g = Graph::new();
        let parts: Vec<Var> = [0.3, 0.7, -0.2, 0.05].iter().map(|&v| g.input(Tensor::scalar(v)).unwrap()).collect();
        let v = stage_loss_var(&mut g, 2, parts[0], parts[1], parts[2], Some(parts[3]), 0.1).unwrap();
        let p = LossParts { dino: 0.3, ibot: 0.7, koleo: -0.2, gram: Some(0.05) };
        assert!((scalar(&g, v) - stage_loss(2, &p, 0.1).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn center_update() {
        let mut c = Tensor::zeros(vec![2]);
        update_center(&mut c, &Tensor::ones(vec![2]), 0.9).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let before = c.clone();
        update_center(&mut c, &Tensor::full(vec![2], 5.0), 1.0).unwrap();
        assert_eq!(c, before);
        update_center(&mut c, &Tensor::full(vec![2], 5.0), 0.0).unwrap();
        assert_eq!(c.data(), &[5.0, 5.0]);
        assert!(update_center(&mut c, &Tensor::ones(vec![3]), 0.5).is_err());
        assert_eq!(batch_mean(&t(&[2, 2], &[1.0, 2.0, 3.0, 6.0])).data(), &[2.0, 4.0]);
    }

    #[test]
    fn teacher_temperature_warmup() {
        let s = TeacherTemp { start: 0.04, end: 0.07, warmup: 10 };
        assert_eq!(s.at(0), 0.04);
        assert!((s.at(5) - 0.055).abs() < 1e-15);
        assert_eq!(s.at(10), 0.07);
        assert_eq!(s.at(1000), 0.07);
    }

    #[test]
    fn losses_pass_gradient_check() {
        let tp: Vec<Tensor> = (0..2)
            .map(|i| teacher_probs(&random_tensor(&[3, 6], -1.0, 1.0, 10 + i), &Tensor::zeros(vec![6]), 0.5).unwrap())
            .collect();
        let crops: Vec<Tensor> = (0..3).map(|i| random_tensor(&[3, 6], -1.0, 1.0, 20 + i)).collect();
        let r = grad_check(
            |g, x| {
                let mut s = vec![x];
                for c in &crops[1..] {
                    s.push(g.input(c.clone())?);
                }
                dino_loss(g, &s, &tp, 0.5)
            },
            &crops[0],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "dino {}", r.max_rel_err);

        let ptp = teacher_probs(&random_tensor(&[2, 4, 8], -1.0, 1.0, 3), &Tensor::zeros(vec![8]), 0.5).unwrap();
        let mask = [true, false, true, true, false, false, true, false];
        let r = grad_check(
            |g, x| Ok(ibot_loss(g, x, &ptp, &mask, 0.5)?.loss),
            &random_tensor(&[2, 4, 8], -1.0, 1.0, 4),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "ibot {}", r.max_rel_err);

        let r = grad_check(|g, x| koleo_loss(g, x, 1e-8), &random_tensor(&[6, 5], -1.0, 1.0, 5), 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "koleo {}", r.max_rel_err);

        let xg = random_tensor(&[2, 5, 4], -1.0, 1.0, 6);
        let r = grad_check(
            |g, x| {
                let xs = g.l2_normalize(x)?;
                let t = g.input(xg.clone())?;
                let t = g.l2_normalize(t)?;
                gram_loss(g, xs, t)
            },
            &random_tensor(&[2, 5, 4], -1.0, 1.0, 7),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "gram {}", r.max_rel_err);
    }

    proptest! {
        #[test]
        fn gram_loss_is_nonnegative_and_bounded_entries(p in 1usize..8, d in 1usize..6, seed in 0u64..500) {
            let mut g = Graph::new();
            let a = g.input(random_tensor(&[p, d], -1.0, 1.0, seed)).unwrap();
            let b = g.input(random_tensor(&[p, d], -1.0, 1.0, seed + 1)).unwrap();
            let a = g.l2_normalize(a).unwrap();
            let b = g.l2_normalize(b).unwrap();
            let l = gram_loss(&mut g, a, b).unwrap();
            prop_assert!(scalar(&g, l) >= 0.0);
            prop_assert!(scalar(&g, l) <= 4.0 * (p * p) as f64 + 1e-9);
        }
    }
}
