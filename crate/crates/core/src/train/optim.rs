//! AdamW, gradient clipping and the learning-rate schedule.

use crate::error::Result;
use crate::model::Params;
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(p: &Params) -> Self {
        let mut m = Params::new();
        for (k, t) in p.iter() {
            m.insert(k, Tensor::zeros(t.shape().to_vec()));
        }
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Biases, norm and layer-scale vectors, and the learned tokens are not decayed.
pub fn decays(name: &str, t: &Tensor) -> bool {
    !(t.rank() <= 1 || name.ends_with("_token") || name.ends_with("pos_embed"))
}

impl AdamW {
    /// One bias-corrected step with decoupled weight decay. Every stored value
    /// is rounded to `precision` afterwards.
    pub fn step(&self, params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64, precision: Precision) -> Result<()> {
        params.check_congruent(grads)?;
        state.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(state.step as i32);
        let c2 = 1.0 - b2.powi(state.step as i32);
        for (name, w) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = state.m.get_mut(name)?;
            let wd = if decays(name, w) { self.weight_decay } else { 0.0 };
            let md = m.data_mut();
            for (mi, gi) in md.iter_mut().zip(g.data()) {
                *mi = precision.round(b1 * *mi + (1.0 - b1) * gi);
            }
            let v = state.v.get_mut(name)?;
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = precision.round(b2 * *vi + (1.0 - b2) * gi * gi);
            }
            let (m, v) = (state.m.get(name)?, state.v.get(name)?);
            for ((wi, mi), vi) in w.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let upd = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *wi = precision.round(*wi - lr * wd * *wi - lr * upd);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &Params) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        for (_, t) in grads.iter_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    n
}

/// Linear warmup over the first `warmup_frac` of `total` steps, cosine decay to zero after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub total: u64,
    pub warmup_frac: f64,
}

impl LrSchedule {
    pub fn warmup(&self) -> u64 {
        (self.warmup_frac * self.total as f64).ceil() as u64
    }

    /// Rate at 0-based step `i`.
    pub fn at(&self, i: u64) -> f64 {
        let w = self.warmup();
        if i < w {
            return self.base * (i + 1) as f64 / w as f64;
        }
        let span = self.total.saturating_sub(w).max(1) as f64;
        let t = ((i - w) as f64 / span).min(1.0);
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> Params {
        let mut p = Params::new();
        p.insert(name, Tensor::full(vec![1, 1], v));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let opt = AdamW { betas: (0.9, 0.98), eps: 1e-8, weight_decay: 0.0 };
        let mut w = one("w", 0.5);
        let mut s = AdamState::zeros_like(&w);
        opt.step(&mut w, &one("w", 1.0), &mut s, 0.1, Precision::F64).unwrap();
        let dw = w.get("w").unwrap().item() - 0.5;
        assert!((dw + 0.1).abs() < 1e-8, "{dw}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let opt = AdamW { betas: (0.9, 0.98), eps: 1e-8, weight_decay: 0.0 };
        let mut w = one("w", 0.5);
        let mut s = AdamState::zeros_like(&w);
        opt.step(&mut w, &one("w", 0.0), &mut s, 0.1, Precision::F64).unwrap();
        assert_eq!(w.get("w").unwrap().item(), 0.5);
    }

    #[test]
    fn decoupled_decay_only() {
        let opt = AdamW { betas: (0.9, 0.98), eps: 1e-8, weight_decay: 0.05 };
        let mut w = one("w", 2.0);
        let mut s = AdamState::zeros_like(&w);
        opt.step(&mut w, &one("w", 0.0), &mut s, 0.1, Precision::F64).unwrap();
        assert!((w.get("w").unwrap().item() - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn no_decay_on_vectors_and_tokens() {
        assert!(!decays("encoder.blocks.0.norm1.g", &Tensor::zeros(vec![4])));
        assert!(!decays("encoder.cls_token", &Tensor::zeros(vec![1, 4])));
        assert!(!decays("encoder.pos_embed", &Tensor::zeros(vec![5, 4])));
        assert!(decays("encoder.blocks.0.attn.qkv.w", &Tensor::zeros(vec![4, 12])));
    }

    #[test]
    fn clipping() {
        let mut g = one("a", 3.0);
        g.insert("b", Tensor::full(vec![1], 4.0));
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut g, 3.0), grad_norm(&g));
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { base: 1.0, total: 100, warmup_frac: 0.1 };
        assert_eq!(s.warmup(), 10);
        assert!((s.at(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.at(9), 1.0);
        assert_eq!(s.at(10), 1.0);
        assert!((s.at(55) - 0.5).abs() < 1e-12);
        assert!(s.at(99) < 0.01);
        assert!((1..100).all(|i| i <= 10 || s.at(i) <= s.at(i - 1)));
    }
}
