//! Transposed-convolution decoder and the segmentation loss.

use super::params::{Bound, Init, Params};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub in_width: usize,
    pub num_classes: usize,
    pub patch_size: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return Err(Error::Config(format!(
                "decoder patch_size {} must be a power of two ≥ 2",
                self.patch_size
            )));
        }
        if self.in_width == 0 || self.num_classes == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    /// Channel count entering each stage, then the head width.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_width];
        for _ in 0..self.stages() {
            let prev = *w.last().unwrap();
            w.push((prev / 2).max(32));
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Fresh parameters under `decoder.`.
    pub fn init(&self, init: &mut Init) -> Params {
        let w = self.cfg.widths();
        let mut p = Params::new();
        for s in 0..self.cfg.stages() {
            let (ci, co) = (w[s], w[s + 1]);
            let std = (2.0 / ci as f64).sqrt();
            p.insert(format!("decoder.up.{s}.w"), init.trunc_normal(&[2, 2, ci, co], std));
            p.insert(format!("decoder.up.{s}.b"), Tensor::zeros(vec![co]));
            p.insert(format!("decoder.up.{s}.norm.g"), Tensor::ones(vec![co]));
            p.insert(format!("decoder.up.{s}.norm.b"), Tensor::zeros(vec![co]));
        }
        let last = *w.last().unwrap();
        p.insert("decoder.head.w", init.trunc_normal(&[last, self.cfg.num_classes], 0.02));
        p.insert("decoder.head.b", Tensor::zeros(vec![self.cfg.num_classes]));
        p
    }

    /// `[B, P, C]` tokens on an `h×w` grid to `[B, h·patch, w·patch, classes]` logits.
    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        let (h, w) = grid;
        if s.len() != 3 || s[1] != h * w || s[2] != self.cfg.in_width {
            return Err(Error::shape(
                "decode",
                format!("tokens {s:?} vs grid {h}×{w} with width {}", self.cfg.in_width),
            ));
        }
        let mut x = g.reshape(tokens, &[s[0], h, w, s[2]])?;
        for st in 0..self.cfg.stages() {
            let pre = format!("decoder.up.{st}");
            x = g.conv_transpose2d(x, p.var(&format!("{pre}.w"))?, 2, 0)?;
            x = g.add_bcast(x, p.var(&format!("{pre}.b"))?)?;
            x = super::params::layer_norm(g, p, &format!("{pre}.norm"), x)?;
            x = g.gelu(x)?;
        }
        super::params::linear(g, p, "decoder.head", x)
    }
}

/// Parts of the segmentation loss.
#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// Soft-Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1e-5;

/// `(soft-Dice loss + cross-entropy) / 2` over `[B,H,W,K]` logits.
///
/// Dice is pooled over the whole batch and averaged over the classes present
/// in `labels`; cross-entropy is the mean over pixels.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<SegLoss> {
    let s = g.shape(logits).to_vec();
    let k = *s.last().ok_or_else(|| Error::shape("seg_loss", "scalar logits"))?;
    let n = g.value(logits).rows();
    if labels.len() != n {
        return Err(Error::shape(
            "seg_loss",
            format!("{} labels for logits {s:?}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }

    let flat = g.reshape(logits, &[n, k])?;
    let logp = g.log_softmax(flat)?;
    let picked = g.gather(logp, labels.iter().enumerate().map(|(i, &l)| i * k + l as usize).collect(), &[n])?;
    let mean_logp = g.mean(picked)?;
    let ce = g.scale(mean_logp, -1.0)?;

    let mut onehot = Tensor::zeros(vec![n, k]);
    let mut counts = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * k + l as usize] = 1.0;
        counts[l as usize] += 1.0;
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0.0).collect();
    let probs = g.softmax(flat)?;
    let onehot = g.input(onehot)?;
    let ones = g.input(Tensor::ones(vec![1, n]))?;
    let inter = g.mul(probs, onehot)?;
    let inter = g.matmul(ones, inter)?;
    let psum = g.matmul(ones, probs)?;
    let gsum = g.input(Tensor::new(vec![1, k], counts)?)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(psum, gsum)?;
    let den = g.add_scalar(den, DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let ratio = g.gather(ratio, present.clone(), &[present.len()])?;
    let mean_dice = g.mean(ratio)?;
    let dice = g.scale(mean_dice, -1.0)?;
    let dice = g.add_scalar(dice, 1.0)?;

    let both = g.add(dice, ce)?;
    let total = g.scale(both, 0.5)?;
    Ok(SegLoss { total, dice, ce })
}
