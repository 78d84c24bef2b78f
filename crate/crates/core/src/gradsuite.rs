//! Finite-difference suites over ops, losses and a full network block.

use crate::error::{Error, Result};
use crate::model::{seg_loss, Forward, HeadConfig, Init, ProtoHead, SegModel, ViTConfig};
use crate::ssl::{dino_loss, gram_loss, ibot_loss, koleo_loss, stage_loss_var, teacher_probs};
use crate::tensor::gradcheck::{grad_check, grad_check_at, op_catalog, random_tensor, spread_indices, weighted_sum};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;

/// Step of the central differences.
pub const EPS: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Losses,
    Blocks,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Suite::Ops),
            "losses" => Ok(Suite::Losses),
            "blocks" => Ok(Suite::Blocks),
            _ => Err(Error::invalid(format!("unknown gradcheck suite {s:?} (ops, losses, blocks)"))),
        }
    }
}

/// `(case, max relative error)` for every case of a suite.
pub fn run_suite(suite: Suite) -> Result<Vec<(String, f64)>> {
    match suite {
        Suite::Ops => op_catalog(EPS),
        Suite::Losses => losses(),
        Suite::Blocks => blocks(),
    }
}

fn losses() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let teacher: Vec<Tensor> = (0..2)
        .map(|i| teacher_probs(&random_tensor(&[3, 5], -1.0, 1.0, 70 + i), &Tensor::zeros(vec![5]), 0.5))
        .collect::<Result<_>>()?;
    let r = grad_check(
        |g, x| {
            let views: Vec<_> = (0..3).map(|v| g.narrow(x, 0, 3 * v, 3)).collect::<Result<_>>()?;
            dino_loss(g, &views, &teacher, 0.1)
        },
        &random_tensor(&[9, 5], -1.0, 1.0, 1),
        EPS,
    )?;
    out.push(("dino".to_string(), r.max_rel_err));

    let tp = teacher_probs(&random_tensor(&[6, 4], -1.0, 1.0, 72), &Tensor::zeros(vec![4]), 0.5)?;
    let mask = [true, false, true, true, false, true];
    let r = grad_check(|g, x| Ok(ibot_loss(g, x, &tp, &mask, 0.1)?.loss), &random_tensor(&[6, 4], -1.0, 1.0, 2), EPS)?;
    out.push(("ibot".to_string(), r.max_rel_err));

    let r = grad_check(|g, x| koleo_loss(g, x, 1e-8), &random_tensor(&[5, 3], -1.0, 1.0, 3), EPS)?;
    out.push(("koleo".to_string(), r.max_rel_err));

    let target = random_tensor(&[2, 4, 3], -1.0, 1.0, 4);
    let r = grad_check(
        |g, x| {
            let t = g.input(target.clone())?;
            gram_loss(g, x, t)
        },
        &random_tensor(&[2, 4, 3], -1.0, 1.0, 5),
        EPS,
    )?;
    out.push(("gram".to_string(), r.max_rel_err));

    for stage in [1u8, 2] {
        let r = grad_check(
            |g, x| {
                let parts: Vec<_> = (0..4).map(|i| g.narrow(x, 0, i, 1)).collect::<Result<_>>()?;
                let parts: Vec<_> = parts.into_iter().map(|p| g.reshape(p, &[])).collect::<Result<_>>()?;
                let sq: Vec<_> = parts.into_iter().map(|p| g.mul(p, p)).collect::<Result<_>>()?;
                let gram = (stage > 1).then_some(sq[3]);
                stage_loss_var(g, stage, sq[0], sq[1], sq[2], gram, 0.1)
            },
            &random_tensor(&[4], 0.5, 1.5, 6),
            EPS,
        )?;
        out.push((format!("stage{stage}_combinator"), r.max_rel_err));
    }

    let labels = [0u8, 2, 2, 1, 0, 2, 1, 1, 0];
    let r = grad_check(|g, x| Ok(seg_loss(g, x, &labels)?.total), &random_tensor(&[1, 3, 3, 3], -1.0, 1.0, 7), EPS)?;
    out.push(("seg".to_string(), r.max_rel_err));
    Ok(out)
}

fn blocks() -> Result<Vec<(String, f64)>> {
    let vit = ViTConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        patch_size: 4,
        image_size: 8,
        drop_path_rate: 0.0,
        layerscale_init: 0.5,
        multiscale_indices: vec![0, 1],
    };
    let model = SegModel::new(vit.clone(), 3, true)?;
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(3));
    let mut params = model.init(&mut init);
    let head = ProtoHead::new(HeadConfig { hidden: 8, bottleneck: 4, prototypes: 6 }, "dino_head");
    params.extend(head.init(&mut init, 8));
    // a generic point: the training init has zero biases and near-flat attention
    for (k, (_, t)) in params.iter_mut().enumerate() {
        *t = random_tensor(t.shape(), -1.0, 1.0, 200 + k as u64);
    }
    let img = random_tensor(&[1, 8, 8], 0.0, 1.0, 9);
    let labels: Vec<u8> = (0..64).map(|i| ((i / 8 + i % 8) % 3) as u8).collect();
    let mut out = Vec::new();
    for (name, leaf) in params.iter() {
        let report = grad_check_at(
            |g, x| {
                let mut p = params.bind(g, false)?;
                p.replace(name, x);
                let x_img = g.input(img.clone())?;
                let logits = model.forward(g, &p, x_img, Forward::default())?;
                let seg = seg_loss(g, logits, &labels)?.total;
                // CLS path through the projection head
                let enc = model.encoder.forward(g, &p, x_img, Forward::default())?;
                let n = model.encoder.final_norm(g, &p, enc.last())?;
                let (cls, _) = model.encoder.split_tokens(g, n)?;
                let h = head.forward(g, &p, cls)?;
                let hs = weighted_sum(g, h, 5)?;
                g.add(seg, hs)
            },
            leaf,
            EPS,
            &spread_indices(leaf.numel(), 6),
        )?;
        let mut worst = 0.0f64;
        for e in &report.per_element {
            let key_bias = name.ends_with("attn.qkv.b") && (vit.dim..2 * vit.dim).contains(&e.index);
            worst = worst.max(if key_bias {
                // softmax is shift invariant, so this gradient is identically zero
                if e.analytic.abs() < 1e-12 && e.numeric.abs() < 1e-9 { 0.0 } else { 1.0 }
            } else {
                e.rel_err
            });
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}
