//! Plain ViT encoder with per-block outputs and multi-scale token selection.

use super::params::{init_linear, init_norm, layer_norm, linear, Bound, Init, Params};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub drop_path_rate: f64,
    pub layerscale_init: f64,
    /// Empty means [`default_multiscale_indices`].
    pub multiscale_indices: Vec<usize>,
}

impl Default for ViTConfig {
    /// ViT-Micro.
    fn default() -> Self {
        Self {
            depth: 8,
            dim: 64,
            heads: 4,
            patch_size: 8,
            image_size: 64,
            drop_path_rate: 0.0,
            layerscale_init: 1e-5,
            multiscale_indices: Vec::new(),
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.dim == 0 || self.patch_size == 0 {
            return bad("depth, dim and patch_size must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        check_indices(&self.indices(), self.depth)
    }

    /// Resolved multi-scale block indices.
    pub fn indices(&self) -> Vec<usize> {
        if self.multiscale_indices.is_empty() {
            default_multiscale_indices(self.depth)
        } else {
            self.multiscale_indices.clone()
        }
    }

    /// Patch grid side at the configured image size.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// `{i·depth/4 − 1 : i = 1..4}`. When `depth` is not a multiple of 4 each
/// index is `round(i·depth/4) − 1`; duplicates collapse, so very shallow
/// encoders may get fewer than four indices.
pub fn default_multiscale_indices(depth: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=4)
        .map(|i| ((i * depth) as f64 / 4.0).round() as usize)
        .filter(|&v| v >= 1)
        .map(|v| v - 1)
        .collect();
    out.dedup();
    out
}

fn check_indices(idx: &[usize], depth: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::Config("multiscale indices are empty".into()));
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("multiscale indices {idx:?} not strictly increasing")));
    }
    if *idx.last().unwrap() != depth - 1 {
        return Err(Error::Config(format!(
            "multiscale indices {idx:?} must end at the last block {}",
            depth - 1
        )));
    }
    Ok(())
}

/// Flat source offsets mapping `[B,H,W]` pixels to `[B,P,p²]` patch rows.
fn patch_index(b: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * h * w);
    for n in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        idx.push((n * h + gy * p + py) * w + gx * p + px);
                    }
                }
            }
        }
    }
    idx
}

/// Splits an `H×W` raster into row-major flattened patches, `[P, p²]`.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = image.shape();
    let (h, w) = match s {
        [h, w] | [h, w, 1] | [1, h, w, 1] => (*h, *w),
        _ => return Err(Error::shape("patchify", format!("expected an H×W raster, got {s:?}"))),
    };
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}×{w} not divisible by patch size {patch_size}"),
        ));
    }
    let idx = patch_index(1, h, w, patch_size);
    let data = idx.iter().map(|&i| image.data()[i]).collect();
    Tensor::new(vec![(h / patch_size) * (w / patch_size), patch_size * patch_size], data)
}

/// Per-block `[B, 1+P, d]` token tensors, CLS first.
#[derive(Clone, Debug)]
pub struct BlockOutputs {
    pub blocks: Vec<Var>,
    pub grid: (usize, usize),
}

impl BlockOutputs {
    pub fn last(&self) -> Var {
        *self.blocks.last().expect("encoder has at least one block")
    }
}

/// Options for one encoder pass.
#[derive(Default)]
pub struct Forward<'a> {
    /// Patches replaced by the mask token, `B·P` flags.
    pub mask: Option<&'a [bool]>,
    /// Source of drop-path decisions; `None` disables drop-path.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: ViTConfig,
}

impl Encoder {
    pub fn new(cfg: ViTConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Fresh parameters under `encoder.`.
    pub fn init(&self, init: &mut Init) -> Params {
        let c = &self.cfg;
        let d = c.dim;
        let mut p = Params::new();
        init_linear(&mut p, init, "encoder.patch_embed", c.patch_size * c.patch_size, d);
        p.insert("encoder.cls_token", init.trunc_normal(&[1, d], 1e-6));
        p.insert("encoder.mask_token", Tensor::zeros(vec![1, d]));
        p.insert("encoder.pos_embed", init.trunc_normal(&[1 + c.grid() * c.grid(), d], 0.02));
        for i in 0..c.depth {
            let b = format!("encoder.blocks.{i}");
            init_norm(&mut p, &format!("{b}.norm1"), d);
            init_linear(&mut p, init, &format!("{b}.attn.qkv"), d, 3 * d);
            init_linear(&mut p, init, &format!("{b}.attn.proj"), d, d);
            p.insert(format!("{b}.ls1"), Tensor::full(vec![d], c.layerscale_init));
            init_norm(&mut p, &format!("{b}.norm2"), d);
            init_linear(&mut p, init, &format!("{b}.mlp.fc1"), d, 4 * d);
            init_linear(&mut p, init, &format!("{b}.mlp.fc2"), 4 * d, d);
            p.insert(format!("{b}.ls2"), Tensor::full(vec![d], c.layerscale_init));
        }
        init_norm(&mut p, "encoder.norm", d);
        p
    }

    /// Positional table for a `gh×gw` grid, `[1+gh·gw, d]`. The patch part is
    /// bilinearly resampled when the grid differs from the configured one.
    pub fn pos_embed(&self, g: &mut Graph, p: &Bound, gh: usize, gw: usize) -> Result<Var> {
        let pe = p.var("encoder.pos_embed")?;
        let n = self.cfg.grid();
        if (gh, gw) == (n, n) {
            return Ok(pe);
        }
        let d = self.cfg.dim;
        let cls = g.narrow(pe, 0, 0, 1)?;
        let patches = g.narrow(pe, 0, 1, n * n)?;
        let grid = g.reshape(patches, &[1, n, n, d])?;
        let resized = g.bilinear(grid, gh, gw)?;
        let flat = g.reshape(resized, &[gh * gw, d])?;
        g.concat(&[cls, flat], 0)
    }

    /// Runs the encoder on `[B,H,W]` or `[B,H,W,1]` images.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var, opts: Forward) -> Result<BlockOutputs> {
        let c = &self.cfg;
        let s = g.shape(images).to_vec();
        let (b, h, w) = match s.as_slice() {
            [b, h, w] | [b, h, w, 1] => (*b, *h, *w),
            _ => return Err(Error::shape("encode", format!("expected [B,H,W(,1)], got {s:?}"))),
        };
        let ps = c.patch_size;
        if h % ps != 0 || w % ps != 0 {
            return Err(Error::shape("encode", format!("{h}×{w} not divisible by patch size {ps}")));
        }
        let (gh, gw) = (h / ps, w / ps);
        let np = gh * gw;
        let d = c.dim;

        let patches = g.gather(images, patch_index(b, h, w, ps), &[b, np, ps * ps])?;
        let mut tokens = linear(g, p, "encoder.patch_embed", patches)?;

        if let Some(mask) = opts.mask {
            if mask.len() != b * np {
                return Err(Error::shape(
                    "encode",
                    format!("mask has {} flags for {b}×{np} patches", mask.len()),
                ));
            }
            let keep = Tensor::from_fn(vec![b, np, d], |i| if mask[i / d] { 0.0 } else { 1.0 });
            let ind = Tensor::from_fn(vec![b, np, 1], |i| if mask[i] { 1.0 } else { 0.0 });
            let keep = g.input(keep)?;
            let ind = g.input(ind)?;
            let kept = g.mul(tokens, keep)?;
            let filled = g.matmul(ind, p.var("encoder.mask_token")?)?;
            tokens = g.add(kept, filled)?;
        }

        let ones = g.input(Tensor::ones(vec![b, 1, 1]))?;
        let cls = g.matmul(ones, p.var("encoder.cls_token")?)?;
        let x = g.concat(&[cls, tokens], 1)?;
        let pos = self.pos_embed(g, p, gh, gw)?;
        let mut x = g.add_bcast(x, pos)?;

        let mut rng = opts.rng;
        let mut blocks = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            let rate = if c.depth > 1 {
                c.drop_path_rate * i as f64 / (c.depth - 1) as f64
            } else {
                c.drop_path_rate
            };
            let masks = match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some([drop_mask(r, b, rate), drop_mask(r, b, rate)]),
                _ => None,
            };
            x = self.block(g, p, i, x, masks.as_ref())?;
            blocks.push(x);
        }
        Ok(BlockOutputs { blocks, grid: (gh, gw) })
    }

    fn block(&self, g: &mut Graph, p: &Bound, i: usize, x: Var, drop: Option<&[Vec<f64>; 2]>) -> Result<Var> {
        let pre = format!("blocks.{i}");
        let name = |s: &str| format!("encoder.{pre}.{s}");
        let d = self.cfg.dim;

        let h = layer_norm(g, p, &name("norm1"), x)?;
        let qkv = linear(g, p, &name("attn.qkv"), h)?;
        let q = g.narrow(qkv, 2, 0, d)?;
        let k = g.narrow(qkv, 2, d, d)?;
        let v = g.narrow(qkv, 2, 2 * d, d)?;
        let a = g.attention(q, k, v, self.cfg.heads)?;
        let o = linear(g, p, &name("attn.proj"), a)?;
        let o = g.mul_bcast(o, p.var(&name("ls1"))?)?;
        let o = apply_drop(g, o, drop.map(|m| &m[0]))?;
        let x = g.add(x, o)?;

        let h = layer_norm(g, p, &name("norm2"), x)?;
        let h = linear(g, p, &name("mlp.fc1"), h)?;
        let h = g.gelu(h)?;
        let o = linear(g, p, &name("mlp.fc2"), h)?;
        let o = g.mul_bcast(o, p.var(&name("ls2"))?)?;
        let o = apply_drop(g, o, drop.map(|m| &m[1]))?;
        g.add(x, o)
    }

    /// Shared final norm applied to any block output.
    pub fn final_norm(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        layer_norm(g, p, "encoder.norm", x)
    }

    /// Normalized CLS rows `[B, d]` and patch tokens `[B, P, d]` of a block output.
    pub fn split_tokens(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let cls = g.narrow(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, d])?;
        let patches = g.narrow(x, 1, 1, t - 1)?;
        Ok((cls, patches))
    }
}

/// Per-sample keep factors: 0 for dropped samples, `1/(1-rate)` otherwise.
fn drop_mask(rng: &mut ChaCha8Rng, b: usize, rate: f64) -> Vec<f64> {
    (0..b)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
        .collect()
}

fn apply_drop(g: &mut Graph, x: Var, keep: Option<&Vec<f64>>) -> Result<Var> {
    let Some(keep) = keep else { return Ok(x) };
    let s = g.shape(x).to_vec();
    let per = s[1..].iter().product::<usize>();
    let m = g.input(Tensor::from_fn(s, |i| keep[i / per]))?;
    g.mul(x, m)
}

/// Concatenates the patch tokens (CLS dropped) of the chosen blocks along
/// the channel axis, in index order: `[B, P, k·d]`.
pub fn select_multiscale(g: &mut Graph, blocks: &[Var], indices: &[usize]) -> Result<Var> {
    if indices.is_empty() {
        return Err(Error::invalid("select_multiscale needs at least one index"));
    }
    let mut parts = Vec::with_capacity(indices.len());
    for &i in indices {
        let x = *blocks.get(i).ok_or_else(|| {
            Error::invalid(format!("block index {i} out of range for {} blocks", blocks.len()))
        })?;
        let t = g.shape(x)[1];
        parts.push(g.narrow(x, 1, 1, t - 1)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts, 2)
}
