//! Networks: ViT encoder, segmentation decoder, projection heads.

mod decoder;
mod head;
mod params;
mod vit;
#[cfg(test)]
mod tests;

pub use decoder::{seg_loss, Decoder, DecoderConfig, SegLoss, DICE_SMOOTH};
pub use head::{HeadConfig, ProtoHead};
pub use params::{Bound, Init, Params};
pub use vit::{
    default_multiscale_indices, patchify, select_multiscale, BlockOutputs, Encoder, Forward, ViTConfig,
};

use crate::error::Result;
use crate::tensor::{Graph, Precision, Tensor, Var};

/// Encoder plus decoder.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Feed the decoder from the multi-scale blocks instead of the last block only.
    pub multiscale: bool,
}

impl SegModel {
    pub fn new(vit: ViTConfig, num_classes: usize, multiscale: bool) -> Result<Self> {
        let encoder = Encoder::new(vit)?;
        let k = if multiscale { encoder.cfg.indices().len() } else { 1 };
        let decoder = Decoder::new(DecoderConfig {
            in_width: k * encoder.cfg.dim,
            num_classes,
            patch_size: encoder.cfg.patch_size,
        })?;
        Ok(Self {
            encoder,
            decoder,
            multiscale,
        })
    }

    pub fn init(&self, init: &mut Init) -> Params {
        let mut p = self.encoder.init(init);
        p.extend(self.decoder.init(init));
        p
    }

    /// Block indices feeding the decoder.
    pub fn feature_blocks(&self) -> Vec<usize> {
        if self.multiscale {
            self.encoder.cfg.indices()
        } else {
            vec![self.encoder.cfg.depth - 1]
        }
    }

    /// `[B,H,W]` images to `[B,H,W,classes]` logits.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var, opts: Forward) -> Result<Var> {
        let out = self.encoder.forward(g, p, images, opts)?;
        let idx = self.feature_blocks();
        let mut normed = out.blocks.clone();
        for &i in &idx {
            normed[i] = self.encoder.final_norm(g, p, out.blocks[i])?;
        }
        let tokens = select_multiscale(g, &normed, &idx)?;
        self.decoder.forward(g, p, tokens, out.grid)
    }
}

/// Final-norm patch tokens `[B, P, d]` of the last block, computed without gradients.
pub fn patch_features(enc: &Encoder, params: &Params, images: &Tensor, precision: Precision) -> Result<(Tensor, (usize, usize))> {
    let mut g = Graph::inference(precision);
    let p = params.bind(&mut g, false)?;
    let x = g.input(images.clone())?;
    let out = enc.forward(&mut g, &p, x, Forward::default())?;
    let n = enc.final_norm(&mut g, &p, out.last())?;
    let (_, patches) = enc.split_tokens(&mut g, n)?;
    Ok((g.value(patches).clone(), out.grid))
}
