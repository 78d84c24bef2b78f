//! Supervised fine-tuning of encoder plus decoder on labelled slices.

use super::checkpoint::{Checkpoint, Payload};
use super::optim::{clip_grad_norm, AdamState, AdamW, LrSchedule};
use crate::data::{load_split, resize_nearest, Manifest, SliceRecord, Split, Window, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{dsc, evaluate_slice, MetricReport};
use crate::model::{seg_loss, Forward, Init, Params, SegModel, ViTConfig};
use crate::tensor::{Graph, Precision, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Reference fine-tuning learning rate.
pub const REFERENCE_FINETUNE_LR: f64 = 3e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub precision: Precision,
    pub vit: ViTConfig,
    pub multiscale: bool,
    pub num_classes: usize,
    /// Side of the preprocessed slices fed to the model.
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps per epoch; `None` covers the training split once.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    /// Multiplier on `lr` for the short desk-scale schedules.
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub warmup_frac: f64,
    pub clip: f64,
    /// Random flips, quarter turns and mild intensity jitter.
    pub augment: bool,
    pub window: Window,
    /// NSD tolerance in mm.
    pub tau_mm: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            vit: ViTConfig { drop_path_rate: 0.2, ..ViTConfig::default() },
            multiscale: true,
            num_classes: NUM_CLASSES,
            image_size: 64,
            epochs: 20,
            batch_size: 8,
            steps_per_epoch: None,
            lr: REFERENCE_FINETUNE_LR,
            lr_scale: 10.0,
            weight_decay: 5e-2,
            betas: (0.9, 0.98),
            warmup_frac: 0.05,
            clip: 1.0,
            augment: true,
            window: Window::default(),
            tau_mm: 1.0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.vit.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.vit.patch_size
            )));
        }
        if self.batch_size == 0 || self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config("batch_size must be ≥ 1 and num_classes in 2..=256".into()));
        }
        if self.lr < 0.0 || self.lr_scale < 0.0 || self.tau_mm <= 0.0 {
            return Err(Error::Config("lr must be ≥ 0 and tau_mm > 0".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<SegModel> {
        SegModel::new(self.vit.clone(), self.num_classes, self.multiscale)
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc_mean: f64,
    pub per_class: Vec<f64>,
}

impl EpochRow {
    pub fn header(num_classes: usize) -> String {
        let mut h = "epoch,train_loss,val_dsc_mean".to_string();
        for c in 0..num_classes {
            h.push_str(&format!(",dsc_{c}"));
        }
        h
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{},{},{}", self.epoch, self.train_loss, self.val_dsc_mean);
        for v in &self.per_class {
            s.push_str(&format!(",{v}"));
        }
        s
    }
}

pub struct FinetuneRun {
    pub params: Params,
    pub epochs: Vec<EpochRow>,
}

/// Encoder weights of a checkpoint: the EMA teacher of a pretraining run, or
/// the encoder of a fine-tuned model.
pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<Params> {
    let mut p = Params::new();
    for prefix in ["teacher/", "model/"] {
        for (k, v) in &ck.entries {
            if let Some(name) = k.strip_prefix(prefix).filter(|n| n.starts_with("encoder.")) {
                let t = v.tensor().ok_or_else(|| Error::invalid(format!("{k} is not a float tensor")))?;
                p.insert(name, t.clone());
            }
        }
        if !p.is_empty() {
            return Ok(p);
        }
    }
    Err(Error::invalid("checkpoint holds no encoder weights"))
}

/// Model configuration and parameters of a fine-tuned model checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(FinetuneConfig, Params)> {
    let cfg: FinetuneConfig = serde_json::from_value(
        ck.meta
            .get("finetune")
            .cloned()
            .ok_or_else(|| Error::invalid("not a fine-tuned model checkpoint"))?,
    )?;
    let mut p = Params::new();
    for (k, v) in &ck.entries {
        if let (Some(name), Some(t)) = (k.strip_prefix("model/"), v.tensor()) {
            p.insert(name, t.clone());
        }
    }
    let model = cfg.model()?;
    let fresh = model.init(&mut Init::new(ChaCha8Rng::seed_from_u64(0)));
    p.check_congruent(&fresh)?;
    Ok((cfg, p))
}

pub fn model_checkpoint(cfg: &FinetuneConfig, params: &Params) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(serde_json::json!({ "finetune": serde_json::to_value(cfg)? }));
    for (k, t) in params.iter() {
        let payload = match cfg.precision {
            Precision::F32 => Payload::F32(t.clone()),
            Precision::F64 => Payload::F64(t.clone()),
        };
        ck.push(format!("model/{k}"), payload);
    }
    Ok(ck)
}

/// Fresh model parameters, with the encoder replaced by `encoder` when given.
pub fn init_params(cfg: &FinetuneConfig, encoder: Option<&Params>) -> Result<Params> {
    let model = cfg.model()?;
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut p = model.encoder.init(&mut init);
    let mut dinit = Init::new(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec0_de00));
    let dec = model.decoder.init(&mut dinit);
    if let Some(enc) = encoder {
        enc.check_congruent(&p)?;
        p = enc.clone();
    }
    p.extend(dec);
    p.round(cfg.precision);
    Ok(p)
}

fn augment(img: &[f64], lbl: &[u8], s: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let flip = rng.random_bool(0.5);
    let turns = rng.random_range(0..4u8);
    let gain = rng.random_range(0.95..1.05);
    let bias = rng.random_range(-0.03..0.03);
    let src = |y: usize, x: usize| {
        let (mut y, mut x) = (y, x);
        for _ in 0..turns {
            (y, x) = (x, s - 1 - y);
        }
        if flip {
            x = s - 1 - x;
        }
        y * s + x
    };
    let mut oi = vec![0.0; s * s];
    let mut ol = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = src(y, x);
            oi[y * s + x] = img[i] * gain + bias;
            ol[y * s + x] = lbl[i];
        }
    }
    (oi, ol)
}

/// Argmax labels of `[B, H, W]` images.
pub fn predict_batch(model: &SegModel, params: &Params, images: &Tensor, precision: Precision) -> Result<Vec<u8>> {
    let mut g = Graph::inference(precision);
    let p = params.bind(&mut g, false)?;
    let x = g.input(images.clone())?;
    let logits = model.forward(&mut g, &p, x, Forward::default())?;
    let v = g.value(logits);
    let k = v.cols();
    Ok((0..v.rows())
        .map(|r| {
            let row = v.row(r);
            (0..k).fold(0, |best, c| if row[c] > row[best] { c } else { best }) as u8
        })
        .collect())
}

/// Label mask of a preprocessed record, resized to `original` with nearest-neighbour.
pub fn predict(model: &SegModel, params: &Params, rec: &SliceRecord, original: (usize, usize), precision: Precision) -> Result<Vec<u8>> {
    let (h, w) = (rec.height(), rec.width());
    let img = rec.pixels.clone().reshape(vec![1, h, w])?;
    let mask = predict_batch(model, params, &img, precision)?;
    Ok(resize_nearest(&mask, (h, w), original))
}

const EVAL_CHUNK: usize = 16;

/// Predictions of every record at model resolution.
pub fn predict_all(model: &SegModel, params: &Params, recs: &[SliceRecord], precision: Precision) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(recs.len());
    for chunk in recs.chunks(EVAL_CHUNK) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let parts: Vec<Tensor> = chunk.iter().map(|r| r.pixels.clone()).collect();
        let x = Tensor::stack(&parts)?;
        let m = predict_batch(model, params, &x, precision)?;
        out.extend(m.chunks(h * w).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Per-class DSC pooled over all `(prediction, reference)` pairs, and its
/// mean over foreground classes present in the reference or prediction.
pub fn pooled_dsc(preds: &[Vec<u8>], refs: &[&[u8]], num_classes: usize) -> Result<(Vec<f64>, f64)> {
    let p: Vec<u8> = preds.iter().flatten().copied().collect();
    let r: Vec<u8> = refs.iter().flat_map(|x| x.iter()).copied().collect();
    let per: Vec<f64> = (0..num_classes as u8).map(|c| dsc(&p, &r, c)).collect::<Result<_>>()?;
    let present: Vec<bool> = (0..num_classes as u8).map(|c| p.iter().chain(&r).any(|&v| v == c)).collect();
    let mean = MetricReport::mean_foreground(&per, &present);
    Ok((per, mean))
}

fn labels_of(recs: &[SliceRecord]) -> Result<Vec<&[u8]>> {
    recs.iter()
        .map(|r| r.label.as_deref().ok_or_else(|| Error::invalid("slice without labels in a supervised split")))
        .collect()
}

/// Trains on `train`, reporting pooled validation DSC after every epoch.
/// The epoch log is written to `log` when given.
pub fn finetune(
    cfg: &FinetuneConfig,
    train: &[SliceRecord],
    val: &[SliceRecord],
    encoder: Option<&Params>,
    log: Option<&Path>,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let s = cfg.image_size;
    for r in train.iter().chain(val) {
        if r.height() != s || r.width() != s {
            return Err(Error::invalid(format!("slice of {}×{} for image_size {s}", r.height(), r.width())));
        }
    }
    let train_labels = labels_of(train)?;
    let val_labels = labels_of(val)?;
    let model = cfg.model()?;
    let mut params = init_params(cfg, encoder)?;
    let mut adam = AdamState::zeros_like(&params);
    let opt = AdamW { betas: cfg.betas, eps: 1e-8, weight_decay: cfg.weight_decay };
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| train.len().div_ceil(cfg.batch_size));
    let sched = LrSchedule { base: cfg.lr * cfg.lr_scale, total: (steps * cfg.epochs) as u64, warmup_frac: cfg.warmup_frac };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7_0001);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();

    let mut file = match log {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "{}", EpochRow::header(cfg.num_classes))?;
            Some(f)
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut it = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let mut imgs = Vec::with_capacity(cfg.batch_size * s * s);
            let mut lbls = Vec::with_capacity(cfg.batch_size * s * s);
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let i = order[cursor];
                cursor += 1;
                if cfg.augment {
                    let (a, b) = augment(train[i].pixels.data(), train_labels[i], s, &mut rng);
                    imgs.extend(a);
                    lbls.extend(b);
                } else {
                    imgs.extend_from_slice(train[i].pixels.data());
                    lbls.extend_from_slice(train_labels[i]);
                }
            }
            let mut g = Graph::with_precision(cfg.precision);
            let p = params.bind(&mut g, true)?;
            let x = g.input(Tensor::new(vec![cfg.batch_size, s, s], imgs)?)?;
            let logits = model.forward(&mut g, &p, x, Forward { mask: None, rng: Some(&mut rng) })?;
            let loss = seg_loss(&mut g, logits, &lbls)?;
            loss_sum += g.value(loss.total).item();
            let gr = g.backward(loss.total)?;
            let mut grads = p.grads(&g, &gr);
            drop(g);
            clip_grad_norm(&mut grads, cfg.clip);
            grads.round(cfg.precision);
            opt.step(&mut params, &grads, &mut adam, sched.at(it), cfg.precision)?;
            it += 1;
        }
        let (per_class, mean) = if val.is_empty() {
            (vec![f64::NAN; cfg.num_classes], f64::NAN)
        } else {
            let preds = predict_all(&model, &params, val, cfg.precision)?;
            pooled_dsc(&preds, &val_labels, cfg.num_classes)?
        };
        let row = EpochRow { epoch, train_loss: loss_sum / steps.max(1) as f64, val_dsc_mean: mean, per_class };
        log::info!("epoch {epoch} loss {:.4} val DSC {:.4}", row.train_loss, row.val_dsc_mean);
        if let Some(f) = file.as_mut() {
            writeln!(f, "{}", row.csv())?;
        }
        rows.push(row);
    }
    if let Some(mut f) = file {
        f.flush()?;
    }
    Ok(FinetuneRun { params, epochs: rows })
}

/// Loads both splits of a manifest and fine-tunes.
pub fn finetune_from_manifest(cfg: &FinetuneConfig, manifest: &Manifest, encoder: Option<&Params>, log: Option<&Path>) -> Result<FinetuneRun> {
    let train = load_split(manifest, Split::Train, cfg.image_size, cfg.window)?;
    let val = load_split(manifest, Split::Val, cfg.image_size, cfg.window)?;
    finetune(cfg, &train, &val, encoder, log)
}

/// Per-slice DSC and NSD of a model on the validation split, in the
/// geometry of the original slices.
pub fn evaluate(cfg: &FinetuneConfig, params: &Params, manifest: &Manifest, tau: f64) -> Result<Vec<(String, MetricReport)>> {
    let model = cfg.model()?;
    let mut out = Vec::new();
    for r in manifest.split(Split::Val) {
        let raw = manifest.read_slice(r)?;
        let gt = raw.label.as_deref().ok_or_else(|| Error::invalid(format!("{} has no labels", r.image)))?;
        let pre = crate::data::preprocess_slice(&raw, crate::data::TARGET_SPACING_MM, cfg.image_size, cfg.window)?;
        let (h, w) = (raw.height(), raw.width());
        let pred = predict(&model, params, &pre, (h, w), cfg.precision)?;
        out.push((r.image.clone(), evaluate_slice(&pred, gt, h, w, raw.spacing, cfg.num_classes, tau)?));
    }
    Ok(out)
}
