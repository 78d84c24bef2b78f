//! Teacher–student pretraining across the three stages.

use super::checkpoint::{checkpoint_name, list_checkpoints, Checkpoint, Payload};
use super::optim::{clip_grad_norm, AdamState, AdamW, LrSchedule};
use crate::data::{load_split, multicrop_sized, CropPlan, Manifest, SliceRecord, Split, Window};
use crate::error::{Error, Result};
use crate::model::{patch_features, Encoder, Forward, HeadConfig, Init, Params, ProtoHead, ViTConfig};
use crate::ssl::{
    batch_mean, dino_loss, gram_loss, ibot_loss, koleo_loss, stage_loss_var, teacher_probs, update_center,
    LossParts, TeacherTemp,
};
use crate::tensor::{Graph, Precision, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Reference iteration budgets of stages 1, 2 and 3.
pub const REFERENCE_BUDGETS: [u64; 3] = [100_000, 10_000, 10_000];
/// Reference learning rates of stages 1, 2 and 3.
pub const REFERENCE_LRS: [f64; 3] = [2e-4, 5e-5, 2.5e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub vit: ViTConfig,
    pub head: HeadConfig,
    /// Side of the preprocessed slices for stages 1–2 and for stage 3.
    pub image_size: usize,
    pub stage3_image_size: usize,
    pub batch_size: usize,
    pub stage3_batch_size: usize,
    /// Maps the reference budgets to desk scale.
    pub budget_scale: f64,
    /// Replaces the scaled budget of the stage being run.
    pub iterations: Option<u64>,
    /// Multiplier on the reference learning rates.
    pub lr_scale: f64,
    pub warmup_frac: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub clip: f64,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    /// Teacher temperature warmup as a fraction of the stage-1 budget.
    pub teacher_temp_warmup_frac: f64,
    pub koleo_eps: f64,
    /// KoLeo coefficient in stages 2–3.
    pub koleo_weight_late: f64,
    /// Prototype matrices stay fixed for this fraction of the stage-1 budget.
    pub freeze_prototypes_frac: f64,
    /// Gram teacher = EMA teacher at this fraction of the stage-1 budget.
    pub gram_snapshot_frac: f64,
    pub checkpoint_frac: f64,
    pub crops: CropPlan,
    pub stage3_crops: CropPlan,
    pub window: Window,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            vit: ViTConfig { drop_path_rate: 0.1, ..ViTConfig::default() },
            head: HeadConfig::default(),
            image_size: 64,
            stage3_image_size: 128,
            batch_size: 8,
            stage3_batch_size: 4,
            budget_scale: 1.0 / 200.0,
            iterations: None,
            lr_scale: 10.0,
            warmup_frac: 0.1,
            betas: (0.9, 0.999),
            weight_decay: 0.04,
            clip: 3.0,
            ema_momentum: 0.996,
            center_momentum: 0.9,
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_frac: 0.3,
            koleo_eps: 1e-8,
            koleo_weight_late: 0.1,
            freeze_prototypes_frac: 0.1,
            gram_snapshot_frac: 0.2,
            checkpoint_frac: 0.1,
            crops: CropPlan::default(),
            stage3_crops: CropPlan {
                global_size: crate::data::SizeRange { min: 96, max: 128 },
                local_size: crate::data::SizeRange { min: 24, max: 48 },
                ..CropPlan::stage3()
            },
            window: Window::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.crops.validate()?;
        self.stage3_crops.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size < 2 || self.stage3_batch_size < 2 {
            return bad("batch sizes must be ≥ 2 (KoLeo needs two samples)");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) || !(0.0..=1.0).contains(&self.center_momentum) {
            return bad("momenta must lie in [0, 1]");
        }
        if self.student_temp <= 0.0 || self.teacher_temp_start <= 0.0 || self.teacher_temp_end <= 0.0 {
            return bad("temperatures must be positive");
        }
        if self.teacher_temp_start > self.student_temp || self.teacher_temp_end > self.student_temp {
            return bad("teacher temperature must not exceed the student temperature");
        }
        if self.budget_scale <= 0.0 || self.checkpoint_frac <= 0.0 || self.checkpoint_frac > 1.0 {
            return bad("budget_scale and checkpoint_frac must be positive (checkpoint_frac ≤ 1)");
        }
        for plan in [&self.crops, &self.stage3_crops] {
            if plan.patch_size != self.vit.patch_size {
                return bad("crop plan patch_size must match the encoder");
            }
        }
        if self.crops.global_size.max != self.crops.global_size.min || self.crops.global_size.min != self.vit.image_size {
            return bad("stage 1/2 global crops must have the encoder's image_size");
        }
        Ok(())
    }

    /// Scaled budget of a stage, or the explicit override.
    pub fn budget(&self, stage: u8) -> u64 {
        self.iterations.unwrap_or_else(|| self.scaled_budget(stage))
    }

    pub fn scaled_budget(&self, stage: u8) -> u64 {
        (REFERENCE_BUDGETS[stage as usize - 1] as f64 * self.budget_scale).round().max(1.0) as u64
    }

    pub fn lr(&self, stage: u8) -> f64 {
        REFERENCE_LRS[stage as usize - 1] * self.lr_scale
    }

    fn plan(&self, stage: u8) -> CropPlan {
        let mut p = if stage == 3 { self.stage3_crops.clone() } else { self.crops.clone() };
        p.gram_hr = stage >= 2;
        p
    }

    fn batch(&self, stage: u8) -> usize {
        if stage == 3 { self.stage3_batch_size } else { self.batch_size }
    }

    pub fn data_size(&self, stage: u8) -> usize {
        if stage == 3 { self.stage3_image_size } else { self.image_size }
    }
}

/// Everything a run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: Params,
    pub teacher: Params,
    pub gram_teacher: Option<Params>,
    pub adam: AdamState,
    pub center_dino: Tensor,
    pub center_ibot: Tensor,
    pub rng: ChaCha8Rng,
    /// Global iterations completed.
    pub iteration: u64,
    pub stage: u8,
    /// Budget of the stage-1 run this lineage started from.
    pub stage1_budget: u64,
}

fn heads(cfg: &PretrainConfig) -> (ProtoHead, ProtoHead) {
    (ProtoHead::new(cfg.head.clone(), "dino_head"), ProtoHead::new(cfg.head.clone(), "ibot_head"))
}

impl TrainState {
    pub fn init(cfg: &PretrainConfig) -> Result<Self> {
        let enc = Encoder::new(cfg.vit.clone())?;
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(cfg.seed));
        let mut student = enc.init(&mut init);
        let (dh, ih) = heads(cfg);
        student.extend(dh.init(&mut init, cfg.vit.dim));
        student.extend(ih.init(&mut init, cfg.vit.dim));
        student.round(cfg.precision);
        let k = cfg.head.prototypes;
        Ok(Self {
            teacher: student.clone(),
            adam: AdamState::zeros_like(&student),
            student,
            gram_teacher: None,
            center_dino: Tensor::zeros(vec![k]),
            center_ibot: Tensor::zeros(vec![k]),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001),
            iteration: 0,
            stage: 1,
            stage1_budget: cfg.budget(1),
        })
    }

    pub fn to_checkpoint(&self, cfg: &PretrainConfig) -> Result<Checkpoint> {
        let wrap = |t: &Tensor| match cfg.precision {
            Precision::F32 => Payload::F32(t.clone()),
            Precision::F64 => Payload::F64(t.clone()),
        };
        let meta = serde_json::json!({
            "iteration": self.iteration,
            "stage": self.stage,
            "adam_step": self.adam.step,
            "stage1_budget": self.stage1_budget,
            "config": serde_json::to_value(cfg)?,
        });
        let mut ck = Checkpoint::new(meta);
        let groups: [(&str, Option<&Params>); 5] = [
            ("student/", Some(&self.student)),
            ("teacher/", Some(&self.teacher)),
            ("gram_teacher/", self.gram_teacher.as_ref()),
            ("adam_m/", Some(&self.adam.m)),
            ("adam_v/", Some(&self.adam.v)),
        ];
        for (prefix, p) in groups {
            if let Some(p) = p {
                for (k, t) in p.iter() {
                    ck.push(format!("{prefix}{k}"), wrap(t));
                }
            }
        }
        ck.push("center/dino", wrap(&self.center_dino));
        ck.push("center/ibot", wrap(&self.center_ibot));
        ck.push("rng/state", Payload::U8(rng_bytes(&self.rng)));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let group = |prefix: &str| -> Params {
            let mut p = Params::new();
            for (k, v) in &ck.entries {
                if let (Some(name), Some(t)) = (k.strip_prefix(prefix), v.tensor()) {
                    p.insert(name, t.clone());
                }
            }
            p
        };
        let meta_u64 = |k: &str| {
            ck.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::invalid(format!("checkpoint meta lacks {k}")))
        };
        let tensor = |k: &str| {
            ck.get(k)
                .and_then(Payload::tensor)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks {k}")))
        };
        let student = group("student/");
        let teacher = group("teacher/");
        student.check_congruent(&teacher)?;
        let gram = group("gram_teacher/");
        let rng = match ck.get("rng/state") {
            Some(Payload::U8(b)) => rng_from_bytes(b)?,
            _ => return Err(Error::invalid("checkpoint lacks rng/state")),
        };
        Ok(Self {
            student,
            teacher,
            gram_teacher: (!gram.is_empty()).then_some(gram),
            adam: AdamState {
                m: group("adam_m/"),
                v: group("adam_v/"),
                step: meta_u64("adam_step")?,
            },
            center_dino: tensor("center/dino")?,
            center_ibot: tensor("center/ibot")?,
            rng,
            iteration: meta_u64("iteration")?,
            stage: meta_u64("stage")? as u8,
            stage1_budget: meta_u64("stage1_budget")?,
        })
    }
}

/// ChaCha8 seed (32 bytes), stream (8) and word position (16).
pub fn rng_bytes(r: &ChaCha8Rng) -> Vec<u8> {
    let mut b = r.get_seed().to_vec();
    b.extend_from_slice(&r.get_stream().to_le_bytes());
    b.extend_from_slice(&r.get_word_pos().to_le_bytes());
    b
}

pub fn rng_from_bytes(b: &[u8]) -> Result<ChaCha8Rng> {
    if b.len() != 56 {
        return Err(Error::invalid(format!("rng state has {} bytes, expected 56", b.len())));
    }
    let mut r = ChaCha8Rng::from_seed(b[..32].try_into().unwrap());
    r.set_stream(u64::from_le_bytes(b[32..40].try_into().unwrap()));
    r.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
    Ok(r)
}

fn rng_hex(r: &ChaCha8Rng) -> String {
    rng_bytes(r).iter().map(|b| format!("{b:02x}")).collect()
}

/// `teacher ← m·teacher + (1−m)·student`, rounded to `precision`.
pub fn ema_update(teacher: &mut Params, student: &Params, m: f64, precision: Precision) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA momentum {m} outside [0, 1]")));
    }
    teacher.check_congruent(student)?;
    if m == 1.0 {
        return Ok(());
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = precision.round(m * *a + (1.0 - m) * b);
        }
    }
    Ok(())
}

/// 2×2 average pooling of `[B, H, W, d]` patch grids.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
        return Err(Error::shape("avg_pool2", format!("{s:?}")));
    }
    let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; b * oh * ow * d];
    for n in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let o = ((n * oh + y) * ow + xx) * d;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((n * h + 2 * y + dy) * w + 2 * xx + dx) * d;
                    for c in 0..d {
                        out[o + c] += 0.25 * src[i + c];
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, d], out)
}

/// Gram-teacher patch features on `[B, H, W]` images: last-block tokens,
/// optionally 2×2 average-pooled, L2-normalized, as `[B, P, d]`.
pub fn gram_teacher_features(enc: &Encoder, params: &Params, images: &Tensor, pool: bool, precision: Precision) -> Result<Tensor> {
    let (feats, (gh, gw)) = patch_features(enc, params, images, precision)?;
    let b = feats.shape()[0];
    let d = feats.cols();
    let grid = feats.reshape(vec![b, gh, gw, d])?;
    let grid = if pool { avg_pool2(&grid)? } else { grid };
    let p = grid.shape()[1] * grid.shape()[2];
    let mut g = Graph::inference(precision);
    let v = g.input(grid.reshape(vec![b, p, d])?)?;
    let n = g.l2_normalize(v)?;
    Ok(g.value(n).clone())
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub parts: LossParts,
    pub total: f64,
    pub lr: f64,
}

pub const TRACE_HEADER: &str = "iteration,l_dino,l_ibot,l_koleo,l_gram,l_total,lr";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.parts.dino,
            self.parts.ibot,
            self.parts.koleo,
            self.parts.gram.unwrap_or(0.0),
            self.total,
            self.lr
        )
    }
}

/// Outcome of [`run_stage`].
pub struct StageRun {
    pub state: TrainState,
    pub trace: Vec<TraceRow>,
    pub checkpoints: Vec<PathBuf>,
    /// Iterations whose iBOT mask came out empty.
    pub empty_masks: u64,
    /// Gradient-tracking parameters bound on teacher graphs, summed over iterations.
    pub teacher_grad_leaves: usize,
}

struct Batch {
    global: Tensor,
    local: Option<Tensor>,
    /// `n_global·B·P` flags; only the masked crop's rows are set.
    mask: Vec<bool>,
    /// Flags of the masked crop alone, `B·P`.
    crop_mask: Vec<bool>,
    hr: Option<Tensor>,
}

fn assemble(data: &[SliceRecord], plan: &CropPlan, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let sizes = plan.sample_sizes(rng);
    let mut sets = Vec::with_capacity(b);
    for _ in 0..b {
        let idx = rng.random_range(0..data.len());
        sets.push(multicrop_sized(&data[idx].pixels, plan, sizes, rng)?);
    }
    let (gs, ls) = sizes;
    let mut global = Vec::with_capacity(plan.n_global * b * gs * gs);
    for c in 0..plan.n_global {
        for s in &sets {
            global.extend_from_slice(s.global[c].data());
        }
    }
    let local = (plan.n_local > 0)
        .then(|| {
            let mut v = Vec::with_capacity(plan.n_local * b * ls * ls);
            for c in 0..plan.n_local {
                for s in &sets {
                    v.extend_from_slice(s.local[c].data());
                }
            }
            Tensor::new(vec![plan.n_local * b, ls, ls], v)
        })
        .transpose()?;
    let p = (gs / plan.patch_size).pow(2);
    let crop_mask: Vec<bool> = sets.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let mut mask = vec![false; plan.n_global * b * p];
    mask[plan.masked_crop * b * p..(plan.masked_crop + 1) * b * p].copy_from_slice(&crop_mask);
    let hr = plan
        .gram_hr
        .then(|| {
            let v: Vec<f64> = sets.iter().flat_map(|s| s.gram_hr.as_ref().unwrap().data().iter().copied()).collect();
            Tensor::new(vec![b, 2 * gs, 2 * gs], v)
        })
        .transpose()?;
    Ok(Batch {
        global: Tensor::new(vec![plan.n_global * b, gs, gs], global)?,
        local,
        mask,
        crop_mask,
        hr,
    })
}

/// Rows `[c·b, (c+1)·b)` of a `[n·b, ...]` variable.
fn chunk(g: &mut Graph, v: Var, c: usize, b: usize) -> Result<Var> {
    g.narrow(v, 0, c * b, b)
}

struct StepOut {
    parts: LossParts,
    total: f64,
    ibot_empty: bool,
    teacher_cls_logits: Tensor,
    teacher_patch_masked: Tensor,
    teacher_tracked: usize,
}

/// Trains `state` for one iteration on `batch`.
#[allow(clippy::too_many_arguments)]
fn step(
    cfg: &PretrainConfig,
    stage: u8,
    state: &mut TrainState,
    batch: &Batch,
    b: usize,
    lr: f64,
    t_t: f64,
    opt: &AdamW,
) -> Result<StepOut> {
    let enc = Encoder::new(cfg.vit.clone())?;
    let (dh, ih) = heads(cfg);
    let plan = cfg.plan(stage);
    let ng = plan.n_global;
    let prec = cfg.precision;

    // teacher: global crops, no gradients
    let (t_cls, t_patch, teacher_tracked) = {
        let mut g = Graph::inference(prec);
        let p = state.teacher.bind(&mut g, false)?;
        let x = g.input(batch.global.clone())?;
        let out = enc.forward(&mut g, &p, x, Forward::default())?;
        let n = enc.final_norm(&mut g, &p, out.last())?;
        let (cls, patches) = enc.split_tokens(&mut g, n)?;
        let cls_logits = dh.forward(&mut g, &p, cls)?;
        let masked = chunk(&mut g, patches, plan.masked_crop, b)?;
        let patch_logits = ih.forward(&mut g, &p, masked)?;
        (g.value(cls_logits).clone(), g.value(patch_logits).clone(), p.tracked(&g))
    };
    let k = t_cls.cols();
    let mut teacher_targets = Vec::with_capacity(ng);
    for c in 0..ng {
        let rows = t_cls.slice_rows(c * b, b)?;
        teacher_targets.push(teacher_probs(&rows, &state.center_dino, t_t)?);
    }
    let ibot_targets = teacher_probs(&t_patch, &state.center_ibot, t_t)?;

    let gram_target = match (&batch.hr, &state.gram_teacher) {
        (Some(hr), Some(gp)) => Some(gram_teacher_features(&enc, gp, hr, true, prec)?),
        (None, _) => None,
        (Some(_), None) => return Err(Error::invalid(format!("stage {stage} needs a gram teacher"))),
    };

    // student
    let mut g = Graph::with_precision(prec);
    let p = state.student.bind(&mut g, true)?;
    let xg = g.input(batch.global.clone())?;
    let out = enc.forward(
        &mut g,
        &p,
        xg,
        Forward {
            mask: Some(&batch.mask),
            rng: Some(&mut state.rng),
        },
    )?;
    let n = enc.final_norm(&mut g, &p, out.last())?;
    let (cls, patches) = enc.split_tokens(&mut g, n)?;
    let cls_logits = dh.forward(&mut g, &p, cls)?;
    let mut student_logits = Vec::new();
    for c in 0..ng {
        student_logits.push(chunk(&mut g, cls_logits, c, b)?);
    }
    if let Some(local) = &batch.local {
        let xl = g.input(local.clone())?;
        let out_l = enc.forward(&mut g, &p, xl, Forward { mask: None, rng: Some(&mut state.rng) })?;
        let nl = enc.final_norm(&mut g, &p, out_l.last())?;
        let (cls_l, _) = enc.split_tokens(&mut g, nl)?;
        let logits_l = dh.forward(&mut g, &p, cls_l)?;
        for c in 0..plan.n_local {
            student_logits.push(chunk(&mut g, logits_l, c, b)?);
        }
    }
    let l_dino = dino_loss(&mut g, &student_logits, &teacher_targets, cfg.student_temp)?;

    let masked_patches = chunk(&mut g, patches, plan.masked_crop, b)?;
    let s_patch_logits = ih.forward(&mut g, &p, masked_patches)?;
    let ibot = ibot_loss(&mut g, s_patch_logits, &ibot_targets, &batch.crop_mask, cfg.student_temp)?;

    let mut l_koleo: Option<Var> = None;
    for c in 0..ng {
        let rows = chunk(&mut g, cls, c, b)?;
        let kl = koleo_loss(&mut g, rows, cfg.koleo_eps)?;
        l_koleo = Some(match l_koleo {
            Some(acc) => g.add(acc, kl)?,
            None => kl,
        });
    }
    let l_koleo = l_koleo.expect("at least one global crop");

    let l_gram = match gram_target {
        Some(t) => {
            let s0 = chunk(&mut g, patches, 0, b)?;
            let s0 = g.l2_normalize(s0)?;
            if g.shape(s0) != t.shape() {
                return Err(Error::shape("gram", format!("student {:?} vs gram teacher {:?}", g.shape(s0), t.shape())));
            }
            let tv = g.input(t)?;
            Some(gram_loss(&mut g, s0, tv)?)
        }
        None => None,
    };

    let w_k = if stage == 1 { crate::ssl::KOLEO_WEIGHT } else { cfg.koleo_weight_late };
    let total = stage_loss_var(&mut g, stage, l_dino, ibot.loss, l_koleo, l_gram, w_k)?;
    let parts = LossParts {
        dino: g.value(l_dino).item(),
        ibot: g.value(ibot.loss).item(),
        koleo: g.value(l_koleo).item(),
        gram: l_gram.map(|v| g.value(v).item()),
    };
    let total_value = g.value(total).item();
    let grads = g.backward(total)?;
    let mut grads = p.grads(&g, &grads);
    drop(g);
    if grads.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite { op: "backward", node: 0 });
    }
    let freeze = (cfg.freeze_prototypes_frac * state.stage1_budget as f64).round() as u64;
    if state.iteration < freeze {
        for (name, t) in grads.iter_mut() {
            if name.ends_with(".prototypes") {
                t.data_mut().fill(0.0);
            }
        }
    }
    clip_grad_norm(&mut grads, cfg.clip);
    grads.round(prec);
    opt.step(&mut state.student, &grads, &mut state.adam, lr, prec)?;
    ema_update(&mut state.teacher, &state.student, cfg.ema_momentum, prec)?;

    let masked_rows: Vec<usize> = (0..batch.crop_mask.len()).filter(|&i| batch.crop_mask[i]).collect();
    let mut tm = Vec::with_capacity(masked_rows.len() * k);
    for &r in &masked_rows {
        tm.extend_from_slice(t_patch.row(r));
    }
    Ok(StepOut {
        parts,
        total: total_value,
        ibot_empty: ibot.empty,
        teacher_cls_logits: t_cls,
        teacher_patch_masked: Tensor::new(vec![masked_rows.len(), k], tm)?,
        teacher_tracked,
    })
}

/// Loads the EMA teacher recorded at `at_iteration` from `dir`.
pub fn snapshot_gram_teacher(dir: &Path, at_iteration: u64) -> Result<Params> {
    let all = list_checkpoints(dir)?;
    let Some((_, path)) = all.iter().find(|(it, _)| *it == at_iteration) else {
        return Err(Error::MissingCheckpoint {
            requested: at_iteration,
            available: all.iter().map(|(i, _)| *i).collect(),
        });
    };
    let st = TrainState::from_checkpoint(&Checkpoint::read(path)?)?;
    Ok(st.teacher)
}

/// Runs one stage. `resume` is required for stages 2 and 3; the gram
/// teacher for stage 2 is taken from the resume checkpoint's directory.
pub fn run_stage(
    cfg: &PretrainConfig,
    stage: u8,
    data: &[SliceRecord],
    resume: Option<&Path>,
    out_dir: &Path,
) -> Result<StageRun> {
    cfg.validate()?;
    if !(1..=3).contains(&stage) {
        return Err(Error::invalid(format!("unknown stage {stage}")));
    }
    if stage >= 2 && resume.is_none() {
        return Err(Error::invalid(format!(
            "stage {stage} needs --resume: the gram teacher is an EMA snapshot from an earlier run"
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("no training slices"));
    }
    let mut state = match resume {
        Some(path) => {
            let st = TrainState::from_checkpoint(&Checkpoint::read(path)?)?;
            let fresh = TrainState::init(cfg)?;
            st.student.check_congruent(&fresh.student)?;
            st
        }
        None => TrainState::init(cfg)?,
    };
    if stage >= 2 && state.gram_teacher.is_none() {
        let dir = resume.unwrap().parent().unwrap_or(Path::new("."));
        let at = (cfg.gram_snapshot_frac * state.stage1_budget as f64).round() as u64;
        state.gram_teacher = Some(snapshot_gram_teacher(dir, at)?);
    }
    if stage == 1 && resume.is_none() {
        state.stage1_budget = cfg.budget(1);
    }
    state.stage = stage;
    std::fs::create_dir_all(out_dir)?;

    let budget = cfg.budget(stage);
    let sched = LrSchedule {
        base: cfg.lr(stage),
        total: budget,
        warmup_frac: cfg.warmup_frac,
    };
    let temp = TeacherTemp {
        start: cfg.teacher_temp_start,
        end: cfg.teacher_temp_end,
        warmup: (cfg.teacher_temp_warmup_frac * state.stage1_budget as f64).round() as u64,
    };
    let opt = AdamW {
        betas: cfg.betas,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let plan = cfg.plan(stage);
    let b = cfg.batch(stage);
    let every = ((cfg.checkpoint_frac * budget as f64).round() as u64).max(1);

    let trace_path = out_dir.join(format!("loss_trace_stage{stage}.csv"));
    let mut trace_file = std::io::BufWriter::new(std::fs::File::create(&trace_path)?);
    writeln!(trace_file, "{TRACE_HEADER}")?;
    let mut trace = Vec::with_capacity(budget as usize);
    let mut checkpoints = Vec::new();
    let mut empty_masks = 0;
    let mut teacher_grad_leaves = 0;

    for i in 0..budget {
        let rng_before = rng_hex(&state.rng);
        let lr = sched.at(i);
        let t_t = if stage == 1 { temp.at(state.iteration) } else { temp.end };
        let batch = assemble(data, &plan, b, &mut state.rng)?;
        let out = match step(cfg, stage, &mut state, &batch, b, lr, t_t, &opt) {
            Ok(o) if o.total.is_finite() => o,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                return Err(Error::NonFiniteLoss {
                    iteration: state.iteration + 1,
                    batch: state.iteration,
                    rng: rng_before,
                })
            }
            Err(e) => return Err(e),
        };
        teacher_grad_leaves += out.teacher_tracked;
        if out.ibot_empty {
            empty_masks += 1;
            log::warn!("iteration {}: empty iBOT mask", state.iteration + 1);
        }
        let mut mean = batch_mean(&out.teacher_cls_logits);
        prec_round(cfg.precision, &mut mean);
        update_center(&mut state.center_dino, &mean, cfg.center_momentum)?;
        if out.teacher_patch_masked.rows() > 0 {
            let mut mean = batch_mean(&out.teacher_patch_masked);
            prec_round(cfg.precision, &mut mean);
            update_center(&mut state.center_ibot, &mean, cfg.center_momentum)?;
        }
        prec_round(cfg.precision, &mut state.center_dino);
        prec_round(cfg.precision, &mut state.center_ibot);
        state.iteration += 1;

        let row = TraceRow {
            iteration: state.iteration,
            parts: out.parts,
            total: out.total,
            lr,
        };
        writeln!(trace_file, "{}", row.csv())?;
        trace.push(row);
        if (i + 1) % every == 0 || i + 1 == budget {
            let path = out_dir.join(checkpoint_name(state.iteration));
            state.to_checkpoint(cfg)?.write(&path)?;
            checkpoints.push(path);
        }
        if (i + 1) % every == 0 {
            log::info!(
                "stage {stage} iteration {} loss {:.4} (dino {:.4} ibot {:.4} koleo {:.4})",
                state.iteration,
                out.total,
                out.parts.dino,
                out.parts.ibot,
                out.parts.koleo
            );
        }
    }
    if budget == 0 {
        let path = out_dir.join(checkpoint_name(state.iteration));
        state.to_checkpoint(cfg)?.write(&path)?;
        checkpoints.push(path);
    }
    trace_file.flush()?;
    Ok(StageRun {
        state,
        trace,
        checkpoints,
        empty_masks,
        teacher_grad_leaves,
    })
}

fn prec_round(p: Precision, t: &mut Tensor) {
    p.round_slice(t.data_mut());
}

/// Loads the training split at the stage's resolution and runs it.
pub fn run_stage_from_manifest(
    cfg: &PretrainConfig,
    stage: u8,
    manifest: &Manifest,
    resume: Option<&Path>,
    out_dir: &Path,
) -> Result<StageRun> {
    let data = load_split(manifest, Split::Train, cfg.data_size(stage), cfg.window)?;
    run_stage(cfg, stage, &data, resume, out_dir)
}
