//! Command-line front end: argument parsing, config resolution, dispatch.

use crate::data::{generate_dataset, preprocess_slice, Manifest, SliceRecord, TARGET_SPACING_MM};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, Suite, TOLERANCE};
use crate::metrics::{cossim_map, foreground_patches, heat_raster, pca_map};
use crate::model::{patch_features, Encoder, ViTConfig};
use crate::tensor::{Graph, Precision};
use crate::train::{
    encoder_from_checkpoint, evaluate, finetune_from_manifest, load_model, model_checkpoint, run_stage_from_manifest,
    Checkpoint, FinetuneConfig, PretrainConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Serialize};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Name of the resolved-configuration record written next to every output.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Parser, Debug)]
#[command(name = "meddino", version, about = "Self-supervised ViT pretraining and segmentation on synthetic CT phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic phantom datasets.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Run one pretraining stage.
    Pretrain(PretrainArgs),
    /// Fine-tune encoder and decoder on labelled slices.
    Finetune(FinetuneArgs),
    /// DSC and NSD of a fine-tuned model on the validation split.
    Eval(EvalArgs),
    /// Render feature maps of one slice.
    Viz {
        kind: VizKind,
        #[command(flatten)]
        args: VizArgs,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        #[arg(long, value_parser = ["ops", "losses", "blocks"])]
        suite: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum PhantomCmd {
    Gen {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scaled budget of this stage.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Pretraining or model checkpoint to take the encoder from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Decode from the last block only.
    #[arg(long)]
    pub no_multiscale: bool,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VizKind {
    Pca,
    Cossim,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference patch for cosine maps; defaults to the centre patch.
    #[arg(long = "ref")]
    pub reference: Option<usize>,
    /// Side the slice is preprocessed to; defaults to the encoder's image size.
    #[arg(long)]
    pub size: Option<usize>,
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on usage or validation errors, 2 on runtime failures.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() { 1 } else { 2 }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { action: PhantomCmd::Gen { count, size, seed, out } } => {
            let m = generate_dataset(&out, count, size, seed)?;
            #[derive(Serialize)]
            struct Gen {
                count: usize,
                size: usize,
                seed: u64,
            }
            write_resolved(&Gen { count, size, seed }, &out)?;
            println!("wrote {} slices to {}", m.records.len(), out.display());
            Ok(())
        }
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Viz { kind, args } => viz(kind, args),
        Command::Gradcheck { suite } => gradcheck(suite.parse()?),
    }
}

/// Defaults, overlaid by the TOML file when given.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

pub fn write_resolved<C: Serialize>(cfg: &C, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join(RESOLVED_CONFIG), text)?;
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg: PretrainConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.iterations.is_some() {
        cfg.iterations = a.iterations;
    }
    cfg.validate()?;
    if a.stage >= 2 && a.resume.is_none() {
        return Err(Error::invalid(format!(
            "stage {} needs --resume CKPT: the gram teacher is an EMA snapshot of an earlier stage-1 run",
            a.stage
        )));
    }
    let manifest = Manifest::load(&a.data)?;
    write_resolved(&cfg, &a.out)?;
    let run = run_stage_from_manifest(&cfg, a.stage, &manifest, a.resume.as_deref(), &a.out)?;
    if let Some(last) = run.checkpoints.last() {
        println!("stage {} finished at iteration {}: {}", a.stage, run.state.iteration, last.display());
    }
    Ok(())
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg: FinetuneConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.no_multiscale {
        cfg.multiscale = false;
    }
    cfg.validate()?;
    let encoder = match &a.init {
        Some(p) => Some(encoder_from_checkpoint(&Checkpoint::read(p)?)?),
        None => None,
    };
    let manifest = Manifest::load(&a.data)?;
    write_resolved(&cfg, &a.out)?;
    let run = finetune_from_manifest(&cfg, &manifest, encoder.as_ref(), Some(&a.out.join("metrics.csv")))?;
    let path = a.out.join("model.md3c");
    model_checkpoint(&cfg, &run.params)?.write(&path)?;
    if let Some(last) = run.epochs.last() {
        println!("final val DSC {:.4}; model written to {}", last.val_dsc_mean, path.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, params) = load_model(&Checkpoint::read(&a.model)?)?;
    let manifest = Manifest::load(&a.data)?;
    let reports = evaluate(&cfg, &params, &manifest, a.tau)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    writeln!(f, "image,class,present,dsc,nsd,tau_mm")?;
    let (mut dsum, mut nsum, mut n) = (0.0, 0.0, 0usize);
    for (image, r) in &reports {
        for c in 0..r.dsc.len() {
            writeln!(f, "{image},{c},{},{},{},{}", r.present[c] as u8, r.dsc[c], r.nsd[c], r.tau_mm)?;
            if c > 0 && r.present[c] {
                dsum += r.dsc[c];
                nsum += r.nsd[c];
                n += 1;
            }
        }
    }
    f.flush()?;
    let n = n.max(1) as f64;
    println!("{} slices: mean foreground DSC {:.4}, NSD {:.4}", reports.len(), dsum / n, nsum / n);
    Ok(())
}

/// Encoder config and weights from a pretraining or fine-tuned checkpoint.
pub fn encoder_for_viz(ck: &Checkpoint) -> Result<(ViTConfig, Precision, crate::model::Params)> {
    let params = encoder_from_checkpoint(ck)?;
    if let Some(c) = ck.meta.get("config") {
        let cfg: PretrainConfig = serde_json::from_value(c.clone())?;
        return Ok((cfg.vit, cfg.precision, params));
    }
    let (cfg, _) = load_model(ck)?;
    Ok((cfg.vit, cfg.precision, params))
}

fn viz(kind: VizKind, a: VizArgs) -> Result<()> {
    let (vit, precision, params) = encoder_for_viz(&Checkpoint::read(&a.model)?)?;
    let size = a.size.unwrap_or(vit.image_size);
    let enc = Encoder::new(vit)?;
    let raw = SliceRecord::read(&a.image)?;
    let window = crate::data::Window::default();
    let rec = preprocess_slice(&raw, TARGET_SPACING_MM, size, window)?;
    let img = rec.pixels.clone().reshape(vec![1, size, size])?;
    let (feats, grid) = patch_features(&enc, &params, &img, precision)?;
    let p = grid.0 * grid.1;
    let feats = feats.reshape(vec![p, enc.cfg.dim])?;
    let raster = match kind {
        VizKind::Pca => {
            let fg = foreground_patches(&rec.pixels, enc.cfg.patch_size)?;
            pca_map(&feats, grid, &fg)?
        }
        VizKind::Cossim => {
            let mut g = Graph::inference(Precision::F64);
            let v = g.input(feats)?;
            let n = g.l2_normalize(v)?;
            let reference = a.reference.unwrap_or(grid.0 / 2 * grid.1 + grid.1 / 2);
            heat_raster(&cossim_map(g.value(n), grid, reference)?, grid)
        }
    };
    raster.upscale(enc.cfg.patch_size).write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck(suite: Suite) -> Result<()> {
    let results = run_suite(suite)?;
    let mut worst = 0.0f64;
    for (name, err) in &results {
        println!("{name:<40} max_rel_err {err:.3e}");
        worst = worst.max(*err);
    }
    if worst < TOLERANCE {
        println!("all {} cases below {TOLERANCE:e}", results.len());
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("max_rel_err {worst:.3e} exceeds {TOLERANCE:e}")))
    }
}
