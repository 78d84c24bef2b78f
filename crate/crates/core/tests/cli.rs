use clap::Parser;
use meddino::cli::{dispatch, run, Cli, RESOLVED_CONFIG};
use meddino::data::{CropPlan, Manifest, SizeRange, MANIFEST_NAME};
use meddino::model::{HeadConfig, ViTConfig};
use meddino::train::{checkpoint_name, FinetuneConfig, PretrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn call(args: &[&str]) -> i32 {
    dispatch(std::iter::once("meddino").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_vit(drop_path_rate: f64) -> ViTConfig {
    ViTConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        patch_size: 4,
        image_size: 16,
        drop_path_rate,
        layerscale_init: 1e-5,
        multiscale_indices: vec![0, 1],
    }
}

fn write_configs(dir: &Path) -> (PathBuf, PathBuf) {
    let plan = CropPlan {
        global_size: SizeRange::fixed(16),
        local_size: SizeRange::fixed(8),
        patch_size: 4,
        ..CropPlan::default()
    };
    let pre = PretrainConfig {
        vit: toy_vit(0.1),
        head: HeadConfig { hidden: 16, bottleneck: 8, prototypes: 12 },
        image_size: 16,
        batch_size: 2,
        iterations: Some(3),
        stage3_crops: CropPlan { global_size: SizeRange { min: 16, max: 24 }, local_size: SizeRange::fixed(8), ..plan.clone() },
        crops: plan,
        ..PretrainConfig::default()
    };
    let ft = FinetuneConfig {
        vit: toy_vit(0.2),
        image_size: 16,
        epochs: 1,
        batch_size: 2,
        steps_per_epoch: Some(2),
        ..FinetuneConfig::default()
    };
    let (a, b) = (dir.join("pretrain.toml"), dir.join("finetune.toml"));
    std::fs::write(&a, toml::to_string(&pre).unwrap()).unwrap();
    std::fs::write(&b, toml::to_string(&ft).unwrap()).unwrap();
    (a, b)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(call(&["--help"]), 0);
    assert_eq!(call(&["frobnicate"]), 1);
    assert_eq!(call(&["gradcheck", "--suite", "ops", "--bogus"]), 1);
    assert_eq!(call(&["gradcheck", "--suite", "everything"]), 1);
    assert_eq!(call(&["pretrain", "--stage", "4", "--data", "m", "--out", "o"]), 1);
}

#[test]
fn phantom_gen_with_zero_count_writes_an_empty_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("empty");
    assert_eq!(call(&["phantom", "gen", "--count", "0", "--out", s(&out)]), 0);
    let m = Manifest::load(&out.join(MANIFEST_NAME)).unwrap();
    assert!(m.records.is_empty());
    assert!(out.join(RESOLVED_CONFIG).exists());
}

#[test]
fn later_stages_require_a_resume_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(call(&["phantom", "gen", "--count", "2", "--size", "32", "--out", s(&data)]), 0);
    let manifest = data.join(MANIFEST_NAME);
    let out = d.path().join("o");
    let args = ["meddino", "pretrain", "--stage", "2", "--data", s(&manifest), "--out", s(&out)];
    let err = run(Cli::try_parse_from(args).unwrap()).unwrap_err();
    assert!(err.is_validation());
    assert!(err.to_string().contains("gram teacher"), "{err}");
    assert_eq!(call(&args[1..]), 1);
}

#[test]
fn unreadable_inputs_are_validation_errors() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.md3c");
    assert_eq!(call(&["eval", "--model", s(&missing), "--data", s(&missing), "--out", s(&d.path().join("x.csv"))]), 1);
    let junk = d.path().join("junk.md3c");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(call(&["viz", "pca", "--model", s(&junk), "--image", s(&missing), "--out", s(&d.path().join("x.ppm"))]), 1);
}

#[test]
fn unwritable_outputs_are_runtime_failures() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("plain");
    std::fs::write(&file, b"").unwrap();
    assert_eq!(call(&["phantom", "gen", "--count", "1", "--out", s(&file.join("sub"))]), 2);
}

#[test]
fn config_files_with_unknown_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(call(&["phantom", "gen", "--count", "2", "--size", "32", "--out", s(&data)]), 0);
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "learning_rate = 1.0\n").unwrap();
    let code = call(&["pretrain", "--stage", "1", "--config", s(&cfg), "--data", s(&data.join(MANIFEST_NAME)), "--out", s(&d.path().join("o"))]);
    assert_eq!(code, 1);
}

#[test]
fn gradcheck_losses_passes() {
    assert_eq!(call(&["gradcheck", "--suite", "losses"]), 0);
}

/// Every workflow end to end, twice, comparing all written files.
fn workflow(root: &Path, cfg: &(PathBuf, PathBuf)) -> BTreeMap<PathBuf, Vec<u8>> {
    let data = root.join("data");
    assert_eq!(call(&["phantom", "gen", "--count", "8", "--size", "48", "--seed", "4", "--out", s(&data)]), 0);
    let manifest = data.join(MANIFEST_NAME);
    let pre = root.join("pre");
    let base = ["--data", s(&manifest), "--config", s(&cfg.0), "--deterministic"];
    assert_eq!(call(&[&["pretrain", "--stage", "1", "--out", s(&pre)], &base[..]].concat()), 0);
    let ck = pre.join(checkpoint_name(3));
    assert!(ck.exists());
    let pre2 = root.join("pre2");
    assert_eq!(call(&[&["pretrain", "--stage", "2", "--iterations", "2", "--resume", s(&ck), "--out", s(&pre2)], &base[..]].concat()), 0);
    assert!(pre2.join("loss_trace_stage2.csv").exists());

    let ft = root.join("ft");
    assert_eq!(call(&["finetune", "--config", s(&cfg.1), "--data", s(&manifest), "--init", s(&ck), "--out", s(&ft), "--deterministic"]), 0);
    let model = ft.join("model.md3c");
    let metrics = std::fs::read_to_string(ft.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,val_dsc_mean,dsc_0"));
    assert_eq!(metrics.lines().count(), 2);

    let csv = root.join("eval.csv");
    assert_eq!(call(&["eval", "--model", s(&model), "--data", s(&manifest), "--tau", "2.0", "--out", s(&csv)]), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("image,class,present,dsc,nsd,tau_mm"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",2")));

    let slice = data.join("phantom_00000.md3s");
    assert_eq!(call(&["viz", "pca", "--model", s(&ck), "--image", s(&slice), "--out", s(&root.join("pca.ppm"))]), 0);
    assert_eq!(call(&["viz", "cossim", "--model", s(&model), "--image", s(&slice), "--out", s(&root.join("cos.pgm")), "--ref", "5"]), 0);
    assert!(std::fs::read(root.join("pca.ppm")).unwrap().starts_with(b"P6\n16 16\n255\n"));
    assert!(std::fs::read(root.join("cos.pgm")).unwrap().starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(call(&["viz", "cossim", "--model", s(&model), "--image", s(&slice), "--out", s(&root.join("x.pgm")), "--ref", "999"]), 1);
    tree(root)
}

#[test]
fn every_subcommand_is_reproducible() {
    let cfgdir = tempfile::tempdir().unwrap();
    let cfg = write_configs(cfgdir.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = workflow(a.path(), &cfg);
    let tb = workflow(b.path(), &cfg);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs between runs", k.display());
    }
}
