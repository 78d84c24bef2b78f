//! Short fine-tune, then per-class DSC and NSD on the validation split at
//! two surface tolerances.

use meddino::data::generate_dataset;
use meddino::metrics::MetricReport;
use meddino::train::{evaluate, finetune_from_manifest, FinetuneConfig};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let manifest = generate_dataset(dir.path(), 100, 96, 3)?;
    let cfg = FinetuneConfig { epochs: 8, steps_per_epoch: Some(20), ..FinetuneConfig::default() };
    let run = finetune_from_manifest(&cfg, &manifest, None, None)?;
    println!("val DSC after {} epochs: {:.3}", cfg.epochs, run.epochs.last().map_or(0.0, |e| e.val_dsc_mean));

    for tau in [1.0, 3.0] {
        let reports = evaluate(&cfg, &run.params, &manifest, tau)?;
        let k = cfg.num_classes;
        let (mut dsc, mut nsd, mut n) = (vec![0.0; k], vec![0.0; k], vec![0usize; k]);
        for (_, r) in &reports {
            for c in 0..k {
                if r.present[c] {
                    dsc[c] += r.dsc[c];
                    nsd[c] += r.nsd[c];
                    n[c] += 1;
                }
            }
        }
        println!("tau {tau} mm over {} slices", reports.len());
        for c in 1..k {
            if n[c] > 0 {
                println!("  class {c}: DSC {:.3}  NSD {:.3}  ({} slices)", dsc[c] / n[c] as f64, nsd[c] / n[c] as f64, n[c]);
            }
        }
        let first = &reports[0].1;
        println!("  {}: mean foreground NSD {:.3}", reports[0].0, MetricReport::mean_foreground(&first.nsd, &first.present));
    }
    Ok(())
}
