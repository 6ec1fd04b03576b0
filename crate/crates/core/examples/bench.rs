//! Desk benchmark for one training seed: global stage on every view, then the
//! axial local stage at several thresholds.
//!
//! `bench <data_dir> [seed] [epochs]`; generates the dataset if missing.

use std::path::PathBuf;
use std::time::Instant;

use attnage::branches::MultiViewMode;
use attnage::data::{generate_dataset, DatasetConfig};
use attnage::train::{evaluate_multiview, evaluate_view, load_all_views, train_combine, train_global, train_local, EpochReport};
use attnage::{BranchMode, Profile, Split, TrainConfig, Variant, View};

fn main() -> attnage::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());
    let epochs: usize = args.get(3).map_or(20, |s| s.parse().unwrap());
    let quick = args.get(4).is_some_and(|s| s == "quick");
    if !data.join("manifest.csv").exists() {
        generate_dataset(&DatasetConfig::new(300, 7, Profile::Desk), &data)?;
    }
    let views = load_all_views(&data)?;
    let t0 = Instant::now();
    let mut log = |r: &EpochReport| eprintln!("  {} epoch {:>3} loss {:.4} val R2 {:.4} [{:.0}s]", r.stage, r.epoch, r.train_loss, r.val_r2, t0.elapsed().as_secs_f64());
    let mut models = Vec::new();
    for d in views.iter().take(if quick { 1 } else { 3 }) {
        let mut cfg = TrainConfig::new(Profile::Desk, Variant::ResNet18, d.view, &data, "/tmp/unused");
        cfg.seed = seed;
        cfg.epochs = epochs;
        let (m, rep) = train_global::<f32>(&cfg, d, &mut log)?;
        let ev = evaluate_view(&m, &d.test, BranchMode::Global, 32)?;
        println!(
            "{} global: baseline {:.3} best epoch {} val {:.3} | test {} IoU {:.3} area {:.0} fallbacks {}",
            d.view, rep.baseline_val_r2, rep.best_epoch, rep.best_val_r2, ev.summary(), ev.mean_iou, ev.mean_crop_area, ev.fallbacks
        );
        models.push(m);
    }
    if !quick {
    let mv = evaluate_multiview(&models, None, &views, Split::Test, MultiViewMode::Average, BranchMode::Global, 32)?;
    println!("multiview average (global): {}", mv.summary());
    }
    let taus: &[f64] = if quick { &[0.05, 0.3] } else { &[0.05, 0.3, 0.9] };
    for &tau in taus {
        let mut cfg = TrainConfig::new(Profile::Desk, Variant::ResNet18, View::Axial, &data, "/tmp/unused");
        cfg.seed = seed;
        cfg.epochs = epochs;
        cfg.tau = tau;
        let mut m = models[0].clone();
        train_local(&cfg, &mut m, &views[0], &mut log)?;
        let ev = evaluate_view(&m, &views[0].test, BranchMode::Local, 32)?;
        println!("tau {tau}: local {} area {:.0} IoU {:.3}", ev.summary(), ev.mean_crop_area, ev.mean_iou);
        if tau == 0.3 {
            train_combine(&cfg, &mut m, &views[0], &mut |_| {})?;
            for mode in BranchMode::ALL {
                println!("  {mode}: {}", evaluate_view(&m, &views[0].test, mode, 32)?.summary());
            }
        }
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
