use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use attnage::branches::MultiViewMode;
use attnage::data::{generate_dataset, read_pgm, write_pgm, DatasetConfig};
use attnage::train::{
    evaluate, load_view_model, save_view_model, sweep_csv, threshold_sweep, train_stage, EpochReport, EvalTarget,
    ViewData,
};
use attnage::{BranchMode, Profile, Split, Stage, TrainConfig, Variant, View};
use clap::{Args, CommandFactory, Parser, Subcommand};

/// Attention-guided multi-view gestational-age regression on synthetic phantoms.
#[derive(Parser, Debug)]
#[command(name = "attnage", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset (PGM images plus manifest.csv).
    GenData(GenData),
    /// Run one training stage.
    Train(Train),
    /// Evaluate a trained model on one split.
    Eval(Eval),
    /// Export heatmap, crop and box for one image.
    Attend(Attend),
    /// Retrain the local stage for several thresholds and record test R2.
    Sweep(Sweep),
}

/// Optional `key=value` file whose keys are long flag names; flags given on
/// the command line win.
#[derive(Args, Debug)]
struct ConfigArg {
    /// Read default flag values from a key=value file [default: none]
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenData {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of subjects (three views each)
    #[arg(long, default_value_t = 300)]
    subjects: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// desk (96 px) or full (224 px)
    #[arg(long, default_value = "desk")]
    profile: Profile,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// desk or full
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// resnet18 or resnet50
    #[arg(long, default_value = "resnet18")]
    variant: Variant,
    /// axial, sagittal or coronal
    #[arg(long, default_value = "axial")]
    view: View,
    /// Default branch recorded in the checkpoint: global, local, average or fusion
    #[arg(long, default_value = "fusion")]
    branch: BranchMode,
    /// Attention threshold in (0, 1) [default: 0.3 for resnet18, 0.4 for resnet50]
    #[arg(long)]
    tau: Option<f64>,
    /// Fraction of active attention cells the crop box must cover, in (0, 1]
    #[arg(long, default_value_t = 0.95)]
    kappa: f64,
    /// Epochs for backbone stages
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Epochs for head-only stages
    #[arg(long, default_value_t = 100)]
    head_epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Training seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
}

impl ModelArgs {
    fn config(&self, out: &Path) -> TrainConfig {
        let mut c = TrainConfig::new(self.profile, self.variant, self.view, &self.data, out);
        c.branch = self.branch;
        c.tau = self.tau.unwrap_or(self.variant.default_tau());
        c.kappa = self.kappa;
        c.epochs = self.epochs;
        c.head_epochs = self.head_epochs;
        c.batch_size = self.batch_size;
        c.lr = self.lr;
        c.seed = self.seed;
        c
    }
}

#[derive(Args, Debug)]
struct Train {
    /// global, local, combine or multiview
    #[arg(long)]
    stage: Stage,
    #[command(flatten)]
    model: ModelArgs,
    /// Model directory; later stages read earlier checkpoints from here
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct Eval {
    /// Model directory
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: Split,
    /// axial, sagittal, coronal, or all for multi-view
    #[arg(long, default_value = "axial")]
    view: String,
    /// Branch to score [default: the one recorded at training]
    #[arg(long)]
    branch: Option<BranchMode>,
    /// Multi-view combiner when --view all: average or fusion
    #[arg(long, default_value = "average")]
    multiview: MultiViewMode,
    /// Write predictions.csv (age_true,age_pred) here [default: none]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct Attend {
    /// View checkpoint (.gagb) or model directory
    #[arg(long)]
    model: PathBuf,
    /// View to load when --model is a directory
    #[arg(long, default_value = "axial")]
    view: View,
    /// Input PGM image
    #[arg(long)]
    image: PathBuf,
    /// Prefix for heatmap.pgm, crop.pgm and box.txt
    #[arg(long)]
    out_prefix: String,
    /// Attention threshold [default: the checkpoint's]
    #[arg(long)]
    tau: Option<f64>,
    /// Box coverage [default: the checkpoint's]
    #[arg(long)]
    kappa: Option<f64>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args, Debug)]
struct Sweep {
    /// Directory holding the view's global-stage checkpoint
    #[arg(long)]
    from: PathBuf,
    /// Comma-separated thresholds
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3,0.4,0.5,0.7,0.9")]
    taus: Vec<f64>,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory for sweep.csv and per-threshold checkpoints
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

fn progress(r: &EpochReport) {
    eprintln!("{} epoch {:>3}: loss {:.4}  val R2 {:.4}", r.stage, r.epoch, r.train_loss, r.val_r2);
}

/// Splices `--key value` pairs from `--config FILE` in front of the
/// subcommand's own flags so explicit flags override them.
fn expand_config(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let pos = argv.iter().position(|a| a == "--config");
    let Some(pos) = pos else {
        if let Some(a) = argv.iter().find_map(|a| a.to_str().and_then(|s| s.strip_prefix("--config="))) {
            return splice(argv.clone(), Path::new(a));
        }
        return Ok(argv);
    };
    match argv.get(pos + 1) {
        Some(file) => {
            let file = PathBuf::from(file);
            splice(argv, &file)
        }
        None => Ok(argv),
    }
}

fn splice(argv: Vec<OsString>, file: &Path) -> anyhow::Result<Vec<OsString>> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading config {}", file.display()))?;
    let mut extra = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", file.display(), i + 1);
        };
        extra.push(OsString::from(format!("--{}", k.trim())));
        extra.push(OsString::from(v.trim()));
    }
    // argv[0] is the program, argv[1] the subcommand
    let at = 2.min(argv.len());
    let mut out = argv[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let manifest = generate_dataset(&DatasetConfig::new(a.subjects, a.seed, a.profile), &a.out)?;
            println!("wrote {} images and manifest.csv to {}", manifest.rows.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = a.model.config(&a.out);
            let reports = train_stage::<f32>(&cfg, a.stage, &mut progress)?;
            for r in reports {
                println!(
                    "{} stage: val R2 {:.4} at epoch {} (untrained {:.4})",
                    r.stage, r.best_val_r2, r.best_epoch, r.baseline_val_r2
                );
            }
        }
        Command::Eval(a) => {
            let target = if a.view == "all" {
                EvalTarget::MultiView(a.multiview, a.branch.unwrap_or(BranchMode::Global))
            } else {
                let view: View = a.view.parse()?;
                let branch = match a.branch {
                    Some(b) => b,
                    None => load_view_model::<f32>(&a.model, view)?.branch,
                };
                EvalTarget::View(view, branch)
            };
            let report = evaluate::<f32>(&a.model, &a.data, a.split, target, 32)?;
            if let Some(out) = &a.out {
                std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
                let path = out.join("predictions.csv");
                std::fs::write(&path, report.csv()).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{}", report.summary());
        }
        Command::Attend(a) => {
            let mut model = if a.model.is_dir() {
                load_view_model::<f32>(&a.model, a.view)?
            } else {
                let (params, meta) = attnage::checkpoint::load_checkpoint(&a.model)?;
                attnage::ViewModel::from_checkpoint(&params, &meta)?
            };
            if let Some(t) = a.tau {
                attnage::attention::check_tau(t)?;
                model.tau = t;
            }
            if let Some(k) = a.kappa {
                attnage::attention::check_kappa(k)?;
                model.kappa = k;
            }
            let image = read_pgm(&a.image)?;
            let att = model.attend(&image)?;
            let path = |name: &str| PathBuf::from(format!("{}{name}", a.out_prefix));
            if let Some(dir) = path("heatmap.pgm").parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            write_pgm(&att.heatmap, &path("heatmap.pgm"))?;
            write_pgm(&att.crop, &path("crop.pgm"))?;
            std::fs::write(path("box.txt"), format!("{}\n", att.image_box))?;
            println!("box {}{}", att.image_box, if att.fallback { " (fallback: full image)" } else { "" });
        }
        Command::Sweep(a) => {
            let cfg = a.model.config(&a.out);
            cfg.validate()?;
            let base = load_view_model::<f32>(&a.from, cfg.view)?;
            let data = ViewData::load(&cfg.data_dir, cfg.view)?;
            let out = a.out.clone();
            let points = threshold_sweep(&cfg, &base, &data, &a.taus, &mut progress, &mut |m| {
                save_view_model(&out.join(format!("tau_{}", m.tau)), m)
            })?;
            for p in &points {
                println!(
                    "tau {}: test R2 {:.4}  mean crop area {:.0}  mean IoU {:.3}",
                    p.tau, p.r2_test, p.mean_crop_area, p.mean_iou
                );
            }
            std::fs::create_dir_all(&a.out)?;
            std::fs::write(a.out.join("sweep.csv"), sweep_csv(&points))?;
        }
    }
    Ok(())
}

/// Usage line of the named subcommand, or of the program.
fn synopsis(sub: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match sub.and_then(|name| cmd.find_subcommand_mut(name)) {
        Some(sc) => sc.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let argv = match expand_config(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if usage && !e.to_string().contains("Usage:") {
                eprintln!("\n{}", synopsis(argv.get(1).and_then(|s| s.to_str())));
            }
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
