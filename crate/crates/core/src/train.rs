//! Staged training, evaluation and the attention-threshold sweep.
//!
//! Stages run in order: `global` trains the full-image backbone and head,
//! `local` freezes it and trains a second backbone on attention crops,
//! `combine` freezes both and fits the average and fusion heads, and
//! `multiview` fits one fusion head per branch mode over all three views.
//! Targets are z-scored ages; every reported metric is in days.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{check_kappa, check_tau, BBox};
use crate::backbone::{Backbone, BackboneConfig, Profile, RegressionHead, Variant};
use crate::branches::{
    apply_head, branch_features, multiview_combine, multiview_features, stack_images, BranchMode, MultiViewMode,
    ViewFeatures, ViewModel, ViewPrediction,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use crate::data::{Manifest, Split, View, ViewSet};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::grid::Grid;
use crate::kernels::Mode;
use crate::metrics::{iou, mae, r2_score};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input and target normalization, fitted on the train split only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub age_mean: f64,
    pub age_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl NormStats {
    pub fn fit(images: &[Grid<u8>], ages: &[f64]) -> Result<Self> {
        if images.is_empty() || ages.len() < 2 {
            return Err(Error::Data("normalization needs at least two training samples".into()));
        }
        let (pixel_mean, pixel_std) = mean_std(images.iter().flat_map(|g| g.data().iter().map(|&v| v as f64)));
        let (age_mean, age_std) = mean_std(ages.iter().copied());
        let stats = NormStats {
            pixel_mean,
            pixel_std,
            age_mean,
            age_std,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.pixel_mean, self.pixel_std, self.age_mean, self.age_std].iter().all(|v| v.is_finite());
        if !ok || self.pixel_std <= 0.0 || self.age_std <= 0.0 {
            return Err(Error::Data(format!("degenerate normalization {self:?}")));
        }
        Ok(())
    }

    pub fn z(&self, days: f64) -> f64 {
        (days - self.age_mean) / self.age_std
    }

    pub fn days(&self, z: f64) -> f64 {
        z * self.age_std + self.age_mean
    }

    pub fn image<T: Scalar>(&self, img: &Grid<u8>) -> Grid<T> {
        img.map(|v| T::from_f64_lossy((v as f64 - self.pixel_mean) / self.pixel_std))
    }

    pub fn write_meta(&self, meta: &mut Metadata) {
        meta.set("pixel_mean", self.pixel_mean);
        meta.set("pixel_std", self.pixel_std);
        meta.set("age_mean", self.age_mean);
        meta.set("age_std", self.age_std);
    }

    pub fn read_meta(meta: &Metadata) -> Result<Self> {
        let s = NormStats {
            pixel_mean: meta.parse("pixel_mean")?,
            pixel_std: meta.parse("pixel_std")?,
            age_mean: meta.parse("age_mean")?,
            age_std: meta.parse("age_std")?,
        };
        s.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Global,
    Local,
    Combine,
    Multiview,
}

impl Stage {
    /// Leading element of the seed path for everything random in this stage.
    /// The backbone stages initialize view `v` from `derive_seed(seed, [s, v])`
    /// and its head from `derive_seed(seed, [s, v, 1])`.
    pub fn stream(self) -> u64 {
        match self {
            Stage::Global => 1,
            Stage::Local => 2,
            Stage::Combine => 3,
            Stage::Multiview => 4,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Global => "global",
            Stage::Local => "local",
            Stage::Combine => "combine",
            Stage::Multiview => "multiview",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Stage::Global),
            "local" => Ok(Stage::Local),
            "combine" => Ok(Stage::Combine),
            "multiview" => Ok(Stage::Multiview),
            other => Err(Error::Config(format!("unknown stage {other:?} (global|local|combine|multiview)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub variant: Variant,
    pub view: View,
    pub branch: BranchMode,
    pub tau: f64,
    pub kappa: f64,
    /// Epochs for the backbone stages.
    pub epochs: usize,
    /// Epochs for the head-only stages (features are precomputed, so these are cheap).
    pub head_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(profile: Profile, variant: Variant, view: View, data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            profile,
            variant,
            view,
            branch: BranchMode::Fusion,
            tau: variant.default_tau(),
            kappa: crate::attention::DEFAULT_KAPPA,
            epochs: 20,
            head_epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        check_kappa(self.kappa)?;
        if self.epochs == 0 || self.head_epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2 (batch norm needs two samples)".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Cosine-decayed learning rate for 1-based `epoch` of `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    let t = (epoch - 1) as f64 / total as f64;
    base * 0.5 * (1.0 + libm::cos(std::f64::consts::PI * t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Validation R² of the untrained model.
    pub baseline_val_r2: f64,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_r2: f64,
}

/// Receives one report per finished epoch.
pub type Observer<'a> = &'a mut dyn FnMut(&EpochReport);

/// Train, validation and test slices of one view, as stored on disk.
#[derive(Clone, Debug)]
pub struct ViewData {
    pub view: View,
    pub train: ViewSet,
    pub val: ViewSet,
    pub test: ViewSet,
}

impl ViewData {
    pub fn load(data_dir: &Path, view: View) -> Result<Self> {
        let manifest = Manifest::read(data_dir)?;
        Self::from_manifest(data_dir, &manifest, view)
    }

    pub fn from_manifest(data_dir: &Path, manifest: &Manifest, view: View) -> Result<Self> {
        let load = |split| ViewSet::load(data_dir, manifest, view, split);
        let d = ViewData {
            view,
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        };
        for set in [&d.train, &d.val] {
            if set.len() < 2 {
                return Err(Error::Data(format!("{view} {} split has {} samples, need 2", set.split, set.len())));
            }
        }
        Ok(d)
    }

    pub fn split(&self, split: Split) -> &ViewSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn norm_stats(&self) -> Result<NormStats> {
        NormStats::fit(&self.train.images, &self.train.ages)
    }
}

/// Loads the three views of a dataset, checking they cover the same subjects.
pub fn load_all_views(data_dir: &Path) -> Result<Vec<ViewData>> {
    let manifest = Manifest::read(data_dir)?;
    let all: Vec<ViewData> = View::ALL
        .iter()
        .map(|&v| ViewData::from_manifest(data_dir, &manifest, v))
        .collect::<Result<_>>()?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let ids = &all[0].split(split).ids;
        if all.iter().any(|d| &d.split(split).ids != ids) {
            return Err(Error::Data(format!("views cover different subjects in the {split} split")));
        }
    }
    Ok(all)
}

fn check_images(set: &ViewSet, size: usize) -> Result<()> {
    match set.images.iter().find(|g| g.rows() != size || g.cols() != size) {
        Some(g) => Err(Error::Config(format!(
            "data has {}x{} images but the model expects {size}x{size} (profile mismatch)",
            g.rows(),
            g.cols()
        ))),
        None => Ok(()),
    }
}

fn normalized<T: Scalar>(set: &ViewSet, norm: &NormStats) -> Vec<Grid<T>> {
    set.images.iter().map(|g| norm.image(g)).collect()
}

/// Eval-mode normalized predictions of a backbone and head.
fn predict_z<T: Scalar>(backbone: &Backbone<T>, head: &RegressionHead<T>, images: &[Grid<T>], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(stack_images(chunk)?);
        let f = backbone.forward(&mut g, x, Mode::Eval, false)?;
        let (y, _) = head.forward(&mut g, f.pooled, false)?;
        out.extend(g.value(y).to_f64());
    }
    Ok(out)
}

fn r2_days(z: &[f64], days: &[f64], norm: &NormStats) -> Result<f64> {
    let pred: Vec<f64> = z.iter().map(|&v| norm.days(v)).collect();
    r2_score(days, &pred)
}

fn epoch_order(len: usize, seed: u64, stream: &[u64], epoch: usize) -> Vec<usize> {
    let mut path = stream.to_vec();
    path.push(epoch as u64);
    let mut idx: Vec<usize> = (0..len).collect();
    SplitMix64::derived(seed, &path).shuffle(&mut idx);
    idx
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    // a trailing batch of one cannot be batch-normalized; it is skipped
    order.chunks(size).filter(|c| c.len() >= 2)
}

fn non_finite(stage: Stage, epoch: usize, batch: usize, loss: f64) -> Error {
    Error::NonFinite(format!("{stage} stage loss {loss} at epoch {epoch}, batch {batch}; lower the learning rate"))
}

struct Best<T> {
    epoch: usize,
    r2: f64,
    state: T,
}

/// Trains `backbone` and `head` jointly with Adam on mean squared z-error,
/// returning them at their best validation epoch.
#[allow(clippy::too_many_arguments)]
fn fit_backbone<T: Scalar>(
    stage: Stage,
    backbone: &mut Backbone<T>,
    head: &mut RegressionHead<T>,
    train: &[Grid<T>],
    train_z: &[f64],
    val: &[Grid<T>],
    val_days: &[f64],
    norm: &NormStats,
    cfg: &TrainConfig,
    stream: &[u64],
    observer: Observer<'_>,
) -> Result<StageReport> {
    let eval_batch = 2 * cfg.batch_size;
    let baseline = r2_days(&predict_z(backbone, head, val, eval_batch)?, val_days, norm)?;
    let mut adam = Adam::new(cfg.adam(), backbone.params().tensors().chain(head.params().tensors()));
    let mut best: Option<Best<(Backbone<T>, RegressionHead<T>)>> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        adam.config.lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let order = epoch_order(train.len(), cfg.seed, stream, epoch);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, batch) in batches(&order, cfg.batch_size).enumerate() {
            let imgs: Vec<Grid<T>> = batch.iter().map(|&i| train[i].clone()).collect();
            let target = Tensor::new(vec![batch.len()], batch.iter().map(|&i| T::from_f64_lossy(train_z[i])).collect())?;
            let mut g = Graph::new();
            let x = g.constant(stack_images(&imgs)?);
            let out = backbone.forward(&mut g, x, Mode::Train, true)?;
            let (y, head_vars) = head.forward(&mut g, out.pooled, true)?;
            let t = g.constant(target);
            let loss = g.mse_loss(y, t)?;
            let lv = g.value(loss).data()[0].to_f64_lossy();
            if !lv.is_finite() {
                return Err(non_finite(stage, epoch, bi, lv));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = out.params.iter().chain(&head_vars).map(|&v| g.grad_or_zeros(v)).collect();
            adam.step(backbone.params_mut().tensors_mut().chain(head.params_mut().tensors_mut()).zip(&grads))?;
            backbone.set_running(out.running);
            loss_sum += lv * batch.len() as f64;
            seen += batch.len();
        }
        let val_r2 = r2_days(&predict_z(backbone, head, val, eval_batch)?, val_days, norm)?;
        let report = EpochReport {
            stage,
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_r2,
        };
        observer(&report);
        epochs.push(report);
        if best.as_ref().map_or(true, |b| val_r2 > b.r2) {
            best = Some(Best {
                epoch,
                r2: val_r2,
                state: (backbone.clone(), head.clone()),
            });
        }
    }
    let best = best.expect("at least one epoch");
    (*backbone, *head) = best.state;
    Ok(StageReport {
        stage,
        baseline_val_r2: baseline,
        epochs,
        best_epoch: best.epoch,
        best_val_r2: best.r2,
    })
}

/// Trains a linear head on fixed `[N, D]` features.
#[allow(clippy::too_many_arguments)]
fn fit_head<T: Scalar>(
    stage: Stage,
    head: &mut RegressionHead<T>,
    train: &Tensor<T>,
    train_z: &[f64],
    val: &Tensor<T>,
    val_days: &[f64],
    norm: &NormStats,
    cfg: &TrainConfig,
    stream: &[u64],
    observer: Observer<'_>,
) -> Result<StageReport> {
    let n = train.dims()[0];
    let d = train.dims()[1];
    let baseline = r2_days(&apply_head(head, val)?, val_days, norm)?;
    let mut adam = Adam::new(cfg.adam(), head.params().tensors());
    let mut best: Option<Best<RegressionHead<T>>> = None;
    let mut epochs = Vec::with_capacity(cfg.head_epochs);
    for epoch in 1..=cfg.head_epochs {
        adam.config.lr = cosine_lr(cfg.lr, epoch, cfg.head_epochs);
        let order = epoch_order(n, cfg.seed, stream, epoch);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, batch) in batches(&order, cfg.batch_size).enumerate() {
            let mut rows = Vec::with_capacity(batch.len() * d);
            for &i in batch {
                rows.extend_from_slice(train.outer(i));
            }
            let target = Tensor::new(vec![batch.len()], batch.iter().map(|&i| T::from_f64_lossy(train_z[i])).collect())?;
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![batch.len(), d], rows)?);
            let (y, vars) = head.forward(&mut g, x, true)?;
            let t = g.constant(target);
            let loss = g.mse_loss(y, t)?;
            let lv = g.value(loss).data()[0].to_f64_lossy();
            if !lv.is_finite() {
                return Err(non_finite(stage, epoch, bi, lv));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
            adam.step(head.params_mut().tensors_mut().zip(&grads))?;
            loss_sum += lv * batch.len() as f64;
            seen += batch.len();
        }
        let val_r2 = r2_days(&apply_head(head, val)?, val_days, norm)?;
        let report = EpochReport {
            stage,
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_r2,
        };
        observer(&report);
        epochs.push(report);
        if best.as_ref().map_or(true, |b| val_r2 > b.r2) {
            best = Some(Best {
                epoch,
                r2: val_r2,
                state: head.clone(),
            });
        }
    }
    let best = best.expect("at least one epoch");
    *head = best.state;
    Ok(StageReport {
        stage,
        baseline_val_r2: baseline,
        epochs,
        best_epoch: best.epoch,
        best_val_r2: best.r2,
    })
}

/// Stage `global`: a fresh view model trained on full images.
pub fn train_global<T: Scalar>(cfg: &TrainConfig, data: &ViewData, observer: Observer<'_>) -> Result<(ViewModel<T>, StageReport)> {
    cfg.validate()?;
    let view = cfg.view.index() as u64;
    let bcfg = BackboneConfig::for_profile(cfg.profile, cfg.variant);
    check_images(&data.train, bcfg.input_size)?;
    check_images(&data.val, bcfg.input_size)?;
    let norm = data.norm_stats()?;
    let mut global = Backbone::new(bcfg, derive_seed(cfg.seed, &[Stage::Global.stream(), view]))?;
    let mut head = RegressionHead::new(global.feature_dim(), derive_seed(cfg.seed, &[Stage::Global.stream(), view, 1]));
    let train: Vec<Grid<T>> = normalized(&data.train, &norm);
    let val: Vec<Grid<T>> = normalized(&data.val, &norm);
    let z: Vec<f64> = data.train.ages.iter().map(|&a| norm.z(a)).collect();
    let report = fit_backbone(
        Stage::Global,
        &mut global,
        &mut head,
        &train,
        &z,
        &val,
        &data.val.ages,
        &norm,
        cfg,
        &[Stage::Global.stream(), view],
        observer,
    )?;
    let model = ViewModel {
        view: cfg.view,
        profile: cfg.profile,
        branch: cfg.branch,
        tau: cfg.tau,
        kappa: cfg.kappa,
        norm,
        seed: cfg.seed,
        global,
        global_head: head,
        local: None,
        local_head: None,
        average_head: None,
        fusion_head: None,
    };
    Ok((model, report))
}

/// Attention crops of every image in `set`, from the frozen global backbone.
fn crops_of<T: Scalar>(model: &ViewModel<T>, images: &[Grid<T>], batch: usize) -> Result<(Vec<Grid<T>>, Vec<BBox>)> {
    let mut crops = Vec::with_capacity(images.len());
    let mut boxes = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(stack_images(chunk)?);
        let out = model.global.forward(&mut g, x, Mode::Eval, false)?;
        let (c, b, _) = model.crops(chunk, g.value(out.features))?;
        crops.extend(c);
        boxes.extend(b);
    }
    Ok((crops, boxes))
}

/// Stage `local`: trains the crop branch with `cfg.tau` and `cfg.kappa`;
/// the global backbone and head are untouched.
pub fn train_local<T: Scalar>(cfg: &TrainConfig, model: &mut ViewModel<T>, data: &ViewData, observer: Observer<'_>) -> Result<StageReport> {
    cfg.validate()?;
    check_model(cfg, model)?;
    model.tau = cfg.tau;
    model.kappa = cfg.kappa;
    let view = cfg.view.index() as u64;
    let norm = model.norm;
    let batch = 2 * cfg.batch_size;
    let (train, _) = crops_of(model, &normalized(&data.train, &norm), batch)?;
    let (val, _) = crops_of(model, &normalized(&data.val, &norm), batch)?;
    let mut local = Backbone::new(model.global.config().clone(), derive_seed(cfg.seed, &[Stage::Local.stream(), view]))?;
    let mut head = RegressionHead::new(local.feature_dim(), derive_seed(cfg.seed, &[Stage::Local.stream(), view, 1]));
    let z: Vec<f64> = data.train.ages.iter().map(|&a| norm.z(a)).collect();
    let report = fit_backbone(
        Stage::Local,
        &mut local,
        &mut head,
        &train,
        &z,
        &val,
        &data.val.ages,
        &norm,
        cfg,
        &[Stage::Local.stream(), view],
        observer,
    )?;
    model.local = Some(local);
    model.local_head = Some(head);
    // heads fitted on the previous local branch no longer apply
    model.average_head = None;
    model.fusion_head = None;
    Ok(report)
}

/// Stage `combine`: fits the average head from scratch and the fusion head
/// starting from the mean of the global and local heads.
pub fn train_combine<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut ViewModel<T>,
    data: &ViewData,
    observer: Observer<'_>,
) -> Result<(StageReport, StageReport)> {
    cfg.validate()?;
    check_model(cfg, model)?;
    if model.local.is_none() {
        return Err(Error::Config(format!("{} model has no local stage; run --stage local first", model.view)));
    }
    let norm = model.norm;
    let batch = 2 * cfg.batch_size;
    let ft = model.features(&normalized(&data.train, &norm), batch)?;
    let fv = model.features(&normalized(&data.val, &norm), batch)?;
    let z: Vec<f64> = data.train.ages.iter().map(|&a| norm.z(a)).collect();
    let view = cfg.view.index() as u64;
    let d = model.feature_dim();

    let mut average = RegressionHead::new(d, derive_seed(cfg.seed, &[Stage::Combine.stream(), view, 1]));
    let avg_report = fit_head(
        Stage::Combine,
        &mut average,
        &branch_features(BranchMode::Average, &ft.global, ft.local.as_ref())?,
        &z,
        &branch_features(BranchMode::Average, &fv.global, fv.local.as_ref())?,
        &data.val.ages,
        &norm,
        cfg,
        &[Stage::Combine.stream(), view, 1],
        observer,
    )?;

    let mut fusion = stacked_head(&[&model.global_head, model.local_head.as_ref().expect("local head")], 0.5)?;
    let fusion_report = fit_head(
        Stage::Combine,
        &mut fusion,
        &branch_features(BranchMode::Fusion, &ft.global, ft.local.as_ref())?,
        &z,
        &branch_features(BranchMode::Fusion, &fv.global, fv.local.as_ref())?,
        &data.val.ages,
        &norm,
        cfg,
        &[Stage::Combine.stream(), view, 2],
        observer,
    )?;
    model.average_head = Some(average);
    model.fusion_head = Some(fusion);
    Ok((avg_report, fusion_report))
}

/// Head over concatenated inputs whose output is `scale * sum` of the given heads.
pub fn stacked_head<T: Scalar>(heads: &[&RegressionHead<T>], scale: f64) -> Result<RegressionHead<T>> {
    let s = T::from_f64_lossy(scale);
    let mut w = Vec::new();
    let mut b = T::zero();
    for h in heads {
        w.extend(h.params().tensor(0).data().iter().map(|&v| v * s));
        b += h.params().tensor(1).data()[0] * s;
    }
    RegressionHead::from_weights(Tensor::new(vec![1, w.len()], w)?, b)
}

fn check_model<T: Scalar>(cfg: &TrainConfig, model: &ViewModel<T>) -> Result<()> {
    if model.view != cfg.view || model.profile != cfg.profile || model.variant() != cfg.variant {
        return Err(Error::Config(format!(
            "checkpoint is {} {} {}, config asks for {} {} {}",
            model.view,
            model.profile,
            model.variant(),
            cfg.view,
            cfg.profile,
            cfg.variant
        )));
    }
    Ok(())
}

/// Multi-view fusion heads, one per branch mode trained in every view.
#[derive(Clone, Debug)]
pub struct MultiViewModel<T> {
    pub profile: Profile,
    pub variant: Variant,
    pub norm: NormStats,
    pub seed: u64,
    pub heads: Vec<(BranchMode, RegressionHead<T>)>,
}

impl<T: Scalar> MultiViewModel<T> {
    pub fn head(&self, mode: BranchMode) -> Result<&RegressionHead<T>> {
        self.heads
            .iter()
            .find(|(m, _)| *m == mode)
            .map(|(_, h)| h)
            .ok_or_else(|| Error::Config(format!("no multi-view fusion head for the {mode} branch")))
    }

    pub fn to_checkpoint(&self) -> Result<(ParamSet<T>, Metadata)> {
        let mut params = ParamSet::new();
        for (mode, h) in &self.heads {
            h.params().export(&format!("{mode}."), &mut params)?;
        }
        let mut meta = Metadata::new();
        meta.set("kind", "multiview");
        meta.set("profile", self.profile);
        meta.set("variant", self.variant);
        meta.set(
            "branches",
            self.heads.iter().map(|(m, _)| m.to_string()).collect::<Vec<_>>().join(","),
        );
        self.norm.write_meta(&mut meta);
        meta.set("seed", self.seed);
        Ok((params, meta))
    }

    pub fn from_checkpoint(params: &ParamSet<T>, meta: &Metadata) -> Result<Self> {
        if meta.get("kind") != Some("multiview") {
            return Err(Error::Checkpoint("not a multi-view checkpoint".into()));
        }
        let mut heads = Vec::new();
        for name in meta.require("branches")?.split(',').filter(|s| !s.is_empty()) {
            let mode: BranchMode = name.parse()?;
            let w = params
                .get(&format!("{mode}.weight"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {mode}.weight")))?;
            let mut h = RegressionHead::new(w.dims().get(1).copied().unwrap_or(1), 0);
            h.params_mut().import(&format!("{mode}."), params)?;
            heads.push((mode, h));
        }
        Ok(MultiViewModel {
            profile: meta.parse("profile")?,
            variant: meta.parse("variant")?,
            norm: NormStats::read_meta(meta)?,
            seed: meta.parse("seed")?,
            heads,
        })
    }
}

/// Branch features of every view model on one split, in canonical view order.
fn per_view_inputs<T: Scalar>(
    models: &[ViewModel<T>],
    data: &[ViewData],
    split: Split,
    batch: usize,
) -> Result<Vec<ViewFeatures<T>>> {
    models
        .iter()
        .zip(data)
        .map(|(m, d)| m.features(&normalized(d.split(split), &m.norm), batch))
        .collect()
}

fn ordered<'a, T>(models: &'a [ViewModel<T>], data: &'a [ViewData]) -> Result<(Vec<&'a ViewModel<T>>, Vec<&'a ViewData>)> {
    let mut ms = Vec::new();
    let mut ds = Vec::new();
    for v in View::ALL {
        ms.push(
            models
                .iter()
                .find(|m| m.view == v)
                .ok_or_else(|| Error::Config(format!("multi-view needs a {v} model")))?,
        );
        ds.push(
            data.iter()
                .find(|d| d.view == v)
                .ok_or_else(|| Error::Config(format!("multi-view needs {v} data")))?,
        );
    }
    Ok((ms, ds))
}

/// Stage `multiview`: one fusion head per branch mode that all three view
/// models support, warm-started at the average of the per-view heads.
pub fn train_multiview<T: Scalar>(
    cfg: &TrainConfig,
    models: &[ViewModel<T>],
    data: &[ViewData],
    observer: Observer<'_>,
) -> Result<(MultiViewModel<T>, Vec<StageReport>)> {
    cfg.validate()?;
    let (ms, ds) = ordered(models, data)?;
    let (ms, ds): (Vec<ViewModel<T>>, Vec<ViewData>) = (ms.into_iter().cloned().collect(), ds.into_iter().cloned().collect());
    let profile = ms[0].profile;
    let variant = ms[0].variant();
    if ms.iter().any(|m| m.profile != profile || m.variant() != variant) {
        return Err(Error::Config("view models disagree on profile or variant".into()));
    }
    let norm = ms[0].norm;
    let batch = 2 * cfg.batch_size;
    let ft = per_view_inputs(&ms, &ds, Split::Train, batch)?;
    let fv = per_view_inputs(&ms, &ds, Split::Val, batch)?;
    let z: Vec<f64> = ds[0].train.ages.iter().map(|&a| norm.z(a)).collect();
    let mut heads = Vec::new();
    let mut reports = Vec::new();
    for (k, mode) in BranchMode::ALL.into_iter().enumerate() {
        if ms.iter().any(|m| m.head(mode).is_err()) {
            continue;
        }
        let inputs = |feats: &[ViewFeatures<T>]| -> Result<Tensor<T>> {
            let pv: Vec<ViewPrediction<T>> = ms
                .iter()
                .zip(feats)
                .map(|(m, f)| {
                    Ok(ViewPrediction {
                        view: m.view,
                        days: Vec::new(),
                        features: branch_features(mode, &f.global, f.local.as_ref())?,
                    })
                })
                .collect::<Result<_>>()?;
            multiview_features(&pv)
        };
        let per_view_heads: Vec<&RegressionHead<T>> = ms.iter().map(|m| m.head(mode)).collect::<Result<_>>()?;
        let mut head = stacked_head(&per_view_heads, 1.0 / 3.0)?;
        let report = fit_head(
            Stage::Multiview,
            &mut head,
            &inputs(&ft)?,
            &z,
            &inputs(&fv)?,
            &ds[0].val.ages,
            &norm,
            cfg,
            &[Stage::Multiview.stream(), k as u64],
            observer,
        )?;
        heads.push((mode, head));
        reports.push(report);
    }
    if heads.is_empty() {
        return Err(Error::Config("no branch mode is trained in all three views".into()));
    }
    let model = MultiViewModel {
        profile,
        variant,
        norm,
        seed: cfg.seed,
        heads,
    };
    Ok((model, reports))
}

/// Checkpoint path of a view model inside a model directory.
pub fn view_checkpoint(dir: &Path, view: View) -> PathBuf {
    dir.join(format!("{view}.gagb"))
}

pub fn multiview_checkpoint(dir: &Path) -> PathBuf {
    dir.join("multiview.gagb")
}

pub fn load_view_model<T: Scalar>(dir: &Path, view: View) -> Result<ViewModel<T>> {
    let path = view_checkpoint(dir, view);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint {}; train the global stage for the {view} view first",
            path.display()
        )));
    }
    let (params, meta) = load_checkpoint(&path)?;
    let model = ViewModel::from_checkpoint(&params, &meta)?;
    if model.view != view {
        return Err(Error::Checkpoint(format!("{} holds the {} view", path.display(), model.view)));
    }
    Ok(model)
}

pub fn save_view_model<T: Scalar>(dir: &Path, model: &ViewModel<T>) -> Result<()> {
    let (params, meta) = model.to_checkpoint()?;
    save_checkpoint(&view_checkpoint(dir, model.view), &params, &meta)
}

pub fn load_multiview_model<T: Scalar>(dir: &Path) -> Result<MultiViewModel<T>> {
    let path = multiview_checkpoint(dir);
    if !path.exists() {
        return Err(Error::Config(format!("missing checkpoint {}; run --stage multiview first", path.display())));
    }
    let (params, meta) = load_checkpoint(&path)?;
    MultiViewModel::from_checkpoint(&params, &meta)
}

/// Runs one stage end to end against `cfg.data_dir`, reading prerequisites
/// from and writing results to `cfg.out_dir`.
pub fn train_stage<T: Scalar>(cfg: &TrainConfig, stage: Stage, observer: Observer<'_>) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    match stage {
        Stage::Global => {
            let data = ViewData::load(&cfg.data_dir, cfg.view)?;
            let (model, report) = train_global::<T>(cfg, &data, observer)?;
            save_view_model(dir, &model)?;
            Ok(vec![report])
        }
        Stage::Local => {
            let mut model = load_view_model::<T>(dir, cfg.view)?;
            let data = ViewData::load(&cfg.data_dir, cfg.view)?;
            let report = train_local(cfg, &mut model, &data, observer)?;
            save_view_model(dir, &model)?;
            Ok(vec![report])
        }
        Stage::Combine => {
            let mut model = load_view_model::<T>(dir, cfg.view)?;
            let data = ViewData::load(&cfg.data_dir, cfg.view)?;
            let (a, f) = train_combine(cfg, &mut model, &data, observer)?;
            save_view_model(dir, &model)?;
            Ok(vec![a, f])
        }
        Stage::Multiview => {
            let models: Vec<ViewModel<T>> = View::ALL.iter().map(|&v| load_view_model(dir, v)).collect::<Result<_>>()?;
            let data = load_all_views(&cfg.data_dir)?;
            let (model, reports) = train_multiview(cfg, &models, &data, observer)?;
            let (params, meta) = model.to_checkpoint()?;
            save_checkpoint(&multiview_checkpoint(dir), &params, &meta)?;
            Ok(reports)
        }
    }
}

/// Outcome of evaluating one model on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub r2: f64,
    pub mae: f64,
    /// Mean IoU of attention crops against ground-truth brain boxes.
    pub mean_iou: f64,
    /// Mean crop area in pixels.
    pub mean_crop_area: f64,
    /// Samples whose heatmap gave no usable box.
    pub fallbacks: usize,
    pub age_true: Vec<f64>,
    pub age_pred: Vec<f64>,
}

impl EvalReport {
    fn build(age_true: Vec<f64>, age_pred: Vec<f64>, boxes: &[(BBox, BBox)], fallbacks: usize) -> Result<Self> {
        let mut iou_sum = 0.0;
        let mut area = 0.0;
        for (crop, gt) in boxes {
            iou_sum += iou(crop, gt)?;
            area += crop.area() as f64;
        }
        let nb = boxes.len().max(1) as f64;
        Ok(EvalReport {
            r2: r2_score(&age_true, &age_pred)?,
            mae: mae(&age_true, &age_pred)?,
            mean_iou: iou_sum / nb,
            mean_crop_area: area / nb,
            fallbacks,
            age_true,
            age_pred,
        })
    }

    /// Per-sample scatter, header `age_true,age_pred`.
    pub fn csv(&self) -> String {
        let mut s = String::from("age_true,age_pred\n");
        for (t, p) in self.age_true.iter().zip(&self.age_pred) {
            s.push_str(&format!("{t:.2},{p:.6}\n"));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!("R2={:.4} MAE={:.3} days", self.r2, self.mae)
    }
}

/// Single-view evaluation of `mode` on an in-memory split.
pub fn evaluate_view<T: Scalar>(model: &ViewModel<T>, set: &ViewSet, mode: BranchMode, batch: usize) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Data(format!("{} {} split is empty", set.view, set.split)));
    }
    if set.view != model.view {
        return Err(Error::Config(format!("{} model evaluated on {} images", model.view, set.view)));
    }
    check_images(set, model.global.config().input_size)?;
    model.head(mode)?;
    let feats = model.features(&normalized(set, &model.norm), batch)?;
    let pred = model.predict_days(mode, &feats)?;
    let pairs: Vec<(BBox, BBox)> = feats.boxes.iter().copied().zip(set.boxes.iter().copied()).collect();
    EvalReport::build(set.ages.clone(), pred, &pairs, feats.fallbacks)
}

/// Three-view evaluation; `fusion` is required for [`MultiViewMode::Fusion`].
pub fn evaluate_multiview<T: Scalar>(
    models: &[ViewModel<T>],
    fusion: Option<&MultiViewModel<T>>,
    data: &[ViewData],
    split: Split,
    mode: MultiViewMode,
    branch: BranchMode,
    batch: usize,
) -> Result<EvalReport> {
    let (ms, ds) = ordered(models, data)?;
    let mut per_view = Vec::with_capacity(3);
    let mut pairs = Vec::new();
    let mut fallbacks = 0;
    for (m, d) in ms.iter().zip(&ds) {
        let set = d.split(split);
        if set.is_empty() {
            return Err(Error::Data(format!("{} {split} split is empty", m.view)));
        }
        check_images(set, m.global.config().input_size)?;
        let feats = m.features(&normalized(set, &m.norm), batch)?;
        pairs.extend(feats.boxes.iter().copied().zip(set.boxes.iter().copied()));
        fallbacks += feats.fallbacks;
        per_view.push(ViewPrediction {
            view: m.view,
            days: m.predict_days(branch, &feats)?,
            features: branch_features(branch, &feats.global, feats.local.as_ref())?,
        });
    }
    let fusion_head = match mode {
        MultiViewMode::Fusion => {
            let mv = fusion.ok_or_else(|| Error::Config("multi-view fusion needs the multiview stage".into()))?;
            Some((mv.head(branch)?, &mv.norm))
        }
        MultiViewMode::Average => None,
    };
    let pred = multiview_combine(mode, &per_view, fusion_head)?;
    EvalReport::build(ds[0].split(split).ages.clone(), pred, &pairs, fallbacks)
}

/// What [`evaluate`] scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    View(View, BranchMode),
    MultiView(MultiViewMode, BranchMode),
}

/// Loads checkpoints from `model_dir` and data from `data_dir`, then scores one split.
pub fn evaluate<T: Scalar>(model_dir: &Path, data_dir: &Path, split: Split, target: EvalTarget, batch: usize) -> Result<EvalReport> {
    match target {
        EvalTarget::View(view, branch) => {
            let model = load_view_model::<T>(model_dir, view)?;
            let data = ViewData::load(data_dir, view)?;
            evaluate_view(&model, data.split(split), branch, batch)
        }
        EvalTarget::MultiView(mode, branch) => {
            let models: Vec<ViewModel<T>> = View::ALL.iter().map(|&v| load_view_model(model_dir, v)).collect::<Result<_>>()?;
            let fusion = match mode {
                MultiViewMode::Fusion => Some(load_multiview_model::<T>(model_dir)?),
                MultiViewMode::Average => None,
            };
            let data = load_all_views(data_dir)?;
            evaluate_multiview(&models, fusion.as_ref(), &data, split, mode, branch, batch)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub tau: f64,
    /// Local-branch test R².
    pub r2_test: f64,
    pub mean_crop_area: f64,
    pub mean_iou: f64,
}

/// Sweep CSV, header `tau,r2_test`, rows in ascending `tau`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let mut s = String::from("tau,r2_test\n");
    for p in sorted {
        s.push_str(&format!("{},{:.6}\n", p.tau, p.r2_test));
    }
    s
}

/// Retrains the local stage of `base` once per threshold and scores its
/// branch on the test split. `on_model` sees each trained model.
pub fn threshold_sweep<T: Scalar>(
    cfg: &TrainConfig,
    base: &ViewModel<T>,
    data: &ViewData,
    taus: &[f64],
    observer: Observer<'_>,
    on_model: &mut dyn FnMut(&ViewModel<T>) -> Result<()>,
) -> Result<Vec<SweepPoint>> {
    if taus.is_empty() {
        return Err(Error::Config("empty threshold list".into()));
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut points = Vec::with_capacity(sorted.len());
    for tau in sorted {
        check_tau(tau)?;
        let local_cfg = TrainConfig { tau, ..cfg.clone() };
        let mut model = base.clone();
        train_local(&local_cfg, &mut model, data, observer)?;
        let report = evaluate_view(&model, &data.test, BranchMode::Local, 2 * cfg.batch_size)?;
        on_model(&model)?;
        points.push(SweepPoint {
            tau,
            r2_test: report.r2,
            mean_crop_area: report.mean_crop_area,
            mean_iou: report.mean_iou,
        });
    }
    Ok(points)
}
