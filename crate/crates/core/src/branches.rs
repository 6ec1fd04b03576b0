//! Global and attention-cropped local branches of one view, the four ways of
//! combining them, and the two ways of combining the three views.

use std::fmt;
use std::str::FromStr;

use crate::attention::{extract_roi, BBox, RoiParams};
use crate::backbone::{Backbone, Profile, RegressionHead, Variant};
use crate::checkpoint::Metadata;
use crate::data::View;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grid::Grid;
use crate::kernels::Mode;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::NormStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchMode {
    Global,
    Local,
    Average,
    Fusion,
}

impl BranchMode {
    pub const ALL: [BranchMode; 4] = [BranchMode::Global, BranchMode::Local, BranchMode::Average, BranchMode::Fusion];

    /// Width of the vector the mode's head consumes, given one backbone's width.
    pub fn input_dim(self, feature_dim: usize) -> usize {
        match self {
            BranchMode::Fusion => 2 * feature_dim,
            _ => feature_dim,
        }
    }

    pub fn needs_local(self) -> bool {
        self != BranchMode::Global
    }
}

impl fmt::Display for BranchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchMode::Global => "global",
            BranchMode::Local => "local",
            BranchMode::Average => "average",
            BranchMode::Fusion => "fusion",
        })
    }
}

impl FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(BranchMode::Global),
            "local" => Ok(BranchMode::Local),
            "average" => Ok(BranchMode::Average),
            "fusion" => Ok(BranchMode::Fusion),
            other => Err(Error::Config(format!("unknown branch mode {other:?} (global|local|average|fusion)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MultiViewMode {
    Average,
    Fusion,
}

impl fmt::Display for MultiViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MultiViewMode::Average => "average",
            MultiViewMode::Fusion => "fusion",
        })
    }
}

impl FromStr for MultiViewMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(MultiViewMode::Average),
            "fusion" => Ok(MultiViewMode::Fusion),
            other => Err(Error::Config(format!("unknown multi-view mode {other:?} (average|fusion)"))),
        }
    }
}

/// Builds the head input of `mode` from global and local feature vectors.
pub fn branch_input<T: Scalar>(g: &mut Graph<T>, mode: BranchMode, f_g: Var, f_l: Option<Var>) -> Result<Var> {
    let local = || f_l.ok_or_else(|| Error::Config(format!("branch mode {mode} needs local features")));
    match mode {
        BranchMode::Global => Ok(f_g),
        BranchMode::Local => local(),
        BranchMode::Average => {
            let l = local()?;
            if g.value(f_g).dims() != g.value(l).dims() {
                return Err(Error::dim(
                    "combine_branch",
                    "D",
                    format!("global {:?} vs local {:?}", g.value(f_g).dims(), g.value(l).dims()),
                ));
            }
            let s = g.add(f_g, l)?;
            Ok(g.scale(s, T::from_f64_lossy(0.5)))
        }
        BranchMode::Fusion => {
            let l = local()?;
            g.concat(f_g, l)
        }
    }
}

/// Prediction `[N]` of `mode`'s head on the combined features; also returns the head's leaves.
pub fn combine_branch<T: Scalar>(
    g: &mut Graph<T>,
    mode: BranchMode,
    f_g: Var,
    f_l: Option<Var>,
    head: &RegressionHead<T>,
    trainable: bool,
) -> Result<(Var, Vec<Var>)> {
    let x = branch_input(g, mode, f_g, f_l)?;
    head.forward(g, x, trainable)
}

/// Tensor form of [`branch_input`] for precomputed features.
pub fn branch_features<T: Scalar>(mode: BranchMode, f_g: &Tensor<T>, f_l: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let gv = g.constant(f_g.clone());
    let lv = f_l.map(|t| g.constant(t.clone()));
    let out = branch_input(&mut g, mode, gv, lv)?;
    Ok(g.value(out).clone())
}

/// Applies `head` to `[N, D]` features; returns one value per row.
pub fn apply_head<T: Scalar>(head: &RegressionHead<T>, features: &Tensor<T>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let (y, _) = head.forward(&mut g, x, false)?;
    Ok(g.value(y).to_f64())
}

/// Everything trained for one view. Stages fill the optional parts.
#[derive(Clone, Debug)]
pub struct ViewModel<T> {
    pub view: View,
    pub profile: Profile,
    /// Mode used when a caller does not pick one.
    pub branch: BranchMode,
    pub tau: f64,
    pub kappa: f64,
    pub norm: NormStats,
    pub seed: u64,
    pub global: Backbone<T>,
    pub global_head: RegressionHead<T>,
    pub local: Option<Backbone<T>>,
    pub local_head: Option<RegressionHead<T>>,
    pub average_head: Option<RegressionHead<T>>,
    pub fusion_head: Option<RegressionHead<T>>,
}

/// Per-sample results of running both branches on a batch of images.
#[derive(Clone, Debug)]
pub struct ViewFeatures<T> {
    /// `[N, D]` pooled global features.
    pub global: Tensor<T>,
    /// `[N, D]` pooled local features, when a local backbone exists.
    pub local: Option<Tensor<T>>,
    /// Crop boxes in image pixels.
    pub boxes: Vec<BBox>,
    pub fallbacks: usize,
}

impl<T: Scalar> ViewModel<T> {
    pub fn variant(&self) -> Variant {
        self.global.config().variant
    }

    pub fn feature_dim(&self) -> usize {
        self.global.feature_dim()
    }

    pub fn roi_params(&self) -> RoiParams {
        let cfg = self.global.config();
        RoiParams {
            tau: self.tau,
            kappa: self.kappa,
            stride: cfg.overall_stride(),
            out_size: cfg.input_size,
            min_side: self.profile.min_crop_side(),
        }
    }

    pub fn head(&self, mode: BranchMode) -> Result<&RegressionHead<T>> {
        let h = match mode {
            BranchMode::Global => Some(&self.global_head),
            BranchMode::Local => self.local_head.as_ref(),
            BranchMode::Average => self.average_head.as_ref(),
            BranchMode::Fusion => self.fusion_head.as_ref(),
        };
        h.ok_or_else(|| Error::Config(format!("{} model has no trained {mode} head", self.view)))
    }

    /// Eval-mode global pass on normalized `[N, 1, S, S]` input.
    pub fn global_forward(&self, g: &mut Graph<T>, x: Var) -> Result<GlobalOutput> {
        let out = self.global.forward(g, x, Mode::Eval, false)?;
        let (y, _) = self.global_head.forward(g, out.pooled, false)?;
        Ok(GlobalOutput {
            y,
            pooled: out.pooled,
            features: out.features,
        })
    }

    /// Crops every sample around its attention box and runs the local branch.
    /// `feature_maps` must come from [`global_forward`](Self::global_forward) on `images`.
    pub fn local_forward(&self, g: &mut Graph<T>, images: &[Grid<T>], feature_maps: Var) -> Result<LocalOutput> {
        let local = self
            .local
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} model has no local branch", self.view)))?;
        let head = self.local_head.as_ref().ok_or_else(|| Error::Config("local head missing".into()))?;
        let crops = self.crops(images, g.value(feature_maps))?;
        let x = g.constant(stack_images(&crops.0)?);
        let out = local.forward(g, x, Mode::Eval, false)?;
        let (y, _) = head.forward(g, out.pooled, false)?;
        Ok(LocalOutput {
            y,
            pooled: out.pooled,
            boxes: crops.1,
            fallbacks: crops.2,
        })
    }

    /// Attention crops of `images` given their `[N, C, h, w]` feature maps.
    pub fn crops(&self, images: &[Grid<T>], feature_maps: &Tensor<T>) -> Result<(Vec<Grid<T>>, Vec<BBox>, usize)> {
        let n = feature_maps.dims()[0];
        if n != images.len() {
            return Err(Error::dim("local_forward", "N", format!("{} images vs {n} feature maps", images.len())));
        }
        let inner = feature_maps.dims()[1..].to_vec();
        let p = self.roi_params();
        let mut crops = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        let mut fallbacks = 0;
        for (i, img) in images.iter().enumerate() {
            let fm = Tensor::new(inner.clone(), feature_maps.outer(i).to_vec())?;
            let roi = extract_roi(&fm, img, &p)?;
            fallbacks += roi.fallback as usize;
            crops.push(roi.crop);
            boxes.push(roi.image_box);
        }
        Ok((crops, boxes, fallbacks))
    }

    /// Pooled features of both branches for normalized images, in batches.
    pub fn features(&self, images: &[Grid<T>], batch: usize) -> Result<ViewFeatures<T>> {
        if images.is_empty() {
            return Err(Error::Data("no images".into()));
        }
        let d = self.feature_dim();
        let mut global = Vec::with_capacity(images.len() * d);
        let mut local = self.local.as_ref().map(|_| Vec::with_capacity(images.len() * d));
        let mut boxes = Vec::with_capacity(images.len());
        let mut fallbacks = 0;
        for chunk in images.chunks(batch.max(1)) {
            let mut g = Graph::new();
            let x = g.constant(stack_images(chunk)?);
            let out = self.global.forward(&mut g, x, Mode::Eval, false)?;
            global.extend_from_slice(g.value(out.pooled).data());
            let (crops, b, f) = self.crops(chunk, g.value(out.features))?;
            boxes.extend(b);
            fallbacks += f;
            if let (Some(backbone), Some(acc)) = (&self.local, local.as_mut()) {
                let mut g = Graph::new();
                let x = g.constant(stack_images(&crops)?);
                let out = backbone.forward(&mut g, x, Mode::Eval, false)?;
                acc.extend_from_slice(g.value(out.pooled).data());
            }
        }
        let n = images.len();
        Ok(ViewFeatures {
            global: Tensor::new(vec![n, d], global)?,
            local: local.map(|v| Tensor::new(vec![n, d], v)).transpose()?,
            boxes,
            fallbacks,
        })
    }

    /// Age predictions in days for `mode` from precomputed features.
    pub fn predict_days(&self, mode: BranchMode, feats: &ViewFeatures<T>) -> Result<Vec<f64>> {
        let x = branch_features(mode, &feats.global, feats.local.as_ref())?;
        let z = apply_head(self.head(mode)?, &x)?;
        Ok(z.into_iter().map(|v| self.norm.days(v)).collect())
    }

    /// Heatmap, box and crop for one raw image, for inspection.
    pub fn attend(&self, image: &Grid<u8>) -> Result<Attention> {
        let size = self.global.config().input_size;
        if image.rows() != size || image.cols() != size {
            return Err(Error::Config(format!(
                "image is {}x{}, the {} profile expects {size}x{size}",
                image.rows(),
                image.cols(),
                self.profile
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(stack_images(&[self.norm.image::<T>(image)])?);
        let out = self.global.forward(&mut g, x, Mode::Eval, false)?;
        let fm = g.value(out.features);
        let fm = Tensor::new(fm.dims()[1..].to_vec(), fm.data().to_vec())?;
        let roi = extract_roi(&fm, &image.map(|v| T::from_f64_lossy(v as f64)), &self.roi_params())?;
        let to_u8 = |v: f64| libm::round(v).clamp(0.0, 255.0) as u8;
        Ok(Attention {
            heatmap: roi.map.values.map(|v| to_u8(v * 255.0)),
            crop: roi.crop.map(|v| to_u8(v.to_f64_lossy())),
            image_box: roi.image_box,
            fallback: roi.fallback,
        })
    }

    pub fn stages(&self) -> Vec<&'static str> {
        let mut s = vec!["global"];
        if self.local.is_some() {
            s.push("local");
        }
        if self.average_head.is_some() && self.fusion_head.is_some() {
            s.push("combine");
        }
        s
    }

    /// Serializes every trained part plus metadata.
    pub fn to_checkpoint(&self) -> Result<(ParamSet<T>, Metadata)> {
        let mut params = ParamSet::new();
        self.global.export("global.backbone.", &mut params)?;
        self.global_head.params().export("global.head.", &mut params)?;
        if let Some(l) = &self.local {
            l.export("local.backbone.", &mut params)?;
        }
        for (name, head) in [
            ("local", &self.local_head),
            ("average", &self.average_head),
            ("fusion", &self.fusion_head),
        ] {
            if let Some(h) = head {
                h.params().export(&format!("{name}.head."), &mut params)?;
            }
        }
        let mut meta = Metadata::new();
        meta.set("kind", "view");
        meta.set("profile", self.profile);
        meta.set("variant", self.variant());
        meta.set("view", self.view);
        meta.set("stages", self.stages().join(","));
        meta.set("branch", self.branch);
        meta.set("tau", self.tau);
        meta.set("kappa", self.kappa);
        self.norm.write_meta(&mut meta);
        meta.set("seed", self.seed);
        Ok((params, meta))
    }

    pub fn from_checkpoint(params: &ParamSet<T>, meta: &Metadata) -> Result<Self> {
        if meta.get("kind") != Some("view") {
            return Err(Error::Checkpoint("not a view model checkpoint".into()));
        }
        let profile: Profile = meta.parse("profile")?;
        let variant: Variant = meta.parse("variant")?;
        let cfg = crate::backbone::BackboneConfig::for_profile(profile, variant);
        let stages = meta.require("stages")?.split(',').map(str::to_string).collect::<Vec<_>>();
        let has = |s: &str| stages.iter().any(|x| x == s);
        let mut global = Backbone::new(cfg.clone(), 0)?;
        global.import("global.backbone.", params)?;
        let d = global.feature_dim();
        let head = |name: &str, dim: usize| -> Result<RegressionHead<T>> {
            let mut h = RegressionHead::new(dim, 0);
            h.params_mut().import(&format!("{name}.head."), params)?;
            Ok(h)
        };
        let (local, local_head) = if has("local") {
            let mut l = Backbone::new(cfg, 0)?;
            l.import("local.backbone.", params)?;
            (Some(l), Some(head("local", d)?))
        } else {
            (None, None)
        };
        let (average_head, fusion_head) = if has("combine") {
            (Some(head("average", d)?), Some(head("fusion", 2 * d)?))
        } else {
            (None, None)
        };
        Ok(ViewModel {
            view: meta.parse("view")?,
            profile,
            branch: meta.parse("branch")?,
            tau: meta.parse("tau")?,
            kappa: meta.parse("kappa")?,
            norm: NormStats::read_meta(meta)?,
            seed: meta.parse("seed")?,
            global_head: head("global", d)?,
            global,
            local,
            local_head,
            average_head,
            fusion_head,
        })
    }
}

/// Attention artifacts of one image.
#[derive(Clone, Debug)]
pub struct Attention {
    /// Normalized heatmap on the feature grid, `[0, 1]` scaled to `[0, 255]` by rounding.
    pub heatmap: Grid<u8>,
    /// Crop resized to the model input size.
    pub crop: Grid<u8>,
    pub image_box: BBox,
    pub fallback: bool,
}

pub struct GlobalOutput {
    /// `[N]` normalized predictions.
    pub y: Var,
    /// `[N, D]`.
    pub pooled: Var,
    /// `[N, C, h, w]` last-stage maps, the attention source.
    pub features: Var,
}

pub struct LocalOutput {
    pub y: Var,
    pub pooled: Var,
    pub boxes: Vec<BBox>,
    pub fallbacks: usize,
}

/// Stacks equally sized single-channel images into `[N, 1, H, W]`.
pub fn stack_images<T: Scalar>(images: &[Grid<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Data("empty image batch".into()))?;
    let (h, w) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.rows() != h || img.cols() != w {
            return Err(Error::dim("stack_images", "H/W", format!("{}x{} vs {h}x{w}", img.rows(), img.cols())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}

/// One view's contribution to a multi-view prediction.
#[derive(Clone, Debug)]
pub struct ViewPrediction<T> {
    pub view: View,
    /// Per-sample predictions in days.
    pub days: Vec<f64>,
    /// `[N, D_b]` branch features feeding the multi-view fusion head.
    pub features: Tensor<T>,
}

/// Orders the three per-view outputs canonically; any other set is an error.
fn canonical<T>(per_view: &[ViewPrediction<T>]) -> Result<[&ViewPrediction<T>; 3]> {
    let find = |v: View| {
        let mut it = per_view.iter().filter(|p| p.view == v);
        match (it.next(), it.next()) {
            (Some(p), None) => Ok(p),
            (None, _) => Err(Error::Config(format!("multi-view combination is missing the {v} view"))),
            (Some(_), Some(_)) => Err(Error::Config(format!("{v} view given twice"))),
        }
    };
    if per_view.len() != 3 {
        return Err(Error::Config(format!("multi-view combination needs 3 views, got {}", per_view.len())));
    }
    Ok([find(View::Axial)?, find(View::Sagittal)?, find(View::Coronal)?])
}

/// Concatenates per-view features in axial, sagittal, coronal order.
pub fn multiview_features<T: Scalar>(per_view: &[ViewPrediction<T>]) -> Result<Tensor<T>> {
    let [a, s, c] = canonical(per_view)?;
    let mut g = Graph::new();
    let av = g.constant(a.features.clone());
    let sv = g.constant(s.features.clone());
    let cv = g.constant(c.features.clone());
    let x = g.concat(av, sv)?;
    let x = g.concat(x, cv)?;
    Ok(g.value(x).clone())
}

/// Final predictions in days. Fusion needs the trained head and the age
/// statistics that de-normalize its output.
pub fn multiview_combine<T: Scalar>(
    mode: MultiViewMode,
    per_view: &[ViewPrediction<T>],
    fusion: Option<(&RegressionHead<T>, &NormStats)>,
) -> Result<Vec<f64>> {
    let views = canonical(per_view)?;
    let n = views[0].days.len();
    if views.iter().any(|v| v.days.len() != n) {
        return Err(Error::dim("multiview_combine", "N", "views disagree on sample count"));
    }
    match mode {
        MultiViewMode::Average => {
            // sort each triple so the sum does not depend on view order
            Ok((0..n)
                .map(|i| {
                    let mut t = [views[0].days[i], views[1].days[i], views[2].days[i]];
                    t.sort_by(f64::total_cmp);
                    (t[0] + t[1] + t[2]) / 3.0
                })
                .collect())
        }
        MultiViewMode::Fusion => {
            let (head, norm) = fusion.ok_or_else(|| Error::Config("multi-view fusion needs a trained head".into()))?;
            let z = apply_head(head, &multiview_features(per_view)?)?;
            Ok(z.into_iter().map(|v| norm.days(v)).collect())
        }
    }
}
