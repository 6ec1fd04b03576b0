//! ResNet-style feature extractor and the linear regression head.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{BnHyper, Mode, RunningStats};
use crate::params::ParamSet;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    ResNet18,
    ResNet50,
}

impl Variant {
    pub fn stage_depths(self) -> [usize; 4] {
        match self {
            Variant::ResNet18 => [2, 2, 2, 2],
            Variant::ResNet50 => [3, 4, 6, 3],
        }
    }

    fn expansion(self) -> usize {
        match self {
            Variant::ResNet18 => 1,
            Variant::ResNet50 => 4,
        }
    }

    /// Attention threshold used unless overridden.
    pub fn default_tau(self) -> f64 {
        match self {
            Variant::ResNet18 => 0.3,
            Variant::ResNet50 => 0.4,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::ResNet18 => "resnet18",
            Variant::ResNet50 => "resnet50",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(Variant::ResNet18),
            "resnet50" => Ok(Variant::ResNet50),
            other => Err(Error::Config(format!("unknown variant {other:?} (resnet18|resnet50)"))),
        }
    }
}

/// Named size configuration of the whole pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    /// 224x224 input, stride 32, 7x7 feature grid.
    Full,
    /// 96x96 input, stride 8, 12x12 feature grid, quarter width.
    Desk,
}

impl Profile {
    pub fn input_size(self) -> usize {
        match self {
            Profile::Full => 224,
            Profile::Desk => 96,
        }
    }

    /// Smallest crop side (pixels) handed to the local branch.
    pub fn min_crop_side(self) -> usize {
        match self {
            Profile::Full => 16,
            Profile::Desk => 8,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile {other:?} (full|desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub in_channels: usize,
    /// Channel scale relative to the standard widths (64, 128, 256, 512).
    pub width_multiplier: Ratio<usize>,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub stage_strides: [usize; 4],
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn for_profile(profile: Profile, variant: Variant) -> Self {
        match profile {
            Profile::Full => BackboneConfig {
                variant,
                in_channels: 1,
                width_multiplier: Ratio::from_integer(1),
                stem_kernel: 7,
                stem_stride: 2,
                stem_pool: true,
                stage_strides: [1, 2, 2, 2],
                input_size: 224,
            },
            Profile::Desk => BackboneConfig {
                variant,
                in_channels: 1,
                width_multiplier: Ratio::new(1, 4),
                stem_kernel: 3,
                stem_stride: 1,
                stem_pool: false,
                stage_strides: [1, 2, 2, 2],
                input_size: 96,
            },
        }
    }

    fn scaled(&self, base: usize) -> usize {
        (Ratio::from_integer(base) * self.width_multiplier).round().to_integer().max(1)
    }

    pub fn stem_width(&self) -> usize {
        self.scaled(64)
    }

    /// Inner width of stage `s` (before bottleneck expansion).
    pub fn stage_width(&self, stage: usize) -> usize {
        self.scaled(64 << stage)
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_width(3) * self.variant.expansion()
    }

    pub fn overall_stride(&self) -> usize {
        self.stem_stride * if self.stem_pool { 2 } else { 1 } * self.stage_strides.iter().product::<usize>()
    }

    /// Spatial side of the last-stage feature map, following the layer arithmetic.
    pub fn feature_grid(&self) -> Result<usize> {
        let conv = |x: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            if x + 2 * p < k {
                return Err(Error::Config(format!("spatial extent {x} too small for kernel {k}")));
            }
            Ok((x + 2 * p - k) / s + 1)
        };
        let mut side = conv(self.input_size, self.stem_kernel, self.stem_stride, self.stem_kernel / 2)?;
        if self.stem_pool {
            side = conv(side, 3, 2, 1)?;
        }
        for &s in &self.stage_strides {
            side = conv(side, 3, s, 1)?;
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || *self.width_multiplier.numer() == 0 || self.stem_stride == 0 || self.stem_kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid backbone config {self:?}")));
        }
        if self.stage_strides.iter().any(|&s| s == 0) {
            return Err(Error::Config("stage strides must be >= 1".into()));
        }
        let stride = self.overall_stride();
        if self.input_size % stride != 0 {
            return Err(Error::Config(format!("overall stride {stride} does not divide input size {}", self.input_size)));
        }
        let grid = self.feature_grid()?;
        if grid < 2 {
            return Err(Error::Config(format!("feature grid {grid}x{grid} is below 2x2")));
        }
        if grid * stride != self.input_size {
            return Err(Error::Config(format!(
                "feature grid {grid} x stride {stride} != input size {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: ConvRef,
    bn: BnRef,
}

#[derive(Clone, Debug)]
struct Block {
    /// conv-bn pairs of the residual path; ReLU between pairs, not after the last.
    path: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

/// Parameters of a configured backbone plus its layer wiring.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    config: BackboneConfig,
    params: ParamSet<T>,
    running: Vec<RunningStats<T>>,
    running_names: Vec<String>,
    stem: ConvBn,
    blocks: Vec<Block>,
    bn_hyper: BnHyper,
}

/// Graph handles produced by [`Backbone::forward`].
pub struct BackboneOutput<T> {
    /// `[N, C_f, h, w]`, post-ReLU activations of the last stage.
    pub features: Var,
    /// `[N, C_f]`, spatial mean of `features`.
    pub pooled: Var,
    /// One leaf per parameter, in [`Backbone::params`] order.
    pub params: Vec<Var>,
    /// Batch-norm statistics after this pass (updated in train mode).
    pub running: Vec<RunningStats<T>>,
}

struct Builder<'a, T> {
    params: &'a mut ParamSet<T>,
    running: &'a mut Vec<RunningStats<T>>,
    running_names: &'a mut Vec<String>,
    seed: u64,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<ConvBn> {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = SplitMix64::derived(self.seed, &[self.params.len() as u64]);
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::from_f64_lossy(std * rng.normal()));
        let weight = self.params.push(format!("{name}.conv.weight"), w)?;
        let gamma = self.params.push(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()))?;
        let beta = self.params.push(format!("{name}.bn.beta"), Tensor::zeros(&[cout]))?;
        self.running.push(RunningStats::new(cout));
        self.running_names.push(format!("{name}.bn"));
        Ok(ConvBn {
            conv: ConvRef {
                weight,
                stride,
                padding: k / 2,
            },
            bn: BnRef {
                gamma,
                beta,
                stats: self.running.len() - 1,
            },
        })
    }
}

impl<T: Scalar> Backbone<T> {
    /// Deterministic Kaiming-normal initialization from `seed`.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut running = Vec::new();
        let mut running_names = Vec::new();
        let mut b = Builder {
            params: &mut params,
            running: &mut running,
            running_names: &mut running_names,
            seed,
        };
        let stem = b.conv_bn("stem", config.in_channels, config.stem_width(), config.stem_kernel, config.stem_stride)?;
        let mut blocks = Vec::new();
        let mut cin = config.stem_width();
        let exp = config.variant.expansion();
        for (s, &depth) in config.variant.stage_depths().iter().enumerate() {
            let mid = config.stage_width(s);
            let cout = mid * exp;
            for i in 0..depth {
                let stride = if i == 0 { config.stage_strides[s] } else { 1 };
                let name = format!("layer{}.{i}", s + 1);
                let path = match config.variant {
                    Variant::ResNet18 => vec![
                        b.conv_bn(&format!("{name}.c1"), cin, mid, 3, stride)?,
                        b.conv_bn(&format!("{name}.c2"), mid, cout, 3, 1)?,
                    ],
                    Variant::ResNet50 => vec![
                        b.conv_bn(&format!("{name}.c1"), cin, mid, 1, 1)?,
                        b.conv_bn(&format!("{name}.c2"), mid, mid, 3, stride)?,
                        b.conv_bn(&format!("{name}.c3"), mid, cout, 1, 1)?,
                    ],
                };
                let shortcut = if stride != 1 || cin != cout {
                    Some(b.conv_bn(&format!("{name}.down"), cin, cout, 1, stride)?)
                } else {
                    None
                };
                blocks.push(Block { path, shortcut });
                cin = cout;
            }
        }
        Ok(Backbone {
            config,
            params,
            running,
            running_names,
            stem,
            blocks,
            bn_hyper: BnHyper::default(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn running(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn set_running(&mut self, running: Vec<RunningStats<T>>) {
        assert_eq!(running.len(), self.running.len(), "running stats count");
        self.running = running;
    }

    /// Batch-norm running statistics as named tensors (`<layer>.running_mean|var`).
    pub fn buffers(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, rs) in self.running_names.iter().zip(&self.running) {
            out.push(format!("{name}.running_mean"), rs.mean.clone()).expect("unique");
            out.push(format!("{name}.running_var"), rs.var.clone()).expect("unique");
        }
        out
    }

    /// Writes parameters and buffers into `out` under `prefix`.
    pub fn export(&self, prefix: &str, out: &mut ParamSet<T>) -> Result<()> {
        self.params.export(prefix, out)?;
        self.buffers().export(prefix, out)
    }

    pub fn import(&mut self, prefix: &str, src: &ParamSet<T>) -> Result<()> {
        self.params.import(prefix, src)?;
        let mut buffers = self.buffers();
        buffers.import(prefix, src)?;
        for (i, rs) in self.running.iter_mut().enumerate() {
            rs.mean = buffers.tensor(2 * i).clone();
            rs.var = buffers.tensor(2 * i + 1).clone();
        }
        Ok(())
    }

    fn conv_bn(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: &ConvBn,
        vars: &[Var],
        running: &mut [RunningStats<T>],
        mode: Mode,
    ) -> Result<Var> {
        let y = g.conv2d(x, vars[layer.conv.weight], None, layer.conv.stride, layer.conv.padding)?;
        g.batch_norm2d(
            y,
            vars[layer.bn.gamma],
            vars[layer.bn.beta],
            &mut running[layer.bn.stats],
            mode,
            self.bn_hyper,
        )
    }

    /// Runs the backbone on `[N, C, S, S]`. Parameters enter the graph as
    /// leaves that require gradients only when `trainable`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, trainable: bool) -> Result<BackboneOutput<T>> {
        let dims = g.value(x).dims().to_vec();
        let s = self.config.input_size;
        if dims.len() != 4 {
            return Err(Error::dim("backbone", "rank", format!("expected [N,C,S,S], got {dims:?}")));
        }
        if dims[1] != self.config.in_channels {
            return Err(Error::dim("backbone", "C", format!("expected {} channels, got {}", self.config.in_channels, dims[1])));
        }
        if dims[2] != s || dims[3] != s {
            return Err(Error::dim("backbone", "H/W", format!("expected {s}x{s}, got {}x{}", dims[2], dims[3])));
        }
        let vars: Vec<Var> = self.params.tensors().map(|t| g.leaf(t.clone(), trainable)).collect();
        let mut running = self.running.clone();
        let mut h = self.conv_bn(g, x, &self.stem, &vars, &mut running, mode)?;
        h = g.relu(h);
        if self.config.stem_pool {
            h = g.max_pool2d(h, 3, 2, 1)?;
        }
        for block in &self.blocks {
            let mut y = h;
            for (i, layer) in block.path.iter().enumerate() {
                y = self.conv_bn(g, y, layer, &vars, &mut running, mode)?;
                if i + 1 < block.path.len() {
                    y = g.relu(y);
                }
            }
            let skip = match &block.shortcut {
                Some(layer) => self.conv_bn(g, h, layer, &vars, &mut running, mode)?,
                None => h,
            };
            let sum = g.add(y, skip)?;
            h = g.relu(sum);
        }
        let pooled = g.global_avg_pool(h)?;
        Ok(BackboneOutput {
            features: h,
            pooled,
            params: vars,
            running,
        })
    }
}

/// Single linear layer mapping a feature vector to one normalized age.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionHead<T> {
    params: ParamSet<T>,
}

impl<T: Scalar> RegressionHead<T> {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::derived(seed, &[0x4EAD]);
        let std = 0.01;
        let mut params = ParamSet::new();
        params
            .push("weight", Tensor::from_fn(&[1, input_dim], |_| T::from_f64_lossy(std * rng.normal())))
            .expect("fresh set");
        params.push("bias", Tensor::zeros(&[1])).expect("fresh set");
        RegressionHead { params }
    }

    pub fn from_weights(weight: Tensor<T>, bias: T) -> Result<Self> {
        if weight.rank() != 2 || weight.dims()[0] != 1 {
            return Err(Error::dim("regression_head", "rows", format!("weight dims {:?}, expected [1, D]", weight.dims())));
        }
        let mut params = ParamSet::new();
        params.push("weight", weight)?;
        params.push("bias", Tensor::scalar(bias))?;
        Ok(RegressionHead { params })
    }

    pub fn input_dim(&self) -> usize {
        self.params.tensor(0).dims()[1]
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// `[N, D] -> [N]`; returns the prediction and the weight/bias leaves.
    pub fn forward(&self, g: &mut Graph<T>, features: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let fd = g.value(features).dims().to_vec();
        if fd.len() != 2 || fd[1] != self.input_dim() {
            return Err(Error::dim(
                "regression_head",
                "D",
                format!("features {fd:?}, head expects width {}", self.input_dim()),
            ));
        }
        let w = g.leaf(self.params.tensor(0).clone(), trainable);
        let b = g.leaf(self.params.tensor(1).clone(), trainable);
        let y = g.linear(features, w, Some(b))?;
        let y = g.reshape(y, &[fd[0]])?;
        Ok((y, vec![w, b]))
    }
}
