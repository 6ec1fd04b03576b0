//! Forward and backward kernels on raw tensors.
//!
//! These are the numeric bodies behind the graph ops in [`crate::graph`]; they
//! know nothing about tapes. Layouts are NCHW for images, `[N, D]` for vectors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 2D sliding window over a `[C, H, W]` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Window {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    /// Output extent along one axis, or `None` if the window does not fit.
    pub fn out_extent(&self, extent: usize, kernel: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if self.stride == 0 || kernel == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    fn out_hw(&self, op: &'static str, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::dim(op, "stride", "stride must be >= 1"));
        }
        let ho = self
            .out_extent(h, self.kernel_h)
            .ok_or_else(|| Error::dim(op, "H", format!("kernel {} exceeds padded height {h}+2*{}", self.kernel_h, self.padding)))?;
        let wo = self
            .out_extent(w, self.kernel_w)
            .ok_or_else(|| Error::dim(op, "W", format!("kernel {} exceeds padded width {w}+2*{}", self.kernel_w, self.padding)))?;
        Ok((ho, wo))
    }

    /// Output indices `o` for which `o * stride + k - padding` lies in `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent - 1
        let top = extent as isize - 1 - off;
        let hi = if top < 0 { -1 } else { (top / s).min(out as isize - 1) };
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

fn nchw(t: &Tensor<impl Scalar>, op: &'static str) -> Result<[usize; 4]> {
    t.expect_rank(op, 4)?;
    let d = t.dims();
    Ok([d[0], d[1], d[2], d[3]])
}

/// Unfolds one `[C, H, W]` sample into `[C * kh * kw, Ho * Wo]` columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, cols: &mut [T]) {
    let p = ho * wo;
    debug_assert_eq!(cols.len(), c * win.kernel_h * win.kernel_w * p);
    let mut row = 0;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ki in 0..win.kernel_h {
            let (oy0, oy1) = win.valid_range(ki, h, ho);
            for kj in 0..win.kernel_w {
                let (ox0, ox1) = win.valid_range(kj, w, wo);
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < oy0 || oy >= oy1 {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * win.stride + ki - win.padding;
                    let src_row = &plane[iy * w..(iy + 1) * w];
                    line[..ox0].fill(T::zero());
                    line[ox1..].fill(T::zero());
                    if win.stride == 1 {
                        let ix0 = ox0 + kj - win.padding;
                        line[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            line[ox] = src_row[ox * win.stride + kj - win.padding];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[C, H, W]` sample.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, dst: &mut [T]) {
    let p = ho * wo;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ki in 0..win.kernel_h {
            let (oy0, oy1) = win.valid_range(ki, h, ho);
            for kj in 0..win.kernel_w {
                let (ox0, ox1) = win.valid_range(kj, w, wo);
                let src = &cols[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * win.stride + ki - win.padding;
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst_row = &mut plane[iy * w..(iy + 1) * w];
                    for ox in ox0..ox1 {
                        dst_row[ox * win.stride + kj - win.padding] += line[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(win: Window) -> bool {
    win.kernel_h == 1 && win.kernel_w == 1 && win.stride == 1 && win.padding == 0
}

fn conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<([usize; 4], [usize; 4], Window, usize, usize)> {
    let [n, c, h, w] = nchw(input, "conv2d")?;
    let [k, wc, kh, kw] = nchw(weight, "conv2d")?;
    if wc != c {
        return Err(Error::dim("conv2d", "C", format!("input has {c} channels, weight expects {wc}")));
    }
    if let Some(b) = bias {
        if b.dims() != [k] {
            return Err(Error::dim("conv2d", "K", format!("bias dims {:?} vs {k} output channels", b.dims())));
        }
    }
    let win = Window {
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    let (ho, wo) = win.out_hw("conv2d", h, w)?;
    Ok(([n, c, h, w], [k, c, kh, kw], win, ho, wo))
}

/// Cross-correlation with zero padding: `[N,C,H,W] * [K,C,kh,kw] -> [N,K,Ho,Wo]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let ([n, c, h, w], [k, _, kh, kw], win, ho, wo) = conv_shapes(input, weight, bias, stride, padding)?;
    let p = ho * wo;
    let ckk = c * kh * kw;
    let mut out = vec![T::zero(); n * k * p];
    let pointwise = is_pointwise(win);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * p] };
    for s in 0..n {
        let sample = input.outer(s);
        let b: &[T] = if pointwise {
            sample
        } else {
            im2col(sample, c, h, w, win, ho, wo, &mut cols);
            &cols
        };
        let dst = &mut out[s * k * p..(s + 1) * k * p];
        T::gemm(k, ckk, p, T::one(), weight.data(), ckk as isize, 1, b, p as isize, 1, T::zero(), dst, p as isize, 1);
        if let Some(bias) = bias {
            for (ki, row) in dst.chunks_exact_mut(p).enumerate() {
                let bk = bias.data()[ki];
                row.iter_mut().for_each(|v| *v += bk);
            }
        }
    }
    Tensor::new(vec![n, k, ho, wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let ([n, c, h, w], [k, _, kh, kw], win, ho, wo) = conv_shapes(input, weight, None, stride, padding)?;
    let p = ho * wo;
    let ckk = c * kh * kw;
    let pointwise = is_pointwise(win);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * p] };
    let mut dcols = if need_input && !pointwise { vec![T::zero(); ckk * p] } else { Vec::new() };
    let mut dw = vec![T::zero(); k * ckk];
    let mut db = vec![T::zero(); k];
    let mut dx = if need_input { vec![T::zero(); n * c * h * w] } else { Vec::new() };
    for s in 0..n {
        let sample = input.outer(s);
        let dy = grad_out.outer(s);
        let b: &[T] = if pointwise {
            sample
        } else {
            im2col(sample, c, h, w, win, ho, wo, &mut cols);
            &cols
        };
        // dW += dY (K x P) * cols^T (P x CKK)
        T::gemm(k, p, ckk, T::one(), dy, p as isize, 1, b, 1, p as isize, T::one(), &mut dw, ckk as isize, 1);
        for (ki, row) in dy.chunks_exact(p).enumerate() {
            db[ki] += row.iter().copied().sum::<T>();
        }
        if need_input {
            let dst = &mut dx[s * c * h * w..(s + 1) * c * h * w];
            // dcols = W^T (CKK x K) * dY (K x P)
            if pointwise {
                T::gemm(ckk, k, p, T::one(), weight.data(), 1, ckk as isize, dy, p as isize, 1, T::zero(), dst, p as isize, 1);
            } else {
                T::gemm(ckk, k, p, T::one(), weight.data(), 1, ckk as isize, dy, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im(&dcols, c, h, w, win, ho, wo, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input { Some(Tensor::new(vec![n, c, h, w], dx)?) } else { None },
        weight: Tensor::new(weight.dims().to_vec(), dw)?,
        bias: Tensor::new(vec![k], db)?,
    })
}

/// Window max with implicit `-inf` padding; returns output and flat argmax indices.
///
/// Ties resolve to the first maximum in row-major window order.
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = nchw(input, "max_pool2d")?;
    if kernel > h || kernel > w {
        return Err(Error::dim(
            "max_pool2d",
            if kernel > h { "H" } else { "W" },
            format!("window {kernel} exceeds spatial extent {h}x{w}"),
        ));
    }
    if padding * 2 >= kernel && padding > 0 {
        return Err(Error::Config(format!("max_pool2d padding {padding} must be < kernel/2")));
    }
    let win = Window::square(kernel, stride, padding);
    let (ho, wo) = win.out_hw("max_pool2d", h, w)?;
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn max_pool2d_backward<T: Scalar>(input_dims: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_dims);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}

/// Spatial mean: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(input, "global_avg_pool")?;
    let area = T::from_usize_lossy(h * w);
    let out = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / area)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_dims: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let hw = input_dims[2] * input_dims[3];
    let scale = T::one() / T::from_usize_lossy(hw);
    let mut dx = Vec::with_capacity(grad_out.numel() * hw);
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat(g * scale).take(hw));
    }
    Tensor::new(input_dims.to_vec(), dx).expect("pool grad dims")
}

/// Exponential-moving-average statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct BnHyper {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnHyper {
    fn default() -> Self {
        BnHyper { eps: 1e-5, momentum: 0.1 }
    }
}

/// Values saved by [`batch_norm`] for the backward pass.
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

fn bn_layout(input: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match input.rank() {
        4 => {
            let d = input.dims();
            Ok((d[0], d[1], d[2] * d[3]))
        }
        2 => Ok((input.dims()[0], input.dims()[1], 1)),
        _ => Err(Error::dim("batch_norm2d", "rank", format!("expected [N,C,H,W] or [N,C], got {:?}", input.dims()))),
    }
}

/// Per-channel normalization. Train mode uses batch statistics and updates
/// `running` (unbiased variance); eval mode reads `running`.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: Mode,
    hyper: BnHyper,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, hw) = bn_layout(input)?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", &running.mean), ("running_var", &running.var)] {
        if t.dims() != [c] {
            return Err(Error::dim("batch_norm2d", "C", format!("{name} dims {:?} vs {c} channels", t.dims())));
        }
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::Config("batch_norm2d in train mode needs a batch of at least 2".into()));
    }
    let x = input.data();
    let m = n * hw;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f64;
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    sum += x[off..off + hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    sq += x[off..off + hw].iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m as f64;
                let mom = hyper.momentum;
                let unbiased = if m > 1 { sq / (m - 1) as f64 } else { var };
                let rm = &mut running.mean.data_mut()[ch];
                *rm = T::from_f64_lossy((1.0 - mom) * rm.to_f64_lossy() + mom * mean);
                let rv = &mut running.var.data_mut()[ch];
                *rv = T::from_f64_lossy((1.0 - mom) * rv.to_f64_lossy() + mom * unbiased);
                (mean, var)
            }
            Mode::Eval => (running.mean.data()[ch].to_f64_lossy(), running.var.data()[ch].to_f64_lossy()),
        };
        let istd = 1.0 / (var + hyper.eps).sqrt();
        inv_std[ch] = T::from_f64_lossy(istd);
        let mean_t = T::from_f64_lossy(mean);
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean_t) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    Ok((Tensor::new(input.dims().to_vec(), out)?, BnSaved { xhat, inv_std }))
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    input_dims: &[usize],
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    mode: Mode,
    grad_out: &Tensor<T>,
) -> BnGrads<T> {
    let (n, c, hw) = match input_dims.len() {
        4 => (input_dims[0], input_dims[1], input_dims[2] * input_dims[3]),
        _ => (input_dims[0], input_dims[1], 1),
    };
    let dy = grad_out.data();
    let m = T::from_usize_lossy(n * hw);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * saved.xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let g = gamma.data()[ch];
        let istd = saved.inv_std[ch];
        match mode {
            Mode::Train => {
                let k = g * istd / m;
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    for i in off..off + hw {
                        dx[i] = k * (m * dy[i] - sum_dy - saved.xhat[i] * sum_dy_xhat);
                    }
                }
            }
            Mode::Eval => {
                for s in 0..n {
                    let off = (s * c + ch) * hw;
                    for i in off..off + hw {
                        dx[i] = dy[i] * g * istd;
                    }
                }
            }
        }
    }
    BnGrads {
        input: Tensor::new(input_dims.to_vec(), dx).expect("bn grad dims"),
        gamma: Tensor::new(vec![c], dgamma).expect("bn grad dims"),
        beta: Tensor::new(vec![c], dbeta).expect("bn grad dims"),
    }
}

fn linear_shapes<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<(usize, usize, usize)> {
    input.expect_rank("linear", 2)?;
    weight.expect_rank("linear", 2)?;
    let (n, d) = (input.dims()[0], input.dims()[1]);
    let (m, wd) = (weight.dims()[0], weight.dims()[1]);
    if wd != d {
        return Err(Error::dim("linear", "D", format!("input width {d} vs weight width {wd}")));
    }
    if let Some(b) = bias {
        if b.dims() != [m] {
            return Err(Error::dim("linear", "M", format!("bias dims {:?} vs {m} outputs", b.dims())));
        }
    }
    Ok((n, d, m))
}

/// `[N, D] x [M, D]^T + [M] -> [N, M]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, d, m) = linear_shapes(input, weight, bias)?;
    let mut out = vec![T::zero(); n * m];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    T::gemm(n, d, m, T::one(), input.data(), d as isize, 1, weight.data(), 1, d as isize, T::one(), &mut out, m as isize, 1);
    Tensor::new(vec![n, m], out)
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (n, d, m) = linear_shapes(input, weight, None)?;
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, m, d, T::one(), dy, m as isize, 1, weight.data(), d as isize, 1, T::zero(), &mut dx, d as isize, 1);
    let mut dw = vec![T::zero(); m * d];
    T::gemm(m, n, d, T::one(), dy, 1, m as isize, input.data(), d as isize, 1, T::zero(), &mut dw, d as isize, 1);
    let mut db = vec![T::zero(); m];
    for row in dy.chunks_exact(m) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![n, d], dx)?,
        weight: Tensor::new(vec![m, d], dw)?,
        bias: Tensor::new(vec![m], db)?,
    })
}
