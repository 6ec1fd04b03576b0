//! Attention heatmap, thresholding, minimum-perimeter ROI search and cropping.
//!
//! The heatmap is the channel-wise maximum of the last-stage feature maps,
//! min-max normalized to `[0, 1]`. The ROI is the axis-aligned box of least
//! perimeter that covers at least a fraction `kappa` of the pixels above the
//! threshold, found by exact search over a prefix-sum count table.

use std::fmt;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spread below which a heatmap is treated as constant.
pub const DEGENERATE_SPREAD: f64 = 1e-8;

pub const DEFAULT_KAPPA: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CoordSpace {
    Feature,
    Image,
}

/// Inclusive axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
    pub space: CoordSpace,
}

impl BBox {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize, space: CoordSpace) -> Result<Self> {
        if r0 > r1 || c0 > c1 {
            return Err(Error::Config(format!("box ({r0},{c0})-({r1},{c1}) has inverted bounds")));
        }
        Ok(BBox { r0, c0, r1, c1, space })
    }

    pub fn full(rows: usize, cols: usize, space: CoordSpace) -> Self {
        BBox {
            r0: 0,
            c0: 0,
            r1: rows - 1,
            c1: cols - 1,
            space,
        }
    }

    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn perimeter(&self) -> usize {
        2 * (self.height() + self.width())
    }

    pub fn fits(&self, rows: usize, cols: usize) -> bool {
        self.r1 < rows && self.c1 < cols
    }
}

impl fmt::Display for BBox {
    /// `r0 c0 r1 c1`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.r0, self.c0, self.r1, self.c1)
    }
}

/// Normalized heatmap at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Grid<f64>,
    pub source_stride: usize,
    /// Raw map was (numerically) constant; values are all zero.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub bits: Grid<bool>,
    pub tau: f64,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.data().iter().filter(|&&b| b).count()
    }
}

/// Channel-wise maximum of `[C, h, w]` (or `[1, C, h, w]`) feature maps.
pub fn max_intensity_projection<T: Scalar>(features: &Tensor<T>) -> Result<Grid<f64>> {
    let d = features.dims();
    let (c, h, w) = match d.len() {
        3 => (d[0], d[1], d[2]),
        4 if d[0] == 1 => (d[1], d[2], d[3]),
        _ => return Err(Error::dim("max_intensity_projection", "rank", format!("expected [C,h,w], got {d:?}"))),
    };
    let x = features.data();
    let mut out = vec![f64::NEG_INFINITY; h * w];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&x[ch * h * w..(ch + 1) * h * w]) {
            let v = v.to_f64_lossy();
            if v > *o || v.is_nan() {
                *o = v;
            }
        }
    }
    Ok(Grid::new(h, w, out))
}

/// Min-max normalization to `[0, 1]`; near-constant input yields a degenerate map.
pub fn normalize_heatmap(raw: &Grid<f64>, source_stride: usize) -> Result<AttentionMap> {
    if raw.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap contains NaN or infinity".into()));
    }
    let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    if spread < DEGENERATE_SPREAD {
        return Ok(AttentionMap {
            values: Grid::filled(raw.rows(), raw.cols(), 0.0),
            source_stride,
            degenerate: true,
        });
    }
    Ok(AttentionMap {
        values: raw.map(|v| (v - lo) / spread),
        source_stride,
        degenerate: false,
    })
}

pub fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(())
}

pub fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::Config(format!("coverage {kappa} outside (0, 1]")));
    }
    Ok(())
}

/// Strict `value > tau` thresholding.
pub fn binarize(map: &AttentionMap, tau: f64) -> Result<Mask> {
    check_tau(tau)?;
    Ok(Mask {
        bits: map.values.map(|v| v > tau),
        tau,
    })
}

/// Number of active pixels a box must cover: `ceil(kappa * n)`, at least 1.
///
/// A `1e-9` slack absorbs representation error in `kappa` (`0.95 * 20` is
/// not exactly 19 in binary floating point).
pub fn required_count(kappa: f64, active: usize) -> usize {
    ((kappa * active as f64 - 1e-9).ceil() as usize).clamp(1, active.max(1))
}

/// Inclusive 2D prefix sums of a mask: `table[(r+1)*(w+1) + (c+1)]` counts `[0..=r, 0..=c]`.
struct CountTable {
    cols: usize,
    table: Vec<u32>,
}

impl CountTable {
    fn new(mask: &Grid<bool>) -> Self {
        let (h, w) = (mask.rows(), mask.cols());
        let stride = w + 1;
        let mut table = vec![0u32; (h + 1) * stride];
        for r in 0..h {
            let mut row_sum = 0;
            for c in 0..w {
                row_sum += mask.get(r, c) as u32;
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row_sum;
            }
        }
        CountTable { cols: stride, table }
    }

    #[inline]
    fn count(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> usize {
        let s = self.cols;
        let t = &self.table;
        (t[(r1 + 1) * s + c1 + 1] + t[r0 * s + c0] - t[r0 * s + c1 + 1] - t[(r1 + 1) * s + c0]) as usize
    }
}

/// Least-perimeter box covering at least `ceil(kappa * active)` active pixels.
///
/// Ties: smaller area, then smaller `r0`, `c0`, `r1`.
pub fn min_perimeter_box(mask: &Mask, kappa: f64) -> Result<BBox> {
    check_kappa(kappa)?;
    let bits = &mask.bits;
    let (h, w) = (bits.rows(), bits.cols());
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    let mut active = 0;
    for r in 0..h {
        for c in 0..w {
            if bits.get(r, c) {
                active += 1;
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    if active == 0 {
        return Err(Error::NoActivation);
    }
    let need = required_count(kappa, active);
    let counts = CountTable::new(bits);
    // (perimeter, area, r0, c0, r1, c1)
    let mut best: Option<(usize, usize, usize, usize, usize, usize)> = None;
    for r0 in rmin..=rmax {
        for r1 in r0..=rmax {
            if counts.count(r0, cmin, r1, cmax) < need {
                continue;
            }
            for c0 in cmin..=cmax {
                if counts.count(r0, c0, r1, cmax) < need {
                    break;
                }
                // count grows with c1, and so do perimeter and area: the first
                // feasible c1 is the best box for this (r0, r1, c0).
                let Some(c1) = (c0..=cmax).find(|&c1| counts.count(r0, c0, r1, c1) >= need) else {
                    continue;
                };
                let (hh, ww) = (r1 - r0 + 1, c1 - c0 + 1);
                let key = (2 * (hh + ww), hh * ww, r0, c0, r1, c1);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
        }
    }
    let (_, _, r0, c0, r1, c1) = best.expect("the tight box is always feasible");
    Ok(BBox {
        r0,
        c0,
        r1,
        c1,
        space: CoordSpace::Feature,
    })
}

fn expand_axis(lo: usize, hi: usize, min_side: usize, extent: usize) -> (usize, usize) {
    let side = hi - lo + 1;
    let target = min_side.min(extent);
    if side >= target {
        return (lo, hi);
    }
    let grow = target - side;
    let mut lo = lo as isize - (grow / 2) as isize;
    let mut hi = hi as isize + (grow - grow / 2) as isize;
    if lo < 0 {
        hi -= lo;
        lo = 0;
    }
    let last = extent as isize - 1;
    if hi > last {
        lo -= hi - last;
        hi = last;
    }
    (lo.max(0) as usize, hi as usize)
}

/// Scales a feature-grid box by `stride`, clamps to the image and grows each
/// side symmetrically to at least `min_side` pixels.
pub fn box_to_image_space(b: &BBox, stride: usize, image_size: usize, min_side: usize) -> BBox {
    let last = image_size - 1;
    let r0 = (b.r0 * stride).min(last);
    let c0 = (b.c0 * stride).min(last);
    let r1 = ((b.r1 + 1) * stride - 1).min(last);
    let c1 = ((b.c1 + 1) * stride - 1).min(last);
    let (r0, r1) = expand_axis(r0, r1, min_side, image_size);
    let (c0, c1) = expand_axis(c0, c1, min_side, image_size);
    BBox {
        r0,
        c0,
        r1,
        c1,
        space: CoordSpace::Image,
    }
}

/// Bilinear, align-corners resampling of `image[box]` to `out_size x out_size`.
pub fn crop_resize<T: Scalar>(image: &Grid<T>, b: &BBox, out_size: usize) -> Result<Grid<T>> {
    if !b.fits(image.rows(), image.cols()) || b.r0 > b.r1 || b.c0 > b.c1 {
        return Err(Error::Config(format!(
            "crop box {b} outside {}x{} image",
            image.rows(),
            image.cols()
        )));
    }
    if out_size == 0 {
        return Err(Error::Config("crop output size must be positive".into()));
    }
    let denom = (out_size - 1).max(1) as f64;
    let axis = |start: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_size)
            .map(|i| {
                let pos = start as f64 + (i * (len - 1)) as f64 / denom;
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(start + len - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(b.r0, b.height());
    let xs = axis(b.c0, b.width());
    let mut out = Vec::with_capacity(out_size * out_size);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let v00 = image.get(y0, x0).to_f64_lossy();
            let v01 = image.get(y0, x1).to_f64_lossy();
            let v10 = image.get(y1, x0).to_f64_lossy();
            let v11 = image.get(y1, x1).to_f64_lossy();
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            out.push(T::from_f64_lossy(top + (bottom - top) * fy));
        }
    }
    Ok(Grid::new(out_size, out_size, out))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiParams {
    pub tau: f64,
    pub kappa: f64,
    /// Feature-grid cell size in pixels.
    pub stride: usize,
    pub out_size: usize,
    pub min_side: usize,
}

/// Everything produced on the way from feature maps to a local-branch input.
#[derive(Clone, Debug)]
pub struct Roi<T> {
    pub map: AttentionMap,
    pub feature_box: Option<BBox>,
    pub image_box: BBox,
    pub crop: Grid<T>,
    /// Degenerate heatmap or empty mask: the full image was used.
    pub fallback: bool,
}

/// Heatmap, box and crop for one image; falls back to the full image when the
/// heatmap carries no spatial signal.
pub fn extract_roi<T: Scalar>(features: &Tensor<T>, image: &Grid<T>, p: &RoiParams) -> Result<Roi<T>> {
    check_tau(p.tau)?;
    check_kappa(p.kappa)?;
    let raw = max_intensity_projection(features)?;
    let map = normalize_heatmap(&raw, p.stride)?;
    let full = BBox::full(image.rows(), image.cols(), CoordSpace::Image);
    let feature_box = if map.degenerate {
        None
    } else {
        match min_perimeter_box(&binarize(&map, p.tau)?, p.kappa) {
            Ok(b) => Some(b),
            Err(Error::NoActivation) => None,
            Err(e) => return Err(e),
        }
    };
    let image_box = match &feature_box {
        Some(b) => box_to_image_space(b, p.stride, image.rows().min(image.cols()), p.min_side),
        None => full,
    };
    let crop = crop_resize(image, &image_box, p.out_size)?;
    Ok(Roi {
        fallback: feature_box.is_none(),
        map,
        feature_box,
        image_box,
        crop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask {
            bits: Grid::from_fn(h, w, |r, c| rows[r].as_bytes()[c] == b'#'),
            tau: 0.5,
        }
    }

    #[test]
    fn mip_elementwise_max() {
        let f = Tensor::<f64>::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 4., 3., 2., 1.]).unwrap();
        assert_eq!(max_intensity_projection(&f).unwrap().data(), &[4., 3., 3., 4.]);
        let one = Tensor::<f64>::from_f64(&[1, 2, 2], &[5., 6., 7., 8.]).unwrap();
        assert_eq!(max_intensity_projection(&one).unwrap().data(), &[5., 6., 7., 8.]);
    }

    #[test]
    fn normalize_affine() {
        let raw = Grid::new(2, 2, vec![1., 2., 3., 4.]);
        let m = normalize_heatmap(&raw, 8).unwrap();
        assert!(!m.degenerate);
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in m.values.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let c = normalize_heatmap(&Grid::filled(3, 3, 2.5), 8).unwrap();
        assert!(c.degenerate);
        assert!(normalize_heatmap(&Grid::new(1, 2, vec![0.0, f64::NAN]), 8).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let map = AttentionMap {
            values: Grid::new(1, 3, vec![0.2, 0.3, 0.4]),
            source_stride: 1,
            degenerate: false,
        };
        assert_eq!(binarize(&map, 0.3).unwrap().bits.data(), &[false, false, true]);
        assert!(binarize(&map, 0.0).is_err());
        assert!(binarize(&map, 1.0).is_err());
    }

    #[test]
    fn single_pixel_box() {
        let mut bits = Grid::filled(5, 6, false);
        bits.set(2, 3, true);
        let b = min_perimeter_box(&Mask { bits, tau: 0.3 }, 1.0).unwrap();
        assert_eq!((b.r0, b.c0, b.r1, b.c1), (2, 3, 2, 3));
    }

    #[test]
    fn full_mask_full_box() {
        let m = Mask {
            bits: Grid::filled(4, 7, true),
            tau: 0.3,
        };
        assert_eq!(min_perimeter_box(&m, 1.0).unwrap(), BBox::full(4, 7, CoordSpace::Feature));
    }

    #[test]
    fn empty_mask_is_error() {
        let m = Mask {
            bits: Grid::filled(3, 3, false),
            tau: 0.3,
        };
        assert!(matches!(min_perimeter_box(&m, 0.9), Err(Error::NoActivation)));
    }

    #[test]
    fn coverage_drops_outlier() {
        let m = mask_from(&[
            "#.......", //
            "........", //
            "....###.", //
            "....###.", //
            "....###.", //
        ]);
        // 10 active; kappa 0.9 needs 9 -> the 3x3 block
        let b = min_perimeter_box(&m, 0.9).unwrap();
        assert_eq!((b.r0, b.c0, b.r1, b.c1), (2, 4, 4, 6));
        let t = min_perimeter_box(&m, 1.0).unwrap();
        assert_eq!((t.r0, t.c0, t.r1, t.c1), (0, 0, 4, 6));
    }

    #[test]
    fn required_count_rounding() {
        assert_eq!(required_count(0.95, 20), 19);
        assert_eq!(required_count(0.5, 3), 2);
        assert_eq!(required_count(1.0, 7), 7);
        assert_eq!(required_count(0.01, 7), 1);
    }

    #[test]
    fn image_space_scaling() {
        let b = BBox::new(0, 0, 6, 6, CoordSpace::Feature).unwrap();
        assert_eq!(box_to_image_space(&b, 32, 224, 16), BBox::full(224, 224, CoordSpace::Image));
        let b = BBox::new(2, 2, 2, 2, CoordSpace::Feature).unwrap();
        let s = box_to_image_space(&b, 32, 224, 16);
        assert_eq!((s.r0, s.c0, s.r1, s.c1), (64, 64, 95, 95));
    }

    #[test]
    fn image_space_expansion_at_corner() {
        let b = BBox::new(0, 11, 0, 11, CoordSpace::Feature).unwrap();
        let s = box_to_image_space(&b, 8, 96, 20);
        assert_eq!(s.height(), 20);
        assert_eq!(s.width(), 20);
        assert_eq!((s.r0, s.c1), (0, 95));
    }

    #[test]
    fn crop_identity() {
        let img = Grid::from_fn(5, 5, |r, c| (r * 5 + c) as f64 * 0.37);
        let out = crop_resize(&img, &BBox::full(5, 5, CoordSpace::Image), 5).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_bilinear_upsample() {
        let img = Grid::new(2, 2, vec![0.0, 1.0, 1.0, 2.0]);
        let out = crop_resize(&img, &BBox::full(2, 2, CoordSpace::Image), 3).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 0.5, 1.0, 1.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn crop_constant_and_out_of_bounds() {
        let img = Grid::filled(6, 6, 3.25f32);
        let b = BBox::new(1, 2, 4, 3, CoordSpace::Image).unwrap();
        assert!(crop_resize(&img, &b, 7).unwrap().data().iter().all(|&v| v == 3.25));
        let bad = BBox::new(0, 0, 6, 2, CoordSpace::Image).unwrap();
        assert!(crop_resize(&img, &bad, 4).is_err());
    }

    #[test]
    fn roi_falls_back_on_constant_features() {
        let f = Tensor::<f32>::full(&[4, 12, 12], 0.7);
        let img = Grid::from_fn(96, 96, |r, c| (r + c) as f32);
        let p = RoiParams {
            tau: 0.3,
            kappa: 0.95,
            stride: 8,
            out_size: 96,
            min_side: 8,
        };
        let roi = extract_roi(&f, &img, &p).unwrap();
        assert!(roi.fallback);
        assert_eq!(roi.image_box, BBox::full(96, 96, CoordSpace::Image));
        assert_eq!(roi.crop, img);
    }

    #[test]
    fn roi_high_tau_keeps_min_side() {
        let f = Tensor::<f32>::from_fn(&[2, 12, 12], |i| ((i * 37) % 101) as f32);
        let img = Grid::filled(96, 96, 1.0f32);
        let p = RoiParams {
            tau: 0.99,
            kappa: 0.95,
            stride: 8,
            out_size: 96,
            min_side: 8,
        };
        let roi = extract_roi(&f, &img, &p).unwrap();
        assert!(!roi.fallback);
        assert!(roi.image_box.height() >= 8 && roi.image_box.width() >= 8);
        assert!(roi.image_box.fits(96, 96));
    }
}
