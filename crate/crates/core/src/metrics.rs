//! Regression and localization metrics, computed in `f64` days.

use crate::attention::BBox;
use crate::error::{Error, Result};

fn check_pair(op: &'static str, y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim(op, "n", format!("{} targets vs {} predictions", y_true.len(), y_pred.len())));
    }
    if y_true.is_empty() {
        return Err(Error::Data(format!("{op}: empty input")));
    }
    Ok(())
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2_score(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair("r2_score", y_true, y_pred)?;
    if y_true.len() < 2 {
        return Err(Error::Data("r2_score: need at least two samples".into()));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Data("r2_score: y_true is constant".into()));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p) * (y - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair("mae", y_true, y_pred)?;
    Ok(y_true.iter().zip(y_pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / y_true.len() as f64)
}

/// Intersection over union with inclusive pixel bounds.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.space != b.space {
        return Err(Error::Config(format!("iou between {:?} and {:?} boxes", a.space, b.space)));
    }
    let r0 = a.r0.max(b.r0);
    let c0 = a.c0.max(b.c0);
    let r1 = a.r1.min(b.r1);
    let c1 = a.c1.min(b.c1);
    let inter = if r0 <= r1 && c0 <= c1 { (r1 - r0 + 1) * (c1 - c0 + 1) } else { 0 };
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CoordSpace;

    fn bx(r0: usize, c0: usize, r1: usize, c1: usize) -> BBox {
        BBox::new(r0, c0, r1, c1, CoordSpace::Image).unwrap()
    }

    #[test]
    fn r2_examples() {
        assert_eq!(r2_score(&[1., 2., 3.], &[1., 2., 3.]).unwrap(), 1.0);
        assert_eq!(r2_score(&[1., 2., 3.], &[2., 2., 2.]).unwrap(), 0.0);
        assert!((r2_score(&[1., 2., 3.], &[1., 2., 4.]).unwrap() - 0.5).abs() < 1e-15);
        assert!(r2_score(&[3., 3., 3.], &[1., 2., 3.]).is_err());
        assert!(r2_score(&[1.], &[1.]).is_err());
        assert!(r2_score(&[1., 2.], &[1.]).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[4., 5.], &[4., 5.]).unwrap(), 0.0);
        assert_eq!(mae(&[4., 5.], &[5., 4.]).unwrap(), 1.0);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(2, 2, 5, 5), &bx(2, 2, 5, 5)).unwrap(), 1.0);
        assert_eq!(iou(&bx(0, 0, 1, 1), &bx(3, 3, 4, 4)).unwrap(), 0.0);
        assert_eq!(iou(&bx(0, 0, 1, 1), &bx(0, 0, 3, 3)).unwrap(), 0.25);
        let f = BBox::new(0, 0, 1, 1, CoordSpace::Feature).unwrap();
        assert!(iou(&f, &bx(0, 0, 1, 1)).is_err());
    }
}
