//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the code under test except to build inputs and
//! to evaluate a loss value; every reference answer is computed from scratch.
#![allow(dead_code)]

pub mod grad_cases;

use std::fs;
use std::path::Path;

use attnage::attention::{min_perimeter_box, required_count};
use attnage::data::dataset::MANIFEST_FILE;
use attnage::rng::SplitMix64;
use attnage::{Graph64, Grid, Mask, Result, Tensor64, Var};
use sha2::{Digest, Sha256};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn random_tensor(rng: &mut SplitMix64, dims: &[usize], lo: f64, hi: f64) -> Tensor64 {
    Tensor64::from_fn(dims, |_| rng.uniform(lo, hi))
}

/// Values with pairwise gaps of at least `gap`, in random order, so that max
/// selection and ReLU kinks stay far from the finite-difference step.
pub fn spaced_tensor(rng: &mut SplitMix64, dims: &[usize], gap: f64) -> Tensor64 {
    let n: usize = dims.iter().product();
    let mut values: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap + rng.uniform(-0.2, 0.2) * gap)
        .collect();
    rng.shuffle(&mut values);
    Tensor64::new(dims.to_vec(), values).unwrap()
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst norm-wise relative error between backprop and central differences,
/// over all inputs of `f`.
///
/// The error for one input is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradcheck(inputs: &[Tensor64], f: impl Fn(&mut Graph64, &[Var]) -> Result<Var>) -> f64 {
    let loss_at = |xs: &[Tensor64]| -> f64 {
        let mut g = Graph64::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &vars).unwrap();
        g.value(loss).data()[0]
    };

    let mut g = Graph64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor64> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        let mut numeric = Vec::with_capacity(xs[i].numel());
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&xs);
            xs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let a = analytic[i].data();
        let diff = l2(a.iter().zip(&numeric).map(|(x, y)| x - y));
        let scale = l2(a.iter().copied()).max(l2(numeric.iter().copied())).max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Least-perimeter box by exhaustive search; ties by area then `(r0, c0, r1, c1)`.
/// `need` is the number of active cells the box must contain.
pub fn brute_force_box(bits: &[Vec<bool>], need: usize) -> Option<(usize, usize, usize, usize)> {
    let h = bits.len();
    let w = bits.first().map_or(0, |r| r.len());
    let mut best: Option<(usize, usize, usize, usize, usize, usize)> = None;
    for r0 in 0..h {
        for r1 in r0..h {
            for c0 in 0..w {
                for c1 in c0..w {
                    let mut count = 0;
                    for row in &bits[r0..=r1] {
                        count += row[c0..=c1].iter().filter(|&&b| b).count();
                    }
                    if count < need || count == 0 {
                        continue;
                    }
                    let (hh, ww) = (r1 - r0 + 1, c1 - c0 + 1);
                    let key = (2 * (hh + ww), hh * ww, r0, c0, r1, c1);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
        }
    }
    best.map(|(_, _, r0, c0, r1, c1)| (r0, c0, r1, c1))
}

/// Smallest box containing every active cell.
pub fn tight_box(bits: &[Vec<bool>]) -> Option<(usize, usize, usize, usize)> {
    let mut out: Option<(usize, usize, usize, usize)> = None;
    for (r, row) in bits.iter().enumerate() {
        for (c, &b) in row.iter().enumerate() {
            if b {
                out = Some(match out {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    out
}

pub fn r2_reference(y: &[f64], p: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

pub fn mae_reference(y: &[f64], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

/// IoU by painting both boxes on a pixel canvas and counting.
pub fn iou_by_pixels(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), side: usize) -> f64 {
    let inside = |bx: (usize, usize, usize, usize), r: usize, c: usize| r >= bx.0 && r <= bx.2 && c >= bx.1 && c <= bx.3;
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..side {
        for c in 0..side {
            let (ia, ib) = (inside(a, r, c), inside(b, r, c));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}

/// Ordinary least squares `y ~ a + b x`, returning in-sample R².
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let pred: Vec<f64> = x.iter().map(|v| a + b * v).collect();
    r2_reference(y, &pred)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// kappa as tenths, so the required count is exact integer arithmetic.
pub const KAPPA_TENTHS: [usize; 3] = [5, 9, 10];

/// A random mask of at most 12x12 with at least one active cell.
pub fn random_mask(rng: &mut SplitMix64) -> Vec<Vec<bool>> {
    loop {
        let h = 1 + rng.below(12) as usize;
        let w = 1 + rng.below(12) as usize;
        let density = rng.uniform(0.02, 0.9);
        let bits: Vec<Vec<bool>> = (0..h).map(|_| (0..w).map(|_| rng.next_f64() < density).collect()).collect();
        if bits.iter().flatten().any(|&b| b) {
            return bits;
        }
    }
}

pub fn to_mask(bits: &[Vec<bool>]) -> Mask {
    let (h, w) = (bits.len(), bits[0].len());
    Mask {
        bits: Grid::from_fn(h, w, |r, c| bits[r][c]),
        tau: 0.5,
    }
}

/// Compares the box search with [`brute_force_box`] on `masks` random masks
/// for every kappa in [`KAPPA_TENTHS`], and with [`tight_box`] at kappa 1.
/// Returns a description of the first disagreement.
pub fn box_oracle(masks: usize, seed: u64) -> std::result::Result<(), String> {
    let mut rng = SplitMix64::new(seed);
    for case in 0..masks {
        let bits = random_mask(&mut rng);
        let mask = to_mask(&bits);
        let active = bits.iter().flatten().filter(|&&b| b).count();
        for tenths in KAPPA_TENTHS {
            let kappa = tenths as f64 / 10.0;
            let need = (tenths * active).div_ceil(10);
            if required_count(kappa, active) != need {
                return Err(format!("case {case}: kappa {kappa} of {active} should need {need}"));
            }
            let got = min_perimeter_box(&mask, kappa).map_err(|e| e.to_string())?;
            let got = (got.r0, got.c0, got.r1, got.c1);
            let want = brute_force_box(&bits, need);
            if Some(got) != want {
                return Err(format!("case {case} kappa {kappa}: got {got:?}, want {want:?} for {bits:?}"));
            }
            if tenths == 10 && Some(got) != tight_box(&bits) {
                return Err(format!("case {case}: full coverage {got:?} is not the tight box"));
            }
        }
    }
    Ok(())
}

/// Digest of the 10-subject desk dataset generated with seed 7.
pub const GOLDEN_DIGEST: &str = "e72f49ad542a20509c957fe6f514c6cb1db18fbb3f2b28399884c91105ea71fb";

/// SHA-256 over the manifest followed by every image, in file-name order.
/// Each file contributes its relative path, a NUL, its length and its bytes.
pub fn dataset_digest(root: &Path) -> String {
    let mut files = vec![MANIFEST_FILE.to_string()];
    let mut images: Vec<String> = fs::read_dir(root.join("images"))
        .unwrap()
        .map(|e| format!("images/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    images.sort();
    files.extend(images);
    let mut h = Sha256::new();
    for rel in &files {
        let bytes = fs::read(root.join(rel)).unwrap();
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
