//! Synthetic age-labelled "brain" phantoms.
//!
//! An elliptical brain with radial banding sits among a maternal ring and
//! brain-intensity clutter blobs, under additive Gaussian noise. Age drives
//! both the brain's mean radius and the number of bands, so a model can read
//! age from size on the full image and from texture on a tight crop.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::attention::{BBox, CoordSpace};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::SplitMix64;

pub const AGE_MIN: f64 = 125.0;
pub const AGE_MAX: f64 = 273.0;

const RADIUS_AT_MIN: f64 = 0.10;
const RADIUS_AT_MAX: f64 = 0.22;
const CYCLES_AT_MIN: f64 = 3.0;
const CYCLES_AT_MAX: f64 = 9.0;
const NOISE_SIGMA: f64 = 8.0;
const BACKGROUND: f64 = 15.0;
const BRAIN_LEVEL: f64 = 140.0;
const BRAIN_BAND_AMPLITUDE: f64 = 45.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Axial,
    Sagittal,
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];

    pub fn index(self) -> usize {
        match self {
            View::Axial => 0,
            View::Sagittal => 1,
            View::Coronal => 2,
        }
    }

    /// Ellipse aspect ratio (major / minor axis).
    pub fn aspect(self) -> f64 {
        match self {
            View::Axial => 1.0,
            View::Sagittal => 1.3,
            View::Coronal => 0.8,
        }
    }

    fn texture_phase(self) -> f64 {
        self.index() as f64 * 2.0 * PI / 3.0
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Axial => "axial",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        })
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(View::Axial),
            "sagittal" => Ok(View::Sagittal),
            "coronal" => Ok(View::Coronal),
            other => Err(Error::Config(format!("unknown view {other:?} (axial|sagittal|coronal)"))),
        }
    }
}

/// Position of `age` along the supported range, in `[0, 1]`.
fn age_fraction(age: f64) -> f64 {
    (age - AGE_MIN) / (AGE_MAX - AGE_MIN)
}

/// Mean brain radius in pixels on a `canvas`-sized image.
pub fn brain_radius(age: f64, canvas: usize) -> f64 {
    canvas as f64 * (RADIUS_AT_MIN + (RADIUS_AT_MAX - RADIUS_AT_MIN) * age_fraction(age))
}

/// Number of radial bands across the brain.
pub fn band_cycles(age: f64) -> f64 {
    CYCLES_AT_MIN + (CYCLES_AT_MAX - CYCLES_AT_MIN) * age_fraction(age)
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Grid<u8>,
    pub gt_box: BBox,
    /// Pixels inside the rendered brain ellipse.
    pub brain_pixels: usize,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    semi_u: f64,
    semi_v: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized elliptical radius of pixel centre `(r, c)`; `<= 1` inside.
    fn rho(&self, r: usize, c: usize) -> f64 {
        let dy = r as f64 - self.cy;
        let dx = c as f64 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        libm::sqrt((u / self.semi_u) * (u / self.semi_u) + (v / self.semi_v) * (v / self.semi_v))
    }

    fn half_extents(&self) -> (f64, f64) {
        let (a, b) = (self.semi_u, self.semi_v);
        let ey = libm::sqrt(a * a * self.sin * self.sin + b * b * self.cos * self.cos);
        let ex = libm::sqrt(a * a * self.cos * self.cos + b * b * self.sin * self.sin);
        (ey, ex)
    }
}

/// Renders one phantom; all randomness comes from `rng`.
pub fn generate_phantom(age: f64, view: View, canvas: usize, rng: &mut SplitMix64) -> Result<Phantom> {
    if !(AGE_MIN..=AGE_MAX).contains(&age) {
        return Err(Error::Config(format!("age {age} outside [{AGE_MIN}, {AGE_MAX}] days")));
    }
    if canvas < 32 {
        return Err(Error::Config(format!("canvas {canvas} too small")));
    }
    let s = canvas as f64;
    let radius = brain_radius(age, canvas);
    let root = libm::sqrt(view.aspect());
    let theta = rng.uniform(0.0, PI);
    let mut brain = Ellipse {
        cy: 0.0,
        cx: 0.0,
        semi_u: radius * root,
        semi_v: radius / root,
        cos: libm::cos(theta),
        sin: libm::sin(theta),
    };
    let (ey, ex) = brain.half_extents();
    // keep the whole ellipse at least 2 px away from the border
    brain.cy = rng.uniform(ey + 2.0, s - 3.0 - ey);
    brain.cx = rng.uniform(ex + 2.0, s - 3.0 - ex);

    let ring = Ellipse {
        cy: s / 2.0 + rng.uniform(-0.04, 0.04) * s,
        cx: s / 2.0 + rng.uniform(-0.04, 0.04) * s,
        semi_u: rng.uniform(0.40, 0.46) * s,
        semi_v: rng.uniform(0.40, 0.46) * s,
        cos: 1.0,
        sin: 0.0,
    };
    let ring_inner = 1.0 - 0.05 * s / ((ring.semi_u + ring.semi_v) / 2.0);
    let ring_level = rng.uniform(70.0, 100.0);

    let n_blobs = 3 + rng.below(4) as usize;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let cy = rng.uniform(0.0, s);
            let cx = rng.uniform(0.0, s);
            let r = rng.uniform(0.04, 0.10) * s;
            let level = rng.uniform(110.0, 190.0);
            (cy, cx, r, level)
        })
        .collect();

    let cycles = band_cycles(age);
    let phase = view.texture_phase();
    let mut field = vec![BACKGROUND; canvas * canvas];
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    let mut brain_pixels = 0;
    for r in 0..canvas {
        for c in 0..canvas {
            let mut v = BACKGROUND;
            let rho_ring = ring.rho(r, c);
            if rho_ring <= 1.0 && rho_ring >= ring_inner {
                v = ring_level;
            }
            for &(by, bx, br, level) in &blobs {
                let d = libm::sqrt((r as f64 - by).powi(2) + (c as f64 - bx).powi(2));
                let w = ((br - d) / (0.3 * br)).clamp(0.0, 1.0);
                v = v.max(BACKGROUND + (level - BACKGROUND) * w);
            }
            let rho = brain.rho(r, c);
            if rho <= 1.0 {
                v = BRAIN_LEVEL + BRAIN_BAND_AMPLITUDE * libm::cos(2.0 * PI * cycles * rho + phase);
                brain_pixels += 1;
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
            field[r * canvas + c] = v;
        }
    }
    let data = field
        .into_iter()
        .map(|v| libm::round(v + NOISE_SIGMA * rng.normal()).clamp(0.0, 255.0) as u8)
        .collect();
    Ok(Phantom {
        image: Grid::new(canvas, canvas, data),
        gt_box: BBox::new(r0, c0, r1, c1, CoordSpace::Image)?,
        brain_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bytes() {
        let a = generate_phantom(200.0, View::Sagittal, 96, &mut SplitMix64::new(5)).unwrap();
        let b = generate_phantom(200.0, View::Sagittal, 96, &mut SplitMix64::new(5)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt_box, b.gt_box);
    }

    #[test]
    fn older_brains_are_larger() {
        for seed in 0..20 {
            let young = generate_phantom(125.0, View::Axial, 96, &mut SplitMix64::new(seed)).unwrap();
            let old = generate_phantom(273.0, View::Axial, 96, &mut SplitMix64::new(seed)).unwrap();
            assert!(old.brain_pixels > young.brain_pixels);
        }
    }

    #[test]
    fn gt_box_strictly_inside() {
        for seed in 0..50 {
            for view in View::ALL {
                for age in [125.0, 200.0, 273.0] {
                    let p = generate_phantom(age, view, 96, &mut SplitMix64::new(seed)).unwrap();
                    let b = p.gt_box;
                    assert!(b.r0 >= 1 && b.c0 >= 1 && b.r1 <= 94 && b.c1 <= 94, "{b:?}");
                }
            }
        }
    }

    #[test]
    fn age_out_of_range() {
        assert!(generate_phantom(124.9, View::Axial, 96, &mut SplitMix64::new(0)).is_err());
        assert!(generate_phantom(273.5, View::Axial, 96, &mut SplitMix64::new(0)).is_err());
    }

    #[test]
    fn radius_and_cycle_laws() {
        assert!((brain_radius(125.0, 100) - 10.0).abs() < 1e-12);
        assert!((brain_radius(273.0, 100) - 22.0).abs() < 1e-12);
        assert_eq!(band_cycles(125.0), 3.0);
        assert_eq!(band_cycles(273.0), 9.0);
    }
}
