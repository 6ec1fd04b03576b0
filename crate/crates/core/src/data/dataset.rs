//! Manifest CSV, dataset generation and subject-level splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{BBox, CoordSpace};
use crate::backbone::Profile;
use crate::data::pgm::{read_pgm, write_pgm};
use crate::data::phantom::{generate_phantom, View, AGE_MAX, AGE_MIN};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{derive_seed, SplitMix64};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "sample_id,view,age_days,split,image_path,box_r0,box_c0,box_r1,box_c1";

/// Stream index for per-subject age draws (views use 0..=2).
const AGE_STREAM: u64 = 3;
const SPLIT_STREAM: u64 = 0x5911;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train|val|test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Subject identifier; shared by the three views of one subject.
    pub sample_id: u64,
    pub view: View,
    pub age_days: f64,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub gt_box: BBox,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<Sample>,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for s in &self.rows {
            let b = &s.gt_box;
            out.push_str(&format!(
                "{},{},{:.2},{},{},{},{},{},{}\n",
                s.sample_id, s.view, s.age_days, s.split, s.image_path, b.r0, b.c0, b.r1, b.c1
            ));
        }
        out
    }

    pub fn from_csv(text: &str, what: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        if header != MANIFEST_HEADER {
            return Err(Error::Parse {
                what: what.into(),
                offset: 0,
                detail: format!("unexpected header {header:?}"),
            });
        }
        let mut offset = header.len() + 1;
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                offset += 1;
                continue;
            }
            let bad = |detail: String| Error::Parse {
                what: what.into(),
                offset,
                detail,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields, got {}", f.len())));
            }
            let num = |i: usize| -> Result<usize> { f[i].parse().map_err(|_| bad(format!("field {i}: {:?} is not an integer", f[i]))) };
            let age: f64 = f[2].parse().map_err(|_| bad(format!("age {:?}", f[2])))?;
            rows.push(Sample {
                sample_id: f[0].parse().map_err(|_| bad(format!("sample_id {:?}", f[0])))?,
                view: f[1].parse()?,
                age_days: age,
                split: f[3].parse()?,
                image_path: f[4].to_string(),
                gt_box: BBox::new(num(5)?, num(6)?, num(7)?, num(8)?, CoordSpace::Image)?,
            });
            offset += line.len() + 1;
        }
        let m = Manifest { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.rows {
            if !seen.insert((s.sample_id, s.view)) {
                return Err(Error::Data(format!("duplicate sample {} for view {}", s.sample_id, s.view)));
            }
            if !(AGE_MIN..=AGE_MAX).contains(&s.age_days) {
                return Err(Error::Data(format!("sample {}: age {} out of range", s.sample_id, s.age_days)));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_csv(&text, &path.display().to_string())
    }

    /// Distinct subject ids, ascending.
    pub fn subjects(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.rows.iter().map(|s| s.sample_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn select(&self, view: View, split: Split) -> Vec<&Sample> {
        self.rows.iter().filter(|s| s.view == view && s.split == split).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Subject counts: floor for train and val, remainder to test.
    pub fn counts(&self, subjects: usize) -> (usize, usize, usize) {
        let n = subjects as f64;
        let train = (self.train * n + 1e-9).floor() as usize;
        let val = ((self.val * n + 1e-9).floor() as usize).min(subjects - train);
        (train, val, subjects - train - val)
    }
}

/// Reassigns splits by subject so all views of a subject share one split.
pub fn split_dataset(manifest: &Manifest, fractions: SplitFractions, seed: u64) -> Result<Manifest> {
    fractions.validate()?;
    let mut ids = manifest.subjects();
    SplitMix64::derived(seed, &[SPLIT_STREAM]).shuffle(&mut ids);
    let (n_train, n_val, _) = fractions.counts(ids.len());
    let assignment: BTreeMap<u64, Split> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, split)
        })
        .collect();
    let mut out = manifest.clone();
    for s in &mut out.rows {
        s.split = assignment[&s.sample_id];
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub subjects: usize,
    pub seed: u64,
    pub profile: Profile,
    pub fractions: SplitFractions,
}

impl DatasetConfig {
    pub fn new(subjects: usize, seed: u64, profile: Profile) -> Self {
        DatasetConfig {
            subjects,
            seed,
            profile,
            fractions: SplitFractions::default(),
        }
    }
}

pub fn subject_age(seed: u64, subject: u64) -> f64 {
    let u = SplitMix64::new(derive_seed(seed, &[subject, AGE_STREAM])).next_f64();
    // whole hundredths, divided once so the value equals its 2-decimal text
    let hundredths = (AGE_MIN * 100.0) as u64 + (u * (AGE_MAX - AGE_MIN) * 100.0).round() as u64;
    hundredths as f64 / 100.0
}

pub fn image_name(view: View, subject: u64) -> String {
    format!("images/{view}_{subject:04}.pgm")
}

/// Renders every subject in all three views under `out_dir`, writes the
/// manifest and returns it. Output bytes depend only on `cfg`.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.subjects == 0 {
        return Err(Error::Config("dataset needs at least one subject".into()));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let canvas = cfg.profile.input_size();
    let mut rows = Vec::with_capacity(cfg.subjects * 3);
    for id in 0..cfg.subjects as u64 {
        let age = subject_age(cfg.seed, id);
        for view in View::ALL {
            let mut rng = SplitMix64::derived(cfg.seed, &[id, view.index() as u64]);
            let phantom = generate_phantom(age, view, canvas, &mut rng)?;
            let rel = image_name(view, id);
            write_pgm(&phantom.image, &out_dir.join(&rel))?;
            rows.push(Sample {
                sample_id: id,
                view,
                age_days: age,
                split: Split::Train,
                image_path: rel,
                gt_box: phantom.gt_box,
            });
        }
    }
    let manifest = split_dataset(&Manifest { rows }, cfg.fractions, cfg.seed)?;
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// In-memory images of one (view, split) slice.
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub view: View,
    pub split: Split,
    pub ids: Vec<u64>,
    pub ages: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub images: Vec<Grid<u8>>,
}

impl ViewSet {
    pub fn load(root: &Path, manifest: &Manifest, view: View, split: Split) -> Result<Self> {
        let rows = manifest.select(view, split);
        let mut set = ViewSet {
            view,
            split,
            ids: Vec::with_capacity(rows.len()),
            ages: Vec::with_capacity(rows.len()),
            boxes: Vec::with_capacity(rows.len()),
            images: Vec::with_capacity(rows.len()),
        };
        for s in rows {
            let path: PathBuf = root.join(&s.image_path);
            set.images.push(read_pgm(&path)?);
            set.ids.push(s.sample_id);
            set.ages.push(s.age_days);
            set.boxes.push(s.gt_box);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
