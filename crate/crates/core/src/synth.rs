//! Deterministic synthetic head-CT series with planted hemorrhages.
//!
//! Each series is an elliptical skull ring around brain tissue with two
//! central ventricles. A positive subtype plants blood over a contiguous run
//! of slices; the blob shrinks toward both ends of the run. Subtypes are told
//! apart by where the blood sits relative to the skull and ventricles:
//!
//! | subtype | zone |
//! |---------|------|
//! | EDH | thick lens against the inner skull, short arc |
//! | SDH | thin crescent against the inner skull, long arc |
//! | SAH | band at mid radius, detached from the skull |
//! | IPH | round blob in the parenchyma |
//! | IVH | blood filling the ventricles |
//!
//! The zone angle is random per series, so flips and rotations keep labels
//! valid. Everything is a pure function of `(seed, series_index)`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{LabeledSeries, Manifest, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::kv::{self, KeyValues};
use crate::labels::{LabelVector, NUM_SUBTYPES};
use crate::preprocess::{self, HuVolume, PreprocessConfig};

const AIR_HU: f64 = -1000.0;
const BONE_HU: f64 = 1000.0;
const BRAIN_HU: f64 = 30.0;
const CSF_HU: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_series: usize,
    /// Inclusive range of slices per series.
    pub min_slices: usize,
    pub max_slices: usize,
    /// Square frame side in pixels.
    pub frame: usize,
    /// HU offset of blood over brain tissue.
    pub signal_hu: f64,
    /// Standard deviation of pixel noise inside the head.
    pub noise_hu: f64,
    /// Per-slice probability of flipping each subtype label.
    pub label_noise: f64,
    /// Per-series probability that each subtype is present.
    pub class_rates: [f64; NUM_SUBTYPES],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_series: 100,
            min_slices: 8,
            max_slices: 12,
            frame: 64,
            signal_hu: 40.0,
            noise_hu: 6.0,
            label_noise: 0.0,
            class_rates: [0.15, 0.3, 0.25, 0.3, 0.35],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.frame < 32 {
            return fail("frame must be at least 32 pixels");
        }
        if !(self.signal_hu > 0.0) {
            return fail("signal_hu must be positive");
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return fail("label_noise must lie in [0, 1)");
        }
        if self.class_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return fail("class rates must lie in [0, 1]");
        }
        if self.min_slices == 0 || self.min_slices > self.max_slices {
            return fail("slice range must satisfy 1 <= min <= max");
        }
        if !(self.noise_hu >= 0.0) {
            return fail("noise_hu must be non-negative");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        kv::render([
            ("seed", self.seed.to_string()),
            ("num_series", self.num_series.to_string()),
            ("min_slices", self.min_slices.to_string()),
            ("max_slices", self.max_slices.to_string()),
            ("frame", self.frame.to_string()),
            ("signal_hu", self.signal_hu.to_string()),
            ("noise_hu", self.noise_hu.to_string()),
            ("label_noise", self.label_noise.to_string()),
            ("class_rates", kv::join(&self.class_rates)),
        ])
    }

    /// Reads `synth.*`-free keys; absent keys keep their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let rates = match kv.get_list::<f64>("class_rates")? {
            None => d.class_rates,
            Some(v) => v
                .try_into()
                .map_err(|_| Error::Config("class_rates needs five values".into()))?,
        };
        let spec = Self {
            seed: kv.get_or("seed", d.seed)?,
            num_series: kv.get_or("num_series", d.num_series)?,
            min_slices: kv.get_or("min_slices", d.min_slices)?,
            max_slices: kv.get_or("max_slices", d.max_slices)?,
            frame: kv.get_or("frame", d.frame)?,
            signal_hu: kv.get_or("signal_hu", d.signal_hu)?,
            noise_hu: kv.get_or("noise_hu", d.noise_hu)?,
            label_noise: kv.get_or("label_noise", d.label_noise)?,
            class_rates: rates,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn series_id(index: usize) -> String {
    format!("S{index:05}")
}

fn series_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug)]
struct Lesion {
    subtype: usize,
    start: usize,
    len: usize,
    angle: f64,
}

impl Lesion {
    /// Blob scale in `(0.6, 1]` for slice `k`, or `None` outside the run.
    fn taper(&self, k: usize) -> Option<f64> {
        (self.start..self.start + self.len).contains(&k).then(|| {
            let t = (k - self.start) as f64 + 0.5;
            0.6 + 0.4 * (PI * t / self.len as f64).sin()
        })
    }
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Ventricle ellipse test in normalized brain coordinates; returns the
/// ellipse equation value (≤ 1 inside).
fn ventricle_level(u: f64, v: f64) -> f64 {
    [-0.16, 0.16]
        .iter()
        .map(|cx| ((u - cx) / 0.11).powi(2) + (v / 0.26).powi(2))
        .fold(f64::INFINITY, f64::min)
}

/// Whether a brain pixel at normalized position `(u, v)` (inner skull at
/// radius 1) belongs to `lesion` at taper `t`.
fn in_lesion(lesion: &Lesion, u: f64, v: f64, t: f64) -> bool {
    let rho = u.hypot(v);
    let dphi = angular_distance(v.atan2(u), lesion.angle);
    match lesion.subtype {
        // epidural: thick lens
        0 => {
            let hw = 0.45;
            dphi < hw && rho > 1.0 - 0.34 * t * (1.0 - (dphi / hw).powi(2))
        }
        // intraparenchymal: round blob
        1 => {
            let (bx, by) = (0.45 * lesion.angle.cos(), 0.45 * lesion.angle.sin());
            (u - bx).hypot(v - by) < 0.24 * t
        }
        // intraventricular
        2 => ventricle_level(u, v) <= t * t,
        // subarachnoid: detached band
        3 => dphi < 0.9 && rho > 0.58 && rho < 0.58 + 0.14 * t,
        // subdural: long thin crescent
        4 => {
            let hw = 1.25;
            dphi < hw && rho > 1.0 - 0.17 * t * (1.0 - (dphi / hw).powi(4)).sqrt()
        }
        _ => unreachable!("five subtypes"),
    }
}

/// One generated series and its per-slice labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSeries {
    pub volume: HuVolume,
    pub labels: Vec<LabelVector>,
}

pub fn generate_series(spec: &SynthSpec, index: usize) -> Result<SynthSeries> {
    spec.validate()?;
    if index >= spec.num_series {
        return Err(Error::Validation(format!(
            "series index {index} out of range for {} series",
            spec.num_series
        )));
    }
    let mut rng = series_rng(spec.seed, index as u64);
    let n = rng.random_range(spec.min_slices..=spec.max_slices);
    let f = spec.frame as f64;
    let cx = f / 2.0 + f * rng.random_range(-0.03..0.03);
    let cy = f / 2.0 + f * rng.random_range(-0.03..0.03);
    let rx = f * 0.40 * rng.random_range(0.92..1.0);
    let ry = f * 0.40 * rng.random_range(0.92..1.0);
    let skull = (f * 0.05).max(2.0);

    let mut lesions = Vec::new();
    for subtype in 0..NUM_SUBTYPES {
        let present = rng.random_bool(spec.class_rates[subtype]);
        let lo = (n / 4).max(2).min(n);
        let hi = (3 * n / 4).max(lo);
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=n - len);
        let angle = rng.random_range(0.0..TAU);
        if present {
            lesions.push(Lesion {
                subtype,
                start,
                len,
                angle,
            });
        }
    }

    let mut slices = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mid = (n as f64 - 1.0) / 2.0;
    for k in 0..n {
        let rel = if n > 1 { (k as f64 - mid) / (n as f64 / 2.0) } else { 0.0 };
        let scale = 1.0 - 0.12 * rel * rel;
        let (sx, sy) = (rx * scale, ry * scale);
        let inner = 1.0 - skull / sx.min(sy);
        let active: Vec<(Lesion, f64)> = lesions
            .iter()
            .filter_map(|l| l.taper(k).map(|t| (*l, t)))
            .collect();
        let mut slice = Vec::with_capacity(spec.frame * spec.frame);
        for y in 0..spec.frame {
            for x in 0..spec.frame {
                let dx = (x as f64 + 0.5 - cx) / sx;
                let dy = (y as f64 + 0.5 - cy) / sy;
                let rho = dx.hypot(dy);
                let noise: f64 = rng.sample(StandardNormal);
                let hu = if rho > 1.0 {
                    AIR_HU
                } else if rho > inner {
                    BONE_HU + 0.5 * spec.noise_hu * noise
                } else {
                    let (u, v) = (dx / inner, dy / inner);
                    let base = if ventricle_level(u, v) <= 1.0 { CSF_HU } else { BRAIN_HU };
                    let blood = active.iter().any(|(l, t)| in_lesion(l, u, v, *t));
                    let level = if blood { BRAIN_HU + spec.signal_hu } else { base };
                    level + spec.noise_hu * noise
                };
                slice.push(hu.round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16);
            }
        }
        slices.push(slice);

        let mut subtypes = [false; NUM_SUBTYPES];
        for (l, _) in &active {
            subtypes[l.subtype] = true;
        }
        if spec.label_noise > 0.0 {
            for s in subtypes.iter_mut() {
                if rng.random_bool(spec.label_noise) {
                    *s = !*s;
                }
            }
        }
        labels.push(LabelVector::from_subtypes(subtypes));
    }
    let volume = HuVolume::stacked(series_id(index), spec.frame, spec.frame, slices)?;
    Ok(SynthSeries { volume, labels })
}

/// Fractions of series assigned to train, validation and unlabeled splits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub unlabeled: f64,
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, unlabeled: f64) -> Result<Self> {
        let parts = [train, validation, unlabeled];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {parts:?} must be in [0,1] and sum to 1"
            )));
        }
        Ok(Self {
            train,
            validation,
            unlabeled,
        })
    }
}

/// Series-level split assignment with exact rounded counts.
pub fn assign_splits(num_series: usize, fractions: SplitFractions, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let n_train = (fractions.train * num_series as f64).round() as usize;
    let n_val = ((fractions.validation * num_series as f64).round() as usize).min(num_series - n_train.min(num_series));
    let n_train = n_train.min(num_series);
    let mut order: Vec<usize> = (0..num_series).collect();
    order.shuffle(&mut series_rng(seed, u64::MAX));
    let mut splits = vec![Split::Unlabeled; num_series];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Unlabeled
        };
    }
    splits
}

/// Manifest rows (labels withheld for the unlabeled split) and the hidden
/// answers for the unlabeled split.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub manifest: Manifest,
    pub answers: Manifest,
}

/// Generates every series, writing volumes to `out/volumes/` plus
/// `out/manifest.csv` and `out/answers.csv`.
pub fn generate_dataset(spec: &SynthSpec, fractions: SplitFractions, out: &Path) -> Result<GeneratedDataset> {
    spec.validate()?;
    let splits = assign_splits(spec.num_series, fractions, spec.seed);
    let volumes = out.join("volumes");
    fs::create_dir_all(&volumes).map_err(|e| Error::io(&volumes, e))?;
    let mut manifest = Manifest::default();
    let mut answers = Manifest::default();
    for (index, &split) in splits.iter().enumerate() {
        let series = generate_series(spec, index)?;
        preprocess::write_volume(&series.volume, &volumes)?;
        for (slice_index, labels) in series.labels.iter().enumerate() {
            let row = SliceRecord {
                series_id: series.volume.series_id().to_string(),
                slice_index,
                split,
                labels: Some(*labels),
                provenance: None,
            };
            if split == Split::Unlabeled {
                answers.rows.push(row.clone());
                manifest.rows.push(SliceRecord { labels: None, ..row });
            } else {
                manifest.rows.push(row);
            }
        }
    }
    manifest.write(&out.join("manifest.csv"))?;
    answers.write(&out.join("answers.csv"))?;
    let spec_path = out.join("synth.cfg");
    fs::write(&spec_path, spec.to_kv()).map_err(|e| Error::io(&spec_path, e))?;
    Ok(GeneratedDataset { manifest, answers })
}

/// In-memory generation and preprocessing of series `range`.
pub fn labeled_series(
    spec: &SynthSpec,
    range: std::ops::Range<usize>,
    config: &PreprocessConfig,
) -> Result<Vec<LabeledSeries>> {
    range
        .map(|i| {
            let s = generate_series(spec, i)?;
            LabeledSeries::new(preprocess::preprocess(&s.volume, config)?, s.labels)
        })
        .collect()
}
