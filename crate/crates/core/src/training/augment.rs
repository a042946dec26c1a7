//! Series-level augmentation. One geometric transform and one blur are drawn
//! per series and applied to every slice, so neighbouring slices stay
//! aligned for the sequence model.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::SeriesBatch;

/// Coarse control grid for elastic distortion, per side.
const DISTORTION_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the image, sampled uniformly.
    pub scale: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Gaussian blur sigma range in pixels; `None` disables blur.
    pub blur_sigma: Option<(f64, f64)>,
    /// Maximum displacement of the elastic field as a fraction of the side.
    pub distortion: f64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            scale: (1.0, 1.0),
            hflip: false,
            vflip: false,
            rotation_deg: 0.0,
            blur_sigma: None,
            distortion: 0.0,
        }
    }

    /// Random resized crop and flips.
    pub fn weak() -> Self {
        Self {
            scale: (0.8, 1.2),
            hflip: true,
            vflip: true,
            ..Self::identity()
        }
    }

    /// Weak plus rotation, blur and elastic distortion.
    pub fn strong() -> Self {
        Self {
            rotation_deg: 15.0,
            blur_sigma: Some((0.1, 1.5)),
            distortion: 0.03,
            ..Self::weak()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("crop scale range ({lo}, {hi}) is invalid")));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg <= 180.0) {
            return Err(Error::Config(format!("rotation {} must lie in [0, 180]", self.rotation_deg)));
        }
        if let Some((a, b)) = self.blur_sigma {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return Err(Error::Config(format!("blur sigma range ({a}, {b}) is invalid")));
            }
        }
        if !(0.0..0.5).contains(&self.distortion) {
            return Err(Error::Config(format!("distortion {} must lie in [0, 0.5)", self.distortion)));
        }
        Ok(())
    }

    /// Whether every transformation `other` can produce is also available here.
    pub fn covers(&self, other: &AugmentPolicy) -> bool {
        let blur = match (self.blur_sigma, other.blur_sigma) {
            (_, None) => true,
            (Some((a, b)), Some((c, d))) => a <= c && d <= b,
            (None, Some(_)) => false,
        };
        self.scale.0 <= other.scale.0
            && other.scale.1 <= self.scale.1
            && (self.hflip || !other.hflip)
            && (self.vflip || !other.vflip)
            && self.rotation_deg >= other.rotation_deg
            && self.distortion >= other.distortion
            && blur
    }
}

/// Named presets, as used in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    None,
    Weak,
    Strong,
}

impl AugmentKind {
    pub fn policy(self) -> AugmentPolicy {
        match self {
            AugmentKind::None => AugmentPolicy::identity(),
            AugmentKind::Weak => AugmentPolicy::weak(),
            AugmentKind::Strong => AugmentPolicy::strong(),
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentKind::None => "none",
            AugmentKind::Weak => "weak",
            AugmentKind::Strong => "strong",
        })
    }
}

impl FromStr for AugmentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AugmentKind::None),
            "weak" => Ok(AugmentKind::Weak),
            "strong" => Ok(AugmentKind::Strong),
            other => Err(format!("unknown augmentation `{other}` (none, weak, strong)")),
        }
    }
}

/// One draw of every random choice a policy makes.
#[derive(Clone, Debug)]
struct Transform {
    side: f64,
    offset: (f64, f64),
    hflip: bool,
    vflip: bool,
    angle: f64,
    sigma: Option<f64>,
    /// `[grid, grid, 2]` displacements in pixels.
    field: Vec<f64>,
}

impl Transform {
    fn sample(policy: &AugmentPolicy, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = size as f64;
        let area = uniform(rng, policy.scale);
        let side = n * area.sqrt();
        let free = n - side;
        let offset = (uniform(rng, (free.min(0.0), free.max(0.0))), uniform(rng, (free.min(0.0), free.max(0.0))));
        let hflip = policy.hflip && rng.random_bool(0.5);
        let vflip = policy.vflip && rng.random_bool(0.5);
        let angle = uniform(rng, (-policy.rotation_deg, policy.rotation_deg)).to_radians();
        let sigma = policy.blur_sigma.map(|r| uniform(rng, r));
        let field = if policy.distortion > 0.0 {
            let m = policy.distortion * n;
            (0..DISTORTION_GRID * DISTORTION_GRID * 2)
                .map(|_| uniform(rng, (-m, m)))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            side,
            offset,
            hflip,
            vflip,
            angle,
            sigma,
            field,
        }
    }

    /// Source pixel coordinates for every output pixel, row-major.
    fn source_map(&self, size: usize) -> Vec<(f64, f64)> {
        let c = (size as f64 - 1.0) / 2.0;
        let (sin, cos) = self.angle.sin_cos();
        let ratio = self.side / size as f64;
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let mut dy = y as f64 - c;
                let mut dx = x as f64 - c;
                if self.vflip {
                    dy = -dy;
                }
                if self.hflip {
                    dx = -dx;
                }
                if self.angle != 0.0 {
                    (dy, dx) = (cos * dy - sin * dx, sin * dy + cos * dx);
                }
                if !self.field.is_empty() {
                    let (ey, ex) = self.displacement(y, x, size);
                    dy += ey;
                    dx += ex;
                }
                out.push((
                    self.offset.0 + (dy + c + 0.5) * ratio - 0.5,
                    self.offset.1 + (dx + c + 0.5) * ratio - 0.5,
                ));
            }
        }
        out
    }

    /// Bilinear interpolation of the coarse displacement grid.
    fn displacement(&self, y: usize, x: usize, size: usize) -> (f64, f64) {
        let g = DISTORTION_GRID;
        let to_grid = |v: usize| {
            if size == 1 {
                0.0
            } else {
                v as f64 * (g - 1) as f64 / (size - 1) as f64
            }
        };
        let (gy, gx) = (to_grid(y), to_grid(x));
        let (y0, x0) = ((gy.floor() as usize).min(g - 2), (gx.floor() as usize).min(g - 2));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |r: usize, c: usize, k: usize| self.field[(r * g + c) * 2 + k];
        let lerp2 = |k: usize| {
            let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x0 + 1, k) * fx;
            let bottom = at(y0 + 1, x0, k) * (1.0 - fx) + at(y0 + 1, x0 + 1, k) * fx;
            top * (1.0 - fy) + bottom * fy
        };
        (lerp2(0), lerp2(1))
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Bilinear sample with zero outside the image.
fn sample(plane: &[f64], size: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |r: f64, c: f64| {
        if r < 0.0 || c < 0.0 || r >= size as f64 || c >= size as f64 {
            0.0
        } else {
            plane[r as usize * size + c as usize]
        }
    };
    if fy == 0.0 && fx == 0.0 {
        return px(y0, x0);
    }
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1.0) * fx;
    let bottom = px(y0 + 1.0, x0) * (1.0 - fx) + px(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable blur with edge clamping.
fn blur_plane(plane: &mut [f64], size: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[y * size + clamp(x as isize + k as isize - r)])
                .sum();
        }
    }
    for y in 0..size {
        for x in 0..size {
            plane[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - r) * size + x])
                .sum();
        }
    }
}

/// Applies one random draw of `policy` to every slice of `batch`.
pub fn apply_augment(batch: &SeriesBatch, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<SeriesBatch> {
    policy.validate()?;
    let size = batch.size;
    let t = Transform::sample(policy, size, rng);
    let map = t.source_map(size);
    let kernel = t.sigma.map(gaussian_kernel);
    let plane_len = size * size;
    let mut data = Vec::with_capacity(batch.data.len());
    for plane in batch.data.chunks(plane_len) {
        let mut out: Vec<f64> = map.iter().map(|&(y, x)| sample(plane, size, y, x)).collect();
        if let Some(k) = &kernel {
            blur_plane(&mut out, size, k);
        }
        data.extend(out);
    }
    Ok(SeriesBatch {
        data,
        ..batch.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized() {
        for s in [0.1, 0.7, 1.5] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn presets_nest() {
        assert!(AugmentPolicy::strong().covers(&AugmentPolicy::weak()));
        assert!(AugmentPolicy::weak().covers(&AugmentPolicy::identity()));
        assert!(!AugmentPolicy::weak().covers(&AugmentPolicy::strong()));
    }

    #[test]
    fn zero_field_is_identity_map() {
        let t = Transform {
            side: 5.0,
            offset: (0.0, 0.0),
            hflip: false,
            vflip: false,
            angle: 0.0,
            sigma: None,
            field: vec![0.0; DISTORTION_GRID * DISTORTION_GRID * 2],
        };
        for (i, &(y, x)) in t.source_map(5).iter().enumerate() {
            assert_eq!((y, x), ((i / 5) as f64, (i % 5) as f64));
        }
    }
}
