//! Hounsfield-unit volumes to model-ready three-channel image stacks.
//!
//! The pipeline per series is: find one brain bounding box for the whole
//! series (threshold, morphological opening, union of masks), then for every
//! slice in stacking order crop the raw HU grid, map it through three HU
//! windows and resize bilinearly to the model resolution.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{self, KeyValues};

/// A CT series: `N` slices of `height × width` signed HU values.
#[derive(Clone, Debug, PartialEq)]
pub struct HuVolume {
    series_id: String,
    height: usize,
    width: usize,
    slices: Vec<Vec<i16>>,
    slice_order: Vec<usize>,
}

impl HuVolume {
    /// `slice_order[i]` is the stacking position of `slices[i]`.
    pub fn new(
        series_id: impl Into<String>,
        height: usize,
        width: usize,
        slices: Vec<Vec<i16>>,
        slice_order: Vec<usize>,
    ) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Validation("volume needs at least one slice".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::Validation("zero-sized slice".into()));
        }
        if let Some(i) = slices.iter().position(|s| s.len() != height * width) {
            return Err(Error::Validation(format!(
                "slice {i} has {} values, expected {}",
                slices[i].len(),
                height * width
            )));
        }
        let mut seen = vec![false; slices.len()];
        if slice_order.len() != slices.len()
            || slice_order
                .iter()
                .any(|&o| o >= seen.len() || std::mem::replace(&mut seen[o], true))
        {
            return Err(Error::Validation(format!(
                "slice_order {slice_order:?} is not a permutation of 0..{}",
                slices.len()
            )));
        }
        Ok(Self {
            series_id: series_id.into(),
            height,
            width,
            slices,
            slice_order,
        })
    }

    /// A volume whose slices are already in stacking order.
    pub fn stacked(series_id: impl Into<String>, height: usize, width: usize, slices: Vec<Vec<i16>>) -> Result<Self> {
        let order = (0..slices.len()).collect();
        Self::new(series_id, height, width, slices, order)
    }

    pub fn series_id(&self) -> &str {
        &self.series_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn slices(&self) -> &[Vec<i16>] {
        &self.slices
    }

    pub fn slice_order(&self) -> &[usize] {
        &self.slice_order
    }

    /// Slices sorted by stacking position.
    pub fn ordered_slices(&self) -> Vec<&[i16]> {
        let mut idx: Vec<usize> = (0..self.slices.len()).collect();
        idx.sort_by_key(|&i| self.slice_order[i]);
        idx.into_iter().map(|i| self.slices[i].as_slice()).collect()
    }
}

/// An HU window: level `center`, width `width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub center: f64,
    pub width: f64,
}

impl WindowSpec {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::Validation(format!("window width must be positive, got {width}")));
        }
        Ok(Self { center, width })
    }

    pub const BRAIN: WindowSpec = WindowSpec { center: 40.0, width: 80.0 };
    pub const BLOOD: WindowSpec = WindowSpec { center: 80.0, width: 200.0 };
    pub const SOFT_TISSUE: WindowSpec = WindowSpec { center: 40.0, width: 380.0 };

    /// Brain, blood and soft-tissue windows, in channel order.
    pub const DEFAULT_TRIPLET: [WindowSpec; 3] = [Self::BRAIN, Self::BLOOD, Self::SOFT_TISSUE];

    #[inline]
    pub fn apply(&self, hu: f64) -> f64 {
        ((hu - (self.center - self.width / 2.0)) / self.width).clamp(0.0, 1.0)
    }
}

/// Maps every HU value of a slice through `window`.
pub fn hu_window(slice: &[i16], window: WindowSpec) -> Vec<f64> {
    slice.iter().map(|&v| window.apply(f64::from(v))).collect()
}

/// A channel-major float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || channels * height * width == 0 {
            return Err(Error::Validation(format!(
                "image {channels}×{height}×{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Three-channel image from one slice, one channel per window.
pub fn compose_channels(slice: &[i16], height: usize, width: usize, windows: &[WindowSpec; 3]) -> Image {
    let mut data = Vec::with_capacity(3 * slice.len());
    for w in windows {
        data.extend(hu_window(slice, *w));
    }
    Image {
        channels: 3,
        height,
        width,
        data,
    }
}

/// Half-open pixel rectangle `[top, top+height) × [left, left+width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height > 0 && self.width > 0 && self.bottom() <= height && self.right() <= width
    }
}

/// Running min (erosion) or max (dilation) over a `2r+1` window along one axis.
/// Pixels outside the frame count as background.
fn filter_1d(mask: &[bool], h: usize, w: usize, r: usize, horizontal: bool, erode: bool) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| if horizontal { line * w + i } else { i * w + line };
    for line in 0..lines {
        // prefix counts of set pixels along the line
        let mut prefix = vec![0usize; len + 1];
        for i in 0..len {
            prefix[i + 1] = prefix[i] + usize::from(mask[at(line, i)]);
        }
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(len);
            let count = prefix[hi] - prefix[lo];
            out[at(line, i)] = if erode {
                // the window must lie inside the frame and be fully set
                i >= r && i + r < len && count == 2 * r + 1
            } else {
                count > 0
            };
        }
    }
    out
}

/// Binary opening (erosion then dilation) with a `(2r+1)²` square element.
pub fn binary_opening(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let eroded = filter_1d(&filter_1d(mask, height, width, radius, true, true), height, width, radius, false, true);
    filter_1d(&filter_1d(&eroded, height, width, radius, true, false), height, width, radius, false, false)
}

/// Tight bounding box of the union of opened `hu > air_threshold` masks over
/// every slice; the full frame when nothing survives the opening.
pub fn brain_crop(volume: &HuVolume, air_threshold: i16, opening_radius: usize) -> Result<CropRect> {
    if opening_radius == 0 {
        return Err(Error::Validation("opening radius must be at least 1".into()));
    }
    let (h, w) = (volume.height, volume.width);
    let mut union = vec![false; h * w];
    for slice in &volume.slices {
        let mask: Vec<bool> = slice.iter().map(|&v| v > air_threshold).collect();
        for (u, m) in union.iter_mut().zip(binary_opening(&mask, h, w, opening_radius)) {
            *u |= m;
        }
    }
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if union[y * w + x] {
                top = top.min(y);
                bottom = bottom.max(y);
                left = left.min(x);
                right = right.max(x);
            }
        }
    }
    if top == usize::MAX {
        return Ok(CropRect::full(h, w));
    }
    Ok(CropRect {
        top,
        left,
        height: bottom - top + 1,
        width: right - left + 1,
    })
}

/// Source index pair and interpolation weight for every destination pixel.
/// Pixel `i` covers `[i, i+1)` with center `i + 0.5`; positions clamp at the edges.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Exact when `a == b` and never outside `[min(a,b), max(a,b)]`.
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    (a + (b - a) * f).clamp(a.min(b), a.max(b))
}

/// Separable bilinear resize with half-pixel centers.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::Validation("resize target must be at least 1×1".into()));
    }
    if image.height == height && image.width == width {
        return Ok(image.clone());
    }
    let rows = axis_weights(image.height, height);
    let cols = axis_weights(image.width, width);
    let mut data = Vec::with_capacity(image.channels * height * width);
    for c in 0..image.channels {
        let plane = image.channel(c);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = lerp(plane[y0 * image.width + x0], plane[y0 * image.width + x1], fx);
                let bot = lerp(plane[y1 * image.width + x0], plane[y1 * image.width + x1], fx);
                data.push(lerp(top, bot, fy));
            }
        }
    }
    Ok(Image {
        channels: image.channels,
        height,
        width,
        data,
    })
}

/// Preprocessed series: `N × 3 × size × size` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    pub series_id: String,
    pub num_slices: usize,
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
    pub crop: CropRect,
}

impl SeriesBatch {
    pub fn slice_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        let n = self.slice_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slice_image(&self, i: usize) -> Image {
        Image {
            channels: self.channels,
            height: self.size,
            width: self.size,
            data: self.slice(i).to_vec(),
        }
    }

    /// Rebuilds a batch from per-slice images of the batch's size.
    pub fn with_images(&self, images: &[Image]) -> SeriesBatch {
        SeriesBatch {
            data: images.iter().flat_map(|im| im.data.iter().copied()).collect(),
            ..self.clone_header()
        }
    }

    /// Keeps only the given slices, in the given order.
    pub fn select_slices(&self, indices: &[usize]) -> SeriesBatch {
        SeriesBatch {
            num_slices: indices.len(),
            data: indices.iter().flat_map(|&i| self.slice(i).iter().copied()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> SeriesBatch {
        SeriesBatch {
            series_id: self.series_id.clone(),
            num_slices: self.num_slices,
            channels: self.channels,
            size: self.size,
            data: Vec::new(),
            crop: self.crop,
        }
    }
}

/// Crop, window and resize every slice in stacking order.
pub fn stack_series(volume: &HuVolume, windows: &[WindowSpec; 3], crop: CropRect, size: usize) -> Result<SeriesBatch> {
    if !crop.fits(volume.height, volume.width) {
        return Err(Error::Validation(format!(
            "crop {crop:?} outside {}×{} frame",
            volume.height, volume.width
        )));
    }
    let mut data = Vec::with_capacity(volume.num_slices() * 3 * size * size);
    for slice in volume.ordered_slices() {
        let cropped: Vec<i16> = (crop.top..crop.bottom())
            .flat_map(|y| slice[y * volume.width + crop.left..y * volume.width + crop.right()].iter().copied())
            .collect();
        let image = compose_channels(&cropped, crop.height, crop.width, windows);
        data.extend(resize_bilinear(&image, size, size)?.data);
    }
    Ok(SeriesBatch {
        series_id: volume.series_id.clone(),
        num_slices: volume.num_slices(),
        channels: 3,
        size,
        data,
        crop,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub windows: [WindowSpec; 3],
    pub air_threshold: i16,
    pub opening_radius: usize,
    /// Model input resolution.
    pub size: usize,
    /// Black-edge removal; when off the full frame is used.
    pub crop: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            windows: WindowSpec::DEFAULT_TRIPLET,
            air_threshold: -500,
            opening_radius: 3,
            size: 224,
            crop: true,
        }
    }
}

impl PreprocessConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }
}

impl PreprocessConfig {
    pub fn to_kv(&self) -> String {
        let windows: Vec<String> = self.windows.iter().map(|w| format!("{}/{}", w.center, w.width)).collect();
        kv::render([
            ("windows", windows.join(",")),
            ("air_threshold", self.air_threshold.to_string()),
            ("opening_radius", self.opening_radius.to_string()),
            ("size", self.size.to_string()),
            ("crop", self.crop.to_string()),
        ])
    }

    /// Keys absent from `kv` keep the values of `base`. Windows are written
    /// `center/width`, three of them.
    pub fn from_kv(kv: &KeyValues, base: &PreprocessConfig) -> Result<Self> {
        let windows = match kv.get_list::<String>("windows")? {
            None => base.windows,
            Some(items) => {
                let parsed = items
                    .iter()
                    .map(|item| {
                        let (c, w) = item
                            .split_once('/')
                            .ok_or_else(|| Error::Config(format!("window `{item}` is not center/width")))?;
                        let num = |s: &str| {
                            s.trim()
                                .parse::<f64>()
                                .map_err(|_| Error::Config(format!("window `{item}` has a bad number")))
                        };
                        WindowSpec::new(num(c)?, num(w)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                parsed
                    .try_into()
                    .map_err(|_| Error::Config("exactly three windows are required".into()))?
            }
        };
        let c = Self {
            windows,
            air_threshold: kv.get_or("air_threshold", base.air_threshold)?,
            opening_radius: kv.get_or("opening_radius", base.opening_radius)?,
            size: kv.get_or("size", base.size)?,
            crop: kv.get_or("crop", base.crop)?,
        };
        if c.size == 0 {
            return Err(Error::Config("size must be positive".into()));
        }
        Ok(c)
    }
}

pub fn preprocess(volume: &HuVolume, config: &PreprocessConfig) -> Result<SeriesBatch> {
    let crop = if config.crop {
        brain_crop(volume, config.air_threshold, config.opening_radius)?
    } else {
        CropRect::full(volume.height, volume.width)
    };
    stack_series(volume, &config.windows, crop, config.size)
}

pub fn header_path(dir: &Path, series_id: &str) -> PathBuf {
    dir.join(format!("{series_id}.hdr"))
}

pub fn payload_path(dir: &Path, series_id: &str) -> PathBuf {
    dir.join(format!("{series_id}.raw"))
}

/// Writes `<id>.hdr` and `<id>.raw` (slices in stacking order, int16 LE).
pub fn write_volume(volume: &HuVolume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = kv::render([
        ("series_id", volume.series_id.clone()),
        ("num_slices", volume.num_slices().to_string()),
        ("height", volume.height.to_string()),
        ("width", volume.width.to_string()),
        ("value_type", "int16".to_string()),
        ("byte_order", "little-endian".to_string()),
    ]);
    let hp = header_path(dir, &volume.series_id);
    fs::write(&hp, header).map_err(|e| Error::io(&hp, e))?;
    let mut payload = Vec::with_capacity(volume.num_slices() * volume.height * volume.width * 2);
    for slice in volume.ordered_slices() {
        for v in slice {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let pp = payload_path(dir, &volume.series_id);
    fs::write(&pp, payload).map_err(|e| Error::io(&pp, e))
}

pub fn read_volume(dir: &Path, series_id: &str) -> Result<HuVolume> {
    let hp = header_path(dir, series_id);
    let header = KeyValues::read(&hp)?;
    let value_type = header.require("value_type")?;
    let byte_order = header.require("byte_order")?;
    if value_type != "int16" || byte_order != "little-endian" {
        return Err(Error::parse(&hp, 0, format!("unsupported payload {value_type}/{byte_order}")));
    }
    let id = header.require("series_id")?.to_string();
    let n: usize = header.get("num_slices")?.unwrap_or(0);
    let h: usize = header.get("height")?.unwrap_or(0);
    let w: usize = header.get("width")?.unwrap_or(0);
    let pp = payload_path(dir, series_id);
    let bytes = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    if bytes.len() != n * h * w * 2 {
        return Err(Error::parse(
            &pp,
            0,
            format!("payload has {} bytes, header implies {}", bytes.len(), n * h * w * 2),
        ));
    }
    let values: Vec<i16> = bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    let slices = if h * w == 0 {
        Vec::new()
    } else {
        values.chunks(h * w).map(<[i16]>::to_vec).collect()
    };
    HuVolume::stacked(id, h, w, slices)
}

pub fn batch_path(dir: &Path, series_id: &str) -> PathBuf {
    dir.join(format!("{series_id}.batch"))
}

const BATCH_MAGIC: &[u8; 8] = b"IHDBAT01";

/// Writes a preprocessed series as `<id>.batch`: magic, a key-value header
/// terminated by a blank line, then the pixels as f64 LE.
pub fn write_batch(batch: &SeriesBatch, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = batch.crop;
    let header = kv::render([
        ("series_id", batch.series_id.clone()),
        ("num_slices", batch.num_slices.to_string()),
        ("channels", batch.channels.to_string()),
        ("size", batch.size.to_string()),
        ("crop", kv::join(&[c.top, c.left, c.height, c.width])),
    ]);
    let mut bytes = Vec::with_capacity(BATCH_MAGIC.len() + header.len() + 1 + batch.data.len() * 8);
    bytes.extend_from_slice(BATCH_MAGIC);
    bytes.extend_from_slice(header.as_bytes());
    bytes.push(b'\n');
    for v in &batch.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = batch_path(dir, &batch.series_id);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn read_batch(dir: &Path, series_id: &str) -> Result<SeriesBatch> {
    let path = batch_path(dir, series_id);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |m: &str| Error::parse(&path, 0, m.to_string());
    let rest = bytes.strip_prefix(BATCH_MAGIC).ok_or_else(|| bad("not a batch file"))?;
    let end = rest
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("unterminated header"))?;
    let text = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let header = KeyValues::parse(text, &path)?;
    let num = |key: &str| -> Result<usize> { header.get(key)?.ok_or_else(|| bad(&format!("missing `{key}`"))) };
    let (n, channels, size) = (num("num_slices")?, num("channels")?, num("size")?);
    let crop: Vec<usize> = header.get_list("crop")?.ok_or_else(|| bad("missing `crop`"))?;
    let [top, left, height, width] = crop[..] else {
        return Err(bad("crop needs four values"));
    };
    let payload = &rest[end + 2..];
    if payload.len() != n * channels * size * size * 8 {
        return Err(bad(&format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            n * channels * size * size * 8
        )));
    }
    Ok(SeriesBatch {
        series_id: header.require("series_id")?.to_string(),
        num_slices: n,
        channels,
        size,
        data: payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect(),
        crop: CropRect {
            top,
            left,
            height,
            width,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        assert_eq!(WindowSpec::new(40.0, 80.0).unwrap().apply(40.0), 0.5);
        assert_eq!(WindowSpec::new(40.0, 80.0).unwrap().apply(0.0), 0.0);
        assert_eq!(WindowSpec::new(80.0, 200.0).unwrap().apply(80.0), 0.5);
        assert!(WindowSpec::new(0.0, 0.0).is_err());
    }

    #[test]
    fn channel_examples() {
        let px = |hu: i16| {
            let im = compose_channels(&[hu], 1, 1, &WindowSpec::DEFAULT_TRIPLET);
            [im.data[0], im.data[1], im.data[2]]
        };
        let brain = px(40);
        assert_eq!(brain[0], 0.5);
        assert!((brain[1] - 0.30).abs() < 1e-15);
        assert_eq!(brain[2], 0.5);
        assert_eq!(px(-1000), [0.0; 3]);
        assert_eq!(px(3000), [1.0; 3]);
    }

    #[test]
    fn volume_validation() {
        assert!(HuVolume::stacked("a", 2, 2, vec![]).is_err());
        assert!(HuVolume::stacked("a", 2, 2, vec![vec![0; 3]]).is_err());
        assert!(HuVolume::new("a", 1, 1, vec![vec![0], vec![1]], vec![1, 1]).is_err());
        assert!(HuVolume::new("a", 1, 1, vec![vec![0], vec![1]], vec![1, 0]).is_ok());
    }

    #[test]
    fn opening_removes_specks_and_keeps_blocks() {
        let (h, w) = (12, 12);
        let mut mask = vec![false; h * w];
        mask[2 * w + 2] = true;
        for y in 5..11 {
            for x in 4..10 {
                mask[y * w + x] = true;
            }
        }
        let opened = binary_opening(&mask, h, w, 2);
        assert!(!opened[2 * w + 2]);
        assert_eq!(opened.iter().filter(|&&b| b).count(), 36);
    }

    #[test]
    fn crop_requires_positive_radius() {
        let v = HuVolume::stacked("a", 2, 2, vec![vec![0; 4]]).unwrap();
        assert!(brain_crop(&v, -500, 0).is_err());
    }

    #[test]
    fn stack_rejects_out_of_frame_crop() {
        let v = HuVolume::stacked("a", 4, 4, vec![vec![0; 16]]).unwrap();
        let crop = CropRect { top: 2, left: 0, height: 3, width: 4 };
        assert!(stack_series(&v, &WindowSpec::DEFAULT_TRIPLET, crop, 4).is_err());
    }
}
