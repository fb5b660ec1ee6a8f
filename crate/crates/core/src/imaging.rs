//! Images, hole masks, mask generators and the resolution pyramid.
//!
//! Images are stored channel-major (`C x H x W`) as `f32` in `[-1, 1]`.
//! Masks are binary, `1` marking corrupted pixels.

use std::path::Path;

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::kernels::{self, LinearTaps};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(RasterImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        RasterImage {
            height,
            width,
            channels,
            data: vec![value.clamp(-1.0, 1.0); height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(-1.0, 1.0));
                }
            }
        }
        RasterImage {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image tensor shape")
    }

    /// Item `index` of an NCHW tensor, clamped into `[-1, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let item = t.batch_item(index)?;
        let (_, c, h, w) = item.dims4()?;
        Ok(RasterImage {
            height: h,
            width: w,
            channels: c,
            data: item.data().iter().map(|v| (v.as_f64() as f32).clamp(-1.0, 1.0)).collect(),
        })
    }

    /// 8-bit interleaved pixels mapped linearly onto `[-1, 1]`.
    pub fn from_u8(height: usize, width: usize, channels: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape("pixel buffer length mismatch".into()));
        }
        let mut data = vec![0.0; pixels.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data[(c * height + y) * width + x] = u8_to_unit(pixels[(y * width + x) * channels + c]);
                }
            }
        }
        Ok(RasterImage {
            height,
            width,
            channels,
            data,
        })
    }

    /// Interleaved 8-bit pixels (inverse of [`RasterImage::from_u8`] up to rounding).
    pub fn to_u8(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len()];
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out[(y * self.width + x) * self.channels + c] = unit_to_u8(self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn hflip(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    /// `height x width` window with its top-left corner at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::Argument(format!(
                "crop {height}x{width}@({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, self.channels, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Pixels of `self` where the mask is set are replaced by zero.
    pub fn with_holes_zeroed(&self, mask: &HoleMask) -> Result<Self> {
        check_pair(self, mask)?;
        let hw = self.height * self.width;
        let mut data = self.data.clone();
        for c in 0..self.channels {
            for (i, &m) in mask.data.iter().enumerate() {
                if m == 1 {
                    data[c * hw + i] = 0.0;
                }
            }
        }
        Ok(RasterImage { data, ..*self })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Argument(format!("cannot write {c}-channel image"))),
        };
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color)
            .map_err(|e| image_error(path, e))
    }

    /// Reads an 8-bit image as RGB at its own size.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        RasterImage::from_u8(h as usize, w as usize, 3, img.as_raw())
    }
}

impl std::ops::Deref for RasterImage {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.data
    }
}

#[inline]
fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
fn unit_to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn check_pair(img: &RasterImage, mask: &HoleMask) -> Result<()> {
    if (img.height, img.width) != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "image {}x{} and mask {}x{} differ",
            img.height, img.width, mask.height, mask.width
        )));
    }
    Ok(())
}

/// Binary corruption mask, `1` = hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoleMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl HoleMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(HoleMask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        HoleMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        HoleMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn union(&self, other: &HoleMask) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("mask union of different sizes".into()));
        }
        Ok(HoleMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = self.get(y, self.width - 1 - x);
            }
        }
        out
    }

    /// `1 x 1 x H x W` tensor of zeros and ones.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask tensor shape")
    }

    /// Reads a single-channel PNG; values above 127 mark holes.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(HoleMask {
            height: h as usize,
            width: w as usize,
            data: img.into_raw().into_iter().map(|v| (v > 127) as u8).collect(),
        })
    }

    /// Writes a single-channel PNG with values `{0, 255}`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ExtendedColorType::L8)
            .map_err(|e| image_error(path, e))
    }
}

/// Fraction of corrupted pixels.
pub fn mask_hole_ratio(mask: &HoleMask) -> f64 {
    if mask.data.is_empty() {
        return 0.0;
    }
    mask.count() as f64 / mask.data.len() as f64
}

/// Loads an 8-bit image, resizes its shorter side to `target_size` and
/// centre-crops a `target_size` square.
pub fn load_image(path: &Path, target_size: usize) -> Result<RasterImage> {
    if target_size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "empty image".into(),
        });
    }
    let t = target_size as u32;
    let (nw, nh) = if w <= h {
        (t, ((h as u64 * t as u64 + w as u64 / 2) / w as u64).max(t as u64) as u32)
    } else {
        (((w as u64 * t as u64 + h as u64 / 2) / h as u64).max(t as u64) as u32, t)
    };
    let resized = if (nw, nh) == (w, h) {
        img
    } else {
        image::imageops::resize(&img, nw, nh, FilterType::Triangle)
    };
    let x0 = (nw - t) / 2;
    let y0 = (nh - t) / 2;
    let cropped = image::imageops::crop_imm(&resized, x0, y0, t, t).to_image();
    RasterImage::from_u8(target_size, target_size, 3, cropped.as_raw())
}

/// Centred square hole of side `round(sqrt(area_ratio) * size)`.
pub fn gen_center_mask(size: usize, area_ratio: f64) -> Result<HoleMask> {
    if !(area_ratio > 0.0 && area_ratio < 1.0) {
        return Err(Error::Argument(format!("hole ratio {area_ratio} outside (0, 1)")));
    }
    let side = ((area_ratio.sqrt() * size as f64).round() as usize).min(size);
    let off = (size - side) / 2;
    let mut mask = HoleMask::zeros(size, size);
    for y in off..off + side {
        mask.data[y * size + off..y * size + off + side].fill(1);
    }
    Ok(mask)
}

/// Parameters of the random brush-stroke mask generator. Lengths are pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrushConfig {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_vertices: usize,
    pub max_vertices: usize,
    /// Maximum turn between consecutive segments, radians.
    pub angle_spread: f64,
    pub min_segment: f64,
    pub max_segment: f64,
    pub min_width: f64,
    pub max_width: f64,
}

impl BrushConfig {
    /// Defaults scaled to a `size x size` canvas.
    pub fn for_size(size: usize) -> Self {
        let s = size as f64;
        BrushConfig {
            min_strokes: 1,
            max_strokes: 4,
            min_vertices: 4,
            max_vertices: 12,
            angle_spread: 40f64.to_radians(),
            min_segment: s / 16.0,
            max_segment: s / 4.0,
            min_width: (s / 32.0).max(1.0),
            max_width: (s / 8.0).max(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("brush config: {m}")));
        if self.min_strokes > self.max_strokes {
            return bad("stroke range is empty");
        }
        if self.min_vertices == 0 || self.min_vertices > self.max_vertices {
            return bad("vertex range is empty");
        }
        if !(self.min_segment >= 0.0 && self.min_segment <= self.max_segment) {
            return bad("segment length range is empty");
        }
        if !(self.min_width >= 1.0 && self.min_width <= self.max_width) {
            return bad("brush widths must be >= 1 pixel with a nonempty range");
        }
        if !(self.angle_spread >= 0.0 && self.angle_spread.is_finite()) {
            return bad("angle spread must be finite and nonnegative");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Union of thick polyline strokes with round tips. Each stroke is a random
/// walk whose heading turns by at most `angle_spread` per vertex.
pub fn gen_freeform_mask(size: usize, config: &BrushConfig, seed: u64) -> Result<HoleMask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = HoleMask::zeros(size, size);
    if size == 0 {
        return Ok(mask);
    }
    let limit = (size - 1) as f64;
    let strokes = rng.random_range(config.min_strokes..=config.max_strokes);
    for _ in 0..strokes {
        let vertices = rng.random_range(config.min_vertices..=config.max_vertices);
        let width = uniform(&mut rng, config.min_width, config.max_width);
        let mut p = (rng.random_range(0.0..=limit), rng.random_range(0.0..=limit));
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        paint_capsule(&mut mask, p, p, width / 2.0);
        for _ in 1..vertices {
            heading += uniform(&mut rng, -config.angle_spread, config.angle_spread);
            let len = uniform(&mut rng, config.min_segment, config.max_segment);
            let q = (
                (p.0 + len * heading.cos()).clamp(0.0, limit),
                (p.1 + len * heading.sin()).clamp(0.0, limit),
            );
            paint_capsule(&mut mask, p, q, width / 2.0);
            p = q;
        }
    }
    Ok(mask)
}

/// Marks every pixel centre within `radius` of segment `a-b` (points are `(x, y)`).
fn paint_capsule(mask: &mut HoleMask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (w, h) = (mask.width as f64, mask.height as f64);
    let x0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
    let x1 = (a.0.max(b.0) + radius).ceil().min(w - 1.0) as usize;
    let y0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
    let y1 = (a.1.max(b.1) + radius).ceil().min(h - 1.0) as usize;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ex, ey) = (px - t * dx, py - t * dy);
            if ex * ex + ey * ey <= r2 {
                mask.data[y * mask.width + x] = 1;
            }
        }
    }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Argument(format!("resampling factor {factor} is not a power of 2")));
    }
    Ok(())
}

/// Area mean over `factor x factor` blocks.
pub fn downsample(image: &RasterImage, factor: usize) -> Result<RasterImage> {
    check_factor(factor)?;
    if image.height % factor != 0 || image.width % factor != 0 {
        return Err(Error::Config(format!(
            "{}x{} image not divisible by {factor}",
            image.height, image.width
        )));
    }
    let (oh, ow) = (image.height / factor, image.width / factor);
    let mut data = vec![0.0f32; oh * ow * image.channels];
    for c in 0..image.channels {
        kernels::avg_pool_plane(image.plane(c), image.height, image.width, factor, &mut data[c * oh * ow..(c + 1) * oh * ow]);
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(RasterImage {
        height: oh,
        width: ow,
        channels: image.channels,
        data,
    })
}

/// Bilinear enlargement (half-pixel centres), clamped to `[-1, 1]`.
pub fn upsample(image: &RasterImage, factor: usize) -> Result<RasterImage> {
    check_factor(factor)?;
    let (oh, ow) = (image.height * factor, image.width * factor);
    let ty = LinearTaps::new(image.height, oh);
    let tx = LinearTaps::new(image.width, ow);
    let mut data = vec![0.0f32; oh * ow * image.channels];
    for c in 0..image.channels {
        kernels::bilinear_plane(image.plane(c), image.width, &ty, &tx, &mut data[c * oh * ow..(c + 1) * oh * ow]);
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(RasterImage {
        height: oh,
        width: ow,
        channels: image.channels,
        data,
    })
}

/// How a mask is re-binarized after shrinking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Keeps the hole ratio: marks the `round(ratio * blocks)` blocks with
    /// the highest corrupted coverage. Fully covered blocks always stay holes.
    #[default]
    AreaPreserving,
    /// Any corrupted pixel marks its block as a hole (max pooling).
    Any,
}

pub fn downsample_mask(mask: &HoleMask, factor: usize, rule: MaskRule) -> Result<HoleMask> {
    check_factor(factor)?;
    if mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(Error::Config(format!(
            "{}x{} mask not divisible by {factor}",
            mask.height, mask.width
        )));
    }
    let (oh, ow) = (mask.height / factor, mask.width / factor);
    let mut cover = vec![0usize; oh * ow];
    for y in 0..mask.height {
        for x in 0..mask.width {
            cover[(y / factor) * ow + x / factor] += mask.get(y, x) as usize;
        }
    }
    let data = match rule {
        MaskRule::Any => cover.iter().map(|&c| (c > 0) as u8).collect(),
        MaskRule::AreaPreserving => {
            let block = factor * factor;
            let keep = ((mask.count() as f64 / block as f64).round() as usize).min(oh * ow);
            let mut order: Vec<usize> = (0..oh * ow).filter(|&i| cover[i] > 0).collect();
            order.sort_by(|&a, &b| cover[b].cmp(&cover[a]).then(a.cmp(&b)));
            let mut data = vec![0u8; oh * ow];
            for &i in order.iter().take(keep) {
                data[i] = 1;
            }
            data
        }
    };
    Ok(HoleMask {
        height: oh,
        width: ow,
        data,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub image: RasterImage,
    pub mask: HoleMask,
}

/// Aligned multi-resolution stack, index 0 = coarsest; each level doubles
/// the previous one's size.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidSample {
    pub levels: Vec<PyramidLevel>,
}

impl PyramidSample {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn top(&self) -> &PyramidLevel {
        self.levels.last().expect("nonempty pyramid")
    }

    /// Drops the `count` finest levels.
    pub fn truncate_top(mut self, count: usize) -> Self {
        let keep = self.levels.len().saturating_sub(count);
        self.levels.truncate(keep);
        self
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.image.height).collect()
    }
}

pub fn build_pyramid(image: &RasterImage, mask: &HoleMask, levels: usize) -> Result<PyramidSample> {
    build_pyramid_with(image, mask, levels, MaskRule::default())
}

pub fn build_pyramid_with(image: &RasterImage, mask: &HoleMask, levels: usize, rule: MaskRule) -> Result<PyramidSample> {
    check_pair(image, mask)?;
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let top = 1usize << (levels - 1);
    if image.height % top != 0 || image.width % top != 0 {
        return Err(Error::Config(format!(
            "{}x{} input not divisible by 2^{} for a {levels}-level pyramid",
            image.height,
            image.width,
            levels - 1
        )));
    }
    let mut out = Vec::with_capacity(levels);
    for n in 0..levels {
        let factor = 1usize << (levels - 1 - n);
        let (img, m) = if factor == 1 {
            (image.clone(), mask.clone())
        } else {
            (downsample(image, factor)?, downsample_mask(mask, factor, rule)?)
        };
        out.push(PyramidLevel { image: img, mask: m });
    }
    Ok(PyramidSample { levels: out })
}
