//! Browser demo for the `pyragen` imaging stack.
//!
//! Three operations are exposed to the page: drawing a hole mask (generated
//! or painted), viewing the image/mask pyramid, and a training-free
//! coarse-to-fine fill that runs the contextual attention block directly on
//! pixels, scored with the evaluation metrics.

use pyragen::autograd::Graph;
use pyragen::corpus::synthetic_texture;
use pyragen::evalkit::{hole_l1, l1_metric, psnr, ssim};
use pyragen::generator::compose;
use pyragen::imaging::{
    build_pyramid, gen_center_mask, gen_freeform_mask, mask_hole_ratio, upsample, BrushConfig, HoleMask, RasterImage,
};
use pyragen::nnblocks::{contextual_attention, AttentionSpec};
use pyragen::{Error, Result};
use wasm_bindgen::prelude::*;

/// Largest side the page allows; attention memory grows with its fourth power.
pub const MAX_SIZE: usize = 64;

pub fn make_mask(size: usize, kind: &str, ratio: f64, seed: u64) -> Result<HoleMask> {
    let brush = || gen_freeform_mask(size, &BrushConfig::for_size(size), seed);
    match kind {
        "center" => gen_center_mask(size, ratio),
        "freeform" => brush(),
        "both" => gen_center_mask(size, ratio)?.union(&brush()?),
        other => Err(Error::Argument(format!("unknown mask kind `{other}`"))),
    }
}

/// Marks every pixel within `radius` of `(x, y)` as a hole.
pub fn paint(mask: &mut HoleMask, x: usize, y: usize, radius: usize) {
    let r2 = (radius * radius) as isize;
    for yy in y.saturating_sub(radius)..(y + radius + 1).min(mask.height()) {
        for xx in x.saturating_sub(radius)..(x + radius + 1).min(mask.width()) {
            let (dy, dx) = (yy as isize - y as isize, xx as isize - x as isize);
            if dy * dy + dx * dx <= r2 {
                mask.set(yy, xx, true);
            }
        }
    }
}

/// Per-channel mean of the known pixels, or zero if there are none.
fn known_mean(image: &RasterImage, mask: &HoleMask) -> Vec<f32> {
    let known = mask.data().iter().filter(|&&m| m == 0).count().max(1);
    (0..image.channels())
        .map(|c| {
            let sum: f32 = image.plane(c).iter().zip(mask.data()).filter(|(_, &m)| m == 0).map(|(v, _)| v).sum();
            sum / known as f32
        })
        .collect()
}

fn attend_pixels(start: &RasterImage, mask: &HoleMask, softmax_scale: f64) -> Result<RasterImage> {
    let spec = AttentionSpec {
        softmax_scale,
        match_rate: 1,
        ..AttentionSpec::default()
    };
    let mut g = Graph::<f32>::new();
    let x = g.constant(start.to_tensor());
    match contextual_attention(&mut g, x, x, &mask.to_tensor(), &spec) {
        Ok(out) => RasterImage::from_tensor(g.value(out.output), 0),
        Err(Error::Degenerate(_)) => Ok(start.clone()),
        Err(e) => Err(e),
    }
}

/// Coarse-to-fine fill: the coarsest holes start at the known-pixel mean,
/// each finer level starts from the upsampled result below, and every level
/// is rebuilt by contextual attention over its own known patches.
pub fn attention_fill(image: &RasterImage, mask: &HoleMask, levels: usize, softmax_scale: f64) -> Result<RasterImage> {
    let pyramid = build_pyramid(image, mask, levels)?;
    let mut prev: Option<RasterImage> = None;
    for level in &pyramid.levels {
        let guess = match &prev {
            Some(p) => upsample(p, 2)?,
            None => {
                let mean = known_mean(&level.image, &level.mask);
                let (h, w) = (level.image.height(), level.image.width());
                RasterImage::from_fn(h, w, level.image.channels(), |c, _, _| mean[c])
            }
        };
        let start = compose(&guess, &level.image, &level.mask)?;
        let filled = attend_pixels(&start, &level.mask, softmax_scale)?;
        prev = Some(compose(&filled, &level.image, &level.mask)?);
    }
    Ok(prev.expect("at least one level"))
}

/// Interleaved RGBA for a canvas, with holes painted white.
pub fn rgba(image: &RasterImage, holes: Option<&HoleMask>) -> Vec<u8> {
    let rgb = image.to_u8();
    let mut out = Vec::with_capacity(rgb.len() / 3 * 4);
    for (i, px) in rgb.chunks(3).enumerate() {
        if holes.is_some_and(|m| m.data()[i] == 1) {
            out.extend_from_slice(&[255, 255, 255, 255]);
        } else {
            out.extend_from_slice(&[px[0], px[1], px[2], 255]);
        }
    }
    out
}

/// Every pyramid level enlarged to `size` by pixel repetition and laid out
/// left to right, coarsest first.
pub fn pyramid_strip(image: &RasterImage, mask: &HoleMask, levels: usize) -> Result<(Vec<u8>, Vec<f64>)> {
    let size = image.height();
    let pyramid = build_pyramid(image, mask, levels)?;
    let width = size * levels;
    let mut out = vec![0u8; size * width * 4];
    let mut ratios = Vec::with_capacity(levels);
    for (n, level) in pyramid.levels.iter().enumerate() {
        let s = level.image.height();
        let tile = rgba(&level.image, Some(&level.mask));
        let k = size / s;
        for y in 0..size {
            for x in 0..size {
                let src = ((y / k) * s + x / k) * 4;
                let dst = (y * width + n * size + x) * 4;
                out[dst..dst + 4].copy_from_slice(&tile[src..src + 4]);
            }
        }
        ratios.push(mask_hole_ratio(&level.mask));
    }
    Ok((out, ratios))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    image: RasterImage,
    mask: HoleMask,
    filled: Option<RasterImage>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, texture_seed: u32) -> std::result::Result<Demo, JsError> {
        if !(8..=MAX_SIZE).contains(&size) || !size.is_power_of_two() {
            return Err(JsError::new(&format!("size must be a power of two in 8..={MAX_SIZE}")));
        }
        Ok(Demo {
            image: synthetic_texture(texture_seed as u64, 0, size),
            mask: HoleMask::zeros(size, size),
            filled: None,
        })
    }

    pub fn size(&self) -> usize {
        self.image.height()
    }

    pub fn set_texture(&mut self, seed: u32) {
        self.image = synthetic_texture(seed as u64, 0, self.size());
        self.filled = None;
    }

    /// Replaces the mask and returns its hole ratio.
    pub fn make_mask(&mut self, kind: &str, ratio: f64, seed: u32) -> std::result::Result<f64, JsError> {
        self.mask = make_mask(self.size(), kind, ratio, seed as u64).map_err(js)?;
        self.filled = None;
        Ok(mask_hole_ratio(&self.mask))
    }

    /// Adds a round brush dab and returns the new hole ratio.
    pub fn paint(&mut self, x: usize, y: usize, radius: usize) -> f64 {
        paint(&mut self.mask, x, y, radius);
        self.filled = None;
        mask_hole_ratio(&self.mask)
    }

    pub fn clear_mask(&mut self) {
        self.mask = HoleMask::zeros(self.size(), self.size());
        self.filled = None;
    }

    pub fn masked_rgba(&self) -> Vec<u8> {
        rgba(&self.image, Some(&self.mask))
    }

    pub fn original_rgba(&self) -> Vec<u8> {
        rgba(&self.image, None)
    }

    /// Strip of `levels` tiles, each `size x size`.
    pub fn pyramid_rgba(&self, levels: usize) -> std::result::Result<Vec<u8>, JsError> {
        pyramid_strip(&self.image, &self.mask, levels).map(|(px, _)| px).map_err(js)
    }

    /// Hole ratio of every pyramid level, coarsest first.
    pub fn pyramid_ratios(&self, levels: usize) -> std::result::Result<Vec<f64>, JsError> {
        pyramid_strip(&self.image, &self.mask, levels).map(|(_, r)| r).map_err(js)
    }

    pub fn attention_fill(&mut self, levels: usize, softmax_scale: f64) -> std::result::Result<Vec<u8>, JsError> {
        let out = attention_fill(&self.image, &self.mask, levels, softmax_scale).map_err(js)?;
        let px = rgba(&out, None);
        self.filled = Some(out);
        Ok(px)
    }

    /// `[L1, PSNR, SSIM, hole L1]` of the last fill against the original.
    pub fn metrics(&self) -> std::result::Result<Vec<f64>, JsError> {
        let out = self.filled.as_ref().ok_or_else(|| JsError::new("run a fill first"))?;
        let m = || -> Result<Vec<f64>> {
            Ok(vec![
                l1_metric(out, &self.image)?,
                psnr(out, &self.image)?,
                ssim(out, &self.image)?,
                hole_l1(out, &self.image, &self.mask)?,
            ])
        };
        m().map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_keeps_known_pixels_and_fills_holes() {
        let image = synthetic_texture(4, 0, 32);
        let mask = make_mask(32, "both", 0.25, 9).unwrap();
        let out = attention_fill(&image, &mask, 3, 10.0).unwrap();
        for (i, (&o, &x)) in out.data().iter().zip(image.data()).enumerate() {
            if mask.data()[i % (32 * 32)] == 0 {
                assert_eq!(o, x);
            }
        }
        assert!(out.data().iter().all(|v| v.is_finite()));
        let mean_fill = make_mask(32, "both", 0.25, 9).map(|m| {
            let mu = known_mean(&image, &m);
            RasterImage::from_fn(32, 32, 3, |c, y, x| if m.get(y, x) == 1 { mu[c] } else { image.get(c, y, x) })
        });
        // Copying texture should beat a flat fill on a periodic pattern.
        assert!(hole_l1(&out, &image, &mask).unwrap() < hole_l1(&mean_fill.unwrap(), &image, &mask).unwrap());
    }

    #[test]
    fn fully_masked_image_stays_finite() {
        let image = synthetic_texture(1, 0, 16);
        let out = attention_fill(&image, &HoleMask::ones(16, 16), 2, 10.0).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn painting_marks_a_disc() {
        let mut m = HoleMask::zeros(16, 16);
        paint(&mut m, 0, 0, 2);
        assert_eq!(m.count(), 6);
        paint(&mut m, 8, 8, 0);
        assert_eq!(m.get(8, 8), 1);
    }

    #[test]
    fn pyramid_strip_layout() {
        let image = synthetic_texture(2, 0, 32);
        let mask = make_mask(32, "center", 0.25, 0).unwrap();
        let (px, ratios) = pyramid_strip(&image, &mask, 3).unwrap();
        assert_eq!(px.len(), 32 * 96 * 4);
        assert_eq!(ratios.len(), 3);
        assert!(ratios.iter().all(|r| (r - ratios[2]).abs() <= 0.02));
        // Tile centres are holes and therefore white.
        for n in 0..3 {
            let i = (16 * 96 + n * 32 + 16) * 4;
            assert_eq!(&px[i..i + 4], &[255, 255, 255, 255]);
        }
        assert!(make_mask(32, "stripes", 0.2, 0).is_err());
    }
}
