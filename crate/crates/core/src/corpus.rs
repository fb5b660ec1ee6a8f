//! Training image sources: procedural textures and image directories.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{load_image, RasterImage};

pub trait ImageSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Edge length of every image.
    fn size(&self) -> usize;

    fn get(&self, index: usize) -> Result<RasterImage>;

    /// The same images rendered or loaded at another edge length.
    fn with_size(&self, size: usize) -> Box<dyn ImageSource>;
}

/// Deterministic gratings, checkerboards, plaids and gradients. Frequencies
/// are in pixel units, so a larger canvas shows more periods.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTextures {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl SyntheticTextures {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        SyntheticTextures { count, size, seed }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)]
}

/// Renders texture `index` of the family identified by `seed`.
pub fn synthetic_texture(seed: u64, index: usize, size: usize) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let kind = rng.random_range(0..4u8);
    let (a, b) = (color(&mut rng), color(&mut rng));
    let theta = rng.random_range(0.0..PI);
    let period = rng.random_range(6.0..24.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let theta2 = theta + rng.random_range(0.4..(PI - 0.4));
    let period2 = rng.random_range(6.0..24.0);
    let (ct, st) = (theta.cos(), theta.sin());
    let (ct2, st2) = (theta2.cos(), theta2.sin());
    let tex = move |y: f64, x: f64| -> f64 {
        let u = x * ct + y * st;
        let v = -x * st + y * ct;
        match kind {
            0 => 0.5 + 0.5 * (2.0 * PI * u / period + phase).sin(),
            1 => {
                let s = (PI * u / period + phase).sin() * (PI * v / period).sin();
                // Softened edges keep the pattern band-limited.
                0.5 + 0.5 * (3.0 * s).tanh() / 3f64.tanh()
            }
            2 => {
                let w = x * ct2 + y * st2;
                0.5 + 0.25 * (2.0 * PI * u / period + phase).sin() + 0.25 * (2.0 * PI * w / period2).sin()
            }
            _ => {
                let span = (size as f64) * (ct.abs() + st.abs());
                let off = if ct < 0.0 { -ct * size as f64 } else { 0.0 } + if st < 0.0 { -st * size as f64 } else { 0.0 };
                ((u + off) / span.max(1.0)).clamp(0.0, 1.0)
            }
        }
    };
    let mut t = vec![0.0; size * size];
    for (i, v) in t.iter_mut().enumerate() {
        *v = tex((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
    }
    RasterImage::from_fn(size, size, 3, |c, y, x| {
        let m = t[y * size + x];
        ((1.0 - m) * a[c] + m * b[c]) as f32
    })
}

impl ImageSource for SyntheticTextures {
    fn len(&self) -> usize {
        self.count
    }

    fn size(&self) -> usize {
        self.size
    }

    fn get(&self, index: usize) -> Result<RasterImage> {
        if index >= self.count {
            return Err(Error::Argument(format!("texture {index} out of {}", self.count)));
        }
        Ok(synthetic_texture(self.seed, index, self.size))
    }

    fn with_size(&self, size: usize) -> Box<dyn ImageSource> {
        Box::new(SyntheticTextures { size, ..self.clone() })
    }
}

/// PNG files of a directory, in sorted order, resized and centre-cropped on
/// load.
#[derive(Clone, Debug)]
pub struct ImageDir {
    paths: Vec<PathBuf>,
    size: usize,
}

impl ImageDir {
    pub fn open(dir: &Path, size: usize) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
        }
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_png = p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png {
                paths.push(p);
            }
        }
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("no PNG images in {}", dir.display())));
        }
        Ok(ImageDir { paths, size })
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }
}

impl ImageSource for ImageDir {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn size(&self) -> usize {
        self.size
    }

    fn get(&self, index: usize) -> Result<RasterImage> {
        let p = self
            .paths
            .get(index)
            .ok_or_else(|| Error::Argument(format!("image {index} out of {}", self.paths.len())))?;
        load_image(p, self.size)
    }

    fn with_size(&self, size: usize) -> Box<dyn ImageSource> {
        Box::new(ImageDir {
            paths: self.paths.clone(),
            size,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_deterministic_and_in_range() {
        let src = SyntheticTextures::new(40, 32, 3);
        for i in 0..40 {
            let a = src.get(i).unwrap();
            assert_eq!(a, src.get(i).unwrap());
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_ne!(src.get(0).unwrap(), src.get(1).unwrap());
        assert!(src.get(40).is_err());
    }

    #[test]
    fn larger_canvas_extends_periodic_patterns() {
        let mut checked = 0;
        for i in 0..12 {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            rng.set_stream(i as u64);
            if rng.random_range(0..4u8) == 3 {
                continue;
            }
            let small = synthetic_texture(5, i, 32);
            let large = synthetic_texture(5, i, 64);
            for y in 0..32 {
                for x in 0..32 {
                    assert!((small.get(1, y, x) - large.get(1, y, x)).abs() < 1e-6);
                }
            }
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn image_dir_lists_pngs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ImageDir::open(dir.path(), 16).is_err());
        synthetic_texture(1, 0, 20).save_png(&dir.path().join("b.png")).unwrap();
        synthetic_texture(1, 1, 20).save_png(&dir.path().join("a.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let src = ImageDir::open(dir.path(), 16).unwrap();
        assert_eq!(src.len(), 2);
        assert!(src.paths()[0].ends_with("a.png"));
        assert_eq!(src.get(1).unwrap().height(), 16);
        assert!(ImageDir::open(&dir.path().join("missing"), 16).is_err());
    }
}
