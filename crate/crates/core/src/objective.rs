//! Reconstruction and hinge adversarial losses, as plain functions on values
//! and as graph builders used during training.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambdas: Vec<f64>,
}

impl LossWeights {
    /// `alpha = 1`, a weight of 10 on the bottom level and 1 elsewhere.
    pub fn for_levels(levels: usize) -> Self {
        LossWeights {
            alpha: 1.0,
            lambdas: (0..levels).map(|n| if n == 0 { 10.0 } else { 1.0 }).collect(),
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.lambdas.len() != levels {
            return Err(Error::Config(format!(
                "{} loss weights for {levels} levels",
                self.lambdas.len()
            )));
        }
        if !(self.alpha >= 0.0) || self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_levels(3)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelLoss {
    pub recon: f64,
    pub gen_adv: f64,
    pub disc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub levels: Vec<LevelLoss>,
    pub total_generator: f64,
}

impl LossReport {
    /// Recomputes the weighted generator total from the per-level parts.
    pub fn total_from_parts(&self, weights: &LossWeights) -> Result<f64> {
        let layer: Vec<f64> = self
            .levels
            .iter()
            .map(|l| layer_loss(l.recon, l.gen_adv, weights.alpha))
            .collect();
        pyramid_loss(&layer, weights)
    }

    pub fn all_finite(&self) -> bool {
        self.total_generator.is_finite()
            && self
                .levels
                .iter()
                .all(|l| l.recon.is_finite() && l.gen_adv.is_finite() && l.disc.is_finite())
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn recon_loss(generated: &RasterImage, truth: &RasterImage) -> Result<f64> {
    if (generated.height(), generated.width(), generated.channels()) != (truth.height(), truth.width(), truth.channels())
    {
        return Err(Error::Shape("recon_loss: image shapes differ".into()));
    }
    let sum: f64 = generated
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / generated.data().len() as f64)
}

pub fn gen_hinge(fake_scores: &[f32]) -> f64 {
    if fake_scores.is_empty() {
        return 0.0;
    }
    -fake_scores.iter().map(|&s| s as f64).sum::<f64>() / fake_scores.len() as f64
}

pub fn disc_hinge(real_scores: &[f32], fake_scores: &[f32]) -> f64 {
    let mean = |s: &[f32], f: &dyn Fn(f64) -> f64| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().map(|&x| f(x as f64)).sum::<f64>() / s.len() as f64
        }
    };
    mean(real_scores, &|r| (1.0 - r).max(0.0)) + mean(fake_scores, &|f| (1.0 + f).max(0.0))
}

pub fn layer_loss(recon: f64, gen_adv: f64, alpha: f64) -> f64 {
    gen_adv + alpha * recon
}

pub fn pyramid_loss(layer_losses: &[f64], weights: &LossWeights) -> Result<f64> {
    if layer_losses.len() != weights.lambdas.len() {
        return Err(Error::Argument(format!(
            "{} layer losses for {} weights",
            layer_losses.len(),
            weights.lambdas.len()
        )));
    }
    Ok(layer_losses.iter().zip(&weights.lambdas).map(|(l, w)| l * w).sum())
}

/// `mean(|a - b|)` against a constant target.
pub fn recon_loss_graph<T: Real>(g: &mut Graph<T>, generated: Var, truth: &Tensor<T>) -> Result<Var> {
    let t = g.constant(truth.clone());
    let d = g.sub(generated, t)?;
    let d = g.abs(d);
    Ok(g.mean_all(d))
}

pub fn gen_hinge_graph<T: Real>(g: &mut Graph<T>, fake_scores: Var) -> Var {
    let m = g.mean_all(fake_scores);
    g.scale(m, -T::one())
}

pub fn disc_hinge_graph<T: Real>(g: &mut Graph<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let r = g.scale(real_scores, -T::one());
    let r = g.add_scalar(r, T::one());
    let r = g.relu(r);
    let r = g.mean_all(r);
    let f = g.add_scalar(fake_scores, T::one());
    let f = g.relu(f);
    let f = g.mean_all(f);
    g.add(r, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnblocks::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recon_matches_brute_force() {
        let random = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f32> = (0..105).map(|_| rng.random_range(-1.0..1.0)).collect();
            RasterImage::new(7, 5, 3, v).unwrap()
        };
        let (a, b) = (random(9), random(10));
        let mut acc = 0.0f64;
        for c in 0..3 {
            for y in 0..7 {
                for x in 0..5 {
                    acc += (a.get(c, y, x) as f64 - b.get(c, y, x) as f64).abs();
                }
            }
        }
        assert!((recon_loss(&a, &b).unwrap() - acc / 105.0).abs() < 1e-7);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
        assert!(recon_loss(&a, &RasterImage::filled(5, 7, 3, 0.0)).is_err());
    }

    #[test]
    fn offset_gives_constant_l1() {
        let a = RasterImage::filled(4, 4, 3, 0.1);
        let b = RasterImage::filled(4, 4, 3, 0.6);
        assert!((recon_loss(&b, &a).unwrap() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn weights_validate_lengths() {
        assert!(LossWeights::for_levels(3).validate(3).is_ok());
        assert!(LossWeights::for_levels(3).validate(2).is_err());
        let neg = LossWeights {
            alpha: -1.0,
            lambdas: vec![1.0, 1.0],
        };
        assert!(neg.validate(2).is_err());
    }

    #[test]
    fn graph_losses_agree_with_plain_ones() {
        let real = [0.3f32, 1.7, -0.4, 2.0];
        let fake = [-2.0f32, 0.1, -0.5, 0.9];
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::new(&[4], real.iter().map(|&x| x as f64).collect()).unwrap());
        let f = g.constant(Tensor::new(&[4], fake.iter().map(|&x| x as f64).collect()).unwrap());
        let d = disc_hinge_graph(&mut g, r, f).unwrap();
        let gh = gen_hinge_graph(&mut g, f);
        assert!((g.value(d).data()[0] - disc_hinge(&real, &fake)).abs() < 1e-7);
        assert!((g.value(gh).data()[0] - gen_hinge(&fake)).abs() < 1e-7);
    }

    /// Random scores kept at least 0.05 away from the hinge kinks at +-1.
    fn away_from_kinks(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n], |_| loop {
            let v: f64 = rng.random_range(-2.5..2.5);
            if (v.abs() - 1.0).abs() > 0.05 {
                break v;
            }
        })
    }

    #[test]
    fn loss_gradients_match_differences() {
        let truth = away_from_kinks(16, 1);
        let gen = truth.zip_map(&away_from_kinks(16, 2), |t, d| t + 0.1 * d.signum() + 0.02 * d);
        let recon = grad_check(&[gen], 16, 3, |g, v| recon_loss_graph(g, v[0], &truth)).unwrap();
        assert!(recon.max_rel_error < 1e-6, "{recon:?}");
        let scores = vec![away_from_kinks(8, 4), away_from_kinks(8, 5)];
        let d = grad_check(&scores, 16, 6, |g, v| disc_hinge_graph(g, v[0], v[1])).unwrap();
        assert!(d.max_rel_error < 1e-6, "{d:?}");
        let gh = grad_check(&scores[..1], 8, 7, |g, v| Ok(gen_hinge_graph(g, v[0]))).unwrap();
        assert!(gh.max_rel_error < 1e-6, "{gh:?}");
    }
}
