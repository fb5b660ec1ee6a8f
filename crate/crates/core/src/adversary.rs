//! Per-level patch discriminators built from spectrally normalized convolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::{HoleMask, RasterImage};
use crate::nnblocks::{Activation, ConvSpec, SpectralConv};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// Number of stride-2 blocks for a pyramid whose coarsest level is
/// `coarsest` pixels wide: the coarsest discriminator ends on a 1x1 grid.
pub fn adversary_depth(coarsest: usize) -> usize {
    (usize::BITS - 1 - coarsest.max(1).leading_zeros()) as usize
}

/// Stack of 5x5 stride-2 spectrally normalized convolutions with leaky
/// activations; the last block is linear with one output channel.
#[derive(Clone, Debug)]
pub struct LevelAdversary {
    channels: usize,
    layers: Vec<SpectralConv>,
}

impl LevelAdversary {
    pub fn new(channels: usize, width: usize, depth: usize, store: &mut ParamStore<f32>, seed: u64) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::Config("discriminator needs positive depth and width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth);
        let mut c_in = channels + 1;
        for i in 0..depth {
            let last = i + 1 == depth;
            let c_out = if last { 1 } else { width << i.min(1) };
            let act = if last { Activation::Identity } else { Activation::Leaky };
            let spec = ConvSpec::new(c_in, c_out, 5).stride(2).activation(act);
            layers.push(SpectralConv::new(store, &mut rng, &format!("sn{i}"), spec)?);
            c_in = c_out;
        }
        Ok(LevelAdversary { channels, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// One power-iteration step per layer.
    pub fn power_iteration(&self, store: &mut ParamStore<f32>) {
        for l in &self.layers {
            l.power_iteration(store, 1);
        }
    }

    /// Largest-singular-value estimates per layer.
    pub fn sigmas(&self, store: &ParamStore<f32>) -> Vec<f32> {
        self.layers.iter().map(|l| l.sigma(store)).collect()
    }

    /// Scores for `image` (`B x C x H x W`) with constant mask `B x 1 x H x W`.
    pub fn forward_graph<T: Real>(&self, g: &mut Graph<T>, p: &Bound, image: Var, mask: &Tensor<T>) -> Result<Var> {
        let m = g.constant(mask.clone());
        let mut x = g.concat_channels(&[image, m])?;
        for l in &self.layers {
            x = l.forward(g, p, x)?;
        }
        Ok(x)
    }

    /// Score grid for one image, evaluated with the stored power-iteration
    /// vectors (no update).
    pub fn disc_forward(&self, store: &ParamStore<f32>, image: &RasterImage, mask: &HoleMask) -> Result<Tensor<f32>> {
        if image.channels() != self.channels || image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels and a matching mask, got {}x{}x{} with mask {}x{}",
                self.channels,
                image.channels(),
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(image.to_tensor());
        let s = self.forward_graph(&mut g, &p, x, &mask.to_tensor())?;
        Ok(g.value(s).clone())
    }
}
