//! Coarse/refine sub-generators stacked into a bottom-up pyramid.
//!
//! Level `n > 0` adds the bilinearly upsampled refined output of level
//! `n - 1` to its own coarse output before refinement (in the default fusion
//! mode). Every level sees its own downsampled copy of the masked input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::{build_pyramid_with, upsample, HoleMask, MaskRule, PyramidSample, RasterImage};
use crate::nnblocks::{contextual_attention, max_pool_mask, Activation, AttentionSpec, Conv, ConvSpec, GatedConv};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// Dilation rates of the dilated gated convolutions, per level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DilationPlan {
    pub rates: Vec<Vec<usize>>,
}

impl DilationPlan {
    /// Four rates at the bottom level, three above it.
    pub fn adaptive(levels: usize) -> Self {
        let rates = (0..levels)
            .map(|n| if n == 0 { vec![2, 4, 8, 12] } else { vec![2, 4, 8] })
            .collect();
        DilationPlan { rates }
    }

    /// The same four rates at every level.
    pub fn standard(levels: usize) -> Self {
        DilationPlan {
            rates: vec![vec![2, 4, 8, 16]; levels],
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.rates.len() != levels {
            return Err(Error::Config(format!(
                "dilation plan has {} levels, pyramid has {levels}",
                self.rates.len()
            )));
        }
        for (n, r) in self.rates.iter().enumerate() {
            if r.is_empty() || r[0] == 0 || r.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "dilation rates for level {n} must be nonempty, positive and ascending: {r:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Fused image feeds both refine branches.
    #[default]
    ImageRefineBoth,
    ImageRefineAttOnly,
    ImageRefineNonattOnly,
    /// Upsampled lower coarse bottleneck features are added instead.
    FeatureCoarse,
    /// Upsampled lower refine decoder features are added instead.
    FeatureRefine,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::ImageRefineBoth,
        FusionMode::ImageRefineAttOnly,
        FusionMode::ImageRefineNonattOnly,
        FusionMode::FeatureCoarse,
        FusionMode::FeatureRefine,
    ];

    pub fn is_image_level(self) -> bool {
        !matches!(self, FusionMode::FeatureCoarse | FusionMode::FeatureRefine)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::ImageRefineBoth => "image_refine_both",
            FusionMode::ImageRefineAttOnly => "image_refine_att_only",
            FusionMode::ImageRefineNonattOnly => "image_refine_nonatt_only",
            FusionMode::FeatureCoarse => "feature_coarse",
            FusionMode::FeatureRefine => "feature_refine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub base_width: usize,
    pub levels: usize,
    /// Factor-2 upsamplings from the pyramid top to the output resolution.
    /// Non-zero only for the reduced two-level variant.
    pub top_skip: usize,
    pub dilation: DilationPlan,
    pub fusion: FusionMode,
    pub attention: AttentionSpec,
    /// Paste known pixels into the refine-stage input.
    pub refine_paste_back: bool,
    /// Feed the composed rather than the raw lower output upward.
    pub feed_composed: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            channels: 3,
            base_width: 32,
            levels: 3,
            top_skip: 0,
            dilation: DilationPlan::adaptive(3),
            fusion: FusionMode::default(),
            attention: AttentionSpec::default(),
            refine_paste_back: true,
            feed_composed: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("pyramid needs at least 2 levels, got {}", self.levels)));
        }
        if self.channels == 0 || self.base_width < 2 {
            return Err(Error::Config("channels must be positive and base_width at least 2".into()));
        }
        self.dilation.validate(self.levels)?;
        self.attention.validate()
    }

    /// Spatial size must be a multiple of this at the pyramid top.
    pub fn divisor(&self) -> usize {
        // Each level's encoder halves twice; attention matching halves again.
        (1 << (self.levels - 1)) * 4 * self.attention.match_rate
    }
}

/// Five-layer gated encoder from image resolution `H` down to `H/4`.
fn encoder<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    c1: usize,
    c2: usize,
) -> Result<Vec<GatedConv>> {
    let specs = [
        ConvSpec::new(input, c1, 5),
        ConvSpec::new(c1, c2, 3).stride(2),
        ConvSpec::new(c2, c2, 3),
        ConvSpec::new(c2, c2, 3).stride(2),
        ConvSpec::new(c2, c2, 3),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| GatedConv::new(store, rng, &format!("{prefix}.enc{i}"), *s))
        .collect()
}

fn dilated<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    c: usize,
    rates: &[usize],
) -> Result<Vec<GatedConv>> {
    rates
        .iter()
        .map(|&r| GatedConv::new(store, rng, &format!("{prefix}.dil{r}"), ConvSpec::new(c, c, 3).dilation(r)))
        .collect()
}

fn chain<T: Real>(g: &mut Graph<T>, p: &Bound, layers: &[GatedConv], mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(g, p, x)?;
    }
    Ok(x)
}

/// Extra features handed up from the level below in the feature fusion modes.
#[derive(Clone, Copy, Debug)]
struct LowerFeatures {
    coarse: Var,
    refine: Var,
}

/// One pyramid level: a coarse stage and a two-branch refine stage.
#[derive(Clone, Debug)]
pub struct SubGenerator {
    level: usize,
    coarse_enc: Vec<GatedConv>,
    coarse_dil: Vec<GatedConv>,
    coarse_mid: GatedConv,
    coarse_up: [GatedConv; 2],
    coarse_out: Conv,
    att_enc: Vec<GatedConv>,
    att_post: Vec<GatedConv>,
    nonatt_enc: Vec<GatedConv>,
    nonatt_dil: Vec<GatedConv>,
    dec_mid: Vec<GatedConv>,
    dec_up: [GatedConv; 2],
    dec_out: Conv,
}

impl SubGenerator {
    pub fn new<T: Real>(config: &GeneratorConfig, level: usize, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = config.channels;
        let c2 = config.base_width;
        let c1 = (c2 / 2).max(1);
        let rates = &config.dilation.rates[level];
        let head = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| {
            Conv::new(store, rng, name, ConvSpec::new(c1, c, 3).activation(Activation::Tanh))
        };
        Ok(SubGenerator {
            level,
            coarse_enc: encoder(store, rng, "coarse", c + 1, c1, c2)?,
            coarse_dil: dilated(store, rng, "coarse", c2, rates)?,
            coarse_mid: GatedConv::new(store, rng, "coarse.mid", ConvSpec::new(c2, c2, 3))?,
            coarse_up: [
                GatedConv::new(store, rng, "coarse.up0", ConvSpec::new(c2, c2, 3))?,
                GatedConv::new(store, rng, "coarse.up1", ConvSpec::new(c2, c1, 3))?,
            ],
            coarse_out: head(store, rng, "coarse.out")?,
            att_enc: encoder(store, rng, "att", c + 1, c1, c2)?,
            att_post: vec![
                GatedConv::new(store, rng, "att.post0", ConvSpec::new(c2, c2, 3))?,
                GatedConv::new(store, rng, "att.post1", ConvSpec::new(c2, c2, 3))?,
            ],
            nonatt_enc: encoder(store, rng, "nonatt", c + 1, c1, c2)?,
            nonatt_dil: dilated(store, rng, "nonatt", c2, rates)?,
            dec_mid: vec![
                GatedConv::new(store, rng, "dec.mid0", ConvSpec::new(2 * c2, c2, 3))?,
                GatedConv::new(store, rng, "dec.mid1", ConvSpec::new(c2, c2, 3))?,
            ],
            dec_up: [
                GatedConv::new(store, rng, "dec.up0", ConvSpec::new(c2, c2, 3))?,
                GatedConv::new(store, rng, "dec.up1", ConvSpec::new(c2, c1, 3))?,
            ],
            dec_out: head(store, rng, "dec.out")?,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Every convolution of the level with its trainable scalar count.
    pub fn conv_specs(&self) -> Vec<(ConvSpec, bool)> {
        let gated = self
            .coarse_enc
            .iter()
            .chain(&self.coarse_dil)
            .chain([&self.coarse_mid])
            .chain(&self.coarse_up)
            .chain(&self.att_enc)
            .chain(&self.att_post)
            .chain(&self.nonatt_enc)
            .chain(&self.nonatt_dil)
            .chain(&self.dec_mid)
            .chain(&self.dec_up)
            .map(|l| (l.spec, true));
        gated
            .chain([(self.coarse_out.spec, false), (self.dec_out.spec, false)])
            .collect()
    }

    /// Coarse stage on `x` (`B x (C+1) x H x W`): returns the `H/4`
    /// bottleneck features and the tanh-bounded image.
    fn coarse<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, lower: Option<Var>) -> Result<(Var, Var)> {
        let mut f = chain(g, p, &self.coarse_enc, x)?;
        f = chain(g, p, &self.coarse_dil, f)?;
        if let Some(l) = lower {
            let up = g.upsample_bilinear(l, 2)?;
            f = g.add(f, up)?;
        }
        let bottleneck = f;
        let mut y = self.coarse_mid.forward(g, p, f)?;
        for l in &self.coarse_up {
            y = g.upsample_nearest(y, 2)?;
            y = l.forward(g, p, y)?;
        }
        Ok((bottleneck, self.coarse_out.forward(g, p, y)?))
    }

    #[allow(clippy::too_many_arguments)]
    fn refine<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        att_in: Var,
        nonatt_in: Var,
        mask: &Tensor<T>,
        attention: &AttentionSpec,
        lower: Option<Var>,
    ) -> Result<(Var, Var)> {
        let a = chain(g, p, &self.att_enc, att_in)?;
        let a = attend(g, a, mask, attention)?;
        let a = chain(g, p, &self.att_post, a)?;
        let b = chain(g, p, &self.nonatt_enc, nonatt_in)?;
        let b = chain(g, p, &self.nonatt_dil, b)?;
        let mut y = g.concat_channels(&[a, b])?;
        y = chain(g, p, &self.dec_mid, y)?;
        if let Some(l) = lower {
            let up = g.upsample_bilinear(l, 2)?;
            y = g.add(y, up)?;
        }
        let feature = y;
        for l in &self.dec_up {
            y = g.upsample_nearest(y, 2)?;
            y = l.forward(g, p, y)?;
        }
        Ok((feature, self.dec_out.forward(g, p, y)?))
    }
}

/// Contextual attention applied item by item; items without any known
/// pixel at feature resolution pass through unchanged.
fn attend<T: Real>(g: &mut Graph<T>, feats: Var, mask: &Tensor<T>, spec: &AttentionSpec) -> Result<Var> {
    let (b, _, fh, _) = g.value(feats).dims4()?;
    let (_, _, mh, _) = mask.dims4()?;
    let fmask = max_pool_mask(mask, mh / fh)?;
    let plane = fmask.len() / b;
    let mut parts = Vec::with_capacity(b);
    for i in 0..b {
        let item = g.slice0(feats, i, 1)?;
        let m = fmask.batch_item(i)?;
        debug_assert_eq!(m.len(), plane);
        match contextual_attention(g, item, item, &m, spec) {
            Ok(out) => parts.push(out.output),
            Err(Error::Degenerate(_)) => parts.push(item),
            Err(e) => return Err(e),
        }
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat0(&parts)
    }
}

/// Graph inputs for one level: images `B x C x H x W` and masks `B x 1 x H x W`.
#[derive(Clone, Debug)]
pub struct LevelInput<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> LevelInput<T> {
    /// Stacks the same level of several samples.
    pub fn from_samples(samples: &[PyramidSample], level: usize) -> Result<Self> {
        let images: Vec<Tensor<T>> = samples.iter().map(|s| s.levels[level].image.to_tensor()).collect();
        let masks: Vec<Tensor<T>> = samples.iter().map(|s| s.levels[level].mask.to_tensor()).collect();
        Ok(LevelInput {
            image: Tensor::stack0(&images)?,
            mask: Tensor::stack0(&masks)?,
        })
    }

    fn holes_zeroed(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.image.dims4()?;
        let plane = h * w;
        Ok(Tensor::from_fn(&[b, c, h, w], |i| {
            let m = self.mask.data()[(i / (c * plane)) * plane + i % plane];
            self.image.data()[i] * (T::one() - m)
        }))
    }
}

/// Graph nodes produced at one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub coarse: Var,
    pub fused: Var,
    pub refined: Var,
}

/// Per-level images for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub coarse: RasterImage,
    pub refined: RasterImage,
    pub fused_input: RasterImage,
}

#[derive(Clone, Debug)]
pub struct PyramidGenerator {
    pub config: GeneratorConfig,
    subs: Vec<SubGenerator>,
    /// One store per level, checkpointed as `G0`, `G1`, ...
    pub params: Vec<ParamStore<f32>>,
}

impl PyramidGenerator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut subs = Vec::with_capacity(config.levels);
        let mut params = Vec::with_capacity(config.levels);
        for n in 0..config.levels {
            let mut store = ParamStore::new();
            subs.push(SubGenerator::new(&config, n, &mut store, seed.wrapping_add(1000 * n as u64 + 1))?);
            params.push(store);
        }
        Ok(PyramidGenerator { config, subs, params })
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn sub(&self, level: usize) -> &SubGenerator {
        &self.subs[level]
    }

    /// Trainable scalars per level.
    pub fn count_params(&self) -> Vec<usize> {
        self.params.iter().map(ParamStore::count_trainable).collect()
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, stores: &[ParamStore<T>], trainable: &[bool]) -> Vec<Bound> {
        stores
            .iter()
            .zip(trainable)
            .map(|(s, &t)| if t { s.bind(g) } else { s.bind_frozen(g) })
            .collect()
    }

    /// Forward pass through levels `0..inputs.len()`, coarsest first.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &[Bound],
        inputs: &[LevelInput<T>],
    ) -> Result<Vec<LevelVars>> {
        if inputs.is_empty() || inputs.len() > self.levels() || bound.len() < inputs.len() {
            return Err(Error::Config(format!(
                "generator has {} levels, got {} inputs",
                self.levels(),
                inputs.len()
            )));
        }
        let div = 4 * self.config.attention.match_rate;
        let mode = self.config.fusion;
        let mut out: Vec<LevelVars> = Vec::with_capacity(inputs.len());
        let mut feats: Option<LowerFeatures> = None;
        for (n, input) in inputs.iter().enumerate() {
            let (b, c, h, w) = input.image.dims4()?;
            if c != self.config.channels || input.mask.shape() != [b, 1, h, w] {
                return Err(Error::Shape(format!(
                    "level {n}: image {:?} and mask {:?} do not fit a {}-channel generator",
                    input.image.shape(),
                    input.mask.shape(),
                    self.config.channels
                )));
            }
            if h % div != 0 || w % div != 0 {
                return Err(Error::Shape(format!("level {n}: {h}x{w} is not divisible by {div}")));
            }
            if let Some(prev) = out.last() {
                let ph = g.shape(prev.refined)[2];
                if ph * 2 != h {
                    return Err(Error::Shape(format!("level {n}: {h} is not twice the level below ({ph})")));
                }
            }
            let sub = &self.subs[n];
            let p = &bound[n];
            let known = g.constant(input.image.clone());
            let x = g.constant(input.holes_zeroed()?);
            let m = g.constant(input.mask.clone());
            let x = g.concat_channels(&[x, m])?;
            let lower_coarse = feats.filter(|_| mode == FusionMode::FeatureCoarse).map(|f| f.coarse);
            let (cfeat, coarse) = sub.coarse(g, p, x, lower_coarse)?;

            let fused = match out.last() {
                Some(prev) if mode.is_image_level() => {
                    let lower = if self.config.feed_composed {
                        let prev_in = &inputs[n - 1];
                        let k = g.constant(prev_in.image.clone());
                        g.blend(prev.refined, k, &prev_in.mask)?
                    } else {
                        prev.refined
                    };
                    let up = g.upsample_bilinear(lower, 2)?;
                    let sum = g.add(coarse, up)?;
                    g.clamp(sum, -T::one(), T::one())
                }
                _ => coarse,
            };
            let (att_img, nonatt_img) = match mode {
                FusionMode::ImageRefineBoth => (fused, fused),
                FusionMode::ImageRefineAttOnly => (fused, coarse),
                FusionMode::ImageRefineNonattOnly => (coarse, fused),
                FusionMode::FeatureCoarse | FusionMode::FeatureRefine => (coarse, coarse),
            };
            let mut branch_input = |img: Var| -> Result<Var> {
                let img = if self.config.refine_paste_back {
                    g.blend(img, known, &input.mask)?
                } else {
                    img
                };
                g.concat_channels(&[img, m])
            };
            let att_in = branch_input(att_img)?;
            let nonatt_in = if nonatt_img == att_img {
                att_in
            } else {
                branch_input(nonatt_img)?
            };
            let lower_refine = feats.filter(|_| mode == FusionMode::FeatureRefine).map(|f| f.refine);
            let (rfeat, refined) = sub.refine(
                g,
                p,
                att_in,
                nonatt_in,
                &input.mask,
                &self.config.attention,
                lower_refine,
            )?;
            feats = Some(LowerFeatures {
                coarse: cfeat,
                refine: rfeat,
            });
            out.push(LevelVars { coarse, fused, refined });
        }
        Ok(out)
    }

    /// Inference on one sample whose level count equals the generator's.
    pub fn pyramid_forward(&self, sample: &PyramidSample) -> Result<Vec<LevelOutput>> {
        if sample.len() != self.levels() {
            return Err(Error::Config(format!(
                "sample has {} levels, generator has {}",
                sample.len(),
                self.levels()
            )));
        }
        let inputs = (0..sample.len())
            .map(|n| LevelInput::from_samples(std::slice::from_ref(sample), n))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::<f32>::new();
        let bound: Vec<Bound> = self.params.iter().map(|s| s.bind_frozen(&mut g)).collect();
        let vars = self.forward_graph(&mut g, &bound, &inputs)?;
        vars.iter()
            .map(|v| {
                Ok(LevelOutput {
                    coarse: RasterImage::from_tensor(g.value(v.coarse), 0)?,
                    refined: RasterImage::from_tensor(g.value(v.refined), 0)?,
                    fused_input: RasterImage::from_tensor(g.value(v.fused), 0)?,
                })
            })
            .collect()
    }

    /// Full-resolution input size must be a multiple of this.
    pub fn input_divisor(&self) -> usize {
        self.config.divisor() << self.config.top_skip
    }

    /// Fills the holes of `image` and pastes the known pixels back.
    pub fn inpaint(&self, image: &RasterImage, mask: &HoleMask) -> Result<RasterImage> {
        let div = self.input_divisor();
        if image.height() % div != 0 || image.width() % div != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by {div}",
                image.height(),
                image.width()
            )));
        }
        let full = build_pyramid_with(image, mask, self.levels() + self.config.top_skip, MaskRule::default())?;
        let sample = full.truncate_top(self.config.top_skip);
        let outputs = self.pyramid_forward(&sample)?;
        let mut top = outputs.last().expect("at least two levels").refined.clone();
        for _ in 0..self.config.top_skip {
            top = upsample(&top, 2)?;
        }
        compose(&top, image, mask)
    }
}

/// `mask * generated + (1 - mask) * original`.
pub fn compose(generated: &RasterImage, original: &RasterImage, mask: &HoleMask) -> Result<RasterImage> {
    let (h, w, c) = (original.height(), original.width(), original.channels());
    if generated.height() != h || generated.width() != w || generated.channels() != c || mask.height() != h || mask.width() != w
    {
        return Err(Error::Shape(format!(
            "compose: generated {}x{}x{}, original {h}x{w}x{c}, mask {}x{}",
            generated.channels(),
            generated.height(),
            generated.width(),
            mask.height(),
            mask.width()
        )));
    }
    let plane = h * w;
    let data = original
        .data()
        .iter()
        .zip(generated.data())
        .enumerate()
        .map(|(i, (&o, &gv))| if mask.data()[i % plane] == 1 { gv } else { o })
        .collect();
    RasterImage::new(h, w, c, data)
}
