//! Joint training of all sub-generators with independent per-level
//! discriminators, plus batching, checkpoints and the overfitting harness.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{adversary_depth, LevelAdversary};
use crate::autograd::{Graph, Var};
use crate::corpus::ImageSource;
use crate::error::{Error, Result};
use crate::evalkit::hole_l1;
use crate::generator::{DilationPlan, FusionMode, GeneratorConfig, LevelInput, PyramidGenerator};
use crate::imaging::{
    build_pyramid_with, gen_center_mask, gen_freeform_mask, BrushConfig, HoleMask, MaskRule, PyramidSample, RasterImage,
};
use crate::nnblocks::AttentionSpec;
use crate::objective::{
    disc_hinge_graph, gen_hinge_graph, layer_loss, recon_loss_graph, LevelLoss, LossReport, LossWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingScheme {
    #[default]
    Joint,
    /// Levels are trained one at a time, bottom first, with the ones below
    /// frozen; the active level advances evenly over `steps`.
    LayerByLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    /// Centre-square area ratio is drawn uniformly from this range.
    pub center_ratio_min: f64,
    pub center_ratio_max: f64,
    /// Union a free-form brush mask with the centre square.
    pub freeform: bool,
    /// Brush parameters; defaults scale with the top resolution.
    pub brush: Option<BrushConfig>,
    pub downsample_rule: MaskRule,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            center_ratio_min: 0.15,
            center_ratio_max: 0.55,
            freeform: true,
            brush: None,
            downsample_rule: MaskRule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub levels: usize,
    /// Edge length of training images.
    pub top_resolution: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    pub channels: usize,
    pub base_width: usize,
    pub disc_width: usize,
    /// Pyramid top sits this many halvings below `top_resolution`.
    pub top_skip: usize,
    pub fusion: FusionMode,
    /// Defaults to the adaptive plan for `levels`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dilation: Option<DilationPlan>,
    pub attention: AttentionSpec,
    pub refine_paste_back: bool,
    pub feed_composed: bool,
    /// Discriminators see the pasted-back composition rather than the raw output.
    pub disc_on_composed: bool,
    /// Adds an L1 term on the coarse output.
    pub coarse_l1: bool,
    pub freeze_discriminators: bool,
    pub training_scheme: TrainingScheme,
    pub hflip: bool,
    pub optimizer: AdamConfig,
    /// Defaults to `LossWeights::for_levels(levels)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    pub masks: MaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            levels: 3,
            top_resolution: 128,
            batch_size: 2,
            steps: 1000,
            d_steps_per_g_step: 1,
            seed: 0,
            channels: 3,
            base_width: 32,
            disc_width: 32,
            top_skip: 0,
            fusion: FusionMode::default(),
            dilation: None,
            attention: AttentionSpec::default(),
            refine_paste_back: true,
            feed_composed: false,
            disc_on_composed: true,
            coarse_l1: false,
            freeze_discriminators: false,
            training_scheme: TrainingScheme::default(),
            hflip: true,
            optimizer: AdamConfig::default(),
            weights: None,
            masks: MaskConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for a pyramid of `levels` levels at `top_resolution`.
    pub fn desk(levels: usize, top_resolution: usize) -> Self {
        TrainConfig {
            levels,
            top_resolution,
            ..TrainConfig::default()
        }
    }

    pub fn dilation_plan(&self) -> DilationPlan {
        self.dilation.clone().unwrap_or_else(|| DilationPlan::adaptive(self.levels))
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights.clone().unwrap_or_else(|| LossWeights::for_levels(self.levels))
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            channels: self.channels,
            base_width: self.base_width,
            levels: self.levels,
            top_skip: self.top_skip,
            dilation: self.dilation_plan(),
            fusion: self.fusion,
            attention: self.attention,
            refine_paste_back: self.refine_paste_back,
            feed_composed: self.feed_composed,
        }
    }

    /// Edge length of the coarsest pyramid level.
    pub fn coarsest(&self) -> usize {
        self.top_resolution >> (self.levels - 1 + self.top_skip)
    }

    pub fn brush(&self) -> BrushConfig {
        self.masks
            .brush
            .clone()
            .unwrap_or_else(|| BrushConfig::for_size(self.top_resolution))
    }

    pub fn validate(&self) -> Result<()> {
        let gen = self.generator_config();
        gen.validate()?;
        let div = gen.divisor() << self.top_skip;
        if self.top_resolution == 0 || self.top_resolution % div != 0 {
            return Err(Error::Config(format!(
                "top_resolution {} must be a positive multiple of {div}",
                self.top_resolution
            )));
        }
        if self.batch_size == 0 || self.d_steps_per_g_step == 0 || self.disc_width == 0 {
            return Err(Error::Config(
                "batch_size, d_steps_per_g_step and disc_width must be at least 1".into(),
            ));
        }
        let m = &self.masks;
        if !(0.0 < m.center_ratio_min && m.center_ratio_min <= m.center_ratio_max && m.center_ratio_max < 1.0) {
            return Err(Error::Config(format!(
                "centre ratio range [{}, {}] must lie in (0, 1)",
                m.center_ratio_min, m.center_ratio_max
            )));
        }
        self.brush().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optimizer.validate()?;
        self.loss_weights().validate(self.levels)
    }

    /// Digest of every field except `steps`, so a run may be extended.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.dilation = Some(self.dilation_plan());
        c.weights = Some(self.loss_weights());
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Draws `batch_size` training samples: a random image, a centre square
/// united with a free-form mask, optional horizontal flip.
pub fn make_batch(source: &dyn ImageSource, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PyramidSample>> {
    if source.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let top = config.top_resolution;
    if source.size() != top {
        return Err(Error::Config(format!(
            "dataset images are {} px, config expects {top}",
            source.size()
        )));
    }
    let brush = config.brush();
    (0..config.batch_size)
        .map(|_| {
            let index = rng.random_range(0..source.len());
            let mut image = source.get(index)?;
            if config.hflip && rng.random_bool(0.5) {
                image = image.hflip();
            }
            let m = &config.masks;
            let ratio = if m.center_ratio_max > m.center_ratio_min {
                rng.random_range(m.center_ratio_min..=m.center_ratio_max)
            } else {
                m.center_ratio_min
            };
            let mut mask = gen_center_mask(top, ratio)?;
            let brush_seed: u64 = rng.random();
            if m.freeform {
                mask = mask.union(&gen_freeform_mask(top, &brush, brush_seed)?)?;
            }
            sample_for(&image, &mask, config)
        })
        .collect()
}

/// Pyramid of `image` and `mask` at the generator's levels.
pub fn sample_for(image: &RasterImage, mask: &HoleMask, config: &TrainConfig) -> Result<PyramidSample> {
    let full = build_pyramid_with(image, mask, config.levels + config.top_skip, config.masks.downsample_rule)?;
    Ok(full.truncate_top(config.top_skip))
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub generator: PyramidGenerator,
    pub adversaries: Vec<LevelAdversary>,
    pub disc_params: Vec<ParamStore<f32>>,
    pub gen_opt: Vec<Adam>,
    pub disc_opt: Vec<Adam>,
    /// Data stream: batch composition, masks, flips.
    pub rng: ChaCha8Rng,
    /// Exponential moving average of the total generator loss.
    pub running_loss: Option<f64>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = PyramidGenerator::new(config.generator_config(), config.seed)?;
        let depth = adversary_depth(config.coarsest());
        let mut adversaries = Vec::with_capacity(config.levels);
        let mut disc_params = Vec::with_capacity(config.levels);
        for n in 0..config.levels {
            let mut store = ParamStore::new();
            let seed = config.seed ^ 0xD15C_0000_0000 ^ n as u64;
            adversaries.push(LevelAdversary::new(config.channels, config.disc_width, depth, &mut store, seed)?);
            disc_params.push(store);
        }
        let gen_opt = generator.params.iter().map(|s| Adam::new(config.optimizer, s)).collect();
        let disc_opt = disc_params.iter().map(|s| Adam::new(config.optimizer, s)).collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
        Ok(TrainState {
            config,
            step: 0,
            generator,
            adversaries,
            disc_params,
            gen_opt,
            disc_opt,
            rng,
            running_loss: None,
        })
    }

    /// Levels that take part in the current step, and the lowest trainable one.
    fn schedule(&self) -> (usize, usize) {
        let l = self.config.levels;
        match self.config.training_scheme {
            TrainingScheme::Joint => (l, 0),
            TrainingScheme::LayerByLayer => {
                let total = self.config.steps.max(1);
                let active = ((self.step.min(total - 1) * l as u64) / total) as usize;
                (active + 1, active)
            }
        }
    }
}

/// One joint update: per-level discriminator updates on detached composed
/// fakes, then one generator update on the weighted pyramid loss. Losses are
/// those of the parameters before this step.
pub fn train_step(state: &mut TrainState, batch: &[PyramidSample]) -> Result<LossReport> {
    let cfg = state.config.clone();
    if batch.is_empty() || batch.iter().any(|s| s.len() != cfg.levels) {
        return Err(Error::Config(format!("batch samples must have {} levels", cfg.levels)));
    }
    let (active, lowest) = state.schedule();
    let weights = cfg.loss_weights();
    let inputs = (0..active)
        .map(|n| LevelInput::<f32>::from_samples(batch, n))
        .collect::<Result<Vec<_>>>()?;

    let mut g = Graph::<f32>::new();
    let trainable: Vec<bool> = (0..cfg.levels).map(|n| n >= lowest).collect();
    let gbound = state.generator.bind(&mut g, &state.generator.params, &trainable);
    let vars = state.generator.forward_graph(&mut g, &gbound, &inputs)?;

    let mut report = LossReport {
        levels: vec![LevelLoss::default(); active],
        total_generator: 0.0,
    };
    let mut total: Option<Var> = None;
    let mut fakes = Vec::with_capacity(active);
    for (n, v) in vars.iter().enumerate() {
        let input = &inputs[n];
        let mut recon = recon_loss_graph(&mut g, v.refined, &input.image)?;
        if cfg.coarse_l1 {
            let c = recon_loss_graph(&mut g, v.coarse, &input.image)?;
            recon = g.add(recon, c)?;
        }
        let fake = if cfg.disc_on_composed {
            let known = g.constant(input.image.clone());
            g.blend(v.refined, known, &input.mask)?
        } else {
            v.refined
        };
        fakes.push(g.value(fake).clone());
        let dbound = state.disc_params[n].bind_frozen(&mut g);
        let scores = state.adversaries[n].forward_graph(&mut g, &dbound, fake, &input.mask)?;
        let gadv = gen_hinge_graph(&mut g, scores);
        let lr = &mut report.levels[n];
        lr.recon = g.value(recon).data()[0] as f64;
        lr.gen_adv = g.value(gadv).data()[0] as f64;
        let lambda = weights.lambdas[n];
        report.total_generator += lambda * layer_loss(lr.recon, lr.gen_adv, weights.alpha);
        let counts = n >= lowest && lambda > 0.0;
        if counts {
            let r = g.scale(recon, weights.alpha as f32);
            let l = g.add(gadv, r)?;
            let l = g.scale(l, lambda as f32);
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
    }

    // Discriminator losses before any update.
    let disc_levels: Vec<usize> = (lowest..active).collect();
    for &n in &disc_levels {
        report.levels[n].disc = disc_loss(state, n, &inputs[n], &fakes[n], false)?;
    }
    if !report.all_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            detail: serde_json::to_string(&report).unwrap_or_default(),
        });
    }

    if !cfg.freeze_discriminators {
        for &n in &disc_levels {
            for _ in 0..cfg.d_steps_per_g_step {
                disc_loss(state, n, &inputs[n], &fakes[n], true)?;
            }
        }
    }

    if let Some(total) = total {
        let grads = g.backward(total)?;
        for n in lowest..active {
            let store = &state.generator.params[n];
            let gs: Vec<Option<Tensor<f32>>> = gbound[n].vars().iter().map(|&v| grads.get(v).cloned()).collect();
            debug_assert_eq!(gs.len(), store.len());
            state.gen_opt[n].step(&mut state.generator.params[n], &gs);
        }
    }

    state.step += 1;
    state.running_loss = Some(match state.running_loss {
        Some(r) => 0.99 * r + 0.01 * report.total_generator,
        None => report.total_generator,
    });
    Ok(report)
}

/// One update of discriminator `level` alone, on fakes from the current
/// generator. Returns the pre-update hinge loss.
pub fn discriminator_update(state: &mut TrainState, level: usize, batch: &[PyramidSample]) -> Result<f64> {
    if level >= state.config.levels {
        return Err(Error::Argument(format!("no discriminator at level {level}")));
    }
    let inputs = (0..=level)
        .map(|n| LevelInput::<f32>::from_samples(batch, n))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::<f32>::new();
    let frozen = vec![false; state.config.levels];
    let bound = state.generator.bind(&mut g, &state.generator.params, &frozen);
    let vars = state.generator.forward_graph(&mut g, &bound, &inputs)?;
    let input = &inputs[level];
    let refined = vars[level].refined;
    let fake = if state.config.disc_on_composed {
        let known = g.constant(input.image.clone());
        g.blend(refined, known, &input.mask)?
    } else {
        refined
    };
    let fake = g.value(fake).clone();
    disc_loss(state, level, input, &fake, true)
}

/// Hinge loss of discriminator `n` on real images and detached fakes; with
/// `update` it first advances power iteration, then takes an optimizer step.
fn disc_loss(state: &mut TrainState, n: usize, input: &LevelInput<f32>, fake: &Tensor<f32>, update: bool) -> Result<f64> {
    let adv = &state.adversaries[n];
    if update {
        adv.power_iteration(&mut state.disc_params[n]);
    }
    let mut g = Graph::<f32>::new();
    let p = if update {
        state.disc_params[n].bind(&mut g)
    } else {
        state.disc_params[n].bind_frozen(&mut g)
    };
    let real = g.constant(input.image.clone());
    let fake = g.constant(fake.clone());
    let rs = adv.forward_graph(&mut g, &p, real, &input.mask)?;
    let fs = adv.forward_graph(&mut g, &p, fake, &input.mask)?;
    let loss = disc_hinge_graph(&mut g, rs, fs)?;
    let value = g.value(loss).data()[0] as f64;
    if update {
        let grads = g.backward(loss)?;
        let gs: Vec<Option<Tensor<f32>>> = p.vars().iter().map(|&v| grads.get(v).cloned()).collect();
        state.disc_opt[n].step(&mut state.disc_params[n], &gs);
    }
    Ok(value)
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub levels: Vec<LevelLoss>,
    pub total_generator: f64,
}

/// Runs until `state.step` reaches `config.steps`, appending one log line per
/// step to `log` and the wall time to `timing`.
pub fn train(
    state: &mut TrainState,
    source: &dyn ImageSource,
    mut log: Option<&mut dyn Write>,
    mut timing: Option<&mut dyn Write>,
    mut on_step: impl FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<()> {
    while state.step < state.config.steps {
        let started = std::time::Instant::now();
        let batch = make_batch(source, &state.config, &mut state.rng)?;
        let report = train_step(state, &batch)?;
        if let Some(w) = log.as_deref_mut() {
            let rec = LogRecord {
                step: state.step,
                levels: report.levels.clone(),
                total_generator: report.total_generator,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("log record")).map_err(|e| Error::io("log", e))?;
        }
        if let Some(w) = timing.as_deref_mut() {
            let secs = started.elapsed().as_secs_f64();
            writeln!(w, "{{\"step\":{},\"seconds\":{secs:.6}}}", state.step).map_err(|e| Error::io("timing", e))?;
        }
        on_step(state, &report)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub config_hash: String,
    pub step: u64,
    pub levels: usize,
    rng: RngState,
    pub running_loss: Option<f64>,
    pub config: TrainConfig,
}

const MANIFEST: &str = "manifest.json";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `G<n>`, `D<n>`, optimizer moments and `manifest.json` (last) into `dir`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = |f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Vec<u8> {
        let mut v = Vec::new();
        f(&mut v).expect("in-memory write");
        v
    };
    for n in 0..state.config.levels {
        write_atomic(&dir.join(format!("G{n}")), &blob(&|v| state.generator.params[n].write_blob(v)))?;
        write_atomic(&dir.join(format!("D{n}")), &blob(&|v| state.disc_params[n].write_blob(v)))?;
        write_atomic(&dir.join(format!("G{n}.adam")), &blob(&|v| state.gen_opt[n].write_blob(v)))?;
        write_atomic(&dir.join(format!("D{n}.adam")), &blob(&|v| state.disc_opt[n].write_blob(v)))?;
    }
    let manifest = Manifest {
        format: 1,
        config_hash: state.config.hash(),
        step: state.step,
        levels: state.config.levels,
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        running_loss: state.running_loss,
        config: state.config.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        message: e.to_string(),
    })
}

/// Restores a run. When `config` is given, its hash must match the stored
/// one unless `allow_mismatch`; the level count must always match.
pub fn load_checkpoint(dir: &Path, config: Option<&TrainConfig>, allow_mismatch: bool) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let cfg = match config {
        Some(c) => {
            if c.levels != manifest.levels {
                return Err(Error::Config(format!(
                    "checkpoint has {} levels, config asks for {}",
                    manifest.levels, c.levels
                )));
            }
            if c.hash() != manifest.config_hash && !allow_mismatch {
                return Err(Error::Checkpoint {
                    path: dir.to_path_buf(),
                    message: "configuration differs from the one the checkpoint was trained with; pass the override flag to resume anyway".into(),
                });
            }
            c.clone()
        }
        None => manifest.config.clone(),
    };
    let mut state = TrainState::new(cfg)?;
    let read = |name: String| -> Result<Vec<u8>> {
        let p = dir.join(&name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let bad = |m: String| Error::Checkpoint {
        path: dir.to_path_buf(),
        message: m,
    };
    for n in 0..state.config.levels {
        let g = ParamStore::read_blob(&mut read(format!("G{n}"))?.as_slice())?;
        state.generator.params[n].load_from(&g).map_err(|e| bad(format!("G{n}: {e}")))?;
        let d = ParamStore::read_blob(&mut read(format!("D{n}"))?.as_slice())?;
        state.disc_params[n].load_from(&d).map_err(|e| bad(format!("D{n}: {e}")))?;
        state.gen_opt[n] = Adam::read_blob(state.config.optimizer, &state.generator.params[n], &mut read(format!("G{n}.adam"))?.as_slice())?;
        state.disc_opt[n] = Adam::read_blob(state.config.optimizer, &state.disc_params[n], &mut read(format!("D{n}.adam"))?.as_slice())?;
    }
    let seed: [u8; 32] = hex::decode(&manifest.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("invalid rng seed".into()))?;
    let word_pos: u128 = manifest.rng.word_pos.parse().map_err(|_| bad("invalid rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.step = manifest.step;
    state.running_loss = manifest.running_loss;
    Ok(state)
}

/// Generator-only checkpoint loading for inference.
pub fn load_generator(dir: &Path) -> Result<(TrainConfig, PyramidGenerator)> {
    let manifest = read_manifest(dir)?;
    let cfg = manifest.config;
    let mut gen = PyramidGenerator::new(cfg.generator_config(), cfg.seed)?;
    for n in 0..cfg.levels {
        let p = dir.join(format!("G{n}"));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let store = ParamStore::read_blob(&mut bytes.as_slice())?;
        gen.params[n].load_from(&store)?;
    }
    Ok((cfg, gen))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverfitReport {
    pub hole_l1: f64,
    /// Weighted reconstruction part of the generator loss, per step.
    pub recon: Vec<f64>,
    /// Total generator loss per step.
    pub total: Vec<f64>,
}

/// Trains on one fixed image and mask for `config.steps` steps and reports
/// the hole-region L1 of the composed top-level output.
pub fn overfit_single(image: &RasterImage, mask: &HoleMask, config: &TrainConfig) -> Result<OverfitReport> {
    let mut state = TrainState::new(config.clone())?;
    let sample = sample_for(image, mask, config)?;
    let batch = vec![sample; config.batch_size];
    let weights = config.loss_weights();
    let mut report = OverfitReport {
        hole_l1: 0.0,
        recon: Vec::with_capacity(config.steps as usize),
        total: Vec::with_capacity(config.steps as usize),
    };
    for _ in 0..config.steps {
        let r = train_step(&mut state, &batch)?;
        let recon = r.levels.iter().zip(&weights.lambdas).map(|(l, w)| w * weights.alpha * l.recon).sum();
        report.recon.push(recon);
        report.total.push(r.total_generator);
    }
    let out = state.generator.inpaint(image, mask)?;
    report.hole_l1 = hole_l1(&out, image, mask)?;
    Ok(report)
}

/// Trailing moving averages; entry `i` averages `values[i..i + window]`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Full path of a checkpoint directory for step `step` under `root`.
pub fn checkpoint_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step:08}"))
}
