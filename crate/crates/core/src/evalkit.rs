//! Image-quality metrics, hole-ratio and resolution sweeps, the ablation
//! harness and the gradient-check suite.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageSource;
use crate::error::{Error, Result};
use crate::generator::{DilationPlan, FusionMode, PyramidGenerator};
use crate::imaging::{gen_center_mask, gen_freeform_mask, BrushConfig, HoleMask, RasterImage};
use crate::nnblocks::{
    contextual_attention, grad_check, Activation, AttentionSpec, ConvSpec, GatedConv, SpectralConv,
};
use crate::objective::{disc_hinge_graph, gen_hinge_graph, recon_loss_graph};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainState};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Hole ratios of the default sweep.
pub const DEFAULT_RATIOS: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.55];

fn check_same(a: &RasterImage, b: &RasterImage, what: &str) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::Shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

/// Mean absolute error on the `[0, 1]` scale.
pub fn l1_metric(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same(a, b, "l1_metric")?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (unit(x) - unit(y)).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB on the `[0, 1]` scale, capped at
/// [`PSNR_CAP`].
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same(a, b, "psnr")?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (unit(x) - unit(y)).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over every fully contained window.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(j, &kj)| kj * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, &kj)| kj * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5)
/// over valid windows on the `[0, 1]` scale, averaged over channels.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let k = gaussian_1d();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| unit(v)).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| unit(v)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / n as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Mean absolute error over hole pixels on the `[0, 1]` scale; 0 when the
/// mask has no holes.
pub fn hole_l1(output: &RasterImage, truth: &RasterImage, mask: &HoleMask) -> Result<f64> {
    check_same(output, truth, "hole_l1")?;
    if (mask.height(), mask.width()) != (truth.height(), truth.width()) {
        return Err(Error::Shape("hole_l1: mask size differs".into()));
    }
    let plane = truth.height() * truth.width();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (&a, &b)) in output.data().iter().zip(truth.data()).enumerate() {
        if mask.data()[i % plane] == 1 {
            sum += (unit(a) - unit(b)).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Center,
    Freeform,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Center => "center",
            MaskMode::Freeform => "freeform",
        }
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(MaskMode::Center),
            "freeform" => Ok(MaskMode::Freeform),
            _ => Err(Error::Argument(format!("unknown mask mode {s:?}; expected center or freeform"))),
        }
    }
}

/// Dataset-averaged metrics of composed outputs for one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    pub mask_mode: MaskMode,
    /// Requested centre-mask ratio; empty for free-form masks.
    pub hole_ratio: Option<f64>,
    pub resolution: usize,
    pub images: usize,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// L1 restricted to hole pixels.
    pub hole_l1: f64,
}

/// How evaluation masks are drawn for image `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMasks {
    pub mode: MaskMode,
    pub ratio: f64,
    /// Free-form masks use seed `seed + i`.
    pub seed: u64,
}

impl EvalMasks {
    pub fn center(ratio: f64) -> Self {
        EvalMasks {
            mode: MaskMode::Center,
            ratio,
            seed: 0,
        }
    }

    pub fn freeform(seed: u64) -> Self {
        EvalMasks {
            mode: MaskMode::Freeform,
            ratio: 0.0,
            seed,
        }
    }

    pub fn mask(&self, size: usize, index: usize) -> Result<HoleMask> {
        match self.mode {
            MaskMode::Center => gen_center_mask(size, self.ratio),
            MaskMode::Freeform => gen_freeform_mask(size, &BrushConfig::for_size(size), self.seed + index as u64),
        }
    }
}

/// Inpaints every image of `source` and averages the metrics.
pub fn evaluate(generator: &PyramidGenerator, source: &dyn ImageSource, masks: &EvalMasks, variant: &str) -> Result<MetricRow> {
    let size = source.size();
    let div = generator.input_divisor();
    if source.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    if size % div != 0 {
        return Err(Error::Config(format!("evaluation size {size} is not divisible by the model's {div}")));
    }
    let mut sums = [0.0; 4];
    for i in 0..source.len() {
        let truth = source.get(i)?;
        let mask = masks.mask(size, i)?;
        let out = generator.inpaint(&truth, &mask)?;
        sums[0] += l1_metric(&out, &truth)?;
        sums[1] += psnr(&out, &truth)?;
        sums[2] += ssim(&out, &truth)?;
        sums[3] += hole_l1(&out, &truth, &mask)?;
    }
    let n = source.len() as f64;
    Ok(MetricRow {
        variant: variant.to_owned(),
        mask_mode: masks.mode,
        hole_ratio: (masks.mode == MaskMode::Center).then_some(masks.ratio),
        resolution: size,
        images: source.len(),
        l1: sums[0] / n,
        psnr: sums[1] / n,
        ssim: sums[2] / n,
        hole_l1: sums[3] / n,
    })
}

/// One centre-mask row per ratio.
pub fn hole_sweep(generator: &PyramidGenerator, source: &dyn ImageSource, ratios: &[f64], variant: &str) -> Result<Vec<MetricRow>> {
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::Argument(format!("hole ratio {r} outside (0, 1)")));
    }
    ratios
        .iter()
        .map(|&r| evaluate(generator, source, &EvalMasks::center(r), variant))
        .collect()
}

/// Ratio of the resolution sweep's centre mask.
pub const RESOLUTION_SWEEP_RATIO: f64 = 0.25;

/// One row per image size, with a fixed 25% centre mask.
pub fn resolution_sweep(generator: &PyramidGenerator, source: &dyn ImageSource, sizes: &[usize], variant: &str) -> Result<Vec<MetricRow>> {
    let div = generator.input_divisor();
    if let Some(s) = sizes.iter().find(|&&s| s == 0 || s % div != 0) {
        return Err(Error::Config(format!("size {s} is not divisible by the model's {div}")));
    }
    sizes
        .iter()
        .map(|&s| evaluate(generator, source.with_size(s).as_ref(), &EvalMasks::center(RESOLUTION_SWEEP_RATIO), variant))
        .collect()
}

/// Parses `a:b:step` into an inclusive list, e.g. `0.15:0.55:0.1`.
pub fn parse_ratio_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Argument(format!("ratio range {spec:?} must look like 0.15:0.55:0.1"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
    let (a, b, step) = (v[0], v[1], v[2]);
    if !(step > 0.0) || b < a {
        return Err(bad());
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    // Rounded to 1e-6 so that 0.1 steps print cleanly.
    Ok((0..=n).map(|i| ((a + i as f64 * step) * 1e6).round() / 1e6).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Full pyramid.
    Layers3,
    /// The two coarse levels only, output upsampled to full size.
    Layers2Low,
    /// The two fine levels only.
    Layers2High,
    /// The same dilation plan at every level.
    StdDilation,
    Fusion(FusionMode),
}

impl AblationVariant {
    pub fn all() -> Vec<AblationVariant> {
        let mut v = vec![
            AblationVariant::Layers3,
            AblationVariant::Layers2Low,
            AblationVariant::Layers2High,
            AblationVariant::StdDilation,
        ];
        v.extend(FusionMode::ALL.iter().map(|&m| AblationVariant::Fusion(m)));
        v
    }

    pub fn name(self) -> String {
        match self {
            AblationVariant::Layers3 => "layers_3".into(),
            AblationVariant::Layers2Low => "layers_2_low".into(),
            AblationVariant::Layers2High => "layers_2_high".into(),
            AblationVariant::StdDilation => "std_dilation".into(),
            AblationVariant::Fusion(m) => format!("fusion_{}", m.name()),
        }
    }

    /// Published full-scale numbers for the matching configuration
    /// (SSIM, PSNR, L1), when one exists.
    pub fn reference(self) -> Option<(f64, f64, f64)> {
        match self {
            AblationVariant::Layers3 => Some((0.840, 26.74, 0.034)),
            AblationVariant::Layers2Low => Some((0.809, 24.07, 0.042)),
            AblationVariant::Layers2High => Some((0.827, 26.03, 0.035)),
            AblationVariant::StdDilation => Some((0.829, 26.38, 0.035)),
            AblationVariant::Fusion(m) => match m {
                FusionMode::FeatureCoarse => Some((0.786, 23.16, 0.044)),
                FusionMode::FeatureRefine => None,
                FusionMode::ImageRefineAttOnly => Some((0.825, 25.94, 0.036)),
                FusionMode::ImageRefineNonattOnly => Some((0.833, 25.96, 0.036)),
                FusionMode::ImageRefineBoth => Some((0.840, 26.74, 0.034)),
            },
        }
    }

    /// `base` with this variant's changes; `base` is taken to be the
    /// three-level model.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let two = |c: &TrainConfig| TrainConfig {
            levels: 2,
            dilation: None,
            weights: None,
            ..c.clone()
        };
        match self {
            AblationVariant::Layers3 => base.clone(),
            AblationVariant::Layers2Low => TrainConfig {
                top_skip: base.top_skip + 1,
                ..two(base)
            },
            AblationVariant::Layers2High => two(base),
            AblationVariant::StdDilation => TrainConfig {
                dilation: Some(DilationPlan::standard(base.levels)),
                ..base.clone()
            },
            AblationVariant::Fusion(m) => TrainConfig {
                fusion: m,
                ..base.clone()
            },
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<String> = AblationVariant::all().iter().map(|v| v.name()).collect();
                Error::Argument(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Seed offset of the free-form masks used by ablation rows.
pub const ABLATION_MASK_SEED: u64 = 0xE7A1;

/// The two rows every ablation variant reports: centre masks at
/// `center_ratio` and free-form masks seeded from `seed`.
pub fn ablation_rows(
    generator: &PyramidGenerator,
    eval_set: &dyn ImageSource,
    center_ratio: f64,
    seed: u64,
    name: &str,
) -> Result<Vec<MetricRow>> {
    Ok(vec![
        evaluate(generator, eval_set, &EvalMasks::center(center_ratio), name)?,
        evaluate(generator, eval_set, &EvalMasks::freeform(seed ^ ABLATION_MASK_SEED), name)?,
    ])
}

/// Trains one variant from `base` on `train_set` and evaluates it on
/// `eval_set` (see [`ablation_rows`]).
pub fn run_ablation(
    variant: AblationVariant,
    base: &TrainConfig,
    train_set: &dyn ImageSource,
    eval_set: &dyn ImageSource,
    center_ratio: f64,
) -> Result<Vec<MetricRow>> {
    let mut state = TrainState::new(variant.apply(base))?;
    train(&mut state, train_set, None, None, |_, _| Ok(()))?;
    ablation_rows(&state.generator, eval_set, center_ratio, base.seed, &variant.name())
}

pub fn write_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["variant", "mask_mode", "hole_ratio", "resolution", "images", "l1", "psnr", "ssim", "hole_l1"])
        .map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.mask_mode.name().to_owned(),
            r.hole_ratio.map(|v| v.to_string()).unwrap_or_default(),
            r.resolution.to_string(),
            r.images.to_string(),
            format!("{:.6}", r.l1),
            format!("{:.4}", r.psnr),
            format!("{:.6}", r.ssim),
            format!("{:.6}", r.hole_l1),
        ])
        .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json(rows: &[MetricRow], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rows).expect("rows serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Grid with one row per sample: original | masked | output. Masked pixels
/// are drawn white.
pub fn contact_sheet(samples: &[(RasterImage, HoleMask, RasterImage)]) -> Result<RasterImage> {
    let first = samples.first().ok_or_else(|| Error::Argument("contact sheet needs a sample".into()))?;
    let (h, w, c) = (first.0.height(), first.0.width(), first.0.channels());
    let mut data = vec![0.0f32; c * samples.len() * h * 3 * w];
    let (sheet_h, sheet_w) = (samples.len() * h, 3 * w);
    for (row, (truth, mask, out)) in samples.iter().enumerate() {
        check_same(truth, out, "contact_sheet")?;
        if (truth.height(), truth.width(), truth.channels()) != (h, w, c) {
            return Err(Error::Shape("contact sheet samples differ in size".into()));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = truth.get(ch, y, x);
                    let masked = if mask.get(y, x) == 1 { 1.0 } else { v };
                    let base = ch * sheet_h * sheet_w + (row * h + y) * sheet_w;
                    data[base + x] = v;
                    data[base + w + x] = masked;
                    data[base + 2 * w + x] = out.get(ch, y, x);
                }
            }
        }
    }
    RasterImage::new(sheet_h, sheet_w, c, data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub block: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Finite-difference checks of every differentiable block on small
/// double-precision probes.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let mut rows = Vec::new();
    let mut push = |block: &str, tol: f64, err: f64| {
        rows.push(GradCheckRow {
            block: block.to_owned(),
            max_rel_error: err,
            tolerance: tol,
            passed: err < tol,
        })
    };

    let mut store = ParamStore::<f64>::new();
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let gated = GatedConv::new(&mut store, &mut init, "gated", ConvSpec::new(2, 3, 3).dilation(2))?;
    let mut inputs = vec![random(&[1, 2, 6, 6])];
    inputs.extend(store.iter().map(|(_, t, _)| t.clone()));
    let rep = grad_check(&inputs, 64, seed, |g, v| gated.forward(g, &Bound::from_vars(v[1..].to_vec()), v[0]))?;
    push("gated_conv", 1e-4, rep.max_rel_error);

    let mask = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| if i % 8 < 4 { 0.0 } else { 1.0 });
    for rate in [1, 2] {
        let spec = AttentionSpec {
            match_rate: rate,
            softmax_scale: 3.0,
            ..AttentionSpec::default()
        };
        let inputs = vec![random(&[1, 2, 8, 8]), random(&[1, 2, 8, 8])];
        let rep = grad_check(&inputs, 64, seed + rate as u64, |g, v| {
            Ok(contextual_attention(g, v[0], v[1], &mask, &spec)?.output)
        })?;
        push(&format!("contextual_attention_rate{rate}"), 1e-3, rep.max_rel_error);
    }

    let mut store = ParamStore::<f64>::new();
    let spectral = SpectralConv::new(
        &mut store,
        &mut init,
        "spectral",
        ConvSpec::new(2, 3, 5).stride(2).activation(Activation::Leaky),
    )?;
    spectral.power_iteration(&mut store, 5);
    let buffers: Vec<Tensor<f64>> = store.iter().filter(|e| !e.2).map(|(_, t, _)| t.clone()).collect();
    let mut inputs = vec![random(&[1, 2, 8, 8])];
    inputs.extend(store.iter().filter(|e| e.2).map(|(_, t, _)| t.clone()));
    let rep = grad_check(&inputs, 64, seed + 3, |g, v| {
        let mut vars = v[1..].to_vec();
        vars.extend(buffers.iter().map(|b| g.constant(b.clone())));
        spectral.forward(g, &Bound::from_vars(vars), v[0])
    })?;
    push("spectral_conv", 1e-4, rep.max_rel_error);

    // Scores are kept away from the hinge kinks at +-1 and recon pairs away
    // from equality.
    let mut away = |n: usize| {
        let t = random(&[n]);
        t.map(|v| if v >= 0.0 { 1.1 + v } else { v * 0.9 })
    };
    let truth = away(16);
    let generated = truth.map(|v| v + 0.3);
    let rep = grad_check(&[generated], 16, seed + 4, |g, v| recon_loss_graph(g, v[0], &truth))?;
    push("recon_loss", 1e-6, rep.max_rel_error);
    let scores = vec![away(8), away(8)];
    let rep = grad_check(&scores[..1], 8, seed + 5, |g, v| Ok(gen_hinge_graph(g, v[0])))?;
    push("gen_hinge", 1e-6, rep.max_rel_error);
    let rep = grad_check(&scores, 16, seed + 6, |g, v| disc_hinge_graph(g, v[0], v[1]))?;
    push("disc_hinge", 1e-6, rep.max_rel_error);
    Ok(rows)
}
