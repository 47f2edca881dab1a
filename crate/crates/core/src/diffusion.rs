//! Forward diffusion, the single-step denoiser update and the deterministic
//! denoising loop, parameterized by a pluggable text-conditionable noise
//! predictor.
//!
//! The loop runs in pixel space. A real latent-space model plugs in behind
//! [`NoisePredictor`]; latent encode/decode belongs inside that adapter.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{self, AdversarialPatch, PerturbationField};
use crate::tape::{Tape, Var};

/// Cumulative noise coefficients indexed by timestep, `alpha_bar[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub alpha_bar: Vec<f64>,
    pub total_steps: usize,
    pub step_size_s: usize,
}

impl DiffusionSchedule {
    pub fn new(alpha_bar: Vec<f64>, step_size_s: usize) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar[0] != 1.0 {
            return Err(Error::invalid("alpha_bar must start at 1.0"));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("alpha_bar must be non-increasing"));
        }
        if alpha_bar.iter().any(|&a| a <= 0.0 || a > 1.0) {
            return Err(Error::invalid("alpha_bar values must lie in (0, 1]"));
        }
        let total_steps = alpha_bar.len() - 1;
        if step_size_s == 0 || step_size_s > total_steps.max(1) {
            return Err(Error::invalid(format!(
                "step size {step_size_s} out of range for {total_steps} steps"
            )));
        }
        Ok(Self { alpha_bar, total_steps, step_size_s })
    }

    /// Per-step coefficient `alpha_t = alpha_bar[t] / alpha_bar[t-1]`.
    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.total_steps {
            return Err(Error::invalid(format!(
                "timestep {t} outside schedule range 1..={}",
                self.total_steps
            )));
        }
        Ok(self.alpha_bar[t] / self.alpha_bar[t - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Builds a cumulative-product schedule of length `total_steps + 1`.
pub fn make_schedule(total_steps: usize, kind: ScheduleKind, step_size_s: usize) -> Result<DiffusionSchedule> {
    if total_steps < 1 {
        return Err(Error::invalid("total_steps must be at least 1"));
    }
    let mut alpha_bar = Vec::with_capacity(total_steps + 1);
    alpha_bar.push(1.0);
    match kind {
        ScheduleKind::Linear => {
            let (beta_start, beta_end) = (1e-4, 0.02);
            let mut acc = 1.0;
            for t in 0..total_steps {
                let frac = if total_steps == 1 { 0.0 } else { t as f64 / (total_steps - 1) as f64 };
                let beta = beta_start + (beta_end - beta_start) * frac;
                acc *= 1.0 - beta;
                alpha_bar.push(acc);
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let v = ((t / total_steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos();
                v * v
            };
            let f0 = f(0.0);
            for t in 1..=total_steps {
                // guard against reaching exactly zero at t = total_steps
                alpha_bar.push((f(t as f64) / f0).max(1e-8));
            }
        }
    }
    DiffusionSchedule::new(alpha_bar, step_size_s)
}

/// Text conditioning handed to the noise predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCondition {
    pub prompt: String,
    pub guidance_scale: f64,
    pub inference_steps: usize,
}

impl TextCondition {
    pub fn new(prompt: impl Into<String>, guidance_scale: f64, inference_steps: usize) -> Result<Self> {
        let prompt = prompt.into();
        if guidance_scale <= 0.0 {
            return Err(Error::invalid("guidance_scale must be positive"));
        }
        if inference_steps == 0 {
            return Err(Error::invalid("inference_steps must be positive"));
        }
        if guidance_scale > 1.0 && prompt.trim().is_empty() {
            return Err(Error::invalid("prompt must be non-empty when guidance is enabled"));
        }
        Ok(Self { prompt, guidance_scale, inference_steps })
    }
}

impl Default for TextCondition {
    fn default() -> Self {
        Self {
            prompt: "desert, sand, camouflage".into(),
            guidance_scale: 6.5,
            inference_steps: 20,
        }
    }
}

/// Noise predictor contract.
///
/// Adapters wrapping an external pretrained model must accept a CHW float
/// image rescaled from `[0,1]` to `[-1,1]` (see [`to_adapter_input`] /
/// [`from_adapter_output`]), an integer timestep, the prompt string and the
/// guidance scale, and return a same-shape float array. Classifier-free
/// guidance (blending conditional and unconditional predictions by the
/// guidance scale) is the adapter's responsibility. Implementations must be
/// deterministic given identical inputs and safe for concurrent read-only
/// use.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &Array3<f64>, t: usize, cond: &TextCondition) -> Array3<f64>;
}

/// Noise predictor usable inside the differentiable denoising loop.
pub trait DifferentiableNoisePredictor: NoisePredictor {
    fn predict_var(&self, tape: &mut Tape, x: Var, t: usize, cond: &TextCondition) -> Var;
}

/// Rescales a `[0,1]` HWC image to the `[-1,1]` CHW adapter layout.
pub fn to_adapter_input(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, xi)| x[(y, xi, ci)] * 2.0 - 1.0)
}

/// Inverse of [`to_adapter_input`] applied to the adapter's noise output
/// (layout transpose only; predicted noise carries no intensity offset).
pub fn from_adapter_output(eps: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = eps.dim();
    Array3::from_shape_fn((h, w, c), |(y, xi, ci)| eps[(ci, y, xi)] / 2.0)
}

/// One forward diffusion step: `sqrt(a_t) x_{t-1} + sqrt(1 - a_t) eps`.
pub fn forward_diffuse(
    x_prev: &Array3<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    noise: &Array3<f64>,
) -> Result<Array3<f64>> {
    if noise.dim() != x_prev.dim() {
        return Err(Error::invalid("noise shape must match x_prev"));
    }
    let alpha_t = schedule.alpha_at(t)?;
    Ok(x_prev * alpha_t.sqrt() + noise * (1.0 - alpha_t).sqrt())
}

/// One DDPM denoising step (mean term):
/// `(x_t - (1-a_t)/sqrt(1-abar_t) * eps_theta) / sqrt(a_t)`.
pub fn ddpm_step(
    x_t: &Array3<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
    cond: &TextCondition,
) -> Result<Array3<f64>> {
    let alpha_t = schedule.alpha_at(t)?;
    let alpha_bar_t = schedule.alpha_bar[t];
    let eps = predictor.predict(x_t, t, cond);
    if eps.dim() != x_t.dim() {
        return Err(Error::ContractViolation(format!(
            "predictor returned shape {:?}, expected {:?}",
            eps.dim(),
            x_t.dim()
        )));
    }
    // abar_t = 1 means no noise has been injected yet; the correction term
    // vanishes and the naive ratio would be 0/0
    let coef = if alpha_bar_t >= 1.0 {
        0.0
    } else {
        (1.0 - alpha_t) / (1.0 - alpha_bar_t).sqrt()
    };
    Ok((x_t - &(eps * coef)) / alpha_t.sqrt())
}

/// Default injection timestep for the perturbed initial patch.
pub fn default_start_timestep(total_steps: usize) -> usize {
    total_steps / 2
}

/// Deterministic update coefficients from `abar_t` to `abar_{t-s}`:
/// `x_{t-s} = c_x * x_t + c_eps * eps`.
fn ddim_coefficients(abar_t: f64, abar_prev: f64) -> (f64, f64) {
    let c_x = abar_prev.sqrt() / abar_t.sqrt();
    let c_eps = (1.0 - abar_prev).sqrt() - abar_prev.sqrt() * (1.0 - abar_t).sqrt() / abar_t.sqrt();
    (c_x, c_eps)
}

fn reverse_timesteps(start_t: usize, step: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut t = start_t;
    while t > 0 {
        let t_prev = t.saturating_sub(step);
        pairs.push((t, t_prev));
        t = t_prev;
    }
    pairs
}

/// Runs the deterministic denoising loop from `x = clip(p_init + d)` at
/// `start_t` down to 0 and returns the final image.
pub fn generate_patch(
    p_init: &AdversarialPatch,
    d: &PerturbationField,
    cond: &TextCondition,
    schedule: &DiffusionSchedule,
    predictor: &dyn NoisePredictor,
    start_t: usize,
    tau: f64,
) -> Result<AdversarialPatch> {
    let seeded = patch::apply_perturbation(p_init, d, tau)?;
    let mut x = seeded.pixels;
    for (t, t_prev) in reverse_timesteps(start_t.min(schedule.total_steps), schedule.step_size_s) {
        let eps = predictor.predict(&x, t, cond);
        if eps.dim() != x.dim() {
            return Err(Error::ContractViolation(format!(
                "predictor returned shape {:?}, expected {:?}",
                eps.dim(),
                x.dim()
            )));
        }
        let (c_x, c_eps) = ddim_coefficients(schedule.alpha_bar[t], schedule.alpha_bar[t_prev]);
        x = &x * c_x + &eps * c_eps;
    }
    AdversarialPatch::new(x)
}

/// Tape form of [`generate_patch`]; the returned var is differentiable in `d`.
#[allow(clippy::too_many_arguments)]
pub fn generate_patch_var(
    tape: &mut Tape,
    p_init: &AdversarialPatch,
    d: Var,
    cond: &TextCondition,
    schedule: &DiffusionSchedule,
    predictor: &dyn DifferentiableNoisePredictor,
    start_t: usize,
    tau: f64,
) -> Var {
    let seeded = tape.add_const(d, &patch::to_dyn(&p_init.pixels));
    let mut x = tape.clamp(seeded, 0.0, tau);
    for (t, t_prev) in reverse_timesteps(start_t.min(schedule.total_steps), schedule.step_size_s) {
        let eps = predictor.predict_var(tape, x, t, cond);
        let (c_x, c_eps) = ddim_coefficients(schedule.alpha_bar[t], schedule.alpha_bar[t_prev]);
        let xt = tape.scale(x, c_x);
        let et = tape.scale(eps, c_eps);
        x = tape.add(xt, et);
    }
    x
}

/// Toy text-conditioned predictor: per-channel affine pull toward a palette
/// color chosen by the prompt, `eps = gain .* (x - color)`. Linear in `x`,
/// deterministic, and ignores the guidance scale by design of the contract
/// split (guidance belongs to real adapters).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPredictor {
    pub gain: [f64; 3],
    pub color: [f64; 3],
}

/// Prompt keyword palette for the toy predictor.
pub fn palette_color(prompt: &str) -> [f64; 3] {
    let p = prompt.to_lowercase();
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for (kw, rgb) in [
        ("desert", [0.76, 0.66, 0.46]),
        ("sand", [0.79, 0.70, 0.51]),
        ("grass", [0.30, 0.52, 0.26]),
        ("green", [0.25, 0.55, 0.25]),
        ("forest", [0.18, 0.38, 0.18]),
        ("snow", [0.92, 0.93, 0.95]),
    ] {
        if p.contains(kw) {
            for c in 0..3 {
                acc[c] += rgb[c];
            }
            n += 1;
        }
    }
    let mut color = if n == 0 { [0.5; 3] } else { acc.map(|v| v / n as f64) };
    if p.contains("black") {
        color = color.map(|v| v * 0.6);
    }
    color
}

impl ToyPredictor {
    pub fn from_prompt(prompt: &str, gain: f64) -> Self {
        Self { gain: [gain; 3], color: palette_color(prompt) }
    }

    fn color_field(&self, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |(_, _, c)| self.color[c])
    }

    fn gain_field(&self, shape: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(shape, |(_, _, c)| self.gain[c])
    }

    /// Weight layout used by the serialized form: row 0 gain, row 1 color.
    pub fn to_weights(&self) -> Array2<f64> {
        let mut w = Array2::zeros((2, 3));
        for c in 0..3 {
            w[(0, c)] = self.gain[c];
            w[(1, c)] = self.color[c];
        }
        w
    }

    pub fn from_weights(w: &Array2<f64>) -> Result<Self> {
        if w.dim() != (2, 3) {
            return Err(Error::invalid(format!("toy predictor weights must be 2x3, got {:?}", w.dim())));
        }
        Ok(Self {
            gain: [w[(0, 0)], w[(0, 1)], w[(0, 2)]],
            color: [w[(1, 0)], w[(1, 1)], w[(1, 2)]],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(path, &self.to_weights())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weights(&load_weights(path)?)
    }
}

impl NoisePredictor for ToyPredictor {
    fn predict(&self, x: &Array3<f64>, _t: usize, _cond: &TextCondition) -> Array3<f64> {
        (x - &self.color_field(x.dim())) * &self.gain_field(x.dim())
    }
}

impl DifferentiableNoisePredictor for ToyPredictor {
    fn predict_var(&self, tape: &mut Tape, x: Var, _t: usize, _cond: &TextCondition) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let dims = (shape[0], shape[1], shape[2]);
        let neg_color = self.color_field(dims).mapv(|v| -v).into_dyn();
        let centered = tape.add_const(x, &neg_color);
        tape.mul_const(centered, Arc::new(self.gain_field(dims).into_dyn()))
    }
}

/// Predicts zero noise everywhere; the loop then only rescales its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x: &Array3<f64>, _t: usize, _cond: &TextCondition) -> Array3<f64> {
        Array3::zeros(x.dim())
    }
}

impl DifferentiableNoisePredictor for ZeroPredictor {
    fn predict_var(&self, tape: &mut Tape, x: Var, _t: usize, _cond: &TextCondition) -> Var {
        let shape = tape.value(x).raw_dim();
        tape.leaf(ndarray::ArrayD::zeros(shape))
    }
}

/// Test oracle: replays a recorded effective-noise array per timestep.
#[derive(Debug, Clone, Default)]
pub struct ReplayPredictor {
    pub noise_by_t: HashMap<usize, Array3<f64>>,
}

impl ReplayPredictor {
    pub fn record(&mut self, t: usize, noise: Array3<f64>) {
        self.noise_by_t.insert(t, noise);
    }
}

impl NoisePredictor for ReplayPredictor {
    fn predict(&self, x: &Array3<f64>, t: usize, _cond: &TextCondition) -> Array3<f64> {
        self.noise_by_t
            .get(&t)
            .cloned()
            .unwrap_or_else(|| Array3::zeros(x.dim()))
    }
}

/// Wraps any plain predictor for use on a tape. The prediction enters as a
/// constant, so no gradient flows through it; fine for inference paths.
/// Ideal predictor that knows the clean image: returns the effective noise
/// `(x - sqrt(abar_t) x0) / sqrt(1 - abar_t)` of its input. Running the
/// deterministic reverse loop with this predictor recovers `x0` exactly,
/// which is the round-trip oracle for the denoising loop.
pub struct EffectiveNoiseOracle {
    pub x0: Array3<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoisePredictor for EffectiveNoiseOracle {
    fn predict(&self, x: &Array3<f64>, t: usize, _cond: &TextCondition) -> Array3<f64> {
        let abar = self.alpha_bar[t];
        if abar >= 1.0 {
            return Array3::zeros(x.dim());
        }
        (x - &(&self.x0 * abar.sqrt())) / (1.0 - abar).sqrt()
    }
}

pub struct FrozenPredictor<'a>(pub &'a dyn NoisePredictor);

impl NoisePredictor for FrozenPredictor<'_> {
    fn predict(&self, x: &Array3<f64>, t: usize, cond: &TextCondition) -> Array3<f64> {
        self.0.predict(x, t, cond)
    }
}

impl DifferentiableNoisePredictor for FrozenPredictor<'_> {
    fn predict_var(&self, tape: &mut Tape, x: Var, t: usize, cond: &TextCondition) -> Var {
        let xv = patch::from_dyn(tape.value(x));
        let eps = self.0.predict(&xv, t, cond);
        tape.leaf(eps.into_dyn())
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    shape: Vec<usize>,
    dtype: String,
    version: u32,
}

const WEIGHTS_VERSION: u32 = 1;

/// Flat binary weight file: one JSON header line, then little-endian f64 data.
pub fn save_weights(path: &Path, w: &Array2<f64>) -> Result<()> {
    let header = WeightsHeader {
        shape: w.shape().to_vec(),
        dtype: "f64".into(),
        version: WEIGHTS_VERSION,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for v in w.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::invalid("weight file missing header line"))?;
    let header: WeightsHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.version != WEIGHTS_VERSION {
        return Err(Error::CheckpointVersion { found: header.version, expected: WEIGHTS_VERSION });
    }
    if header.dtype != "f64" || header.shape.len() != 2 {
        return Err(Error::invalid("unsupported weight dtype or rank"));
    }
    let n: usize = header.shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != n * 8 {
        return Err(Error::invalid("weight payload length mismatch"));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((header.shape[0], header.shape[1]), vals)
        .map_err(|e| Error::invalid(e.to_string()))
}
