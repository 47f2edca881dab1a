//! Gradient-based patch optimization: Adam on the perturbation field with an
//! L-inf projection after every step, losses computed through the
//! denoise-render-detect pipeline on one tape per iteration.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::DifferentiableDetector;
use crate::diffusion::{
    default_start_timestep, DiffusionSchedule, DifferentiableNoisePredictor, TextCondition,
};
use crate::error::{Error, Result};
use crate::losses::{det_loss_var, tv_loss_var};
use crate::patch::{self, AdversarialPatch, PerturbationField, SceneImage};
use crate::scene::{attack_render_var, SceneParamRanges};
use crate::tape::Tape;

/// Training hyperparameters. Defaults follow the reference configuration:
/// Adam at 0.005, batch size 8, 400 iterations, perturbation budget 0.6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub linf_bound: f64,
    pub lambda_tv: f64,
    /// Upper clip bound applied when the perturbed patch enters the
    /// denoising loop.
    pub tau: f64,
    /// Injection timestep; `None` selects half the schedule length.
    pub start_timestep: Option<usize>,
    /// Keep the lowest-loss perturbation instead of the final one.
    pub snapshot_best: bool,
    pub ranges: SceneParamRanges,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            batch_size: 8,
            iterations: 400,
            linf_bound: 0.6,
            lambda_tv: 0.1,
            tau: 1.0,
            start_timestep: None,
            snapshot_best: true,
            ranges: SceneParamRanges::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.linf_bound <= 0.0 {
            return Err(Error::Config("linf_bound must be positive".into()));
        }
        if self.lambda_tv < 0.0 {
            return Err(Error::Config("lambda_tv must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Hand-rolled Adam; the state is part of the checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Array3<f64>,
    pub v: Array3<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, shape: (usize, usize, usize)) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Array3::zeros(shape),
            v: Array3::zeros(shape),
            t: 0,
        }
    }

    /// One descent step in place.
    pub fn step(&mut self, params: &mut Array3<f64>, grad: &Array3<f64>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        azip_step(self, params, grad, b1t, b2t);
    }
}

fn azip_step(opt: &mut Adam, params: &mut Array3<f64>, grad: &Array3<f64>, b1t: f64, b2t: f64) {
    ndarray::Zip::from(params)
        .and(&mut opt.m)
        .and(&mut opt.v)
        .and(grad)
        .for_each(|p, m, v, &g| {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        });
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: u64,
    pub tv: f64,
    pub det: f64,
    pub total: f64,
    pub linf_d: f64,
    pub wallclock_ms: f64,
}

#[derive(Debug)]
pub struct AttackResult {
    /// Final generated patch (from the best or last perturbation).
    pub patch: AdversarialPatch,
    pub d: PerturbationField,
    pub history: Vec<IterLog>,
    pub best_loss: f64,
    /// In-loop invariant check failures; always 0 for a correct build.
    pub invariant_violations: usize,
}

/// Everything needed to resume training mid-run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub d: PerturbationField,
    pub adam: Adam,
    pub iteration: u64,
}

impl TrainState {
    pub fn fresh(size: usize, cfg: &AttackConfig) -> Self {
        Self {
            d: PerturbationField::zeros(size, cfg.linf_bound),
            adam: Adam::new(cfg.learning_rate, (size, size, 3)),
            iteration: 0,
        }
    }
}

/// Initial patch from a square crop of a background scene.
pub fn init_patch_from_background(
    scene: &SceneImage,
    size: usize,
    rng: &mut impl Rng,
) -> Result<AdversarialPatch> {
    let (h, w, _) = scene.pixels.dim();
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(format!(
            "crop size {size} does not fit scene {h}x{w}"
        )));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    let crop = scene
        .pixels
        .slice(ndarray::s![y0..y0 + size, x0..x0 + size, ..])
        .to_owned();
    AdversarialPatch::new(crop)
}

/// Initial patch sampled by denoising Gaussian noise from the top of the
/// schedule with a zero perturbation field.
pub fn init_patch_from_predictor(
    size: usize,
    cond: &TextCondition,
    schedule: &DiffusionSchedule,
    predictor: &dyn crate::diffusion::NoisePredictor,
    rng: &mut impl Rng,
) -> Result<AdversarialPatch> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.5f64, 0.25).map_err(|e| Error::invalid(e.to_string()))?;
    let noise = Array3::from_shape_fn((size, size, 3), |_| {
        normal.sample(rng).clamp(0.0, 1.0)
    });
    let seed_patch = AdversarialPatch::new(noise)?;
    let d = PerturbationField::zeros(size, 0.0);
    let generated = crate::diffusion::generate_patch(
        &seed_patch,
        &d,
        cond,
        schedule,
        predictor,
        schedule.total_steps,
        1.0,
    )?;
    AdversarialPatch::new(patch::clamp01(&generated.pixels))
}

struct IterOutcome {
    tv: f64,
    det: f64,
    total: f64,
    grad: Array3<f64>,
    patch: Array3<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_iteration(
    p_init: &AdversarialPatch,
    state: &TrainState,
    cfg: &AttackConfig,
    cond: &TextCondition,
    schedule: &DiffusionSchedule,
    predictor: &dyn DifferentiableNoisePredictor,
    detector: &dyn DifferentiableDetector,
    batch: &[&SceneImage],
    start_t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<IterOutcome> {
    let mut tape = Tape::new();
    let d_var = tape.leaf(state.d.values.clone().into_dyn());
    let raw = crate::diffusion::generate_patch_var(
        &mut tape, p_init, d_var, cond, schedule, predictor, start_t, cfg.tau,
    );
    let patch_var = tape.clamp(raw, 0.0, 1.0);
    let tv = tv_loss_var(&mut tape, patch_var, p_init.size_s)?;

    let mut maps = Vec::with_capacity(batch.len());
    for scene in batch {
        let params = cfg.ranges.sample(rng);
        let rendered =
            attack_render_var(&mut tape, scene, patch_var, p_init.size_s, &params, rng);
        maps.push(detector.score_maps(&mut tape, rendered)?);
    }
    let det = det_loss_var(&mut tape, &maps);
    let tv_scaled = tape.scale(tv, cfg.lambda_tv);
    let total = tape.add(det, tv_scaled);

    let tv_val = tape.value(tv)[[]];
    let det_val = tape.value(det)[[]];
    let total_val = tape.value(total)[[]];
    let grads = tape.backward(total);
    let grad = patch::from_dyn(&grads.wrt(&tape, d_var));
    let patch_px = patch::from_dyn(tape.value(patch_var));
    Ok(IterOutcome { tv: tv_val, det: det_val, total: total_val, grad, patch: patch_px })
}

/// Full optimization run. `log` receives one JSON object per iteration.
/// `snapshot_dir`, when set, is where a diagnostic state file lands if the
/// loss goes non-finite. Resumed runs must pass the rng restored from the
/// checkpoint via `resume_rng`; fresh runs pass `None`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &AttackConfig,
    p_init: &AdversarialPatch,
    cond: &TextCondition,
    schedule: &DiffusionSchedule,
    predictor: &dyn DifferentiableNoisePredictor,
    detector: &dyn DifferentiableDetector,
    scenes: &[SceneImage],
    mut state: TrainState,
    resume_rng: Option<ChaCha8Rng>,
    mut log: Option<&mut dyn IoWrite>,
    snapshot_dir: Option<&Path>,
) -> Result<AttackResult> {
    cfg.validate()?;
    if !detector.supports_gradients() {
        return Err(Error::Capability(
            "detector handle does not expose gradients; training requires a differentiable detector".into(),
        ));
    }
    if scenes.is_empty() {
        return Err(Error::invalid("training scene set is empty"));
    }
    let start_t = cfg
        .start_timestep
        .unwrap_or_else(|| default_start_timestep(schedule.total_steps))
        .min(schedule.total_steps);
    let started = Instant::now();
    if state.iteration > 0 && resume_rng.is_none() {
        return Err(Error::invalid(
            "resuming mid-run requires the rng state from the checkpoint",
        ));
    }
    let mut rng = resume_rng.unwrap_or_else(|| ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut history = Vec::new();
    let mut best: Option<(f64, PerturbationField)> = None;
    let mut violations = 0usize;

    for iter in state.iteration..cfg.iterations as u64 {
        let batch: Vec<&SceneImage> = (0..cfg.batch_size)
            .map(|_| &scenes[rng.gen_range(0..scenes.len())])
            .collect();
        let out = run_iteration(
            p_init, &state, cfg, cond, schedule, predictor, detector, &batch, start_t, &mut rng,
        )?;

        if !out.total.is_finite() {
            let snapshot = write_failure_snapshot(snapshot_dir, &state, iter)?;
            return Err(Error::NonFiniteLoss { iteration: iter, snapshot });
        }

        state.adam.step(&mut state.d.values, &out.grad);
        state.d = patch::project_linf(&state.d);
        state.iteration = iter + 1;

        if state.d.linf_norm() > cfg.linf_bound + 1e-12 {
            violations += 1;
        }
        if out.patch.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            violations += 1;
        }

        let entry = IterLog {
            iter,
            tv: out.tv,
            det: out.det,
            total: out.total,
            linf_d: state.d.linf_norm(),
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            writeln!(w)?;
        }
        if best.as_ref().is_none_or(|(b, _)| out.total < *b) {
            best = Some((out.total, state.d.clone()));
        }
        history.push(entry);
    }

    let (best_loss, best_d) = best.ok_or_else(|| Error::invalid("no iterations were run"))?;
    let final_d = if cfg.snapshot_best { best_d } else { state.d.clone() };
    let generated = crate::diffusion::generate_patch(
        p_init, &final_d, cond, schedule, predictor, start_t, cfg.tau,
    )?;
    let patch = AdversarialPatch::new(patch::clamp01(&generated.pixels))?;
    Ok(AttackResult {
        patch,
        d: final_d,
        history,
        best_loss,
        invariant_violations: violations,
    })
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config_hash: String,
    iteration: u64,
    adam_t: u64,
    size: usize,
    linf_bound: f64,
    rng_state: Vec<u8>,
}

/// Binary checkpoint: JSON header line, then three little-endian f64 blocks
/// (perturbation, Adam first moment, Adam second moment).
pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    rng: &ChaCha8Rng,
    config_hash: &str,
) -> Result<()> {
    let size = state.d.values.dim().0;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        iteration: state.iteration,
        adam_t: state.adam.t,
        size,
        linf_bound: state.d.linf_bound,
        rng_state: serde_json::to_vec(rng)?,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for arr in [&state.d.values, &state.adam.m, &state.adam.v] {
        for v in arr.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint, refusing version or config-hash mismatches.
pub fn load_checkpoint(
    path: &Path,
    expected_config_hash: &str,
    cfg: &AttackConfig,
) -> Result<(TrainState, ChaCha8Rng)> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::invalid("checkpoint missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.config_hash != expected_config_hash {
        return Err(Error::ConfigHashMismatch);
    }
    let n = header.size * header.size * 3;
    let payload = &bytes[nl + 1..];
    if payload.len() != 3 * n * 8 {
        return Err(Error::invalid("checkpoint payload length mismatch"));
    }
    let mut blocks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |_: usize| -> Result<Array3<f64>> {
        let vals: Vec<f64> = blocks.by_ref().take(n).collect();
        Array3::from_shape_vec((header.size, header.size, 3), vals)
            .map_err(|e| Error::invalid(e.to_string()))
    };
    let d_values = take(n)?;
    let m = take(n)?;
    let v = take(n)?;
    let mut adam = Adam::new(cfg.learning_rate, (header.size, header.size, 3));
    adam.m = m;
    adam.v = v;
    adam.t = header.adam_t;
    let rng: ChaCha8Rng = serde_json::from_slice(&header.rng_state)?;
    Ok((
        TrainState {
            d: PerturbationField { values: d_values, linf_bound: header.linf_bound },
            adam,
            iteration: header.iteration,
        },
        rng,
    ))
}

fn write_failure_snapshot(dir: Option<&Path>, state: &TrainState, iter: u64) -> Result<String> {
    let Some(dir) = dir else {
        return Ok("<not written: no snapshot dir>".into());
    };
    let path: PathBuf = dir.join(format!("failure_iter{iter}.ckpt"));
    // rng state is irrelevant for diagnostics; store a fresh one
    save_checkpoint(&path, state, &ChaCha8Rng::seed_from_u64(0), "failure")?;
    Ok(path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{synth_scene, ToyDetector};
    use crate::diffusion::{make_schedule, ScheduleKind, ToyPredictor};
    use approx::assert_abs_diff_eq;

    fn tiny_setup() -> (AdversarialPatch, TextCondition, DiffusionSchedule, ToyPredictor, ToyDetector, Vec<SceneImage>) {
        let p_init = AdversarialPatch::constant(16, [0.5, 0.45, 0.3]);
        let cond = TextCondition::default();
        let schedule = make_schedule(20, ScheduleKind::Linear, 1).unwrap();
        let predictor = ToyPredictor::from_prompt(&cond.prompt, 0.3);
        let detector = ToyDetector::fitted(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scenes: Vec<SceneImage> =
            (0..2).map(|i| synth_scene(&format!("s{i}"), (64, 64), 2, &mut rng)).collect();
        (p_init, cond, schedule, predictor, detector, scenes)
    }

    fn quick_cfg(iters: usize) -> AttackConfig {
        AttackConfig {
            iterations: iters,
            batch_size: 2,
            ranges: SceneParamRanges {
                rotation_deg: [0.0, 0.0],
                area_ratio: 0.3,
                ..SceneParamRanges::default()
            },
            ..AttackConfig::default()
        }
    }

    #[test]
    fn adam_matches_hand_computed_first_step() {
        // g = 1 everywhere: m_hat = 1, v_hat = 1, step = lr / (1 + eps)
        let mut adam = Adam::new(0.1, (1, 1, 3));
        let mut p = Array3::zeros((1, 1, 3));
        let g = Array3::ones((1, 1, 3));
        adam.step(&mut p, &g);
        for &v in p.iter() {
            assert_abs_diff_eq!(v, -0.1 / (1.0 + 1e-8), epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_is_scale_invariant_in_gradient() {
        // Adam's update magnitude is invariant to gradient scale
        let mut a1 = Adam::new(0.01, (1, 1, 3));
        let mut a2 = Adam::new(0.01, (1, 1, 3));
        let mut p1 = Array3::zeros((1, 1, 3));
        let mut p2 = Array3::zeros((1, 1, 3));
        a1.step(&mut p1, &Array3::from_elem((1, 1, 3), 2.0));
        a2.step(&mut p2, &Array3::from_elem((1, 1, 3), 200.0));
        for (x, y) in p1.iter().zip(p2.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_non_differentiable_detector() {
        struct Opaque;
        impl crate::detector::Detector for Opaque {
            fn detect(&self, _: &Array3<f64>, id: &str) -> Result<crate::detector::DetectionSet> {
                Ok(crate::detector::DetectionSet { image_id: id.into(), detections: vec![] })
            }
        }
        impl DifferentiableDetector for Opaque {
            fn score_maps(&self, _: &mut Tape, _: crate::tape::Var) -> Result<crate::detector::ScoreMaps> {
                unreachable!()
            }
        }
        let (p, cond, sch, pred, _, scenes) = tiny_setup();
        let err = train(
            &quick_cfg(1), &p, &cond, &sch, &pred, &Opaque, &scenes,
            TrainState::fresh(16, &quick_cfg(1)), None, None, None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn short_run_descends_and_respects_bound() {
        let (p, cond, sch, pred, det, scenes) = tiny_setup();
        let cfg = quick_cfg(12);
        let state = TrainState::fresh(16, &cfg);
        let mut log = Vec::new();
        let res = train(
            &cfg, &p, &cond, &sch, &pred, &det, &scenes, state,
            None, Some(&mut log), None,
        )
        .unwrap();
        assert_eq!(res.history.len(), 12);
        assert_eq!(res.invariant_violations, 0);
        assert!(res.d.linf_norm() <= cfg.linf_bound + 1e-12);
        assert!(res.patch.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(res.best_loss <= res.history[0].total);
        // JSONL log parses back
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 12);
        let first: IterLog = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.iter, 0);
        assert!(first.total.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let (p, cond, sch, pred, det, scenes) = tiny_setup();
        let cfg = quick_cfg(5);
        let run = || {
            train(
                &cfg, &p, &cond, &sch, &pred, &det, &scenes,
                TrainState::fresh(16, &cfg), None, None, None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.patch.pixels, b.patch.pixels);
        assert_eq!(a.d.values, b.d.values);
        let ta: Vec<f64> = a.history.iter().map(|h| h.total).collect();
        let tb: Vec<f64> = b.history.iter().map(|h| h.total).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn checkpoint_roundtrip_and_guards() {
        let cfg = quick_cfg(3);
        let mut state = TrainState::fresh(8, &cfg);
        state.iteration = 7;
        state.adam.t = 7;
        state.d.values[[0, 0, 0]] = 0.25;
        state.adam.m[[1, 2, 1]] = -0.5;
        let rng = ChaCha8Rng::seed_from_u64(99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &state, &rng, "abc123").unwrap();

        let (loaded, loaded_rng) = load_checkpoint(&path, "abc123", &cfg).unwrap();
        assert_eq!(loaded.d.values, state.d.values);
        assert_eq!(loaded.adam.m, state.adam.m);
        assert_eq!(loaded.adam.v, state.adam.v);
        assert_eq!(loaded.adam.t, 7);
        assert_eq!(loaded.iteration, 7);
        assert_eq!(loaded_rng, rng);

        assert!(matches!(
            load_checkpoint(&path, "different", &cfg).unwrap_err(),
            Error::ConfigHashMismatch
        ));
    }

    #[test]
    fn checkpoint_version_mismatch_detected() {
        let cfg = quick_cfg(1);
        let state = TrainState::fresh(4, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&path, &state, &ChaCha8Rng::seed_from_u64(0), "h").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        header["version"] = serde_json::json!(999);
        let mut rewritten = serde_json::to_vec(&header).unwrap();
        rewritten.push(b'\n');
        rewritten.extend_from_slice(&bytes[nl + 1..]);
        bytes = rewritten;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, "h", &cfg).unwrap_err(),
            Error::CheckpointVersion { found: 999, expected: 1 }
        ));
    }

    #[test]
    fn init_patch_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = synth_scene("bg", (64, 64), 1, &mut rng);
        let p = init_patch_from_background(&scene, 16, &mut rng).unwrap();
        assert_eq!(p.size_s, 16);
        assert!(init_patch_from_background(&scene, 100, &mut rng).is_err());

        let cond = TextCondition::default();
        let sch = make_schedule(20, ScheduleKind::Linear, 1).unwrap();
        let pred = ToyPredictor::from_prompt(&cond.prompt, 0.3);
        let mut rng_ablate = rng.clone();
        let p2 = init_patch_from_predictor(16, &cond, &sch, &pred, &mut rng).unwrap();
        assert!(p2.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // the toy predictor pulls toward the prompt palette; the bypassed
        // ablation (zero noise prediction) on the same draw does not
        let bypass = init_patch_from_predictor(
            16, &cond, &sch, &crate::diffusion::ZeroPredictor, &mut rng_ablate,
        )
        .unwrap();
        let target = crate::color::srgb_to_lab(crate::diffusion::palette_color(&cond.prompt));
        let de_toy =
            crate::color::delta_e00(crate::color::dominant_color(&p2.pixels).unwrap(), target);
        let de_bypass =
            crate::color::delta_e00(crate::color::dominant_color(&bypass.pixels).unwrap(), target);
        assert!(de_toy < de_bypass, "toy {de_toy} vs bypass {de_bypass}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = AttackConfig { learning_rate: 0.0, ..AttackConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig { batch_size: 0, ..AttackConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig { lambda_tv: -1.0, ..AttackConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
