//! `ema` — generate, evaluate, and inspect environment-matched adversarial
//! patches using the built-in toy detector and noise predictor.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ema_core::attack::{init_patch_from_background, save_checkpoint, TrainState};
use ema_core::dataset::{load_dataset, load_image};
use ema_core::patch::PatchSidecar;
use ema_core::scene::attack_render;
use ema_core::{
    delta_e00, dominant_color, evaluate, load_patch_png, make_schedule, save_patch_png, train,
    EvalOptions, Error, RunConfig, ToyDetector, ToyPredictor,
};

#[derive(Parser)]
#[command(name = "ema", version, about = "Environment-matched adversarial patch toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a patch against the toy detector on a dataset.
    Attack {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest (JSON) or image directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the patch, log, and checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Abort on the first broken dataset entry.
        #[arg(long)]
        fail_fast: bool,
    },
    /// Evaluate a patch: normalized mAP and color difference.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Patch PNG produced by `attack`.
        #[arg(long)]
        patch: PathBuf,
        /// Environment reference image for the color comparison.
        #[arg(long)]
        env: PathBuf,
        /// Report destination (JSON). Prints a table either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        fail_fast: bool,
    },
    /// CIEDE2000 between the dominant colors of two images.
    Colordiff {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        env: PathBuf,
    },
    /// Render the patch onto each dataset image and save previews.
    RenderPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Exclusive lock on an output directory; removed on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".ema.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow::anyhow!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<Error>(),
        Some(Error::Config(_) | Error::InvalidArgument(_))
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Attack { config, data, out, seed, fail_fast } => {
            attack_cmd(&config, &data, &out, seed, fail_fast)
        }
        Command::Eval { config, data, patch, env, out, fail_fast } => {
            eval_cmd(&config, &data, &patch, &env, out.as_deref(), fail_fast)
        }
        Command::Colordiff { patch, env } => colordiff_cmd(&patch, &env),
        Command::RenderPreview { config, data, patch, out, seed } => {
            preview_cmd(&config, &data, &patch, &out, seed)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn attack_cmd(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    fail_fast: bool,
) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let _lock = DirLock::acquire(out)?;
    let ds = load_dataset(data, fail_fast)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }

    let schedule = make_schedule(
        cfg.diffusion.total_steps,
        cfg.schedule_kind(),
        cfg.diffusion.step_size,
    )?;
    let cond = cfg.text_condition();
    let predictor = ToyPredictor::from_prompt(&cond.prompt, 0.3);
    let detector = ToyDetector::fitted(cfg.seed);
    let attack_cfg = cfg.attack_config();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p_init = init_patch_from_background(&ds.scenes[0], cfg.patch_size, &mut rng)?;
    let state = TrainState::fresh(cfg.patch_size, &attack_cfg);

    let mut log = File::create(out.join("train.jsonl"))?;
    let result = train(
        &attack_cfg,
        &p_init,
        &cond,
        &schedule,
        &predictor,
        &detector,
        &ds.scenes,
        state,
        None,
        Some(&mut log),
        Some(out),
    )?;

    let sidecar = PatchSidecar {
        size_s: cfg.patch_size,
        tau: cfg.diffusion.tau,
        linf_bound: attack_cfg.linf_bound,
        creation_config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    save_patch_png(&result.patch, &out.join("patch.png"), &sidecar)?;
    let final_state = TrainState {
        d: result.d.clone(),
        adam: ema_core::Adam::new(attack_cfg.learning_rate, result.d.values.dim()),
        iteration: result.history.len() as u64,
    };
    save_checkpoint(
        &out.join("final.ckpt"),
        &final_state,
        &ChaCha8Rng::seed_from_u64(cfg.seed),
        &cfg.hash(),
    )?;
    println!(
        "done: {} iterations, best loss {:.6}, patch {}",
        result.history.len(),
        result.best_loss,
        out.join("patch.png").display()
    );
    Ok(())
}

fn eval_cmd(
    config: &Path,
    data: &Path,
    patch_path: &Path,
    env: &Path,
    out: Option<&Path>,
    fail_fast: bool,
) -> anyhow::Result<()> {
    let cfg = load_config(config, None)?;
    let ds = load_dataset(data, fail_fast)?;
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    let (patch, sidecar) = load_patch_png(patch_path)?;
    if let Some(sc) = &sidecar {
        if sc.creation_config_hash != cfg.hash() {
            eprintln!(
                "warning: patch was created under a different configuration (hash mismatch)"
            );
        }
    }
    let env_img = load_image(env)?;
    let detector = ToyDetector::fitted(cfg.seed);
    let opts = EvalOptions { ranges: cfg.scene_ranges(), seed: cfg.seed };
    let report = evaluate(&patch, &ds.scenes, &detector, &env_img, &opts)?;
    print!("{}", report.to_table("ema"));
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_vec_pretty(&report)?)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn colordiff_cmd(patch: &Path, env: &Path) -> anyhow::Result<()> {
    let a = dominant_color(&load_image(patch)?)?;
    let b = dominant_color(&load_image(env)?)?;
    println!("{:.4}", delta_e00(a, b));
    Ok(())
}

fn preview_cmd(
    config: &Path,
    data: &Path,
    patch_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let _lock = DirLock::acquire(out)?;
    let ds = load_dataset(data, true)?;
    let (patch, _) = load_patch_png(patch_path)?;
    let ranges = cfg.scene_ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rendered = Vec::new();
    for scene in &ds.scenes {
        let params = ranges.sample(&mut rng);
        rendered.push(attack_render(scene, &patch, &params, &mut rng));
    }
    ema_core::save_dataset(out, &rendered)?;
    println!("previews written to {}", out.display());
    Ok(())
}
