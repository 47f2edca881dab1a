//! Environment-matched adversarial patch generation against object
//! detectors: a perturbation field is optimized through a text-conditioned
//! denoising loop, scene-matched placement, and a differentiable detector,
//! then evaluated with normalized mAP and CIEDE2000 color difference.

pub mod attack;
pub mod color;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod losses;
pub mod patch;
pub mod scene;
pub mod tape;

pub use attack::{train, Adam, AttackConfig, AttackResult, IterLog, TrainState};
pub use color::{delta_e00, dominant_color, srgb_to_lab, LabColor};
pub use config::RunConfig;
pub use dataset::{load_dataset, save_dataset, Dataset, DatasetManifest, ManifestEntry};
pub use detector::{
    Detection, DetectionSet, Detector, DifferentiableDetector, ScoreMaps, ToyDetector, ToyWeights,
};
pub use diffusion::{
    generate_patch, make_schedule, DiffusionSchedule, DifferentiableNoisePredictor,
    NoisePredictor, ScheduleKind, TextCondition, ToyPredictor,
};
pub use error::{Error, Result};
pub use eval::{evaluate, map_50_95, normalized_map, EvalOptions, EvalReport};
pub use losses::{det_loss, total_loss, tv_loss, LossReport};
pub use patch::{
    apply_perturbation, clip_patch, composite, load_patch_png, project_linf, save_patch_png,
    AdversarialPatch, Annotation, BinaryMask, BoxXYXY, PatchSidecar, PerturbationField,
    SceneImage,
};
pub use scene::{attack_render, PlacementSpec, SceneParamRanges, SceneParameters};
pub use tape::{Gradients, SparseMap, Tape, Var};
