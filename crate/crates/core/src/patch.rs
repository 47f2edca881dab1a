//! Patch and perturbation state: clipping, L-inf projection and mask
//! compositing, plus PNG export/import with a JSON sidecar.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Axis-aligned box in pixel coordinates, `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn iou(&self, other: &BoxXYXY) -> f64 {
        let ix1 = self.x1.max(other.x1);
        let iy1 = self.y1.max(other.y1);
        let ix2 = self.x2.min(other.x2);
        let iy2 = self.y2.min(other.y2);
        let inter = (ix2 - ix1).max(0.0) * (iy2 - iy1).max(0.0);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Ground-truth annotation on a scene image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: i64,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
}

/// Square RGB patch with intensities in `[0, tau]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPatch {
    pub pixels: Array3<f64>,
    pub size_s: usize,
}

impl AdversarialPatch {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h != w || c != 3 || h == 0 {
            return Err(Error::invalid(format!(
                "patch must be square with 3 channels, got {h}x{w}x{c}"
            )));
        }
        Ok(Self { pixels, size_s: h })
    }

    pub fn constant(size: usize, value: [f64; 3]) -> Self {
        let pixels = Array3::from_shape_fn((size, size, 3), |(_, _, c)| value[c]);
        Self { pixels, size_s: size }
    }
}

/// Trainable offset added to the initial patch, bounded in L-inf norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationField {
    pub values: Array3<f64>,
    pub linf_bound: f64,
}

impl PerturbationField {
    /// Zero-initialized field matching a patch of side `size`.
    pub fn zeros(size: usize, linf_bound: f64) -> Self {
        Self {
            values: Array3::zeros((size, size, 3)),
            linf_bound,
        }
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Scene mask: 1 where the rendered patch replaces the scene, 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub values: Array2<f64>,
}

impl BinaryMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("mask values must be exactly 0 or 1"));
        }
        Ok(Self { values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { values: Array2::zeros((h, w)) }
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Scene image with ground-truth annotations.
#[derive(Debug, Clone)]
pub struct SceneImage {
    pub image_id: String,
    pub pixels: Array3<f64>,
    pub annotations: Vec<Annotation>,
}

/// Clamps every element of the patch into `[0, tau]`.
pub fn clip_patch(patch: &AdversarialPatch, tau: f64) -> Result<AdversarialPatch> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    Ok(AdversarialPatch {
        pixels: patch.pixels.mapv(|p| p.min(tau).max(0.0)),
        size_s: patch.size_s,
    })
}

/// Returns `clip(init + d, tau)` without modifying the inputs.
pub fn apply_perturbation(
    init: &AdversarialPatch,
    d: &PerturbationField,
    tau: f64,
) -> Result<AdversarialPatch> {
    if init.pixels.dim() != d.values.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: patch {:?} vs perturbation {:?}",
            init.pixels.dim(),
            d.values.dim()
        )));
    }
    let sum = AdversarialPatch {
        pixels: &init.pixels + &d.values,
        size_s: init.size_s,
    };
    clip_patch(&sum, tau)
}

/// Projects the field back into the L-inf ball of radius `linf_bound`.
pub fn project_linf(d: &PerturbationField) -> PerturbationField {
    let b = d.linf_bound;
    PerturbationField {
        values: d.values.mapv(|v| v.clamp(-b, b)),
        linf_bound: b,
    }
}

/// Per-pixel selection: scene where mask is 0, rendered patch where mask is 1.
pub fn composite(
    scene: &Array3<f64>,
    rendered: &Array3<f64>,
    mask: &BinaryMask,
) -> Result<Array3<f64>> {
    let (h, w, _) = scene.dim();
    if rendered.dim() != scene.dim() || mask.values.dim() != (h, w) {
        return Err(Error::invalid(format!(
            "composite dimension mismatch: scene {:?}, rendered {:?}, mask {:?}",
            scene.dim(),
            rendered.dim(),
            mask.values.dim()
        )));
    }
    let mut out = scene.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.values[(y, x)] == 1.0 {
                for c in 0..3 {
                    out[(y, x, c)] = rendered[(y, x, c)];
                }
            }
        }
    }
    Ok(out)
}

/// Tape form of [`composite`]: `(1-m) .* scene + m .* rendered`, differentiable
/// in the rendered layer.
pub fn composite_var(
    tape: &mut Tape,
    rendered: Var,
    scene: &Array3<f64>,
    mask: &BinaryMask,
) -> Var {
    let (h, w, _) = scene.dim();
    let mut mask3 = Array3::zeros((h, w, 3));
    let mut keep = scene.clone();
    for y in 0..h {
        for x in 0..w {
            let m = mask.values[(y, x)];
            for c in 0..3 {
                mask3[(y, x, c)] = m;
                keep[(y, x, c)] *= 1.0 - m;
            }
        }
    }
    let masked = tape.mul_const(rendered, Arc::new(mask3.into_dyn()));
    tape.add_const(masked, &keep.into_dyn())
}

/// JSON sidecar written next to every exported patch PNG.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PatchSidecar {
    pub size_s: usize,
    pub tau: f64,
    pub linf_bound: f64,
    pub creation_config_hash: String,
    pub seed: u64,
}

/// Writes the patch as 8-bit RGB PNG plus `<path>.json` sidecar.
pub fn save_patch_png(patch: &AdversarialPatch, path: &Path, sidecar: &PatchSidecar) -> Result<()> {
    let s = patch.size_s;
    let mut img = image::RgbImage::new(s as u32, s as u32);
    for y in 0..s {
        for x in 0..s {
            let px = [0, 1, 2].map(|c| {
                (patch.pixels[(y, x, c)].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    let sidecar_path = sidecar_path_for(path);
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

/// Loads a patch PNG; the sidecar is returned when present.
pub fn load_patch_png(path: &Path) -> Result<(AdversarialPatch, Option<PatchSidecar>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(Error::invalid(format!("patch image must be square, got {w}x{h}")));
    }
    let s = w as usize;
    let mut pixels = Array3::zeros((s, s, 3));
    for y in 0..s {
        for x in 0..s {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                pixels[(y, x, c)] = px[c] as f64 / 255.0;
            }
        }
    }
    let sidecar_path = sidecar_path_for(path);
    let sidecar = if sidecar_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?)
    } else {
        None
    };
    Ok((AdversarialPatch::new(pixels)?, sidecar))
}

fn sidecar_path_for(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Straight ndarray clamp used by modules that already hold raw pixels.
pub fn clamp01(a: &Array3<f64>) -> Array3<f64> {
    a.mapv(|v| v.clamp(0.0, 1.0))
}

pub(crate) fn to_dyn(a: &Array3<f64>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

pub(crate) fn from_dyn(a: &ArrayD<f64>) -> Array3<f64> {
    a.clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("expected a rank-3 array")
}
