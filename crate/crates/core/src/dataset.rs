//! Dataset loading: a JSON manifest (or a directory of images with JSON
//! sidecars) resolving to scene images with box annotations.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{Annotation, SceneImage};

/// One manifest row. `image` is a path relative to the manifest location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image: String,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Loaded dataset plus non-fatal warnings (e.g. clamped boxes).
#[derive(Debug)]
pub struct Dataset {
    pub scenes: Vec<SceneImage>,
    pub warnings: Vec<String>,
}

/// Reads an 8-bit PNG into `[0,1]` HWC.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

fn clamp_annotations(
    anns: &[Annotation],
    image_id: &str,
    h: usize,
    w: usize,
    warnings: &mut Vec<String>,
) -> Vec<Annotation> {
    anns.iter()
        .map(|a| {
            let b = a.bbox;
            let cl = crate::patch::BoxXYXY::new(
                b.x1.clamp(0.0, w as f64),
                b.y1.clamp(0.0, h as f64),
                b.x2.clamp(0.0, w as f64),
                b.y2.clamp(0.0, h as f64),
            );
            if cl != b {
                warnings.push(format!(
                    "{image_id}: box [{}, {}, {}, {}] clamped to image bounds {w}x{h}",
                    b.x1, b.y1, b.x2, b.y2
                ));
            }
            Annotation { class_id: a.class_id, bbox: cl }
        })
        .collect()
}

/// Loads a dataset from either a manifest file (`.json`) or a directory of
/// PNGs with `<stem>.json` annotation sidecars. `fail_fast` stops at the
/// first broken entry; otherwise all errors are collected into one report.
pub fn load_dataset(path: &Path, fail_fast: bool) -> Result<Dataset> {
    let entries = if path.is_dir() {
        scan_directory(path)?
    } else {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        manifest
            .entries
            .into_iter()
            .map(|e| (e.image_id, base.join(&e.image), e.annotations))
            .collect()
    };
    if entries.is_empty() {
        return Err(Error::invalid(format!("no images found at {}", path.display())));
    }

    let mut scenes = Vec::new();
    let mut warnings = Vec::new();
    let mut errors = Vec::new();
    for (image_id, img_path, anns) in entries {
        match load_image(&img_path) {
            Ok(pixels) => {
                let (h, w, _) = pixels.dim();
                let annotations = clamp_annotations(&anns, &image_id, h, w, &mut warnings);
                scenes.push(SceneImage { image_id, pixels, annotations });
            }
            Err(e) => {
                let msg = format!("{image_id} ({}): {e}", img_path.display());
                if fail_fast {
                    return Err(Error::Manifest(msg));
                }
                errors.push(msg);
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Manifest(errors.join("\n")));
    }
    scenes.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(Dataset { scenes, warnings })
}

type RawEntry = (String, PathBuf, Vec<Annotation>);

fn scan_directory(dir: &Path) -> Result<Vec<RawEntry>> {
    #[derive(Deserialize)]
    struct Sidecar {
        #[serde(default)]
        annotations: Vec<Annotation>,
    }
    let mut out = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    for p in paths {
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid("non-utf8 file name"))?
            .to_string();
        let sidecar_path = p.with_extension("json");
        let annotations = if sidecar_path.exists() {
            let sc: Sidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?;
            sc.annotations
        } else {
            Vec::new()
        };
        out.push((stem, p, annotations));
    }
    Ok(out)
}

/// Saves a scene set as a manifest plus PNGs, for fixtures and tooling.
pub fn save_dataset(dir: &Path, scenes: &[SceneImage]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for scene in scenes {
        let file = format!("{}.png", scene.image_id);
        let (h, w, _) = scene.pixels.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.get_pixel_mut(x as u32, y as u32)[c] =
                        (scene.pixels[(y, x, c)].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        img.save(dir.join(&file))?;
        entries.push(ManifestEntry {
            image_id: scene.image_id.clone(),
            image: file,
            annotations: scene.annotations.clone(),
        });
    }
    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(&DatasetManifest { entries })?,
    )?;
    Ok(manifest_path)
}
