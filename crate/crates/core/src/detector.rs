//! Victim-detector abstraction plus a small fully differentiable toy
//! detector for desk-scale verification.
//!
//! The toy detector is a single-scale grid scorer: one stride-8 matched
//! filter per head (objectness, class confidence) with sigmoid outputs,
//! calibrated against procedurally generated vehicle stamps on textured
//! backgrounds. Cells whose objectness clears a floor threshold emit
//! fixed-size boxes; everything stays differentiable in the input pixels.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{self, BoxXYXY};
use crate::tape::{Tape, Var};

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub class_id: i64,
    pub class_conf: f64,
    pub objectness: f64,
}

impl Detection {
    /// Ranking score used by evaluation: class confidence times objectness.
    pub fn score(&self) -> f64 {
        self.class_conf * self.objectness
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

/// Keeps only detections of the given class, order preserved.
pub fn filter_by_class(dets: &DetectionSet, class_id: i64) -> DetectionSet {
    DetectionSet {
        image_id: dets.image_id.clone(),
        detections: dets
            .detections
            .iter()
            .filter(|d| d.class_id == class_id)
            .cloned()
            .collect(),
    }
}

/// Victim detector handle. `detect` must be deterministic on identical input.
pub trait Detector: Sync {
    fn detect(&self, pixels: &Array3<f64>, image_id: &str) -> Result<DetectionSet>;

    /// Whether the handle can participate in gradient-based training.
    fn supports_gradients(&self) -> bool {
        false
    }

    /// Handles declaring single-threaded capability get serialized calls.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Per-cell differentiable score maps from a detector forward pass.
pub struct ScoreMaps {
    /// Objectness in [0,1], shape (cells_y, cells_x).
    pub obj: Var,
    /// Class confidence in [0,1], same shape.
    pub conf: Var,
    /// Candidate retention mask (1 where objectness cleared the floor).
    pub retained: Array2<f64>,
}

/// Detector usable inside the training loop.
pub trait DifferentiableDetector: Detector {
    fn score_maps(&self, tape: &mut Tape, image: Var) -> Result<ScoreMaps>;
}

pub const TOY_STRIDE: usize = 8;
pub const TOY_TEMPLATE_SIZE: usize = 16;
/// Pre-NMS candidate floor: cells below this objectness emit nothing.
pub const CANDIDATE_FLOOR: f64 = 0.1;

/// Matched-filter weights for the toy detector. Channel 0 is the objectness
/// head, channel 1 the class-confidence head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    /// (2, K, K, 3) zero-mean-per-channel kernels.
    pub kernel: ArrayD<f64>,
    /// Per-head logit bias.
    pub bias: [f64; 2],
}

impl ToyWeights {
    /// Calibrates the matched filter so the vehicle template scores high and
    /// textured backgrounds score below the candidate floor.
    pub fn fit(seed: u64) -> Self {
        let template = vehicle_template();
        let k = TOY_TEMPLATE_SIZE;
        // zero-mean per channel: correlation then ignores constant offsets
        let mut kernel = Array3::zeros((k, k, 3));
        for c in 0..3 {
            let mean = template.slice(ndarray::s![.., .., c]).mean().unwrap();
            for y in 0..k {
                for x in 0..k {
                    kernel[(y, x, c)] = template[(y, x, c)] - mean;
                }
            }
        }
        let norm: f64 = kernel.iter().map(|v| v * v).sum::<f64>();
        kernel.mapv_inplace(|v| v / norm);

        let response = |img: &Array3<f64>| -> f64 {
            let mut acc = 0.0;
            for y in 0..k {
                for x in 0..k {
                    for c in 0..3 {
                        acc += kernel[(y, x, c)] * img[(y, x, c)];
                    }
                }
            }
            acc
        };
        let r_pos = response(&template);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r_bg_max = f64::MIN;
        for _ in 0..200 {
            let bg = textured_background(k, k, &mut rng);
            r_bg_max = r_bg_max.max(response(&bg));
        }
        // logit(template) = +4, logit(worst background) = -3
        let scale = 7.0 / (r_pos - r_bg_max);
        let bias_obj = -3.0 - scale * r_bg_max;
        // slightly softer class head so conf and obj are distinct signals
        let bias_cls = bias_obj - 0.5;

        let mut stacked = ndarray::Array4::zeros((2, k, k, 3));
        for head in 0..2 {
            for y in 0..k {
                for x in 0..k {
                    for c in 0..3 {
                        stacked[(head, y, x, c)] = kernel[(y, x, c)] * scale;
                    }
                }
            }
        }
        ToyWeights { kernel: stacked.into_dyn(), bias: [bias_obj, bias_cls] }
    }
}

/// Fully differentiable single-scale grid detector.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub weights: ToyWeights,
    kernel: Arc<ArrayD<f64>>,
}

impl ToyDetector {
    pub fn new(weights: ToyWeights) -> Self {
        let kernel = Arc::new(weights.kernel.clone());
        Self { weights, kernel }
    }

    pub fn fitted(seed: u64) -> Self {
        Self::new(ToyWeights::fit(seed))
    }

    fn cell_box(&self, cy: usize, cx: usize) -> BoxXYXY {
        let k = TOY_TEMPLATE_SIZE as f64;
        let x1 = (cx * TOY_STRIDE) as f64;
        let y1 = (cy * TOY_STRIDE) as f64;
        BoxXYXY::new(x1, y1, x1 + k, y1 + k)
    }

    fn check_dims(&self, pixels: &Array3<f64>) -> Result<()> {
        let (h, w, c) = pixels.dim();
        if c != 3 || h % TOY_STRIDE != 0 || w % TOY_STRIDE != 0 || h < TOY_TEMPLATE_SIZE || w < TOY_TEMPLATE_SIZE {
            return Err(Error::invalid(format!(
                "toy detector needs RGB dims divisible by {TOY_STRIDE} and at least {TOY_TEMPLATE_SIZE}, got {h}x{w}x{c}"
            )));
        }
        Ok(())
    }
}

impl Detector for ToyDetector {
    fn detect(&self, pixels: &Array3<f64>, image_id: &str) -> Result<DetectionSet> {
        let mut tape = Tape::new();
        let v = tape.leaf(patch::to_dyn(pixels));
        let maps = score_maps_impl(self, &mut tape, v)?;
        let obj = tape.value(maps.obj).clone();
        let conf = tape.value(maps.conf).clone();
        let (cy_n, cx_n) = (obj.shape()[0], obj.shape()[1]);
        let mut detections = Vec::new();
        for cy in 0..cy_n {
            for cx in 0..cx_n {
                if maps.retained[(cy, cx)] == 1.0 {
                    detections.push(Detection {
                        bbox: self.cell_box(cy, cx),
                        class_id: 0,
                        class_conf: conf[[cy, cx]],
                        objectness: obj[[cy, cx]],
                    });
                }
            }
        }
        Ok(DetectionSet { image_id: image_id.to_string(), detections })
    }

    fn supports_gradients(&self) -> bool {
        true
    }
}

fn score_maps_impl(det: &ToyDetector, tape: &mut Tape, image: Var) -> Result<ScoreMaps> {
    {
        let shape = tape.value(image).shape();
        let pixels_dim = (shape[0], shape[1], shape[2]);
        det.check_dims(&Array3::zeros(pixels_dim))?;
    }
    let logits = tape.conv2d(image, det.kernel.clone(), TOY_STRIDE);
    let (ho, wo) = {
        let s = tape.value(logits).shape();
        (s[0], s[1])
    };
    let mut bias = ArrayD::zeros(IxDyn(&[ho, wo, 2]));
    for y in 0..ho {
        for x in 0..wo {
            bias[[y, x, 0]] = det.weights.bias[0];
            bias[[y, x, 1]] = det.weights.bias[1];
        }
    }
    let logits = tape.add_const(logits, &bias);
    let obj_logit = tape.channel(logits, 0);
    let conf_logit = tape.channel(logits, 1);
    let obj = tape.sigmoid(obj_logit);
    let conf = tape.sigmoid(conf_logit);
    let obj_vals = tape.value(obj);
    let mut retained = Array2::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            if obj_vals[[y, x]] >= CANDIDATE_FLOOR {
                retained[(y, x)] = 1.0;
            }
        }
    }
    Ok(ScoreMaps { obj, conf, retained })
}

impl DifferentiableDetector for ToyDetector {
    fn score_maps(&self, tape: &mut Tape, image: Var) -> Result<ScoreMaps> {
        score_maps_impl(self, tape, image)
    }
}

/// Grid-cell detection via the toy scorer (free-function form of
/// [`ToyDetector::detect`]).
pub fn toy_detect(pixels: &Array3<f64>, weights: &ToyWeights, image_id: &str) -> Result<DetectionSet> {
    ToyDetector::new(weights.clone()).detect(pixels, image_id)
}

// --- detection dump format ------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DumpRecord {
    image_id: String,
    detections: Vec<DumpDetection>,
}

#[derive(Serialize, Deserialize)]
struct DumpDetection {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class_id: i64,
    class_conf: f64,
    objectness: f64,
}

/// Writes detection sets as JSON lines, one object per image.
pub fn write_detections_jsonl(path: &Path, sets: &[DetectionSet]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for set in sets {
        let rec = DumpRecord {
            image_id: set.image_id.clone(),
            detections: set
                .detections
                .iter()
                .map(|d| DumpDetection {
                    bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                    class_id: d.class_id,
                    class_conf: d.class_conf,
                    objectness: d.objectness,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<DetectionSet>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut sets = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line)?;
        sets.push(DetectionSet {
            image_id: rec.image_id,
            detections: rec
                .detections
                .into_iter()
                .map(|d| Detection {
                    bbox: BoxXYXY::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]),
                    class_id: d.class_id,
                    class_conf: d.class_conf,
                    objectness: d.objectness,
                })
                .collect(),
        });
    }
    Ok(sets)
}

/// Gradient-free adapter over a precomputed detection dump, keyed by
/// image id. Stands in for external detectors that only provide outputs.
pub struct DumpDetector {
    by_id: HashMap<String, DetectionSet>,
}

impl DumpDetector {
    pub fn from_path(path: &Path) -> Result<Self> {
        let sets = read_detections_jsonl(path)?;
        Ok(Self {
            by_id: sets.into_iter().map(|s| (s.image_id.clone(), s)).collect(),
        })
    }
}

impl Detector for DumpDetector {
    fn detect(&self, _pixels: &Array3<f64>, image_id: &str) -> Result<DetectionSet> {
        Ok(self
            .by_id
            .get(image_id)
            .cloned()
            .unwrap_or_else(|| DetectionSet { image_id: image_id.to_string(), detections: vec![] }))
    }
}

// --- synthetic fixtures ----------------------------------------------------

/// The procedural "vehicle" stamp the toy scorer is calibrated against.
pub fn vehicle_template() -> Array3<f64> {
    let k = TOY_TEMPLATE_SIZE;
    let mut t = Array3::from_elem((k, k, 3), 0.48);
    for y in 1..k - 1 {
        for x in 2..k - 2 {
            // body
            t[(y, x, 0)] = 0.16;
            t[(y, x, 1)] = 0.17;
            t[(y, x, 2)] = 0.22;
        }
    }
    for y in 4..k - 4 {
        for x in 5..k - 5 {
            // roof
            t[(y, x, 0)] = 0.52;
            t[(y, x, 1)] = 0.53;
            t[(y, x, 2)] = 0.58;
        }
    }
    for x in 4..k - 4 {
        // windshield band
        t[(3, x, 0)] = 0.08;
        t[(3, x, 1)] = 0.10;
        t[(3, x, 2)] = 0.14;
    }
    t
}

/// Low-amplitude textured background around a base color.
pub fn textured_background(h: usize, w: usize, rng: &mut impl Rng) -> Array3<f64> {
    let base = [
        rng.gen_range(0.55..0.75),
        rng.gen_range(0.50..0.70),
        rng.gen_range(0.35..0.55),
    ];
    Array3::from_shape_fn((h, w, 3), |(_, _, c)| {
        (base[c] + rng.gen_range(-0.06..0.06f64)).clamp(0.0, 1.0)
    })
}

/// Synthetic scene: textured background with grid-aligned vehicle stamps and
/// matching ground-truth annotations.
pub fn synth_scene(
    image_id: &str,
    hw: (usize, usize),
    n_vehicles: usize,
    rng: &mut impl Rng,
) -> crate::patch::SceneImage {
    let (h, w) = hw;
    let mut pixels = textured_background(h, w, rng);
    let template = vehicle_template();
    let k = TOY_TEMPLATE_SIZE;
    let mut annotations = Vec::new();
    let cells_y = (h - k) / TOY_STRIDE;
    let cells_x = (w - k) / TOY_STRIDE;
    let mut occupied: Vec<(usize, usize)> = Vec::new();
    let mut attempts = 0;
    while annotations.len() < n_vehicles && attempts < 200 {
        attempts += 1;
        let cy = rng.gen_range(0..=cells_y);
        let cx = rng.gen_range(0..=cells_x);
        // keep stamps disjoint: templates span 2 cells in each direction
        if occupied
            .iter()
            .any(|&(oy, ox)| oy.abs_diff(cy) < 3 && ox.abs_diff(cx) < 3)
        {
            continue;
        }
        occupied.push((cy, cx));
        let (y0, x0) = (cy * TOY_STRIDE, cx * TOY_STRIDE);
        for y in 0..k {
            for x in 0..k {
                for c in 0..3 {
                    pixels[(y0 + y, x0 + x, c)] = template[(y, x, c)];
                }
            }
        }
        annotations.push(crate::patch::Annotation {
            class_id: 0,
            bbox: BoxXYXY::new(x0 as f64, y0 as f64, (x0 + k) as f64, (y0 + k) as f64),
        });
    }
    crate::patch::SceneImage { image_id: image_id.to_string(), pixels, annotations }
}
