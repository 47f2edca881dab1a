//! Smoothness and attack objectives with tape-backed gradients.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectionSet, ScoreMaps};
use crate::error::{Error, Result};
use crate::patch::AdversarialPatch;
use crate::tape::{SparseMap, Tape, Var};

/// Per-iteration loss breakdown; `total = lambda_tv * tv + det`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub tv: f64,
    pub det: f64,
    pub total: f64,
    pub lambda_tv: f64,
}

/// Total variation smoothness term: root of the summed squared neighbor
/// differences (channels inside the radical, valid neighbors only) divided
/// by the pixel count.
pub fn tv_loss(patch: &AdversarialPatch) -> Result<f64> {
    let s = patch.size_s;
    if s < 2 {
        return Err(Error::invalid("tv_loss needs a patch of side >= 2"));
    }
    let p = &patch.pixels;
    let mut acc = 0.0;
    for i in 0..s {
        for j in 0..s {
            for c in 0..3 {
                if i + 1 < s {
                    let d = p[(i, j, c)] - p[(i + 1, j, c)];
                    acc += d * d;
                }
                if j + 1 < s {
                    let d = p[(i, j, c)] - p[(i, j + 1, c)];
                    acc += d * d;
                }
            }
        }
    }
    Ok(acc.sqrt() / (s * s) as f64)
}

/// Neighbor-difference stencil as a sparse map: rows minus next row
/// (`vertical`) or columns minus next column.
fn diff_map(s: usize, vertical: bool) -> SparseMap {
    let (oh, ow) = if vertical { (s - 1, s) } else { (s, s - 1) };
    let mut entries = Vec::with_capacity(oh * ow * 6);
    for i in 0..oh {
        for j in 0..ow {
            for c in 0..3u32 {
                let out = ((i * ow + j) * 3) as u32 + c;
                let here = ((i * s + j) * 3) as u32 + c;
                let next = if vertical {
                    (((i + 1) * s + j) * 3) as u32 + c
                } else {
                    ((i * s + j + 1) * 3) as u32 + c
                };
                entries.push((out, here, 1.0));
                entries.push((out, next, -1.0));
            }
        }
    }
    SparseMap { entries, out_shape: vec![oh, ow, 3] }
}

/// Tape form of [`tv_loss`]; scalar output differentiable in the patch var.
pub fn tv_loss_var(tape: &mut Tape, patch: Var, size_s: usize) -> Result<Var> {
    if size_s < 2 {
        return Err(Error::invalid("tv_loss needs a patch of side >= 2"));
    }
    let dv = tape.sparse_linear(patch, Arc::new(diff_map(size_s, true)));
    let dh = tape.sparse_linear(patch, Arc::new(diff_map(size_s, false)));
    let dv2 = tape.mul(dv, dv);
    let dh2 = tape.mul(dh, dh);
    let sv = tape.sum_all(dv2);
    let sh = tape.sum_all(dh2);
    let sum = tape.add(sv, sh);
    let root = tape.sqrt(sum);
    Ok(tape.scale(root, 1.0 / (size_s * size_s) as f64))
}

/// Mean of `class_conf * objectness` over all candidates in the batch;
/// zero when there are no candidates.
pub fn det_loss(dets_per_image: &[DetectionSet]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for set in dets_per_image {
        for d in &set.detections {
            acc += d.class_conf * d.objectness;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Tape form of [`det_loss`] over retained grid candidates of a batch.
pub fn det_loss_var(tape: &mut Tape, maps: &[ScoreMaps]) -> Var {
    let mut count = 0.0;
    for m in maps {
        count += m.retained.sum();
    }
    if count == 0.0 {
        return tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[])));
    }
    let mut total: Option<Var> = None;
    for m in maps {
        let prod = tape.mul(m.conf, m.obj);
        let masked = tape.mul_const(prod, Arc::new(m.retained.clone().into_dyn()));
        let s = tape.sum_all(masked);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    tape.scale(total.unwrap(), 1.0 / count)
}

/// Combined objective per the loss report invariant.
pub fn total_loss(
    patch: &AdversarialPatch,
    dets: &[DetectionSet],
    lambda_tv: f64,
) -> Result<LossReport> {
    if lambda_tv < 0.0 {
        return Err(Error::invalid("lambda_tv must be non-negative"));
    }
    let tv = tv_loss(patch)?;
    let det = det_loss(dets);
    Ok(LossReport { tv, det, total: lambda_tv * tv + det, lambda_tv })
}
