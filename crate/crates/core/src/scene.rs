//! Scene matching: photometric adjustment and geometric placement of the
//! patch into scene images, producing the rendered layer and binary mask
//! consumed by compositing.
//!
//! The warp is an inverse-mapped affine (rotate + scale + translate) with
//! bilinear interpolation. Because the geometry is fixed per placement, the
//! warp is a sparse linear map in the patch pixels; the same precomputed map
//! drives both the plain and the tape paths.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{self, AdversarialPatch, BinaryMask, BoxXYXY, SceneImage};
use crate::tape::{SparseMap, Tape, Var};

/// Photometric and geometric rendering parameters for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParameters {
    /// Multiplicative contrast.
    pub contrast: f64,
    /// Additive brightness in [0,1] units.
    pub brightness: f64,
    /// Rotation is drawn per placement from this range, degrees.
    pub rotation_range: [f64; 2],
    /// Patch footprint area as a fraction of the target box area.
    pub area_ratio: f64,
    /// Std of additive Gaussian pixel noise.
    pub noise_std: f64,
}

impl SceneParameters {
    pub fn identity() -> Self {
        Self {
            contrast: 1.0,
            brightness: 0.0,
            rotation_range: [0.0, 0.0],
            area_ratio: 0.3,
            noise_std: 0.0,
        }
    }
}

/// Configured sampling ranges; one [`SceneParameters`] is drawn per image
/// per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParamRanges {
    pub contrast: [f64; 2],
    pub brightness: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub area_ratio: f64,
    pub noise_std: f64,
}

impl Default for SceneParamRanges {
    fn default() -> Self {
        Self {
            contrast: [0.8, 1.2],
            brightness: [-0.1, 0.1],
            rotation_deg: [-20.0, 20.0],
            area_ratio: 0.3,
            noise_std: 0.0,
        }
    }
}

impl SceneParamRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> SceneParameters {
        SceneParameters {
            contrast: sample_range(rng, self.contrast),
            brightness: sample_range(rng, self.brightness),
            rotation_range: self.rotation_deg,
            area_ratio: self.area_ratio,
            noise_std: self.noise_std,
        }
    }
}

fn sample_range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Concrete placement of a patch into a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementSpec {
    pub target_box: BoxXYXY,
    pub rotation_deg: f64,
    pub patch_center: (f64, f64),
    pub scale: f64,
}

/// Samples patch-shaped Gaussian pixel noise with the configured std.
pub fn sample_photometric_noise(size: usize, noise_std: f64, rng: &mut impl Rng) -> Array3<f64> {
    if noise_std == 0.0 {
        return Array3::zeros((size, size, 3));
    }
    let normal = Normal::new(0.0, noise_std).expect("valid std");
    Array3::from_shape_fn((size, size, 3), |_| normal.sample(rng))
}

/// `clamp(contrast * p + brightness + noise, 0, 1)`.
pub fn photometric_adjust(
    patch: &AdversarialPatch,
    params: &SceneParameters,
    noise: &Array3<f64>,
) -> AdversarialPatch {
    let adjusted = (&patch.pixels * params.contrast + params.brightness + noise)
        .mapv(|v| v.clamp(0.0, 1.0));
    AdversarialPatch { pixels: adjusted, size_s: patch.size_s }
}

/// Tape form of [`photometric_adjust`], differentiable in the patch.
pub fn photometric_adjust_var(
    tape: &mut Tape,
    patch: Var,
    params: &SceneParameters,
    noise: &Array3<f64>,
) -> Var {
    let scaled = tape.scale(patch, params.contrast);
    let shifted = tape.offset(scaled, params.brightness);
    let noised = tape.add_const(shifted, &patch::to_dyn(noise));
    tape.clamp(noised, 0.0, 1.0)
}

/// Plans where and how large the patch lands on a target box. Returns `None`
/// for degenerate boxes (the skip-placement signal).
pub fn plan_placement(
    target_box: BoxXYXY,
    patch_size: usize,
    params: &SceneParameters,
    rng: &mut impl Rng,
) -> Option<PlacementSpec> {
    let box_area = target_box.area();
    let footprint = params.area_ratio * box_area;
    if box_area <= 0.0 || footprint < 1.0 {
        return None;
    }
    let scale = footprint.sqrt() / patch_size as f64;
    let rotation_deg = sample_range(rng, params.rotation_range);
    Some(PlacementSpec {
        target_box,
        rotation_deg,
        patch_center: target_box.center(),
        scale,
    })
}

/// Precomputed warp: sparse patch-to-layer map plus the coverage mask.
pub struct RenderMap {
    pub map: Arc<SparseMap>,
    pub mask: BinaryMask,
}

/// Builds the inverse-mapped bilinear warp for `spec` on an `(h, w)` canvas.
///
/// Layer weights are normalized by coverage so edge pixels keep full
/// intensity; the mask is coverage thresholded at 0.5.
pub fn build_render_map(patch_size: usize, spec: &PlacementSpec, canvas_hw: (usize, usize)) -> Result<RenderMap> {
    let (h, w) = canvas_hw;
    let s = patch_size as f64;
    let half = spec.scale * s / 2.0;
    let theta = spec.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cx, cy) = spec.patch_center;

    // rotated square corners must stay on the canvas
    for (ux, uy) in [(-half, -half), (half, -half), (-half, half), (half, half)] {
        let x = cx + cos * ux - sin * uy;
        let y = cy + sin * ux + cos * uy;
        if x < 0.0 || y < 0.0 || x > w as f64 || y > h as f64 {
            return Err(Error::invalid(format!(
                "patch footprint leaves the canvas: corner ({x:.1}, {y:.1}) outside {w}x{h}"
            )));
        }
    }

    let reach = half * std::f64::consts::SQRT_2 + 1.0;
    let x_lo = ((cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((cx + reach).ceil().min(w as f64)) as usize;
    let y_lo = ((cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((cy + reach).ceil().min(h as f64)) as usize;

    let sp = patch_size;
    let mut entries = Vec::new();
    let mut mask = Array2::zeros((h, w));
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // inverse rotation then unscale into patch pixel coordinates
            let u = (cos * dx + sin * dy) / spec.scale;
            let v = (-sin * dx + cos * dy) / spec.scale;
            let sx = u + s / 2.0 - 0.5;
            let sy = v + s / 2.0 - 0.5;
            let x0 = sx.floor() as i64;
            let y0 = sy.floor() as i64;
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            let coverage: f64 = corners
                .iter()
                .filter(|(r, c, _)| (0..sp as i64).contains(r) && (0..sp as i64).contains(c))
                .map(|(_, _, wt)| wt)
                .sum();
            if coverage < 0.5 {
                continue;
            }
            mask[(y, x)] = 1.0;
            for (r, c, wt) in corners {
                if !(0..sp as i64).contains(&r) || !(0..sp as i64).contains(&c) || wt == 0.0 {
                    continue;
                }
                let wn = wt / coverage;
                for ch in 0..3u32 {
                    let out_idx = ((y * w + x) * 3) as u32 + ch;
                    let in_idx = ((r as usize * sp + c as usize) * 3) as u32 + ch;
                    entries.push((out_idx, in_idx, wn));
                }
            }
        }
    }
    Ok(RenderMap {
        map: Arc::new(SparseMap { entries, out_shape: vec![h, w, 3] }),
        mask: BinaryMask::new(mask).expect("mask is 0/1 by construction"),
    })
}

/// Warps the patch into a canvas-sized layer; returns the layer and mask.
pub fn render(
    patch: &AdversarialPatch,
    spec: &PlacementSpec,
    canvas_hw: (usize, usize),
) -> Result<(Array3<f64>, BinaryMask)> {
    let rm = build_render_map(patch.size_s, spec, canvas_hw)?;
    let flat = patch.pixels.as_slice().expect("contiguous patch");
    let (h, w) = canvas_hw;
    let mut layer = Array3::zeros((h, w, 3));
    {
        let out = layer.as_slice_mut().unwrap();
        for &(o, i, wt) in &rm.map.entries {
            out[o as usize] += wt * flat[i as usize];
        }
    }
    Ok((layer, rm.mask))
}

/// Composites `layer` over a var base where the mask is set.
pub fn composite_over_var(tape: &mut Tape, base: Var, layer: Var, mask: &BinaryMask) -> Var {
    let (h, w) = mask.values.dim();
    let mut m3 = Array3::zeros((h, w, 3));
    let mut inv3 = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let m = mask.values[(y, x)];
            for c in 0..3 {
                m3[(y, x, c)] = m;
                inv3[(y, x, c)] = 1.0 - m;
            }
        }
    }
    let kept = tape.mul_const(base, Arc::new(inv3.into_dyn()));
    let placed = tape.mul_const(layer, Arc::new(m3.into_dyn()));
    tape.add(kept, placed)
}

/// Renders the patch onto every annotated box of the scene:
/// photometric adjust, plan, warp, composite. Degenerate or out-of-canvas
/// boxes are skipped. Deterministic for a fixed rng stream.
pub fn attack_render(
    scene: &SceneImage,
    patch: &AdversarialPatch,
    params: &SceneParameters,
    rng: &mut impl Rng,
) -> SceneImage {
    let (h, w, _) = scene.pixels.dim();
    let noise = sample_photometric_noise(patch.size_s, params.noise_std, rng);
    let adjusted = photometric_adjust(patch, params, &noise);
    let mut pixels = scene.pixels.clone();
    for ann in &scene.annotations {
        let Some(spec) = plan_placement(ann.bbox, patch.size_s, params, rng) else {
            continue;
        };
        let Ok((layer, mask)) = render(&adjusted, &spec, (h, w)) else {
            continue;
        };
        pixels = patch::composite(&pixels, &layer, &mask).expect("shapes match by construction");
    }
    SceneImage {
        image_id: scene.image_id.clone(),
        pixels,
        annotations: scene.annotations.clone(),
    }
}

/// Tape form of [`attack_render`]: same sampling order, differentiable in
/// the patch var. Returns the composed image var.
pub fn attack_render_var(
    tape: &mut Tape,
    scene: &SceneImage,
    patch_var: Var,
    patch_size: usize,
    params: &SceneParameters,
    rng: &mut impl Rng,
) -> Var {
    let (h, w, _) = scene.pixels.dim();
    let noise = sample_photometric_noise(patch_size, params.noise_std, rng);
    let adjusted = photometric_adjust_var(tape, patch_var, params, &noise);
    let zero = tape.scale(patch_var, 0.0);
    let zero_canvas = tape.sparse_linear(
        zero,
        Arc::new(SparseMap { entries: vec![], out_shape: vec![h, w, 3] }),
    );
    let mut base = tape.add_const(zero_canvas, &patch::to_dyn(&scene.pixels));
    for ann in &scene.annotations {
        let Some(spec) = plan_placement(ann.bbox, patch_size, params, rng) else {
            continue;
        };
        let Ok(rm) = build_render_map(patch_size, &spec, (h, w)) else {
            continue;
        };
        let layer = tape.sparse_linear(adjusted, rm.map.clone());
        base = composite_over_var(tape, base, layer, &rm.mask);
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::Annotation;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn photometric_identity_and_hand_values() {
        let p = AdversarialPatch::constant(4, [0.5; 3]);
        let id = SceneParameters::identity();
        let zero = Array3::zeros((4, 4, 3));
        assert_eq!(photometric_adjust(&p, &id, &zero).pixels, p.pixels);

        let mut params = SceneParameters::identity();
        params.contrast = 1.2;
        params.brightness = 0.1;
        let out = photometric_adjust(&p, &params, &zero);
        for v in out.pixels.iter() {
            assert_abs_diff_eq!(*v, 0.7, epsilon = 1e-12);
        }
        let bright = AdversarialPatch::constant(4, [0.9; 3]);
        let out = photometric_adjust(&bright, &params, &zero);
        assert!(out.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn plan_placement_area_and_rotation() {
        let mut r = rng(0);
        let params = SceneParameters::identity();
        let spec = plan_placement(BoxXYXY::new(0.0, 0.0, 100.0, 100.0), 10, &params, &mut r).unwrap();
        let side = spec.scale * 10.0;
        assert_abs_diff_eq!(side * side, 3000.0, epsilon = 1e-9);
        assert_abs_diff_eq!(side, 54.772255, epsilon = 1e-5);
        assert_eq!(spec.rotation_deg, 0.0);
        assert_eq!(spec.patch_center, (50.0, 50.0));
    }

    #[test]
    fn plan_placement_degenerate_guard() {
        let mut r = rng(0);
        let params = SceneParameters::identity();
        assert!(plan_placement(BoxXYXY::new(5.0, 5.0, 5.0, 9.0), 10, &params, &mut r).is_none());
        // 2x2 box at area_ratio 0.3 -> footprint 1.2 px, allowed
        assert!(plan_placement(BoxXYXY::new(0.0, 0.0, 2.0, 2.0), 4, &params, &mut r).is_some());
        // 1x1 box -> footprint 0.3 px, skipped
        assert!(plan_placement(BoxXYXY::new(0.0, 0.0, 1.0, 1.0), 4, &params, &mut r).is_none());
    }

    #[test]
    fn render_identity_warp() {
        let mut pixels = Array3::zeros((2, 2, 3));
        for (i, v) in pixels.iter_mut().enumerate() {
            *v = i as f64 / 12.0;
        }
        let patch = AdversarialPatch::new(pixels).unwrap();
        let spec = PlacementSpec {
            target_box: BoxXYXY::new(2.0, 2.0, 4.0, 4.0),
            rotation_deg: 0.0,
            patch_center: (3.0, 3.0),
            scale: 1.0,
        };
        let (layer, mask) = render(&patch, &spec, (6, 6)).unwrap();
        assert_eq!(mask.count_ones(), 4);
        for py in 0..2 {
            for px in 0..2 {
                assert_eq!(mask.values[(2 + py, 2 + px)], 1.0);
                for c in 0..3 {
                    assert_abs_diff_eq!(
                        layer[(2 + py, 2 + px, c)],
                        patch.pixels[(py, px, c)],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn render_rotation_90_permutes_pixels() {
        let mut pixels = Array3::zeros((2, 2, 3));
        for (i, v) in pixels.iter_mut().enumerate() {
            *v = (i + 1) as f64 / 13.0;
        }
        let patch = AdversarialPatch::new(pixels).unwrap();
        let spec = PlacementSpec {
            target_box: BoxXYXY::new(2.0, 2.0, 4.0, 4.0),
            rotation_deg: 90.0,
            patch_center: (3.0, 3.0),
            scale: 1.0,
        };
        let (layer, mask) = render(&patch, &spec, (6, 6)).unwrap();
        assert_eq!(mask.count_ones(), 4);
        // exact 90-degree index permutation oracle for the inverse map
        let expect = [((2, 2), (1, 0)), ((2, 3), (0, 0)), ((3, 2), (1, 1)), ((3, 3), (0, 1))];
        for ((oy, ox), (py, px)) in expect {
            for c in 0..3 {
                assert_abs_diff_eq!(
                    layer[(oy, ox, c)],
                    patch.pixels[(py, px, c)],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn render_rejects_offcanvas_footprint() {
        let patch = AdversarialPatch::constant(4, [0.5; 3]);
        let spec = PlacementSpec {
            target_box: BoxXYXY::new(0.0, 0.0, 4.0, 4.0),
            rotation_deg: 0.0,
            patch_center: (1.0, 1.0),
            scale: 1.0,
        };
        assert!(render(&patch, &spec, (6, 6)).is_err());
    }

    #[test]
    fn mask_area_tracks_area_ratio() {
        let params = SceneParameters::identity();
        let mut r = rng(3);
        for (bw, bh, rot) in [(40.0, 30.0, 0.0), (25.0, 50.0, 17.0), (64.0, 64.0, -20.0)] {
            let bx = BoxXYXY::new(40.0, 40.0, 40.0 + bw, 40.0 + bh);
            let mut spec = plan_placement(bx, 16, &params, &mut r).unwrap();
            spec.rotation_deg = rot;
            let patch = AdversarialPatch::constant(16, [0.5; 3]);
            let (_, mask) = render(&patch, &spec, (160, 160)).unwrap();
            // the footprint area matches the target up to boundary pixels,
            // where the half-coverage threshold can swing ~1px per edge
            let target = params.area_ratio * bx.area();
            let side = target.sqrt();
            let diff = (mask.count_ones() as f64 - target).abs();
            assert!(
                diff <= 2.5 * side,
                "mask area {} vs target {target} (allowed slack {})",
                mask.count_ones(),
                2.5 * side
            );
        }
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        use crate::tape::Tape;
        let mut pix = Array3::zeros((4, 4, 3));
        let mut r = rng(5);
        for v in pix.iter_mut() {
            *v = rand::Rng::gen_range(&mut r, 0.2..0.8);
        }
        let _patch = AdversarialPatch::new(pix.clone()).unwrap();
        let spec = PlacementSpec {
            target_box: BoxXYXY::new(4.0, 4.0, 20.0, 20.0),
            rotation_deg: 33.0,
            patch_center: (12.0, 12.0),
            scale: 1.7,
        };
        let rm = build_render_map(4, &spec, (24, 24)).unwrap();
        // loss = sum(layer^2)
        let loss = |p: &Array3<f64>| {
            let flat = p.as_slice().unwrap();
            let mut out = vec![0.0; 24 * 24 * 3];
            for &(o, i, w) in &rm.map.entries {
                out[o as usize] += w * flat[i as usize];
            }
            out.iter().map(|v| v * v).sum::<f64>()
        };
        let mut tape = Tape::new();
        let v = tape.leaf(pix.clone().into_dyn());
        let layer = tape.sparse_linear(v, rm.map.clone());
        let sq = tape.mul(layer, layer);
        let s = tape.sum_all(sq);
        let g = tape.backward(s).wrt(&tape, v);
        let eps = 1e-5;
        for idx in 0..pix.len() {
            let mut hi = pix.clone();
            let mut lo = pix.clone();
            hi.as_slice_mut().unwrap()[idx] += eps;
            lo.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * eps);
            let an = g.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-3, "idx {idx}: fd {fd} vs {an}");
        }
    }

    fn toy_scene(boxes: &[BoxXYXY]) -> SceneImage {
        SceneImage {
            image_id: "scene0".into(),
            pixels: Array3::from_elem((64, 64, 3), 0.2),
            annotations: boxes
                .iter()
                .map(|b| Annotation { class_id: 0, bbox: *b })
                .collect(),
        }
    }

    #[test]
    fn attack_render_zero_boxes_is_identity() {
        let scene = toy_scene(&[]);
        let patch = AdversarialPatch::constant(8, [0.9; 3]);
        let out = attack_render(&scene, &patch, &SceneParameters::identity(), &mut rng(1));
        assert_eq!(out.pixels, scene.pixels);
    }

    #[test]
    fn attack_render_single_box_matches_manual_pipeline() {
        let bx = BoxXYXY::new(16.0, 16.0, 48.0, 48.0);
        let scene = toy_scene(&[bx]);
        let patch = AdversarialPatch::constant(8, [0.9; 3]);
        let params = SceneParameters::identity();
        let out = attack_render(&scene, &patch, &params, &mut rng(1));

        // step-by-step oracle with the same rng stream
        let mut r = rng(1);
        let noise = sample_photometric_noise(8, 0.0, &mut r);
        let adjusted = photometric_adjust(&patch, &params, &noise);
        let spec = plan_placement(bx, 8, &params, &mut r).unwrap();
        let (layer, mask) = render(&adjusted, &spec, (64, 64)).unwrap();
        let manual = patch::composite(&scene.pixels, &layer, &mask).unwrap();
        assert_eq!(out.pixels, manual);
        assert!(mask.count_ones() > 0);
    }

    #[test]
    fn attack_render_covers_every_box() {
        let b1 = BoxXYXY::new(8.0, 8.0, 28.0, 28.0);
        let b2 = BoxXYXY::new(36.0, 36.0, 56.0, 56.0);
        let scene = toy_scene(&[b1, b2]);
        let patch = AdversarialPatch::constant(8, [0.95; 3]);
        let params = SceneParameters::identity();
        let out = attack_render(&scene, &patch, &params, &mut rng(2));
        for b in [b1, b2] {
            let (cx, cy) = b.center();
            let v = out.pixels[(cy as usize, cx as usize, 0)];
            assert!(v != 0.2, "box centered at {:?} untouched", (cx, cy));
        }
        // pixels outside both boxes are bit-identical to the clean scene
        assert_eq!(out.pixels[(0, 0, 0)], 0.2);
        assert_eq!(out.pixels[(63, 63, 2)], 0.2);
    }

    #[test]
    fn attack_render_deterministic_and_matches_tape() {
        let bx = BoxXYXY::new(10.0, 12.0, 44.0, 40.0);
        let scene = toy_scene(&[bx]);
        let patch = AdversarialPatch::constant(8, [0.7, 0.4, 0.3]);
        let mut params = SceneParameters::identity();
        params.rotation_range = [-20.0, 20.0];
        params.contrast = 1.1;
        params.brightness = -0.05;
        params.noise_std = 0.02;

        let a = attack_render(&scene, &patch, &params, &mut rng(9));
        let b = attack_render(&scene, &patch, &params, &mut rng(9));
        assert_eq!(a.pixels, b.pixels);

        let mut tape = Tape::new();
        let pv = tape.leaf(patch.pixels.clone().into_dyn());
        let out = attack_render_var(&mut tape, &scene, pv, 8, &params, &mut rng(9));
        let got = patch::from_dyn(tape.value(out));
        for (x, y) in a.pixels.iter().zip(got.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let pix = Array3::from_shape_fn((4, 4, 3), |_| rand::Rng::gen_range(&mut r, 0.2..0.7));
        let mut params = SceneParameters::identity();
        params.contrast = 1.15;
        params.brightness = 0.03;
        let noise = Array3::zeros((4, 4, 3));
        let loss = |p: &Array3<f64>| {
            let adjusted = (p * params.contrast + params.brightness + &noise)
                .mapv(|v: f64| v.clamp(0.0, 1.0));
            adjusted.iter().map(|v| v * v).sum::<f64>()
        };
        let mut tape = Tape::new();
        let v = tape.leaf(pix.clone().into_dyn());
        let adj = photometric_adjust_var(&mut tape, v, &params, &noise);
        let sq = tape.mul(adj, adj);
        let s = tape.sum_all(sq);
        let g = tape.backward(s).wrt(&tape, v);
        let eps = 1e-5;
        for idx in 0..pix.len() {
            let mut hi = pix.clone();
            let mut lo = pix.clone();
            hi.as_slice_mut().unwrap()[idx] += eps;
            lo.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&hi) - loss(&lo)) / (2.0 * eps);
            let an = g.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-3);
        }
    }
}
