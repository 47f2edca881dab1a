//! CIE L*a*b* conversion (sRGB, D65 white) and the CIEDE2000 color
//! difference, plus dominant-color extraction by k-means in Lab space.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CIE L*a*b* color, D65 reference white.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub fn new(l: f64, a: f64, b: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&l) {
            return Err(Error::invalid(format!("L must lie in [0,100], got {l}")));
        }
        Ok(Self { l, a, b })
    }
}

const D65: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB in [0,1] to Lab (D65, 2-degree observer).
pub fn srgb_to_lab(rgb: [f64; 3]) -> LabColor {
    let r = srgb_linearize(rgb[0].clamp(0.0, 1.0));
    let g = srgb_linearize(rgb[1].clamp(0.0, 1.0));
    let b = srgb_linearize(rgb[2].clamp(0.0, 1.0));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;

    let f = |t: f64| {
        const DELTA3: f64 = 216.0 / 24389.0;
        if t > DELTA3 {
            t.cbrt()
        } else {
            t * (24389.0 / 27.0) / 116.0 + 16.0 / 116.0
        }
    };
    let fx = f(x / D65[0]);
    let fy = f(y / D65[1]);
    let fz = f(z / D65[2]);
    LabColor {
        l: (116.0 * fy - 16.0).clamp(0.0, 100.0),
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// CIEDE2000 color difference. Symmetric, zero iff inputs are identical.
pub fn delta_e00(c1: LabColor, c2: LabColor) -> f64 {
    let (l1, a1, b1) = (c1.l, c1.a, c1.b);
    let (l2, a2, b2) = (c2.l, c2.a, c2.b);

    let chroma1 = (a1 * a1 + b1 * b1).sqrt();
    let chroma2 = (a2 * a2 + b2 * b2).sqrt();
    let c_bar = (chroma1 + chroma2) / 2.0;
    let c_bar7 = c_bar.powi(7);
    const POW25_7: f64 = 6103515625.0; // 25^7
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + POW25_7)).sqrt());

    let a1p = (1.0 + g) * a1;
    let a2p = (1.0 + g) * a2;
    let c1p = (a1p * a1p + b1 * b1).sqrt();
    let c2p = (a2p * a2p + b2 * b2).sqrt();

    let hue = |a: f64, b: f64| -> f64 {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            let h = b.atan2(a).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(a1p, b1);
    let h2p = hue(a2p, b2);

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let dh = if c1p * c2p == 0.0 {
        0.0
    } else {
        let diff = h2p - h1p;
        if diff.abs() <= 180.0 {
            diff
        } else if diff > 180.0 {
            diff - 360.0
        } else {
            diff + 360.0
        }
    };
    let dbig_h = 2.0 * (c1p * c2p).sqrt() * (dh / 2.0).to_radians().sin();

    let l_bar = (l1 + l2) / 2.0;
    let c_barp = (c1p + c2p) / 2.0;
    let h_bar = if c1p * c2p == 0.0 {
        h1p + h2p
    } else {
        let sum = h1p + h2p;
        if (h1p - h2p).abs() <= 180.0 {
            sum / 2.0
        } else if sum < 360.0 {
            (sum + 360.0) / 2.0
        } else {
            (sum - 360.0) / 2.0
        }
    };

    let t = 1.0 - 0.17 * (h_bar - 30.0).to_radians().cos()
        + 0.24 * (2.0 * h_bar).to_radians().cos()
        + 0.32 * (3.0 * h_bar + 6.0).to_radians().cos()
        - 0.20 * (4.0 * h_bar - 63.0).to_radians().cos();

    let d_theta = 30.0 * (-((h_bar - 275.0) / 25.0).powi(2)).exp();
    let c_barp7 = c_barp.powi(7);
    let r_c = 2.0 * (c_barp7 / (c_barp7 + POW25_7)).sqrt();
    let lm50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * lm50 / (20.0 + lm50).sqrt();
    let s_c = 1.0 + 0.045 * c_barp;
    let s_h = 1.0 + 0.015 * c_barp * t;
    let r_t = -(2.0 * d_theta).to_radians().sin() * r_c;

    let tl = dl / s_l;
    let tc = dc / s_c;
    let th = dbig_h / s_h;
    (tl * tl + tc * tc + th * th + r_t * tc * th).sqrt()
}

/// Largest-cluster centroid of the image's pixels in Lab space.
///
/// k-means with k=3 and 20 Lloyd iterations; centroids start at quantiles of
/// the lexicographically sorted pixel list, so the result depends only on
/// the pixel multiset, never on pixel order.
pub fn dominant_color(image: &Array3<f64>) -> Result<LabColor> {
    let (h, w, c) = image.dim();
    if h == 0 || w == 0 || c != 3 {
        return Err(Error::invalid("dominant_color needs a non-empty RGB image"));
    }
    let mut pixels: Vec<[f64; 3]> = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let lab = srgb_to_lab([image[(y, x, 0)], image[(y, x, 1)], image[(y, x, 2)]]);
            pixels.push([lab.l, lab.a, lab.b]);
        }
    }
    pixels.sort_by(|p, q| p.partial_cmp(q).unwrap());

    let k = 3.min(pixels.len());
    let n = pixels.len();
    let mut centroids: Vec<[f64; 3]> = (0..k)
        .map(|i| pixels[(2 * i + 1) * n / (2 * k)].to_owned())
        .collect();

    let dist2 = |p: &[f64; 3], q: &[f64; 3]| {
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
    };
    let mut counts = vec![0usize; k];
    for _ in 0..20 {
        let mut sums = vec![[0.0f64; 3]; k];
        counts = vec![0usize; k];
        for p in &pixels {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for (ci, cen) in centroids.iter().enumerate() {
                let d = dist2(p, cen);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            counts[best] += 1;
            for j in 0..3 {
                sums[best][j] += p[j];
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                for j in 0..3 {
                    centroids[ci][j] = sums[ci][j] / counts[ci] as f64;
                }
            }
        }
    }
    let best = (0..k).max_by_key(|&ci| counts[ci]).unwrap();
    let c = centroids[best];
    Ok(LabColor { l: c[0].clamp(0.0, 100.0), a: c[1], b: c[2] })
}

/// The published 34-pair CIEDE2000 verification dataset:
/// `(L1, a1, b1, L2, a2, b2, expected dE00)`.
pub const CIEDE2000_TEST_VECTORS: [(f64, f64, f64, f64, f64, f64, f64); 34] = [
    (50.0000, 2.6772, -79.7751, 50.0000, 0.0000, -82.7485, 2.0425),
    (50.0000, 3.1571, -77.2803, 50.0000, 0.0000, -82.7485, 2.8615),
    (50.0000, 2.8361, -74.0200, 50.0000, 0.0000, -82.7485, 3.4412),
    (50.0000, -1.3802, -84.2814, 50.0000, 0.0000, -82.7485, 1.0000),
    (50.0000, -1.1848, -84.8006, 50.0000, 0.0000, -82.7485, 1.0000),
    (50.0000, -0.9009, -85.5211, 50.0000, 0.0000, -82.7485, 1.0000),
    (50.0000, 0.0000, 0.0000, 50.0000, -1.0000, 2.0000, 2.3669),
    (50.0000, -1.0000, 2.0000, 50.0000, 0.0000, 0.0000, 2.3669),
    (50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0009, 7.1792),
    (50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0010, 7.1792),
    (50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0011, 7.2195),
    (50.0000, 2.4900, -0.0010, 50.0000, -2.4900, 0.0012, 7.2195),
    (50.0000, -0.0010, 2.4900, 50.0000, 0.0009, -2.4900, 4.8045),
    (50.0000, -0.0010, 2.4900, 50.0000, 0.0010, -2.4900, 4.8045),
    (50.0000, -0.0010, 2.4900, 50.0000, 0.0011, -2.4900, 4.7461),
    (50.0000, 2.5000, 0.0000, 50.0000, 0.0000, -2.5000, 4.3065),
    (50.0000, 2.5000, 0.0000, 73.0000, 25.0000, -18.0000, 27.1492),
    (50.0000, 2.5000, 0.0000, 61.0000, -5.0000, 29.0000, 22.8977),
    (50.0000, 2.5000, 0.0000, 56.0000, -27.0000, -3.0000, 31.9030),
    (50.0000, 2.5000, 0.0000, 58.0000, 24.0000, 15.0000, 19.4535),
    (50.0000, 2.5000, 0.0000, 50.0000, 3.1736, 0.5854, 1.0000),
    (50.0000, 2.5000, 0.0000, 50.0000, 3.2972, 0.0000, 1.0000),
    (50.0000, 2.5000, 0.0000, 50.0000, 1.8634, 0.5757, 1.0000),
    (50.0000, 2.5000, 0.0000, 50.0000, 3.2592, 0.3350, 1.0000),
    (60.2574, -34.0099, 36.2677, 60.4626, -34.1751, 39.4387, 1.2644),
    (63.0109, -31.0961, -5.8663, 62.8187, -29.7946, -4.0864, 1.2630),
    (61.2901, 3.7196, -5.3901, 61.4292, 2.2480, -4.9620, 1.8731),
    (35.0831, -44.1164, 3.7933, 35.0232, -40.0716, 1.5901, 1.8645),
    (22.7233, 20.0904, -46.6940, 23.0331, 14.9730, -42.5619, 2.0373),
    (36.4612, 47.8580, 18.3852, 36.2715, 50.5065, 21.2231, 1.4146),
    (90.8027, -2.0831, 1.4410, 91.1528, -1.6435, 0.0447, 1.4441),
    (90.9257, -0.5406, -0.9208, 88.6381, -0.8985, -0.7239, 1.5381),
    (6.7747, -0.2908, -2.4247, 5.8714, -0.0985, -2.2286, 0.6377),
    (2.0776, 0.0795, -1.1350, 0.9033, -0.0636, -0.5514, 0.9082),
];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn all_published_pairs_match() {
        for (i, &(l1, a1, b1, l2, a2, b2, want)) in CIEDE2000_TEST_VECTORS.iter().enumerate() {
            let got = delta_e00(LabColor { l: l1, a: a1, b: b1 }, LabColor { l: l2, a: a2, b: b2 });
            assert!(
                (got - want).abs() < 1e-4,
                "pair {}: got {got}, want {want}",
                i + 1
            );
        }
    }

    #[test]
    fn identical_colors_are_zero() {
        let c = LabColor { l: 42.0, a: 12.5, b: -8.0 };
        assert_eq!(delta_e00(c, c), 0.0);
    }

    #[test]
    fn srgb_to_lab_known_anchors() {
        let white = srgb_to_lab([1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(white.l, 100.0, epsilon = 1e-3);
        assert_abs_diff_eq!(white.a, 0.0, epsilon = 1e-2);
        assert_abs_diff_eq!(white.b, 0.0, epsilon = 1e-2);
        let black = srgb_to_lab([0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(black.l, 0.0, epsilon = 1e-6);
        let red = srgb_to_lab([1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(red.l, 53.24, epsilon = 0.05);
        assert_abs_diff_eq!(red.a, 80.09, epsilon = 0.1);
        assert_abs_diff_eq!(red.b, 67.20, epsilon = 0.1);
    }

    #[test]
    fn dominant_color_uniform_image() {
        let img = Array3::from_shape_fn((8, 8, 3), |(_, _, c)| [0.3, 0.6, 0.1][c]);
        let got = dominant_color(&img).unwrap();
        let want = srgb_to_lab([0.3, 0.6, 0.1]);
        assert_abs_diff_eq!(got.l, want.l, epsilon = 1e-9);
        assert_abs_diff_eq!(got.a, want.a, epsilon = 1e-9);
        assert_abs_diff_eq!(got.b, want.b, epsilon = 1e-9);
    }

    #[test]
    fn dominant_color_majority_cluster() {
        // 90% red / 10% blue
        let img = Array3::from_shape_fn((10, 10, 3), |(y, x, c)| {
            if y * 10 + x < 90 {
                [0.9, 0.05, 0.05][c]
            } else {
                [0.05, 0.05, 0.9][c]
            }
        });
        let got = dominant_color(&img).unwrap();
        let red = srgb_to_lab([0.9, 0.05, 0.05]);
        assert!(delta_e00(got, red) < 1.0, "expected red-ish centroid, got {got:?}");
    }

    #[test]
    fn dominant_color_is_shuffle_invariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let img = Array3::from_shape_fn((6, 6, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 11) as f64 / 11.0
        });
        let mut flat: Vec<[f64; 3]> = (0..36)
            .map(|i| [img[(i / 6, i % 6, 0)], img[(i / 6, i % 6, 1)], img[(i / 6, i % 6, 2)]])
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        flat.shuffle(&mut rng);
        let shuffled = Array3::from_shape_fn((6, 6, 3), |(y, x, c)| flat[y * 6 + x][c]);
        assert_eq!(dominant_color(&img).unwrap(), dominant_color(&shuffled).unwrap());
    }

    proptest! {
        #[test]
        fn delta_e_symmetric_and_nonnegative(
            l1 in 0.0f64..100.0, a1 in -100.0f64..100.0, b1 in -100.0f64..100.0,
            l2 in 0.0f64..100.0, a2 in -100.0f64..100.0, b2 in -100.0f64..100.0,
        ) {
            let c1 = LabColor { l: l1, a: a1, b: b1 };
            let c2 = LabColor { l: l2, a: a2, b: b2 };
            let ab = delta_e00(c1, c2);
            let ba = delta_e00(c2, c1);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
        }
    }
}
