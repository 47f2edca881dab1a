//! Minimal reverse-mode autodiff over dynamic-dimension `f64` arrays.
//!
//! The attack pipeline needs gradients of a scalar loss with respect to the
//! perturbation field through the denoising loop, scene rendering,
//! compositing and the detector score heads. All of those stages are built
//! from the small op set below, recorded on a tape and replayed in reverse.
//!
//! Every op owns its constants; only `Var` handles flow between stages, so a
//! tape can be dropped wholesale after each optimization step.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse linear map: `out[o] += w * in[i]` for every `(o, i, w)` entry.
///
/// Affine warps and finite-difference stencils are linear in the patch
/// pixels, so they are recorded as one of these with precomputed weights.
#[derive(Debug, Clone)]
pub struct SparseMap {
    pub entries: Vec<(u32, u32, f64)>,
    pub out_shape: Vec<usize>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Multiply by a scalar.
    Scale(usize, f64),
    /// Add a scalar (gradient passes through).
    Offset(usize),
    /// Add a constant array (gradient passes through).
    AddConst(usize),
    /// Elementwise multiply by a constant array.
    MulConst(usize, Arc<ArrayD<f64>>),
    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the band.
    Clamp(usize, f64, f64),
    Sqrt(usize),
    Sigmoid(usize),
    /// Sum of all elements, producing a 0-d array.
    SumAll(usize),
    SparseLinear(usize, Arc<SparseMap>),
    /// Valid cross-correlation, input (H,W,C), kernel (O,Kh,Kw,C), output (Ho,Wo,O).
    Conv2d {
        input: usize,
        kernel: Arc<ArrayD<f64>>,
        stride: usize,
    },
    /// Extract channel `c` of an (H,W,C) array as (H,W).
    Channel(usize, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Records a computation for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value * k;
        self.push(value, Op::Scale(a.0, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value + k;
        self.push(value, Op::Offset(a.0))
    }

    pub fn add_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, Op::AddConst(a.0))
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<ArrayD<f64>>) -> Var {
        let value = &self.nodes[a.0].value * &*c;
        self.push(value, Op::MulConst(a.0, c))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a.0, lo, hi))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(value, Op::SumAll(a.0))
    }

    pub fn sparse_linear(&mut self, a: Var, map: Arc<SparseMap>) -> Var {
        let input = &self.nodes[a.0].value;
        let in_flat = input.as_slice().expect("contiguous input");
        let mut out = vec![0.0; map.out_shape.iter().product()];
        for &(o, i, w) in &map.entries {
            out[o as usize] += w * in_flat[i as usize];
        }
        let value = ArrayD::from_shape_vec(IxDyn(&map.out_shape), out).unwrap();
        self.push(value, Op::SparseLinear(a.0, map))
    }

    pub fn conv2d(&mut self, a: Var, kernel: Arc<ArrayD<f64>>, stride: usize) -> Var {
        let value = conv2d_forward(&self.nodes[a.0].value, &kernel, stride);
        self.push(value, Op::Conv2d { input: a.0, kernel, stride })
    }

    pub fn channel(&mut self, a: Var, c: usize) -> Var {
        let input = &self.nodes[a.0].value;
        let shape = input.shape();
        assert_eq!(shape.len(), 3, "channel() expects an (H,W,C) array");
        let (h, w) = (shape[0], shape[1]);
        let nc = shape[2];
        let in_flat = input.as_slice().expect("contiguous input");
        let mut out = vec![0.0; h * w];
        for p in 0..h * w {
            out[p] = in_flat[p * nc + c];
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[h, w]), out).unwrap();
        self.push(value, Op::Channel(a.0, c))
    }

    /// Runs reverse-mode accumulation from a scalar (single-element) output.
    /// Returns per-node gradients; index with [`Gradients::wrt`].
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.nodes[output.0].value.len(),
            1,
            "backward() expects a scalar output"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        let seed_shape = self.nodes[output.0].value.raw_dim();
        grads[output.0] = Some(ArrayD::from_elem(seed_shape, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::Offset(a) | Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * &**c),
                Op::Clamp(a, lo, hi) => {
                    let input = &self.nodes[*a].value;
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga).and(input).for_each(|gi, &x| {
                        if x <= *lo || x >= *hi {
                            *gi = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    // subgradient 0 at the origin keeps TV gradients finite
                    let out = &self.nodes[idx].value;
                    let mut ga = g.clone();
                    ndarray::Zip::from(&mut ga).and(out).for_each(|gi, &o| {
                        *gi = if o == 0.0 { 0.0 } else { *gi / (2.0 * o) };
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = &g * &(out * &(1.0 - out));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let scalar = g.first().copied().unwrap();
                    let shape = self.nodes[*a].value.raw_dim();
                    accumulate(&mut grads, *a, ArrayD::from_elem(shape, scalar));
                }
                Op::SparseLinear(a, map) => {
                    let g_flat = g.as_slice().expect("contiguous gradient");
                    let mut ga = vec![0.0; self.nodes[*a].value.len()];
                    for &(o, i, w) in &map.entries {
                        ga[i as usize] += w * g_flat[o as usize];
                    }
                    let shape = self.nodes[*a].value.raw_dim();
                    accumulate(&mut grads, *a, ArrayD::from_shape_vec(shape, ga).unwrap());
                }
                Op::Conv2d { input, kernel, stride } => {
                    let ga = conv2d_backward_input(
                        &g,
                        kernel,
                        *stride,
                        self.nodes[*input].value.shape(),
                    );
                    accumulate(&mut grads, *input, ga);
                }
                Op::Channel(a, c) => {
                    let shape = self.nodes[*a].value.shape().to_vec();
                    let nc = shape[2];
                    let g_flat = g.as_slice().unwrap();
                    let mut ga = vec![0.0; shape.iter().product()];
                    for (p, &gv) in g_flat.iter().enumerate() {
                        ga[p * nc + c] = gv;
                    }
                    accumulate(&mut grads, *a, ArrayD::from_shape_vec(IxDyn(&shape), ga).unwrap());
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], idx: usize, g: ArrayD<f64>) {
    match &mut grads[idx] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero array if `v` did not influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> ArrayD<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(tape.nodes[v.0].value.raw_dim()))
    }
}

fn conv2d_forward(input: &ArrayD<f64>, kernel: &ArrayD<f64>, stride: usize) -> ArrayD<f64> {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (ko, kh, kw, kc) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    assert_eq!(c, kc, "channel mismatch in conv2d");
    assert!(h >= kh && w >= kw, "conv2d input smaller than kernel");
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    let x = input.as_slice().unwrap();
    let k = kernel.as_slice().unwrap();
    let mut out = vec![0.0; ho * wo * ko];
    for oy in 0..ho {
        for ox in 0..wo {
            for oc in 0..ko {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        for ic in 0..c {
                            acc += x[(iy * w + ix) * c + ic]
                                * k[((oc * kh + ky) * kw + kx) * kc + ic];
                        }
                    }
                }
                out[(oy * wo + ox) * ko + oc] = acc;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[ho, wo, ko]), out).unwrap()
}

fn conv2d_backward_input(
    grad_out: &ArrayD<f64>,
    kernel: &ArrayD<f64>,
    stride: usize,
    in_shape: &[usize],
) -> ArrayD<f64> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ko, kh, kw, kc) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (ho, wo) = (grad_out.shape()[0], grad_out.shape()[1]);
    let g = grad_out.as_slice().unwrap();
    let k = kernel.as_slice().unwrap();
    let mut gi = vec![0.0; h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for oc in 0..ko {
                let gv = g[(oy * wo + ox) * ko + oc];
                if gv == 0.0 {
                    continue;
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        for ic in 0..c {
                            gi[(iy * w + ix) * c + ic] +=
                                gv * k[((oc * kh + ky) * kw + kx) * kc + ic];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[h, w, c]), gi).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x0`, compared against `analytic`.
    fn gradcheck<F>(x0: &ArrayD<f64>, analytic: &ArrayD<f64>, f: F, tol: f64)
    where
        F: Fn(&ArrayD<f64>) -> f64,
    {
        let eps = 1e-5;
        for idx in 0..x0.len() {
            let mut hi = x0.clone();
            let mut lo = x0.clone();
            hi.as_slice_mut().unwrap()[idx] += eps;
            lo.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "grad mismatch at {idx}: fd={fd} analytic={an}"
            );
        }
    }

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(0.05..0.95))
    }

    fn composite_loss(x: &ArrayD<f64>) -> f64 {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let a = t.scale(v, 1.3);
        let b = t.offset(a, 0.01);
        let c = t.clamp(b, 0.0, 10.0);
        let d = t.sigmoid(c);
        let e = t.mul(d, c);
        let s = t.sum_all(e);
        let out = t.sqrt(s);
        t.value(out).first().copied().unwrap()
    }

    #[test]
    fn gradcheck_elementwise_chain() {
        let x = rand_array(&[3, 4], 1);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let a = t.scale(v, 1.3);
        let b = t.offset(a, 0.01);
        let c = t.clamp(b, 0.0, 10.0);
        let d = t.sigmoid(c);
        let e = t.mul(d, c);
        let s = t.sum_all(e);
        let out = t.sqrt(s);
        let grads = t.backward(out);
        gradcheck(&x, &grads.wrt(&t, v), composite_loss, 1e-5);
    }

    #[test]
    fn gradcheck_conv2d() {
        let x = rand_array(&[6, 6, 2], 2);
        let kernel = Arc::new(rand_array(&[3, 2, 2, 2], 3));
        let f = {
            let kernel = kernel.clone();
            move |x: &ArrayD<f64>| {
                let mut t = Tape::new();
                let v = t.leaf(x.clone());
                let c = t.conv2d(v, kernel.clone(), 2);
                let sq = t.mul(c, c);
                let s = t.sum_all(sq);
                t.value(s).first().copied().unwrap()
            }
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let c = t.conv2d(v, kernel.clone(), 2);
        let sq = t.mul(c, c);
        let s = t.sum_all(sq);
        let grads = t.backward(s);
        gradcheck(&x, &grads.wrt(&t, v), f, 1e-5);
    }

    #[test]
    fn gradcheck_sparse_linear_and_channel() {
        let x = rand_array(&[2, 2, 3], 4);
        let map = Arc::new(SparseMap {
            entries: vec![(0, 0, 0.5), (0, 3, 0.5), (1, 1, 1.0), (2, 11, -2.0), (3, 7, 1.5)],
            out_shape: vec![2, 2, 1],
        });
        let f = {
            let map = map.clone();
            move |x: &ArrayD<f64>| {
                let mut t = Tape::new();
                let v = t.leaf(x.clone());
                let ch = t.channel(v, 1);
                let chs = t.sum_all(ch);
                let l = t.sparse_linear(v, map.clone());
                let sq = t.mul(l, l);
                let s = t.sum_all(sq);
                let tot = t.add(s, chs);
                t.value(tot).first().copied().unwrap()
            }
        };
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let ch = t.channel(v, 1);
        let chs = t.sum_all(ch);
        let l = t.sparse_linear(v, map.clone());
        let sq = t.mul(l, l);
        let s = t.sum_all(sq);
        let tot = t.add(s, chs);
        let grads = t.backward(tot);
        gradcheck(&x, &grads.wrt(&t, v), f, 1e-5);
    }

    #[test]
    fn clamp_blocks_gradient_outside_band() {
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![-0.5, 0.5, 1.5]).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x);
        let c = t.clamp(v, 0.0, 1.0);
        let s = t.sum_all(c);
        let g = t.backward(s).wrt(&t, v);
        assert_eq!(g.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let x = ArrayD::from_elem(IxDyn(&[2]), 3.0);
        let mut t = Tape::new();
        let v = t.leaf(x);
        let a = t.mul(v, v); // x^2
        let b = t.add(a, v); // x^2 + x
        let s = t.sum_all(b);
        let g = t.backward(s).wrt(&t, v);
        // d/dx (x^2 + x) = 2x + 1 = 7
        assert_eq!(g.as_slice().unwrap(), &[7.0, 7.0]);
    }

    #[test]
    fn rng_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: f64 = rng.gen_range(0.0..1.0);
        assert!((0.0..1.0).contains(&a));
    }
}
