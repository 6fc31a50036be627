//! Orthonormal single-level 2-D Haar transform.
//!
//! For a 2×2 block `[[a, b], [c, d]]` the bands are
//! `ll = (a+b+c+d)/2`, `lh = (a+b-c-d)/2` (row difference, vertical detail),
//! `hl = (a-b+c-d)/2` (column difference, horizontal detail) and
//! `hh = (a-b-c+d)/2`.

use h3d_tensor::{Float, Graph, Tensor, Var};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Band order used by the stacked tensor layout.
pub const BANDS: [&str; 4] = ["ll", "lh", "hl", "hh"];

#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Array2<f64>,
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
}

impl SubbandSet {
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh].iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

#[inline]
fn analysis(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
    [(a + b + c + d) * 0.5, (a + b - c - d) * 0.5, (a - b + c - d) * 0.5, (a - b - c + d) * 0.5]
}

// The 4×4 analysis matrix is symmetric and orthogonal, so synthesis uses the same formula.
#[inline]
fn synthesis(ll: f64, lh: f64, hl: f64, hh: f64) -> [f64; 4] {
    analysis(ll, lh, hl, hh)
}

pub fn haar_dwt2(x: &Array2<f64>) -> Result<SubbandSet> {
    let (h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("Haar transform needs even dims, got {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut bands = [(); 4].map(|_| Array2::zeros((h2, w2)));
    for i in 0..h2 {
        for j in 0..w2 {
            let r = analysis(x[[2 * i, 2 * j]], x[[2 * i, 2 * j + 1]], x[[2 * i + 1, 2 * j]], x[[2 * i + 1, 2 * j + 1]]);
            for (b, v) in bands.iter_mut().zip(r) {
                b[[i, j]] = v;
            }
        }
    }
    let [ll, lh, hl, hh] = bands;
    Ok(SubbandSet { ll, lh, hl, hh })
}

pub fn haar_idwt2(b: &SubbandSet) -> Result<Array2<f64>> {
    let dim = b.ll.dim();
    if [b.lh.dim(), b.hl.dim(), b.hh.dim()].iter().any(|&d| d != dim) {
        return Err(Error::Shape("sub-bands differ in shape".into()));
    }
    let (h2, w2) = dim;
    let mut x = Array2::zeros((2 * h2, 2 * w2));
    for i in 0..h2 {
        for j in 0..w2 {
            let [a, bb, c, d] = synthesis(b.ll[[i, j]], b.lh[[i, j]], b.hl[[i, j]], b.hh[[i, j]]);
            x[[2 * i, 2 * j]] = a;
            x[[2 * i, 2 * j + 1]] = bb;
            x[[2 * i + 1, 2 * j]] = c;
            x[[2 * i + 1, 2 * j + 1]] = d;
        }
    }
    Ok(x)
}

/// (B, C, D, H, W) → (B, 4C, D, H/2, W/2); channel `4c + k` holds band `k` of channel `c`.
fn dwt_tensor<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (h2, w2) = (h / 2, w / 2);
    let half = T::of(0.5);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    let plane = h2 * w2;
    for bc in 0..b * c {
        for z in 0..d {
            let src = &xd[(bc * d + z) * h * w..][..h * w];
            let dst_base = |k: usize| ((bc * 4 + k) * d + z) * plane;
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = src[2 * i * w + 2 * j];
                    let bb = src[2 * i * w + 2 * j + 1];
                    let cc = src[(2 * i + 1) * w + 2 * j];
                    let dd = src[(2 * i + 1) * w + 2 * j + 1];
                    let o = i * w2 + j;
                    out[dst_base(0) + o] = (a + bb + cc + dd) * half;
                    out[dst_base(1) + o] = (a + bb - cc - dd) * half;
                    out[dst_base(2) + o] = (a - bb + cc - dd) * half;
                    out[dst_base(3) + o] = (a - bb - cc + dd) * half;
                }
            }
        }
    }
    Tensor::from_vec(&[b, 4 * c, d, h2, w2], out)
}

/// Inverse of [`dwt_tensor`].
fn idwt_tensor<T: Float>(y: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let (b, c4, d, h2, w2) = (s[0], s[1], s[2], s[3], s[4]);
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let half = T::of(0.5);
    let yd = y.data();
    let mut out = vec![T::zero(); y.numel()];
    let plane = h2 * w2;
    for bc in 0..b * c {
        for z in 0..d {
            let band = |k: usize| &yd[((bc * 4 + k) * d + z) * plane..][..plane];
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            let dst = &mut out[(bc * d + z) * h * w..][..h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = i * w2 + j;
                    let (p, q, r, t) = (ll[o], lh[o], hl[o], hh[o]);
                    dst[2 * i * w + 2 * j] = (p + q + r + t) * half;
                    dst[2 * i * w + 2 * j + 1] = (p + q - r - t) * half;
                    dst[(2 * i + 1) * w + 2 * j] = (p - q + r - t) * half;
                    dst[(2 * i + 1) * w + 2 * j + 1] = (p - q - r + t) * half;
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, d, h, w], out)
}

fn check_even<T: Float>(g: &Graph<'_, T>, x: Var) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 5 || s[3] % 2 != 0 || s[4] % 2 != 0 {
        return Err(Error::Shape(format!("slice-wise Haar needs (B,C,D,H,W) with even H, W; got {s:?}")));
    }
    Ok(())
}

/// Slice-wise Haar analysis as a differentiable graph node. Because the
/// transform is orthogonal its adjoint is the synthesis step.
pub fn dwt<T: Float>(g: &Graph<'_, T>, x: Var) -> Result<Var> {
    check_even(g, x)?;
    let value = dwt_tensor(&g.value(x));
    Ok(g.custom(&[x], value, |c| vec![Some(idwt_tensor(c.grad))]))
}

/// Slice-wise Haar synthesis; input channels must be a multiple of 4.
pub fn idwt<T: Float>(g: &Graph<'_, T>, bands: Var) -> Result<Var> {
    let s = g.shape(bands);
    if s.len() != 5 || s[1] % 4 != 0 {
        return Err(Error::Shape(format!("Haar synthesis needs 4k channels, got {s:?}")));
    }
    let value = idwt_tensor(&g.value(bands));
    Ok(g.custom(&[bands], value, |c| vec![Some(dwt_tensor(c.grad))]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_example() {
        let x = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = haar_dwt2(&x).unwrap();
        assert_eq!((b.ll[[0, 0]], b.lh[[0, 0]], b.hl[[0, 0]], b.hh[[0, 0]]), (5.0, -2.0, -1.0, 0.0));
        assert_eq!(haar_idwt2(&b).unwrap(), x);
    }

    #[test]
    fn constant_slice_only_has_low_band() {
        let b = haar_dwt2(&Array2::from_elem((6, 4), 0.5)).unwrap();
        assert!(b.ll.iter().all(|&v| v == 1.0));
        assert!(b.lh.iter().chain(&b.hl).chain(&b.hh).all(|&v| v == 0.0));
        let z = Array2::zeros((3, 3));
        let c = SubbandSet { ll: Array2::from_elem((3, 3), 2.0 * 1.25), lh: z.clone(), hl: z.clone(), hh: z };
        assert!(haar_idwt2(&c).unwrap().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn odd_dims_and_mismatched_bands_fail() {
        assert!(haar_dwt2(&Array2::zeros((3, 4))).is_err());
        let mut b = haar_dwt2(&Array2::zeros((4, 4))).unwrap();
        b.hh = Array2::zeros((1, 2));
        assert!(haar_idwt2(&b).is_err());
    }

    #[test]
    fn tensor_layout_matches_array_transform() {
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i * 7 + j * 3) as f64 * 0.1 - 1.0);
        let t = Tensor::<f64>::from_vec(&[1, 1, 1, 4, 6], x.iter().copied().collect());
        let y = dwt_tensor(&t);
        let b = haar_dwt2(&x).unwrap();
        for (k, band) in [&b.ll, &b.lh, &b.hl, &b.hh].iter().enumerate() {
            assert_eq!(&y.data()[k * 6..(k + 1) * 6], band.as_slice().unwrap());
        }
        for (p, q) in idwt_tensor(&y).data().iter().zip(t.data()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-14);
        }
    }

    #[test]
    fn graph_gradient_is_the_adjoint() {
        // <dwt(x), v> has gradient idwt(v) w.r.t. x
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.leaf(Tensor::from_vec(&[1, 2, 3, 4, 4], data));
        let y = dwt(&g, x).unwrap();
        let vdata: Vec<f64> = (0..2 * 4 * 3 * 4).map(|i| (i as f64 * 0.11).cos()).collect();
        let v = Tensor::from_vec(&[1, 8, 3, 2, 2], vdata);
        let loss = g.sum(g.mul(y, g.input(v.clone())));
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap(), &idwt_tensor(&v));
    }

    proptest! {
        #[test]
        fn roundtrip_and_parseval(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array2::from_shape_fn((2 * h, 2 * w), |_| rng.random_range(-1.0..1.0));
            let b = haar_dwt2(&x).unwrap();
            let e = x.iter().map(|v| v * v).sum::<f64>();
            prop_assert!((b.energy() - e).abs() <= 1e-5 * e.max(1e-12));
            let back = haar_idwt2(&b).unwrap();
            for (p, q) in back.iter().zip(x.iter()) {
                assert_abs_diff_eq!(p, q, epsilon = 1e-6);
            }
        }
    }
}
