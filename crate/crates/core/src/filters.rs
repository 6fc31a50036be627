//! Small separable filters on 2-D slices.

use ndarray::{Array2, ArrayView2};

/// Normalised 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1, "kernel size must be odd");
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Same-size separable blur with clamp-to-edge borders.
pub fn blur_same(x: ArrayView2<'_, f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            tmp[[y, xx]] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| c * x[[y, clamp(xx as isize + k as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            out[[y, xx]] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| c * tmp[[clamp(y as isize + k as isize - r, h), xx]])
                .sum();
        }
    }
    out
}

/// Valid-mode separable filtering: output is (H - k + 1, W - k + 1).
pub fn filter_valid(x: ArrayView2<'_, f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = kernel.len();
    assert!(h >= k && w >= k, "slice {h}x{w} smaller than window {k}");
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for xx in 0..ow {
            tmp[[y, xx]] = (0..k).map(|j| kernel[j] * x[[y, xx + j]]).sum();
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for xx in 0..ow {
            out[[y, xx]] = (0..k).map(|j| kernel[j] * tmp[[y + j, xx]]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((k[0] - k[10]).abs() < 1e-15);
    }

    #[test]
    fn blurring_a_constant_is_a_noop() {
        let x = Array2::from_elem((6, 8), 3.25);
        let b = blur_same(x.view(), &gaussian_kernel(5, 1.0));
        assert!(b.iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn valid_filter_matches_direct_double_sum() {
        let x = Array2::from_shape_fn((7, 9), |(y, x)| ((y * 31 + x * 17) % 11) as f64);
        let k = gaussian_kernel(3, 0.8);
        let f = filter_valid(x.view(), &k);
        assert_eq!(f.dim(), (5, 7));
        let direct: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| k[i] * k[j] * x[[2 + i, 3 + j]]).sum();
        assert!((f[[2, 3]] - direct).abs() < 1e-12);
    }
}
