//! PSNR / SSIM (whole-slice and ROI-masked), HU correlation, histogram
//! statistics and HU difference maps.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};
use crate::filters::{filter_valid, gaussian_kernel};
use crate::volume::HuWindow;

/// Gaussian-window SSIM settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 2.0 }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

fn check_same(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn mse(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> Result<f64> {
    check_same(pred.shape(), target.shape())?;
    let n = pred.len() as f64;
    Ok(Zip::from(&pred).and(&target).fold(0.0, |acc, &p, &t| acc + (p - t) * (p - t)) / n)
}

/// Whole-volume PSNR; `+inf` for identical inputs.
pub fn psnr(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, max_val))
}

/// Mean squared error over voxels where `mask` is set.
pub fn masked_mse(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>, mask: ArrayView3<'_, bool>) -> Result<f64> {
    check_same(pred.shape(), target.shape())?;
    check_same(pred.shape(), mask.shape())?;
    let (sum, n) = Zip::from(&pred).and(&target).and(&mask).fold((0.0, 0usize), |(s, n), &p, &t, &m| {
        if m {
            (s + (p - t) * (p - t), n + 1)
        } else {
            (s, n)
        }
    });
    if n == 0 {
        return Err(Error::Data("empty ROI mask".into()));
    }
    Ok(sum / n as f64)
}

/// Valid-mode SSIM map of one slice, (H - win + 1, W - win + 1).
pub fn ssim_map(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, p: &SsimParams) -> Result<Array2<f64>> {
    check_same(x.shape(), y.shape())?;
    let (h, w) = x.dim();
    if h < p.window || w < p.window {
        return Err(Error::Shape(format!("slice {h}x{w} smaller than the {} SSIM window", p.window)));
    }
    let k = gaussian_kernel(p.window, p.sigma);
    let mu_x = filter_valid(x, &k);
    let mu_y = filter_valid(y, &k);
    let xx = filter_valid((&x * &x).view(), &k);
    let yy = filter_valid((&y * &y).view(), &k);
    let xy = filter_valid((&x * &y).view(), &k);
    let (c1, c2) = (p.c1(), p.c2());
    let mut out = Array2::zeros(mu_x.dim());
    Zip::from(&mut out).and(&mu_x).and(&mu_y).and(&xx).and(&yy).and(&xy).for_each(|o, &mx, &my, &sxx, &syy, &sxy| {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        *o = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    });
    Ok(out)
}

pub fn ssim_slice(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, p: &SsimParams) -> Result<f64> {
    let m = ssim_map(x, y, p)?;
    Ok(m.mean().unwrap_or(f64::NAN))
}

/// Mean SSIM over windows whose centre lies inside `mask`. `None` if no
/// window centre is in the mask.
pub fn roi_ssim_slice(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
    p: &SsimParams,
) -> Result<Option<f64>> {
    check_same(x.shape(), mask.shape())?;
    let m = ssim_map(x, y, p)?;
    let r = p.window / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((i, j), &v) in m.indexed_iter() {
        if mask[[i + r, j + r]] {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// PSNR and SSIM pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

/// Slice-averaged PSNR and SSIM over `slices`, restricted to `mask` when given.
/// Slices whose mask is empty are skipped; it is an error if none remain.
pub fn slice_quality(
    pred: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    mask: Option<ArrayView3<'_, bool>>,
    slices: &[usize],
    max_val: f64,
    p: &SsimParams,
) -> Result<Quality> {
    check_same(pred.shape(), target.shape())?;
    let (mut ps, mut ss, mut n) = (0.0, 0.0, 0usize);
    for &z in slices {
        if z >= pred.dim().0 {
            return Err(Error::Shape(format!("slice {z} out of range")));
        }
        let (x, y) = (pred.index_axis(Axis(0), z), target.index_axis(Axis(0), z));
        let (psnr_z, ssim_z) = match mask {
            None => {
                let e = Zip::from(&x).and(&y).fold(0.0, |a, &p, &t| a + (p - t) * (p - t)) / x.len() as f64;
                (psnr_from_mse(e, max_val), ssim_slice(x, y, p)?)
            }
            Some(m) => {
                let mz = m.index_axis(Axis(0), z);
                let (s, c) = Zip::from(&x).and(&y).and(&mz).fold((0.0, 0usize), |(s, c), &p, &t, &k| {
                    if k {
                        (s + (p - t) * (p - t), c + 1)
                    } else {
                        (s, c)
                    }
                });
                if c == 0 {
                    continue;
                }
                let Some(ssim_z) = roi_ssim_slice(x, y, mz, p)? else { continue };
                (psnr_from_mse(s / c as f64, max_val), ssim_z)
            }
        };
        ps += psnr_z;
        ss += ssim_z;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no slice has a non-empty region of interest".into()));
    }
    Ok(Quality { psnr: ps / n as f64, ssim: ss / n as f64 })
}

/// ROI PSNR / SSIM averaged over every slice of the volume.
pub fn roi_metrics(
    pred: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    mask: ArrayView3<'_, bool>,
    max_val: f64,
) -> Result<Quality> {
    check_same(pred.shape(), mask.shape())?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::Data("empty ROI mask".into()));
    }
    let all: Vec<usize> = (0..pred.dim().0).collect();
    slice_quality(pred, target, Some(mask), &all, max_val, &SsimParams::default())
}

/// Slice subsets used by the correlation analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceSubset {
    All,
    Clean,
    Artifact,
}

impl SliceSubset {
    pub fn select(self, depth: usize, artifact_slices: &[usize]) -> Vec<usize> {
        (0..depth)
            .filter(|z| match self {
                SliceSubset::All => true,
                SliceSubset::Clean => !artifact_slices.contains(z),
                SliceSubset::Artifact => artifact_slices.contains(z),
            })
            .collect()
    }
}

/// Coefficient of determination of the OLS fit `y ~ a + b x`.
/// NaN when fewer than two points or either variable is constant.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
}

/// Voxel-wise R² of `y` regressed on `x` over body voxels of the chosen slices.
pub fn hu_correlation(
    x_hu: ArrayView3<'_, f64>,
    y_hu: ArrayView3<'_, f64>,
    body: ArrayView3<'_, bool>,
    artifact_slices: &[usize],
    subset: SliceSubset,
) -> Result<f64> {
    check_same(x_hu.shape(), y_hu.shape())?;
    check_same(x_hu.shape(), body.shape())?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for z in subset.select(x_hu.dim().0, artifact_slices) {
        let b = body.index_axis(Axis(0), z);
        Zip::from(&x_hu.index_axis(Axis(0), z)).and(&y_hu.index_axis(Axis(0), z)).and(&b).for_each(|&x, &y, &m| {
            if m {
                xs.push(x);
                ys.push(y);
            }
        });
    }
    Ok(r_squared(&xs, &ys))
}

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    /// Counts over the HU window in 256 equal bins; out-of-window values land in the end bins.
    pub bins: Vec<u64>,
}

/// Moments and histogram of `values`. Skewness is `m3 / m2^1.5`, or 0 when the
/// spread is zero.
pub fn histogram_stats(values: impl IntoIterator<Item = f64>, window: HuWindow) -> HistogramStats {
    let v: Vec<f64> = values.into_iter().collect();
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    if v.is_empty() {
        return HistogramStats { count: 0, mean: f64::NAN, std: f64::NAN, skewness: f64::NAN, bins };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let std = m2.sqrt();
    let skewness = if std == 0.0 || m2 < 1e-24 * mean.abs().max(1.0).powi(2) { 0.0 } else { m3 / m2.powf(1.5) };
    for &x in &v {
        let t = (x - window.min) / window.span() * HISTOGRAM_BINS as f64;
        bins[(t.floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    HistogramStats { count: v.len(), mean, std, skewness, bins }
}

/// Values of `vol` under `mask` on the chosen slices.
pub fn masked_values(vol: ArrayView3<'_, f64>, mask: ArrayView3<'_, bool>, slices: &[usize]) -> Vec<f64> {
    slices
        .iter()
        .flat_map(|&z| {
            vol.index_axis(Axis(0), z)
                .iter()
                .zip(mask.index_axis(Axis(0), z).iter())
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Axis-aligned in-plane box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoiBox {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

/// Upper end of the rendered HU-difference range.
pub const DIFF_MAP_MAX_HU: f64 = 250.0;

/// |pred - target| in HU inside `roi`, clipped to [0, 250].
pub fn roi_difference_map(pred_hu: ArrayView2<'_, f64>, target_hu: ArrayView2<'_, f64>, roi: RoiBox) -> Result<Array2<f64>> {
    check_same(pred_hu.shape(), target_hu.shape())?;
    let (h, w) = pred_hu.dim();
    if roi.height == 0 || roi.width == 0 || roi.y0 + roi.height > h || roi.x0 + roi.width > w {
        return Err(Error::Shape(format!("ROI {roi:?} does not fit a {h}x{w} slice")));
    }
    Ok(Array2::from_shape_fn((roi.height, roi.width), |(i, j)| {
        let (y, x) = (roi.y0 + i, roi.x0 + j);
        (pred_hu[[y, x]] - target_hu[[y, x]]).abs().min(DIFF_MAP_MAX_HU)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, ShapeBuilder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        let t = Array3::<f64>::zeros((1, 4, 4));
        let p = Array3::from_elem((1, 4, 4), 0.2);
        assert!((psnr(p.view(), t.view(), 2.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(t.view(), t.view(), 2.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_slices_have_closed_form_ssim() {
        let a = Array2::<f64>::zeros((16, 16));
        let b = Array2::<f64>::ones((16, 16));
        let p = SsimParams::default();
        let expect = p.c1() / (1.0 + p.c1());
        assert!((ssim_slice(a.view(), b.view(), &p).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 3.9984e-4).abs() < 1e-7);
        assert!((ssim_slice(b.view(), b.view(), &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_small_slice_is_rejected() {
        let a = Array2::<f64>::zeros((8, 16));
        assert!(ssim_slice(a.view(), a.view(), &SsimParams::default()).is_err());
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Array3::from_shape_fn((2, 16, 16), |_| rng.random_range(-1.0..1.0));
        let t = Array3::from_shape_fn((2, 16, 16), |_| rng.random_range(-1.0..1.0));
        let full = Array3::from_elem((2, 16, 16), true);
        let q = roi_metrics(p.view(), t.view(), full.view(), 2.0).unwrap();
        let u = slice_quality(p.view(), t.view(), None, &[0, 1], 2.0, &SsimParams::default()).unwrap();
        assert!((q.psnr - u.psnr).abs() < 1e-12 && (q.ssim - u.ssim).abs() < 1e-12);
    }

    #[test]
    fn errors_outside_mask_are_invisible() {
        let t = Array3::<f64>::zeros((1, 16, 16));
        let mut p = t.clone();
        let mut mask = Array3::from_elem((1, 16, 16), false);
        for y in 4..12 {
            for x in 4..12 {
                mask[[0, y, x]] = true;
            }
        }
        p[[0, 0, 0]] = 0.7;
        assert_eq!(masked_mse(p.view(), t.view(), mask.view()).unwrap(), 0.0);
        assert_eq!(roi_metrics(p.view(), t.view(), mask.view(), 2.0).unwrap().psnr, f64::INFINITY);
        let empty = Array3::from_elem((1, 16, 16), false);
        assert!(roi_metrics(p.view(), t.view(), empty.view(), 2.0).is_err());
    }

    #[test]
    fn r_squared_of_an_exact_line_is_one_and_affine_invariant() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 1.7 - 3.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 10.0).collect();
        assert!((r_squared(&xs, &ys) - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy: Vec<f64> = ys.iter().map(|y| y + rng.random_range(-5.0..5.0)).collect();
        let r = r_squared(&xs, &noisy);
        let scaled: Vec<f64> = xs.iter().map(|x| -3.0 * x + 7.0).collect();
        assert!((r - r_squared(&scaled, &noisy)).abs() < 1e-12);
        assert!(r_squared(&[1.0, 1.0], &[2.0, 3.0]).is_nan());
    }

    #[test]
    fn independent_noise_has_small_r_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..20_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..20_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(r_squared(&xs, &ys) < 0.05);
    }

    #[test]
    fn histogram_moments() {
        let win = HuWindow::new(-1024.0, 3071.0).unwrap();
        let c = histogram_stats(std::iter::repeat_n(40.0, 100), win);
        assert_eq!(c.skewness, 0.0);
        assert_eq!(c.bins.iter().sum::<u64>(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sym = histogram_stats((0..200_000).map(|_| rng.random_range(-500.0..500.0)), win);
        assert!(sym.skewness.abs() < 0.05);
        let right = histogram_stats((0..1000).map(|i| if i < 990 { 0.0 } else { 3000.0 }), win);
        assert!(right.skewness > 1.0);
        let bin = |hu: f64| ((hu + 1024.0) / win.span() * HISTOGRAM_BINS as f64) as usize;
        assert_eq!((right.bins[bin(0.0)], right.bins[bin(3000.0)]), (990, 10));
    }

    #[test]
    fn difference_map_clips() {
        let t = Array2::<f64>::zeros((8, 8).f());
        let p300 = Array2::from_elem((8, 8), 300.0);
        let p100 = Array2::from_elem((8, 8), -100.0);
        let roi = RoiBox { y0: 2, x0: 1, height: 3, width: 4 };
        assert!(roi_difference_map(t.view(), t.view(), roi).unwrap().iter().all(|&v| v == 0.0));
        assert!(roi_difference_map(p300.view(), t.view(), roi).unwrap().iter().all(|&v| v == 250.0));
        assert!(roi_difference_map(p100.view(), t.view(), roi).unwrap().iter().all(|&v| v == 100.0));
        assert!(roi_difference_map(t.view(), t.view(), RoiBox { y0: 6, ..roi }).is_err());
    }
}
