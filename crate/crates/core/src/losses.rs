//! Training objectives: metal-weighted L1, SSIM, perceptual and the ablation
//! alternatives, per-stage supervision, deep supervision and the total loss.

use std::fmt;
use std::str::FromStr;

use h3d_tensor::{ConvGeometry, Float, Graph, Tensor, Var};
use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::filters::gaussian_kernel;
use crate::metrics::SsimParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Weight of each substitute term in variants L3, L4 and L5.
    pub extra: f64,
    pub prenet: f64,
    pub transnet: f64,
    pub deep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, ssim: 0.5, perceptual: 0.5, extra: 0.5, prenet: 1.0, transnet: 1.0, deep: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.perceptual, self.extra, self.prenet, self.transnet, self.deep];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Which terms make up the per-stage supervision loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossVariant {
    /// Weighted L1 only.
    L1,
    /// + SSIM.
    L2,
    /// + MS-SSIM.
    L3,
    /// + MSE.
    L4,
    /// + SSIM + focal frequency loss.
    L5,
    /// + SSIM + perceptual.
    #[default]
    L6,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [Self::L1, Self::L2, Self::L3, Self::L4, Self::L5, Self::L6];

    pub fn needs_perceptual(self) -> bool {
        self == Self::L6
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", *self as usize + 1)
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "l3" => Ok(Self::L3),
            "l4" => Ok(Self::L4),
            "l5" => Ok(Self::L5),
            "l6" => Ok(Self::L6),
            _ => Err(Error::Config(format!("unknown loss variant {s:?} (expected l1..l6)"))),
        }
    }
}

/// `1 + beta * dilate(hu > threshold, radius)`; dilation is an in-plane disk.
pub fn build_metal_weight_map(hu: ArrayView3<'_, f32>, threshold: f64, beta: f64, radius: usize) -> Array3<f32> {
    let (d, h, w) = hu.dim();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> =
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= r * r).collect();
    let mut out = Array3::from_elem((d, h, w), 1.0f32);
    let bump = (1.0 + beta) as f32;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if f64::from(hu[[z, y, x]]) <= threshold {
                    continue;
                }
                for &(dy, dx) in &offsets {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        out[[z, yy as usize, xx as usize]] = bump;
                    }
                }
            }
        }
    }
    out
}

fn check_same<T: Float>(g: &Graph<'_, T>, a: Var, b: Var) -> Result<Vec<usize>> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("loss inputs differ: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

/// `sum(w |pred - target|) / sum(w)`.
pub fn weighted_l1<T: Float>(g: &Graph<'_, T>, pred: Var, target: Var, weights: Var) -> Result<Var> {
    check_same(g, pred, target)?;
    check_same(g, pred, weights)?;
    let num = g.sum(g.mul(weights, g.abs(g.sub(pred, target))));
    Ok(g.div(num, g.sum(weights)))
}

pub fn l1<T: Float>(g: &Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
    check_same(g, pred, target)?;
    Ok(g.mean(g.abs(g.sub(pred, target))))
}

pub fn mse<T: Float>(g: &Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
    check_same(g, pred, target)?;
    Ok(g.mean(g.square(g.sub(pred, target))))
}

struct SsimMaps {
    /// Luminance term `(2 mu_x mu_y + C1) / (mu_x² + mu_y² + C1)`.
    luminance: Var,
    /// Contrast-structure term `(2 cov + C2) / (var_x + var_y + C2)`.
    cs: Var,
}

fn gaussian_window<T: Float>(g: &Graph<'_, T>, p: &SsimParams) -> Var {
    let k = gaussian_kernel(p.window, p.sigma);
    let w: Vec<f64> = k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect();
    g.input(Tensor::from_f64(&[1, 1, 1, p.window, p.window], &w))
}

fn ssim_maps<T: Float>(g: &Graph<'_, T>, x: Var, y: Var, p: &SsimParams) -> Result<SsimMaps> {
    let s = check_same(g, x, y)?;
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::Shape(format!("SSIM expects (B,1,D,H,W), got {s:?}")));
    }
    if s[3] < p.window || s[4] < p.window {
        return Err(Error::Shape(format!("slice {}x{} smaller than the {} SSIM window", s[3], s[4], p.window)));
    }
    let win = gaussian_window(g, p);
    let geom = ConvGeometry { kernel: [1, p.window, p.window], stride: [1, 1, 1], padding: [0, 0, 0] };
    let filt = |v: Var| g.conv3d(v, win, None, geom);
    let (mx, my) = (filt(x), filt(y));
    let (mx2, my2, mxy) = (g.square(mx), g.square(my), g.mul(mx, my));
    let vx = g.sub(filt(g.square(x)), mx2);
    let vy = g.sub(filt(g.square(y)), my2);
    let cov = g.sub(filt(g.mul(x, y)), mxy);
    let (c1, c2) = (p.c1(), p.c2());
    let luminance = g.div(g.add_scalar(g.mul_scalar(mxy, 2.0), c1), g.add_scalar(g.add(mx2, my2), c1));
    let cs = g.div(g.add_scalar(g.mul_scalar(cov, 2.0), c2), g.add_scalar(g.add(vx, vy), c2));
    Ok(SsimMaps { luminance, cs })
}

/// Mean SSIM over every valid window of every slice.
pub fn ssim<T: Float>(g: &Graph<'_, T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    let m = ssim_maps(g, x, y, p)?;
    Ok(g.mean(g.mul(m.luminance, m.cs)))
}

pub fn ssim_loss<T: Float>(g: &Graph<'_, T>, pred: Var, target: Var, p: &SsimParams) -> Result<Var> {
    Ok(g.rsub_scalar(1.0, ssim(g, pred, target, p)?))
}

/// Per-scale exponents of the three-scale MS-SSIM, normalised to sum to one.
pub const MS_SSIM_WEIGHTS: [f64; 3] = [0.0448, 0.2856, 0.3001];

/// `1 - mean(cs_1)^w_1 * mean(cs_2)^w_2 * mean(ssim_3)^w_3`, halving resolution between scales.
pub fn ms_ssim_loss<T: Float>(g: &Graph<'_, T>, pred: Var, target: Var, p: &SsimParams) -> Result<Var> {
    let total: f64 = MS_SSIM_WEIGHTS.iter().sum();
    let (mut x, mut y) = (pred, target);
    let mut acc: Option<Var> = None;
    for (j, &w) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let m = ssim_maps(g, x, y, p)?;
        let last = j + 1 == MS_SSIM_WEIGHTS.len();
        let base = if last { g.mean(g.mul(m.luminance, m.cs)) } else { g.mean(m.cs) };
        // negative similarity means are clipped so the fractional power stays real
        let term = g.powf(g.clamp_min(base, 1e-6), w / total);
        acc = Some(match acc {
            Some(a) => g.mul(a, term),
            None => term,
        });
        if !last {
            let s = g.shape(x);
            if s[3] % 2 != 0 || s[4] % 2 != 0 {
                return Err(Error::Shape(format!("MS-SSIM needs even dims at every scale, got {s:?}")));
            }
            x = g.avg_pool3d(x, [1, 2, 2]);
            y = g.avg_pool3d(y, [1, 2, 2]);
        }
    }
    Ok(g.rsub_scalar(1.0, acc.expect("three scales")))
}

fn dft_matrices(n: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (n as f64).sqrt();
    let angle = |u: usize, k: usize| 2.0 * std::f64::consts::PI * ((u * k) % n) as f64 / n as f64;
    let cos = (0..n * n).map(|i| angle(i / n, i % n).cos() * scale).collect();
    let sin = (0..n * n).map(|i| angle(i / n, i % n).sin() * scale).collect();
    (cos, sin)
}

/// Per-slice spectrum power `|DFT(pred - target)|²` with an orthonormal DFT, (B·C·D, H, W).
pub fn error_spectrum_power<T: Float>(g: &Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
    let s = check_same(g, pred, target)?;
    if s.len() != 5 {
        return Err(Error::Shape(format!("expected (B,C,D,H,W), got {s:?}")));
    }
    let (h, w) = (s[3], s[4]);
    let e = g.reshape(g.sub(pred, target), &[s[0] * s[1] * s[2], h, w]);
    let (ch, sh) = dft_matrices(h);
    let (cw, sw) = dft_matrices(w);
    let (ch, sh) = (g.input(Tensor::from_f64(&[h, h], &ch)), g.input(Tensor::from_f64(&[h, h], &sh)));
    let (cw, sw) = (g.input(Tensor::from_f64(&[w, w], &cw)), g.input(Tensor::from_f64(&[w, w], &sw)));
    // left multiplication by a shared matrix through transposes: (M X) = (Xᵀ Mᵀ)ᵀ
    let left = |m: Var, x: Var| g.permute(g.matmul_t(g.permute(x, &[0, 2, 1]), m, false, true), &[0, 2, 1]);
    let right = |x: Var, m: Var| g.matmul_t(x, m, false, true);
    let (xc, xs) = (right(e, cw), right(e, sw));
    let re = g.sub(left(ch, xc), left(sh, xs));
    let im = g.neg(g.add(left(sh, xc), left(ch, xs)));
    Ok(g.add(g.square(re), g.square(im)))
}

/// Spectrum magnitude divided by its per-slice maximum.
pub fn focal_weight<T: Float>(power: &Tensor<T>) -> Tensor<T> {
    let s = power.shape();
    let per = s[1] * s[2];
    let mut wv = Vec::with_capacity(power.numel());
    for chunk in power.data().chunks(per) {
        let mags: Vec<f64> = chunk.iter().map(|v| v.as_f64().sqrt()).collect();
        let max = mags.iter().cloned().fold(0.0, f64::max);
        wv.extend(mags.iter().map(|m| T::of(if max > 0.0 { m / max } else { 0.0 })));
    }
    Tensor::from_vec(s, wv)
}

/// `mean(weight ⊙ |DFT(pred - target)|²)` with a fixed spectral weight.
pub fn weighted_spectrum_loss<T: Float>(g: &Graph<'_, T>, pred: Var, target: Var, weight: &Tensor<T>) -> Result<Var> {
    let power = error_spectrum_power(g, pred, target)?;
    if g.shape(power) != weight.shape() {
        return Err(Error::Shape(format!("spectral weight {:?} does not match {:?}", weight.shape(), g.shape(power))));
    }
    Ok(g.mean(g.mul(g.input(weight.clone()), power)))
}

/// Focal frequency loss on each slice: spectrum error weighted by its own
/// normalised magnitude, with the weight held constant during differentiation.
pub fn focal_frequency_loss<T: Float>(g: &Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
    let power = error_spectrum_power(g, pred, target)?;
    let weight = focal_weight(&g.value(power));
    Ok(g.mean(g.mul(g.input(weight), power)))
}

/// Frozen convolutional feature extractor for the perceptual term.
///
/// Four stages of `conv(1,3,3) + ReLU`, each after the first preceded by
/// 2× in-plane average pooling, applied to the input replicated to three
/// channels. Weights enter the graph as constants so they never train.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    stages: Vec<(Tensor<f64>, Tensor<f64>)>,
    selected: Vec<usize>,
}

pub const PERCEPTUAL_WIDTHS: [usize; 4] = [16, 32, 32, 64];

impl PerceptualExtractor {
    /// Seeded He-normal weights with zero biases; the last two stages are compared.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = PERCEPTUAL_WIDTHS
            .iter()
            .map(|&cout| {
                let fan_in = cin * 9;
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                let w: Vec<f64> = (0..cout * fan_in).map(|_| dist.sample(&mut rng)).collect();
                let stage = (Tensor::from_vec(&[cout, cin, 1, 3, 3], w), Tensor::zeros(&[cout]));
                cin = cout;
                stage
            })
            .collect();
        Self { stages, selected: vec![2, 3] }
    }

    /// Plugs in externally trained weights: `(weight (out, in, 1, 3, 3), bias (out))` per stage.
    pub fn from_weights(stages: Vec<(Tensor<f64>, Tensor<f64>)>, selected: Vec<usize>) -> Result<Self> {
        let mut cin = 3;
        for (i, (w, b)) in stages.iter().enumerate() {
            let s = w.shape();
            if s.len() != 5 || s[1] != cin || s[2..] != [1, 3, 3] || b.shape() != [s[0]] {
                return Err(Error::Shape(format!("perceptual stage {i}: bad weight {s:?} / bias {:?}", b.shape())));
            }
            cin = s[0];
        }
        if selected.is_empty() || selected.iter().any(|&i| i >= stages.len()) {
            return Err(Error::Config("perceptual stage selection out of range".into()));
        }
        Ok(Self { stages, selected })
    }

    pub fn features<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Vec<Var> {
        let geom = ConvGeometry::same([1, 3, 3]);
        let mut h = g.concat(&[x, x, x], 1);
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, (w, b)) in self.stages.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool3d(h, [1, 2, 2]);
            }
            h = g.relu(g.conv3d(h, g.input(w.cast()), Some(g.input(b.cast())), geom));
            out.push(h);
        }
        out
    }

    /// Mean over the selected stages of the mean squared feature difference.
    pub fn loss<T: Float>(&self, g: &Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
        let s = check_same(g, pred, target)?;
        let factor = 1 << (self.stages.len() - 1);
        if s.len() != 5 || s[1] != 1 || s[3] % factor != 0 || s[4] % factor != 0 {
            return Err(Error::Shape(format!("perceptual loss needs (B,1,D,H,W) with H, W divisible by {factor}; got {s:?}")));
        }
        let (fp, ft) = (self.features(g, pred), self.features(g, target));
        let terms: Vec<Var> = self.selected.iter().map(|&i| g.mean(g.square(g.sub(fp[i], ft[i])))).collect();
        let sum = terms[1..].iter().fold(terms[0], |a, &t| g.add(a, t));
        Ok(g.mul_scalar(sum, 1.0 / terms.len() as f64))
    }
}

/// Everything a supervision loss needs besides the tensors themselves.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub variant: LossVariant,
    pub weights: LossWeights,
    pub ssim: SsimParams,
    pub perceptual: Option<PerceptualExtractor>,
    /// Include the final head in the deep-supervision sum.
    pub deep_includes_final: bool,
}

impl LossContext {
    pub fn new(variant: LossVariant, weights: LossWeights, perceptual_seed: u64) -> Self {
        Self {
            variant,
            weights,
            ssim: SsimParams::default(),
            perceptual: variant.needs_perceptual().then(|| PerceptualExtractor::random(perceptual_seed)),
            deep_includes_final: false,
        }
    }
}

/// Unweighted terms of one supervision loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct SupervisionTerms {
    pub l1: Option<Var>,
    pub ssim: Option<Var>,
    pub ms_ssim: Option<Var>,
    pub mse: Option<Var>,
    pub ffl: Option<Var>,
    pub perceptual: Option<Var>,
}

pub fn supervision_terms<T: Float>(g: &Graph<'_, T>, ctx: &LossContext, pred: Var, target: Var, weights: Var) -> Result<SupervisionTerms> {
    use LossVariant::*;
    let v = ctx.variant;
    let mut t = SupervisionTerms { l1: Some(weighted_l1(g, pred, target, weights)?), ..Default::default() };
    if matches!(v, L2 | L5 | L6) {
        t.ssim = Some(ssim_loss(g, pred, target, &ctx.ssim)?);
    }
    if v == L3 {
        t.ms_ssim = Some(ms_ssim_loss(g, pred, target, &ctx.ssim)?);
    }
    if v == L4 {
        t.mse = Some(mse(g, pred, target)?);
    }
    if v == L5 {
        t.ffl = Some(focal_frequency_loss(g, pred, target)?);
    }
    if v == L6 {
        let ext = ctx.perceptual.as_ref().ok_or_else(|| Error::Config("variant l6 needs a perceptual extractor".into()))?;
        t.perceptual = Some(ext.loss(g, pred, target)?);
    }
    Ok(t)
}

/// Weighted sum of the present terms.
pub fn combine_terms<T: Float>(g: &Graph<'_, T>, terms: &SupervisionTerms, w: &LossWeights) -> Var {
    let parts = [
        (terms.l1, w.l1),
        (terms.ssim, w.ssim),
        (terms.ms_ssim, w.extra),
        (terms.mse, w.extra),
        (terms.ffl, w.extra),
        (terms.perceptual, w.perceptual),
    ];
    parts
        .iter()
        .filter_map(|&(v, k)| v.map(|v| g.mul_scalar(v, k)))
        .reduce(|a, b| g.add(a, b))
        .expect("weighted L1 is always present")
}

/// `λ1 L1_w + λs L_SSIM + λp L_Percep` (or the variant's substitutes).
pub fn supervision_loss<T: Float>(g: &Graph<'_, T>, ctx: &LossContext, pred: Var, target: Var, weights: Var) -> Result<Var> {
    let terms = supervision_terms(g, ctx, pred, target, weights)?;
    Ok(combine_terms(g, &terms, &ctx.weights))
}

/// `Σ_i L1(V_i, avgpool(target))` over the auxiliary heads, plus the final head when asked.
pub fn deep_supervision_loss<T: Float>(g: &Graph<'_, T>, preds: &[Var], target: Var, include_final: bool) -> Result<Var> {
    let ts = g.shape(target);
    let n = if include_final { preds.len() } else { preds.len().saturating_sub(1) };
    let mut acc: Option<Var> = None;
    for &p in &preds[..n] {
        let ps = g.shape(p);
        if ps.len() != 5 || ps[3] == 0 || ts[3] % ps[3] != 0 || ts[4] % ps[4] != 0 || ts[3] / ps[3] != ts[4] / ps[4] {
            return Err(Error::Shape(format!("head {ps:?} is not an in-plane downscale of {ts:?}")));
        }
        let f = ts[3] / ps[3];
        let pooled = if f == 1 { target } else { g.avg_pool3d(target, [1, f, f]) };
        let term = l1(g, p, pooled)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| g.input(Tensor::scalar(T::zero()))))
}

/// Graph nodes of the total objective and its stage terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub prenet: Option<Var>,
    pub transnet: Var,
    pub deep: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub prenet: f64,
    pub transnet: f64,
    pub deep: f64,
}

impl LossTerms {
    pub fn values<T: Float>(&self, g: &Graph<'_, T>) -> LossBreakdown {
        LossBreakdown {
            total: g.item(self.total).as_f64(),
            prenet: self.prenet.map_or(0.0, |v| g.item(v).as_f64()),
            transnet: g.item(self.transnet).as_f64(),
            deep: g.item(self.deep).as_f64(),
        }
    }
}

/// Inputs of the total objective.
pub struct TotalLossInputs<'a> {
    /// Stage-1 output and its pseudo-clean target; absent without a PreNet.
    pub stage1: Option<(Var, Var)>,
    /// Stage-2 predictions, coarse to fine.
    pub stage2: &'a [Var],
    pub mvct: Var,
    pub weights: Var,
}

/// `λa L_Sup^Pre + λb L_Sup^Trans + λc L_DeepSup`.
pub fn total_loss<T: Float>(g: &Graph<'_, T>, ctx: &LossContext, inp: &TotalLossInputs<'_>) -> Result<LossTerms> {
    let w = &ctx.weights;
    let last = *inp.stage2.last().ok_or_else(|| Error::Shape("no stage-2 predictions".into()))?;
    let prenet = inp.stage1.map(|(pred, target)| supervision_loss(g, ctx, pred, target, inp.weights)).transpose()?;
    let transnet = supervision_loss(g, ctx, last, inp.mvct, inp.weights)?;
    let deep = deep_supervision_loss(g, inp.stage2, inp.mvct, ctx.deep_includes_final)?;
    let mut total = g.add(g.mul_scalar(transnet, w.transnet), g.mul_scalar(deep, w.deep));
    if let Some(p) = prenet {
        total = g.add(g.mul_scalar(p, w.prenet), total);
    }
    Ok(LossTerms { total, prenet, transnet, deep })
}

/// Same weighting applied to plain numbers.
pub fn combine_stage_values(w: &LossWeights, prenet: f64, transnet: f64, deep: f64) -> f64 {
    w.prenet * prenet + w.transnet * transnet + w.deep * deep
}

/// Repeats a (D, H, W) weight map into a (B, 1, D, H, W) tensor.
pub fn weight_map_tensor<T: Float>(map: ArrayView3<'_, f32>, batch: usize) -> Tensor<T> {
    let (d, h, w) = map.dim();
    let mut data = Vec::with_capacity(batch * d * h * w);
    for _ in 0..batch {
        data.extend(map.iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::from_vec(&[batch, 1, d, h, w], data)
}
