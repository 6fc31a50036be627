//! Paired geometric augmentation: horizontal flip, then a joint
//! shift / scale / rotate about the slice centre. Images are resampled
//! bilinearly, masks and weight maps with nearest neighbour; samples outside
//! the slice clamp to the nearest edge.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::kv::{parse_value, KvConfig, KvDoc};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_prob: f64,
    /// Probability of applying the joint shift / scale / rotate.
    pub ssr_prob: f64,
    /// Maximum shift as a fraction of the slice size.
    pub shift_limit: f64,
    /// Maximum relative zoom, `scale ∈ [1 - limit, 1 + limit]`.
    pub scale_limit: f64,
    /// Degrees.
    pub rotate_limit: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { flip_prob: 0.5, ssr_prob: 0.8, shift_limit: 0.0625, scale_limit: 0.1, rotate_limit: 5.0 }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self { flip_prob: 0.0, ssr_prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs_ok = [self.flip_prob, self.ssr_prob].iter().all(|p| (0.0..=1.0).contains(p));
        let limits_ok = [self.shift_limit, self.scale_limit, self.rotate_limit].iter().all(|l| l.is_finite() && *l >= 0.0);
        if !probs_ok || !limits_ok || self.scale_limit >= 1.0 {
            return Err(Error::Config(format!("invalid augmentation parameters {self:?}")));
        }
        Ok(())
    }
}

impl KvConfig for AugmentParams {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("augment.") else { return Ok(false) };
        match k {
            "flip_prob" => self.flip_prob = parse_value(key, v)?,
            "ssr_prob" => self.ssr_prob = parse_value(key, v)?,
            "shift_limit" => self.shift_limit = parse_value(key, v)?,
            "scale_limit" => self.scale_limit = parse_value(key, v)?,
            "rotate_limit" => self.rotate_limit = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("augment.flip_prob", self.flip_prob);
        d.push("augment.ssr_prob", self.ssr_prob);
        d.push("augment.shift_limit", self.shift_limit);
        d.push("augment.scale_limit", self.scale_limit);
        d.push("augment.rotate_limit", self.rotate_limit);
        d
    }
}

/// Similarity transform about the slice centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ssr {
    /// Shifts as fractions of height and width.
    pub shift_y: f64,
    pub shift_x: f64,
    pub scale: f64,
    /// Radians, counter-clockwise.
    pub angle: f64,
}

/// One random draw, applied identically to every stack of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AugTransform {
    pub flip: bool,
    pub ssr: Option<Ssr>,
}

impl AugTransform {
    pub fn draw(p: &AugmentParams, rng: &mut impl Rng) -> Self {
        let flip = rng.random_bool(p.flip_prob);
        let ssr = rng.random_bool(p.ssr_prob).then(|| {
            let mut sym = |lim: f64| if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
            Ssr {
                shift_y: sym(p.shift_limit),
                shift_x: sym(p.shift_limit),
                scale: 1.0 + sym(p.scale_limit),
                angle: sym(p.rotate_limit).to_radians(),
            }
        });
        Self { flip, ssr }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.ssr.is_none()
    }

    /// Source coordinate sampled for output pixel `(y, x)` of an `h × w` slice.
    pub fn source(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (mut sy, mut sx) = (y, x);
        if let Some(t) = self.ssr {
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (dy, dx) = (y - cy - t.shift_y * h as f64, x - cx - t.shift_x * w as f64);
            let (s, c) = t.angle.sin_cos();
            // inverse rotation then inverse zoom
            sy = cy + (c * dy - s * dx) / t.scale;
            sx = cx + (s * dy + c * dx) / t.scale;
        }
        if self.flip {
            sx = w as f64 - 1.0 - sx;
        }
        (sy, sx)
    }

    /// Bilinear resampling of each slice of a (D, H, W) stack.
    pub fn warp_bilinear(&self, v: ArrayView3<'_, f32>) -> Array3<f32> {
        if self.is_identity() {
            return v.to_owned();
        }
        let (d, h, w) = v.dim();
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        Array3::from_shape_fn((d, h, w), |(z, y, x)| {
            let (sy, sx) = self.source(y as f64, x as f64, h, w);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let at = |yy: isize, xx: isize| v[[z, clamp(yy, h), clamp(xx, w)]];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    /// Nearest-neighbour resampling, for masks and piecewise-constant maps.
    pub fn warp_nearest<T: Copy>(&self, v: ArrayView3<'_, T>) -> Array3<T> {
        if self.is_identity() {
            return v.to_owned();
        }
        let (d, h, w) = v.dim();
        let clamp = |i: f64, n: usize| (i.round().max(0.0) as usize).min(n - 1);
        Array3::from_shape_fn((d, h, w), |(z, y, x)| {
            let (sy, sx) = self.source(y as f64, x as f64, h, w);
            v[[z, clamp(sy, h), clamp(sx, w)]]
        })
    }
}

/// Draws one transform from `seed` and applies it to both image stacks and, when given, the masks.
#[allow(clippy::type_complexity)]
pub fn augment_pair(
    kvct: ArrayView3<'_, f32>,
    mvct: ArrayView3<'_, f32>,
    masks: Option<ArrayView3<'_, bool>>,
    params: &AugmentParams,
    seed: u64,
) -> Result<(Array3<f32>, Array3<f32>, Option<Array3<bool>>)> {
    params.validate()?;
    if kvct.dim() != mvct.dim() || masks.is_some_and(|m| m.dim() != kvct.dim()) {
        return Err(Error::Shape(format!("augment_pair: stacks differ in shape {:?} vs {:?}", kvct.dim(), mvct.dim())));
    }
    let t = AugTransform::draw(params, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok((t.warp_bilinear(kvct), t.warp_bilinear(mvct), masks.map(|m| t.warp_nearest(m))))
}
