//! Stage 1: slice-wise wavelet-domain artifact suppression.
//!
//! Each slice is split into Haar sub-bands, the low band is split once more,
//! every band passes through its own frequency-aware denoiser (FAD), the
//! bands are recomposed, and a learned per-pixel map mixes the result with
//! the raw slice.

use h3d_tensor::layers::{Conv3d, WeightInit};
use h3d_tensor::{ConvGeometry, Float, Graph, ParamBuilder, Var};

use crate::error::{Error, Result};
use crate::kv::{parse_bool, parse_value, KvConfig, KvDoc};
use crate::wavelet::{dwt, idwt};

#[derive(Clone, Debug, PartialEq)]
pub struct PrenetConfig {
    /// FAD feature width.
    pub fad_channels: usize,
    /// Squeeze ratio of the FAD channel gate.
    pub fad_reduction: usize,
    /// One FAD for every band instead of eight independent ones.
    pub share_fad: bool,
    pub fusion_channels: usize,
    /// Start every FAD output convolution at zero so the denoisers begin as identities.
    pub zero_init_out: bool,
}

impl Default for PrenetConfig {
    fn default() -> Self {
        Self { fad_channels: 16, fad_reduction: 4, share_fad: false, fusion_channels: 16, zero_init_out: true }
    }
}

impl KvConfig for PrenetConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "prenet.fad_channels" => self.fad_channels = parse_value(key, v)?,
            "prenet.fad_reduction" => self.fad_reduction = parse_value(key, v)?,
            "prenet.share_fad" => self.share_fad = parse_bool(key, v)?,
            "prenet.fusion_channels" => self.fusion_channels = parse_value(key, v)?,
            "prenet.zero_init_out" => self.zero_init_out = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("prenet.fad_channels", self.fad_channels);
        d.push("prenet.fad_reduction", self.fad_reduction);
        d.push("prenet.share_fad", self.share_fad);
        d.push("prenet.fusion_channels", self.fusion_channels);
        d.push("prenet.zero_init_out", self.zero_init_out);
        d
    }
}

impl PrenetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fad_channels == 0 || self.fad_reduction == 0 || self.fusion_channels == 0 {
            return Err(Error::Config("PreNet widths must be positive".into()));
        }
        if self.fad_channels / self.fad_reduction == 0 {
            return Err(Error::Config("fad_channels / fad_reduction must be >= 1".into()));
        }
        Ok(())
    }
}

fn slice_conv() -> ConvGeometry {
    ConvGeometry::same([1, 3, 3])
}

fn pointwise() -> ConvGeometry {
    ConvGeometry::same([1, 1, 1])
}

/// Squeeze-and-excitation style band denoiser with a residual output.
#[derive(Clone, Debug)]
pub struct Fad {
    pub conv_in: Conv3d,
    /// First dense map of the gate, stored as a pointwise convolution.
    pub squeeze: Conv3d,
    pub excite: Conv3d,
    pub conv_out: Conv3d,
}

/// Intermediate values of one FAD evaluation.
pub struct FadTrace {
    pub output: Var,
    /// Channel gate, (B, C_f, D, 1, 1).
    pub gate: Var,
}

impl Fad {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &PrenetConfig) -> Self {
        let mut pb = pb.sub(name);
        let c = cfg.fad_channels;
        let r = c / cfg.fad_reduction;
        let out_init = if cfg.zero_init_out { WeightInit::Zeros } else { WeightInit::Kaiming { gain: 0.1 } };
        Self {
            conv_in: Conv3d::new(&mut pb, "conv_in", 1, c, slice_conv(), WeightInit::RELU),
            // The pooled descriptor is non-negative, so non-negative squeeze weights keep every hidden unit alive at init.
            squeeze: Conv3d::new(&mut pb, "squeeze", c, r, pointwise(), WeightInit::KaimingPositive { gain: 1.0 }),
            excite: Conv3d::new(&mut pb, "excite", r, c, pointwise(), WeightInit::Kaiming { gain: 1.0 }),
            conv_out: Conv3d::new(&mut pb, "conv_out", c, 1, slice_conv(), out_init),
        }
    }

    /// `band + conv_out(F ⊙ s)` with `F = relu(conv_in(band))` and
    /// `s = sigmoid(W2 relu(W1 mean_hw(F)))`, per slice.
    pub fn trace<T: Float>(&self, g: &Graph<'_, T>, band: Var) -> FadTrace {
        let f = g.relu(self.conv_in.forward(g, band));
        let z = g.mean_axes(f, &[3, 4]);
        let s = g.sigmoid(self.excite.forward(g, g.relu(self.squeeze.forward(g, z))));
        let recal = g.mul(f, s);
        FadTrace { output: g.add(band, self.conv_out.forward(g, recal)), gate: s }
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, band: Var) -> Var {
        self.trace(g, band).output
    }
}

#[derive(Clone, Debug)]
pub struct WaveletPreNet {
    pub cfg: PrenetConfig,
    /// Level-2 bands ll, lh, hl, hh then level-1 lh, hl, hh; a single entry when shared.
    pub fads: Vec<Fad>,
    pub mix_hidden: Conv3d,
    pub mix_out: Conv3d,
}

pub struct PrenetOutput {
    /// Mixed slices `w ⊙ X + (1 - w) ⊙ X̃`, same shape as the input.
    pub output: Var,
    /// Wavelet reconstruction `X̃`.
    pub reconstructed: Var,
    /// Mixing map `w`, (B, 1, D, H, W).
    pub mixing: Var,
}

impl WaveletPreNet {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: &PrenetConfig) -> Result<Self> {
        cfg.validate()?;
        let n = if cfg.share_fad { 1 } else { 7 };
        let names = ["fad_l2_ll", "fad_l2_lh", "fad_l2_hl", "fad_l2_hh", "fad_l1_lh", "fad_l1_hl", "fad_l1_hh"];
        let fads = (0..n).map(|i| Fad::new(pb, if cfg.share_fad { "fad_shared" } else { names[i] }, cfg)).collect();
        let m = cfg.fusion_channels;
        Ok(Self {
            cfg: cfg.clone(),
            fads,
            mix_hidden: Conv3d::new(pb, "mix_hidden", 2, m, slice_conv(), WeightInit::RELU),
            mix_out: Conv3d::new(pb, "mix_out", m, 1, slice_conv(), WeightInit::Kaiming { gain: 1.0 }),
        })
    }

    fn fad(&self, slot: usize) -> &Fad {
        if self.cfg.share_fad {
            &self.fads[0]
        } else {
            &self.fads[slot]
        }
    }

    /// Wavelet denoising path only: returns `X̃`.
    pub fn reconstruct<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<Var> {
        let b1 = dwt(g, x)?;
        let ll1 = g.narrow(b1, 1, 0, 1);
        let b2 = dwt(g, ll1)?;
        let l2: Vec<Var> = (0..4).map(|k| self.fad(k).forward(g, g.narrow(b2, 1, k, 1))).collect();
        let ll1_star = idwt(g, g.concat(&l2, 1))?;
        let mut l1 = vec![ll1_star];
        l1.extend((1..4).map(|k| self.fad(3 + k).forward(g, g.narrow(b1, 1, k, 1))));
        idwt(g, g.concat(&l1, 1))
    }

    /// Per-pixel mixing weights in (0, 1) from the raw and reconstructed slices.
    pub fn mixing_map<T: Float>(&self, g: &Graph<'_, T>, x: Var, recon: Var) -> Var {
        let h = g.relu(self.mix_hidden.forward(g, g.concat(&[x, recon], 1)));
        g.sigmoid(self.mix_out.forward(g, h))
    }

    /// `x`: (B, 1, D, H, W) normalised kVCT with H and W divisible by 4.
    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<PrenetOutput> {
        let s = g.shape(x);
        if s.len() != 5 || s[1] != 1 || s[3] % 4 != 0 || s[4] % 4 != 0 || s[3] == 0 || s[4] == 0 {
            return Err(Error::Shape(format!("PreNet expects (B,1,D,H,W) with H, W divisible by 4; got {s:?}")));
        }
        let recon = self.reconstruct(g, x)?;
        let w = self.mixing_map(g, x, recon);
        let output = g.add(g.mul(w, x), g.mul(g.rsub_scalar(1.0, w), recon));
        Ok(PrenetOutput { output, reconstructed: recon, mixing: w })
    }
}
