//! Dual-attention fusion of the CNN and Transformer bottlenecks.

use std::fmt;
use std::str::FromStr;

use h3d_tensor::layers::{Conv3d, WeightInit};
use h3d_tensor::{ConvGeometry, Float, Graph, ParamBuilder, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// `φ(α_s(a) ⊙ α_c(a) ⊙ a)`.
    #[default]
    Gated,
    /// `φ(α_s(a) ⊙ α_c(a))`, the product of the two attention maps alone.
    LiteralProduct,
    /// `ψ(F_r ⊕ F_t)` without attention or bottleneck.
    ConcatProjection,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Gated => "gated",
            FusionMode::LiteralProduct => "literal",
            FusionMode::ConcatProjection => "concat",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Self::Gated),
            "literal" => Ok(Self::LiteralProduct),
            "concat" => Ok(Self::ConcatProjection),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualFusion {
    pub mode: FusionMode,
    /// ψ: pointwise 2C → C.
    pub align: Conv3d,
    pub spatial: Option<Conv3d>,
    pub channel_squeeze: Option<Conv3d>,
    pub channel_excite: Option<Conv3d>,
    pub bottleneck: Vec<Conv3d>,
}

pub struct FusionTrace {
    pub fused: Var,
    pub aligned: Var,
    /// (B, 1, D, H, W) spatial gate.
    pub spatial: Option<Var>,
    /// (B, C, 1, 1, 1) channel gate.
    pub channel: Option<Var>,
}

impl DualFusion {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize, mode: FusionMode) -> Self {
        let mut pb = pb.sub("fusion");
        let pw = ConvGeometry::same([1, 1, 1]);
        let align = Conv3d::new(&mut pb, "align", 2 * channels, channels, pw, WeightInit::Kaiming { gain: 1.0 });
        if mode == FusionMode::ConcatProjection {
            return Self { mode, align, spatial: None, channel_squeeze: None, channel_excite: None, bottleneck: Vec::new() };
        }
        let hidden = (channels / 4).max(1);
        let g3 = ConvGeometry::same([3, 3, 3]);
        Self {
            mode,
            align,
            spatial: Some(Conv3d::new(&mut pb, "spatial", 2, 1, ConvGeometry::same([7, 7, 7]), WeightInit::Kaiming { gain: 1.0 })),
            channel_squeeze: Some(Conv3d::new(&mut pb, "channel_squeeze", channels, hidden, pw, WeightInit::Kaiming { gain: 1.0 })),
            channel_excite: Some(Conv3d::new(&mut pb, "channel_excite", hidden, channels, pw, WeightInit::Kaiming { gain: 1.0 })),
            bottleneck: vec![
                Conv3d::new(&mut pb, "phi1", channels, channels, g3, WeightInit::Kaiming { gain: 1.0 }),
                Conv3d::new(&mut pb, "phi2", channels, channels, g3, WeightInit::Kaiming { gain: 1.0 }),
            ],
        }
    }

    /// Channel-pooled (mean and max) 7³ convolution followed by a sigmoid.
    pub fn spatial_gate<T: Float>(&self, g: &Graph<'_, T>, a: Var) -> Option<Var> {
        let conv = self.spatial.as_ref()?;
        let pooled = g.concat(&[g.mean_axes(a, &[1]), g.max_axis(a, 1)], 1);
        Some(g.sigmoid(conv.forward(g, pooled)))
    }

    pub fn channel_gate<T: Float>(&self, g: &Graph<'_, T>, a: Var) -> Option<Var> {
        let (sq, ex) = (self.channel_squeeze.as_ref()?, self.channel_excite.as_ref()?);
        let z = g.mean_axes(a, &[2, 3, 4]);
        Some(g.sigmoid(ex.forward(g, g.gelu(sq.forward(g, z)))))
    }

    pub fn trace<T: Float>(&self, g: &Graph<'_, T>, cnn: Var, tokens: Var) -> Result<FusionTrace> {
        let (sc, st) = (g.shape(cnn), g.shape(tokens));
        if sc != st {
            return Err(Error::Shape(format!("fusion inputs differ: {sc:?} vs {st:?}")));
        }
        let a = self.align.forward(g, g.concat(&[cnn, tokens], 1));
        let (Some(sa), Some(ca)) = (self.spatial_gate(g, a), self.channel_gate(g, a)) else {
            return Ok(FusionTrace { fused: a, aligned: a, spatial: None, channel: None });
        };
        let gates = g.mul(sa, ca);
        let mut h = match self.mode {
            FusionMode::LiteralProduct => gates,
            _ => g.mul(gates, a),
        };
        for conv in &self.bottleneck {
            h = g.gelu(conv.forward(g, h));
        }
        Ok(FusionTrace { fused: h, aligned: a, spatial: Some(sa), channel: Some(ca) })
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, cnn: Var, tokens: Var) -> Result<Var> {
        Ok(self.trace(g, cnn, tokens)?.fused)
    }
}
