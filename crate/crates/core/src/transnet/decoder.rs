//! Three-stage decoder with attention-gated skips and a prediction head per stage.

use h3d_tensor::layers::{Conv3d, ConvTranspose3d, GroupNorm, WeightInit};
use h3d_tensor::{ConvGeometry, Float, Graph, ParamBuilder, Var};

use crate::error::{Error, Result};

/// Additive attention: `skip ⊙ sigmoid(ψ(relu(W_x skip + W_g gate)))`.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub skip_proj: Conv3d,
    pub gate_proj: Conv3d,
    pub coeff: Conv3d,
}

impl AttentionGate {
    fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, skip_ch: usize, gate_ch: usize) -> Self {
        let mut pb = pb.sub("attn");
        let pw = ConvGeometry::same([1, 1, 1]);
        let inter = (skip_ch.min(gate_ch) / 2).max(1);
        Self {
            skip_proj: Conv3d::new(&mut pb, "skip_proj", skip_ch, inter, pw, WeightInit::Kaiming { gain: 1.0 }),
            gate_proj: Conv3d::new(&mut pb, "gate_proj", gate_ch, inter, pw, WeightInit::Kaiming { gain: 1.0 }),
            coeff: Conv3d::new(&mut pb, "coeff", inter, 1, pw, WeightInit::Kaiming { gain: 1.0 }),
        }
    }

    /// Coefficient map in (0, 1), (B, 1, D, H, W).
    pub fn coefficients<T: Float>(&self, g: &Graph<'_, T>, skip: Var, gate: Var) -> Var {
        let q = g.relu(g.add(self.skip_proj.forward(g, skip), self.gate_proj.forward(g, gate)));
        g.sigmoid(self.coeff.forward(g, q))
    }
}

/// `Conv1x1x1(tanh(gelu(Conv1x3x3(F))))`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub conv: Conv3d,
    pub out: Conv3d,
}

impl PredictionHead {
    fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, width: usize) -> Self {
        let mut pb = pb.sub("head");
        Self {
            conv: Conv3d::new(&mut pb, "conv", width, width, ConvGeometry::same([1, 3, 3]), WeightInit::Kaiming { gain: 1.0 }),
            out: Conv3d::new(&mut pb, "out", width, 1, ConvGeometry::same([1, 1, 1]), WeightInit::Kaiming { gain: 0.5 }),
        }
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, f: Var) -> Var {
        self.out.forward(g, g.tanh(g.gelu(self.conv.forward(g, f))))
    }
}

/// Upper bound on group-norm groups in the stage convolutions.
const NORM_GROUPS: usize = 8;

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: ConvTranspose3d,
    pub gate: Option<AttentionGate>,
    pub conv1: Conv3d,
    pub norm1: GroupNorm,
    pub conv2: Conv3d,
    pub norm2: GroupNorm,
    pub head: PredictionHead,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
}

pub struct DecoderOutput {
    /// Coarse to fine; the last entry is the final prediction.
    pub predictions: Vec<Var>,
    /// Attention coefficients per stage, when gates are enabled.
    pub coefficients: Vec<Var>,
}

impl Decoder {
    /// `skip_widths` are listed finest first, as produced by the encoder.
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, in_width: usize, widths: &[usize], skip_widths: &[usize], gates: bool) -> Self {
        let mut pb = pb.sub("decoder");
        let g3 = ConvGeometry::same([3, 3, 3]);
        let up_geom = ConvGeometry::strided([1, 2, 2], [1, 2, 2]);
        let mut prev = in_width;
        let stages = widths
            .iter()
            .zip(skip_widths.iter().rev())
            .enumerate()
            .map(|(i, (&w, &sw))| {
                let mut sp = pb.sub(&format!("stage{i}"));
                let stage = DecoderStage {
                    up: ConvTranspose3d::new(&mut sp, "up", prev, w, up_geom, WeightInit::Kaiming { gain: 1.0 }),
                    gate: gates.then(|| AttentionGate::new(&mut sp, sw, w)),
                    conv1: Conv3d::unbiased(&mut sp, "conv1", w + sw, w, g3, WeightInit::Kaiming { gain: 1.0 }),
                    norm1: GroupNorm::new(&mut sp, "norm1", w, NORM_GROUPS),
                    conv2: Conv3d::unbiased(&mut sp, "conv2", w, w, g3, WeightInit::Kaiming { gain: 1.0 }),
                    norm2: GroupNorm::new(&mut sp, "norm2", w, NORM_GROUPS),
                    head: PredictionHead::new(&mut sp, w),
                };
                prev = w;
                stage
            })
            .collect();
        Self { stages }
    }

    /// `skips` finest first; stage `i` consumes `skips[n - 1 - i]`.
    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, bottleneck: Var, skips: &[Var]) -> Result<DecoderOutput> {
        if skips.len() != self.stages.len() {
            return Err(Error::Shape(format!("{} skips for {} decoder stages", skips.len(), self.stages.len())));
        }
        let mut h = bottleneck;
        let mut predictions = Vec::new();
        let mut coefficients = Vec::new();
        for (stage, &skip) in self.stages.iter().zip(skips.iter().rev()) {
            let up = stage.up.forward(g, h);
            let (su, ss) = (g.shape(up), g.shape(skip));
            if su[2..] != ss[2..] {
                return Err(Error::Shape(format!("skip {ss:?} does not match upsampled {su:?}")));
            }
            let skip = match &stage.gate {
                Some(gate) => {
                    let c = gate.coefficients(g, skip, up);
                    coefficients.push(c);
                    g.mul(skip, c)
                }
                None => skip,
            };
            let f = g.gelu(stage.norm1.forward(g, stage.conv1.forward(g, g.concat(&[up, skip], 1))));
            h = g.gelu(stage.norm2.forward(g, stage.conv2.forward(g, f)));
            predictions.push(stage.head.forward(g, h));
        }
        Ok(DecoderOutput { predictions, coefficients })
    }
}
