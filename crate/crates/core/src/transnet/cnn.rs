//! Residual 3-D CNN encoder. Depth is never downsampled.

use h3d_tensor::layers::{Conv3d, WeightInit};
use h3d_tensor::{ConvGeometry, Float, Graph, ParamBuilder, Var};

/// `h + conv2(relu(conv1(h)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
}

impl ResidualBlock {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, width: usize) -> Self {
        let mut pb = pb.sub(name);
        let g = ConvGeometry::same([3, 3, 3]);
        Self {
            conv1: Conv3d::new(&mut pb, "conv1", width, width, g, WeightInit::RELU),
            conv2: Conv3d::new(&mut pb, "conv2", width, width, g, WeightInit::Kaiming { gain: 0.1 }),
        }
    }

    pub fn branch<T: Float>(&self, g: &Graph<'_, T>, h: Var) -> Var {
        self.conv2.forward(g, g.relu(self.conv1.forward(g, h)))
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, h: Var) -> Var {
        g.add(h, self.branch(g, h))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    pub blocks: Vec<ResidualBlock>,
    pub down: Conv3d,
}

#[derive(Clone, Debug)]
pub struct CnnEncoder {
    pub stem: Conv3d,
    pub levels: Vec<EncoderLevel>,
}

pub struct CnnFeatures {
    /// Bottleneck at 1/8 resolution, width of the last level.
    pub bottleneck: Var,
    /// Pre-downsampling features, finest first.
    pub skips: Vec<Var>,
}

impl CnnEncoder {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, widths: &[usize], blocks: usize) -> Self {
        let mut pb = pb.sub("cnn");
        let stem = Conv3d::new(&mut pb, "stem", 1, widths[0], ConvGeometry::same([3, 3, 3]), WeightInit::RELU);
        let down_geom = ConvGeometry::strided([1, 2, 2], [1, 2, 2]);
        let levels = widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let mut lp = pb.sub(&format!("level{l}"));
                let blocks = (0..blocks).map(|b| ResidualBlock::new(&mut lp, &format!("block{b}"), w)).collect();
                let next = widths.get(l + 1).copied().unwrap_or(w);
                let down = Conv3d::new(&mut lp, "down", w, next, down_geom, WeightInit::Kaiming { gain: 1.0 });
                EncoderLevel { blocks, down }
            })
            .collect();
        Self { stem, levels }
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> CnnFeatures {
        let mut h = g.relu(self.stem.forward(g, x));
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for b in &level.blocks {
                h = b.forward(g, h);
            }
            skips.push(h);
            h = level.down.forward(g, h);
        }
        CnnFeatures { bottleneck: h, skips }
    }
}
