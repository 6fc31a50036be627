//! Parameterised building blocks. Each layer only stores [`ParamId`]s; values
//! live in the [`ParamStore`](crate::ParamStore) attached to the graph.

use crate::graph::{Graph, Var};
use crate::ops::conv::ConvGeometry;
use crate::param::{Init, ParamBuilder, ParamId};
use crate::tensor::{Float, Tensor};

/// How the weights of a new layer are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// He-normal scaled by `gain`.
    Kaiming { gain: f64 },
    /// He-normal magnitudes, all non-negative.
    KaimingPositive { gain: f64 },
    Zeros,
}

impl WeightInit {
    pub const RELU: WeightInit = WeightInit::Kaiming { gain: 1.0 };

    fn to_init(self, fan_in: usize) -> Init {
        match self {
            WeightInit::Kaiming { gain } => Init::KaimingNormal { fan_in, gain },
            WeightInit::KaimingPositive { gain } => Init::KaimingHalfNormal { fan_in, gain },
            WeightInit::Zeros => Init::Zeros,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3d {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        init: WeightInit,
    ) -> Self {
        Self::build(pb, name, in_channels, out_channels, geom, init, true)
    }

    /// Without bias, for use ahead of a normalisation that would cancel it.
    pub fn unbiased<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        init: WeightInit,
    ) -> Self {
        Self::build(pb, name, in_channels, out_channels, geom, init, false)
    }

    fn build<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        init: WeightInit,
        with_bias: bool,
    ) -> Self {
        let mut pb = pb.sub(name);
        let [kd, kh, kw] = geom.kernel;
        let fan_in = in_channels * geom.taps();
        let weight = pb.param("weight", &[out_channels, in_channels, kd, kh, kw], init.to_init(fan_in));
        let bias = with_bias.then(|| pb.param("bias", &[out_channels], Init::Zeros));
        Self { weight, bias, geom, in_channels, out_channels }
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        g.conv3d(x, g.param(self.weight), self.bias.map(|b| g.param(b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl ConvTranspose3d {
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        init: WeightInit,
    ) -> Self {
        let mut pb = pb.sub(name);
        let [kd, kh, kw] = geom.kernel;
        // each output voxel of a kernel == stride transpose conv sees in_channels inputs
        let fan_in = in_channels * geom.taps() / geom.stride.iter().product::<usize>();
        let weight = pb.param("weight", &[in_channels, out_channels, kd, kh, kw], init.to_init(fan_in.max(1)));
        let bias = Some(pb.param("bias", &[out_channels], Init::Zeros));
        Self { weight, bias, geom }
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        g.conv_transpose3d(x, g.param(self.weight), self.bias.map(|b| g.param(b)), self.geom)
    }
}

/// Dense map over the last axis: `y = x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, in_features: usize, out_features: usize, init: WeightInit) -> Self {
        let mut pb = pb.sub(name);
        let weight = pb.param("weight", &[out_features, in_features], init.to_init(in_features));
        let bias = pb.param("bias", &[out_features], Init::Zeros);
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let rank = g.shape(x).len();
        let y = g.matmul_t(x, g.param(self.weight), false, true);
        let mut bshape = vec![1; rank];
        bshape[rank - 1] = self.out_features;
        g.add(y, g.reshape(g.param(self.bias), &bshape))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut pb = pb.sub(name);
        let gamma = pb.param("gamma", &[dim], Init::Const(1.0));
        let beta = pb.param("beta", &[dim], Init::Zeros);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        g.layer_norm_last(x, g.param(self.gamma), g.param(self.beta), self.eps)
    }
}

/// Normalises each of `groups` channel groups of a (B, C, ...) tensor over its
/// channels and spatial extent, then applies a per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm {
    /// Uses the largest divisor of `channels` not above `max_groups`.
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, max_groups: usize) -> Self {
        let mut pb = pb.sub(name);
        let groups = (1..=max_groups.min(channels).max(1)).rev().find(|g| channels % g == 0).unwrap_or(1);
        let gamma = pb.param("gamma", &[channels], Init::Const(1.0));
        let beta = pb.param("beta", &[channels], Init::Zeros);
        Self { gamma, beta, groups, channels, eps: 1e-5 }
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let shape = g.shape(x);
        assert_eq!(shape[1], self.channels, "group_norm channel count");
        let n = shape[1..].iter().product::<usize>() / self.groups;
        let grouped = g.reshape(x, &[shape[0], self.groups, n]);
        let normed = g.layer_norm_last(grouped, g.input(Tensor::ones(&[n])), g.input(Tensor::zeros(&[n])), self.eps);
        let mut cshape = vec![1; shape.len()];
        cshape[1] = self.channels;
        let y = g.mul(g.reshape(normed, &shape), g.reshape(g.param(self.gamma), &cshape));
        g.add(y, g.reshape(g.param(self.beta), &cshape))
    }
}
