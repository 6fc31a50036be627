//! Full two-stage model and its ablation variants.

use std::fmt;
use std::str::FromStr;

use h3d_tensor::{Float, Graph, ParamBuilder, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::prenet::{PrenetConfig, PrenetOutput, WaveletPreNet};
use crate::transnet::{FusionMode, TransNet, TransNetConfig, TransNetOutput};

pub const PRENET_PREFIX: &str = "prenet";
pub const TRANSNET_PREFIX: &str = "transnet";

/// Model assemblies compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, PartialOrd, Ord)]
pub enum Ablation {
    /// PreNet, dual encoder, dual-attention fusion, gated decoder.
    #[default]
    V1,
    /// No PreNet; concatenation and pointwise projection replace the fusion.
    V2,
    /// No PreNet.
    V3,
    /// No PreNet; plain skips.
    V4,
    /// No PreNet, no Transformer branch, no fusion.
    V5,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::V1, Ablation::V2, Ablation::V3, Ablation::V4, Ablation::V5];

    pub fn uses_prenet(self) -> bool {
        self == Ablation::V1
    }

    /// Applies this variant's switches on top of `base`.
    pub fn transnet_config(self, base: &TransNetConfig) -> TransNetConfig {
        let mut c = base.clone();
        match self {
            Ablation::V1 | Ablation::V3 => {}
            Ablation::V2 => c.fusion = FusionMode::ConcatProjection,
            Ablation::V4 => c.attention_gates = false,
            Ablation::V5 => c.use_transformer = false,
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", *self as usize + 1)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "v3" => Ok(Self::V3),
            "v4" => Ok(Self::V4),
            "v5" => Ok(Self::V5),
            _ => Err(Error::Config(format!("unknown ablation {s:?} (expected v1..v5)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct H3dMarNet {
    pub ablation: Ablation,
    pub prenet: Option<WaveletPreNet>,
    pub transnet: TransNet,
}

pub struct ModelOutput {
    pub stage1: Option<PrenetOutput>,
    pub stage2: TransNetOutput,
}

impl H3dMarNet {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, prenet: &PrenetConfig, transnet: &TransNetConfig, ablation: Ablation) -> Result<Self> {
        let prenet = if ablation.uses_prenet() { Some(WaveletPreNet::new(&mut pb.sub(PRENET_PREFIX), prenet)?) } else { None };
        let transnet = TransNet::new(&mut pb.sub(TRANSNET_PREFIX), &ablation.transnet_config(transnet))?;
        Ok(Self { ablation, prenet, transnet })
    }

    /// Builds the model into a fresh store seeded by `seed`.
    pub fn init<T: Float>(prenet: &PrenetConfig, transnet: &TransNetConfig, ablation: Ablation, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(&mut ParamBuilder::new(&mut store, &mut rng), prenet, transnet, ablation)?;
        Ok((model, store))
    }

    /// `detach_stages` stops stage-2 gradients from reaching the PreNet.
    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var, detach_stages: bool) -> Result<ModelOutput> {
        self.transnet.check_input(g, x)?;
        let stage1 = self.prenet.as_ref().map(|p| p.forward(g, x)).transpose()?;
        let mid = match &stage1 {
            Some(s) if detach_stages => g.detach(s.output),
            Some(s) => s.output,
            None => x,
        };
        let stage2 = self.transnet.forward(g, mid)?;
        Ok(ModelOutput { stage1, stage2 })
    }
}

/// Trainable scalar count, split by stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub prenet: usize,
    pub transnet: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.prenet + self.transnet
    }
}

pub fn count_parameters<T: Float>(store: &ParamStore<T>) -> ParamCount {
    ParamCount {
        prenet: store.num_scalars_with_prefix(&format!("{PRENET_PREFIX}.")),
        transnet: store.num_scalars_with_prefix(&format!("{TRANSNET_PREFIX}.")),
    }
}
