//! Stage 2: kVCT to MVCT translation with a dual-path encoder, dual-attention
//! fusion and a deeply supervised decoder.

pub mod cnn;
pub mod decoder;
pub mod fusion;
pub mod transformer;

use h3d_tensor::{Float, Graph, ParamBuilder, Var};

use crate::error::{Error, Result};
use crate::kv::{join_list, parse_bool, parse_list, parse_value, KvConfig, KvDoc};

pub use cnn::{CnnEncoder, CnnFeatures, ResidualBlock};
pub use decoder::{AttentionGate, Decoder, DecoderOutput, PredictionHead};
pub use fusion::{DualFusion, FusionMode, FusionTrace};
pub use transformer::{patchify, unpatchify, TransformerEncoder, PATCH};

/// Spatial reduction of the encoder in H and W.
pub const REDUCTION: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TransNetConfig {
    pub cnn_widths: [usize; 3],
    pub blocks_per_level: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layers: usize,
    pub decoder_widths: [usize; 3],
    pub fusion: FusionMode,
    pub use_transformer: bool,
    pub attention_gates: bool,
    /// Input depth D; with `resolution` it fixes the positional table size.
    pub depth: usize,
    pub resolution: usize,
}

impl Default for TransNetConfig {
    fn default() -> Self {
        Self {
            cnn_widths: [64, 128, 256],
            blocks_per_level: 3,
            d_model: 256,
            heads: 8,
            mlp_ratio: 4,
            layers: 4,
            decoder_widths: [128, 64, 32],
            fusion: FusionMode::Gated,
            use_transformer: true,
            attention_gates: true,
            depth: 3,
            resolution: 64,
        }
    }
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let xs: Vec<usize> = parse_list(key, v)?;
    xs.try_into().map_err(|_| Error::Config(format!("{key}: expected three comma-separated values")))
}

impl KvConfig for TransNetConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("transnet.") else { return Ok(false) };
        match k {
            "cnn_widths" => self.cnn_widths = triple(key, v)?,
            "blocks_per_level" => self.blocks_per_level = parse_value(key, v)?,
            "d_model" => self.d_model = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "decoder_widths" => self.decoder_widths = triple(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "use_transformer" => self.use_transformer = parse_bool(key, v)?,
            "attention_gates" => self.attention_gates = parse_bool(key, v)?,
            "depth" => self.depth = parse_value(key, v)?,
            "resolution" => self.resolution = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("transnet.cnn_widths", join_list(&self.cnn_widths));
        d.push("transnet.blocks_per_level", self.blocks_per_level);
        d.push("transnet.d_model", self.d_model);
        d.push("transnet.heads", self.heads);
        d.push("transnet.mlp_ratio", self.mlp_ratio);
        d.push("transnet.layers", self.layers);
        d.push("transnet.decoder_widths", join_list(&self.decoder_widths));
        d.push("transnet.fusion", self.fusion);
        d.push("transnet.use_transformer", self.use_transformer);
        d.push("transnet.attention_gates", self.attention_gates);
        d.push("transnet.depth", self.depth);
        d.push("transnet.resolution", self.resolution);
        d
    }
}

impl TransNetConfig {
    /// Full-scale configuration: 3 × 512 × 512 input.
    pub fn full_scale() -> Self {
        Self { resolution: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_widths.contains(&0) || self.decoder_widths.contains(&0) || self.blocks_per_level == 0 {
            return Err(Error::Config("TransNet widths and block count must be positive".into()));
        }
        if self.use_transformer && (self.heads == 0 || self.d_model % self.heads != 0 || self.layers == 0 || self.mlp_ratio == 0) {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.depth == 0 || self.resolution < 16 || self.resolution % REDUCTION != 0 {
            return Err(Error::Config(format!("resolution {} must be a multiple of {REDUCTION} and >= 16", self.resolution)));
        }
        Ok(())
    }

    pub fn token_grid(&self) -> [usize; 3] {
        [self.depth, self.resolution / PATCH, self.resolution / PATCH]
    }
}

#[derive(Clone, Debug)]
pub struct TransNet {
    pub cfg: TransNetConfig,
    pub cnn: CnnEncoder,
    pub transformer: Option<TransformerEncoder>,
    pub fusion: Option<DualFusion>,
    pub decoder: Decoder,
}

pub struct TransNetOutput {
    /// Predictions at 1/4, 1/2 and full resolution.
    pub predictions: [Var; 3],
    pub coefficients: Vec<Var>,
}

impl TransNetOutput {
    pub fn last(&self) -> Var {
        self.predictions[2]
    }
}

impl TransNet {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: &TransNetConfig) -> Result<Self> {
        cfg.validate()?;
        let cnn = CnnEncoder::new(pb, &cfg.cnn_widths, cfg.blocks_per_level);
        let c = cfg.cnn_widths[2];
        let transformer = cfg
            .use_transformer
            .then(|| TransformerEncoder::new(pb, cfg.token_grid(), cfg.d_model, cfg.heads, cfg.mlp_ratio, cfg.layers, c));
        let fusion = cfg.use_transformer.then(|| DualFusion::new(pb, c, cfg.fusion));
        let decoder = Decoder::new(pb, c, &cfg.decoder_widths, &cfg.cnn_widths, cfg.attention_gates);
        Ok(Self { cfg: cfg.clone(), cnn, transformer, fusion, decoder })
    }

    pub fn check_input<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let ok = s.len() == 5
            && s[1] == 1
            && s[3] >= 16
            && s[3] % REDUCTION == 0
            && s[4] % REDUCTION == 0
            && s[4] >= 16;
        if !ok {
            return Err(Error::Shape(format!("TransNet expects (B,1,D,H,W) with H, W >= 16 and divisible by {REDUCTION}; got {s:?}")));
        }
        if let Some(t) = &self.transformer {
            let n = s[2] * (s[3] / PATCH) * (s[4] / PATCH);
            if n != t.tokens {
                return Err(Error::Shape(format!("input gives {n} tokens but the positional table holds {}", t.tokens)));
            }
        }
        Ok(())
    }

    pub fn forward<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<TransNetOutput> {
        self.check_input(g, x)?;
        let feats = self.cnn.forward(g, x);
        let fused = match (&self.transformer, &self.fusion) {
            (Some(t), Some(f)) => f.forward(g, feats.bottleneck, t.forward(g, x))?,
            _ => feats.bottleneck,
        };
        let out = self.decoder.forward(g, fused, &feats.skips)?;
        let [a, b, c]: [Var; 3] = out
            .predictions
            .try_into()
            .map_err(|_| Error::Shape("decoder must have three stages".into()))?;
        Ok(TransNetOutput { predictions: [a, b, c], coefficients: out.coefficients })
    }
}
