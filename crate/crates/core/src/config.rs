//! Training hyperparameters and the resolved run configuration.

use h3d_tensor::optim::AdamWConfig;

use crate::augment::AugmentParams;
use crate::error::{Error, Result};
use crate::kv::{parse_bool, parse_value, KvConfig, KvDoc};
use crate::losses::{LossContext, LossVariant, LossWeights};
use crate::model::Ablation;
use crate::phantom::PhantomConfig;
use crate::prenet::PrenetConfig;
use crate::teacher::{TeacherConfig, TeacherMode};
use crate::transnet::TransNetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_half_every: usize,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss_variant: LossVariant,
    pub ablation: Ablation,
    pub teacher_mode: TeacherMode,
    /// Data order, augmentation and initialisation all derive from this.
    pub seed: u64,
    /// Stop stage-2 gradients at the PreNet output.
    pub detach_stages: bool,
    pub augment: bool,
    /// Share of patients used for training when a dataset is split.
    pub train_frac: f64,
    pub deep_includes_final: bool,
    pub metal_threshold: f64,
    pub metal_beta: f64,
    pub metal_radius: usize,
    pub perceptual_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 200,
            lr0: 1e-4,
            lr_half_every: 20,
            weight_decay: 5e-4,
            early_stop_patience: 15,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_variant: LossVariant::L6,
            ablation: Ablation::V1,
            teacher_mode: TeacherMode::Oracle,
            seed: 0,
            detach_stages: false,
            augment: true,
            train_frac: 0.75,
            deep_includes_final: false,
            metal_threshold: 2000.0,
            metal_beta: 4.0,
            metal_radius: 3,
            perceptual_seed: 1234,
        }
    }
}

impl TrainConfig {
    /// `lr0 · 0.5^⌊epoch / lr_half_every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.lr_half_every) as i32)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn loss_context(&self, weights: LossWeights) -> LossContext {
        LossContext { deep_includes_final: self.deep_includes_final, ..LossContext::new(self.loss_variant, weights, self.perceptual_seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr0, self.eps, self.metal_beta].iter().all(|x| x.is_finite() && *x > 0.0);
        if self.batch_size == 0 || self.epochs == 0 || self.lr_half_every == 0 || self.early_stop_patience == 0 || !positive {
            return Err(Error::Config("batch size, epochs, lr schedule, patience, eps and metal beta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings betas=({}, {}) wd={}", self.beta1, self.beta2, self.weight_decay)));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} must lie in (0, 1)", self.train_frac)));
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("train.") else { return Ok(false) };
        match k {
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "lr0" => self.lr0 = parse_value(key, v)?,
            "lr_half_every" => self.lr_half_every = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "early_stop_patience" => self.early_stop_patience = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "loss_variant" => self.loss_variant = v.parse()?,
            "ablation" => self.ablation = v.parse()?,
            "teacher_mode" => self.teacher_mode = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "detach_stages" => self.detach_stages = parse_bool(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "train_frac" => self.train_frac = parse_value(key, v)?,
            "deep_includes_final" => self.deep_includes_final = parse_bool(key, v)?,
            "metal_threshold" => self.metal_threshold = parse_value(key, v)?,
            "metal_beta" => self.metal_beta = parse_value(key, v)?,
            "metal_radius" => self.metal_radius = parse_value(key, v)?,
            "perceptual_seed" => self.perceptual_seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("train.batch_size", self.batch_size);
        d.push("train.epochs", self.epochs);
        d.push("train.lr0", self.lr0);
        d.push("train.lr_half_every", self.lr_half_every);
        d.push("train.weight_decay", self.weight_decay);
        d.push("train.early_stop_patience", self.early_stop_patience);
        d.push("train.beta1", self.beta1);
        d.push("train.beta2", self.beta2);
        d.push("train.eps", self.eps);
        d.push("train.loss_variant", self.loss_variant);
        d.push("train.ablation", self.ablation);
        d.push("train.teacher_mode", self.teacher_mode);
        d.push("train.seed", self.seed);
        d.push("train.detach_stages", self.detach_stages);
        d.push("train.augment", self.augment);
        d.push("train.train_frac", self.train_frac);
        d.push("train.deep_includes_final", self.deep_includes_final);
        d.push("train.metal_threshold", self.metal_threshold);
        d.push("train.metal_beta", self.metal_beta);
        d.push("train.metal_radius", self.metal_radius);
        d.push("train.perceptual_seed", self.perceptual_seed);
        d
    }
}

struct LossWeightsKv<'a>(&'a mut LossWeights);

impl LossWeightsKv<'_> {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("loss.") else { return Ok(false) };
        let w = &mut *self.0;
        let slot = match k {
            "l1" => &mut w.l1,
            "ssim" => &mut w.ssim,
            "perceptual" => &mut w.perceptual,
            "extra" => &mut w.extra,
            "prenet" => &mut w.prenet,
            "transnet" => &mut w.transnet,
            "deep" => &mut w.deep,
            _ => return Ok(false),
        };
        *slot = parse_value(key, v)?;
        Ok(true)
    }
}

fn loss_weights_kv(w: &LossWeights) -> KvDoc {
    let mut d = KvDoc::new();
    d.push("loss.l1", w.l1);
    d.push("loss.ssim", w.ssim);
    d.push("loss.perceptual", w.perceptual);
    d.push("loss.extra", w.extra);
    d.push("loss.prenet", w.prenet);
    d.push("loss.transnet", w.transnet);
    d.push("loss.deep", w.deep);
    d
}

/// Everything a run needs, serialisable as one `key=value` document.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub prenet: PrenetConfig,
    pub transnet: TransNetConfig,
    pub loss: LossWeights,
    pub augment: AugmentParams,
    pub phantom: PhantomConfig,
    pub teacher: TeacherConfig,
}

impl RunConfig {
    /// Reduced widths sized for CPU training at 64 × 64, with a higher base
    /// learning rate to suit short runs.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig { lr0: 1e-3, ..Default::default() },
            transnet: TransNetConfig {
                cnn_widths: [8, 16, 32],
                blocks_per_level: 1,
                d_model: 64,
                heads: 4,
                mlp_ratio: 2,
                layers: 2,
                decoder_widths: [16, 8, 8],
                ..Default::default()
            },
            prenet: PrenetConfig { fad_channels: 8, fad_reduction: 4, fusion_channels: 8, ..Default::default() },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.prenet.validate()?;
        self.transnet.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.phantom.validate()?;
        self.teacher.validate()
    }

    pub fn loss_context(&self) -> LossContext {
        self.train.loss_context(self.loss)
    }

    /// Applies `key=value` strings in order, later ones winning.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let (k, v) = crate::kv::split_pair(p.as_ref())?;
            if !self.set(&k, &v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        Ok(())
    }
}

impl KvConfig for RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        Ok(self.train.set(key, v)?
            || self.prenet.set(key, v)?
            || self.transnet.set(key, v)?
            || LossWeightsKv(&mut self.loss).set(key, v)?
            || self.augment.set(key, v)?
            || self.phantom.set(key, v)?
            || self.teacher.set(key, v)?)
    }

    fn to_kv(&self) -> KvDoc {
        let mut d = self.train.to_kv();
        d.extend(&self.prenet.to_kv());
        d.extend(&self.transnet.to_kv());
        d.extend(&loss_weights_kv(&self.loss));
        d.extend(&self.augment.to_kv());
        d.extend(&self.phantom.to_kv());
        d.extend(&self.teacher.to_kv());
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(19), 1e-4);
        assert_eq!(c.lr_at(20), 5e-5);
        assert_eq!(c.lr_at(45), 2.5e-5);
        for e in 0..=200 {
            assert_eq!(c.lr_at(e), 1e-4 * 0.5f64.powi(e as i32 / 20));
        }
    }

    #[test]
    fn published_training_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.early_stop_patience), (4, 200, 15));
        assert_eq!((c.weight_decay, c.beta1, c.beta2), (5e-4, 0.9, 0.999));
        assert_eq!(c.loss_variant, LossVariant::L6);
        assert_eq!(c.ablation, Ablation::V1);
    }

    #[test]
    fn kv_roundtrip_covers_every_section() {
        let mut c = RunConfig::desk();
        c.train.ablation = Ablation::V4;
        c.loss.deep = 0.25;
        c.augment.rotate_limit = 3.0;
        c.teacher.steps = 7;
        let doc = KvDoc::parse(&c.to_kv().to_string()).unwrap();
        let mut back = RunConfig::default();
        back.apply(&doc).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["train.seed=3", "train.seed=9", "loss.ssim=0.25"]).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.loss.ssim, 0.25);
        assert!(c.apply_overrides(&["train.nope=1"]).is_err());
        assert!(c.apply_overrides(&["train.ablation=v9"]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::default();
        c.train.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.train.beta2 = 1.0;
        assert!(c.validate().is_err());
        assert!(RunConfig::desk().validate().is_ok());
    }
}
