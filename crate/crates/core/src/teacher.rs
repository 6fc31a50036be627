//! Pseudo-clean kVCT targets for stage 1: either the generator's artifact-free
//! volume or the prediction of a small slice-wise teacher network.

use std::fmt;
use std::str::FromStr;

use h3d_tensor::layers::{Conv3d, WeightInit};
use h3d_tensor::optim::{AdamW, AdamWConfig};
use h3d_tensor::{ConvGeometry, Graph, ParamBuilder, ParamStore, Tensor, Var};
use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kv::{parse_value, KvConfig, KvDoc};
use crate::losses::{build_metal_weight_map, weighted_l1};
use crate::metrics::psnr;
use crate::phantom::PatientCase;
use crate::volume::{Modality, Volume};

pub const TEACHER_PREFIX: &str = "teacher";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TeacherMode {
    /// The generator's artifact-free kVCT.
    #[default]
    Oracle,
    /// A trained [`Teacher`].
    Learned,
}

impl fmt::Display for TeacherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherMode::Oracle => "oracle",
            TeacherMode::Learned => "learned",
        })
    }
}

impl FromStr for TeacherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(Self::Oracle),
            "learned" => Ok(Self::Learned),
            _ => Err(Error::Config(format!("unknown teacher mode {s:?} (expected oracle or learned)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub width: usize,
    /// Hidden convolutions after the input layer.
    pub layers: usize,
    pub steps: usize,
    /// Slices per optimisation step.
    pub batch_slices: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { width: 16, layers: 4, steps: 300, batch_slices: 8, lr: 2e-3, seed: 0 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.steps == 0 || self.batch_slices == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid teacher settings {self:?}")));
        }
        Ok(())
    }
}

impl KvConfig for TeacherConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let Some(k) = key.strip_prefix("teacher.") else { return Ok(false) };
        match k {
            "width" => self.width = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "batch_slices" => self.batch_slices = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.push("teacher.width", self.width);
        d.push("teacher.layers", self.layers);
        d.push("teacher.steps", self.steps);
        d.push("teacher.batch_slices", self.batch_slices);
        d.push("teacher.lr", self.lr);
        d.push("teacher.seed", self.seed);
        d
    }
}

/// Residual slice-wise CNN: `x + out(relu(...relu(conv_in x)))`.
#[derive(Clone, Debug)]
struct TeacherNet {
    convs: Vec<Conv3d>,
    out: Conv3d,
}

impl TeacherNet {
    fn new(pb: &mut ParamBuilder<'_, f32>, cfg: &TeacherConfig) -> Self {
        let geom = ConvGeometry::same([1, 3, 3]);
        let mut convs = vec![Conv3d::new(pb, "conv0", 1, cfg.width, geom, WeightInit::RELU)];
        for i in 0..cfg.layers {
            convs.push(Conv3d::new(pb, &format!("conv{}", i + 1), cfg.width, cfg.width, geom, WeightInit::RELU));
        }
        let out = Conv3d::new(pb, "out", cfg.width, 1, geom, WeightInit::Zeros);
        Self { convs, out }
    }

    fn forward(&self, g: &Graph<'_, f32>, x: Var) -> Var {
        let h = self.convs.iter().fold(x, |h, c| g.relu(c.forward(g, h)));
        g.add(x, self.out.forward(g, h))
    }
}

/// A trained artifact-removal teacher working on normalised kVCT slices.
#[derive(Clone, Debug)]
pub struct Teacher {
    cfg: TeacherConfig,
    net: TeacherNet,
    pub params: ParamStore<f32>,
}

/// Outcome of [`train_teacher`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherReport {
    /// Mean whole-volume PSNR against `kvct_clean` on the training cases, normalised units.
    pub psnr_before: f64,
    pub psnr_after: f64,
}

const PREDICT_CHUNK: usize = 8;

impl Teacher {
    pub fn new(cfg: &TeacherConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = TeacherNet::new(&mut ParamBuilder::new(&mut params, &mut rng).sub(TEACHER_PREFIX), cfg);
        Ok(Self { cfg: cfg.clone(), net, params })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    /// Slice-wise prediction on normalised (D, H, W) data.
    fn predict_normalized(&self, x: &Array3<f32>) -> Array3<f32> {
        let (d, h, w) = x.dim();
        let mut out = Array3::zeros((d, h, w));
        for z0 in (0..d).step_by(PREDICT_CHUNK) {
            let z1 = (z0 + PREDICT_CHUNK).min(d);
            let chunk = x.slice(s![z0..z1, .., ..]);
            let g = Graph::with_params(&self.params);
            let xi = g.input(Tensor::from_vec(&[1, 1, z1 - z0, h, w], chunk.iter().copied().collect()));
            let y = g.tensor(self.net.forward(&g, xi));
            out.slice_mut(s![z0..z1, .., ..]).assign(&Array3::from_shape_vec((z1 - z0, h, w), y.data().to_vec()).expect("teacher output shape"));
        }
        out
    }

    /// Teacher estimate of the artifact-free kVCT, in HU.
    pub fn predict(&self, kvct: &Volume) -> Result<Volume> {
        if kvct.modality != Modality::Kvct {
            return Err(Error::Data(format!("teacher expects a kVCT volume, got {}", kvct.modality)));
        }
        let norm = kvct.normalize_hu()?;
        let (c, d, h, w) = norm.dims();
        let mut data = norm.data().clone();
        for ch in 0..c {
            let pred = self.predict_normalized(&data.index_axis(Axis(0), ch).to_owned());
            data.index_axis_mut(Axis(0), ch).assign(&pred);
        }
        debug_assert_eq!(data.dim(), (c, d, h, w));
        norm.with_data(data)?.denormalize_hu()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.cfg.to_kv(), self.params.clone())
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut cfg = TeacherConfig::default();
        cfg.apply(&c.config)?;
        let mut t = Self::new(&cfg)?;
        t.params.load_from(&c.params).map_err(Error::Format)?;
        if t.params.len() != c.params.len() {
            return Err(Error::Format("teacher checkpoint has extra or missing tensors".into()));
        }
        Ok(t)
    }
}

fn volume_psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    psnr(a.mapv(f64::from).view(), b.mapv(f64::from).view(), 2.0)
}

/// Fits a teacher mapping `kvct` to `kvct_clean` on `cases` with weighted L1
/// (metal-weighted as in the main objective). Half of every batch is drawn
/// from artifact slices when there are any.
pub fn train_teacher(cases: &[PatientCase], cfg: &TeacherConfig) -> Result<(Teacher, TeacherReport)> {
    if cases.is_empty() {
        return Err(Error::Data("teacher training needs at least one case".into()));
    }
    let mut teacher = Teacher::new(cfg)?;
    let threshold = Modality::Kvct.artifact_threshold();
    struct Prepared {
        input: Array3<f32>,
        target: Array3<f32>,
        weight: Array3<f32>,
    }
    let prepared: Vec<Prepared> = cases
        .iter()
        .map(|c| {
            Ok(Prepared {
                input: c.kvct.normalize_hu()?.channel0().to_owned(),
                target: c.kvct_clean.normalize_hu()?.channel0().to_owned(),
                weight: build_metal_weight_map(c.kvct.channel0(), threshold, 4.0, 3),
            })
        })
        .collect::<Result<_>>()?;
    let (h, w) = (prepared[0].input.dim().1, prepared[0].input.dim().2);
    if prepared.iter().any(|p| (p.input.dim().1, p.input.dim().2) != (h, w)) {
        return Err(Error::Shape("teacher cases differ in slice size".into()));
    }
    let all: Vec<(usize, usize)> = prepared.iter().enumerate().flat_map(|(i, p)| (0..p.input.dim().0).map(move |z| (i, z))).collect();
    let artifact: Vec<(usize, usize)> = cases.iter().enumerate().flat_map(|(i, c)| c.artifact_slices.iter().map(move |&z| (i, z))).collect();

    let mean_psnr = |t: &Teacher| -> Result<f64> {
        let mut acc = 0.0;
        for p in &prepared {
            acc += volume_psnr(&t.predict_normalized(&p.input), &p.target)?;
        }
        Ok(acc / prepared.len() as f64)
    };
    let psnr_before = mean_psnr(&teacher)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7eac_4e55);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let k = cfg.batch_slices;
    let plane = h * w;
    for step in 0..cfg.steps {
        let mut picks: Vec<(usize, usize)> = (0..k)
            .map(|j| {
                let pool = if j % 2 == 0 && !artifact.is_empty() { &artifact } else { &all };
                pool[rng.random_range(0..pool.len())]
            })
            .collect();
        picks.shuffle(&mut rng);
        let gather = |f: &dyn Fn(&Prepared) -> &Array3<f32>| {
            let mut v = Vec::with_capacity(k * plane);
            for &(i, z) in &picks {
                v.extend(f(&prepared[i]).index_axis(Axis(0), z).iter().copied());
            }
            Tensor::from_vec(&[1, 1, k, h, w], v)
        };
        let grads = {
            let g = Graph::with_params(&teacher.params);
            let x = g.input(gather(&|p| &p.input));
            let y = g.input(gather(&|p| &p.target));
            let wm = g.input(gather(&|p| &p.weight));
            let loss = weighted_l1(&g, teacher.net.forward(&g, x), y, wm)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("teacher loss became {value} at step {step}")));
            }
            g.backward(loss)
        };
        // cosine decay to 5% of the base rate
        let t = step as f64 / cfg.steps as f64;
        let lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
        opt.step(&mut teacher.params, &grads, lr);
    }
    let psnr_after = mean_psnr(&teacher)?;
    Ok((teacher, TeacherReport { psnr_before, psnr_after }))
}

/// Stage-1 target for `case`. `Learned` needs a teacher.
pub fn make_pseudo_clean(case: &PatientCase, mode: TeacherMode, teacher: Option<&Teacher>) -> Result<Volume> {
    match mode {
        TeacherMode::Oracle => Ok(case.kvct_clean.clone()),
        TeacherMode::Learned => {
            let t = teacher.ok_or_else(|| Error::Config("teacher mode 'learned' needs a trained teacher".into()))?;
            t.predict(&case.kvct)
        }
    }
}
