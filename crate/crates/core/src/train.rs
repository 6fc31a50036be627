//! Two-stage supervised training: data windows, augmentation, the AdamW loop
//! with step-halving learning rate, validation and early stopping.

use std::io::Write;

use h3d_tensor::optim::AdamW;
use h3d_tensor::{Graph, ParamStore, Tensor};
use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::AugTransform;
use crate::checkpoint::{Checkpoint, EpochRecord};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::losses::{build_metal_weight_map, total_loss, LossBreakdown, TotalLossInputs};
use crate::metrics::{slice_quality, SsimParams};
use crate::model::H3dMarNet;
use crate::phantom::PatientCase;
use crate::teacher::{make_pseudo_clean, train_teacher, Teacher, TeacherMode};

pub const LOG_HEADER: &str = "epoch,step,loss_total,loss_pre,loss_trans,loss_deep,lr,val_psnr";

/// Slice indices of the depth-`k` window centred on `centre`; indices past
/// either end repeat the edge slice.
pub fn window_indices(depth: usize, centre: usize, k: usize) -> Vec<usize> {
    let half = (k / 2) as isize;
    (-half..=half).map(|o| (centre as isize + o).clamp(0, depth as isize - 1) as usize).collect()
}

/// A case in network units, ready for windowing.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub patient_id: String,
    /// kVCT normalised with its window.
    pub input: Array3<f32>,
    /// Stage-1 target (pseudo-clean kVCT), normalised.
    pub pseudo_clean: Array3<f32>,
    /// MVCT normalised with its window.
    pub target: Array3<f32>,
    /// Metal-artifact weight map.
    pub weight: Array3<f32>,
    pub body: Array3<bool>,
    pub artifact_slices: Vec<usize>,
}

impl PreparedCase {
    pub fn depth(&self) -> usize {
        self.input.dim().0
    }
}

/// Normalises a case and derives its stage-1 target and weight map.
pub fn prepare_case(case: &PatientCase, cfg: &RunConfig, teacher: Option<&Teacher>) -> Result<PreparedCase> {
    case.validate()?;
    let (_, h, w) = case.kvct.channel0().dim();
    let r = cfg.transnet.resolution;
    if (h, w) != (r, r) {
        return Err(Error::Data(format!("case {} has {h}x{w} slices, model expects {r}x{r}", case.patient_id)));
    }
    let t = &cfg.train;
    Ok(PreparedCase {
        patient_id: case.patient_id.clone(),
        input: case.kvct.normalize_hu()?.channel0().to_owned(),
        pseudo_clean: make_pseudo_clean(case, t.teacher_mode, teacher)?.normalize_hu()?.channel0().to_owned(),
        target: case.mvct.normalize_hu()?.channel0().to_owned(),
        weight: build_metal_weight_map(case.kvct.channel0(), t.metal_threshold, t.metal_beta, t.metal_radius),
        body: case.body_mask.clone(),
        artifact_slices: case.artifact_slices.clone(),
    })
}

/// Stacks windows into a (B, 1, k, H, W) tensor, warping each sample when asked.
fn gather(
    cases: &[PreparedCase],
    pick: impl Fn(&PreparedCase) -> &Array3<f32>,
    samples: &[(usize, usize)],
    k: usize,
    warps: Option<&[AugTransform]>,
    nearest: bool,
) -> Tensor<f32> {
    let (_, h, w) = pick(&cases[0]).dim();
    let mut data = Vec::with_capacity(samples.len() * k * h * w);
    for (j, &(ci, centre)) in samples.iter().enumerate() {
        let vol = pick(&cases[ci]);
        let idx = window_indices(vol.dim().0, centre, k);
        let win = vol.select(Axis(0), &idx);
        match warps.map(|t| t[j]) {
            Some(t) if nearest => data.extend(t.warp_nearest(win.view()).iter().copied()),
            Some(t) => data.extend(t.warp_bilinear(win.view()).iter().copied()),
            None => data.extend(win.iter().copied()),
        }
    }
    Tensor::from_vec(&[samples.len(), 1, k, h, w], data)
}

/// Runs the model over every window of `case` and keeps centre slices.
/// Returns (stage-1 volume if any, final stage-2 volume), normalised.
pub fn predict_case(model: &H3dMarNet, params: &ParamStore<f32>, case: &PreparedCase, k: usize, batch: usize) -> Result<(Option<Array3<f32>>, Array3<f32>)> {
    let (d, h, w) = case.input.dim();
    let mut stage1 = model.prenet.as_ref().map(|_| Array3::zeros((d, h, w)));
    let mut stage2 = Array3::zeros((d, h, w));
    let centres: Vec<usize> = (0..d).collect();
    let one = std::slice::from_ref(case);
    for chunk in centres.chunks(batch.max(1)) {
        let samples: Vec<(usize, usize)> = chunk.iter().map(|&c| (0, c)).collect();
        let g = Graph::with_params(params);
        let x = g.input(gather(one, |c| &c.input, &samples, k, None, false));
        let out = model.forward(&g, x, false)?;
        let mid = k / 2;
        let keep = |v: &Tensor<f32>, dst: &mut Array3<f32>| {
            for (j, &c) in chunk.iter().enumerate() {
                let off = (j * k + mid) * h * w;
                let slice = &v.data()[off..off + h * w];
                dst.index_axis_mut(Axis(0), c).iter_mut().zip(slice).for_each(|(o, &s)| *o = s);
            }
        };
        keep(&g.tensor(out.stage2.last()), &mut stage2);
        if let (Some(dst), Some(s1)) = (stage1.as_mut(), out.stage1.as_ref()) {
            keep(&g.tensor(s1.output), dst);
        }
    }
    if !stage2.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite prediction for {}", case.patient_id)));
    }
    Ok((stage1, stage2))
}

/// Mean over cases of the slice-averaged body-mask PSNR on all slices (normalised units).
pub fn validation_psnr(model: &H3dMarNet, params: &ParamStore<f32>, cases: &[PreparedCase], k: usize, batch: usize) -> Result<f64> {
    let mut acc = 0.0;
    for c in cases {
        let (_, pred) = predict_case(model, params, c, k, batch)?;
        let all: Vec<usize> = (0..c.depth()).collect();
        let q = slice_quality(
            pred.mapv(f64::from).view(),
            c.target.mapv(f64::from).view(),
            Some(c.body.view()),
            &all,
            2.0,
            &SsimParams::default(),
        )?;
        acc += q.psnr;
    }
    Ok(acc / cases.len() as f64)
}

pub struct TrainOutcome {
    /// Best-epoch parameters plus the full history.
    pub checkpoint: Checkpoint,
    pub model: H3dMarNet,
    /// Teacher trained for this run, in learned mode.
    pub teacher: Option<Teacher>,
    pub stopped_early: bool,
}

/// Builds the model described by `cfg` with fresh parameters.
pub fn build_model(cfg: &RunConfig) -> Result<(H3dMarNet, ParamStore<f32>)> {
    H3dMarNet::init(&cfg.prenet, &cfg.transnet, cfg.train.ablation, cfg.train.seed)
}

/// Rebuilds the configuration and model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, H3dMarNet, ParamStore<f32>)> {
    let mut cfg = RunConfig::default();
    cfg.apply(&ckpt.config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let (model, mut params) = build_model(&cfg)?;
    if params.len() != ckpt.params.len() {
        return Err(Error::Format(format!("checkpoint holds {} tensors, model has {}", ckpt.params.len(), params.len())));
    }
    params.load_from(&ckpt.params).map_err(Error::Format)?;
    Ok((cfg, model, params))
}

fn log_line(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))
}

/// Trains per `cfg`. `val` may be empty, in which case the training cases are
/// also used for validation. Writes [`LOG_HEADER`] and one line per epoch to `log`.
pub fn train(cfg: &RunConfig, train_cases: &[PatientCase], val: &[PatientCase], teacher: Option<&Teacher>, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let t = &cfg.train;
    let learned = match (t.teacher_mode, teacher) {
        (TeacherMode::Learned, None) => Some(train_teacher(train_cases, &cfg.teacher)?.0),
        _ => None,
    };
    let teacher = teacher.or(learned.as_ref());
    let prep = |cs: &[PatientCase]| cs.iter().map(|c| prepare_case(c, cfg, teacher)).collect::<Result<Vec<_>>>();
    let cases = prep(train_cases)?;
    let val_cases = if val.is_empty() { cases.clone() } else { prep(val)? };
    let k = cfg.transnet.depth;

    let (model, mut params) = build_model(cfg)?;
    let ctx = cfg.loss_context();
    let mut opt = AdamW::new(t.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x5eed_da7a);
    let mut samples: Vec<(usize, usize)> = cases.iter().enumerate().flat_map(|(i, c)| (0..c.depth()).map(move |z| (i, z))).collect();

    log_line(log, LOG_HEADER)?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>, Vec<(String, _)>)> = None;
    let mut step = 0u64;
    let mut last_epoch = 0;
    let mut stopped_early = false;
    for epoch in 0..t.epochs {
        last_epoch = epoch;
        let lr = t.lr_at(epoch);
        samples.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut n_batches = 0usize;
        for batch in samples.chunks(t.batch_size) {
            let warps: Option<Vec<AugTransform>> = t.augment.then(|| batch.iter().map(|_| AugTransform::draw(&cfg.augment, &mut rng)).collect());
            let w = warps.as_deref();
            let grads = {
                let g = Graph::with_params(&params);
                let x = g.input(gather(&cases, |c| &c.input, batch, k, w, false));
                let out = model.forward(&g, x, t.detach_stages)?;
                let mvct = g.input(gather(&cases, |c| &c.target, batch, k, w, false));
                let weights = g.input(gather(&cases, |c| &c.weight, batch, k, w, true));
                let stage1 = match &out.stage1 {
                    Some(s) => Some((s.output, g.input(gather(&cases, |c| &c.pseudo_clean, batch, k, w, false)))),
                    None => None,
                };
                let terms = total_loss(&g, &ctx, &TotalLossInputs { stage1, stage2: &out.stage2.predictions, mvct, weights })?;
                let v = terms.values(&g);
                if !v.total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss became {} at epoch {epoch}, step {step} (prenet {}, transnet {}, deep {})",
                        v.total, v.prenet, v.transnet, v.deep
                    )));
                }
                sums.total += v.total;
                sums.prenet += v.prenet;
                sums.transnet += v.transnet;
                sums.deep += v.deep;
                g.backward(terms.total)
            };
            if !grads.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at epoch {epoch}, step {step}")));
            }
            opt.step(&mut params, &grads, lr);
            step += 1;
            n_batches += 1;
        }
        let n = n_batches as f64;
        let loss = LossBreakdown { total: sums.total / n, prenet: sums.prenet / n, transnet: sums.transnet / n, deep: sums.deep / n };
        let val_psnr = validation_psnr(&model, &params, &val_cases, k, t.batch_size)?;
        history.push(EpochRecord { epoch, step, loss, lr, val_psnr });
        log_line(log, &format!("{epoch},{step},{},{},{},{},{lr},{val_psnr}", loss.total, loss.prenet, loss.transnet, loss.deep))?;

        if best.as_ref().is_none_or(|b| val_psnr > b.0) {
            best = Some((val_psnr, epoch, params.clone(), Checkpoint::capture_moments(&params, &opt)));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= t.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let (best_val_psnr, best_epoch, best_params, moments) = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint {
        config: cfg.to_kv(),
        params: best_params,
        moments,
        epoch: last_epoch,
        best_epoch,
        best_val_psnr,
        step,
        history,
    };
    Ok(TrainOutcome { checkpoint, model, teacher: learned, stopped_early })
}
