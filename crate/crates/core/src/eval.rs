//! Test-set evaluation: ROI PSNR / SSIM on all slices and on artifact slices,
//! HU correlation and histogram skewness, written as `key=value` text plus a
//! per-patient CSV table.

use std::fmt::Write as _;

use h3d_tensor::ParamStore;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::metrics::{histogram_stats, hu_correlation, masked_values, slice_quality, Quality, SliceSubset, SsimParams};
use crate::model::H3dMarNet;
use crate::phantom::PatientCase;
use crate::train::{predict_case, PreparedCase};
use crate::volume::{HuWindow, Modality};

/// Network outputs for one case, in normalised units.
#[derive(Clone, Debug, PartialEq)]
pub struct CasePrediction {
    /// Stage-1 output (kVCT window), when the model has a PreNet.
    pub stage1: Option<Array3<f32>>,
    /// Final MVCT estimate (MVCT window).
    pub stage2: Array3<f32>,
}

/// Anything that turns a case into a prediction.
pub trait VolumePredictor {
    fn predict(&self, case: &PatientCase) -> Result<CasePrediction>;
}

/// A trained model with its parameters.
pub struct ModelPredictor<'a> {
    pub model: &'a H3dMarNet,
    pub params: &'a ParamStore<f32>,
    /// Window depth (the model's input depth).
    pub depth: usize,
    pub batch: usize,
}

impl VolumePredictor for ModelPredictor<'_> {
    fn predict(&self, case: &PatientCase) -> Result<CasePrediction> {
        let prep = PreparedCase {
            patient_id: case.patient_id.clone(),
            input: case.kvct.normalize_hu()?.channel0().to_owned(),
            pseudo_clean: Array3::zeros((0, 0, 0)),
            target: Array3::zeros((0, 0, 0)),
            weight: Array3::zeros((0, 0, 0)),
            body: case.body_mask.clone(),
            artifact_slices: case.artifact_slices.clone(),
        };
        let (stage1, stage2) = predict_case(self.model, self.params, &prep, self.depth, self.batch)?;
        Ok(CasePrediction { stage1, stage2 })
    }
}

/// Per-slice quality values, kept so that patient means and pooled means come from the same numbers.
#[derive(Clone, Debug, Default, PartialEq)]
struct SliceScores {
    psnr: Vec<f64>,
    ssim: Vec<f64>,
}

impl SliceScores {
    fn mean(&self) -> Option<Quality> {
        let n = self.psnr.len();
        (n > 0).then(|| Quality { psnr: self.psnr.iter().sum::<f64>() / n as f64, ssim: self.ssim.iter().sum::<f64>() / n as f64 })
    }

    fn extend(&mut self, other: &SliceScores) {
        self.psnr.extend(&other.psnr);
        self.ssim.extend(&other.ssim);
    }
}

/// Body-mask PSNR / SSIM of every listed slice whose mask is non-empty.
fn score_slices(pred: &Array3<f64>, target: &Array3<f64>, body: &Array3<bool>, slices: &[usize]) -> Result<SliceScores> {
    let mut s = SliceScores::default();
    for &z in slices {
        if !body.index_axis(ndarray::Axis(0), z).iter().any(|&b| b) {
            continue;
        }
        let q = slice_quality(pred.view(), target.view(), Some(body.view()), &[z], 2.0, &SsimParams::default())?;
        s.psnr.push(q.psnr);
        s.ssim.push(q.ssim);
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientMetrics {
    pub patient_id: String,
    pub n_slices: usize,
    pub n_artifact: usize,
    /// Stage-2 output against MVCT on all slices.
    pub all: Quality,
    /// Same on artifact slices; absent when the patient has none.
    pub art: Option<Quality>,
    /// Stage-1 output against the artifact-free kVCT, all slices.
    pub stage1: Option<Quality>,
}

/// R² of the target MVCT HU regressed on another volume's HU, per slice subset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationTriple {
    pub all: f64,
    pub clean: f64,
    pub artifact: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub patients: Vec<PatientMetrics>,
    /// Means over patients.
    pub all: Quality,
    pub art: Option<Quality>,
    /// Means over every slice of the test set pooled together.
    pub pooled_all: Quality,
    pub pooled_art: Option<Quality>,
    /// MVCT against the input kVCT.
    pub r2_input: CorrelationTriple,
    /// MVCT against the prediction.
    pub r2_output: CorrelationTriple,
    /// Body-voxel skewness on artifact slices (all slices when there are none).
    pub skew_kvct: f64,
    pub skew_mvct: f64,
    pub skew_output: f64,
}

fn f(x: f64) -> String {
    // f64 Display already prints `inf` / `NaN`; keep the sentinel lowercase
    if x.is_nan() {
        "nan".into()
    } else {
        x.to_string()
    }
}

fn opt_q(q: Option<Quality>) -> (String, String) {
    q.map_or(("na".into(), "na".into()), |q| (f(q.psnr), f(q.ssim)))
}

pub const CSV_HEADER: &str = "patient_id,n_slices,n_artifact,psnr_all,ssim_all,psnr_art,ssim_art,psnr_stage1,ssim_stage1";

impl EvalReport {
    /// `key=value` text. Infinite PSNR is written `inf`; absent values `na`.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let (pa, sa) = opt_q(self.art);
        let (ppa, psa) = opt_q(self.pooled_art);
        let _ = writeln!(s, "patients={}", self.patients.len());
        let _ = writeln!(s, "all.psnr={}\nall.ssim={}", f(self.all.psnr), f(self.all.ssim));
        let _ = writeln!(s, "art.psnr={pa}\nart.ssim={sa}");
        let _ = writeln!(s, "pooled.all.psnr={}\npooled.all.ssim={}", f(self.pooled_all.psnr), f(self.pooled_all.ssim));
        let _ = writeln!(s, "pooled.art.psnr={ppa}\npooled.art.ssim={psa}");
        for (name, r) in [("input", self.r2_input), ("output", self.r2_output)] {
            let _ = writeln!(s, "r2.{name}.all={}\nr2.{name}.clean={}\nr2.{name}.artifact={}", f(r.all), f(r.clean), f(r.artifact));
        }
        let _ = writeln!(s, "skew.kvct={}\nskew.mvct={}\nskew.output={}", f(self.skew_kvct), f(self.skew_mvct), f(self.skew_output));
        s
    }

    /// One row per patient under [`CSV_HEADER`].
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for p in &self.patients {
            let (pa, sa) = opt_q(p.art);
            let (p1, s1) = opt_q(p.stage1);
            let _ = writeln!(s, "{},{},{},{},{},{pa},{sa},{p1},{s1}", p.patient_id, p.n_slices, p.n_artifact, f(p.all.psnr), f(p.all.ssim));
        }
        s
    }
}

fn to_f64(a: &Array3<f32>) -> Array3<f64> {
    a.mapv(f64::from)
}

fn to_hu(a: &Array3<f32>, window: HuWindow) -> Array3<f64> {
    a.mapv(|v| window.denormalize(f64::from(v)))
}

/// Evaluates `predictor` on `cases`. Quality metrics use the body mask as ROI
/// in normalised units (data range 2); correlation and skewness use HU over
/// the whole test set.
pub fn evaluate(predictor: &dyn VolumePredictor, cases: &[PatientCase]) -> Result<EvalReport> {
    Ok(evaluate_with_predictions(predictor, cases)?.0)
}

/// [`evaluate`], also returning the predictions.
pub fn evaluate_with_predictions(predictor: &dyn VolumePredictor, cases: &[PatientCase]) -> Result<(EvalReport, Vec<CasePrediction>)> {
    if cases.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let mvct_window = Modality::Mvct.default_window();
    let mut patients = Vec::new();
    let mut predictions = Vec::new();
    let (mut pooled_all, mut pooled_art) = (SliceScores::default(), SliceScores::default());
    let (mut kv_hu, mut mv_hu, mut out_hu, mut body, mut art) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut skew_kv, mut skew_mv, mut skew_out) = (Vec::new(), Vec::new(), Vec::new());
    for case in cases {
        case.validate()?;
        let pred = predictor.predict(case)?;
        let target = case.mvct.normalize_hu()?.channel0().to_owned();
        if pred.stage2.dim() != target.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs target {:?} for {}", pred.stage2.dim(), target.dim(), case.patient_id)));
        }
        let (p64, t64) = (to_f64(&pred.stage2), to_f64(&target));
        let all_slices: Vec<usize> = (0..case.depth()).collect();
        let s_all = score_slices(&p64, &t64, &case.body_mask, &all_slices)?;
        let s_art = score_slices(&p64, &t64, &case.body_mask, &case.artifact_slices)?;
        let all = s_all.mean().ok_or_else(|| Error::Data(format!("case {} has an empty body mask", case.patient_id)))?;
        let stage1 = match &pred.stage1 {
            Some(s1) => {
                let clean = case.kvct_clean.normalize_hu()?.channel0().mapv(f64::from);
                score_slices(&to_f64(s1), &clean, &case.body_mask, &all_slices)?.mean()
            }
            None => None,
        };
        pooled_all.extend(&s_all);
        pooled_art.extend(&s_art);
        patients.push(PatientMetrics {
            patient_id: case.patient_id.clone(),
            n_slices: case.depth(),
            n_artifact: case.artifact_slices.len(),
            all,
            art: s_art.mean(),
            stage1,
        });

        let kv = case.kvct.channel0().mapv(f64::from);
        let mv = case.mvct.channel0().mapv(f64::from);
        let out = to_hu(&pred.stage2, mvct_window);
        let skew_slices = if case.artifact_slices.is_empty() { all_slices.clone() } else { case.artifact_slices.clone() };
        skew_kv.extend(masked_values(kv.view(), case.body_mask.view(), &skew_slices));
        skew_mv.extend(masked_values(mv.view(), case.body_mask.view(), &skew_slices));
        skew_out.extend(masked_values(out.view(), case.body_mask.view(), &skew_slices));
        kv_hu.push(kv);
        mv_hu.push(mv);
        out_hu.push(out);
        body.push(case.body_mask.clone());
        art.push(case.artifact_slices.clone());
        predictions.push(pred);
    }

    // correlation over the pooled test set: stack volumes along depth
    let stack = |vs: &[Array3<f64>]| ndarray::concatenate(ndarray::Axis(0), &vs.iter().map(|v| v.view()).collect::<Vec<_>>()).expect("equal slice sizes");
    let body_all = ndarray::concatenate(ndarray::Axis(0), &body.iter().map(|v| v.view()).collect::<Vec<_>>())
        .map_err(|_| Error::Shape("test cases differ in slice size".into()))?;
    let mut offset = 0;
    let mut art_all = Vec::new();
    for (c, a) in cases.iter().zip(&art) {
        art_all.extend(a.iter().map(|z| z + offset));
        offset += c.depth();
    }
    let (kv, mv, out) = (stack(&kv_hu), stack(&mv_hu), stack(&out_hu));
    let corr = |x: &Array3<f64>| -> Result<CorrelationTriple> {
        let r = |s| hu_correlation(x.view(), mv.view(), body_all.view(), &art_all, s);
        Ok(CorrelationTriple { all: r(SliceSubset::All)?, clean: r(SliceSubset::Clean)?, artifact: r(SliceSubset::Artifact)? })
    };
    let window = Modality::Kvct.default_window();
    let n = patients.len() as f64;
    let mean_q = |qs: Vec<Quality>| {
        let m = qs.len() as f64;
        (m > 0.0).then(|| Quality { psnr: qs.iter().map(|q| q.psnr).sum::<f64>() / m, ssim: qs.iter().map(|q| q.ssim).sum::<f64>() / m })
    };
    let report = EvalReport {
        all: Quality { psnr: patients.iter().map(|p| p.all.psnr).sum::<f64>() / n, ssim: patients.iter().map(|p| p.all.ssim).sum::<f64>() / n },
        art: mean_q(patients.iter().filter_map(|p| p.art).collect()),
        pooled_all: pooled_all.mean().expect("non-empty"),
        pooled_art: pooled_art.mean(),
        r2_input: corr(&kv)?,
        r2_output: corr(&out)?,
        skew_kvct: histogram_stats(skew_kv, window).skewness,
        skew_mvct: histogram_stats(skew_mv, mvct_window).skewness,
        skew_output: histogram_stats(skew_out, mvct_window).skewness,
        patients,
    };
    Ok((report, predictions))
}
