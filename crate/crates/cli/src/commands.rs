use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use h3d_marnet::checkpoint::Checkpoint;
use h3d_marnet::config::RunConfig;
use h3d_marnet::eval::{evaluate_with_predictions, CasePrediction, EvalReport, ModelPredictor};
use h3d_marnet::kv::{KvConfig, KvDoc};
use h3d_marnet::metrics::{histogram_stats, hu_correlation, masked_values, r_squared, SliceSubset, HISTOGRAM_BINS};
use h3d_marnet::model::{count_parameters, Ablation, H3dMarNet};
use h3d_marnet::phantom::{generate_cohort, manifest_fraction, read_dataset, split_dataset, write_dataset, PatientCase};
use h3d_marnet::teacher::{train_teacher, Teacher, TeacherMode};
use h3d_marnet::train::{build_model, load_model, train};
use h3d_marnet::volume::Modality;
use h3d_marnet::Error;

use crate::grid::{write_grid, Panel};
use crate::{CliError, CliResult, Command, Common, Preset, Subset};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.h3dc";
pub const TEACHER_FILE: &str = "teacher.h3dc";
pub const LOG_FILE: &str = "train.log";
pub const SPLIT_FILE: &str = "split.txt";

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Generate { common, n } => generate(&common, n),
        Command::Train { common, data } => train_cmd(&common, &data),
        Command::Eval { common, checkpoint, data, subset, grids } => eval_cmd(&common, &checkpoint, &data, subset, grids),
        Command::Ablate { common, data, ablations, loss_variants } => ablate(&common, &data, &ablations, &loss_variants),
        Command::Analyze { common, data } => analyze(&common, &data),
        Command::Info { common, checkpoint } => info(&common, checkpoint.as_deref()),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    Error::Io { path: path.to_path_buf(), source }.into()
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Preset, then the config file, then `--set`, then the dedicated flags.
pub fn resolve(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match common.preset {
        Preset::Desk => RunConfig::desk(),
        Preset::Full => RunConfig::default(),
    };
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        cfg.apply(&KvDoc::parse(&text)?)?;
    }
    cfg.apply_overrides(&common.set)?;
    cfg.apply_overrides(&flag_overrides(common))?;
    cfg.validate()?;
    Ok(cfg)
}

fn flag_overrides(c: &Common) -> Vec<String> {
    let mut o = Vec::new();
    if let Some(s) = c.seed {
        o.push(format!("train.seed={s}"));
        o.push(format!("phantom.seed={s}"));
    }
    if let Some(a) = &c.ablation {
        o.push(format!("train.ablation={a}"));
    }
    if let Some(l) = &c.loss_variant {
        o.push(format!("train.loss_variant={l}"));
    }
    if let Some(t) = &c.teacher_mode {
        o.push(format!("train.teacher_mode={t}"));
    }
    if c.detach_stages {
        o.push("train.detach_stages=true".into());
    }
    if let Some(r) = c.resolution {
        o.extend([format!("transnet.resolution={r}"), format!("phantom.height={r}"), format!("phantom.width={r}")]);
    }
    o
}

fn write_config(out: &Path, doc: &KvDoc) -> CliResult<()> {
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &doc.to_string())
}

fn load_cases(data: &Path) -> CliResult<Vec<PatientCase>> {
    let cases = read_dataset(data)?;
    if cases.is_empty() {
        return Err(Error::Data(format!("dataset {} lists no patients", data.display())).into());
    }
    Ok(cases)
}

/// Patient-wise split; with fewer than two patients everything is training data.
pub fn split(cfg: &RunConfig, cases: &[PatientCase]) -> CliResult<(Vec<PatientCase>, Vec<PatientCase>)> {
    let ids: BTreeSet<&str> = cases.iter().map(|c| c.patient_id.as_str()).collect();
    if ids.len() < 2 {
        return Ok((cases.to_vec(), Vec::new()));
    }
    Ok(split_dataset(cases, |c| &c.patient_id, cfg.train.train_frac, cfg.train.seed)?)
}

fn ids(cases: &[PatientCase]) -> String {
    cases.iter().map(|c| c.patient_id.as_str()).collect::<Vec<_>>().join(",")
}

fn generate(common: &Common, n: usize) -> CliResult<()> {
    let cfg = resolve(common)?;
    let cases = generate_cohort(n, &cfg.phantom)?;
    let entries = write_dataset(&common.out, &cases)?;
    write_config(&common.out, &cfg.to_kv())?;
    println!("wrote {} patients to {} (artifact-slice fraction {:.4})", entries.len(), common.out.display(), manifest_fraction(&entries));
    Ok(())
}

fn train_cmd(common: &Common, data: &Path) -> CliResult<()> {
    let cfg = resolve(common)?;
    let cases = load_cases(data)?;
    let (train_set, test_set) = split(&cfg, &cases)?;
    write_config(&common.out, &cfg.to_kv())?;
    write_text(&common.out.join(SPLIT_FILE), &format!("train={}\ntest={}\n", ids(&train_set), ids(&test_set)))?;
    let log_path = common.out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let outcome = train(&cfg, &train_set, &[], None, &mut log)?;
    outcome.checkpoint.save(common.out.join(CHECKPOINT_FILE))?;
    if let Some(t) = &outcome.teacher {
        t.to_checkpoint().save(common.out.join(TEACHER_FILE))?;
    }
    let c = &outcome.checkpoint;
    println!(
        "trained {} epochs ({} steps){}; best validation PSNR {:.3} dB at epoch {}",
        c.epoch + 1,
        c.step,
        if outcome.stopped_early { ", stopped early" } else { "" },
        c.best_val_psnr,
        c.best_epoch
    );
    Ok(())
}

fn pick_subset(cfg: &RunConfig, cases: Vec<PatientCase>, subset: Subset) -> CliResult<Vec<PatientCase>> {
    if subset == Subset::All {
        return Ok(cases);
    }
    let (tr, te) = split(cfg, &cases)?;
    let picked = if subset == Subset::Train { tr } else { te };
    if picked.is_empty() {
        return Err(Error::Data(format!("the {subset:?} subset is empty; use --subset all")).into());
    }
    Ok(picked)
}

/// Evaluates a checkpoint. Split and model come from the checkpoint's own
/// configuration, so preset and overrides do not apply here.
fn eval_cmd(common: &Common, ckpt_path: &Path, data: &Path, subset: Subset, grids: usize) -> CliResult<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (cfg, model, params) = load_model(&ckpt)?;
    let cases = pick_subset(&cfg, load_cases(data)?, subset)?;
    let predictor = ModelPredictor { model: &model, params: &params, depth: cfg.transnet.depth, batch: cfg.train.batch_size };
    let (report, preds) = evaluate_with_predictions(&predictor, &cases)?;
    write_config(&common.out, &ckpt.config)?;
    write_text(&common.out.join("report.txt"), &report.to_kv_text())?;
    write_text(&common.out.join("report.csv"), &report.to_csv())?;
    if grids > 0 {
        let dir = common.out.join("grids");
        create_dir(&dir)?;
        for (case, pred) in cases.iter().zip(&preds) {
            for z in grid_slices(case, grids) {
                write_case_grid(&dir, case, pred, z)?;
            }
        }
    }
    print_summary(&report);
    Ok(())
}

fn print_summary(r: &EvalReport) {
    println!("patients {}", r.patients.len());
    println!("all: PSNR {:.3} dB, SSIM {:.4}", r.all.psnr, r.all.ssim);
    if let Some(a) = r.art {
        println!("artifact slices: PSNR {:.3} dB, SSIM {:.4}", a.psnr, a.ssim);
    }
}

/// Artifact slices by descending metal content, then the rest from the centre out.
fn grid_slices(case: &PatientCase, n: usize) -> Vec<usize> {
    let metal = |z: usize| case.metal_mask.index_axis(ndarray::Axis(0), z).iter().filter(|&&m| m).count();
    let mut art = case.artifact_slices.clone();
    art.sort_by_key(|&z| (std::cmp::Reverse(metal(z)), z));
    let centre = case.depth() / 2;
    let mut rest: Vec<usize> = (0..case.depth()).filter(|z| !art.contains(z)).collect();
    rest.sort_by_key(|&z| (z.abs_diff(centre), z));
    art.into_iter().chain(rest).take(n).collect()
}

fn write_case_grid(dir: &Path, case: &PatientCase, pred: &CasePrediction, z: usize) -> CliResult<()> {
    let kw = Modality::Kvct.default_window();
    let mw = Modality::Mvct.default_window();
    let slice_of = |a: &ndarray::Array3<f32>| a.index_axis(ndarray::Axis(0), z).mapv(f64::from);
    let target = slice_of(&case.mvct.normalize_hu()?.channel0().to_owned());
    // input shown in its own window but scored against MVCT in MVCT units
    let input_hu = case.kvct.channel0().index_axis(ndarray::Axis(0), z).mapv(f64::from);
    let input_as_mvct = input_hu.mapv(|h| mw.normalize(h));
    let body = case.body_mask.index_axis(ndarray::Axis(0), z).to_owned();
    let stage1 = match &pred.stage1 {
        Some(s1) => {
            let clean = slice_of(&case.kvct_clean.normalize_hu()?.channel0().to_owned());
            let img = slice_of(s1);
            Some(Panel::scored("STAGE 1", img, &clean, &body)?)
        }
        None => None,
    };
    let panels = [
        Some(Panel::scored_shown("INPUT", input_hu.mapv(|h| kw.normalize(h)), &input_as_mvct, &target, &body)?),
        stage1,
        Some(Panel::scored("STAGE 2", slice_of(&pred.stage2), &target, &body)?),
        Some(Panel::plain("TARGET", target.clone())),
    ];
    let path = dir.join(format!("{}_z{z:03}.png", case.patient_id));
    write_grid(&path, &panels)
}

fn ablate(common: &Common, data: &Path, ablations: &[String], loss_variants: &[String]) -> CliResult<()> {
    let base = resolve(common)?;
    let cases = load_cases(data)?;
    let (train_set, test_set) = split(&base, &cases)?;
    let eval_set = if test_set.is_empty() { &train_set } else { &test_set };
    write_config(&common.out, &base.to_kv())?;
    let teacher: Option<Teacher> = match base.train.teacher_mode {
        TeacherMode::Learned => Some(train_teacher(&train_set, &base.teacher)?.0),
        TeacherMode::Oracle => None,
    };
    let variants: Vec<String> = if loss_variants.is_empty() { vec![base.train.loss_variant.to_string()] } else { loss_variants.to_vec() };
    let mut table = String::from("ablation,loss_variant,params,best_epoch,psnr_all,ssim_all,psnr_art,ssim_art\n");
    for a in ablations {
        let ablation: Ablation = a.parse()?;
        for lv in &variants {
            let mut cfg = base.clone();
            cfg.train.ablation = ablation;
            cfg.train.loss_variant = lv.parse()?;
            cfg.validate()?;
            let tag = format!("{ablation}_{}", cfg.train.loss_variant);
            let log_path = common.out.join(format!("train_{tag}.log"));
            let mut log = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
            let outcome = train(&cfg, &train_set, &[], teacher.as_ref(), &mut log)?;
            outcome.checkpoint.save(common.out.join(format!("checkpoint_{tag}.h3dc")))?;
            let params = &outcome.checkpoint.params;
            let predictor = ModelPredictor { model: &outcome.model, params, depth: cfg.transnet.depth, batch: cfg.train.batch_size };
            let (report, _) = evaluate_with_predictions(&predictor, eval_set)?;
            let (pa, sa) = report.art.map_or(("na".into(), "na".into()), |q| (q.psnr.to_string(), q.ssim.to_string()));
            let _ = writeln!(
                table,
                "{ablation},{},{},{},{},{},{pa},{sa}",
                cfg.train.loss_variant,
                count_parameters(params).total(),
                outcome.checkpoint.best_epoch,
                report.all.psnr,
                report.all.ssim
            );
            println!("{tag}: PSNR {:.3} dB, SSIM {:.4}", report.all.psnr, report.all.ssim);
        }
    }
    write_text(&common.out.join("ablation.csv"), &table)
}

/// Per-patient and pooled R² of MVCT on kVCT, plus body-voxel skewness on artifact slices.
fn analyze(common: &Common, data: &Path) -> CliResult<()> {
    let cfg = resolve(common)?;
    let cases = load_cases(data)?;
    let (kw, mw) = (Modality::Kvct.default_window(), Modality::Mvct.default_window());
    let subsets = [SliceSubset::All, SliceSubset::Clean, SliceSubset::Artifact];
    let mut csv = String::from("patient_id,n_artifact,r2_all,r2_clean,r2_artifact,skew_kvct,skew_mvct\n");
    let mut pooled: [(Vec<f64>, Vec<f64>); 3] = Default::default();
    let (mut kv_art, mut mv_art) = (Vec::new(), Vec::new());
    for case in &cases {
        case.validate()?;
        let kv = case.kvct.channel0().mapv(f64::from);
        let mv = case.mvct.channel0().mapv(f64::from);
        let mut r2 = [0.0; 3];
        for (i, s) in subsets.into_iter().enumerate() {
            r2[i] = hu_correlation(kv.view(), mv.view(), case.body_mask.view(), &case.artifact_slices, s)?;
            let zs = s.select(case.depth(), &case.artifact_slices);
            pooled[i].0.extend(masked_values(kv.view(), case.body_mask.view(), &zs));
            pooled[i].1.extend(masked_values(mv.view(), case.body_mask.view(), &zs));
        }
        let k = masked_values(kv.view(), case.body_mask.view(), &case.artifact_slices);
        let m = masked_values(mv.view(), case.body_mask.view(), &case.artifact_slices);
        let (sk, sm) = (histogram_stats(k.iter().copied(), kw).skewness, histogram_stats(m.iter().copied(), mw).skewness);
        kv_art.extend(k);
        mv_art.extend(m);
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", case.patient_id, case.artifact_slices.len(), fmt(r2[0]), fmt(r2[1]), fmt(r2[2]), fmt(sk), fmt(sm));
    }
    let hk = histogram_stats(kv_art, kw);
    let hm = histogram_stats(mv_art, mw);
    let mut txt = String::new();
    let _ = writeln!(txt, "patients={}", cases.len());
    for (name, (x, y)) in ["all", "clean", "artifact"].iter().zip(&pooled) {
        let _ = writeln!(txt, "r2.{name}={}", fmt(r_squared(x, y)));
    }
    let _ = writeln!(txt, "skew.kvct={}\nskew.mvct={}", fmt(hk.skewness), fmt(hm.skewness));
    let _ = writeln!(txt, "mean.kvct={}\nmean.mvct={}\nstd.kvct={}\nstd.mvct={}", fmt(hk.mean), fmt(hm.mean), fmt(hk.std), fmt(hm.std));
    let mut hist = String::from("bin,kvct_lo_hu,kvct_count,mvct_lo_hu,mvct_count\n");
    for b in 0..HISTOGRAM_BINS {
        let lo = |w: h3d_marnet::volume::HuWindow| w.min + w.span() * b as f64 / HISTOGRAM_BINS as f64;
        let _ = writeln!(hist, "{b},{},{},{},{}", lo(kw), hk.bins[b], lo(mw), hm.bins[b]);
    }
    write_config(&common.out, &cfg.to_kv())?;
    write_text(&common.out.join("analysis.txt"), &txt)?;
    write_text(&common.out.join("analysis.csv"), &csv)?;
    write_text(&common.out.join("histogram.csv"), &hist)?;
    print!("{txt}");
    Ok(())
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        x.to_string()
    }
}

fn info(common: &Common, checkpoint: Option<&Path>) -> CliResult<()> {
    let (cfg, store) = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let (cfg, _, params) = load_model(&ckpt)?;
            (cfg, params)
        }
        None => {
            let cfg = resolve(common)?;
            let (_, params) = build_model(&cfg)?;
            (cfg, params)
        }
    };
    let counts = count_parameters(&store);
    let doc = cfg.to_kv();
    write_config(&common.out, &doc)?;
    print!("{doc}");
    println!("# parameters: prenet {} transnet {} total {}", counts.prenet, counts.transnet, counts.total());
    if checkpoint.is_none() {
        for a in Ablation::ALL {
            let (_, s) = H3dMarNet::init::<f32>(&cfg.prenet, &cfg.transnet, a, cfg.train.seed)?;
            println!("# {a}: {} parameters", count_parameters(&s).total());
        }
    }
    Ok(())
}
