//! Acceptance gate. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Tolerances are pinned in the constants below.

mod common;

use std::io::Write as _;
use std::time::{Duration, Instant};

use common::{eval_with_grads, fd_check_prefix, fd_rel_err_wrt_pred, naive_ssim, random_tensor};
use h3d_marnet::config::RunConfig;
use h3d_marnet::eval::{evaluate, ModelPredictor};
use h3d_marnet::losses::*;
use h3d_marnet::metrics::{hu_correlation, masked_mse, masked_values, histogram_stats, psnr_from_mse, ssim_slice, SliceSubset, SsimParams};
use h3d_marnet::model::{count_parameters, Ablation, H3dMarNet};
use h3d_marnet::phantom::{generate_cohort, generate_patient_case, read_dataset, write_dataset, PhantomConfig};
use h3d_marnet::prenet::PrenetConfig;
use h3d_marnet::train::train;
use h3d_marnet::transnet::TransNetConfig;
use h3d_marnet::volume::Modality;
use h3d_marnet::wavelet::{dwt, haar_dwt2, haar_idwt2, idwt};
use h3d_tensor::{Graph, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WAVELET_ROUNDTRIP_TOL: f64 = 1e-6;
const WAVELET_PARSEVAL_TOL: f64 = 1e-5;
const WAVELET_BUDGET: Duration = Duration::from_secs(5);
const PRENET_IDENTITY_TOL: f64 = 1e-5;
const PAPER_PARAMS: f64 = 22.6e6;
const FD_TOL: f64 = 1e-2;
const LOSS_ARITH_TOL: f64 = 1e-7;
const METRIC_ORACLE_TOL: f64 = 1e-6;
const OVERFIT_PSNR: f64 = 30.0;
const OVERFIT_SSIM: f64 = 0.85;
const OVERFIT_EPOCHS: usize = 20;
const OVERFIT_SEEDS: u64 = 5;
const OVERFIT_WINS_NEEDED: usize = 4;
const ORDERING_SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn wavelet_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut round, mut parseval, mut graph_round) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = Array2::from_shape_fn((64, 64), |_| rng.random_range(-1.0..1.0));
        let bands = haar_dwt2(&x).unwrap();
        let back = haar_idwt2(&bands).unwrap();
        round = round.max(max_abs_diff(back.as_slice().unwrap(), x.as_slice().unwrap()));
        let e = x.iter().map(|v| v * v).sum::<f64>();
        parseval = parseval.max((bands.energy() - e).abs() / e);
        let g = Graph::<f64>::new();
        let xv = g.input(Tensor::from_vec(&[1, 1, 1, 64, 64], x.iter().copied().collect()));
        let r = idwt(&g, dwt(&g, xv).unwrap()).unwrap();
        graph_round = graph_round.max(max_abs_diff(g.value(r).data(), x.as_slice().unwrap()));
    }
    let dt = t0.elapsed();
    outcome(
        round < WAVELET_ROUNDTRIP_TOL && graph_round < WAVELET_ROUNDTRIP_TOL && parseval < WAVELET_PARSEVAL_TOL && dt < WAVELET_BUDGET,
        format!("round trip {round:.2e} (graph {graph_round:.2e}) < {WAVELET_ROUNDTRIP_TOL:e}, Parseval {parseval:.2e} < {WAVELET_PARSEVAL_TOL:e}, {dt:.2?} < 5 s"),
    )
}

fn identity_at_init() -> Outcome {
    let (model, store) = H3dMarNet::init::<f32>(&PrenetConfig::default(), &RunConfig::desk().transnet, Ablation::V1, 3).unwrap();
    let g = Graph::with_params(&store);
    let x = g.input(random_tensor(&[1, 1, 3, 64, 64], 4, 1.0).cast::<f32>());
    let out = model.prenet.as_ref().unwrap().forward(&g, x).unwrap();
    let pre_err = g.value(out.output).data().iter().zip(g.value(x).data()).map(|(a, b)| f64::from((a - b).abs())).fold(0.0, f64::max);

    let (model, mut store) = H3dMarNet::init::<f64>(&PrenetConfig::default(), &RunConfig::desk().transnet, Ablation::V1, 5).unwrap();
    let mut blocks = 0;
    let mut exact = true;
    for level in &model.transnet.cnn.levels {
        for block in &level.blocks {
            for conv in [&block.conv1, &block.conv2] {
                store.get_mut(conv.weight).data_mut().fill(0.0);
                if let Some(b) = conv.bias {
                    store.get_mut(b).data_mut().fill(0.0);
                }
            }
            let g = Graph::with_params(&store);
            let h = g.input(random_tensor(&[1, block.conv1.in_channels, 3, 16, 16], 6 + blocks, 2.0));
            exact &= g.tensor(block.forward(&g, h)) == g.tensor(h);
            blocks += 1;
        }
    }
    outcome(
        pre_err < PRENET_IDENTITY_TOL && exact && blocks > 0,
        format!("PreNet max error {pre_err:.2e} < {PRENET_IDENTITY_TOL:e}; {blocks} residual blocks exact: {exact}"),
    )
}

fn shape_contract() -> Outcome {
    let cfg = TransNetConfig::default();
    let (model, store) = H3dMarNet::init::<f32>(&PrenetConfig::default(), &cfg, Ablation::V3, 7).unwrap();
    let g = Graph::with_params(&store);
    let x = g.input(Tensor::<f32>::zeros(&[1, 1, 3, 64, 64]));
    let out = model.transnet.forward(&g, x).unwrap();
    let shapes: Vec<Vec<usize>> = out.predictions.iter().map(|&p| g.shape(p)).collect();
    let want = vec![vec![1, 1, 3, 16, 16], vec![1, 1, 3, 32, 32], vec![1, 1, 3, 64, 64]];
    let (_, full) = H3dMarNet::init::<f32>(&PrenetConfig::default(), &TransNetConfig::full_scale(), Ablation::V1, 0).unwrap();
    let n = count_parameters(&full).total() as f64;
    let ratio = n / PAPER_PARAMS;
    outcome(
        shapes == want && (0.5..=2.0).contains(&ratio),
        format!("outputs {shapes:?}; full-scale parameters {:.2} M vs 22.6 M reported ({:+.1}%, accepted within 2x)", n / 1e6, (ratio - 1.0) * 100.0),
    )
}

fn tiny_transnet() -> TransNetConfig {
    TransNetConfig {
        cnn_widths: [4, 6, 8],
        blocks_per_level: 1,
        d_model: 8,
        heads: 2,
        mlp_ratio: 2,
        layers: 1,
        decoder_widths: [6, 4, 4],
        depth: 2,
        resolution: 16,
        ..Default::default()
    }
}

// A zero FAD output conv blocks every gradient upstream of it, so gradient
// checks start from the small random init instead.
fn trainable_prenet() -> PrenetConfig {
    PrenetConfig { zero_init_out: false, ..Default::default() }
}

fn full_objective<'a>(model: &'a H3dMarNet, ctx: &'a LossContext, seed: u64) -> impl Fn(&Graph<'_, f64>) -> Var + 'a {
    let shape = [1, 1, 2, 16, 16];
    let x = random_tensor(&shape, seed, 1.0);
    let clean = random_tensor(&shape, seed + 1, 1.0);
    // offset like air-dominated CT: the L1 gradient on a head bias is the sign
    // balance of its residuals, which zero-mean noise on a 4x4 head can cancel exactly
    let mvct = random_tensor(&shape, seed + 2, 0.5).map(|v| v - 0.3);
    let w = Tensor::from_vec(&shape, (0..512).map(|i| 1.0 + (i % 3) as f64).collect());
    move |g| {
        let out = model.forward(g, g.input(x.clone()), false).unwrap();
        let s1 = out.stage1.as_ref().map(|s| (s.output, g.input(clean.clone())));
        let inp = TotalLossInputs { stage1: s1, stage2: &out.stage2.predictions, mvct: g.input(mvct.clone()), weights: g.input(w.clone()) };
        total_loss(g, ctx, &inp).unwrap().total
    }
}

fn gradient_integrity() -> Outcome {
    let ctx = LossContext::new(LossVariant::L6, LossWeights::default(), 2);
    let mut worst = 0.0f64;
    let mut sampled = Vec::new();
    let (model, mut store) = H3dMarNet::init::<f64>(&trainable_prenet(), &tiny_transnet(), Ablation::V1, 11).unwrap();
    let obj = full_objective(&model, &ctx, 12);
    for part in ["prenet.", "transnet.cnn", "transnet.transformer", "transnet.fusion", "transnet.decoder"] {
        let s = fd_check_prefix(&mut store, part, &obj);
        sampled.push(format!("{part}{}", s.len()));
        if s.len() < 3 {
            worst = f64::INFINITY;
        }
        worst = s.iter().map(|(_, x)| x.rel_err()).fold(worst, f64::max);
    }
    let p = SsimParams::default();
    let shape = [1, 1, 2, 16, 16];
    let w = Tensor::from_vec(&shape, (0..512).map(|i| 1.0 + (i % 5) as f64).collect());
    let frozen = {
        let g = Graph::<f64>::new();
        let pw = error_spectrum_power(&g, g.input(random_tensor(&shape, 101, 1.0)), g.input(random_tensor(&shape, 100, 1.0))).unwrap();
        focal_weight(&g.tensor(pw))
    };
    let ext = PerceptualExtractor::random(4);
    let terms: Vec<(&str, f64)> = vec![
        ("weighted_l1", fd_rel_err_wrt_pred(&|g, x, y| weighted_l1(g, x, y, g.input(w.clone())).unwrap(), &shape)),
        ("ssim", fd_rel_err_wrt_pred(&|g, x, y| ssim_loss(g, x, y, &p).unwrap(), &shape)),
        ("ms_ssim", fd_rel_err_wrt_pred(&|g, x, y| ms_ssim_loss(g, x, y, &p).unwrap(), &[1, 1, 1, 48, 48])),
        ("mse", fd_rel_err_wrt_pred(&|g, x, y| mse(g, x, y).unwrap(), &shape)),
        ("ffl", fd_rel_err_wrt_pred(&|g, x, y| weighted_spectrum_loss(g, x, y, &frozen).unwrap(), &shape)),
        ("perceptual", fd_rel_err_wrt_pred(&|g, x, y| ext.loss(g, x, y).unwrap(), &shape)),
        ("deep", fd_rel_err_wrt_pred(&|g, x, y| deep_supervision_loss(g, &[g.avg_pool3d(x, [1, 4, 4]), g.avg_pool3d(x, [1, 2, 2]), x], y, false).unwrap(), &shape)),
    ];
    let loss_worst = terms.iter().map(|t| t.1).fold(0.0, f64::max);

    let mut dead = Vec::new();
    for seed in 0..5 {
        let (model, store) = H3dMarNet::init::<f64>(&trainable_prenet(), &tiny_transnet(), Ablation::V1, 20 + seed).unwrap();
        let (_, grads) = eval_with_grads(&store, &full_objective(&model, &ctx, 30 + seed));
        dead.extend(grads.iter().filter(|(_, gr)| gr.iter().all(|&v| v == 0.0)).map(|(id, _)| format!("seed {seed}: {}", store.name(*id))));
    }
    outcome(
        worst < FD_TOL && loss_worst < FD_TOL && dead.is_empty(),
        format!(
            "modules worst rel err {worst:.2e} (samples {}), loss terms worst {loss_worst:.2e} < {FD_TOL:e}; tensors without gradient over 5 seeds: {}",
            sampled.join(" "),
            if dead.is_empty() { "none".into() } else { dead.join(", ") }
        ),
    )
}

fn loss_arithmetic() -> Outcome {
    let g = Graph::<f64>::new();
    let s = |v: f64| g.input(Tensor::scalar(v));
    let w = LossWeights::default();
    let terms = SupervisionTerms { l1: Some(s(0.2)), ssim: Some(s(0.1)), perceptual: Some(s(0.3)), ..Default::default() };
    let sup = g.item(combine_terms(&g, &terms, &w));
    let want_sup = w.l1 * 0.2 + w.ssim * 0.1 + w.perceptual * 0.3;
    let tot = combine_stage_values(&w, 0.4, 0.6, 0.2);
    let want_tot = w.prenet * 0.4 + w.transnet * 0.6 + w.deep * 0.2;

    let ctx = LossContext::new(LossVariant::L6, w, 3);
    let shape = [1, 1, 3, 16, 16];
    let mv = g.input(random_tensor(&shape, 1, 1.0));
    let pm = vec![g.avg_pool3d(mv, [1, 4, 4]), g.avg_pool3d(mv, [1, 2, 2]), g.input(random_tensor(&shape, 4, 1.0))];
    let inp = TotalLossInputs { stage1: Some((g.input(random_tensor(&shape, 3, 1.0)), g.input(random_tensor(&shape, 2, 1.0)))), stage2: &pm, mvct: mv, weights: g.input(Tensor::full(&shape, 1.5)) };
    let v = total_loss(&g, &ctx, &inp).unwrap().values(&g);
    let recombine = (v.total - (w.prenet * v.prenet + w.transnet * v.transnet + w.deep * v.deep)).abs();

    let x = g.input(random_tensor(&[1, 1, 2, 48, 48], 8, 1.0));
    let ones = g.input(Tensor::ones(&[1, 1, 2, 48, 48]));
    let constructible = LossVariant::ALL.iter().all(|&lv| {
        let c = LossContext::new(lv, w, 1);
        supervision_loss(&g, &c, x, x, ones).map(|l| g.item(l).abs() < 1e-12).unwrap_or(false)
    });
    let default_is_l6 = LossVariant::default() == LossVariant::L6 && RunConfig::default().train.loss_variant == LossVariant::L6;
    let errs = [(sup - want_sup).abs(), (tot - want_tot).abs(), recombine];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst < LOSS_ARITH_TOL && (want_sup - 0.4).abs() < 1e-12 && (want_tot - 1.1).abs() < 1e-12 && constructible && default_is_l6,
        format!("stage sum {sup} (want 0.4), total {tot} (want 1.1), breakdown recombination {recombine:.1e}, worst {worst:.1e} < {LOSS_ARITH_TOL:e}; L1-L6 constructible {constructible}; default L6 {default_is_l6}"),
    )
}

fn metric_oracles() -> Outcome {
    let p = SsimParams::default();
    let (mut ssim_err, mut graph_err, mut mse_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..50 {
        let (h, w) = (24, 20);
        let x = random_tensor(&[1, 1, 1, h, w], seed, 1.0);
        let y = random_tensor(&[1, 1, 1, h, w], seed + 1000, 1.0);
        let want = naive_ssim(x.data(), y.data(), h, w, &p);
        let xa = Array2::from_shape_vec((h, w), x.data().to_vec()).unwrap();
        let ya = Array2::from_shape_vec((h, w), y.data().to_vec()).unwrap();
        ssim_err = ssim_err.max((ssim_slice(xa.view(), ya.view(), &p).unwrap() - want).abs());
        let g = Graph::<f64>::new();
        graph_err = graph_err.max((g.item(ssim(&g, g.input(x), g.input(y), &p).unwrap()) - want).abs());

        let a = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0..1.0));
        let b = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0..1.0));
        let mut m = Array3::from_shape_fn((3, 8, 8), |_| rng.random_bool(0.4));
        m[[0, 0, 0]] = true;
        let (mut s, mut n) = (0.0, 0usize);
        for (&mv, (&av, &bv)) in m.iter().zip(a.iter().zip(b.iter())) {
            if mv {
                s += (av - bv) * (av - bv);
                n += 1;
            }
        }
        mse_err = mse_err.max((masked_mse(a.view(), b.view(), m.view()).unwrap() - s / n as f64).abs());
    }
    let psnr_exact = psnr_from_mse(0.0, 2.0) == f64::INFINITY && psnr_from_mse(1.0, 10.0) == 20.0 && psnr_from_mse(4.0, 2.0) == 0.0;
    outcome(
        ssim_err < METRIC_ORACLE_TOL && graph_err < METRIC_ORACLE_TOL && mse_err < METRIC_ORACLE_TOL && psnr_exact,
        format!("SSIM vs naive {ssim_err:.1e} (graph {graph_err:.1e}), masked MSE vs brute force {mse_err:.1e} < {METRIC_ORACLE_TOL:e}; PSNR closed forms exact {psnr_exact}"),
    )
}

fn overfit_config(ablation: Ablation, seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.apply_overrides(&[format!("train.epochs={OVERFIT_EPOCHS}"), "train.augment=false".into(), format!("train.seed={seed}"), format!("phantom.seed={seed}")]).unwrap();
    c.train.ablation = ablation;
    c
}

fn overfit() -> Outcome {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let (mut wins, mut v1_ok) = (0, true);
    for seed in 0..OVERFIT_SEEDS {
        let mut scores = Vec::new();
        for ablation in [Ablation::V1, Ablation::V5] {
            let cfg = overfit_config(ablation, seed);
            let cases = generate_cohort(4, &cfg.phantom).unwrap();
            let out = train(&cfg, &cases, &[], None, &mut std::io::sink()).unwrap();
            let pred = ModelPredictor { model: &out.model, params: &out.checkpoint.params, depth: cfg.transnet.depth, batch: cfg.train.batch_size };
            scores.push(evaluate(&pred, &cases).unwrap());
        }
        let (v1, v5) = (&scores[0], &scores[1]);
        v1_ok &= v1.all.psnr > OVERFIT_PSNR && v1.all.ssim > OVERFIT_SSIM;
        let win = v1.all.psnr > v5.all.psnr;
        wins += usize::from(win);
        let art = |r: &h3d_marnet::eval::EvalReport| r.art.map_or(f64::NAN, |q| q.psnr);
        lines.push(format!(
            "seed {seed}: v1 {:.2} dB/{:.3} (art {:.2}), v5 {:.2} dB/{:.3} (art {:.2})",
            v1.all.psnr, v1.all.ssim, art(v1), v5.all.psnr, v5.all.ssim, art(v5)
        ));
    }
    for l in &lines {
        report(&format!("      {l}"));
    }
    outcome(
        v1_ok && wins >= OVERFIT_WINS_NEEDED,
        format!(
            "{OVERFIT_EPOCHS} epochs, 4 patients at 64x64: v1 > {OVERFIT_PSNR} dB and SSIM > {OVERFIT_SSIM} in every seed: {v1_ok}; v1 beats v5 (training-set PSNR) in {wins}/{OVERFIT_SEEDS} seeds, need {OVERFIT_WINS_NEEDED}; {:.0?}",
            t0.elapsed()
        ),
    )
}

fn qualitative_ordering() -> Outcome {
    let (kw, mw) = (Modality::Kvct.default_window(), Modality::Mvct.default_window());
    let (mut skew_ok, mut r2_ok) = (0, 0);
    for seed in 0..ORDERING_SEEDS {
        let case = generate_patient_case(&PhantomConfig { seed, ..Default::default() }).unwrap();
        let kv = case.kvct.channel0().mapv(f64::from);
        let mv = case.mvct.channel0().mapv(f64::from);
        let art = &case.artifact_slices;
        let sk = histogram_stats(masked_values(kv.view(), case.body_mask.view(), art), kw).skewness;
        let sm = histogram_stats(masked_values(mv.view(), case.body_mask.view(), art), mw).skewness;
        skew_ok += usize::from(sk > sm);
        let r2 = |s| hu_correlation(kv.view(), mv.view(), case.body_mask.view(), art, s).unwrap();
        r2_ok += usize::from(r2(SliceSubset::Clean) > r2(SliceSubset::Artifact));
    }
    let n = ORDERING_SEEDS as usize;
    outcome(
        skew_ok == n && r2_ok == n,
        format!("skew(kVCT) > skew(MVCT) on artifact slices in {skew_ok}/{n} seeds; R2(clean) > R2(artifact) in {r2_ok}/{n} seeds"),
    )
}

fn tiny_pipeline_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.apply_overrides(&[
        "phantom.depth=6",
        "phantom.height=32",
        "phantom.width=32",
        "phantom.artifact_fraction=0.34",
        "transnet.resolution=32",
        "transnet.cnn_widths=4,8,8",
        "transnet.decoder_widths=8,4,4",
        "transnet.d_model=16",
        "transnet.heads=2",
        "transnet.layers=1",
        "prenet.fad_channels=4",
        "prenet.fusion_channels=4",
        "train.epochs=2",
        "train.seed=17",
        "phantom.seed=17",
    ])
    .unwrap();
    c
}

fn end_to_end(cfg: &RunConfig) -> String {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate_cohort(3, &cfg.phantom).unwrap()).unwrap();
    let cases = read_dataset(dir.path()).unwrap();
    let out = train(cfg, &cases[..2], &[], None, &mut std::io::sink()).unwrap();
    let pred = ModelPredictor { model: &out.model, params: &out.checkpoint.params, depth: cfg.transnet.depth, batch: cfg.train.batch_size };
    let r = evaluate(&pred, &cases[2..]).unwrap();
    r.to_kv_text() + &r.to_csv()
}

fn reproducibility() -> Outcome {
    let cfg = tiny_pipeline_config();
    let (a, b) = (end_to_end(&cfg), end_to_end(&cfg));
    outcome(a == b && !a.is_empty(), format!("two generate -> train -> evaluate runs with seed 17 give identical reports: {}", a == b))
}

// Straight to the process stdout so the gate shows up in uncaptured logs too.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 wavelet correctness", wavelet_correctness),
        ("2 identity at init", identity_at_init),
        ("3 shape contract", shape_contract),
        ("4 gradient integrity", gradient_integrity),
        ("5 loss arithmetic", loss_arithmetic),
        ("6 metric oracles", metric_oracles),
        ("7 overfit and v1 > v5", overfit),
        ("8 qualitative orderings", qualitative_ordering),
        ("9 reproducibility", reproducibility),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let o = f();
        report(&format!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        if !o.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
