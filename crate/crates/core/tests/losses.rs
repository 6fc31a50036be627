mod common;

use common::{fd_wrt_pred, naive_ssim, random_tensor};
use h3d_marnet::losses::*;
use h3d_marnet::metrics::SsimParams;
use h3d_tensor::{Graph, ParamStore, Tensor, Var};
use ndarray::Array3;

fn scalar(g: &Graph<'_, f64>, v: f64) -> Var {
    g.input(Tensor::scalar(v))
}

fn ones_like(shape: &[usize]) -> Tensor<f64> {
    Tensor::ones(shape)
}

#[test]
fn weighted_l1_closed_forms() {
    let g = Graph::<f64>::new();
    let shape = [1, 1, 2, 4, 4];
    let t = g.input(random_tensor(&shape, 1, 1.0));
    let w = g.input(ones_like(&shape));
    assert_eq!(g.item(weighted_l1(&g, t, t, w).unwrap()), 0.0);
    let shifted = g.add_scalar(t, 0.5);
    assert!((g.item(weighted_l1(&g, shifted, t, w).unwrap()) - 0.5).abs() < 1e-12);
    // half the voxels weight 5 with error 1, the other half weight 1 with error 0
    let n = 32;
    let wv: Vec<f64> = (0..n).map(|i| if i < n / 2 { 5.0 } else { 1.0 }).collect();
    let ev: Vec<f64> = (0..n).map(|i| if i < n / 2 { 1.0 } else { 0.0 }).collect();
    let pred = g.input(Tensor::from_vec(&shape, ev));
    let zero = g.input(Tensor::zeros(&shape));
    let v = g.item(weighted_l1(&g, pred, zero, g.input(Tensor::from_vec(&shape, wv))).unwrap());
    assert!((v - 5.0 / 6.0).abs() < 1e-12);
    let plain = g.item(l1(&g, pred, zero).unwrap());
    assert!((g.item(weighted_l1(&g, pred, zero, w).unwrap()) - plain).abs() < 1e-15);
    assert!(weighted_l1(&g, pred, g.input(Tensor::zeros(&[1, 1, 2, 4, 2])), w).is_err());
}

#[test]
fn ssim_matches_windowed_oracle_on_random_pairs() {
    let p = SsimParams::default();
    for seed in 0..50 {
        let (d, h, w) = (2, 16, 20);
        let x = random_tensor(&[1, 1, d, h, w], seed, 1.0);
        let y = random_tensor(&[1, 1, d, h, w], seed + 1000, 1.0);
        let g = Graph::<f64>::new();
        let s = g.item(ssim(&g, g.input(x.clone()), g.input(y.clone()), &p).unwrap());
        let per = h * w;
        let want = (0..d).map(|z| naive_ssim(&x.data()[z * per..(z + 1) * per], &y.data()[z * per..(z + 1) * per], h, w, &p)).sum::<f64>() / d as f64;
        assert!((s - want).abs() < 1e-6, "seed {seed}: {s} vs {want}");
    }
}

#[test]
fn ssim_identity_constants_and_small_slices() {
    let p = SsimParams::default();
    let g = Graph::<f64>::new();
    let x = g.input(random_tensor(&[1, 1, 1, 12, 12], 3, 1.0));
    assert!((g.item(ssim(&g, x, x, &p).unwrap()) - 1.0).abs() < 1e-12);
    assert!(g.item(ssim_loss(&g, x, x, &p).unwrap()).abs() < 1e-12);
    let a = g.input(Tensor::zeros(&[1, 1, 1, 12, 12]));
    let b = g.input(Tensor::ones(&[1, 1, 1, 12, 12]));
    let want = 4e-4 / (1.0 + 4e-4);
    assert!((g.item(ssim(&g, a, b, &p).unwrap()) - want).abs() < 1e-12);
    assert!((want - 3.9984e-4).abs() < 1e-8);
    let small = g.input(Tensor::zeros(&[1, 1, 1, 10, 12]));
    assert!(ssim(&g, small, small, &p).is_err());
}

#[test]
fn perceptual_loss_properties() {
    for seed in 0..20 {
        let ext = PerceptualExtractor::random(seed);
        let g = Graph::<f64>::new();
        let x = g.input(random_tensor(&[1, 1, 2, 16, 16], seed, 1.0));
        let y = g.add(x, g.input(random_tensor(&[1, 1, 2, 16, 16], seed + 77, 0.1)));
        assert_eq!(g.item(ext.loss(&g, x, x).unwrap()), 0.0);
        let a = g.item(ext.loss(&g, x, y).unwrap());
        let b = g.item(ext.loss(&g, y, x).unwrap());
        assert!(a > 0.0, "seed {seed}");
        assert_eq!(a, b);
    }
}

#[test]
fn perceptual_weights_are_not_parameters() {
    let store = ParamStore::<f64>::new();
    let g = Graph::with_params(&store);
    let ext = PerceptualExtractor::random(1);
    let x = g.leaf(random_tensor(&[1, 1, 1, 16, 16], 1, 1.0));
    let l = ext.loss(&g, x, g.input(Tensor::zeros(&[1, 1, 1, 16, 16]))).unwrap();
    let grads = g.backward(l);
    assert_eq!(grads.params().count(), 0);
    assert!(grads.get(x).is_some());
}

#[test]
fn perceptual_extractor_rejects_bad_weights() {
    let bad = vec![(Tensor::zeros(&[4, 2, 1, 3, 3]), Tensor::zeros(&[4]))];
    assert!(PerceptualExtractor::from_weights(bad, vec![0]).is_err());
    let good = vec![(Tensor::zeros(&[4, 3, 1, 3, 3]), Tensor::zeros(&[4]))];
    assert!(PerceptualExtractor::from_weights(good.clone(), vec![1]).is_err());
    assert!(PerceptualExtractor::from_weights(good, vec![0]).is_ok());
}

#[test]
fn supervision_weighted_sum_closed_form() {
    let g = Graph::<f64>::new();
    let terms = SupervisionTerms { l1: Some(scalar(&g, 0.2)), ssim: Some(scalar(&g, 0.1)), perceptual: Some(scalar(&g, 0.3)), ..Default::default() };
    let w = LossWeights::default();
    assert!((g.item(combine_terms(&g, &terms, &w)) - 0.40).abs() < 1e-7);
    let doubled = LossWeights { l1: 2.0, ssim: 1.0, perceptual: 1.0, ..w };
    assert!((g.item(combine_terms(&g, &terms, &doubled)) - 0.80).abs() < 1e-7);
}

#[test]
fn total_weighted_sum_closed_form() {
    let w = LossWeights::default();
    assert!((combine_stage_values(&w, 0.4, 0.6, 0.2) - 1.1).abs() < 1e-7);
    let no_deep = LossWeights { deep: 0.0, ..w };
    assert_eq!(combine_stage_values(&no_deep, 0.4, 0.6, 0.2), 0.4 + 0.6);
}

fn pyramid(g: &Graph<'_, f64>, target: Var) -> Vec<Var> {
    vec![g.avg_pool3d(target, [1, 4, 4]), g.avg_pool3d(target, [1, 2, 2]), target]
}

#[test]
fn deep_supervision_sums_per_scale_l1() {
    let g = Graph::<f64>::new();
    let t = g.input(random_tensor(&[1, 1, 2, 16, 16], 5, 1.0));
    let preds = pyramid(&g, t);
    assert_eq!(g.item(deep_supervision_loss(&g, &preds, t, true).unwrap()), 0.0);
    let (a, b, c) = (0.1, 0.2, 0.3);
    let off = [g.add_scalar(preds[0], a), g.add_scalar(preds[1], -b), g.add_scalar(preds[2], c)];
    assert!((g.item(deep_supervision_loss(&g, &off, t, true).unwrap()) - (a + b + c)).abs() < 1e-12);
    assert!((g.item(deep_supervision_loss(&g, &off, t, false).unwrap()) - (a + b)).abs() < 1e-12);
    let k = g.input(Tensor::full(&[1, 1, 2, 16, 16], 0.25));
    for p in pyramid(&g, k) {
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

#[test]
fn total_loss_breakdown_recombines() {
    let ctx = LossContext::new(LossVariant::L6, LossWeights::default(), 3);
    let g = Graph::<f64>::new();
    let shape = [2, 1, 3, 16, 16];
    let mvct = g.input(random_tensor(&shape, 1, 1.0));
    let clean = g.input(random_tensor(&shape, 2, 1.0));
    let s1 = g.input(random_tensor(&shape, 3, 1.0));
    let pm = pyramid(&g, g.input(random_tensor(&shape, 4, 1.0)));
    let w = g.input(Tensor::full(&shape, 1.5));
    let inp = TotalLossInputs { stage1: Some((s1, clean)), stage2: &pm, mvct, weights: w };
    let terms = total_loss(&g, &ctx, &inp).unwrap();
    let v = terms.values(&g);
    assert!((v.total - combine_stage_values(&ctx.weights, v.prenet, v.transnet, v.deep)).abs() < 1e-7);
    assert!(v.prenet > 0.0 && v.transnet > 0.0 && v.deep > 0.0);

    let perfect = pyramid(&g, mvct);
    let inp = TotalLossInputs { stage1: Some((clean, clean)), stage2: &perfect, mvct, weights: w };
    assert!(total_loss(&g, &ctx, &inp).unwrap().values(&g).total.abs() < 1e-12);
}

#[test]
fn every_variant_is_constructible_and_zero_on_identity() {
    assert_eq!(LossVariant::default(), LossVariant::L6);
    let g = Graph::<f64>::new();
    let shape = [1, 1, 2, 48, 48];
    let x = g.input(random_tensor(&shape, 8, 1.0));
    let y = g.input(random_tensor(&shape, 9, 1.0));
    let w = g.input(Tensor::ones(&shape));
    for v in LossVariant::ALL {
        assert_eq!(v.to_string().parse::<LossVariant>().unwrap(), v);
        let ctx = LossContext::new(v, LossWeights::default(), 1);
        let terms = supervision_terms(&g, &ctx, x, y, w).unwrap();
        let present = [terms.ssim, terms.ms_ssim, terms.mse, terms.ffl, terms.perceptual].iter().filter(|t| t.is_some()).count();
        let expect = match v {
            LossVariant::L1 => 0,
            LossVariant::L2 | LossVariant::L3 | LossVariant::L4 => 1,
            LossVariant::L5 | LossVariant::L6 => 2,
        };
        assert_eq!(present, expect, "{v}");
        assert!(g.item(supervision_loss(&g, &ctx, x, x, w).unwrap()).abs() < 1e-12, "{v}");
        assert!(g.item(supervision_loss(&g, &ctx, x, y, w).unwrap()) > 0.0);
    }
}

#[test]
fn focal_frequency_loss_matches_direct_dft() {
    let (h, w) = (4, 6);
    let e = random_tensor(&[1, 1, 1, h, w], 12, 1.0);
    let g = Graph::<f64>::new();
    let got = g.item(focal_frequency_loss(&g, g.input(e.clone()), g.input(Tensor::zeros(&[1, 1, 1, h, w]))).unwrap());
    let mut power = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re += e.data()[y * w + x] * ang.cos();
                    im += e.data()[y * w + x] * ang.sin();
                }
            }
            power[u * w + v] = (re * re + im * im) / (h * w) as f64;
        }
    }
    let max = power.iter().map(|p| p.sqrt()).fold(0.0, f64::max);
    let want = power.iter().map(|p| p.sqrt() / max * p).sum::<f64>() / (h * w) as f64;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn metal_weight_map_rules() {
    let mut hu = Array3::<f32>::zeros((2, 12, 12));
    assert!(build_metal_weight_map(hu.view(), 2000.0, 4.0, 3).iter().all(|&v| v == 1.0));
    hu[[1, 6, 5]] = 2500.0;
    let m = build_metal_weight_map(hu.view(), 2000.0, 4.0, 3);
    for ((z, y, x), &v) in m.indexed_iter() {
        let inside = z == 1 && (y as i64 - 6).pow(2) + (x as i64 - 5).pow(2) <= 9;
        assert_eq!(v, if inside { 5.0 } else { 1.0 }, "{z} {y} {x}");
    }
    assert_eq!(m.iter().filter(|&&v| v == 5.0).count(), 29);
    assert!(build_metal_weight_map(hu.view(), 2000.0, 0.0, 3).iter().all(|&v| v == 1.0));
}

#[test]
fn every_loss_term_passes_finite_differences() {
    let p = SsimParams::default();
    let shape = [1, 1, 2, 16, 16];
    let w = Tensor::from_vec(&shape, (0..512).map(|i| 1.0 + (i % 5) as f64).collect());
    fd_wrt_pred("weighted_l1", &|g, x, y| weighted_l1(g, x, y, g.input(w.clone())).unwrap(), &shape);
    fd_wrt_pred("ssim", &|g, x, y| ssim_loss(g, x, y, &p).unwrap(), &shape);
    fd_wrt_pred("mse", &|g, x, y| mse(g, x, y).unwrap(), &shape);
    // the focal weight is a constant of the backward pass, so differentiate with it frozen
    let frozen = {
        let g = Graph::<f64>::new();
        let pw = error_spectrum_power(&g, g.input(random_tensor(&shape, 101, 1.0)), g.input(random_tensor(&shape, 100, 1.0))).unwrap();
        let v = g.tensor(pw);
        focal_weight(&v)
    };
    fd_wrt_pred("ffl", &|g, x, y| weighted_spectrum_loss(g, x, y, &frozen).unwrap(), &shape);
    let g = Graph::<f64>::new();
    let (x, y) = (g.leaf(random_tensor(&shape, 101, 1.0)), g.input(random_tensor(&shape, 100, 1.0)));
    let a = focal_frequency_loss(&g, x, y).unwrap();
    let b = weighted_spectrum_loss(&g, x, y, &frozen).unwrap();
    assert_eq!(g.item(a), g.item(b));
    let (ga, gb) = (g.backward(a).get(x).unwrap().clone(), g.backward(b).get(x).unwrap().clone());
    assert_eq!(ga, gb);
    let ext = PerceptualExtractor::random(4);
    fd_wrt_pred("perceptual", &|g, x, y| ext.loss(g, x, y).unwrap(), &shape);
    fd_wrt_pred("deep", &|g, x, y| deep_supervision_loss(g, &[g.avg_pool3d(x, [1, 4, 4]), g.avg_pool3d(x, [1, 2, 2]), x], y, false).unwrap(), &shape);
    fd_wrt_pred("ms_ssim", &|g, x, y| ms_ssim_loss(g, x, y, &p).unwrap(), &[1, 1, 1, 48, 48]);
}
