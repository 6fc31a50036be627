#![allow(dead_code)]

use h3d_marnet::filters::gaussian_kernel;
use h3d_marnet::metrics::SsimParams;
use h3d_tensor::gradcheck::{check_param, largest_entries, numeric_grad, FdSample};
use h3d_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Direct 5-D convolution with zero padding `k/2` and unit stride.
pub fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, ci, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; b * co * d * h * wd];
    for n in 0..b {
        for o in 0..co {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = bias.data()[o];
                        for i in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let (zz, yy, x2) = (z as isize + a as isize - pd, y as isize + bb as isize - ph, xx as isize + c as isize - pw);
                                        if zz < 0 || yy < 0 || x2 < 0 || zz >= d as isize || yy >= h as isize || x2 >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((n * ci + i) * d + zz as usize) * h + yy as usize) * wd + x2 as usize;
                                        let wi = (((o * ci + i) * kd + a) * kh + bb) * kw + c;
                                        acc += xd[xi] * wdat[wi];
                                    }
                                }
                            }
                        }
                        out[(((n * co + o) * d + z) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, co, d, h, wd], out)
}

/// Runs a scalar objective and returns its value and the gradient of every parameter.
pub fn eval_with_grads(store: &ParamStore<f64>, f: &dyn Fn(&Graph<'_, f64>) -> Var) -> (f64, Vec<(ParamId, Vec<f64>)>) {
    let g = Graph::with_params(store);
    let loss = f(&g);
    let grads = g.backward(loss);
    let per = store
        .ids()
        .map(|id| (id, grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).numel()])))
        .collect();
    (g.item(loss), per)
}

/// Finite-difference check of the three largest-gradient entries of every parameter whose name starts with `prefix`.
pub fn fd_check_prefix(store: &mut ParamStore<f64>, prefix: &str, f: &dyn Fn(&Graph<'_, f64>) -> Var) -> Vec<(String, FdSample)> {
    let (_, grads) = eval_with_grads(store, f);
    let loss = |s: &ParamStore<f64>| {
        let g = Graph::with_params(s);
        let l = f(&g);
        g.item(l)
    };
    let mut out = Vec::new();
    for (id, grad) in grads {
        let name = store.name(id).to_string();
        if !name.starts_with(prefix) {
            continue;
        }
        for s in check_param(store, id, &grad, 3, 1e-6, &loss) {
            out.push((name.clone(), s));
        }
    }
    out
}

// Windowed double sum straight from the SSIM definition.
pub fn naive_ssim(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> f64 {
    let k = gaussian_kernel(p.window, p.sigma);
    let n = p.window;
    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let wt = k[a] * k[b];
                    let (u, v) = (x[(i + a) * w + j + b], y[(i + a) * w + j + b]);
                    mx += wt * u;
                    my += wt * v;
                    sxx += wt * u * u;
                    syy += wt * v * v;
                    sxy += wt * u * v;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Largest relative error between analytic and central-difference gradients
/// of `f(pred, target)` with respect to `pred`, over its three largest entries.
pub fn fd_rel_err_wrt_pred(f: &dyn Fn(&Graph<'_, f64>, Var, Var) -> Var, shape: &[usize]) -> f64 {
    let target = random_tensor(shape, 100, 1.0);
    let mut store = ParamStore::new();
    let id = store.add("pred", random_tensor(shape, 101, 1.0));
    let run = |s: &ParamStore<f64>| {
        let g = Graph::with_params(s);
        let l = f(&g, g.param(id), g.input(target.clone()));
        (g.item(l), g.backward(l).param(id).unwrap().data().to_vec())
    };
    let (_, grad) = run(&store);
    largest_entries(&grad, 3)
        .iter()
        .map(|&i| {
            let num = numeric_grad(&mut store, id, i, 1e-6, &|s| run(s).0);
            (num - grad[i]).abs() / num.abs().max(grad[i].abs())
        })
        .fold(0.0, f64::max)
}

pub fn fd_wrt_pred(name: &str, f: &dyn Fn(&Graph<'_, f64>, Var, Var) -> Var, shape: &[usize]) {
    let err = fd_rel_err_wrt_pred(f, shape);
    assert!(err < 1e-2, "{name}: relative error {err}");
}
