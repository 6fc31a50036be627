use crate::gemm::gemm;
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// Kernel, stride and zero-padding of a 3D convolution over (D, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Stride 1 with "same" padding for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self { kernel, stride: [1; 3], padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2] }
    }

    pub fn strided(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self { kernel, stride, padding: [0; 3] }
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn conv_out(&self, inp: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|i| {
            let padded = inp[i] + 2 * self.padding[i];
            assert!(padded >= self.kernel[i], "input {inp:?} smaller than kernel {:?}", self.kernel);
            (padded - self.kernel[i]) / self.stride[i] + 1
        })
    }

    pub fn transpose_out(&self, inp: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|i| (inp[i] - 1) * self.stride[i] + self.kernel[i] - 2 * self.padding[i])
    }
}

/// Valid output range `[lo, hi)` of one axis for kernel offset `k`.
#[inline]
fn valid_range(out: usize, inp: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    // index = o*s + k - p must lie in [0, inp)
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if inp + p > k { ((inp + p - k - 1) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `x` (`c` channels over `inp`) into rows `(c, kd, kh, kw)` × columns `out` positions.
pub(crate) fn im2col<T: Float>(x: &[T], c: usize, inp: [usize; 3], g: &ConvGeometry, out: [usize; 3], cols: &mut [T]) {
    let n = out[0] * out[1] * out[2];
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let in_n = inp[0] * inp[1] * inp[2];
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * in_n..(ci + 1) * in_n];
        for a in 0..kd {
            let (zlo, zhi) = valid_range(out[0], inp[0], a, sd, pd);
            for b in 0..kh {
                let (ylo, yhi) = valid_range(out[1], inp[1], b, sh, ph);
                for e in 0..kw {
                    let (xlo, xhi) = valid_range(out[2], inp[2], e, sw, pw);
                    let dst = &mut cols[row * n..(row + 1) * n];
                    dst.fill(T::zero());
                    for oz in zlo..zhi {
                        let iz = oz * sd + a - pd;
                        for oy in ylo..yhi {
                            let iy = oy * sh + b - ph;
                            let src = &xc[(iz * inp[1] + iy) * inp[2]..][..inp[2]];
                            let d = &mut dst[(oz * out[1] + oy) * out[2]..][..out[2]];
                            if xhi <= xlo {
                                continue;
                            }
                            if sw == 1 {
                                let ix0 = xlo + e - pw;
                                d[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    d[ox] = src[ox * sw + e - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
pub(crate) fn col2im<T: Float>(cols: &[T], c: usize, inp: [usize; 3], g: &ConvGeometry, out: [usize; 3], x: &mut [T]) {
    let n = out[0] * out[1] * out[2];
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let in_n = inp[0] * inp[1] * inp[2];
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * in_n..(ci + 1) * in_n];
        for a in 0..kd {
            let (zlo, zhi) = valid_range(out[0], inp[0], a, sd, pd);
            for b in 0..kh {
                let (ylo, yhi) = valid_range(out[1], inp[1], b, sh, ph);
                for e in 0..kw {
                    let (xlo, xhi) = valid_range(out[2], inp[2], e, sw, pw);
                    let src = &cols[row * n..(row + 1) * n];
                    for oz in zlo..zhi {
                        let iz = oz * sd + a - pd;
                        for oy in ylo..yhi {
                            let iy = oy * sh + b - ph;
                            let dst = &mut xc[(iz * inp[1] + iy) * inp[2]..][..inp[2]];
                            let s = &src[(oz * out[1] + oy) * out[2]..][..out[2]];
                            for ox in xlo..xhi {
                                dst[ox * sw + e - pw] += s[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], n: usize) {
    for (chunk, &b) in out.chunks_mut(n).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Float>(grad: &Tensor<T>, channels: usize) -> Tensor<T> {
    let s = grad.shape();
    let n = s[2] * s[3] * s[4];
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in grad.data().chunks(n).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[channels], db)
}

impl<T: Float> Graph<'_, T> {
    /// 3D cross-correlation. `x`: (B, Cin, D, H, W); `w`: (Cout, Cin, kd, kh, kw); `bias`: (Cout).
    pub fn conv3d(&self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Var {
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.op(
            &inputs,
            |v| {
                let (xs, ws) = (v[0].shape(), v[1].shape());
                assert_eq!(xs.len(), 5, "conv3d input must be rank 5, got {xs:?}");
                assert_eq!(ws.len(), 5, "conv3d weight must be rank 5");
                assert_eq!(xs[1], ws[1], "conv3d channel mismatch: input {xs:?}, weight {ws:?}");
                assert_eq!([ws[2], ws[3], ws[4]], geom.kernel, "weight does not match kernel");
                let (b, cin, cout) = (xs[0], xs[1], ws[0]);
                let inp = spatial(xs);
                let out = geom.conv_out(inp);
                let (in_n, n) = (inp.iter().product::<usize>(), out.iter().product::<usize>());
                let k = cin * geom.taps();
                let mut o = vec![T::zero(); b * cout * n];
                let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
                for bi in 0..b {
                    let xb = &v[0].data()[bi * cin * in_n..(bi + 1) * cin * in_n];
                    let colref: &[T] = if geom.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, cin, inp, &geom, out, &mut cols);
                        &cols
                    };
                    gemm(cout, k, n, v[1].data(), false, colref, false, &mut o[bi * cout * n..(bi + 1) * cout * n], false);
                }
                if let Some(bias) = v.get(2) {
                    add_bias(&mut o, bias.data(), n);
                }
                Tensor::from_vec(&[b, cout, out[0], out[1], out[2]], o)
            },
            move |c| {
                let (xs, ws) = (c.inputs[0].shape(), c.inputs[1].shape());
                let (b, cin, cout) = (xs[0], xs[1], ws[0]);
                let inp = spatial(xs);
                let out = spatial(c.grad.shape());
                let (in_n, n) = (inp.iter().product::<usize>(), out.iter().product::<usize>());
                let k = cin * geom.taps();
                let pointwise = geom.is_pointwise();
                let mut dw = c.needs[1].then(|| vec![T::zero(); cout * k]);
                let mut dx = c.needs[0].then(|| vec![T::zero(); b * cin * in_n]);
                let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * n] };
                let mut dcols = if pointwise || dx.is_none() { Vec::new() } else { vec![T::zero(); k * n] };
                for bi in 0..b {
                    let gb = &c.grad.data()[bi * cout * n..(bi + 1) * cout * n];
                    if let Some(dw) = dw.as_mut() {
                        let xb = &c.inputs[0].data()[bi * cin * in_n..(bi + 1) * cin * in_n];
                        let colref: &[T] = if pointwise {
                            xb
                        } else {
                            im2col(xb, cin, inp, &geom, out, &mut cols);
                            &cols
                        };
                        gemm(cout, n, k, gb, false, colref, true, dw, bi > 0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[bi * cin * in_n..(bi + 1) * cin * in_n];
                        if pointwise {
                            gemm(k, cout, n, c.inputs[1].data(), true, gb, false, dxb, false);
                        } else {
                            gemm(k, cout, n, c.inputs[1].data(), true, gb, false, &mut dcols, false);
                            col2im(&dcols, cin, inp, &geom, out, dxb);
                        }
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::from_vec(xs, d)),
                    dw.map(|d| Tensor::from_vec(ws, d)),
                ];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| bias_grad(c.grad, cout)));
                }
                res
            },
        )
    }

    /// Transposed 3D convolution. `x`: (B, Cin, D, H, W); `w`: (Cin, Cout, kd, kh, kw); `bias`: (Cout).
    pub fn conv_transpose3d(&self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Var {
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.op(
            &inputs,
            |v| {
                let (xs, ws) = (v[0].shape(), v[1].shape());
                assert_eq!(xs[1], ws[0], "conv_transpose3d channel mismatch: input {xs:?}, weight {ws:?}");
                assert_eq!([ws[2], ws[3], ws[4]], geom.kernel, "weight does not match kernel");
                let (b, cin, cout) = (xs[0], xs[1], ws[1]);
                let inp = spatial(xs);
                let out = geom.transpose_out(inp);
                let (in_n, out_n) = (inp.iter().product::<usize>(), out.iter().product::<usize>());
                let kc = cout * geom.taps();
                let mut cols = vec![T::zero(); kc * in_n];
                let mut o = vec![T::zero(); b * cout * out_n];
                for bi in 0..b {
                    let xb = &v[0].data()[bi * cin * in_n..(bi + 1) * cin * in_n];
                    gemm(kc, cin, in_n, v[1].data(), true, xb, false, &mut cols, false);
                    col2im(&cols, cout, out, &geom, inp, &mut o[bi * cout * out_n..(bi + 1) * cout * out_n]);
                }
                if let Some(bias) = v.get(2) {
                    add_bias(&mut o, bias.data(), out_n);
                }
                Tensor::from_vec(&[b, cout, out[0], out[1], out[2]], o)
            },
            move |c| {
                let (xs, ws) = (c.inputs[0].shape(), c.inputs[1].shape());
                let (b, cin, cout) = (xs[0], xs[1], ws[1]);
                let inp = spatial(xs);
                let out = spatial(c.grad.shape());
                let (in_n, out_n) = (inp.iter().product::<usize>(), out.iter().product::<usize>());
                let kc = cout * geom.taps();
                let mut gcols = vec![T::zero(); kc * in_n];
                let mut dx = c.needs[0].then(|| vec![T::zero(); b * cin * in_n]);
                let mut dw = c.needs[1].then(|| vec![T::zero(); cin * kc]);
                for bi in 0..b {
                    let gb = &c.grad.data()[bi * cout * out_n..(bi + 1) * cout * out_n];
                    im2col(gb, cout, out, &geom, inp, &mut gcols);
                    if let Some(dx) = dx.as_mut() {
                        gemm(cin, kc, in_n, c.inputs[1].data(), false, &gcols, false, &mut dx[bi * cin * in_n..(bi + 1) * cin * in_n], false);
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xb = &c.inputs[0].data()[bi * cin * in_n..(bi + 1) * cin * in_n];
                        gemm(cin, in_n, kc, xb, false, &gcols, true, dw, bi > 0);
                    }
                }
                let mut res = vec![dx.map(|d| Tensor::from_vec(xs, d)), dw.map(|d| Tensor::from_vec(ws, d))];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| bias_grad(c.grad, cout)));
                }
                res
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Literal nested-loop convolution.
    fn naive_conv(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], g: &ConvGeometry) -> (Vec<f64>, [usize; 3]) {
        let out = g.conv_out([xs[2], xs[3], xs[4]]);
        let mut o = vec![0.0; xs[0] * ws[0] * out.iter().product::<usize>()];
        let mut idx = 0;
        for b in 0..xs[0] {
            for co in 0..ws[0] {
                for oz in 0..out[0] {
                    for oy in 0..out[1] {
                        for ox in 0..out[2] {
                            let mut acc = 0.0;
                            for ci in 0..xs[1] {
                                for a in 0..ws[2] {
                                    for bb in 0..ws[3] {
                                        for e in 0..ws[4] {
                                            let iz = (oz * g.stride[0] + a) as isize - g.padding[0] as isize;
                                            let iy = (oy * g.stride[1] + bb) as isize - g.padding[1] as isize;
                                            let ix = (ox * g.stride[2] + e) as isize - g.padding[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= xs[2] as isize || iy >= xs[3] as isize || ix >= xs[4] as isize {
                                                continue;
                                            }
                                            let xi = (((b * xs[1] + ci) * xs[2] + iz as usize) * xs[3] + iy as usize) * xs[4] + ix as usize;
                                            let wi = (((co * ws[1] + ci) * ws[2] + a) * ws[3] + bb) * ws[4] + e;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            o[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
        (o, out)
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * a).sin()).collect()
    }

    #[test]
    fn conv_matches_naive_for_several_geometries() {
        let geoms = [
            ConvGeometry::same([3, 3, 3]),
            ConvGeometry::same([1, 3, 3]),
            ConvGeometry::strided([1, 2, 2], [1, 2, 2]),
            ConvGeometry { kernel: [3, 3, 3], stride: [1, 2, 2], padding: [1, 1, 1] },
            ConvGeometry::same([1, 1, 1]),
            // padding wider than the input
            ConvGeometry::same([7, 7, 7]),
        ];
        for geom in geoms {
            let xs = [2, 3, 3, 6, 4];
            let ws = [2, 3, geom.kernel[0], geom.kernel[1], geom.kernel[2]];
            let x = seq(xs.iter().product(), 0.37);
            let w = seq(ws.iter().product(), 0.91);
            let (want, out) = naive_conv(&x, xs, &w, ws, &geom);
            let g = Graph::<f64>::new();
            let xv = g.input(Tensor::from_f64(&xs, &x));
            let wv = g.input(Tensor::from_f64(&ws, &w));
            let y = g.conv3d(xv, wv, None, geom);
            assert_eq!(g.shape(y), vec![2, 2, out[0], out[1], out[2]]);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{geom:?}");
            }
        }
    }

    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut p = x.to_vec();
        p[i] += h;
        let mut m = x.to_vec();
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let geom = ConvGeometry { kernel: [3, 3, 3], stride: [1, 2, 2], padding: [1, 1, 1] };
        let xs = [2, 2, 2, 4, 4];
        let ws = [3, 2, 3, 3, 3];
        let x0 = seq(xs.iter().product(), 0.53);
        let w0 = seq(ws.iter().product(), 0.29);
        let b0 = vec![0.1, -0.2, 0.3];
        let weights = seq(2 * 3 * 2 * 2 * 2, 0.77);
        let run = |x: &[f64], w: &[f64], b: &[f64]| {
            let g = Graph::<f64>::new();
            let xv = g.leaf(Tensor::from_f64(&xs, x));
            let wv = g.leaf(Tensor::from_f64(&ws, w));
            let bv = g.leaf(Tensor::from_f64(&[3], b));
            let y = g.conv3d(xv, wv, Some(bv), geom);
            let r = g.input(Tensor::from_f64(&g.shape(y), &weights));
            let loss = g.sum(g.mul(y, r));
            let gr = g.backward(loss);
            (g.item(loss), gr.get(xv).unwrap().clone(), gr.get(wv).unwrap().clone(), gr.get(bv).unwrap().clone())
        };
        let (_, gx, gw, gb) = run(&x0, &w0, &b0);
        for i in (0..x0.len()).step_by(7) {
            let num = fd_grad(&|x| run(x, &w0, &b0).0, &x0, i);
            assert!((num - gx.data()[i]).abs() < 1e-6);
        }
        for i in (0..w0.len()).step_by(5) {
            let num = fd_grad(&|w| run(&x0, w, &b0).0, &w0, i);
            assert!((num - gw.data()[i]).abs() < 1e-6);
        }
        for i in 0..3 {
            let num = fd_grad(&|b| run(&x0, &w0, b).0, &b0, i);
            assert!((num - gb.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with the same weights.
        let geom = ConvGeometry { kernel: [1, 2, 2], stride: [1, 2, 2], padding: [0, 0, 0] };
        let xs = [1, 2, 2, 4, 6];
        let x = seq(xs.iter().product(), 0.41);
        let ws = [3, 2, 1, 2, 2];
        let w = seq(ws.iter().product(), 0.83);
        let g = Graph::<f64>::new();
        let xv = g.input(Tensor::from_f64(&xs, &x));
        let wv = g.input(Tensor::from_f64(&ws, &w));
        let cx = g.conv3d(xv, wv, None, geom);
        let ys = g.shape(cx);
        let y = seq(ys.iter().product(), 0.17);
        let yv = g.input(Tensor::from_f64(&ys, &y));
        // transpose weight layout is (Cin_of_transpose = 3, Cout = 2, ...), identical memory to conv weight
        let ty = g.conv_transpose3d(yv, wv, None, geom);
        assert_eq!(g.shape(ty), xs.to_vec());
        let lhs: f64 = g.value(cx).data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_conv_gradients() {
        let geom = ConvGeometry { kernel: [1, 2, 2], stride: [1, 2, 2], padding: [0, 0, 0] };
        let xs = [2, 3, 2, 2, 3];
        let ws = [3, 2, 1, 2, 2];
        let x0 = seq(xs.iter().product(), 0.61);
        let w0 = seq(ws.iter().product(), 0.23);
        let weights = seq(2 * 2 * 2 * 4 * 6, 0.5);
        let run = |x: &[f64], w: &[f64]| {
            let g = Graph::<f64>::new();
            let xv = g.leaf(Tensor::from_f64(&xs, x));
            let wv = g.leaf(Tensor::from_f64(&ws, w));
            let bv = g.input(Tensor::from_f64(&[2], &[0.5, -0.5]));
            let y = g.conv_transpose3d(xv, wv, Some(bv), geom);
            let r = g.input(Tensor::from_f64(&g.shape(y), &weights));
            let loss = g.sum(g.mul(y, r));
            let gr = g.backward(loss);
            (g.item(loss), gr.get(xv).unwrap().clone(), gr.get(wv).unwrap().clone())
        };
        let (_, gx, gw) = run(&x0, &w0);
        for i in 0..x0.len() {
            let num = fd_grad(&|x| run(x, &w0).0, &x0, i);
            assert!((num - gx.data()[i]).abs() < 1e-6);
        }
        for i in 0..w0.len() {
            let num = fd_grad(&|w| run(&x0, w).0, &w0, i);
            assert!((num - gw.data()[i]).abs() < 1e-6);
        }
    }
}
