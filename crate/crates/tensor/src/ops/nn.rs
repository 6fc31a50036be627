use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

impl<T: Float> Graph<'_, T> {
    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        self.op(
            &[x],
            |v| {
                let n = *v[0].shape().last().expect("softmax of scalar");
                let mut out = v[0].data().to_vec();
                for row in out.chunks_mut(n) {
                    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut s = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
                Tensor::from_vec(v[0].shape(), out)
            },
            |c| {
                let n = *c.output.shape().last().unwrap();
                let mut g = vec![T::zero(); c.output.numel()];
                for ((gr, yr), dr) in g.chunks_mut(n).zip(c.output.data().chunks(n)).zip(c.grad.data().chunks(n)) {
                    let dot: T = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum();
                    for ((o, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *o = y * (d - dot);
                    }
                }
                vec![Some(Tensor::from_vec(c.output.shape(), g))]
            },
        )
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta` of that length.
    pub fn layer_norm_last(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let eps = T::of(eps);
        self.op(
            &[x, gamma, beta],
            |v| {
                let n = *v[0].shape().last().unwrap();
                assert_eq!(v[1].shape(), &[n], "layer_norm gamma shape");
                assert_eq!(v[2].shape(), &[n], "layer_norm beta shape");
                let (gd, bd) = (v[1].data(), v[2].data());
                let mut out = v[0].data().to_vec();
                let nf = T::of(n as f64);
                for row in out.chunks_mut(n) {
                    let mean = row.iter().copied().sum::<T>() / nf;
                    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
                    let inv = T::one() / (var + eps).sqrt();
                    for (i, x) in row.iter_mut().enumerate() {
                        *x = (*x - mean) * inv * gd[i] + bd[i];
                    }
                }
                Tensor::from_vec(v[0].shape(), out)
            },
            move |c| {
                let n = *c.inputs[0].shape().last().unwrap();
                let nf = T::of(n as f64);
                let gamma = c.inputs[1].data();
                let mut dx = vec![T::zero(); c.inputs[0].numel()];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dyg = vec![T::zero(); n];
                for ((xr, gr), dxr) in c.inputs[0].data().chunks(n).zip(c.grad.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let mean = xr.iter().copied().sum::<T>() / nf;
                    let var = xr.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
                    let inv = T::one() / (var + eps).sqrt();
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..n {
                        xhat[i] = (xr[i] - mean) * inv;
                        dyg[i] = gr[i] * gamma[i];
                        dg[i] += gr[i] * xhat[i];
                        db[i] += gr[i];
                        m1 += dyg[i];
                        m2 += dyg[i] * xhat[i];
                    }
                    m1 = m1 / nf;
                    m2 = m2 / nf;
                    for i in 0..n {
                        dxr[i] = inv * (dyg[i] - m1 - xhat[i] * m2);
                    }
                }
                vec![
                    Some(Tensor::from_vec(c.inputs[0].shape(), dx)),
                    Some(Tensor::from_vec(&[n], dg)),
                    Some(Tensor::from_vec(&[n], db)),
                ]
            },
        )
    }
}
