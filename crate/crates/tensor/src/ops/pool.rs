use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

fn pool_dims(shape: &[usize], k: [usize; 3]) -> ([usize; 3], [usize; 3]) {
    assert_eq!(shape.len(), 5, "avg_pool3d expects (B, C, D, H, W)");
    let inp = [shape[2], shape[3], shape[4]];
    for i in 0..3 {
        assert!(k[i] > 0 && inp[i] % k[i] == 0, "pool kernel {k:?} does not tile {inp:?}");
    }
    (inp, [inp[0] / k[0], inp[1] / k[1], inp[2] / k[2]])
}

impl<T: Float> Graph<'_, T> {
    /// Non-overlapping average pooling with kernel = stride = `k` over (D, H, W).
    pub fn avg_pool3d(&self, x: Var, k: [usize; 3]) -> Var {
        self.op(
            &[x],
            |v| {
                let s = v[0].shape();
                let (inp, out) = pool_dims(s, k);
                let planes = s[0] * s[1];
                let scale = T::of(1.0 / (k[0] * k[1] * k[2]) as f64);
                let in_n = inp[0] * inp[1] * inp[2];
                let out_n = out[0] * out[1] * out[2];
                let mut o = vec![T::zero(); planes * out_n];
                let d = v[0].data();
                for p in 0..planes {
                    for z in 0..inp[0] {
                        for y in 0..inp[1] {
                            let row = &d[p * in_n + (z * inp[1] + y) * inp[2]..][..inp[2]];
                            let ob = p * out_n + ((z / k[0]) * out[1] + y / k[1]) * out[2];
                            for (x, &val) in row.iter().enumerate() {
                                o[ob + x / k[2]] += val;
                            }
                        }
                    }
                }
                for val in &mut o {
                    *val *= scale;
                }
                Tensor::from_vec(&[s[0], s[1], out[0], out[1], out[2]], o)
            },
            move |c| {
                let s = c.inputs[0].shape();
                let (inp, out) = pool_dims(s, k);
                let planes = s[0] * s[1];
                let scale = T::of(1.0 / (k[0] * k[1] * k[2]) as f64);
                let in_n = inp[0] * inp[1] * inp[2];
                let out_n = out[0] * out[1] * out[2];
                let gd = c.grad.data();
                let mut g = vec![T::zero(); planes * in_n];
                for p in 0..planes {
                    for z in 0..inp[0] {
                        for y in 0..inp[1] {
                            let row = &mut g[p * in_n + (z * inp[1] + y) * inp[2]..][..inp[2]];
                            let ob = p * out_n + ((z / k[0]) * out[1] + y / k[1]) * out[2];
                            for (x, val) in row.iter_mut().enumerate() {
                                *val = gd[ob + x / k[2]] * scale;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(s, g))]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_2x2_blocks() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[1, 1, 1, 2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let y = g.avg_pool3d(x, [1, 2, 2]);
        assert_eq!(g.shape(y), vec![1, 1, 1, 1, 2]);
        assert_eq!(g.value(y).data(), &[3.5, 5.5]);
        let grads = g.backward(g.sum(y));
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 8]);
    }
}
