use crate::graph::{Graph, Var};
use crate::tensor::{for_each_offset, strides, Float, Tensor};

pub(crate) fn permute_tensor<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    assert_eq!(perm.len(), x.rank(), "permutation rank mismatch");
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for_each_offset(&out_shape, [&src_strides], |p, [o]| out[p] = d[o]);
    Tensor::from_vec(&out_shape, out)
}

fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

impl<T: Float> Graph<'_, T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        self.op(
            &[x],
            |v| v[0].clone().reshape(&shape),
            |c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()))],
        )
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let perm = perm.to_vec();
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.op(&[x], |v| permute_tensor(v[0], &perm), move |c| vec![Some(permute_tensor(c.grad, &inv))])
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let lens: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis]).collect();
        let lens_bw = lens.clone();
        self.op(
            xs,
            |v| {
                let mut out_shape = v[0].shape().to_vec();
                for t in v {
                    let mut s = t.shape().to_vec();
                    s[axis] = out_shape[axis];
                    assert_eq!(s, out_shape, "concat shape mismatch on axis {axis}");
                }
                out_shape[axis] = lens.iter().sum();
                let (outer, total, inner) = split_dims(&out_shape, axis);
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for (t, &l) in v.iter().zip(&lens) {
                        out.extend_from_slice(&t.data()[o * l * inner..(o + 1) * l * inner]);
                    }
                }
                Tensor::from_vec(&out_shape, out)
            },
            move |c| {
                let (outer, total, inner) = split_dims(c.grad.shape(), axis);
                let mut start = 0;
                lens_bw
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        let s = start;
                        start += l;
                        c.needs[i].then(|| {
                            let mut g = Vec::with_capacity(outer * l * inner);
                            for o in 0..outer {
                                let base = (o * total + s) * inner;
                                g.extend_from_slice(&c.grad.data()[base..base + l * inner]);
                            }
                            Tensor::from_vec(c.inputs[i].shape(), g)
                        })
                    })
                    .collect()
            },
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        self.op(
            &[x],
            |v| {
                let shape = v[0].shape();
                assert!(start + len <= shape[axis], "narrow out of range");
                let (outer, total, inner) = split_dims(shape, axis);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    out.extend_from_slice(&v[0].data()[base..base + len * inner]);
                }
                let mut s = shape.to_vec();
                s[axis] = len;
                Tensor::from_vec(&s, out)
            },
            move |c| {
                let shape = c.inputs[0].shape();
                let (outer, total, inner) = split_dims(shape, axis);
                let mut g = Tensor::zeros(shape);
                let gd = g.data_mut();
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    gd[base..base + len * inner]
                        .copy_from_slice(&c.grad.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            },
        )
    }
}
