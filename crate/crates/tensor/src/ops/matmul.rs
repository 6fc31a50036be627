use crate::gemm::gemm;
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

fn dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> MatDims {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2");
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dims differ: {a:?} x {b:?}");
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared_b = b.len() == 2;
    if !shared_b {
        assert_eq!(a[..a.len() - 2], b[..b.len() - 2], "matmul batch dims differ");
    }
    MatDims { batch, m, k, n, shared_b }
}

impl<T: Float> Graph<'_, T> {
    /// Batched `op(a) · op(b)` over the last two dims; `b` may be rank 2 and shared.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        self.op(
            &[a, b],
            |v| {
                let d = dims(v[0].shape(), v[1].shape(), ta, tb);
                let mut out_shape = v[0].shape()[..v[0].rank() - 2].to_vec();
                out_shape.extend([d.m, d.n]);
                let mut out = vec![T::zero(); d.batch * d.m * d.n];
                let (ad, bd) = (v[0].data(), v[1].data());
                for i in 0..d.batch {
                    let bs = if d.shared_b { 0 } else { i * d.k * d.n };
                    gemm(
                        d.m,
                        d.k,
                        d.n,
                        &ad[i * d.m * d.k..],
                        ta,
                        &bd[bs..],
                        tb,
                        &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
                        false,
                    );
                }
                Tensor::from_vec(&out_shape, out)
            },
            move |c| {
                let d = dims(c.inputs[0].shape(), c.inputs[1].shape(), ta, tb);
                let (ad, bd, gd) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
                let ga = c.needs[0].then(|| {
                    let mut ga = vec![T::zero(); d.batch * mk];
                    for i in 0..d.batch {
                        let bs = if d.shared_b { 0 } else { i * kn };
                        let g = &gd[i * mn..];
                        let dst = &mut ga[i * mk..(i + 1) * mk];
                        if ta {
                            gemm(d.k, d.n, d.m, &bd[bs..], tb, g, true, dst, false);
                        } else {
                            gemm(d.m, d.n, d.k, g, false, &bd[bs..], !tb, dst, false);
                        }
                    }
                    Tensor::from_vec(c.inputs[0].shape(), ga)
                });
                let gb = c.needs[1].then(|| {
                    let nb = if d.shared_b { 1 } else { d.batch };
                    let mut gb = vec![T::zero(); nb * kn];
                    for i in 0..d.batch {
                        let (bs, acc) = if d.shared_b { (0, i > 0) } else { (i * kn, false) };
                        let g = &gd[i * mn..];
                        let a_i = &ad[i * mk..];
                        let dst = &mut gb[bs..bs + kn];
                        if tb {
                            gemm(d.n, d.m, d.k, g, true, a_i, ta, dst, acc);
                        } else {
                            gemm(d.k, d.m, d.n, a_i, !ta, g, false, dst, acc);
                        }
                    }
                    Tensor::from_vec(c.inputs[1].shape(), gb)
                });
                vec![ga, gb]
            },
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }
}
