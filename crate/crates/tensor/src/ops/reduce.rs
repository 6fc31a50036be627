use super::elementwise::broadcast_zip;
use crate::graph::{Graph, Var};
use crate::tensor::{for_each_offset, strides, Float, Tensor};

fn kept_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect()
}

fn sum_keep<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let out_shape = kept_shape(x.shape(), axes);
    let os = strides(&out_shape);
    let os: Vec<usize> = os.iter().enumerate().map(|(i, &s)| if axes.contains(&i) { 0 } else { s }).collect();
    let xs = strides(x.shape());
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let xd = x.data();
    for_each_offset(x.shape(), [&xs, &os], |_, [ox, oo]| out[oo] += xd[ox]);
    Tensor::from_vec(&out_shape, out)
}

impl<T: Float> Graph<'_, T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self, x: Var) -> Var {
        self.op(
            &[x],
            |v| Tensor::scalar(v[0].sum()),
            |c| {
                let g = c.grad.item();
                vec![Some(Tensor::full(c.inputs[0].shape(), g))]
            },
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&self, x: Var, axes: &[usize]) -> Var {
        let axes = axes.to_vec();
        self.op(
            &[x],
            |v| sum_keep(v[0], &axes),
            |c| {
                let zeros = Tensor::zeros(c.inputs[0].shape());
                vec![Some(broadcast_zip(&zeros, c.grad, |_, g| g))]
            },
        )
    }

    pub fn mean_axes(&self, x: Var, axes: &[usize]) -> Var {
        let shape = self.shape(x);
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        let s = self.sum_axes(x, axes);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Maximum along one axis (kept as size 1). Ties route the gradient to the first maximum.
    pub fn max_axis(&self, x: Var, axis: usize) -> Var {
        let (value, arg) = {
            let xv = self.value(x);
            let shape = xv.shape();
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = vec![T::neg_infinity(); outer * inner];
            let mut arg = vec![0usize; outer * inner];
            let d = xv.data();
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    for i in 0..inner {
                        let v = d[base + i];
                        let slot = o * inner + i;
                        if v > out[slot] {
                            out[slot] = v;
                            arg[slot] = base + i;
                        }
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = 1;
            (Tensor::from_vec(&out_shape, out), arg)
        };
        self.custom(&[x], value, move |c| {
            let mut g = Tensor::zeros(c.inputs[0].shape());
            let gd = g.data_mut();
            for (slot, &src) in arg.iter().enumerate() {
                gd[src] += c.grad.data()[slot];
            }
            vec![Some(g)]
        })
    }
}
