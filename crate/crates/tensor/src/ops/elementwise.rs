use crate::graph::{Graph, Var};
use crate::tensor::{for_each_offset, strides, Float, Tensor};

/// Numpy-style broadcast of two equal-rank shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape.iter().zip(s).map(|(&d, s)| if d == 1 { 0 } else { s }).collect()
}

pub(crate) fn broadcast_zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape());
    let sb = broadcast_strides(b.shape());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); out_shape.iter().product()];
    for_each_offset(&out_shape, [&sa, &sb], |p, [oa, ob]| out[p] = f(ad[oa], bd[ob]));
    Tensor::from_vec(&out_shape, out)
}

/// Sums `grad` over the axes where `shape` was broadcast.
pub(crate) fn reduce_to<T: Float>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let st = broadcast_strides(shape);
    let gs = strides(grad.shape());
    let mut out = vec![T::zero(); shape.iter().product()];
    let gd = grad.data();
    for_each_offset(grad.shape(), [&gs, &st], |_, [og, ot]| out[ot] += gd[og]);
    Tensor::from_vec(shape, out)
}

fn expand_to<T: Float>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    broadcast_zip(&Tensor::zeros(shape), x, |_, v| v)
}

#[inline]
fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Graph<'_, T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.op(
            &[a, b],
            |v| broadcast_zip(v[0], v[1], |x, y| x + y),
            |c| {
                vec![
                    c.needs[0].then(|| reduce_to(c.grad, c.inputs[0].shape())),
                    c.needs[1].then(|| reduce_to(c.grad, c.inputs[1].shape())),
                ]
            },
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.op(
            &[a, b],
            |v| broadcast_zip(v[0], v[1], |x, y| x - y),
            |c| {
                vec![
                    c.needs[0].then(|| reduce_to(c.grad, c.inputs[0].shape())),
                    c.needs[1].then(|| reduce_to(&c.grad.map(|g| -g), c.inputs[1].shape())),
                ]
            },
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.op(
            &[a, b],
            |v| broadcast_zip(v[0], v[1], |x, y| x * y),
            |c| {
                vec![
                    c.needs[0].then(|| reduce_to(&broadcast_zip(c.grad, c.inputs[1], |g, y| g * y), c.inputs[0].shape())),
                    c.needs[1].then(|| reduce_to(&broadcast_zip(c.grad, c.inputs[0], |g, x| g * x), c.inputs[1].shape())),
                ]
            },
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.op(
            &[a, b],
            |v| broadcast_zip(v[0], v[1], |x, y| x / y),
            |c| {
                let b_full = expand_to(c.inputs[1], c.grad.shape());
                let ga = c.needs[0].then(|| {
                    reduce_to(&c.grad.zip_map(&b_full, |g, y| g / y), c.inputs[0].shape())
                });
                let gb = c.needs[1].then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let t = c.grad.zip_map(c.output, |g, q| g * q);
                    reduce_to(&t.zip_map(&b_full, |t, y| -t / y), c.inputs[1].shape())
                });
                vec![ga, gb]
            },
        )
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var {
        self.op(
            &[x],
            |v| v[0].map(f),
            move |c| {
                let g = c
                    .inputs[0]
                    .data()
                    .iter()
                    .zip(c.output.data())
                    .zip(c.grad.data())
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(c.grad.shape(), g))]
            },
        )
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.mul_scalar(x, -1.0)
    }

    /// `s - x`
    pub fn rsub_scalar(&self, s: f64, x: Var) -> Var {
        let s = T::of(s);
        self.unary(x, move |v| s - v, |_, _| -T::one())
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| T::of(2.0) * x)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    /// `x^p` for positive `x`.
    pub fn powf(&self, x: Var, p: f64) -> Var {
        let pt = T::of(p);
        self.unary(x, move |v| v.powf(pt), move |x, _| pt * x.powf(pt - T::one()))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |x, _| T::one() / x)
    }

    pub fn clamp_min(&self, x: Var, lo: f64) -> Var {
        let lo = T::of(lo);
        self.unary(x, move |v| v.max(lo), move |x, _| if x > lo { T::one() } else { T::zero() })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, |v| T::of(gelu_f64(v.as_f64())), |x, _| T::of(gelu_grad_f64(x.as_f64())))
    }
}
