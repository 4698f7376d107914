//! Elementwise ops with singleton-axis broadcasting.
//!
//! Two operands broadcast when one is a scalar (single element), or when
//! ranks match and every axis extent is equal or 1. Gradients flowing into a
//! broadcast operand are summed over the broadcast axes in f64.

use super::{numel_of, Tensor};
use crate::error::{HxError, Result};

/// Row-major strides with 0 on broadcast axes.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1usize;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 { 0 } else { acc };
        acc *= shape[ax];
    }
    strides
}

fn padded_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    if shape.len() == rank {
        shape.to_vec()
    } else {
        // Only single-element tensors may differ in rank.
        vec![1; rank]
    }
}

fn broadcast_out_shape(a: &Tensor, b: &Tensor, context: &str) -> Result<Vec<usize>> {
    if a.numel() == 1 {
        return Ok(b.shape().to_vec());
    }
    if b.numel() == 1 {
        return Ok(a.shape().to_vec());
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() {
        return Err(HxError::ShapeMismatch {
            left: sa.to_vec(),
            right: sb.to_vec(),
            context: context.into(),
        });
    }
    let mut out = Vec::with_capacity(sa.len());
    for (&da, &db) in sa.iter().zip(sb) {
        if da == db || da == 1 || db == 1 {
            out.push(da.max(db));
        } else {
            return Err(HxError::ShapeMismatch {
                left: sa.to_vec(),
                right: sb.to_vec(),
                context: context.into(),
            });
        }
    }
    Ok(out)
}

/// Odometer walk over the output index space yielding (out, a, b) offsets.
fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total = numel_of(out_shape);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for out in 0..total {
        f(out, ai, bi);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ai += a_strides[ax];
            bi += b_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ai -= a_strides[ax] * out_shape[ax];
            bi -= b_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn binary_op(
    a: &Tensor,
    b: &Tensor,
    name: &'static str,
    fwd: impl Fn(f32, f32) -> f32,
    bwd: impl Fn(f32, f32, f32) -> (f32, f32) + 'static,
) -> Result<Tensor> {
    let out_shape = broadcast_out_shape(a, b, name)?;
    let same = a.shape() == b.shape();

    let data = {
        let av = a.data_ref();
        let bv = b.data_ref();
        if same {
            av.iter().zip(bv.iter()).map(|(&x, &y)| fwd(x, y)).collect()
        } else {
            let pa = padded_shape(a.shape(), out_shape.len());
            let pb = padded_shape(b.shape(), out_shape.len());
            let sa = bcast_strides(&pa, &out_shape);
            let sb = bcast_strides(&pb, &out_shape);
            let mut out = vec![0.0f32; numel_of(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                out[o] = fwd(av[i], bv[j]);
            });
            out
        }
    };

    let (pa, pb) = (a.clone(), b.clone());
    let out_shape_cl = out_shape.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |gy| {
            let (need_a, need_b) = (pa.is_active(), pb.is_active());
            if !need_a && !need_b {
                return;
            }
            let av = pa.data_ref();
            let bv = pb.data_ref();
            let mut ga = vec![0.0f64; if need_a { pa.numel() } else { 0 }];
            let mut gb = vec![0.0f64; if need_b { pb.numel() } else { 0 }];
            if same {
                for o in 0..gy.len() {
                    let (da, db) = bwd(av[o], bv[o], gy[o]);
                    if need_a {
                        ga[o] += da as f64;
                    }
                    if need_b {
                        gb[o] += db as f64;
                    }
                }
            } else {
                let psa = padded_shape(pa.shape(), out_shape_cl.len());
                let psb = padded_shape(pb.shape(), out_shape_cl.len());
                let sa = bcast_strides(&psa, &out_shape_cl);
                let sb = bcast_strides(&psb, &out_shape_cl);
                for_each_broadcast(&out_shape_cl, &sa, &sb, |o, i, j| {
                    let (da, db) = bwd(av[i], bv[j], gy[o]);
                    if need_a {
                        ga[i] += da as f64;
                    }
                    if need_b {
                        gb[j] += db as f64;
                    }
                });
            }
            drop(av);
            drop(bv);
            if need_a {
                let cast: Vec<f32> = ga.iter().map(|&v| v as f32).collect();
                pa.accum_grad(&cast);
            }
            if need_b {
                let cast: Vec<f32> = gb.iter().map(|&v| v as f32).collect();
                pb.accum_grad(&cast);
            }
        }),
    ))
}

fn unary_op(
    x: &Tensor,
    fwd: impl Fn(f32) -> f32,
    bwd: impl Fn(f32, f32, f32) -> f32 + 'static,
) -> Tensor {
    let data: Vec<f32> = x.data_ref().iter().map(|&v| fwd(v)).collect();
    let px = x.clone();
    let out_data = data.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |gy| {
            if !px.is_active() {
                return;
            }
            let xv = px.data_ref();
            let gx: Vec<f32> = (0..gy.len())
                .map(|i| bwd(xv[i], out_data[i], gy[i]))
                .collect();
            drop(xv);
            px.accum_grad(&gx);
        }),
    )
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(self, rhs, "add", |a, b| a + b, |_, _, gy| (gy, gy))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(self, rhs, "sub", |a, b| a - b, |_, _, gy| (gy, -gy))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(self, rhs, "mul", |a, b| a * b, |a, b, gy| (gy * b, gy * a))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(
            self,
            rhs,
            "div",
            |a, b| a / b,
            |a, b, gy| (gy / b, -gy * a / (b * b)),
        )
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn max2(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(
            self,
            rhs,
            "max2",
            |a, b| if a >= b { a } else { b },
            |a, b, gy| if a >= b { (gy, 0.0) } else { (0.0, gy) },
        )
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        self.add(&Tensor::scalar(c)).expect("scalar broadcast")
    }

    pub fn mul_scalar(&self, c: f32) -> Tensor {
        self.mul(&Tensor::scalar(c)).expect("scalar broadcast")
    }

    /// x^p with constant exponent. Subgradient conventions: 0^0 = 1 with zero
    /// gradient when p = 0. Exponents 0, 1, and 2 take exact fast paths.
    pub fn pow_const(&self, p: f32) -> Tensor {
        if p == 0.0 {
            return unary_op(self, |_| 1.0, |_, _, _| 0.0);
        }
        if p == 1.0 {
            return unary_op(self, |x| x, |_, _, gy| gy);
        }
        if p == 2.0 {
            return unary_op(self, |x| x * x, |x, _, gy| gy * 2.0 * x);
        }
        unary_op(
            self,
            |x| x.powf(p),
            move |x, _, gy| gy * p * x.powf(p - 1.0),
        )
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(&self) -> Tensor {
        unary_op(
            self,
            |x| x.abs(),
            |x, _, gy| {
                gy * if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// sgn(x) with sgn(0) = 0; zero gradient everywhere.
    pub fn sign(&self) -> Tensor {
        unary_op(
            self,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            |_, _, _| 0.0,
        )
    }

    pub fn sqrt_elem(&self) -> Tensor {
        unary_op(self, |x| x.sqrt(), |_, y, gy| gy / (2.0 * y))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_op(self, stable_sigmoid, |_, y, gy| gy * y * (1.0 - y))
    }

    pub fn log_elem(&self) -> Tensor {
        unary_op(self, |x| x.ln(), |x, _, gy| gy / x)
    }

    pub fn exp_elem(&self) -> Tensor {
        unary_op(self, |x| x.exp(), |_, y, gy| gy * y)
    }
}
