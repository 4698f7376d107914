//! Parameterized hypercomplex weight construction.
//!
//! A PH convolution weight is a sum of Kronecker products between n algebra
//! matrices A_i (n x n, learnable or fixed) and n filter banks F_i of shape
//! [Cout/n, Cin/n, kh, kw]. With n = 4 and the algebra fixed to the Hamilton
//! rules, the assembled weight acts like quaternion multiplication on
//! 4-block channel stacks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HxError, Result};
use crate::tensor::Tensor;

/// q = q0 + q1*i + q2*j + q3*k
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub q0: f32,
    pub q1: f32,
    pub q2: f32,
    pub q3: f32,
}

impl Quaternion {
    pub fn new(q0: f32, q1: f32, q2: f32, q3: f32) -> Self {
        Quaternion { q0, q1, q2, q3 }
    }
}

/// Hamilton product p x q (non-commutative).
pub fn hamilton_product(p: &Quaternion, q: &Quaternion) -> Quaternion {
    Quaternion {
        q0: p.q0 * q.q0 - p.q1 * q.q1 - p.q2 * q.q2 - p.q3 * q.q3,
        q1: p.q0 * q.q1 + p.q1 * q.q0 + p.q2 * q.q3 - p.q3 * q.q2,
        q2: p.q0 * q.q2 - p.q1 * q.q3 + p.q2 * q.q0 + p.q3 * q.q1,
        q3: p.q0 * q.q3 + p.q1 * q.q2 - p.q2 * q.q1 + p.q3 * q.q0,
    }
}

/// The four fixed 4x4 algebra matrices of the Hamilton product.
pub fn hamilton_algebra_matrices() -> [Tensor; 4] {
    #[rustfmt::skip]
    let rows: [[f32; 16]; 4] = [
        [1.0, 0.0, 0.0, 0.0,
         0.0, 1.0, 0.0, 0.0,
         0.0, 0.0, 1.0, 0.0,
         0.0, 0.0, 0.0, 1.0],
        [0.0, -1.0, 0.0, 0.0,
         1.0, 0.0, 0.0, 0.0,
         0.0, 0.0, 0.0, -1.0,
         0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, -1.0, 0.0,
         0.0, 0.0, 0.0, 1.0,
         1.0, 0.0, 0.0, 0.0,
         0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, -1.0,
         0.0, 0.0, -1.0, 0.0,
         0.0, 1.0, 0.0, 0.0,
         1.0, 0.0, 0.0, 0.0],
    ];
    rows.map(|r| Tensor::from_vec(&[4, 4], r.to_vec()).expect("constant 4x4"))
}

/// Kronecker product over the two leading (channel) axes; trailing spatial
/// axes of `f` are carried through. Block (i,j) of the output is A[i,j] * F.
pub fn kronecker(a: &Tensor, f: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(HxError::InvalidArgument(format!(
            "kronecker expects a 2-D algebra matrix, got {:?}",
            a.shape()
        )));
    }
    if f.shape().len() < 2 {
        return Err(HxError::InvalidArgument(format!(
            "kronecker expects a filter with at least 2 axes, got {:?}",
            f.shape()
        )));
    }
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let (r, s) = (f.shape()[0], f.shape()[1]);
    let spatial: usize = f.shape()[2..].iter().product();

    let mut out_shape = vec![p * r, q * s];
    out_shape.extend_from_slice(&f.shape()[2..]);

    let mut data = vec![0.0f32; p * r * q * s * spatial];
    {
        let av = a.data_ref();
        let fv = f.data_ref();
        for i in 0..p {
            for j in 0..q {
                let aij = av[i * q + j];
                if aij == 0.0 {
                    continue;
                }
                for k in 0..r {
                    for l in 0..s {
                        let dst = ((i * r + k) * q * s + (j * s + l)) * spatial;
                        let src = (k * s + l) * spatial;
                        for t in 0..spatial {
                            data[dst + t] = aij * fv[src + t];
                        }
                    }
                }
            }
        }
    }

    let (pa, pf) = (a.clone(), f.clone());
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), f.clone()],
        Box::new(move |gy| {
            let (need_a, need_f) = (pa.is_active(), pf.is_active());
            if !need_a && !need_f {
                return;
            }
            let av = pa.data_ref();
            let fv = pf.data_ref();
            let mut ga = vec![0.0f64; p * q];
            let mut gf = vec![0.0f64; r * s * spatial];
            for i in 0..p {
                for j in 0..q {
                    let aij = av[i * q + j] as f64;
                    for k in 0..r {
                        for l in 0..s {
                            let dst = ((i * r + k) * q * s + (j * s + l)) * spatial;
                            let src = (k * s + l) * spatial;
                            for t in 0..spatial {
                                let g = gy[dst + t] as f64;
                                if need_a {
                                    ga[i * q + j] += g * fv[src + t] as f64;
                                }
                                if need_f {
                                    gf[src + t] += g * aij;
                                }
                            }
                        }
                    }
                }
            }
            drop(av);
            drop(fv);
            if need_a {
                let cast: Vec<f32> = ga.iter().map(|&v| v as f32).collect();
                pa.accum_grad(&cast);
            }
            if need_f {
                let cast: Vec<f32> = gf.iter().map(|&v| v as f32).collect();
                pf.accum_grad(&cast);
            }
        }),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlgebraMode {
    LearnableAlgebra,
    HamiltonFixed,
}

/// Algebra matrices plus filter banks; assembles to one convolution weight.
pub struct PhWeightSpec {
    n: usize,
    algebra: Vec<Tensor>,
    filters: Vec<Tensor>,
    mode: AlgebraMode,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
}

/// Learnable scalar counts for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub filters: usize,
    pub algebra: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.filters + self.algebra
    }
}

impl PhWeightSpec {
    fn check_divisibility(n: usize, cout: usize, cin: usize) -> Result<()> {
        if n == 0 {
            return Err(HxError::InvalidArgument("n must be positive".into()));
        }
        if cout % n != 0 {
            return Err(HxError::Divisibility {
                channels: cout,
                n,
                context: "output channels of a PH weight".into(),
            });
        }
        if cin % n != 0 {
            return Err(HxError::Divisibility {
                channels: cin,
                n,
                context: "input channels of a PH weight".into(),
            });
        }
        Ok(())
    }

    /// Learnable algebra and filters. Filters are N(0, sqrt(2/(Cin*kh*kw)));
    /// algebra entries are N(0, 1/n).
    pub fn new_learnable<R: Rng>(
        n: usize,
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        rng: &mut R,
    ) -> Result<PhWeightSpec> {
        Self::check_divisibility(n, cout, cin)?;
        let algebra_std = 1.0 / n as f64;
        let algebra_dist = Normal::new(0.0, algebra_std).expect("positive std");
        let algebra = (0..n)
            .map(|_| {
                let vals: Vec<f32> = (0..n * n)
                    .map(|_| algebra_dist.sample(rng) as f32)
                    .collect();
                Tensor::param_from_vec(&[n, n], vals).expect("algebra shape")
            })
            .collect();
        let filters = Self::random_filters(n, cout, cin, kh, kw, rng)?;
        Ok(PhWeightSpec {
            n,
            algebra,
            filters,
            mode: AlgebraMode::LearnableAlgebra,
            cout,
            cin,
            kh,
            kw,
        })
    }

    /// Fixed Hamilton algebra (n = 4); only the filters learn.
    pub fn new_hamilton<R: Rng>(
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        rng: &mut R,
    ) -> Result<PhWeightSpec> {
        Self::check_divisibility(4, cout, cin)?;
        let filters = Self::random_filters(4, cout, cin, kh, kw, rng)?;
        Ok(PhWeightSpec {
            n: 4,
            algebra: hamilton_algebra_matrices().to_vec(),
            filters,
            mode: AlgebraMode::HamiltonFixed,
            cout,
            cin,
            kh,
            kw,
        })
    }

    /// Build from explicit parts, validating every invariant.
    pub fn from_parts(
        n: usize,
        algebra: Vec<Tensor>,
        filters: Vec<Tensor>,
        mode: AlgebraMode,
    ) -> Result<PhWeightSpec> {
        if algebra.len() != n || filters.len() != n {
            return Err(HxError::InvalidArgument(format!(
                "expected {n} algebra matrices and {n} filter banks, got {} and {}",
                algebra.len(),
                filters.len()
            )));
        }
        for a in &algebra {
            if a.shape() != [n, n] {
                return Err(HxError::InvalidArgument(format!(
                    "algebra matrix shape {:?}, expected [{n}, {n}]",
                    a.shape()
                )));
            }
        }
        let fs = filters[0].shape().to_vec();
        if fs.len() != 4 {
            return Err(HxError::InvalidArgument(format!(
                "filter bank shape {fs:?}, expected [Cout/n, Cin/n, kh, kw]"
            )));
        }
        for f in &filters[1..] {
            if f.shape() != fs {
                return Err(HxError::ShapeMismatch {
                    left: fs.clone(),
                    right: f.shape().to_vec(),
                    context: "filter banks must share one shape".into(),
                });
            }
        }
        if mode == AlgebraMode::HamiltonFixed {
            if n != 4 {
                return Err(HxError::InvalidArgument(format!(
                    "hamilton_fixed requires n = 4, got {n}"
                )));
            }
            for (given, expect) in algebra.iter().zip(hamilton_algebra_matrices()) {
                if given.to_vec() != expect.to_vec() {
                    return Err(HxError::InvalidArgument(
                        "hamilton_fixed algebra must match the Hamilton matrices exactly".into(),
                    ));
                }
            }
        }
        let (cout, cin) = (fs[0] * n, fs[1] * n);
        Ok(PhWeightSpec {
            n,
            algebra,
            filters,
            mode,
            cout,
            cin,
            kh: fs[2],
            kw: fs[3],
        })
    }

    fn random_filters<R: Rng>(
        n: usize,
        cout: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        rng: &mut R,
    ) -> Result<Vec<Tensor>> {
        let std = (2.0 / (cin * kh * kw) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let per = (cout / n) * (cin / n) * kh * kw;
        Ok((0..n)
            .map(|_| {
                let vals: Vec<f32> = (0..per).map(|_| dist.sample(rng) as f32).collect();
                Tensor::param_from_vec(&[cout / n, cin / n, kh, kw], vals).expect("filter shape")
            })
            .collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> AlgebraMode {
        self.mode
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn algebra(&self) -> &[Tensor] {
        &self.algebra
    }

    pub fn filters(&self) -> &[Tensor] {
        &self.filters
    }

    /// W = sum_i A_i (x) F_i, differentiable through every learnable part.
    /// Recomputed on every forward so algebra gradients stay exact.
    pub fn assemble(&self) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (a, f) in self.algebra.iter().zip(&self.filters) {
            let term = kronecker(a, f)?;
            acc = Some(match acc {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
        Ok(acc.expect("n >= 1"))
    }

    /// Tensors the optimizer updates.
    pub fn learnable_params(&self) -> Vec<Tensor> {
        let mut params: Vec<Tensor> = self.filters.clone();
        if self.mode == AlgebraMode::LearnableAlgebra {
            params.extend(self.algebra.iter().cloned());
        }
        params
    }

    /// Exact learnable scalar counts: n*(Cout/n)*(Cin/n)*kh*kw filter
    /// entries, plus n^3 algebra entries in learnable mode.
    pub fn param_count(&self) -> ParamBreakdown {
        ParamBreakdown {
            filters: self.n * (self.cout / self.n) * (self.cin / self.n) * self.kh * self.kw,
            algebra: if self.mode == AlgebraMode::LearnableAlgebra {
                self.n * self.n * self.n
            } else {
                0
            },
        }
    }
}
