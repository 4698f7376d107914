//! Shared test oracles, independent of the library's compute paths.
//!
//! Everything here is written directly from definitions (nested loops,
//! f64 arithmetic) so it can serve as a reference for the im2col-based
//! implementation and for gradient checks.

#![allow(dead_code)]

use rand::Rng;

/// Nested-loop zero-padded convolution in f64: the definition of the
/// sliding dot product, written without any patch unrolling.
pub fn conv2d_oracle(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, wcin, kh, kw] = ws;
    assert_eq!(cin, wcin);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f64; n * cout * ho * wo];
    for i in 0..n {
        for o in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oh * stride + ky) as isize - padding as isize;
                                let xx = (ow * stride + kx) as isize - padding as isize;
                                if y < 0 || y >= h as isize || xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((i * cin + c) * h + y as usize) * wd + xx as usize;
                                let wi = ((o * cin + c) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((i * cout + o) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    (out, [n, cout, ho, wo])
}

/// Per-patch Euclidean norm by direct looping over the padded window.
pub fn patch_norms_oracle(
    x: &[f64],
    xs: [usize; 4],
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [n, cin, h, wd] = xs;
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f64; n * ho * wo];
    for i in 0..n {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0f64;
                for c in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oh * stride + ky) as isize - padding as isize;
                            let xx = (ow * stride + kx) as isize - padding as isize;
                            if y < 0 || y >= h as isize || xx < 0 || xx >= wd as isize {
                                continue;
                            }
                            let v = x[((i * cin + c) * h + y as usize) * wd + xx as usize];
                            acc += v * v;
                        }
                    }
                }
                out[(i * ho + oh) * wo + ow] = acc.sqrt();
            }
        }
    }
    out
}

/// Four-nested-loop Kronecker product over the two leading (channel) axes;
/// trailing spatial extents are carried through.
pub fn kronecker_oracle(
    a: &[f64],
    (p, q): (usize, usize),
    f: &[f64],
    (r, s): (usize, usize),
    spatial: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; p * r * q * s * spatial];
    for i in 0..p {
        for j in 0..q {
            for k in 0..r {
                for l in 0..s {
                    for t in 0..spatial {
                        out[(((i * r + k) * q * s) + (j * s + l)) * spatial + t] =
                            a[i * q + j] * f[(k * s + l) * spatial + t];
                    }
                }
            }
        }
    }
    out
}

/// f64 reference of the whole B-cos transform: row-normalize the weight,
/// slide the dot product, divide by patch norms, scale by |cos|^(B-1).
/// Built only from the nested-loop oracles above.
pub fn bcos_forward_oracle(
    x: &[f64],
    xs: [usize; 4],
    w_raw: &[f64],
    ws: [usize; 4],
    stride: usize,
    padding: usize,
    b_exp: f64,
) -> Vec<f64> {
    let [cout, cin, kh, kw] = ws;
    let k_len = cin * kh * kw;
    let mut w_hat = w_raw.to_vec();
    for o in 0..cout {
        let row = &mut w_hat[o * k_len..][..k_len];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    let (s, os) = conv2d_oracle(x, xs, &w_hat, ws, stride, padding);
    let pn = patch_norms_oracle(x, xs, kh, kw, stride, padding);
    let positions = os[2] * os[3];
    let mut out = vec![0.0f64; s.len()];
    for i in 0..os[0] {
        for o in 0..cout {
            for p in 0..positions {
                let sv = s[(i * cout + o) * positions + p];
                let cos = sv / pn[i * positions + p].max(1e-12);
                out[(i * cout + o) * positions + p] = sv * cos.abs().powf(b_exp - 1.0);
            }
        }
    }
    out
}

/// Central finite differences of an f64 scalar function.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = vec![0.0f64; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        g[i] = (hi - lo) / (2.0 * eps);
    }
    g
}

/// Relative-error gradient comparison with an f32 noise floor.
pub fn assert_grad_close(analytic: &[f32], reference: &[f64], rtol: f64, label: &str) {
    assert_eq!(analytic.len(), reference.len(), "{label}: length");
    for (i, (&a, &r)) in analytic.iter().zip(reference).enumerate() {
        let a = a as f64;
        let denom = a.abs().max(r.abs()).max(1e-4);
        let rel = (a - r).abs() / denom;
        assert!(
            rel <= rtol,
            "{label}: coordinate {i}: analytic {a} vs reference {r} (rel {rel:.3e})"
        );
    }
}

pub fn rand_vec<R: Rng>(rng: &mut R, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
