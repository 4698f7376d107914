//! 2-D convolution, sliding-patch norms, and grouped channel max.
//!
//! Convolution is implemented by explicit patch unrolling (im2col) so the
//! sliding dot product and the patch norms share one geometry. Inner loops
//! accumulate in f64. Batched ops parallelize over samples; every output
//! element has a fixed summation order, so results do not depend on thread
//! scheduling.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{HxError, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a convolution axis: floor((size + 2p - k)/stride) + 1.
pub fn conv_output_extent(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(HxError::Geometry("stride must be positive".into()));
    }
    let padded = size + 2 * padding;
    if padded < k {
        return Err(HxError::Geometry(format!(
            "kernel {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn geometry(
    input_shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<Geometry> {
    if input_shape.len() != 4 {
        return Err(HxError::Geometry(format!(
            "expected [N,C,H,W] input, got {input_shape:?}"
        )));
    }
    let (cin, h, w) = (input_shape[1], input_shape[2], input_shape[3]);
    let ho = conv_output_extent(h, kh, stride, padding)?;
    let wo = conv_output_extent(w, kw, stride, padding)?;
    Ok(Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        ho,
        wo,
    })
}

/// Unroll one sample into patch rows widened to f64: `rows[p][k]` with
/// `p = oh*wo + ow` and `k = c*kh*kw + ky*kw + kx`. Padding positions stay
/// zero.
fn im2col(sample: &[f32], g: &Geometry, rows: &mut [f64]) {
    debug_assert_eq!(rows.len(), g.positions() * g.patch_len());
    rows.fill(0.0);
    let k_len = g.patch_len();
    for oh in 0..g.ho {
        let y0 = (oh * g.stride) as isize - g.padding as isize;
        for ow in 0..g.wo {
            let x0 = (ow * g.stride) as isize - g.padding as isize;
            let row = &mut rows[(oh * g.wo + ow) * k_len..][..k_len];
            for c in 0..g.cin {
                for ky in 0..g.kh {
                    let y = y0 + ky as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    // clip the kernel row to the valid input columns
                    let kx_lo = (-x0).max(0) as usize;
                    let kx_hi = (g.w as isize - x0).min(g.kw as isize).max(0) as usize;
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let src = c * g.h * g.w + y as usize * g.w + (x0 + kx_lo as isize) as usize;
                    let dst = c * g.kh * g.kw + ky * g.kw + kx_lo;
                    for (d, &s) in row[dst..dst + (kx_hi - kx_lo)]
                        .iter_mut()
                        .zip(&sample[src..src + (kx_hi - kx_lo)])
                    {
                        *d = s as f64;
                    }
                }
            }
        }
    }
}

/// Visit the in-bounds entries of patch `p`: yields (k, input_flat) pairs.
pub(crate) fn for_each_patch_entry(
    input_shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    p: usize,
    mut f: impl FnMut(usize, usize),
) {
    let g = geometry(input_shape, kh, kw, stride, padding).expect("validated geometry");
    let (oh, ow) = (p / g.wo, p % g.wo);
    let y0 = (oh * g.stride) as isize - g.padding as isize;
    let x0 = (ow * g.stride) as isize - g.padding as isize;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            let y = y0 + ky as isize;
            if y < 0 || y >= g.h as isize {
                continue;
            }
            for kx in 0..g.kw {
                let x = x0 + kx as isize;
                if x < 0 || x >= g.w as isize {
                    continue;
                }
                f(
                    c * g.kh * g.kw + ky * g.kw + kx,
                    c * g.h * g.w + y as usize * g.w + x as usize,
                )
            }
        }
    }
}

const P_TILE: usize = 16;

use super::simd::{axpy1_f64, axpy4_f64, dot4_f64, dot_f64, update4_f64, widen};

/// Zero-padded 2-D convolution without bias: [N,Cin,H,W] * [Cout,Cin,kh,kw]
/// -> [N,Cout,H',W'].
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let ws = weight.shape().to_vec();
    if ws.len() != 4 {
        return Err(HxError::Geometry(format!(
            "expected [Cout,Cin,kh,kw] weight, got {ws:?}"
        )));
    }
    let g = geometry(input.shape(), ws[2], ws[3], stride, padding)?;
    if ws[1] != g.cin {
        return Err(HxError::ShapeMismatch {
            left: input.shape().to_vec(),
            right: ws.clone(),
            context: "conv2d input channels vs weight fan-in".into(),
        });
    }
    let n = input.shape()[0];
    let cout = ws[0];
    let (k_len, p_total) = (g.patch_len(), g.positions());

    let mut out = vec![0.0f32; n * cout * p_total];
    {
        let xv = input.data_ref();
        let wv = weight.data_ref();
        let x: &[f32] = &xv;
        let mut wgt = Vec::new();
        widen(&wv, &mut wgt);
        let wgt: &[f64] = &wgt;
        out.par_chunks_mut(cout * p_total)
            .enumerate()
            .for_each(|(i, out_s)| {
                let sample = &x[i * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
                let mut rows = vec![0.0f64; p_total * k_len];
                im2col(sample, &g, &mut rows);
                let blocks = cout / 4;
                // tile over patch positions so each 4-row weight block is
                // streamed once per tile instead of once per position
                for pt in (0..p_total).step_by(P_TILE) {
                    let pe = (pt + P_TILE).min(p_total);
                    for b in 0..blocks {
                        let o = 4 * b;
                        let w4 = [
                            &wgt[o * k_len..][..k_len],
                            &wgt[(o + 1) * k_len..][..k_len],
                            &wgt[(o + 2) * k_len..][..k_len],
                            &wgt[(o + 3) * k_len..][..k_len],
                        ];
                        for p in pt..pe {
                            let acc = dot4_f64(w4, &rows[p * k_len..][..k_len]);
                            for (j, &v) in acc.iter().enumerate() {
                                out_s[(o + j) * p_total + p] = v as f32;
                            }
                        }
                    }
                    for o in 4 * blocks..cout {
                        let w_row = &wgt[o * k_len..][..k_len];
                        for p in pt..pe {
                            out_s[o * p_total + p] =
                                dot_f64(w_row, &rows[p * k_len..][..k_len]) as f32;
                        }
                    }
                }
            });
    }

    let (px, pw) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        vec![n, cout, g.ho, g.wo],
        out,
        vec![input.clone(), weight.clone()],
        Box::new(move |gy| {
            let (need_x, need_w) = (px.is_active(), pw.is_active());
            if !need_x && !need_w {
                return;
            }
            let sample_len = g.cin * g.h * g.w;
            let xv = px.data_ref();
            let wv = pw.data_ref();
            let x: &[f32] = &xv;
            let mut wgt = Vec::new();
            widen(&wv, &mut wgt);
            let wgt: &[f64] = &wgt;

            let mut dx = vec![0.0f32; if need_x { n * sample_len } else { 0 }];
            let mut dx_chunks: Vec<&mut [f32]> = if need_x {
                dx.chunks_mut(sample_len).collect()
            } else {
                (0..n).map(|_| &mut [] as &mut [f32]).collect()
            };

            // One pass per sample builds the patch rows once and produces
            // both gradients; per-sample filter gradients are then summed
            // in sample order for determinism.
            let dws: Vec<Vec<f64>> = dx_chunks
                .par_iter_mut()
                .enumerate()
                .map(|(i, dx_s)| {
                    let sample = &x[i * sample_len..][..sample_len];
                    let gy_s = &gy[i * cout * p_total..][..cout * p_total];
                    let mut rows = vec![0.0f64; p_total * k_len];
                    im2col(sample, &g, &mut rows);

                    let mut dw_s = vec![0.0f64; if need_w { cout * k_len } else { 0 }];
                    let mut dx_acc = vec![0.0f64; if need_x { sample_len } else { 0 }];
                    let mut dp_rows = vec![0.0f64; P_TILE * k_len];
                    let blocks = cout / 4;
                    for pt in (0..p_total).step_by(P_TILE) {
                        let pe = (pt + P_TILE).min(p_total);
                        if need_x {
                            dp_rows.fill(0.0);
                        }
                        for blk in 0..blocks {
                            let o = 4 * blk;
                            let w4 = [
                                &wgt[o * k_len..][..k_len],
                                &wgt[(o + 1) * k_len..][..k_len],
                                &wgt[(o + 2) * k_len..][..k_len],
                                &wgt[(o + 3) * k_len..][..k_len],
                            ];
                            for p in pt..pe {
                                let gq = [
                                    gy_s[o * p_total + p] as f64,
                                    gy_s[(o + 1) * p_total + p] as f64,
                                    gy_s[(o + 2) * p_total + p] as f64,
                                    gy_s[(o + 3) * p_total + p] as f64,
                                ];
                                if gq == [0.0; 4] {
                                    continue;
                                }
                                if need_x {
                                    axpy4_f64(&mut dp_rows[(p - pt) * k_len..][..k_len], gq, w4);
                                }
                                if need_w {
                                    let block = &mut dw_s[o * k_len..][..4 * k_len];
                                    let (d0, rest) = block.split_at_mut(k_len);
                                    let (d1, rest) = rest.split_at_mut(k_len);
                                    let (d2, d3) = rest.split_at_mut(k_len);
                                    update4_f64([d0, d1, d2, d3], gq, &rows[p * k_len..][..k_len]);
                                }
                            }
                        }
                        for o in 4 * blocks..cout {
                            let w_row = &wgt[o * k_len..][..k_len];
                            for p in pt..pe {
                                let go = gy_s[o * p_total + p] as f64;
                                if go == 0.0 {
                                    continue;
                                }
                                if need_x {
                                    axpy1_f64(&mut dp_rows[(p - pt) * k_len..][..k_len], go, w_row);
                                }
                                if need_w {
                                    axpy1_f64(
                                        &mut dw_s[o * k_len..][..k_len],
                                        go,
                                        &rows[p * k_len..][..k_len],
                                    );
                                }
                            }
                        }
                        if need_x {
                            for p in pt..pe {
                                let dp_row = &dp_rows[(p - pt) * k_len..][..k_len];
                                for_each_patch_entry(
                                    &[1, g.cin, g.h, g.w],
                                    g.kh,
                                    g.kw,
                                    g.stride,
                                    g.padding,
                                    p,
                                    |k, flat| dx_acc[flat] += dp_row[k],
                                );
                            }
                        }
                    }
                    if need_x {
                        for (dst, &v) in dx_s.iter_mut().zip(&dx_acc) {
                            *dst = v as f32;
                        }
                    }
                    dw_s
                })
                .collect();
            drop(xv);
            drop(wv);

            if need_x {
                px.accum_grad(&dx);
            }
            if need_w {
                let mut dw = vec![0.0f64; cout * k_len];
                for dw_s in &dws {
                    for (d, &v) in dw.iter_mut().zip(dw_s) {
                        *d += v;
                    }
                }
                let cast: Vec<f32> = dw.iter().map(|&v| v as f32).collect();
                pw.accum_grad(&cast);
            }
        }),
    ))
}

/// Euclidean norm of every zero-padded sliding patch over all fan-in
/// entries: [N,Cin,H,W] -> [N,1,H',W']. Zero patches get zero gradient.
pub fn patch_norms(
    input: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = geometry(input.shape(), kh, kw, stride, padding)?;
    let n = input.shape()[0];
    let (k_len, p_total) = (g.patch_len(), g.positions());

    let mut out = vec![0.0f32; n * p_total];
    {
        let xv = input.data_ref();
        let x: &[f32] = &xv;
        out.par_chunks_mut(p_total).enumerate().for_each(|(i, pn)| {
            let sample = &x[i * g.cin * g.h * g.w..][..g.cin * g.h * g.w];
            let mut rows = vec![0.0f64; p_total * k_len];
            im2col(sample, &g, &mut rows);
            for p in 0..p_total {
                let row = &rows[p * k_len..][..k_len];
                pn[p] = dot_f64(row, row).sqrt() as f32;
            }
        });
    }

    let px = input.clone();
    let norms = out.clone();
    let input_shape = input.shape().to_vec();
    Ok(Tensor::from_op(
        vec![n, 1, g.ho, g.wo],
        out,
        vec![input.clone()],
        Box::new(move |gy| {
            if !px.is_active() {
                return;
            }
            let sample_len = g.cin * g.h * g.w;
            let xv = px.data_ref();
            let x: &[f32] = &xv;
            let norms_ref: &[f32] = &norms;
            let shape = input_shape.clone();
            let mut dx = vec![0.0f32; n * sample_len];
            dx.par_chunks_mut(sample_len)
                .enumerate()
                .for_each(|(i, dx_s)| {
                    let sample = &x[i * sample_len..][..sample_len];
                    let mut acc = vec![0.0f64; sample_len];
                    for p in 0..p_total {
                        let coef =
                            gy[i * p_total + p] as f64 / (norms_ref[i * p_total + p] as f64).max(1e-30);
                        if coef == 0.0 {
                            continue;
                        }
                        for_each_patch_entry(
                            &[1, shape[1], shape[2], shape[3]],
                            g.kh,
                            g.kw,
                            g.stride,
                            g.padding,
                            p,
                            |_, flat| acc[flat] += coef * sample[flat] as f64,
                        );
                    }
                    for (dst, &v) in dx_s.iter_mut().zip(&acc) {
                        *dst = v as f32;
                    }
                });
            drop(xv);
            px.accum_grad(&dx);
        }),
    ))
}

/// Max over groups of `units` consecutive channels: [N, U*C, H, W] ->
/// [N, C, H, W]. Gradient routes to the first maximal unit on ties.
pub fn maxout_channels(input: &Tensor, units: usize) -> Result<Tensor> {
    if units == 0 {
        return Err(HxError::InvalidArgument("maxout with zero units".into()));
    }
    let s = input.shape();
    if s.len() != 4 {
        return Err(HxError::Geometry(format!(
            "expected [N,C,H,W] input, got {s:?}"
        )));
    }
    let (n, c_in, h, w) = (s[0], s[1], s[2], s[3]);
    if c_in % units != 0 {
        return Err(HxError::Divisibility {
            channels: c_in,
            n: units,
            context: "maxout channel grouping".into(),
        });
    }
    let c_out = c_in / units;
    let plane = h * w;

    let mut out = vec![0.0f32; n * c_out * plane];
    let mut arg = vec![0u32; n * c_out * plane];
    {
        let xv = input.data_ref();
        for i in 0..n {
            for gch in 0..c_out {
                for u in 0..units {
                    let src = (i * c_in + gch * units + u) * plane;
                    let dst = (i * c_out + gch) * plane;
                    for q in 0..plane {
                        let v = xv[src + q];
                        if u == 0 || v > out[dst + q] {
                            out[dst + q] = v;
                            arg[dst + q] = u as u32;
                        }
                    }
                }
            }
        }
    }

    let px = input.clone();
    Ok(Tensor::from_op(
        vec![n, c_out, h, w],
        out,
        vec![input.clone()],
        Box::new(move |gy| {
            if !px.is_active() {
                return;
            }
            let mut dx = vec![0.0f32; n * c_in * plane];
            for i in 0..n {
                for gch in 0..c_out {
                    let dst = (i * c_out + gch) * plane;
                    for q in 0..plane {
                        let u = arg[dst + q] as usize;
                        dx[(i * c_in + gch * units + u) * plane + q] += gy[dst + q];
                    }
                }
            }
            px.accum_grad(&dx);
        }),
    ))
}
