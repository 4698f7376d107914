//! Inner-loop kernels over pre-widened f64 operands.
//!
//! Callers convert f32 storage to f64 once per operand; the hot loops are
//! pure f64 FMA. Every kernel has a scalar form and an AVX2+FMA form
//! selected once at runtime. Summation order is fixed per output element
//! within a build, so results are independent of thread scheduling.

#[cfg(target_arch = "x86_64")]
mod detect {
    use std::sync::OnceLock;

    static HAS_AVX2_FMA: OnceLock<bool> = OnceLock::new();

    #[inline]
    pub fn avx2_fma() -> bool {
        *HAS_AVX2_FMA
            .get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }
}

pub fn widen(src: &[f32], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|&v| v as f64));
}

/// dot(a, b)
#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if detect::avx2_fma() {
        // SAFETY: feature presence checked above
        return unsafe { avx::dot_f64(a, b) };
    }
    dot_f64_scalar(a, b)
}

fn dot_f64_scalar(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (qa, qb) in ca.by_ref().zip(cb.by_ref()) {
        acc[0] += qa[0] * qb[0];
        acc[1] += qa[1] * qb[1];
        acc[2] += qa[2] * qb[2];
        acc[3] += qa[3] * qb[3];
    }
    let mut tail = 0.0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Four dot products sharing one right-hand vector.
#[inline]
pub fn dot4_f64(w: [&[f64]; 4], x: &[f64]) -> [f64; 4] {
    #[cfg(target_arch = "x86_64")]
    if detect::avx2_fma() {
        // SAFETY: feature presence checked above
        return unsafe { avx::dot4_f64(w, x) };
    }
    [
        dot_f64_scalar(w[0], x),
        dot_f64_scalar(w[1], x),
        dot_f64_scalar(w[2], x),
        dot_f64_scalar(w[3], x),
    ]
}

/// dst[k] += g0*w0[k] + g1*w1[k] + g2*w2[k] + g3*w3[k]
#[inline]
pub fn axpy4_f64(dst: &mut [f64], g: [f64; 4], w: [&[f64]; 4]) {
    #[cfg(target_arch = "x86_64")]
    if detect::avx2_fma() {
        // SAFETY: feature presence checked above
        unsafe { avx::axpy4_f64(dst, g, w) };
        return;
    }
    let n = dst.len();
    let (w0, w1, w2, w3) = (&w[0][..n], &w[1][..n], &w[2][..n], &w[3][..n]);
    for k in 0..n {
        dst[k] += g[0] * w0[k] + g[1] * w1[k] + g[2] * w2[k] + g[3] * w3[k];
    }
}

/// d_j[k] += g_j * row[k] for four destination rows.
#[inline]
pub fn update4_f64(d: [&mut [f64]; 4], g: [f64; 4], row: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if detect::avx2_fma() {
        // SAFETY: feature presence checked above
        unsafe { avx::update4_f64(d, g, row) };
        return;
    }
    let [d0, d1, d2, d3] = d;
    for (k, &v) in row.iter().enumerate() {
        d0[k] += g[0] * v;
        d1[k] += g[1] * v;
        d2[k] += g[2] * v;
        d3[k] += g[3] * v;
    }
}

/// dst[k] += g * w[k]
#[inline]
pub fn axpy1_f64(dst: &mut [f64], g: f64, w: &[f64]) {
    for (d, &v) in dst.iter_mut().zip(w) {
        *d += g * v;
    }
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    #[inline]
    unsafe fn hsum(v: __m256d) -> f64 {
        // fixed reduction order: (lane0 + lane2) + (lane1 + lane3)
        let lo = _mm256_castpd256_pd128(v);
        let hi = _mm256_extractf128_pd(v, 1);
        let pair = _mm_add_pd(lo, hi);
        _mm_cvtsd_f64(pair) + _mm_cvtsd_f64(_mm_unpackhi_pd(pair, pair))
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let quads = n / 4;
        let mut acc = _mm256_setzero_pd();
        let mut acc2 = _mm256_setzero_pd();
        let pairs = quads / 2;
        for i in 0..pairs {
            let j = 8 * i;
            acc = _mm256_fmadd_pd(
                _mm256_loadu_pd(a.as_ptr().add(j)),
                _mm256_loadu_pd(b.as_ptr().add(j)),
                acc,
            );
            acc2 = _mm256_fmadd_pd(
                _mm256_loadu_pd(a.as_ptr().add(j + 4)),
                _mm256_loadu_pd(b.as_ptr().add(j + 4)),
                acc2,
            );
        }
        if quads % 2 == 1 {
            let j = 8 * pairs;
            acc = _mm256_fmadd_pd(
                _mm256_loadu_pd(a.as_ptr().add(j)),
                _mm256_loadu_pd(b.as_ptr().add(j)),
                acc,
            );
        }
        let mut s = hsum(_mm256_add_pd(acc, acc2));
        for k in 4 * quads..n {
            s += a.get_unchecked(k) * b.get_unchecked(k);
        }
        s
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn dot4_f64(w: [&[f64]; 4], x: &[f64]) -> [f64; 4] {
        let n = x.len();
        let quads = n / 4;
        let mut acc0 = _mm256_setzero_pd();
        let mut acc1 = _mm256_setzero_pd();
        let mut acc2 = _mm256_setzero_pd();
        let mut acc3 = _mm256_setzero_pd();
        for i in 0..quads {
            let j = 4 * i;
            let xv = _mm256_loadu_pd(x.as_ptr().add(j));
            acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(w[0].as_ptr().add(j)), xv, acc0);
            acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(w[1].as_ptr().add(j)), xv, acc1);
            acc2 = _mm256_fmadd_pd(_mm256_loadu_pd(w[2].as_ptr().add(j)), xv, acc2);
            acc3 = _mm256_fmadd_pd(_mm256_loadu_pd(w[3].as_ptr().add(j)), xv, acc3);
        }
        let mut out = [hsum(acc0), hsum(acc1), hsum(acc2), hsum(acc3)];
        for k in 4 * quads..n {
            let v = *x.get_unchecked(k);
            for (j, o) in out.iter_mut().enumerate() {
                *o += w[j].get_unchecked(k) * v;
            }
        }
        out
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn axpy4_f64(dst: &mut [f64], g: [f64; 4], w: [&[f64]; 4]) {
        let n = dst.len();
        let quads = n / 4;
        let g0 = _mm256_set1_pd(g[0]);
        let g1 = _mm256_set1_pd(g[1]);
        let g2 = _mm256_set1_pd(g[2]);
        let g3 = _mm256_set1_pd(g[3]);
        for i in 0..quads {
            let j = 4 * i;
            let mut d = _mm256_loadu_pd(dst.as_ptr().add(j));
            d = _mm256_fmadd_pd(_mm256_loadu_pd(w[0].as_ptr().add(j)), g0, d);
            d = _mm256_fmadd_pd(_mm256_loadu_pd(w[1].as_ptr().add(j)), g1, d);
            d = _mm256_fmadd_pd(_mm256_loadu_pd(w[2].as_ptr().add(j)), g2, d);
            d = _mm256_fmadd_pd(_mm256_loadu_pd(w[3].as_ptr().add(j)), g3, d);
            _mm256_storeu_pd(dst.as_mut_ptr().add(j), d);
        }
        for k in 4 * quads..n {
            *dst.get_unchecked_mut(k) += g[0] * w[0].get_unchecked(k)
                + g[1] * w[1].get_unchecked(k)
                + g[2] * w[2].get_unchecked(k)
                + g[3] * w[3].get_unchecked(k);
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn update4_f64(d: [&mut [f64]; 4], g: [f64; 4], row: &[f64]) {
        let n = row.len();
        let quads = n / 4;
        let [d0, d1, d2, d3] = d;
        let g0 = _mm256_set1_pd(g[0]);
        let g1 = _mm256_set1_pd(g[1]);
        let g2 = _mm256_set1_pd(g[2]);
        let g3 = _mm256_set1_pd(g[3]);
        for i in 0..quads {
            let j = 4 * i;
            let v = _mm256_loadu_pd(row.as_ptr().add(j));
            _mm256_storeu_pd(
                d0.as_mut_ptr().add(j),
                _mm256_fmadd_pd(v, g0, _mm256_loadu_pd(d0.as_ptr().add(j))),
            );
            _mm256_storeu_pd(
                d1.as_mut_ptr().add(j),
                _mm256_fmadd_pd(v, g1, _mm256_loadu_pd(d1.as_ptr().add(j))),
            );
            _mm256_storeu_pd(
                d2.as_mut_ptr().add(j),
                _mm256_fmadd_pd(v, g2, _mm256_loadu_pd(d2.as_ptr().add(j))),
            );
            _mm256_storeu_pd(
                d3.as_mut_ptr().add(j),
                _mm256_fmadd_pd(v, g3, _mm256_loadu_pd(d3.as_ptr().add(j))),
            );
        }
        for k in 4 * quads..n {
            let v = *row.get_unchecked(k);
            d0[k] += g[0] * v;
            d1[k] += g[1] * v;
            d2[k] += g[2] * v;
            d3[k] += g[3] * v;
        }
    }
}
