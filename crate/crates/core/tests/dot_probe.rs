//! Ignored micro-probe of dot kernel codegen.

use std::time::Instant;

#[inline(never)]
fn dot_quads(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (qa, qb) in ca.by_ref().zip(cb.by_ref()) {
        acc[0] += qa[0] as f64 * qb[0] as f64;
        acc[1] += qa[1] as f64 * qb[1] as f64;
        acc[2] += qa[2] as f64 * qb[2] as f64;
        acc[3] += qa[3] as f64 * qb[3] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

#[inline(never)]
fn dot_eight(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (qa, qb) in ca.by_ref().zip(cb.by_ref()) {
        for j in 0..8 {
            acc[j] += qa[j] as f64 * qb[j] as f64;
        }
    }
    acc.iter().sum()
}

#[inline(never)]
fn dot_f32_pair(a: &[f32], b: &[f32]) -> f64 {
    // f32 products, pairwise-accumulated into f64 every 4 elements
    let mut total = 0.0f64;
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (qa, qb) in ca.by_ref().zip(cb.by_ref()) {
        let p0 = qa[0] * qb[0];
        let p1 = qa[1] * qb[1];
        let p2 = qa[2] * qb[2];
        let p3 = qa[3] * qb[3];
        total += ((p0 as f64 + p1 as f64) + (p2 as f64 + p3 as f64)) as f64;
    }
    total
}

#[test]
#[ignore]
fn probe() {
    let n = 432usize;
    let a: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
    let b: Vec<f32> = (0..n).map(|i| (i as f32 * 0.11).cos()).collect();
    let reps = 2_000_000u64;

    for (name, f) in [
        ("quads", dot_quads as fn(&[f32], &[f32]) -> f64),
        ("eight", dot_eight),
        ("f32pair", dot_f32_pair),
    ] {
        let t0 = Instant::now();
        let mut sink = 0.0f64;
        for _ in 0..reps {
            sink += f(std::hint::black_box(&a), std::hint::black_box(&b));
        }
        let dt = t0.elapsed().as_secs_f64();
        let gmacs = (reps as f64 * n as f64) / dt / 1e9;
        println!("{name}: {gmacs:.2} GMAC/s (sink {sink:.1})");
    }
}
