//! Derived-oracle checks for the tensor core: the im2col convolution against
//! a nested-loop reference, patch norms against direct window norms, and
//! analytic gradients against f64 central finite differences.

mod common;

use common::*;
use hxbcos::tensor::{conv2d, maxout_channels, patch_norms};
use hxbcos::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn conv2d_matches_nested_loop_oracle_on_all_small_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for h in 1..=8usize {
        for w in 1..=8usize {
            for k in 1..=3usize {
                for stride in [1usize, 2] {
                    for pad in [0usize, 1] {
                        if h + 2 * pad < k || w + 2 * pad < k {
                            continue;
                        }
                        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
                        let xv = rand_vec(&mut rng, cin * h * w, -1.0, 1.0);
                        let wv = rand_vec(&mut rng, cout * cin * k * k, -1.0, 1.0);
                        let x = Tensor::from_vec(&[1, cin, h, w], xv.clone()).unwrap();
                        let wt = Tensor::from_vec(&[cout, cin, k, k], wv.clone()).unwrap();
                        let y = conv2d(&x, &wt, stride, pad).unwrap();
                        let (expect, es) = conv2d_oracle(
                            &to_f64(&xv),
                            [1, cin, h, w],
                            &to_f64(&wv),
                            [cout, cin, k, k],
                            stride,
                            pad,
                        );
                        assert_eq!(y.shape(), &es[..]);
                        for (got, want) in y.to_vec().iter().zip(&expect) {
                            assert!(
                                (*got as f64 - want).abs() < 1e-6,
                                "geometry h={h} w={w} k={k} s={stride} p={pad}"
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn conv2d_random_1x4x4_with_padding_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xv = rand_vec(&mut rng, 16, -1.0, 1.0);
    let wv = rand_vec(&mut rng, 9, -1.0, 1.0);
    let x = Tensor::from_vec(&[1, 1, 4, 4], xv.clone()).unwrap();
    let w = Tensor::from_vec(&[1, 1, 3, 3], wv.clone()).unwrap();
    let y = conv2d(&x, &w, 1, 1).unwrap();
    let (expect, _) = conv2d_oracle(&to_f64(&xv), [1, 1, 4, 4], &to_f64(&wv), [1, 1, 3, 3], 1, 1);
    for (got, want) in y.to_vec().iter().zip(&expect) {
        assert!((*got as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn patch_norms_match_per_patch_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w, k, stride, pad) in [
        (4, 4, 3, 1, 1),
        (5, 7, 3, 2, 1),
        (6, 6, 2, 2, 0),
        (8, 3, 3, 1, 0),
    ] {
        let cin = rng.gen_range(1..=3);
        let xv = rand_vec(&mut rng, 2 * cin * h * w, -2.0, 2.0);
        let x = Tensor::from_vec(&[2, cin, h, w], xv.clone()).unwrap();
        let pn = patch_norms(&x, k, k, stride, pad).unwrap();
        let expect = patch_norms_oracle(&to_f64(&xv), [2, cin, h, w], k, k, stride, pad);
        for (got, want) in pn.to_vec().iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (h, w, k) = (rng.gen_range(3..6), rng.gen_range(3..6), rng.gen_range(1..=3));
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let (cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let xv = rand_vec(&mut rng, cin * h * w, -1.0, 1.0);
        let wv = rand_vec(&mut rng, cout * cin * k * k, -1.0, 1.0);
        // weight the outputs so the scalar loss mixes all positions
        let (out_ref, os) = conv2d_oracle(
            &to_f64(&xv),
            [1, cin, h, w],
            &to_f64(&wv),
            [cout, cin, k, k],
            stride,
            pad,
        );
        let mix: Vec<f64> = (0..out_ref.len()).map(|i| ((i % 5) as f64) - 2.0).collect();

        let x = Tensor::param_from_vec(&[1, cin, h, w], xv.clone()).unwrap();
        let wt = Tensor::param_from_vec(&[cout, cin, k, k], wv.clone()).unwrap();
        let y = conv2d(&x, &wt, stride, pad).unwrap();
        let mix_t = Tensor::from_vec(
            &[1, cout, os[2], os[3]],
            mix.iter().map(|&v| v as f32).collect(),
        )
        .unwrap();
        y.mul(&mix_t).unwrap().sum_all().unwrap().backward().unwrap();

        let loss_of = |xd: &[f64], wd: &[f64]| -> f64 {
            let (o, _) = conv2d_oracle(xd, [1, cin, h, w], wd, [cout, cin, k, k], stride, pad);
            o.iter().zip(&mix).map(|(a, b)| a * b).sum()
        };
        let xd = to_f64(&xv);
        let wd = to_f64(&wv);
        let gx_ref = fd_grad(|p| loss_of(p, &wd), &xd, 1e-3);
        let gw_ref = fd_grad(|p| loss_of(&xd, p), &wd, 1e-3);
        assert_grad_close(&x.grad().unwrap(), &gx_ref, 1e-3, "conv2d input grad");
        assert_grad_close(&wt.grad().unwrap(), &gw_ref, 1e-3, "conv2d weight grad");
    }
}

#[test]
fn patch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(3..6), rng.gen_range(3..6));
        let cin = rng.gen_range(1..=2);
        // keep values away from zero patches so the norm is smooth
        let xv = rand_vec(&mut rng, cin * h * w, 0.3, 1.0);
        let x = Tensor::param_from_vec(&[1, cin, h, w], xv.clone()).unwrap();
        let pn = patch_norms(&x, 3, 3, 1, 1).unwrap();
        let n_out = pn.numel();
        let mix: Vec<f64> = (0..n_out).map(|i| ((i % 3) as f64) - 1.0).collect();
        let mix_t = Tensor::from_vec(pn.shape(), mix.iter().map(|&v| v as f32).collect()).unwrap();
        pn.mul(&mix_t).unwrap().sum_all().unwrap().backward().unwrap();

        let loss_of = |xd: &[f64]| -> f64 {
            patch_norms_oracle(xd, [1, cin, h, w], 3, 3, 1, 1)
                .iter()
                .zip(&mix)
                .map(|(a, b)| a * b)
                .sum()
        };
        let gx_ref = fd_grad(loss_of, &to_f64(&xv), 1e-3);
        assert_grad_close(&x.grad().unwrap(), &gx_ref, 1e-3, "patch_norms grad");
    }
}

/// Random elementwise expressions: six chained ops, checked against finite
/// differences of an identical f64 evaluation, 100 seeds.
#[test]
fn random_expression_gradients_match_finite_differences() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..6);
        // keep inputs away from |x| and sqrt kinks
        let xv = rand_vec(&mut rng, n, 0.2, 1.2);
        let ops: Vec<u32> = (0..6).map(|_| rng.gen_range(0..8)).collect();

        let x = Tensor::param_from_vec(&[n], xv.clone()).unwrap();
        let mut t = x.clone();
        for &op in &ops {
            t = match op {
                0 => t.add(&t).unwrap(),
                1 => t.mul(&t).unwrap().add_scalar(0.3),
                2 => t.sigmoid(),
                3 => t.abs(),
                4 => t.add_scalar(1.5).log_elem(),
                5 => t.mul_scalar(0.5).exp_elem(),
                6 => t.add_scalar(1.0).sqrt_elem(),
                _ => t.pow_const(2.0).add_scalar(0.1),
            };
        }
        let loss = t.sum_all().unwrap();
        loss.backward().unwrap();

        let eval = |xd: &[f64]| -> f64 {
            let mut v: Vec<f64> = xd.to_vec();
            for &op in &ops {
                v = v
                    .iter()
                    .map(|&a| match op {
                        0 => a + a,
                        1 => a * a + 0.3,
                        2 => 1.0 / (1.0 + (-a).exp()),
                        3 => a.abs(),
                        4 => (a + 1.5).ln(),
                        5 => (a * 0.5).exp(),
                        6 => (a + 1.0).sqrt(),
                        _ => a * a + 0.1,
                    })
                    .collect();
            }
            v.iter().sum()
        };
        let g_ref = fd_grad(eval, &to_f64(&xv), 1e-3);
        assert_grad_close(&x.grad().unwrap(), &g_ref, 1e-3, &format!("expr seed {seed}"));
    }
}

/// Every differentiable elementwise/reduce op individually, at points away
/// from subgradient kinks, against f64 finite differences.
#[test]
fn per_op_gradients_match_finite_differences() {
    type Case = (
        &'static str,
        fn(&Tensor, &Tensor) -> Tensor,
        fn(f64, f64) -> f64,
    );
    let cases: Vec<Case> = vec![
        ("add", |a, b| a.add(b).unwrap(), |x, y| x + y),
        ("sub", |a, b| a.sub(b).unwrap(), |x, y| x - y),
        ("mul", |a, b| a.mul(b).unwrap(), |x, y| x * y),
        ("div", |a, b| a.div(b).unwrap(), |x, y| x / y),
        ("max2", |a, b| a.max2(b).unwrap(), |x, y| x.max(y)),
        ("pow2.5", |a, _| a.pow_const(2.5), |x, _| x.powf(2.5)),
        ("abs", |a, _| a.abs(), |x, _| x.abs()),
        ("sqrt", |a, _| a.sqrt_elem(), |x, _| x.sqrt()),
        (
            "sigmoid",
            |a, _| a.sigmoid(),
            |x, _| 1.0 / (1.0 + (-x).exp()),
        ),
        ("log", |a, _| a.log_elem(), |x, _| x.ln()),
        ("exp", |a, _| a.exp_elem(), |x, _| x.exp()),
    ];
    for (name, op_t, op_f) in &cases {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
            let n = 4;
            let av = rand_vec(&mut rng, n, 0.3, 1.3);
            // keep b clearly separated from a so max2 has no near-ties
            let bv: Vec<f32> = av
                .iter()
                .map(|&v| v + if rng.gen_bool(0.5) { 0.4 } else { -0.25 })
                .collect();
            let a = Tensor::param_from_vec(&[n], av.clone()).unwrap();
            let b = Tensor::param_from_vec(&[n], bv.clone()).unwrap();
            let y = op_t(&a, &b);
            y.sum_all().unwrap().backward().unwrap();

            let ad = to_f64(&av);
            let bd = to_f64(&bv);
            let fa = |p: &[f64]| -> f64 { p.iter().zip(&bd).map(|(&x, &y)| op_f(x, y)).sum() };
            let fb = |p: &[f64]| -> f64 { ad.iter().zip(p).map(|(&x, &y)| op_f(x, y)).sum() };
            assert_grad_close(
                &a.grad().unwrap(),
                &fd_grad(fa, &ad, 1e-3),
                1e-3,
                &format!("{name} lhs seed {seed}"),
            );
            if a.grad().is_some() && b.grad().is_some() {
                assert_grad_close(
                    &b.grad().unwrap(),
                    &fd_grad(fb, &bd, 1e-3),
                    1e-3,
                    &format!("{name} rhs seed {seed}"),
                );
            }
        }
    }

    // reductions
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let xv = rand_vec(&mut rng, 6, 0.2, 1.0);
        let x = Tensor::param_from_vec(&[2, 3], xv.clone()).unwrap();
        let y = x.l2_norm_axes(&[1], false).unwrap();
        y.sum_all().unwrap().backward().unwrap();
        let f = |p: &[f64]| -> f64 {
            let r0: f64 = p[..3].iter().map(|v| v * v).sum::<f64>().sqrt();
            let r1: f64 = p[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
            r0 + r1
        };
        assert_grad_close(
            &x.grad().unwrap(),
            &fd_grad(f, &to_f64(&xv), 1e-3),
            1e-3,
            &format!("l2_norm seed {seed}"),
        );

        let x2 = Tensor::param_from_vec(&[2, 3], xv.clone()).unwrap();
        let m = x2.mean_axes(&[0], false).unwrap();
        m.sum_all().unwrap().backward().unwrap();
        assert_eq!(x2.grad().unwrap(), vec![0.5; 6]);
    }
}

#[test]
fn maxout_gradients_match_finite_differences() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let xv = rand_vec(&mut rng, 8, -1.0, 1.0);
        let x = Tensor::param_from_vec(&[1, 4, 2, 1], xv.clone()).unwrap();
        let y = maxout_channels(&x, 2).unwrap();
        y.sum_all().unwrap().backward().unwrap();
        let f = |p: &[f64]| -> f64 {
            // groups of 2 consecutive channels, plane of 2 positions
            let mut s = 0.0;
            for g in 0..2 {
                for q in 0..2 {
                    s += p[(g * 2) * 2 + q].max(p[(g * 2 + 1) * 2 + q]);
                }
            }
            s
        };
        assert_grad_close(
            &x.grad().unwrap(),
            &fd_grad(f, &to_f64(&xv), 1e-3),
            1e-3,
            &format!("maxout seed {seed}"),
        );
    }
}
