//! Tape kernels against naive loop implementations.

use proptest::prelude::*;
use tally_core::{Tape, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// 3x3 cross-correlation with one pixel of zero padding.
fn naive_conv(x: &[f64], k: &[f64], n: usize, cin: usize, cout: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for di in -1..=1isize {
                            for dj in -1..=1isize {
                                let (y, xx) = (i + di, j + dj);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * cin + c) * h + y as usize) * w + xx as usize];
                                let kv = k[((o * cin + c) * 3 + (di + 1) as usize) * 3 + (dj + 1) as usize];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * cout + o) * h + i as usize) * w + j as usize] = acc;
                }
            }
        }
    }
    out
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #[test]
    fn matmul_matches_loops((m, k, n, a, b) in (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(k * n))))
    {
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::new(vec![m, k], a.clone()).unwrap());
        let bv = tape.constant(Tensor::new(vec![k, n], b.clone()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        prop_assert!(close(tape.value(c).data(), &naive_matmul(&a, &b, m, k, n), 1e-12));
    }

    #[test]
    fn conv_matches_loops((n, cin, cout, h, w, x, k) in (1usize..3, 1usize..4, 1usize..4, 1usize..6, 1usize..6)
        .prop_flat_map(|(n, cin, cout, h, w)| {
            (Just(n), Just(cin), Just(cout), Just(h), Just(w), values(n * cin * h * w), values(cout * cin * 9))
        }))
    {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![n, cin, h, w], x.clone()).unwrap());
        let kv = tape.constant(Tensor::new(vec![cout, cin, 3, 3], k.clone()).unwrap());
        let y = tape.conv2d(xv, kv).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[n, cout, h, w]);
        prop_assert!(close(tape.value(y).data(), &naive_conv(&x, &k, n, cin, cout, h, w), 1e-12));
    }

    /// The kernel gradient of `sum(conv(x, k))` is, per tap, the sum of the
    /// input pixels that tap touches.
    #[test]
    fn conv_kernel_gradient_of_sum((h, w, x) in (1usize..6, 1usize..6)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), values(h * w))))
    {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, 1, h, w], x.clone()).unwrap());
        let kv = tape.param(Tensor::zeros(&[1, 1, 3, 3]));
        let y = tape.conv2d(xv, kv).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let g = tape.grad(kv).unwrap();
        for di in 0..3usize {
            for dj in 0..3usize {
                let mut expect = 0.0;
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let (y, xx) = (i + di as isize - 1, j + dj as isize - 1);
                        if y >= 0 && xx >= 0 && y < h as isize && xx < w as isize {
                            expect += x[y as usize * w + xx as usize];
                        }
                    }
                }
                prop_assert!((g.data()[di * 3 + dj] - expect).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn softmax_cross_entropy_matches_closed_form() {
    let logits = vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
    let labels = [1, 2];
    let mut tape = Tape::new();
    let l = tape.param(Tensor::new(vec![2, 3], logits.clone()).unwrap());
    let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
    let expect: f64 = logits
        .chunks(3)
        .zip(labels)
        .map(|(row, y)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[y])
        .sum::<f64>()
        / 2.0;
    assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-12);
    tape.backward(loss).unwrap();
    let g = tape.grad(l).unwrap();
    for (r, (row, y)) in logits.chunks(3).zip(labels).enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..3 {
            let p = row[c].exp() / z;
            let target = if c == y { 1.0 } else { 0.0 };
            assert!((g.data()[r * 3 + c] - (p - target) / 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn focal_loss_with_zero_gamma_is_cross_entropy() {
    let t = Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 1.5, 1.5, -0.2, 0.0]).unwrap();
    let mut tape = Tape::new();
    let l = tape.constant(t);
    let ce = tape.softmax_cross_entropy(l, &[2, 0]).unwrap();
    let fl = tape.focal_loss(l, &[2, 0], 0.0).unwrap();
    assert!((tape.value(ce).item().unwrap() - tape.value(fl).item().unwrap()).abs() < 1e-14);
}
