use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use super::gradcheck::check;
use super::*;
use crate::error::Error;

fn t(dims: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(dims, data.to_vec()).unwrap()
}

fn random(dims: &[usize], rng: &mut Xoshiro256StarStar, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

const H: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn assert_grad_ok<F>(inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> crate::error::Result<Var>,
{
    let report = check(inputs, H, FLOOR, build).unwrap();
    assert!(report.rel_error < 1e-4, "gradient mismatch: {report:?}");
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[2, 1], &[3., 4.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3., 4.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.]);

    let bad = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.matmul(a, bad), Err(Error::Shape(_))));
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(3);
    let (m, k, n) = (7, 5, 6);
    let a = random(&[m, k], &mut rng, -1.0, 1.0);
    let b = random(&[k, n], &mut rng, -1.0, 1.0);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for i in 0..m {
        for j in 0..n {
            let naive: f64 = (0..k).map(|l| a.at(&[i, l]) * b.at(&[l, j])).sum();
            assert!((g.value(c).at(&[i, j]) - naive).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transposed() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(11);
    let a = random(&[3, 4], &mut rng, -1.0, 1.0);
    let b = random(&[4, 2], &mut rng, -1.0, 1.0);
    let mut g = Graph::new();
    let (va, vb) = (g.param(a.clone()), g.param(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    let loss = g.sum_all(c);
    let grads = g.backward(loss).unwrap();
    let da = grads.wrt(va);
    for i in 0..3 {
        for l in 0..4 {
            let expected = b.at(&[l, 0]) + b.at(&[l, 1]);
            assert!((da.at(&[i, l]) - expected).abs() < 1e-12);
        }
    }
    assert_grad_ok(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum_all(c))
    });
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let zero = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(zero).unwrap();
    assert_eq!(g.value(s).data(), &[0.5]);

    let x = g.constant(Tensor::scalar(1.0));
    let one = g.constant(Tensor::scalar(1.0));
    let p = g.gauss_pdf(x, zero, one).unwrap();
    assert!((g.value(p).item().unwrap() - 0.241_970_724_519_143_35).abs() < 1e-15);

    let p = g.param(Tensor::scalar(-3.0));
    let r = g.relu(p).unwrap();
    assert_eq!(g.value(r).data(), &[0.0]);
    let grads = g.backward(r).unwrap();
    assert_eq!(grads.wrt(p).data(), &[0.0]);
}

#[test]
fn elementwise_domain_errors() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1., 2.]));
    let z = g.constant(t(&[2], &[1., 0.]));
    assert!(matches!(g.div(a, z), Err(Error::Domain(_))));
    assert!(matches!(g.log(z), Err(Error::Domain(_))));
    let neg = g.constant(Tensor::scalar(-1.0));
    assert!(matches!(g.gauss_pdf(a, a, neg), Err(Error::Domain(_))));
}

#[test]
fn reductions() {
    let mut g = Graph::new();
    let a = g.constant(t(&[3], &[1., 2., 3.]));
    let s = g.sum_axis(a, 0).unwrap();
    assert_eq!(g.value(s).data(), &[6.0]);

    let z = g.constant(Tensor::zeros(&[2]));
    let l = g.logsumexp(z, 0).unwrap();
    assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

    let ones = g.constant(Tensor::ones(&[2, 3]));
    let m = g.mean_axis(ones, 1).unwrap();
    assert_eq!(g.value(m).dims(), &[2]);
    assert_eq!(g.value(m).data(), &[1.0, 1.0]);

    assert!(matches!(g.sum_axis(ones, 2), Err(Error::Shape(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[4]));
    let s = g.softmax(a, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.25; 4]);

    let b = g.constant(t(&[2], &[1f64.ln(), 3f64.ln()]));
    let s = g.softmax(b, 0).unwrap();
    let v = g.value(s).data();
    assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

    // Huge logits stay finite thanks to max subtraction.
    let c = g.constant(t(&[3], &[1e300, 1e300, -1e300]));
    let s = g.softmax(c, 0).unwrap();
    assert!(g.value(s).all_finite());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    for axis in 0..3 {
        let x = random(&[3, 4, 5], &mut rng, -20.0, 20.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, axis).unwrap();
        let mut g2 = Graph::new();
        let sv = g2.constant(g.value(s).clone());
        let sums = g2.sum_axis(sv, axis).unwrap();
        for &total in g2.value(sums).data() {
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert!(g.value(s).data().iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn normalize_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[3, 4], 2.5));
    let n = g.normalize(c, NormMode::Layer, None, true).unwrap();
    assert!(g.value(n).data().iter().all(|&v| v == 0.0));
    let n = g.normalize(c, NormMode::Batch, None, true).unwrap();
    assert!(g.value(n).data().iter().all(|&v| v == 0.0));

    let row = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let n = g.normalize(row, NormMode::Layer, None, true).unwrap();
    let s = 1.0 / (1.0 + NORM_EPS).sqrt();
    assert_eq!(g.value(n).data(), &[-s, s]);

    let single = g.constant(Tensor::ones(&[1, 3]));
    assert!(g.normalize(single, NormMode::Batch, None, true).is_err());
}

#[test]
fn batch_norm_eval_is_independent_of_batch_composition() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(9);
    let mut stats = RunningStats::new(3);
    for _ in 0..300 {
        let mut g = Graph::new();
        let x = g.constant(random(&[8, 3], &mut rng, 0.0, 4.0));
        g.normalize(x, NormMode::Batch, Some((&mut stats, NORM_MOMENTUM)), true).unwrap();
    }
    assert!(stats.mean.iter().all(|&m| (m - 2.0).abs() < 0.3));
    let row = [1.0, 2.0, 3.0];
    let eval_first_row = |other: &[f64]| {
        let mut data = row.to_vec();
        data.extend_from_slice(other);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3], data).unwrap());
        let mut s = stats.clone();
        let n = g.normalize(x, NormMode::Batch, Some((&mut s, NORM_MOMENTUM)), false).unwrap();
        assert_eq!(s, stats, "eval must not update running stats");
        g.value(n).data()[..3].to_vec()
    };
    assert_eq!(eval_first_row(&[0.0, 0.0, 0.0]), eval_first_row(&[9.0, -4.0, 7.0]));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let p = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
    let s = g.sum_all(p);
    assert_eq!(g.backward(s).unwrap().wrt(p).data(), &[1.0; 6]);

    let mut g = Graph::new();
    let p = g.param(t(&[2], &[1.0, -2.0]));
    let sq = g.square(p).unwrap();
    let s = g.sum_all(sq);
    assert_eq!(g.backward(s).unwrap().wrt(p).data(), &[2.0, -4.0]);

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));

    // A parameter the loss never touches gets zeros.
    let unused = g.param(Tensor::ones(&[4]));
    assert_eq!(g.backward(s).unwrap().wrt(unused).data(), &[0.0; 4]);
}

#[test]
fn finite_differences_for_each_op() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(1234);
    for _ in 0..5 {
        let a = random(&[3, 4], &mut rng, -2.0, 2.0);
        let b = random(&[3, 4], &mut rng, 0.5, 2.0);
        let row = random(&[4], &mut rng, -1.0, 1.0);
        let pos = random(&[3, 4], &mut rng, 0.1, 3.0);
        let w = random(&[3, 4], &mut rng, -1.0, 1.0);

        // Weighted sums keep the loss sensitive to every element.
        let weighted = |g: &mut Graph, x: Var, w: &Tensor| -> crate::error::Result<Var> {
            let wv = g.constant(w.clone());
            let p = g.mul(x, wv)?;
            Ok(g.sum_all(p))
        };
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            assert_grad_ok(&[a.clone(), b.clone()], |g, v| {
                let y = g.binary(op, v[0], v[1])?;
                weighted(g, y, &w)
            });
            // Broadcast a row across the batch.
            assert_grad_ok(&[b.clone(), row.clone()], |g, v| {
                let y = g.binary(op, v[1], v[0])?;
                weighted(g, y, &w)
            });
        }
        for op in [
            UnaryOp::Neg,
            UnaryOp::Exp,
            UnaryOp::Sigmoid,
            UnaryOp::LogSigmoid,
            UnaryOp::Relu,
            UnaryOp::Square,
        ] {
            assert_grad_ok(std::slice::from_ref(&a), |g, v| {
                let y = g.unary(op, v[0])?;
                weighted(g, y, &w)
            });
        }
        assert_grad_ok(std::slice::from_ref(&pos), |g, v| {
            let y = g.log(v[0])?;
            weighted(g, y, &w)
        });
        let var = random(&[1], &mut rng, 0.3, 1.5);
        assert_grad_ok(&[a.clone(), b.clone(), var.clone()], |g, v| {
            let y = g.gauss_pdf(v[0], v[1], v[2])?;
            weighted(g, y, &w)
        });
        assert_grad_ok(&[a.clone(), b.clone(), var.clone()], |g, v| {
            let y = g.gauss_log_pdf(v[0], v[1], v[2])?;
            weighted(g, y, &w)
        });
        for axis in 0..2 {
            for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::LogSumExp] {
                let wr = random(&[if axis == 0 { 4 } else { 3 }], &mut rng, -1.0, 1.0);
                assert_grad_ok(std::slice::from_ref(&a), |g, v| {
                    let r = g.reduce(op, v[0], axis)?;
                    weighted(g, r, &wr)
                });
            }
            assert_grad_ok(std::slice::from_ref(&a), |g, v| {
                let s = g.softmax(v[0], axis)?;
                weighted(g, s, &w)
            });
            assert_grad_ok(std::slice::from_ref(&a), |g, v| {
                let s = g.log_softmax(v[0], axis)?;
                weighted(g, s, &w)
            });
            assert_grad_ok(std::slice::from_ref(&pos), |g, v| {
                let s = g.normalize_sum(v[0], axis)?;
                weighted(g, s, &w)
            });
        }
        for mode in [NormMode::Batch, NormMode::Layer] {
            assert_grad_ok(std::slice::from_ref(&a), |g, v| {
                let n = g.normalize(v[0], mode, None, true)?;
                weighted(g, n, &w)
            });
        }
        assert_grad_ok(&[a.clone(), b.clone()], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 2, 7)?;
            let r = g.reshape(s, &[15])?;
            let sq = g.square(r)?;
            let sc = g.scale(sq, 0.7);
            let o = g.offset(sc, 1.0);
            let l = g.log(o)?;
            Ok(g.sum_all(l))
        });
        assert_grad_ok(std::slice::from_ref(&a), |g, v| {
            let c = g.clamp_abs_min(v[0], 1e-9);
            weighted(g, c, &w)
        });
    }
}

#[test]
fn fixed_stat_batch_norm_gradient() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(77);
    let mut stats = RunningStats::new(4);
    stats.mean = vec![0.1, -0.2, 0.3, 0.0];
    stats.var = vec![0.5, 2.0, 1.0, 0.25];
    let a = random(&[3, 4], &mut rng, -1.0, 1.0);
    let w = random(&[3, 4], &mut rng, -1.0, 1.0);
    assert_grad_ok(&[a], |g, v| {
        let mut s = stats.clone();
        let n = g.normalize(v[0], NormMode::Batch, Some((&mut s, NORM_MOMENTUM)), false)?;
        let wv = g.constant(w.clone());
        let p = g.mul(n, wv)?;
        Ok(g.sum_all(p))
    });
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = Xoshiro256StarStar::seed_from_u64(42);
        let mut g = Graph::new();
        let a = g.param(random(&[16, 8], &mut rng, -1.0, 1.0));
        let b = g.param(random(&[8, 4], &mut rng, -1.0, 1.0));
        let c = g.matmul(a, b).unwrap();
        let n = g.normalize(c, NormMode::Batch, None, true).unwrap();
        let s = g.softmax(n, 1).unwrap();
        let l = g.log(s).unwrap();
        let loss = g.sum_all(l);
        let grads = g.backward(loss).unwrap();
        (grads.wrt(a), grads.wrt(b))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&b1), bits(&b2));
}
