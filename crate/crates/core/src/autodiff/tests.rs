use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_check, numeric_gradient, DEFAULT_STEP};
use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values with magnitude in `[lo, 1)` and random sign, keeping clear of kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn matmul_identity_returns_rhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random_tensor(&mut rng, vec![3, 3]);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(3));
    let bv = tape.constant(b.clone());
    let out = tape.matmul(i, bv).unwrap();
    assert_eq!(tape.value(out), &b);
}

#[test]
fn matmul_small_product() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[11.0]);
    assert_eq!(tape.value(out).shape(), &[1, 1]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match &err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, &vec![2, 3]);
            assert_eq!(rhs, &vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = [random_tensor(&mut rng, vec![3, 4]), random_tensor(&mut rng, vec![4, 2])];
    let f = |t: &mut Tape, v: &[Var]| {
        let m = t.matmul(v[0], v[1])?;
        Ok(t.sum(m))
    };
    let err = finite_diff_check(&f, &params, DEFAULT_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn relu_sign_cases() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    // subgradient at exactly zero is 0
    assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn relu_all_negative_has_zero_output_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-3.0, -0.5, -1e-9]));
    let y = tape.relu(x);
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(x).data().iter().all(|v| *v == 0.0));
}

#[test]
fn relu_gradient_check_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = [away_from_zero(&mut rng, vec![16], 1e-3)];
    let f = |t: &mut Tape, v: &[Var]| {
        let r = t.relu(v[0]);
        let sq = t.square(r);
        Ok(t.sum(sq))
    };
    let err = finite_diff_check(&f, &params, DEFAULT_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn logistic_symmetry_and_midpoint() {
    assert_eq!(logistic(0.0), 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let x: f64 = rng.random_range(-30.0..30.0);
        assert!((logistic(x) - (1.0 - logistic(-x))).abs() < 1e-15);
    }
}

#[test]
fn logistic_is_overflow_safe() {
    // exp(-50) to full precision; logistic(-50) = e/(1+e), logistic(50) = 1/(1+e)
    let e = (-50.0f64).exp();
    let lo = logistic(-50.0);
    let hi = logistic(50.0);
    assert!(lo.is_finite() && lo > 0.0 && lo < 1.0);
    assert!(hi.is_finite() && hi > 0.0 && hi <= 1.0);
    assert!(((lo - e) / e).abs() < 1e-15, "logistic(-50) = {lo}");
    assert!((hi - 1.0).abs() <= e);
    assert!(logistic(-800.0) >= 0.0 && logistic(800.0) <= 1.0);
}

#[test]
fn elementwise_suite_basics() {
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::scalar(1.0));
    let l = tape.log(one).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let c = tape.constant(Tensor::vector(vec![3.0]));
    let cat = tape.concat(&[a, c]).unwrap();
    assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0]);

    let zero = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.log(zero), Err(Error::Domain { .. })));
    let neg = tape.constant(Tensor::scalar(-1.0));
    assert!(matches!(tape.sqrt(neg), Err(Error::Domain { .. })));

    let m = tape.constant(Tensor::zeros(vec![2, 3]));
    let m2 = tape.constant(Tensor::zeros(vec![3, 3]));
    assert!(matches!(tape.concat(&[m, m2]), Err(Error::Dimension { .. })));
}

#[test]
fn sum_backward_gives_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::matrix(2, 2, vec![3.0, -1.0, 0.5, 7.0]).unwrap());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0; 4]);
}

#[test]
fn elementwise_suite_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = away_from_zero(&mut rng, vec![2, 3], 0.1);
    let b = away_from_zero(&mut rng, vec![2, 3], 0.1);
    let bias = random_tensor(&mut rng, vec![3]);
    let f = |t: &mut Tape, v: &[Var]| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let p = t.mul(d, v[1])?;
        let q = t.scalar_mul(p, 1.7);
        let r = t.add_bias(q, v[2])?;
        let sq = t.square(r);
        let shifted = t.add_scalar(sq, 0.5);
        let root = t.sqrt(shifted)?;
        let lg = t.log(root)?;
        let lo = t.logistic(lg);
        let cat = t.concat(&[lo, v[0]])?;
        Ok(t.mean(cat))
    };
    let err = finite_diff_check(&f, &[a, b, bias], DEFAULT_STEP).unwrap();
    assert!(err < 1e-5, "max rel err {err}");
}

#[test]
fn scalar_broadcast_and_gather_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, vec![4, 3]);
    let s = Tensor::scalar(0.7);
    let f = |t: &mut Tape, v: &[Var]| {
        let g = t.gather_rows(v[0], &[2, 0, 2, 3])?;
        let m = t.mul(g, v[1])?;
        let a = t.add(v[1], m)?;
        let sq = t.square(a);
        Ok(t.sum(sq))
    };
    let err = finite_diff_check(&f, &[x, s], DEFAULT_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn euclidean_distance_cases() {
    let mut tape = Tape::new();
    let u = tape.param(Tensor::vector(vec![0.0, 0.0]));
    let v = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let d = tape.euclidean_distance(u, v).unwrap();
    assert_eq!(tape.value(d).item(), 5.0);

    let mut tape = Tape::new();
    let u = tape.param(Tensor::vector(vec![1.5, -2.0]));
    let v = tape.param(Tensor::vector(vec![1.5, -2.0]));
    let d = tape.euclidean_distance(u, v).unwrap();
    assert_eq!(tape.value(d).item(), 0.0);
    let g = tape.backward(d).unwrap();
    assert_eq!(g.wrt(u).data(), &[0.0, 0.0]);
    assert_eq!(g.wrt(v).data(), &[0.0, 0.0]);

    let mut tape = Tape::new();
    let u = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let w = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.euclidean_distance(u, w), Err(Error::Dimension { .. })));
}

#[test]
fn euclidean_distance_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = [random_tensor(&mut rng, vec![5]), random_tensor(&mut rng, vec![5])];
    let f = |t: &mut Tape, v: &[Var]| t.euclidean_distance(v[0], v[1]);
    let err = finite_diff_check(&f, &params, DEFAULT_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn pairwise_distances_agree_with_vector_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_tensor(&mut rng, vec![3, 4]);
    let b = random_tensor(&mut rng, vec![2, 4]);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let pd = tape.pairwise_distances(av, bv).unwrap();
    let pd = tape.value(pd).clone();
    for i in 0..3 {
        for j in 0..2 {
            let u = tape.constant(Tensor::vector(a.row(i).to_vec()));
            let v = tape.constant(Tensor::vector(b.row(j).to_vec()));
            let d = tape.euclidean_distance(u, v).unwrap();
            assert_eq!(tape.value(d).item(), pd.data()[i * 2 + j]);
        }
    }

    let f = |t: &mut Tape, v: &[Var]| {
        let d = t.pairwise_distances(v[0], v[1])?;
        let sq = t.square(d);
        let s = t.sum(sq);
        let s2 = t.sum(d);
        t.add(s, s2)
    };
    let err = finite_diff_check(&f, &[a, b], DEFAULT_STEP).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn pairwise_distances_zero_distance_has_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
    let b = tape.param(Tensor::matrix(2, 2, vec![1.0, 1.0, 4.0, 5.0]).unwrap());
    let d = tape.pairwise_distances(a, b).unwrap();
    assert_eq!(tape.value(d).data(), &[0.0, 5.0]);
    let s = tape.sum(d);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(a).all_finite());
    assert_eq!(g.wrt(b).data()[..2], [0.0, 0.0]);
}

#[test]
fn backward_square_at_three() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);
}

#[test]
fn independent_parameter_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.square(x);
    let g = tape.backward(y).unwrap();
    assert!(g.get(p).is_none());
    assert_eq!(g.wrt(p).data(), &[0.0, 0.0]);
}

#[test]
fn backward_misuse_is_a_contract_error() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.square(x);
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));

    tape.reset();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.square(x);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn quadratic_form_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 6;
    let m = random_tensor(&mut rng, vec![n, n]);
    // symmetric positive form A = M^T M + I
    let mut a = Tensor::identity(n);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..n).map(|k| m.data()[k * n + i] * m.data()[k * n + j]).sum();
            a.data_mut()[i * n + j] += s;
        }
    }
    let x = random_tensor(&mut rng, vec![1, n]);
    let f = move |t: &mut Tape, v: &[Var]| {
        let av = t.constant(a.clone());
        let xa = t.matmul(v[0], av)?;
        let q = t.mul(xa, v[0])?;
        Ok(t.sum(q))
    };
    let err = finite_diff_check(&f, &[x], DEFAULT_STEP).unwrap();
    assert!(err < 1e-9, "max rel err {err}");
}

#[test]
fn constant_function_has_vanishing_gradients() {
    let params = [Tensor::vector(vec![0.3, -0.2])];
    let f = |t: &mut Tape, _: &[Var]| Ok(t.constant(Tensor::scalar(4.2)));
    let err = finite_diff_check(&f, &params, DEFAULT_STEP).unwrap();
    assert_eq!(err, 0.0);
    let numeric = numeric_gradient(&f, &params, DEFAULT_STEP).unwrap();
    assert!(numeric[0].data().iter().all(|g| *g == 0.0));
}

#[test]
fn chain_rule_linear_then_quadratic() {
    // g(f(x)) with f(x) = w.x + c, g(y) = y^2  =>  d/dx = 2 (w.x + c) w
    let w = [0.5, -1.25, 2.0];
    let c = 0.75;
    let x = [1.0, 0.4, -0.3];
    let mut tape = Tape::new();
    let xv = tape.param(Tensor::matrix(1, 3, x.to_vec()).unwrap());
    let wv = tape.constant(Tensor::matrix(3, 1, w.to_vec()).unwrap());
    let lin = tape.matmul(xv, wv).unwrap();
    let y = tape.add_scalar(lin, c);
    let g = tape.square(y);
    let loss = tape.sum(g);
    let grads = tape.backward(loss).unwrap();
    let fx: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + c;
    for (gi, wi) in grads.wrt(xv).data().iter().zip(&w) {
        assert!((gi - 2.0 * fx * wi).abs() < 1e-14);
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_tensor(&mut rng, vec![5, 4]);
        let b = random_tensor(&mut rng, vec![4, 3]);
        let mut tape = Tape::new();
        let av = tape.param(a);
        let bv = tape.param(b);
        let m = tape.matmul(av, bv).unwrap();
        let r = tape.relu(m);
        let l = tape.logistic(r);
        let s = tape.sum(l);
        let value = tape.value(s).item();
        let g = tape.backward(s).unwrap();
        (value.to_bits(), g.wrt(av), g.wrt(bv))
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_composition_gradients_match(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_zero(&mut rng, vec![3, 4], 0.05);
        let w = random_tensor(&mut rng, vec![4, 2]);
        let f = |t: &mut Tape, v: &[Var]| {
            let h = t.matmul(v[0], v[1])?;
            let l = t.logistic(h);
            let c = t.clamp(l, 1e-12, 1.0 - 1e-12);
            let lg = t.log(c)?;
            let sq = t.square(v[0]);
            let s1 = t.mean(lg);
            let s2 = t.mean(sq);
            t.sub(s2, s1)
        };
        let err = finite_diff_check(&f, &[x, w], DEFAULT_STEP).unwrap();
        prop_assert!(err < 1e-5, "max rel err {}", err);
    }
}
