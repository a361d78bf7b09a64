use proptest::prelude::*;

use super::rng::{seeded, uniform};
use super::*;
use crate::error::{Error, Result};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn linear_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let w = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
    let y = t.linear(x, w, None).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0]);

    let x = t.constant(Tensor::from_vec(vec![1.0, 1.0]));
    let w = t.constant(Tensor::from_rows(&[[2.0], [3.0]]));
    let b = t.constant(Tensor::from_vec(vec![1.0]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[6.0]);

    let x = t.constant(Tensor::zeros(&[4, 3, 8]));
    let w = t.constant(Tensor::zeros(&[8, 16]));
    let y = t.linear(x, w, None).unwrap();
    assert_eq!(t.shape(y), &[4, 3, 16]);

    let bad = t.constant(Tensor::zeros(&[7, 16]));
    assert!(matches!(t.linear(x, bad, None), Err(Error::Dimension(_))));
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::full(&[3], 1.0));
    let b = t.constant(Tensor::zeros(&[3]));
    let x = t.constant(Tensor::from_vec(vec![5.0, 5.0, 5.0]));
    let y = t.layer_norm(x, g, b, LN_EPS).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

    let g2 = t.constant(Tensor::full(&[2], 1.0));
    let b2 = t.constant(Tensor::zeros(&[2]));
    let x = t.constant(Tensor::from_vec(vec![1.0, -1.0]));
    let y = t.layer_norm(x, g2, b2, 1e-300).unwrap();
    assert!(close(t.value(y).data()[0], 1.0, 1e-12));
    assert!(close(t.value(y).data()[1], -1.0, 1e-12));

    let x = t.constant(uniform(&mut seeded(3), &[5, 64], -3.0, 7.0));
    let g = t.constant(Tensor::full(&[64], 1.0));
    let b = t.constant(Tensor::zeros(&[64]));
    let y = t.layer_norm(x, g, b, LN_EPS).unwrap();
    for r in 0..5 {
        let row = t.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 64.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(close(mean, 0.0, 1e-12));
        assert!(close(var, 1.0, 1e-4));
    }

    let empty = t.constant(Tensor::zeros(&[2, 0]));
    let g0 = t.constant(Tensor::zeros(&[0]));
    assert!(matches!(t.layer_norm(empty, g0, g0, LN_EPS), Err(Error::Dimension(_))));
}

#[test]
fn activation_examples() {
    assert!(close(softplus(0.0), std::f64::consts::LN_2, 1e-15));
    assert!(close(softplus(800.0), 800.0, 1e-12));
    assert!(softplus(-800.0) >= 0.0);
    assert_eq!(silu(0.0), 0.0);
    let mut row = [2.5, 2.5, 2.5];
    softmax_in_place(&mut row);
    assert!(row.iter().all(|&p| close(p, 1.0 / 3.0, 1e-15)));
    let mut huge = [1000.0, 0.0];
    softmax_in_place(&mut huge);
    assert!(huge[0].is_finite() && close(huge[0], 1.0, 1e-12));
}

#[test]
fn backward_examples() {
    // loss = sum(x^2), x = [1, 2]
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = t.square(x);
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    assert!(matches!(t.backward(loss), Err(Error::Contract(_))));
    t.reset();
    assert!(t.is_empty());

    // loss = sum(x W): grad(W)[i, j] = x[i]
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[3.0, -1.0]]));
    let w = t.leaf(Tensor::zeros(&[2, 3]));
    let y = t.linear(x, w, None).unwrap();
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(w).unwrap().data(), &[3.0, 3.0, 3.0, -1.0, -1.0, -1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn no_grad_tape_refuses_backward() {
    let mut t = Tape::no_grad();
    let x = t.leaf(Tensor::scalar(1.0));
    assert!(t.backward(x).is_err());
}

/// Builds a store of random parameters in [-1, 1] and checks `f` at 1e-6.
fn check_op(shapes: &[(&str, &[usize])], seed: u64, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) {
    let mut rng = seeded(seed);
    let mut ps = ParamStore::new();
    for (name, shape) in shapes {
        ps.insert(*name, uniform(&mut rng, shape, -1.0, 1.0));
    }
    let opts = GradCheckOptions { tol: 1e-6, full_limit: 10_000, ..Default::default() };
    let report = grad_check(f, &ps, &opts).unwrap();
    assert!(report.passed(), "{:#?}", report.params);
}

/// Contracts an arbitrary-shaped output to a scalar with fixed, uneven weights,
/// so every output coordinate influences the loss differently.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).numel();
    let w = Tensor::new(t.shape(y), (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect())?;
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[test]
fn gradcheck_elementwise_ops() {
    check_op(&[("a", &[3, 4]), ("b", &[3, 4])], 1, |t, ps| {
        let a = t.param(ps, "a")?;
        let b = t.param(ps, "b")?;
        let s = t.add(a, b)?;
        let d = t.sub(s, b)?;
        let m = t.mul(d, b)?;
        let sc = t.scale(m, -0.7);
        let e = t.exp(sc);
        let sp = t.softplus(e);
        let si = t.silu(sp);
        let sq = t.square(si);
        weighted_sum(t, sq)
    });
}

#[test]
fn gradcheck_linear_and_bias() {
    check_op(&[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5]), ("c", &[5])], 2, |t, ps| {
        let x = t.param(ps, "x")?;
        let w = t.param(ps, "w")?;
        let b = t.param(ps, "b")?;
        let c = t.param(ps, "c")?;
        let y = t.linear(x, w, Some(b))?;
        let y = t.add_bias(y, c)?;
        weighted_sum(t, y)
    });
}

#[test]
fn gradcheck_softmax_and_layer_norm() {
    check_op(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6])], 3, |t, ps| {
        let x = t.param(ps, "x")?;
        let g = t.param(ps, "g")?;
        let b = t.param(ps, "b")?;
        let n = t.layer_norm(x, g, b, LN_EPS)?;
        let s = t.softmax(n);
        weighted_sum(t, s)
    });
}

#[test]
fn gradcheck_indexing_ops() {
    check_op(&[("x", &[5, 3]), ("y", &[2, 3]), ("z", &[5, 2])], 4, |t, ps| {
        let x = t.param(ps, "x")?;
        let y = t.param(ps, "y")?;
        let z = t.param(ps, "z")?;
        let g = t.gather_rows(x, &[4, 0, 0, 2])?;
        let c = t.concat_rows(&[g, y])?;
        let s = t.slice_rows(c, 1, 5)?;
        let cc = t.concat_cols(x, z)?;
        let r = t.reshape(cc, &[25])?;
        let a = weighted_sum(t, s)?;
        let b = weighted_sum(t, r)?;
        t.add(a, b)
    });
}

#[test]
fn gradcheck_pooling_and_reductions() {
    check_op(&[("x", &[3, 4, 5])], 5, |t, ps| {
        let x = t.param(ps, "x")?;
        let mx = t.max_pool(x)?;
        let mn = t.mean_pool(x)?;
        let both = t.concat_cols(mx, mn)?;
        let a = weighted_sum(t, both)?;
        let m = t.mean(x);
        t.add(a, m)
    });
}

#[test]
fn param_binding_is_shared() {
    let mut ps = ParamStore::new();
    ps.insert("p", Tensor::from_vec(vec![2.0]));
    let mut t = Tape::new();
    let a = t.param(&ps, "p").unwrap();
    let b = t.param(&ps, "p").unwrap();
    assert_eq!(a, b);
    let m = t.mul(a, b).unwrap();
    let loss = t.sum(m);
    t.backward(loss).unwrap();
    assert_eq!(t.param_grads().get("p").unwrap().data(), &[4.0]);
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut row = xs.clone();
        softmax_in_place(&mut row);
        prop_assert!(row.iter().all(|&p| p >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn layer_norm_ignores_additive_shift(xs in prop::collection::vec(-5.0f64..5.0, 2..16), shift in -100.0f64..100.0) {
        let d = xs.len();
        let mut t = Tape::no_grad();
        let g = t.constant(Tensor::full(&[d], 1.3));
        let b = t.constant(Tensor::full(&[d], -0.2));
        let x = t.constant(Tensor::from_vec(xs.clone()));
        let xs2 = t.constant(Tensor::from_vec(xs.iter().map(|v| v + shift).collect()));
        let y1 = t.layer_norm(x, g, b, LN_EPS).unwrap();
        let y2 = t.layer_norm(xs2, g, b, LN_EPS).unwrap();
        prop_assert!(t.value(y1).max_abs_diff(t.value(y2)) <= 1e-10);
    }
}
