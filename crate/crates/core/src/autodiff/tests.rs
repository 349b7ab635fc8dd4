use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, weighted_sum, DEFAULT_STEP};
use super::*;
use crate::error::Error;

fn random_array(rng: &mut ChaCha8Rng, dims: &[usize]) -> DenseArray {
    let n = dims.iter().product();
    DenseArray::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn linear_identity_and_scalar_affine() {
    let mut s = ParamStore::new();
    s.insert("id.w", DenseArray::identity(2)).unwrap();
    s.insert("id.b", DenseArray::zeros(&[2])).unwrap();
    s.insert("sc.w", DenseArray::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
    s.insert("sc.b", DenseArray::vector(vec![1.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(DenseArray::vector(vec![1.0, 0.0]).unwrap());
    let y = g.linear(&s, x, "id").unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    let x = g.constant(DenseArray::vector(vec![2.0]).unwrap());
    let y = g.linear(&s, x, "sc").unwrap();
    assert_eq!(g.value(y).data(), &[7.0]);
}

#[test]
fn linear_dimension_mismatch_names_dims() {
    let mut s = ParamStore::new();
    s.insert("l.w", DenseArray::zeros(&[3, 2])).unwrap();
    s.insert("l.b", DenseArray::zeros(&[2])).unwrap();
    let mut g = Graph::new();
    let x = g.constant(DenseArray::zeros(&[4, 5]));
    let err = g.linear(&s, x, "l").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains('3') && msg.contains('5'), "{msg}");
}

#[test]
fn linear_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut s = ParamStore::new();
        s.insert("l.w", random_array(&mut rng, &[4, 3])).unwrap();
        s.insert("l.b", random_array(&mut rng, &[3])).unwrap();
        s.insert("x", random_array(&mut rng, &[5, 4])).unwrap();
        let gc = check(&s, &["l.w", "l.b", "x"], DEFAULT_STEP, 64, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.linear(s, x, "l")?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(gc.rel_error() < 1e-6, "{}", gc.rel_error());
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(DenseArray::vector(vec![0.0, 0.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(DenseArray::vector(vec![1000.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(y).data()[1].abs() < 1e-12);
}

#[test]
fn softmax_gradient_each_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..20 {
        let axis = trial % 3;
        let mut s = ParamStore::new();
        s.insert("x", random_array(&mut rng, &[2, 3, 4])).unwrap();
        let w = random_weights(&mut rng, 24);
        let gc = check(&s, &["x"], DEFAULT_STEP, 64, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.softmax(x, axis)?;
            weighted_sum(g, y, &w)
        })
        .unwrap();
        assert!(gc.rel_error() < 1e-6, "axis {axis}: {}", gc.rel_error());
    }
}

#[test]
fn sigmoid_values_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(DenseArray::vector(vec![0.0, 50.0, -50.0]).unwrap());
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).data()[0], 0.5);
    assert!((g.value(y).data()[1] - 1.0).abs() < 1e-12);
    assert!(g.value(y).data()[2] > 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let mut s = ParamStore::new();
        s.insert("x", random_array(&mut rng, &[6])).unwrap();
        let w = random_weights(&mut rng, 6);
        let gc = check(&s, &["x"], DEFAULT_STEP, 64, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.sigmoid(x);
            weighted_sum(g, y, &w)
        })
        .unwrap();
        assert!(gc.rel_error() < 1e-6);
        // d sigmoid = s (1 - s)
        let x = s.get("x").unwrap().data();
        for (i, a) in gc.analytic.iter().enumerate() {
            let sv = sigmoid(x[i]);
            assert!((a - w[i] * sv * (1.0 - sv)).abs() < 1e-14);
        }
    }
}

#[test]
fn smooth_l1_closed_forms() {
    let eval = |p: f64, t: f64| {
        let mut g = Graph::new();
        let x = g.constant(DenseArray::scalar(p));
        let l = g.smooth_l1(x, &DenseArray::scalar(t), 1.0).unwrap();
        g.value(l).item()
    };
    assert_eq!(eval(0.3, 0.3), 0.0);
    assert_eq!(eval(0.5, 0.0), 0.125);
    assert_eq!(eval(-2.0, 0.0), 1.5);
    let mut g = Graph::new();
    let x = g.constant(DenseArray::vector(vec![1.0]).unwrap());
    assert!(g.smooth_l1(x, &DenseArray::vector(vec![1.0, 2.0]).unwrap(), 1.0).is_err());
    assert!(g.smooth_l1(x, &DenseArray::vector(vec![1.0]).unwrap(), 0.0).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut s = ParamStore::new();
    s.insert("n.gain", DenseArray::filled(&[2], 1.0)).unwrap();
    s.insert("n.bias", DenseArray::zeros(&[2])).unwrap();
    let mut g = Graph::new();
    let x = g.constant(DenseArray::matrix(2, 2, vec![3.0, 3.0, 1.0, -1.0]).unwrap());
    let y = g.layer_norm(&s, x, 1, "n").unwrap();
    let v = g.value(y).data();
    assert_eq!(&v[..2], &[0.0, 0.0]);
    let scale = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!((v[2] - scale).abs() < 1e-15 && (v[3] + scale).abs() < 1e-15);
    assert!((v[2] - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for trial in 0..20 {
        let axis = trial % 2;
        let len = [3, 5][axis];
        let mut s = ParamStore::new();
        s.insert("x", random_array(&mut rng, &[3, 5])).unwrap();
        s.insert("n.gain", random_array(&mut rng, &[len])).unwrap();
        s.insert("n.bias", random_array(&mut rng, &[len])).unwrap();
        let w = random_weights(&mut rng, 15);
        let gc = check(&s, &["x", "n.gain", "n.bias"], DEFAULT_STEP, 64, |g, s| {
            let x = g.param(s, "x")?;
            let y = g.layer_norm(s, x, axis, "n")?;
            weighted_sum(g, y, &w)
        })
        .unwrap();
        assert!(gc.rel_error() < 1e-6, "{}", gc.rel_error());
    }
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let mut s = ParamStore::new();
        s.insert("a", random_array(&mut rng, &[4, 3])).unwrap();
        s.insert("b", random_array(&mut rng, &[4, 2])).unwrap();
        s.insert("m", random_array(&mut rng, &[4, 3, 2])).unwrap();
        let w = random_weights(&mut rng, 5 * 5);
        let gc = check(&s, &["a", "b", "m"], DEFAULT_STEP, 64, |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let m = g.param(s, "m")?;
            let o = g.outer(a, b)?; // [4,3,2]
            let mo = g.mul(o, m)?;
            let mv = g.matvec(mo, b)?; // [4,3]
            let sa = g.sum_axis(m, 2)?; // [4,3]
            let t = g.add(mv, sa)?;
            let c = g.concat(&[t, b])?; // [4,5]
            let rows: std::sync::Arc<[usize]> = vec![3, 1, 1, 0].into();
            let gr = g.gather_rows(c, rows)?;
            let sc = g.scatter_rows(gr, vec![4, 0, 2, 1].into(), 5)?; // [5,5]
            let r = g.relu(sc);
            let sh = g.scale(r, 0.5);
            let rs = g.reshape(sh, vec![25])?;
            weighted_sum(g, rs, &w)
        })
        .unwrap();
        assert!(gc.rel_error() < 1e-6, "{}", gc.rel_error());
    }
}

#[test]
fn bce_examples_and_gradient() {
    let mut g = Graph::new();
    let z = g.constant(DenseArray::vector(vec![20.0, -20.0]).unwrap());
    let l = g.bce_with_logits(z, &[1.0, 0.0]).unwrap();
    assert!(g.value(l).item() < 1e-6);
    let z = g.constant(DenseArray::zeros(&[3]));
    let l = g.bce_with_logits(z, &[1.0, 0.0, 1.0]).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let mut s = ParamStore::new();
        s.insert("z", random_array(&mut rng, &[7])).unwrap();
        let labels: Vec<f64> = (0..7).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let gc = check(&s, &["z"], DEFAULT_STEP, 64, |g, s| {
            let z = g.param(s, "z")?;
            g.bce_with_logits(z, &labels)
        })
        .unwrap();
        assert!(gc.rel_error() < 1e-6);
    }
}

#[test]
fn backward_contracts() {
    let mut s = ParamStore::new();
    s.insert("p", DenseArray::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    s.insert("unused", DenseArray::zeros(&[2, 2])).unwrap();
    let build = |s: &ParamStore| {
        let mut g = Graph::new();
        let p = g.param(s, "p").unwrap();
        let l = g.sum(p);
        (g, l)
    };
    let (g, l) = build(&s);
    g.backward(l, &mut s).unwrap();
    assert_eq!(s.grad("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    assert_eq!(s.grad("unused").unwrap().data(), &[0.0; 4]);
    // second call without zeroing doubles exactly
    let (g, l) = build(&s);
    g.backward(l, &mut s).unwrap();
    assert_eq!(s.grad("p").unwrap().data(), &[2.0, 2.0, 2.0]);

    let mut g = Graph::new();
    let p = g.param(&s, "p").unwrap();
    assert!(matches!(g.backward(p, &mut s), Err(Error::NonScalarLoss(_))));
}

#[test]
fn composed_linear_sigmoid_smooth_l1() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let mut s = ParamStore::new();
        s.insert("l.w", random_array(&mut rng, &[3, 2])).unwrap();
        s.insert("l.b", random_array(&mut rng, &[2])).unwrap();
        let x = random_array(&mut rng, &[4, 3]);
        let target = DenseArray::new(vec![4, 2], (0..8).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let gc = check(&s, &["l.w", "l.b"], DEFAULT_STEP, 64, |g, s| {
            let x = g.constant(x.clone());
            let y = g.linear(s, x, "l")?;
            let e = g.sigmoid(y);
            g.smooth_l1(e, &target, 1.0)
        })
        .unwrap();
        assert!(gc.rel_error() < 1e-6);
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut s = ParamStore::new();
    s.insert("l.w", random_array(&mut rng, &[3, 3])).unwrap();
    s.insert("l.b", random_array(&mut rng, &[3])).unwrap();
    s.insert("n.gain", random_array(&mut rng, &[3])).unwrap();
    s.insert("n.bias", random_array(&mut rng, &[3])).unwrap();
    let x = random_array(&mut rng, &[5, 3]);
    let run = |s: &ParamStore| {
        let mut s = s.clone();
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let y = g.linear(&s, xi, "l").unwrap();
        let y = g.layer_norm(&s, y, 1, "n").unwrap();
        let y = g.softmax(y, 0).unwrap();
        let l = g.sum_axis(y, 1).unwrap();
        let l = g.sigmoid(l);
        let l = g.sum(l);
        g.backward(l, &mut s).unwrap();
        let bits: Vec<u64> = s.names().flat_map(|n| s.grad(n).unwrap().data().to_vec()).map(f64::to_bits).collect();
        (g.value(l).item().to_bits(), bits)
    };
    assert_eq!(run(&s), run(&s));
}

proptest! {
    #[test]
    fn softmax_sums_to_one(values in proptest::collection::vec(-700.0f64..700.0, 1..30)) {
        let mut g = Graph::new();
        let n = values.len();
        let x = g.constant(DenseArray::vector(values).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(g.value(y).len(), n);
    }

    #[test]
    fn smooth_l1_nonnegative_zero_iff_equal(p in proptest::collection::vec(-5.0f64..5.0, 1..10), shift in -3.0f64..3.0) {
        let target = DenseArray::vector(p.iter().map(|v| v + shift).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(DenseArray::vector(p).unwrap());
        let l = g.smooth_l1(x, &target, 1.0).unwrap();
        let v = g.value(l).item();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, shift == 0.0 || g.value(x).data() == target.data());
    }
}
