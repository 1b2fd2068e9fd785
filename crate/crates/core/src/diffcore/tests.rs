use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn store_with(name: &str, shape: &[usize], values: Vec<f64>) -> (ParamStore, ParamId) {
    let mut s = ParamStore::new();
    let id = s.add(name, Tensor::new(shape.to_vec(), values).unwrap(), ParamGroup::Other).unwrap();
    (s, id)
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn relu_negative_branch_is_zero() {
    let (mut s, id) = store_with("x", &[1], vec![-1.5]);
    let mut t = Tape::new();
    let x = t.param(&s, id).unwrap();
    let y = t.relu(x).unwrap();
    assert_eq!(t.values(y), &[0.0]);
    let r = t.sum(y).unwrap();
    t.backward(r, &mut s).unwrap();
    assert_eq!(s.get(id).grad().unwrap(), &[0.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[3])).unwrap();
    let y = t.softmax(x).unwrap();
    for v in t.values(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn sum_gives_all_ones_gradient() {
    let (mut s, id) = store_with("p", &[2, 3], vec![0.5; 6]);
    let mut t = Tape::new();
    let p = t.param(&s, id).unwrap();
    let r = t.sum(p).unwrap();
    t.backward(r, &mut s).unwrap();
    assert_eq!(s.get(id).grad().unwrap(), &[1.0; 6]);
}

#[test]
fn sum_of_squares_gradient() {
    let (mut s, id) = store_with("p", &[2], vec![1.0, 2.0]);
    let mut t = Tape::new();
    let p = t.param(&s, id).unwrap();
    let sq = t.mul(p, p).unwrap();
    let r = t.sum(sq).unwrap();
    t.backward(r, &mut s).unwrap();
    assert_eq!(s.get(id).grad().unwrap(), &[2.0, 4.0]);
}

#[test]
fn frozen_param_receives_no_gradient() {
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::from_vec(vec![1.0, 2.0]), ParamGroup::Other).unwrap();
    let b = s.add("b", Tensor::from_vec(vec![3.0, 4.0]), ParamGroup::Classifier).unwrap();
    s.set_trainable(b, false);
    let mut t = Tape::new();
    let (va, vb) = (t.param(&s, a).unwrap(), t.param(&s, b).unwrap());
    let m = t.mul(va, vb).unwrap();
    let r = t.sum(m).unwrap();
    t.backward(r, &mut s).unwrap();
    assert_eq!(s.get(a).grad().unwrap(), &[3.0, 4.0]);
    assert!(s.get(b).grad().is_none());
}

#[test]
fn backward_rejects_non_scalar_and_repeat() {
    let (mut s, id) = store_with("p", &[2], vec![1.0, 2.0]);
    let mut t = Tape::new();
    let p = t.param(&s, id).unwrap();
    assert!(matches!(t.backward(p, &mut s), Err(DiffError::NonScalarRoot { .. })));
    let r = t.sum(p).unwrap();
    t.backward(r, &mut s).unwrap();
    assert!(matches!(t.backward(r, &mut s), Err(DiffError::BackwardTwice)));
    t.reset();
    let p = t.param(&s, id).unwrap();
    let r = t.sum(p).unwrap();
    t.backward(r, &mut s).unwrap();
    assert_eq!(s.get(id).grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn shape_mismatch_names_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    match t.matmul(a, b) {
        Err(DiffError::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected mismatch, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn nan_guard_reports_op() {
    let mut t = Tape::with_nan_guard();
    let a = t.constant(Tensor::from_vec(vec![1.0])).unwrap();
    let z = t.constant(Tensor::from_vec(vec![0.0])).unwrap();
    assert!(matches!(t.div(a, z), Err(DiffError::NonFinite { op: "div" })));
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_vec(vec![1.0])).unwrap();
    let z = t.constant(Tensor::from_vec(vec![0.0])).unwrap();
    assert!(t.div(a, z).is_ok());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::new(vec![3, 4], random_values(&mut rng, 12)).unwrap(), ParamGroup::Other).unwrap();
    let b = s.add("b", Tensor::new(vec![4, 2], random_values(&mut rng, 8)).unwrap(), ParamGroup::Other).unwrap();
    let w = random_values(&mut rng, 6);
    let err = grad_check(&mut s, 1e-5, |t, st| {
        let (va, vb) = (t.param(st, a)?, t.param(st, b)?);
        let m = t.matmul(va, vb)?;
        let wv = t.constant(Tensor::new(vec![3, 2], w.clone())?)?;
        let p = t.mul(m, wv)?;
        t.sum(p)
    })
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn grad_check_linear_is_exact_and_constant_is_zero() {
    let (mut s, id) = store_with("p", &[4], vec![0.1, -0.2, 0.3, 0.7]);
    let err = grad_check(&mut s, 1e-5, |t, st| {
        let p = t.param(st, id)?;
        let q = t.scale(p, 3.0)?;
        t.sum(q)
    })
    .unwrap();
    assert!(err <= 1e-9, "{err}");

    let err = grad_check(&mut s, 1e-5, |t, _| {
        let c = t.constant(Tensor::scalar(4.0))?;
        t.add_scalar(c, 1.0)
    })
    .unwrap();
    assert!(err <= 1e-12);
}

#[test]
fn grad_check_rejects_bad_eps_and_non_scalar() {
    let (mut s, id) = store_with("p", &[2], vec![0.1, 0.2]);
    assert!(grad_check(&mut s, 0.0, |t, st| t.param(st, id)).is_err());
    assert!(grad_check(&mut s, 1e-2, |t, st| t.param(st, id)).is_err());
    assert!(matches!(
        grad_check(&mut s, 1e-5, |t, st| t.param(st, id)),
        Err(DiffError::NonScalarRoot { .. })
    ));
}

#[test]
fn conv2d_matches_direct_sum() {
    // 1 input channel 3×3, one 2×2 kernel, stride 1, no padding.
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap()).unwrap();
    let w = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap()).unwrap();
    let b = t.constant(Tensor::from_vec(vec![0.5])).unwrap();
    let y = t.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 2, 2]);
    // x[i,j] - x[i+1,j+1] = -4 everywhere
    assert_eq!(t.values(y), &[-3.5; 4]);
}

#[test]
fn bilinear_sample_is_exact_on_linear_fields() {
    let mut t = Tape::new();
    let vals: Vec<f64> = (0..4 * 5).map(|i| (i % 5) as f64 * 2.0 + (i / 5) as f64).collect();
    let m = t.constant(Tensor::new(vec![1, 4, 5], vals).unwrap()).unwrap();
    let y = t.bilinear_sample(m, &[(1.25, 0.5), (3.9, 2.2)]).unwrap();
    let v = t.values(y);
    assert!((v[0] - (2.5 + 0.5)).abs() < 1e-12);
    assert!((v[1] - (7.8 + 2.2)).abs() < 1e-12);
}

#[test]
fn window_max_picks_maximum() {
    let mut t = Tape::new();
    let m = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, -2.0, 3.0]).unwrap()).unwrap();
    let w = Window { level: 0, y0: 0, y1: 2, x0: 0, x1: 2 };
    let y = t.window_max(&[m], &[w]).unwrap();
    assert_eq!(t.values(y), &[5.0]);
}

#[test]
fn focal_at_zero_logit_matches_closed_form() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1])).unwrap();
    let neg = t.sigmoid_focal(x, &[0.0], 0.25, 2.0).unwrap();
    let pos = t.sigmoid_focal(x, &[1.0], 0.25, 2.0).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((t.values(neg)[0] - 0.75 * 0.25 * ln2).abs() < 1e-15);
    assert!((t.values(pos)[0] - 0.25 * 0.25 * ln2).abs() < 1e-15);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![5, 6], random_values(&mut rng, 30)).unwrap()).unwrap();
        let b = t.constant(Tensor::new(vec![6, 7], random_values(&mut rng, 42)).unwrap()).unwrap();
        let m = t.matmul(a, b).unwrap();
        let s = t.softmax(m).unwrap();
        let l = t.layer_norm(s, 1e-5).unwrap();
        t.values(l).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
