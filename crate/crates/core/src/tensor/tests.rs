use std::cell::Cell;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn softmax_of_uniform_logits() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::vector(vec![0.0; 4]));
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.25; 4]);
}

#[test]
fn l2_normalize_three_four_five() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = t.l2_normalize(x).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
}

#[test]
fn l2_normalize_zero_row_falls_back_to_uniform() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::vector(vec![0.0; 4]));
    let y = t.l2_normalize(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5; 4]);
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0; 4]);
}

#[test]
fn matmul_shape_rule() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([3, 4]));
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 4]);
}

#[test]
fn matmul_inner_mismatch_reports_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([4, 4]));
    match t.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 4]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_output_names_the_op() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
    match t.log(x) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Invalid(_))));
}

#[test]
fn second_backward_accumulates_exactly_twice() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(rand_tensor(&[3, 4], 1));
    let w = t.leaf(rand_tensor(&[4, 2], 2));
    let y = t.matmul(x, w).unwrap();
    let y = t.gelu(y).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let once: Vec<f64> = t.grad(w).unwrap().to_vec();
    t.backward(s).unwrap();
    let twice = t.grad(w).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
    t.zero_grads();
    assert!(t.grad(w).is_none());
}

#[test]
fn detached_values_are_constants() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    let d = t.detach(x);
    let p = t.mul(x, d).unwrap();
    let s = t.sum(p).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn masked_softmax_zeroes_masked_columns() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new([2, 3], vec![1.0, 5.0, 2.0, 0.0, 9.0, 0.0]).unwrap());
    let y = t.masked_softmax(x, Some(&[true, false, true])).unwrap();
    let v = t.value(y);
    for r in 0..2 {
        assert_eq!(v.row(r)[1], 0.0);
        assert!((v.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn fd_check_sum_of_squares() {
    let x = rand_tensor(&[8], 7);
    let err = finite_difference_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fd_check_softmax_then_pick() {
    let x = rand_tensor(&[5], 8);
    let err = finite_difference_check(
        |t, x| {
            let p = t.softmax(x)?;
            let p = t.pick(p, &[2])?;
            t.sum(p)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn fd_check_constant_function_is_exact() {
    let x = rand_tensor(&[4], 9);
    let err = finite_difference_check(
        |t, _x| Ok(t.constant(Tensor::scalar(3.0))),
        &x,
        1e-3,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn fd_check_detects_nondeterminism() {
    let x = rand_tensor(&[3], 10);
    let counter = Cell::new(0.0f64);
    let res = finite_difference_check(
        |t, x| {
            counter.set(counter.get() + 1.0);
            let s = t.sum(x)?;
            t.add_scalar(s, counter.get())
        },
        &x,
        1e-3,
    );
    assert!(matches!(res, Err(Error::NonDeterministic { .. })));
}

#[test]
fn fd_check_rejects_nonpositive_step() {
    let x = rand_tensor(&[3], 11);
    assert!(finite_difference_check(|t, x| t.sum(x), &x, 0.0).is_err());
}

/// Every op in the closed set, composed into a scalar, checked against
/// finite differences.
#[test]
fn every_op_passes_gradient_check() {
    type Build = fn(&mut Tape<'static, f64>, Var) -> crate::Result<Var>;
    let w = rand_tensor(&[4, 3], 21);
    let b = rand_tensor(&[3], 22);
    let cases: Vec<(&str, Vec<usize>, Build)> = vec![
        ("matmul", vec![2, 4], |t, x| {
            let w = t.constant(rand_tensor(&[4, 3], 21));
            let y = t.matmul(x, w)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }),
        ("matmul_rhs", vec![4, 3], |t, x| {
            let a = t.constant(rand_tensor(&[2, 4], 23));
            let y = t.matmul(a, x)?;
            let y = t.gelu(y)?;
            t.sum(y)
        }),
        ("add_broadcast", vec![3], |t, x| {
            let a = t.constant(rand_tensor(&[2, 3], 24));
            let y = t.add(a, x)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }),
        ("sub_mul", vec![2, 3], |t, x| {
            let a = t.constant(rand_tensor(&[2, 3], 25));
            let d = t.sub(a, x)?;
            let y = t.mul(d, x)?;
            t.sum(y)
        }),
        ("scale_transpose", vec![2, 3], |t, x| {
            let y = t.scale(x, 1.7)?;
            let y = t.transpose(y)?;
            let c = t.constant(rand_tensor(&[3, 2], 26));
            let y = t.mul(y, c)?;
            t.sum(y)
        }),
        ("concat_slice", vec![2, 3], |t, x| {
            let c = t.constant(rand_tensor(&[2, 2], 27));
            let y = t.concat(&[x, c], Axis::Cols)?;
            let y = t.concat(&[y, y], Axis::Rows)?;
            let y = t.slice(y, Axis::Cols, 1, 4)?;
            let y = t.slice(y, Axis::Rows, 1, 3)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }),
        ("gather_rows", vec![4, 3], |t, x| {
            let y = t.gather_rows(x, &[0, 2, 2, 3])?;
            let y = t.sigmoid(y)?;
            t.sum(y)
        }),
        ("softmax_log", vec![2, 5], |t, x| {
            let y = t.softmax(x)?;
            let y = t.log(y)?;
            let y = t.pick(y, &[1, 4])?;
            t.sum(y)
        }),
        ("masked_softmax", vec![2, 4], |t, x| {
            let y = t.masked_softmax(x, Some(&[true, true, false, true]))?;
            let c = t.constant(rand_tensor(&[2, 4], 28));
            let y = t.mul(y, c)?;
            t.sum(y)
        }),
        ("log_softmax", vec![3, 4], |t, x| {
            let y = t.log_softmax(x)?;
            let y = t.pick(y, &[0, 3, 1])?;
            t.mean(y)
        }),
        ("layer_norm", vec![3, 4], |t, x| {
            let g = t.constant(rand_tensor(&[4], 29));
            let b = t.constant(rand_tensor(&[4], 30));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            let c = t.constant(rand_tensor(&[3, 4], 31));
            let y = t.mul(y, c)?;
            t.sum(y)
        }),
        ("relu_clamp", vec![6], |t, x| {
            let y = t.relu(x)?;
            let y = t.add_scalar(y, 0.1)?;
            let y = t.clamp(y, 0.2, 0.8)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }),
        ("l2_normalize", vec![2, 3], |t, x| {
            let y = t.l2_normalize(x)?;
            let c = t.constant(rand_tensor(&[2, 3], 32));
            let y = t.mul(y, c)?;
            t.sum(y)
        }),
        ("mean_neg", vec![5], |t, x| {
            let y = t.neg(x)?;
            let y = t.mul(y, x)?;
            t.mean(y)
        }),
    ];
    let _ = (w, b);
    for (i, (name, shape, f)) in cases.into_iter().enumerate() {
        // relu/clamp kinks: keep inputs away from the breakpoints
        let mut x = rand_tensor(&shape, 100 + i as u64);
        if name == "relu_clamp" {
            x = Tensor::vector(vec![-0.5, 0.05, 0.3, 0.45, 0.9, -0.05]);
        }
        let err = finite_difference_check(f, &x, 1e-3).unwrap();
        assert!(err < 1e-6, "{name}: {err}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f32..30.0, 1..24)) {
        let n = vals.len();
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::vector(vals));
        let y = t.softmax(x).unwrap();
        let v = t.value(y).data();
        let s: f32 = v.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-5);
        prop_assert!(v.iter().all(|p| *p >= 0.0 && *p <= 1.0));
        prop_assert_eq!(v.len(), n);
    }

    #[test]
    fn tensor_shape_invariant(rows in 0usize..6, cols in 0usize..6, extra in 0usize..3) {
        let data = vec![0.0f32; rows * cols + extra];
        let ok = Tensor::new([rows, cols], data).is_ok();
        prop_assert_eq!(ok, extra == 0);
    }
}

#[test]
fn adam_only_touches_its_group() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
    let b = store.add("b", Tensor::vector(vec![3.0]));
    let before = store.fingerprint(&[b]);
    let mut grads = Gradients::new(store.len());
    grads.accumulate(a, &[1.0, -1.0]);
    grads.accumulate(b, &[5.0]);
    let mut opt = Adam::new(vec![a], &store);
    opt.step(&mut store, &grads, 0.1);
    assert_eq!(store.fingerprint(&[b]), before);
    let av = store.get(a).data();
    assert!((av[0] - 0.9).abs() < 1e-6 && (av[1] - 2.1).abs() < 1e-6);
}

#[test]
fn lr_schedule_warms_up_then_decays() {
    let s = LrSchedule::new(1.0, 0.1, 100);
    assert_eq!(s.warmup_steps, 10);
    assert!((s.at(0) - 0.1).abs() < 1e-6);
    assert!((s.at(9) - 1.0).abs() < 1e-6);
    assert!(s.at(50) < 1.0 && s.at(50) > 0.0);
    assert_eq!(s.at(100), 0.0);
}
