use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::gradcheck::{check_gradients, FD_STEP};
use crate::rng::{stream_rng, uniform_tensor};

fn approx(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let i2 = Tensor::eye(2);
    let out = tape.matmul(&i2, &i2).unwrap();
    assert_eq!(out.data(), &[1.0, 0.0, 0.0, 1.0]);

    let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let out = tape.matmul(&a, &b).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[4, 2]);
    let err = tape.matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = stream_rng(11, "test-matmul", 0);
    for trial in 0..20 {
        let a = uniform_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = uniform_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let w = uniform_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        let check = check_gradients(
            &|t, xs| {
                let c = t.matmul(&xs[0], &xs[1])?;
                t.sum_all(&t.mul(&c, &w)?)
            },
            &[a, b],
            FD_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err <= 1e-6, "trial {trial}: {check:?}");
    }
}

#[test]
fn l2_normalize_examples() {
    let tape = Tape::new();
    let v = Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let out = tape.l2_normalize_rows(&v, 1e-8).unwrap();
    assert!(approx(out.data()[0], 0.6, 1e-12) && approx(out.data()[1], 0.8, 1e-12));

    let z = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let out = tape.l2_normalize_rows(&z, 1e-8).unwrap();
    assert_eq!(out.data(), &[0.0, 0.0]);
}

#[test]
fn l2_normalize_gradient_matches_finite_differences() {
    let mut rng = stream_rng(11, "test-l2n", 0);
    for trial in 0..20 {
        let x = uniform_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        let w = uniform_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        let check = check_gradients(
            &|t, xs| {
                let y = t.l2_normalize_rows(&xs[0], 1e-8)?;
                t.sum_all(&t.mul(&y, &w)?)
            },
            &[x],
            FD_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err <= 1e-6, "trial {trial}: {check:?}");
    }
}

#[test]
fn log_softmax_examples() {
    let tape = Tape::new();
    let x = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let out = tape.log_softmax_rows(&x).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!(approx(out.data()[0], -ln2, 1e-12) && approx(out.data()[1], -ln2, 1e-12));

    let x = Tensor::from_vec(vec![1, 2], vec![1000.0, 0.0]).unwrap();
    let out = tape.log_softmax_rows(&x).unwrap();
    assert!(out.is_finite());
    assert!(approx(out.data()[0], 0.0, 1e-9));
    assert!(approx(out.data()[1], -1000.0, 1e-9));
}

#[test]
fn log_softmax_gradient_matches_finite_differences() {
    let mut rng = stream_rng(11, "test-lsm", 0);
    for trial in 0..20 {
        let x = uniform_tensor(&mut rng, &[4, 4], -2.0, 2.0);
        let w = uniform_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let check = check_gradients(
            &|t, xs| {
                let y = t.log_softmax_rows(&xs[0])?;
                t.sum_all(&t.mul(&y, &w)?)
            },
            &[x],
            FD_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err <= 1e-6, "trial {trial}: {check:?}");
    }
}

#[test]
fn bilinear_sample_examples() {
    let tape = Tape::new();
    // Constant field: any sample point returns the constant per channel.
    let map = Tensor::full(&[2, 3, 3], 7.5);
    let s = tape.bilinear_sample(&map, 0.37, 1.92).unwrap();
    assert_eq!(s.shape(), &[2]);
    assert!(s.data().iter().all(|&v| approx(v, 7.5, 1e-12)));

    // Lattice point: exact grid value.
    let map = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = tape.bilinear_sample(&map, 1.0, 0.0).unwrap();
    assert_eq!(s.data(), &[3.0]);

    // Ramp f(i, j) = j sampled at x = 1.5 gives 1.5.
    let ramp: Vec<f64> = (0..3).flat_map(|_| (0..4).map(|j| j as f64)).collect();
    let map = Tensor::from_vec(vec![1, 3, 4], ramp).unwrap();
    let s = tape.bilinear_sample(&map, 1.0, 1.5).unwrap();
    assert!(approx(s.data()[0], 1.5, 1e-12));
}

#[test]
fn bilinear_sample_clamps_out_of_range_coordinates() {
    let tape = Tape::new();
    let map = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = tape.bilinear_sample(&map, -3.0, 9.0).unwrap();
    assert_eq!(s.data(), &[2.0]); // clamped to (0, 1)
}

#[test]
fn backward_examples() {
    // Sum of a leaf: gradient of all ones.
    let tape = Tape::new();
    let x = tape.watch(&Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let s = tape.sum_all(&x).unwrap();
    let grads = tape.backward(&s).unwrap();
    assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);

    // x·x at x = 3 has gradient 6.
    let tape = Tape::new();
    let x = tape.watch(&Tensor::scalar(3.0));
    let y = tape.mul(&x, &x).unwrap();
    let grads = tape.backward(&y).unwrap();
    assert_eq!(grads.wrt(&x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_root_and_reuse() {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::zeros(&[2, 2]));
    let err = tape.backward(&x).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarRoot { .. }));

    let s = tape.sum_all(&x).unwrap();
    tape.backward(&s).unwrap();
    let err = tape.backward(&s).unwrap_err();
    assert!(matches!(err, TensorError::TapeConsumed));
}

#[test]
fn cross_tape_use_is_an_error() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let x = t1.watch(&Tensor::zeros(&[2]));
    let err = t2.add(&x, &x).unwrap_err();
    assert!(matches!(err, TensorError::CrossTape));
}

#[test]
fn gradient_accumulates_over_fanout() {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::scalar(2.0));
    let y = tape.add(&x, &x).unwrap(); // y = 2x
    let z = tape.mul(&y, &x).unwrap(); // z = 2x^2, dz/dx = 4x = 8
    let grads = tape.backward(&z).unwrap();
    assert_eq!(grads.wrt(&x).unwrap().data(), &[8.0]);
}

#[test]
fn forward_ops_are_deterministic() {
    let run = || {
        let tape = Tape::new();
        let mut rng = stream_rng(3, "det", 0);
        let a = uniform_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let b = uniform_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let c = tape.matmul(&a, &b).unwrap();
        let d = tape.gelu(&c).unwrap();
        tape.log_softmax_rows(&d).unwrap()
    };
    assert!(run().bitwise_eq(&run()));
}

/// Sweep: every differentiable op matches central finite differences
/// (step 1e-5, 64-bit) within max relative error 1e-5 on 20 random inputs.
#[test]
fn gradient_sweep_over_all_ops() {
    type Case = (&'static str, fn(&Tape, &[Tensor]) -> Result<Tensor>, Vec<Vec<usize>>);
    let unary_shapes = vec![vec![3, 4]];
    let cases: Vec<Case> = vec![
        ("add", |t, xs| t.sum_weighted(&t.add(&xs[0], &xs[1])?), vec![vec![3, 4], vec![3, 4]]),
        ("sub", |t, xs| t.sum_weighted(&t.sub(&xs[0], &xs[1])?), vec![vec![3, 4], vec![3, 4]]),
        ("mul", |t, xs| t.sum_weighted(&t.mul(&xs[0], &xs[1])?), vec![vec![3, 4], vec![3, 4]]),
        ("add_scalar", |t, xs| t.sum_weighted(&t.add_scalar(&xs[0], 0.7)?), unary_shapes.clone()),
        ("mul_scalar", |t, xs| t.sum_weighted(&t.mul_scalar(&xs[0], -1.3)?), unary_shapes.clone()),
        ("exp", |t, xs| t.sum_weighted(&t.exp(&xs[0])?), unary_shapes.clone()),
        ("gelu", |t, xs| t.sum_weighted(&t.gelu(&xs[0])?), unary_shapes.clone()),
        ("transpose", |t, xs| t.sum_weighted(&t.transpose(&xs[0])?), unary_shapes.clone()),
        ("reshape", |t, xs| t.sum_weighted(&t.reshape(&xs[0], vec![4, 3])?), unary_shapes.clone()),
        ("slice_rows", |t, xs| t.sum_weighted(&t.slice_rows(&xs[0], 1, 3)?), unary_shapes.clone()),
        ("slice_cols", |t, xs| t.sum_weighted(&t.slice_cols(&xs[0], 1, 3)?), unary_shapes.clone()),
        ("row_sum", |t, xs| t.sum_weighted(&t.row_sum(&xs[0])?), unary_shapes.clone()),
        ("row_mean", |t, xs| t.sum_weighted(&t.row_mean(&xs[0])?), unary_shapes.clone()),
        ("sum_all", |t, xs| t.sum_all(&xs[0]), unary_shapes.clone()),
        ("mean_all", |t, xs| t.mean_all(&xs[0]), unary_shapes.clone()),
        ("matmul", |t, xs| t.sum_weighted(&t.matmul(&xs[0], &xs[1])?), vec![vec![3, 4], vec![4, 2]]),
        (
            "concat_rows",
            |t, xs| t.sum_weighted(&t.concat_rows(&[&xs[0], &xs[1]])?),
            vec![vec![2, 4], vec![3, 4]],
        ),
        (
            "index_select",
            |t, xs| {
                let idx = vec![0, 5, 5, 11, 3, 7];
                t.sum_weighted(&t.index_select(&xs[0], idx, vec![2, 3])?)
            },
            unary_shapes.clone(),
        ),
        (
            "broadcast_add_row",
            |t, xs| t.sum_weighted(&t.broadcast_add_row(&xs[0], &xs[1])?),
            vec![vec![3, 4], vec![4]],
        ),
        (
            "mul_by_scalar_tensor",
            |t, xs| t.sum_weighted(&t.mul_by_scalar_tensor(&xs[0], &xs[1])?),
            vec![vec![3, 4], vec![]],
        ),
        (
            "layer_norm",
            |t, xs| t.sum_weighted(&t.layer_norm(&xs[0], &xs[1], &xs[2], 1e-5)?),
            vec![vec![3, 4], vec![4], vec![4]],
        ),
        (
            "l2_normalize_rows",
            |t, xs| t.sum_weighted(&t.l2_normalize_rows(&xs[0], 1e-8)?),
            unary_shapes.clone(),
        ),
        (
            "log_softmax_rows",
            |t, xs| t.sum_weighted(&t.log_softmax_rows(&xs[0])?),
            unary_shapes.clone(),
        ),
        (
            "bilinear_resample",
            |t, xs| {
                let pts = vec![(0.3, 1.7), (1.9, 0.2), (-1.0, 5.0), (1.0, 2.0)];
                t.sum_weighted(&t.bilinear_resample(&xs[0], pts)?)
            },
            vec![vec![2, 3, 4]],
        ),
    ];

    let mut rng = stream_rng(11, "sweep", 0);
    for (name, f, shapes) in &cases {
        for trial in 0..20 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|sh| uniform_tensor(&mut rng, sh, -2.0, 2.0))
                .collect();
            let check = check_gradients(&|t, xs| f(t, xs), &inputs, FD_STEP).unwrap();
            assert!(
                check.max_rel_err <= 1e-5,
                "op {name} trial {trial}: max rel err {}",
                check.max_rel_err
            );
        }
    }

    // Guarded ops checked on inputs away from their kinks.
    for trial in 0..20 {
        let log_in = uniform_tensor(&mut rng, &[3, 4], 0.2, 3.0);
        let check = check_gradients(
            &|t, xs| t.sum_weighted(&t.log(&xs[0])?),
            &[log_in],
            FD_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err <= 1e-5, "log trial {trial}: {check:?}");

        let mut recip_in = uniform_tensor(&mut rng, &[3, 4], 0.2, 2.0);
        if trial % 2 == 0 {
            recip_in = Tensor::from_vec(
                recip_in.shape().to_vec(),
                recip_in.data().iter().map(|v| -v).collect(),
            )
            .unwrap();
        }
        let check = check_gradients(
            &|t, xs| t.sum_weighted(&t.recip(&xs[0])?),
            &[recip_in],
            FD_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err <= 1e-5, "recip trial {trial}: {check:?}");

        let mut clamp_rng = stream_rng(11, "sweep-clamp", trial);
        let data: Vec<f64> = (0..12)
            .map(|_| loop {
                let v: f64 = clamp_rng.gen_range(-2.0..2.0);
                if (v.abs() - 1.5).abs() > 1e-3 {
                    break v;
                }
            })
            .collect();
        let clamp_in = Tensor::from_vec(vec![3, 4], data).unwrap();
        let check = check_gradients(
            &|t, xs| t.sum_weighted(&t.clamp(&xs[0], -1.5, 1.5)?),
            &[clamp_in],
            FD_STEP,
        )
        .unwrap();
        assert!(check.max_rel_err <= 1e-5, "clamp trial {trial}: {check:?}");
    }
}

/// Backward of a sum of two roots equals the sum of individual backwards.
#[test]
fn backward_is_linear_in_roots() {
    let mut rng = stream_rng(19, "linearity", 0);
    for _ in 0..10 {
        let xv = uniform_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let yv = uniform_tensor(&mut rng, &[3, 2], -1.0, 1.0);

        let f1 = |t: &Tape, x: &Tensor, y: &Tensor| t.sum_all(&t.matmul(x, y).unwrap()).unwrap();
        let f2 = |t: &Tape, x: &Tensor, _: &Tensor| t.mean_all(&t.mul(x, x).unwrap()).unwrap();

        let run = |which: u8| -> (Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let x = tape.watch(&xv);
            let y = tape.watch(&yv);
            let root = match which {
                1 => f1(&tape, &x, &y),
                2 => f2(&tape, &x, &y),
                _ => {
                    let a = f1(&tape, &x, &y);
                    let b = f2(&tape, &x, &y);
                    tape.add(&a, &b).unwrap()
                }
            };
            let grads = tape.backward(&root).unwrap();
            (
                grads.wrt(&x).map_or(vec![0.0; 6], |g| g.data().to_vec()),
                grads.wrt(&y).map_or(vec![0.0; 6], |g| g.data().to_vec()),
            )
        };

        let (gx12, gy12) = run(0);
        let (gx1, gy1) = run(1);
        let (gx2, gy2) = run(2);
        for i in 0..6 {
            assert!((gx12[i] - (gx1[i] + gx2[i])).abs() <= 1e-12);
            assert!((gy12[i] - (gy1[i] + gy2[i])).abs() <= 1e-12);
        }
    }
}

proptest! {
    /// log_softmax_rows(x + c · ones) == log_softmax_rows(x) within 1e-10.
    #[test]
    fn log_softmax_shift_invariance(
        rows in proptest::collection::vec(
            proptest::collection::vec(-10.0f64..10.0, 4), 1..4),
        c in -50.0f64..50.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = Tensor::from_vec(vec![n, 4], flat.clone()).unwrap();
        let shifted = Tensor::from_vec(vec![n, 4], flat.iter().map(|v| v + c).collect()).unwrap();
        let tape = Tape::new();
        let a = tape.log_softmax_rows(&x).unwrap();
        let b = tape.log_softmax_rows(&shifted).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    /// l2_normalize(alpha · x) == l2_normalize(x) for alpha > 0 within 1e-10.
    #[test]
    fn l2_normalize_scale_invariance(
        row in proptest::collection::vec(-10.0f64..10.0, 5),
        alpha in 1e-2f64..1e3,
    ) {
        prop_assume!(row.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-3);
        let x = Tensor::from_vec(vec![1, 5], row.clone()).unwrap();
        let sx = Tensor::from_vec(vec![1, 5], row.iter().map(|v| v * alpha).collect()).unwrap();
        let tape = Tape::new();
        let a = tape.l2_normalize_rows(&x, 1e-8).unwrap();
        let b = tape.l2_normalize_rows(&sx, 1e-8).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
    }
}

impl Tape {
    /// Reduce to a scalar with fixed non-uniform weights so gradient probes
    /// see distinct per-element signals.
    fn sum_weighted(&self, x: &Tensor) -> Result<Tensor> {
        let w: Vec<f64> = (0..x.numel())
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * (0.37 + 0.11 * i as f64)
            })
            .collect();
        let wt = Tensor::from_vec(x.shape().to_vec(), w)?;
        self.sum_all(&self.mul(x, &wt)?)
    }
}
