mod common;


use proptest::prelude::*;
use rand::Rng;
use windvr::numerics::*;
use windvr::Error;
use common::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}


#[test]
fn matmul_by_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0; 3])).unwrap();
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softplus_matches_high_precision_value() {
    // ln(1 + e^-3) to 40 digits: 0.04858735157374205875892591985468999794188
    assert!((softplus(-3.0) - 0.048_587_351_573_742_06).abs() < 1e-16);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(-3.0)).unwrap();
    let y = tape.softplus(x).unwrap();
    assert!((tape.value(y).item() - 0.048_587_351_573_742_06).abs() < 1e-16);
}

#[test]
fn softplus_is_stable_at_extremes() {
    assert_eq!(softplus(-800.0), 0.0);
    assert_eq!(softplus(800.0), 800.0);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let s = tape.square(x).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[4], &[0.3, -1.2, 2.0, 0.1])).unwrap();
    let s = tape.softmax(x).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn l1_of_linear_map_matches_finite_differences() {
    let mut r = rng(5);
    let a = Tensor::randn(&[4, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 1], 1.0, &mut r);
    let x = Tensor::randn(&[4, 1], 1.0, &mut r);
    let rep = grad_check(
        |tape, x| {
            let a = tape.constant(a.clone())?;
            let b = tape.constant(b.clone())?;
            let y = tape.matmul(a, x)?;
            let d = tape.sub(y, b)?;
            let d = tape.abs(d)?;
            tape.mean(d)
        },
        &x,
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn grad_check_trivial_and_layer_norm() {
    let rep = grad_check(
        |tape, x| {
            let s = tape.square(x)?;
            tape.sum(s)
        },
        &t(&[2], &[1.0, 2.0]),
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass && rep.max_rel_err < 1e-6, "{rep:?}");

    let x = Tensor::randn(&[8], 1.0, &mut rng(8));
    let w = Tensor::randn(&[8], 1.0, &mut rng(9));
    let rep = grad_check(
        |tape, x| {
            let y = tape.layer_norm(x, 1e-5)?;
            // A plain sum of a normalized row is identically zero; weight it.
            let w = tape.constant(w.clone())?;
            let y = tape.mul(y, w)?;
            tape.sum(y)
        },
        &x,
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn grad_check_catches_a_wrong_derivative() {
    let x = t(&[3], &[0.5, -1.0, 2.0]);
    let rep = grad_check(
        |tape, x| {
            let y = tape.map(x, |v| v * v * v, |v| 2.0 * v)?;
            tape.sum(y)
        },
        &x,
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(!rep.pass);
}

#[test]
fn grad_check_rejects_bad_step_and_nondeterminism() {
    let x = t(&[2], &[1.0, 2.0]);
    let f = |tape: &mut Tape, x: Var| tape.sum(x);
    assert!(matches!(grad_check(f, &x, 1e-2, 1e-4), Err(Error::InvalidArgument(_))));
    let calls = std::cell::Cell::new(0u32);
    let flaky = |tape: &mut Tape, x: Var| {
        calls.set(calls.get() + 1);
        let y = tape.scale(x, 1.0 + calls.get() as f64 * 1e-3)?;
        tape.sum(y)
    };
    assert!(matches!(grad_check(flaky, &x, 1e-4, 1e-4), Err(Error::NonDeterministic)));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let e = tape.matmul(a, b).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = tape.constant(Tensor::zeros(&[4])).unwrap();
    let msg = tape.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let bad = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
    assert!(matches!(tape.constant(bad), Err(Error::NonFinite { .. })));
    let x = tape.constant(t(&[1], &[1e300])).unwrap();
    assert!(matches!(tape.square(x), Err(Error::NonFinite { op: "square" })));
}

#[test]
fn backward_needs_scalar_loss_and_nonempty_tape() {
    let mut other = Tape::new();
    let v = other.constant(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(Tape::new().backward(v), Err(Error::EmptyTape)));
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shared_leaf_collects_all_consumers() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.5, -2.0])).unwrap();
    let a = tape.mul(x, x).unwrap();
    let b = tape.scale(x, 3.0).unwrap();
    let c = tape.add(a, b).unwrap();
    let l = tape.sum(c).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0 * 1.5 + 3.0, 2.0 * -2.0 + 3.0]);
}

#[test]
fn tensor_file_layout_is_exact() {
    let x = t(&[1, 2], &[1.0, -0.5]);
    let bytes = encode_tensor(&x);
    let mut want = b"WVT1".to_vec();
    want.extend(2u64.to_le_bytes());
    want.extend(1u64.to_le_bytes());
    want.extend(2u64.to_le_bytes());
    want.extend(1.0f64.to_le_bytes());
    want.extend((-0.5f64).to_le_bytes());
    assert_eq!(bytes, want);
    let back = decode_tensor(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back, x);
    assert!(decode_tensor(&bytes[..bytes.len() - 1], std::path::Path::new("mem")).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(decode_tensor(&wrong, std::path::Path::new("mem")).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wvt");
    write_tensor(&p, &x).unwrap();
    assert_eq!(read_tensor(&p).unwrap(), x);
}

#[test]
fn param_store_round_trips_through_disk() {
    let mut store = ParamStore::new();
    store.add("a.w", Tensor::randn(&[3, 2], 1.0, &mut rng(1)));
    store.add("b", Tensor::randn(&[4], 1.0, &mut rng(2)));
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    let mut other = ParamStore::new();
    other.add("a.w", Tensor::zeros(&[3, 2]));
    other.add("b", Tensor::zeros(&[4]));
    other.load_into(dir.path()).unwrap();
    assert_eq!(other.checksum(), store.checksum());
}

#[test]
fn adamw_first_step_moves_by_lr_times_sign() {
    let mut store = ParamStore::new();
    let id = store.add("w", t(&[3], &[1.0, 1.0, 1.0]));
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        clip_norm: None,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    opt.step(&mut store, &[vec![2.0, -3.0, 0.0]]);
    let w = store.get(id).data();
    assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6 && w[2] == 1.0, "{w:?}");
}

#[test]
fn op_cases_respect_size_limit() {
    for (name, shapes, _) in op_cases() {
        for s in shapes {
            assert!(s.iter().product::<usize>() <= 64, "{name}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_passes_grad_check(seed in any::<u64>()) {
        for (name, rep) in op_grad_checks(seed) {
            prop_assert!(rep.pass, "{}: {:?}", name, rep);
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, l], 1.0, &mut r);
        let c = Tensor::randn(&[l, n], 1.0, &mut r);
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(a).unwrap(), tape.constant(b).unwrap(), tape.constant(c).unwrap());
        let ab = tape.matmul(a, b).unwrap();
        let left = tape.matmul(ab, c).unwrap();
        let bc = tape.matmul(b, c).unwrap();
        let right = tape.matmul(a, bc).unwrap();
        let (x, y) = (tape.value(left), tape.value(right));
        let scale = y.norm().max(1e-300);
        prop_assert!(x.max_abs_diff(y) / scale <= 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..12, spread in 0.1f64..8.0) {
        let x = Tensor::randn(&[rows, cols], spread, &mut rng(seed));
        let mut tape = Tape::new();
        let v = tape.constant(x).unwrap();
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            if cols > 1 {
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn gemm_equals_naive_dot_products(seed in any::<u64>(), m in 1usize..40, k in 1usize..40, n in 1usize..40) {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..m * k).map(|_| r.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut c = vec![0.0; m * n];
        kernels::gemm(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                prop_assert_eq!(c[i * n + j].to_bits(), s.to_bits());
            }
        }
    }
}
