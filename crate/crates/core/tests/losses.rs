mod common;

use proptest::prelude::*;
use windvr::losses::*;
use windvr::numerics::*;
use windvr::Result;
use common::*;


/// Evaluates a two-input loss on constants.
fn eval2(a: &[f64], b: &[f64], f: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(a.to_vec())).unwrap();
    let b = tape.constant(Tensor::from_vec(b.to_vec())).unwrap();
    let l = f(&mut tape, a, b).unwrap();
    tape.value(l).item()
}

fn softplus_ref(x: f64) -> f64 {
    x.exp().ln_1p()
}

#[test]
fn default_and_final_weights() {
    let w = LossWeights::default();
    assert_eq!((w.l1, w.fm, w.gan, w.r1, w.r2), (1.0, 1.0, 1.0, 1000.0, 1000.0));
    let f = LossWeights::final_model();
    assert_eq!((f.l1, f.fm, f.gan), (0.1, 0.1, 1.0));
    assert!(LossWeights { sigma_rel: 0.0, ..w }.validate().is_err());
    assert!(LossWeights { r1: -1.0, ..w }.validate().is_err());
}

#[test]
fn l1_examples() {
    assert_eq!(eval2(&[0.5, 1.0], &[0.5, 1.0], l1_loss), 0.0);
    assert_eq!(eval2(&[0.0, 0.0], &[1.0, 3.0], l1_loss), 2.0);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(l1_loss(&mut tape, a, b).is_err());
}

#[test]
fn l1_gradient_is_sign_over_n() {
    let target = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]);
    let x = Tensor::from_vec(vec![0.5, 0.2, 2.7, 1.0]);
    let rep = grad_check(
        |tape, v| {
            let t = tape.constant(target.clone())?;
            l1_loss(tape, v, t)
        },
        &x,
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
    let mut tape = Tape::new();
    let v = tape.leaf(x, true).unwrap();
    let t = tape.constant(target).unwrap();
    let l = l1_loss(&mut tape, v, t).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(v).unwrap().data(), &[0.25, -0.25, 0.25, -0.25]);
}

#[test]
fn rpgan_examples() {
    let d = eval2(&[2.0], &[-1.0], rpgan_d_loss);
    assert!((d - 0.04858735157374206).abs() <= 1e-12);
    let ln2 = std::f64::consts::LN_2;
    assert!((eval2(&[0.3], &[0.3], rpgan_d_loss) - ln2).abs() <= 1e-15);
    assert!((eval2(&[0.3], &[0.3], rpgan_g_loss) - ln2).abs() <= 1e-15);
    let mut prev = f64::INFINITY;
    for i in -40..=40 {
        let gap = i as f64 / 4.0;
        let d = eval2(&[gap], &[0.0], rpgan_d_loss);
        assert!(d < prev);
        prev = d;
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    assert!(rpgan_d_loss(&mut tape, a, b).is_err());
}

#[test]
fn nonsat_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((eval2(&[0.0], &[0.0], nonsat_d_loss) - 2.0 * ln2).abs() <= 1e-15);
    assert!(eval2(&[0.0], &[50.0], |t, _, f| nonsat_g_loss(t, f)) < 1e-20);
    let real = [0.3, -1.2, 2.5, 0.0];
    let fake = [-0.7, 1.1, 0.4, -3.0];
    let want_d: f64 = real.iter().zip(&fake).map(|(r, f)| softplus_ref(-r) + softplus_ref(*f)).sum::<f64>() / 4.0;
    let want_g: f64 = fake.iter().map(|f| softplus_ref(-f)).sum::<f64>() / 4.0;
    assert!((eval2(&real, &fake, nonsat_d_loss) - want_d).abs() <= 1e-12);
    assert!((eval2(&real, &fake, |t, _, f| nonsat_g_loss(t, f)) - want_g).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn rpgan_depends_on_the_logit_gap_only(r in -20.0f64..20.0, f in -20.0f64..20.0, c in -50.0f64..50.0) {
        let d0 = eval2(&[r], &[f], rpgan_d_loss);
        let d1 = eval2(&[r + c], &[f + c], rpgan_d_loss);
        let g0 = eval2(&[r], &[f], rpgan_g_loss);
        let g1 = eval2(&[r + c], &[f + c], rpgan_g_loss);
        // Adding c moves the gap by at most an ulp of the shifted logits.
        let slack = 1e-12 + 4.0 * f64::EPSILON * (r.abs() + f.abs() + c.abs());
        prop_assert!((d0 - d1).abs() <= slack);
        prop_assert!((g0 - g1).abs() <= slack);
        prop_assert!(d0 >= 0.0 && g0 >= 0.0);
        prop_assert!(eval2(&[r], &[f], nonsat_d_loss) >= 0.0);
    }
}

fn linear_d(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.sum(x)
}

fn approx_r_value(x: &Tensor, noise: &Tensor, sigma: f64, d: impl FnMut(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let l = approx_r(&mut tape, d, xv, sigma, noise)?;
    Ok(tape.value(l).item())
}

#[test]
fn approx_r_closed_forms() {
    let mut r = rng(1);
    let x = Tensor::randn(&[12], 1.0, &mut r);
    let n = perturbation(&[12], &mut r);
    let s: f64 = n.sum();
    for sigma in [1.0, 0.5, 0.01] {
        let v = approx_r_value(&x, &n, sigma, linear_d).unwrap();
        let want = sigma * sigma * s * s;
        assert!((v - want).abs() <= 1e-12 * want.max(1e-3), "sigma={sigma}: {v} vs {want}");
    }
    let constant = |tape: &mut Tape, _x: Var| tape.constant(Tensor::from_vec(vec![4.0]));
    assert_eq!(approx_r_value(&x, &n, 1.0, constant).unwrap(), 0.0);
    let smooth = |tape: &mut Tape, x: Var| {
        let y = tape.gelu(x)?;
        tape.sum(y)
    };
    assert!(approx_r_value(&x, &n, 1e-6, smooth).unwrap() < 1e-6);
    assert!(approx_r_value(&x, &n, 0.0, linear_d).is_err());
    assert!(approx_r_value(&x, &n, -1.0, linear_d).is_err());
    assert!(approx_r_value(&x, &Tensor::zeros(&[11]), 1.0, linear_d).is_err());
}

#[test]
fn approx_r_is_symmetric_in_the_perturbation_sign_on_average() {
    let mut r = rng(2);
    let x = Tensor::randn(&[8], 1.0, &mut r);
    let d = |tape: &mut Tape, x: Var| {
        let y = tape.softplus(x)?;
        let y = tape.square(y)?;
        tape.sum(y)
    };
    let (mut plus, mut minus) = (0.0, 0.0);
    for _ in 0..1000 {
        let n = perturbation(&[8], &mut r);
        plus += approx_r_value(&x, &n, 0.3, d).unwrap();
        minus += approx_r_value(&x, &n.map(|v| -v), 0.3, d).unwrap();
    }
    assert!((plus - minus).abs() < 0.05 * plus.max(minus), "{plus} vs {minus}");
}

#[test]
fn relative_sigma_scales_with_the_spread() {
    let x = Tensor::from_vec(vec![1.0, 3.0, 1.0, 3.0]);
    assert_eq!(relative_sigma(&x, 0.01), 0.01);
}

#[test]
fn feature_matching_examples() {
    let mut tape = Tape::new();
    let a: Vec<Var> = (0..3).map(|k| tape.constant(Tensor::full(&[4, 2], k as f64)).unwrap()).collect();
    let b: Vec<Var> = (0..3).map(|k| tape.constant(Tensor::full(&[4, 2], k as f64 + 1.0)).unwrap()).collect();
    let same = feature_matching(&mut tape, &a, &a).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);
    let one = feature_matching(&mut tape, &a, &b).unwrap();
    assert_eq!(tape.value(one).item(), 1.0);
    assert!(feature_matching(&mut tape, &a, &b[..2]).is_err());
    assert!(feature_matching(&mut tape, &[], &[]).is_err());
}

#[test]
fn feature_matching_detaches_the_real_path() {
    let mut r = rng(3);
    let fake = Tensor::randn(&[6, 4], 1.0, &mut r);
    let real = Tensor::randn(&[6, 4], 1.0, &mut r);
    let rep = grad_check(
        |tape, v| {
            let rv = tape.constant(real.clone())?;
            let f = tape.scale(v, 1.0)?;
            feature_matching(tape, &[f, v], &[rv, rv])
        },
        &fake,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
    let mut tape = Tape::new();
    let fv = tape.leaf(fake, true).unwrap();
    let rv = tape.leaf(real, true).unwrap();
    let l = feature_matching(&mut tape, &[fv], &[rv]).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(fv).is_ok());
    assert!(g.wrt(rv).ok().map_or(true, |t| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn every_loss_through_a_toy_discriminator_passes_grad_check() {
    for (name, rep) in loss_grad_checks() {
        assert!(rep.pass, "{name}: {rep:?}");
    }
}
