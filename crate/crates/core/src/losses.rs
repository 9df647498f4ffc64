//! Reconstruction, adversarial, regularization and feature-matching losses.
//!
//! All functions build on a [`Tape`] so their gradients flow into whichever
//! parameters produced the inputs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub fm: f64,
    pub gan: f64,
    pub gan_d: f64,
    pub r1: f64,
    pub r2: f64,
    /// Perturbation scale relative to the batch standard deviation.
    pub sigma_rel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            fm: 1.0,
            gan: 1.0,
            gan_d: 1.0,
            r1: 1000.0,
            r2: 1000.0,
            sigma_rel: 0.01,
        }
    }
}

impl LossWeights {
    /// Lower reconstruction and feature-matching weights used for the final model.
    pub fn final_model() -> Self {
        Self {
            l1: 0.1,
            fm: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.fm, self.gan, self.gan_d, self.r1, self.r2];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(self.sigma_rel > 0.0) {
            return Err(invalid(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Which generator/discriminator objective pair to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    #[default]
    Rpgan,
    NonSaturating,
}

fn check_same(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same("l1_loss", tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Mean squared difference.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_same("mse_loss", tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let s = tape.square(d)?;
    tape.mean(s)
}

/// `mean softplus(-(real - fake))`
pub fn rpgan_d_loss(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    check_same("rpgan_d_loss", tape, real, fake)?;
    let d = tape.sub(fake, real)?;
    let s = tape.softplus(d)?;
    tape.mean(s)
}

/// `mean softplus(-(fake - real))`
pub fn rpgan_g_loss(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    check_same("rpgan_g_loss", tape, real, fake)?;
    let d = tape.sub(real, fake)?;
    let s = tape.softplus(d)?;
    tape.mean(s)
}

/// `mean [softplus(-real) + softplus(fake)]`
pub fn nonsat_d_loss(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    check_same("nonsat_d_loss", tape, real, fake)?;
    let nr = tape.neg(real)?;
    let a = tape.softplus(nr)?;
    let b = tape.softplus(fake)?;
    let s = tape.add(a, b)?;
    tape.mean(s)
}

/// `mean softplus(-fake)`
pub fn nonsat_g_loss(tape: &mut Tape, fake: Var) -> Result<Var> {
    let nf = tape.neg(fake)?;
    let s = tape.softplus(nf)?;
    tape.mean(s)
}

pub fn gan_d_loss(kind: GanLoss, tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    match kind {
        GanLoss::Rpgan => rpgan_d_loss(tape, real, fake),
        GanLoss::NonSaturating => nonsat_d_loss(tape, real, fake),
    }
}

pub fn gan_g_loss(kind: GanLoss, tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    match kind {
        GanLoss::Rpgan => rpgan_g_loss(tape, real, fake),
        GanLoss::NonSaturating => nonsat_g_loss(tape, fake),
    }
}

/// Standard-normal perturbation direction of the given shape.
pub fn perturbation<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `sigma_rel` times the population standard deviation of `x`.
pub fn relative_sigma(x: &Tensor, sigma_rel: f64) -> f64 {
    let m = x.mean();
    let var = x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
    sigma_rel * var.sqrt()
}

/// Approximated R1/R2 penalty `mean ||D(x) - D(x + sigma n)||^2`.
///
/// `disc` maps an input to logits (one per sample); `noise` is the frozen
/// perturbation direction. Applied to real data this is aR1, to generated
/// data aR2.
pub fn approx_r<D>(tape: &mut Tape, mut disc: D, x: Var, sigma: f64, noise: &Tensor) -> Result<Var>
where
    D: FnMut(&mut Tape, Var) -> Result<Var>,
{
    check_sigma(sigma)?;
    let base = disc(tape, x)?;
    approx_r_from(tape, base, disc, x, sigma, noise)
}

/// [`approx_r`] reusing an already computed `base = D(x)`.
pub fn approx_r_from<D>(tape: &mut Tape, base: Var, mut disc: D, x: Var, sigma: f64, noise: &Tensor) -> Result<Var>
where
    D: FnMut(&mut Tape, Var) -> Result<Var>,
{
    check_sigma(sigma)?;
    if tape.shape(x) != noise.shape() {
        return Err(Error::Shape {
            op: "approx_r",
            lhs: tape.shape(x).to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let n = tape.constant(noise.clone())?;
    let n = tape.scale(n, sigma)?;
    let xp = tape.add(x, n)?;
    let b = disc(tape, xp)?;
    let d = tape.sub(base, b)?;
    let s = tape.square(d)?;
    tape.mean(s)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("perturbation sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// `(1/K) sum_k mean |fake_k - real_k|`, with the real features treated as constants.
pub fn feature_matching(tape: &mut Tape, fake: &[Var], real: &[Var]) -> Result<Var> {
    if fake.is_empty() || fake.len() != real.len() {
        return Err(invalid(format!(
            "feature matching needs equal, non-empty tap lists, got {} and {}",
            fake.len(),
            real.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&f, &r) in fake.iter().zip(real) {
        let r = tape.constant(tape.value(r).clone())?;
        let term = l1_loss(tape, f, r)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    tape.scale(total.unwrap(), 1.0 / fake.len() as f64)
}
