//! Flow-matching training of the multi-step teacher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, PairStream, StreamConfig};
use crate::error::{Error, Result};
use crate::flow::{interpolate, velocity_target, NoiseSchedule};
use crate::losses::mse_loss;
use crate::model::{Backbone, ForwardInputs};
use crate::numerics::{AdamW, AdamWConfig, Tensor};
use crate::train::{mean, sample_grads, MetricsLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub iters: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
    pub stream: StreamConfig,
    /// Probability of replacing the condition embedding with the null embedding.
    pub cond_dropout: f64,
    pub schedule: NoiseSchedule,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iters: 1500,
            seed: 0,
            optim: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            stream: StreamConfig::default(),
            cond_dropout: 0.1,
            schedule: NoiseSchedule::default(),
            log_every: 50,
        }
    }
}

/// Trains `model` to predict `eps - x0` along the linear interpolant.
/// Logs `fm_loss` every `log_every` iterations and returns the full loss trace.
pub fn pretrain(model: &mut Backbone, cfg: &PretrainConfig, log: &mut MetricsLog) -> Result<Vec<f64>> {
    let stream = PairStream::new(cfg.stream.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim.clone(), model.params());
    let mut trace = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let batch = stream.batch(it)?;
        let m = &*model;
        let (acc, losses) = sample_grads(m.params(), batch.len(), |i, tape, bound| {
            let pair = &batch[i];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11, (it * batch.len() + i) as u64));
            let x0 = pair.hq.to_latent();
            let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
            let tau = cfg.schedule.sample_tau(&mut rng);
            let drop_cond = rng.gen_bool(cfg.cond_dropout.clamp(0.0, 1.0));
            let x_tau = interpolate(&x0, &eps, tau)?;
            let target = tape.constant(velocity_target(&x0, &eps)?)?;
            let inp = ForwardInputs {
                latent: tape.constant(x_tau)?,
                lq: tape.constant(pair.lq_latent())?,
                tau,
                drop_cond,
                grid: pair.grid(),
            };
            let v = m.forward(tape, bound, &inp)?.velocity.expect("full forward");
            let loss = mse_loss(tape, v, target)?;
            Ok((loss, tape.value(loss).item()))
        })
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step: it,
                detail: format!("non-finite value in {op}"),
            },
            e => e,
        })?;
        opt.step(model.params_mut(), &acc.mean());
        let l = mean(&losses);
        trace.push(l);
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iters) {
            log.log(it, "fm_loss", l)?;
        }
    }
    log.flush()?;
    Ok(trace)
}
