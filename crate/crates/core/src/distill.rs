//! Progressive distillation: each stage trains a student to cover two teacher
//! Euler steps with one, halving the sampling step count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Pair, PairStream, StreamConfig};
use crate::error::{invalid, Error, Result};
use crate::flow::{euler_step, interpolate, Conditioned, VelocityField};
use crate::losses::mse_loss;
use crate::model::{Backbone, ForwardInputs};
use crate::numerics::{AdamW, AdamWConfig, Tensor};
use crate::train::{mean, sample_grads, MetricsLog};

/// Guidance scale the teacher uses when it samples with `steps` steps.
pub fn teacher_cfg_scale(steps: usize) -> f64 {
    if steps == 64 {
        7.5
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSchedule {
    pub stage_steps: Vec<usize>,
    pub iters_per_stage: usize,
}

impl Default for DistillSchedule {
    fn default() -> Self {
        Self {
            stage_steps: vec![64, 32, 16, 8, 4, 2, 1],
            iters_per_stage: 500,
        }
    }
}

impl DistillSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage_steps.len() < 2 {
            return Err(invalid("a schedule needs at least two step counts"));
        }
        if let Some(w) = self.stage_steps.windows(2).find(|w| w[1] == 0 || w[0] != 2 * w[1]) {
            return Err(invalid(format!(
                "consecutive step counts must halve, got {} -> {}",
                w[0], w[1]
            )));
        }
        if self.iters_per_stage == 0 {
            return Err(invalid("iters_per_stage must be positive"));
        }
        Ok(())
    }

    /// `(steps_from, steps_to)` per stage.
    pub fn stages(&self) -> Vec<(usize, usize)> {
        self.stage_steps.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub schedule: DistillSchedule,
    pub seed: u64,
    pub optim: AdamWConfig,
    pub stream: StreamConfig,
    /// Fixed samples on which each stage's MSE is measured before and after training.
    pub probe_size: usize,
    /// Iterations between checks that `x_a - (tau_a - tau_c) v*` lands on the teacher's `x_c`.
    pub check_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            schedule: DistillSchedule::default(),
            seed: 0,
            optim: AdamWConfig::default(),
            stream: StreamConfig::default(),
            probe_size: 16,
            check_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub steps_from: usize,
    pub steps_to: usize,
    pub teacher_cfg: f64,
    /// Mean training MSE per iteration.
    pub trace: Vec<f64>,
    pub probe_initial: f64,
    pub probe_final: f64,
    /// Largest reproduction error seen by the spot checks.
    pub max_reproduction_err: f64,
}

/// Two guided Euler half-steps `tau_a -> tau_b -> tau_c`; returns `(v*, x_c)`.
pub fn two_step<M: VelocityField + ?Sized>(
    teacher: &M,
    x_a: &Tensor,
    tau_a: f64,
    tau_c: f64,
    cfg_scale: f64,
) -> Result<(Tensor, Tensor)> {
    if !(tau_a > tau_c) || tau_c < 0.0 {
        return Err(invalid(format!("need tau_a > tau_c >= 0, got {tau_a} and {tau_c}")));
    }
    let tau_b = 0.5 * (tau_a + tau_c);
    let x_b = euler_step(teacher, x_a, tau_a, tau_b, cfg_scale)?;
    let x_c = euler_step(teacher, &x_b, tau_b, tau_c, cfg_scale)?;
    let dt = tau_a - tau_c;
    let v = x_a.zip_map(&x_c, |a, c| (a - c) / dt)?;
    Ok((v, x_c))
}

/// Velocity whose single Euler step from `x_a` lands where two teacher half-steps do.
pub fn two_step_target<M: VelocityField + ?Sized>(
    teacher: &M,
    x_a: &Tensor,
    tau_a: f64,
    tau_c: f64,
    cfg_scale: f64,
) -> Result<Tensor> {
    Ok(two_step(teacher, x_a, tau_a, tau_c, cfg_scale)?.0)
}

/// One distillation sample on the student's step grid.
struct Sample {
    x_a: Tensor,
    lq: Tensor,
    tau_a: f64,
    tau_c: f64,
}

fn draw_sample(pair: &Pair, steps_to: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = pair.hq.to_latent();
    let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
    let i = rng.gen_range(1..=steps_to);
    let tau_a = i as f64 / steps_to as f64;
    let tau_c = (i - 1) as f64 / steps_to as f64;
    Ok(Sample {
        x_a: interpolate(&x0, &eps, tau_a)?,
        lq: pair.lq_latent(),
        tau_a,
        tau_c,
    })
}

fn probe_mse(student: &Backbone, probes: &[(Pair, Sample, Tensor)]) -> Result<f64> {
    let errs = crate::par::map_range(probes.len(), |j| -> Result<f64> {
        let (pair, s, target) = &probes[j];
        let v = student.velocity(&s.x_a, &s.lq, s.tau_a, false, pair.grid())?;
        Ok(v.zip_map(target, |a, b| (a - b) * (a - b))?.mean())
    });
    Ok(mean(&errs.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Trains `student` for one `steps_from -> steps_to` stage against a frozen `teacher`.
#[allow(clippy::too_many_arguments)]
pub fn distill_stage(
    teacher: &Backbone,
    student: &mut Backbone,
    stream: &PairStream,
    stage: (usize, usize),
    stage_index: usize,
    iters: usize,
    cfg: &DistillConfig,
    log: &mut MetricsLog,
) -> Result<StageResult> {
    let (from, to) = stage;
    if to == 0 || from != 2 * to {
        return Err(invalid(format!("stage {from} -> {to} does not halve the step count")));
    }
    if teacher.config() != student.config() {
        return Err(Error::Checkpoint("teacher and student configurations differ".into()));
    }
    let scale = teacher_cfg_scale(from);

    let probe_stream = PairStream::new(cfg.stream.clone(), derive_seed(cfg.seed, 21, stage_index as u64))?;
    let mut probes = Vec::with_capacity(cfg.probe_size);
    let mut k = 0;
    while probes.len() < cfg.probe_size {
        for pair in probe_stream.batch(k)? {
            if probes.len() == cfg.probe_size {
                break;
            }
            let s = draw_sample(&pair, to, derive_seed(cfg.seed, 22, (stage_index * 100_000 + probes.len()) as u64))?;
            let field = Conditioned {
                model: teacher,
                lq: &s.lq,
                grid: pair.grid(),
            };
            let target = two_step_target(&field, &s.x_a, s.tau_a, s.tau_c, scale)?;
            probes.push((pair, s, target));
        }
        k += 1;
    }
    let probe_initial = probe_mse(student, &probes)?;
    log.log(stage_index * iters, &format!("probe_mse_initial_{from}_{to}"), probe_initial)?;

    let mut opt = AdamW::new(cfg.optim.clone(), student.params());
    let mut trace = Vec::with_capacity(iters);
    let mut max_rep: f64 = 0.0;
    for it in 0..iters {
        let global = stage_index * iters + it;
        let batch = stream.batch(global)?;
        let check = cfg.check_every > 0 && it % cfg.check_every == 0;
        let st = &*student;
        let (acc, aux) = sample_grads(st.params(), batch.len(), |i, tape, bound| {
            let pair = &batch[i];
            let s = draw_sample(pair, to, derive_seed(cfg.seed, 23, (global * batch.len() + i) as u64))?;
            let field = Conditioned {
                model: teacher,
                lq: &s.lq,
                grid: pair.grid(),
            };
            let (target, x_c) = two_step(&field, &s.x_a, s.tau_a, s.tau_c, scale)?;
            let rep = if check {
                let dt = s.tau_a - s.tau_c;
                let x1 = s.x_a.zip_map(&target, |a, v| a - dt * v)?;
                let scale = x_c.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                x1.max_abs_diff(&x_c) / scale
            } else {
                0.0
            };
            let target = tape.constant(target)?;
            let inp = ForwardInputs {
                latent: tape.constant(s.x_a)?,
                lq: tape.constant(s.lq)?,
                tau: s.tau_a,
                drop_cond: false,
                grid: pair.grid(),
            };
            let v = st.forward(tape, bound, &inp)?.velocity.expect("full forward");
            let loss = mse_loss(tape, v, target)?;
            Ok((loss, (tape.value(loss).item(), rep)))
        })
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step: global,
                detail: format!("stage {from}->{to}: non-finite value in {op}"),
            },
            e => e,
        })?;
        let l = mean(&aux.iter().map(|a| a.0).collect::<Vec<_>>());
        max_rep = aux.iter().fold(max_rep, |m, a| m.max(a.1));
        if !l.is_finite() {
            return Err(Error::Diverged {
                step: global,
                detail: format!("stage {from}->{to}: loss {l}"),
            });
        }
        opt.step(student.params_mut(), &acc.mean());
        trace.push(l);
        log.log(global, "distill_mse", l)?;
    }
    let probe_final = probe_mse(student, &probes)?;
    log.log(stage_index * iters + iters.saturating_sub(1), &format!("probe_mse_final_{from}_{to}"), probe_final)?;
    log.flush()?;
    Ok(StageResult {
        steps_from: from,
        steps_to: to,
        teacher_cfg: scale,
        trace,
        probe_initial,
        probe_final,
        max_reproduction_err: max_rep,
    })
}

/// Chains stages over the schedule; each stage's student teaches the next.
pub fn run_progressive(teacher: &Backbone, cfg: &DistillConfig, log: &mut MetricsLog) -> Result<(Backbone, Vec<StageResult>)> {
    cfg.schedule.validate()?;
    let stream = PairStream::new(cfg.stream.clone(), derive_seed(cfg.seed, 20, 0))?;
    let mut current_teacher = teacher.clone();
    let mut student = teacher.clone();
    let mut results = Vec::new();
    for (idx, stage) in cfg.schedule.stages().into_iter().enumerate() {
        let r = distill_stage(
            &current_teacher,
            &mut student,
            &stream,
            stage,
            idx,
            cfg.schedule.iters_per_stage,
            cfg,
            log,
        )?;
        results.push(r);
        current_teacher = student.clone();
    }
    Ok((student, results))
}
