//! Adversarial post-training of the one-step generator.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{curriculum_frames, derive_seed, held_out_set, validate_curriculum, DegradationParams, Pair, PairStream, StreamConfig};
use crate::error::{invalid, Error, Result};
use crate::flow::SamplerConfig;
use crate::losses::{
    approx_r_from, feature_matching, gan_d_loss, gan_g_loss, l1_loss, perturbation, relative_sigma, GanLoss, LossWeights,
};
use crate::model::{
    load_backbone, save_backbone, AttentionContext, Backbone, CheckpointKind, ForwardInputs, Manifest,
};
use crate::numerics::{AdamW, AdamWConfig, Bound, ParamId, Tape, Tensor, Var};
use crate::restore::{evaluate, EvalSummary};
use crate::train::{mean, sample_grads, MetricsLog};
use crate::window::GridShape;

/// One-step generator: `x0_hat = eps - v(eps, tau = 1, LQ)`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub model: Backbone,
}

impl Generator {
    pub fn new(model: Backbone) -> Self {
        Self { model }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, eps: Var, lq: Var, grid: GridShape, ctx: &AttentionContext) -> Result<Var> {
        let inp = ForwardInputs {
            latent: eps,
            lq,
            tau: 1.0,
            drop_cond: false,
            grid,
        };
        let v = self.model.forward_with(tape, bound, &inp, ctx, true)?.velocity.expect("full forward");
        tape.sub(eps, v)
    }

    pub fn generate(&self, eps: &Tensor, lq: &Tensor, grid: GridShape) -> Result<Tensor> {
        let v = self.model.velocity(eps, lq, 1.0, false, grid)?;
        eps.zip_map(&v, |e, v| e - v)
    }
}

/// Backbone evaluated at `tau = 0` with a mean-pool + linear logit head per tap.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub model: Backbone,
    heads: Vec<(ParamId, ParamId)>,
}

/// Logit and tap features of one discriminator evaluation.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// Shape `[1]`.
    pub logit: Var,
    pub taps: Vec<Var>,
}

impl Discriminator {
    /// Attaches freshly initialized heads to `model` (or reuses heads already in its store).
    pub fn from_backbone<R: Rng + ?Sized>(mut model: Backbone, rng: &mut R) -> Self {
        let d = model.config().model_dim;
        let n = model.config().tap_fractions.len();
        let std = 1.0 / (d as f64).sqrt();
        let heads = (0..n)
            .map(|k| {
                let (wn, bn) = (format!("head{k}.w"), format!("head{k}.b"));
                let store = model.params_mut();
                let w = store.id(&wn).unwrap_or_else(|| store.add(wn, Tensor::randn(&[d, 1], std, rng)));
                let b = store.id(&bn).unwrap_or_else(|| store.add(bn, Tensor::zeros(&[1])));
                (w, b)
            })
            .collect();
        Self { model, heads }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, lq: Var, grid: GridShape, ctx: &AttentionContext) -> Result<DiscOutput> {
        let inp = ForwardInputs {
            latent: x,
            lq,
            tau: 0.0,
            drop_cond: false,
            grid,
        };
        let taps = self.model.forward_with(tape, bound, &inp, ctx, false)?.taps;
        let d = self.model.config().model_dim;
        let mut logit: Option<Var> = None;
        for (&tap, &(w, b)) in taps.iter().zip(&self.heads) {
            let pooled = tape.mean_axis(tap, 0)?;
            let pooled = tape.reshape(pooled, &[1, d])?;
            let s = tape.matmul(pooled, bound[w])?;
            let s = tape.reshape(s, &[1])?;
            let s = tape.add(s, bound[b])?;
            logit = Some(match logit {
                Some(l) => tape.add(l, s)?,
                None => s,
            });
        }
        Ok(DiscOutput {
            logit: logit.expect("at least one tap"),
            taps,
        })
    }

    pub fn save(&self, dir: &Path, step: usize) -> Result<()> {
        save_backbone(
            &self.model,
            dir,
            &Manifest {
                config: self.model.config().clone(),
                step,
                stage: "apt".into(),
                kind: CheckpointKind::Discriminator,
                sampling_steps: None,
            },
        )
    }

    /// Loads a discriminator checkpoint, or a plain backbone checkpoint with new heads.
    pub fn load(dir: &Path, seed: u64) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let (model, _) = load_backbone(dir)?;
        let mut d = Self::from_backbone(model, &mut ChaCha8Rng::seed_from_u64(seed));
        if manifest.kind == CheckpointKind::Discriminator {
            d.model.params_mut().load_into(dir)?;
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub gan_loss: GanLoss,
    /// `(start_iter, clip_frames)`, starting at `(0, 1)`.
    pub curriculum: Vec<(usize, usize)>,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    /// Held-out evaluation every this many iterations (0 disables).
    pub eval_every: usize,
    pub eval_clips: usize,
    pub eval_hw: (usize, usize),
    /// Checkpoint every this many iterations when an output directory is given (0: only at the end).
    pub checkpoint_every: usize,
    pub aspects: Vec<(usize, usize)>,
    pub degradation: DegradationParams,
    pub g_optim: AdamWConfig,
    pub d_optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            gan_loss: GanLoss::Rpgan,
            curriculum: vec![(0, 1)],
            batch: 2,
            iters: 1000,
            seed: 0,
            eval_every: 100,
            eval_clips: 8,
            eval_hw: (16, 16),
            checkpoint_every: 0,
            aspects: vec![(16, 16), (8, 32), (32, 8)],
            degradation: DegradationParams::default(),
            g_optim: AdamWConfig::default(),
            d_optim: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        validate_curriculum(&self.curriculum)?;
        if self.batch == 0 || self.aspects.is_empty() {
            return Err(invalid("batch and aspects must be non-empty"));
        }
        Ok(())
    }

    pub fn stream(&self) -> StreamConfig {
        StreamConfig {
            aspects: self.aspects.clone(),
            curriculum: self.curriculum.clone(),
            batch: self.batch,
            degradation: self.degradation.clone(),
        }
    }

    fn uses_discriminator(&self) -> bool {
        self.weights.fm > 0.0 || self.weights.gan > 0.0
    }
}

/// Weighted generator loss terms, batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GStepReport {
    pub l1: f64,
    pub fm: f64,
    pub gan: f64,
    pub total: f64,
}

/// Weighted discriminator loss terms, batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DStepReport {
    pub gan: f64,
    pub r1: f64,
    pub r2: f64,
    pub total: f64,
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Option<Var>)]) -> Result<(Var, Vec<f64>)> {
    let mut total: Option<Var> = None;
    let mut values = Vec::with_capacity(terms.len());
    for &(w, v) in terms {
        match v {
            Some(v) if w != 0.0 => {
                let s = tape.scale(v, w)?;
                values.push(tape.value(s).item());
                total = Some(match total {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            _ => values.push(0.0),
        }
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0))?,
    };
    Ok((total, values))
}

fn diverged(step: usize, what: &str, e: Error, last_good: Option<&Path>) -> Error {
    let pointer = last_good.map_or_else(|| "no checkpoint written yet".to_string(), |p| format!("last good checkpoint {}", p.display()));
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("{what}: non-finite value in {op}; {pointer}"),
        },
        e => e,
    }
}

/// One generator update against a frozen discriminator.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    batch: &[Pair],
    g: &mut Generator,
    g_opt: &mut AdamW,
    d: &Discriminator,
    w: &LossWeights,
    kind: GanLoss,
    seed: u64,
) -> Result<GStepReport> {
    let use_d = w.fm > 0.0 || w.gan > 0.0;
    let gen = &*g;
    let (acc, parts) = sample_grads(gen.model.params(), batch.len(), |i, tape, bound| {
        let pair = &batch[i];
        let grid = pair.grid();
        let ctx = gen.model.attention_context(grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 31, i as u64));
        let hq = pair.hq.to_latent();
        let eps = tape.constant(Tensor::randn(hq.shape(), 1.0, &mut rng))?;
        let lq = tape.constant(pair.lq_latent())?;
        let hq = tape.constant(hq)?;
        let fake = gen.forward(tape, bound, eps, lq, grid, &ctx)?;
        let l1 = Some(l1_loss(tape, fake, hq)?);
        let (fm, gan) = if use_d {
            let dbound = d.model.params().bind(tape, false)?;
            let f = d.forward(tape, &dbound, fake, lq, grid, &ctx)?;
            let r = d.forward(tape, &dbound, hq, lq, grid, &ctx)?;
            let fm = if w.fm > 0.0 { Some(feature_matching(tape, &f.taps, &r.taps)?) } else { None };
            let gan = if w.gan > 0.0 { Some(gan_g_loss(kind, tape, r.logit, f.logit)?) } else { None };
            (fm, gan)
        } else {
            (None, None)
        };
        let (total, v) = weighted_sum(tape, &[(w.l1, l1), (w.fm, fm), (w.gan, gan)])?;
        let t = tape.value(total).item();
        Ok((total, [v[0], v[1], v[2], t]))
    })?;
    if w.l1 != 0.0 || use_d {
        g_opt.step(g.model.params_mut(), &acc.mean());
    }
    let col = |k: usize| mean(&parts.iter().map(|p| p[k]).collect::<Vec<_>>());
    Ok(GStepReport {
        l1: col(0),
        fm: col(1),
        gan: col(2),
        total: col(3),
    })
}

/// One discriminator update against a frozen generator.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    batch: &[Pair],
    g: &Generator,
    d: &mut Discriminator,
    d_opt: &mut AdamW,
    w: &LossWeights,
    kind: GanLoss,
    seed: u64,
) -> Result<DStepReport> {
    let fakes = crate::par::map_range(batch.len(), |i| {
        let pair = &batch[i];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 32, i as u64));
        let eps = Tensor::randn(&[pair.grid().volume(), g.model.config().latent_channels], 1.0, &mut rng);
        g.generate(&eps, &pair.lq_latent(), pair.grid())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let reals: Vec<Tensor> = batch.iter().map(|p| p.hq.to_latent()).collect();
    let pooled = |xs: &[Tensor]| Tensor::from_vec(xs.iter().flat_map(|x| x.data().iter().copied()).collect());
    let sigma_r = relative_sigma(&pooled(&reals), w.sigma_rel).max(1e-12);
    let sigma_f = relative_sigma(&pooled(&fakes), w.sigma_rel).max(1e-12);

    let disc = &*d;
    let (acc, parts) = sample_grads(disc.model.params(), batch.len(), |i, tape, bound| {
        let pair = &batch[i];
        let grid = pair.grid();
        let ctx = disc.model.attention_context(grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 33, i as u64));
        let lq = tape.constant(pair.lq_latent())?;
        let real = tape.constant(reals[i].clone())?;
        let fake = tape.constant(fakes[i].clone())?;
        let r = disc.forward(tape, bound, real, lq, grid, &ctx)?;
        let f = disc.forward(tape, bound, fake, lq, grid, &ctx)?;
        let gan = Some(gan_d_loss(kind, tape, r.logit, f.logit)?);
        let mut logit = |tape: &mut Tape, x: Var| disc.forward(tape, bound, x, lq, grid, &ctx).map(|o| o.logit);
        let n1 = perturbation(reals[i].shape(), &mut rng);
        let n2 = perturbation(fakes[i].shape(), &mut rng);
        let r1 = if w.r1 > 0.0 { Some(approx_r_from(tape, r.logit, &mut logit, real, sigma_r, &n1)?) } else { None };
        let r2 = if w.r2 > 0.0 { Some(approx_r_from(tape, f.logit, &mut logit, fake, sigma_f, &n2)?) } else { None };
        let (total, v) = weighted_sum(tape, &[(w.gan_d, gan), (w.r1, r1), (w.r2, r2)])?;
        let t = tape.value(total).item();
        Ok((total, [v[0], v[1], v[2], t]))
    })?;
    d_opt.step(d.model.params_mut(), &acc.mean());
    let col = |k: usize| mean(&parts.iter().map(|p| p[k]).collect::<Vec<_>>());
    Ok(DStepReport {
        gan: col(0),
        r1: col(1),
        r2: col(2),
        total: col(3),
    })
}

/// Result of a training run.
#[derive(Debug)]
pub struct AptOutcome {
    pub generator: Generator,
    pub discriminator: Discriminator,
    /// `(iteration, summary)` for every evaluation, including iteration 0.
    pub evals: Vec<(usize, EvalSummary)>,
}

/// One-step evaluation sampler with a fixed seed.
pub fn eval_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps: 1,
        cfg_scale: 1.0,
        seed: derive_seed(seed, 35, 0),
    }
}

/// Held-out pairs used by [`train_apt`]'s evaluations.
pub fn eval_set(cfg: &TrainConfig) -> Result<Vec<Pair>> {
    held_out_set(derive_seed(cfg.seed, 34, 0), cfg.eval_clips, 1, cfg.eval_hw, &cfg.degradation)
}

fn log_eval(log: &mut MetricsLog, it: usize, e: &EvalSummary) -> Result<()> {
    log.log(it, "eval_psnr", e.psnr)?;
    if let Some(s) = e.ssim {
        log.log(it, "eval_ssim", s)?;
    }
    log.log(it, "eval_l1", e.l1)
}

/// Alternates discriminator and generator updates 1:1 under the frame curriculum.
pub fn train_apt(
    cfg: &TrainConfig,
    g_init: Backbone,
    d_init: Backbone,
    out: Option<&Path>,
    log: &mut MetricsLog,
) -> Result<AptOutcome> {
    cfg.validate()?;
    if g_init.config().model_dim != d_init.config().model_dim || g_init.config().windows != d_init.config().windows {
        return Err(Error::Checkpoint("generator and discriminator backbones are incompatible".into()));
    }
    let mut g = Generator::new(g_init);
    let mut d = Discriminator::from_backbone(d_init, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 30, 0)));
    let mut g_opt = AdamW::new(cfg.g_optim.clone(), g.model.params());
    let mut d_opt = AdamW::new(cfg.d_optim.clone(), d.model.params());
    let stream = PairStream::new(cfg.stream(), derive_seed(cfg.seed, 36, 0))?;
    let evalset = if cfg.eval_every > 0 { eval_set(cfg)? } else { Vec::new() };
    let sampler = eval_sampler(cfg.seed);
    let mut evals = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    let save = |g: &Generator, d: &Discriminator, dir: &Path, step: usize| -> Result<()> {
        save_backbone(
            &g.model,
            &dir.join("generator"),
            &Manifest {
                config: g.model.config().clone(),
                step,
                stage: "apt".into(),
                kind: CheckpointKind::Generator,
                sampling_steps: Some(1),
            },
        )?;
        d.save(&dir.join("discriminator"), step)
    };

    if !evalset.is_empty() {
        let e = evaluate(&g.model, &evalset, &sampler)?;
        log_eval(log, 0, &e)?;
        evals.push((0, e));
    }
    for it in 0..cfg.iters {
        let batch = stream.batch(it)?;
        let step_seed = derive_seed(cfg.seed, 37, it as u64);
        log.log(it, "frames", curriculum_frames(&cfg.curriculum, it) as f64)?;
        if cfg.uses_discriminator() {
            let dr = discriminator_step(&batch, &g, &mut d, &mut d_opt, &cfg.weights, cfg.gan_loss, step_seed)
                .map_err(|e| diverged(it, "discriminator step", e, last_good.as_deref()))?;
            for (name, v) in [("d_gan", dr.gan), ("d_r1", dr.r1), ("d_r2", dr.r2), ("d_total", dr.total)] {
                log.log(it, name, v)?;
            }
        }
        let gr = generator_step(&batch, &mut g, &mut g_opt, &d, &cfg.weights, cfg.gan_loss, step_seed)
            .map_err(|e| diverged(it, "generator step", e, last_good.as_deref()))?;
        for (name, v) in [("g_l1", gr.l1), ("g_fm", gr.fm), ("g_gan", gr.gan), ("g_total", gr.total)] {
            log.log(it, name, v)?;
        }
        let done = it + 1;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.iters) && !evalset.is_empty() {
            let e = evaluate(&g.model, &evalset, &sampler)?;
            log_eval(log, done, &e)?;
            evals.push((done, e));
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                let p = dir.join(format!("step{done:06}"));
                save(&g, &d, &p, done)?;
                last_good = Some(p);
            }
        }
        log.flush()?;
    }
    if let Some(dir) = out {
        save(&g, &d, dir, cfg.iters)?;
    }
    Ok(AptOutcome {
        generator: g,
        discriminator: d,
        evals,
    })
}
