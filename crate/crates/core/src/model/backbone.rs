//! Conditioned windowed transformer shared by generator, teacher and discriminator.
//!
//! Tokens are grid cells carrying the noisy latent concatenated with the
//! upsampled low-quality clip. A sinusoidal timestep embedding plus a learned
//! condition (or null) vector drives adaptive layer-norm modulation in every
//! block. Blocks are identity maps at initialization because their gates start
//! at zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{window_attention, AttentionContext, AttentionVars};
use super::rope::RopeConfig;
use crate::error::{invalid, Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::window::{GridShape, WindowCounts, WindowPolicy};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Channels of the noisy/clean latent.
    pub latent_channels: usize,
    /// Channels of the upsampled low-quality condition.
    pub cond_channels: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_blocks: usize,
    /// Depth fractions in (0, 1] whose blocks expose their outputs as taps.
    pub tap_fractions: Vec<f64>,
    pub rope_base: f64,
    pub windows: WindowPolicy,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            cond_channels: 3,
            model_dim: 64,
            num_heads: 4,
            mlp_ratio: 2,
            num_blocks: 6,
            tap_fractions: vec![16.0 / 36.0, 26.0 / 36.0, 1.0],
            rope_base: 10_000.0,
            windows: WindowPolicy::Adaptive {
                counts: WindowCounts::default(),
                train_hw: (16, 16),
            },
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(invalid(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(invalid("model_dim must be even for the timestep embedding"));
        }
        if self.num_blocks == 0 || self.mlp_ratio == 0 {
            return Err(invalid("num_blocks and mlp_ratio must be positive"));
        }
        if self.tap_fractions.is_empty()
            || self.tap_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(invalid(format!(
                "tap fractions must lie in (0, 1], got {:?}",
                self.tap_fractions
            )));
        }
        self.rope()?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        let mut r = RopeConfig::for_head_dim(self.head_dim())?;
        r.base_freq = self.rope_base;
        RopeConfig::new(r.head_dim, r.axis_split, r.base_freq)
    }

    /// 1-based block indices whose outputs are tapped: `ceil(fraction * num_blocks)`.
    pub fn tap_blocks(&self) -> Vec<usize> {
        self.tap_fractions
            .iter()
            .map(|f| ((f * self.num_blocks as f64 - 1e-9).ceil() as usize).clamp(1, self.num_blocks))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct BlockIds {
    modulation_w: ParamId,
    modulation_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayoutIds {
    embed_w: ParamId,
    embed_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    cond_embed: ParamId,
    null_embed: ParamId,
    blocks: Vec<BlockIds>,
    final_mod_w: ParamId,
    final_mod_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    skip_w: ParamId,
}

/// Conditioned windowed transformer.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    store: ParamStore,
    ids: LayoutIds,
}

/// Velocity prediction plus intermediate block outputs.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `[tokens, latent_channels]`; `None` when the forward stopped at the last tap.
    pub velocity: Option<Var>,
    /// `[tokens, model_dim]` per tap fraction.
    pub taps: Vec<Var>,
}

/// Inputs to one forward pass, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInputs {
    /// `[tokens, latent_channels]`
    pub latent: Var,
    /// `[tokens, cond_channels]`
    pub lq: Var,
    pub tau: f64,
    /// Use the null condition embedding (unconditional branch).
    pub drop_cond: bool,
    pub grid: GridShape,
}

fn linear_init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Sinusoidal embedding of `1000 * tau`.
pub fn timestep_features(tau: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let s = 1000.0 * tau;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v.push((s * f).cos());
    }
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v.push((s * f).sin());
    }
    Tensor::from_vec(v)
}

/// Per-block weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub modulation_w: Var,
    pub modulation_b: Var,
    pub attn: AttentionVars,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `ln(x) * (1 + scale) + shift`
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = tape.layer_norm(x, LN_EPS)?;
    let s = tape.add_scalar(scale, 1.0)?;
    let h = tape.mul(h, s)?;
    tape.add(h, shift)
}

/// One block: `x + g1 * attn(mod(ln x)) + g2 * mlp(mod(ln .))`.
///
/// `cond` is the `[model_dim]` conditioning vector (timestep + condition embedding).
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    cond: Var,
    p: &BlockVars,
    ctx: &AttentionContext,
    num_heads: usize,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let cs = tape.shape(cond).to_vec();
    if xs.len() != 2 || cs != [xs[1]] {
        return Err(Error::Shape {
            op: "transformer_block",
            lhs: xs,
            rhs: cs,
        });
    }
    let dim = xs[1];
    let act = tape.silu(cond)?;
    let act = tape.reshape(act, &[1, dim])?;
    let m = linear(tape, act, p.modulation_w, p.modulation_b)?;
    let m = tape.reshape(m, &[6 * dim])?;
    let mut chunk = |i: usize| tape.narrow(m, 0, i * dim, dim);
    let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
    let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);

    let h = modulate(tape, x, shift1, scale1)?;
    let a = window_attention(tape, h, &p.attn, ctx, num_heads)?;
    let a = tape.mul(a, gate1)?;
    let x = tape.add(x, a)?;

    let h = modulate(tape, x, shift2, scale2)?;
    let h = linear(tape, h, p.fc1_w, p.fc1_b)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, p.fc2_w, p.fc2_b)?;
    let h = tape.mul(h, gate2)?;
    tape.add(x, h)
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let cin = cfg.latent_channels + cfg.cond_channels;
        let hidden = d * cfg.mlp_ratio;
        let mut s = ParamStore::new();
        let embed_w = s.add("embed.w", linear_init(rng, cin, d));
        let embed_b = s.add("embed.b", Tensor::zeros(&[d]));
        let time_w1 = s.add("time.w1", linear_init(rng, d, d));
        let time_b1 = s.add("time.b1", Tensor::zeros(&[d]));
        let time_w2 = s.add("time.w2", linear_init(rng, d, d));
        let time_b2 = s.add("time.b2", Tensor::zeros(&[d]));
        let cond_embed = s.add("cond.embed", Tensor::randn(&[d], 0.02, rng));
        let null_embed = s.add("cond.null", Tensor::randn(&[d], 0.02, rng));
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let p = |n: &str| format!("block{b}.{n}");
            blocks.push(BlockIds {
                modulation_w: s.add(p("mod.w"), Tensor::zeros(&[d, 6 * d])),
                modulation_b: s.add(p("mod.b"), Tensor::zeros(&[6 * d])),
                qkv_w: s.add(p("qkv.w"), linear_init(rng, d, 3 * d)),
                qkv_b: s.add(p("qkv.b"), Tensor::zeros(&[3 * d])),
                proj_w: s.add(p("proj.w"), linear_init(rng, d, d)),
                proj_b: s.add(p("proj.b"), Tensor::zeros(&[d])),
                fc1_w: s.add(p("fc1.w"), linear_init(rng, d, hidden)),
                fc1_b: s.add(p("fc1.b"), Tensor::zeros(&[hidden])),
                fc2_w: s.add(p("fc2.w"), linear_init(rng, hidden, d)),
                fc2_b: s.add(p("fc2.b"), Tensor::zeros(&[d])),
            });
        }
        let final_mod_w = s.add("final.mod.w", Tensor::zeros(&[d, 2 * d]));
        let final_mod_b = s.add("final.mod.b", Tensor::zeros(&[2 * d]));
        let out_w = s.add("out.w", Tensor::zeros(&[d, cfg.latent_channels]));
        let out_b = s.add("out.b", Tensor::zeros(&[cfg.latent_channels]));
        let skip_w = s.add("skip.w", Tensor::zeros(&[cin, cfg.latent_channels]));
        Ok(Self {
            ids: LayoutIds {
                embed_w,
                embed_b,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                cond_embed,
                null_embed,
                blocks,
                final_mod_w,
                final_mod_b,
                out_w,
                out_b,
                skip_w,
            },
            cfg,
            store: s,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces the window policy (parameters are unaffected).
    pub fn set_window_policy(&mut self, policy: WindowPolicy) {
        self.cfg.windows = policy;
    }

    /// Adds Gaussian noise of `std` to every parameter, including the zero-initialized ones.
    pub fn jitter<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let cur = self.store.get(id);
            let noise = Tensor::randn(cur.shape(), std, rng);
            let next = cur.zip_map(&noise, |a, b| a + b).expect("same shape");
            self.store.set(id, next).expect("same shape");
        }
    }

    /// Sets the input→output skip so that the velocity equals `latent - lq`
    /// (requires equal channel counts). With zero blocks output, a generator
    /// evaluated as `eps - v` then reproduces the low-quality condition.
    pub fn set_copy_condition_skip(&mut self) -> Result<()> {
        let c = self.cfg.latent_channels;
        if self.cfg.cond_channels != c {
            return Err(invalid("copy skip needs latent_channels == cond_channels"));
        }
        let mut w = vec![0.0; 2 * c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
            w[(c + i) * c + i] = -1.0;
        }
        self.store.set(self.ids.skip_w, Tensor::new(&[2 * c, c], w)?)?;
        self.store.set(self.ids.out_w, Tensor::zeros(&[self.cfg.model_dim, c]))?;
        self.store.set(self.ids.out_b, Tensor::zeros(&[c]))
    }

    pub fn attention_context(&self, grid: GridShape) -> Result<AttentionContext> {
        let layout = self.cfg.windows.layout(grid)?;
        Ok(AttentionContext::new(layout, &self.cfg.rope()?))
    }

    fn block_vars(&self, bound: &Bound, i: usize) -> BlockVars {
        let b = &self.ids.blocks[i];
        BlockVars {
            modulation_w: bound[b.modulation_w],
            modulation_b: bound[b.modulation_b],
            attn: AttentionVars {
                qkv_w: bound[b.qkv_w],
                qkv_b: bound[b.qkv_b],
                proj_w: bound[b.proj_w],
                proj_b: bound[b.proj_b],
            },
            fc1_w: bound[b.fc1_w],
            fc1_b: bound[b.fc1_b],
            fc2_w: bound[b.fc2_w],
            fc2_b: bound[b.fc2_b],
        }
    }

    /// Conditioning vector `[model_dim]` for a timestep and condition flag.
    pub fn conditioning(&self, tape: &mut Tape, bound: &Bound, tau: f64, drop_cond: bool) -> Result<Var> {
        let d = self.cfg.model_dim;
        let feats = tape.constant(timestep_features(tau, d).reshape(&[1, d])?)?;
        let h = linear(tape, feats, bound[self.ids.time_w1], bound[self.ids.time_b1])?;
        let h = tape.silu(h)?;
        let h = linear(tape, h, bound[self.ids.time_w2], bound[self.ids.time_b2])?;
        let h = tape.reshape(h, &[d])?;
        let c = if drop_cond {
            bound[self.ids.null_embed]
        } else {
            bound[self.ids.cond_embed]
        };
        tape.add(h, c)
    }

    /// Full forward pass.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inp: &ForwardInputs) -> Result<BackboneOutput> {
        self.run(tape, bound, inp, true, None)
    }

    /// Forward pass that stops after the deepest tap block.
    pub fn forward_taps(&self, tape: &mut Tape, bound: &Bound, inp: &ForwardInputs) -> Result<Vec<Var>> {
        Ok(self.run(tape, bound, inp, false, None)?.taps)
    }

    /// Forward pass reusing a precomputed attention context.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inp: &ForwardInputs,
        ctx: &AttentionContext,
        velocity: bool,
    ) -> Result<BackboneOutput> {
        self.run(tape, bound, inp, velocity, Some(ctx))
    }

    fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inp: &ForwardInputs,
        velocity: bool,
        ctx: Option<&AttentionContext>,
    ) -> Result<BackboneOutput> {
        let n = inp.grid.volume();
        let ls = tape.shape(inp.latent).to_vec();
        let cs = tape.shape(inp.lq).to_vec();
        if ls != [n, self.cfg.latent_channels] || cs != [n, self.cfg.cond_channels] {
            return Err(Error::Shape {
                op: "backbone_forward",
                lhs: ls,
                rhs: cs,
            });
        }
        let owned;
        let ctx = match ctx {
            Some(c) => c,
            None => {
                owned = self.attention_context(inp.grid)?;
                &owned
            }
        };
        if ctx.layout.grid != inp.grid {
            return Err(invalid("attention context built for a different grid"));
        }
        let cond = self.conditioning(tape, bound, inp.tau, inp.drop_cond)?;
        let input = tape.concat(&[inp.latent, inp.lq], 1)?;
        let mut x = linear(tape, input, bound[self.ids.embed_w], bound[self.ids.embed_b])?;

        let tap_blocks = self.cfg.tap_blocks();
        let last = if velocity {
            self.cfg.num_blocks
        } else {
            *tap_blocks.iter().max().unwrap()
        };
        let mut outputs = Vec::with_capacity(last);
        for i in 0..last {
            let p = self.block_vars(bound, i);
            x = transformer_block(tape, x, cond, &p, ctx, self.cfg.num_heads)?;
            outputs.push(x);
        }
        let taps = tap_blocks.iter().map(|&b| outputs[b - 1]).collect();
        if !velocity {
            return Ok(BackboneOutput { velocity: None, taps });
        }

        let d = self.cfg.model_dim;
        let act = tape.silu(cond)?;
        let act = tape.reshape(act, &[1, d])?;
        let m = linear(tape, act, bound[self.ids.final_mod_w], bound[self.ids.final_mod_b])?;
        let m = tape.reshape(m, &[2 * d])?;
        let shift = tape.narrow(m, 0, 0, d)?;
        let scale = tape.narrow(m, 0, d, d)?;
        let h = modulate(tape, x, shift, scale)?;
        let v = linear(tape, h, bound[self.ids.out_w], bound[self.ids.out_b])?;
        let skip = tape.matmul(input, bound[self.ids.skip_w])?;
        let v = tape.add(v, skip)?;
        Ok(BackboneOutput {
            velocity: Some(v),
            taps,
        })
    }

    /// Inference helper: velocity for concrete tensors, no gradients.
    pub fn velocity(
        &self,
        latent: &Tensor,
        lq: &Tensor,
        tau: f64,
        drop_cond: bool,
        grid: GridShape,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false)?;
        let inp = ForwardInputs {
            latent: tape.constant(latent.clone())?,
            lq: tape.constant(lq.clone())?,
            tau,
            drop_cond,
            grid,
        };
        let out = self.forward(&mut tape, &bound, &inp)?;
        Ok(tape.value(out.velocity.expect("full forward")).clone())
    }
}
