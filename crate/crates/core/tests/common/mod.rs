#![allow(dead_code)]
//! Oracles and fixtures shared by the module tests and the acceptance target.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use windvr::apt::Discriminator;
use windvr::losses::*;
use windvr::model::*;
use windvr::numerics::*;
use windvr::window::*;
use windvr::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random inputs of at most 64 elements for every op; each closure maps the
/// tracked inputs to a scalar.
pub type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var>);

pub fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    // Fixed non-uniform weights keep invariant sums (softmax, layer norm) informative.
    let w = Tensor::from_fn(tape.shape(y), |i| 0.3 + ((i * 7) % 11) as f64 / 5.0);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("add_broadcast", vec![vec![2, 3, 4], vec![4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("sub", vec![vec![5], vec![2, 5]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("mul", vec![vec![2, 6], vec![6]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("scale", vec![vec![7]], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y)
        }),
        ("add_scalar", vec![vec![7]], |t, v| {
            let y = t.add_scalar(v[0], 0.4)?;
            weighted_sum(t, y)
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 3]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("matmul_shared", vec![vec![2, 3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
        ("reshape", vec![vec![2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y)
        }),
        ("transpose", vec![vec![3, 5]], |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y)
        }),
        ("permute", vec![vec![2, 3, 4]], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            weighted_sum(t, y)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted_sum(t, y)
        }),
        ("narrow", vec![vec![3, 5]], |t, v| {
            let y = t.narrow(v[0], 1, 1, 3)?;
            weighted_sum(t, y)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, v| {
            let y = t.gather_rows(v[0], Arc::new(vec![2, 0, 2, 3]))?;
            weighted_sum(t, y)
        }),
        ("softmax", vec![vec![3, 5]], |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y)
        }),
        ("mean", vec![vec![9]], |t, v| {
            let y = t.square(v[0])?;
            t.mean(y)
        }),
        ("sum_axis", vec![vec![2, 3, 4]], |t, v| {
            let y = t.sum_axis(v[0], 1)?;
            weighted_sum(t, y)
        }),
        ("mean_axis", vec![vec![2, 3, 4]], |t, v| {
            let y = t.mean_axis(v[0], 2)?;
            weighted_sum(t, y)
        }),
        ("layer_norm", vec![vec![3, 6]], |t, v| {
            let y = t.layer_norm(v[0], 1e-5)?;
            weighted_sum(t, y)
        }),
        ("gelu", vec![vec![10]], |t, v| {
            let y = t.gelu(v[0])?;
            weighted_sum(t, y)
        }),
        ("silu", vec![vec![10]], |t, v| {
            let y = t.silu(v[0])?;
            weighted_sum(t, y)
        }),
        ("sigmoid", vec![vec![10]], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y)
        }),
        ("softplus", vec![vec![10]], |t, v| {
            let y = t.softplus(v[0])?;
            weighted_sum(t, y)
        }),
        ("abs", vec![vec![10]], |t, v| {
            let y = t.abs(v[0])?;
            weighted_sum(t, y)
        }),
        ("square", vec![vec![10]], |t, v| {
            let y = t.square(v[0])?;
            weighted_sum(t, y)
        }),
        ("sqrt", vec![vec![10]], |t, v| {
            // Inputs are shifted away from zero where sqrt is not differentiable.
            let s = t.square(v[0])?;
            let s = t.add_scalar(s, 0.5)?;
            let y = t.sqrt(s)?;
            weighted_sum(t, y)
        }),
        ("neg", vec![vec![4]], |t, v| {
            let y = t.neg(v[0])?;
            weighted_sum(t, y)
        }),
        ("rotate_pairs", vec![vec![3, 2, 4]], |t, v| {
            let rot = PairRotation {
                tokens: 3,
                pairs: 2,
                cos: (0..6).map(|i| (0.3 * i as f64).cos()).collect(),
                sin: (0..6).map(|i| (0.3 * i as f64).sin()).collect(),
            };
            let y = t.rotate_pairs(v[0], Arc::new(rot))?;
            weighted_sum(t, y)
        }),
    ]
}

/// Keeps abs and its relatives away from their kinks so central differences are valid.
pub fn away_from_kinks(x: Tensor) -> Tensor {
    x.map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v })
}

/// Every token covered once, starts on multiples of the size, and only the
/// last window on an axis shorter than nominal.
pub fn check_layout(layout: &WindowLayout) -> std::result::Result<(), String> {
    let grid = layout.grid;
    let size = layout.size.dims();
    let dims = grid.dims();
    let mut hits = vec![0u8; grid.volume()];
    for win in &layout.windows {
        for a in 0..3 {
            if win.start[a] % size[a] != 0 {
                return Err(format!("start {:?} not aligned to {:?}", win.start, size));
            }
            let last = win.start[a] + size[a] >= dims[a];
            let want = if last { dims[a] - win.start[a] } else { size[a] };
            if win.extent[a] != want {
                return Err(format!("window {win:?} has wrong extent on axis {a}"));
            }
        }
        for t in 0..win.extent[0] {
            for h in 0..win.extent[1] {
                for w in 0..win.extent[2] {
                    hits[grid.index([win.start[0] + t, win.start[1] + h, win.start[2] + w])] += 1;
                }
            }
        }
    }
    if let Some(i) = hits.iter().position(|&n| n != 1) {
        return Err(format!("token {:?} covered {} times", grid.coords(i), hits[i]));
    }
    let maps = index_maps(layout);
    for (tok, &(wi, slot)) in maps.forward.iter().enumerate() {
        if maps.inverse[wi][slot] != tok || !layout.windows[wi].contains(grid.coords(tok)) {
            return Err(format!("token {tok} does not round-trip"));
        }
    }
    for (wi, slots) in maps.inverse.iter().enumerate() {
        if slots.windows(2).any(|p| p[0] >= p[1]) {
            return Err(format!("window {wi} slots are not in row-major order"));
        }
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Rotary embedding written out from the band/frequency definition.
pub fn rope_oracle(v: &[f64], pos: [usize; 3], cfg: &RopeConfig) -> Vec<f64> {
    let (bt, bh, bw) = cfg.axis_split;
    let mut out = v.to_vec();
    let mut off = 0;
    for (axis, width) in [(0, bt), (1, bh), (2, bw)] {
        for (i, f) in cfg.band_frequencies(width).into_iter().enumerate() {
            let angle = pos[axis] as f64 * f;
            let (c, s) = (angle.cos(), angle.sin());
            let (a, b) = (v[off + 2 * i], v[off + 2 * i + 1]);
            out[off + 2 * i] = a * c - b * s;
            out[off + 2 * i + 1] = a * s + b * c;
        }
        off += width;
    }
    out
}

pub struct Weights {
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl Weights {
    pub fn random(dim: usize, r: &mut ChaCha8Rng) -> Self {
        Self {
            qkv_w: Tensor::randn(&[dim, 3 * dim], 0.4, r),
            qkv_b: Tensor::randn(&[3 * dim], 0.1, r),
            proj_w: Tensor::randn(&[dim, dim], 0.4, r),
            proj_b: Tensor::randn(&[dim], 0.1, r),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            qkv_w: tape.constant(self.qkv_w.clone()).unwrap(),
            qkv_b: tape.constant(self.qkv_b.clone()).unwrap(),
            proj_w: tape.constant(self.proj_w.clone()).unwrap(),
            proj_b: tape.constant(self.proj_b.clone()).unwrap(),
        }
    }
}

/// `x · w + b` for one row, dot products accumulated left to right.
pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = b.len();
    (0..cols)
        .map(|j| {
            let col: Vec<f64> = (0..x.len()).map(|p| w.data()[p * cols + j]).collect();
            dot(x, &col) + b.data()[j]
        })
        .collect()
}

/// Dense softmax attention inside each window, computed token by token.
pub fn windowed_oracle(x: &Tensor, g: GridShape, windows: &[Window], wts: &Weights, heads: usize, rope: &RopeConfig) -> Vec<f64> {
    let dim = x.shape()[1];
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let rows: Vec<&[f64]> = x.data().chunks(dim).collect();
    let qkv: Vec<Vec<f64>> = rows.iter().map(|r| affine(r, &wts.qkv_w, &wts.qkv_b)).collect();
    let mut merged = vec![vec![0.0; dim]; g.volume()];
    for win in windows {
        let toks: Vec<usize> = (0..g.volume()).filter(|&i| win.contains(g.coords(i))).collect();
        for h in 0..heads {
            let q: Vec<Vec<f64>> = toks
                .iter()
                .map(|&i| rope_oracle(&qkv[i][h * hd..(h + 1) * hd], g.coords(i), rope))
                .collect();
            let k: Vec<Vec<f64>> = toks
                .iter()
                .map(|&i| rope_oracle(&qkv[i][dim + h * hd..dim + (h + 1) * hd], g.coords(i), rope))
                .collect();
            let v: Vec<&[f64]> = toks.iter().map(|&i| &qkv[i][2 * dim + h * hd..2 * dim + (h + 1) * hd]).collect();
            for (a, &ti) in toks.iter().enumerate() {
                let scores: Vec<f64> = k.iter().map(|kb| dot(&q[a], kb) * scale).collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let mut z = 0.0;
                for p in &e {
                    z += p;
                }
                let attn: Vec<f64> = e.iter().map(|p| p / z).collect();
                for d in 0..hd {
                    let col: Vec<f64> = v.iter().map(|row| row[d]).collect();
                    merged[ti][h * hd + d] = dot(&attn, &col);
                }
            }
        }
    }
    merged.iter().flat_map(|m| affine(m, &wts.proj_w, &wts.proj_b)).collect()
}

pub fn run_attention(x: &Tensor, layout: WindowLayout, wts: &Weights, heads: usize, rope: &RopeConfig) -> Tensor {
    let ctx = AttentionContext::new(layout, rope);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let vars = wts.bind(&mut tape);
    let y = window_attention(&mut tape, xv, &vars, &ctx, heads).unwrap();
    tape.value(y).clone()
}

/// One block's parameters as plain tensors, in `BlockVars` field order.
pub fn block_tensors(dim: usize, mlp: usize, r: &mut ChaCha8Rng, gate_std: f64) -> Vec<Tensor> {
    vec![
        Tensor::randn(&[dim, 6 * dim], gate_std, r),
        Tensor::randn(&[6 * dim], gate_std, r),
        Tensor::randn(&[dim, 3 * dim], 0.4, r),
        Tensor::randn(&[3 * dim], 0.1, r),
        Tensor::randn(&[dim, dim], 0.4, r),
        Tensor::randn(&[dim], 0.1, r),
        Tensor::randn(&[dim, mlp * dim], 0.4, r),
        Tensor::randn(&[mlp * dim], 0.1, r),
        Tensor::randn(&[mlp * dim, dim], 0.4, r),
        Tensor::randn(&[dim], 0.1, r),
    ]
}

pub fn block_vars(v: &[Var]) -> BlockVars {
    BlockVars {
        modulation_w: v[0],
        modulation_b: v[1],
        attn: AttentionVars {
            qkv_w: v[2],
            qkv_b: v[3],
            proj_w: v[4],
            proj_b: v[5],
        },
        fc1_w: v[6],
        fc1_b: v[7],
        fc2_w: v[8],
        fc2_b: v[9],
    }
}

pub fn small_config(blocks: usize) -> BackboneConfig {
    BackboneConfig {
        model_dim: 8,
        num_heads: 2,
        num_blocks: blocks,
        windows: WindowPolicy::Adaptive {
            counts: WindowCounts::new(1, 2, 2).unwrap(),
            train_hw: (4, 4),
        },
        ..BackboneConfig::default()
    }
}

pub fn toy_discriminator() -> Discriminator {
    let cfg = BackboneConfig {
        model_dim: 8,
        num_heads: 2,
        num_blocks: 2,
        windows: WindowPolicy::Adaptive {
            counts: WindowCounts::new(1, 2, 2).unwrap(),
            train_hw: (4, 4),
        },
        ..BackboneConfig::default()
    };
    let mut m = Backbone::new(cfg, &mut rng(4)).unwrap();
    m.jitter(0.2, &mut rng(5));
    Discriminator::from_backbone(m, &mut rng(6))
}


/// Grad checks of every loss composed with a 2-block toy discriminator on a 1x4x4 grid.
pub fn loss_grad_checks() -> Vec<(&'static str, GradCheckReport)> {
    let d = toy_discriminator();
    let grid = GridShape::new(1, 4, 4).unwrap();
    let ctx = d.model.attention_context(grid).unwrap();
    let mut r = rng(7);
    let lq = Tensor::randn(&[16, 3], 1.0, &mut r);
    let noise = perturbation(&[16, 3], &mut r);
    let mut xs = vec![Tensor::randn(&[16, 3], 1.0, &mut r), Tensor::randn(&[16, 3], 1.0, &mut r)];
    xs.extend(d.model.params().values().iter().cloned());
    let real_x = xs[0].clone();

    type Case = fn(&mut Tape, [Var; 2], [Var; 2], &[Var], &[Var], Var) -> Result<Var>;
    let cases: [(&str, Case); 9] = [
        ("rpgan_d", |t, l, _, _, _, _| rpgan_d_loss(t, l[0], l[1])),
        ("rpgan_g", |t, l, _, _, _, _| rpgan_g_loss(t, l[0], l[1])),
        ("nonsat_d", |t, l, _, _, _, _| nonsat_d_loss(t, l[0], l[1])),
        ("nonsat_g", |t, l, _, _, _, _| nonsat_g_loss(t, l[1])),
        ("l1", |t, _, x, _, _, _| l1_loss(t, x[1], x[0])),
        ("mse", |t, _, x, _, _, _| mse_loss(t, x[1], x[0])),
        ("feature_matching", |t, _, _, tr, tf, _| feature_matching(t, tf, tr)),
        ("approx_r1", |_, _, _, _, _, r| Ok(r)),
        ("approx_r2", |_, _, _, _, _, r| Ok(r)),
    ];
    cases
        .into_iter()
        .map(|(name, case)| {
            let rep = grad_check_many(
                |tape, v| {
                    let lqv = tape.constant(lq.clone())?;
                    // Feature matching updates the generator against a frozen
                    // discriminator and fixed real data, so only the fake input is live.
                    let (bound, real_in) = if name == "feature_matching" {
                        (d.model.params().bind(tape, false)?, tape.constant(real_x.clone())?)
                    } else {
                        (Bound::from_vars(v[2..].to_vec()), v[0])
                    };
                    let real = d.forward(tape, &bound, real_in, lqv, grid, &ctx)?;
                    let fake = d.forward(tape, &bound, v[1], lqv, grid, &ctx)?;
                    let logit = |tape: &mut Tape, x: Var| Ok(d.forward(tape, &bound, x, lqv, grid, &ctx)?.logit);
                    let reg = match name {
                        "approx_r1" => approx_r_from(tape, real.logit, logit, real_in, 0.3, &noise)?,
                        "approx_r2" => approx_r_from(tape, fake.logit, logit, v[1], 0.3, &noise)?,
                        _ => real.logit,
                    };
                    case(tape, [real.logit, fake.logit], [v[0], v[1]], &real.taps, &fake.taps, reg)
                },
                &xs,
                1e-5,
                1e-4,
            )
            .unwrap();
            (name, rep)
        })
        .collect()
}

/// Grad check of a full 2-block backbone on a 1x4x4 grid, over every parameter.
pub fn backbone_grad_check() -> GradCheckReport {
    let mut m = Backbone::new(small_config(2), &mut rng(13)).unwrap();
    m.jitter(0.2, &mut rng(14));
    let g = GridShape::new(1, 4, 4).unwrap();
    let mut r = rng(15);
    let lat = Tensor::randn(&[16, 3], 1.0, &mut r);
    let lq = Tensor::randn(&[16, 3], 1.0, &mut r);
    let w = Tensor::randn(&[16, 3], 1.0, &mut r);
    let xs = m.params().values().to_vec();
    grad_check_many(
        |tape, v| {
            let bound = Bound::from_vars(v.to_vec());
            let inp = ForwardInputs {
                latent: tape.constant(lat.clone())?,
                lq: tape.constant(lq.clone())?,
                tau: 0.6,
                drop_cond: false,
                grid: g,
            };
            let out = m.forward(tape, &bound, &inp)?;
            let w = tape.constant(w.clone())?;
            let y = tape.mul(out.velocity.unwrap(), w)?;
            tape.sum(y)
        },
        &xs,
        1e-5,
        1e-4,
    )
    .unwrap()
}

/// Grad checks of every tape op on random inputs drawn from `seed`.
pub fn op_grad_checks(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let xs: Vec<Tensor> = shapes.iter().map(|s| away_from_kinks(Tensor::randn(s, 1.0, &mut r))).collect();
            (name, grad_check_many(f, &xs, 1e-5, 1e-4).unwrap())
        })
        .collect()
}
