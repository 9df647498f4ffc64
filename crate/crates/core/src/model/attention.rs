//! Multi-head self-attention restricted to the windows of a [`WindowLayout`].

use std::sync::Arc;

use super::rope::RopeConfig;
use crate::error::{Error, Result};
use crate::numerics::{PairRotation, Tape, Var};
use crate::window::{index_maps, WindowLayout};

/// Per-grid data shared by every attention layer of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionContext {
    pub layout: WindowLayout,
    /// Tokens in window-major order.
    pub gather: Arc<Vec<usize>>,
    /// Row of each grid token inside the window-major order.
    pub scatter: Arc<Vec<usize>>,
    /// `(offset, len)` of every window inside the window-major order.
    pub spans: Vec<(usize, usize)>,
    pub rope: Arc<PairRotation>,
}

impl AttentionContext {
    pub fn new(layout: WindowLayout, rope: &RopeConfig) -> Self {
        let maps = index_maps(&layout);
        let mut spans = Vec::with_capacity(maps.inverse.len());
        let mut off = 0;
        for w in &maps.inverse {
            spans.push((off, w.len()));
            off += w.len();
        }
        let positions: Vec<[usize; 3]> = (0..layout.grid.volume())
            .map(|i| layout.grid.coords(i))
            .collect();
        Self {
            gather: Arc::new(maps.window_order()),
            scatter: Arc::new(maps.grid_order()),
            spans,
            rope: Arc::new(rope.table(&positions)),
            layout,
        }
    }

    pub fn tokens(&self) -> usize {
        self.layout.grid.volume()
    }
}

/// Projection weights of one attention layer, already bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    /// `[dim, 3 * dim]`
    pub qkv_w: Var,
    /// `[3 * dim]`
    pub qkv_b: Var,
    /// `[dim, dim]`
    pub proj_w: Var,
    /// `[dim]`
    pub proj_b: Var,
}

/// Windowed attention over `x: [tokens, dim]`.
///
/// Queries and keys are rotated with global grid coordinates, tokens are
/// gathered window by window, each window runs dense softmax attention, and
/// results are scattered back to grid order before the output projection.
pub fn window_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    ctx: &AttentionContext,
    num_heads: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != ctx.tokens() {
        return Err(Error::Shape {
            op: "window_attention",
            lhs: shape,
            rhs: vec![ctx.tokens(), 0],
        });
    }
    let (n, dim) = (shape[0], shape[1]);
    if num_heads == 0 || dim % num_heads != 0 {
        return Err(crate::error::invalid(format!(
            "model dim {dim} not divisible by {num_heads} heads"
        )));
    }
    let hd = dim / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let qkv = tape.matmul(x, p.qkv_w)?;
    let qkv = tape.add(qkv, p.qkv_b)?;
    let qkv = tape.reshape(qkv, &[n, 3, num_heads, hd])?;
    let qkv = tape.permute(qkv, &[1, 0, 2, 3])?;
    let mut parts = [x; 3];
    for (i, slot) in parts.iter_mut().enumerate() {
        let t = tape.narrow(qkv, 0, i, 1)?;
        *slot = tape.reshape(t, &[n, num_heads, hd])?;
    }
    let [q, k, v] = parts;
    let q = tape.rotate_pairs(q, Arc::clone(&ctx.rope))?;
    let k = tape.rotate_pairs(k, Arc::clone(&ctx.rope))?;

    let single = ctx.spans.len() == 1;
    let (qw, kw, vw) = if single {
        (q, k, v)
    } else {
        (
            tape.gather_rows(q, Arc::clone(&ctx.gather))?,
            tape.gather_rows(k, Arc::clone(&ctx.gather))?,
            tape.gather_rows(v, Arc::clone(&ctx.gather))?,
        )
    };

    let mut outs = Vec::with_capacity(ctx.spans.len());
    for &(off, len) in &ctx.spans {
        let (qs, ks, vs) = if single {
            (qw, kw, vw)
        } else {
            (
                tape.narrow(qw, 0, off, len)?,
                tape.narrow(kw, 0, off, len)?,
                tape.narrow(vw, 0, off, len)?,
            )
        };
        let qh = tape.permute(qs, &[1, 0, 2])?; // [H, len, hd]
        let kt = tape.permute(ks, &[1, 2, 0])?; // [H, hd, len]
        let vh = tape.permute(vs, &[1, 0, 2])?; // [H, len, hd]
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        let o = tape.matmul(attn, vh)?; // [H, len, hd]
        let o = tape.permute(o, &[1, 0, 2])?;
        outs.push(tape.reshape(o, &[len, dim])?);
    }
    let merged = if single {
        outs[0]
    } else {
        let cat = tape.concat(&outs, 0)?;
        tape.gather_rows(cat, Arc::clone(&ctx.scatter))?
    };
    let y = tape.matmul(merged, p.proj_w)?;
    tape.add(y, p.proj_b)
}
