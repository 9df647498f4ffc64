//! Three-axis rotary position embedding.
//!
//! The head dimension is split into temporal, height and width bands. Inside
//! each band, consecutive value pairs rotate by `pos * theta_i` with
//! `theta_i = base^(-2i / band_width)`, using the token's coordinate on that
//! band's axis. Because rotations compose additively, query/key dot products
//! depend only on coordinate differences.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{PairRotation, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    /// Band widths `(t, h, w)`; each even, summing to `head_dim`.
    pub axis_split: (usize, usize, usize),
    pub base_freq: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, axis_split: (usize, usize, usize), base_freq: f64) -> Result<Self> {
        let (t, h, w) = axis_split;
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(invalid(format!("rope head_dim must be even and positive, got {head_dim}")));
        }
        if t % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(format!("rope band widths must be even, got {axis_split:?}")));
        }
        if t + h + w != head_dim {
            return Err(invalid(format!(
                "rope bands {axis_split:?} do not sum to head_dim {head_dim}"
            )));
        }
        if !(base_freq > 1.0) {
            return Err(invalid(format!("rope base frequency must exceed 1, got {base_freq}")));
        }
        Ok(Self {
            head_dim,
            axis_split,
            base_freq,
        })
    }

    /// Splits the pairs of `head_dim` roughly 1:1:1 with the remainder going to space.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        let pairs = head_dim / 2;
        let pt = pairs / 3;
        let ph = (pairs - pt) / 2;
        let pw = pairs - pt - ph;
        Self::new(head_dim, (2 * pt, 2 * ph, 2 * pw), 10_000.0)
    }

    /// Rotation frequencies of one band, strictly decreasing.
    pub fn band_frequencies(&self, band_width: usize) -> Vec<f64> {
        (0..band_width / 2)
            .map(|i| self.base_freq.powf(-2.0 * i as f64 / band_width as f64))
            .collect()
    }

    /// Per-token cos/sin table for the given `(t, h, w)` coordinates.
    pub fn table(&self, positions: &[[usize; 3]]) -> PairRotation {
        let (bt, bh, bw) = self.axis_split;
        let freqs: Vec<(usize, f64)> = [(0, bt), (1, bh), (2, bw)]
            .into_iter()
            .flat_map(|(axis, width)| {
                self.band_frequencies(width)
                    .into_iter()
                    .map(move |f| (axis, f))
            })
            .collect();
        let pairs = self.head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for p in positions {
            for &(axis, f) in &freqs {
                let angle = p[axis] as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        PairRotation {
            tokens: positions.len(),
            pairs,
            cos,
            sin,
        }
    }
}

/// Rotates `qk: [tokens, heads, head_dim]` by the tokens' positions.
pub fn rope_rotate(qk: &Tensor, positions: &[[usize; 3]], cfg: &RopeConfig) -> Result<Tensor> {
    let s = qk.shape();
    if s.len() != 3 || s[0] != positions.len() || s[2] != cfg.head_dim {
        return Err(Error::Shape {
            op: "rope_rotate",
            lhs: s.to_vec(),
            rhs: vec![positions.len(), 0, cfg.head_dim],
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(qk.clone())?;
    let y = tape.rotate_pairs(x, Arc::new(cfg.table(positions)))?;
    Ok(tape.value(y).clone())
}
