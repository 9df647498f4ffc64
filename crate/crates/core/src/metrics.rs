//! Full-reference quality metrics and the window-boundary artifact score.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Clip;
use crate::error::{invalid, Error, Result};
use crate::window::WindowLayout;

pub const PSNR_CAP: f64 = 100.0;

fn same_shape(op: &'static str, a: &Clip, b: &Clip) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Clip, b: &Clip) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` for unit-range signals, capped at [`PSNR_CAP`].
pub fn psnr(a: &Clip, b: &Clip) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_taps(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * plane[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over frames, channels and valid window positions.
pub fn ssim(a: &Clip, b: &Clip) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn ssim_with(a: &Clip, b: &Clip, cfg: &SsimConfig) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if a.height < cfg.window || a.width < cfg.window {
        return Err(invalid(format!(
            "ssim window {} exceeds clip extent {}x{}",
            cfg.window, a.height, a.width
        )));
    }
    let k = gaussian_taps(cfg.window, cfg.sigma);
    let c1 = cfg.k1 * cfg.k1;
    let c2 = cfg.k2 * cfg.k2;
    let (h, w) = (a.height, a.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..a.frames {
        for c in 0..a.channels {
            let pa: Vec<f64> = (0..h * w).map(|i| a.at(t, i / w, i % w, c)).collect();
            let pb: Vec<f64> = (0..h * w).map(|i| b.at(t, i / w, i % w, c)).collect();
            let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
            let ma = filter_valid(&pa, h, w, &k);
            let mb = filter_valid(&pb, h, w, &k);
            let saa = filter_valid(&prod(&|i| pa[i] * pa[i]), h, w, &k);
            let sbb = filter_valid(&prod(&|i| pb[i] * pb[i]), h, w, &k);
            let sab = filter_valid(&prod(&|i| pa[i] * pb[i]), h, w, &k);
            for i in 0..ma.len() {
                let (mx, my) = (ma[i], mb[i]);
                let vx = saa[i] - mx * mx;
                let vy = sbb[i] - my * my;
                let cxy = sab[i] - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Interior window starts per spatial axis, in pixel units.
fn seams(layout: &WindowLayout, height: usize, width: usize) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    let g = layout.grid;
    if height % g.h != 0 || width % g.w != 0 {
        return Err(invalid(format!(
            "frame {height}x{width} is not a multiple of the token grid {}x{}",
            g.h, g.w
        )));
    }
    let (sy, sx) = (height / g.h, width / g.w);
    let rows = layout.windows.iter().map(|w| w.start[1]).filter(|&s| s > 0).map(|s| s * sy).collect();
    let cols = layout.windows.iter().map(|w| w.start[2]).filter(|&s| s > 0).map(|s| s * sx).collect();
    Ok((rows, cols))
}

/// Ratio of mean absolute finite differences across window seams to the
/// mean elsewhere, per frame, averaged over frames. Layouts without interior
/// seams and flat frames (0/0) score 1; a seam-only signal scores infinity.
pub fn boundary_artifact_score(clip: &Clip, layout: &WindowLayout) -> Result<f64> {
    let (rows, cols) = seams(layout, clip.height, clip.width)?;
    if rows.is_empty() && cols.is_empty() {
        return Ok(1.0);
    }
    let (h, w) = (clip.height, clip.width);
    let mut total = 0.0;
    for t in 0..clip.frames {
        let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                for c in 0..clip.channels {
                    let v = clip.at(t, y, x, c);
                    if x + 1 < w {
                        let d = (clip.at(t, y, x + 1, c) - v).abs();
                        if cols.contains(&(x + 1)) {
                            on += d;
                            n_on += 1;
                        } else {
                            off += d;
                            n_off += 1;
                        }
                    }
                    if y + 1 < h {
                        let d = (clip.at(t, y + 1, x, c) - v).abs();
                        if rows.contains(&(y + 1)) {
                            on += d;
                            n_on += 1;
                        } else {
                            off += d;
                            n_off += 1;
                        }
                    }
                }
            }
        }
        let a = if n_on > 0 { on / n_on as f64 } else { 0.0 };
        let b = if n_off > 0 { off / n_off as f64 } else { 0.0 };
        total += match (a == 0.0, b == 0.0) {
            (true, true) => 1.0,
            (false, true) => f64::INFINITY,
            _ => a / b,
        };
    }
    Ok(total / clip.frames as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub boundary_artifact_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
    pub mean_boundary_artifact_score: Option<f64>,
    pub runtime_seconds: f64,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Option<Vec<f64>> = v.collect();
    xs.filter(|x| !x.is_empty()).map(|x| x.iter().sum::<f64>() / x.len() as f64)
}

/// Metrics for one prediction against its reference. SSIM is skipped when the
/// clip is smaller than the SSIM window.
pub fn clip_metrics(pred: &Clip, reference: &Clip, layout: Option<&WindowLayout>) -> Result<ClipMetrics> {
    let cfg = SsimConfig::default();
    let ssim = if pred.height >= cfg.window && pred.width >= cfg.window {
        Some(ssim_with(pred, reference, &cfg)?)
    } else {
        None
    };
    Ok(ClipMetrics {
        psnr: psnr(pred, reference)?,
        ssim,
        boundary_artifact_score: layout.map(|l| boundary_artifact_score(pred, l)).transpose()?,
    })
}

impl MetricReport {
    pub fn from_clips(clips: Vec<ClipMetrics>, runtime_seconds: f64) -> Self {
        let n = clips.len().max(1) as f64;
        Self {
            mean_psnr: clips.iter().map(|c| c.psnr).sum::<f64>() / n,
            mean_ssim: mean_of(clips.iter().map(|c| c.ssim)),
            mean_boundary_artifact_score: mean_of(clips.iter().map(|c| c.boundary_artifact_score)),
            clips,
            runtime_seconds,
        }
    }
}
