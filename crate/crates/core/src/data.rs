//! Procedural HQ clips, the degradation pipeline and LQ/HQ pair streams.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;
use crate::window::GridShape;

pub const CLIP_MAGIC: &[u8; 4] = b"WVC1";
pub const CHANNELS: usize = 3;

/// Frame-major `[T][H][W][C]` pixel clip with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// SplitMix64 step; used to derive independent per-item seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `index`-th item of a stream labelled `tag`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ tag.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

impl Clip {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(invalid("clip extents must be positive"));
        }
        if data.len() != frames * height * width * channels {
            return Err(invalid(format!(
                "clip data has {} values, expected {}",
                data.len(),
                frames * height * width * channels
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            frames,
            height,
            width,
            channels: CHANNELS,
            data: vec![value; frames * height * width * CHANNELS],
        }
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn grid(&self) -> GridShape {
        GridShape {
            t: self.frames,
            h: self.height,
            w: self.width,
        }
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(t, y, x, c)]
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Copy of frame `t` as a one-frame clip.
    pub fn frame(&self, t: usize) -> Clip {
        let n = self.frame_len();
        Clip {
            frames: 1,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    /// First `frames` frames.
    pub fn truncate(&self, frames: usize) -> Clip {
        let f = frames.clamp(1, self.frames);
        Clip {
            frames: f,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[..f * self.frame_len()].to_vec(),
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Latent tokens `[T*H*W, C]` with pixels mapped to `2x - 1`.
    pub fn to_latent(&self) -> Tensor {
        Tensor::new(
            &[self.frames * self.height * self.width, self.channels],
            self.data.iter().map(|v| 2.0 * v - 1.0).collect(),
        )
        .expect("clip extents are positive")
    }

    /// Inverse of [`Clip::to_latent`], clamped into `[0, 1]`.
    pub fn from_latent(t: &Tensor, grid: GridShape) -> Result<Clip> {
        if t.rank() != 2 || t.shape()[0] != grid.volume() {
            return Err(Error::Shape {
                op: "from_latent",
                lhs: t.shape().to_vec(),
                rhs: vec![grid.volume(), 0],
            });
        }
        Clip::new(
            grid.t,
            grid.h,
            grid.w,
            t.shape()[1],
            t.data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + 4 * self.data.len());
        out.extend_from_slice(CLIP_MAGIC);
        for d in [self.frames, self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Clip> {
        let bad = |reason: String| Error::Format {
            kind: "clip",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 36 || &bytes[..4] != CLIP_MAGIC {
            return Err(bad("missing WVC1 header".into()));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let raw = u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap());
            *d = usize::try_from(raw).map_err(|_| bad(format!("extent {raw} too large")))?;
            if *d == 0 {
                return Err(bad("zero extent".into()));
            }
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("extent product overflows".into()))?;
        let payload = &bytes[36..];
        if payload.len() != 4 * n {
            return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
        }
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad("values outside [0, 1]".into()));
        }
        Clip::new(dims[0], dims[1], dims[2], dims[3], data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("clip values must lie in [0, 1] before writing"));
        }
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.encode())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Clip> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Clip::decode(&bytes, path)
    }

    /// Rounds through `f32`, as writing and reading back would.
    pub fn quantized_f32(&self) -> Clip {
        let mut c = self.clone();
        for v in &mut c.data {
            *v = *v as f32 as f64;
        }
        c
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

enum Shape {
    Disc { r: f64 },
    Rect { hw: f64, hh: f64 },
}

struct Sprite {
    shape: Shape,
    pos: (f64, f64),
    vel: (f64, f64),
    color: [f64; 3],
    alpha: f64,
}

/// Deterministic clip of moving soft-edged shapes over a gradient with a
/// low-frequency texture. Extents must be divisible by 4.
pub fn synth_video(seed: u64, frames: usize, height: usize, width: usize) -> Result<Clip> {
    if frames == 0 || height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
        return Err(invalid(format!(
            "synth_video needs positive extents with h, w divisible by 4, got {frames}x{height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let scale = hf.min(wf);

    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());

    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let k = rng.gen_range(1.0..3.0) * std::f64::consts::TAU / scale;
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let speed = rng.gen_range(-0.3..0.3);
            let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.06..0.06));
            (k * th.cos(), k * th.sin(), phase, speed, amp)
        })
        .collect();

    let n_sprites = rng.gen_range(2..=4);
    let sprites: Vec<Sprite> = (0..n_sprites)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc {
                    r: rng.gen_range(0.12..0.3) * scale,
                }
            } else {
                Shape::Rect {
                    hw: rng.gen_range(0.1..0.3) * scale,
                    hh: rng.gen_range(0.1..0.3) * scale,
                }
            };
            Sprite {
                shape,
                pos: (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf)),
                vel: (rng.gen_range(-0.05..0.05) * scale, rng.gen_range(-0.05..0.05) * scale),
                color: std::array::from_fn(|_| rng.gen_range(0.05..0.95)),
                alpha: rng.gen_range(0.6..0.95),
            }
        })
        .collect();

    let mut clip = Clip::filled(frames, height, width, 0.0);
    let norm = (hf * hf + wf * wf).sqrt();
    for t in 0..frames {
        let tf = t as f64;
        for y in 0..height {
            for x in 0..width {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let g = 0.5 + ((py - hf / 2.0) * gb + (px - wf / 2.0) * ga) / norm;
                let mut px_val: [f64; 3] = std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * g);
                for &(ky, kx, ph, sp, amp) in &waves {
                    let s = (ky * py + kx * px + ph + sp * tf).sin();
                    for c in 0..3 {
                        px_val[c] += amp[c] * s;
                    }
                }
                for s in &sprites {
                    let cy = s.pos.0 + s.vel.0 * tf;
                    let cx = s.pos.1 + s.vel.1 * tf;
                    let cover = match s.shape {
                        Shape::Disc { r } => {
                            let d = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
                            1.0 - smoothstep(r - 0.75, r + 0.75, d)
                        }
                        Shape::Rect { hw, hh } => {
                            let dy = (py - cy).abs() - hh;
                            let dx = (px - cx).abs() - hw;
                            1.0 - smoothstep(-0.75, 0.75, dy.max(dx))
                        }
                    } * s.alpha;
                    for c in 0..3 {
                        px_val[c] += cover * (s.color[c] - px_val[c]);
                    }
                }
                for (c, v) in px_val.iter().enumerate() {
                    let i = clip.idx(t, y, x, c);
                    clip.data[i] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(clip)
}

/// Ranges from which each sample's degradation strengths are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationParams {
    pub blur_sigma: (f64, f64),
    pub factor: usize,
    pub noise_sigma: (f64, f64),
    /// Quantization levels per channel; `None` disables quantization.
    pub quant_levels: Option<(u32, u32)>,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            blur_sigma: (0.4, 1.2),
            factor: 4,
            noise_sigma: (0.0, 0.02),
            quant_levels: Some((32, 64)),
        }
    }
}

impl DegradationParams {
    /// Identity strengths: the pipeline reduces to area downsampling.
    pub fn zero(factor: usize) -> Self {
        Self {
            blur_sigma: (0.0, 0.0),
            factor,
            noise_sigma: (0.0, 0.0),
            quant_levels: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |r: (f64, f64)| r.0 >= 0.0 && r.1 >= r.0 && r.1.is_finite();
        if self.factor == 0 || !ok(self.blur_sigma) || !ok(self.noise_sigma) {
            return Err(invalid(format!("invalid degradation parameters {self:?}")));
        }
        if let Some((lo, hi)) = self.quant_levels {
            if lo < 2 || hi < lo {
                return Err(invalid("quantization needs 2 <= lo <= hi levels"));
            }
        }
        Ok(())
    }
}

fn draw_range<R: Rng>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.gen_range(r.0..=r.1)
    } else {
        r.0
    }
}

/// Separable Gaussian blur with clamped borders, per frame and channel.
pub fn gaussian_blur(clip: &Clip, sigma: f64) -> Clip {
    if sigma <= 0.0 {
        return clip.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);

    let (h, w) = (clip.height as isize, clip.width as isize);
    let mut tmp = clip.clone();
    let mut out = clip.clone();
    for t in 0..clip.frames {
        for y in 0..h {
            for x in 0..w {
                for c in 0..clip.channels {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let xx = (x + j as isize - radius).clamp(0, w - 1) as usize;
                        acc += kv * clip.at(t, y as usize, xx, c);
                    }
                    let i = tmp.idx(t, y as usize, x as usize, c);
                    tmp.data[i] = acc;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..clip.channels {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let yy = (y + j as isize - radius).clamp(0, h - 1) as usize;
                        acc += kv * tmp.at(t, yy, x as usize, c);
                    }
                    let i = out.idx(t, y as usize, x as usize, c);
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

/// Box-average downsampling by an integer factor.
pub fn area_downsample(clip: &Clip, factor: usize) -> Result<Clip> {
    if factor == 0 || clip.height % factor != 0 || clip.width % factor != 0 {
        return Err(invalid(format!(
            "factor {factor} does not divide {}x{}",
            clip.height, clip.width
        )));
    }
    let (h, w) = (clip.height / factor, clip.width / factor);
    let mut out = Clip::zeros(clip.frames, h, w, clip.channels);
    let inv = 1.0 / (factor * factor) as f64;
    for t in 0..clip.frames {
        for y in 0..h {
            for x in 0..w {
                for c in 0..clip.channels {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += clip.at(t, y * factor + dy, x * factor + dx, c);
                        }
                    }
                    let i = out.idx(t, y, x, c);
                    out.data[i] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Adds `N(0, sigma^2)` noise drawn from `rng`.
pub fn add_noise<R: Rng>(clip: &Clip, sigma: f64, rng: &mut R) -> Clip {
    let mut out = clip.clone();
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        for v in &mut out.data {
            *v += n.sample(rng);
        }
    }
    out
}

/// Uniform quantization to `levels` values in `[0, 1]` (clamping first).
pub fn quantize(clip: &Clip, levels: u32) -> Clip {
    let q = (levels.max(2) - 1) as f64;
    let mut out = clip.clone();
    for v in &mut out.data {
        *v = (v.clamp(0.0, 1.0) * q).round() / q;
    }
    out
}

/// Blur, area-downsample, add noise, quantize, clamp.
pub fn degrade(hq: &Clip, params: &DegradationParams, seed: u64) -> Result<Clip> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blur = draw_range(&mut rng, params.blur_sigma);
    let noise = draw_range(&mut rng, params.noise_sigma);
    let levels = params.quant_levels.map(|(lo, hi)| rng.gen_range(lo..=hi));
    let mut x = area_downsample(&gaussian_blur(hq, blur), params.factor)?;
    x = add_noise(&x, noise, &mut rng);
    if let Some(l) = levels {
        x = quantize(&x, l);
    }
    x.clamp01();
    Ok(x)
}

/// Bilinear upsampling with half-pixel centres and clamped borders.
pub fn bilinear_upsample(clip: &Clip, height: usize, width: usize) -> Clip {
    let mut out = Clip::zeros(clip.frames, height, width, clip.channels);
    let sy = clip.height as f64 / height as f64;
    let sx = clip.width as f64 / width as f64;
    let coord = |o: usize, s: f64, n: usize| {
        let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    for t in 0..clip.frames {
        for y in 0..height {
            let (y0, y1, fy) = coord(y, sy, clip.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, sx, clip.width);
                for c in 0..clip.channels {
                    let top = clip.at(t, y0, x0, c) * (1.0 - fx) + clip.at(t, y0, x1, c) * fx;
                    let bot = clip.at(t, y1, x0, c) * (1.0 - fx) + clip.at(t, y1, x1, c) * fx;
                    let i = out.idx(t, y, x, c);
                    out.data[i] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    out
}

/// A low-quality input and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub lq: Clip,
    pub hq: Clip,
}

impl Pair {
    /// Synthesizes and degrades one pair.
    pub fn synth(seed: u64, frames: usize, hw: (usize, usize), params: &DegradationParams) -> Result<Self> {
        let hq = synth_video(seed, frames, hw.0, hw.1)?;
        let lq = degrade(&hq, params, splitmix64(seed ^ 0xDE64))?;
        Ok(Self { lq, hq })
    }

    pub fn grid(&self) -> GridShape {
        self.hq.grid()
    }

    /// Upsampled LQ in latent units, `[tokens, C]`.
    pub fn lq_latent(&self) -> Tensor {
        bilinear_upsample(&self.lq, self.hq.height, self.hq.width).to_latent()
    }
}

/// Configuration of an infinite training stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    /// HQ `(h, w)` choices, sampled uniformly per item.
    pub aspects: Vec<(usize, usize)>,
    /// `(start_iter, frames)`, non-decreasing in both, first start 0.
    pub curriculum: Vec<(usize, usize)>,
    pub batch: usize,
    pub degradation: DegradationParams,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            aspects: vec![(16, 16), (8, 32), (32, 8)],
            curriculum: vec![(0, 1)],
            batch: 4,
            degradation: DegradationParams::default(),
        }
    }
}

/// Frames for iteration `iter` under a `(start_iter, frames)` curriculum.
pub fn curriculum_frames(curriculum: &[(usize, usize)], iter: usize) -> usize {
    curriculum
        .iter()
        .take_while(|(s, _)| *s <= iter)
        .last()
        .map_or(1, |&(_, f)| f)
}

pub fn validate_curriculum(curriculum: &[(usize, usize)]) -> Result<()> {
    match curriculum.first() {
        Some(&(0, 1)) => {}
        _ => return Err(invalid("curriculum must start with (0, 1)")),
    }
    if curriculum
        .windows(2)
        .any(|w| w[1].0 <= w[0].0 || w[1].1 < w[0].1)
    {
        return Err(invalid("curriculum starts must increase and frames must not decrease"));
    }
    Ok(())
}

/// Seeded, random-access stream of LQ/HQ batches.
#[derive(Clone, Debug)]
pub struct PairStream {
    cfg: StreamConfig,
    seed: u64,
    next: usize,
}

impl PairStream {
    pub fn new(cfg: StreamConfig, seed: u64) -> Result<Self> {
        if cfg.aspects.is_empty() || cfg.batch == 0 {
            return Err(invalid("stream needs at least one aspect and a positive batch"));
        }
        validate_curriculum(&cfg.curriculum)?;
        cfg.degradation.validate()?;
        Ok(Self { cfg, seed, next: 0 })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    /// Aspect index of item `item` in batch `iter`.
    pub fn aspect_index(&self, iter: usize, item: usize) -> usize {
        let s = derive_seed(self.seed, 1, (iter * self.cfg.batch + item) as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let idx: Vec<usize> = (0..self.cfg.aspects.len()).collect();
        *idx.choose(&mut rng).unwrap()
    }

    /// Batch for iteration `iter`, independent of any other call.
    pub fn batch(&self, iter: usize) -> Result<Vec<Pair>> {
        let frames = curriculum_frames(&self.cfg.curriculum, iter);
        let items = crate::par::map_range(self.cfg.batch, |i| {
            let hw = self.cfg.aspects[self.aspect_index(iter, i)];
            let s = derive_seed(self.seed, 2, (iter * self.cfg.batch + i) as u64);
            Pair::synth(s, frames, hw, &self.cfg.degradation)
        });
        items.into_iter().collect()
    }
}

impl Iterator for PairStream {
    type Item = Result<Vec<Pair>>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}

/// Fixed held-out pairs, disjoint from training streams by seed tag.
pub fn held_out_set(seed: u64, count: usize, frames: usize, hw: (usize, usize), params: &DegradationParams) -> Result<Vec<Pair>> {
    crate::par::map_range(count, |i| Pair::synth(derive_seed(seed, 3, i as u64), frames, hw, params))
        .into_iter()
        .collect()
}
