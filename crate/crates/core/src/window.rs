//! Adaptive window geometry.
//!
//! Training-time window sizes split the token grid into a fixed number of
//! windows per axis, with the temporal extent capped at 30 tokens. At test
//! time the spatial extents are first replaced by a proxy resolution that has
//! the training area and the test aspect ratio, so windows keep roughly the
//! size the model was trained with. Grids are then tiled by boxes starting at
//! multiples of the window size, with the last box on each axis truncated.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Temporal extent cap applied before dividing by the temporal window count.
pub const TEMPORAL_CAP: usize = 30;

/// Spatial token resolution the reference model was trained at (720p features).
pub const DEFAULT_TRAIN_HW: (usize, usize) = (45, 80);

/// Token extents (temporal, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        let g = Self { t, h, w };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(invalid(format!("grid extents must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    /// Row-major token index of `(t, h, w)`.
    pub fn index(&self, p: [usize; 3]) -> usize {
        (p[0] * self.h + p[1]) * self.w + p[2]
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        [i / (self.h * self.w), (i / self.w) % self.h, i % self.w]
    }
}

/// Number of windows per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowCounts {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for WindowCounts {
    fn default() -> Self {
        Self { t: 1, h: 3, w: 3 }
    }
}

impl WindowCounts {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(invalid(format!("window counts must be >= 1, got ({t}, {h}, {w})")));
        }
        Ok(Self { t, h, w })
    }
}

/// Nominal window extents per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSize {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowSize {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 {
            return Err(invalid(format!("window size must be >= 1, got ({t}, {h}, {w})")));
        }
        Ok(Self { t, h, w })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }
}

/// One axis-aligned box of the tiling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: [usize; 3],
    pub extent: [usize; 3],
}

impl Window {
    pub fn volume(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < self.start[a] + self.extent[a])
    }
}

/// Exact, non-overlapping cover of a grid by windows, in row-major window order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLayout {
    pub grid: GridShape,
    pub size: WindowSize,
    /// Windows per axis.
    pub counts: [usize; 3],
    pub windows: Vec<Window>,
}

fn div_ceil(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Window size used during training for `grid`.
pub fn training_window_size(grid: GridShape, counts: WindowCounts) -> Result<WindowSize> {
    grid.validate()?;
    WindowCounts::new(counts.t, counts.h, counts.w)?;
    Ok(WindowSize {
        t: div_ceil(grid.t.min(TEMPORAL_CAP), counts.t),
        h: div_ceil(grid.h, counts.h),
        w: div_ceil(grid.w, counts.w),
    })
}

/// Area- and aspect-preserving proxy of the test grid's spatial extents.
pub fn proxy_resolution(test: GridShape, train_hw: (usize, usize)) -> Result<(f64, f64)> {
    if test.h == 0 || test.w == 0 {
        return Err(invalid(format!("test extents must be >= 1, got {}x{}", test.h, test.w)));
    }
    if train_hw.0 == 0 || train_hw.1 == 0 {
        return Err(invalid(format!("training resolution must be >= 1, got {train_hw:?}")));
    }
    let area = (train_hw.0 * train_hw.1) as f64;
    let (h, w) = (test.h as f64, test.w as f64);
    Ok(((area * h / w).sqrt(), (area * w / h).sqrt()))
}

/// Nearest integer with ties rounded up, clamped to at least 1.
pub fn round_extent(x: f64) -> usize {
    ((x + 0.5).floor() as usize).max(1)
}

/// Test-time window size: training rule applied to `(d_t, proxy_h, proxy_w)`.
pub fn test_window_size(
    test: GridShape,
    counts: WindowCounts,
    train_hw: (usize, usize),
) -> Result<WindowSize> {
    test.validate()?;
    let (ph, pw) = proxy_resolution(test, train_hw)?;
    let proxy = GridShape::new(test.t, round_extent(ph), round_extent(pw))?;
    training_window_size(proxy, counts)
}

fn axis_tiles(extent: usize, size: usize) -> Vec<(usize, usize)> {
    (0..extent)
        .step_by(size)
        .map(|s| (s, size.min(extent - s)))
        .collect()
}

/// Tiles `grid` with boxes of `size`, truncating the last box on each axis.
pub fn partition(grid: GridShape, size: WindowSize) -> Result<WindowLayout> {
    grid.validate()?;
    WindowSize::new(size.t, size.h, size.w)?;
    let tt = axis_tiles(grid.t, size.t);
    let th = axis_tiles(grid.h, size.h);
    let tw = axis_tiles(grid.w, size.w);
    let mut windows = Vec::with_capacity(tt.len() * th.len() * tw.len());
    for &(st, et) in &tt {
        for &(sh, eh) in &th {
            for &(sw, ew) in &tw {
                windows.push(Window {
                    start: [st, sh, sw],
                    extent: [et, eh, ew],
                });
            }
        }
    }
    Ok(WindowLayout {
        grid,
        size,
        counts: [tt.len(), th.len(), tw.len()],
        windows,
    })
}

/// Token ↔ (window, slot) maps for a layout. Slots are row-major `(t, h, w)`
/// within each window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMaps {
    /// `forward[token] = (window, slot)`.
    pub forward: Vec<(usize, usize)>,
    /// `inverse[window][slot] = token`.
    pub inverse: Vec<Vec<usize>>,
}

impl IndexMaps {
    /// Tokens listed window by window: the gather order for window attention.
    pub fn window_order(&self) -> Vec<usize> {
        self.inverse.iter().flatten().copied().collect()
    }

    /// Position of every token inside [`Self::window_order`]; the scatter-back order.
    pub fn grid_order(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.inverse.len());
        let mut acc = 0;
        for w in &self.inverse {
            offsets.push(acc);
            acc += w.len();
        }
        self.forward
            .iter()
            .map(|&(w, s)| offsets[w] + s)
            .collect()
    }
}

pub fn index_maps(layout: &WindowLayout) -> IndexMaps {
    let g = layout.grid;
    let mut forward = vec![(usize::MAX, usize::MAX); g.volume()];
    let mut inverse = Vec::with_capacity(layout.windows.len());
    for (wi, win) in layout.windows.iter().enumerate() {
        let mut slots = Vec::with_capacity(win.volume());
        for t in 0..win.extent[0] {
            for h in 0..win.extent[1] {
                for w in 0..win.extent[2] {
                    let tok = g.index([win.start[0] + t, win.start[1] + h, win.start[2] + w]);
                    forward[tok] = (wi, slots.len());
                    slots.push(tok);
                }
            }
        }
        inverse.push(slots);
    }
    IndexMaps { forward, inverse }
}

/// How a model picks its attention windows for a given grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WindowPolicy {
    /// Window counts per axis, resolved through the proxy resolution of `train_hw`.
    Adaptive {
        counts: WindowCounts,
        train_hw: (usize, usize),
    },
    /// A predefined window size regardless of input resolution.
    Fixed(WindowSize),
}

impl WindowPolicy {
    pub fn layout(&self, grid: GridShape) -> Result<WindowLayout> {
        let size = match *self {
            WindowPolicy::Adaptive { counts, train_hw } => test_window_size(grid, counts, train_hw)?,
            WindowPolicy::Fixed(size) => size,
        };
        partition(grid, size)
    }
}
