//! Non-overlapping window partition, its inverse, and cyclic map translation.

use crate::error::{contract, Error, Result};
use crate::tensor::FeatureMap;

/// One `channels × size × size` window, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    channels: usize,
    size: usize,
    data: Vec<f64>,
}

impl Window {
    pub fn new(channels: usize, size: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || size == 0 {
            return contract("window dims must be positive");
        }
        if data.len() != channels * size * size {
            return contract(format!(
                "window {channels}x{size}x{size} needs {} values, got {}",
                channels * size * size,
                data.len()
            ));
        }
        Ok(Self {
            channels,
            size,
            data,
        })
    }

    pub fn zeros(channels: usize, size: usize) -> Self {
        Self {
            channels,
            size,
            data: vec![0.0; channels * size * size],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Flattened `channels·size²` vector.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, c: usize, v: usize, u: usize) -> f64 {
        self.data[(c * self.size + v) * self.size + u]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Window) -> bool {
        self.channels == other.channels && self.size == other.size
    }

    pub fn scale(&self, alpha: f64) -> Window {
        Window {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }
}

/// Windows of one feature map in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid {
    pub rows: usize,
    pub cols: usize,
    pub window_size: usize,
    pub channels: usize,
    pub windows: Vec<Window>,
}

impl WindowGrid {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Top-left pixel `(y, x)` of window `index`.
    pub fn origin(&self, index: usize) -> (usize, usize) {
        (
            (index / self.cols) * self.window_size,
            (index % self.cols) * self.window_size,
        )
    }
}

pub fn partition(f: &FeatureMap, r: usize) -> Result<WindowGrid> {
    if r == 0 || !f.height().is_multiple_of(r) || !f.width().is_multiple_of(r) {
        return Err(Error::NonDivisible {
            height: f.height(),
            width: f.width(),
            window: r,
        });
    }
    let (rows, cols, d) = (f.height() / r, f.width() / r, f.channels());
    let mut windows = Vec::with_capacity(rows * cols);
    for gy in 0..rows {
        for gx in 0..cols {
            let mut data = Vec::with_capacity(d * r * r);
            for c in 0..d {
                let plane = f.plane(c);
                for v in 0..r {
                    let start = (gy * r + v) * f.width() + gx * r;
                    data.extend_from_slice(&plane[start..start + r]);
                }
            }
            windows.push(Window {
                channels: d,
                size: r,
                data,
            });
        }
    }
    Ok(WindowGrid {
        rows,
        cols,
        window_size: r,
        channels: d,
        windows,
    })
}

pub fn reassemble(g: &WindowGrid) -> Result<FeatureMap> {
    let r = g.window_size;
    if g.rows == 0 || g.cols == 0 || r == 0 || g.channels == 0 {
        return contract("window grid dims must be positive");
    }
    if g.windows.len() != g.rows * g.cols {
        return contract(format!(
            "grid {}x{} holds {} windows",
            g.rows,
            g.cols,
            g.windows.len()
        ));
    }
    if let Some(i) = g
        .windows
        .iter()
        .position(|w| w.channels != g.channels || w.size != r)
    {
        return contract(format!("window {i} does not match the grid shape"));
    }
    let (h, w) = (g.rows * r, g.cols * r);
    let mut data = vec![0.0; g.channels * h * w];
    for (i, win) in g.windows.iter().enumerate() {
        let (oy, ox) = g.origin(i);
        for c in 0..g.channels {
            for v in 0..r {
                let dst = (c * h + oy + v) * w + ox;
                let src = (c * r + v) * r;
                data[dst..dst + r].copy_from_slice(&win.data[src..src + r]);
            }
        }
    }
    FeatureMap::new(g.channels, h, w, data)
}

/// Cyclic translation: `out(c, y, x) = f(c, y − dy, x − dx)` with wrap-around.
pub fn translate(f: &FeatureMap, dx: i64, dy: i64) -> FeatureMap {
    let (h, w) = (f.height(), f.width());
    let sx = dx.rem_euclid(w as i64) as usize;
    let sy = dy.rem_euclid(h as i64) as usize;
    if sx == 0 && sy == 0 {
        return f.clone();
    }
    let mut data = Vec::with_capacity(f.data().len());
    for c in 0..f.channels() {
        let plane = f.plane(c);
        for y in 0..h {
            let row = &plane[((y + h - sy) % h) * w..][..w];
            // out[x] = row[(x - sx) mod w]
            data.extend_from_slice(&row[w - sx..]);
            data.extend_from_slice(&row[..w - sx]);
        }
    }
    FeatureMap::new(f.channels(), h, w, data).expect("translation preserves shape")
}
