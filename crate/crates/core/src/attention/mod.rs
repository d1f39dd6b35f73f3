//! Window-level attention over cyclically shifted key/value samples.
//!
//! Every key window `k` is expanded into its shifts `s`; a query window `q`
//! scores each pair as `q·shift(k, s) / sqrt(d_k) + M(s)` and fuses the
//! correspondingly shifted value windows. Results are always reported over the
//! `r²` distinct shift classes (duplicates folded with log-sum-exp), which is
//! what makes the four kernels directly comparable.

mod kernels;
mod multihead;
mod projection;

pub use kernels::{
    default_registry, AttentionKernel, KernelRegistry, NaiveFull, Rmq, RmqPeri, RmqPeriProg,
    LEVEL_NAMES,
};
pub use multihead::{
    multi_head_attention, multi_head_attention_traced, stacked_attention, HeadTrace,
    MultiHeadOutput, MultiScaleConfig,
};
pub use projection::{HeadProjection, ProjectionSet};

use crate::error::{contract, Result};
use crate::shift::{enumerate_shifts, fold_duplicate_logits, shift_window, ShiftMode, ShiftOffset};
use crate::tensor::{axpy, dot, softmax_in_place};
use crate::window::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub window_size: usize,
    pub channels: usize,
    /// Displace the search map by `(r/2, r/2)` before partitioning.
    pub translate_search: bool,
    pub use_mask: bool,
}

impl HeadConfig {
    pub fn new(window_size: usize, channels: usize) -> Self {
        Self {
            window_size,
            channels,
            translate_search: false,
            use_mask: true,
        }
    }

    pub fn with_mask(mut self, on: bool) -> Self {
        self.use_mask = on;
        self
    }

    pub fn with_translation(mut self, on: bool) -> Self {
        self.translate_search = on;
        self
    }

    /// Length of a flattened window, used as the key dimension.
    pub fn d_k(&self) -> usize {
        self.channels * self.window_size * self.window_size
    }

    /// Search-map displacement applied when `translate_search` is set.
    pub fn translation(&self) -> usize {
        if self.translate_search {
            self.window_size / 2
        } else {
            0
        }
    }
}

/// Additive spatial penalty over the full `(2r−1)²` offset range.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    r: usize,
    values: Vec<f64>,
}

impl MaskGrid {
    pub fn r(&self) -> usize {
        self.r
    }

    /// Grid from explicit values in [`MaskGrid::rows`] order.
    pub fn from_values(r: usize, values: Vec<f64>) -> Result<Self> {
        if r == 0 || values.len() != (2 * r - 1).pow(2) {
            return contract(format!("mask for r={r} needs (2r-1)^2 values"));
        }
        Ok(Self { r, values })
    }

    pub fn side(&self) -> usize {
        2 * self.r - 1
    }

    pub fn get(&self, off: ShiftOffset) -> f64 {
        let r = self.r as i64;
        assert!(
            off.x.abs() < r && off.y.abs() < r,
            "offset {off:?} outside mask"
        );
        self.values[((off.y + r - 1) * (2 * r - 1) + off.x + r - 1) as usize]
    }

    /// Rows from `y = −r+1` to `r−1`, columns from `x = −r+1` to `r−1`.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.side())
            .map(|c| c.to_vec())
            .collect()
    }
}

/// `M(x, y) = −(x/r)² − (y/r)²`.
pub fn spatial_mask(r: usize) -> MaskGrid {
    assert!(r >= 1, "window size must be positive");
    let ri = r as i64;
    let rf = r as f64;
    let mut values = Vec::with_capacity((2 * r - 1).pow(2));
    for y in -ri + 1..ri {
        for x in -ri + 1..ri {
            // leading 0.0 keeps M(0, 0) at +0 rather than −0
            values.push(0.0 - (x as f64 / rf).powi(2) - (y as f64 / rf).powi(2));
        }
    }
    MaskGrid { r, values }
}

/// Per-offset additive term over the full shift set (mask or zeros).
pub(crate) fn full_offset_bias(r: usize, use_mask: bool) -> Vec<f64> {
    let full = enumerate_shifts(r, ShiftMode::Full);
    if use_mask {
        let m = spatial_mask(r);
        full.offsets().iter().map(|&o| m.get(o)).collect()
    } else {
        vec![0.0; full.len()]
    }
}

/// Additive term per distinct shift class: the folded full-set bias. With the
/// mask off this is `ln(multiplicity)`, the weight duplicates carry in the full
/// softmax.
pub fn class_bias(r: usize, use_mask: bool) -> Vec<f64> {
    let full = enumerate_shifts(r, ShiftMode::Full);
    fold_duplicate_logits(&full, &full_offset_bias(r, use_mask)).expect("full set")
}

/// Per-query logits and weights over `(key window, shift class)` plus fused
/// output windows. Row layout for query `q`: index `k·r² + class`, with classes
/// row-major over `[0, r)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    window_size: usize,
    n_queries: usize,
    n_keys: usize,
    logits: Vec<f64>,
    weights: Vec<f64>,
    class_bias: Vec<f64>,
    fused: Vec<Window>,
}

impl AttentionResult {
    /// Assembles a result from per-query `(logits, weights, fused)` rows, for
    /// kernels defined outside this crate. Rows must already be in folded
    /// class form.
    pub fn new(
        window_size: usize,
        n_keys: usize,
        class_bias: Vec<f64>,
        rows: Vec<(Vec<f64>, Vec<f64>, Window)>,
    ) -> Result<Self> {
        let classes = window_size * window_size;
        if window_size == 0 || class_bias.len() != classes {
            return contract(format!("class bias must have {classes} entries"));
        }
        let width = n_keys * classes;
        if let Some(q) = rows
            .iter()
            .position(|(l, w, f)| l.len() != width || w.len() != width || f.size() != window_size)
        {
            return contract(format!(
                "row {q} does not match {n_keys} keys at window size {window_size}"
            ));
        }
        Ok(Self::from_rows(window_size, n_keys, class_bias, rows))
    }

    pub(crate) fn from_rows(
        window_size: usize,
        n_keys: usize,
        class_bias: Vec<f64>,
        rows: Vec<(Vec<f64>, Vec<f64>, Window)>,
    ) -> Self {
        let n_queries = rows.len();
        let width = n_keys * window_size * window_size;
        let mut logits = Vec::with_capacity(n_queries * width);
        let mut weights = Vec::with_capacity(n_queries * width);
        let mut fused = Vec::with_capacity(n_queries);
        for (l, w, f) in rows {
            debug_assert_eq!(l.len(), width);
            logits.extend(l);
            weights.extend(w);
            fused.push(f);
        }
        Self {
            window_size,
            n_queries,
            n_keys,
            logits,
            weights,
            class_bias,
            fused,
        }
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn num_classes(&self) -> usize {
        self.window_size * self.window_size
    }

    fn row(&self, q: usize) -> std::ops::Range<usize> {
        let w = self.n_keys * self.num_classes();
        q * w..(q + 1) * w
    }

    pub fn logits(&self, q: usize) -> &[f64] {
        &self.logits[self.row(q)]
    }

    pub fn weights(&self, q: usize) -> &[f64] {
        &self.weights[self.row(q)]
    }

    pub fn logit(&self, q: usize, k: usize, class: usize) -> f64 {
        self.logits(q)[k * self.num_classes() + class]
    }

    pub fn weight(&self, q: usize, k: usize, class: usize) -> f64 {
        self.weights(q)[k * self.num_classes() + class]
    }

    /// Content score of a pair: its logit minus the shift-class bias.
    pub fn score(&self, q: usize, k: usize, class: usize) -> f64 {
        self.logit(q, k, class) - self.class_bias[class]
    }

    pub fn class_bias(&self) -> &[f64] {
        &self.class_bias
    }

    pub fn fused(&self) -> &[Window] {
        &self.fused
    }

    pub fn into_fused(self) -> Vec<Window> {
        self.fused
    }

    /// Largest `|a − b| / max(1, |a|, |b|)` over logits, weights and fused
    /// values; infinite if the shapes differ.
    pub fn max_deviation(&self, other: &AttentionResult) -> f64 {
        if self.window_size != other.window_size
            || self.n_queries != other.n_queries
            || self.n_keys != other.n_keys
            || self.fused.len() != other.fused.len()
        {
            return f64::INFINITY;
        }
        let fused_a = self.fused.iter().flat_map(|w| w.flat());
        let fused_b = other.fused.iter().flat_map(|w| w.flat());
        self.logits
            .iter()
            .zip(&other.logits)
            .chain(self.weights.iter().zip(&other.weights))
            .chain(fused_a.zip(fused_b))
            .map(|(a, b)| rel_diff(*a, *b))
            .fold(0.0, f64::max)
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub(crate) fn check_inputs(
    queries: &[Window],
    kv: &[(Window, Window)],
    cfg: &HeadConfig,
) -> Result<()> {
    if cfg.window_size == 0 || cfg.channels == 0 {
        return contract("head window size and channels must be positive");
    }
    if queries.is_empty() || kv.is_empty() {
        return contract("attention needs at least one query and one key/value pair");
    }
    let fits = |w: &Window| w.channels() == cfg.channels && w.size() == cfg.window_size;
    if let Some(i) = queries.iter().position(|w| !fits(w)) {
        return contract(format!(
            "query window {i} is {}x{}x{}, head expects {}x{}x{}",
            queries[i].channels(),
            queries[i].size(),
            queries[i].size(),
            cfg.channels,
            cfg.window_size,
            cfg.window_size
        ));
    }
    if let Some(i) = kv.iter().position(|(k, v)| !fits(k) || !fits(v)) {
        return contract(format!("key/value pair {i} does not match the head shape"));
    }
    Ok(())
}

/// Runs one head through the kernel registered under `level`.
pub fn window_attention(
    queries: &[Window],
    kv: &[(Window, Window)],
    cfg: &HeadConfig,
    level: &str,
) -> Result<AttentionResult> {
    default_registry().get(level)?.attend(queries, kv, cfg)
}

/// Attention output for every shifted copy of the query, over the distinct
/// key samples and without the mask. For each `a` the output equals the
/// unshifted output cyclically shifted by `a`, which is why leaving queries
/// unshifted loses nothing.
pub fn qshift_study(
    q: &Window,
    kv: &[(Window, Window)],
    r: usize,
) -> Result<Vec<(ShiftOffset, Window)>> {
    let cfg = HeadConfig::new(r, q.channels()).with_mask(false);
    check_inputs(std::slice::from_ref(q), kv, &cfg)?;
    let dedup = enumerate_shifts(r, ShiftMode::Dedup);
    let keys: Vec<Vec<Window>> = kv
        .iter()
        .map(|(k, _)| {
            dedup
                .offsets()
                .iter()
                .map(|&s| shift_window(k, s))
                .collect()
        })
        .collect();
    let values: Vec<Vec<Window>> = kv
        .iter()
        .map(|(_, v)| {
            dedup
                .offsets()
                .iter()
                .map(|&s| shift_window(v, s))
                .collect()
        })
        .collect();
    let scale = 1.0 / (cfg.d_k() as f64).sqrt();
    let full = enumerate_shifts(r, ShiftMode::Full);
    let mut out = Vec::with_capacity(full.len());
    for &a in full.offsets() {
        let qa = shift_window(q, a);
        let mut logits: Vec<f64> = keys
            .iter()
            .flat_map(|ks| ks.iter().map(|k| dot(qa.flat(), k.flat()) * scale))
            .collect();
        softmax_in_place(&mut logits);
        let mut fused = Window::zeros(q.channels(), r);
        for (w, v) in logits.iter().zip(values.iter().flatten()) {
            axpy(fused.flat_mut(), *w, v.flat());
        }
        out.push((a, fused));
    }
    Ok(out)
}
