//! Interchangeable attention kernels, selected by name.
//!
//! All built-in kernels return the same [`AttentionResult`] up to rounding;
//! they differ only in how much work they do:
//!
//! | name            | query shifts | key/value samples | shifted copies     |
//! |-----------------|--------------|-------------------|--------------------|
//! | `naive_full`    | all (2r−1)²  | all (2r−1)²       | materialized       |
//! | `rmq`           | none         | all (2r−1)²       | materialized       |
//! | `rmq_peri`      | none         | r² distinct       | materialized       |
//! | `rmq_peri_prog` | none         | r² distinct       | index permutations |

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use super::{check_inputs, class_bias, full_offset_bias, AttentionResult, HeadConfig};
use crate::error::{Error, Result};
use crate::shift::{
    build_index_tables, enumerate_shifts, shift_window, ShiftMode, ShiftOffset, ShiftSet,
};
use crate::tensor::{axpy, axpy4, dot, dot4, softmax_in_place};
use crate::window::Window;

/// Built-in kernel names, slowest first.
pub const LEVEL_NAMES: [&str; 4] = ["naive_full", "rmq", "rmq_peri", "rmq_peri_prog"];

pub trait AttentionKernel: Send + Sync {
    fn name(&self) -> &str;

    fn attend(
        &self,
        queries: &[Window],
        kv: &[(Window, Window)],
        cfg: &HeadConfig,
    ) -> Result<AttentionResult>;
}

/// Kernels keyed by name, in registration order.
#[derive(Clone, Default)]
pub struct KernelRegistry {
    kernels: Vec<Arc<dyn AttentionKernel>>,
}

impl KernelRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(NaiveFull);
        reg.register(Rmq);
        reg.register(RmqPeri);
        reg.register(RmqPeriProg);
        reg
    }

    /// Adds `kernel`, replacing any kernel already registered under its name.
    pub fn register(&mut self, kernel: impl AttentionKernel + 'static) {
        let kernel: Arc<dyn AttentionKernel> = Arc::new(kernel);
        match self.kernels.iter_mut().find(|k| k.name() == kernel.name()) {
            Some(slot) => *slot = kernel,
            None => self.kernels.push(kernel),
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AttentionKernel>> {
        self.kernels
            .iter()
            .find(|k| k.name() == name)
            .cloned()
            .ok_or_else(|| Error::UnknownKernel(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.kernels.iter().map(|k| k.name()).collect()
    }
}

impl std::fmt::Debug for KernelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

pub fn default_registry() -> &'static KernelRegistry {
    static REGISTRY: OnceLock<KernelRegistry> = OnceLock::new();
    REGISTRY.get_or_init(KernelRegistry::builtin)
}

/// Shifted copies of each window, laid out `[window][offset][values]`.
fn materialize<'a>(
    windows: impl Iterator<Item = &'a Window>,
    offsets: &[ShiftOffset],
) -> Vec<Vec<Window>> {
    windows
        .map(|w| offsets.iter().map(|&s| shift_window(w, s)).collect())
        .collect()
}

/// One query row against materialized banks: returns logits and weights over
/// `(key, offset)` plus the fused window.
fn bank_row(
    q: &[f64],
    keys: &[Vec<Window>],
    values: &[Vec<Window>],
    bias: &[f64],
    scale: f64,
    template: &Window,
) -> (Vec<f64>, Vec<f64>, Window) {
    let mut logits = Vec::with_capacity(keys.len() * bias.len());
    for ks in keys {
        for (k, b) in ks.iter().zip(bias) {
            logits.push(dot(q, k.flat()) * scale + b);
        }
    }
    let mut weights = logits.clone();
    softmax_in_place(&mut weights);
    let mut fused = Window::zeros(template.channels(), template.size());
    for (w, v) in weights.iter().zip(values.iter().flatten()) {
        axpy(fused.flat_mut(), *w, v.flat());
    }
    (logits, weights, fused)
}

/// Collapses a full-set row (`n_keys × (2r−1)²`) onto distinct classes. Same
/// arithmetic as [`crate::shift::fold_duplicate_logits`], without per-key allocation.
fn fold_row(full: &ShiftSet, logits: Vec<f64>, weights: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = full.len();
    let nc = full.num_classes();
    if s == nc {
        return (logits, weights);
    }
    let map = full.fold_map();
    let n_keys = logits.len() / s;
    let mut folded_logits = vec![f64::NEG_INFINITY; n_keys * nc];
    let mut folded_weights = vec![0.0; n_keys * nc];
    let singleton: Vec<bool> = full.class_multiplicity().iter().map(|&m| m == 1).collect();
    let mut sums = vec![0.0; nc];
    for k in 0..n_keys {
        let row = &logits[k * s..(k + 1) * s];
        let out = &mut folded_logits[k * nc..(k + 1) * nc];
        for (&c, &l) in map.iter().zip(row) {
            out[c] = out[c].max(l);
        }
        sums.iter_mut().for_each(|v| *v = 0.0);
        for (&c, &l) in map.iter().zip(row) {
            if !singleton[c] {
                sums[c] += (l - out[c]).exp();
            }
        }
        // a lone member's log-sum-exp is the member itself
        for ((o, sum), &lone) in out.iter_mut().zip(&sums).zip(&singleton) {
            if !lone {
                *o += sum.ln();
            }
        }
        for (&c, &w) in map.iter().zip(&weights[k * s..(k + 1) * s]) {
            folded_weights[k * nc + c] += w;
        }
    }
    (folded_logits, folded_weights)
}

fn scale_for(cfg: &HeadConfig) -> f64 {
    1.0 / (cfg.d_k() as f64).sqrt()
}

/// Shifts both queries and keys over the full offset range and keeps the
/// unshifted-query row; the other rows are computed and discarded.
pub struct NaiveFull;

impl AttentionKernel for NaiveFull {
    fn name(&self) -> &str {
        "naive_full"
    }

    fn attend(
        &self,
        queries: &[Window],
        kv: &[(Window, Window)],
        cfg: &HeadConfig,
    ) -> Result<AttentionResult> {
        check_inputs(queries, kv, cfg)?;
        let r = cfg.window_size;
        let full = enumerate_shifts(r, ShiftMode::Full);
        let bias = full_offset_bias(r, cfg.use_mask);
        let scale = scale_for(cfg);
        let keys = materialize(kv.iter().map(|p| &p.0), full.offsets());
        let values = materialize(kv.iter().map(|p| &p.1), full.offsets());
        let rows = queries
            .par_iter()
            .map(|q| {
                let mut kept = None;
                for &a in full.offsets() {
                    let qa = shift_window(q, a);
                    let row = bank_row(qa.flat(), &keys, &values, &bias, scale, q);
                    if a == ShiftOffset::ZERO {
                        kept = Some(row);
                    } else {
                        std::hint::black_box(&row);
                    }
                }
                let (l, w, f) = kept.expect("zero offset is in the full set");
                let (l, w) = fold_row(&full, l, w);
                (l, w, f)
            })
            .collect();
        Ok(AttentionResult::from_rows(
            r,
            kv.len(),
            class_bias(r, cfg.use_mask),
            rows,
        ))
    }
}

/// Unshifted queries against all `(2r−1)²` materialized key/value shifts.
pub struct Rmq;

impl AttentionKernel for Rmq {
    fn name(&self) -> &str {
        "rmq"
    }

    fn attend(
        &self,
        queries: &[Window],
        kv: &[(Window, Window)],
        cfg: &HeadConfig,
    ) -> Result<AttentionResult> {
        check_inputs(queries, kv, cfg)?;
        let r = cfg.window_size;
        let full = enumerate_shifts(r, ShiftMode::Full);
        let bias = full_offset_bias(r, cfg.use_mask);
        let scale = scale_for(cfg);
        let keys = materialize(kv.iter().map(|p| &p.0), full.offsets());
        let values = materialize(kv.iter().map(|p| &p.1), full.offsets());
        let rows = queries
            .par_iter()
            .map(|q| {
                let (l, w, f) = bank_row(q.flat(), &keys, &values, &bias, scale, q);
                let (l, w) = fold_row(&full, l, w);
                (l, w, f)
            })
            .collect();
        Ok(AttentionResult::from_rows(
            r,
            kv.len(),
            class_bias(r, cfg.use_mask),
            rows,
        ))
    }
}

/// Unshifted queries against the `r²` distinct materialized samples, with the
/// duplicates' mask mass folded into a per-class bias.
pub struct RmqPeri;

impl AttentionKernel for RmqPeri {
    fn name(&self) -> &str {
        "rmq_peri"
    }

    fn attend(
        &self,
        queries: &[Window],
        kv: &[(Window, Window)],
        cfg: &HeadConfig,
    ) -> Result<AttentionResult> {
        check_inputs(queries, kv, cfg)?;
        let r = cfg.window_size;
        let dedup = enumerate_shifts(r, ShiftMode::Dedup);
        let bias = class_bias(r, cfg.use_mask);
        let scale = scale_for(cfg);
        let keys = materialize(kv.iter().map(|p| &p.0), dedup.offsets());
        let values = materialize(kv.iter().map(|p| &p.1), dedup.offsets());
        let rows = queries
            .par_iter()
            .map(|q| bank_row(q.flat(), &keys, &values, &bias, scale, q))
            .collect();
        Ok(AttentionResult::from_rows(r, kv.len(), bias, rows))
    }
}

/// Like [`RmqPeri`] but never builds shifted copies: the inner product with a
/// shifted key is taken against the unshifted key after permuting the query's
/// coordinates with the inverse index table, and values are summed per shift
/// class before a single permutation per class.
pub struct RmqPeriProg;

impl AttentionKernel for RmqPeriProg {
    fn name(&self) -> &str {
        "rmq_peri_prog"
    }

    fn attend(
        &self,
        queries: &[Window],
        kv: &[(Window, Window)],
        cfg: &HeadConfig,
    ) -> Result<AttentionResult> {
        check_inputs(queries, kv, cfg)?;
        let r = cfg.window_size;
        let nc = r * r;
        let dedup = enumerate_shifts(r, ShiftMode::Dedup);
        let tables = build_index_tables(r, &dedup)?;
        let bias = class_bias(r, cfg.use_mask);
        let scale = scale_for(cfg);
        let dim = cfg.d_k();
        let n_keys = kv.len();

        // classes are processed four at a time so each key or value row is
        // read once per block: a small matrix product rather than a
        // matrix-vector product per shifted copy
        let block = if nc >= 4 { 4 } else { 1 };
        let rows = queries
            .par_iter()
            .map(|q| {
                let mut permuted = vec![0.0; block * dim];
                let mut logits = vec![0.0; n_keys * nc];
                for c0 in (0..nc).step_by(block) {
                    for (j, p) in permuted.chunks_exact_mut(dim).enumerate() {
                        crate::shift::gather_planes(q.flat(), tables.inverse(c0 + j), p);
                    }
                    for (k, (key, _)) in kv.iter().enumerate() {
                        let row = &mut logits[k * nc + c0..k * nc + c0 + block];
                        if block == 4 {
                            let d = dot4(&permuted, key.flat());
                            for j in 0..4 {
                                row[j] = d[j] * scale + bias[c0 + j];
                            }
                        } else {
                            row[0] = dot(&permuted, key.flat()) * scale + bias[c0];
                        }
                    }
                }
                let mut weights = logits.clone();
                softmax_in_place(&mut weights);

                let mut fused = Window::zeros(cfg.channels, r);
                let mut acc = vec![0.0; block * dim];
                for c0 in (0..nc).step_by(block) {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    for (k, (_, value)) in kv.iter().enumerate() {
                        let w = &weights[k * nc + c0..k * nc + c0 + block];
                        if block == 4 {
                            axpy4(&mut acc, [w[0], w[1], w[2], w[3]], value.flat());
                        } else {
                            axpy(&mut acc, w[0], value.flat());
                        }
                    }
                    for (j, a) in acc.chunks_exact(dim).enumerate() {
                        let table = tables.forward(c0 + j);
                        for (out, src) in fused
                            .flat_mut()
                            .chunks_exact_mut(nc)
                            .zip(a.chunks_exact(nc))
                        {
                            for (o, &i) in out.iter_mut().zip(table) {
                                *o += src[i];
                            }
                        }
                    }
                }
                (logits, weights, fused)
            })
            .collect();
        Ok(AttentionResult::from_rows(r, n_keys, bias, rows))
    }
}
