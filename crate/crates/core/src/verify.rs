//! The invariant suite behind `shiftwin verify`.
//!
//! Each property returns a named pass/fail outcome; failures carry the
//! counterexample (seed, level, offset) in `detail`.

use crate::attention::{
    qshift_study, rel_diff, spatial_mask, AttentionKernel, AttentionResult, HeadConfig,
    KernelRegistry, MaskGrid, MultiScaleConfig, NaiveFull, LEVEL_NAMES,
};
use crate::matcher::{run_match_with, Scenario};
use crate::rng::SplitMix64;
use crate::shift::{
    build_index_tables, enumerate_shifts, fold_duplicate_logits, shift_window, ShiftMode,
    ShiftOffset,
};
use crate::tensor::{dot, softmax_in_place};
use crate::window::Window;

pub const LADDER_TOLERANCE: f64 = 1e-9;
pub const DEGENERACY_TOLERANCE: f64 = 1e-12;
pub const FOLD_TOLERANCE: f64 = 1e-12;
pub const QSHIFT_TOLERANCE: f64 = 1e-9;

pub const MASK_GOLDEN: &str = "mask golden values";
pub const SHIFT_GROUP: &str = "shift group laws";
pub const INDEX_TABLES: &str = "index tables";
pub const FOLD_EXACTNESS: &str = "fold exactness";
pub const LADDER: &str = "ladder equivalence";
pub const R1_DEGENERACY: &str = "r=1 degeneracy";
pub const RMQ_QSHIFT: &str = "rmq query-shift";
pub const LOCALIZATION: &str = "localization exactness";

/// What the suite runs against. Tests substitute a registry or mask builder
/// with a deliberate bug to check that the suite notices.
#[derive(Clone, Copy)]
pub struct VerifyContext<'a> {
    pub registry: &'a KernelRegistry,
    pub mask: fn(usize) -> MaskGrid,
}

impl<'a> VerifyContext<'a> {
    pub fn new(registry: &'a KernelRegistry) -> Self {
        Self {
            registry,
            mask: spatial_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed: false,
            detail: detail.into(),
        }
    }

    /// `PASS name: detail` or `FAIL name: detail`.
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

/// Runs every property with `seeds` random seeds each.
pub fn run_suite(ctx: &VerifyContext, seeds: u64) -> Vec<Outcome> {
    vec![
        mask_golden(ctx),
        shift_group_laws(seeds),
        index_tables(seeds),
        fold_exactness(seeds),
        ladder_equivalence(ctx, seeds),
        r1_degeneracy(ctx, seeds),
        rmq_query_shift(seeds),
        localization_exactness(ctx),
    ]
}

fn random_window(rng: &mut SplitMix64, channels: usize, r: usize) -> Window {
    let data = (0..channels * r * r)
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    Window::new(channels, r, data).expect("shape")
}

fn random_kv(rng: &mut SplitMix64, n: usize, channels: usize, r: usize) -> Vec<(Window, Window)> {
    (0..n)
        .map(|_| {
            let k = random_window(rng, channels, r);
            (k, random_window(rng, channels, r))
        })
        .collect()
}

/// `−(x/r)² − (y/r)²` evaluated independently of the attention module.
fn closed_form_mask(r: usize, x: i64, y: i64) -> f64 {
    let r = r as f64;
    -((x * x + y * y) as f64) / (r * r)
}

pub fn mask_golden(ctx: &VerifyContext) -> Outcome {
    // values stated outright first, then every cell
    let mut checks: Vec<(usize, i64, i64)> = vec![(1, 0, 0), (2, 0, 0), (2, 1, 1), (8, 7, 7)];
    for r in [1usize, 2, 4, 8] {
        let ri = r as i64;
        for y in -ri + 1..ri {
            for x in -ri + 1..ri {
                checks.push((r, x, y));
            }
        }
    }
    for (r, x, y) in checks {
        let grid = (ctx.mask)(r);
        if grid.r() != r || grid.side() != 2 * r - 1 {
            return Outcome::fail(MASK_GOLDEN, format!("r={r} grid has wrong shape"));
        }
        let got = grid.get(ShiftOffset::new(x, y));
        let want = closed_form_mask(r, x, y);
        if got != want {
            return Outcome::fail(
                MASK_GOLDEN,
                format!("r={r} M({x},{y}) expected {want}, got {got}"),
            );
        }
    }
    Outcome::pass(MASK_GOLDEN, "r in {1,2,4,8}, M(0,0)=0, r=2 corner -0.5")
}

pub fn shift_group_laws(seeds: u64) -> Outcome {
    let mut cases = 0;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(seed);
        for r in [1usize, 2, 3, 4, 8] {
            let w = random_window(&mut rng, 2, r);
            let u = random_window(&mut rng, 2, r);
            let span = 3 * r as i64;
            let mut off = || {
                let x = rng.below(2 * span as usize + 1) as i64 - span;
                let y = rng.below(2 * span as usize + 1) as i64 - span;
                ShiftOffset::new(x, y)
            };
            let (a, b) = (off(), off());
            let fail = |law: &str| {
                Outcome::fail(
                    SHIFT_GROUP,
                    format!("{law} fails at seed {seed}, r={r}, a={a:?}, b={b:?}"),
                )
            };
            if shift_window(&w, ShiftOffset::ZERO) != w {
                return fail("identity");
            }
            if shift_window(&shift_window(&w, a), b) != shift_window(&w, a + b) {
                return fail("composition");
            }
            if shift_window(&w, a) != shift_window(&w, a.canonical(r)) {
                return fail("periodicity");
            }
            if shift_window(&shift_window(&w, a), -a) != w {
                return fail("inverse");
            }
            let before = dot(w.flat(), u.flat());
            let after = dot(shift_window(&w, a).flat(), shift_window(&u, a).flat());
            if rel_diff(before, after) > 1e-12 {
                return fail("inner-product invariance");
            }
            cases += 1;
        }
    }
    Outcome::pass(SHIFT_GROUP, format!("{cases} cases"))
}

pub fn index_tables(seeds: u64) -> Outcome {
    for r in [1usize, 2, 4, 8] {
        for mode in [ShiftMode::Full, ShiftMode::Dedup] {
            let set = enumerate_shifts(r, mode);
            let tables = match build_index_tables(r, &set) {
                Ok(t) => t,
                Err(e) => return Outcome::fail(INDEX_TABLES, format!("r={r}: {e}")),
            };
            for seed in 0..seeds.min(5) {
                let w = random_window(&mut SplitMix64::new(seed), 2, r);
                for (i, &off) in set.offsets().iter().enumerate() {
                    if tables.apply(i, &w) != shift_window(&w, off) {
                        return Outcome::fail(
                            INDEX_TABLES,
                            format!("r={r} {mode:?} offset {off:?} seed {seed}"),
                        );
                    }
                    let round_trip = tables
                        .inverse(i)
                        .iter()
                        .map(|&j| tables.forward(i)[j])
                        .enumerate()
                        .all(|(p, q)| p == q);
                    if !round_trip {
                        return Outcome::fail(
                            INDEX_TABLES,
                            format!("r={r} {mode:?} offset {off:?}: inverse is not an inverse"),
                        );
                    }
                }
            }
        }
    }
    Outcome::pass(INDEX_TABLES, "r in {1,2,4,8}, full and deduplicated")
}

pub fn fold_exactness(seeds: u64) -> Outcome {
    let mut worst: f64 = 0.0;
    for r in [2usize, 4, 8] {
        let full = enumerate_shifts(r, ShiftMode::Full);
        let mask = spatial_mask(r);
        for seed in 0..seeds {
            let mut rng = SplitMix64::new(seed);
            let q = random_window(&mut rng, 2, r);
            let k = random_window(&mut rng, 2, r);
            let scale = 1.0 / ((2 * r * r) as f64).sqrt();
            let logits: Vec<f64> = full
                .offsets()
                .iter()
                .map(|&o| dot(q.flat(), shift_window(&k, o).flat()) * scale + mask.get(o))
                .collect();
            let mut full_w = logits.clone();
            softmax_in_place(&mut full_w);
            let mut class_sums = vec![0.0; r * r];
            for (w, &c) in full_w.iter().zip(full.fold_map()) {
                class_sums[c] += w;
            }
            let mut folded = match fold_duplicate_logits(&full, &logits) {
                Ok(f) => f,
                Err(e) => return Outcome::fail(FOLD_EXACTNESS, format!("r={r}: {e}")),
            };
            softmax_in_place(&mut folded);
            for (a, b) in folded.iter().zip(&class_sums) {
                let dev = (a - b).abs();
                worst = worst.max(dev);
                if dev > FOLD_TOLERANCE {
                    return Outcome::fail(
                        FOLD_EXACTNESS,
                        format!("r={r} seed {seed}: deviation {dev:e}"),
                    );
                }
            }
        }
    }
    Outcome::pass(
        FOLD_EXACTNESS,
        format!("mask on, r in {{2,4,8}}, max deviation {worst:e}"),
    )
}

/// Every registered kernel other than the reference against the built-in
/// naive kernel, on small random heads.
pub fn ladder_equivalence(ctx: &VerifyContext, seeds: u64) -> Outcome {
    let mut names: Vec<&str> = ctx.registry.names();
    names.sort_by_key(|n| {
        LEVEL_NAMES
            .iter()
            .position(|l| l == n)
            .unwrap_or(usize::MAX)
    });
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for r in [1usize, 2, 4, 8] {
        for use_mask in [true, false] {
            for seed in 0..seeds {
                let mut rng = SplitMix64::new(seed);
                let channels = 2;
                let queries: Vec<Window> = (0..3)
                    .map(|_| random_window(&mut rng, channels, r))
                    .collect();
                let kv = random_kv(&mut rng, 3, channels, r);
                let cfg = HeadConfig::new(r, channels).with_mask(use_mask);
                let reference = match NaiveFull.attend(&queries, &kv, &cfg) {
                    Ok(res) => res,
                    Err(e) => return Outcome::fail(LADDER, format!("reference failed: {e}")),
                };
                for name in &names {
                    let result = ctx
                        .registry
                        .get(name)
                        .and_then(|k| k.attend(&queries, &kv, &cfg));
                    let dev = match result {
                        Ok(res) => res.max_deviation(&reference),
                        Err(e) => {
                            return Outcome::fail(LADDER, format!("level {name} errored: {e}"))
                        }
                    };
                    worst = worst.max(dev);
                    runs += 1;
                    if dev.is_nan() || dev > LADDER_TOLERANCE {
                        return Outcome::fail(
                            LADDER,
                            format!(
                                "level {name} deviates by {dev:e} at r={r}, mask {}, seed {seed}",
                                if use_mask { "on" } else { "off" }
                            ),
                        );
                    }
                }
            }
        }
    }
    Outcome::pass(
        LADDER,
        format!("{runs} runs, max relative deviation {worst:e}"),
    )
}

/// Plain softmax(q·k/√d)·v over pixel vectors, written without windows or
/// shifts.
pub fn flat_attention(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let d = queries.first().map_or(1, Vec::len) as f64;
    queries
        .iter()
        .map(|q| {
            let scores: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; values[0].len()];
            for (w, v) in e.iter().zip(values) {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += w / z * x;
                }
            }
            out
        })
        .collect()
}

pub fn r1_degeneracy(ctx: &VerifyContext, seeds: u64) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(seed);
        let channels = 1 + rng.below(8);
        let nq = 1 + rng.below(12);
        let nk = 1 + rng.below(12);
        let queries: Vec<Window> = (0..nq)
            .map(|_| random_window(&mut rng, channels, 1))
            .collect();
        let kv = random_kv(&mut rng, nk, channels, 1);
        let flat = |w: &Window| w.flat().to_vec();
        let expected = flat_attention(
            &queries.iter().map(flat).collect::<Vec<_>>(),
            &kv.iter().map(|(k, _)| flat(k)).collect::<Vec<_>>(),
            &kv.iter().map(|(_, v)| flat(v)).collect::<Vec<_>>(),
        );
        for name in ctx.registry.names() {
            for use_mask in [true, false] {
                let cfg = HeadConfig::new(1, channels).with_mask(use_mask);
                let res: AttentionResult = match ctx
                    .registry
                    .get(name)
                    .and_then(|k| k.attend(&queries, &kv, &cfg))
                {
                    Ok(res) => res,
                    Err(e) => return Outcome::fail(R1_DEGENERACY, format!("level {name}: {e}")),
                };
                for (got, want) in res.fused().iter().zip(&expected) {
                    for (a, b) in got.flat().iter().zip(want) {
                        let dev = rel_diff(*a, *b);
                        worst = worst.max(dev);
                        if dev > DEGENERACY_TOLERANCE {
                            return Outcome::fail(
                                R1_DEGENERACY,
                                format!("level {name} deviates by {dev:e} at seed {seed}"),
                            );
                        }
                    }
                }
            }
        }
    }
    Outcome::pass(
        R1_DEGENERACY,
        format!("max deviation from flat attention {worst:e}"),
    )
}

pub fn rmq_query_shift(seeds: u64) -> Outcome {
    let mut worst: f64 = 0.0;
    for r in [2usize, 4] {
        for seed in 0..seeds {
            let mut rng = SplitMix64::new(seed);
            let q = random_window(&mut rng, 2, r);
            let kv = random_kv(&mut rng, 3, 2, r);
            let outputs = match qshift_study(&q, &kv, r) {
                Ok(o) => o,
                Err(e) => return Outcome::fail(RMQ_QSHIFT, format!("r={r}: {e}")),
            };
            let base = outputs
                .iter()
                .find(|(a, _)| *a == ShiftOffset::ZERO)
                .map(|(_, w)| w.clone())
                .expect("zero offset present");
            for (a, out) in &outputs {
                let want = shift_window(&base, *a);
                for (x, y) in out.flat().iter().zip(want.flat()) {
                    let dev = rel_diff(*x, *y);
                    worst = worst.max(dev);
                    if dev > QSHIFT_TOLERANCE {
                        return Outcome::fail(
                            RMQ_QSHIFT,
                            format!("r={r} seed {seed} offset {a:?}: deviation {dev:e}"),
                        );
                    }
                }
            }
        }
    }
    Outcome::pass(RMQ_QSHIFT, format!("r in {{2,4}}, max deviation {worst:e}"))
}

/// Every plant offset of an 8×8 template in a 24×24 search map, noiseless,
/// default eight-head config.
pub fn localization_exactness(ctx: &VerifyContext) -> Outcome {
    let cfg = match MultiScaleConfig::default_for(64) {
        Ok(c) => c,
        Err(e) => return Outcome::fail(LOCALIZATION, e.to_string()),
    };
    let mut cases = 0;
    for py in 0..=16 {
        for px in 0..=16 {
            let s = Scenario {
                plant: (py, px),
                ..Scenario::default()
            };
            match run_match_with(&s, &cfg, ctx.registry) {
                Ok(m) if m.predicted == (py, px) => cases += 1,
                Ok(m) => {
                    return Outcome::fail(
                        LOCALIZATION,
                        format!(
                            "plant ({py},{px}) predicted ({},{}), seed {}",
                            m.predicted.0, m.predicted.1, s.seed
                        ),
                    )
                }
                Err(e) => return Outcome::fail(LOCALIZATION, format!("plant ({py},{px}): {e}")),
            }
        }
    }
    Outcome::pass(LOCALIZATION, format!("{cases}/289 plants exact"))
}
