//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::process::ExitCode;
use std::time::Instant;

use shiftwin::bench::{run_bench, BenchConfig};
use shiftwin::export::{mask_csv, parse_grid_csv};
use shiftwin::matcher::{run_match, Scenario};
use shiftwin::verify::{
    fold_exactness, index_tables, ladder_equivalence, localization_exactness, mask_golden,
    r1_degeneracy, rmq_query_shift, shift_group_laws, Outcome, VerifyContext,
};
use shiftwin::{default_registry, spatial_mask, MultiScaleConfig};

const SEEDS: u64 = 20;
const SHIFT_GROUP_SEEDS: u64 = 100;
const NOISY_SEEDS: u64 = 20;
const NOISY_REQUIRED: usize = 18;
/// Pinned from the first measured run (ratio 29 to 50 on one core).
const NAIVE_OVER_RMQ_MIN: f64 = 10.0;
/// The two fastest levels are a few milliseconds apart; five timed runs left
/// their medians within noise of each other.
const BENCH_ITERS: usize = 9;

struct Criterion {
    id: u32,
    passed: bool,
    detail: String,
}

impl Criterion {
    fn from_outcomes(id: u32, outcomes: &[Outcome]) -> Self {
        Self {
            id,
            passed: outcomes.iter().all(|o| o.passed),
            detail: outcomes
                .iter()
                .map(|o| format!("{}: {}", o.name, o.detail))
                .collect::<Vec<_>>()
                .join("; "),
        }
    }
}

fn ladder(ctx: &VerifyContext) -> Criterion {
    let start = Instant::now();
    let mut c = Criterion::from_outcomes(1, &[ladder_equivalence(ctx, SEEDS)]);
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        c.passed = false;
    }
    c.detail = format!("{} in {secs:.1} s", c.detail);
    c
}

/// Emitted CSV grids against `−(x/r)² − (y/r)²` evaluated here.
fn mask_grids(ctx: &VerifyContext) -> Criterion {
    let golden = mask_golden(ctx);
    let mut bad = Vec::new();
    for r in [1usize, 2, 4, 8] {
        let parsed = match parse_grid_csv(&mask_csv(&spatial_mask(r))) {
            Ok(g) => g,
            Err(e) => {
                bad.push(format!("r={r}: {e}"));
                continue;
            }
        };
        let side = 2 * r - 1;
        if (parsed.rows, parsed.cols) != (side, side) {
            bad.push(format!("r={r}: grid is {}x{}", parsed.rows, parsed.cols));
            continue;
        }
        let rf = r as f64;
        for (i, &got) in parsed.data.iter().enumerate() {
            let y = (i / side) as f64 - (rf - 1.0);
            let x = (i % side) as f64 - (rf - 1.0);
            let want = -(x / rf).powi(2) - (y / rf).powi(2);
            if got != want {
                bad.push(format!("r={r} M({x},{y}) emitted {got}, expected {want}"));
            }
        }
    }
    let mut c = Criterion::from_outcomes(3, &[golden]);
    if bad.is_empty() {
        c.detail
            .push_str("; emitted CSV grids exact for r in {1,2,4,8}");
    } else {
        c.passed = false;
        c.detail = format!("{}; {}", c.detail, bad.join("; "));
    }
    c
}

fn localization(ctx: &VerifyContext) -> Criterion {
    let exact = localization_exactness(ctx);
    let cfg = MultiScaleConfig::default_for(64).expect("default config");
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 1..=NOISY_SEEDS {
        let s = Scenario {
            seed,
            noise_sigma: 0.05,
            distractors: 2,
            ..Scenario::default()
        };
        match run_match(&s, &cfg) {
            Ok(m) => {
                let dy = m.predicted.0.abs_diff(s.plant.0);
                let dx = m.predicted.1.abs_diff(s.plant.1);
                if dy <= 1 && dx <= 1 {
                    hits += 1;
                } else {
                    misses.push(format!("seed {seed} -> {:?}", m.predicted));
                }
            }
            Err(e) => misses.push(format!("seed {seed}: {e}")),
        }
    }
    let mut c = Criterion::from_outcomes(7, &[exact]);
    c.passed &= hits >= NOISY_REQUIRED;
    c.detail = format!(
        "{}; noisy with 2 distractors: {hits}/{NOISY_SEEDS} within 1 px (need {NOISY_REQUIRED})",
        c.detail
    );
    if !misses.is_empty() {
        c.detail = format!("{} [{}]", c.detail, misses.join(", "));
    }
    c
}

fn bench_ordering() -> Criterion {
    let cfg = BenchConfig {
        iters: BENCH_ITERS,
        ..BenchConfig::default()
    };
    let report = match run_bench(&cfg, default_registry()) {
        Ok(r) => r,
        Err(e) => {
            return Criterion {
                id: 8,
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let t = |l: &str| report.row(l).map_or(f64::NAN, |r| r.median_ms);
    let (naive, rmq, peri, prog) = (t("naive_full"), t("rmq"), t("rmq_peri"), t("rmq_peri_prog"));
    let ratio = naive / rmq;
    Criterion {
        id: 8,
        passed: naive > rmq && rmq > peri && peri >= prog && ratio >= NAIVE_OVER_RMQ_MIN,
        detail: format!(
            "median ms over {} runs: naive_full {naive:.1}, rmq {rmq:.1}, rmq_peri {peri:.1}, \
             rmq_peri_prog {prog:.1}; naive_full/rmq {ratio:.1} (need >= {NAIVE_OVER_RMQ_MIN})",
            cfg.iters
        ),
    }
}

fn main() -> ExitCode {
    let ctx = VerifyContext::new(default_registry());
    let runs: Vec<Box<dyn Fn() -> Criterion>> = vec![
        Box::new(|| ladder(&ctx)),
        Box::new(|| Criterion::from_outcomes(2, &[r1_degeneracy(&ctx, SEEDS)])),
        Box::new(|| mask_grids(&ctx)),
        Box::new(|| Criterion::from_outcomes(4, &[fold_exactness(SEEDS)])),
        Box::new(|| Criterion::from_outcomes(5, &[rmq_query_shift(SEEDS)])),
        Box::new(|| {
            Criterion::from_outcomes(
                6,
                &[
                    shift_group_laws(SHIFT_GROUP_SEEDS),
                    index_tables(SHIFT_GROUP_SEEDS),
                ],
            )
        }),
        Box::new(|| localization(&ctx)),
        Box::new(bench_ordering),
    ];
    let mut all = true;
    for run in runs {
        let c = run();
        all &= c.passed;
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {}: {}", c.id, c.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
