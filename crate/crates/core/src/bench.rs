//! Wall-clock comparison of the attention kernels on one multi-head pass.

use std::time::Instant;

use crate::attention::{
    multi_head_attention_traced, KernelRegistry, MultiScaleConfig, ProjectionSet, LEVEL_NAMES,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub channels: usize,
    /// Square template side.
    pub template: usize,
    /// Square search side.
    pub search: usize,
    pub windows: Vec<usize>,
    pub levels: Vec<String>,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            template: 8,
            search: 24,
            windows: MultiScaleConfig::DEFAULT_WINDOWS.to_vec(),
            levels: LEVEL_NAMES.iter().map(|s| s.to_string()).collect(),
            iters: 5,
            warmup: 3,
            seed: 1,
        }
    }
}

impl BenchConfig {
    /// Parses `d:hz:hs`, e.g. `64:8:24`.
    pub fn set_sizes(&mut self, text: &str) -> Result<()> {
        let parts: Vec<usize> = text
            .split(':')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("sizes `{text}` must be d:hz:hs")))?;
        let [d, hz, hs] = parts[..] else {
            return Err(Error::Config(format!("sizes `{text}` must be d:hz:hs")));
        };
        self.channels = d;
        self.template = hz;
        self.search = hs;
        Ok(())
    }

    pub fn multi_scale(&self) -> Result<MultiScaleConfig> {
        let cfg = MultiScaleConfig::from_windows(self.channels, &self.windows, true)?;
        cfg.validate(
            self.channels,
            (self.template, self.template),
            (self.search, self.search),
        )?;
        Ok(cfg)
    }

    pub fn validate(&self, registry: &KernelRegistry) -> Result<()> {
        self.multi_scale()?;
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("no levels selected".into()));
        }
        for level in &self.levels {
            registry.get(level)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub level: String,
    pub median_ms: f64,
    /// `naive_full` median over this row's median; absent when the report has
    /// no `naive_full` row.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

pub const CSV_HEADER: &str =
    "level,median_ms,speedup_vs_naive,channels,template,search,windows,iters,warmup";

impl BenchReport {
    pub fn row(&self, level: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.level == level)
    }

    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let windows: Vec<String> = c.windows.iter().map(|w| w.to_string()).collect();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let speedup = r.speedup.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.level,
                r.median_ms,
                speedup,
                c.channels,
                c.template,
                c.search,
                windows.join(" "),
                c.iters,
                c.warmup
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<BenchReport> {
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, h)) if h == CSV_HEADER => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut config = None;
        let mut rows = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 9 {
                return Err(bad(n, "expected 9 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad integer"));
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
            let windows = cells[6].split(' ').map(num).collect::<Result<Vec<_>>>()?;
            rows.push(BenchRow {
                level: cells[0].to_string(),
                median_ms: real(cells[1])?,
                speedup: if cells[2].is_empty() {
                    None
                } else {
                    Some(real(cells[2])?)
                },
            });
            let row_cfg = (
                num(cells[3])?,
                num(cells[4])?,
                num(cells[5])?,
                windows,
                num(cells[7])?,
                num(cells[8])?,
            );
            config.get_or_insert(row_cfg);
        }
        let Some((channels, template, search, windows, iters, warmup)) = config else {
            return Err(bad(1, "no rows"));
        };
        Ok(BenchReport {
            config: BenchConfig {
                channels,
                template,
                search,
                windows,
                levels: rows.iter().map(|r| r.level.clone()).collect(),
                iters,
                warmup,
                ..BenchConfig::default()
            },
            rows,
        })
    }
}

/// Six decimals: nanosecond resolution for milliseconds, and CSV cells free
/// of binary rounding tails.
fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Times one full multi-head pass per level: `warmup` untimed runs, then the
/// median of `iters` timed runs. Rows follow the ladder order, with levels
/// outside the ladder appended in the order given.
pub fn run_bench(cfg: &BenchConfig, registry: &KernelRegistry) -> Result<BenchReport> {
    cfg.validate(registry)?;
    let ms = cfg.multi_scale()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let d = cfg.channels;
    let f_z = FeatureMap::from_fn(d, cfg.template, cfg.template, |_, _, _| rng.normal())?;
    let f_s = FeatureMap::from_fn(d, cfg.search, cfg.search, |_, _, _| rng.normal())?;
    let proj = ProjectionSet::identity();

    let ladder_pos = |l: &str| {
        LEVEL_NAMES
            .iter()
            .position(|n| *n == l)
            .unwrap_or(LEVEL_NAMES.len())
    };
    let mut levels: Vec<&String> = Vec::new();
    for l in &cfg.levels {
        if !levels.contains(&l) {
            levels.push(l);
        }
    }
    // stable sort keeps the given order among levels outside the ladder
    levels.sort_by_key(|l| ladder_pos(l));

    let mut rows = Vec::with_capacity(levels.len());
    for level in levels {
        let run_cfg = ms.clone().with_level(level);
        let pass = || multi_head_attention_traced(&f_z, &f_s, &run_cfg, &proj, registry);
        for _ in 0..cfg.warmup {
            std::hint::black_box(pass()?);
        }
        let mut times = Vec::with_capacity(cfg.iters);
        for _ in 0..cfg.iters {
            let start = Instant::now();
            std::hint::black_box(pass()?);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(BenchRow {
            level: level.clone(),
            median_ms: round6(median(times)),
            speedup: None,
        });
    }
    if let Some(base) = rows
        .iter()
        .find(|r| r.level == "naive_full")
        .map(|r| r.median_ms)
    {
        for r in &mut rows {
            r.speedup = Some(round6(base / r.median_ms));
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig {
            channels: 4,
            template: 4,
            search: 8,
            windows: vec![1, 2],
            levels: vec!["rmq_peri_prog".into(), "naive_full".into(), "rmq".into()],
            iters: 2,
            warmup: 1,
            seed: 3,
        }
    }

    #[test]
    fn rows_follow_ladder_order_and_ratios_use_naive() {
        let report = run_bench(&tiny(), &KernelRegistry::builtin()).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.level.as_str()).collect();
        assert_eq!(names, ["naive_full", "rmq", "rmq_peri_prog"]);
        let naive = report.row("naive_full").unwrap();
        assert_eq!(naive.speedup, Some(1.0));
        for r in &report.rows {
            let exact = naive.median_ms / r.median_ms;
            assert!((r.speedup.unwrap() - exact).abs() <= 5e-7);
        }
    }

    #[test]
    fn csv_round_trips() {
        let report = run_bench(&tiny(), &KernelRegistry::builtin()).unwrap();
        let parsed = BenchReport::parse_csv(&report.to_csv()).unwrap();
        assert_eq!(parsed.rows, report.rows);
        assert_eq!(parsed.to_csv(), report.to_csv());

        let mut no_naive = tiny();
        no_naive.levels = vec!["rmq".into()];
        let report = run_bench(&no_naive, &KernelRegistry::builtin()).unwrap();
        assert_eq!(report.rows[0].speedup, None);
        assert_eq!(
            BenchReport::parse_csv(&report.to_csv()).unwrap().rows,
            report.rows
        );
    }

    #[test]
    fn invalid_configs() {
        let mut c = BenchConfig::default();
        assert!(c.set_sizes("64:8").is_err());
        assert!(c.set_sizes("a:8:24").is_err());
        c.set_sizes("16:8:20").unwrap();
        assert!(c.validate(&KernelRegistry::builtin()).is_err());
        let mut c = tiny();
        c.levels = vec!["fast".into()];
        assert!(matches!(
            c.validate(&KernelRegistry::builtin()),
            Err(Error::UnknownKernel(_))
        ));
        let mut c = tiny();
        c.iters = 0;
        assert!(c.validate(&KernelRegistry::builtin()).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
