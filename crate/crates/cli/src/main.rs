//! `shiftwin`: verification suite, kernel benchmark, synthetic matching and
//! mask emission.
//!
//! Exit codes: 0 success, 1 failure, 2 usage error. Settings come from, in
//! increasing priority: built-in defaults, a `--config` file of `key=value`
//! lines, explicit flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use shiftwin::bench::{run_bench, BenchConfig};
use shiftwin::export::{heatmap_csv, mask_csv, pgm_bytes};
use shiftwin::matcher::{run_match, Scenario};
use shiftwin::verify::{run_suite, VerifyContext};
use shiftwin::{default_registry, spatial_mask, Error, MultiScaleConfig};

#[derive(Parser)]
#[command(
    name = "shiftwin",
    version,
    about = "Multi-scale cyclic-shifting window attention"
)]
struct Cli {
    /// Cap on worker threads for the attention kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// File of `key=value` lines; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite; exit 0 iff every property passes.
    Verify(VerifyArgs),
    /// Time one multi-head pass per optimization level.
    Bench(BenchArgs),
    /// Localize a planted template in a synthetic search map.
    Match(MatchArgs),
    /// Print the spatial mask grid as CSV.
    Mask(MaskArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Random seeds per property (default 20).
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sizes as `d:hz:hs` (default 64:8:24).
    #[arg(long)]
    sizes: Option<String>,
    /// Comma-separated window size per head (default 1,2,4,8,1,2,4,8).
    #[arg(long)]
    windows: Option<String>,
    /// Comma-separated levels (default all four).
    #[arg(long)]
    levels: Option<String>,
    /// Timed runs per level; the median is reported (default 5).
    #[arg(long)]
    iters: Option<usize>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Plant position `y x` in the search map.
    #[arg(long, num_args = 2, value_names = ["Y", "X"])]
    plant: Option<Vec<usize>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    /// Path stem for the heat map; writes `<stem>.csv` and `<stem>.pgm`.
    #[arg(long)]
    out_heatmap: Option<PathBuf>,
    /// Kernel to run (default rmq_peri_prog).
    #[arg(long)]
    level: Option<String>,
    /// Sizes as `d:hz:hs` (default 64:8:24).
    #[arg(long)]
    sizes: Option<String>,
}

#[derive(Args)]
struct MaskArgs {
    /// Window size.
    #[arg(long)]
    r: Option<i64>,
}

/// A failed run: usage problems exit 2, everything else 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Head { .. }
            | Error::NonDivisible { .. }
            | Error::UnknownKernel(_)
            | Error::Parse { .. } => Failure::Usage(e.to_string()),
            Error::Contract(_) | Error::Io(_) => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// `key=value` settings from `--config`.
struct FileConfig {
    values: BTreeMap<String, String>,
}

const KNOWN_KEYS: [&str; 14] = [
    "threads",
    "seeds",
    "sizes",
    "windows",
    "levels",
    "iters",
    "out",
    "seed",
    "plant",
    "sigma",
    "distractors",
    "out-heatmap",
    "level",
    "r",
];

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        let Some(path) = path else {
            return Ok(Self { values });
        };
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!(
                    "{}:{}: expected key=value",
                    path.display(),
                    i + 1
                )));
            };
            let key = key.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(usage(format!(
                    "{}:{}: unknown key `{key}`",
                    path.display(),
                    i + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    /// The flag if given, else the file value, else `None`.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config value `{key}={v}` is invalid"))),
        }
    }
}

fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>, Failure> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| usage(format!("bad {what} `{s}`")))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let file = FileConfig::load(cli.config.as_deref())?;
    if let Some(n) = file.pick(cli.threads, "threads")? {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Verify(a) => verify(&file, a),
        Command::Bench(a) => bench(&file, a),
        Command::Match(a) => match_cmd(&file, a),
        Command::Mask(a) => mask(&file, a),
    }
}

fn verify(file: &FileConfig, a: VerifyArgs) -> Result<ExitCode, Failure> {
    let seeds = file.pick(a.seeds, "seeds")?.unwrap_or(20);
    let ctx = VerifyContext::new(default_registry());
    let outcomes = run_suite(&ctx, seeds);
    for o in &outcomes {
        println!("{}", o.line());
    }
    Ok(if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn bench(file: &FileConfig, a: BenchArgs) -> Result<ExitCode, Failure> {
    let mut cfg = BenchConfig::default();
    if let Some(sizes) = file.pick(a.sizes, "sizes")? {
        cfg.set_sizes(&sizes)?;
    }
    if let Some(w) = file.pick(a.windows, "windows")? {
        cfg.windows = parse_list(&w, "window size")?;
    }
    if let Some(l) = file.pick(a.levels, "levels")? {
        cfg.levels = parse_list(&l, "level")?;
    }
    if let Some(n) = file.pick(a.iters, "iters")? {
        cfg.iters = n;
    }
    let report = run_bench(&cfg, default_registry())?;
    let csv = report.to_csv();
    match file.pick(a.out, "out")? {
        Some(path) => fs::write(path, csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn match_cmd(file: &FileConfig, a: MatchArgs) -> Result<ExitCode, Failure> {
    let mut s = Scenario::default();
    if let Some(seed) = file.pick(a.seed, "seed")? {
        s.seed = seed;
    }
    let plant = match a.plant {
        Some(p) => Some(p),
        None => file
            .values
            .get("plant")
            .map(|v| {
                v.split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| usage(format!("config value `plant={v}` is invalid")))
            })
            .transpose()?,
    };
    if let Some(p) = plant {
        let [y, x] = p[..] else {
            return Err(usage("plant needs two values: y x"));
        };
        s.plant = (y, x);
    }
    if let Some(sigma) = file.pick(a.sigma, "sigma")? {
        s.noise_sigma = sigma;
    }
    if let Some(n) = file.pick(a.distractors, "distractors")? {
        s.distractors = n;
    }
    if let Some(sizes) = file.pick(a.sizes, "sizes")? {
        let mut b = BenchConfig::default();
        b.set_sizes(&sizes)?;
        s.channels = b.channels;
        s.template = (b.template, b.template);
        s.search = (b.search, b.search);
    }
    s.validate()?;
    let mut cfg = MultiScaleConfig::default_for(s.channels)?;
    if let Some(level) = file.pick(a.level, "level")? {
        cfg = cfg.with_level(&level);
    }
    default_registry().get(&cfg.level)?;

    let result = run_match(&s, &cfg)?;
    if let Some(stem) = file.pick(a.out_heatmap, "out-heatmap")? {
        let csv_path = stem.with_extension("csv");
        let pgm_path = stem.with_extension("pgm");
        fs::write(&csv_path, heatmap_csv(&result.score_map)).map_err(Error::from)?;
        fs::write(&pgm_path, pgm_bytes(&result.score_map)?).map_err(Error::from)?;
    }
    println!("predicted {} {}", result.predicted.0, result.predicted.1);
    Ok(ExitCode::SUCCESS)
}

fn mask(file: &FileConfig, a: MaskArgs) -> Result<ExitCode, Failure> {
    let r = file
        .pick(a.r, "r")?
        .ok_or_else(|| usage("mask needs --r"))?;
    if r < 1 {
        return Err(usage(format!("--r must be at least 1, got {r}")));
    }
    print!("{}", mask_csv(&spatial_mask(r as usize)));
    Ok(ExitCode::SUCCESS)
}
