//! The `shiftwin` binary driven as a subprocess.

use std::fs;
use std::process::{Command, Output};

use shiftwin::bench::{BenchReport, CSV_HEADER};
use shiftwin::export::{parse_grid_csv, parse_pgm};
use tempfile::tempdir;

/// Small enough that every level finishes in well under a second.
const SMALL_SIZES: &str = "8:8:16";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftwin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn verify_passes_every_property() {
    let o = run(&["verify", "--seeds", "20"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 8);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
    for name in [
        "ladder equivalence",
        "shift group laws",
        "r=1 degeneracy",
        "mask golden values",
        "fold exactness",
        "localization exactness",
    ] {
        assert!(out.contains(name), "{name}");
    }
}

#[test]
fn mask_grids() {
    assert_eq!(stdout(&run(&["mask", "--r", "1"])), "0\n");
    assert_eq!(
        stdout(&run(&["mask", "--r", "2"])),
        "-0.5,-0.25,-0.5\n-0.25,0,-0.25\n-0.5,-0.25,-0.5\n"
    );
    let o = run(&["mask", "--r", "8"]);
    let g = parse_grid_csv(&stdout(&o)).unwrap();
    assert_eq!((g.rows, g.cols), (15, 15));
    assert_eq!(g.at(0, 0), -1.53125);
    assert_eq!(g.at(14, 14), -1.53125);
    assert_eq!(g.at(7, 7), 0.0);
}

#[test]
fn mask_usage_errors() {
    assert_eq!(code(&run(&["mask", "--r", "0"])), 2);
    assert_eq!(code(&run(&["mask", "--r", "-3"])), 2);
    assert_eq!(code(&run(&["mask"])), 2);
    assert_eq!(code(&run(&["mask", "--r", "two"])), 2);
}

#[test]
fn match_reports_the_plant() {
    let o = run(&[
        "match",
        "--seed",
        "1",
        "--plant",
        "4",
        "6",
        "--sigma",
        "0",
        "--distractors",
        "0",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "predicted 4 6\n");
    let o = run(&[
        "match",
        "--seed",
        "1",
        "--plant",
        "0",
        "0",
        "--sigma",
        "0",
        "--distractors",
        "0",
    ]);
    assert_eq!(stdout(&o), "predicted 0 0\n");
}

#[test]
fn heat_maps_are_byte_identical_across_levels() {
    let dir = tempdir().unwrap();
    let mut csvs = Vec::new();
    for level in ["naive_full", "rmq_peri_prog"] {
        let stem = dir.path().join(level);
        let o = run(&[
            "match",
            "--seed",
            "1",
            "--plant",
            "4",
            "6",
            "--sigma",
            "0",
            "--distractors",
            "0",
            "--level",
            level,
            "--out-heatmap",
            stem.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        assert_eq!(stdout(&o), "predicted 4 6\n");
        let csv = fs::read(stem.with_extension("csv")).unwrap();
        let grid = parse_grid_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
        assert_eq!((grid.rows, grid.cols), (24, 24));
        let (rows, cols, _) = parse_pgm(&fs::read(stem.with_extension("pgm")).unwrap()).unwrap();
        assert_eq!((rows, cols), (24, 24));
        csvs.push(csv);
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn match_usage_errors() {
    assert_eq!(code(&run(&["match", "--plant", "17", "0"])), 2);
    assert_eq!(code(&run(&["match", "--plant", "4"])), 2);
    assert_eq!(code(&run(&["match", "--level", "fast"])), 2);
    assert_eq!(code(&run(&["match", "--sigma", "-1"])), 2);
}

fn bench_rows(csv: &str) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}

#[test]
fn bench_rows_follow_the_ladder() {
    let o = run(&[
        "bench",
        "--sizes",
        SMALL_SIZES,
        "--iters",
        "1",
        "--levels",
        "rmq_peri_prog,naive_full,rmq,rmq_peri",
    ]);
    assert_eq!(code(&o), 0);
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    assert_eq!(
        bench_rows(&csv),
        ["naive_full", "rmq", "rmq_peri", "rmq_peri_prog"]
    );
    let report = BenchReport::parse_csv(&csv).unwrap();
    assert_eq!(report.rows[0].speedup, Some(1.0));
    assert_eq!(report.config.channels, 8);
    assert_eq!(report.config.warmup, 3);
}

#[test]
fn bench_writes_to_a_file() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let o = run(&[
        "bench",
        "--sizes",
        SMALL_SIZES,
        "--iters",
        "1",
        "--levels",
        "rmq",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    let csv = fs::read_to_string(&path).unwrap();
    assert_eq!(bench_rows(&csv), ["rmq"]);
}

#[test]
fn bench_usage_errors() {
    assert_eq!(code(&run(&["bench", "--sizes", "8:8"])), 2);
    assert_eq!(code(&run(&["bench", "--sizes", "8:8:20"])), 2);
    assert_eq!(
        code(&run(&["bench", "--sizes", SMALL_SIZES, "--levels", "fast"])),
        2
    );
    assert_eq!(
        code(&run(&["bench", "--sizes", SMALL_SIZES, "--windows", "1,x"])),
        2
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(
        &cfg,
        format!("# small run\nsizes = {SMALL_SIZES}\niters=1\nlevels=rmq,rmq_peri\n"),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let o = run(&["--config", cfg, "bench"]);
    assert_eq!(code(&o), 0);
    assert_eq!(bench_rows(&stdout(&o)), ["rmq", "rmq_peri"]);
    let o = run(&["--config", cfg, "bench", "--levels", "rmq_peri_prog"]);
    assert_eq!(bench_rows(&stdout(&o)), ["rmq_peri_prog"]);

    let plant = dir.path().join("plant.conf");
    fs::write(&plant, "plant = 0 0\nout_heatmap = unused\n").unwrap();
    let plant = plant.to_str().unwrap();
    let o = run(&[
        "--config",
        plant,
        "match",
        "--out-heatmap",
        dir.path().join("hm").to_str().unwrap(),
    ]);
    assert_eq!(stdout(&o), "predicted 0 0\n");
    assert!(dir.path().join("hm.csv").exists());
    assert!(!dir.path().join("unused.csv").exists());
    let o = run(&["--config", plant, "match", "--plant", "4", "6"]);
    assert_eq!(stdout(&o), "predicted 4 6\n");
}

#[test]
fn bad_config_files_are_usage_errors() {
    let dir = tempdir().unwrap();
    let unknown = dir.path().join("a.conf");
    fs::write(&unknown, "speed = 11\n").unwrap();
    assert_eq!(
        code(&run(&[
            "--config",
            unknown.to_str().unwrap(),
            "mask",
            "--r",
            "2"
        ])),
        2
    );
    let malformed = dir.path().join("b.conf");
    fs::write(&malformed, "r 2\n").unwrap();
    assert_eq!(
        code(&run(&["--config", malformed.to_str().unwrap(), "mask"])),
        2
    );
    let missing = dir.path().join("none.conf");
    assert_eq!(
        code(&run(&[
            "--config",
            missing.to_str().unwrap(),
            "mask",
            "--r",
            "2"
        ])),
        2
    );
    let ok = dir.path().join("c.conf");
    fs::write(&ok, "r = 2\n").unwrap();
    assert_eq!(
        stdout(&run(&["--config", ok.to_str().unwrap(), "mask"]))
            .lines()
            .count(),
        3
    );
}

#[test]
fn thread_cap_and_unknown_subcommands() {
    assert_eq!(code(&run(&["--threads", "0", "mask", "--r", "2"])), 2);
    assert_eq!(code(&run(&["--threads", "1", "mask", "--r", "2"])), 0);
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}
