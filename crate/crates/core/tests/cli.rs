//! The `gnnfp` binary: subcommands, exit codes and output determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gnnfp::gnn::{save_model, GnnModel, ModelDims};
use tempfile::TempDir;

const SMALL: &[&str] = &["--cells", "2", "--tx", "2", "--rx", "2"];

fn gnnfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnnfp"))
        .args(args)
        .env("GNFP_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = gnnfp(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    gnnfp(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &TempDir, name: &str, samples: &str, seed: &str) -> PathBuf {
    let out = dir.path().join(name);
    let mut args = vec!["gen"];
    args.extend(SMALL);
    args.extend([
        "--users",
        "2",
        "--samples",
        samples,
        "--seed",
        seed,
        "--out",
        s(&out),
    ]);
    ok(&args);
    out
}

/// Dataset, harvest and a two-epoch model shared by the downstream tests.
fn pipeline(dir: &TempDir) -> (PathBuf, PathBuf, PathBuf) {
    let data = gen(dir, "d.gnfp", "20", "3");
    let subs = dir.path().join("d.subs");
    ok(&[
        "harvest",
        "--data",
        s(&data),
        "--iters",
        "2",
        "--out",
        s(&subs),
    ]);
    let model = dir.path().join("m.gnnm");
    let last = dir.path().join("last.gnnm");
    ok(&[
        "train",
        "--harvest",
        s(&subs),
        "--out",
        s(&model),
        "--epochs",
        "2",
        "--batch",
        "8",
        "--save-last",
        s(&last),
    ]);
    assert!(gnnfp::gnn::load_model(&last).is_ok());
    (data, subs, model)
}

#[test]
fn gen_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = gen(&dir, "a.gnfp", "4", "9");
    let b = gen(&dir, "b.gnfp", "4", "9");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn gen_with_zero_samples_succeeds() {
    let dir = TempDir::new().unwrap();
    let p = gen(&dir, "empty.gnfp", "0", "0");
    assert!(p.exists());
}

#[test]
fn invalid_flags_exit_2() {
    assert_eq!(code(&["gen", "--samples", "x", "--out", "/tmp/never"]), 2);
    assert_eq!(
        code(&[
            "bench",
            "--data",
            "a",
            "--model",
            "b",
            "--csv",
            "c",
            "--algorithms",
            "fp,sgd"
        ]),
        2
    );
    assert_eq!(code(&["frobnicate"]), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_gnnfp"))
        .args(["gen", "--out", "/tmp/never", "--samples", "1"])
        .env("GNFP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_3() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.gnfp");
    assert_eq!(
        code(&[
            "harvest",
            "--data",
            s(&missing),
            "--out",
            s(&dir.path().join("x.subs"))
        ]),
        3
    );
    let garbage = dir.path().join("garbage.subs");
    std::fs::write(&garbage, b"not a harvest").unwrap();
    assert_eq!(
        code(&[
            "train",
            "--harvest",
            s(&garbage),
            "--out",
            s(&dir.path().join("m.gnnm"))
        ]),
        3
    );
}

#[test]
fn model_with_wrong_input_width_exits_5() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.gnfp", "10", "1");
    let model = dir.path().join("wide.gnnm");
    save_model(
        &model,
        &GnnModel::new(
            ModelDims {
                node_in: 3,
                ..ModelDims::STANDARD
            },
            0,
        ),
    )
    .unwrap();
    let csv = dir.path().join("b.csv");
    assert_eq!(
        code(&[
            "bench",
            "--data",
            s(&data),
            "--model",
            s(&model),
            "--iters",
            "2",
            "--csv",
            s(&csv)
        ]),
        5
    );
}

#[test]
fn harvest_with_zero_iterations_is_empty_and_untrainable() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.gnfp", "6", "2");
    let subs = dir.path().join("z.subs");
    ok(&[
        "harvest",
        "--data",
        s(&data),
        "--iters",
        "0",
        "--out",
        s(&subs),
    ]);
    let set = gnnfp::reform::load_harvest(&subs).unwrap();
    assert!(set.records.is_empty());
    assert_eq!(
        code(&[
            "train",
            "--harvest",
            s(&subs),
            "--out",
            s(&dir.path().join("m.gnnm"))
        ]),
        2
    );
}

#[test]
fn harvest_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, "d.gnfp", "6", "2");
    let (a, b) = (dir.path().join("a.subs"), dir.path().join("b.subs"));
    for p in [&a, &b] {
        ok(&[
            "harvest",
            "--data",
            s(&data),
            "--iters",
            "3",
            "--per-instance",
            "2",
            "--seed",
            "5",
            "--out",
            s(p),
        ]);
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn train_bench_plot_pipeline() {
    let dir = TempDir::new().unwrap();
    let (data, _, model) = pipeline(&dir);
    let log = std::fs::read_to_string(dir.path().join("m.gnnm.log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_gap_mean,val_gap_median,lr,elapsed_s"));
    assert_eq!(log.lines().count(), 3);

    let csv = dir.path().join("bench.csv");
    let stdout = ok(&[
        "bench",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--iters",
        "3",
        "--fp-baseline-iters",
        "20",
        "--csv",
        s(&csv),
        "--timing-reps",
        "1",
    ])
    .stdout;
    assert!(!stdout.is_empty());
    let rows =
        gnnfp::bench::read_bench_csv(std::io::BufReader::new(std::fs::File::open(&csv).unwrap()))
            .unwrap();
    let baseline = rows
        .iter()
        .find(|r| r.algorithm == "fp" && r.iteration == 20)
        .unwrap();
    assert_eq!(baseline.normalized_pct, 100.0);
    assert!(rows
        .iter()
        .all(|r| r.normalized_pct > 0.0 && r.normalized_pct < 120.0));

    let (svg_a, svg_b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    ok(&["plot", "--csv", s(&csv), "--out", s(&svg_a)]);
    ok(&["plot", "--csv", s(&csv), "--out", s(&svg_b)]);
    let svg = std::fs::read_to_string(&svg_a).unwrap();
    assert_eq!(svg, std::fs::read_to_string(&svg_b).unwrap());
    assert_eq!(svg.matches("<polyline").count(), 3);
}

#[test]
fn plot_of_empty_csv_draws_axes_only() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("empty.csv");
    std::fs::write(&csv, format!("{}\n", gnnfp::bench::BENCH_HEADER)).unwrap();
    let svg = dir.path().join("e.svg");
    ok(&["plot", "--csv", s(&csv), "--out", s(&svg)]);
    let text = std::fs::read_to_string(svg).unwrap();
    assert!(text.starts_with("<svg") || text.starts_with("<?xml"));
    assert!(!text.contains("<polyline"));
}

#[test]
fn generalize_marks_reference_rows() {
    let dir = TempDir::new().unwrap();
    let (_, _, model) = pipeline(&dir);
    let csv = dir.path().join("g.csv");
    let mut args = vec!["generalize"];
    args.extend(SMALL);
    args.extend([
        "--model",
        s(&model),
        "--users",
        "2,7",
        "--iters",
        "2",
        "--fp-baseline-iters",
        "5",
        "--samples",
        "3",
        "--csv",
        s(&csv),
    ]);
    ok(&args);
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("users,algorithm,iters,mean_wsr,normalized_pct,source"));
    let deepfp_7 = text.lines().find(|l| l.starts_with("7,deepfp")).unwrap();
    assert!(deepfp_7.contains("N/A") && deepfp_7.contains("paper-reported, not reproduced"));
    assert!(text.lines().any(|l| l.starts_with("2,gnnfp")));
}
