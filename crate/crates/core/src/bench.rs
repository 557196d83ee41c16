//! Convergence benchmarks, generalization over users per cell, and the SVG
//! convergence plot.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{mrt_initializer, NetworkConfig, NetworkInstance};
use crate::dataset::Dataset;
use crate::fp::{run_solver, BeamformerUpdate, ClassicalUpdate, FastFpUpdate, FpError, StepRule};
use crate::gnn::{GnnModel, GnnUpdate};
use crate::io::FormatError;

/// Normalized WSR of the learned FP variant without graph structure, as
/// reported for users per cell 3 to 8. Not reproduced here.
pub const REPORTED_DEEPFP_PCT: [(usize, Option<f64>); 6] = [
    (3, Some(91.01)),
    (4, Some(88.54)),
    (5, Some(88.20)),
    (6, Some(91.12)),
    (7, None),
    (8, None),
];
pub const REPORTED_DEEPFP_PARAMS: usize = 47365;
pub const REPORTED_SOURCE: &str = "paper-reported, not reproduced";
pub const MEASURED: &str = "measured";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Solver(#[from] FpError),
    #[error("gnnfp requested without a model")]
    MissingModel,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown algorithm {0:?} (expected fp, fastfp or gnnfp)")]
    UnknownAlgorithm(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Channel(#[from] crate::channel::ChannelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Fp,
    FastFp,
    GnnFp,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fp => "fp",
            Algorithm::FastFp => "fastfp",
            Algorithm::GnnFp => "gnnfp",
        }
    }
}

impl FromStr for Algorithm {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s.trim() {
            "fp" => Ok(Algorithm::Fp),
            "fastfp" => Ok(Algorithm::FastFp),
            "gnnfp" => Ok(Algorithm::GnnFp),
            other => Err(BenchError::UnknownAlgorithm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateUnit {
    #[default]
    Nats,
    Bits,
}

impl RateUnit {
    pub fn convert(self, nats: f64) -> f64 {
        match self {
            RateUnit::Nats => nats,
            RateUnit::Bits => nats / std::f64::consts::LN_2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RateUnit::Nats => "nats/s/Hz",
            RateUnit::Bits => "bits/s/Hz",
        }
    }
}

/// Rejects models whose input widths do not match the graph features.
pub fn check_model(model: &GnnModel) -> Result<(), BenchError> {
    let d = model.dims;
    if d.node_in != 2 || d.edge_in != 2 {
        return Err(BenchError::DimensionMismatch(format!(
            "model expects node/edge features of width {}/{}, graphs carry 2/2",
            d.node_in, d.edge_in
        )));
    }
    Ok(())
}

fn updater<'a>(
    alg: Algorithm,
    model: Option<&'a GnnModel>,
) -> Result<Box<dyn BeamformerUpdate + 'a>, BenchError> {
    Ok(match alg {
        Algorithm::Fp => Box::new(ClassicalUpdate::default()),
        Algorithm::FastFp => Box::new(FastFpUpdate {
            rule: StepRule::Eigen,
        }),
        Algorithm::GnnFp => Box::new(GnnUpdate {
            model: model.ok_or(BenchError::MissingModel)?,
        }),
    })
}

/// Mean WSR (nats) over instances after 0..=iters iterations from MRT.
pub fn mean_curve(
    instances: &[&NetworkInstance],
    alg: Algorithm,
    iters: usize,
    model: Option<&GnnModel>,
) -> Result<Vec<f64>, BenchError> {
    if alg == Algorithm::GnnFp {
        check_model(model.ok_or(BenchError::MissingModel)?)?;
    }
    let traces: Vec<Vec<f64>> = instances
        .par_iter()
        .map(|inst| {
            let mut up = updater(alg, model)?;
            Ok(
                run_solver(inst, &mrt_initializer(inst), iters, up.as_mut())?
                    .1
                    .wsr,
            )
        })
        .collect::<Result<_, BenchError>>()?;
    let mut mean = vec![0.0; iters + 1];
    for t in &traces {
        for (m, w) in mean.iter_mut().zip(t) {
            *m += w;
        }
    }
    let n = traces.len().max(1) as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median over `reps` timed runs (after `warmup` untimed ones) of the mean
/// per-iteration update time in milliseconds. Runs on the calling thread.
pub fn time_per_iteration(
    inst: &NetworkInstance,
    alg: Algorithm,
    iters: usize,
    model: Option<&GnnModel>,
    reps: usize,
    warmup: usize,
) -> Result<f64, BenchError> {
    let v0 = mrt_initializer(inst);
    let mut times = Vec::with_capacity(reps);
    for r in 0..warmup + reps {
        let mut up = updater(alg, model)?;
        let (_, trace) = run_solver(inst, &v0, iters, up.as_mut())?;
        if r >= warmup {
            times.push(trace.ms_per_iteration());
        }
    }
    Ok(median(&mut times))
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub algorithms: Vec<Algorithm>,
    pub iters: usize,
    pub baseline_iters: usize,
    pub timing_reps: usize,
    pub timing_warmup: usize,
    /// Number of instances, taken from the front, used for timing.
    pub timing_instances: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            algorithms: vec![Algorithm::Fp, Algorithm::FastFp, Algorithm::GnnFp],
            iters: 16,
            baseline_iters: 100,
            timing_reps: 5,
            timing_warmup: 1,
            timing_instances: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub algorithm: String,
    pub iteration: usize,
    /// Mean WSR in nats.
    pub mean_wsr: f64,
    pub normalized_pct: f64,
    pub ms_per_iteration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub samples: usize,
    pub iters: usize,
    pub baseline_iters: usize,
    /// Mean WSR of classical FP at `baseline_iters`, in nats.
    pub baseline_wsr_nats: f64,
    pub unit: RateUnit,
    pub gnn_parameters: Option<usize>,
    pub deepfp_parameters: usize,
    pub deepfp_source: String,
    pub ms_per_iteration: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: BenchSummary,
}

impl BenchReport {
    pub fn row(&self, algorithm: &str, iteration: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.iteration == iteration)
    }
}

/// Mean WSR curves normalized so that classical FP at the baseline
/// iteration count is 100.
pub fn run_bench(
    instances: &[&NetworkInstance],
    opts: &BenchOptions,
    model: Option<&GnnModel>,
) -> Result<BenchReport, BenchError> {
    let fp_iters = opts.iters.max(opts.baseline_iters);
    let fp_curve = mean_curve(instances, Algorithm::Fp, fp_iters, None)?;
    let baseline = fp_curve[opts.baseline_iters];
    let pct = |w: f64| 100.0 * w / baseline;
    let timed = &instances[..opts.timing_instances.min(instances.len())];
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for &alg in &opts.algorithms {
        let curve = match alg {
            Algorithm::Fp => fp_curve[..=opts.iters].to_vec(),
            _ => mean_curve(instances, alg, opts.iters, model)?,
        };
        let mut ms: Vec<f64> = timed
            .iter()
            .map(|inst| {
                time_per_iteration(
                    inst,
                    alg,
                    opts.iters.max(1),
                    model,
                    opts.timing_reps,
                    opts.timing_warmup,
                )
            })
            .collect::<Result<_, _>>()?;
        let ms = median(&mut ms);
        timings.push((alg.name().to_string(), ms));
        for (k, w) in curve.iter().enumerate() {
            rows.push(BenchRow {
                algorithm: alg.name().into(),
                iteration: k,
                mean_wsr: *w,
                normalized_pct: pct(*w),
                ms_per_iteration: ms,
            });
        }
        if alg == Algorithm::Fp && opts.baseline_iters > opts.iters {
            rows.push(BenchRow {
                algorithm: alg.name().into(),
                iteration: opts.baseline_iters,
                mean_wsr: baseline,
                normalized_pct: 100.0,
                ms_per_iteration: ms,
            });
        }
    }
    Ok(BenchReport {
        rows,
        summary: BenchSummary {
            samples: instances.len(),
            iters: opts.iters,
            baseline_iters: opts.baseline_iters,
            baseline_wsr_nats: baseline,
            unit: RateUnit::Nats,
            gnn_parameters: model.map(|m| m.param_count()),
            deepfp_parameters: REPORTED_DEEPFP_PARAMS,
            deepfp_source: REPORTED_SOURCE.into(),
            ms_per_iteration: timings,
        },
    })
}

pub const BENCH_HEADER: &str = "algorithm,iteration,mean_wsr,normalized_pct,ms_per_iteration";

pub fn write_bench_csv(
    out: &mut dyn Write,
    rows: &[BenchRow],
    unit: RateUnit,
) -> std::io::Result<()> {
    writeln!(out, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.9},{:.6},{:.6}",
            r.algorithm,
            r.iteration,
            unit.convert(r.mean_wsr),
            r.normalized_pct,
            r.ms_per_iteration
        )?;
    }
    Ok(())
}

/// Parses a bench CSV; `mean_wsr` is returned in the file's unit.
pub fn read_bench_csv(input: impl BufRead) -> Result<Vec<BenchRow>, FormatError> {
    let mut rows = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || (n == 0 && line.starts_with("algorithm")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(FormatError::corrupt(format!(
                "line {}: expected 5 fields",
                n + 1
            )));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| FormatError::corrupt(format!("line {}: bad number {s:?}", n + 1)))
        };
        rows.push(BenchRow {
            algorithm: f[0].to_string(),
            iteration: f[1]
                .trim()
                .parse()
                .map_err(|_| FormatError::corrupt(format!("line {}: bad iteration", n + 1)))?,
            mean_wsr: num(f[2])?,
            normalized_pct: num(f[3])?,
            ms_per_iteration: num(f[4])?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizeRow {
    pub users: usize,
    pub algorithm: String,
    pub iters: usize,
    /// Mean WSR in nats; absent for reported constants.
    pub mean_wsr: Option<f64>,
    pub normalized_pct: Option<f64>,
    pub source: &'static str,
}

/// FP, FastFP and GNNFP at `iters` iterations on fresh data for each user
/// count, normalized to FP at `baseline_iters`, plus the reported constants.
pub fn generalize(
    base: &NetworkConfig,
    users: &[usize],
    samples: usize,
    iters: usize,
    baseline_iters: usize,
    model: &GnnModel,
) -> Result<Vec<GeneralizeRow>, BenchError> {
    check_model(model)?;
    let mut rows = Vec::new();
    for &q in users {
        let cfg = NetworkConfig {
            users_per_cell: q,
            seed: base.seed.wrapping_add(q as u64),
            ..base.clone()
        };
        let data = Dataset::generate(&cfg, samples)?;
        let insts: Vec<&NetworkInstance> = data.instances.iter().collect();
        let fp = mean_curve(&insts, Algorithm::Fp, iters.max(baseline_iters), None)?;
        let baseline = fp[baseline_iters];
        let mut push = |alg: Algorithm, w: f64| {
            rows.push(GeneralizeRow {
                users: q,
                algorithm: alg.name().into(),
                iters,
                mean_wsr: Some(w),
                normalized_pct: Some(100.0 * w / baseline),
                source: MEASURED,
            })
        };
        push(Algorithm::Fp, fp[iters]);
        push(
            Algorithm::FastFp,
            mean_curve(&insts, Algorithm::FastFp, iters, None)?[iters],
        );
        push(
            Algorithm::GnnFp,
            mean_curve(&insts, Algorithm::GnnFp, iters, Some(model))?[iters],
        );
        let reported = REPORTED_DEEPFP_PCT
            .iter()
            .find(|(u, _)| *u == q)
            .and_then(|(_, p)| *p);
        rows.push(GeneralizeRow {
            users: q,
            algorithm: "deepfp".into(),
            iters,
            mean_wsr: None,
            normalized_pct: reported,
            source: REPORTED_SOURCE,
        });
    }
    Ok(rows)
}

pub fn write_generalize_csv(
    out: &mut dyn Write,
    rows: &[GeneralizeRow],
    unit: RateUnit,
) -> std::io::Result<()> {
    writeln!(out, "users,algorithm,iters,mean_wsr,normalized_pct,source")?;
    let opt = |x: Option<f64>, prec: usize| x.map_or("N/A".to_string(), |v| format!("{v:.prec$}"));
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},\"{}\"",
            r.users,
            r.algorithm,
            r.iters,
            opt(r.mean_wsr.map(|w| unit.convert(w)), 9),
            opt(r.normalized_pct, 6),
            r.source
        )?;
    }
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    mag * if r <= 1.0 {
        1.0
    } else if r <= 2.0 {
        2.0
    } else if r <= 5.0 {
        5.0
    } else {
        10.0
    }
}

/// Line chart of `mean_wsr` against iteration, one series per algorithm in
/// order of first appearance. Points past the end of every series' run of
/// consecutive iterations (such as a baseline row) are drawn as dashed
/// horizontal reference lines.
pub fn render_svg(rows: &[BenchRow], y_label: &str) -> String {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const L: f64 = 80.0;
    const R: f64 = 170.0;
    const T: f64 = 30.0;
    const B: f64 = 60.0;
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.algorithm.as_str()) {
            names.push(&r.algorithm);
        }
    }
    let series: Vec<Vec<&BenchRow>> = names
        .iter()
        .map(|n| rows.iter().filter(|r| r.algorithm == *n).collect())
        .collect();
    // Each series' curve is its run of consecutive iterations; later
    // isolated points are references.
    let run_end = |pts: &Vec<&BenchRow>| {
        let mut its: Vec<usize> = pts.iter().map(|r| r.iteration).collect();
        its.sort_unstable();
        let mut end = its[0];
        for &i in &its[1..] {
            if i != end + 1 {
                break;
            }
            end = i;
        }
        end
    };
    let x_max = series.iter().map(run_end).max().unwrap_or(1).max(1) as f64;
    let ys: Vec<f64> = rows
        .iter()
        .map(|r| r.mean_wsr)
        .filter(|y| y.is_finite())
        .collect();
    let (mut y_lo, mut y_hi) = match ys.iter().copied().fold(None, |acc: Option<(f64, f64)>, y| {
        Some(acc.map_or((y, y), |(a, b)| (a.min(y), b.max(y))))
    }) {
        Some((a, b)) if b > a => (a, b),
        Some((a, _)) => (a - 1.0, a + 1.0),
        None => (0.0, 1.0),
    };
    let step = nice_step(y_hi - y_lo);
    y_lo = (y_lo / step).floor() * step;
    y_hi = (y_hi / step).ceil() * step;
    let px = |x: f64| L + (W - L - R) * x / x_max;
    let py = |y: f64| H - B - (H - T - B) * (y - y_lo) / (y_hi - y_lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - B,
        W - R,
        H - B
    );
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#,
        H - B
    );
    let x_step = nice_step(x_max).max(1.0);
    let mut x = 0.0;
    while x <= x_max + 1e-9 {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"#,
            px(x),
            H - B,
            H - B + 5.0,
            H - B + 20.0,
            x
        );
        x += x_step;
    }
    let mut y = y_lo;
    while y <= y_hi + 1e-9 * step {
        let _ = writeln!(
            s,
            r##"<line x1="{0}" y1="{1:.2}" x2="{2}" y2="{1:.2}" stroke="#dddddd"/><text x="{3}" y="{4:.2}" text-anchor="end">{5}</text>"##,
            L,
            py(y),
            W - R,
            L - 6.0,
            py(y) + 4.0,
            fmt_tick(y, step)
        );
        y += step;
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#,
        (L + W - R) / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">WSR ({1})</text>"#,
        (T + H - B) / 2.0,
        y_label
    );
    for (i, (name, pts)) in names.iter().zip(&series).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let inside: Vec<&&BenchRow> = pts.iter().filter(|r| r.iteration as f64 <= x_max).collect();
        let outside: Vec<&&BenchRow> = pts.iter().filter(|r| r.iteration as f64 > x_max).collect();
        if !inside.is_empty() {
            let path: Vec<String> = inside
                .iter()
                .map(|r| format!("{:.2},{:.2}", px(r.iteration as f64), py(r.mean_wsr)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
            for r in &inside {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    px(r.iteration as f64),
                    py(r.mean_wsr)
                );
            }
        }
        for r in &outside {
            let _ = writeln!(
                s,
                r#"<line x1="{L}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
                py(r.mean_wsr),
                W - R
            );
        }
        let ly = T + 20.0 * i as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/><text x="{3}" y="{4}">{5}</text>"#,
            W - R + 15.0,
            ly,
            W - R + 40.0,
            W - R + 46.0,
            ly + 4.0,
            xml_escape(name)
        );
        for r in &outside {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{} @ {}</text>"#,
                W - R + 46.0,
                ly + 16.0,
                xml_escape(name),
                r.iteration
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(y: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor()) as usize
    };
    format!("{y:.decimals$}")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
