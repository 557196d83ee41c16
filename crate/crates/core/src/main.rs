use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gnnfp::bench::{
    generalize, read_bench_csv, render_svg, run_bench, write_bench_csv, write_generalize_csv,
    Algorithm, BenchError, BenchOptions, RateUnit,
};
use gnnfp::channel::{NetworkConfig, NetworkInstance};
use gnnfp::dataset::{split_indices, Dataset, SplitRatios};
use gnnfp::gnn::{load_model, save_model, CheckpointError, GnnModel, LossScaling, ModelDims};
use gnnfp::io::{sidecar_path, write_atomic, FormatError};
use gnnfp::reform::{load_harvest, save_harvest, HarvestSet};
use gnnfp::training::{
    harvest_sampled, partition, save_log_csv, subsample, train, EpochLog, HarvestPolicy,
    LrSchedule, TrainConfig, TrainError,
};

/// Exit codes: 2 invalid flags, 3 I/O or file format, 4 diverged training
/// loss, 5 model/data dimension mismatch, 1 anything else.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Diverged(String),
    Dims(String),
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Dims(_) => 5,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Io(m)
            | CliError::Diverged(m)
            | CliError::Dims(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::DimensionMismatch(m) => CliError::Dims(m),
            BenchError::UnknownAlgorithm(_) | BenchError::MissingModel | BenchError::Channel(_) => {
                CliError::Usage(e.to_string())
            }
            BenchError::Format(f) => f.into(),
            BenchError::Solver(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<gnnfp::fp::FpError> for CliError {
    fn from(e: gnnfp::fp::FpError) -> Self {
        CliError::Other(e.to_string())
    }
}

/// Loads a checkpoint and rejects input widths other than the two-channel
/// real/imaginary features.
fn load_checked(path: &Path) -> Result<GnnModel, CliError> {
    let model = load_model(path)?;
    gnnfp::bench::check_model(&model)?;
    Ok(model)
}

#[derive(Parser)]
#[command(
    name = "gnnfp",
    version,
    about = "FP, FastFP and GNNFP beamforming for multi-cell MU-MIMO"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a channel dataset.
    Gen(GenArgs),
    /// Record per-cell subproblems along solver trajectories.
    Harvest(HarvestArgs),
    /// Train the GNN on a harvest.
    Train(TrainArgs),
    /// Convergence curves on the test split.
    Bench(BenchArgs),
    /// Render a bench CSV as an SVG line chart.
    Plot(PlotArgs),
    /// Normalized WSR over users per cell on fresh data.
    Generalize(GeneralizeArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 7)]
    cells: usize,
    #[arg(long, default_value_t = 8)]
    tx: usize,
    #[arg(long, default_value_t = 2)]
    rx: usize,
    /// Inter-BS distance in km.
    #[arg(long, default_value_t = 0.8)]
    distance_km: f64,
    #[arg(long, default_value_t = 20.0)]
    power_dbm: f64,
    #[arg(long, default_value_t = -90.0, allow_hyphen_values = true)]
    noise_dbm: f64,
    #[arg(long, default_value_t = 8.0)]
    shadowing_db: f64,
}

impl ScenarioArgs {
    fn config(&self, users: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            cells: self.cells,
            users_per_cell: users,
            tx_antennas: self.tx,
            rx_antennas: self.rx,
            inter_bs_distance_km: self.distance_km,
            max_tx_power_dbm: self.power_dbm,
            noise_power_dbm: self.noise_dbm,
            shadowing_std_db: self.shadowing_db,
            weights: Vec::new(),
            seed,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 6)]
    users: usize,
    #[arg(long, default_value_t = 3000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Fp,
    Model,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    /// Training and validation samples.
    TrainVal,
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct HarvestArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16)]
    iters: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::Fp)]
    policy: PolicyArg,
    /// Checkpoint driving the model policy.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Which part of the dataset's split to harvest from.
    #[arg(long, value_enum, default_value_t = SplitArg::TrainVal)]
    split: SplitArg,
    /// Keep at most this many records per trajectory.
    #[arg(long)]
    per_instance: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Raw,
    PerRecord,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    harvest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    patience: usize,
    #[arg(long, value_enum, default_value_t = ScalingArg::PerRecord)]
    loss_scaling: ScalingArg,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Constant)]
    schedule: ScheduleArg,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Subsample the training records to at most this many.
    #[arg(long)]
    max_train: Option<usize>,
    /// Subsample the validation records to at most this many.
    #[arg(long)]
    max_val: Option<usize>,
    /// Epochs between re-harvests with the current model; 0 disables.
    #[arg(long, default_value_t = 0)]
    refresh_period: usize,
    /// Dataset the harvest came from, needed for re-harvesting.
    #[arg(long)]
    refresh_data: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    refresh_iters: usize,
    #[arg(long)]
    refresh_per_instance: Option<usize>,
    /// Also write the model at the end of every epoch here.
    #[arg(long)]
    save_last: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "fp,fastfp,gnnfp")]
    algorithms: Vec<String>,
    #[arg(long, default_value_t = 16)]
    iters: usize,
    #[arg(long, default_value_t = 100)]
    fp_baseline_iters: usize,
    #[arg(long)]
    csv: PathBuf,
    /// Report rates in bits instead of nats.
    #[arg(long)]
    bits: bool,
    /// Use every sample instead of the test split.
    #[arg(long)]
    all_samples: bool,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long, default_value_t = 5)]
    timing_reps: usize,
    #[arg(long, default_value_t = 1)]
    timing_instances: usize,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GeneralizeArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5,6,7,8")]
    users: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 100)]
    fp_baseline_iters: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    bits: bool,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    Ok(write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        writeln!(w)
    })?)
}

fn unit(bits: bool) -> RateUnit {
    if bits {
        RateUnit::Bits
    } else {
        RateUnit::Nats
    }
}

fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let cfg = a.scenario.config(a.users, a.seed);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = Dataset::generate(&cfg, a.samples).map_err(|e| usage(e.to_string()))?;
    data.save(&a.out)?;
    eprintln!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn split_members(data: &Dataset, which: SplitArg) -> Vec<usize> {
    let split = split_indices(data.len(), data.config.seed, SplitRatios::default());
    let mut idx = match which {
        SplitArg::TrainVal => [split.train, split.val].concat(),
        SplitArg::Train => split.train,
        SplitArg::Val => split.val,
        SplitArg::Test => split.test,
        SplitArg::All => (0..data.len()).collect(),
    };
    idx.sort_unstable();
    idx
}

fn cmd_harvest(a: &HarvestArgs) -> Result<(), CliError> {
    let model = match (a.policy, &a.model) {
        (PolicyArg::Model, Some(p)) => Some(load_checked(p)?),
        (PolicyArg::Model, None) => return Err(usage("--policy model needs --model")),
        (PolicyArg::Fp, _) => None,
    };
    let data = Dataset::load(&a.data)?;
    let members = split_members(&data, a.split);
    let policy = model
        .as_ref()
        .map_or(HarvestPolicy::ClassicalFp, HarvestPolicy::Model);
    let per_instance = a.per_instance.unwrap_or(usize::MAX);
    let records = harvest_sampled(&data, &members, a.iters, policy, per_instance, a.seed)?;
    let set = HarvestSet {
        source_samples: data.len() as u64,
        split_seed: data.config.seed,
        records,
    };
    save_harvest(&a.out, &set)?;
    write_json(
        &sidecar_path(&a.out),
        &json!({
            "data": a.data,
            "iters": a.iters,
            "policy": match a.policy { PolicyArg::Fp => "fp", PolicyArg::Model => "model" },
            "per_instance": a.per_instance,
            "seed": a.seed,
            "instances": members.len(),
            "records": set.records.len(),
            "source_samples": set.source_samples,
            "split_seed": set.split_seed,
        }),
    )?;
    eprintln!(
        "wrote {} records from {} samples to {}",
        set.records.len(),
        members.len(),
        a.out.display()
    );
    Ok(())
}

fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| {
        let mut name = a
            .out
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".log.csv");
        a.out.with_file_name(name)
    })
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        seed: a.seed,
        refresh_period: a.refresh_period,
        early_stop_patience: a.patience,
        loss_scaling: match a.loss_scaling {
            ScalingArg::Raw => LossScaling::Raw,
            ScalingArg::PerRecord => LossScaling::PerRecord,
        },
        schedule: match a.schedule {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Cosine => LrSchedule::Cosine,
        },
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let set = load_harvest(&a.harvest)?;
    let (source_samples, split_seed) = (set.source_samples, set.split_seed);
    let parts = partition(set, cfg.split_ratios);
    let train_records = subsample(parts.train, a.max_train.unwrap_or(usize::MAX), a.seed);
    let val_records = subsample(parts.val, a.max_val.unwrap_or(usize::MAX), a.seed ^ 1);
    if train_records.is_empty() {
        return Err(usage("the harvest has no records from the training split"));
    }
    let init = match &a.init {
        Some(p) => load_checked(p)?,
        None => GnnModel::new(ModelDims::STANDARD, a.seed),
    };
    let refresh_data = match (&a.refresh_data, a.refresh_period) {
        (Some(p), n) if n > 0 => {
            let d = Dataset::load(p)?;
            if d.len() as u64 != source_samples || d.config.seed != split_seed {
                return Err(usage(
                    "--refresh-data is not the dataset the harvest came from",
                ));
            }
            Some(d)
        }
        (None, n) if n > 0 => return Err(usage("--refresh-period needs --refresh-data")),
        _ => None,
    };
    let refresh_count = train_records.len();
    let mut refresh_fn = |model: &GnnModel| -> Result<_, TrainError> {
        let data = refresh_data.as_ref().expect("checked above");
        let members = split_members(data, SplitArg::Train);
        let per = a.refresh_per_instance.unwrap_or(usize::MAX);
        let recs = harvest_sampled(
            data,
            &members,
            a.refresh_iters,
            HarvestPolicy::Model(model),
            per,
            a.seed,
        )?;
        eprintln!("re-harvested {} records with the current model", recs.len());
        Ok(subsample(recs, refresh_count, a.seed))
    };
    eprintln!(
        "training on {} records, validating on {}",
        train_records.len(),
        val_records.len()
    );
    let log_file = log_path(a);
    let mut log: Vec<EpochLog> = Vec::new();
    let mut save_err: Option<CliError> = None;
    let outcome = train(
        init,
        train_records,
        &val_records,
        &cfg,
        if refresh_data.is_some() {
            Some(&mut refresh_fn)
        } else {
            None
        },
        |e, model, improved| {
            eprintln!(
                "epoch {:>4}  loss {:>12.6e}  val gap mean {:.4} median {:.4}  lr {:.2e}  {:.0}s{}",
                e.epoch,
                e.train_loss,
                e.val_gap_mean,
                e.val_gap_median,
                e.lr,
                e.elapsed_s,
                if improved { "  *" } else { "" }
            );
            log.push(e.clone());
            let mut r = save_log_csv(&log_file, &log).map_err(CliError::from);
            if r.is_ok() && improved {
                r = save_model(&a.out, model).map_err(CliError::from);
            }
            if let (Ok(()), Some(p)) = (&r, &a.save_last) {
                r = save_model(p, model).map_err(CliError::from);
            }
            if let Err(err) = r {
                save_err.get_or_insert(err);
            }
        },
    );
    if let Some(e) = save_err {
        return Err(e);
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::DivergedLoss {
            epoch,
            batch,
            last_good,
        }) => {
            save_model(&a.out, &last_good)?;
            return Err(CliError::Diverged(format!(
                "non-finite loss at epoch {epoch}, batch {batch}; last good checkpoint written to {}",
                a.out.display()
            )));
        }
        Err(e @ (TrainError::InvalidConfig(_) | TrainError::EmptyHarvest)) => {
            return Err(usage(e.to_string()))
        }
        Err(e) => return Err(CliError::Other(e.to_string())),
    };
    save_model(&a.out, &outcome.model)?;
    save_log_csv(&log_file, &outcome.log)?;
    write_json(
        &sidecar_path(&a.out),
        &json!({
            "harvest": a.harvest,
            "epochs_run": outcome.log.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_gap_mean": outcome.best_val_gap,
            "stopped_early": outcome.stopped_early,
            "parameters": outcome.model.param_count(),
            "lr": a.lr,
            "batch": a.batch,
            "seed": a.seed,
            "schedule": match a.schedule { ScheduleArg::Constant => "constant", ScheduleArg::Cosine => "cosine" },
            "loss_scaling": match a.loss_scaling { ScalingArg::Raw => "raw", ScalingArg::PerRecord => "per-record" },
            "refresh_period": a.refresh_period,
            "log": log_file,
        }),
    )?;
    eprintln!(
        "best epoch {:?}, val gap mean {:.4}",
        outcome.best_epoch, outcome.best_val_gap
    );
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), CliError> {
    let algorithms: Vec<Algorithm> = a
        .algorithms
        .iter()
        .map(|s| s.parse::<Algorithm>())
        .collect::<Result<_, _>>()
        .map_err(CliError::from)?;
    if a.fp_baseline_iters == 0 {
        return Err(usage("--fp-baseline-iters must be positive"));
    }
    let model = match &a.model {
        Some(p) => Some(load_checked(p)?),
        None if algorithms.contains(&Algorithm::GnnFp) => return Err(usage("gnnfp needs --model")),
        None => None,
    };
    let data = Dataset::load(&a.data)?;
    let mut members = split_members(
        &data,
        if a.all_samples {
            SplitArg::All
        } else {
            SplitArg::Test
        },
    );
    members.truncate(a.max_samples.unwrap_or(usize::MAX));
    if members.is_empty() {
        return Err(usage("no samples to benchmark"));
    }
    let insts: Vec<&NetworkInstance> = members.iter().map(|&k| &data.instances[k]).collect();
    let opts = BenchOptions {
        algorithms,
        iters: a.iters,
        baseline_iters: a.fp_baseline_iters,
        timing_reps: a.timing_reps.max(1),
        timing_warmup: 1,
        timing_instances: a.timing_instances,
    };
    let mut report = run_bench(&insts, &opts, model.as_ref())?;
    let u = unit(a.bits);
    report.summary.unit = u;
    write_atomic(&a.csv, |w| write_bench_csv(w, &report.rows, u))?;
    write_json(
        &sidecar_path(&a.csv),
        &serde_json::to_value(&report.summary).map_err(|e| CliError::Other(e.to_string()))?,
    )?;
    println!(
        "{} samples, FP-{} = {:.4} {}",
        insts.len(),
        a.fp_baseline_iters,
        u.convert(report.summary.baseline_wsr_nats),
        u.label()
    );
    for alg in &opts.algorithms {
        let at = |k: usize| {
            report
                .row(alg.name(), k)
                .map_or("-".to_string(), |r| format!("{:.2}", r.normalized_pct))
        };
        let ms = report
            .summary
            .ms_per_iteration
            .iter()
            .find(|(n, _)| n == alg.name())
            .map_or(f64::NAN, |t| t.1);
        println!(
            "{:<8} iter5 {:>7}  iter{} {:>7}  {:.3} ms/iter",
            alg.name(),
            at(5),
            a.iters,
            at(a.iters),
            ms
        );
    }
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<(), CliError> {
    let rows = read_bench_csv(BufReader::new(File::open(&a.csv)?))?;
    let unit = std::fs::read_to_string(sidecar_path(&a.csv))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| serde_json::from_value::<RateUnit>(v["unit"].clone()).ok())
        .unwrap_or_default();
    let svg = render_svg(&rows, unit.label());
    write_atomic(&a.out, |w| w.write_all(svg.as_bytes()))?;
    Ok(())
}

fn cmd_generalize(a: &GeneralizeArgs) -> Result<(), CliError> {
    if a.users.is_empty() || a.users.contains(&0) || a.fp_baseline_iters == 0 {
        return Err(usage(
            "--users must list positive counts and --fp-baseline-iters must be positive",
        ));
    }
    let model = load_checked(&a.model)?;
    let base = a.scenario.config(a.users[0], a.seed);
    base.validate().map_err(|e| usage(e.to_string()))?;
    let rows = generalize(
        &base,
        &a.users,
        a.samples,
        a.iters,
        a.fp_baseline_iters,
        &model,
    )?;
    let u = unit(a.bits);
    write_atomic(&a.csv, |w| write_generalize_csv(w, &rows, u))?;
    for r in &rows {
        let pct = r.normalized_pct.map_or("N/A".into(), |p| format!("{p:.2}"));
        println!(
            "Q={} {:<7} {:>7}  ({})",
            r.users, r.algorithm, pct, r.source
        );
    }
    Ok(())
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("GNFP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| usage(format!("GNFP_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}

/// Keeps freed large buffers in the heap instead of returning them to the
/// kernel, so the training loop reuses pages rather than faulting new ones.
fn configure_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    configure_allocator();
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Harvest(a) => cmd_harvest(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Generalize(a) => cmd_generalize(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
