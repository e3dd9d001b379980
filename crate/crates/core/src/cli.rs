//! The `disco` command line: `verify`, `bench`, `train` and `model`.
//!
//! Exit codes: 0 success, 1 failed check or diverged training, 2 invalid
//! arguments (including batch/world layouts that do not divide).

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::Ratio;
use serde::Serialize;

use crate::cost::{
    analytic_table, measured_footprint, savings_fraction, CostInputs, MeasureSizes, Measurement,
    Method, Precision,
};
use crate::dense::{DenseMatrix, Scalar};
use crate::error::{Error, Result};
use crate::fabric::{FabricError, Scheduler};
use crate::oracle::{clip_grad_full, seeded_unit_rows, FeatureBatch, Role};
use crate::report::{write_aligned, write_records, Format};
use crate::shard::{simulate_step, Mutation, SimConfig, StepKind};
use crate::towers::{
    generate_dataset, train_run, TowerParams, TrainConfig, TrainMode, DEFAULT_TEMPERATURE,
};
use crate::verify::{run_verify, VerifyGrid, VerifyReport};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_INVALID: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "disco",
    version,
    about = "Decomposed contrastive loss: verification, benchmarks, toy training and cost model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check decomposed gradients and loss against the full-batch reference.
    Verify(VerifyArgs),
    /// Measure loss-scope memory and FLOP counters for both step kinds.
    Bench(BenchArgs),
    /// Train the toy two-tower model and emit the loss trajectory.
    Train(TrainArgs),
    /// Print the analytic per-rank cost table.
    Model(ModelArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Naive,
    Disco,
    Both,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output format (default: table, or csv for `train`).
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write the report to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Restrict the grid to one global batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Restrict the grid to one world size.
    #[arg(long)]
    pub world_size: Option<usize>,
    /// Restrict the grid to one feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Run a single seed instead of the default five.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Negate inter-rank gradient contributions (test hook).
    #[arg(long, hide = true)]
    pub mutate_inter_rank: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub world_size: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    pub mode: Mode,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2)]
    pub world_size: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    /// Raw input dimension of both towers.
    #[arg(long, default_value_t = 8)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub learning_rate: f64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    pub mode: Mode,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 65_536)]
    pub batch_size: u64,
    #[arg(long, default_value_t = 64)]
    pub world_size: u64,
    #[arg(long, default_value_t = 12)]
    pub layers: u64,
    #[arg(long, default_value_t = 1024)]
    pub dim: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Report body plus human-readable summary lines. Summaries follow the body
/// in table format and go to stderr otherwise, so CSV and JSON stay clean.
struct Rendered {
    body: Vec<u8>,
    summary: Vec<String>,
    format: Format,
    passed: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Layout { .. }
        | Error::Domain(_)
        | Error::Fabric(FabricError::UnknownScheduler(_)) => EXIT_INVALID,
        _ => EXIT_CHECK_FAILED,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, A>(args: I) -> ExitCode
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            });
        }
    };
    match execute(&cli.command) {
        Ok(true) => ExitCode::from(EXIT_OK),
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs one subcommand, writing its report. Returns whether all checks
/// passed.
pub fn execute(command: &Command) -> Result<bool> {
    let scheduler = Scheduler::from_env()?;
    let (rendered, out) = match command {
        Command::Verify(a) => (cmd_verify(a, scheduler)?, &a.output.out),
        Command::Bench(a) => (cmd_bench(a, scheduler)?, &a.output.out),
        Command::Train(a) => (cmd_train(a, scheduler)?, &a.output.out),
        Command::Model(a) => (cmd_model(a)?, &a.output.out),
    };
    emit(rendered, out)
}

fn emit(rendered: Rendered, out: &Option<PathBuf>) -> Result<bool> {
    let mut body = rendered.body;
    let io = |e: std::io::Error| Error::Domain(format!("writing output: {e}"));
    if rendered.format == Format::Table {
        for line in &rendered.summary {
            writeln!(body, "{line}").map_err(io)?;
        }
    } else {
        for line in &rendered.summary {
            eprintln!("{line}");
        }
    }
    match out {
        Some(path) => std::fs::write(path, &body)
            .map_err(|e| Error::Domain(format!("{}: {e}", path.display())))?,
        None => std::io::stdout().write_all(&body).map_err(io)?,
    }
    Ok(rendered.passed)
}

fn require_f64(precision: Precision, command: &str) -> Result<()> {
    if precision != Precision::F64 {
        return Err(Error::Domain(format!("{command} runs in f64 only")));
    }
    Ok(())
}

fn check_layout(batch: usize, world: usize) -> Result<()> {
    if batch == 0 || world == 0 || !batch.is_multiple_of(world) {
        return Err(Error::Layout { batch, world });
    }
    Ok(())
}

/// Failing instances listed in table output before the rest are elided.
const MAX_LISTED_FAILURES: usize = 20;

pub fn verify_grid(args: &VerifyArgs, scheduler: Scheduler) -> Result<VerifyGrid> {
    if let (Some(b), Some(n)) = (args.batch_size, args.world_size) {
        check_layout(b, n)?;
    }
    let defaults = VerifyGrid::default();
    let grid = VerifyGrid {
        batches: args.batch_size.map_or(defaults.batches, |b| vec![b]),
        dims: args.dim.map_or(defaults.dims, |d| vec![d]),
        worlds: args.world_size.map_or(defaults.worlds, |n| vec![n]),
        seeds: args.seed.map_or(defaults.seeds, |s| vec![s]),
        temperatures: defaults.temperatures,
        scheduler,
        mutation: args
            .mutate_inter_rank
            .then_some(Mutation::FlipInterRankSign),
    };
    if grid.dims.contains(&0) || grid.instances().is_empty() {
        return Err(Error::Domain(format!(
            "no valid instances: batches {:?}, worlds {:?}, dims {:?}",
            grid.batches, grid.worlds, grid.dims
        )));
    }
    Ok(grid)
}

fn cmd_verify(args: &VerifyArgs, scheduler: Scheduler) -> Result<Rendered> {
    require_f64(args.precision, "verify")?;
    let format = args.output.format.unwrap_or(Format::Table);
    let report = run_verify(&verify_grid(args, scheduler)?)?;
    let mut body = Vec::new();
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut body, &report)
                .map_err(|e| Error::Domain(e.to_string()))?;
            body.push(b'\n');
        }
        Format::Csv => write_records(&report.checks, Format::Csv, &mut body)?,
        Format::Table => write_aligned(&verify_table(&report), &mut body)?,
    }
    let mut summary = Vec::new();
    let failures: Vec<_> = report.failures().collect();
    for f in failures.iter().take(MAX_LISTED_FAILURES) {
        let i = f.instance;
        summary.push(format!(
            "FAIL {} B={} N={} D={} t={} seed={}: error {:e} > {:e}",
            f.check, i.batch, i.world, i.dim, i.temperature, i.seed, f.max_error, f.tolerance
        ));
    }
    if failures.len() > MAX_LISTED_FAILURES {
        summary.push(format!(
            "... {} more failures",
            failures.len() - MAX_LISTED_FAILURES
        ));
    }
    summary.push(format!(
        "overall: {} ({} checks, {} failed)",
        if report.passed { "PASS" } else { "FAIL" },
        report.checks.len(),
        failures.len()
    ));
    Ok(Rendered {
        body,
        summary,
        format,
        passed: report.passed,
    })
}

/// One line per check kind: instance count, failures, worst error.
fn verify_table(report: &VerifyReport) -> Vec<Vec<String>> {
    let mut rows = vec![["check", "instances", "failed", "max_error", "tolerance"]
        .map(String::from)
        .to_vec()];
    let mut kinds: Vec<&str> = Vec::new();
    for c in &report.checks {
        if !kinds.contains(&c.check) {
            kinds.push(c.check);
        }
    }
    for kind in kinds {
        let of_kind: Vec<_> = report.checks.iter().filter(|c| c.check == kind).collect();
        rows.push(vec![
            kind.to_string(),
            of_kind.len().to_string(),
            of_kind.iter().filter(|c| !c.passed).count().to_string(),
            format!("{:.3e}", report.max_error(kind)),
            format!("{:.0e}", of_kind[0].tolerance),
        ]);
    }
    rows
}

/// Largest relative error of decomposed gradients in precision `T` against
/// the f64 reference.
fn precision_error<T: Scalar>(sizes: MeasureSizes, scheduler: Scheduler) -> Result<f64> {
    let image = seeded_unit_rows(sizes.batch, sizes.dim, sizes.seed);
    let text = seeded_unit_rows(sizes.batch, sizes.dim, sizes.seed.wrapping_add(1));
    let reference = clip_grad_full(
        &FeatureBatch::new(image.clone(), Role::Image)?,
        &FeatureBatch::new(text.clone(), Role::Text)?,
        DEFAULT_TEMPERATURE,
    )?;
    let config = SimConfig {
        scheduler,
        ..SimConfig::disco(sizes.world, T::from_f64(DEFAULT_TEMPERATURE))
    };
    let step = simulate_step(&image.cast::<T>(), &text.cast::<T>(), &config)?;
    let got = DenseMatrix::vstack(&[step.d_image, step.d_text])?.cast::<f64>();
    got.rel_error(&DenseMatrix::vstack(&[
        reference.d_image,
        reference.d_text,
    ])?)
}

fn measure(
    kind: StepKind,
    sizes: MeasureSizes,
    precision: Precision,
    scheduler: Scheduler,
) -> Result<Measurement> {
    match precision {
        Precision::F32 => measured_footprint::<f32>(kind, sizes, scheduler),
        Precision::F64 => measured_footprint::<f64>(kind, sizes, scheduler),
    }
}

fn cmd_bench(args: &BenchArgs, scheduler: Scheduler) -> Result<Rendered> {
    check_layout(args.batch_size, args.world_size)?;
    let format = args.output.format.unwrap_or(Format::Table);
    let sizes = MeasureSizes {
        batch: args.batch_size,
        world: args.world_size,
        dim: args.dim,
        seed: args.seed,
    };
    let kinds: &[(StepKind, &str)] = match args.mode {
        Mode::Naive => &[(StepKind::Replicated, "naive")],
        Mode::Disco => &[(StepKind::Disco, "disco")],
        Mode::Both => &[(StepKind::Replicated, "naive"), (StepKind::Disco, "disco")],
    };
    let measured = kinds
        .iter()
        .map(|&(kind, name)| Ok((name, measure(kind, sizes, args.precision, scheduler)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut body = Vec::new();
    let reports: Vec<_> = measured.iter().map(|(_, m)| m.report).collect();
    write_records(&reports, format, &mut body)?;

    let mut summary = Vec::new();
    for (name, m) in &measured {
        summary.push(format!(
            "{name}: loss-scope peak {} elements, {} FLOPs; exchange peak {} elements; {} elements received",
            m.report.loss_elements, m.loss_flops_counted, m.exchange_peak_elements, m.elements_received
        ));
    }
    if let [(_, naive), (_, disco)] = measured.as_slice() {
        summary.push(format!(
            "disco/naive loss FLOPs: {}",
            Ratio::new(disco.loss_flops_counted, naive.loss_flops_counted)
        ));
        summary.push(format!(
            "disco/naive loss-scope peak: {}",
            Ratio::new(disco.report.loss_elements, naive.report.loss_elements)
        ));
    }
    summary.push(format!(
        "disco gradient rel. error vs f64 reference: f64 {:.3e}, f32 {:.3e}",
        precision_error::<f64>(sizes, scheduler)?,
        precision_error::<f32>(sizes, scheduler)?
    ));
    Ok(Rendered {
        body,
        summary,
        format,
        passed: true,
    })
}

#[derive(Debug, Serialize)]
struct StepRow {
    step: usize,
    loss: f64,
}

#[derive(Debug, Serialize)]
struct ComparedStepRow {
    step: usize,
    loss_naive: f64,
    loss_disco: f64,
    abs_diff: f64,
}

/// Samples in the generated dataset per global batch.
const SAMPLES_PER_BATCH: usize = 8;
const DATA_NOISE: f64 = 0.1;

fn cmd_train(args: &TrainArgs, scheduler: Scheduler) -> Result<Rendered> {
    require_f64(args.precision, "train")?;
    check_layout(args.batch_size, args.world_size)?;
    if args.dim == 0 || args.input_dim == 0 {
        return Err(Error::Domain("dimensions must be at least 1".into()));
    }
    let format = args.output.format.unwrap_or(Format::Csv);
    let samples = args
        .batch_size
        .checked_mul(SAMPLES_PER_BATCH)
        .ok_or_else(|| Error::Domain("batch size too large".into()))?;
    let dataset = generate_dataset(samples, args.input_dim, args.dim, DATA_NOISE, args.seed)?;
    let initial = TowerParams::seeded(
        args.input_dim,
        args.dim,
        DEFAULT_TEMPERATURE,
        args.seed.wrapping_add(1),
    )?;
    let config = |mode| TrainConfig {
        global_batch: args.batch_size,
        world_size: args.world_size,
        steps: args.steps,
        learning_rate: args.learning_rate,
        seed: args.seed,
        mode,
        scheduler,
    };

    let mut body = Vec::new();
    let mut summary = Vec::new();
    let single = |mode| -> Result<Vec<StepRow>> {
        Ok(train_run(&config(mode), &dataset, &initial)?
            .trajectory
            .into_iter()
            .map(|(step, loss)| StepRow { step, loss })
            .collect())
    };
    match args.mode {
        Mode::Naive | Mode::Disco => {
            let mode = if args.mode == Mode::Naive {
                TrainMode::Naive
            } else {
                TrainMode::Disco
            };
            let rows = single(mode)?;
            write_trajectory(&rows, &["step", "loss"], format, &mut body)?;
            if let Some(last) = rows.last() {
                summary.push(format!("final loss: {}", last.loss));
            }
        }
        Mode::Both => {
            let naive = train_run(&config(TrainMode::Naive), &dataset, &initial)?;
            let disco = train_run(&config(TrainMode::Disco), &dataset, &initial)?;
            let rows: Vec<ComparedStepRow> = naive
                .trajectory
                .iter()
                .zip(&disco.trajectory)
                .map(|(&(step, a), &(_, b))| ComparedStepRow {
                    step,
                    loss_naive: a,
                    loss_disco: b,
                    abs_diff: (a - b).abs(),
                })
                .collect();
            write_trajectory(
                &rows,
                &["step", "loss_naive", "loss_disco", "abs_diff"],
                format,
                &mut body,
            )?;
            let max_diff = rows.iter().map(|r| r.abs_diff).fold(0.0, f64::max);
            summary.push(format!("max |loss_naive - loss_disco|: {max_diff:e}"));
            summary.push(format!(
                "final parameter rel. difference: {:e}",
                disco.params.rel_error(&naive.params)?
            ));
        }
    }
    Ok(Rendered {
        body,
        summary,
        format,
        passed: true,
    })
}

/// Like [`write_records`], but CSV keeps its header when there are no rows.
fn write_trajectory<T: Serialize>(
    rows: &[T],
    header: &[&str],
    format: Format,
    out: &mut Vec<u8>,
) -> Result<()> {
    if rows.is_empty() && format != Format::Json {
        writeln!(
            out,
            "{}",
            header.join(if format == Format::Csv { "," } else { "  " })
        )
        .map_err(|e| Error::Domain(e.to_string()))?;
        return Ok(());
    }
    write_records(rows, format, out)
}

const GIB: f64 = (1u64 << 30) as f64;

fn cmd_model(args: &ModelArgs) -> Result<Rendered> {
    let format = args.output.format.unwrap_or(Format::Table);
    let inputs = CostInputs::new(
        args.batch_size,
        args.world_size,
        args.layers,
        args.dim,
        args.precision.bytes(),
    )?;
    let table = analytic_table(&inputs)?;
    let mut body = Vec::new();
    write_records(&table, format, &mut body)?;

    let clip = table
        .iter()
        .find(|r| r.method == Method::Clip)
        .expect("table has every method");
    let loss_bytes = clip.loss_bytes();
    let summary = vec![
        format!(
            "CLIP loss bytes: {loss_bytes} ({:.2} GiB, {})",
            loss_bytes as f64 / GIB,
            args.precision
        ),
        format!(
            "savings_fraction(N={}): {}",
            args.world_size,
            savings_fraction(args.world_size)?
        ),
    ];
    Ok(Rendered {
        body,
        summary,
        format,
        passed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("disco").chain(args.iter().copied())).unwrap()
    }

    fn render(args: &[&str]) -> Result<Rendered> {
        match parse(args).command {
            Command::Verify(a) => cmd_verify(&a, Scheduler::Lockstep),
            Command::Bench(a) => cmd_bench(&a, Scheduler::Lockstep),
            Command::Train(a) => cmd_train(&a, Scheduler::Lockstep),
            Command::Model(a) => cmd_model(&a),
        }
    }

    #[test]
    fn model_defaults_report_sixteen_gib_and_savings() {
        let r = render(&["model"]).unwrap();
        assert!(
            r.summary[0].starts_with("CLIP loss bytes: 17179869184 (16.00 GiB"),
            "{:?}",
            r.summary
        );
        assert_eq!(r.summary[1], "savings_fraction(N=64): 31/32");
        let r = render(&["model", "--world-size", "16"]).unwrap();
        assert_eq!(r.summary[1], "savings_fraction(N=16): 7/8");
        let r = render(&["model", "--world-size", "2"]).unwrap();
        assert_eq!(r.summary[1], "savings_fraction(N=2): 0");
    }

    #[test]
    fn layout_errors_are_invalid_arguments() {
        let e = render(&["verify", "--world-size", "3", "--batch-size", "8"])
            .err()
            .unwrap();
        assert_eq!(exit_code(&e), EXIT_INVALID);
        let e = render(&["bench", "--world-size", "3", "--batch-size", "8"])
            .err()
            .unwrap();
        assert_eq!(exit_code(&e), EXIT_INVALID);
        let e = render(&["bench", "--batch-size", "8192"]).err().unwrap();
        assert_eq!(exit_code(&e), EXIT_INVALID);
        let e = render(&["verify", "--world-size", "3"]).err().unwrap();
        assert_eq!(exit_code(&e), EXIT_INVALID);
    }

    #[test]
    fn divergence_is_a_failure() {
        let e = Error::Divergence {
            step: 3,
            detail: String::new(),
        };
        assert_eq!(exit_code(&e), EXIT_CHECK_FAILED);
    }

    #[test]
    fn verify_restricted_grid() {
        let r = render(&[
            "verify",
            "--batch-size",
            "8",
            "--world-size",
            "4",
            "--dim",
            "4",
            "--seed",
            "1",
        ])
        .unwrap();
        assert!(r.passed);
        let r = render(&[
            "verify",
            "--batch-size",
            "8",
            "--world-size",
            "4",
            "--dim",
            "4",
            "--mutate-inter-rank",
        ])
        .unwrap();
        assert!(!r.passed);
        assert!(r.summary.last().unwrap().starts_with("overall: FAIL"));
    }

    #[test]
    fn train_zero_steps_is_header_only() {
        let r = render(&["train", "--steps", "0"]).unwrap();
        assert_eq!(
            String::from_utf8(r.body).unwrap(),
            "step,loss_naive,loss_disco,abs_diff\n"
        );
    }

    #[test]
    fn bench_flop_ratio() {
        let r = render(&[
            "bench",
            "--batch-size",
            "64",
            "--world-size",
            "8",
            "--dim",
            "4",
        ])
        .unwrap();
        assert!(
            r.summary.iter().any(|l| l == "disco/naive loss FLOPs: 1/4"),
            "{:?}",
            r.summary
        );
    }
}
