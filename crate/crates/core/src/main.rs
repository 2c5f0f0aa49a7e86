//! Command-line interface: simulate, estimate, solve, test, and benchmark
//! separable-plus-banded covariance models from the shell.
//!
//! Every command is deterministic given its inputs, configuration, and
//! seed; randomness always flows through seeded ChaCha streams. Outputs are
//! machine-readable (binary stacks, JSON models and reports, CSV tables);
//! no command ever materializes a dense fourth-order covariance tensor.
//! Exit codes: 0 success, 1 usage/input errors, 2 numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sptcov::bandwidth::{select_bandwidth, BandwidthSearch};
use sptcov::estimators::{estimate_full, rel_error, BandedKind, EstimateOptions, SepPlusBandedCov};
use sptcov::gof::{gof_test, GofConfig};
use sptcov::io::{
    export_csv_dir, import_csv_dir, load_model, read_matrix_csv, read_stack, save_model,
    write_matrix_csv, write_stack, Provenance,
};
use sptcov::simgen::{error_experiment, simulate, ExperimentConfig, SimConfig};
use sptcov::solver::{adi_solve, apply_model, AdiConfig, AdiSolution};
use sptcov::{Result, SptError};

/// Schema version stamped into every JSON report.
const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "sptcov", version, about = "Separable-plus-banded covariance estimation")]
struct Cli {
    /// Worker threads (overrides SPTCOV_THREADS; default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BandedArg {
    Stationary,
    Banded,
    None,
}

impl From<BandedArg> for BandedKind {
    fn from(arg: BandedArg) -> BandedKind {
        match arg {
            BandedArg::Stationary => BandedKind::Stationary,
            BandedArg::Banded => BandedKind::Banded,
            BandedArg::None => BandedKind::None,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// Wall time of a full estimation pass.
    Estimation,
    /// Outer iterations of the alternating-direction solver.
    Adi,
    /// Total inner conjugate-gradient iterations of the solver.
    Pcg,
}

impl Profile {
    fn name(self) -> &'static str {
        match self {
            Profile::Estimation => "estimation",
            Profile::Adi => "adi",
            Profile::Pcg => "pcg",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a sample stack from a configured model; saves the truth model.
    Simulate {
        /// Simulation configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output stack file.
        #[arg(long)]
        out: PathBuf,
        /// Truth model path (default: <out>.truth.json).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a separable-plus-banded model to a sample stack.
    #[command(group = ArgGroup::new("bandwidth").required(true).args(["d", "select"]))]
    Estimate {
        /// Input stack file.
        #[arg(long)]
        stack: PathBuf,
        /// Fixed bandwidth.
        #[arg(long)]
        d: Option<usize>,
        /// Candidate bandwidths for cross-validation, comma-separated.
        #[arg(long, value_delimiter = ',')]
        select: Option<Vec<usize>>,
        /// Cross-validation folds.
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Seed of the cross-validation fold shuffle.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Banded component to fit.
        #[arg(long, value_enum, default_value_t = BandedArg::Stationary)]
        banded: BandedArg,
        /// Skip the positive-semidefinite projections.
        #[arg(long)]
        no_psd: bool,
        /// Skip per-cell mean subtraction.
        #[arg(long)]
        no_center: bool,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Truth model; the report then includes the relative error.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Solve `(A1 (x) A2 + B + ridge I) X = RHS` for a saved model.
    Solve {
        /// Model file.
        #[arg(long)]
        model: PathBuf,
        /// Right-hand side matrix (CSV).
        #[arg(long)]
        rhs: PathBuf,
        /// Solution CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Iteration log CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Outer relative tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Tikhonov ridge added to the operator.
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
        /// Outer iteration budget.
        #[arg(long, default_value_t = 200)]
        max_outer: usize,
    },
    /// Bootstrap goodness-of-fit test of the separable-plus-banded class.
    Gof {
        /// Input stack file.
        #[arg(long)]
        stack: PathBuf,
        /// Bandwidth of the class under test (0 tests plain separability).
        #[arg(long)]
        d: usize,
        /// Projection dimensions along the first grid axis.
        #[arg(long = "I", default_value_t = 2)]
        i_dims: usize,
        /// Projection dimensions along the second grid axis.
        #[arg(long = "J", default_value_t = 2)]
        j_dims: usize,
        /// Bootstrap draws.
        #[arg(long, default_value_t = 1000)]
        boot: usize,
        /// Bootstrap seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Recompute the projection subspace on every bootstrap draw.
        #[arg(long)]
        refit_subspace: bool,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time estimation or count solver iterations across grid sizes.
    Bench {
        /// Grid sizes, comma-separated.
        #[arg(long = "K", value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long, value_enum)]
        profile: Profile,
        /// Samples per stack.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep a simulation axis and tabulate method error curves.
    Experiment {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bundle a directory of per-sample CSV matrices into a stack file.
    ImportCsv {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unpack a stack file into per-sample CSV matrices.
    ExportCsv {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("SPTCOV_THREADS") {
            Ok(s) => Some(s.parse().map_err(|_| {
                SptError::InvalidConfig(format!("SPTCOV_THREADS must be a positive integer, got {s:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(SptError::InvalidConfig("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| SptError::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { config, out, truth } => cmd_simulate(&config, &out, truth.as_deref()),
        Command::Estimate {
            stack,
            d,
            select,
            folds,
            seed,
            banded,
            no_psd,
            no_center,
            out,
            report,
            truth,
        } => cmd_estimate(EstimateArgs {
            stack,
            d,
            select,
            folds,
            seed,
            banded,
            no_psd,
            no_center,
            out,
            report,
            truth,
        }),
        Command::Solve {
            model,
            rhs,
            out,
            log,
            tol,
            ridge,
            max_outer,
        } => cmd_solve(&model, &rhs, &out, log.as_deref(), tol, ridge, max_outer),
        Command::Gof {
            stack,
            d,
            i_dims,
            j_dims,
            boot,
            seed,
            refit_subspace,
            report,
        } => cmd_gof(&stack, d, i_dims, j_dims, boot, seed, refit_subspace, report.as_deref()),
        Command::Bench {
            k,
            profile,
            n,
            seed,
            out,
        } => cmd_bench(&k, profile, n, seed, out.as_deref()),
        Command::Experiment { config, out } => cmd_experiment(&config, out.as_deref()),
        Command::ImportCsv { dir, out } => {
            let stack = import_csv_dir(&dir)?;
            write_stack(&out, &stack)?;
            println!(
                "imported {} samples ({} x {}) from {} to {}",
                stack.n(),
                stack.k1(),
                stack.k2(),
                dir.display(),
                out.display()
            );
            Ok(())
        }
        Command::ExportCsv { stack, dir } => {
            let samples = read_stack(&stack)?;
            export_csv_dir(&dir, &samples)?;
            println!("exported {} samples to {}", samples.n(), dir.display());
            Ok(())
        }
    }
}

/// FNV-1a, for stable configuration fingerprints in provenance blocks.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let text = std::fs::read_to_string(path)?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| SptError::Parse(format!("{}: {e}", path.display())))?;
    Ok((cfg, format!("{:016x}", fnv1a64(text.as_bytes()))))
}

fn write_report<T: Serialize>(path: Option<&Path>, body: &T) -> Result<()> {
    if let Some(path) = path {
        let mut json = serde_json::to_string_pretty(body)
            .map_err(|e| SptError::Parse(format!("report serialization failed: {e}")))?;
        json.push('\n');
        std::fs::write(path, json)?;
    }
    Ok(())
}

fn cmd_simulate(config: &Path, out: &Path, truth_path: Option<&Path>) -> Result<()> {
    let (cfg, hash): (SimConfig, String) = read_json_config(config)?;
    let (stack, truth) = simulate(&cfg)?;
    write_stack(out, &stack)?;
    let truth_out = truth_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("truth.json"));
    let provenance = Provenance {
        config_hash: Some(hash),
        seed: Some(cfg.seed),
        rng: Some("chacha8".into()),
    };
    save_model(&truth_out, &truth, provenance)?;
    println!(
        "wrote {} samples ({} x {}) to {}; truth model in {}",
        stack.n(),
        stack.k1(),
        stack.k2(),
        out.display(),
        truth_out.display()
    );
    Ok(())
}

struct EstimateArgs {
    stack: PathBuf,
    d: Option<usize>,
    select: Option<Vec<usize>>,
    folds: usize,
    seed: u64,
    banded: BandedArg,
    no_psd: bool,
    no_center: bool,
    out: PathBuf,
    report: Option<PathBuf>,
    truth: Option<PathBuf>,
}

#[derive(Serialize)]
struct CvRow {
    d: usize,
    xi: Option<f64>,
    penalized: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

#[derive(Serialize)]
struct EstimateReport {
    schema_version: u32,
    command: &'static str,
    n: usize,
    k1: usize,
    k2: usize,
    d: usize,
    banded: &'static str,
    selected_by: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<Vec<CvRow>>,
    psd: bool,
    center: bool,
    seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rel_error: Option<f64>,
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let started = Instant::now();
    let stack = read_stack(&args.stack)?;
    let kind: BandedKind = args.banded.into();
    let opts = EstimateOptions {
        center: !args.no_center,
        psd: !args.no_psd,
    };
    let (d, selected_by, cv) = match (&args.d, &args.select) {
        (Some(d), _) => (*d, "fixed", None),
        (None, Some(candidates)) => {
            let search = BandwidthSearch {
                candidates: candidates.clone(),
                folds: args.folds,
                seed: args.seed,
                kind,
                center: opts.center,
                ..BandwidthSearch::default()
            };
            let selection = select_bandwidth(&stack, &search)?;
            let rows = selection
                .entries
                .iter()
                .map(|e| CvRow {
                    d: e.d,
                    xi: e.xi,
                    penalized: e.penalized,
                    message: e.message.clone(),
                })
                .collect();
            (selection.d_hat, "cv", Some(rows))
        }
        (None, None) => unreachable!("clap group requires --d or --select"),
    };
    let model = estimate_full(&stack, d, kind, &opts)?;
    save_model(&args.out, &model, Provenance::default())?;
    let rel = match &args.truth {
        Some(path) => {
            let (truth, _) = load_model(path)?;
            Some(rel_error(&model, &truth)?)
        }
        None => None,
    };
    let report = EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "estimate",
        n: stack.n(),
        k1: stack.k1(),
        k2: stack.k2(),
        d,
        banded: match kind {
            BandedKind::Stationary => "stationary",
            BandedKind::Banded => "banded",
            BandedKind::None => "none",
        },
        selected_by,
        cv,
        psd: opts.psd,
        center: opts.center,
        seconds: started.elapsed().as_secs_f64(),
        rel_error: rel,
    };
    write_report(args.report.as_deref(), &report)?;
    let mut line = format!(
        "fitted d = {d} ({}) on {} samples of {} x {}; model in {}",
        report.banded,
        stack.n(),
        stack.k1(),
        stack.k2(),
        args.out.display()
    );
    if let Some(r) = rel {
        line.push_str(&format!("; relative error vs truth {r:.6e}"));
    }
    println!("{line}");
    Ok(())
}

fn write_iteration_log(path: &Path, solution: &AdiSolution) -> Result<()> {
    let mut csv = String::from("sweep,rho,rel_change,residual,pcg_iters\n");
    for (i, step) in solution.history.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i + 1,
            step.rho,
            step.rel_change,
            step.residual,
            step.pcg_iters
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn cmd_solve(
    model_path: &Path,
    rhs_path: &Path,
    out: &Path,
    log: Option<&Path>,
    tol: f64,
    ridge: f64,
    max_outer: usize,
) -> Result<()> {
    let (model, _) = load_model(model_path)?;
    let rhs = read_matrix_csv(rhs_path)?;
    let config = AdiConfig {
        tol,
        ridge,
        max_outer,
        ..AdiConfig::default()
    };
    let solution = adi_solve(&model, rhs.view(), &config)?;
    write_matrix_csv(out, solution.x.view())?;
    if let Some(path) = log {
        write_iteration_log(path, &solution)?;
    }
    println!(
        "{} after {} outer sweeps ({} inner iterations), residual {:.3e}; solution in {}",
        if solution.converged { "converged" } else { "stopped" },
        solution.outer_iters,
        solution.pcg_total(),
        solution.residual,
        out.display()
    );
    if !solution.converged {
        return Err(SptError::NonConvergence {
            iters: solution.outer_iters,
            residual: solution.residual,
            tol,
        });
    }
    Ok(())
}

#[derive(Serialize)]
struct GofReport {
    schema_version: u32,
    command: &'static str,
    n: usize,
    k1: usize,
    k2: usize,
    d: usize,
    i_dims: usize,
    j_dims: usize,
    n_boot: usize,
    seed: u64,
    refit_subspace: bool,
    statistic: f64,
    p_value: f64,
    redraws: usize,
    seconds: f64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_gof(
    stack_path: &Path,
    d: usize,
    i_dims: usize,
    j_dims: usize,
    boot: usize,
    seed: u64,
    refit_subspace: bool,
    report: Option<&Path>,
) -> Result<()> {
    let started = Instant::now();
    let stack = read_stack(stack_path)?;
    let cfg = GofConfig {
        d,
        i_dims,
        j_dims,
        n_boot: boot,
        seed,
        refit_subspace,
    };
    let result = gof_test(&stack, &cfg)?;
    let body = GofReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "gof",
        n: stack.n(),
        k1: stack.k1(),
        k2: stack.k2(),
        d,
        i_dims,
        j_dims,
        n_boot: boot,
        seed,
        refit_subspace,
        statistic: result.statistic,
        p_value: result.p_value,
        redraws: result.redraws,
        seconds: started.elapsed().as_secs_f64(),
    };
    write_report(report, &body)?;
    println!(
        "statistic {:.6e}, p-value {:.4} ({} bootstrap draws)",
        result.statistic, result.p_value, boot
    );
    Ok(())
}

/// Odd bandwidth scaling with the grid, `~K/10`, for benchmark stacks.
fn bench_bandwidth(k: usize) -> usize {
    let d = k / 10 + 1;
    let d = if d % 2 == 0 { d + 1 } else { d };
    d.min(if k % 2 == 0 { k - 1 } else { k }).max(1)
}

fn cmd_bench(ks: &[usize], profile: Profile, n: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    if ks.is_empty() {
        return Err(SptError::InvalidConfig("bench needs at least one grid size".into()));
    }
    let mut csv = String::from("k,profile,seconds,iters\n");
    for &k in ks {
        let cfg = SimConfig {
            k,
            n,
            tau: 3.0,
            d_true: bench_bandwidth(k),
            sep_kind: sptcov::simgen::SepKind::Legendre,
            filter_kind: sptcov::simgen::FilterKind::Signed,
            noise_sigma2: 0.5,
            seed: seed ^ (k as u64),
        };
        let (stack, _) = simulate(&cfg)?;
        let (seconds, iters) = match profile {
            Profile::Estimation => {
                let started = Instant::now();
                let model = estimate_full(
                    &stack,
                    cfg.d_true,
                    BandedKind::Stationary,
                    &EstimateOptions::default(),
                )?;
                let elapsed = started.elapsed().as_secs_f64();
                drop(model);
                (elapsed, 0usize)
            }
            Profile::Adi | Profile::Pcg => {
                let model = estimate_full(
                    &stack,
                    cfg.d_true,
                    BandedKind::Stationary,
                    &EstimateOptions::default(),
                )?;
                let x_true = manufactured_rhs(&model)?;
                let y = apply_model(&model, x_true.view())?;
                let adi = AdiConfig {
                    tol: 1e-6,
                    ridge: 1e-5,
                    ..AdiConfig::default()
                };
                let started = Instant::now();
                let solution = adi_solve(&model, y.view(), &adi)?;
                let elapsed = started.elapsed().as_secs_f64();
                let iters = match profile {
                    Profile::Adi => solution.outer_iters,
                    _ => solution.pcg_total(),
                };
                (elapsed, iters)
            }
        };
        csv.push_str(&format!("{k},{},{seconds},{iters}\n", profile.name()));
    }
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Deterministic unit-norm probe surface for manufactured solver problems.
fn manufactured_rhs(model: &SepPlusBandedCov) -> Result<ndarray::Array2<f64>> {
    let (k1, k2) = (model.k1(), model.k2());
    let mut x = ndarray::Array2::from_shape_fn((k1, k2), |(i, j)| {
        (1.0 + (i as f64) * 0.7).sin() * (1.0 + (j as f64) * 1.3).cos()
    });
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(SptError::InvalidConfig("degenerate probe surface".into()));
    }
    x.mapv_inplace(|v| v / norm);
    Ok(x)
}

fn cmd_experiment(config: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, _hash): (ExperimentConfig, String) = read_json_config(config)?;
    let result = error_experiment(&cfg)?;
    let csv = result.to_csv();
    match out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            println!(
                "wrote {} cells over axis {} to {}",
                result.cells.len(),
                result.axis_name,
                path.display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}
