//! `chmm`: fit, decode, select, simulate and benchmark kinship-coupled HMMs
//! on delimited signal matrices.
//!
//! Exit codes: 0 success, 2 input/format error, 3 capacity error,
//! 4 numerical degeneracy, 5 internal invariant violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use chmm_core::decoding::{decode_callset, CallSet};
use chmm_core::error::{ChmmError, Result};
use chmm_core::exact::{fit_exact_em, ExactFitOptions};
use chmm_core::io::{
    file_digest, parse_sim_config, read_groups, read_kinship, read_signal, read_snp_counts,
    state_labels, write_atomic, write_benchmark_report, write_callset, write_matrix,
    write_selection_report, ModelArchive, SignalFile,
};
use chmm_core::model::{
    initial_params, CouplingParams, EmissionMode, ModelDims, ModelParams, ObservationMatrix,
    SimilarityMatrix, DEFAULT_JOINT_STATE_CAP,
};
use chmm_core::selection::{select_omega, select_q, SelectionGrid, SelectionOptions};
use chmm_core::simulate::{
    run_benchmark, simulate, BenchmarkOptions, Method, Study,
};
use chmm_core::variational::{fit_vem, run_ve, VemOptions};

#[derive(Parser)]
#[command(name = "chmm", version, about = "Coupled hidden Markov models for joint CNV detection")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a signal matrix and persist it as an archive.
    Fit(FitArgs),
    /// Decode per-locus status calls with a fitted model.
    Decode(DecodeArgs),
    /// Choose the number of hidden states on a penalized-bound grid.
    SelectQ(SelectQArgs),
    /// Calibrate the coupling strength on a weighted-RSS grid.
    SelectOmega(SelectOmegaArgs),
    /// Generate a synthetic dataset from a config file.
    Simulate(SimulateArgs),
    /// Run a replicated method-comparison study.
    Bench(BenchArgs),
    /// Estimate a kinship matrix from SNP minor-allele counts.
    Kinship(KinshipArgs),
    /// Compute log R ratios from observed and expected intensities.
    Lrr(LrrArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitMethod {
    Vem,
    Exact,
    Independent,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    signal: PathBuf,
    #[arg(long)]
    kinship: PathBuf,
    /// Number of hidden states.
    #[arg(long)]
    states: usize,
    /// Coupling strength on the log scale (≤ 0).
    #[arg(long, allow_hyphen_values = true)]
    log_omega: f64,
    #[arg(long, value_enum, default_value = "vem")]
    method: FitMethod,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Fixed-point sweeps per variational E-step.
    #[arg(long, default_value_t = 3)]
    n_ve_sweeps: usize,
    /// Tie all states to one noise variance.
    #[arg(long)]
    homoscedastic: bool,
    /// Joint-state cap for the exact method.
    #[arg(long, default_value_t = DEFAULT_JOINT_STATE_CAP)]
    joint_cap: usize,
    /// Two-column individual,group file: fit each group separately.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    signal: PathBuf,
    #[arg(long, default_value = "viterbi")]
    rule: DecodeRule,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DecodeRule {
    Viterbi,
    Map,
}

#[derive(Args)]
struct SelectQArgs {
    #[arg(long)]
    signal: PathBuf,
    #[arg(long)]
    kinship: PathBuf,
    /// Comma-separated state counts, e.g. 2,3,4.
    #[arg(long)]
    grid: String,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    log_omega: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    homoscedastic: bool,
    /// Count emission parameters and the initial law in the penalty too.
    #[arg(long)]
    full_penalty: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectOmegaArgs {
    #[arg(long)]
    signal: PathBuf,
    #[arg(long)]
    kinship: PathBuf,
    #[arg(long)]
    states: usize,
    /// Comma-separated log-omega values, or `default` for −k/20, k = 1..10.
    #[arg(long, default_value = "default", allow_hyphen_values = true)]
    grid: String,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    homoscedastic: bool,
    /// Fit every grid point from scratch instead of warm-starting.
    #[arg(long)]
    cold_start: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Study 1 (runtime scaling) or 2 (classification quality).
    #[arg(long)]
    study: u8,
    #[arg(long)]
    replicates: usize,
    #[arg(long, default_value_t = 20_240_101)]
    seed: u64,
    /// Subset of iHMM-EM,CHMM-VEM,CHMM-EM (default depends on the study).
    #[arg(long)]
    methods: Option<String>,
    #[arg(long, default_value_t = 1000)]
    n_loci: usize,
    /// Kinship file override for the simulated panels.
    #[arg(long)]
    kinship: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KinshipArgs {
    /// SNP minor-allele-count matrix (rows individuals, entries 0/1/2).
    #[arg(long)]
    snp: PathBuf,
    #[arg(long, allow_hyphen_values = true, default_value_t = 1)]
    alpha: i32,
    #[arg(long)]
    out: PathBuf,
    /// Also write the unclamped estimates.
    #[arg(long)]
    raw_out: Option<PathBuf>,
}

#[derive(Args)]
struct LrrArgs {
    #[arg(long)]
    observed: PathBuf,
    /// One-row matrix of reference intensities with matching locus ids.
    #[arg(long)]
    expected: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(args) => cmd_fit(args),
        Command::Decode(args) => cmd_decode(args),
        Command::SelectQ(args) => cmd_select_q(args),
        Command::SelectOmega(args) => cmd_select_omega(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Kinship(args) => cmd_kinship(args),
        Command::Lrr(args) => cmd_lrr(args),
    }
}

fn emission_mode(homoscedastic: bool) -> EmissionMode {
    if homoscedastic {
        EmissionMode::Homoscedastic
    } else {
        EmissionMode::Heteroscedastic
    }
}

/// Fit one panel and assemble its archive; returns the callset as well so
/// grouped fits can merge calls without re-decoding.
#[allow(clippy::too_many_arguments)]
fn fit_panel(
    x: &ObservationMatrix,
    similarity: SimilarityMatrix,
    ids: &[String],
    args: &FitArgs,
    signal_digest: &str,
    kinship_digest: &str,
) -> Result<(ModelArchive, CallSet)> {
    let coupling = match args.method {
        FitMethod::Independent => CouplingParams::independent(),
        _ => CouplingParams::new(args.log_omega)?,
    };
    let mode = emission_mode(args.homoscedastic);
    let init = initial_params(x, args.states, mode, similarity, coupling)?;

    let (params, trace, n_iterations, converged, method) = match args.method {
        FitMethod::Vem | FitMethod::Independent => {
            let opts = VemOptions {
                max_iter: args.max_iter,
                tol: args.tol,
                n_ve_sweeps: args.n_ve_sweeps,
            };
            let report = fit_vem(x, &init, &opts)?;
            let label = if args.method == FitMethod::Vem {
                "vem"
            } else {
                "independent"
            };
            (
                report.params,
                report.bound_trace,
                report.n_iterations,
                report.converged,
                label,
            )
        }
        FitMethod::Exact => {
            let opts = ExactFitOptions {
                max_iter: args.max_iter,
                tol: args.tol,
                joint_state_cap: args.joint_cap,
            };
            let report = fit_exact_em(x, &init, &opts)?;
            (
                report.params,
                report.log_likelihood_trace,
                report.n_iterations,
                report.converged,
                "exact",
            )
        }
    };

    let state = run_ve(x, &params, args.n_ve_sweeps)?;
    let calls = decode_callset(&state, params.chain());
    let archive = ModelArchive {
        params,
        method: method.to_string(),
        individual_ids: ids.to_vec(),
        converged,
        n_iterations,
        n_ve_sweeps: args.n_ve_sweeps,
        bound_trace: trace,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        signal_digest: signal_digest.to_string(),
        kinship_digest: kinship_digest.to_string(),
    };
    Ok((archive, calls))
}

fn subset_signal(signal: &SignalFile, rows: &[usize]) -> Result<(ObservationMatrix, Vec<String>)> {
    let n_loci = signal.observations.n_loci();
    let data = Array2::from_shape_fn((rows.len(), n_loci), |(a, t)| {
        signal.observations.data()[(rows[a], t)]
    });
    let ids = rows
        .iter()
        .map(|&r| signal.individual_ids[r].clone())
        .collect();
    Ok((ObservationMatrix::new(data)?, ids))
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let signal = read_signal(&args.signal)?;
    let kinship = read_kinship(&args.kinship)?;
    if kinship.max_asymmetry > 1e-9 {
        eprintln!(
            "warning: kinship symmetrized; largest asymmetry {}",
            kinship.max_asymmetry
        );
    }
    if kinship.n_clamped > 0 {
        eprintln!(
            "warning: {} negative kinship entries clamped to 0",
            kinship.n_clamped
        );
    }
    let signal_digest = file_digest(&args.signal)?;
    let kinship_digest = file_digest(&args.kinship)?;

    match &args.groups {
        None => {
            let similarity = kinship.align_to(&signal.individual_ids)?;
            let (archive, _) = fit_panel(
                &signal.observations,
                similarity,
                &signal.individual_ids,
                &args,
                &signal_digest,
                &kinship_digest,
            )?;
            archive.save(&args.out)?;
            println!(
                "fitted {} ({} iterations, converged: {}) -> {}",
                archive.method,
                archive.n_iterations,
                archive.converged,
                args.out.display()
            );
        }
        Some(groups_path) => {
            let groups = read_groups(groups_path, &signal.individual_ids)?;
            let mut merged: Vec<(usize, String, CallSet, Vec<String>, Vec<String>)> = Vec::new();
            for (name, rows) in &groups {
                let (x, ids) = subset_signal(&signal, rows)?;
                let similarity = kinship.align_to(&ids)?;
                let (archive, calls) = fit_panel(
                    &x,
                    similarity,
                    &ids,
                    &args,
                    &signal_digest,
                    &kinship_digest,
                )?;
                let group_out = group_archive_path(&args.out, name);
                archive.save(&group_out)?;
                println!(
                    "group '{name}': fitted {} ({} iterations, converged: {}) -> {}",
                    archive.method,
                    archive.n_iterations,
                    archive.converged,
                    group_out.display()
                );
                let labels = state_labels(archive.params.emission());
                merged.push((rows[0], name.clone(), calls, ids, labels));
            }
            let calls_path = merged_calls_path(&args.out);
            write_merged_calls(&calls_path, &signal.locus_ids, &merged, args.states)?;
            println!("merged calls -> {}", calls_path.display());
        }
    }
    Ok(())
}

fn group_archive_path(base: &Path, group: &str) -> PathBuf {
    let mut name = base.file_name().map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "model".into());
    name.push('.');
    name.push_str(group);
    base.with_file_name(name)
}

fn merged_calls_path(base: &Path) -> PathBuf {
    let mut name = base.file_name().map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "model".into());
    name.push_str(".calls.csv");
    base.with_file_name(name)
}

/// Merged per-group calls; tau columns are indexed by state because label
/// semantics are per group.
fn write_merged_calls(
    path: &Path,
    locus_ids: &[String],
    groups: &[(usize, String, CallSet, Vec<String>, Vec<String>)],
    n_states: usize,
) -> Result<()> {
    let mut out = String::from("individual,group,locus,state");
    for r in 0..n_states {
        out.push_str(&format!(",tau_{r}"));
    }
    out.push('\n');
    for (_, group, calls, ids, labels) in groups {
        let (n_ind, n_loci, q) = calls.tau.dim();
        for i in 0..n_ind {
            for t in 0..n_loci {
                out.push_str(&format!(
                    "{},{},{},{}",
                    ids[i],
                    group,
                    locus_ids[t],
                    labels[calls.viterbi_path[(i, t)]]
                ));
                for r in 0..q {
                    out.push_str(&format!(",{}", calls.tau[(i, t, r)]));
                }
                out.push('\n');
            }
        }
    }
    write_atomic(path, &out)
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let archive = ModelArchive::load(&args.model)?;
    let signal = read_signal(&args.signal)?;
    let digest = file_digest(&args.signal)?;
    if digest != archive.signal_digest {
        eprintln!(
            "warning: signal digest {digest} differs from the archive's {}",
            archive.signal_digest
        );
    }
    if signal.individual_ids != archive.individual_ids {
        return Err(ChmmError::Input(
            "signal individuals do not match the archive (same ids, same order required)"
                .into(),
        ));
    }
    // carry the fitted parameters over to this signal's length
    let p = &archive.params;
    let dims = ModelDims::new(
        signal.observations.n_individuals(),
        signal.observations.n_loci(),
        p.dims().n_states(),
    )?;
    let params = ModelParams::new(
        dims,
        p.emission().clone(),
        p.chain().clone(),
        *p.coupling(),
        p.similarity().clone(),
    )?;
    let state = run_ve(&signal.observations, &params, archive.n_ve_sweeps)?;
    let calls = decode_callset(&state, params.chain());
    write_callset(
        &args.out,
        &calls,
        args.rule == DecodeRule::Viterbi,
        &signal.individual_ids,
        &signal.locus_ids,
        params.emission(),
    )?;
    println!("calls -> {}", args.out.display());
    Ok(())
}

fn parse_grid_usizes(grid: &str) -> Result<Vec<usize>> {
    grid.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| ChmmError::Input(format!("bad grid entry '{v}'")))
        })
        .collect()
}

fn cmd_select_q(args: SelectQArgs) -> Result<()> {
    let signal = read_signal(&args.signal)?;
    let kinship = read_kinship(&args.kinship)?;
    let similarity = kinship.align_to(&signal.individual_ids)?;
    let grid = SelectionGrid::for_states(parse_grid_usizes(&args.grid)?)?;
    let opts = SelectionOptions {
        fit: VemOptions {
            max_iter: args.max_iter,
            tol: args.tol,
            ..Default::default()
        },
        mode: emission_mode(args.homoscedastic),
        full_penalty: args.full_penalty,
        warm_start: true,
    };
    let report = select_q(
        &signal.observations,
        &similarity,
        CouplingParams::new(args.log_omega)?,
        &grid,
        &opts,
    )?;
    write_selection_report(&args.out, &report)?;
    match report.chosen_q {
        Some(q) => println!("chosen n_states: {q} -> {}", args.out.display()),
        None => println!("no candidate fit succeeded -> {}", args.out.display()),
    }
    Ok(())
}

fn cmd_select_omega(args: SelectOmegaArgs) -> Result<()> {
    let signal = read_signal(&args.signal)?;
    let kinship = read_kinship(&args.kinship)?;
    let similarity = kinship.align_to(&signal.individual_ids)?;
    let grid = if args.grid == "default" {
        SelectionGrid::for_omegas(SelectionGrid::default_log_omega_grid())?
    } else {
        let values: Result<Vec<f64>> = args
            .grid
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| ChmmError::Input(format!("bad grid entry '{v}'")))
            })
            .collect();
        SelectionGrid::for_omegas(values?)?
    };
    let opts = SelectionOptions {
        fit: VemOptions {
            max_iter: args.max_iter,
            tol: args.tol,
            ..Default::default()
        },
        mode: emission_mode(args.homoscedastic),
        full_penalty: false,
        warm_start: !args.cold_start,
    };
    let report = select_omega(&signal.observations, &similarity, args.states, &grid, &opts)?;
    write_selection_report(&args.out, &report)?;
    match report.chosen_log_omega {
        Some(w) => println!("chosen log omega: {w} -> {}", args.out.display()),
        None => println!("no candidate fit succeeded -> {}", args.out.display()),
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| ChmmError::Input(format!("cannot read {}: {e}", args.config.display())))?;
    let base = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let config = parse_sim_config(&text, &base)?;
    let data = simulate(&config)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let ind_ids: Vec<String> = (1..=config.n_individuals)
        .map(|i| format!("ind_{i}"))
        .collect();
    let locus_ids: Vec<String> = (1..=config.n_loci).map(|t| format!("locus_{t}")).collect();

    write_matrix(
        &args.out_dir.join("signal.csv"),
        &ind_ids,
        &locus_ids,
        data.observations.data(),
    )?;
    let truth = data.truth.mapv(|s| s as f64);
    write_matrix(&args.out_dir.join("truth.csv"), &ind_ids, &locus_ids, &truth)?;
    write_matrix(
        &args.out_dir.join("kinship.csv"),
        &ind_ids,
        &ind_ids,
        config.similarity.matrix(),
    )?;
    write_atomic(&args.out_dir.join("config.txt"), &text)?;
    println!(
        "simulated {}x{} dataset -> {}",
        config.n_individuals,
        config.n_loci,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let study = match args.study {
        1 => Study::One,
        2 => Study::Two,
        other => {
            return Err(ChmmError::Input(format!(
                "unknown study {other}; pick 1 or 2"
            )))
        }
    };
    let methods = match &args.methods {
        Some(list) => list
            .split(',')
            .map(|m| Method::parse(m.trim()))
            .collect::<Result<Vec<_>>>()?,
        None => match study {
            Study::One => vec![Method::IHmmEm, Method::ChmmVem, Method::ChmmEm],
            Study::Two => vec![Method::IHmmEm, Method::ChmmVem],
        },
    };
    let kinship = match &args.kinship {
        Some(path) => Some(read_kinship(path)?.similarity),
        None => None,
    };
    let opts = BenchmarkOptions {
        n_replicates: args.replicates,
        root_seed: args.seed,
        methods,
        n_loci: args.n_loci,
        kinship,
        ..Default::default()
    };
    let report = run_benchmark(study, &opts)?;
    let written = write_benchmark_report(&args.out, &report)?;
    for s in &report.summaries {
        println!(
            "{}\t{}\tok={} failed={}\tfpr={:.4} fnr={:.4} accuracy={:.4}",
            s.config, s.method, s.n_ok, s.n_failed, s.mean_fpr, s.mean_fnr, s.mean_accuracy
        );
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_kinship(args: KinshipArgs) -> Result<()> {
    let (ids, counts) = read_snp_counts(&args.snp)?;
    let estimate = chmm_core::io::kinship_from_snp(&counts, args.alpha)?;
    if estimate.dropped_monomorphic > 0 {
        eprintln!(
            "warning: dropped {} monomorphic SNP columns",
            estimate.dropped_monomorphic
        );
    }
    write_matrix(&args.out, &ids, &ids, estimate.similarity.matrix())?;
    if let Some(raw_out) = &args.raw_out {
        write_matrix(raw_out, &ids, &ids, &estimate.raw)?;
    }
    println!("kinship ({} individuals) -> {}", ids.len(), args.out.display());
    Ok(())
}

fn cmd_lrr(args: LrrArgs) -> Result<()> {
    let observed = read_signal(&args.observed)?;
    let expected = read_signal(&args.expected)?;
    if expected.observations.n_individuals() != 1 {
        return Err(ChmmError::Input(format!(
            "expected-intensity file must have exactly one row, found {}",
            expected.observations.n_individuals()
        )));
    }
    if expected.locus_ids != observed.locus_ids {
        return Err(ChmmError::Input(
            "expected-intensity locus ids do not match the observed file".into(),
        ));
    }
    let expected_row: Vec<f64> = (0..expected.observations.n_loci())
        .map(|t| expected.observations.data()[(0, t)])
        .collect();
    let lrr = chmm_core::io::compute_lrr(observed.observations.data(), &expected_row)?;
    write_matrix(
        &args.out,
        &observed.individual_ids,
        &observed.locus_ids,
        &lrr,
    )?;
    println!("log R ratios -> {}", args.out.display());
    Ok(())
}
