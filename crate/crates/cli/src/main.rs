use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use otsm_core::certificate::{
    build_decomposition, certify_decomposition, corollary_condition, deterministic_condition, lemma5_bounds,
    lemma7_bounds, observed_perturbation, sigma_star, Variant,
};
use otsm_core::experiment::{run_sweep, SdpMode, SigmaScale, SweepConfig, TrialOptions};
use otsm_core::model::{load_instance, save_instance};
use otsm_core::sdp::{feasibility, solve_sdp, tightness_gap, SdpConfig};
use otsm_core::solver::{align, solve, Init, SolverConfig, SolverResult};
use otsm_core::{BlockPartition, OtsmError, ProblemInstance, StiefelStack};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

const SCHEMA_VERSION: u32 = 1;

const SWEEP_COLUMNS: &str = "\
Record columns (one row per trial, header row first):
  m, d, r, sigma_index, sigma, trial_index, seed   trial coordinates and instance seed
  w_norm, sigma_star                               noise operator norm, closed-form threshold
  objective, sweeps, stationarity, converged       solver outcome
  certified_attempted, cert_valid                  certificate built / valid
  lambda_min_blocks, c, lambda_complement          certificate margins
  eq4_lhs, eq4_rhs, eq4_holds                      noise condition as printed
  eq4_lemma7_rhs, eq4_lemma7_holds                 noise condition with +sqrt(r)
  corollary_rhs, corollary_holds                   Gaussian-noise condition at this sigma
  align_error, align_error_blockwise               ||V~ - V||_F, max_i ||V~_i - V_i||_F
  lemma7_{global,wv,blockwise}_{bound,ok}          perturbation bounds and flags
  wv_aligned_max                                   max_i ||[W V~]_i||_F
  lemma5_t1_gap, lemma5_bound1, lemma5_bound1_ok   ||T1* - T1|| and its bound
  lemma5_bound2_slack, lemma5_bound2_ok            min_i (bound2_i - ||Lambda_i - (m-1)I||)
  sdp_ran, sdp_skip_reason, sdp_gap, sdp_rank,     SDP cross-check (with --sdp, D <= 300)
  sdp_objective, sdp_primal_residual,
  sdp_dual_residual, sdp_iterations, sdp_converged
  time_{generate,solve,certify,sdp}_ms             wall time per stage
Every flag is recomputable from the scalar columns (bounds use 1e-8 slack).
The summary file <out>.summary.csv has one row per (m, sigma) cell.";

#[derive(Parser)]
#[command(name = "otsm", version, about = "Orthogonal trace-sum maximization: generate, solve, certify, sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an instance S = V V^T + W and write it as .otsm
    Gen(GenArgs),
    /// Run spectral initialization and block-coordinate ascent
    Solve(SolveArgs),
    /// Solve (or load a stack) and build the dual certificate
    Certify(CertifyArgs),
    /// Solve the semidefinite relaxation with the reference ADMM solver
    Sdp(SdpArgs),
    /// Monte Carlo sweep over (m, sigma), writing CSV records
    #[command(after_help = SWEEP_COLUMNS)]
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Spectral,
    Truth,
    Random,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 500)]
    max_sweeps: usize,
    #[arg(long, default_value_t = 1e-10)]
    obj_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    stat_tol: f64,
    #[arg(long, value_enum, default_value = "spectral")]
    init: InitArg,
    /// Seed for --init random
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            max_sweeps: self.max_sweeps,
            obj_tol: self.obj_tol,
            stat_tol: self.stat_tol,
            init: match self.init {
                InitArg::Spectral => Init::Spectral,
                InitArg::Truth => Init::Truth,
                InitArg::Random => Init::Random(self.init_seed),
            },
            ..SolverConfig::default()
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the solution stack as JSON
    #[arg(long)]
    stack_out: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Certify this stack (JSON, as written by solve --stack-out) instead of solving
    #[arg(long)]
    stack: Option<PathBuf>,
    /// Build the certificate even if the point is not stationary
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SdpArgs {
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 20_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long)]
    adaptive_rho: bool,
    /// Start ADMM at the solver output instead of zero
    #[arg(long)]
    warm: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Absolute,
    SigmaStar,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<usize>,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    sigma: Vec<f64>,
    #[arg(long, value_enum, default_value = "absolute")]
    sigma_scale: ScaleArg,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cross-check each trial against the SDP (skipped when D > 300)
    #[arg(long)]
    sdp: bool,
    #[arg(long)]
    out: PathBuf,
    /// Keep trials already in --out and run only the missing ones
    #[arg(long)]
    resume: bool,
}

#[derive(Serialize, Deserialize)]
struct StackFile {
    schema_version: u32,
    dims: Vec<usize>,
    rank: usize,
    /// Row-major blocks.
    blocks: Vec<Vec<Vec<f64>>>,
}

impl StackFile {
    fn from_stack(stack: &StiefelStack) -> Self {
        let p = stack.partition();
        StackFile {
            schema_version: SCHEMA_VERSION,
            dims: p.dims().to_vec(),
            rank: p.rank(),
            blocks: stack
                .blocks()
                .iter()
                .map(|b| b.row_iter().map(|row| row.iter().copied().collect()).collect())
                .collect(),
        }
    }

    fn into_stack(self, expected: &BlockPartition) -> Result<StiefelStack, OtsmError> {
        let p = BlockPartition::new(self.dims, self.rank)?;
        if &p != expected {
            return Err(OtsmError::PartitionMismatch);
        }
        let blocks = self
            .blocks
            .iter()
            .zip(p.dims())
            .map(|(rows, &d)| {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                if rows.len() != d || flat.len() != d * p.rank() {
                    return Err(OtsmError::Format(format!("stack block is not {d}x{}", p.rank())));
                }
                Ok(DMatrix::from_row_slice(d, p.rank(), &flat))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if blocks.len() != p.num_blocks() {
            return Err(OtsmError::Format("stack has the wrong number of blocks".into()));
        }
        StiefelStack::new(&p, blocks)
    }
}

enum Failure {
    Usage(String),
    Io(String),
    NotConverged(String),
    Other(String),
}

impl From<OtsmError> for Failure {
    fn from(e: OtsmError) -> Self {
        let msg = e.to_string();
        match e {
            OtsmError::InvalidPartition(_)
            | OtsmError::InvalidConfig(_)
            | OtsmError::PartitionMismatch
            | OtsmError::DimensionMismatch { .. } => Failure::Usage(msg),
            OtsmError::Io { .. }
            | OtsmError::Format(_)
            | OtsmError::UnsupportedVersion { .. }
            | OtsmError::ChecksumMismatch { .. }
            | OtsmError::Csv(_)
            | OtsmError::Json(_) => Failure::Io(msg),
            OtsmError::NonStationary { .. } => Failure::NotConverged(msg),
            _ => Failure::Other(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn read_stack(path: &Path, partition: &BlockPartition) -> Result<StiefelStack, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let file: StackFile = serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Failure::Io(format!("unsupported stack schema version {}", file.schema_version)));
    }
    Ok(file.into_stack(partition)?)
}

fn write_stack(path: &Path, stack: &StiefelStack) -> CmdResult {
    let text = serde_json::to_string(&StackFile::from_stack(stack)).expect("stack serializes");
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn solver_json(res: &SolverResult) -> Value {
    json!({
        "objective": res.objective,
        "sweeps": res.sweeps,
        "converged": res.converged,
        "stationarity": res.stationarity,
        "trajectory": res.trajectory,
    })
}

fn cmd_gen(args: &GenArgs) -> CmdResult {
    let p = BlockPartition::uniform(args.m, args.d, args.r)?;
    let inst = ProblemInstance::generate(&p, args.sigma, args.seed)?;
    save_instance(&args.out, &inst)?;
    let w_norm = inst.noise().expect("generated").operator_norm()?;
    println!(
        "wrote {}: m={} d={} r={} D={} ||W||={:.6} sigma*={:.6}",
        args.out.display(),
        args.m,
        args.d,
        args.r,
        p.total_dim(),
        w_norm,
        sigma_star(args.m, args.d, args.r)
    );
    Ok(())
}

fn cmd_solve(args: &SolveArgs) -> CmdResult {
    let inst = load_instance(&args.instance)?;
    let res = solve(&inst, &args.solver.config())?;
    if let Some(path) = &args.stack_out {
        write_stack(path, &res.stack)?;
    }
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "command": "solve",
        "solver": solver_json(&res),
    }));
    Ok(())
}

fn cmd_certify(args: &CertifyArgs) -> CmdResult {
    let inst = load_instance(&args.instance)?;
    let config = args.solver.config();
    let (stack, solver_report) = match &args.stack {
        Some(path) => (read_stack(path, inst.partition())?, Value::Null),
        None => {
            let res = solve(&inst, &config)?;
            if !res.converged && !args.force {
                return Err(Failure::NotConverged(format!(
                    "solver did not converge (stationarity {:.3e} > {:.1e}); rerun with --force to certify anyway",
                    res.stationarity, config.stat_tol
                )));
            }
            let report = solver_json(&res);
            (res.stack, report)
        }
    };
    // With --force the decomposition is built regardless and `valid` still
    // demands the requested stationarity.
    let build_tol = if args.force { f64::INFINITY } else { config.stat_tol };
    let decomp = build_decomposition(inst.coupling(), &stack, build_tol)?;
    let mut cert = certify_decomposition(&decomp, &stack, inst.coupling().frobenius_norm(), build_tol)?;
    cert.valid &= cert.stationarity_residual <= config.stat_tol && cert.symmetry_residual <= config.stat_tol;

    let p = inst.partition();
    let mut report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "certify",
        "solver": solver_report,
        "certificate": cert,
        "margins": {"block": cert.block_margin(), "complement": cert.complement_margin()},
    });
    if let (Some(truth), Some(noise)) = (inst.truth(), inst.noise()) {
        let aligned = align(truth, &stack)?;
        let aligned_decomp = build_decomposition(inst.coupling(), &aligned, build_tol)?;
        report["condition_eq4_as_stated"] = json!(deterministic_condition(noise, truth, Variant::AsStated)?);
        report["condition_eq4_lemma7_variant"] = json!(deterministic_condition(noise, truth, Variant::Lemma7Consistent)?);
        report["lemma5_bounds"] = json!(lemma5_bounds(noise, truth, &aligned)?);
        report["lemma7_bounds"] = json!(lemma7_bounds(noise, truth)?);
        report["observed"] = json!(observed_perturbation(noise, truth, &aligned, &aligned_decomp)?);
    }
    if let Some(sigma) = inst.sigma() {
        let d = p.dims()[0];
        if p.dims().iter().all(|&x| x == d) {
            report["corollary"] = json!(corollary_condition(p.num_blocks(), d, p.rank(), sigma)?);
        }
    }
    print_json(&report);
    Ok(())
}

fn cmd_sdp(args: &SdpArgs) -> CmdResult {
    let inst = load_instance(&args.instance)?;
    let res = solve(&inst, &args.solver.config())?;
    let config = SdpConfig {
        rho: args.rho,
        max_iters: args.max_iters,
        primal_tol: args.tol,
        dual_tol: args.tol,
        adaptive_rho: args.adaptive_rho,
    };
    let sol = solve_sdp(&inst, &config, args.warm.then_some(&res.stack))?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "command": "sdp",
        "solver": solver_json(&res),
        "sdp": {
            "objective": sol.objective,
            "iterations": sol.iterations,
            "primal_residual": sol.primal_residual,
            "dual_residual": sol.dual_residual,
            "numerical_rank": sol.numerical_rank,
            "converged": sol.converged,
            "rho": sol.rho,
            "warm_start": args.warm,
            "feasibility": feasibility(&sol.u)?,
            "gap": tightness_gap(&sol.u, &res.stack)?,
        },
    }));
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> CmdResult {
    let config = SweepConfig {
        m_values: args.m.clone(),
        d: args.d,
        r: args.r,
        sigma_values: args.sigma.clone(),
        sigma_scale: match args.sigma_scale {
            ScaleArg::Absolute => SigmaScale::Absolute,
            ScaleArg::SigmaStar => SigmaScale::SigmaStar,
        },
        trials_per_cell: args.trials,
        base_seed: args.seed,
        run_sdp: args.sdp,
        output_path: args.out.clone(),
    };
    let options = TrialOptions { sdp_mode: if args.sdp { SdpMode::Warm } else { SdpMode::Off }, ..TrialOptions::default() };
    let out = run_sweep(&config, &options, args.resume)?;
    eprintln!(
        "{} records ({} resumed) -> {}; summary -> {}",
        out.records.len(),
        out.resumed,
        config.output_path.display(),
        config.summary_path().display()
    );
    println!("m,sigma,trials,cert_success_rate,eq4_hold_rate,mean_sdp_gap");
    for cell in &out.summary {
        let gap = cell.mean_sdp_gap.map(|g| format!("{g:.3e}")).unwrap_or_default();
        println!(
            "{},{},{},{:.3},{:.3},{}",
            cell.m, cell.sigma, cell.trials, cell.cert_success_rate, cell.eq4_hold_rate, gap
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Sdp(a) => cmd_sdp(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (code, msg) = match failure {
                Failure::Usage(m) => (2, m),
                Failure::Io(m) => (3, m),
                Failure::NotConverged(m) => (4, m),
                Failure::Other(m) => (1, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
