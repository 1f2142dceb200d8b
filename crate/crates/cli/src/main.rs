//! Command-line front end: collect experiment data, run rank diagnostics,
//! synthesize controllers, and verify the resulting closed loops.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use ddctrl::data::{check_rank, collect, DataError, TimeMode, DEFAULT_RANK_RTOL};
use ddctrl::io;
use ddctrl::synth::{Certificate, DesignObjective, SynthError, SynthOptions};
use ddctrl::verify::{
    lyapunov_decrease_check, passivity_trajectory_check, simulate_closed_loop, CheckRecord,
    ClosedLoop, SampleSpec, VerifyError,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_NOT_ATTAINABLE: u8 = 5;
const EXIT_PRECONDITION: u8 = 6;

#[derive(Parser)]
#[command(name = "ddctrl", version, about = "Data-driven controller synthesis and verification")]
struct Cli {
    /// Seed for all randomized sampling and verification.
    #[arg(long, global = true, default_value_t = 0, env = "DDCTRL_SEED")]
    seed: u64,
    /// Tolerance for equality-constraint residuals.
    #[arg(long, global = true, default_value_t = 1e-8, env = "DDCTRL_EQ_TOL")]
    eq_tol: f64,
    /// Tolerance for eigenvalue margins of matrix inequalities.
    #[arg(long, global = true, default_value_t = 1e-9, env = "DDCTRL_EIG_TOL")]
    eig_tol: f64,
    /// Strictness margin for definite matrix inequalities.
    #[arg(long, global = true, default_value_t = 1e-6, env = "DDCTRL_EPSILON")]
    epsilon: f64,
    /// Write each assembled semidefinite program as JSON to this path.
    #[arg(long, global = true, env = "DDCTRL_DUMP_LMI")]
    dump_lmi: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a plant through an experiment and write the data matrices.
    Collect(CollectArgs),
    /// Print rank diagnostics for a data set.
    Check(CheckArgs),
    /// Synthesize a controller for an objective from a data set.
    Synth(SynthArgs),
    /// Re-check a controller's certificate and simulate the closed loop.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct CollectArgs {
    /// Plant description JSON.
    #[arg(long)]
    plant: PathBuf,
    /// Experiment description JSON.
    #[arg(long)]
    experiment: PathBuf,
    /// Output CSV of samples.
    #[arg(long)]
    out_data: PathBuf,
    /// Output sidecar metadata JSON.
    #[arg(long)]
    out_meta: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// Data CSV produced by `collect`.
    #[arg(long)]
    data: PathBuf,
    /// Sidecar metadata JSON.
    #[arg(long)]
    meta: PathBuf,
    /// Relative tolerance of the rank decisions.
    #[arg(long, default_value_t = DEFAULT_RANK_RTOL)]
    rank_rtol: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// Objective description JSON.
    #[arg(long)]
    objective: PathBuf,
    /// Data CSV produced by `collect`.
    #[arg(long)]
    data: PathBuf,
    /// Sidecar metadata JSON.
    #[arg(long)]
    meta: PathBuf,
    /// Output controller JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Controller JSON produced by `synth`.
    #[arg(long)]
    controller: PathBuf,
    /// Data CSV the controller was synthesized from.
    #[arg(long)]
    data: PathBuf,
    /// Sidecar metadata JSON.
    #[arg(long)]
    meta: PathBuf,
    /// Optional simulation settings JSON.
    #[arg(long)]
    sim: Option<PathBuf>,
    /// Output report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output trajectory CSV of the simulated closed loop.
    #[arg(long)]
    out_trajectory: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = SynthOptions {
        eq_tol: cli.eq_tol,
        eig_tol: cli.eig_tol,
        epsilon: cli.epsilon,
        dump_lmi: cli.dump_lmi.clone(),
    };
    let outcome = match &cli.command {
        Command::Collect(args) => cmd_collect(args),
        Command::Check(args) => cmd_check(args),
        Command::Synth(args) => cmd_synth(args, &opts, cli.seed),
        Command::Verify(args) => cmd_verify(args, &opts, cli.seed),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[derive(Debug)]
struct CliError {
    message: String,
    code: u8,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        self.code
    }

    fn config(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: EXIT_CONFIG }
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_CONFIG,
        };
        CliError { message: e.to_string(), code }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::NotAttainable { .. } => EXIT_NOT_ATTAINABLE,
            SynthError::Infeasible { .. } | SynthError::Lmi(_) => EXIT_INFEASIBLE,
            _ => EXIT_PRECONDITION,
        };
        CliError { message: e.to_string(), code }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        let code = match &e {
            VerifyError::Data(DataError::Divergence { .. }) => EXIT_DIVERGENCE,
            _ => EXIT_CONFIG,
        };
        CliError { message: e.to_string(), code }
    }
}

fn read(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write(path: &PathBuf, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn cmd_collect(args: &CollectArgs) -> Result<u8, CliError> {
    let plant = io::plant_from_json(&read(&args.plant)?)?;
    let exp = io::experiment_from_json(&read(&args.experiment)?)?;
    let data = collect(&plant, &exp)?;
    write(&args.out_data, &io::dataset_to_csv(&data))?;
    write(&args.out_meta, &io::dataset_meta_to_json(&data, &plant.library))?;
    let report = check_rank(&data, DEFAULT_RANK_RTOL);
    println!("collected N = {} samples ({} run(s))", data.samples(), exp.runs.len());
    println!(
        "rank Z0 = {}/{}, rank [Z0; U0] = {}/{}",
        report.rank_z0,
        report.basis_dim,
        report.rank_stacked,
        report.basis_dim + report.input_dim
    );
    Ok(0)
}

fn cmd_check(args: &CheckArgs) -> Result<u8, CliError> {
    let (data, _lib) = io::dataset_from_csv(&read(&args.data)?, &read(&args.meta)?)?;
    let report = check_rank(&data, args.rank_rtol);
    println!("samples: {}", report.samples);
    println!("rank Z0 = {}/{}", report.rank_z0, report.basis_dim);
    println!(
        "rank [Z0; U0] = {}/{}",
        report.rank_stacked,
        report.basis_dim + report.input_dim
    );
    println!("attainable set nonempty: {}", report.attainable_set_nonempty);
    println!("data set equals model set: {}", report.data_equals_model_attainable);
    println!("{}", report.note);
    if !report.data_equals_model_attainable {
        eprintln!(
            "warning: [Z0; U0] is rank deficient; attainability of a target \
             is sufficient but no longer necessary for its achievability"
        );
    }
    Ok(if report.attainable_set_nonempty { 0 } else { 1 })
}

fn cmd_synth(args: &SynthArgs, opts: &SynthOptions, seed: u64) -> Result<u8, CliError> {
    let objective = io::objective_from_json(&read(&args.objective)?)?;
    let (data, lib) = io::dataset_from_csv(&read(&args.data)?, &read(&args.meta)?)?;
    let result = ddctrl::synth::synthesize(&objective, &data, &lib, opts)?;
    let mut report = ddctrl::verify::recheck_certificate(&result, &data, &lib, opts);
    report.seed = seed;
    if !report.all_pass() {
        for c in report.checks.iter().filter(|c| !c.pass) {
            eprintln!("recheck failed: {} (margin {:.3e})", c.name, c.margin);
        }
        return Err(CliError {
            message: "certificate failed independent recheck".into(),
            code: EXIT_INFEASIBLE,
        });
    }
    write(&args.out, &io::controller_to_json(&result, &lib, opts.eq_tol, opts.eig_tol, opts.epsilon))?;
    println!("objective: {}", result.objective.kind());
    println!("certificate: {}", result.certificate.kind());
    if let Some(mu) = result.mu {
        println!("mu = {mu:.6}");
    }
    println!(
        "residuals: max equality {:.3e}, min inequality margin {:.3e}",
        result.residuals.max_equality, result.residuals.min_margin
    );
    println!("wrote {}", args.out.display());
    Ok(0)
}

/// Optional simulation settings for `verify`.
struct SimConfig {
    x0: Option<DVector<f64>>,
    steps: usize,
    h: f64,
    samples: usize,
    radius: f64,
    runs: usize,
    amplitude: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            x0: None,
            steps: 100,
            h: 0.01,
            samples: 10_000,
            radius: 1.0,
            runs: 10,
            amplitude: 1.0,
        }
    }
}

fn sim_from_json(text: &str) -> Result<SimConfig, CliError> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::config(format!("sim config: {e}")))?;
    let mut cfg = SimConfig::default();
    if let Some(x0) = v.get("x0") {
        let raw: Vec<f64> = serde_json::from_value(x0.clone())
            .map_err(|e| CliError::config(format!("sim config x0: {e}")))?;
        cfg.x0 = Some(DVector::from_vec(raw));
    }
    if let Some(s) = v.get("steps").and_then(|x| x.as_u64()) {
        cfg.steps = s as usize;
    }
    if let Some(h) = v.get("h").and_then(|x| x.as_f64()) {
        cfg.h = h;
    }
    if let Some(s) = v.get("samples").and_then(|x| x.as_u64()) {
        cfg.samples = s as usize;
    }
    if let Some(r) = v.get("radius").and_then(|x| x.as_f64()) {
        cfg.radius = r;
    }
    if let Some(r) = v.get("runs").and_then(|x| x.as_u64()) {
        cfg.runs = r as usize;
    }
    if let Some(a) = v.get("amplitude").and_then(|x| x.as_f64()) {
        cfg.amplitude = a;
    }
    Ok(cfg)
}

fn cmd_verify(args: &VerifyArgs, opts: &SynthOptions, seed: u64) -> Result<u8, CliError> {
    let (result, lib) = io::controller_from_json(&read(&args.controller)?)?;
    let (data, _data_lib) = io::dataset_from_csv(&read(&args.data)?, &read(&args.meta)?)?;
    let sim = match &args.sim {
        Some(path) => sim_from_json(&read(path)?)?,
        None => SimConfig::default(),
    };
    let mut report = ddctrl::verify::recheck_certificate(&result, &data, &lib, opts);
    report.seed = seed;
    let cl = ClosedLoop::from_result(&result, lib.clone(), data.mode);

    match &result.certificate {
        Certificate::LyapunovP { .. } | Certificate::DiagonalD { .. } => {
            let rho = match &result.objective {
                DesignObjective::LinearizedStabilization { rho }
                | DesignObjective::NonlinearityCancellation { rho } => *rho,
                _ => 1.0,
            };
            let spec = SampleSpec { samples: sim.samples, radius: sim.radius, seed };
            report.checks.push(lyapunov_decrease_check(&cl, &result.certificate, rho, &spec)?);
        }
        Certificate::PassivityPair { .. } => {
            let m_r = result.f_r_star.as_ref().map_or(0, |f| f.ncols());
            let runs = random_runs(seed, data.state_dim(), m_r, sim.runs, sim.steps, sim.radius, sim.amplitude);
            report
                .checks
                .push(passivity_trajectory_check(&cl, &result.certificate, &runs, sim.h, sim.steps)?);
        }
        Certificate::ExactMatch { .. } => {}
    }

    if let Some(x0) = &sim.x0 {
        let traj = simulate_closed_loop(&cl, x0, None, sim.steps, sim.h)?;
        let terminal = traj.last().map_or(f64::NAN, |x| x.norm());
        report.checks.push(CheckRecord {
            name: "simulation_bounded".into(),
            pass: terminal.is_finite(),
            margin: terminal,
            samples: sim.steps,
        });
        if let Some(path) = &args.out_trajectory {
            let h = if data.mode == TimeMode::Discrete { 1.0 } else { sim.h };
            write(path, &io::trajectory_to_csv(&traj, h, None, None))?;
        }
    }

    for c in &report.checks {
        println!(
            "{:<22} {}  margin {:+.3e}  ({} sample(s))",
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            c.margin,
            c.samples
        );
    }
    if let Some(path) = &args.out {
        write(path, &io::report_to_json(&report))?;
        println!("wrote {}", path.display());
    }
    Ok(if report.all_pass() { 0 } else { 1 })
}

/// Deterministic batch of initial states and reference signals.
fn random_runs(
    seed: u64,
    n: usize,
    m_r: usize,
    runs: usize,
    steps: usize,
    radius: f64,
    amplitude: f64,
) -> Vec<(DVector<f64>, Vec<DVector<f64>>)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..runs)
        .map(|_| {
            let x0 = DVector::from_fn(n, |_, _| rng.random_range(-radius..=radius));
            let r = (0..steps)
                .map(|_| DVector::from_fn(m_r, |_, _| rng.random_range(-amplitude..=amplitude)))
                .collect();
            (x0, r)
        })
        .collect()
}
