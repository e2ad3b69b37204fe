//! Command-line driver: config validation, solves, compression, slice and
//! trajectory export.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use sephjb::als::AlsError;
use sephjb::config::{ConfigError, ProblemConfig};
use sephjb::hjb::{
    check_matching, compress_operator, solve_first_exit, step_finite_horizon, HjbError, Setting,
};
use sephjb::io::{
    read_sr, report_csv, slice_csv, slice_pgm, trajectories_csv, write_atomic, write_sr, SrData,
    SrMode,
};
use sephjb::policy_sim::{export_slice, simulate, PolicyField};

#[derive(Parser)]
#[command(
    name = "sephjb",
    about = "Separated-representation solver for linear HJB desirability PDEs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SrFormat {
    Binary,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum SliceFormat {
    Csv,
    Pgm,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a configuration and check the matching condition
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve the desirability system and write psi.sr, report.csv,
    /// operator_ranks.txt into the output directory
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the target relative residual
        #[arg(long)]
        tol: Option<f64>,
        /// Override the solution rank cap
        #[arg(long)]
        max_rank: Option<usize>,
        /// psi.sr payload encoding
        #[arg(long, value_enum, default_value_t = SrFormat::Binary)]
        format: SrFormat,
        /// Also write the boundary-imposed operator and right-hand side
        #[arg(long)]
        emit_operator: bool,
    },
    /// ALS-compress a stored .sr artifact or a config-built operator
    Compress {
        /// Stored field or operator
        #[arg(long, conflicts_with = "config")]
        input: Option<PathBuf>,
        /// Build the problem operator from a config instead
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target relative tolerance of the compression
        #[arg(long)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_rank: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a 2D slice of a stored field
    Slice {
        #[arg(long)]
        field: PathBuf,
        /// Config supplying the grid geometry
        #[arg(long)]
        config: PathBuf,
        /// Two free dimensions, e.g. "0,1"
        #[arg(long)]
        dims: String,
        /// Fixed coordinates for the remaining dimensions, e.g. "2=0.0,3=1.5"
        #[arg(long, default_value = "")]
        fix: String,
        #[arg(long, value_enum, default_value_t = SliceFormat::Csv)]
        format: SliceFormat,
        #[arg(long)]
        out: PathBuf,
        /// Export the value function −λ·log Ψ instead of Ψ
        #[arg(long)]
        value: bool,
    },
    /// Simulate closed-loop trajectories under the solved policy
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        field: PathBuf,
        /// Initial state, e.g. "2.0,0.0"
        #[arg(long)]
        x0: String,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        t_max: f64,
        /// Number of independent sample paths
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Base seed; path k uses seed base+k
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
    fn solver(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
    fn io(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::io(e.to_string()),
            _ => Failure::validation(e.to_string()),
        }
    }
}

impl From<HjbError> for Failure {
    fn from(e: HjbError) -> Self {
        match &e {
            HjbError::Als(_) => Failure::solver(e.to_string()),
            _ => Failure::validation(e.to_string()),
        }
    }
}

impl From<AlsError> for Failure {
    fn from(e: AlsError) -> Self {
        Failure::solver(e.to_string())
    }
}

impl From<sephjb::io::IoError> for Failure {
    fn from(e: sephjb::io::IoError) -> Self {
        Failure::io(e.to_string())
    }
}

impl From<sephjb::policy_sim::PolicyError> for Failure {
    fn from(e: sephjb::policy_sim::PolicyError) -> Self {
        Failure::validation(e.to_string())
    }
}

fn main() -> ExitCode {
    // SEPHJB_THREADS caps BLAS parallelism; must be set before the first
    // BLAS call.
    if let Ok(n) = std::env::var("SEPHJB_THREADS") {
        std::env::set_var("OPENBLAS_NUM_THREADS", &n);
        std::env::set_var("OMP_NUM_THREADS", &n);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Check { config } => cmd_check(&config),
        Command::Solve {
            config,
            out,
            seed,
            tol,
            max_rank,
            format,
            emit_operator,
        } => cmd_solve(&config, &out, seed, tol, max_rank, format, emit_operator),
        Command::Compress {
            input,
            config,
            tol,
            out,
            max_rank,
            seed,
        } => cmd_compress(input.as_deref(), config.as_deref(), tol, out.as_deref(), max_rank, seed),
        Command::Slice {
            field,
            config,
            dims,
            fix,
            format,
            out,
            value,
        } => cmd_slice(&field, &config, &dims, &fix, format, &out, value),
        Command::Simulate {
            config,
            field,
            x0,
            dt,
            t_max,
            seeds,
            seed,
            out,
        } => cmd_simulate(&config, &field, &x0, dt, t_max, seeds, seed, &out),
    }
}

fn cmd_check(config: &Path) -> Result<(), Failure> {
    let cfg = ProblemConfig::from_path(config)?;
    let (problem, bc, opts) = cfg.build()?;
    problem.validate()?;
    if bc.faces.is_empty() && bc.regions.is_empty() {
        return Err(Failure::validation(
            "boundary specification is empty; the first-exit system would be singular",
        ));
    }
    let report = check_matching(&problem, opts.matching_samples)?;
    println!(
        "matching condition: max relative discrepancy {:.3e} over {} samples ({})",
        report.max_discrepancy,
        report.samples,
        if report.passed() { "pass" } else { "FAIL" }
    );
    if !report.passed() {
        return Err(Failure::validation(format!(
            "matching condition violated at x = {:?} (discrepancy {:.3e})",
            report.worst_point, report.max_discrepancy
        )));
    }
    println!("config ok: {} dims, {} inputs", problem.dim_count(), problem.input_count());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    tol: Option<f64>,
    max_rank: Option<usize>,
    format: SrFormat,
    emit_operator: bool,
) -> Result<(), Failure> {
    let cfg = ProblemConfig::from_path(config)?;
    let (problem, bc, mut opts) = cfg.build()?;
    if let Some(s) = seed {
        opts.als.seed = s;
    }
    if let Some(t) = tol {
        opts.als.target_tolerance = t;
    }
    if let Some(r) = max_rank {
        opts.als.max_rank = r;
    }
    let field = match problem.setting {
        Setting::FirstExit => solve_first_exit(&problem, &bc, &opts)?,
        Setting::FiniteHorizon { .. } => {
            let mut fields = step_finite_horizon(&problem, &bc, &opts)?;
            fields.pop().expect("at least the terminal field")
        }
    };
    let mode = match format {
        SrFormat::Binary => SrMode::Binary,
        SrFormat::Text => SrMode::Text,
    };
    write_sr(&out.join("psi.sr"), &SrData::Vector(field.psi.clone()), mode)?;
    write_atomic(&out.join("report.csv"), report_csv(&field.report).as_bytes())?;

    let mut ranks = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(ranks, "predicted {}", field.operator_ranks.predicted);
    let _ = writeln!(ranks, "constructed {}", field.operator_ranks.constructed);
    let _ = writeln!(ranks, "compressed {}", field.compressed_rank);
    let _ = writeln!(
        ranks,
        "breakdown state_cost {} advection {} diffusion {}",
        field.operator_ranks.state_cost,
        field.operator_ranks.advection,
        field.operator_ranks.diffusion
    );
    let _ = writeln!(ranks, "paper_style_imposed {}", field.paper_accounting);
    for (label, before, after) in &field.impose_steps {
        let _ = writeln!(ranks, "impose \"{label}\" {before} -> {after}");
    }
    write_atomic(&out.join("operator_ranks.txt"), ranks.as_bytes())?;

    if emit_operator {
        let (a, _) = sephjb::hjb::build_operator(&problem)?;
        let imposed = sephjb::hjb::impose_dirichlet(&a, &bc, &problem.grid, problem.lambda)?;
        write_sr(
            &out.join("operator.sr"),
            &SrData::Operator(imposed.operator),
            SrMode::Binary,
        )?;
        write_sr(&out.join("rhs.sr"), &SrData::Vector(imposed.rhs), SrMode::Binary)?;
    }

    println!(
        "solved: rank {} residual {:.3e} ({}) in {:.1}s",
        field.psi.rank(),
        field.report.final_residual(),
        field.report.termination,
        field.report.wall_time.as_secs_f64()
    );
    println!(
        "operator ranks: predicted {} constructed {} compressed {}",
        field.operator_ranks.predicted, field.operator_ranks.constructed, field.compressed_rank
    );
    let floor = -10.0 * field.report.final_residual() * field.psi.norm();
    if field.min_sampled < floor {
        eprintln!(
            "warning: sampled Ψ reaches {:.3e}, below the negativity floor {:.3e}",
            field.min_sampled, floor
        );
    }
    if matches!(
        field.report.termination,
        sephjb::als::TerminationReason::Converged
    ) {
        Ok(())
    } else {
        Err(Failure::solver(format!(
            "solver did not converge: {} (final residual {:.3e})",
            field.report.termination,
            field.report.final_residual()
        )))
    }
}

fn cmd_compress(
    input: Option<&Path>,
    config: Option<&Path>,
    tol: f64,
    out: Option<&Path>,
    max_rank: Option<usize>,
    seed: u64,
) -> Result<(), Failure> {
    let (data, default_out) = match (input, config) {
        (Some(path), None) => (read_sr(path)?, path.with_extension("compressed.sr")),
        (None, Some(path)) => {
            let cfg = ProblemConfig::from_path(path)?;
            let (problem, _, _) = cfg.build()?;
            problem.validate()?;
            let (a, ranks) = sephjb::hjb::build_operator(&problem)?;
            println!(
                "built operator: predicted {} constructed {}",
                ranks.predicted, ranks.constructed
            );
            (SrData::Operator(a), path.with_extension("operator.compressed.sr"))
        }
        _ => {
            return Err(Failure::validation(
                "compress needs exactly one of --input or --config",
            ))
        }
    };
    let before = data.rank();
    let compressed = match data {
        SrData::Vector(v) => {
            let opts = sephjb::als::AlsOptions {
                target_tolerance: tol,
                max_rank: max_rank.unwrap_or_else(|| v.rank().max(1)),
                max_sweeps: 400,
                seed,
                ..Default::default()
            };
            let (reduced, report) = sephjb::als::als_reduce(&v, &opts)?;
            println!(
                "field: rank {before} -> {} (residual {:.3e}, {})",
                reduced.rank(),
                report.final_residual(),
                report.termination
            );
            SrData::Vector(reduced)
        }
        SrData::Operator(a) => {
            let cap = max_rank.unwrap_or_else(|| a.rank().max(1));
            let (reduced, report) = compress_operator(&a, tol, cap, seed)?;
            println!(
                "operator: rank {before} -> {} (residual {:.3e}, {})",
                reduced.rank(),
                report.final_residual(),
                report.termination
            );
            SrData::Operator(reduced)
        }
    };
    let out_path = out.map(Path::to_path_buf).unwrap_or(default_out);
    write_sr(&out_path, &compressed, SrMode::Binary)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn parse_x0(text: &str, d: usize) -> Result<Vec<f64>, Failure> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::validation(format!("cannot parse coordinates `{text}`")))?;
    if parts.len() != d {
        return Err(Failure::validation(format!(
            "expected {d} coordinates, got {}",
            parts.len()
        )));
    }
    Ok(parts)
}

fn cmd_slice(
    field_path: &Path,
    config: &Path,
    dims: &str,
    fix: &str,
    format: SliceFormat,
    out: &Path,
    value: bool,
) -> Result<(), Failure> {
    let cfg = ProblemConfig::from_path(config)?;
    let grid = cfg.grid()?;
    let lambda = cfg.cost.lambda;
    let psi = match read_sr(field_path)? {
        SrData::Vector(v) => v,
        SrData::Operator(_) => {
            return Err(Failure::validation("slice expects a field, found an operator"))
        }
    };
    let dim_parts: Vec<usize> = dims
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::validation(format!("cannot parse --dims `{dims}`")))?;
    if dim_parts.len() != 2 {
        return Err(Failure::validation("--dims needs exactly two dimensions"));
    }
    let mut fixed = Vec::new();
    for part in fix.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Failure::validation(format!("bad --fix entry `{part}`")))?;
        let dim: usize = k
            .trim()
            .parse()
            .map_err(|_| Failure::validation(format!("bad --fix dimension `{k}`")))?;
        let coord: f64 = v
            .trim()
            .parse()
            .map_err(|_| Failure::validation(format!("bad --fix coordinate `{v}`")))?;
        fixed.push((dim, coord));
    }
    let (mut slice, rows, cols) = export_slice(&psi, &grid, &fixed, (dim_parts[0], dim_parts[1]))?;
    if value {
        let max = slice.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let floor = (1e-12 * max).max(f64::MIN_POSITIVE);
        slice.mapv_inplace(|v| -lambda * v.max(floor).ln());
    }
    match format {
        SliceFormat::Csv => write_atomic(out, slice_csv(&slice, &rows, &cols).as_bytes())?,
        SliceFormat::Pgm => write_atomic(out, &slice_pgm(&slice))?,
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    config: &Path,
    field_path: &Path,
    x0: &str,
    dt: f64,
    t_max: f64,
    seeds: u64,
    base_seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = ProblemConfig::from_path(config)?;
    let (problem, bc, _) = cfg.build()?;
    problem.validate()?;
    let psi = match read_sr(field_path)? {
        SrData::Vector(v) => v,
        SrData::Operator(_) => {
            return Err(Failure::validation("simulate expects a field, found an operator"))
        }
    };
    let x0 = parse_x0(x0, problem.dim_count())?;
    let pf = PolicyField::from_psi(psi, &problem, &bc)?;
    let mut trajectories = Vec::with_capacity(seeds as usize);
    let mut tally = std::collections::BTreeMap::new();
    for k in 0..seeds {
        let tr = simulate(&pf, &x0, dt, t_max, base_seed + k)?;
        *tally.entry(tr.exit.to_string()).or_insert(0usize) += 1;
        trajectories.push(tr);
    }
    write_atomic(
        out,
        trajectories_csv(&trajectories, problem.dim_count(), problem.input_count()).as_bytes(),
    )?;
    print!("exit reasons:");
    for (reason, count) in &tally {
        print!(" {reason}={count}");
    }
    println!();
    println!("wrote {}", out.display());
    Ok(())
}
