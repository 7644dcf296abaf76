//! Command-line front end: single runs, convergence ladders, and raw dumps.
//!
//! Exit codes: 0 on success, 1 when assumption validation fails (override
//! with `--force`), 2 on numerical failure (non-convergence or a non-finite
//! state), 64 for usage and configuration errors.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Parser;

use crate::backward::{dump_solution_csv, PipelineOptions};
use crate::condexp::BasisSpec;
use crate::config::{BuiltinId, Config};
use crate::error::{Error, Result};
use crate::forward::{dump_paths_csv, refine_bundle, simulate_bundle};
use crate::harness::{
    closed_form_rows, convergence_study, error_metrics, ErrorReport, Reference, ReferenceKind,
    StudyConfig, TableRow,
};
use crate::model::validate_assumptions;
use crate::recombine::solve_scheme;
use crate::timegrid::TimeGrid;

#[derive(Parser, Debug)]
#[command(
    name = "fbsde",
    about = "Discrete-time solver for forward-backward SDEs with a single jump",
    disable_help_subcommand = true
)]
struct Args {
    /// Problem configuration file (key = value lines, # comments).
    #[arg(long)]
    config: Option<PathBuf>,

    /// single | converge | dump
    #[arg(long, default_value = "single")]
    mode: String,

    /// Step count for single runs and dumps.
    #[arg(long)]
    n: Option<usize>,

    /// Ladder of step counts for converge mode, e.g. 8,16,32,64.
    #[arg(long, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,

    /// Monte Carlo path count.
    #[arg(long, default_value_t = 200_000)]
    paths: usize,

    /// Degree of the global polynomial regression basis.
    #[arg(long, default_value_t = 3)]
    basis_degree: usize,

    /// Alternative local basis, written local:<cells>.
    #[arg(long)]
    basis: Option<String>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output CSV path (converge/single); base path for dumps.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Reference backend: closed | fine:<factor>.
    #[arg(long, default_value = "fine:4")]
    reference: String,

    /// Run even when assumption validation reports violations.
    #[arg(long)]
    force: bool,

    /// Worker thread count (defaults to the number of cores).
    #[arg(long)]
    threads: Option<usize>,
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run_cli<I>(args: I) -> i32
where
    I: IntoIterator<Item = OsString>,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return code;
        }
    };

    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(t) = args.threads {
            builder = builder.num_threads(t);
        }
        match builder.build() {
            Ok(p) => p,
            Err(e) => {
                eprintln!("error: cannot build thread pool: {e}");
                return 64;
            }
        }
    };

    match pool.install(|| run_inner(&args)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ValidationFailed { .. } | Error::Io(_) => 1,
        Error::NonConvergence { .. }
        | Error::ContractionBound { .. }
        | Error::NonFinite { .. }
        | Error::Regression(_)
        | Error::PathMismatch(_)
        | Error::MissingBranch(_) => 2,
        Error::InvalidGrid(_)
        | Error::TimeOutOfRange { .. }
        | Error::InvalidProblem(_)
        | Error::Config(_)
        | Error::UnknownProblem(_) => 64,
    }
}

fn parse_reference(s: &str) -> Result<ReferenceKind> {
    if s == "closed" {
        return Ok(ReferenceKind::ClosedForm);
    }
    if let Some(rest) = s.strip_prefix("fine:") {
        let factor: usize = rest
            .parse()
            .map_err(|_| Error::Config(format!("bad refinement factor `{rest}`")))?;
        if factor == 0 {
            return Err(Error::Config("refinement factor must be >= 1".into()));
        }
        return Ok(ReferenceKind::FineGrid { factor });
    }
    Err(Error::Config(format!(
        "unknown reference `{s}` (expected closed or fine:<factor>)"
    )))
}

fn parse_basis(args: &Args) -> Result<BasisSpec> {
    if let Some(spec) = &args.basis {
        if let Some(cells) = spec.strip_prefix("local:") {
            let cells: usize = cells
                .parse()
                .map_err(|_| Error::Config(format!("bad cell count in `{spec}`")))?;
            if cells == 0 {
                return Err(Error::Config("local basis needs at least one cell".into()));
            }
            return Ok(BasisSpec::piecewise_linear(cells));
        }
        return Err(Error::Config(format!(
            "unknown basis `{spec}` (expected local:<cells>)"
        )));
    }
    Ok(BasisSpec::polynomial(args.basis_degree))
}

fn run_inner(args: &Args) -> Result<()> {
    let config_path = args
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let cfg = Config::load(config_path)?;
    let (spec, jump) = cfg.build()?;
    let problem_id = cfg.problem.expect("config build checked the id");

    // Probe the declared assumptions before doing any numerical work.
    let report = validate_assumptions(&spec, 2000, args.seed ^ 0xa5a5_5a5a);
    if !report.passed() {
        for v in report.violations.iter().take(8) {
            eprintln!("assumption violation: {v}");
        }
        if !args.force {
            return report.into_result().map(|_| ());
        }
        eprintln!("continuing despite violations (--force)");
    }
    jump.validate(spec.horizon)?;

    let pipeline = PipelineOptions {
        basis: parse_basis(args)?,
        ..Default::default()
    };
    let reference = parse_reference(&args.reference)?;

    match args.mode.as_str() {
        "single" => {
            let n = args.n.or(cfg.n_steps).unwrap_or(32);
            let (y0, rep, mesh) =
                single_run(&spec, &jump, problem_id, n, args, &pipeline, reference)?;
            println!("y0 = {y0}");
            println!("err_x_sq = {} (se {})", rep.err_x_sq, rep.se_x);
            println!("err_y_sq = {} (se {})", rep.err_y_sq, rep.se_y);
            println!("err_z_sq = {} (se {})", rep.err_z_sq, rep.se_z);
            println!("err_u_sq = {} (se {})", rep.err_u_sq, rep.se_u);
            if let Some(out) = &args.out {
                let table = crate::harness::ConvergenceTable {
                    rows: vec![TableRow {
                        n,
                        mesh,
                        report: rep,
                        runtime_ms: 0,
                        seed: args.seed,
                    }],
                    slopes: Default::default(),
                    flags: Vec::new(),
                };
                let mut w = BufWriter::new(File::create(out)?);
                table.write_csv(&mut w)?;
            }
            Ok(())
        }
        "converge" => {
            let n_list = args
                .n_list
                .clone()
                .unwrap_or_else(|| vec![8, 16, 32, 64]);
            let study = StudyConfig {
                n_list,
                paths: args.paths,
                seed: args.seed,
                pipeline,
                reference,
                forward_only: false,
            };
            let closed_id = Some(problem_id);
            let table = convergence_study(&spec, &jump, closed_id, &study)?;
            for (name, slope) in [
                ("x", table.slopes.x),
                ("y", table.slopes.y),
                ("z", table.slopes.z),
                ("u", table.slopes.u),
            ] {
                match slope {
                    Some(s) => eprintln!("slope err_{name}_sq: {s:.4}"),
                    None => eprintln!("slope err_{name}_sq: skipped"),
                }
            }
            for f in &table.flags {
                eprintln!("flag: {f}");
            }
            match &args.out {
                Some(out) => {
                    let mut w = BufWriter::new(File::create(out)?);
                    table.write_csv(&mut w)?;
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut w = stdout.lock();
                    table.write_csv(&mut w)?;
                }
            }
            Ok(())
        }
        "dump" => {
            let out = args
                .out
                .as_ref()
                .ok_or_else(|| Error::Config("dump mode requires --out".into()))?;
            let n = args.n.or(cfg.n_steps).unwrap_or(8);
            let grid = TimeGrid::uniform(spec.horizon, n)?;
            let bundle = simulate_bundle(&grid, &jump, args.paths, args.seed)?;
            let sol = solve_scheme(&spec, &grid, &bundle, &pipeline)?;

            let paths_file = out.with_extension("paths.csv");
            let mut w = BufWriter::new(File::create(&paths_file)?);
            dump_paths_csv(&mut w, &spec, &grid, &bundle, &sol.x0_chain)?;
            w.flush()?;

            let sol_file = out.with_extension("solution.csv");
            let mut w = BufWriter::new(File::create(&sol_file)?);
            dump_solution_csv(&mut w, &spec, &grid, &bundle, &sol.x0_chain, &sol.zero, &pipeline)?;
            w.flush()?;
            eprintln!(
                "wrote {} and {}",
                paths_file.display(),
                sol_file.display()
            );
            Ok(())
        }
        other => Err(Error::Config(format!(
            "unknown mode `{other}` (expected single, converge or dump)"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn single_run(
    spec: &crate::model::ProblemSpec,
    jump: &crate::model::JumpModel,
    id: BuiltinId,
    n: usize,
    args: &Args,
    pipeline: &PipelineOptions,
    reference: ReferenceKind,
) -> Result<(f64, ErrorReport, f64)> {
    let grid = TimeGrid::uniform(spec.horizon, n)?;
    match reference {
        ReferenceKind::ClosedForm => {
            let bundle = simulate_bundle(&grid, jump, args.paths, args.seed)?;
            let sol = solve_scheme(spec, &grid, &bundle, pipeline)?;
            let rows = closed_form_rows(id, spec, jump, &grid, &bundle)?;
            let rep = error_metrics(&sol, &Reference::Rows(&rows), jump)?;
            Ok((sol.y0(), rep, grid.mesh()))
        }
        ReferenceKind::FineGrid { factor } => {
            let (coarse, fine, fine_grid) =
                refine_bundle(&grid, factor, jump, args.paths, args.seed)?;
            let sol = solve_scheme(spec, &grid, &coarse, pipeline)?;
            let sol_f = solve_scheme(spec, &fine_grid, &fine, pipeline)?;
            let rep = error_metrics(&sol, &Reference::Fine(&sol_f), jump)?;
            Ok((sol.y0(), rep, grid.mesh()))
        }
    }
}
