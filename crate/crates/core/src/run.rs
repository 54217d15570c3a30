//! Solve orchestration for the command-line front end: problem loading,
//! the iteration table, and the CSV artifacts.
//!
//! * `costs.csv`: `k,J,dJ` with `dJ_k = J_k - J_{k-1}` (blank for `k = 0`)
//! * `trajectory.csv`: `t,x1..xn,u1..unu` for the final process, one row per node
//! * `value_t0.csv`: `i,P_i1..P_in,p_i` at `t0`
//!
//! Numbers are written with 12 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::parse_config;
use crate::error::{Error, Result};
use crate::integrate::ValueCoefficients;
use crate::krotov::{solve, SolveOptions, SolveReport, Termination};
use crate::model::{BilinearProblem, Process, TimeGrid};
use crate::savs_bench::builtin;

pub const COSTS_FILE: &str = "costs.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const VALUE_FILE: &str = "value_t0.csv";

/// Iteration count of the bundled structural run.
pub const SAVS_ITERATIONS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Builtin(String),
    Config(PathBuf),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub epsilon: Option<f64>,
    pub max_iterations: Option<usize>,
    pub steps: Option<usize>,
}

/// Solver defaults for bundled problems. The structural problem runs a
/// fixed number of iterations; its cost never settles below 1.0 in
/// absolute terms, so that tolerance only stops a genuinely stalled run.
pub fn builtin_options(name: &str) -> SolveOptions {
    match name {
        "savs" => SolveOptions {
            epsilon: Some(1.0),
            max_iterations: SAVS_ITERATIONS,
            initial_control: None,
        },
        _ => SolveOptions::default(),
    }
}

/// Resolves a source into a validated problem and solver options.
pub fn load(source: &Source, overrides: &Overrides) -> Result<(BilinearProblem, SolveOptions)> {
    let (mut problem, mut opts) = match source {
        Source::Builtin(name) => (builtin(name, overrides.steps)?, builtin_options(name)),
        Source::Config(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text)?
        }
    };
    if let (Source::Config(_), Some(steps)) = (source, overrides.steps) {
        let g = problem.grid();
        let grid = TimeGrid::new(g.t0(), g.tf(), steps)?.with_substeps(g.substeps())?;
        problem = problem.with_grid(grid)?;
    }
    if let Some(eps) = overrides.epsilon {
        opts.epsilon = Some(eps);
    }
    if let Some(max) = overrides.max_iterations {
        opts.max_iterations = max;
    }
    opts.validate(&problem)?;
    Ok((problem, opts))
}

/// Process exit status for a finished run.
pub fn exit_code(termination: Termination) -> i32 {
    match termination {
        Termination::Converged => 0,
        Termination::MaxIterations => 2,
        Termination::Diverged => 3,
    }
}

/// Exit status for input errors.
pub const INPUT_ERROR_EXIT: i32 = 1;

/// Exit status for a run that failed before producing a report.
pub fn error_exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => exit_code(Termination::Diverged),
        _ => INPUT_ERROR_EXIT,
    }
}

fn num(v: f64) -> String {
    format!("{v:.11e}")
}

pub fn costs_csv(report: &SolveReport) -> String {
    let mut out = String::from("k,J,dJ\n");
    for (k, j) in report.costs.iter().enumerate() {
        let dj = if k == 0 { String::new() } else { num(j - report.costs[k - 1]) };
        writeln!(out, "{k},{},{dj}", num(*j)).unwrap();
    }
    out
}

pub fn trajectory_csv(grid: &TimeGrid, process: &Process) -> String {
    let mut out = String::from("t");
    for i in 1..=process.x.dim() {
        write!(out, ",x{i}").unwrap();
    }
    for i in 1..=process.u.dim() {
        write!(out, ",u{i}").unwrap();
    }
    out.push('\n');
    for (j, t) in grid.times().enumerate() {
        out.push_str(&num(t));
        for v in process.x.at(j).iter().chain(process.u.at(j).iter()) {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    out
}

pub fn value_csv(value: &ValueCoefficients) -> String {
    let pm = value.quadratic(0);
    let pv = value.linear(0);
    let n = pv.len();
    let mut out = String::from("i");
    for k in 1..=n {
        write!(out, ",P_{k}").unwrap();
    }
    out.push_str(",p\n");
    for i in 0..n {
        write!(out, "{}", i + 1).unwrap();
        for k in 0..n {
            write!(out, ",{}", num(pm[(i, k)])).unwrap();
        }
        writeln!(out, ",{}", num(pv[i])).unwrap();
    }
    out
}

/// Table of `k`, `J_k`, `dJ_k`, followed by the termination reason.
pub fn iteration_table(report: &SolveReport) -> String {
    let mut out = format!("{:>4}  {:>20}  {:>20}\n", "k", "J_k", "dJ_k");
    for (k, j) in report.costs.iter().enumerate() {
        let dj = if k == 0 { String::from("-") } else { format!("{:.11e}", j - report.costs[k - 1]) };
        writeln!(out, "{k:>4}  {:>20}  {dj:>20}", format!("{j:.11e}")).unwrap();
    }
    write!(out, "termination: {:?} after {} iteration(s)", report.termination, report.iterations_run).unwrap();
    if let Some(f) = &report.failure {
        write!(out, " ({f})").unwrap();
    }
    if !report.cost_increases.is_empty() {
        write!(out, "\ncost increased beyond tolerance at iteration(s) {:?}", report.cost_increases).unwrap();
    }
    out.push('\n');
    out
}

pub fn write_artifacts(dir: &Path, problem: &BilinearProblem, report: &SolveReport) -> Result<()> {
    let io = |e: std::io::Error| Error::Config(format!("cannot write to {}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join(COSTS_FILE), costs_csv(report)).map_err(io)?;
    fs::write(dir.join(TRAJECTORY_FILE), trajectory_csv(problem.grid(), &report.final_process)).map_err(io)?;
    fs::write(dir.join(VALUE_FILE), value_csv(&report.final_value)).map_err(io)?;
    Ok(())
}

/// Loads, solves, prints the iteration table to `log`, and writes the
/// artifacts under `out_dir`.
pub fn run_solve(source: &Source, out_dir: &Path, overrides: &Overrides, log: &mut dyn Write) -> Result<SolveReport> {
    let (problem, opts) = load(source, overrides)?;
    let report = solve(&problem, &opts)?;
    log.write_all(iteration_table(&report).as_bytes())
        .map_err(|e| Error::Config(format!("cannot print report: {e}")))?;
    write_artifacts(out_dir, &problem, &report)?;
    Ok(report)
}
