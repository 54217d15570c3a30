//! Successive control improvement.
//!
//! Starting from an admissible process, each iteration
//!
//! 1. builds the feedback `u(t, x) = argmin_v 1/2 v'R v + y(t, x) v` from the
//!    current `P`, `p` and simulates it forward,
//! 2. re-solves `P`, `p` backward for the new control,
//! 3. evaluates `J`,
//!
//! and stops once `|J_k - J_{k+1}| < epsilon`.
//!
//! The functions `s`, `s_f` and the equivalent cost `J_eq` are exposed for
//! diagnostics; they are what the monotonicity argument is made of.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::integrate::{
    simulate_forward, solve_value_backward, value_sweep, ConstantFeedback, Feedback, ValueCoefficients,
};
use crate::minimizer::{argmin_control, feedback_gradient_row};
use crate::model::{dynamics_rhs_unchecked, eval_q, AdmissibleSet, BilinearProblem, Process};

pub const DEFAULT_MAX_ITERATIONS: usize = 100;
/// Default stopping tolerance, relative to `max(J_0, 1)`.
pub const DEFAULT_RELATIVE_EPSILON: f64 = 1e-4;
/// Slack allowed on `J_{k+1} <= J_k`, relative to `max(J_0, 1)`.
pub const MONOTONICITY_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    /// Absolute tolerance on `|J_k - J_{k+1}|`. `None` means
    /// `DEFAULT_RELATIVE_EPSILON * max(J_0, 1)`.
    pub epsilon: Option<f64>,
    pub max_iterations: usize,
    /// Constant initial control. `None` picks zero when admissible, otherwise
    /// the first point of a finite set or the point of a box nearest zero.
    pub initial_control: Option<DVector<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            initial_control: None,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self, problem: &BilinearProblem) -> Result<()> {
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(invalid(format!("epsilon must be positive and finite, got {eps}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be positive"));
        }
        let u0 = self.resolved_initial_control(problem);
        if u0.len() != problem.dynamics().nu() {
            return Err(invalid(format!(
                "initial_control has length {}, expected {}",
                u0.len(),
                problem.dynamics().nu()
            )));
        }
        if !problem.set().contains(&u0) {
            return Err(invalid("initial_control is not in the admissible set"));
        }
        Ok(())
    }

    pub fn resolved_initial_control(&self, problem: &BilinearProblem) -> DVector<f64> {
        if let Some(u) = &self.initial_control {
            return u.clone();
        }
        let zero = DVector::zeros(problem.dynamics().nu());
        match problem.set() {
            _ if problem.set().contains(&zero) => zero,
            AdmissibleSet::FiniteSet(points) => points[0].clone(),
            AdmissibleSet::Box { lo, hi } => DVector::from_fn(lo.len(), |i, _| 0.0f64.clamp(lo[i], hi[i])),
            AdmissibleSet::Unconstrained => zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    /// `J_0, J_1, ...`; one entry per process computed.
    pub costs: Vec<f64>,
    pub final_process: Process,
    pub final_value: ValueCoefficients,
    pub iterations_run: usize,
    pub termination: Termination,
    /// Tolerance actually used by the stopping rule.
    pub epsilon: f64,
    /// Iterations `k` (1-based) at which `J_k > J_{k-1} + slack`.
    pub cost_increases: Vec<usize>,
    /// Error text when the loop stopped on an integration failure.
    pub failure: Option<String>,
}

impl SolveReport {
    pub fn initial_cost(&self) -> f64 {
        self.costs[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.costs.last().expect("costs always holds J_0")
    }
}

/// Feedback built from node values of `P` and `p`.
struct ImprovingFeedback<'a> {
    problem: &'a BilinearProblem,
    value: &'a ValueCoefficients,
}

impl Feedback for ImprovingFeedback<'_> {
    fn control(&self, node: usize, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let dynamics = self.problem.dynamics();
        let y = feedback_gradient_row(x, self.value.quadratic(node), self.value.linear(node), dynamics, t)?;
        argmin_control(&y, &self.problem.cost().r().eval(t), self.problem.set())
    }
}

fn check_value(problem: &BilinearProblem, value: &ValueCoefficients) -> Result<()> {
    if value.len() != problem.grid().len() {
        return Err(invalid(format!(
            "value coefficients have {} nodes, the grid has {}",
            value.len(),
            problem.grid().len()
        )));
    }
    Ok(())
}

/// Simulates the constant initial control and solves its value coefficients.
pub fn initial_process(problem: &BilinearProblem, opts: &SolveOptions) -> Result<(Process, ValueCoefficients)> {
    opts.validate(problem)?;
    let u0 = opts.resolved_initial_control(problem);
    let process: Process =
        simulate_forward(problem.dynamics(), problem.cost(), &ConstantFeedback(u0), problem.grid())?.into();
    let value = solve_value_backward(problem.dynamics(), problem.cost(), &process.u, problem.grid())?;
    Ok((process, value))
}

/// One improvement step from the coefficients of the previous process.
pub fn improve(problem: &BilinearProblem, value: &ValueCoefficients) -> Result<(Process, ValueCoefficients)> {
    check_value(problem, value)?;
    let fb = ImprovingFeedback { problem, value };
    let process: Process = simulate_forward(problem.dynamics(), problem.cost(), &fb, problem.grid())?.into();
    let next = solve_value_backward(problem.dynamics(), problem.cost(), &process.u, problem.grid())?;
    Ok((process, next))
}

/// Runs the improvement loop to convergence, the iteration cap, or an
/// integration failure.
///
/// Errors are returned only for invalid inputs, minimizer failures, and a
/// failure of the initial process itself; later integration failures end
/// the loop with [`Termination::Diverged`] and keep the last good process.
pub fn solve(problem: &BilinearProblem, opts: &SolveOptions) -> Result<SolveReport> {
    let (mut process, mut value) = initial_process(problem, opts)?;
    let j0 = process.cost;
    let scale = j0.max(1.0);
    let epsilon = opts.epsilon.unwrap_or(DEFAULT_RELATIVE_EPSILON * scale);
    let slack = MONOTONICITY_SLACK * scale;

    let mut costs = vec![j0];
    let mut cost_increases = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut failure = None;

    for k in 1..=opts.max_iterations {
        let (next, next_value) = match improve(problem, &value) {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                termination = Termination::Diverged;
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let prev = process.cost;
        costs.push(next.cost);
        if next.cost > prev + slack {
            cost_increases.push(k);
        }
        process = next;
        value = next_value;
        if (prev - process.cost).abs() < epsilon {
            termination = Termination::Converged;
            break;
        }
    }

    Ok(SolveReport {
        iterations_run: costs.len() - 1,
        costs,
        final_process: process,
        final_value: value,
        termination,
        epsilon,
        cost_increases,
        failure,
    })
}

/// `s(t, xi, v) = l(t, xi, v) + q_t(t, xi) + q_x(t, xi) f(t, xi, v)` for the
/// quadratic `q` with coefficients `P`, `p` at time `t`.
///
/// `q_t` is taken from the right-hand sides of the backward equations, which
/// depend on the control `u_ref` the coefficients were solved for; `v` is the
/// control `s` is evaluated at.
pub fn eval_s(
    problem: &BilinearProblem,
    t: f64,
    xi: &DVector<f64>,
    nu: &DVector<f64>,
    pm: &DMatrix<f64>,
    pv: &DVector<f64>,
    u_ref: &DVector<f64>,
) -> Result<f64> {
    let dynamics = problem.dynamics();
    let cost = problem.cost();
    dynamics.check_state(xi)?;
    dynamics.check_control(nu)?;
    dynamics.check_control(u_ref)?;
    let n = dynamics.n();
    if pm.shape() != (n, n) || pv.len() != n {
        return Err(invalid("P and p must match the state dimension"));
    }
    let q = cost.q().eval(t);
    let acl = dynamics.closed_loop_matrix(u_ref, t);
    let drive = dynamics.b().eval(t) * u_ref + dynamics.g().eval_vector(t);
    let pdot = -(pm * &acl) - acl.transpose() * pm - &q;
    let lin_dot = -(acl.transpose() * pv) - pm * drive;

    let q_t = 0.5 * xi.dot(&(&pdot * xi)) + lin_dot.dot(xi);
    let q_x_f = (pm * xi + pv).dot(&dynamics_rhs_unchecked(t, xi, nu, dynamics));
    Ok(cost.running(t, xi, nu) + q_t + q_x_f)
}

/// `s_f(xi) = 1/2 xi'H xi - q(tf, xi)`.
pub fn eval_s_f(xi: &DVector<f64>, h: &DMatrix<f64>, p_terminal: &DMatrix<f64>, lin_terminal: &DVector<f64>) -> Result<f64> {
    if h.shape() != p_terminal.shape() {
        return Err(invalid("H and P(tf) differ in shape"));
    }
    Ok(0.5 * xi.dot(&(h * xi)) - eval_q(p_terminal, lin_terminal, xi)?)
}

/// `J_eq = q(0, x(0)) + int_0^tf p'(B u + g) + 1/2 u'R u dt`.
///
/// The integral is accumulated by re-running the backward sweep for
/// `process.u`, so `p` is available at the RK4 substages.
pub fn eval_cost_equivalent(problem: &BilinearProblem, process: &Process, value: &ValueCoefficients) -> Result<f64> {
    check_value(problem, value)?;
    let (_, integral) = value_sweep(problem.dynamics(), problem.cost(), &process.u, problem.grid())?;
    Ok(eval_q(value.quadratic(0), value.linear(0), process.x.at(0))? + integral)
}

/// The three terms of `J(x_1, u_1) - J(x_2, u_2) = d1 + d2 + d3`, with `q`
/// built from the coefficients solved for `u_1`:
///
/// ```text
/// d1 = s_f(x_1(tf)) - s_f(x_2(tf))
/// d2 = int s(t, x_1, u_1) - s(t, x_2, u_1) dt
/// d3 = int s(t, x_2, u_1) - s(t, x_2, u_2) dt
/// ```
///
/// Integrals use left-node rectangles, matching the control hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovementTerms {
    pub terminal: f64,
    pub state: f64,
    pub control: f64,
}

pub fn improvement_terms(
    problem: &BilinearProblem,
    first: &Process,
    first_value: &ValueCoefficients,
    second: &Process,
) -> Result<ImprovementTerms> {
    check_value(problem, first_value)?;
    let grid = problem.grid();
    let last = grid.steps();
    let h = problem.cost().h();
    let terminal = eval_s_f(first.x.at(last), h, first_value.quadratic(last), first_value.linear(last))?
        - eval_s_f(second.x.at(last), h, first_value.quadratic(last), first_value.linear(last))?;

    let dt = grid.step();
    let (mut state, mut control) = (0.0, 0.0);
    for j in 0..last {
        let t = grid.time(j);
        let (pm, pv) = (first_value.quadratic(j), first_value.linear(j));
        let u1 = first.u.at(j);
        let s11 = eval_s(problem, t, first.x.at(j), u1, pm, pv, u1)?;
        let s21 = eval_s(problem, t, second.x.at(j), u1, pm, pv, u1)?;
        let s22 = eval_s(problem, t, second.x.at(j), second.u.at(j), pm, pv, u1)?;
        state += dt * (s11 - s21);
        control += dt * (s21 - s22);
    }
    Ok(ImprovementTerms { terminal, state, control })
}
