//! Bundled problems.
//!
//! * `savs`: a two-storey shear frame under sinusoidal ground acceleration,
//!   braced by two semi-active variable-stiffness devices whose dashpots are
//!   either locked or unlocked. The control picks one of three locking
//!   patterns at each instant.
//! * `scalar`: `x' = -x + u`, a scalar LQR with a closed-form Riccati solution.
//! * `lqr-oracle`: a seeded random 4-state linear-quadratic instance.
//!
//! [`riccati_oracle`] solves linear-quadratic instances directly through the
//! matrix Riccati equation and serves as an independent check on the
//! improvement loop.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::integrate::{rk4_step, symmetrize_head, ValueCoefficients};
use crate::model::{
    AdmissibleSet, BilinearDynamics, BilinearProblem, CoefficientProvider, QuadraticCost, TimeGrid,
};

/// Physical constants of the two-storey frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SavsConstants {
    /// Floor masses (kg).
    pub masses: [f64; 2],
    /// Story stiffness (N/m).
    pub story_stiffness: f64,
    /// Rayleigh damping `C = alpha M + beta K`.
    pub rayleigh: (f64, f64),
    /// Device spring stiffness (N/m).
    pub device_stiffness: f64,
    /// Unlocked dashpot coefficient (kg/s).
    pub dashpot: f64,
    /// Ground acceleration amplitude (m/s^2).
    pub excitation_amplitude: f64,
    /// Ground acceleration frequency (rad/s).
    pub excitation_frequency: f64,
    /// Time horizon (s).
    pub horizon: f64,
}

pub const SAVS: SavsConstants = SavsConstants {
    masses: [100e3, 200e3],
    story_stiffness: 100e6,
    rayleigh: (0.001, 0.0001),
    device_stiffness: 25e6,
    dashpot: 5e3,
    excitation_amplitude: 3.0,
    excitation_frequency: 16.55,
    horizon: 5.0,
};

pub const SAVS_DEFAULT_STEPS: usize = 5000;
/// Largest `|h * lambda|` allowed for the unlocked dashpot relaxation.
pub const SAVS_STIFF_STEP_BOUND: f64 = 1.0;
pub const SCALAR_DEFAULT_STEPS: usize = 1000;
pub const LQR_DEFAULT_STEPS: usize = 2000;
pub const LQR_DEFAULT_SEED: u64 = 20;

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["savs", "scalar", "lqr-oracle"];

/// Looks up a bundled problem by name. `steps` overrides the default grid.
pub fn builtin(name: &str, steps: Option<usize>) -> Result<BilinearProblem> {
    match name {
        "savs" => build_savs_problem(steps.unwrap_or(SAVS_DEFAULT_STEPS)),
        "scalar" => build_scalar_analytic_with_steps(steps.unwrap_or(SCALAR_DEFAULT_STEPS)),
        "lqr-oracle" => build_lqr_instance(LQR_DEFAULT_SEED, steps.unwrap_or(LQR_DEFAULT_STEPS)),
        other => Err(Error::InvalidArgument(format!(
            "unknown builtin problem '{other}', expected one of {}",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

/// The three admissible locking patterns, in order: only device 2
/// unlocked, both unlocked, both locked.
pub fn savs_locking_patterns() -> Vec<DVector<f64>> {
    vec![
        DVector::from_row_slice(&[0.0, 1.0]),
        DVector::from_row_slice(&[1.0, 0.0]),
        DVector::from_row_slice(&[0.0, 0.0]),
    ]
}

/// RK4 substeps per grid step so that the unlocked relaxation rate
/// `k_savs / c` times the integration step stays within
/// [`SAVS_STIFF_STEP_BOUND`]. Classical RK4 is unstable on this mode at
/// `h = 1 ms` (`h * lambda = -5`).
pub fn savs_substeps(grid_steps: usize) -> usize {
    let h = SAVS.horizon / grid_steps.max(1) as f64;
    let rate = SAVS.device_stiffness / SAVS.dashpot;
    ((h * rate / SAVS_STIFF_STEP_BOUND).ceil() as usize).max(1)
}

/// State `x = (z1, z2, z1', z2', w1, w2)`, controls `u = (u1, u2)`.
///
/// The grid carries [`savs_substeps`] integration substeps per step.
pub fn build_savs_problem(grid_steps: usize) -> Result<BilinearProblem> {
    let c = SAVS;
    let [m1, m2] = c.masses;
    let k = c.story_stiffness;
    let mass = DMatrix::from_diagonal(&DVector::from_row_slice(&[m1, m2]));
    let stiffness = DMatrix::from_row_slice(2, 2, &[2.0 * k, -k, -k, k]);
    let damping = &mass * c.rayleigh.0 + &stiffness * c.rayleigh.1;
    let psi = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 1.0]);
    let masses = [m1, m2];

    let mut a = DMatrix::zeros(6, 6);
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    for i in 0..2 {
        for j in 0..2 {
            a[(2 + i, j)] = -stiffness[(i, j)] / masses[i];
            a[(2 + i, 2 + j)] = -damping[(i, j)] / masses[i];
            a[(2 + i, 4 + j)] = psi[(i, j)] / masses[i];
            // w' = -k_savs psi' z'
            if psi[(j, i)] != 0.0 {
                a[(4 + i, 2 + j)] = -c.device_stiffness * psi[(j, i)];
            }
        }
    }

    let release = c.device_stiffness / c.dashpot;
    let mut n1 = DMatrix::zeros(6, 6);
    n1[(5, 5)] = -release;
    let mut n2 = DMatrix::zeros(6, 6);
    n2[(4, 4)] = -release;
    n2[(5, 5)] = -release;

    let mut amp = DMatrix::zeros(6, 1);
    amp[(2, 0)] = -c.excitation_amplitude;
    amp[(3, 0)] = -c.excitation_amplitude;
    let g = CoefficientProvider::Sinusoid { amplitude: amp, omega: c.excitation_frequency, phase: 0.0 };

    let dynamics = BilinearDynamics::new(
        CoefficientProvider::constant(a),
        CoefficientProvider::zeros(6, 2),
        vec![CoefficientProvider::constant(n1), CoefficientProvider::constant(n2)],
        g,
        DVector::zeros(6),
    )?;

    let drift_weight = |scale: f64, force: f64| {
        let mut m = DMatrix::zeros(6, 6);
        m[(0, 0)] = 2.0 * scale;
        m[(0, 1)] = -scale;
        m[(1, 0)] = -scale;
        m[(1, 1)] = scale;
        m[(4, 4)] = force;
        m[(5, 5)] = force;
        m
    };
    let cost = QuadraticCost::new(
        CoefficientProvider::constant(drift_weight(1e5, 5.0)),
        CoefficientProvider::zeros(2, 2),
        drift_weight(1e4, 50.0),
    )?;

    BilinearProblem::new(
        dynamics,
        cost,
        AdmissibleSet::FiniteSet(savs_locking_patterns()),
        TimeGrid::new(0.0, c.horizon, grid_steps)?.with_substeps(savs_substeps(grid_steps))?,
    )
}

/// `x' = -x + u`, `x(0) = 1`, `J = 1/2 int x^2 + u^2 dt` on `[0, 1]`.
pub fn build_scalar_analytic() -> Result<BilinearProblem> {
    build_scalar_analytic_with_steps(SCALAR_DEFAULT_STEPS)
}

pub fn build_scalar_analytic_with_steps(steps: usize) -> Result<BilinearProblem> {
    let one = |v: f64| CoefficientProvider::constant(DMatrix::from_element(1, 1, v));
    let dynamics = BilinearDynamics::new(one(-1.0), one(1.0), vec![one(0.0)], one(0.0), DVector::from_element(1, 1.0))?;
    let cost = QuadraticCost::new(one(1.0), one(1.0), DMatrix::zeros(1, 1))?;
    BilinearProblem::new(dynamics, cost, AdmissibleSet::Unconstrained, TimeGrid::new(0.0, 1.0, steps)?)
}

/// Closed-form Riccati coefficient of the scalar problem,
/// `P' = P^2 + 2P - 1`, `P(1) = 0`.
pub fn scalar_riccati_exact(t: f64) -> f64 {
    let s = 2f64.sqrt();
    let tau = 1.0 - t;
    // P = (1 - e) / ((1 + s) + (s - 1) e) with e = exp(-2 s tau),
    // from the roots -1 +/- s of P^2 + 2P - 1.
    let e = (-2.0 * s * tau).exp();
    (1.0 - e) / ((1.0 + s) + (s - 1.0) * e)
}

/// Random stable 4-state, 2-input linear-quadratic problem with a sinusoidal
/// drift, `R = I`, no bilinear terms and no control constraints.
pub fn build_lqr_instance(seed: u64, steps: usize) -> Result<BilinearProblem> {
    let n = 4;
    let nu = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
    let a = uniform(n, n) - DMatrix::identity(n, n) * 1.5;
    let b = uniform(n, nu);
    let lq = uniform(n, n);
    let lh = uniform(n, n);
    let g_amp = uniform(n, 1);
    let x0 = uniform(n, 1);
    let q = &lq * lq.transpose() + DMatrix::identity(n, n) * 0.5;
    let h = &lh * lh.transpose() * 0.5;

    let dynamics = BilinearDynamics::new(
        CoefficientProvider::constant(a),
        CoefficientProvider::constant(b),
        vec![CoefficientProvider::zeros(n, n); nu],
        CoefficientProvider::Sinusoid { amplitude: g_amp, omega: 2.0, phase: 0.3 },
        DVector::from_column_slice(x0.as_slice()),
    )?;
    let cost = QuadraticCost::new(
        CoefficientProvider::constant(q),
        CoefficientProvider::constant(DMatrix::identity(nu, nu)),
        h,
    )?;
    BilinearProblem::new(dynamics, cost, AdmissibleSet::Unconstrained, TimeGrid::new(0.0, 2.0, steps)?)
}

/// Riccati solution of a linear-quadratic problem together with the optimal
/// cost `1/2 x0'P(0)x0 + p(0)'x0 + r(0)`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub value: ValueCoefficients,
    pub cost: f64,
}

impl RiccatiSolution {
    /// Optimal control `-R^-1 B'(P x + p)` at node `j`.
    pub fn control(&self, problem: &BilinearProblem, j: usize, x: &DVector<f64>) -> DVector<f64> {
        let t = problem.grid().time(j);
        let b = problem.dynamics().b().eval(t);
        let r = problem.cost().r().eval(t);
        let costate = self.value.quadratic(j) * x + self.value.linear(j);
        -r.cholesky().expect("oracle problems have positive definite R").solve(&(b.transpose() * costate))
    }
}

/// Backward Riccati integration,
///
/// ```text
/// P' = -PA - A'P + P B R^-1 B' P - Q,   P(tf) = H
/// p' = -(A - B R^-1 B' P)' p - P g,     p(tf) = 0
/// r' = 1/2 p' B R^-1 B' p - p' g,       r(tf) = 0
/// ```
///
/// Only valid without bilinear terms, with positive definite `R` and no
/// control constraints.
pub fn riccati_oracle(problem: &BilinearProblem) -> Result<ValueCoefficients> {
    riccati_oracle_with_cost(problem).map(|s| s.value)
}

pub fn riccati_oracle_with_cost(problem: &BilinearProblem) -> Result<RiccatiSolution> {
    let dynamics = problem.dynamics();
    let grid = problem.grid();
    if !matches!(problem.set(), AdmissibleSet::Unconstrained) {
        return Err(Error::UnsupportedProblem("Riccati oracle needs unconstrained controls".into()));
    }
    for t in grid.times() {
        if dynamics.ns().iter().any(|ni| ni.eval(t).iter().any(|v| *v != 0.0)) {
            return Err(Error::UnsupportedProblem("Riccati oracle needs all N_i = 0".into()));
        }
        if problem.cost().r().eval(t).cholesky().is_none() {
            return Err(Error::UnsupportedProblem("Riccati oracle needs positive definite R".into()));
        }
    }

    let n = dynamics.n();
    let nn = n * n;
    let sub = grid.substeps();
    let h = -grid.step() / sub as f64;
    let mut quadratic = vec![DMatrix::zeros(n, n); grid.len()];
    let mut linear = vec![DVector::zeros(n); grid.len()];
    let mut y = DVector::zeros(nn + n + 1);
    y.rows_mut(0, nn).copy_from_slice(problem.cost().h().as_slice());
    quadratic[grid.steps()] = problem.cost().h().clone();

    let field = |t: f64, z: &DVector<f64>| {
        let pm = DMatrix::from_column_slice(n, n, &z.as_slice()[..nn]);
        let pv = z.rows(nn, n).into_owned();
        let a = dynamics.a().eval(t);
        let b = dynamics.b().eval(t);
        let g = dynamics.g().eval_vector(t);
        let r = problem.cost().r().eval(t);
        let chol = r.cholesky().expect("checked above");
        // S = B R^-1 B'
        let s = &b * chol.solve(&b.transpose());
        let pdot = -(&pm * &a) - a.transpose() * &pm + &pm * &s * &pm - problem.cost().q().eval(t);
        let closed = &a - &s * &pm;
        let lin_dot = -(closed.transpose() * &pv) - &pm * &g;
        let off_dot = 0.5 * pv.dot(&(&s * &pv)) - pv.dot(&g);
        let mut dz = DVector::zeros(nn + n + 1);
        dz.rows_mut(0, nn).copy_from_slice(pdot.as_slice());
        dz.rows_mut(nn, n).copy_from(&lin_dot);
        dz[nn + n] = off_dot;
        dz
    };

    for j in (0..grid.steps()).rev() {
        let start = grid.time(j + 1);
        for i in 0..sub {
            y = rk4_step(field, start + i as f64 * h, &y, h).map_err(|e| match e {
                Error::Diverged { t, .. } => Error::Diverged { step: Some(j), t },
                other => other,
            })?;
            symmetrize_head(&mut y, n);
        }
        quadratic[j] = DMatrix::from_column_slice(n, n, &y.as_slice()[..nn]);
        linear[j] = y.rows(nn, n).into_owned();
    }
    let x0 = dynamics.x0();
    let cost = 0.5 * x0.dot(&(&quadratic[0] * x0)) + linear[0].dot(x0) + y[nn + n];
    Ok(RiccatiSolution { value: ValueCoefficients::new(quadratic, linear)?, cost })
}
