//! Fixed-step classical Runge-Kutta integration.
//!
//! Forward: the state equation under a feedback, with the running cost
//! carried as one extra state so `J` comes out of the same RK4 step.
//! Backward: the coupled `P`/`p` equations for a given control trajectory,
//!
//! ```text
//! P' = -P (A + {uN}) - (A + {uN})' P - Q,        P(tf) = H
//! p' = -(A + {uN})' p - P (B u + g),             p(tf) = 0
//! ```
//!
//! Controls are held constant over each grid step at the value of the
//! step's left node, in both directions. A grid step is covered by
//! `grid.substeps()` equal RK4 steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::model::{dynamics_rhs_unchecked, BilinearDynamics, QuadraticCost, TimeGrid, Trajectory};

/// State norm above which forward simulation reports divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Quadratic and linear coefficients of the improving function
/// `q(t, xi) = 1/2 xi' P(t) xi + p(t)' xi`, one pair per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueCoefficients {
    quadratic: Vec<DMatrix<f64>>,
    linear: Vec<DVector<f64>>,
}

impl ValueCoefficients {
    pub fn new(quadratic: Vec<DMatrix<f64>>, linear: Vec<DVector<f64>>) -> Result<Self> {
        if quadratic.len() != linear.len() || quadratic.is_empty() {
            return Err(invalid("value coefficients need matching, nonempty P and p sequences"));
        }
        Ok(Self { quadratic, linear })
    }

    /// `P` at node `j`.
    pub fn quadratic(&self, j: usize) -> &DMatrix<f64> {
        &self.quadratic[j]
    }

    /// `p` at node `j`.
    pub fn linear(&self, j: usize) -> &DVector<f64> {
        &self.linear[j]
    }

    pub fn quadratics(&self) -> &[DMatrix<f64>] {
        &self.quadratic
    }

    pub fn linears(&self) -> &[DVector<f64>] {
        &self.linear
    }

    pub fn len(&self) -> usize {
        self.quadratic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quadratic.is_empty()
    }
}

/// A control law `(node, t, x) -> u`. `node` is the index of the grid node
/// at which the law is sampled, so implementations can look up node-aligned
/// data without searching on `t`.
pub trait Feedback {
    fn control(&self, node: usize, t: f64, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> Feedback for F
where
    F: Fn(usize, f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    fn control(&self, node: usize, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        self(node, t, x)
    }
}

/// Open-loop constant control.
#[derive(Debug, Clone)]
pub struct ConstantFeedback(pub DVector<f64>);

impl Feedback for ConstantFeedback {
    fn control(&self, _node: usize, _t: f64, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.0.clone())
    }
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One classical RK4 step of `y' = f(t, y)`. `h` may be negative.
pub fn rk4_step<F>(mut f: F, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    if h == 0.0 || !h.is_finite() {
        return Err(invalid("RK4 step size must be finite and nonzero"));
    }
    let diverged = |t: f64| Error::Diverged { step: None, t };
    let half = 0.5 * h;
    let k1 = f(t, y);
    if !all_finite(&k1) {
        return Err(diverged(t));
    }
    let k2 = f(t + half, &(y + &k1 * half));
    if !all_finite(&k2) {
        return Err(diverged(t + half));
    }
    let k3 = f(t + half, &(y + &k2 * half));
    if !all_finite(&k3) {
        return Err(diverged(t + half));
    }
    let k4 = f(t + h, &(y + &k3 * h));
    if !all_finite(&k4) {
        return Err(diverged(t + h));
    }
    let next = y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    if !all_finite(&next) {
        return Err(diverged(t + h));
    }
    Ok(next)
}

fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::Diverged { t, .. } => Error::Diverged { step: Some(step), t },
        other => other,
    }
}

/// Simulates `x' = A x + B u + {uN} x + g` from `dynamics.x0()` under `fb`
/// and returns `(x, u, J)`.
///
/// The feedback is sampled once per step at the left node and held over the
/// RK4 substages. The terminal `u` sample repeats the last applied control.
pub fn simulate_forward(
    dynamics: &BilinearDynamics,
    cost: &QuadraticCost,
    fb: &dyn Feedback,
    grid: &TimeGrid,
) -> Result<(Trajectory, Trajectory, f64)> {
    let n = dynamics.n();
    let sub = grid.substeps();
    let h = grid.step() / sub as f64;
    let mut xs = Vec::with_capacity(grid.len());
    let mut us = Vec::with_capacity(grid.len());

    let mut y = DVector::zeros(n + 1);
    y.rows_mut(0, n).copy_from(dynamics.x0());
    xs.push(dynamics.x0().clone());

    for j in 0..grid.steps() {
        let t = grid.time(j);
        let x = y.rows(0, n).into_owned();
        let nu = fb.control(j, t, &x)?;
        dynamics.check_control(&nu)?;
        if !all_finite(&nu) {
            return Err(invalid(format!("feedback returned a non-finite control at node {j}")));
        }
        let field = |s: f64, z: &DVector<f64>| {
            let xi = z.rows(0, n).into_owned();
            let mut dz = DVector::zeros(n + 1);
            dz.rows_mut(0, n).copy_from(&dynamics_rhs_unchecked(s, &xi, &nu, dynamics));
            dz[n] = cost.running(s, &xi, &nu);
            dz
        };
        for i in 0..sub {
            y = rk4_step(field, t + i as f64 * h, &y, h).map_err(|e| at_step(e, j + 1))?;
        }
        let x_next = y.rows(0, n).into_owned();
        if x_next.norm() > DIVERGENCE_NORM {
            return Err(Error::Diverged { step: Some(j + 1), t: grid.time(j + 1) });
        }
        xs.push(x_next);
        us.push(nu);
    }
    let last = us.last().cloned().unwrap_or_else(|| DVector::zeros(dynamics.nu()));
    us.push(last);

    let x_final = xs.last().expect("grid has at least two nodes");
    let total = y[n] + cost.terminal(x_final);
    Ok((Trajectory::new(n, xs)?, Trajectory::new(dynamics.nu(), us)?, total))
}

/// Replaces the leading `n*n` block of `y`, read as a column-major matrix,
/// by its symmetric part.
pub(crate) fn symmetrize_head(y: &mut DVector<f64>, n: usize) {
    let raw = DMatrix::from_column_slice(n, n, &y.as_slice()[..n * n]);
    let sym = (&raw + raw.transpose()) * 0.5;
    y.rows_mut(0, n * n).copy_from_slice(sym.as_slice());
}

/// Backward sweep shared by [`solve_value_backward`] and the equivalent-cost
/// computation. Returns the coefficients together with
/// `int_0^tf p'(B u + g) + 1/2 u'R u dt`, accumulated as an extra state.
pub(crate) fn value_sweep(
    dynamics: &BilinearDynamics,
    cost: &QuadraticCost,
    u: &Trajectory,
    grid: &TimeGrid,
) -> Result<(ValueCoefficients, f64)> {
    u.check_aligned(grid, "control trajectory")?;
    if u.dim() != dynamics.nu() {
        return Err(invalid(format!(
            "control trajectory has dimension {}, expected {}",
            u.dim(),
            dynamics.nu()
        )));
    }
    let n = dynamics.n();
    let nn = n * n;
    let sub = grid.substeps();
    let h = -grid.step() / sub as f64;

    let mut quadratic = vec![DMatrix::zeros(n, n); grid.len()];
    let mut linear = vec![DVector::zeros(n); grid.len()];
    let terminal = cost.h().clone();

    let mut y = DVector::zeros(nn + n + 1);
    y.rows_mut(0, nn).copy_from_slice(terminal.as_slice());
    quadratic[grid.steps()] = terminal;

    for j in (0..grid.steps()).rev() {
        let nu = u.at(j);
        let field = |s: f64, z: &DVector<f64>| {
            let pm = DMatrix::from_column_slice(n, n, &z.as_slice()[..nn]);
            let pv = z.rows(nn, n).into_owned();
            let acl = dynamics.closed_loop_matrix(nu, s);
            let drive = dynamics.b().eval(s) * nu + dynamics.g().eval_vector(s);
            let pdot = -(&pm * &acl) - acl.transpose() * &pm - cost.q().eval(s);
            let lin_dot = -(acl.transpose() * &pv) - &pm * &drive;
            let integrand = pv.dot(&drive) + 0.5 * nu.dot(&(cost.r().eval(s) * nu));
            let mut dz = DVector::zeros(nn + n + 1);
            dz.rows_mut(0, nn).copy_from_slice(pdot.as_slice());
            dz.rows_mut(nn, n).copy_from(&lin_dot);
            // accumulates int_t^tf, so runs against time
            dz[nn + n] = -integrand;
            dz
        };
        let start = grid.time(j + 1);
        for i in 0..sub {
            y = rk4_step(field, start + i as f64 * h, &y, h).map_err(|e| at_step(e, j))?;
            symmetrize_head(&mut y, n);
        }
        quadratic[j] = DMatrix::from_column_slice(n, n, &y.as_slice()[..nn]);
        linear[j] = y.rows(nn, n).into_owned();
    }
    let integral = y[nn + n];
    Ok((ValueCoefficients { quadratic, linear }, integral))
}

/// Solves the backward `P`/`p` equations for control trajectory `u`.
pub fn solve_value_backward(
    dynamics: &BilinearDynamics,
    cost: &QuadraticCost,
    u: &Trajectory,
    grid: &TimeGrid,
) -> Result<ValueCoefficients> {
    value_sweep(dynamics, cost, u, grid).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientProvider;

    fn c(v: f64) -> CoefficientProvider {
        CoefficientProvider::constant(DMatrix::from_element(1, 1, v))
    }

    fn scalar(a: f64, x0: f64) -> BilinearDynamics {
        BilinearDynamics::new(c(a), c(0.0), vec![c(0.0)], c(0.0), DVector::from_element(1, x0)).unwrap()
    }

    fn scalar_cost(q: f64, h: f64) -> QuadraticCost {
        QuadraticCost::new(c(q), c(0.0), DMatrix::from_element(1, 1, h)).unwrap()
    }

    fn zero_u(grid: &TimeGrid, nu: usize) -> Trajectory {
        Trajectory::constant(&DVector::zeros(nu), grid).unwrap()
    }

    #[test]
    fn rk4_constant_field() {
        let y = DVector::from_row_slice(&[1.5, -2.0]);
        let next = rk4_step(|_, z| DVector::zeros(z.len()), 0.0, &y, 0.1).unwrap();
        assert_eq!(next, y);
    }

    #[test]
    fn rk4_exponential_forward_and_backward() {
        let one = DVector::from_element(1, 1.0);
        let fwd = rk4_step(|_, z| z.clone(), 0.0, &one, 0.1).unwrap();
        assert!((fwd[0] - 0.1f64.exp()).abs() <= 1e-7);
        let bwd = rk4_step(|_, z| -z.clone(), 0.0, &one, -0.1).unwrap();
        assert!((bwd[0] - 0.1f64.exp()).abs() <= 1e-7);
    }

    #[test]
    fn rk4_rejects_zero_step_and_reports_blowup() {
        let one = DVector::from_element(1, 1.0);
        assert!(matches!(rk4_step(|_, z| z.clone(), 0.0, &one, 0.0), Err(Error::InvalidArgument(_))));
        let err = rk4_step(|_, z| z * f64::INFINITY, 0.25, &one, 0.1).unwrap_err();
        assert!(matches!(err, Error::Diverged { t, .. } if t == 0.25));
    }

    #[test]
    fn forward_rest_state() {
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let d = scalar(-3.0, 0.0);
        let (x, u, j) = simulate_forward(&d, &scalar_cost(1.0, 1.0), &ConstantFeedback(DVector::zeros(1)), &grid)
            .unwrap();
        assert!(x.samples().iter().all(|s| s[0] == 0.0));
        assert_eq!(u.len(), grid.len());
        assert_eq!(j, 0.0);
    }

    #[test]
    fn forward_terminal_cost_only() {
        let grid = TimeGrid::new(0.0, 2.0, 10).unwrap();
        let x0 = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let d = BilinearDynamics::new(
            CoefficientProvider::zeros(3, 3),
            CoefficientProvider::zeros(3, 1),
            vec![CoefficientProvider::zeros(3, 3)],
            CoefficientProvider::zeros(3, 1),
            x0.clone(),
        )
        .unwrap();
        let cost = QuadraticCost::new(CoefficientProvider::zeros(3, 3), c(0.0), DMatrix::identity(3, 3)).unwrap();
        let (_, _, j) = simulate_forward(&d, &cost, &ConstantFeedback(DVector::zeros(1)), &grid).unwrap();
        assert!((j - 0.5 * x0.norm_squared()).abs() < 1e-15);
    }

    #[test]
    fn forward_decay_terminal_cost() {
        let grid = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let (_, _, j) =
            simulate_forward(&scalar(-1.0, 1.0), &scalar_cost(0.0, 2.0), &ConstantFeedback(DVector::zeros(1)), &grid)
                .unwrap();
        assert!((j - (-2.0f64).exp()).abs() <= 1e-6);
    }

    #[test]
    fn substeps_refine_integration_not_control() {
        let coarse = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let fine = coarse.with_substeps(8).unwrap();
        let fb = |node: usize, _t: f64, x: &DVector<f64>| Ok(DVector::from_element(1, -0.5 * x[0] + node as f64 * 0.01));
        let d = BilinearDynamics::new(c(-2.0), c(1.0), vec![c(0.3)], c(0.0), DVector::from_element(1, 1.0)).unwrap();
        let (x1, u1, _) = simulate_forward(&d, &scalar_cost(1.0, 0.0), &fb, &fine).unwrap();
        // same hold, 8x smaller RK4 step
        let dense = TimeGrid::new(0.0, 1.0, 80).unwrap();
        let held = |node: usize, _t: f64, _x: &DVector<f64>| Ok(u1.at(node / 8).clone());
        let (x2, _, _) = simulate_forward(&d, &scalar_cost(1.0, 0.0), &held, &dense).unwrap();
        for j in 0..=10 {
            assert!((x1.at(j)[0] - x2.at(8 * j)[0]).abs() < 1e-14);
        }
        let v = solve_value_backward(&d, &scalar_cost(1.0, 0.5), &u1, &fine).unwrap();
        assert_eq!(v.len(), 11);
    }

    #[test]
    fn forward_holds_control_and_repeats_last() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let fb = |node: usize, _t: f64, _x: &DVector<f64>| Ok(DVector::from_element(1, node as f64));
        let (_, u, _) = simulate_forward(&scalar(0.0, 0.0), &scalar_cost(0.0, 0.0), &fb, &grid).unwrap();
        let vals: Vec<f64> = u.samples().iter().map(|s| s[0]).collect();
        assert_eq!(vals, vec![0.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn forward_reports_divergence() {
        let grid = TimeGrid::new(0.0, 10.0, 100).unwrap();
        let err = simulate_forward(
            &scalar(10.0, 1.0),
            &scalar_cost(0.0, 0.0),
            &ConstantFeedback(DVector::zeros(1)),
            &grid,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: Some(_), .. }));
    }

    #[test]
    fn backward_zero_sources() {
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let d = scalar(-0.7, 1.0);
        let v = solve_value_backward(&d, &scalar_cost(0.0, 0.0), &zero_u(&grid, 1), &grid).unwrap();
        assert!(v.quadratics().iter().all(|m| m[(0, 0)] == 0.0));
        assert!(v.linears().iter().all(|p| p[0] == 0.0));
    }

    #[test]
    fn backward_pure_accumulation() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let d = BilinearDynamics::new(
            CoefficientProvider::zeros(2, 2),
            CoefficientProvider::zeros(2, 1),
            vec![CoefficientProvider::zeros(2, 2)],
            CoefficientProvider::zeros(2, 1),
            DVector::zeros(2),
        )
        .unwrap();
        let cost = QuadraticCost::new(CoefficientProvider::constant(DMatrix::identity(2, 2)), c(0.0), DMatrix::zeros(2, 2))
            .unwrap();
        let v = solve_value_backward(&d, &cost, &zero_u(&grid, 1), &grid).unwrap();
        assert!((v.quadratic(0) - DMatrix::identity(2, 2)).amax() <= 1e-8);
    }

    #[test]
    fn backward_scalar_lyapunov_closed_form() {
        let (a, q, h0, tf) = (-0.8, 1.5, 0.4, 1.0);
        let grid = TimeGrid::new(0.0, tf, 200).unwrap();
        let v = solve_value_backward(&scalar(a, 1.0), &scalar_cost(q, h0), &zero_u(&grid, 1), &grid).unwrap();
        let exact = |t: f64| {
            let e = (2.0 * a * (tf - t)).exp();
            e * h0 + q * (e - 1.0) / (2.0 * a)
        };
        for (j, t) in grid.times().enumerate() {
            assert!((v.quadratic(j)[(0, 0)] - exact(t)).abs() <= 1e-6, "node {j}");
        }
    }

    #[test]
    fn backward_terminal_is_exact_and_samples_symmetric() {
        let grid = TimeGrid::new(0.0, 1.0, 37).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[0.1, 0.3, -0.2, 0.7, -1.1, 0.05, 0.0, 0.4, -0.6]);
        let n1 = DMatrix::from_row_slice(3, 3, &[0.2, -0.1, 0.0, 0.3, 0.1, 0.5, -0.4, 0.0, 0.2]);
        let d = BilinearDynamics::new(
            CoefficientProvider::constant(a),
            CoefficientProvider::constant(DMatrix::from_column_slice(3, 1, &[1.0, 0.0, -1.0])),
            vec![CoefficientProvider::constant(n1)],
            CoefficientProvider::Sinusoid {
                amplitude: DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]),
                omega: 3.0,
                phase: 0.1,
            },
            DVector::zeros(3),
        )
        .unwrap();
        let hmat = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]);
        let cost = QuadraticCost::new(CoefficientProvider::constant(DMatrix::identity(3, 3)), c(1.0), hmat.clone())
            .unwrap();
        let u = Trajectory::new(1, grid.times().map(|t| DVector::from_element(1, t.sin())).collect()).unwrap();
        let v = solve_value_backward(&d, &cost, &u, &grid).unwrap();
        assert_eq!(v.quadratic(grid.steps()), &hmat);
        assert!(v.linear(grid.steps()).iter().all(|x| *x == 0.0));
        for m in v.quadratics() {
            assert_eq!(m, &m.transpose());
        }
    }

    #[test]
    fn backward_rejects_misaligned_control() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let other = TimeGrid::new(0.0, 1.0, 9).unwrap();
        let err = solve_value_backward(&scalar(0.0, 0.0), &scalar_cost(1.0, 0.0), &zero_u(&other, 1), &grid);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
