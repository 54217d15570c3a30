//! Problem types for the continuous-time bilinear quadratic regulator and
//! the elementary evaluations every other module builds on.
//!
//! A problem instance is
//!
//! ```text
//! x'(t) = A(t) x + B(t) u + {uN(t)} x + g(t),   {uN(t)} = sum_i u_i N_i(t)
//! J     = 1/2 int (x'Qx + u'Ru) dt + 1/2 x(tf)' H x(tf)
//! ```
//!
//! with `u(t)` restricted to a state-independent admissible set.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_FLOOR: f64 = 1e-10;

/// Uniform discretization of `[t0, tf]`.
///
/// Trajectories are stored and controls are held per grid step. Each grid
/// step may be integrated with several equal RK4 substeps, which stiff
/// problems need for stability without refining the control grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    tf: f64,
    steps: usize,
    substeps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, tf: f64, steps: usize) -> Result<Self> {
        if !t0.is_finite() || !tf.is_finite() {
            return Err(invalid("grid bounds must be finite"));
        }
        if tf <= t0 {
            return Err(invalid(format!("grid requires tf > t0, got t0 = {t0}, tf = {tf}")));
        }
        if steps == 0 {
            return Err(invalid("grid requires at least one step"));
        }
        Ok(Self { t0, tf, steps, substeps: 1 })
    }

    pub fn with_substeps(self, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(invalid("grid requires at least one integration substep"));
        }
        Ok(Self { substeps, ..self })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// RK4 substeps per grid step.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Number of nodes, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        (self.tf - self.t0) / self.steps as f64
    }

    /// Time of node `j`. The last node is pinned to `tf` exactly.
    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.tf
        } else {
            self.t0 + j as f64 * self.step()
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |j| self.time(j))
    }
}

/// Node-aligned samples of a vector quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    samples: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(dim: usize, samples: Vec<DVector<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("trajectory dimension must be positive"));
        }
        for (j, s) in samples.iter().enumerate() {
            if s.len() != dim {
                return Err(invalid(format!(
                    "trajectory sample {j} has length {}, expected {dim}",
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("trajectory sample {j} is not finite")));
            }
        }
        Ok(Self { dim, samples })
    }

    /// A trajectory holding `value` at each of `grid`'s nodes.
    pub fn constant(value: &DVector<f64>, grid: &TimeGrid) -> Result<Self> {
        Self::new(value.len(), vec![value.clone(); grid.len()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn at(&self, j: usize) -> &DVector<f64> {
        &self.samples[j]
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub(crate) fn check_aligned(&self, grid: &TimeGrid, what: &str) -> Result<()> {
        if self.len() != grid.len() {
            return Err(invalid(format!(
                "{what} has {} samples but the grid has {} nodes",
                self.len(),
                grid.len()
            )));
        }
        Ok(())
    }
}

/// Time-varying matrix (or column vector, as an `n x 1` matrix).
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientProvider {
    Constant(DMatrix<f64>),
    /// `amplitude * sin(omega * t + phase)`
    Sinusoid {
        amplitude: DMatrix<f64>,
        omega: f64,
        phase: f64,
    },
    Sum(Vec<CoefficientProvider>),
}

impl CoefficientProvider {
    pub fn constant(m: DMatrix<f64>) -> Self {
        Self::Constant(m)
    }

    pub fn constant_vector(v: DVector<f64>) -> Self {
        let n = v.len();
        Self::Constant(DMatrix::from_column_slice(n, 1, v.as_slice()))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::Constant(DMatrix::zeros(rows, cols))
    }

    /// Rows and columns, checked for consistency across `Sum` terms.
    pub fn shape(&self) -> Result<(usize, usize)> {
        match self {
            Self::Constant(m) => Ok(m.shape()),
            Self::Sinusoid { amplitude, omega, phase } => {
                if !omega.is_finite() || !phase.is_finite() {
                    return Err(invalid("sinusoid frequency and phase must be finite"));
                }
                Ok(amplitude.shape())
            }
            Self::Sum(parts) => {
                let first = parts
                    .first()
                    .ok_or_else(|| invalid("sum provider needs at least one term"))?
                    .shape()?;
                for part in &parts[1..] {
                    let s = part.shape()?;
                    if s != first {
                        return Err(invalid(format!(
                            "sum provider terms disagree in shape: {first:?} vs {s:?}"
                        )));
                    }
                }
                Ok(first)
            }
        }
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        match self {
            Self::Constant(m) => m.clone(),
            Self::Sinusoid { amplitude, omega, phase } => amplitude * (omega * t + phase).sin(),
            Self::Sum(parts) => {
                let mut iter = parts.iter();
                let mut acc = iter.next().map(|p| p.eval(t)).unwrap_or_else(|| DMatrix::zeros(0, 0));
                for p in iter {
                    acc += p.eval(t);
                }
                acc
            }
        }
    }

    /// Evaluates an `n x 1` provider as a vector.
    pub fn eval_vector(&self, t: f64) -> DVector<f64> {
        let m = self.eval(t);
        DVector::from_column_slice(m.as_slice())
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Self::Constant(_) => true,
            Self::Sinusoid { amplitude, .. } => amplitude.iter().all(|v| *v == 0.0),
            Self::Sum(parts) => parts.iter().all(Self::is_constant),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            Self::Constant(m) => m.iter().all(|v| v.is_finite()),
            Self::Sinusoid { amplitude, .. } => amplitude.iter().all(|v| v.is_finite()),
            Self::Sum(parts) => parts.iter().all(Self::all_finite),
        }
    }
}

fn expect_shape(p: &CoefficientProvider, shape: (usize, usize), name: &str) -> Result<()> {
    let s = p.shape()?;
    if s != shape {
        return Err(invalid(format!("{name} has shape {s:?}, expected {shape:?}")));
    }
    if !p.all_finite() {
        return Err(invalid(format!("{name} contains non-finite entries")));
    }
    Ok(())
}

/// `x' = A x + B u + {uN} x + g`, `x(t0) = x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearDynamics {
    n: usize,
    nu: usize,
    a: CoefficientProvider,
    b: CoefficientProvider,
    ns: Vec<CoefficientProvider>,
    g: CoefficientProvider,
    x0: DVector<f64>,
}

impl BilinearDynamics {
    pub fn new(
        a: CoefficientProvider,
        b: CoefficientProvider,
        ns: Vec<CoefficientProvider>,
        g: CoefficientProvider,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = x0.len();
        if n == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x0 must be finite"));
        }
        let nu = ns.len();
        if nu == 0 {
            return Err(invalid("control dimension must be positive"));
        }
        expect_shape(&a, (n, n), "A")?;
        expect_shape(&b, (n, nu), "B")?;
        for (i, ni) in ns.iter().enumerate() {
            expect_shape(ni, (n, n), &format!("N[{i}]"))?;
        }
        expect_shape(&g, (n, 1), "g")?;
        Ok(Self { n, nu, a, b, ns, g, x0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn a(&self) -> &CoefficientProvider {
        &self.a
    }

    pub fn b(&self) -> &CoefficientProvider {
        &self.b
    }

    pub fn ns(&self) -> &[CoefficientProvider] {
        &self.ns
    }

    pub fn g(&self) -> &CoefficientProvider {
        &self.g
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub(crate) fn check_state(&self, xi: &DVector<f64>) -> Result<()> {
        if xi.len() != self.n {
            return Err(invalid(format!("state has length {}, expected {}", xi.len(), self.n)));
        }
        Ok(())
    }

    pub(crate) fn check_control(&self, nu: &DVector<f64>) -> Result<()> {
        if nu.len() != self.nu {
            return Err(invalid(format!("control has length {}, expected {}", nu.len(), self.nu)));
        }
        Ok(())
    }

    /// `A(t) + {uN(t)}`, the state matrix of the closed loop under a fixed `u`.
    pub(crate) fn closed_loop_matrix(&self, u: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let mut m = self.a.eval(t);
        for (ui, ni) in u.iter().zip(&self.ns) {
            if *ui != 0.0 {
                m += ni.eval(t) * *ui;
            }
        }
        m
    }
}

/// `{uN(t)} = sum_i u_i N_i(t)`.
pub fn brace_un(u: &DVector<f64>, dynamics: &BilinearDynamics, t: f64) -> Result<DMatrix<f64>> {
    dynamics.check_control(u)?;
    let n = dynamics.n;
    let mut acc = DMatrix::zeros(n, n);
    for (ui, ni) in u.iter().zip(&dynamics.ns) {
        acc += ni.eval(t) * *ui;
    }
    Ok(acc)
}

/// `M(t, xi)`: the `n x nu` matrix whose column `i` is `N_i(t) xi`, so that
/// `{uN(t)} xi = M(t, xi) u`.
pub fn control_matrix(xi: &DVector<f64>, dynamics: &BilinearDynamics, t: f64) -> Result<DMatrix<f64>> {
    dynamics.check_state(xi)?;
    let mut m = DMatrix::zeros(dynamics.n, dynamics.nu);
    for (i, ni) in dynamics.ns.iter().enumerate() {
        m.set_column(i, &(ni.eval(t) * xi));
    }
    Ok(m)
}

/// Right-hand side of the state equation.
pub fn dynamics_rhs(
    t: f64,
    xi: &DVector<f64>,
    nu: &DVector<f64>,
    dynamics: &BilinearDynamics,
) -> Result<DVector<f64>> {
    dynamics.check_state(xi)?;
    dynamics.check_control(nu)?;
    if !t.is_finite() || xi.iter().chain(nu.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("dynamics evaluated at a non-finite point"));
    }
    Ok(dynamics_rhs_unchecked(t, xi, nu, dynamics))
}

pub(crate) fn dynamics_rhs_unchecked(
    t: f64,
    xi: &DVector<f64>,
    nu: &DVector<f64>,
    dynamics: &BilinearDynamics,
) -> DVector<f64> {
    dynamics.closed_loop_matrix(nu, t) * xi + dynamics.b.eval(t) * nu + dynamics.g.eval_vector(t)
}

/// `q(xi) = 1/2 xi' P xi + p' xi`.
pub fn eval_q(pm: &DMatrix<f64>, pv: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
    let n = xi.len();
    if pm.shape() != (n, n) || pv.len() != n {
        return Err(invalid(format!(
            "q evaluation: P is {:?}, p has length {}, xi has length {n}",
            pm.shape(),
            pv.len()
        )));
    }
    Ok(0.5 * xi.dot(&(pm * xi)) + pv.dot(xi))
}

fn check_symmetric_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(invalid(format!("{name} must be square, got {:?}", m.shape())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{name} contains non-finite entries")));
    }
    let scale = m.amax();
    if scale == 0.0 {
        return Ok(());
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(invalid(format!("{name} is not symmetric (max asymmetry {asym:e})")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let norm = eig.amax();
    let min = eig.min();
    if min < -PSD_FLOOR * norm {
        return Err(invalid(format!(
            "{name} is not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// Weights of `J`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    q: CoefficientProvider,
    r: CoefficientProvider,
    h: DMatrix<f64>,
}

impl QuadraticCost {
    /// Checks shapes, and symmetry/semidefiniteness of `H` and of `Q`, `R`
    /// at `t = 0`. Time-varying weights are re-checked on the problem grid by
    /// [`BilinearProblem::new`].
    pub fn new(q: CoefficientProvider, r: CoefficientProvider, h: DMatrix<f64>) -> Result<Self> {
        let (qn, qm) = q.shape()?;
        let (rn, rm) = r.shape()?;
        if qn != qm {
            return Err(invalid("Q must be square"));
        }
        if rn != rm {
            return Err(invalid("R must be square"));
        }
        if h.shape() != (qn, qn) {
            return Err(invalid(format!("H has shape {:?}, expected ({qn}, {qn})", h.shape())));
        }
        check_symmetric_psd(&h, "H")?;
        check_symmetric_psd(&q.eval(0.0), "Q")?;
        check_symmetric_psd(&r.eval(0.0), "R")?;
        Ok(Self { q, r, h })
    }

    pub fn q(&self) -> &CoefficientProvider {
        &self.q
    }

    pub fn r(&self) -> &CoefficientProvider {
        &self.r
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// `1/2 (xi'Q xi + nu'R nu)`
    pub fn running(&self, t: f64, xi: &DVector<f64>, nu: &DVector<f64>) -> f64 {
        0.5 * (xi.dot(&(self.q.eval(t) * xi)) + nu.dot(&(self.r.eval(t) * nu)))
    }

    pub fn terminal(&self, xi: &DVector<f64>) -> f64 {
        0.5 * xi.dot(&(&self.h * xi))
    }

    fn validate_on(&self, grid: &TimeGrid) -> Result<()> {
        for (p, name) in [(&self.q, "Q"), (&self.r, "R")] {
            if p.is_constant() {
                continue;
            }
            for t in grid.times() {
                check_symmetric_psd(&p.eval(t), &format!("{name}(t = {t})"))?;
            }
        }
        Ok(())
    }
}

/// State-independent admissible control set.
#[derive(Debug, Clone, PartialEq)]
pub enum AdmissibleSet {
    Unconstrained,
    FiniteSet(Vec<DVector<f64>>),
    Box { lo: DVector<f64>, hi: DVector<f64> },
}

impl AdmissibleSet {
    pub fn validate(&self, nu: usize) -> Result<()> {
        match self {
            Self::Unconstrained => Ok(()),
            Self::FiniteSet(points) => {
                if points.is_empty() {
                    return Err(invalid("finite admissible set must be nonempty"));
                }
                for (i, p) in points.iter().enumerate() {
                    if p.len() != nu {
                        return Err(invalid(format!(
                            "admissible point {i} has length {}, expected {nu}",
                            p.len()
                        )));
                    }
                    if p.iter().any(|v| !v.is_finite()) {
                        return Err(invalid(format!("admissible point {i} is not finite")));
                    }
                    if points[..i].contains(p) {
                        return Err(invalid(format!("admissible point {i} is a duplicate")));
                    }
                }
                Ok(())
            }
            Self::Box { lo, hi } => {
                if lo.len() != nu || hi.len() != nu {
                    return Err(invalid(format!("box bounds must have length {nu}")));
                }
                for i in 0..nu {
                    if lo[i].is_nan() || hi[i].is_nan() {
                        return Err(invalid(format!("box bound {i} is NaN")));
                    }
                    if lo[i] > hi[i] {
                        return Err(invalid(format!(
                            "box lower bound exceeds upper bound in component {i} ({} > {})",
                            lo[i], hi[i]
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn contains(&self, nu: &DVector<f64>) -> bool {
        match self {
            Self::Unconstrained => nu.iter().all(|v| v.is_finite()),
            Self::FiniteSet(points) => points.iter().any(|p| p == nu),
            Self::Box { lo, hi } => {
                nu.len() == lo.len() && nu.iter().zip(lo.iter().zip(hi.iter())).all(|(v, (l, h))| l <= v && v <= h)
            }
        }
    }
}

/// A complete problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearProblem {
    dynamics: BilinearDynamics,
    cost: QuadraticCost,
    set: AdmissibleSet,
    grid: TimeGrid,
}

impl BilinearProblem {
    pub fn new(
        dynamics: BilinearDynamics,
        cost: QuadraticCost,
        set: AdmissibleSet,
        grid: TimeGrid,
    ) -> Result<Self> {
        let n = dynamics.n();
        let nu = dynamics.nu();
        if cost.q.shape()? != (n, n) {
            return Err(invalid(format!("Q must be {n}x{n}")));
        }
        if cost.r.shape()? != (nu, nu) {
            return Err(invalid(format!("R must be {nu}x{nu}")));
        }
        set.validate(nu)?;
        cost.validate_on(&grid)?;
        Ok(Self { dynamics, cost, set, grid })
    }

    pub fn dynamics(&self) -> &BilinearDynamics {
        &self.dynamics
    }

    pub fn cost(&self) -> &QuadraticCost {
        &self.cost
    }

    pub fn set(&self) -> &AdmissibleSet {
        &self.set
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Same problem on a different grid.
    pub fn with_grid(&self, grid: TimeGrid) -> Result<Self> {
        Self::new(self.dynamics.clone(), self.cost.clone(), self.set.clone(), grid)
    }
}

/// State and control trajectories with their cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Process {
    pub x: Trajectory,
    pub u: Trajectory,
    pub cost: f64,
}

impl Process {
    pub fn is_admissible(&self, set: &AdmissibleSet) -> bool {
        self.u.samples().iter().all(|u| set.contains(u))
    }
}

impl From<(Trajectory, Trajectory, f64)> for Process {
    fn from((x, u, cost): (Trajectory, Trajectory, f64)) -> Self {
        Self { x, u, cost }
    }
}
