//! TOML problem files.
//!
//! ```toml
//! x0 = [1.0]
//!
//! [dimensions]
//! n = 1
//! nu = 1
//!
//! [grid]
//! t0 = 0.0
//! tf = 1.0
//! steps = 1000
//! substeps = 1          # optional
//!
//! [coefficients]
//! A = { constant = [[-1.0]] }
//! B = { constant = [[1.0]] }
//! N = [{ constant = [[0.0]] }]
//! g = { sinusoid = { amplitude = [0.5], omega = 2.0, phase = 0.0 } }
//! Q = { constant = [[1.0]] }
//! R = { constant = [[1.0]] }
//! H = [[0.0]]
//!
//! [admissible]
//! kind = "unconstrained"   # or "finite" with `points`, or "box" with `lo`, `hi`
//!
//! [solver]                 # optional
//! epsilon = 1e-6
//! max_iterations = 100
//! initial_control = [0.0]
//! ```
//!
//! Matrices are lists of rows; a flat list is a column vector. Providers are
//! `{ constant = M }`, `{ sinusoid = { amplitude = M, omega, phase } }` or
//! `{ sum = [provider, ...] }`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krotov::{SolveOptions, DEFAULT_MAX_ITERATIONS};
use crate::model::{AdmissibleSet, BilinearDynamics, BilinearProblem, CoefficientProvider, QuadraticCost, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub x0: Vec<f64>,
    pub dimensions: Dimensions,
    pub grid: GridConfig,
    pub coefficients: Coefficients,
    pub admissible: AdmissibleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub n: usize,
    pub nu: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t0: f64,
    pub tf: f64,
    pub steps: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    #[serde(rename = "A")]
    pub a: ProviderConfig,
    #[serde(rename = "B")]
    pub b: ProviderConfig,
    #[serde(rename = "N")]
    pub n: Vec<ProviderConfig>,
    pub g: ProviderConfig,
    #[serde(rename = "Q")]
    pub q: ProviderConfig,
    #[serde(rename = "R")]
    pub r: ProviderConfig,
    #[serde(rename = "H")]
    pub h: MatrixLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixLiteral {
    Rows(Vec<Vec<f64>>),
    Column(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderConfig {
    Constant(MatrixLiteral),
    Sinusoid {
        amplitude: MatrixLiteral,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    Sum(Vec<ProviderConfig>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AdmissibleConfig {
    Unconstrained,
    Finite { points: Vec<Vec<f64>> },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_control: Option<Vec<f64>>,
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

fn field_err(field: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| {
        let msg = match e {
            Error::InvalidArgument(m) | Error::Config(m) => m,
            other => other.to_string(),
        };
        Error::Config(format!("{field}: {msg}"))
    }
}

impl MatrixLiteral {
    fn to_matrix(&self, field: &str) -> Result<DMatrix<f64>> {
        match self {
            Self::Column(v) => Ok(DMatrix::from_column_slice(v.len(), 1, v)),
            Self::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if let Some(i) = rows.iter().position(|r| r.len() != cols) {
                    return Err(Error::Config(format!(
                        "{field}: row {i} has {} entries, expected {cols}",
                        rows[i].len()
                    )));
                }
                Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
            }
        }
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        if m.ncols() == 1 {
            Self::Column(m.iter().copied().collect())
        } else {
            Self::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
        }
    }
}

impl ProviderConfig {
    fn to_provider(&self, field: &str) -> Result<CoefficientProvider> {
        Ok(match self {
            Self::Constant(m) => CoefficientProvider::Constant(m.to_matrix(field)?),
            Self::Sinusoid { amplitude, omega, phase } => CoefficientProvider::Sinusoid {
                amplitude: amplitude.to_matrix(field)?,
                omega: *omega,
                phase: *phase,
            },
            Self::Sum(parts) => CoefficientProvider::Sum(
                parts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.to_provider(&format!("{field}.sum[{i}]")))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    fn from_provider(p: &CoefficientProvider) -> Self {
        match p {
            CoefficientProvider::Constant(m) => Self::Constant(MatrixLiteral::from_matrix(m)),
            CoefficientProvider::Sinusoid { amplitude, omega, phase } => Self::Sinusoid {
                amplitude: MatrixLiteral::from_matrix(amplitude),
                omega: *omega,
                phase: *phase,
            },
            CoefficientProvider::Sum(parts) => Self::Sum(parts.iter().map(Self::from_provider).collect()),
        }
    }
}

fn expect_shape(p: &CoefficientProvider, shape: (usize, usize), field: &str) -> Result<()> {
    let s = p.shape().map_err(field_err(field))?;
    if s != shape {
        return Err(Error::Config(format!("{field}: shape {s:?}, expected {shape:?}")));
    }
    Ok(())
}

impl ProblemConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Validates every field and builds the problem and solver options.
    pub fn build(&self) -> Result<(BilinearProblem, SolveOptions)> {
        let Dimensions { n, nu } = self.dimensions;
        if n == 0 || nu == 0 {
            return Err(Error::Config("dimensions: n and nu must be positive".into()));
        }
        if self.x0.len() != n {
            return Err(Error::Config(format!("x0: length {}, expected n = {n}", self.x0.len())));
        }
        let grid = TimeGrid::new(self.grid.t0, self.grid.tf, self.grid.steps)
            .and_then(|g| g.with_substeps(self.grid.substeps))
            .map_err(field_err("grid"))?;

        let c = &self.coefficients;
        let a = c.a.to_provider("coefficients.A")?;
        expect_shape(&a, (n, n), "coefficients.A")?;
        let b = c.b.to_provider("coefficients.B")?;
        expect_shape(&b, (n, nu), "coefficients.B")?;
        if c.n.len() != nu {
            return Err(Error::Config(format!("coefficients.N: {} matrices, expected nu = {nu}", c.n.len())));
        }
        let ns = c
            .n
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let field = format!("coefficients.N[{i}]");
                let prov = p.to_provider(&field)?;
                expect_shape(&prov, (n, n), &field)?;
                Ok(prov)
            })
            .collect::<Result<Vec<_>>>()?;
        let g = c.g.to_provider("coefficients.g")?;
        expect_shape(&g, (n, 1), "coefficients.g")?;
        let q = c.q.to_provider("coefficients.Q")?;
        expect_shape(&q, (n, n), "coefficients.Q")?;
        let r = c.r.to_provider("coefficients.R")?;
        expect_shape(&r, (nu, nu), "coefficients.R")?;
        let h = c.h.to_matrix("coefficients.H")?;
        if h.shape() != (n, n) {
            return Err(Error::Config(format!("coefficients.H: shape {:?}, expected ({n}, {n})", h.shape())));
        }

        let dynamics =
            BilinearDynamics::new(a, b, ns, g, DVector::from_vec(self.x0.clone())).map_err(field_err("coefficients"))?;
        let cost = QuadraticCost::new(q, r, h).map_err(field_err("coefficients (Q, R, H)"))?;
        let set = match &self.admissible {
            AdmissibleConfig::Unconstrained => AdmissibleSet::Unconstrained,
            AdmissibleConfig::Finite { points } => {
                AdmissibleSet::FiniteSet(points.iter().map(|p| DVector::from_vec(p.clone())).collect())
            }
            AdmissibleConfig::Box { lo, hi } => AdmissibleSet::Box {
                lo: DVector::from_vec(lo.clone()),
                hi: DVector::from_vec(hi.clone()),
            },
        };
        set.validate(nu).map_err(field_err("admissible"))?;
        let problem = BilinearProblem::new(dynamics, cost, set, grid).map_err(field_err("coefficients (Q, R)"))?;

        let opts = match &self.solver {
            None => SolveOptions::default(),
            Some(s) => SolveOptions {
                epsilon: s.epsilon,
                max_iterations: s.max_iterations,
                initial_control: s.initial_control.clone().map(DVector::from_vec),
            },
        };
        opts.validate(&problem).map_err(field_err("solver"))?;
        Ok((problem, opts))
    }

    pub fn from_problem(problem: &BilinearProblem, opts: Option<&SolveOptions>) -> Self {
        let d = problem.dynamics();
        let grid = problem.grid();
        let admissible = match problem.set() {
            AdmissibleSet::Unconstrained => AdmissibleConfig::Unconstrained,
            AdmissibleSet::FiniteSet(points) => AdmissibleConfig::Finite {
                points: points.iter().map(|p| p.iter().copied().collect()).collect(),
            },
            AdmissibleSet::Box { lo, hi } => AdmissibleConfig::Box {
                lo: lo.iter().copied().collect(),
                hi: hi.iter().copied().collect(),
            },
        };
        Self {
            x0: d.x0().iter().copied().collect(),
            dimensions: Dimensions { n: d.n(), nu: d.nu() },
            grid: GridConfig {
                t0: grid.t0(),
                tf: grid.tf(),
                steps: grid.steps(),
                substeps: grid.substeps(),
            },
            coefficients: Coefficients {
                a: ProviderConfig::from_provider(d.a()),
                b: ProviderConfig::from_provider(d.b()),
                n: d.ns().iter().map(ProviderConfig::from_provider).collect(),
                g: ProviderConfig::from_provider(d.g()),
                q: ProviderConfig::from_provider(problem.cost().q()),
                r: ProviderConfig::from_provider(problem.cost().r()),
                h: MatrixLiteral::Rows(problem.cost().h().row_iter().map(|r| r.iter().copied().collect()).collect()),
            },
            admissible,
            solver: opts.map(|o| SolverConfig {
                epsilon: o.epsilon,
                max_iterations: o.max_iterations,
                initial_control: o.initial_control.as_ref().map(|u| u.iter().copied().collect()),
            }),
        }
    }
}

/// Parses and validates a problem file.
pub fn parse_config(text: &str) -> Result<(BilinearProblem, SolveOptions)> {
    ProblemConfig::from_toml(text)?.build()
}

/// Serializes a problem (and optionally solver options) to TOML.
pub fn serialize_problem(problem: &BilinearProblem, opts: Option<&SolveOptions>) -> Result<String> {
    ProblemConfig::from_problem(problem, opts).to_toml()
}
