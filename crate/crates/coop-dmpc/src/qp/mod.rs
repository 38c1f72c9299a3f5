//! Self-contained sparse convex QP solver in the operator-splitting family.
//!
//! Problems are given in the canonical form
//!
//! ```text
//!     minimize   1/2 z' P z + q' z
//!     subject to l <= A z <= u
//! ```
//!
//! with `P` symmetric positive semidefinite and equalities encoded by
//! `l = u`. The solver runs ADMM with a fixed step parameter, Ruiz
//! equilibration, and an active-set polishing solve after convergence;
//! polishing is what reaches 1e-8 residuals economically on MPC problems.
//!
//! Dual sign convention: stationarity reads `P z + q + A' lambda = 0` with
//! `lambda >= 0` on active upper bounds and `lambda <= 0` on active lower
//! bounds.

mod csc;
mod ldl;
mod solver;

pub use csc::CscMatrix;
pub use ldl::{rcm_ordering, LdlFactor, LdlError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("P must be square, got {rows}x{cols}")]
    PNotSquare { rows: usize, cols: usize },
    #[error("P is not symmetric: max asymmetry {0:.3e}")]
    PNotSymmetric(f64),
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("bounds are inconsistent at row {row}: l = {l} > u = {u}")]
    InconsistentBounds { row: usize, l: f64, u: f64 },
    #[error("problem data contains NaN in {0}")]
    NotFinite(&'static str),
    #[error("P is not positive semidefinite (indefinite KKT inertia)")]
    NonConvex,
}

/// Convex QP in operator-splitting canonical form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpProblem {
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub a: CscMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    /// Optional variable/constraint names for diagnostics dumps.
    pub names: Option<QpNames>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpNames {
    pub variables: Vec<String>,
    pub constraints: Vec<String>,
}

impl QpProblem {
    pub fn new(p: CscMatrix, q: Vec<f64>, a: CscMatrix, l: Vec<f64>, u: Vec<f64>) -> Self {
        Self {
            p,
            q,
            a,
            l,
            u,
            names: None,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.q.len();
        let m = self.l.len();
        if self.p.nrows() != self.p.ncols() {
            return Err(QpError::PNotSquare {
                rows: self.p.nrows(),
                cols: self.p.ncols(),
            });
        }
        if self.p.ncols() != n {
            return Err(QpError::DimensionMismatch {
                what: "P",
                got: self.p.ncols(),
                expected: n,
            });
        }
        let asym = self.p.max_abs_difference(&self.p.transpose());
        if asym >= 1e-12 {
            return Err(QpError::PNotSymmetric(asym));
        }
        if self.a.ncols() != n {
            return Err(QpError::DimensionMismatch {
                what: "A columns",
                got: self.a.ncols(),
                expected: n,
            });
        }
        if self.a.nrows() != m {
            return Err(QpError::DimensionMismatch {
                what: "A rows",
                got: self.a.nrows(),
                expected: m,
            });
        }
        if self.u.len() != m {
            return Err(QpError::DimensionMismatch {
                what: "u",
                got: self.u.len(),
                expected: m,
            });
        }
        for (row, (&l, &u)) in self.l.iter().zip(&self.u).enumerate() {
            if l.is_nan() || u.is_nan() {
                return Err(QpError::NotFinite("bounds"));
            }
            if l > u {
                return Err(QpError::InconsistentBounds { row, l, u });
            }
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NotFinite("q"));
        }
        if self.p.triplets().any(|(_, _, v)| !v.is_finite()) {
            return Err(QpError::NotFinite("P"));
        }
        if self.a.triplets().any(|(_, _, v)| !v.is_finite()) {
            return Err(QpError::NotFinite("A"));
        }
        Ok(())
    }

    /// Objective `1/2 z' P z + q' z` at `z`.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let mut pz = vec![0.0; z.len()];
        self.p.mul_vec(z, &mut pz);
        0.5 * dot(&pz, z) + dot(&self.q, z)
    }

    /// Self-describing triplet-form JSON for cross-checking against external
    /// solvers.
    pub fn dump_json(&self) -> serde_json::Value {
        let trip = |m: &CscMatrix| -> Vec<(usize, usize, f64)> { m.triplets().collect() };
        serde_json::json!({
            "num_vars": self.num_vars(),
            "num_constraints": self.num_constraints(),
            "p_triplets": trip(&self.p),
            "q": self.q,
            "a_triplets": trip(&self.a),
            "l": self.l,
            "u": self.u,
            "names": self.names,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution {
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Infeasibility certificate direction when the status is primal/dual
    /// infeasible.
    pub certificate: Option<Vec<f64>>,
}

/// Solver parameters. The defaults are tuned for the MPC problems in this
/// crate; `eps_abs` is the certified residual level of a solved status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub polish: bool,
    pub check_interval: usize,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            polish: true,
            check_interval: 25,
            eps_prim_inf: 1e-6,
            eps_dual_inf: 1e-6,
        }
    }
}

/// KKT residuals computed directly from problem data, independent of the
/// solver loop. Serves as the solver's oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `||A z - clamp(A z, l, u)||_inf`: distance of `A z` to the box.
    pub primal: f64,
    /// `||P z + q + A' lambda||_inf`.
    pub dual: f64,
    /// Worst complementary-slackness product, including sign violations as
    /// infinite slack.
    pub complementarity: f64,
}

pub fn kkt_residuals(problem: &QpProblem, z: &[f64], lambda: &[f64]) -> KktResiduals {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    assert_eq!(z.len(), n, "primal dimension");
    assert_eq!(lambda.len(), m, "dual dimension");

    let mut az = vec![0.0; m];
    problem.a.mul_vec(z, &mut az);
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..m {
        let clamped = az[i].clamp(problem.l[i], problem.u[i]);
        primal = primal.max((az[i] - clamped).abs());
        let lam = lambda[i];
        if lam > 0.0 {
            comp = comp.max((lam * (az[i] - problem.u[i])).abs());
        } else if lam < 0.0 {
            comp = comp.max((lam * (az[i] - problem.l[i])).abs());
        }
    }

    let mut stat = vec![0.0; n];
    problem.p.mul_vec(z, &mut stat);
    let mut aty = vec![0.0; n];
    problem.a.transpose_mul_vec(lambda, &mut aty);
    let mut dual: f64 = 0.0;
    for j in 0..n {
        dual = dual.max((stat[j] + problem.q[j] + aty[j]).abs());
    }

    KktResiduals {
        primal,
        dual,
        complementarity: comp,
    }
}

pub use solver::{solve_qp, solve_qp_warm, WarmStart};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}
