//! Self-contained dense convex QP solver for
//!
//! `min ½ yᵀH y + fᵀy   s.t.  G_eq y = b_eq,  G_in y ⪯ b_in,  H ⪰ 0`.
//!
//! The engine is an operator-splitting (ADMM) iteration on the split
//! `A y = z, z ∈ C` with over-relaxation, Ruiz equilibration, and
//! residual-balancing penalty updates, followed by an active-set polish step
//! that solves the KKT equations of the identified active set directly. A
//! solution is reported `Optimal` only if it passes the KKT check at the
//! tolerances in [`KktTolerances`]; see [`solver`] for the iteration itself.
//!
//! Problem sizes here are tens of variables, so everything is dense; the
//! types are layout-agnostic and a sparse backend could be swapped in behind
//! them.

mod solver;

pub use solver::QpSolver;

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Problem data. `H` is symmetrized on construction; all entries must be
/// finite.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        g_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        g_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n {
            return Err(Error::invalid("QpProblem", "H must be square"));
        }
        if f.len() != n {
            return Err(Error::dims("QpProblem", "f", (f.len(), 1), "H", h.shape()));
        }
        if g_eq.ncols() != n && g_eq.nrows() > 0 {
            return Err(Error::dims("QpProblem", "G_eq", g_eq.shape(), "H", h.shape()));
        }
        if b_eq.len() != g_eq.nrows() {
            return Err(Error::dims("QpProblem", "b_eq", (b_eq.len(), 1), "G_eq", g_eq.shape()));
        }
        if g_in.ncols() != n && g_in.nrows() > 0 {
            return Err(Error::dims("QpProblem", "G_in", g_in.shape(), "H", h.shape()));
        }
        if b_in.len() != g_in.nrows() {
            return Err(Error::dims("QpProblem", "b_in", (b_in.len(), 1), "G_in", g_in.shape()));
        }
        let finite = h.iter().chain(f.iter()).chain(g_eq.iter()).chain(b_eq.iter()).chain(g_in.iter()).chain(b_in.iter());
        for v in finite {
            if !v.is_finite() {
                return Err(Error::invalid("QpProblem", "non-finite entry in problem data"));
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        Ok(Self { h, f, g_eq, b_eq, g_in, b_in })
    }

    pub fn num_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_eq(&self) -> usize {
        self.g_eq.nrows()
    }

    pub fn num_in(&self) -> usize {
        self.g_in.nrows()
    }

    /// `½ yᵀHy + fᵀy`.
    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * (y.transpose() * &self.h * y)[(0, 0)] + self.f.dot(y)
    }

    /// Plain-text dump (one block per matrix, row-major, dimension headers)
    /// for diffing against external solvers.
    pub fn write_debug_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        let blocks: [(&str, &DMatrix<f64>); 3] = [("H", &self.h), ("G_eq", &self.g_eq), ("G_in", &self.g_in)];
        for (name, m) in blocks {
            writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.17e}", m[(i, j)])).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        let vectors: [(&str, &DVector<f64>); 3] = [("f", &self.f), ("b_eq", &self.b_eq), ("b_in", &self.b_in)];
        for (name, v) in vectors {
            writeln!(w, "{name} {} 1", v.len())?;
            for i in 0..v.len() {
                writeln!(w, "{:.17e}", v[i])?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    PrimalInfeasible,
    MaxIterations,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::PrimalInfeasible => "primal-infeasible",
            SolveStatus::MaxIterations => "max-iterations",
        }
    }
}

/// Tolerances an `Optimal` solution is verified against.
#[derive(Debug, Clone, Copy)]
pub struct KktTolerances {
    /// `‖G_eq y − b_eq‖_∞`
    pub eq: f64,
    /// `max(G_in y − b_in)`
    pub ineq: f64,
    /// `‖H y + f + G_eqᵀν + G_inᵀμ‖_∞`
    pub stationarity: f64,
    /// admissible negativity of multipliers: `μ ⪰ −dual_sign`
    pub dual_sign: f64,
    /// `|μ_i (G_in y − b_in)_i|`
    pub comp_slack: f64,
}

impl Default for KktTolerances {
    fn default() -> Self {
        Self { eq: 1e-6, ineq: 1e-6, stationarity: 1e-5, dual_sign: 1e-8, comp_slack: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Residual / infeasibility / penalty-update cadence.
    pub check_interval: usize,
    pub over_relaxation: f64,
    pub sigma: f64,
    pub rho0: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
    pub tolerances: KktTolerances,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            max_iter: 200_000,
            check_interval: 25,
            over_relaxation: 1.6,
            sigma: 1e-6,
            rho0: 0.1,
            adaptive_rho: true,
            polish: true,
            tolerances: KktTolerances::default(),
        }
    }
}

/// Primal/dual warm start in the original (unscaled) variables.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub y: DVector<f64>,
    pub dual_eq: DVector<f64>,
    pub dual_in: DVector<f64>,
}

impl From<&QpSolution> for WarmStart {
    fn from(sol: &QpSolution) -> Self {
        Self { y: sol.y_star.clone(), dual_eq: sol.dual_eq.clone(), dual_in: sol.dual_in.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub y_star: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub dual_eq: DVector<f64>,
    pub dual_in: DVector<f64>,
    /// Farkas-style direction when `status == PrimalInfeasible`.
    pub certificate: Option<DVector<f64>>,
    pub polished: bool,
}

/// One-shot convenience around [`QpSolver`].
pub fn solve_qp(problem: &QpProblem, options: &SolveOptions, warm: Option<&WarmStart>) -> Result<QpSolution> {
    let mut solver = QpSolver::new(problem.clone(), *options)?;
    Ok(solver.solve(warm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `false` when the iteration cap was hit without a certificate either
    /// way; the verdict is then the conservative `infeasible`.
    pub certified: bool,
}

/// Feasibility of the constraint set via a zero-objective solve: feasible iff
/// a point meeting all constraints to 1e-6 is found.
pub fn check_feasibility(problem: &QpProblem) -> Result<FeasibilityReport> {
    let n = problem.num_vars();
    let phase1 = QpProblem::new(
        DMatrix::zeros(n, n),
        DVector::zeros(n),
        problem.g_eq.clone(),
        problem.b_eq.clone(),
        problem.g_in.clone(),
        problem.b_in.clone(),
    )?;
    let options = SolveOptions {
        polish: false,
        max_iter: 50_000,
        ..SolveOptions::default()
    };
    let mut solver = QpSolver::new(phase1, options)?;
    Ok(solver.check_feasible(None))
}
