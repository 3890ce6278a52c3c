//! Finite-horizon problem builders and the penalty-softened control law.
//!
//! Decision vector layout, shared by every builder here:
//! `y = (z_0 … z_{N-1}, v_0 … v_{N-1} [, η])` with the nominal dynamics
//! `z_{ℓ+1} = A_K z_ℓ + B v_ℓ`, terminal equilibrium
//! `z_{N-1} = A_K z_{N-1} + B v_{N-1}`, and the stage constraints
//! `C_K z_ℓ + D v_ℓ ⪯ h − q_ℓ` either hard (tightened problem) or softened
//! through the slack `η ⪰ 0` with cost `ρ·Ση` (penalty problem). The cost is
//!
//! `J = Σ_ℓ ‖z_ℓ‖²_Q + ‖K z_ℓ + v_ℓ‖²_R + ‖x_N‖²_P,  x_N = A_K z_{N-1} + B v_{N-1}`.
//!
//! The slack can be one shared vector across steps (the printed slack form)
//! or one vector per step, which matches the per-step positive-part penalty;
//! the two are not algebraically identical, so both are available via
//! [`SlackMode`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qpcore::{QpProblem, QpSolution, QpSolver, SolveOptions, SolveStatus, WarmStart};
use crate::sysmodel::{ControllerDesign, LtiSystem};
use crate::tightening::TighteningProfile;

/// Hard polytopic input set `{u : G u ⪯ h}` for the first move.
#[derive(Debug, Clone)]
pub struct InputSet {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl InputSet {
    pub fn new(g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        if g.nrows() != h.len() || g.nrows() == 0 {
            return Err(Error::dims("InputSet", "G", g.shape(), "h", (h.len(), 1)));
        }
        if h.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("InputSet", "h must be strictly positive so u = 0 is admissible"));
        }
        Ok(Self { g, h })
    }

    /// `|u_j| ≤ bound_j` as two rows per input.
    pub fn box_bound(bounds: &[f64]) -> Result<Self> {
        let n_u = bounds.len();
        let mut g = DMatrix::zeros(2 * n_u, n_u);
        let mut h = DVector::zeros(2 * n_u);
        for (j, &b) in bounds.iter().enumerate() {
            g[(2 * j, j)] = 1.0;
            g[(2 * j + 1, j)] = -1.0;
            h[2 * j] = b;
            h[2 * j + 1] = b;
        }
        Self::new(g, h)
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        let r = &self.g * u - &self.h;
        r.iter().all(|&v| v <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlackMode {
    /// One `η ∈ R^{n_h}` shared by all steps.
    Shared,
    /// One `η_ℓ ∈ R^{n_h}` per step.
    PerStep,
}

/// Index bookkeeping for the stacked decision vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n_x: usize,
    n_u: usize,
    n_h: usize,
    horizon: usize,
    n_eta: usize,
}

impl Layout {
    fn new(sys: &LtiSystem, horizon: usize, slack: Option<SlackMode>) -> Self {
        let n_h = sys.constraint_rows();
        let n_eta = match slack {
            None => 0,
            Some(SlackMode::Shared) => n_h,
            Some(SlackMode::PerStep) => n_h * horizon,
        };
        Self { n_x: sys.state_dim(), n_u: sys.input_dim(), n_h, horizon, n_eta }
    }

    fn z(&self, l: usize) -> usize {
        l * self.n_x
    }

    fn v(&self, l: usize) -> usize {
        self.horizon * self.n_x + l * self.n_u
    }

    fn eta(&self) -> usize {
        self.horizon * (self.n_x + self.n_u)
    }

    fn num_vars(&self) -> usize {
        self.eta() + self.n_eta
    }

    fn num_eq(&self) -> usize {
        (self.horizon + 1) * self.n_x
    }
}

/// A solved horizon unpacked into state/input/slack sequences.
#[derive(Debug, Clone)]
pub struct HorizonDecision {
    pub z: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub eta: DVector<f64>,
}

impl HorizonDecision {
    fn from_vector(y: &DVector<f64>, layout: &Layout) -> Self {
        let z = (0..layout.horizon)
            .map(|l| y.rows(layout.z(l), layout.n_x).into_owned())
            .collect();
        let v = (0..layout.horizon)
            .map(|l| y.rows(layout.v(l), layout.n_u).into_owned())
            .collect();
        let eta = y.rows(layout.eta(), layout.n_eta).into_owned();
        Self { z, v, eta }
    }

    /// Checks the intended equalities at the stated tolerance: initial
    /// condition, dynamics chain, terminal equilibrium, and `η ⪰ 0`.
    pub fn check_consistency(
        &self,
        sys: &LtiSystem,
        design: &ControllerDesign,
        x: &DVector<f64>,
        tol: f64,
    ) -> Result<()> {
        let a_k = design.closed_loop(sys);
        let n = self.z.len();
        if (self.z[0].clone() - x).amax() > tol {
            return Err(Error::invalid("HorizonDecision", "z_0 != x"));
        }
        for l in 0..n - 1 {
            let next = &a_k * &self.z[l] + &sys.b * &self.v[l];
            if (&self.z[l + 1] - next).amax() > tol {
                return Err(Error::invalid("HorizonDecision", format!("dynamics violated at step {l}")));
            }
        }
        let last = &a_k * &self.z[n - 1] + &sys.b * &self.v[n - 1];
        if (&self.z[n - 1] - last).amax() > tol {
            return Err(Error::invalid("HorizonDecision", "terminal equilibrium violated"));
        }
        if self.eta.iter().any(|&e| e < -tol) {
            return Err(Error::invalid("HorizonDecision", "negative slack"));
        }
        Ok(())
    }

    /// Total slack `Ση_i`, the optimal constraint-violation budget.
    pub fn total_slack(&self) -> f64 {
        self.eta.iter().sum()
    }
}

/// Quadratic cost matrix `H` over `(z, v)` such that `½ yᵀH y = J`. The
/// terminal term enters through the substitution
/// `x_N = A_K z_{N-1} + B v_{N-1}`, so the cost stays well-defined even when
/// the terminal equality is relaxed.
pub fn build_cost(sys: &LtiSystem, design: &ControllerDesign) -> DMatrix<f64> {
    let layout = Layout::new(sys, design.horizon, None);
    let mut h = DMatrix::zeros(layout.num_vars(), layout.num_vars());
    let a_k = design.closed_loop(sys);
    let k = &design.gain;
    let q_eff = &design.q + k.transpose() * &design.r * k;
    let cross = k.transpose() * &design.r; // z-v coupling from ||Kz + v||_R^2
    for l in 0..layout.horizon {
        add_block(&mut h, layout.z(l), layout.z(l), &(&q_eff * 2.0));
        add_block(&mut h, layout.z(l), layout.v(l), &(&cross * 2.0));
        add_block(&mut h, layout.v(l), layout.z(l), &(cross.transpose() * 2.0));
        add_block(&mut h, layout.v(l), layout.v(l), &(&design.r * 2.0));
    }
    let p = &design.terminal_weight;
    let zz = a_k.transpose() * p * &a_k * 2.0;
    let zv = a_k.transpose() * p * &sys.b * 2.0;
    let vv = sys.b.transpose() * p * &sys.b * 2.0;
    let lz = layout.z(layout.horizon - 1);
    let lv = layout.v(layout.horizon - 1);
    add_block(&mut h, lz, lz, &zz);
    add_block(&mut h, lz, lv, &zv);
    add_block(&mut h, lv, lz, &zv.transpose());
    add_block(&mut h, lv, lv, &vv);
    h
}

fn add_block(h: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            h[(row + i, col + j)] += block[(i, j)];
        }
    }
}

/// Evaluates `J` directly step by step; the oracle the assembled quadratic
/// form is tested against.
pub fn horizon_cost(sys: &LtiSystem, design: &ControllerDesign, z: &[DVector<f64>], v: &[DVector<f64>]) -> f64 {
    let a_k = design.closed_loop(sys);
    let mut total = 0.0;
    for l in 0..design.horizon {
        let u_nom = &design.gain * &z[l] + &v[l];
        total += (z[l].transpose() * &design.q * &z[l])[(0, 0)];
        total += (u_nom.transpose() * &design.r * &u_nom)[(0, 0)];
    }
    let x_n = &a_k * &z[design.horizon - 1] + &sys.b * &v[design.horizon - 1];
    total + (x_n.transpose() * &design.terminal_weight * &x_n)[(0, 0)]
}

fn equality_matrices(sys: &LtiSystem, design: &ControllerDesign, layout: &Layout) -> (DMatrix<f64>, DVector<f64>) {
    let n_x = layout.n_x;
    let n = layout.horizon;
    let a_k = design.closed_loop(sys);
    let mut g = DMatrix::zeros(layout.num_eq(), layout.num_vars());
    let b = DVector::zeros(layout.num_eq());
    for i in 0..n_x {
        g[(i, layout.z(0) + i)] = 1.0; // z_0 = x, rhs filled per solve
    }
    for l in 0..n - 1 {
        let row = (l + 1) * n_x;
        for i in 0..n_x {
            g[(row + i, layout.z(l + 1) + i)] = 1.0;
            for j in 0..n_x {
                g[(row + i, layout.z(l) + j)] = -a_k[(i, j)];
            }
            for j in 0..layout.n_u {
                g[(row + i, layout.v(l) + j)] = -sys.b[(i, j)];
            }
        }
    }
    let row = n * n_x;
    for i in 0..n_x {
        for j in 0..n_x {
            let eye = if i == j { 1.0 } else { 0.0 };
            g[(row + i, layout.z(n - 1) + j)] = eye - a_k[(i, j)];
        }
        for j in 0..layout.n_u {
            g[(row + i, layout.v(n - 1) + j)] = -sys.b[(i, j)];
        }
    }
    (g, b)
}

/// The tightened finite-horizon problem: hard constraints `h − q_ℓ`, no
/// slack, no separate first-input rows (the input rows of `(C, D, h)` are
/// already tightened like every other row).
pub fn build_tightened_problem(
    sys: &LtiSystem,
    design: &ControllerDesign,
    profile: &TighteningProfile,
    x: &DVector<f64>,
) -> Result<QpProblem> {
    check_shapes(sys, design, profile, x)?;
    let layout = Layout::new(sys, design.horizon, None);
    let h = build_cost(sys, design);
    let f = DVector::zeros(layout.num_vars());
    let (g_eq, mut b_eq) = equality_matrices(sys, design, &layout);
    b_eq.rows_mut(0, layout.n_x).copy_from(x);

    let n_rows = layout.horizon * layout.n_h;
    let mut g_in = DMatrix::zeros(n_rows, layout.num_vars());
    let mut b_in = DVector::zeros(n_rows);
    for l in 0..layout.horizon {
        let row = l * layout.n_h;
        for i in 0..layout.n_h {
            for j in 0..layout.n_x {
                g_in[(row + i, layout.z(l) + j)] = design.c_k[(i, j)];
            }
            for j in 0..layout.n_u {
                g_in[(row + i, layout.v(l) + j)] = sys.d[(i, j)];
            }
            b_in[row + i] = sys.h[i] - profile.q[l][i];
        }
    }
    QpProblem::new(h, f, g_eq, b_eq, g_in, b_in)
}

/// The penalty-softened problem over `(z, v, η)`: same equalities, stage
/// rows relaxed by the slack, `η ⪰ 0`, cost `J + ρ·Ση`, plus the hard
/// first-input rows `G_u (v_0 + K x) ⪯ h_u`.
pub fn build_penalty_problem(
    sys: &LtiSystem,
    design: &ControllerDesign,
    profile: &TighteningProfile,
    input_set: &InputSet,
    rho: f64,
    slack_mode: SlackMode,
    x: &DVector<f64>,
) -> Result<QpProblem> {
    check_shapes(sys, design, profile, x)?;
    if !(rho > 0.0) {
        return Err(Error::invalid("build_penalty_problem", format!("rho must be positive, got {rho}")));
    }
    if input_set.g.ncols() != sys.input_dim() {
        return Err(Error::dims("build_penalty_problem", "input set G", input_set.g.shape(), "B (cols)", (sys.input_dim(), sys.input_dim())));
    }
    let layout = Layout::new(sys, design.horizon, Some(slack_mode));
    let nv = layout.num_vars();
    let mut h = DMatrix::zeros(nv, nv);
    h.view_mut((0, 0), (layout.eta(), layout.eta())).copy_from(&build_cost(sys, design));
    let mut f = DVector::zeros(nv);
    for i in layout.eta()..nv {
        f[i] = rho;
    }
    let (g_eq, mut b_eq) = equality_matrices(sys, design, &layout);
    b_eq.rows_mut(0, layout.n_x).copy_from(x);

    let n_u_rows = input_set.g.nrows();
    let n_rows = layout.horizon * layout.n_h + layout.n_eta + n_u_rows;
    let mut g_in = DMatrix::zeros(n_rows, nv);
    let mut b_in = DVector::zeros(n_rows);
    for l in 0..layout.horizon {
        let row = l * layout.n_h;
        let eta_col = match slack_mode {
            SlackMode::Shared => layout.eta(),
            SlackMode::PerStep => layout.eta() + l * layout.n_h,
        };
        for i in 0..layout.n_h {
            for j in 0..layout.n_x {
                g_in[(row + i, layout.z(l) + j)] = design.c_k[(i, j)];
            }
            for j in 0..layout.n_u {
                g_in[(row + i, layout.v(l) + j)] = sys.d[(i, j)];
            }
            g_in[(row + i, eta_col + i)] = -1.0;
            b_in[row + i] = sys.h[i] - profile.q[l][i];
        }
    }
    let eta_rows = layout.horizon * layout.n_h;
    for i in 0..layout.n_eta {
        g_in[(eta_rows + i, layout.eta() + i)] = -1.0;
    }
    let input_rows = eta_rows + layout.n_eta;
    let kx = &design.gain * x;
    for i in 0..n_u_rows {
        for j in 0..layout.n_u {
            g_in[(input_rows + i, layout.v(0) + j)] = input_set.g[(i, j)];
        }
        b_in[input_rows + i] = input_set.h[i] - (input_set.g.row(i) * &kx)[(0, 0)];
    }
    QpProblem::new(h, f, g_eq, b_eq, g_in, b_in)
}

fn check_shapes(sys: &LtiSystem, design: &ControllerDesign, profile: &TighteningProfile, x: &DVector<f64>) -> Result<()> {
    if profile.horizon() != design.horizon {
        return Err(Error::invalid("smpc", "profile horizon does not match the design"));
    }
    if profile.rows() != sys.constraint_rows() {
        return Err(Error::invalid("smpc", "profile row count does not match the constraint rows"));
    }
    if x.len() != sys.state_dim() {
        return Err(Error::dims("smpc", "x", (x.len(), 1), "A", sys.a.shape()));
    }
    Ok(())
}

/// The always-feasible soft-constrained controller `u = κ(x, ρ)`.
///
/// Construction asserts the standing assumptions behind the always-feasible
/// claim: `(A, B)` controllable and `N ≥ n_x`.
#[derive(Debug, Clone)]
pub struct PenaltyController {
    pub sys: LtiSystem,
    pub design: ControllerDesign,
    pub profile: TighteningProfile,
    pub input_set: InputSet,
    pub rho: f64,
    pub slack_mode: SlackMode,
    template: QpProblem,
    layout: Layout,
}

impl PenaltyController {
    pub fn new(
        sys: LtiSystem,
        design: ControllerDesign,
        profile: TighteningProfile,
        input_set: InputSet,
        rho: f64,
        slack_mode: SlackMode,
    ) -> Result<Self> {
        if design.horizon < sys.state_dim() {
            return Err(Error::invalid(
                "PenaltyController",
                format!("always-feasibility needs N >= n_x, got N = {} < {}", design.horizon, sys.state_dim()),
            ));
        }
        if !is_controllable(&sys.a, &sys.b) {
            return Err(Error::invalid("PenaltyController", "(A, B) must be controllable"));
        }
        let x0 = DVector::zeros(sys.state_dim());
        let template = build_penalty_problem(&sys, &design, &profile, &input_set, rho, slack_mode, &x0)?;
        let layout = Layout::new(&sys, design.horizon, Some(slack_mode));
        Ok(Self { sys, design, profile, input_set, rho, slack_mode, template, layout })
    }

    pub fn horizon(&self) -> usize {
        self.design.horizon
    }

    /// Fresh-cache single solve; prefer [`Self::kappa_with`] in loops.
    pub fn kappa(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut cache = ControllerCache::default();
        self.kappa_with(x, &mut cache)
    }

    /// `u = v*_0 + K x`, guaranteed in the input set by the hard rows.
    pub fn kappa_with(&self, x: &DVector<f64>, cache: &mut ControllerCache) -> Result<DVector<f64>> {
        let decision = self.solve_horizon(x, cache)?;
        Ok(&decision.v[0] + &self.design.gain * x)
    }

    /// Full optimal horizon at `x`.
    pub fn solve_horizon(&self, x: &DVector<f64>, cache: &mut ControllerCache) -> Result<HorizonDecision> {
        let sol = self.solve_raw(x, cache)?;
        Ok(HorizonDecision::from_vector(&sol.y_star, &self.layout))
    }

    pub(crate) fn solve_raw(&self, x: &DVector<f64>, cache: &mut ControllerCache) -> Result<QpSolution> {
        if x.len() != self.sys.state_dim() {
            return Err(Error::dims("kappa", "x", (x.len(), 1), "A", self.sys.a.shape()));
        }
        let solver = match cache.solver.as_mut() {
            Some(s) => s,
            None => {
                cache.solver = Some(QpSolver::new(self.template.clone(), SolveOptions::default())?);
                cache.solver.as_mut().expect("just inserted")
            }
        };
        let (b_eq, b_in) = self.rhs_for(x);
        solver.set_rhs(&b_eq, &b_in)?;
        let sol = solver.solve(cache.warm.as_ref());
        if sol.status != SolveStatus::Optimal {
            cache.warm = None;
            return Err(Error::SolverFailure {
                status: sol.status.as_str(),
                iterations: sol.iterations,
                primal: sol.primal_residual,
                dual: sol.dual_residual,
            });
        }
        cache.warm = Some(WarmStart::from(&sol));
        Ok(sol)
    }

    fn rhs_for(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut b_eq = self.template.b_eq.clone();
        b_eq.rows_mut(0, self.layout.n_x).copy_from(x);
        let mut b_in = self.template.b_in.clone();
        let kx = &self.design.gain * x;
        let input_rows = self.layout.horizon * self.layout.n_h + self.layout.n_eta;
        for i in 0..self.input_set.g.nrows() {
            b_in[input_rows + i] = self.input_set.h[i] - (self.input_set.g.row(i) * &kx)[(0, 0)];
        }
        (b_eq, b_in)
    }
}

/// Per-thread solver state: the factorized QP and the previous solution used
/// as a warm start. Reset [`ControllerCache::warm`] when starting an
/// unrelated trajectory so results do not depend on scheduling.
#[derive(Default)]
pub struct ControllerCache {
    solver: Option<QpSolver>,
    pub warm: Option<WarmStart>,
}

impl ControllerCache {
    pub fn reset_warm(&mut self) {
        self.warm = None;
    }
}

/// Reusable membership test for the tightened-problem feasibility region.
pub struct FeasibilityChecker {
    solver: QpSolver,
    n_x: usize,
}

impl FeasibilityChecker {
    pub fn new(sys: &LtiSystem, design: &ControllerDesign, profile: &TighteningProfile) -> Result<Self> {
        let x0 = DVector::zeros(sys.state_dim());
        let tightened = build_tightened_problem(sys, design, profile, &x0)?;
        let n = tightened.num_vars();
        let phase1 = QpProblem::new(
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            tightened.g_eq.clone(),
            tightened.b_eq.clone(),
            tightened.g_in.clone(),
            tightened.b_in.clone(),
        )?;
        let options = SolveOptions { polish: false, max_iter: 50_000, ..SolveOptions::default() };
        Ok(Self { solver: QpSolver::new(phase1, options)?, n_x: sys.state_dim() })
    }

    /// Membership of `x` in the feasibility region; conservative `false` if
    /// the solver hits its cap undecided.
    pub fn is_feasible(&mut self, x: &DVector<f64>) -> Result<bool> {
        if x.len() != self.n_x {
            return Err(Error::invalid("FeasibilityChecker", "state dimension mismatch"));
        }
        let mut b_eq = self.solver.problem().b_eq.clone();
        b_eq.rows_mut(0, self.n_x).copy_from(x);
        let b_in = self.solver.problem().b_in.clone();
        self.solver.set_rhs(&b_eq, &b_in)?;
        Ok(self.solver.check_feasible(None).feasible)
    }
}

fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut power = b.clone();
    for _ in 0..n {
        blocks.push(power.clone());
        power = a * &power;
    }
    let total_cols: usize = blocks.iter().map(|m| m.ncols()).sum();
    let mut ctrb = DMatrix::zeros(n, total_cols);
    let mut col = 0;
    for block in blocks {
        ctrb.view_mut((0, col), (n, block.ncols())).copy_from(&block);
        col += block.ncols();
    }
    ctrb.rank(1e-10) == n
}
