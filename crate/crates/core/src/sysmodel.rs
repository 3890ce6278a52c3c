//! LTI plant, constraint polytope, stage cost, and the Riccati/LQR machinery
//! that fixes the ancillary gain `K` and terminal weight `P`.
//!
//! Gain-sign convention, stated once and loudly: **every gain in this crate
//! is in the `u = K x` convention**, so the closed loop is `A_K = A + B K`.
//! Most LQR references return the gain for `u = -K x`; [`solve_dlqr`] already
//! performs the sign flip, so its output plugs into `A + B K` directly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Discrete-time LTI plant `x⁺ = A x + B u + ζ` with joint polytopic
/// constraints `C x + D u ⪯ h`.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl LtiSystem {
    /// Validates mutual dimension consistency and that the constraint
    /// polytope contains the origin strictly (`h ≻ 0`), so the unperturbed
    /// equilibrium is feasible.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self> {
        let n_x = a.nrows();
        if a.ncols() != n_x {
            return Err(Error::invalid("LtiSystem", format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if n_x == 0 || b.ncols() == 0 {
            return Err(Error::invalid("LtiSystem", "n_x and n_u must be at least 1"));
        }
        if b.nrows() != n_x {
            return Err(Error::dims("LtiSystem", "A", a.shape(), "B", b.shape()));
        }
        if c.ncols() != n_x {
            return Err(Error::dims("LtiSystem", "C", c.shape(), "A", a.shape()));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::dims("LtiSystem", "D", d.shape(), "C/B", (c.nrows(), b.ncols())));
        }
        if h.len() != c.nrows() || h.is_empty() {
            return Err(Error::dims("LtiSystem", "h", (h.len(), 1), "C", c.shape()));
        }
        for (i, &hi) in h.iter().enumerate() {
            if !(hi > 0.0) {
                return Err(Error::invalid(
                    "LtiSystem",
                    format!("h must be strictly positive so the origin is interior; h[{i}] = {hi}"),
                ));
            }
        }
        let all = a.iter().chain(b.iter()).chain(c.iter()).chain(d.iter()).chain(h.iter());
        for v in all {
            if !v.is_finite() {
                return Err(Error::invalid("LtiSystem", "non-finite entry in system data"));
            }
        }
        Ok(Self { a, b, c, d, h })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn constraint_rows(&self) -> usize {
        self.c.nrows()
    }
}

/// Fixed controller ingredients: weights `Q`, `R`, ancillary gain `K`
/// (convention `u = K x`), terminal weight `P` solving
/// `Q + KᵀRK + A_Kᵀ P A_K = P`, horizon `N`, and `C_K = C + D K`.
#[derive(Debug, Clone)]
pub struct ControllerDesign {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub terminal_weight: DMatrix<f64>,
    pub horizon: usize,
    pub c_k: DMatrix<f64>,
}

/// Frobenius-norm tolerance on the Riccati residual accepted at construction.
pub const RICCATI_RESIDUAL_TOL: f64 = 1e-9;

impl ControllerDesign {
    /// Builds a design around an explicit stabilizing gain. The terminal
    /// weight is computed here from the Riccati fixed point.
    pub fn with_gain(
        sys: &LtiSystem,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        gain: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("ControllerDesign", "horizon must be at least 1"));
        }
        if q.shape() != (sys.state_dim(), sys.state_dim()) {
            return Err(Error::dims("ControllerDesign", "Q", q.shape(), "A", sys.a.shape()));
        }
        if r.shape() != (sys.input_dim(), sys.input_dim()) {
            return Err(Error::dims("ControllerDesign", "R", r.shape(), "B (cols)", (sys.input_dim(), sys.input_dim())));
        }
        if gain.shape() != (sys.input_dim(), sys.state_dim()) {
            return Err(Error::dims("ControllerDesign", "K", gain.shape(), "B'", (sys.input_dim(), sys.state_dim())));
        }
        let q = symmetrize(&q);
        let r = symmetrize(&r);
        let a_k = closed_loop_matrix(sys, &gain)?;
        let radius = spectral_radius(&a_k);
        if radius >= 1.0 {
            return Err(Error::invalid(
                "ControllerDesign",
                format!("A + BK must be Schur stable; spectral radius = {radius:.6}"),
            ));
        }
        let terminal_weight = solve_riccati_for_p(&a_k, &q, &r, &gain)?;
        let c_k = &sys.c + &sys.d * &gain;
        Ok(Self { q, r, gain, terminal_weight, horizon, c_k })
    }

    /// Builds the design with the gain from the unconstrained discrete LQR
    /// problem, as in the numerical study.
    pub fn from_dlqr(sys: &LtiSystem, q: DMatrix<f64>, r: DMatrix<f64>, horizon: usize) -> Result<Self> {
        let (gain, _) = solve_dlqr(&sys.a, &sys.b, &q, &r)?;
        Self::with_gain(sys, q, r, gain, horizon)
    }

    pub fn closed_loop(&self, sys: &LtiSystem) -> DMatrix<f64> {
        &sys.a + &sys.b * &self.gain
    }
}

/// `A_K = A + B K`.
pub fn closed_loop_matrix(sys: &LtiSystem, gain: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if gain.nrows() != sys.input_dim() || gain.ncols() != sys.state_dim() {
        return Err(Error::dims(
            "closed_loop_matrix",
            "K",
            gain.shape(),
            "B",
            sys.b.shape(),
        ));
    }
    Ok(&sys.a + &sys.b * gain)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Terminal weight from the fixed point of
/// `P = Q + KᵀRK + A_Kᵀ P A_K`,
/// iterated from `P = 0` until the successive-iterate Frobenius change drops
/// below 1e-12 (geometric for Schur-stable `A_K`). The iterate is
/// symmetrized every step to suppress floating-point drift.
pub fn solve_riccati_for_p(
    a_k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gain: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a_k.nrows();
    if q.shape() != (n, n) || gain.ncols() != n || r.shape() != (gain.nrows(), gain.nrows()) {
        return Err(Error::dims("solve_riccati_for_p", "Q", q.shape(), "A_K", a_k.shape()));
    }
    let constant = symmetrize(&(q + gain.transpose() * r * gain));
    let mut p = DMatrix::zeros(n, n);
    const MAX_ITER: usize = 100_000;
    for _ in 0..MAX_ITER {
        let next = symmetrize(&(&constant + a_k.transpose() * &p * a_k));
        let change = (&next - &p).norm();
        p = next;
        if change < 1e-12 {
            let residual = (&constant + a_k.transpose() * &p * a_k - &p).norm();
            if residual > RICCATI_RESIDUAL_TOL {
                return Err(Error::invalid(
                    "solve_riccati_for_p",
                    format!("fixed point reached but residual {residual:.3e} exceeds {RICCATI_RESIDUAL_TOL:.0e}"),
                ));
            }
            return Ok(p);
        }
    }
    Err(Error::NonConvergence { what: "Riccati fixed-point iteration (is A_K Schur stable?)", iterations: MAX_ITER })
}

/// Unconstrained discrete LQR. Returns `(K, P)` with the gain in the
/// `u = K x` convention (so `A + B K` is Schur stable) and `P` the
/// stabilizing solution of the discrete algebraic Riccati equation.
///
/// The recursion `P ← Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA` runs from `P = Q`
/// until the successive change is below 1e-12.
pub fn solve_dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::invalid("solve_dlqr", "A must be square"));
    }
    if b.nrows() != n {
        return Err(Error::dims("solve_dlqr", "A", a.shape(), "B", b.shape()));
    }
    if q.shape() != (n, n) {
        return Err(Error::dims("solve_dlqr", "Q", q.shape(), "A", a.shape()));
    }
    if r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::dims("solve_dlqr", "R", r.shape(), "B (cols)", (b.ncols(), b.ncols())));
    }
    let q = symmetrize(q);
    let r = symmetrize(r);
    let mut p = q.clone();
    const MAX_ITER: usize = 100_000;
    for _ in 0..MAX_ITER {
        let btp = b.transpose() * &p;
        let gram = &r + &btp * b;
        let chol = gram.clone().cholesky().ok_or_else(|| {
            Error::invalid("solve_dlqr", "R + BᵀPB is not positive definite (is R ≻ 0?)")
        })?;
        let k_neg = chol.solve(&(&btp * a)); // gain for u = -Kx
        let next = symmetrize(&(&q + a.transpose() * &p * a - (a.transpose() * btp.transpose()) * &k_neg));
        let change = (&next - &p).norm();
        p = next;
        if change < 1e-12 {
            let btp = b.transpose() * &p;
            let gram = &r + &btp * b;
            let chol = gram
                .cholesky()
                .ok_or_else(|| Error::invalid("solve_dlqr", "R + BᵀPB is not positive definite"))?;
            let gain = -chol.solve(&(&btp * a));
            return Ok((gain, p));
        }
    }
    Err(Error::NonConvergence { what: "DLQR Riccati recursion (is (A,B) stabilizable?)", iterations: MAX_ITER })
}

/// Quadratic stage cost `xᵀQx + uᵀRu`.
pub fn stage_cost(x: &DVector<f64>, u: &DVector<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<f64> {
    if q.shape() != (x.len(), x.len()) {
        return Err(Error::dims("stage_cost", "Q", q.shape(), "x", (x.len(), 1)));
    }
    if r.shape() != (u.len(), u.len()) {
        return Err(Error::dims("stage_cost", "R", r.shape(), "u", (u.len(), 1)));
    }
    Ok((x.transpose() * q * x)[(0, 0)] + (u.transpose() * r * u)[(0, 0)])
}

/// The study plant of the numerical example, handy for tests and the bundled
/// config: double-integrator-like dynamics with box constraints
/// |x₁| ≤ 2, |x₂| ≤ 3, |u| ≤ 0.2 (six rows).
pub fn example_system() -> LtiSystem {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0075, -0.143, 0.996]);
    let b = DMatrix::from_row_slice(2, 1, &[4.798, 0.115]);
    let (c, d, h) = box_constraints(&[2.0, 3.0], &[0.2]);
    LtiSystem::new(a, b, c, d, h).expect("example system data is consistent")
}

/// Expands per-component box bounds `|x_i| ≤ sx_i`, `|u_j| ≤ su_j` into
/// `(C, D, h)` rows, ordered state rows first (`+x_i`, `-x_i` pairs), then
/// input rows.
pub fn box_constraints(state_box: &[f64], input_box: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n_x = state_box.len();
    let n_u = input_box.len();
    let n_h = 2 * (n_x + n_u);
    let mut c = DMatrix::zeros(n_h, n_x);
    let mut d = DMatrix::zeros(n_h, n_u);
    let mut h = DVector::zeros(n_h);
    for (i, &bound) in state_box.iter().enumerate() {
        c[(2 * i, i)] = 1.0;
        c[(2 * i + 1, i)] = -1.0;
        h[2 * i] = bound;
        h[2 * i + 1] = bound;
    }
    for (j, &bound) in input_box.iter().enumerate() {
        let row = 2 * n_x + 2 * j;
        d[(row, j)] = 1.0;
        d[(row + 1, j)] = -1.0;
        h[row] = bound;
        h[row + 1] = bound;
    }
    (c, d, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_system(a: f64, b: f64) -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn closed_loop_zero_input_matrix() {
        let sys = LtiSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let k = DMatrix::from_row_slice(1, 2, &[3.0, -7.0]);
        let a_k = closed_loop_matrix(&sys, &k).unwrap();
        assert_eq!(a_k, DMatrix::identity(2, 2));
    }

    #[test]
    fn closed_loop_scalar() {
        let sys = scalar_system(1.0, 1.0);
        let a_k = closed_loop_matrix(&sys, &DMatrix::from_element(1, 1, -0.5)).unwrap();
        assert_abs_diff_eq!(a_k[(0, 0)], 0.5);
    }

    #[test]
    fn closed_loop_paper_gain_is_stable() {
        let sys = example_system();
        let k = DMatrix::from_row_slice(1, 2, &[-0.2858, 0.4910]);
        let a_k = closed_loop_matrix(&sys, &k).unwrap();
        assert!(spectral_radius(&a_k) < 1.0);
    }

    #[test]
    fn closed_loop_dimension_mismatch_names_pair() {
        let sys = example_system();
        let k = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 0.0]);
        let err = closed_loop_matrix(&sys, &k).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('K') && msg.contains('B'), "unexpected message: {msg}");
    }

    #[test]
    fn riccati_scalar_geometric_series() {
        // A_K = 0.5, Q = 1, R = 1, K = 0: P = sum 0.25^k = 4/3.
        let p = solve_riccati_for_p(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 0.0),
        )
        .unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 4.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn riccati_nilpotent_one_step() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let k = DMatrix::from_row_slice(1, 2, &[0.4, -0.2]);
        let r = DMatrix::from_element(1, 1, 3.0);
        let p = solve_riccati_for_p(&DMatrix::zeros(2, 2), &q, &r, &k).unwrap();
        let expected = &q + k.transpose() * &r * &k;
        assert!((p - expected).norm() < 1e-12);
    }

    #[test]
    fn riccati_rejects_unstable_loop() {
        let err = solve_riccati_for_p(
            &DMatrix::from_element(1, 1, 1.01),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn riccati_residual_on_study_system() {
        let sys = example_system();
        let q = DMatrix::from_partial_diagonal(2, 2, &[1.0, 10.0]);
        let r = DMatrix::from_element(1, 1, 1.0);
        let (k, _) = solve_dlqr(&sys.a, &sys.b, &q, &r).unwrap();
        let a_k = closed_loop_matrix(&sys, &k).unwrap();
        let p = solve_riccati_for_p(&a_k, &q, &r, &k).unwrap();
        let residual = (&q + k.transpose() * &r * &k + a_k.transpose() * &p * &a_k - &p).norm();
        assert!(residual <= RICCATI_RESIDUAL_TOL, "residual = {residual:.3e}");
    }

    #[test]
    fn dlqr_reproduces_study_gain() {
        let sys = example_system();
        let q = DMatrix::from_partial_diagonal(2, 2, &[1.0, 10.0]);
        let r = DMatrix::from_element(1, 1, 1.0);
        let (k, _) = solve_dlqr(&sys.a, &sys.b, &q, &r).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], -0.2858, epsilon = 5e-4);
        assert_abs_diff_eq!(k[(0, 1)], 0.4910, epsilon = 5e-4);
    }

    #[test]
    fn dlqr_zero_actuation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let b = DMatrix::zeros(2, 1);
        let (k, _) = solve_dlqr(&a, &b, &DMatrix::identity(2, 2), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(k, DMatrix::zeros(1, 2));
    }

    #[test]
    fn dlqr_huge_input_weight_kills_gain() {
        let (k, _) = solve_dlqr(
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1e9),
        )
        .unwrap();
        assert!(k[(0, 0)].abs() < 1e-4);
    }

    #[test]
    fn dlqr_and_fixed_point_riccati_agree() {
        let sys = example_system();
        let q = DMatrix::from_partial_diagonal(2, 2, &[1.0, 10.0]);
        let r = DMatrix::from_element(1, 1, 1.0);
        let (k, p_dare) = solve_dlqr(&sys.a, &sys.b, &q, &r).unwrap();
        let a_k = closed_loop_matrix(&sys, &k).unwrap();
        let p_fixed = solve_riccati_for_p(&a_k, &q, &r, &k).unwrap();
        assert!((p_dare - p_fixed).norm() < 1e-8);
    }

    #[test]
    fn stage_cost_zero() {
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        assert_eq!(stage_cost(&DVector::zeros(2), &DVector::zeros(1), &q, &r).unwrap(), 0.0);
    }

    #[test]
    fn stage_cost_direct_quadratic() {
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let u = DVector::from_vec(vec![3.0]);
        assert_abs_diff_eq!(stage_cost(&x, &u, &q, &r).unwrap(), 14.0);
    }

    #[test]
    fn stage_cost_matches_elementwise_sum() {
        // fixed "random" data; oracle is the double loop
        let q = DMatrix::from_row_slice(2, 2, &[1.3, -0.2, 0.4, 2.1]);
        let r = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 1.7]);
        let x = DVector::from_vec(vec![0.7, -1.9]);
        let u = DVector::from_vec(vec![0.3, 0.8]);
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                expected += x[i] * q[(i, j)] * x[j] + u[i] * r[(i, j)] * u[j];
            }
        }
        assert_abs_diff_eq!(stage_cost(&x, &u, &q, &r).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn stage_cost_symmetrization_invariant() {
        let q = DMatrix::from_row_slice(2, 2, &[1.3, -0.6, 0.2, 2.1]);
        let q_sym = (&q + q.transpose()) * 0.5;
        let r = DMatrix::identity(1, 1);
        let x = DVector::from_vec(vec![0.7, -1.9]);
        let u = DVector::from_vec(vec![0.3]);
        assert_abs_diff_eq!(
            stage_cost(&x, &u, &q, &r).unwrap(),
            stage_cost(&x, &u, &q_sym, &r).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn design_computes_ck_exactly() {
        let sys = example_system();
        let q = DMatrix::from_partial_diagonal(2, 2, &[1.0, 10.0]);
        let r = DMatrix::from_element(1, 1, 1.0);
        let design = ControllerDesign::from_dlqr(&sys, q, r, 8).unwrap();
        let expected = &sys.c + &sys.d * &design.gain;
        assert_eq!(design.c_k, expected);
    }

    #[test]
    fn design_rejects_destabilizing_gain() {
        let sys = scalar_system(1.5, 0.0);
        let err = ControllerDesign::with_gain(
            &sys,
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("spectral radius"));
    }
}
