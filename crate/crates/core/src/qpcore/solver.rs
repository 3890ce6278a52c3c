//! The operator-splitting iteration behind [`QpSolver`].
//!
//! Splitting: `min ½yᵀHy + fᵀy + I_C(z)  s.t.  A y = z` with
//! `A = [G_eq; G_in]` and `C = {z : z_eq = b_eq, z_in ⪯ b_in}`. Each
//! iteration solves the quasi-definite KKT system
//!
//! `[ H + σI   Aᵀ      ] [x̃]   [ σx − f     ]`
//! `[ A       −diag(1/ρ)] [ν] = [ z − λ/ρ    ]`
//!
//! then over-relaxes, projects onto `C`, and updates the multipliers.
//! Equality rows carry a 1e3-times larger penalty than inequality rows. The
//! problem is Ruiz-equilibrated (with cost normalization) once at
//! construction; termination is always decided on the *unscaled* residuals.
//!
//! Primal infeasibility is certified from the accumulated multiplier
//! direction `δλ` (the standard Farkas-style test); runaway iterates are
//! additionally cut off by a divergence guard.

use nalgebra::{DMatrix, DVector, Dyn};

use super::{
    FeasibilityReport, KktTolerances, QpProblem, QpSolution, SolveOptions, SolveStatus, WarmStart,
};
use crate::error::{Error, Result};

type LuFact = nalgebra::LU<f64, Dyn, Dyn>;

const RUIZ_ITERS: usize = 10;
const MIN_SCALING: f64 = 1e-6;
const MAX_SCALING: f64 = 1e6;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_SWITCH_RATIO: f64 = 5.0;
const EPS_INFEAS: f64 = 1e-6;
const DIVERGENCE_LIMIT: f64 = 1e10;
const MAX_TIGHTENINGS: usize = 3;
const POLISH_DELTA: f64 = 1e-8;
const POLISH_ROUNDS: usize = 10;
const POLISH_REFINE: usize = 8;

/// Reusable solver bound to one problem structure. The right-hand sides
/// `b_eq`, `b_in` can be swapped without refactorization, which is the hot
/// path when one controller QP is solved for many states.
pub struct QpSolver {
    prob: QpProblem,
    opts: SolveOptions,
    n: usize,
    me: usize,
    m: usize,
    // stacked originals
    a_orig: DMatrix<f64>,
    b_orig: DVector<f64>,
    // Ruiz scaling: y = d ∘ x̂, λ = (e ∘ λ̂)/c, rows scaled by e
    d: DVector<f64>,
    e: DVector<f64>,
    cost_scale: f64,
    h_s: DMatrix<f64>,
    f_s: DVector<f64>,
    a_s: DMatrix<f64>,
    b_s: DVector<f64>,
    // penalty state
    base_rho: f64,
    base_fact: LuFact,
    // iterates (scaled) and work buffers
    x: DVector<f64>,
    z: DVector<f64>,
    lam: DVector<f64>,
    rho_vec: DVector<f64>,
    kkt_rhs: DVector<f64>,
    z_tilde: DVector<f64>,
    work_n: DVector<f64>,
    work_n2: DVector<f64>,
    work_m: DVector<f64>,
}

struct KktReport {
    eq_res: f64,
    ineq_viol: f64,
    stationarity: f64,
    mu_min: f64,
    comp_slack: f64,
}

impl KktReport {
    fn satisfies(&self, tol: &KktTolerances) -> bool {
        self.eq_res <= tol.eq
            && self.ineq_viol <= tol.ineq
            && self.stationarity <= tol.stationarity
            && self.mu_min >= -tol.dual_sign
            && self.comp_slack <= tol.comp_slack
    }

    /// Largest tolerance-relative deficit; < 1 iff `satisfies`.
    fn score(&self, tol: &KktTolerances) -> f64 {
        (self.eq_res / tol.eq)
            .max(self.ineq_viol / tol.ineq)
            .max(self.stationarity / tol.stationarity)
            .max((-self.mu_min) / tol.dual_sign)
            .max(self.comp_slack / tol.comp_slack)
    }
}

struct Candidate {
    y: DVector<f64>,
    nu: DVector<f64>,
    mu: DVector<f64>,
    report: KktReport,
    polished: bool,
}

impl QpSolver {
    pub fn new(prob: QpProblem, opts: SolveOptions) -> Result<Self> {
        let n = prob.num_vars();
        let me = prob.num_eq();
        let mi = prob.num_in();
        let m = me + mi;
        if n == 0 {
            return Err(Error::invalid("QpSolver", "problem has no variables"));
        }

        let mut a_orig = DMatrix::zeros(m, n);
        if me > 0 {
            a_orig.rows_mut(0, me).copy_from(&prob.g_eq);
        }
        if mi > 0 {
            a_orig.rows_mut(me, mi).copy_from(&prob.g_in);
        }
        let mut b_orig = DVector::zeros(m);
        b_orig.rows_mut(0, me).copy_from(&prob.b_eq);
        b_orig.rows_mut(me, mi).copy_from(&prob.b_in);

        let (d, e, cost_scale, h_s, f_s, a_s) = ruiz_equilibrate(&prob.h, &prob.f, &a_orig);
        let mut b_s = b_orig.clone();
        for i in 0..m {
            b_s[i] *= e[i];
        }

        let base_rho = opts.rho0.clamp(RHO_MIN, RHO_MAX);
        let rho_vec = rho_vector(base_rho, me, m);
        let base_fact = factor_kkt(&h_s, &a_s, opts.sigma, &rho_vec);

        Ok(Self {
            n,
            me,
            m,
            a_orig,
            b_orig,
            d,
            e,
            cost_scale,
            h_s,
            f_s,
            a_s,
            b_s,
            base_rho,
            base_fact,
            x: DVector::zeros(n),
            z: DVector::zeros(m),
            lam: DVector::zeros(m),
            rho_vec,
            kkt_rhs: DVector::zeros(n + m),
            z_tilde: DVector::zeros(m),
            work_n: DVector::zeros(n),
            work_n2: DVector::zeros(n),
            work_m: DVector::zeros(m),
            prob,
            opts,
        })
    }

    pub fn problem(&self) -> &QpProblem {
        &self.prob
    }

    pub fn options(&self) -> &SolveOptions {
        &self.opts
    }


    /// Swaps the right-hand sides, keeping matrices, scaling, and the cached
    /// factorization.
    pub fn set_rhs(&mut self, b_eq: &DVector<f64>, b_in: &DVector<f64>) -> Result<()> {
        if b_eq.len() != self.me || b_in.len() != self.m - self.me {
            return Err(Error::invalid("QpSolver::set_rhs", "right-hand side lengths do not match the problem"));
        }
        self.prob.b_eq.copy_from(b_eq);
        self.prob.b_in.copy_from(b_in);
        self.b_orig.rows_mut(0, self.me).copy_from(b_eq);
        self.b_orig.rows_mut(self.me, self.m - self.me).copy_from(b_in);
        for i in 0..self.m {
            self.b_s[i] = self.b_orig[i] * self.e[i];
        }
        Ok(())
    }


    pub fn solve(&mut self, warm: Option<&WarmStart>) -> QpSolution {
        self.run(warm, false)
    }

    /// Primal-only variant: succeeds as soon as any iterate is feasible to
    /// the KKT `eq`/`ineq` tolerances.
    pub fn check_feasible(&mut self, warm: Option<&WarmStart>) -> FeasibilityReport {
        let sol = self.run(warm, true);
        match sol.status {
            SolveStatus::Optimal => FeasibilityReport { feasible: true, certified: true },
            SolveStatus::PrimalInfeasible => FeasibilityReport { feasible: false, certified: true },
            SolveStatus::MaxIterations => FeasibilityReport { feasible: false, certified: false },
        }
    }

    fn run(&mut self, warm: Option<&WarmStart>, feasibility_only: bool) -> QpSolution {
        let (n, m, me) = (self.n, self.m, self.me);
        let alpha = self.opts.over_relaxation;
        let sigma = self.opts.sigma;

        // deterministic start: penalty always resets to the base value
        let mut rho = self.base_rho;
        self.rho_vec = rho_vector(rho, me, m);
        let mut local_fact: Option<LuFact> = None;

        match warm {
            Some(ws) if ws.y.len() == n && ws.dual_eq.len() == me && ws.dual_in.len() == m - me => {
                for i in 0..n {
                    self.x[i] = ws.y[i] / self.d[i];
                }
                for i in 0..m {
                    let dual = if i < me { ws.dual_eq[i] } else { ws.dual_in[i - me] };
                    self.lam[i] = self.cost_scale * dual / self.e[i];
                }
                self.work_m.gemv(1.0, &self.a_s, &self.x, 0.0);
                for i in 0..m {
                    self.z[i] = self.project_row(i, self.work_m[i]);
                }
            }
            _ => {
                self.x.fill(0.0);
                self.lam.fill(0.0);
                for i in 0..m {
                    self.z[i] = self.project_row(i, 0.0);
                }
            }
        }

        let mut eps_abs = self.opts.eps_abs;
        let mut eps_rel = self.opts.eps_rel;
        let mut tightenings = 0usize;
        let mut prev_x = self.x.clone();
        let mut prev_lam = self.lam.clone();
        let mut best: Option<Candidate> = None;
        let mut iterations = 0usize;
        let mut final_rp = f64::INFINITY;
        let mut final_rd = f64::INFINITY;

        while iterations < self.opts.max_iter {
            iterations += 1;

            // KKT solve
            for i in 0..n {
                self.kkt_rhs[i] = sigma * self.x[i] - self.f_s[i];
            }
            for i in 0..m {
                self.kkt_rhs[n + i] = self.z[i] - self.lam[i] / self.rho_vec[i];
            }
            let fact = local_fact.as_ref().unwrap_or(&self.base_fact);
            let solved = fact.solve_mut(&mut self.kkt_rhs);
            if !solved {
                // singular KKT should be impossible for quasi-definite data
                break;
            }

            for i in 0..m {
                let nu = self.kkt_rhs[n + i];
                self.z_tilde[i] = self.z[i] + (nu - self.lam[i]) / self.rho_vec[i];
            }
            for i in 0..n {
                self.x[i] = alpha * self.kkt_rhs[i] + (1.0 - alpha) * self.x[i];
            }
            for i in 0..m {
                let z_pre = alpha * self.z_tilde[i] + (1.0 - alpha) * self.z[i] + self.lam[i] / self.rho_vec[i];
                let z_new = self.project_row(i, z_pre);
                self.lam[i] = self.rho_vec[i] * (z_pre - z_new);
                self.z[i] = z_new;
            }

            if iterations % self.opts.check_interval != 0 && iterations != self.opts.max_iter {
                continue;
            }

            // unscaled iterates and residuals
            let y = self.unscaled_y();
            let lam_us = self.unscaled_lam();
            if !y.iter().all(|v| v.is_finite()) || y.amax() > DIVERGENCE_LIMIT {
                break;
            }

            self.work_m.gemv(1.0, &self.a_orig, &y, 0.0); // A y
            let mut rp = 0.0f64;
            let mut norm_ay = 0.0f64;
            let mut norm_z = 0.0f64;
            for i in 0..m {
                let z_us = self.z[i] / self.e[i];
                rp = rp.max((self.work_m[i] - z_us).abs());
                norm_ay = norm_ay.max(self.work_m[i].abs());
                norm_z = norm_z.max(z_us.abs());
            }
            self.work_n.gemv(1.0, &self.prob.h, &y, 0.0); // H y
            let norm_hy = self.work_n.amax();
            self.work_n2.gemv_tr(1.0, &self.a_orig, &lam_us, 0.0); // Aᵀλ
            let norm_atl = self.work_n2.amax();
            self.work_n += &self.prob.f;
            self.work_n += &self.work_n2;
            let rd = self.work_n.amax();
            final_rp = rp;
            final_rd = rd;

            // infeasibility certificate from multiplier drift
            let mut dlam = &self.lam - &prev_lam;
            for i in 0..m {
                dlam[i] *= self.e[i] / self.cost_scale;
            }
            if let Some(cert) = self.primal_infeasibility_certificate(&dlam) {
                return self.infeasible_solution(y, lam_us, iterations, rp, rd, cert);
            }
            let mut dx = &self.x - &prev_x;
            for i in 0..n {
                dx[i] *= self.d[i];
            }
            if self.dual_infeasibility_direction(&dx) {
                break; // objective unbounded below; report the iteration cap status
            }
            prev_x.copy_from(&self.x);
            prev_lam.copy_from(&self.lam);

            if feasibility_only {
                let report = self.kkt_report_primal(&y);
                if report.eq_res <= self.opts.tolerances.eq && report.ineq_viol <= self.opts.tolerances.ineq {
                    return QpSolution {
                        objective: self.prob.objective(&y),
                        y_star: y,
                        status: SolveStatus::Optimal,
                        primal_residual: rp,
                        dual_residual: rd,
                        iterations,
                        dual_eq: lam_us.rows(0, me).into_owned(),
                        dual_in: lam_us.rows(me, m - me).into_owned(),
                        certificate: None,
                        polished: false,
                    };
                }
                continue;
            }

            let eps_p = eps_abs + eps_rel * norm_ay.max(norm_z);
            let eps_d = eps_abs + eps_rel * norm_hy.max(self.prob.f.amax()).max(norm_atl);

            if rp <= eps_p && rd <= eps_d {
                let candidate = self.finalize(y, lam_us);
                let passes = candidate.report.satisfies(&self.opts.tolerances);
                let better = best
                    .as_ref()
                    .map(|b| candidate.report.score(&self.opts.tolerances) < b.report.score(&self.opts.tolerances))
                    .unwrap_or(true);
                if better {
                    best = Some(candidate);
                }
                if passes {
                    break;
                }
                if tightenings < MAX_TIGHTENINGS {
                    tightenings += 1;
                    eps_abs = (eps_abs * 1e-2).max(1e-13);
                    eps_rel = (eps_rel * 1e-2).max(0.0);
                } else {
                    break;
                }
            } else if self.opts.adaptive_rho && m > 0 {
                let prim_ratio = rp / norm_ay.max(norm_z).max(1e-10);
                let dual_ratio = rd / norm_hy.max(self.prob.f.amax()).max(1e-10);
                let proposal = (rho * (prim_ratio / dual_ratio.max(1e-16)).sqrt()).clamp(RHO_MIN, RHO_MAX);
                if proposal > rho * RHO_SWITCH_RATIO || proposal < rho / RHO_SWITCH_RATIO {
                    rho = proposal;
                    self.rho_vec = rho_vector(rho, me, m);
                    local_fact = Some(factor_kkt(&self.h_s, &self.a_s, sigma, &self.rho_vec));
                }
            }
        }

        if feasibility_only {
            let y = self.unscaled_y();
            let lam_us = self.unscaled_lam();
            return QpSolution {
                objective: self.prob.objective(&y),
                y_star: y,
                status: SolveStatus::MaxIterations,
                primal_residual: final_rp,
                dual_residual: final_rd,
                iterations,
                dual_eq: lam_us.rows(0, me).into_owned(),
                dual_in: lam_us.rows(me, m - me).into_owned(),
                certificate: None,
                polished: false,
            };
        }

        let candidate = match best {
            Some(c) => c,
            None => {
                let y = self.unscaled_y();
                let lam_us = self.unscaled_lam();
                self.finalize(y, lam_us)
            }
        };
        let status = if candidate.report.satisfies(&self.opts.tolerances) {
            SolveStatus::Optimal
        } else {
            SolveStatus::MaxIterations
        };
        QpSolution {
            objective: self.prob.objective(&candidate.y),
            y_star: candidate.y,
            status,
            primal_residual: candidate.report.eq_res.max(candidate.report.ineq_viol),
            dual_residual: candidate.report.stationarity,
            iterations,
            dual_eq: candidate.nu,
            dual_in: candidate.mu,
            certificate: None,
            polished: candidate.polished,
        }
    }

    fn project_row(&self, i: usize, value: f64) -> f64 {
        if i < self.me {
            self.b_s[i]
        } else {
            value.min(self.b_s[i])
        }
    }

    fn unscaled_y(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.d[i] * self.x[i])
    }

    fn unscaled_lam(&self) -> DVector<f64> {
        DVector::from_fn(self.m, |i, _| self.e[i] * self.lam[i] / self.cost_scale)
    }

    fn infeasible_solution(
        &self,
        y: DVector<f64>,
        lam_us: DVector<f64>,
        iterations: usize,
        rp: f64,
        rd: f64,
        certificate: DVector<f64>,
    ) -> QpSolution {
        QpSolution {
            objective: f64::INFINITY,
            y_star: y,
            status: SolveStatus::PrimalInfeasible,
            primal_residual: rp,
            dual_residual: rd,
            iterations,
            dual_eq: lam_us.rows(0, self.me).into_owned(),
            dual_in: lam_us.rows(self.me, self.m - self.me).into_owned(),
            certificate: Some(certificate),
            polished: false,
        }
    }

    /// Farkas test on a normalized multiplier direction `v`:
    /// `‖Aᵀv‖_∞ ≈ 0`, `v_in ⪰ 0`, and `b_eqᵀv_eq + b_inᵀv_in < 0` certify
    /// that no point satisfies all constraints.
    fn primal_infeasibility_certificate(&self, dlam: &DVector<f64>) -> Option<DVector<f64>> {
        if self.m == 0 {
            return None;
        }
        let scale = dlam.amax();
        if !(scale > 1e-14) {
            return None;
        }
        let v = dlam / scale;
        for i in self.me..self.m {
            if v[i] < -EPS_INFEAS {
                return None;
            }
        }
        let mut atv = DVector::zeros(self.n);
        atv.gemv_tr(1.0, &self.a_orig, &v, 0.0);
        if atv.amax() > EPS_INFEAS {
            return None;
        }
        if self.b_orig.dot(&v) <= -EPS_INFEAS {
            Some(v)
        } else {
            None
        }
    }

    /// Unboundedness test on a normalized primal direction.
    fn dual_infeasibility_direction(&self, dx: &DVector<f64>) -> bool {
        let scale = dx.amax();
        if !(scale > 1e-14) {
            return false;
        }
        let v = dx / scale;
        let mut hv = DVector::zeros(self.n);
        hv.gemv(1.0, &self.prob.h, &v, 0.0);
        if hv.amax() > EPS_INFEAS {
            return false;
        }
        if self.prob.f.dot(&v) >= -EPS_INFEAS {
            return false;
        }
        let mut av = DVector::zeros(self.m);
        av.gemv(1.0, &self.a_orig, &v, 0.0);
        for i in 0..self.m {
            if i < self.me {
                if av[i].abs() > EPS_INFEAS {
                    return false;
                }
            } else if av[i] > EPS_INFEAS {
                return false;
            }
        }
        true
    }

    fn kkt_report_primal(&self, y: &DVector<f64>) -> KktReport {
        let mut eq_res = 0.0f64;
        let mut ineq_viol = 0.0f64;
        let mut ay = DVector::zeros(self.m);
        ay.gemv(1.0, &self.a_orig, y, 0.0);
        for i in 0..self.m {
            if i < self.me {
                eq_res = eq_res.max((ay[i] - self.b_orig[i]).abs());
            } else {
                ineq_viol = ineq_viol.max(ay[i] - self.b_orig[i]);
            }
        }
        KktReport { eq_res, ineq_viol: ineq_viol.max(0.0), stationarity: f64::INFINITY, mu_min: 0.0, comp_slack: 0.0 }
    }

    fn kkt_report(&self, y: &DVector<f64>, nu: &DVector<f64>, mu: &DVector<f64>) -> KktReport {
        let mi = self.m - self.me;
        let mut eq_res = 0.0f64;
        if self.me > 0 {
            let r = &self.prob.g_eq * y - &self.prob.b_eq;
            eq_res = r.amax();
        }
        let mut ineq_viol = 0.0f64;
        let mut comp_slack = 0.0f64;
        let mut mu_min = 0.0f64;
        if mi > 0 {
            let slack = &self.prob.g_in * y - &self.prob.b_in;
            for i in 0..mi {
                ineq_viol = ineq_viol.max(slack[i]);
                comp_slack = comp_slack.max((mu[i] * slack[i]).abs());
                mu_min = mu_min.min(mu[i]);
            }
        }
        let mut stat = DVector::zeros(self.n);
        stat.gemv(1.0, &self.prob.h, y, 0.0);
        stat += &self.prob.f;
        if self.me > 0 {
            stat.gemv_tr(1.0, &self.prob.g_eq, nu, 1.0);
        }
        if mi > 0 {
            stat.gemv_tr(1.0, &self.prob.g_in, mu, 1.0);
        }
        KktReport {
            eq_res,
            ineq_viol,
            stationarity: stat.amax(),
            mu_min,
            comp_slack,
        }
    }

    /// Contract check on the raw iterate, then an active-set polish if the
    /// raw iterate falls short (or simply to sharpen it).
    fn finalize(&self, y: DVector<f64>, lam_us: DVector<f64>) -> Candidate {
        let nu = lam_us.rows(0, self.me).into_owned();
        let mu = lam_us.rows(self.me, self.m - self.me).into_owned();
        let report = self.kkt_report(&y, &nu, &mu);
        let raw = Candidate { y, nu, mu, report, polished: false };
        if !self.opts.polish {
            return raw;
        }
        if raw.report.satisfies(&self.opts.tolerances) {
            return raw;
        }
        match self.polish(&raw) {
            Some(p) if p.report.score(&self.opts.tolerances) < raw.report.score(&self.opts.tolerances) => p,
            _ => raw,
        }
    }

    /// Direct solve of the active-set KKT equations, with a regularized
    /// factorization, iterative refinement against the unregularized system,
    /// and a few add/prune rounds to repair a misidentified active set.
    fn polish(&self, seed: &Candidate) -> Option<Candidate> {
        let mi = self.m - self.me;
        let mu_scale = seed.mu.amax().max(1.0);
        let slack = if mi > 0 {
            &self.prob.g_in * &seed.y - &self.prob.b_in
        } else {
            DVector::zeros(0)
        };
        let mut active: Vec<usize> = (0..mi)
            .filter(|&i| {
                seed.mu[i] > 1e-7 * mu_scale || slack[i] >= -1e-7 * (1.0 + self.prob.b_in[i].abs())
            })
            .collect();

        for _ in 0..POLISH_ROUNDS {
            let ma = active.len();
            let dim = self.n + self.me + ma;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (self.n, self.n)).copy_from(&self.prob.h);
            for i in 0..self.n {
                kkt[(i, i)] += POLISH_DELTA;
            }
            if self.me > 0 {
                kkt.view_mut((self.n, 0), (self.me, self.n)).copy_from(&self.prob.g_eq);
                kkt.view_mut((0, self.n), (self.n, self.me)).copy_from(&self.prob.g_eq.transpose());
            }
            for (row, &ci) in active.iter().enumerate() {
                for j in 0..self.n {
                    let v = self.prob.g_in[(ci, j)];
                    kkt[(self.n + self.me + row, j)] = v;
                    kkt[(j, self.n + self.me + row)] = v;
                }
            }
            for i in self.n..dim {
                kkt[(i, i)] -= POLISH_DELTA;
            }

            let mut rhs = DVector::zeros(dim);
            for i in 0..self.n {
                rhs[i] = -self.prob.f[i];
            }
            for i in 0..self.me {
                rhs[self.n + i] = self.prob.b_eq[i];
            }
            for (row, &ci) in active.iter().enumerate() {
                rhs[self.n + self.me + row] = self.prob.b_in[ci];
            }

            let fact = nalgebra::LU::new(kkt);
            let mut sol = rhs.clone();
            if !fact.solve_mut(&mut sol) {
                return None;
            }
            // refinement against the unregularized KKT system
            let mut prev_norm = f64::INFINITY;
            for _ in 0..POLISH_REFINE {
                let residual = self.polish_residual(&sol, &active, &rhs);
                let norm = residual.amax();
                if !(norm < prev_norm) {
                    break;
                }
                prev_norm = norm;
                let mut delta = residual;
                if !fact.solve_mut(&mut delta) {
                    break;
                }
                sol += delta;
            }

            let mut y = sol.rows(0, self.n).into_owned();
            let nu = sol.rows(self.n, self.me).into_owned();
            let mut mu = DVector::zeros(mi);
            for (row, &ci) in active.iter().enumerate() {
                mu[ci] = sol[self.n + self.me + row];
            }
            self.snap_to_active(&mut y, &active);

            // repair the active set: prune negative multipliers, add violated rows
            let tol = &self.opts.tolerances;
            let mut prune: Vec<usize> = Vec::new();
            for &ci in &active {
                if mu[ci] < -tol.dual_sign {
                    prune.push(ci);
                }
            }
            let mut add: Vec<usize> = Vec::new();
            if mi > 0 {
                let slack_new = &self.prob.g_in * &y - &self.prob.b_in;
                for i in 0..mi {
                    if !active.contains(&i) && slack_new[i] > 0.5 * tol.ineq {
                        add.push(i);
                    }
                }
            }
            if prune.is_empty() && add.is_empty() {
                let report = self.kkt_report(&y, &nu, &mu);
                return Some(Candidate { y, nu, mu, report, polished: true });
            }
            active.retain(|ci| !prune.contains(ci));
            active.extend(add);
            active.sort_unstable();
            active.dedup();
        }
        None
    }

    /// Least-squares correction pushing `y` exactly onto the affine subspace
    /// of the equalities and active inequalities. The correction is at
    /// roundoff scale but matters when multipliers are huge: complementary
    /// slackness is the product `μ_i · slack_i`.
    fn snap_to_active(&self, y: &mut DVector<f64>, active: &[usize]) {
        let rows = self.me + active.len();
        if rows == 0 {
            return;
        }
        let mut g_act = DMatrix::zeros(rows, self.n);
        let mut b_act = DVector::zeros(rows);
        if self.me > 0 {
            g_act.rows_mut(0, self.me).copy_from(&self.prob.g_eq);
            b_act.rows_mut(0, self.me).copy_from(&self.prob.b_eq);
        }
        for (row, &ci) in active.iter().enumerate() {
            for j in 0..self.n {
                g_act[(self.me + row, j)] = self.prob.g_in[(ci, j)];
            }
            b_act[self.me + row] = self.prob.b_in[ci];
        }
        let residual = &g_act * &*y - &b_act;
        if residual.amax() == 0.0 {
            return;
        }
        let mut gram = &g_act * g_act.transpose();
        let reg = 1e-12 * gram.diagonal().amax().max(1e-300);
        for i in 0..rows {
            gram[(i, i)] += reg;
        }
        if let Some(w) = gram.lu().solve(&residual) {
            *y -= g_act.transpose() * w;
        }
    }

    /// Residual of the unregularized active-set KKT system at `sol`.
    fn polish_residual(&self, sol: &DVector<f64>, active: &[usize], rhs: &DVector<f64>) -> DVector<f64> {
        let y = sol.rows(0, self.n).into_owned();
        let mut residual = rhs.clone();
        // top block: -f - (H y + G_eqᵀ ν + G_actᵀ μ)
        let mut top = DVector::zeros(self.n);
        top.gemv(1.0, &self.prob.h, &y, 0.0);
        if self.me > 0 {
            let nu = sol.rows(self.n, self.me).into_owned();
            top.gemv_tr(1.0, &self.prob.g_eq, &nu, 1.0);
        }
        for (row, &ci) in active.iter().enumerate() {
            let mu_i = sol[self.n + self.me + row];
            for j in 0..self.n {
                top[j] += self.prob.g_in[(ci, j)] * mu_i;
            }
        }
        for i in 0..self.n {
            residual[i] -= top[i];
        }
        if self.me > 0 {
            let mut ge_y = DVector::zeros(self.me);
            ge_y.gemv(1.0, &self.prob.g_eq, &y, 0.0);
            for i in 0..self.me {
                residual[self.n + i] -= ge_y[i];
            }
        }
        for (row, &ci) in active.iter().enumerate() {
            let mut gy = 0.0;
            for j in 0..self.n {
                gy += self.prob.g_in[(ci, j)] * y[j];
            }
            residual[self.n + self.me + row] -= gy;
        }
        residual
    }
}

fn rho_vector(rho: f64, me: usize, m: usize) -> DVector<f64> {
    DVector::from_fn(m, |i, _| if i < me { rho * RHO_EQ_FACTOR } else { rho })
}

fn factor_kkt(h_s: &DMatrix<f64>, a_s: &DMatrix<f64>, sigma: f64, rho_vec: &DVector<f64>) -> LuFact {
    let n = h_s.nrows();
    let m = a_s.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h_s);
    for i in 0..n {
        kkt[(i, i)] += sigma;
    }
    if m > 0 {
        kkt.view_mut((n, 0), (m, n)).copy_from(a_s);
        kkt.view_mut((0, n), (n, m)).copy_from(&a_s.transpose());
        for i in 0..m {
            kkt[(n + i, n + i)] = -1.0 / rho_vec[i];
        }
    }
    nalgebra::LU::new(kkt)
}

/// Modified Ruiz equilibration with cost normalization. Returns
/// `(d, e, c, H_s, f_s, A_s)` such that the scaled problem is
/// `min ½x̂ᵀ(c·DHD)x̂ + (c·Df)ᵀx̂  s.t.  (EAD)x̂ ∈ E·C`.
fn ruiz_equilibrate(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>, f64, DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = h.nrows();
    let m = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0f64;
    let mut h_s = h.clone();
    let mut f_s = f.clone();
    let mut a_s = a.clone();

    for _ in 0..RUIZ_ITERS {
        for j in 0..n {
            let mut norm = 0.0f64;
            for i in 0..n {
                norm = norm.max(h_s[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(a_s[(i, j)].abs());
            }
            let delta = if norm > 0.0 { (1.0 / norm.sqrt()).clamp(MIN_SCALING, MAX_SCALING) } else { 1.0 };
            if delta != 1.0 {
                for i in 0..n {
                    h_s[(i, j)] *= delta;
                    h_s[(j, i)] *= delta;
                }
                for i in 0..m {
                    a_s[(i, j)] *= delta;
                }
                f_s[j] *= delta;
                d[j] *= delta;
            }
        }
        for i in 0..m {
            let mut norm = 0.0f64;
            for j in 0..n {
                norm = norm.max(a_s[(i, j)].abs());
            }
            let delta = if norm > 0.0 { (1.0 / norm.sqrt()).clamp(MIN_SCALING, MAX_SCALING) } else { 1.0 };
            if delta != 1.0 {
                for j in 0..n {
                    a_s[(i, j)] *= delta;
                }
                e[i] *= delta;
            }
        }
        // cost normalization
        let mut mean_col = 0.0f64;
        for j in 0..n {
            let mut colmax = 0.0f64;
            for i in 0..n {
                colmax = colmax.max(h_s[(i, j)].abs());
            }
            mean_col += colmax;
        }
        mean_col /= n as f64;
        let denom = mean_col.max(f_s.amax());
        if denom > 0.0 {
            let gamma = (1.0 / denom).clamp(MIN_SCALING, MAX_SCALING);
            if gamma != 1.0 {
                h_s *= gamma;
                f_s *= gamma;
                c *= gamma;
            }
        }
    }
    (d, e, c, h_s, f_s, a_s)
}
