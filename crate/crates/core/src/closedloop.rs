//! Closed-loop simulation under `u = κ(x, ρ)`, the violation index
//! `g(w, ρ) = Σ_k ⟦C x_k + D u_k − h⟧`, and the ρ-sweep that computes the
//! validated bound `γ(ρ)` as the `r_ρ`-th largest sampled `g`.
//!
//! One scenario batch is drawn up front and reused for every grid point, as
//! the validation argument requires. Scenario evaluations run in parallel;
//! every reduction happens after a gather keyed by scenario index, so the
//! numbers do not depend on scheduling.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probval::{generalized_max, OrderedSample, ProbabilisticLevels};
use crate::smpc::{ControllerCache, FeasibilityChecker, InputSet, PenaltyController, SlackMode};
use crate::sysmodel::{stage_cost, ControllerDesign, LtiSystem};
use crate::tightening::TighteningProfile;
use crate::uncertainty::{
    draw_disturbance_sequence, sample_feasible_initial_state, DisturbanceModel, Scenario, ScenarioBatch, StateBox,
};

/// `⟦α⟧ = Σ_i max(0, α_i)`.
pub fn violation_measure(alpha: &DVector<f64>) -> f64 {
    alpha.iter().map(|&a| a.max(0.0)).sum()
}

/// Whether the violation index sums `k = 0..M` (with `u_M` computed but not
/// applied) or stops at `k = M-1` where every input is actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GSumMode {
    IncludeTerminal,
    ExcludeTerminal,
}

/// One simulated trajectory: `M+1` states, `M+1` inputs (the last one
/// computed for the terminal violation term but never applied), per-step
/// stage costs and violation amounts.
#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub stage_costs: Vec<f64>,
    pub violations: Vec<f64>,
    pub scenario_index: usize,
    pub rho: f64,
}

/// Simulates `x_{k+1} = A x_k + B κ(x_k, ρ) + ζ_k` for `m` steps from the
/// scenario's initial state. Deterministic given `(scenario, controller)`;
/// the cache's warm start is reset on entry so results cannot depend on what
/// the cache solved before.
pub fn simulate(
    scenario: &Scenario,
    controller: &PenaltyController,
    m: usize,
    scenario_index: usize,
    cache: &mut ControllerCache,
) -> Result<ClosedLoopTrace> {
    if scenario.disturbances.len() < m {
        return Err(Error::invalid(
            "simulate",
            format!("scenario holds {} disturbances, need {m}", scenario.disturbances.len()),
        ));
    }
    cache.reset_warm();
    let sys = &controller.sys;
    let design = &controller.design;
    let mut states = Vec::with_capacity(m + 1);
    let mut inputs = Vec::with_capacity(m + 1);
    let mut stage_costs = Vec::with_capacity(m + 1);
    let mut violations = Vec::with_capacity(m + 1);
    states.push(scenario.initial_state.clone());
    for k in 0..=m {
        let x = states[k].clone();
        let u = controller
            .kappa_with(&x, cache)
            .map_err(|e| Error::Scenario { scenario_index, source: Box::new(e) })?;
        stage_costs.push(stage_cost(&x, &u, &design.q, &design.r)?);
        violations.push(violation_measure(&(&sys.c * &x + &sys.d * &u - &sys.h)));
        if k < m {
            let next = &sys.a * &x + &sys.b * &u + &scenario.disturbances.entries[k];
            states.push(next);
        }
        inputs.push(u);
    }
    Ok(ClosedLoopTrace { states, inputs, stage_costs, violations, scenario_index, rho: controller.rho })
}

/// `g(w, ρ)`: accumulated positive-part violation along the trace.
pub fn performance_index(trace: &ClosedLoopTrace, mode: GSumMode) -> f64 {
    let upto = match mode {
        GSumMode::IncludeTerminal => trace.violations.len(),
        GSumMode::ExcludeTerminal => trace.violations.len() - 1,
    };
    trace.violations[..upto].iter().sum()
}

/// Log-equidistant grid `ρ_l = ρ_min · exp(((l-1)/(n_C-1)) ln(ρ_max/ρ_min))`
/// with the endpoints pinned exactly.
pub fn rho_grid(rho_min: f64, rho_max: f64, n_c: usize) -> Result<Vec<f64>> {
    if !(rho_min > 0.0 && rho_max > rho_min) {
        return Err(Error::invalid("rho_grid", format!("need 0 < rho_min < rho_max, got [{rho_min}, {rho_max}]")));
    }
    if n_c < 2 {
        return Err(Error::invalid("rho_grid", "grid needs at least two points"));
    }
    let log_span = (rho_max / rho_min).ln();
    let mut grid = Vec::with_capacity(n_c);
    for l in 0..n_c {
        let t = l as f64 / (n_c - 1) as f64;
        grid.push(rho_min * (t * log_span).exp());
    }
    grid[0] = rho_min;
    grid[n_c - 1] = rho_max;
    Ok(grid)
}

/// Trajectories with `g` above this count as violating for the ratio `ξ`.
pub const XI_ZERO_GUARD: f64 = 1e-9;

/// Per-grid-point sweep statistics plus the raw per-scenario data behind
/// them. The JSON summary carries only the aggregates; the raw matrices go
/// to CSV sidecars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub rho: Vec<f64>,
    pub gamma: Vec<f64>,
    pub g_avg: Vec<f64>,
    pub g_max: Vec<f64>,
    pub xi: Vec<f64>,
    pub s_rho: usize,
    pub simulation_horizon: usize,
    pub levels: ProbabilisticLevels,
    pub batch_seed: u64,
    pub batch_hash: String,
    pub g_sum_mode: GSumMode,
    /// `g_values[l][i]`: scenario `i` under grid point `l`.
    #[serde(skip)]
    pub g_values: Vec<Vec<f64>>,
    /// Terminal states `x_M`, same indexing.
    #[serde(skip)]
    pub terminal_states: Vec<Vec<Vec<f64>>>,
}

/// Draws the validation batch: initial states uniform over the tightened
/// problem's feasibility region (rejection against the state box) paired
/// with fresh length-`m` disturbance sequences.
pub fn generate_batch(
    sys: &LtiSystem,
    design: &ControllerDesign,
    profile: &TighteningProfile,
    bounding_box: &StateBox,
    model: &DisturbanceModel,
    s_rho: usize,
    m: usize,
    batch_seed: u64,
) -> Result<ScenarioBatch> {
    let model = model.clone().with_seed(batch_seed);
    let scenarios: Vec<Scenario> = (0..s_rho)
        .into_par_iter()
        .map_init(
            || FeasibilityChecker::new(sys, design, profile),
            |checker, i| -> Result<Scenario> {
                let checker = match checker {
                    Ok(c) => c,
                    Err(e) => return Err(Error::invalid("generate_batch", e.to_string())),
                };
                let initial_state = sample_feasible_initial_state(bounding_box, batch_seed, i as u64, |x| {
                    checker.is_feasible(x).unwrap_or(false)
                })?;
                let disturbances = draw_disturbance_sequence(&model, m, i as u64)?;
                Ok(Scenario { initial_state, disturbances })
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioBatch { scenarios, batch_seed })
}

/// Runs the full grid over one shared batch. Any scenario failure aborts the
/// sweep: the bound admits no censoring.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    sys: &LtiSystem,
    design: &ControllerDesign,
    profile: &TighteningProfile,
    input_set: &InputSet,
    slack_mode: SlackMode,
    batch: &ScenarioBatch,
    grid: &[f64],
    levels: &ProbabilisticLevels,
    m: usize,
    g_mode: GSumMode,
) -> Result<SweepResult> {
    if levels.multiplicity != grid.len() {
        return Err(Error::invalid(
            "sweep",
            format!("levels multiplicity {} must equal the grid size {}", levels.multiplicity, grid.len()),
        ));
    }
    let s_rho = batch.len();
    if s_rho < levels.discard {
        return Err(Error::invalid("sweep", "batch smaller than the discarding parameter"));
    }
    let mut g_values = Vec::with_capacity(grid.len());
    let mut terminal_states = Vec::with_capacity(grid.len());
    let mut gamma = Vec::with_capacity(grid.len());
    let mut g_avg = Vec::with_capacity(grid.len());
    let mut g_max = Vec::with_capacity(grid.len());
    let mut xi = Vec::with_capacity(grid.len());

    for &rho in grid {
        let controller = PenaltyController::new(
            sys.clone(),
            design.clone(),
            profile.clone(),
            input_set.clone(),
            rho,
            slack_mode,
        )?;
        let per_scenario: Vec<(f64, Vec<f64>)> = batch
            .scenarios
            .par_iter()
            .enumerate()
            .map_init(ControllerCache::default, |cache, (i, scenario)| {
                let trace = simulate(scenario, &controller, m, i, cache)?;
                let g = performance_index(&trace, g_mode);
                let x_m = trace.states[m].iter().cloned().collect::<Vec<f64>>();
                Ok((g, x_m))
            })
            .collect::<Result<Vec<_>>>()?;

        let gs: Vec<f64> = per_scenario.iter().map(|(g, _)| *g).collect();
        let sample = OrderedSample::new(gs.clone())?;
        gamma.push(generalized_max(&sample, levels.discard)?);
        g_avg.push(gs.iter().sum::<f64>() / s_rho as f64);
        g_max.push(gs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        xi.push(gs.iter().filter(|&&g| g > XI_ZERO_GUARD).count() as f64 / s_rho as f64);
        g_values.push(gs);
        terminal_states.push(per_scenario.into_iter().map(|(_, x)| x).collect());
    }

    Ok(SweepResult {
        rho: grid.to_vec(),
        gamma,
        g_avg,
        g_max,
        xi,
        s_rho,
        simulation_horizon: m,
        levels: *levels,
        batch_seed: batch.batch_seed,
        batch_hash: batch.content_hash(),
        g_sum_mode: g_mode,
        g_values,
        terminal_states,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "threshold")]
pub enum RhoPolicy {
    /// Grid point minimizing `γ(ρ)`, ties toward smaller `ρ`.
    MinGamma,
    /// Smallest grid `ρ` with `γ(ρ)` at or below the threshold.
    SmallestBelow(f64),
}

pub fn select_rho(sweep: &SweepResult, policy: RhoPolicy) -> Result<f64> {
    match policy {
        RhoPolicy::MinGamma => {
            let mut best = 0usize;
            for l in 1..sweep.rho.len() {
                if sweep.gamma[l] < sweep.gamma[best] {
                    best = l;
                }
            }
            Ok(sweep.rho[best])
        }
        RhoPolicy::SmallestBelow(threshold) => sweep
            .rho
            .iter()
            .zip(&sweep.gamma)
            .find(|(_, &g)| g <= threshold)
            .map(|(&rho, _)| rho)
            .ok_or_else(|| Error::Policy {
                message: format!(
                    "no grid point achieves gamma <= {threshold}; minimum achieved is {:.6}",
                    sweep.gamma.iter().cloned().fold(f64::INFINITY, f64::min)
                ),
            }),
    }
}

/// Convex hull of planar points by the monotone chain, vertices in
/// counterclockwise order, collinear points dropped.
pub fn terminal_hull(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if points.iter().any(|p| p.len() != 2) {
        return Err(Error::Unsupported {
            message: "terminal hull is only defined for planar (n_x = 2) systems".into(),
        });
    }
    let mut pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() <= 2 {
        return Ok(pts);
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    Ok(lower)
}

/// Shoelace area of a hull in vertex order.
pub fn hull_area(hull: &[[f64; 2]]) -> f64 {
    if hull.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..hull.len() {
        let j = (i + 1) % hull.len();
        twice += hull[i][0] * hull[j][1] - hull[j][0] * hull[i][1];
    }
    twice.abs() * 0.5
}
