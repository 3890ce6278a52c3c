//! The offline tightening pipeline: draw `S_q` disturbance scenarios,
//! propagate the error dynamics, and set
//!
//! `q_{ℓ,j} = maxgen({C_{K,j} e_ℓ(ζ⁽ⁱ⁾)}, r_q)`
//!
//! for every step `ℓ` and constraint row `j`. With `S_q` from the
//! closed-form sample bound at multiplicity `n_h·N`, the whole matrix
//! over-bounds fresh disturbances row-wise at level `ε_q` with confidence
//! `1 - δ_q`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probval::{sample_complexity, select_rth_largest, ProbabilisticLevels};
use crate::sysmodel::{ControllerDesign, LtiSystem};
use crate::uncertainty::{draw_disturbance_sequence, propagate_error, DisturbanceModel};

/// The per-step tightening vectors `q_ℓ`, row `ℓ` of `q` being the step-`ℓ`
/// vector over the `n_h` constraint rows. Row 0 is identically zero because
/// `e_0 = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TighteningProfile {
    /// `N × n_h` matrix as nested rows.
    pub q: Vec<Vec<f64>>,
    pub levels: ProbabilisticLevels,
    pub sample_count: u64,
    pub seed: u64,
    /// Content hash over `(q, levels, sample_count, seed)`.
    pub hash: String,
}

impl TighteningProfile {
    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn rows(&self) -> usize {
        self.q.first().map(Vec::len).unwrap_or(0)
    }

    pub fn q_at(&self, step: usize) -> DVector<f64> {
        DVector::from_vec(self.q[step].clone())
    }

    /// Max over steps per constraint row, the summary the reports print.
    pub fn max_over_steps(&self) -> Vec<f64> {
        let n_h = self.rows();
        let mut out = vec![0.0f64; n_h];
        for row in &self.q {
            for (j, &v) in row.iter().enumerate() {
                out[j] = out[j].max(v);
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let profile: TighteningProfile = serde_json::from_str(text).map_err(|e| Error::Json {
            path: "tightening profile".into(),
            source: e,
        })?;
        let expected = profile_hash(&profile.q, &profile.levels, profile.sample_count, profile.seed);
        if expected != profile.hash {
            return Err(Error::invalid(
                "TighteningProfile",
                format!("content hash mismatch: stored {}, computed {expected}", profile.hash),
            ));
        }
        Ok(profile)
    }
}

fn profile_hash(q: &[Vec<f64>], levels: &ProbabilisticLevels, sample_count: u64, seed: u64) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for row in q {
        for v in row {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.update(levels.epsilon.to_le_bytes());
    hasher.update(levels.delta.to_le_bytes());
    hasher.update((levels.discard as u64).to_le_bytes());
    hasher.update((levels.multiplicity as u64).to_le_bytes());
    hasher.update(sample_count.to_le_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the sampling design. `levels.multiplicity` must equal `n_h·N`; the
/// sample count is the closed-form bound at those levels. Deterministic for
/// fixed `(model.seed, levels)`.
pub fn compute_tightening(
    sys: &LtiSystem,
    design: &ControllerDesign,
    model: &DisturbanceModel,
    levels: &ProbabilisticLevels,
) -> Result<TighteningProfile> {
    let n_h = sys.constraint_rows();
    let n = design.horizon;
    if levels.multiplicity != n_h * n {
        return Err(Error::invalid(
            "compute_tightening",
            format!("multiplicity {} must equal n_h*N = {}", levels.multiplicity, n_h * n),
        ));
    }
    if model.dim() != sys.state_dim() {
        return Err(Error::invalid("compute_tightening", "disturbance dimension does not match the state"));
    }
    let s_q = sample_complexity(levels);
    let a_k = design.closed_loop(sys);

    // scores[l-1][j][i]: C_{K,j} e_l for sample i; step 0 is skipped (e_0 = 0)
    let mut scores = vec![vec![vec![0.0f64; s_q as usize]; n_h]; n.saturating_sub(1)];
    for i in 0..s_q {
        let seq = draw_disturbance_sequence(model, n.max(2) - 1, i)?;
        let errors = propagate_error(&a_k, &seq);
        for l in 1..n {
            let ck_e = &design.c_k * &errors[l];
            for j in 0..n_h {
                scores[l - 1][j][i as usize] = ck_e[j];
            }
        }
    }

    let r = levels.discard;
    let mut q = vec![vec![0.0f64; n_h]];
    for l in 1..n {
        let mut row = Vec::with_capacity(n_h);
        for j in 0..n_h {
            row.push(select_rth_largest(&mut scores[l - 1][j], r)?);
        }
        q.push(row);
    }

    // the tightened set must keep an interior
    for (l, row) in q.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let slack = sys.h[j] - v;
            if !(slack > 0.0) {
                return Err(Error::InteriorLoss { step: l, row: j, slack });
            }
        }
    }

    let hash = profile_hash(&q, levels, s_q, model.seed);
    Ok(TighteningProfile {
        q,
        levels: *levels,
        sample_count: s_q,
        seed: model.seed,
        hash,
    })
}

/// Empirical check of a profile on held-out samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Empirical `P{C_{K,j} e_ℓ > q_{ℓ,j}}` per step and row.
    pub frequency: Vec<Vec<f64>>,
    pub samples: u64,
    /// Cells whose frequency exceeds `ε + 3·sqrt(ε(1-ε)/S_val)`.
    pub flagged: Vec<(usize, usize, f64)>,
    pub threshold: f64,
}

/// Re-draws `s_val` fresh scenarios (disjoint seed) and reports per-cell
/// violation frequencies against the profile.
pub fn validate_tightening(
    profile: &TighteningProfile,
    sys: &LtiSystem,
    design: &ControllerDesign,
    model: &DisturbanceModel,
    s_val: u64,
    fresh_seed: u64,
) -> Result<ValidationReport> {
    let n = profile.horizon();
    let n_h = profile.rows();
    if n != design.horizon || n_h != sys.constraint_rows() {
        return Err(Error::invalid("validate_tightening", "profile shape does not match the system/design"));
    }
    let fresh_model = model.clone().with_seed(fresh_seed);
    let a_k = design.closed_loop(sys);
    let mut counts = vec![vec![0u64; n_h]; n];
    for i in 0..s_val {
        let seq = draw_disturbance_sequence(&fresh_model, n.max(2) - 1, i)?;
        let errors = propagate_error(&a_k, &seq);
        for l in 0..n {
            let ck_e = &design.c_k * &errors[l];
            for j in 0..n_h {
                if ck_e[j] > profile.q[l][j] {
                    counts[l][j] += 1;
                }
            }
        }
    }
    let eps = profile.levels.epsilon;
    let threshold = eps + 3.0 * (eps * (1.0 - eps) / s_val as f64).sqrt();
    let frequency: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / s_val as f64).collect())
        .collect();
    let mut flagged = Vec::new();
    for (l, row) in frequency.iter().enumerate() {
        for (j, &fr) in row.iter().enumerate() {
            if fr > threshold {
                flagged.push((l, j, fr));
            }
        }
    }
    Ok(ValidationReport { frequency, samples: s_val, flagged, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use crate::sysmodel::example_system;

    fn study_setup() -> (LtiSystem, ControllerDesign, DisturbanceModel, ProbabilisticLevels) {
        let sys = example_system();
        let q = DMatrix::from_partial_diagonal(2, 2, &[1.0, 10.0]);
        let r = DMatrix::from_element(1, 1, 1.0);
        let design = ControllerDesign::from_dlqr(&sys, q, r, 8).unwrap();
        // the covariance scale that reproduces the study's printed profile
        let model = DisturbanceModel::truncated_gaussian(DMatrix::identity(2, 2) * 0.002 * 0.002, 0.02, 42).unwrap();
        let levels = ProbabilisticLevels::new(0.05, 1e-6, 60, 48).unwrap();
        (sys, design, model, levels)
    }

    #[test]
    fn first_step_row_is_exactly_zero() {
        let (sys, design, model, levels) = study_setup();
        let profile = compute_tightening(&sys, &design, &model, &levels).unwrap();
        assert_eq!(profile.sample_count, 2448);
        assert!(profile.q[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_made_samples_reproduce_maxgen() {
        // scalar system, A_K = 0 so e_1 = zeta_0; three crafted samples with
        // r = 1 give q_{1,1} = max{0.1, -0.2, 0.05} = 0.1
        let sys = LtiSystem::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let design = ControllerDesign::with_gain(
            &sys,
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            2,
        )
        .unwrap();
        let table: Vec<DVector<f64>> = [0.1, -0.2, 0.05]
            .iter()
            .map(|&v| DVector::from_element(1, v))
            .collect();
        let model = DisturbanceModel::user_table(table, 0).unwrap();
        // levels chosen so the sample bound is exactly 3
        let levels = ProbabilisticLevels::new(0.3, 0.9, 1, 2).unwrap();
        assert_eq!(sample_complexity(&levels), 3);
        let profile = compute_tightening(&sys, &design, &model, &levels).unwrap();
        assert_eq!(profile.q[0], vec![0.0]);
        assert!((profile.q[1][0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn matches_full_sort_oracle_on_small_samples() {
        let (sys, design, _, _) = study_setup();
        // small synthetic sample set via user table: 7 scenarios, horizon 3
        let mut rows = Vec::new();
        let probe = DisturbanceModel::truncated_gaussian(DMatrix::identity(2, 2) * 0.01, f64::INFINITY, 5).unwrap();
        for i in 0..7 {
            let seq = draw_disturbance_sequence(&probe, 2, i).unwrap();
            rows.extend(seq.entries);
        }
        let model = DisturbanceModel::user_table(rows.clone(), 0).unwrap();
        let design3 = ControllerDesign::with_gain(&sys, design.q.clone(), design.r.clone(), design.gain.clone(), 3).unwrap();
        let levels = ProbabilisticLevels::new(0.9999, 0.8856, 2, 18).unwrap();
        assert_eq!(sample_complexity(&levels), 7);
        let profile = compute_tightening(&sys, &design3, &model, &levels).unwrap();

        let a_k = design3.closed_loop(&sys);
        for l in 1..3 {
            for j in 0..6 {
                let mut vals: Vec<f64> = (0..7)
                    .map(|i| {
                        let seq = crate::uncertainty::DisturbanceSequence {
                            entries: rows[i * 2..i * 2 + 2].to_vec(),
                        };
                        let e = propagate_error(&a_k, &seq);
                        (&design3.c_k * &e[l])[j]
                    })
                    .collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                assert!((profile.q[l][j] - vals[1]).abs() < 1e-15, "l={l} j={j}");
            }
        }
    }

    #[test]
    fn discarding_more_never_raises_q() {
        let (sys, design, model, _) = study_setup();
        let n_h = sys.constraint_rows();
        let mult = n_h * design.horizon;
        let low = ProbabilisticLevels::new(0.05, 1e-6, 60, mult).unwrap();
        let profile_low = compute_tightening(&sys, &design, &model, &low).unwrap();
        let s_q = profile_low.sample_count;
        let a_k = design.closed_loop(&sys);
        // same samples, larger discard: every q entry must be <= (step 1 only,
        // the full matrix repeats the same argument)
        for r_hi in [80usize, 120] {
            for j in 0..n_h {
                let mut vals: Vec<f64> = (0..s_q)
                    .map(|i| {
                        let seq = draw_disturbance_sequence(&model, design.horizon - 1, i).unwrap();
                        let e = propagate_error(&a_k, &seq);
                        (&design.c_k * &e[1])[j]
                    })
                    .collect();
                let hi = select_rth_largest(&mut vals, r_hi).unwrap();
                assert!(hi <= profile_low.q[1][j] + 1e-15);
            }
        }
    }

    #[test]
    fn interior_loss_is_an_error() {
        let (sys, design, _, _) = study_setup();
        // a disturbance so large the tightening eats the whole constraint set
        let model = DisturbanceModel::truncated_gaussian(DMatrix::identity(2, 2) * 4.0, f64::INFINITY, 1).unwrap();
        let levels = ProbabilisticLevels::new(0.05, 1e-6, 60, 48).unwrap();
        let err = compute_tightening(&sys, &design, &model, &levels).unwrap_err();
        assert!(matches!(err, Error::InteriorLoss { .. }), "got {err}");
    }

    #[test]
    fn validation_flags_nothing_for_infinite_q() {
        let (sys, design, model, levels) = study_setup();
        let mut profile = compute_tightening(&sys, &design, &model, &levels).unwrap();
        for row in &mut profile.q {
            for v in row.iter_mut() {
                *v = f64::INFINITY;
            }
        }
        let report = validate_tightening(&profile, &sys, &design, &model, 2000, 777).unwrap();
        assert!(report.flagged.is_empty());
        assert!(report.frequency.iter().flatten().all(|&f| f == 0.0));
    }

    #[test]
    fn validation_flags_everything_for_neg_infinite_q() {
        let (sys, design, model, levels) = study_setup();
        let mut profile = compute_tightening(&sys, &design, &model, &levels).unwrap();
        for row in &mut profile.q {
            for v in row.iter_mut() {
                *v = f64::NEG_INFINITY;
            }
        }
        let report = validate_tightening(&profile, &sys, &design, &model, 500, 778).unwrap();
        assert!(report.frequency.iter().flatten().all(|&f| f == 1.0));
        assert_eq!(report.flagged.len(), 8 * 6);
    }

    #[test]
    fn held_out_frequencies_within_band() {
        let (sys, design, model, levels) = study_setup();
        let profile = compute_tightening(&sys, &design, &model, &levels).unwrap();
        let report = validate_tightening(&profile, &sys, &design, &model, 20_000, 999).unwrap();
        assert!(report.flagged.is_empty(), "flagged cells: {:?}", report.flagged);
    }

    #[test]
    fn profile_json_round_trip_checks_hash() {
        let (sys, design, model, levels) = study_setup();
        let profile = compute_tightening(&sys, &design, &model, &levels).unwrap();
        let text = profile.to_json();
        let back = TighteningProfile::from_json(&text).unwrap();
        assert_eq!(back.q, profile.q);
        let tampered = text.replace("0.05", "0.06");
        assert!(TighteningProfile::from_json(&tampered).is_err());
    }
}

