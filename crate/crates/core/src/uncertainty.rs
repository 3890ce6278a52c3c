//! Disturbance models, deterministic seeded scenario generation, and
//! error-dynamics propagation `e_{ℓ+1} = A_K e_ℓ + ζ_ℓ`, `e_0 = 0`.
//!
//! Reproducibility contract: every draw is a pure function of
//! `(seed, scenario_index)`. Per-scenario streams are derived by counter-mode
//! mixing of the seed and index into a ChaCha8 key, so batches can be
//! generated in parallel in any order with bit-identical results.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const DOMAIN_DISTURBANCE: u64 = 0x6469_7374; // "dist"
const DOMAIN_INITIAL_STATE: u64 = 0x696e_6974; // "init"

fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    *state = z ^ (z >> 31);
}

/// Derives an independent ChaCha8 stream from `(seed, domain, index)`.
fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ domain.rotate_left(24) ^ index.rotate_left(48);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        splitmix64(&mut state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceKind {
    TruncatedGaussian,
    UniformBall,
    UserTable,
}

/// A per-step disturbance law together with the seed that anchors all draws.
#[derive(Debug, Clone)]
pub struct DisturbanceModel {
    pub kind: DisturbanceKind,
    pub covariance: DMatrix<f64>,
    /// Bound on `‖ζ‖²`; `f64::INFINITY` disables truncation.
    pub truncation_radius_sq: f64,
    pub seed: u64,
    dim: usize,
    /// Symmetric square root of the covariance (zero for non-Gaussian kinds).
    factor: DMatrix<f64>,
    table: Vec<DVector<f64>>,
}

impl DisturbanceModel {
    /// Gaussian with the given covariance, rejected onto
    /// `{‖ζ‖² ≤ truncation_radius_sq}`.
    pub fn truncated_gaussian(covariance: DMatrix<f64>, truncation_radius_sq: f64, seed: u64) -> Result<Self> {
        let dim = covariance.nrows();
        if covariance.ncols() != dim || dim == 0 {
            return Err(Error::invalid("DisturbanceModel", "covariance must be square and non-empty"));
        }
        if !(truncation_radius_sq >= 0.0) {
            return Err(Error::invalid("DisturbanceModel", "truncation radius squared must be >= 0"));
        }
        let factor = psd_sqrt(&covariance)?;
        // the acceptance region must carry positive probability: the mode 0
        // always lies in the ball, so any positive radius works; radius 0
        // only works for the degenerate zero law
        if truncation_radius_sq == 0.0 && factor.norm() > 0.0 {
            return Err(Error::invalid(
                "DisturbanceModel",
                "truncation radius 0 with a non-degenerate Gaussian has acceptance probability 0",
            ));
        }
        Ok(Self {
            kind: DisturbanceKind::TruncatedGaussian,
            covariance,
            truncation_radius_sq,
            seed,
            dim,
            factor,
            table: Vec::new(),
        })
    }

    /// Uniform on the ball `‖ζ‖² ≤ radius_sq`.
    pub fn uniform_ball(dim: usize, radius_sq: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("DisturbanceModel", "dimension must be >= 1"));
        }
        if !(radius_sq > 0.0) {
            return Err(Error::invalid("DisturbanceModel", "ball radius squared must be > 0"));
        }
        Ok(Self {
            kind: DisturbanceKind::UniformBall,
            covariance: DMatrix::zeros(dim, dim),
            truncation_radius_sq: radius_sq,
            seed,
            dim,
            factor: DMatrix::zeros(dim, dim),
            table: Vec::new(),
        })
    }

    /// Pre-drawn disturbance vectors; entry `t` of scenario `i` with sequence
    /// length `L` reads table row `i·L + t`. Running past the table is an
    /// error, never a wrap-around.
    pub fn user_table(table: Vec<DVector<f64>>, seed: u64) -> Result<Self> {
        let dim = table.first().map(|v| v.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("DisturbanceModel", "user table must be non-empty with n_x columns"));
        }
        if table.iter().any(|row| row.len() != dim) {
            return Err(Error::invalid("DisturbanceModel", "user table rows have inconsistent widths"));
        }
        Ok(Self {
            kind: DisturbanceKind::UserTable,
            covariance: DMatrix::zeros(dim, dim),
            truncation_radius_sq: f64::INFINITY,
            seed,
            dim,
            factor: DMatrix::zeros(dim, dim),
            table,
        })
    }

    /// Reads a user table from CSV text: one row per draw, `n_x` columns.
    pub fn user_table_from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut row = Vec::new();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::invalid(
                        "DisturbanceModel",
                        format!("user table line {}: cannot parse '{}' as a number", lineno + 1, field.trim()),
                    )
                })?;
                row.push(v);
            }
            rows.push(DVector::from_vec(row));
        }
        Self::user_table(rows, seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn draw_entry(&self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        const MAX_ATTEMPTS: usize = 1_000_000;
        match self.kind {
            DisturbanceKind::TruncatedGaussian => {
                for _ in 0..MAX_ATTEMPTS {
                    let white = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let z = &self.factor * white;
                    if z.norm_squared() <= self.truncation_radius_sq || self.factor.norm() == 0.0 {
                        return Ok(z);
                    }
                }
                Err(Error::Sampler { context: "truncated Gaussian rejection", attempts: MAX_ATTEMPTS })
            }
            DisturbanceKind::UniformBall => {
                let radius = self.truncation_radius_sq.sqrt();
                let dir = loop {
                    let white = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let norm = white.norm();
                    if norm > 1e-300 {
                        break white / norm;
                    }
                };
                let u: f64 = rng.random();
                Ok(dir * (radius * u.powf(1.0 / self.dim as f64)))
            }
            DisturbanceKind::UserTable => unreachable!("table entries are indexed, not drawn"),
        }
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-10 * scale.max(1.0) {
            return Err(Error::invalid("DisturbanceModel", format!("covariance has negative eigenvalue {v:.3e}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// A finite disturbance realization `ζ_0 … ζ_{L-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSequence {
    pub entries: Vec<DVector<f64>>,
}

impl DisturbanceSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Draws the length-`L` i.i.d. sequence for `scenario_index`. Bit-identical
/// across runs and thread schedules for fixed `(model.seed, scenario_index)`.
pub fn draw_disturbance_sequence(
    model: &DisturbanceModel,
    length: usize,
    scenario_index: u64,
) -> Result<DisturbanceSequence> {
    if length == 0 {
        return Err(Error::invalid("draw_disturbance_sequence", "length must be >= 1"));
    }
    if model.kind == DisturbanceKind::UserTable {
        let start = scenario_index as usize * length;
        let end = start + length;
        if end > model.table.len() {
            return Err(Error::invalid(
                "draw_disturbance_sequence",
                format!(
                    "user table exhausted: scenario {scenario_index} needs rows {start}..{end} but table has {}",
                    model.table.len()
                ),
            ));
        }
        return Ok(DisturbanceSequence { entries: model.table[start..end].to_vec() });
    }
    let mut rng = stream_rng(model.seed, DOMAIN_DISTURBANCE, scenario_index);
    let mut entries = Vec::with_capacity(length);
    for _ in 0..length {
        entries.push(model.draw_entry(&mut rng)?);
    }
    Ok(DisturbanceSequence { entries })
}

/// Propagates `e_0 = 0`, `e_{ℓ+1} = A_K e_ℓ + ζ_ℓ`; returns `e_0 … e_L`
/// (length `L + 1` for a length-`L` input).
pub fn propagate_error(a_k: &DMatrix<f64>, d: &DisturbanceSequence) -> Vec<DVector<f64>> {
    let n = a_k.nrows();
    let mut errors = Vec::with_capacity(d.len() + 1);
    errors.push(DVector::zeros(n));
    for zeta in &d.entries {
        let prev = errors.last().expect("at least e_0");
        errors.push(a_k * prev + zeta);
    }
    errors
}

/// One validation scenario `w = (x_0, d_M)`.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub initial_state: DVector<f64>,
    pub disturbances: DisturbanceSequence,
}

/// An i.i.d. batch of scenarios, all anchored to `batch_seed`.
#[derive(Debug, Clone)]
pub struct ScenarioBatch {
    pub scenarios: Vec<Scenario>,
    pub batch_seed: u64,
}

impl ScenarioBatch {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    /// Hash over every initial state and disturbance entry; two batches with
    /// the same hash hold bit-identical scenarios.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.batch_seed.to_le_bytes());
        for s in &self.scenarios {
            for v in s.initial_state.iter() {
                hasher.update(v.to_le_bytes());
            }
            for entry in &s.disturbances.entries {
                for v in entry.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Axis-aligned proposal box for initial states, given as per-coordinate
/// half-widths around the origin.
#[derive(Debug, Clone)]
pub struct StateBox {
    pub half_widths: Vec<f64>,
}

impl StateBox {
    pub fn new(half_widths: Vec<f64>) -> Result<Self> {
        if half_widths.is_empty() || half_widths.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("StateBox", "half-widths must be positive"));
        }
        Ok(Self { half_widths })
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.half_widths.len()
            && x.iter().zip(&self.half_widths).all(|(xi, w)| xi.abs() <= *w)
    }
}

/// Rejection-samples an initial state uniform over the feasibility region:
/// propose uniform in `bounding_box`, accept iff `is_feasible` certifies the
/// tightened problem at the proposal. Deterministic in `(seed, index)`.
pub fn sample_feasible_initial_state(
    bounding_box: &StateBox,
    seed: u64,
    index: u64,
    mut is_feasible: impl FnMut(&DVector<f64>) -> bool,
) -> Result<DVector<f64>> {
    const MAX_ATTEMPTS: usize = 1_000_000;
    let mut rng = stream_rng(seed, DOMAIN_INITIAL_STATE, index);
    let dim = bounding_box.half_widths.len();
    for _ in 0..MAX_ATTEMPTS {
        let x = DVector::from_fn(dim, |i, _| {
            let w = bounding_box.half_widths[i];
            rng.random_range(-w..=w)
        });
        if is_feasible(&x) {
            return Ok(x);
        }
    }
    Err(Error::Sampler { context: "feasible initial state rejection", attempts: MAX_ATTEMPTS })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(scale: f64, radius_sq: f64, seed: u64) -> DisturbanceModel {
        DisturbanceModel::truncated_gaussian(DMatrix::identity(2, 2) * scale * scale, radius_sq, seed).unwrap()
    }

    #[test]
    fn truncated_draws_respect_support() {
        // study-scale law: sigma = 0.04, bound 0.02 (~3.5 sigma radius);
        // every one of 1e6 draws must satisfy the bound
        let model = gaussian(0.04, 0.02, 7);
        let seq = draw_disturbance_sequence(&model, 1_000_000, 0).unwrap();
        assert!(seq.entries.iter().all(|z| z.norm_squared() <= 0.02));
    }

    #[test]
    fn degenerate_covariance_draws_zero() {
        let model = DisturbanceModel::truncated_gaussian(DMatrix::zeros(2, 2), 0.0, 3).unwrap();
        let seq = draw_disturbance_sequence(&model, 5, 0).unwrap();
        for z in &seq.entries {
            assert_eq!(z, &DVector::zeros(2));
        }
    }

    #[test]
    fn truncated_variance_matches_analytic_oracle() {
        // For an isotropic 2-D Gaussian, r^2 ~ Exp(mean 2 sigma^2); truncating
        // at c = R^2 gives E[r^2 | r^2 <= c] = m - c e^{-c/m} / (1 - e^{-c/m})
        // and the per-coordinate variance is half of that.
        let sigma = 0.04;
        let c: f64 = 0.02;
        let m = 2.0 * sigma * sigma;
        let expected = (m - c * (-c / m).exp() / (1.0 - (-c / m).exp())) / 2.0;

        let model = gaussian(sigma, c, 99);
        let n = 100_000usize;
        let seq = draw_disturbance_sequence(&model, n, 0).unwrap();
        let mut sum_sq = [0.0f64; 2];
        for z in &seq.entries {
            sum_sq[0] += z[0] * z[0];
            sum_sq[1] += z[1] * z[1];
        }
        // 3-sigma band of the variance estimator (~ sigma^2 sqrt(2/n))
        let tol = 3.0 * expected * (2.0 / n as f64).sqrt();
        for s in sum_sq {
            let sample_var = s / n as f64;
            assert!(
                (sample_var - expected).abs() <= tol,
                "sample variance {sample_var:.6e} vs {expected:.6e} (tol {tol:.2e})"
            );
        }
    }

    #[test]
    fn draws_are_deterministic_per_index() {
        let model = gaussian(0.04, 0.02, 42);
        let a = draw_disturbance_sequence(&model, 10, 3).unwrap();
        let b = draw_disturbance_sequence(&model, 10, 3).unwrap();
        assert_eq!(a, b);
        let c = draw_disturbance_sequence(&model, 10, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_ball_stays_inside() {
        let model = DisturbanceModel::uniform_ball(3, 0.25, 11).unwrap();
        let seq = draw_disturbance_sequence(&model, 1000, 0).unwrap();
        for z in &seq.entries {
            assert!(z.norm_squared() <= 0.25 + 1e-15);
        }
    }

    #[test]
    fn user_table_is_indexed_and_bounded() {
        let table = vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![3.0, 4.0]),
            DVector::from_vec(vec![5.0, 6.0]),
            DVector::from_vec(vec![7.0, 8.0]),
        ];
        let model = DisturbanceModel::user_table(table, 0).unwrap();
        let seq = draw_disturbance_sequence(&model, 2, 1).unwrap();
        assert_eq!(seq.entries[0], DVector::from_vec(vec![5.0, 6.0]));
        assert!(draw_disturbance_sequence(&model, 2, 2).is_err());
    }

    #[test]
    fn user_table_csv_parses_and_reports_bad_lines() {
        let model = DisturbanceModel::user_table_from_csv("0.1, 0.2\n-0.3,0.4\n", 0).unwrap();
        assert_eq!(model.table.len(), 2);
        let err = DisturbanceModel::user_table_from_csv("0.1, oops\n", 0).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn propagation_starts_at_zero() {
        let a_k = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.2]);
        let d = DisturbanceSequence {
            entries: vec![DVector::from_vec(vec![1.0, -1.0])],
        };
        let e = propagate_error(&a_k, &d);
        assert_eq!(e[0], DVector::zeros(2));
        assert_eq!(e.len(), 2);
    }

    #[test]
    fn propagation_memoryless_when_ak_zero() {
        let a_k = DMatrix::zeros(2, 2);
        let d = DisturbanceSequence {
            entries: vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![-3.0, 4.0])],
        };
        let e = propagate_error(&a_k, &d);
        assert_eq!(e[1], d.entries[0]);
        assert_eq!(e[2], d.entries[1]);
    }

    #[test]
    fn propagation_scalar_geometric() {
        let a_k = DMatrix::from_element(1, 1, 0.5);
        let d = DisturbanceSequence {
            entries: vec![DVector::from_element(1, 1.0); 4],
        };
        let e = propagate_error(&a_k, &d);
        let expected = [0.0, 1.0, 1.5, 1.75, 1.875];
        for (ei, want) in e.iter().zip(expected) {
            assert!((ei[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn propagation_is_linear() {
        let a_k = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.5, 0.7]);
        let m1 = gaussian(1.0, f64::INFINITY, 1);
        let d1 = draw_disturbance_sequence(&m1, 6, 0).unwrap();
        let d2 = draw_disturbance_sequence(&m1, 6, 1).unwrap();
        let summed = DisturbanceSequence {
            entries: d1.entries.iter().zip(&d2.entries).map(|(a, b)| a + b).collect(),
        };
        let e1 = propagate_error(&a_k, &d1);
        let e2 = propagate_error(&a_k, &d2);
        let es = propagate_error(&a_k, &summed);
        for ((a, b), s) in e1.iter().zip(&e2).zip(&es) {
            assert!(((a + b) - s).norm() < 1e-12);
        }
    }

    #[test]
    fn initial_state_sampler_accepts_origin_region() {
        let bbox = StateBox::new(vec![2.0, 3.0]).unwrap();
        // acceptance region: a small ball around the origin
        let x = sample_feasible_initial_state(&bbox, 5, 0, |x| x.norm() < 0.5).unwrap();
        assert!(x.norm() < 0.5);
        assert!(bbox.contains(&x));
    }

    #[test]
    fn initial_state_sampler_is_deterministic() {
        let bbox = StateBox::new(vec![2.0, 3.0]).unwrap();
        let a = sample_feasible_initial_state(&bbox, 5, 7, |_| true).unwrap();
        let b = sample_feasible_initial_state(&bbox, 5, 7, |_| true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initial_state_sampler_never_proposes_outside_box() {
        let bbox = StateBox::new(vec![1.0, 1.0]).unwrap();
        for i in 0..50 {
            let x = sample_feasible_initial_state(&bbox, 9, i, |_| true).unwrap();
            assert!(bbox.contains(&x));
        }
    }

    #[test]
    fn initial_state_sampler_errors_when_nothing_accepted() {
        let bbox = StateBox::new(vec![1.0]).unwrap();
        let err = sample_feasible_initial_state(&bbox, 1, 0, |_| false);
        assert!(matches!(err, Err(Error::Sampler { .. })));
    }
}
