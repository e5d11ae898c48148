//! LTI plant models, the steady-state local Kalman filter, characteristic
//! parameters of the AoI cost function, and random plant generation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::AoiFunction;
use crate::linalg::{
    congruence, controllability_matrix, ensure_finite, ensure_square, max_abs_diff, min_sym_eigenvalue, numeric_rank,
    observability_matrix, spectral_radius, sym_sqrt, symmetrize,
};

/// Riccati fixed-point tolerance (max-abs change between iterates).
pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITERS: usize = 100_000;

/// Number of AoI values whose covariance trace is tabulated per sensor.
pub const TRACE_TABLE_LEN: usize = 256;

/// One sensor's plant `x+ = A x + w`, `y = C x + v` and its channel success
/// probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlant", into = "RawPlant")]
pub struct PlantModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: f64,
}

/// Row-major JSON shape of a plant.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawPlant {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    p: f64,
}

pub fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Dimension(format!("{what} is empty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl TryFrom<RawPlant> for PlantModel {
    type Error = Error;

    fn try_from(raw: RawPlant) -> Result<Self> {
        PlantModel::new(
            matrix_from_rows(&raw.a, "A")?,
            matrix_from_rows(&raw.c, "C")?,
            matrix_from_rows(&raw.q, "Q")?,
            matrix_from_rows(&raw.r, "R")?,
            raw.p,
        )
    }
}

impl From<PlantModel> for RawPlant {
    fn from(p: PlantModel) -> Self {
        RawPlant {
            a: matrix_to_rows(&p.a),
            c: matrix_to_rows(&p.c),
            q: matrix_to_rows(&p.q),
            r: matrix_to_rows(&p.r),
            p: p.p,
        }
    }
}

fn check_spd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    let scale = m.amax().max(1.0);
    if max_abs_diff(m, &m.transpose()) > 1e-9 * scale {
        return Err(Error::Assumption(format!("{what} is not symmetric")));
    }
    if min_sym_eigenvalue(m) <= 0.0 {
        return Err(Error::Assumption(format!("{what} is not positive definite")));
    }
    Ok(())
}

impl PlantModel {
    /// Builds a plant and checks every modelling assumption: shapes, finite
    /// entries, `p` in (0, 1], symmetric positive-definite noise covariances,
    /// `rho(A) > 1`, observability of `(A, C)` and controllability of
    /// `(A, sqrt(Q))`.
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>, p: f64) -> Result<Self> {
        ensure_square(&a, "A")?;
        ensure_square(&q, "Q")?;
        ensure_square(&r, "R")?;
        let n = a.nrows();
        if c.ncols() != n || q.nrows() != n || r.nrows() != c.nrows() {
            return Err(Error::Dimension(format!(
                "A is {n}x{n}, C is {}x{}, Q is {}x{}, R is {}x{}",
                c.nrows(),
                c.ncols(),
                q.nrows(),
                q.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        ensure_finite(&a, "A")?;
        ensure_finite(&c, "C")?;
        ensure_finite(&q, "Q")?;
        ensure_finite(&r, "R")?;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!("success probability {p} not in (0, 1]")));
        }
        check_spd(&q, "Q")?;
        check_spd(&r, "R")?;
        let rho = spectral_radius(&a)?;
        if rho <= 1.0 {
            return Err(Error::Assumption(format!("spectral radius {rho} is not above 1")));
        }
        if numeric_rank(&observability_matrix(&a, &c)) < n {
            return Err(Error::Assumption("(A, C) is not observable".into()));
        }
        if numeric_rank(&controllability_matrix(&a, &sym_sqrt(&q))) < n {
            return Err(Error::Assumption("(A, sqrt(Q)) is not controllable".into()));
        }
        Ok(Self { a, c, q, r, p })
    }

    /// One-dimensional plant.
    pub fn scalar(a: f64, c: f64, q: f64, r: f64, p: f64) -> Result<Self> {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(c), m(q), m(r), p)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    /// Same dynamics with a different channel.
    pub fn with_p(&self, p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!("success probability {p} not in (0, 1]")));
        }
        Ok(Self { p, ..self.clone() })
    }
}

/// Converged local Kalman filter.
#[derive(Clone, Debug, PartialEq)]
pub struct SteadyStateFilter {
    /// Posterior covariance `P(t|t)` at the fixed point.
    pub p_bar: DMatrix<f64>,
    /// Prior covariance `P(t|t-1)` at the fixed point.
    pub p_prior: DMatrix<f64>,
    pub k_bar: DMatrix<f64>,
    pub iterations: usize,
}

/// One prior/gain/posterior step of the filter Riccati map.
pub fn riccati_step(plant: &PlantModel, posterior: &DMatrix<f64>) -> Result<SteadyStateFilter> {
    let prior = symmetrize(&(congruence(&plant.a, posterior) + &plant.q));
    let innovation = congruence(&plant.c, &prior) + &plant.r;
    let inv = innovation.clone().cholesky().map(|ch| ch.inverse()).ok_or(Error::NonFinite("innovation covariance"))?;
    let gain = &prior * plant.c.transpose() * inv;
    let post = symmetrize(&(&prior - &gain * &plant.c * &prior));
    Ok(SteadyStateFilter { p_bar: post, p_prior: prior, k_bar: gain, iterations: 1 })
}

/// Iterates the Riccati map from `P(0|0) = Q` until successive posteriors
/// differ by less than `tol` in max-abs norm.
pub fn steady_state_filter(plant: &PlantModel, tol: f64, max_iters: usize) -> Result<SteadyStateFilter> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance {tol} must be positive")));
    }
    let mut posterior = plant.q.clone();
    let mut last_change = f64::INFINITY;
    for it in 1..=max_iters {
        let step = riccati_step(plant, &posterior)?;
        last_change = max_abs_diff(&step.p_bar, &posterior);
        if !last_change.is_finite() {
            break;
        }
        posterior = step.p_bar.clone();
        if last_change < tol {
            return Ok(SteadyStateFilter { iterations: it, ..step });
        }
    }
    Err(Error::NoConvergence { iterations: max_iters, last_change })
}

/// Parameters `(alpha, beta)` of the AoI cost `f(d) = beta * alpha^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharParams {
    pub alpha: f64,
    pub beta: f64,
}

/// `alpha = rho(A)^2`, `beta = max(Tr(A P A^T) / alpha, Tr(Q))`.
pub fn characteristic_params(plant: &PlantModel, ss: &SteadyStateFilter) -> Result<CharParams> {
    let rho = spectral_radius(&plant.a)?;
    if rho <= 1.0 {
        return Err(Error::Assumption(format!("spectral radius {rho} is not above 1")));
    }
    let alpha = rho * rho;
    let propagated = congruence(&plant.a, &ss.p_bar).trace();
    let beta = (propagated / alpha).max(plant.q.trace());
    Ok(CharParams { alpha, beta })
}

/// Remote error covariance after `delta` steps since the last delivered
/// local estimate: `P(1) = A P A^T + Q`, `P(d) = A P(d-1) A^T + Q`.
pub fn error_cov_from_aoi(plant: &PlantModel, ss: &SteadyStateFilter, delta: u32) -> Result<DMatrix<f64>> {
    if delta == 0 {
        return Err(Error::Domain("AoI must be at least 1".into()));
    }
    let mut p = ss.p_bar.clone();
    for _ in 0..delta {
        p = congruence(&plant.a, &p) + &plant.q;
    }
    Ok(p)
}

/// `sum_{k=1..delta} beta * alpha^k`.
pub fn scalar_error_bound(cp: CharParams, delta: u32) -> Result<f64> {
    if !(cp.alpha > 1.0) {
        return Err(Error::Domain(format!("alpha {} must exceed 1", cp.alpha)));
    }
    let a = cp.alpha;
    Ok(cp.beta * a * (a.powf(delta as f64) - 1.0) / (a - 1.0))
}

/// How the dynamics matrix of a generated plant is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dynamics {
    /// I.i.d. standard normal entries rescaled to the target spectral radius.
    #[default]
    Gaussian,
    /// Random orthogonal similarity of scaled rotation blocks, so `A` is a
    /// normal matrix and `||A^k|| = rho^k`.
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    pub n: usize,
    pub m: usize,
    pub rho_range: (f64, f64),
    pub p_range: (f64, f64),
    pub dynamics: Dynamics,
    /// Required slack in `rho^2 (1 - p) <= 1 - margin`.
    pub stability_margin: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            n: 3,
            m: 3,
            rho_range: (1.05, 1.3),
            p_range: (0.6, 1.0),
            dynamics: Dynamics::Gaussian,
            stability_margin: 0.05,
        }
    }
}

const GENERATION_ATTEMPTS: usize = 1000;
const NOISE_FLOOR: f64 = 1e-3;

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, n, n);
    symmetrize(&(&g * g.transpose() + DMatrix::identity(n, n) * NOISE_FLOOR))
}

fn normal_dynamics<R: Rng + ?Sized>(rng: &mut R, n: usize, rho: f64) -> DMatrix<f64> {
    let mut block = DMatrix::zeros(n, n);
    let mut i = 0;
    let mut first = true;
    while i < n {
        let radius = if first { rho } else { rho * rng.random_range(0.2..1.0) };
        first = false;
        if i + 1 < n && rng.random_bool(0.5) {
            let theta: f64 = rng.random_range(0.1..std::f64::consts::PI - 0.1);
            let (s, c) = theta.sin_cos();
            block[(i, i)] = radius * c;
            block[(i, i + 1)] = -radius * s;
            block[(i + 1, i)] = radius * s;
            block[(i + 1, i + 1)] = radius * c;
            i += 2;
        } else {
            block[(i, i)] = if rng.random_bool(0.5) { radius } else { -radius };
            i += 1;
        }
    }
    let basis = gaussian_matrix(rng, n, n).qr().q();
    &basis * block * basis.transpose()
}

fn validate_spec(spec: &PlantSpec) -> Result<()> {
    let (lo, hi) = spec.rho_range;
    if spec.n == 0 || spec.m == 0 {
        return Err(Error::Domain("plant dimensions must be positive".into()));
    }
    if !(lo > 1.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::Domain(format!("spectral radius range ({lo}, {hi}) must lie strictly above 1")));
    }
    let (plo, phi) = spec.p_range;
    if !(plo > 0.0 && phi <= 1.0 && plo <= phi) {
        return Err(Error::Domain(format!("success probability range ({plo}, {phi}) invalid")));
    }
    if !(0.0..1.0).contains(&spec.stability_margin) {
        return Err(Error::Domain("stability margin must lie in [0, 1)".into()));
    }
    Ok(())
}

/// Rejection-samples a plant satisfying every [`PlantModel`] assumption with
/// `rho(A)` in the requested range and `rho^2 (1 - p) <= 1 - margin`.
pub fn generate_plant<R: Rng + ?Sized>(spec: &PlantSpec, rng: &mut R) -> Result<PlantModel> {
    validate_spec(spec)?;
    let (lo, hi) = spec.rho_range;
    let mut reason = String::from("no attempt made");
    for _ in 0..GENERATION_ATTEMPTS {
        let target = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let a = match spec.dynamics {
            Dynamics::Gaussian => {
                let raw = gaussian_matrix(rng, spec.n, spec.n);
                let rho = spectral_radius(&raw)?;
                if rho < 1e-6 {
                    reason = "degenerate dynamics sample".into();
                    continue;
                }
                raw * (target / rho)
            }
            Dynamics::Normal => normal_dynamics(rng, spec.n, target),
        };
        let c = gaussian_matrix(rng, spec.m, spec.n);
        let q = random_spd(rng, spec.n);
        let r = random_spd(rng, spec.m);

        let alpha = target * target;
        let p_min = (1.0 - (1.0 - spec.stability_margin) / alpha).max(spec.p_range.0);
        if p_min > spec.p_range.1 {
            return Err(Error::Generation {
                attempts: 0,
                reason: format!("no p in {:?} keeps rho^2 (1 - p) below 1 for rho = {target}", spec.p_range),
            });
        }
        let p = if spec.p_range.1 > p_min { rng.random_range(p_min..=spec.p_range.1) } else { p_min };

        match PlantModel::new(a, c, q, r, p) {
            Ok(plant) => match steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS) {
                Ok(_) => return Ok(plant),
                Err(e) => reason = e.to_string(),
            },
            Err(e) => reason = e.to_string(),
        }
    }
    Err(Error::Generation { attempts: GENERATION_ATTEMPTS, reason })
}

/// `count` plants from one seeded stream.
pub fn generate_ensemble(spec: &PlantSpec, count: usize, seed: u64) -> Result<Vec<PlantModel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_plant(spec, &mut rng)).collect()
}

/// Current version of the ensemble file layout.
pub const ENSEMBLE_SCHEMA_VERSION: u32 = 1;

/// On-disk plant ensemble: `{"schema_version":1,"plants":[...]}`. The version
/// field may be omitted when reading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    #[serde(default = "ensemble_version")]
    pub schema_version: u32,
    pub plants: Vec<PlantModel>,
}

fn ensemble_version() -> u32 {
    ENSEMBLE_SCHEMA_VERSION
}

impl Ensemble {
    pub fn new(plants: Vec<PlantModel>) -> Self {
        Self { schema_version: ENSEMBLE_SCHEMA_VERSION, plants }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ens: Self = serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        if ens.schema_version != ENSEMBLE_SCHEMA_VERSION {
            return Err(Error::Serialization(format!("unsupported schema_version {}", ens.schema_version)));
        }
        if ens.plants.is_empty() {
            return Err(Error::Domain("ensemble has no plants".into()));
        }
        Ok(ens)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plant serialization cannot fail")
    }

    pub fn sensors(&self) -> Result<Vec<SensorModel>> {
        self.plants.iter().cloned().map(SensorModel::new).collect()
    }
}

/// A plant together with everything derived from it that schedulers and the
/// simulator need: the converged filter, the AoI cost parameters and a table
/// of `Tr(P(d))`.
#[derive(Clone, Debug)]
pub struct SensorModel {
    pub plant: PlantModel,
    pub filter: SteadyStateFilter,
    pub params: CharParams,
    trace_table: Vec<f64>,
    tail_ratio: f64,
}

impl SensorModel {
    pub fn new(plant: PlantModel) -> Result<Self> {
        let filter = steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS)?;
        let params = characteristic_params(&plant, &filter)?;
        let mut trace_table = Vec::with_capacity(TRACE_TABLE_LEN);
        let mut p = filter.p_bar.clone();
        for _ in 0..TRACE_TABLE_LEN {
            p = congruence(&plant.a, &p) + &plant.q;
            trace_table.push(p.trace());
        }
        let tail_ratio = trace_table[TRACE_TABLE_LEN - 1] / trace_table[TRACE_TABLE_LEN - 2];
        Ok(Self { plant, filter, params, trace_table, tail_ratio })
    }

    pub fn p(&self) -> f64 {
        self.plant.p
    }

    pub fn aoi_function(&self) -> AoiFunction {
        AoiFunction { alpha: self.params.alpha, beta: self.params.beta, p: self.plant.p }
    }

    /// `Tr(P(delta))`; beyond the table the last growth ratio is extrapolated.
    pub fn trace_at(&self, delta: u32) -> f64 {
        let d = delta.max(1) as usize;
        if d <= TRACE_TABLE_LEN {
            self.trace_table[d - 1]
        } else {
            let extra = (d - TRACE_TABLE_LEN) as f64;
            self.trace_table[TRACE_TABLE_LEN - 1] * self.tail_ratio.powf(extra)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scalar_plant() -> PlantModel {
        PlantModel::scalar(1.2, 1.0, 1.0, 1.0, 0.9).unwrap()
    }

    fn quadratic_root() -> f64 {
        // Posterior fixed point of the scalar filter solves 1.44 P^2 + 0.56 P - 1 = 0.
        (-0.56 + (0.56f64 * 0.56 + 4.0 * 1.44).sqrt()) / (2.0 * 1.44)
    }

    #[test]
    fn scalar_riccati_matches_quadratic() {
        let ss = steady_state_filter(&scalar_plant(), RICCATI_TOL, RICCATI_MAX_ITERS).unwrap();
        assert_relative_eq!(ss.p_bar[(0, 0)], quadratic_root(), max_relative = 1e-9);
        assert_relative_eq!(ss.p_bar[(0, 0)], 0.661275, epsilon = 5e-6);
        assert!(ss.p_prior[(0, 0)] >= ss.p_bar[(0, 0)]);
    }

    #[test]
    fn near_perfect_measurement_gives_tiny_covariance() {
        let plant = PlantModel::scalar(1.2, 1.0, 1.0, 1e-12, 1.0).unwrap();
        let ss = steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS).unwrap();
        assert!(ss.p_bar[(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn fixed_point_is_stable_under_longer_iteration() {
        let spec = PlantSpec::default();
        let plant = generate_ensemble(&spec, 1, 3).unwrap().remove(0);
        let ss = steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS).unwrap();
        let mut p = ss.p_bar.clone();
        for _ in 0..10 * ss.iterations {
            p = riccati_step(&plant, &p).unwrap().p_bar;
        }
        assert!(max_abs_diff(&p, &ss.p_bar) < 1e-8);
        let again = riccati_step(&plant, &ss.p_bar).unwrap();
        assert!(max_abs_diff(&again.p_bar, &ss.p_bar) < RICCATI_TOL);
        assert!(min_sym_eigenvalue(&(&ss.p_prior - &ss.p_bar)) > -1e-9);
    }

    #[test]
    fn scalar_characteristic_params() {
        let plant = scalar_plant();
        let ss = steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS).unwrap();
        let cp = characteristic_params(&plant, &ss).unwrap();
        assert_relative_eq!(cp.alpha, 1.44, max_relative = 1e-12);
        assert_relative_eq!(cp.beta, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn diagonal_plant_takes_noise_branch() {
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.0, 1.3]);
        let plant =
            PlantModel::new(a, DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2), 0.9).unwrap();
        let ss = steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS).unwrap();
        let propagated = congruence(&plant.a, &ss.p_bar).trace() / 1.69;
        assert!(propagated < 2.0);
        let cp = characteristic_params(&plant, &ss).unwrap();
        assert_relative_eq!(cp.beta, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn covariance_from_age_scalar_values() {
        let plant = scalar_plant();
        let ss = steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS).unwrap();
        let pb = quadratic_root();
        let p1 = error_cov_from_aoi(&plant, &ss, 1).unwrap()[(0, 0)];
        let p2 = error_cov_from_aoi(&plant, &ss, 2).unwrap()[(0, 0)];
        assert_relative_eq!(p1, 1.44 * pb + 1.0, max_relative = 1e-9);
        assert_relative_eq!(p2, 1.44 * (1.44 * pb + 1.0) + 1.0, max_relative = 1e-9);
        assert_relative_eq!(p1, 1.952236, epsilon = 1e-5);
        assert_relative_eq!(p2, 3.811220, epsilon = 1e-5);
        assert!(matches!(error_cov_from_aoi(&plant, &ss, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn scalar_error_bound_sums_from_one() {
        let cp = CharParams { alpha: 2.0, beta: 1.0 };
        assert_relative_eq!(scalar_error_bound(cp, 1).unwrap(), 2.0);
        let cp = CharParams { alpha: 1.44, beta: 1.0 };
        assert_relative_eq!(scalar_error_bound(cp, 2).unwrap(), 1.44 + 1.44 * 1.44, max_relative = 1e-12);
        let bad = CharParams { alpha: 1.0, beta: 1.0 };
        assert!(scalar_error_bound(bad, 3).is_err());
    }

    #[test]
    fn validation_rejects_bad_models() {
        assert!(matches!(PlantModel::scalar(0.9, 1.0, 1.0, 1.0, 0.5), Err(Error::Assumption(_))));
        assert!(matches!(PlantModel::scalar(1.2, 0.0, 1.0, 1.0, 0.5), Err(Error::Assumption(_))));
        assert!(matches!(PlantModel::scalar(1.2, 1.0, -1.0, 1.0, 0.5), Err(Error::Assumption(_))));
        assert!(matches!(PlantModel::scalar(1.2, 1.0, 1.0, 1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(PlantModel::scalar(f64::NAN, 1.0, 1.0, 1.0, 0.5), Err(Error::NonFinite(_))));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let plants = generate_ensemble(&PlantSpec::default(), 3, 11).unwrap();
        let text = serde_json::to_string(&plants).unwrap();
        let back: Vec<PlantModel> = serde_json::from_str(&text).unwrap();
        assert_eq!(plants, back);
        assert!(text.contains("\"A\":[["));
    }

    #[test]
    fn ensemble_file_round_trip() {
        let ens = Ensemble::new(generate_ensemble(&PlantSpec::default(), 4, 3).unwrap());
        assert_eq!(Ensemble::from_json(&ens.to_json()).unwrap(), ens);
        let bare = r#"{"plants":[{"A":[[1.2]],"C":[[1.0]],"Q":[[1.0]],"R":[[1.0]],"p":0.9}]}"#;
        assert_eq!(Ensemble::from_json(bare).unwrap().plants[0], PlantModel::scalar(1.2, 1.0, 1.0, 1.0, 0.9).unwrap());
        assert!(Ensemble::from_json(r#"{"plants":[]}"#).is_err());
        assert!(Ensemble::from_json(r#"{"schema_version":2,"plants":[]}"#).is_err());
    }

    #[test]
    fn json_rejects_invalid_plant() {
        let text = r#"{"A":[[0.5]],"C":[[1.0]],"Q":[[1.0]],"R":[[1.0]],"p":0.9}"#;
        assert!(serde_json::from_str::<PlantModel>(text).is_err());
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        for dynamics in [Dynamics::Gaussian, Dynamics::Normal] {
            let spec = PlantSpec { dynamics, ..PlantSpec::default() };
            let a = generate_ensemble(&spec, 5, 42).unwrap();
            let b = generate_ensemble(&spec, 5, 42).unwrap();
            assert_eq!(a, b);
            for plant in &a {
                let rho = spectral_radius(&plant.a).unwrap();
                assert!(rho >= spec.rho_range.0 - 1e-9 && rho <= spec.rho_range.1 + 1e-9);
                assert!(rho * rho * (1.0 - plant.p) <= 1.0 - spec.stability_margin + 1e-12);
                assert_eq!(numeric_rank(&observability_matrix(&plant.a, &plant.c)), 3);
            }
        }
    }

    #[test]
    fn generator_rejects_bad_ranges() {
        let spec = PlantSpec { rho_range: (1.0, 1.0), ..PlantSpec::default() };
        assert!(matches!(generate_ensemble(&spec, 1, 0), Err(Error::Domain(_))));
        let spec = PlantSpec { rho_range: (3.0, 3.0), p_range: (0.1, 0.2), ..PlantSpec::default() };
        assert!(matches!(generate_ensemble(&spec, 1, 0), Err(Error::Generation { .. })));
    }

    #[test]
    fn sensor_model_trace_table_matches_direct_computation() {
        let plant = generate_ensemble(&PlantSpec::default(), 1, 5).unwrap().remove(0);
        let sm = SensorModel::new(plant.clone()).unwrap();
        for d in [1, 2, 7, 40] {
            let direct = error_cov_from_aoi(&plant, &sm.filter, d).unwrap().trace();
            assert_relative_eq!(sm.trace_at(d), direct, max_relative = 1e-10);
        }
        let far = sm.trace_at(300);
        assert!(far > sm.trace_at(256));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn covariance_recursion_one_step(seed in 0u64..1000, delta in 1u32..15) {
            let plant = generate_ensemble(&PlantSpec::default(), 1, seed).unwrap().remove(0);
            let ss = steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS).unwrap();
            let cur = error_cov_from_aoi(&plant, &ss, delta).unwrap();
            let next = error_cov_from_aoi(&plant, &ss, delta + 1).unwrap();
            let expect = congruence(&plant.a, &cur) + &plant.q;
            prop_assert!(max_abs_diff(&next, &expect) <= 1e-9 * expect.amax().max(1.0));
        }

        #[test]
        fn beta_dominates_both_branches(seed in 0u64..1000) {
            let plant = generate_ensemble(&PlantSpec::default(), 1, seed).unwrap().remove(0);
            let ss = steady_state_filter(&plant, RICCATI_TOL, RICCATI_MAX_ITERS).unwrap();
            let cp = characteristic_params(&plant, &ss).unwrap();
            prop_assert!(cp.beta * cp.alpha >= congruence(&plant.a, &ss.p_bar).trace() * (1.0 - 1e-12));
            prop_assert!(cp.beta >= plant.q.trace());
        }
    }
}
