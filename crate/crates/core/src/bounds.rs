//! Performance bounds and stability verdicts.
//!
//! The lower bound relaxes the per-step channel budget to a long-run average
//! and decouples the sensors into threshold problems. The upper bound follows
//! from a Lyapunov drift argument against the optimal randomized stationary
//! policy, whose marginals are found by water-filling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{alpha_pow, AoiFunction, ThresholdPolicy};
use crate::linalg::{eigenbasis_conditioning, min_sym_eigenvalue, spectral_radius};
use crate::plant::{PlantModel, SensorModel};

pub const SCHEMA_VERSION: u32 = 1;

/// Interior offset that keeps `alpha (1 - p q) < 1` strict.
const Q_EPS: f64 = 1e-9;

/// Largest threshold considered anywhere in the threshold searches.
const MAX_THRESHOLD: u32 = 1_000_000;

/// Threshold cap for non-final sensors while searching the smallest gap.
const GAP_SEARCH_BOX: u32 = 256;

/// `rho(A)^2 (1 - p) < 1`.
pub fn necessary_stability(plant: &PlantModel) -> Result<bool> {
    let rho = spectral_radius(&plant.a)?;
    Ok(rho * rho * (1.0 - plant.p) < 1.0)
}

/// `rho(A)^2 (1 - q p) < 1`.
pub fn sufficient_stability(plant: &PlantModel, q: f64) -> Result<bool> {
    let rho = spectral_radius(&plant.a)?;
    Ok(rho * rho * (1.0 - q * plant.p) < 1.0)
}

/// `sum_i (1 / p_i)(1 - 1 / alpha_i) < M`.
pub fn upper_bound_exists(fns: &[AoiFunction], m: usize) -> bool {
    existence_load(fns) < m as f64
}

fn existence_load(fns: &[AoiFunction]) -> f64 {
    fns.iter().map(|f| (1.0 - 1.0 / f.alpha) / f.p).sum()
}

fn check_channels(fns: &[AoiFunction], m: usize) -> Result<()> {
    if fns.is_empty() {
        return Err(Error::Domain("need at least one sensor".into()));
    }
    if m == 0 {
        return Err(Error::Domain("need at least one channel".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizedQ {
    pub q: Vec<f64>,
    pub objective: f64,
    /// Multiplier on the budget constraint; zero when `N <= M`.
    pub lambda: f64,
}

fn randomized_term(f: &AoiFunction, q: f64) -> f64 {
    f.beta * (f.alpha - 1.0) / (1.0 - f.alpha + f.alpha * f.p * q)
}

fn q_floor(f: &AoiFunction) -> f64 {
    (1.0 - 1.0 / f.alpha) / f.p + Q_EPS
}

fn q_of_lambda(f: &AoiFunction, lambda: f64) -> f64 {
    let AoiFunction { alpha: a, beta: b, p } = *f;
    let q = ((b * (a - 1.0) * a * p / lambda).sqrt() - 1.0 + a) / (a * p);
    q.clamp(q_floor(f), 1.0)
}

/// Marginals of the best randomized stationary policy: minimizes
/// `sum_i beta_i (alpha_i - 1) / (1 - alpha_i + alpha_i p_i q_i)` subject to
/// `sum q <= M` and `alpha_i (1 - p_i q_i) < 1`.
pub fn optimize_randomized_q(fns: &[AoiFunction], m: usize) -> Result<RandomizedQ> {
    check_channels(fns, m)?;
    let load = existence_load(fns);
    if load >= m as f64 {
        return Err(Error::Infeasible(format!(
            "stabilizing randomized policy needs {load:.6} channels but only {m} exist"
        )));
    }
    if let Some(f) = fns.iter().find(|f| q_floor(f) > 1.0) {
        return Err(Error::Infeasible(format!(
            "sensor with alpha {} and p {} is unstable even when always scheduled",
            f.alpha, f.p
        )));
    }
    let n = fns.len();
    let objective = |q: &[f64]| fns.iter().zip(q).map(|(f, &q)| randomized_term(f, q)).sum();
    if n <= m {
        let q = vec![1.0; n];
        return Ok(RandomizedQ { objective: objective(&q), q, lambda: 0.0 });
    }
    let target = m as f64;
    let total = |lambda: f64| fns.iter().map(|f| q_of_lambda(f, lambda)).sum::<f64>();
    let (mut lo, mut hi) = (1e-300f64, 1.0f64);
    while total(hi) > target {
        hi *= 16.0;
        if !hi.is_finite() {
            return Err(Error::Oracle("water-filling multiplier diverged".into()));
        }
    }
    for _ in 0..400 {
        let mid = (lo * hi).sqrt();
        if total(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    let lambda = hi;
    let q: Vec<f64> = fns.iter().map(|f| q_of_lambda(f, lambda)).collect();
    Ok(RandomizedQ { objective: objective(&q), q, lambda })
}

/// `K (p alpha^t - alpha p + alpha - 1) / (t p + 1 - p)`: the average AoI
/// cost of one sensor under threshold `t`.
pub fn relaxed_sensor_cost(f: &AoiFunction, t: u32) -> f64 {
    let AoiFunction { alpha: a, beta: b, p } = *f;
    let k = p * a * b / ((a - 1.0) * f.drift_margin());
    k * (p * alpha_pow(a, t) - a * p + a - 1.0) / (t as f64 * p + 1.0 - p)
}

fn rate(f: &AoiFunction, t: u32) -> f64 {
    1.0 / (t as f64 * f.p + 1.0 - f.p)
}

/// Smallest threshold whose Whittle index reaches `lambda`, i.e. the
/// threshold that minimizes `cost(t) + lambda * rate(t)`.
fn best_threshold(f: &AoiFunction, lambda: f64) -> Result<u32> {
    let mut t = 1;
    while f.whittle_index(t)? < lambda {
        t += 1;
        if t >= MAX_THRESHOLD {
            break;
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    /// Value of the relaxed problem: the Lagrangian dual, which randomized
    /// thresholds attain.
    pub value: f64,
    /// Best objective restricted to deterministic integer thresholds.
    pub integer_value: f64,
    pub thresholds: Vec<u32>,
    /// Optimal budget multiplier.
    pub lambda: f64,
    /// Smallest positive budget gap left by the other sensors.
    pub g_min: Vec<f64>,
    /// Upper limit on each optimal integer threshold implied by `g_min`.
    pub threshold_caps: Vec<f64>,
}

fn dual_value(fns: &[AoiFunction], m: usize, lambda: f64) -> Result<(f64, f64)> {
    let mut value = -lambda * m as f64;
    let mut used = 0.0;
    for f in fns {
        let t = best_threshold(f, lambda)?;
        value += f.threshold_average_cost(ThresholdPolicy { delta_th: t }, lambda)?;
        used += rate(f, t);
    }
    Ok((value, used))
}

/// Smallest threshold with `rate(t) <= budget` (`< budget` when `strict`).
fn threshold_for_budget(f: &AoiFunction, budget: f64, strict: bool) -> Option<u32> {
    if budget <= 0.0 {
        return None;
    }
    let raw = ((1.0 / budget - 1.0 + f.p) / f.p).max(1.0);
    let mut t = raw.floor().max(1.0) as u32;
    let ok = |t: u32| if strict { rate(f, t) < budget } else { rate(f, t) <= budget * (1.0 + 1e-12) };
    while t > 1 && ok(t - 1) {
        t -= 1;
    }
    while !ok(t) {
        t += 1;
        if t >= MAX_THRESHOLD {
            return None;
        }
    }
    Some(t)
}

/// `M - max { sum_{j != i} rate_j : sum < M }` over integer thresholds.
fn smallest_gap(fns: &[AoiFunction], skip: usize, m: usize) -> f64 {
    let others: Vec<&AoiFunction> = fns.iter().enumerate().filter(|(j, _)| *j != skip).map(|(_, f)| f).collect();
    let budget = m as f64;
    if (others.len() as f64) < budget {
        return budget - others.len() as f64;
    }
    fn search(others: &[&AoiFunction], k: usize, partial: f64, budget: f64, best: &mut f64) {
        if k + 1 == others.len() {
            if let Some(t) = threshold_for_budget(others[k], budget - partial, true) {
                *best = best.max(partial + rate(others[k], t));
            }
            return;
        }
        let rest = (others.len() - k - 1) as f64;
        for t in 1..=GAP_SEARCH_BOX {
            let s = partial + rate(others[k], t);
            if s + rest <= *best {
                break;
            }
            if s >= budget {
                continue;
            }
            search(others, k + 1, s, budget, best);
        }
    }
    let mut best = 0.0;
    search(&others, 0, 0.0, budget, &mut best);
    budget - best
}

/// Exact integer-threshold optimum by branch and bound. Costs increase with
/// the threshold, so each sensor's range ends once the partial cost plus the
/// cheapest completion exceeds the incumbent.
fn integer_thresholds(fns: &[AoiFunction], m: usize, caps: &[f64], incumbent: (f64, Vec<u32>)) -> (f64, Vec<u32>) {
    struct Ctx<'a> {
        fns: &'a [AoiFunction],
        caps: &'a [f64],
        floor: Vec<f64>,
        budget: f64,
        best: f64,
        best_t: Vec<u32>,
        cur: Vec<u32>,
    }
    fn go(ctx: &mut Ctx, k: usize, cost: f64, used: f64) {
        let f = &ctx.fns[k];
        let remaining_floor = ctx.floor[k + 1];
        if k + 1 == ctx.fns.len() {
            if let Some(t) = threshold_for_budget(f, ctx.budget - used, false) {
                let total = cost + relaxed_sensor_cost(f, t);
                if total < ctx.best && (t as f64) <= ctx.caps[k] + 1e-9 {
                    ctx.best = total;
                    ctx.cur[k] = t;
                    ctx.best_t = ctx.cur.clone();
                }
            }
            return;
        }
        let cap = ctx.caps[k].floor().clamp(1.0, MAX_THRESHOLD as f64) as u32;
        for t in 1..=cap {
            let c = cost + relaxed_sensor_cost(f, t);
            if c + remaining_floor >= ctx.best {
                break;
            }
            let u = used + rate(f, t);
            if u >= ctx.budget {
                continue;
            }
            ctx.cur[k] = t;
            go(ctx, k + 1, c, u);
        }
    }
    let n = fns.len();
    let mut floor = vec![0.0; n + 1];
    for k in (0..n).rev() {
        floor[k] = floor[k + 1] + relaxed_sensor_cost(&fns[k], 1);
    }
    let mut ctx = Ctx {
        fns,
        caps,
        floor,
        budget: m as f64,
        best: incumbent.0 * (1.0 + 1e-12),
        best_t: incumbent.1.clone(),
        cur: vec![1; n],
    };
    go(&mut ctx, 0, 0.0, 0.0);
    let value = fns.iter().zip(&ctx.best_t).map(|(f, &t)| relaxed_sensor_cost(f, t)).sum();
    (value, ctx.best_t)
}

/// Lower bound on the average AoI cost of any feasible scheduler.
///
/// `value` maximizes the Lagrangian dual of the relaxed problem by bisection
/// on its subgradient. Integer thresholds come from an exhaustive branch and
/// bound inside the per-sensor caps for `N <= 6`, and from the dual solution
/// otherwise.
pub fn lower_bound_j(fns: &[AoiFunction], m: usize) -> Result<LowerBound> {
    check_channels(fns, m)?;
    for f in fns {
        f.check_stable()?;
    }
    let n = fns.len();
    let budget = m as f64;

    let (lambda, value, dual_t) = if (n as f64) <= budget {
        let v = fns.iter().map(|f| relaxed_sensor_cost(f, 1)).sum();
        (0.0, v, vec![1; n])
    } else {
        let mut lo = 0.0;
        let mut hi =
            fns.iter().map(|f| f.whittle_index(1)).collect::<Result<Vec<_>>>()?.into_iter().fold(1.0, f64::max);
        while dual_value(fns, m, hi)?.1 > budget {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(Error::Oracle("dual multiplier diverged".into()));
            }
        }
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if dual_value(fns, m, mid)?.1 > budget {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        // The dual is piecewise linear; its maximum sits at the breakpoint.
        let value = dual_value(fns, m, lo)?.0.max(dual_value(fns, m, hi)?.0);
        let t = fns.iter().map(|f| best_threshold(f, hi)).collect::<Result<Vec<_>>>()?;
        (hi, value, t)
    };

    let g_min: Vec<f64> = (0..n).map(|i| smallest_gap(fns, i, m)).collect();
    let threshold_caps: Vec<f64> = fns.iter().zip(&g_min).map(|(f, &g)| (1.0 / g + 2.0 * f.p - 1.0) / f.p).collect();

    let dual_cost: f64 = fns.iter().zip(&dual_t).map(|(f, &t)| relaxed_sensor_cost(f, t)).sum();
    let (integer_value, thresholds) = if n <= 6 && (n as f64) > budget {
        integer_thresholds(fns, m, &threshold_caps, (dual_cost, dual_t))
    } else {
        (dual_cost, dual_t)
    };

    Ok(LowerBound { value, integer_value, thresholds, lambda, g_min, threshold_caps })
}

/// AoI-cost parameters that bound the true error trace from below:
/// `alpha = rho^2`, `beta = zeta * min(lambda_min(Q), lambda_min(P))` with
/// `zeta` the conditioning factor of the eigenvector basis of `A`.
pub fn origin_params(sensor: &SensorModel) -> Result<AoiFunction> {
    let zeta = eigenbasis_conditioning(&sensor.plant.a)?;
    let rho = spectral_radius(&sensor.plant.a)?;
    let floor = min_sym_eigenvalue(&sensor.plant.q).min(min_sym_eigenvalue(&sensor.filter.p_bar));
    let beta = zeta * floor;
    if !(beta > 0.0) {
        return Err(Error::Unsupported("posterior covariance is singular".into()));
    }
    AoiFunction::new(rho * rho, beta, sensor.plant.p)
}

/// Lower bound on the average trace of the remote error covariance.
pub fn lower_bound_j_origin(sensors: &[SensorModel], m: usize) -> Result<LowerBound> {
    let fns = sensors.iter().map(origin_params).collect::<Result<Vec<_>>>()?;
    lower_bound_j(&fns, m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorUpperTerms {
    pub l1: f64,
    pub l2: f64,
    pub eta: f64,
    pub s: f64,
    pub delta_tilde: u32,
    /// This sensor's contribution to the constant term.
    pub c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    pub value: f64,
    pub c_const: f64,
    pub terms: Vec<SensorUpperTerms>,
}

/// Drift-based upper bound on the average AoI cost of the lightweight
/// scheduler, given the randomized marginals `q`.
pub fn upper_bound_j(fns: &[AoiFunction], m: usize, q: &[f64]) -> Result<UpperBound> {
    check_channels(fns, m)?;
    if q.len() != fns.len() {
        return Err(Error::Dimension("one marginal per sensor required".into()));
    }
    if !upper_bound_exists(fns, m) {
        return Err(Error::NoBound(format!("channel load {:.6} is not below M = {m}", existence_load(fns))));
    }
    let mut terms = Vec::with_capacity(fns.len());
    let mut numerator = 0.0;
    let mut denominator = f64::INFINITY;
    for (f, &qi) in fns.iter().zip(q) {
        let AoiFunction { alpha: a, beta: b, p } = *f;
        let l1 = p / (1.0 - (1.0 - p) * a);
        let l2 = (a - 1.0 + p - 2.0 * a * p) / ((a - 1.0) * (1.0 - a * (1.0 - p)));
        let eta = l1 * (1.0 - a * (1.0 - p * qi));
        if !(eta > 0.0) || !(l1 > 0.0) {
            return Err(Error::NoBound(format!(
                "sensor with alpha {a}, p {p} and q {qi} fails the sufficient stability condition"
            )));
        }
        let s = a * (l1 + l2) * (1.0 - p * qi) - l2;
        let smallest = (s / eta).floor() + 1.0;
        let mut delta_tilde = smallest.clamp(1.0, MAX_THRESHOLD as f64) as u32;
        while delta_tilde > 1 && eta * (delta_tilde - 1) as f64 - s > 0.0 {
            delta_tilde -= 1;
        }
        while eta * delta_tilde as f64 - s <= 0.0 && delta_tilde < MAX_THRESHOLD {
            delta_tilde += 1;
        }
        let c = if delta_tilde > 1 { eta * delta_tilde as f64 * b * alpha_pow(a, delta_tilde) } else { 0.0 };
        numerator += c + p * qi * b * a * (l1 + l2);
        denominator = denominator.min(eta * delta_tilde as f64 - s);
        terms.push(SensorUpperTerms { l1, l2, eta, s, delta_tilde, c });
    }
    let c_const = terms.iter().map(|t| t.c).sum();
    Ok(UpperBound { value: numerator / denominator, c_const, terms })
}

/// Everything the bounds module can say about one ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub schema_version: u32,
    pub m: usize,
    pub lower_j: Option<f64>,
    pub lower_j_integer: Option<f64>,
    pub lower_j_origin: Option<f64>,
    pub upper_j: Option<f64>,
    pub q_star: Option<Vec<f64>>,
    pub thresholds_star: Option<Vec<u32>>,
    pub g_min: Option<Vec<f64>>,
    pub threshold_caps: Option<Vec<f64>>,
    pub necessary_stable: Vec<bool>,
    pub sufficient_stable: Option<Vec<bool>>,
    pub upper_terms: Option<Vec<SensorUpperTerms>>,
    pub c_const: Option<f64>,
    /// Why an absent quantity could not be computed.
    pub notes: Vec<String>,
}

impl BoundsReport {
    pub fn compute(sensors: &[SensorModel], m: usize) -> Result<Self> {
        let fns: Vec<AoiFunction> = sensors.iter().map(SensorModel::aoi_function).collect();
        check_channels(&fns, m)?;
        let necessary_stable = sensors.iter().map(|s| necessary_stability(&s.plant)).collect::<Result<Vec<_>>>()?;
        let mut report = BoundsReport {
            schema_version: SCHEMA_VERSION,
            m,
            lower_j: None,
            lower_j_integer: None,
            lower_j_origin: None,
            upper_j: None,
            q_star: None,
            thresholds_star: None,
            g_min: None,
            threshold_caps: None,
            necessary_stable,
            sufficient_stable: None,
            upper_terms: None,
            c_const: None,
            notes: Vec::new(),
        };

        match lower_bound_j(&fns, m) {
            Ok(lb) => {
                report.lower_j = Some(lb.value);
                report.lower_j_integer = Some(lb.integer_value);
                report.thresholds_star = Some(lb.thresholds);
                report.g_min = Some(lb.g_min);
                report.threshold_caps = Some(lb.threshold_caps);
            }
            Err(e) => report.notes.push(format!("lower bound refused: {e}")),
        }
        match lower_bound_j_origin(sensors, m) {
            Ok(lb) => report.lower_j_origin = Some(lb.value),
            Err(e) => report.notes.push(format!("origin lower bound unavailable: {e}")),
        }
        match optimize_randomized_q(&fns, m) {
            Ok(rq) => {
                report.sufficient_stable = Some(
                    sensors
                        .iter()
                        .zip(&rq.q)
                        .map(|(s, &q)| sufficient_stability(&s.plant, q))
                        .collect::<Result<Vec<_>>>()?,
                );
                match upper_bound_j(&fns, m, &rq.q) {
                    Ok(ub) => {
                        report.upper_j = Some(ub.value);
                        report.c_const = Some(ub.c_const);
                        report.upper_terms = Some(ub.terms);
                    }
                    Err(e) => report.notes.push(format!("upper bound unavailable: {e}")),
                }
                report.q_star = Some(rq.q);
            }
            Err(e) => report.notes.push(format!("no stabilizing randomized policy: {e}")),
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn f(alpha: f64, beta: f64, p: f64) -> AoiFunction {
        AoiFunction::new(alpha, beta, p).unwrap()
    }

    #[test]
    fn stability_verdicts() {
        let plant = |p| PlantModel::scalar(1.2, 1.0, 1.0, 1.0, p).unwrap();
        assert!(necessary_stability(&plant(0.5)).unwrap());
        assert!(!necessary_stability(&plant(0.2)).unwrap());
        assert!(necessary_stability(&plant(1.0)).unwrap());
        assert_eq!(sufficient_stability(&plant(0.5), 1.0).unwrap(), necessary_stability(&plant(0.5)).unwrap());
        assert!(sufficient_stability(&plant(0.9), 0.5).unwrap());
    }

    #[test]
    fn randomized_q_simple_cases() {
        let g = f(1.3, 1.0, 0.9);
        let rq = optimize_randomized_q(&[g, g], 1).unwrap();
        assert_relative_eq!(rq.q[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(rq.q[1], 0.5, epsilon = 1e-9);
        let rq = optimize_randomized_q(&[g], 1).unwrap();
        assert_eq!(rq.q, vec![1.0]);
    }

    #[test]
    fn randomized_q_matches_grid_search() {
        let a = f(1.3, 1.0, 0.9);
        let b = f(1.1, 3.0, 0.6);
        let rq = optimize_randomized_q(&[a, b], 1).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        let lo = q_floor(&a);
        let mut q = lo;
        while q <= 1.0 {
            let qb = 1.0 - q;
            if qb >= q_floor(&b) && qb <= 1.0 {
                let v = randomized_term(&a, q) + randomized_term(&b, qb);
                if v < best.0 {
                    best = (v, q);
                }
            }
            q += 1e-4;
        }
        assert!((rq.q[0] - best.1).abs() < 1e-3, "{} vs {}", rq.q[0], best.1);
        assert!(rq.objective <= best.0 + 1e-9);
    }

    #[test]
    fn randomized_q_infeasible() {
        let g = f(2.0, 1.0, 0.6);
        assert!(matches!(optimize_randomized_q(&[g, g], 1), Err(Error::Infeasible(_))));
    }

    #[test]
    fn lower_bound_single_sensor() {
        let lb = lower_bound_j(&[f(2.0, 1.0, 1.0)], 1).unwrap();
        assert_eq!(lb.thresholds, vec![1]);
        assert_relative_eq!(lb.value, 2.0, max_relative = 1e-12);
        assert_relative_eq!(lb.g_min[0], 1.0);
        for p in [0.3, 0.7, 1.0] {
            let lb = lower_bound_j(&[f(1.2, 1.0, p)], 1).unwrap();
            assert_relative_eq!(lb.threshold_caps[0], 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn lower_bound_refuses_unstable_sensor() {
        assert!(matches!(lower_bound_j(&[f(3.0, 1.0, 0.5)], 1), Err(Error::Unstable { .. })));
    }

    #[test]
    fn relaxed_cost_is_stationary_average() {
        let g = f(1.37, 0.8, 0.74);
        for t in 1..10 {
            let theta = g.threshold_average_cost(ThresholdPolicy { delta_th: t }, 0.0).unwrap();
            assert_relative_eq!(relaxed_sensor_cost(&g, t), theta, max_relative = 1e-12);
        }
    }

    /// Brute force over a box of integer thresholds.
    fn brute_force(fns: &[AoiFunction], m: usize, limit: u32) -> f64 {
        let n = fns.len();
        let mut t = vec![1u32; n];
        let mut best = f64::INFINITY;
        loop {
            let used: f64 = fns.iter().zip(&t).map(|(f, &t)| rate(f, t)).sum();
            if used <= m as f64 * (1.0 + 1e-12) {
                best = best.min(fns.iter().zip(&t).map(|(f, &t)| relaxed_sensor_cost(f, t)).sum());
            }
            let mut k = 0;
            loop {
                if k == n {
                    return best;
                }
                t[k] += 1;
                if t[k] <= limit {
                    break;
                }
                t[k] = 1;
                k += 1;
            }
        }
    }

    #[test]
    fn upper_bound_worked_instance() {
        let g = f(1.44, 1.0, 0.9);
        let ub = upper_bound_j(&[g], 1, &[1.0]).unwrap();
        let t = &ub.terms[0];
        assert_relative_eq!(t.l1, 0.9 / 0.856, max_relative = 1e-12);
        assert_relative_eq!(t.l1, 1.05140, epsilon = 1e-5);
        assert_relative_eq!(t.l2, -3.32413, epsilon = 1e-5);
        assert_relative_eq!(t.eta, 0.9, max_relative = 1e-12);
        assert_relative_eq!(t.s, 2.99686, epsilon = 1e-5);
        assert_eq!(t.delta_tilde, 4);
        let c = 0.9 * 4.0 * 1.44f64.powi(4);
        let num = c + 0.9 * 1.44 * (t.l1 + t.l2);
        assert_relative_eq!(ub.value, num / (0.9 * 4.0 - t.s), max_relative = 1e-12);
        assert_relative_eq!(ub.value, 20.8, epsilon = 0.05);
        let closed = 1.44 * 0.9 / (1.0 - 1.44 * 0.1);
        assert!(closed <= ub.value);
    }

    #[test]
    fn upper_bound_requires_existence() {
        let g = f(2.0, 1.0, 0.6);
        assert!(matches!(upper_bound_j(&[g, g], 1, &[0.5, 0.5]), Err(Error::NoBound(_))));
    }

    #[test]
    fn bounds_report_for_single_sensor() {
        let sensor = SensorModel::new(PlantModel::scalar(1.2, 1.0, 1.0, 1.0, 0.9).unwrap()).unwrap();
        let report = BoundsReport::compute(&[sensor], 1).unwrap();
        let (lo, hi) = (report.lower_j.unwrap(), report.upper_j.unwrap());
        assert!(lo <= hi);
        assert_eq!(report.schema_version, 1);
        assert!(report.lower_j_origin.unwrap() > 0.0);
        let json = serde_json::to_string(&report).unwrap();
        let back: BoundsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn origin_params_for_scalar_plant() {
        let sensor = SensorModel::new(PlantModel::scalar(1.2, 1.0, 1.0, 1.0, 0.9).unwrap()).unwrap();
        let g = origin_params(&sensor).unwrap();
        assert_relative_eq!(g.alpha, 1.44, max_relative = 1e-12);
        assert_relative_eq!(g.beta, sensor.filter.p_bar[(0, 0)].min(1.0), max_relative = 1e-12);
    }

    #[test]
    fn bounds_report_notes_unstable_sensor() {
        let sensor = SensorModel::new(PlantModel::scalar(1.5, 1.0, 1.0, 1.0, 0.2).unwrap()).unwrap();
        let report = BoundsReport::compute(&[sensor], 1).unwrap();
        assert_eq!(report.necessary_stable, vec![false]);
        assert!(report.lower_j.is_none());
        assert!(report.notes.iter().any(|n| n.contains("lower bound refused")));
    }

    fn ensemble() -> impl Strategy<Value = (Vec<AoiFunction>, usize)> {
        (2usize..5, 1usize..3).prop_flat_map(|(n, m)| {
            let sensor = (1.02f64..1.6, 0.2f64..4.0, 0.0f64..1.0).prop_map(|(a, b, u)| {
                let p_min = (1.0 - 0.9 / a).max(0.3);
                f(a, b, p_min + u * (1.0 - p_min))
            });
            (proptest::collection::vec(sensor, n), Just(m.min(n)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn integer_search_matches_brute_force((fns, m) in ensemble()) {
            let lb = lower_bound_j(&fns, m).unwrap();
            let brute = brute_force(&fns, m, 12);
            prop_assert!(lb.integer_value <= brute * (1.0 + 1e-9));
            prop_assert!(lb.value <= lb.integer_value * (1.0 + 1e-9));
            let used: f64 = fns.iter().zip(&lb.thresholds).map(|(f, &t)| rate(f, t)).sum();
            prop_assert!(used <= m as f64 * (1.0 + 1e-9));
            for (t, cap) in lb.thresholds.iter().zip(&lb.threshold_caps) {
                prop_assert!(*t as f64 <= cap + 1e-9);
            }
        }

        #[test]
        fn relaxed_cost_increases_from_two((fns, _m) in ensemble()) {
            for g in &fns {
                prop_assert!(relaxed_sensor_cost(g, 1) < relaxed_sensor_cost(g, 2));
                for t in 2..40 {
                    prop_assert!(relaxed_sensor_cost(g, t + 1) >= relaxed_sensor_cost(g, t));
                }
            }
        }

        #[test]
        fn water_filling_slackness((fns, m) in ensemble()) {
            prop_assume!(fns.len() > m && upper_bound_exists(&fns, m));
            let rq = optimize_randomized_q(&fns, m).unwrap();
            let total: f64 = rq.q.iter().sum();
            prop_assert!((total - m as f64).abs() < 1e-8);
            for (g, &q) in fns.iter().zip(&rq.q) {
                prop_assert!(g.alpha * (1.0 - g.p * q) < 1.0);
                if q < 1.0 && q > q_floor(g) + 1e-12 {
                    let c = 1.0 - g.alpha + g.alpha * g.p * q;
                    let slope = g.beta * (g.alpha - 1.0) * g.alpha * g.p / (c * c);
                    prop_assert!((slope - rq.lambda).abs() <= 1e-6 * rq.lambda);
                }
            }
        }

        #[test]
        fn lower_stays_below_upper((fns, m) in ensemble()) {
            prop_assume!(upper_bound_exists(&fns, m));
            let rq = optimize_randomized_q(&fns, m).unwrap();
            let ub = upper_bound_j(&fns, m, &rq.q).unwrap();
            let lb = lower_bound_j(&fns, m).unwrap();
            prop_assert!(lb.value <= ub.value);
        }
    }
}
