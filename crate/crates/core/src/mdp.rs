//! Average-cost dynamic programming on AoI chains.
//!
//! Two solvers live here: a single-sensor relative value iteration used to
//! compute Whittle indexes numerically for arbitrary increasing cost
//! sequences, and a joint solver over the product AoI chain of a few sensors
//! that yields the optimal scheduling policy and exact policy evaluation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::AoiFunction;

/// Weight on the Bellman update in damped value iteration. Mixing with the
/// identity makes the chain aperiodic without changing its average cost.
const DAMPING: f64 = 0.5;

/// Relative value iteration for one sensor with a Lagrangian transmission
/// price. The AoI chain is truncated at `costs.len()` with a self-loop at the
/// last state. Successive solves reuse the previous relative values.
#[derive(Clone, Debug)]
pub struct SingleSensorRvi {
    costs: Vec<f64>,
    p: f64,
    h: Vec<f64>,
    scratch: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl SingleSensorRvi {
    /// `costs[k]` is the per-step cost of AoI `k + 1`.
    pub fn new(costs: Vec<f64>, p: f64) -> Result<Self> {
        if costs.len() < 2 {
            return Err(Error::Domain("need at least two AoI states".into()));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost sequence"));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Domain(format!("success probability {p} not in (0, 1]")));
        }
        let n = costs.len();
        Ok(Self { costs, p, h: vec![0.0; n], scratch: vec![0.0; n], tol: 1e-10, max_iters: 2_000_000 })
    }

    pub fn relative_values(&self) -> &[f64] {
        &self.h
    }

    /// Runs damped relative value iteration at price `w` and returns the
    /// average cost. Relative values are normalized so that `h(1) = 0`.
    pub fn solve(&mut self, w: f64) -> Result<f64> {
        let n = self.costs.len();
        let p = self.p;
        for _ in 0..self.max_iters {
            let h1 = self.h[0];
            for k in 0..n {
                let next = self.h[(k + 1).min(n - 1)];
                let send = w + p * h1 + (1.0 - p) * next;
                let t = self.costs[k] + next.min(send);
                self.scratch[k] = (1.0 - DAMPING) * self.h[k] + DAMPING * t;
            }
            let shift = self.scratch[0];
            let gain = shift / DAMPING;
            let mut converged = true;
            for k in 0..n {
                let new = self.scratch[k] - shift;
                let change = (new - self.h[k]).abs();
                if change > self.tol * (1.0 + gain.abs()) + 1e-13 * new.abs() {
                    converged = false;
                }
                self.h[k] = new;
            }
            if !gain.is_finite() {
                return Err(Error::Oracle("relative value iteration diverged".into()));
            }
            if converged {
                return Ok(gain);
            }
        }
        Err(Error::Oracle(format!("relative value iteration did not settle at price {w}")))
    }

    /// Transmit-minus-idle advantage at AoI `delta` for price `w`, after
    /// solving. Negative means transmitting is strictly better.
    fn tie_gap(&mut self, w: f64, delta: u32) -> Result<f64> {
        self.solve(w)?;
        let n = self.h.len();
        let next = self.h[(delta as usize).min(n - 1)];
        Ok(w - self.p * (next - self.h[0]))
    }

    /// Price at which transmitting and idling tie at AoI `delta`, found by
    /// bisection. `hint` seeds the initial bracket `[0, 10 |hint| + 1]`,
    /// which is widened as needed.
    pub fn whittle_index(&mut self, delta: u32, hint: f64) -> Result<f64> {
        if delta == 0 || delta as usize >= self.costs.len() {
            return Err(Error::Domain(format!("AoI {delta} outside the truncated range 1..{}", self.costs.len())));
        }
        let mut lo = 0.0;
        let mut hi = 10.0 * hint.abs() + 1.0;
        let mut widen = 0;
        while self.tie_gap(lo, delta)? > 0.0 {
            lo = -4.0 * (lo.abs() + 1.0);
            widen += 1;
            if widen > 200 {
                return Err(Error::Oracle("could not bracket the index from below".into()));
            }
        }
        while self.tie_gap(hi, delta)? < 0.0 {
            hi *= 4.0;
            widen += 1;
            if widen > 200 || !hi.is_finite() {
                return Err(Error::Oracle("could not bracket the index from above".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.tie_gap(mid, delta)? < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1e-300) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Whittle index of the AoI cost at `delta`, computed by bisection over
/// relative value iteration on the chain truncated at `delta_max`.
pub fn whittle_index_numeric(f: &AoiFunction, delta: u32, delta_max: u32) -> Result<f64> {
    f.check_stable()?;
    if delta >= delta_max {
        return Err(Error::Domain(format!("AoI {delta} must be below the cap {delta_max}")));
    }
    let costs: Vec<f64> = (1..=delta_max).map(|d| f.value(d)).collect();
    let hint = f.whittle_index(delta)?;
    SingleSensorRvi::new(costs, f.p)?.whittle_index(delta, hint)
}

/// Joint scheduling problem over the product AoI chain of a few sensors.
#[derive(Clone, Debug)]
pub struct DpProblem {
    /// `costs[i][k]` is the per-step cost of sensor `i` at AoI `k + 1`; every
    /// row has length `cap`.
    pub costs: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub m: usize,
    pub cap: u32,
}

/// Default cap on the joint state count.
pub const DEFAULT_STATE_BUDGET: usize = 4_000_000;

#[derive(Clone, Debug)]
pub struct DpSolution {
    pub average_cost: f64,
    /// Every size-`M` subset, in lexicographic order.
    pub actions: Vec<Vec<usize>>,
    /// Index into `actions` for each joint state.
    pub policy: Vec<u32>,
    pub iterations: usize,
}

impl DpSolution {
    pub fn action_at(&self, problem: &DpProblem, deltas: &[u32]) -> &[usize] {
        &self.actions[self.policy[problem.state_index(deltas)] as usize]
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Mixed-radix layout of the joint state space.
struct Layout {
    n: usize,
    cap: usize,
    stride: Vec<usize>,
}

impl Layout {
    /// Index of the all-incremented successor and each sensor's digit in it.
    fn successor(&self, state: usize, digits: &mut [usize]) -> usize {
        let mut rest = state;
        let mut base = 0;
        for (digit, stride) in digits.iter_mut().zip(&self.stride).take(self.n) {
            let d = rest % self.cap;
            rest /= self.cap;
            *digit = (d + 1).min(self.cap - 1);
            base += *digit * stride;
        }
        base
    }
}

impl DpProblem {
    pub fn validate(&self, budget: usize) -> Result<usize> {
        let n = self.costs.len();
        if n == 0 || self.probs.len() != n {
            return Err(Error::Dimension("costs and probabilities must cover the same sensors".into()));
        }
        if self.m == 0 || self.m > n {
            return Err(Error::Domain(format!("channel count {} not in 1..={n}", self.m)));
        }
        if self.cap < 2 {
            return Err(Error::Domain("AoI cap must be at least 2".into()));
        }
        if self.costs.iter().any(|c| c.len() != self.cap as usize) {
            return Err(Error::Dimension("every cost row must have cap entries".into()));
        }
        if self.costs.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost table"));
        }
        if self.probs.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Domain("success probabilities must lie in (0, 1]".into()));
        }
        let states = (self.cap as usize).checked_pow(n as u32).unwrap_or(usize::MAX);
        if states > budget {
            return Err(Error::Resource { states, budget });
        }
        Ok(states)
    }

    /// Mixed-radix index of an AoI vector with entries in `1..=cap`.
    pub fn state_index(&self, deltas: &[u32]) -> usize {
        let cap = self.cap as usize;
        deltas.iter().rev().fold(0, |acc, &d| acc * cap + (d.clamp(1, self.cap) as usize - 1))
    }

    pub fn state_deltas(&self, mut index: usize) -> Vec<u32> {
        let cap = self.cap as usize;
        (0..self.costs.len())
            .map(|_| {
                let d = index % cap;
                index /= cap;
                d as u32 + 1
            })
            .collect()
    }

    fn layout(&self) -> Layout {
        let n = self.costs.len();
        let cap = self.cap as usize;
        let stride = (0..n).map(|i| cap.pow(i as u32)).collect();
        Layout { n, cap, stride }
    }

    fn state_costs(&self, states: usize) -> Vec<f64> {
        (0..states)
            .map(|s| self.state_deltas(s).iter().enumerate().map(|(i, &d)| self.costs[i][d as usize - 1]).sum())
            .collect()
    }

    /// `E[h(next)]` when `action` is scheduled from the state whose
    /// all-incremented successor is `base` with digits `digits`.
    fn expected_next(&self, layout: &Layout, h: &[f64], base: usize, digits: &[usize], action: &[usize]) -> f64 {
        let k = action.len();
        let mut total = 0.0;
        for mask in 0u32..(1 << k) {
            let mut prob = 1.0;
            let mut idx = base;
            for (bit, &i) in action.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    prob *= self.probs[i];
                    idx -= digits[i] * layout.stride[i];
                } else {
                    prob *= 1.0 - self.probs[i];
                }
            }
            if prob > 0.0 {
                total += prob * h[idx];
            }
        }
        total
    }

    /// Damped relative value iteration. `choose` maps a state to the value of
    /// `min_a E[h(next)]` (or a fixed action's value) and the chosen action.
    fn iterate<F>(&self, tol: f64, max_iters: usize, choose: F) -> Result<(f64, Vec<f64>, usize)>
    where
        F: Fn(&Layout, &[f64], usize, usize, &[usize]) -> f64 + Sync,
    {
        let states = self.validate(usize::MAX)?;
        let layout = self.layout();
        let cost = self.state_costs(states);
        let n = self.costs.len();
        let mut h = vec![0.0; states];
        for it in 1..=max_iters {
            let t: Vec<f64> = (0..states)
                .into_par_iter()
                .map_init(
                    || vec![0usize; n],
                    |digits, s| {
                        let base = layout.successor(s, digits);
                        cost[s] + choose(&layout, &h, s, base, digits)
                    },
                )
                .collect();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (ts, hs) in t.iter().zip(&h) {
                let d = ts - hs;
                lo = lo.min(d);
                hi = hi.max(d);
            }
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::Oracle("joint value iteration diverged".into()));
            }
            let gain = 0.5 * (lo + hi);
            if hi - lo < tol * gain.abs().max(1.0) {
                return Ok((gain, h, it));
            }
            let shift = t[0];
            for (hs, ts) in h.iter_mut().zip(&t) {
                *hs = (1.0 - DAMPING) * *hs + DAMPING * (ts - shift);
            }
        }
        Err(Error::Oracle("joint value iteration did not settle".into()))
    }
}

/// Optimal average cost and policy by relative value iteration on the joint
/// chain, scheduling exactly `M` sensors per step. Stops when the span of the
/// Bellman residual drops below `1e-9` (relative to the gain).
pub fn dp_optimal_policy(problem: &DpProblem, budget: usize) -> Result<DpSolution> {
    problem.validate(budget)?;
    let actions = combinations(problem.costs.len(), problem.m);
    let best = |layout: &Layout, h: &[f64], base: usize, digits: &[usize]| -> (f64, u32) {
        let mut best = (f64::INFINITY, 0u32);
        for (a, act) in actions.iter().enumerate() {
            let v = problem.expected_next(layout, h, base, digits, act);
            if v < best.0 {
                best = (v, a as u32);
            }
        }
        best
    };
    let (gain, h, iterations) =
        problem.iterate(1e-9, 1_000_000, |layout, h, _s, base, digits| best(layout, h, base, digits).0)?;
    let layout = problem.layout();
    let n = problem.costs.len();
    let policy = (0..h.len())
        .into_par_iter()
        .map_init(
            || vec![0usize; n],
            |digits, s| {
                let base = layout.successor(s, digits);
                best(&layout, &h, base, digits).1
            },
        )
        .collect();
    Ok(DpSolution { average_cost: gain, actions, policy, iterations })
}

/// Exact long-run average cost on the truncated joint chain of the
/// stationary policy `decide`, which maps an AoI vector to the sensors it
/// schedules.
pub fn evaluate_policy<F>(problem: &DpProblem, budget: usize, decide: F) -> Result<f64>
where
    F: Fn(&[u32]) -> Vec<usize> + Sync,
{
    let states = problem.validate(budget)?;
    let chosen: Vec<Vec<usize>> = (0..states).into_par_iter().map(|s| decide(&problem.state_deltas(s))).collect();
    if chosen.iter().any(|a| a.len() > problem.m || a.iter().any(|&i| i >= problem.costs.len())) {
        return Err(Error::Infeasible("policy violates the channel budget".into()));
    }
    let (gain, _, _) = problem.iterate(1e-9, 1_000_000, |layout, h, s, base, digits| {
        problem.expected_next(layout, h, base, digits, &chosen[s])
    })?;
    Ok(gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn numeric_index_matches_hand_values() {
        let f = AoiFunction::new(2.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(whittle_index_numeric(&f, 1, 200).unwrap(), 2.0, max_relative = 1e-6);
        let f = AoiFunction::new(1.5, 2.0, 0.5).unwrap();
        assert_relative_eq!(whittle_index_numeric(&f, 1, 400).unwrap(), 3.0, max_relative = 1e-6);
        assert_relative_eq!(whittle_index_numeric(&f, 2, 400).unwrap(), 9.75, max_relative = 1e-6);
    }

    #[test]
    fn numeric_index_at_low_success_probability() {
        let f = AoiFunction::new(1.05, 1.0, 0.1).unwrap();
        for d in [1, 3, 8] {
            let closed = f.whittle_index(d).unwrap();
            let numeric = whittle_index_numeric(&f, d, 400).unwrap();
            assert_relative_eq!(numeric, closed, max_relative = 1e-5);
        }
    }

    #[test]
    fn numeric_index_rejects_bad_arguments() {
        let f = AoiFunction::new(1.5, 1.0, 0.9).unwrap();
        assert!(whittle_index_numeric(&f, 10, 10).is_err());
        let unstable = AoiFunction::new(3.0, 1.0, 0.5).unwrap();
        assert!(matches!(whittle_index_numeric(&unstable, 1, 50), Err(Error::Unstable { .. })));
    }

    #[test]
    fn additive_cost_shift_leaves_index_unchanged() {
        let f = AoiFunction::new(1.3, 0.8, 0.7).unwrap();
        let costs: Vec<f64> = (1..=300).map(|d| f.value(d) - 5.0).collect();
        let mut rvi = SingleSensorRvi::new(costs, f.p).unwrap();
        let shifted = rvi.whittle_index(4, 1.0).unwrap();
        assert_relative_eq!(shifted, f.whittle_index(4).unwrap(), max_relative = 1e-6);
    }

    fn single(alpha: f64, beta: f64, p: f64, cap: u32) -> DpProblem {
        let f = AoiFunction::new(alpha, beta, p).unwrap();
        DpProblem { costs: vec![(1..=cap).map(|d| f.value(d)).collect()], probs: vec![p], m: 1, cap }
    }

    #[test]
    fn single_sensor_dp_matches_geometric_closed_form() {
        let sol = dp_optimal_policy(&single(1.44, 1.0, 0.9, 40), DEFAULT_STATE_BUDGET).unwrap();
        let closed = 1.44 * 0.9 / (1.0 - 1.44 * 0.1);
        assert_relative_eq!(sol.average_cost, closed, max_relative = 1e-7);
        assert_relative_eq!(closed, 1.51402, epsilon = 1e-5);
    }

    #[test]
    fn full_budget_is_sum_of_independent_chains() {
        let a = AoiFunction::new(1.3, 1.0, 0.8).unwrap();
        let b = AoiFunction::new(1.2, 2.0, 0.6).unwrap();
        let cap = 30;
        let problem = DpProblem {
            costs: vec![(1..=cap).map(|d| a.value(d)).collect(), (1..=cap).map(|d| b.value(d)).collect()],
            probs: vec![a.p, b.p],
            m: 2,
            cap,
        };
        let sol = dp_optimal_policy(&problem, DEFAULT_STATE_BUDGET).unwrap();
        let geo = |g: &AoiFunction| g.beta * g.alpha * g.p / g.drift_margin();
        assert_relative_eq!(sol.average_cost, geo(&a) + geo(&b), max_relative = 1e-5);
    }

    #[test]
    fn optimal_policy_beats_any_fixed_rule() {
        let a = AoiFunction::new(1.3, 1.0, 0.9).unwrap();
        let b = AoiFunction::new(1.15, 3.0, 0.7).unwrap();
        let cap = 20;
        let problem = DpProblem {
            costs: vec![(1..=cap).map(|d| a.value(d)).collect(), (1..=cap).map(|d| b.value(d)).collect()],
            probs: vec![a.p, b.p],
            m: 1,
            cap,
        };
        let sol = dp_optimal_policy(&problem, DEFAULT_STATE_BUDGET).unwrap();
        let greedy =
            evaluate_policy(&problem, DEFAULT_STATE_BUDGET, |d| vec![if d[0] >= d[1] { 0 } else { 1 }]).unwrap();
        let own = evaluate_policy(&problem, DEFAULT_STATE_BUDGET, |d| sol.action_at(&problem, d).to_vec()).unwrap();
        assert!(sol.average_cost <= greedy + 1e-9);
        assert_relative_eq!(own, sol.average_cost, max_relative = 1e-7);
    }

    #[test]
    fn state_budget_is_enforced() {
        let problem = DpProblem { costs: vec![vec![1.0; 30]; 5], probs: vec![0.9; 5], m: 2, cap: 30 };
        assert!(matches!(dp_optimal_policy(&problem, 1000), Err(Error::Resource { .. })));
    }

    #[test]
    fn state_indexing_round_trips() {
        let problem = DpProblem { costs: vec![vec![1.0; 7]; 3], probs: vec![0.9; 3], m: 1, cap: 7 };
        for s in 0..343 {
            assert_eq!(problem.state_index(&problem.state_deltas(s)), s);
        }
        assert_eq!(combinations(4, 2).len(), 6);
    }
}
