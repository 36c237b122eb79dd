use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_gamma, Trajectory};
use crate::error::{Error, Result};

/// Exact finite deterministic problem. Actions at state `x` are the indices
/// `0..n_actions(x)`; transition and cost tables are stored flat (CSR style).
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteProblem {
    offsets: Vec<usize>,
    successor: Vec<u32>,
    cost: Vec<f64>,
    sigma: Vec<f64>,
    gamma: f64,
}

/// Row-per-state JSON form of a [`FiniteProblem`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiniteSpec {
    pub gamma: f64,
    pub successor: Vec<Vec<usize>>,
    pub stage_cost: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_policy: Option<Vec<usize>>,
}

impl FiniteProblem {
    pub fn new(successor: Vec<Vec<usize>>, stage_cost: Vec<Vec<f64>>, sigma: Vec<f64>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let n = successor.len();
        if n == 0 {
            return Err(Error::InvalidProblem("no states".into()));
        }
        if stage_cost.len() != n || sigma.len() != n {
            return Err(Error::Shape(format!(
                "successor has {n} rows, stage_cost {} and sigma {}",
                stage_cost.len(),
                sigma.len()
            )));
        }
        if n > u32::MAX as usize {
            return Err(Error::InvalidProblem("too many states".into()));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut flat_succ = Vec::new();
        let mut flat_cost = Vec::new();
        for (x, (succ, cost)) in successor.iter().zip(&stage_cost).enumerate() {
            if succ.len() != cost.len() {
                return Err(Error::Shape(format!("state {x}: {} successors but {} costs", succ.len(), cost.len())));
            }
            if let Some(&y) = succ.iter().find(|&&y| y >= n) {
                return Err(Error::InvalidProblem(format!("state {x}: successor {y} out of range")));
            }
            flat_succ.extend(succ.iter().map(|&y| y as u32));
            flat_cost.extend_from_slice(cost);
            offsets.push(flat_succ.len());
        }
        Self::from_csr(offsets, flat_succ, flat_cost, sigma, gamma)
    }

    /// Builds from flat tables: the actions of state `x` occupy
    /// `offsets[x]..offsets[x + 1]`.
    pub fn from_csr(offsets: Vec<usize>, successor: Vec<u32>, cost: Vec<f64>, sigma: Vec<f64>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let n = sigma.len();
        if n == 0 {
            return Err(Error::InvalidProblem("no states".into()));
        }
        if offsets.len() != n + 1 || offsets[0] != 0 || offsets[n] != successor.len() || cost.len() != successor.len() {
            return Err(Error::Shape("inconsistent flat transition tables".into()));
        }
        for x in 0..n {
            if offsets[x + 1] <= offsets[x] {
                return Err(Error::InvalidProblem(format!("state {x} has no admissible action")));
            }
        }
        if let Some(j) = successor.iter().position(|&y| y as usize >= n) {
            return Err(Error::InvalidProblem(format!("successor {} out of range", successor[j])));
        }
        if let Some(c) = cost.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
            return Err(Error::InvalidProblem(format!("stage cost {c} must be finite and >= 0")));
        }
        if let Some((x, s)) = sigma.iter().enumerate().find(|(_, s)| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidProblem(format!("sigma({x}) = {s} must be finite and >= 0")));
        }
        Ok(Self { offsets, successor, cost, sigma, gamma })
    }

    pub fn from_spec(spec: &FiniteSpec) -> Result<Self> {
        Self::new(spec.successor.clone(), spec.stage_cost.clone(), spec.sigma.clone(), spec.gamma)
    }

    pub fn to_spec(&self) -> FiniteSpec {
        FiniteSpec {
            gamma: self.gamma,
            successor: (0..self.n_states())
                .map(|x| self.row_range(x).map(|j| self.successor[j] as usize).collect())
                .collect(),
            stage_cost: (0..self.n_states()).map(|x| self.cost[self.row_range(x)].to_vec()).collect(),
            sigma: self.sigma.clone(),
            initial_policy: None,
        }
    }

    pub fn n_states(&self) -> usize {
        self.sigma.len()
    }

    pub fn n_actions(&self, x: usize) -> usize {
        self.offsets[x + 1] - self.offsets[x]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self { gamma, ..self.clone() })
    }

    pub fn sigma(&self, x: usize) -> f64 {
        self.sigma[x]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    fn row_range(&self, x: usize) -> std::ops::Range<usize> {
        self.offsets[x]..self.offsets[x + 1]
    }

    /// Successor and cost of every admissible action at `x`.
    pub fn row(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row_range(x).map(move |j| (self.successor[j] as usize, self.cost[j]))
    }

    fn check_action(&self, x: usize, u: usize) -> Result<()> {
        if x >= self.n_states() || u >= self.n_actions(x) {
            return Err(Error::Admissibility { state: x.to_string(), action: u.to_string() });
        }
        Ok(())
    }

    pub fn step(&self, x: usize, u: usize) -> Result<usize> {
        self.check_action(x, u)?;
        Ok(self.successor[self.offsets[x] + u] as usize)
    }

    pub fn stage_cost(&self, x: usize, u: usize) -> Result<f64> {
        self.check_action(x, u)?;
        Ok(self.cost[self.offsets[x] + u])
    }

    /// Unchecked successor; `u` must be admissible.
    #[inline]
    pub fn next(&self, x: usize, u: usize) -> usize {
        self.successor[self.offsets[x] + u] as usize
    }

    #[inline]
    pub fn cost(&self, x: usize, u: usize) -> f64 {
        self.cost[self.offsets[x] + u]
    }

    pub fn check_policy(&self, policy: &[usize]) -> Result<()> {
        if policy.len() != self.n_states() {
            return Err(Error::Shape(format!("policy has {} entries for {} states", policy.len(), self.n_states())));
        }
        for (x, &u) in policy.iter().enumerate() {
            self.check_action(x, u)?;
        }
        Ok(())
    }

    pub fn rollout(&self, policy: &[usize], x0: usize, horizon: usize) -> Result<Trajectory<usize>> {
        self.check_policy(policy)?;
        let mut traj = Trajectory::start(x0);
        let mut x = x0;
        for _ in 0..horizon {
            let u = policy[x];
            traj.costs.push(self.cost(x, u));
            x = self.next(x, u);
            traj.states.push(x);
        }
        Ok(traj)
    }

    /// Exact discounted cost from `x0`: the trajectory is followed until a
    /// state repeats, then the cycle is summed in closed form.
    pub fn discounted_cost(&self, policy: &[usize], x0: usize) -> Result<f64> {
        self.check_policy(policy)?;
        let g = self.gamma;
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut costs = Vec::new();
        let mut x = x0;
        while let std::collections::hash_map::Entry::Vacant(e) = seen.entry(x) {
            e.insert(costs.len());
            costs.push(self.cost(x, policy[x]));
            x = self.next(x, policy[x]);
        }
        let t = seen[&x];
        let transient: f64 = costs[..t].iter().enumerate().map(|(k, c)| g.powi(k as i32) * c).sum();
        let cycle: f64 = costs[t..].iter().enumerate().map(|(k, c)| g.powi(k as i32) * c).sum();
        let len = (costs.len() - t) as i32;
        Ok(transient + g.powi(t as i32) * cycle / (1.0 - g.powi(len)))
    }

    /// Random problem with uniform successors and costs in `[0, 1)`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successor = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(0..n_states)).collect())
            .collect();
        let cost = (0..n_states).map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect()).collect();
        let sigma = (0..n_states).map(|_| rng.random::<f64>()).collect();
        Self::new(successor, cost, sigma, gamma)
    }

    /// Random problem built to admit the detectability function `W = w σ`.
    ///
    /// State 0 is an absorbing zero-cost attractor with σ = 0. Action 0 of
    /// every other state jumps to a strictly lower index, so the attractor is
    /// reachable from everywhere. Stage costs are
    /// `σ(x) + w·max(0, σ(y) − σ(x)) + extra`, which makes
    /// `W(y) − W(x) ≤ −σ(x) + ℓ(x, u)` hold on every transition.
    pub fn random_certified(n_states: usize, n_actions: usize, gamma: f64, w: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma: Vec<f64> =
            (0..n_states).map(|x| if x == 0 { 0.0 } else { rng.random_range(0.5..2.0) }).collect();
        let mut successor = Vec::with_capacity(n_states);
        let mut cost = Vec::with_capacity(n_states);
        for x in 0..n_states {
            let mut succ = Vec::with_capacity(n_actions);
            let mut c = Vec::with_capacity(n_actions);
            for u in 0..n_actions {
                let y = if x == 0 && u == 0 {
                    0
                } else if u == 0 {
                    rng.random_range(0..x)
                } else {
                    rng.random_range(0..n_states)
                };
                let extra = if x == 0 && u == 0 { 0.0 } else { rng.random_range(0.0..1.0) };
                c.push(sigma[x] + w * (sigma[y] - sigma[x]).max(0.0) + extra);
                succ.push(y);
            }
            successor.push(succ);
            cost.push(c);
        }
        Self::new(successor, cost, sigma, gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_cycle() -> FiniteProblem {
        FiniteProblem::new(vec![vec![1], vec![2], vec![0]], vec![vec![1.0], vec![2.0], vec![3.0]], vec![1.0; 3], 0.9)
            .unwrap()
    }

    fn partial_sum(p: &FiniteProblem, policy: &[usize], x0: usize, steps: usize) -> f64 {
        let traj = p.rollout(policy, x0, steps).unwrap();
        traj.costs.iter().enumerate().map(|(k, c)| p.gamma().powi(k as i32) * c).sum()
    }

    #[test]
    fn discounted_cost_examples() {
        let zero = FiniteProblem::new(vec![vec![1], vec![0]], vec![vec![0.0], vec![0.0]], vec![0.0; 2], 0.7).unwrap();
        assert_eq!(zero.discounted_cost(&[0, 0], 0).unwrap(), 0.0);
        let loop1 = FiniteProblem::new(vec![vec![0]], vec![vec![1.0]], vec![1.0], 0.5).unwrap();
        assert!((loop1.discounted_cost(&[0], 0).unwrap() - 2.0).abs() < 1e-15);
        // hand formula (1 + 0.9*2 + 0.81*3) / (1 - 0.729)
        let p = three_cycle();
        let hand = (1.0 + 0.9 * 2.0 + 0.81 * 3.0) / (1.0 - 0.729);
        let exact = p.discounted_cost(&[0, 0, 0], 0).unwrap();
        assert!((exact - hand).abs() < 1e-12);
        let oracle = partial_sum(&p, &[0, 0, 0], 0, 600);
        assert!((exact - oracle).abs() < 1e-9);
    }

    #[test]
    fn rollout_horizon_zero_is_initial_state() {
        let p = three_cycle();
        let t = p.rollout(&[0, 0, 0], 2, 0).unwrap();
        assert_eq!(t.states, vec![2]);
        assert!(t.costs.is_empty());
    }

    #[test]
    fn inadmissible_action_rejected() {
        let p = three_cycle();
        assert!(matches!(p.step(0, 1), Err(Error::Admissibility { .. })));
        assert!(matches!(p.check_policy(&[0, 3, 0]), Err(Error::Admissibility { .. })));
    }

    #[test]
    fn construction_invariants() {
        assert!(FiniteProblem::new(vec![vec![]], vec![vec![]], vec![0.0], 0.5).is_err());
        assert!(FiniteProblem::new(vec![vec![0]], vec![vec![-1.0]], vec![0.0], 0.5).is_err());
        assert!(FiniteProblem::new(vec![vec![0]], vec![vec![1.0]], vec![-0.1], 0.5).is_err());
        assert!(FiniteProblem::new(vec![vec![0]], vec![vec![1.0]], vec![0.0], 1.0).is_err());
        assert!(FiniteProblem::new(vec![vec![3]], vec![vec![1.0]], vec![0.0], 0.5).is_err());
    }

    #[test]
    fn cost_consistency_on_random_problem() {
        let p = FiniteProblem::random(40, 4, 0.95, 7).unwrap();
        let policy: Vec<usize> = (0..40).map(|x| x % 4).collect();
        for x in 0..40 {
            let v = p.discounted_cost(&policy, x).unwrap();
            let y = p.next(x, policy[x]);
            let rhs = p.cost(x, policy[x]) + p.gamma() * p.discounted_cost(&policy, y).unwrap();
            assert!((v - rhs).abs() < 1e-9, "state {x}: {v} vs {rhs}");
        }
    }

    #[test]
    fn spec_roundtrip() {
        let p = FiniteProblem::random(5, 3, 0.8, 1).unwrap();
        let q = FiniteProblem::from_spec(&p.to_spec()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn certified_generator_shape() {
        let p = FiniteProblem::random_certified(30, 4, 0.9, 0.5, 3).unwrap();
        assert_eq!(p.sigma(0), 0.0);
        assert_eq!(p.next(0, 0), 0);
        assert_eq!(p.cost(0, 0), 0.0);
        for x in 1..30 {
            assert!(p.next(x, 0) < x);
            for (y, c) in p.row(x) {
                assert!(c >= p.sigma(x) + 0.5 * (p.sigma(y) - p.sigma(x)).max(0.0));
            }
        }
    }
}
