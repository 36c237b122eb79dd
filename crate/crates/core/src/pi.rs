//! Policy iteration on the finite and LQ backends, plus independent
//! value-iteration oracles for `V*`.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::system::{FiniteProblem, LqProblem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueFn {
    Table(Vec<f64>),
    /// `V(x) = xᵀPx`.
    Quadratic(#[serde(with = "linalg::rows")] Mat),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Table(Vec<usize>),
    /// `u = Kx`.
    Gain(#[serde(with = "linalg::rows")] Mat),
}

impl ValueFn {
    pub fn table(&self) -> Result<&[f64]> {
        match self {
            ValueFn::Table(v) => Ok(v),
            ValueFn::Quadratic(_) => Err(Error::Shape("expected a tabular value function".into())),
        }
    }

    pub fn matrix(&self) -> Result<&Mat> {
        match self {
            ValueFn::Quadratic(p) => Ok(p),
            ValueFn::Table(_) => Err(Error::Shape("expected a quadratic value function".into())),
        }
    }

    pub fn at_vector(&self, x: &DVector<f64>) -> Result<f64> {
        let p = self.matrix()?;
        Ok((x.transpose() * p * x)[(0, 0)])
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ValueFn::Table(v) => v.iter().all(|x| x.is_finite()),
            ValueFn::Quadratic(p) => p.iter().all(|x| x.is_finite()),
        }
    }
}

impl Policy {
    pub fn table(&self) -> Result<&[usize]> {
        match self {
            Policy::Table(t) => Ok(t),
            Policy::Gain(_) => Err(Error::Shape("expected a tabular policy".into())),
        }
    }

    pub fn gain(&self) -> Result<&Mat> {
        match self {
            Policy::Gain(k) => Ok(k),
            Policy::Table(_) => Err(Error::Shape("expected a gain policy".into())),
        }
    }
}

/// The backend operations policy iteration needs.
pub trait PolicyIterate {
    /// Exact cost of following `policy` forever.
    fn evaluate_policy(&self, policy: &Policy) -> Result<ValueFn>;
    /// Greedy policy with respect to `value`.
    fn improve_policy(&self, value: &ValueFn) -> Result<Policy>;
    /// Sup-norm distance between `value` and its Bellman image.
    fn bellman_residual(&self, value: &ValueFn) -> Result<f64>;
    fn default_max_iters(&self) -> usize;
    fn discount(&self) -> f64;
}

impl PolicyIterate for FiniteProblem {
    /// Solves `(I − γT_h)V = ℓ_h` exactly. `T_h` is a functional graph, so
    /// every path ends in a cycle whose value has a closed form; the rest
    /// follows by back substitution.
    fn evaluate_policy(&self, policy: &Policy) -> Result<ValueFn> {
        let h = policy.table()?;
        self.check_policy(h)?;
        let g = self.gamma();
        let n = self.n_states();
        const NEW: u8 = 0;
        const ON_PATH: u8 = 1;
        const DONE: u8 = 2;
        let mut mark = vec![NEW; n];
        let mut v = vec![0.0; n];
        let mut path = Vec::new();
        for start in 0..n {
            if mark[start] != NEW {
                continue;
            }
            path.clear();
            let mut x = start;
            while mark[x] == NEW {
                mark[x] = ON_PATH;
                path.push(x);
                x = self.next(x, h[x]);
            }
            let mut tail_end = path.len();
            if mark[x] == ON_PATH {
                let p = path.iter().position(|&y| y == x).expect("state on path");
                let cycle = &path[p..];
                let len = cycle.len();
                let mut sum = 0.0;
                let mut disc = 1.0;
                for &y in cycle {
                    sum += disc * self.cost(y, h[y]);
                    disc *= g;
                }
                v[cycle[0]] = sum / (1.0 - disc);
                for j in (1..len).rev() {
                    let y = cycle[j];
                    let succ = cycle[(j + 1) % len];
                    v[y] = self.cost(y, h[y]) + g * v[succ];
                }
                for &y in cycle {
                    mark[y] = DONE;
                }
                tail_end = p;
            }
            for &y in path[..tail_end].iter().rev() {
                v[y] = self.cost(y, h[y]) + g * v[self.next(y, h[y])];
                mark[y] = DONE;
            }
        }
        Ok(ValueFn::Table(v))
    }

    fn improve_policy(&self, value: &ValueFn) -> Result<Policy> {
        let v = self.check_values(value)?;
        let g = self.gamma();
        let policy = (0..self.n_states())
            .into_par_iter()
            .map(|x| {
                let mut best = (f64::INFINITY, 0);
                for (u, (y, c)) in self.row(x).enumerate() {
                    let q = c + g * v[y];
                    if q < best.0 {
                        best = (q, u);
                    }
                }
                best.1
            })
            .collect();
        Ok(Policy::Table(policy))
    }

    fn bellman_residual(&self, value: &ValueFn) -> Result<f64> {
        let v = self.check_values(value)?;
        let tv = bellman_image(self, v);
        Ok(v.iter().zip(&tv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    fn default_max_iters(&self) -> usize {
        10 * self.n_states()
    }

    fn discount(&self) -> f64 {
        self.gamma()
    }
}

trait CheckValues {
    fn check_values<'a>(&self, value: &'a ValueFn) -> Result<&'a [f64]>;
}

impl CheckValues for FiniteProblem {
    fn check_values<'a>(&self, value: &'a ValueFn) -> Result<&'a [f64]> {
        let v = value.table()?;
        if v.len() != self.n_states() {
            return Err(Error::Shape(format!("value table has {} entries for {} states", v.len(), self.n_states())));
        }
        Ok(v)
    }
}

/// `(TV)(x) = min_u ℓ(x,u) + γV(f(x,u))`.
pub fn bellman_image(p: &FiniteProblem, v: &[f64]) -> Vec<f64> {
    let g = p.gamma();
    (0..p.n_states())
        .into_par_iter()
        .map(|x| p.row(x).map(|(y, c)| c + g * v[y]).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Cap on Lyapunov doubling steps; each squares the scaled closed loop.
const LYAP_MAX_DOUBLINGS: usize = 200;

/// Solves `P = Q_K + Fᵀ P F` with `F = √γ(A + BK)` by doubling:
/// `Pⱼ₊₁ = Pⱼ + FⱼᵀPⱼFⱼ`, `Fⱼ₊₁ = Fⱼ²`.
pub fn discounted_lyapunov(lq: &LqProblem, k: &Mat) -> Result<Mat> {
    let f0 = lq.closed_loop(k) * lq.gamma.sqrt();
    let radius = linalg::spectral_radius(&f0);
    if radius >= 1.0 {
        return Err(Error::EvaluationDiverges { scaled_radius: radius });
    }
    let mut p = &lq.q + k.transpose() * &lq.r * k;
    let mut f = f0;
    for _ in 0..LYAP_MAX_DOUBLINGS {
        let inc = f.transpose() * &p * &f;
        p += &inc;
        f = &f * &f;
        if inc.amax() <= 1e-12 * p.amax().max(1e-300) || f.amax() == 0.0 {
            return Ok(linalg::symmetrize(&p));
        }
    }
    Err(Error::EvaluationDiverges { scaled_radius: radius })
}

/// `K⁺ = −γ(R + γBᵀPB)⁻¹BᵀPA`.
pub fn greedy_gain(lq: &LqProblem, p: &Mat) -> Result<Mat> {
    let g = lq.gamma;
    let lhs = &lq.r + lq.b.transpose() * p * &lq.b * g;
    let rhs = lq.b.transpose() * p * &lq.a * g;
    let chol = lhs.cholesky().ok_or_else(|| Error::Backend("R + γBᵀPB not positive definite".into()))?;
    Ok(-chol.solve(&rhs))
}

/// Discounted Riccati map `T(P) = Q + γAᵀPA − γ²AᵀPB(R + γBᵀPB)⁻¹BᵀPA`.
pub fn riccati_map(lq: &LqProblem, p: &Mat) -> Result<Mat> {
    let k = greedy_gain(lq, p)?;
    let g = lq.gamma;
    let acl = lq.closed_loop(&k);
    // Evaluated in the equivalent closed-loop form for symmetry.
    Ok(linalg::symmetrize(&(&lq.q + k.transpose() * &lq.r * &k + acl.transpose() * p * &acl * g)))
}

impl PolicyIterate for LqProblem {
    fn evaluate_policy(&self, policy: &Policy) -> Result<ValueFn> {
        let k = policy.gain()?;
        if k.nrows() != self.n_inputs() || k.ncols() != self.n_states() {
            return Err(Error::Shape(format!("gain must be {}x{}", self.n_inputs(), self.n_states())));
        }
        Ok(ValueFn::Quadratic(discounted_lyapunov(self, k)?))
    }

    fn improve_policy(&self, value: &ValueFn) -> Result<Policy> {
        Ok(Policy::Gain(greedy_gain(self, value.matrix()?)?))
    }

    fn bellman_residual(&self, value: &ValueFn) -> Result<f64> {
        let p = value.matrix()?;
        Ok(linalg::spectral_norm(&(p - riccati_map(self, p)?)))
    }

    fn default_max_iters(&self) -> usize {
        100
    }

    fn discount(&self) -> f64 {
        self.gamma
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Residual,
    PolicyRepeat,
    MaxIters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiIterate {
    pub policy: Policy,
    pub value: ValueFn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiRun {
    pub gamma: f64,
    pub iterates: Vec<PiIterate>,
    pub bellman_residuals: Vec<f64>,
    pub converged_at: Option<usize>,
    pub stop_reason: StopReason,
    pub residual_tol: f64,
}

impl PiRun {
    /// Iterate `i`; past convergence the fixed point repeats.
    pub fn at(&self, i: usize) -> &PiIterate {
        &self.iterates[i.min(self.iterates.len() - 1)]
    }

    pub fn policy_at(&self, i: usize) -> &Policy {
        &self.at(i).policy
    }

    pub fn value_at(&self, i: usize) -> &ValueFn {
        &self.at(i).value
    }

    pub fn last(&self) -> &PiIterate {
        self.iterates.last().expect("at least the initial iterate")
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }
}

pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-10;

/// Policy iteration from `h0`. Stops on a Bellman residual at most
/// `residual_tol`, a repeated policy, or after `max_iters` improvements.
pub fn run_pi<P: PolicyIterate>(problem: &P, h0: Policy, max_iters: Option<usize>, residual_tol: f64) -> Result<PiRun> {
    let gamma = problem.discount();
    let max_iters = max_iters.unwrap_or_else(|| problem.default_max_iters());
    let v0 = problem.evaluate_policy(&h0)?;
    if !v0.is_finite() {
        return Err(Error::InfeasibleInitialPolicy { state: "some".into(), rate: f64::INFINITY });
    }
    let mut residuals = vec![problem.bellman_residual(&v0)?];
    let mut iterates = vec![PiIterate { policy: h0, value: v0 }];
    if residuals[0] <= residual_tol {
        return Ok(PiRun {
            gamma,
            iterates,
            bellman_residuals: residuals,
            converged_at: Some(0),
            stop_reason: StopReason::Residual,
            residual_tol,
        });
    }
    for i in 1..=max_iters {
        let prev = iterates.last().expect("nonempty");
        let policy = problem.improve_policy(&prev.value)?;
        if policy == prev.policy {
            return Ok(PiRun {
                gamma,
                iterates,
                bellman_residuals: residuals,
                converged_at: Some(i - 1),
                stop_reason: StopReason::PolicyRepeat,
                residual_tol,
            });
        }
        let value = problem.evaluate_policy(&policy)?;
        let r = problem.bellman_residual(&value)?;
        iterates.push(PiIterate { policy, value });
        residuals.push(r);
        if r <= residual_tol {
            return Ok(PiRun {
                gamma,
                iterates,
                bellman_residuals: residuals,
                converged_at: Some(i),
                stop_reason: StopReason::Residual,
                residual_tol,
            });
        }
    }
    Ok(PiRun { gamma, iterates, bellman_residuals: residuals, converged_at: None, stop_reason: StopReason::MaxIters, residual_tol })
}

/// Value iteration from `V ≡ 0` until the step change is at most
/// `sup_tol(1−γ)/γ`, which puts the result within `sup_tol` of `V*`.
pub fn value_iteration_oracle(p: &FiniteProblem, sup_tol: f64) -> ValueFn {
    let g = p.gamma();
    let stop = sup_tol * (1.0 - g) / g;
    let mut v = vec![0.0; p.n_states()];
    loop {
        let next = bellman_image(p, &v);
        let change = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change <= stop {
            return ValueFn::Table(v);
        }
    }
}

/// Greedy selection from the optimal value: a closed loop generating `φ*`.
pub fn optimal_closed_loop<P: PolicyIterate>(problem: &P, v_star: &ValueFn) -> Result<Policy> {
    problem.improve_policy(v_star)
}

/// Riccati value iteration from `P = 0` (the `√γ` scaling is inside the
/// map), stopped when successive iterates differ by at most `tol` in
/// spectral norm.
pub fn riccati_oracle(lq: &LqProblem, tol: f64, max_iters: usize) -> Result<Mat> {
    let n = lq.n_states();
    let mut p = Mat::zeros(n, n);
    for _ in 0..max_iters {
        let next = riccati_map(lq, &p)?;
        let change = linalg::spectral_norm(&(&next - &p));
        p = next;
        if change <= tol {
            return Ok(p);
        }
    }
    Err(Error::Backend(format!("Riccati iteration did not settle within {max_iters} steps")))
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;

    use super::*;

    fn dense_solve(p: &FiniteProblem, h: &[usize]) -> Vec<f64> {
        let n = p.n_states();
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::zeros(n);
        for x in 0..n {
            m[(x, p.next(x, h[x]))] -= p.gamma();
            rhs[x] = p.cost(x, h[x]);
        }
        m.lu().solve(&rhs).unwrap().iter().copied().collect()
    }

    fn sup(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn evaluation_examples() {
        let zero = FiniteProblem::new(vec![vec![1], vec![0]], vec![vec![0.0], vec![0.0]], vec![0.0; 2], 0.7).unwrap();
        assert_eq!(zero.evaluate_policy(&Policy::Table(vec![0, 0])).unwrap(), ValueFn::Table(vec![0.0, 0.0]));
        let loop1 = FiniteProblem::new(vec![vec![0]], vec![vec![1.0]], vec![1.0], 0.5).unwrap();
        assert_eq!(loop1.evaluate_policy(&Policy::Table(vec![0])).unwrap(), ValueFn::Table(vec![2.0]));
        let lq = LqProblem::scalar(2.0, 1.0, 1.0, 1.0, 0.2, 0.0).unwrap();
        let p = lq.evaluate_policy(&Policy::Gain(DMatrix::zeros(1, 1))).unwrap();
        assert!((p.matrix().unwrap()[(0, 0)] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn functional_graph_solve_matches_dense_lu() {
        for seed in 0..10 {
            let p = FiniteProblem::random(60, 4, 0.93, seed).unwrap();
            let h: Vec<usize> = (0..60).map(|x| (x * 7 + seed as usize) % 4).collect();
            let v = p.evaluate_policy(&Policy::Table(h.clone())).unwrap();
            assert!(sup(v.table().unwrap(), &dense_solve(&p, &h)) < 1e-10);
        }
    }

    #[test]
    fn lyapunov_rejects_unstable_scaled_loop() {
        let lq = LqProblem::scalar(2.0, 1.0, 1.0, 1.0, 0.5, 0.0).unwrap();
        assert!(matches!(
            lq.evaluate_policy(&Policy::Gain(DMatrix::zeros(1, 1))),
            Err(Error::EvaluationDiverges { .. })
        ));
    }

    #[test]
    fn improvement_examples() {
        let single = FiniteProblem::new(vec![vec![1], vec![0]], vec![vec![1.0], vec![2.0]], vec![1.0; 2], 0.5).unwrap();
        assert_eq!(single.improve_policy(&ValueFn::Table(vec![9.0, 1.0])).unwrap(), Policy::Table(vec![0, 0]));
        let tie = FiniteProblem::new(vec![vec![0, 0]], vec![vec![3.0, 3.0]], vec![1.0], 0.5).unwrap();
        assert_eq!(tie.improve_policy(&ValueFn::Table(vec![0.0])).unwrap(), Policy::Table(vec![0]));
        let lq = LqProblem::scalar(2.0, 1.0, 1.0, 1.0, 0.2, 0.0).unwrap();
        let k = lq.improve_policy(&ValueFn::Quadratic(DMatrix::from_element(1, 1, 5.0))).unwrap();
        assert!((k.gain().unwrap()[(0, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn value_iteration_examples() {
        let loop1 = FiniteProblem::new(vec![vec![0]], vec![vec![1.0]], vec![1.0], 0.9).unwrap();
        assert!((value_iteration_oracle(&loop1, 1e-12).table().unwrap()[0] - 10.0).abs() < 1e-12);
        let two = FiniteProblem::new(vec![vec![0, 1], vec![1]], vec![vec![1.0, 5.0], vec![0.0]], vec![1.0, 0.0], 0.5)
            .unwrap();
        assert!((value_iteration_oracle(&two, 1e-12).table().unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pi_starting_at_optimum_converges_immediately() {
        let two = FiniteProblem::new(vec![vec![0, 1], vec![1]], vec![vec![1.0, 5.0], vec![0.0]], vec![1.0, 0.0], 0.5)
            .unwrap();
        let run = run_pi(&two, Policy::Table(vec![0, 0]), None, DEFAULT_RESIDUAL_TOL).unwrap();
        assert_eq!(run.converged_at, Some(0));
        assert!(run.bellman_residuals[0] <= DEFAULT_RESIDUAL_TOL);
    }

    #[test]
    fn pi_matches_oracle_on_random_problem() {
        let p = FiniteProblem::random(50, 5, 0.9, 0).unwrap();
        let run = run_pi(&p, Policy::Table(vec![0; 50]), None, DEFAULT_RESIDUAL_TOL).unwrap();
        assert!(run.converged_at.is_some());
        let oracle = value_iteration_oracle(&p, 1e-10);
        assert!(sup(run.last().value.table().unwrap(), oracle.table().unwrap()) < 1e-8);
        for w in run.iterates.windows(2) {
            let (a, b) = (w[0].value.table().unwrap(), w[1].value.table().unwrap());
            assert!(a.iter().zip(b).all(|(x, y)| *y <= x + 1e-9));
        }
    }

    #[test]
    fn lq_scalar_pi_reaches_riccati_root() {
        // P = 1 + 0.8P − 0.16P²/(1 + 0.2P)  ⇔  0.2P² = 1
        let lq = LqProblem::scalar(2.0, 1.0, 1.0, 1.0, 0.2, 0.0).unwrap();
        let run = run_pi(&lq, Policy::Gain(DMatrix::zeros(1, 1)), None, DEFAULT_RESIDUAL_TOL).unwrap();
        let p = run.last().value.matrix().unwrap()[(0, 0)];
        assert!((p - 5f64.sqrt()).abs() < 1e-10, "{p}");
        let oracle = riccati_oracle(&lq, 1e-13, 100_000).unwrap();
        assert!((oracle[(0, 0)] - 5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn lq_matrix_pi_matches_riccati_oracle() {
        let lq = LqProblem::example(LqProblem::example_k0(), 0.7).unwrap();
        let run = run_pi(&lq, Policy::Gain(lq.k0.clone()), None, DEFAULT_RESIDUAL_TOL).unwrap();
        assert_eq!(run.stop_reason, StopReason::Residual);
        let oracle = riccati_oracle(&lq, 1e-13, 100_000).unwrap();
        assert!(linalg::spectral_norm(&(run.last().value.matrix().unwrap() - oracle)) < 1e-8);
    }

    #[test]
    fn serde_roundtrip() {
        let lq = LqProblem::example(LqProblem::example_k0(), 0.7).unwrap();
        let run = run_pi(&lq, Policy::Gain(lq.k0.clone()), Some(3), DEFAULT_RESIDUAL_TOL).unwrap();
        let back: PiRun = serde_json::from_str(&serde_json::to_string(&run).unwrap()).unwrap();
        assert_eq!(back.iterates.len(), run.iterates.len());
    }
}
