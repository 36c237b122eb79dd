use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_gamma, halton_in_box, FiniteProblem, Trajectory};
use crate::error::{Error, Result};

/// Continuous plant behind a [`GridProblem`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridModel {
    /// `x₁⁺ = x₁ + u₁`, `x₂⁺ = x₂ + u₂`, `x₃⁺ = x₃ + x₁u₂ − x₂u₁`;
    /// `σ = x₁² + x₂² + 10|x₃|`, `ℓ = σ + |u|²`.
    Nonholonomic,
    /// `x⁺ = x + u` in any dimension; `σ = |x|²`, `ℓ = σ + |u|²`.
    Integrator,
}

impl GridModel {
    pub fn input_dim(self, state_dim: usize) -> usize {
        match self {
            GridModel::Nonholonomic => 2,
            GridModel::Integrator => state_dim,
        }
    }

    pub fn dynamics(self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            GridModel::Nonholonomic => {
                vec![x[0] + u[0], x[1] + u[1], x[2] + x[0] * u[1] - x[1] * u[0]]
            }
            GridModel::Integrator => x.iter().zip(u).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sigma(self, x: &[f64]) -> f64 {
        match self {
            GridModel::Nonholonomic => x[0] * x[0] + x[1] * x[1] + 10.0 * x[2].abs(),
            GridModel::Integrator => x.iter().map(|v| v * v).sum(),
        }
    }

    pub fn stage_cost(self, x: &[f64], u: &[f64]) -> f64 {
        self.sigma(x) + u.iter().map(|v| v * v).sum::<f64>()
    }

    /// Lipschitz constant of σ over the box.
    pub fn sigma_lipschitz(self, bounds: &[(f64, f64)]) -> f64 {
        let reach = |&(lo, hi): &(f64, f64)| lo.abs().max(hi.abs());
        match self {
            GridModel::Nonholonomic => {
                let a = 2.0 * reach(&bounds[0]);
                let b = 2.0 * reach(&bounds[1]);
                (a * a + b * b + 100.0).sqrt()
            }
            GridModel::Integrator => 2.0 * bounds.iter().map(|b| reach(b).powi(2)).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Nearest node in spacing-normalised coordinates, lowest index on ties.
    #[default]
    NearestNode,
    /// No projection: every in-box image must already be a node.
    Exact,
}

fn default_bounds() -> Vec<(f64, f64)> {
    vec![(-2.0, 2.0); 3]
}
fn default_points() -> usize {
    41
}
fn default_levels() -> usize {
    9
}
fn default_action_bounds() -> (f64, f64) {
    (-1.0, 1.0)
}

/// JSON description of a gridded continuous problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub gamma: f64,
    pub model: GridModel,
    #[serde(default = "default_bounds")]
    pub bounds: Vec<(f64, f64)>,
    #[serde(default = "default_points")]
    pub points_per_axis: usize,
    /// Levels per input axis of the uniform action grid.
    #[serde(default = "default_levels")]
    pub action_levels: usize,
    #[serde(default = "default_action_bounds")]
    pub action_bounds: (f64, f64),
    #[serde(default)]
    pub projection: Projection,
}

impl GridSpec {
    pub fn nonholonomic(gamma: f64) -> Self {
        Self {
            gamma,
            model: GridModel::Nonholonomic,
            bounds: default_bounds(),
            points_per_axis: default_points(),
            action_levels: default_levels(),
            action_bounds: default_action_bounds(),
            projection: Projection::NearestNode,
        }
    }
}

/// A continuous plant restricted to a rectangular grid of nodes. Node
/// indices are row-major with the last axis fastest; index `n_nodes()` is
/// the absorbing out-of-domain sink.
#[derive(Clone, Debug)]
pub struct GridProblem {
    spec: GridSpec,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    actions: Vec<Vec<f64>>,
}

/// The finite problem induced by a [`GridProblem`].
#[derive(Clone, Debug)]
pub struct GridAbstraction {
    pub finite: FiniteProblem,
    pub sink: usize,
    /// Largest distance between a continuous in-box image and its node.
    pub max_displacement: f64,
}

fn levels(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl GridProblem {
    pub fn new(spec: GridSpec) -> Result<Self> {
        check_gamma(spec.gamma)?;
        let dim = spec.bounds.len();
        match spec.model {
            GridModel::Nonholonomic if dim != 3 => {
                return Err(Error::Shape(format!("nonholonomic grid needs 3 axes, got {dim}")))
            }
            _ if dim == 0 => return Err(Error::Shape("grid needs at least one axis".into())),
            _ => {}
        }
        if spec.points_per_axis < 2 || spec.action_levels == 0 {
            return Err(Error::InvalidProblem("need >= 2 points per axis and >= 1 action level".into()));
        }
        if spec.bounds.iter().any(|&(lo, hi)| !(lo < hi)) || !(spec.action_bounds.0 <= spec.action_bounds.1) {
            return Err(Error::InvalidProblem("empty interval in grid bounds".into()));
        }
        let n = spec.points_per_axis;
        if (n as f64).powi(dim as i32) > u32::MAX as f64 / 2.0 {
            return Err(Error::InvalidProblem("grid too large".into()));
        }
        let spacing = spec.bounds.iter().map(|&(lo, hi)| (hi - lo) / (n - 1) as f64).collect();
        let mut strides = vec![1; dim];
        for d in (0..dim.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * n;
        }
        let lv = levels(spec.action_bounds.0, spec.action_bounds.1, spec.action_levels);
        let m = spec.model.input_dim(dim);
        let mut actions: Vec<Vec<f64>> = vec![vec![]];
        for _ in 0..m {
            actions = actions
                .into_iter()
                .flat_map(|prefix| {
                    lv.iter().map(move |&v| {
                        let mut a = prefix.clone();
                        a.push(v);
                        a
                    })
                })
                .collect();
        }
        Ok(Self { spec, spacing, strides, actions })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn model(&self) -> GridModel {
        self.spec.model
    }

    pub fn gamma(&self) -> f64 {
        self.spec.gamma
    }

    pub fn dim(&self) -> usize {
        self.spec.bounds.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.strides[0] * self.spec.points_per_axis
    }

    pub fn sink(&self) -> usize {
        self.n_nodes()
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let n = self.spec.points_per_axis;
        (0..self.dim())
            .map(|d| {
                let i = (node / self.strides[d]) % n;
                self.spec.bounds[d].0 + i as f64 * self.spacing[d]
            })
            .collect()
    }

    pub fn sigma_at(&self, x: &[f64]) -> f64 {
        self.spec.model.sigma(x)
    }

    /// σ of a node, or `Δ_grid` for the sink.
    pub fn sigma_node(&self, node: usize) -> f64 {
        if node == self.sink() {
            self.delta_grid()
        } else {
            self.sigma_at(&self.coords(node))
        }
    }

    pub fn dynamics(&self, x: &[f64], u: usize) -> Result<Vec<f64>> {
        let a = self
            .actions
            .get(u)
            .ok_or_else(|| Error::Admissibility { state: format!("{x:?}"), action: u.to_string() })?;
        Ok(self.spec.model.dynamics(x, a))
    }

    /// Node for a continuous point, or the sink when it lies more than half a
    /// cell outside the box. Per-axis rounding with halves rounded down gives
    /// the lowest-index nearest node.
    pub fn project(&self, y: &[f64]) -> Result<usize> {
        let n = self.spec.points_per_axis;
        let mut node = 0;
        for (d, &v) in y.iter().enumerate() {
            let t = (v - self.spec.bounds[d].0) / self.spacing[d];
            if !t.is_finite() || t < -0.5 || t > (n - 1) as f64 + 0.5 {
                return Ok(self.sink());
            }
            let i = match self.spec.projection {
                Projection::NearestNode => (t - 0.5).ceil().clamp(0.0, (n - 1) as f64) as usize,
                Projection::Exact => {
                    let r = t.round();
                    if (t - r).abs() > 1e-9 {
                        return Err(Error::InvalidProblem(format!("{y:?} is not a grid node")));
                    }
                    if r < 0.0 || r > (n - 1) as f64 {
                        return Ok(self.sink());
                    }
                    r as usize
                }
            };
            node += i * self.strides[d];
        }
        Ok(node)
    }

    /// Projected successor of a node.
    pub fn step(&self, node: usize, u: usize) -> Result<usize> {
        if node == self.sink() {
            if u >= self.actions.len() {
                return Err(Error::Admissibility { state: "sink".into(), action: u.to_string() });
            }
            return Ok(node);
        }
        self.project(&self.dynamics(&self.coords(node), u)?)
    }

    /// Smallest σ over boundary nodes: the grid covers `{σ ≤ Δ_grid}`.
    pub fn delta_grid(&self) -> f64 {
        let n = self.spec.points_per_axis;
        let mut best = f64::INFINITY;
        for node in 0..self.n_nodes() {
            let on_boundary = (0..self.dim()).any(|d| {
                let i = (node / self.strides[d]) % n;
                i == 0 || i == n - 1
            });
            if on_boundary {
                best = best.min(self.sigma_at(&self.coords(node)));
            }
        }
        best
    }

    /// Largest stage cost over nodes and actions; the sink's stage cost.
    pub fn l_max(&self) -> f64 {
        (0..self.n_nodes())
            .into_par_iter()
            .map(|node| {
                let x = self.coords(node);
                self.actions.iter().map(|a| self.spec.model.stage_cost(&x, a)).fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max)
    }

    pub fn abstraction(&self) -> Result<GridAbstraction> {
        let m = self.actions.len();
        let nodes = self.n_nodes();
        let model = self.spec.model;
        let rows: Vec<(Vec<u32>, Vec<f64>, f64)> = (0..nodes)
            .into_par_iter()
            .map(|node| {
                let x = self.coords(node);
                let mut succ = Vec::with_capacity(m);
                let mut cost = Vec::with_capacity(m);
                let mut disp: f64 = 0.0;
                for a in &self.actions {
                    let y = model.dynamics(&x, a);
                    let target = self.project(&y)?;
                    if target != self.sink() {
                        let z = self.coords(target);
                        let d = y.iter().zip(&z).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                        disp = disp.max(d);
                    }
                    succ.push(target as u32);
                    cost.push(model.stage_cost(&x, a));
                }
                Ok((succ, cost, disp))
            })
            .collect::<Result<_>>()?;
        let l_max = rows.iter().flat_map(|r| r.1.iter().copied()).fold(0.0, f64::max);
        let max_displacement = rows.iter().map(|r| r.2).fold(0.0, f64::max);
        let mut successor = Vec::with_capacity((nodes + 1) * m);
        let mut cost = Vec::with_capacity((nodes + 1) * m);
        for (s, c, _) in rows {
            successor.extend(s);
            cost.extend(c);
        }
        successor.extend(std::iter::repeat_n(nodes as u32, m));
        cost.extend(std::iter::repeat_n(l_max, m));
        let offsets = (0..=nodes + 1).map(|x| x * m).collect();
        let mut sigma: Vec<f64> = (0..nodes).into_par_iter().map(|node| self.sigma_at(&self.coords(node))).collect();
        sigma.push(self.delta_grid());
        let finite = FiniteProblem::from_csr(offsets, successor, cost, sigma, self.spec.gamma)?;
        Ok(GridAbstraction { finite, sink: nodes, max_displacement })
    }

    /// Nearest action to a continuous feedback law, lowest index on ties.
    pub fn nearest_action(&self, u: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, a) in self.actions.iter().enumerate() {
            let d: f64 = a.iter().zip(u).map(|(p, q)| (p - q).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Node policy (sink included) from a continuous feedback law.
    pub fn policy_from_feedback(&self, h: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Vec<usize> {
        let mut policy: Vec<usize> =
            (0..self.n_nodes()).into_par_iter().map(|node| self.nearest_action(&h(&self.coords(node)))).collect();
        policy.push(0);
        policy
    }

    /// `ε_grid = d_max · horizon · L_σ`.
    pub fn slack(&self, abstraction: &GridAbstraction, horizon: usize) -> f64 {
        abstraction.max_displacement * horizon as f64 * self.spec.model.sigma_lipschitz(&self.spec.bounds)
    }

    /// Continuous closed-loop rollout, unprojected; flags leaving the box.
    pub fn rollout_continuous(
        &self,
        h: impl Fn(&[f64]) -> Vec<f64>,
        x0: &[f64],
        horizon: usize,
    ) -> Trajectory<Vec<f64>> {
        let mut traj = Trajectory::start(x0.to_vec());
        let mut x = x0.to_vec();
        for _ in 0..horizon {
            let u = h(&x);
            traj.costs.push(self.spec.model.stage_cost(&x, &u));
            x = self.spec.model.dynamics(&x, &u);
            traj.states.push(x.clone());
            if self.project(&x).map_or(true, |n| n == self.sink()) {
                traj.escaped = true;
                break;
            }
        }
        traj
    }

    /// Rollout of a node policy on the abstraction; stops at the sink.
    pub fn rollout_nodes(&self, abstraction: &GridAbstraction, policy: &[usize], x0: usize, horizon: usize) -> Result<Trajectory<usize>> {
        abstraction.finite.check_policy(policy)?;
        let mut traj = Trajectory::start(x0);
        let mut x = x0;
        for _ in 0..horizon {
            if x == abstraction.sink {
                traj.escaped = true;
                break;
            }
            let u = policy[x];
            traj.costs.push(abstraction.finite.cost(x, u));
            x = abstraction.finite.next(x, u);
            traj.states.push(x);
        }
        if x == abstraction.sink {
            traj.escaped = true;
        }
        Ok(traj)
    }

    /// `count` distinct nodes inside `{σ ≤ level}` from a Halton sequence over
    /// the box, in sequence order.
    pub fn sample_nodes(&self, count: usize, level: f64) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut seen = std::collections::HashSet::new();
        let mut batch = 4 * count.max(1);
        let mut start = 0;
        while out.len() < count && start < 1 << 22 {
            let pts = halton_in_box(&self.spec.bounds, start + batch);
            for p in &pts[start..] {
                if self.sigma_at(p) > level {
                    continue;
                }
                let Ok(node) = self.project(p) else { continue };
                if node != self.sink() && self.sigma_node(node) <= level && seen.insert(node) {
                    out.push(node);
                    if out.len() == count {
                        break;
                    }
                }
            }
            start += batch;
            batch *= 2;
        }
        out
    }
}

/// Feedback `h(x) = (x₁/15, −x₂)` used as the initial policy for the
/// nonholonomic example.
pub fn nonholonomic_h0(x: &[f64]) -> Vec<f64> {
    vec![x[0] / 15.0, -x[1]]
}

pub fn build_nonholonomic_example(gamma: f64, spec: Option<GridSpec>) -> Result<GridProblem> {
    let mut spec = spec.unwrap_or_else(|| GridSpec::nonholonomic(gamma));
    spec.gamma = gamma;
    spec.model = GridModel::Nonholonomic;
    GridProblem::new(spec)
}
