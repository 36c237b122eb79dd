use std::path::Path;

use picert::certificates::{finite_bundle, grid_bundle, lq_bundle, CertificateBundle};
use picert::linalg::{self, Mat};
use picert::pi::{run_pi, PiRun, Policy, DEFAULT_RESIDUAL_TOL};
use picert::system::{nonholonomic_h0, FiniteProblem, GridAbstraction, GridModel, GridProblem, LqProblem, ProblemSpec};

use crate::{Common, Failure};

pub enum Loaded {
    Finite { p: FiniteProblem, h0: Vec<usize> },
    Lq { lq: LqProblem, s1: Option<Mat>, s2: Option<Mat> },
    Grid { g: GridProblem, abs: Box<GridAbstraction> },
}

pub fn load(c: &Common) -> Result<Loaded, Failure> {
    let mut spec = read_spec(&c.problem)?;
    if let Some(g) = c.gamma {
        spec.set_gamma(g);
    }
    if let (ProblemSpec::Grid(s), Some(n)) = (&mut spec, c.grid_points) {
        s.points_per_axis = n;
    }
    from_spec(spec)
}

fn read_spec(path: &Path) -> Result<ProblemSpec, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("problem file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("problem file {}: {e}", path.display())))
}

pub fn from_spec(spec: ProblemSpec) -> Result<Loaded, Failure> {
    Ok(match spec {
        ProblemSpec::Finite(s) => {
            let p = FiniteProblem::from_spec(&s)?;
            let h0 = s.initial_policy.clone().unwrap_or_else(|| vec![0; p.n_states()]);
            p.check_policy(&h0)?;
            Loaded::Finite { p, h0 }
        }
        ProblemSpec::Lq(s) => {
            let lq = LqProblem::from_spec(&s)?;
            let s1 = s.s1.as_deref().map(linalg::from_rows).transpose()?;
            let s2 = s.s2.as_deref().map(linalg::from_rows).transpose()?;
            Loaded::Lq { lq, s1, s2 }
        }
        ProblemSpec::Grid(s) => {
            let g = GridProblem::new(s)?;
            let abs = Box::new(g.abstraction()?);
            Loaded::Grid { g, abs }
        }
    })
}

impl Loaded {
    pub fn gamma(&self) -> f64 {
        match self {
            Loaded::Finite { p, .. } => p.gamma(),
            Loaded::Lq { lq, .. } => lq.gamma,
            Loaded::Grid { g, .. } => g.gamma(),
        }
    }

    pub fn backend(&self) -> &'static str {
        match self {
            Loaded::Finite { .. } => "finite",
            Loaded::Lq { .. } => "lq",
            Loaded::Grid { .. } => "grid",
        }
    }

    pub fn initial_policy(&self) -> Policy {
        match self {
            Loaded::Finite { h0, .. } => Policy::Table(h0.clone()),
            Loaded::Lq { lq, .. } => Policy::Gain(lq.k0.clone()),
            Loaded::Grid { g, .. } => Policy::Table(match g.model() {
                GridModel::Nonholonomic => g.policy_from_feedback(nonholonomic_h0),
                GridModel::Integrator => g.policy_from_feedback(|x| x.iter().map(|v| -v).collect()),
            }),
        }
    }

    pub fn solve(&self, max_iters: Option<usize>) -> Result<PiRun, Failure> {
        let h0 = self.initial_policy();
        Ok(match self {
            Loaded::Finite { p, .. } => run_pi(p, h0, max_iters, DEFAULT_RESIDUAL_TOL)?,
            Loaded::Lq { lq, .. } => run_pi(lq, h0, max_iters, DEFAULT_RESIDUAL_TOL)?,
            Loaded::Grid { abs, .. } => run_pi(&abs.finite, h0, max_iters, DEFAULT_RESIDUAL_TOL)?,
        })
    }

    pub fn bundle(&self) -> picert::Result<CertificateBundle> {
        match self {
            Loaded::Finite { p, h0 } => finite_bundle(p, h0, None),
            Loaded::Lq { lq, s1, s2 } => lq_bundle(lq, s1.clone(), s2.clone()),
            Loaded::Grid { g, .. } => grid_bundle(g),
        }
    }
}
