//! Problem definitions: the plant `x⁺ = f(x, u)`, admissible inputs, stage
//! cost, state measure σ and discount γ over three backends.

pub mod finite;
pub mod grid;
pub mod lq;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use finite::{FiniteProblem, FiniteSpec};
pub use grid::{build_nonholonomic_example, nonholonomic_h0, GridAbstraction, GridModel, GridProblem, GridSpec, Projection};
pub use lq::{LqProblem, LqSpec};

use crate::error::{Error, Result};

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidProblem(format!("discount {gamma} must lie in (0, 1)")));
    }
    Ok(())
}

/// States `φ(0..=horizon)` and the stage costs paid along the way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S> {
    pub states: Vec<S>,
    pub costs: Vec<f64>,
    /// Set when the trajectory left the modelled domain and was truncated.
    pub escaped: bool,
}

impl<S> Trajectory<S> {
    pub fn start(x0: S) -> Self {
        Self { states: vec![x0], costs: Vec::new(), escaped: false }
    }
}

/// The JSON problem file. `backend` selects the variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ProblemSpec {
    Finite(FiniteSpec),
    Lq(LqSpec),
    Grid(GridSpec),
}

impl ProblemSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn gamma(&self) -> f64 {
        match self {
            ProblemSpec::Finite(s) => s.gamma,
            ProblemSpec::Lq(s) => s.gamma,
            ProblemSpec::Grid(s) => s.gamma,
        }
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        match self {
            ProblemSpec::Finite(s) => s.gamma = gamma,
            ProblemSpec::Lq(s) => s.gamma = gamma,
            ProblemSpec::Grid(s) => s.gamma = gamma,
        }
    }

    pub fn backend_name(&self) -> &'static str {
        match self {
            ProblemSpec::Finite(_) => "finite",
            ProblemSpec::Lq(_) => "lq",
            ProblemSpec::Grid(_) => "grid",
        }
    }
}

/// Radical-inverse (Halton) point `index` in `[0, 1)^dim`.
pub fn halton_point(index: usize, dim: usize) -> Vec<f64> {
    const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    assert!(dim <= PRIMES.len(), "halton dimension {dim} unsupported");
    PRIMES[..dim]
        .iter()
        .map(|&base| {
            let mut f = 1.0;
            let mut r = 0.0;
            let mut i = index;
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

/// First `count` Halton points mapped into the box `bounds` (index 0 skipped).
pub fn halton_in_box(bounds: &[(f64, f64)], count: usize) -> Vec<Vec<f64>> {
    (1..=count)
        .map(|i| {
            halton_point(i, bounds.len())
                .into_iter()
                .zip(bounds)
                .map(|(t, &(lo, hi))| lo + t * (hi - lo))
                .collect()
        })
        .collect()
}
