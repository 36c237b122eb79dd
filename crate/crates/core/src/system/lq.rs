use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_gamma, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

/// Linear plant `x⁺ = Ax + Bu` with `ℓ = xᵀQx + uᵀRu`, `σ = |x|²` and
/// unconstrained inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LqProblem {
    pub a: Mat,
    pub b: Mat,
    pub q: Mat,
    pub r: Mat,
    pub gamma: f64,
    pub k0: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LqSpec {
    pub gamma: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s1: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<Vec<Vec<f64>>>,
}

/// Outcome of the structural checks on an [`LqProblem`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LqDiagnostics {
    pub r_positive_definite: bool,
    pub q_positive_semidefinite: bool,
    pub stabilizable: bool,
    pub detectable: bool,
    /// `ρ(A + BK₀)`.
    pub initial_radius: f64,
    /// `√γ ρ(A + BK₀)`; below one iff the initial policy has finite cost.
    pub scaled_initial_radius: f64,
}

impl LqDiagnostics {
    pub fn all_ok(&self) -> bool {
        self.r_positive_definite
            && self.q_positive_semidefinite
            && self.stabilizable
            && self.detectable
            && self.scaled_initial_radius < 1.0
    }
}

impl LqProblem {
    pub fn new(a: Mat, b: Mat, q: Mat, r: Mat, gamma: f64, k0: Mat) -> Result<Self> {
        check_gamma(gamma)?;
        let n = a.nrows();
        linalg::check_square("A", &a, n)?;
        linalg::check_square("Q", &q, n)?;
        if b.nrows() != n {
            return Err(Error::Shape(format!("B must have {n} rows, got {}", b.nrows())));
        }
        let m = b.ncols();
        linalg::check_square("R", &r, m)?;
        if k0.nrows() != m || k0.ncols() != n {
            return Err(Error::Shape(format!("K0 must be {m}x{n}, got {}x{}", k0.nrows(), k0.ncols())));
        }
        if !linalg::is_symmetric(&r, 1e-12) || linalg::lambda_min(&r) <= 0.0 {
            return Err(Error::InvalidProblem("R must be symmetric positive definite".into()));
        }
        if !linalg::is_symmetric(&q, 1e-12) || linalg::lambda_min(&q) < -1e-12 {
            return Err(Error::InvalidProblem("Q must be symmetric positive semidefinite".into()));
        }
        Ok(Self { a, b, q, r, gamma, k0 })
    }

    pub fn from_spec(spec: &LqSpec) -> Result<Self> {
        let a = linalg::from_rows(&spec.a)?;
        let b = linalg::from_rows(&spec.b)?;
        let k0 = match &spec.k0 {
            Some(rows) => linalg::from_rows(rows)?,
            None => DMatrix::zeros(b.ncols(), a.nrows()),
        };
        Self::new(a, b, linalg::from_rows(&spec.q)?, linalg::from_rows(&spec.r)?, spec.gamma, k0)
    }

    pub fn to_spec(&self) -> LqSpec {
        LqSpec {
            gamma: self.gamma,
            a: linalg::to_rows(&self.a),
            b: linalg::to_rows(&self.b),
            q: linalg::to_rows(&self.q),
            r: linalg::to_rows(&self.r),
            k0: Some(linalg::to_rows(&self.k0)),
            s1: None,
            s2: None,
        }
    }

    /// Scalar instance `x⁺ = a x + b u`.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, gamma: f64, k0: f64) -> Result<Self> {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(m(a), m(b), m(q), m(r), gamma, m(k0))
    }

    /// The bundled two-state example: `A = [[1.2, 0.5], [0, 0.9]]` (open-loop
    /// unstable), `B = Q = R = I`.
    pub fn example(k0: Mat, gamma: f64) -> Result<Self> {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.5, 0.0, 0.9]);
        let i = DMatrix::identity(2, 2);
        Self::new(a, i.clone(), i.clone(), i, gamma, k0)
    }

    /// Default initial gain for [`Self::example`]; `A + BK₀ = diag(0.6, 0.5)`.
    pub fn example_k0() -> Mat {
        DMatrix::from_row_slice(2, 2, &[-0.6, -0.5, 0.0, -0.4])
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self { gamma, ..self.clone() })
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self, k: &Mat) -> Mat {
        &self.a + &self.b * k
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n_states() || u.len() != self.n_inputs() {
            return Err(Error::Admissibility { state: format!("{:?}", x.as_slice()), action: format!("{:?}", u.as_slice()) });
        }
        Ok(&self.a * x + &self.b * u)
    }

    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }

    pub fn sigma(&self, x: &DVector<f64>) -> f64 {
        x.norm_squared()
    }

    pub fn rollout(&self, k: &Mat, x0: &DVector<f64>, horizon: usize) -> Result<Trajectory<DVector<f64>>> {
        let mut traj = Trajectory::start(x0.clone());
        let mut x = x0.clone();
        for _ in 0..horizon {
            let u = k * &x;
            traj.costs.push(self.stage_cost(&x, &u));
            x = self.step(&x, &u)?;
            traj.states.push(x.clone());
        }
        Ok(traj)
    }

    /// Discounted cost of `u = Kx` by partial summation. Stops once the
    /// discounted stage cost has been decaying over a window and its
    /// geometric tail estimate falls below `tail_tol`.
    pub fn discounted_cost(&self, k: &Mat, x0: &DVector<f64>, tail_tol: f64) -> Result<f64> {
        const WINDOW: usize = 500;
        const MAX_STEPS: usize = 2_000_000;
        let g = self.gamma;
        let mut x = x0.clone();
        let mut total = 0.0;
        let mut discount = 1.0;
        let mut history: Vec<f64> = Vec::new();
        for step in 0..MAX_STEPS {
            let u = k * &x;
            let term = discount * self.stage_cost(&x, &u);
            total += term;
            history.push(term);
            if step >= WINDOW {
                let earlier = history[step - WINDOW];
                if earlier > 0.0 && term > earlier {
                    return Err(Error::DivergentCost { ratio: term / earlier });
                }
                if !term.is_finite() {
                    return Err(Error::DivergentCost { ratio: f64::INFINITY });
                }
                if term / (1.0 - g) < tail_tol && term <= earlier {
                    return Ok(total);
                }
            } else if term == 0.0 && step > 0 && history[step - 1] == 0.0 && x.norm() == 0.0 {
                return Ok(total);
            }
            x = self.step(&x, &u)?;
            discount *= g;
        }
        Err(Error::DivergentCost { ratio: f64::NAN })
    }

    pub fn diagnostics(&self) -> LqDiagnostics {
        let rho = linalg::spectral_radius(&self.closed_loop(&self.k0));
        LqDiagnostics {
            r_positive_definite: linalg::lambda_min(&self.r) > 0.0,
            q_positive_semidefinite: linalg::lambda_min(&self.q) >= -1e-12,
            stabilizable: linalg::is_stabilizable(&self.a, &self.b),
            detectable: linalg::is_detectable(&self.a, &self.q),
            initial_radius: rho,
            scaled_initial_radius: self.gamma.sqrt() * rho,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn scalar_step() {
        let p = LqProblem::scalar(2.0, 1.0, 1.0, 1.0, 0.5, 0.0).unwrap();
        assert_eq!(p.step(&v(&[1.0]), &v(&[-1.0])).unwrap(), v(&[1.0]));
    }

    #[test]
    fn geometric_rollout() {
        let p = LqProblem::scalar(0.5, 0.0, 1.0, 1.0, 0.5, 0.0).unwrap();
        let t = p.rollout(&DMatrix::zeros(1, 1), &v(&[8.0]), 3).unwrap();
        let xs: Vec<f64> = t.states.iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![8.0, 4.0, 2.0, 1.0]);
    }

    #[test]
    fn default_identity_instance_is_valid() {
        let p = LqProblem::example(LqProblem::example_k0(), 0.7).unwrap();
        assert!(p.diagnostics().all_ok());
        assert!(LqProblem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            -DMatrix::identity(2, 2),
            0.5,
            DMatrix::zeros(2, 2)
        )
        .is_err());
    }

    #[test]
    fn discounted_cost_matches_scalar_series() {
        // x_k = 0.5^k, cost x_k^2, gamma 0.8: sum (0.8 * 0.25)^k = 1 / 0.8
        let p = LqProblem::scalar(0.5, 1.0, 1.0, 1.0, 0.8, 0.0).unwrap();
        let c = p.discounted_cost(&DMatrix::zeros(1, 1), &v(&[1.0]), 1e-12).unwrap();
        assert!((c - 1.25).abs() < 1e-10, "{c}");
    }

    #[test]
    fn divergent_cost_detected() {
        let p = LqProblem::scalar(2.0, 1.0, 1.0, 1.0, 0.5, 0.0).unwrap();
        assert!(matches!(
            p.discounted_cost(&DMatrix::zeros(1, 1), &v(&[1.0]), 1e-12),
            Err(Error::DivergentCost { .. })
        ));
    }
}
