//! Encodings of the standing assumptions (detectability, initial-policy
//! growth, optimal-value bound) and every constant derived from them.

mod build;
mod formulas;

use serde::{Deserialize, Serialize};

pub use build::*;
pub use formulas::*;

use crate::compfn::{compose, ComparisonFn, KlBound};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::report::CheckEntry;

/// The detectability function `W` of the assumption
/// `W(f(x,u)) − W(x) ≤ −α_W(σ(x)) + ℓ(x,u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WFunction {
    Zero,
    /// `W = w σ`.
    ScaledSigma { w: f64 },
    Table { values: Vec<f64> },
    /// `W(x) = xᵀS₂x`.
    Quadratic {
        #[serde(with = "linalg::rows")]
        s2: Mat,
    },
}

/// A state handed to [`WFunction::eval`].
#[derive(Clone, Copy, Debug)]
pub enum StateRef<'a> {
    Index(usize),
    Point(&'a [f64]),
}

impl WFunction {
    pub fn eval(&self, state: StateRef<'_>, sigma: f64) -> Result<f64> {
        match (self, state) {
            (WFunction::Zero, _) => Ok(0.0),
            (WFunction::ScaledSigma { w }, _) => Ok(w * sigma),
            (WFunction::Table { values }, StateRef::Index(x)) => {
                values.get(x).copied().ok_or_else(|| Error::Shape(format!("W table has no entry {x}")))
            }
            (WFunction::Quadratic { s2 }, StateRef::Point(x)) => {
                if x.len() != s2.nrows() {
                    return Err(Error::Shape(format!("W expects dimension {}", s2.nrows())));
                }
                let v = nalgebra::DVector::from_column_slice(x);
                Ok((v.transpose() * s2 * &v)[(0, 0)])
            }
            _ => Err(Error::Backend("W representation does not match the state kind".into())),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, WFunction::Zero)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectabilityCertificate {
    pub w: WFunction,
    pub alpha_w: ComparisonFn,
    pub alpha_w_bar: ComparisonFn,
    #[serde(default, with = "linalg::opt_rows", skip_serializing_if = "Option::is_none")]
    pub s1: Option<Mat>,
    #[serde(default, with = "linalg::opt_rows", skip_serializing_if = "Option::is_none")]
    pub s2: Option<Mat>,
}

/// Exponential cost growth `ℓ(φ(k,x,h₀)) ≤ M aᵏ χ(σ(x))` of the initial policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitialPolicyCertificate {
    pub m: f64,
    pub a: f64,
    pub chi: ComparisonFn,
    pub gamma0: f64,
    /// How `(M, a)` were obtained.
    pub method: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl InitialPolicyCertificate {
    pub fn new(m: f64, a: f64, chi: ComparisonFn, method: impl Into<String>) -> Self {
        Self { m, a, chi, gamma0: gamma0_from_rate(a), method: method.into(), notes: Vec::new() }
    }

    /// `ᾱ_V(·, γ) = M χ / (1 − aγ)`, defined for `γ < γ₀`.
    pub fn alpha_v_bar(&self, gamma: f64) -> Result<ComparisonFn> {
        Ok(self.chi.scaled(self.m / self.denominator(gamma)?))
    }

    /// `ā_V(γ)` when χ is linear.
    pub fn a_v_bar(&self, gamma: f64) -> Result<f64> {
        let g = self.chi.linear_gain().ok_or_else(|| Error::NoCertificate("χ is not linear".into()))?;
        Ok(self.m * g / self.denominator(gamma)?)
    }

    fn denominator(&self, gamma: f64) -> Result<f64> {
        let d = 1.0 - self.a * gamma;
        if !(gamma > 0.0 && gamma < self.gamma0) || d <= 0.0 {
            return Err(Error::DiscountRange { gamma, gamma_star: 0.0, gamma0: self.gamma0 });
        }
        Ok(d)
    }
}

/// `γ₀ = min{1, 1/a}`.
pub fn gamma0_from_rate(a: f64) -> f64 {
    if a <= 1.0 {
        1.0
    } else {
        1.0 / a
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sa5Certificate {
    pub alpha_vstar_bar: ComparisonFn,
    pub gamma_star: f64,
    /// Where the bound on `V*` came from.
    pub reference: String,
}

/// Linear gains `α_W = a_W s`, `ᾱ_W ≤ ā_W s`, `ᾱ_V* = ā_V* s` and
/// `ᾱ_V(s, γ) = ā_V(γ) s` with `ā_V(γ) = m_chi / (1 − aγ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGainBundle {
    pub a_w: f64,
    pub a_w_bar: f64,
    pub a_vstar_bar: f64,
    pub m_chi: f64,
    pub a: f64,
    pub gamma0: f64,
}

impl LinearGainBundle {
    pub fn new(a_w: f64, a_w_bar: f64, a_vstar_bar: f64, m_chi: f64, a: f64) -> Result<Self> {
        if !(a_w > 0.0) || !(a_vstar_bar > 0.0) || !(a_w_bar >= 0.0) || !(m_chi > 0.0) || !(a >= 0.0) {
            return Err(Error::NoCertificate(format!(
                "linear gains must satisfy a_W, ā_V*, M > 0 and a, ā_W ≥ 0 (got {a_w}, {a_vstar_bar}, {m_chi}, {a}, {a_w_bar})"
            )));
        }
        Ok(Self { a_w, a_w_bar, a_vstar_bar, m_chi, a, gamma0: gamma0_from_rate(a) })
    }

    /// `(ā_V* − a_W)/ā_V*` without clamping; negative when `a_W > ā_V*`.
    pub fn gamma_star_raw(&self) -> f64 {
        (self.a_vstar_bar - self.a_w) / self.a_vstar_bar
    }

    /// `γ* = (ā_V* − a_W)/ā_V*`, clamped at 0.
    pub fn gamma_star(&self) -> f64 {
        self.gamma_star_raw().max(0.0)
    }

    pub fn a_v_bar(&self, gamma: f64) -> Result<f64> {
        self.check_range(gamma)?;
        Ok(self.m_chi / (1.0 - self.a * gamma))
    }

    pub fn check_range(&self, gamma: f64) -> Result<()> {
        let gs = self.gamma_star();
        if !(gamma > gs && gamma < self.gamma0) || self.a * gamma >= 1.0 {
            return Err(Error::DiscountRange { gamma, gamma_star: gs, gamma0: self.gamma0 });
        }
        Ok(())
    }
}

/// `γ*` in closed form for linear gains.
pub fn gamma_star_linear(lg: &LinearGainBundle) -> Result<f64> {
    let gs = lg.gamma_star();
    if gs >= lg.gamma0 {
        return Err(Error::NoStabilizingDiscount { required: gs, gamma0: lg.gamma0 });
    }
    Ok(gs)
}

/// Smallest `γ*` with `(1 − γ*)ᾱ_V*(s) ≤ α_W(s)` on the probe grid over
/// `(0, upper]`, by bisection to 1e−10.
pub fn gamma_star_general(alpha_w: &ComparisonFn, alpha_vstar_bar: &ComparisonFn, gamma0: f64, upper: f64) -> Result<f64> {
    let grid = crate::compfn::log_probe_grid(upper, crate::compfn::N_PROBE);
    let pairs: Vec<(f64, f64)> =
        grid.iter().map(|&s| Ok((alpha_w.eval(s)?, alpha_vstar_bar.eval(s)?))).collect::<Result<_>>()?;
    let holds = |g: f64| pairs.iter().all(|&(w, v)| (1.0 - g) * v <= w * (1.0 + 1e-12));
    if holds(0.0) {
        return Ok(0.0);
    }
    if !holds(gamma0) {
        return Err(Error::NoStabilizingDiscount { required: f64::NAN, gamma0 });
    }
    let (mut lo, mut hi) = (0.0, gamma0);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if hi >= gamma0 {
        return Err(Error::NoStabilizingDiscount { required: hi, gamma0 });
    }
    Ok(hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Remark3 {
    pub gamma_star: f64,
    pub gamma_star_6: f64,
    pub gamma_star_17: f64,
    pub holds: bool,
}

/// `γ*` against the thresholds `1 − a_W/(ā_V* + ā_W)` and
/// `ā_V*/(ā_V* + a_W)` of earlier analyses. Uses the unclamped `γ*`.
pub fn remark3_compare(lg: &LinearGainBundle) -> Remark3 {
    let gamma_star = lg.gamma_star_raw();
    let gamma_star_6 = 1.0 - lg.a_w / (lg.a_vstar_bar + lg.a_w_bar);
    let gamma_star_17 = lg.a_vstar_bar / (lg.a_vstar_bar + lg.a_w);
    let eps = 1e-15;
    Remark3 {
        gamma_star,
        gamma_star_6,
        gamma_star_17,
        holds: gamma_star <= gamma_star_6 + eps && gamma_star <= gamma_star_17 + eps,
    }
}

/// The comparison functions of the Lyapunov analysis at a fixed γ.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Table1 {
    pub gamma: f64,
    pub gamma_star: f64,
    /// `α̲_Y* = α̲_Y = α_W`.
    pub alpha_lower_y: ComparisonFn,
    /// `α_Y* = α_Y = (γ − γ*)/(1 − γ*) α_W`.
    pub alpha_y: ComparisonFn,
    /// `ᾱ_Y* = ᾱ_V* + ᾱ_W/γ*`.
    pub alpha_bar_y_star: ComparisonFn,
    /// `α̃_Y* = α_Y ∘ ᾱ_Y*⁻¹`.
    pub alpha_tilde_y_star: ComparisonFn,
    /// `β̃*(s, k) = max_{t ≤ s} (𝕀 − α̃_Y*/γ)⁽ᵏ⁾(t)`.
    pub beta_tilde: KlBound,
    /// `ᾱ_Y = ᾱ_V(·, γ) + ᾱ_W/γ`.
    pub alpha_bar_y: ComparisonFn,
    pub alpha_v_bar: ComparisonFn,
    /// `β*(s, k) = α̲_Y*⁻¹(β̃*(ᾱ_Y*(s), k))`.
    pub beta_star: KlBound,
    /// `Yⁱ = Vⁱ + W/γ`.
    pub y_recipe: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Table1 {
    pub fn build(
        det: &DetectabilityCertificate,
        init: &InitialPolicyCertificate,
        sa5: &Sa5Certificate,
        gamma: f64,
    ) -> Result<Self> {
        let gs = sa5.gamma_star;
        if !(gamma > gs && gamma < init.gamma0) {
            return Err(Error::DiscountRange { gamma, gamma_star: gs, gamma0: init.gamma0 });
        }
        let mut notes = Vec::new();
        let alpha_lower_y = det.alpha_w.clone();
        let alpha_y = det.alpha_w.scaled((gamma - gs) / (1.0 - gs));
        // With γ* = 0 the 1/γ* weight is undefined; any γ' ∈ (0, γ] gives a
        // valid bound since W/γ' ≥ W/γ, so use γ itself.
        let w_weight = if gs > 0.0 {
            1.0 / gs
        } else {
            if det.alpha_w_bar.linear_gain() != Some(0.0) {
                notes.push("γ* = 0: ᾱ_W weighted by 1/γ instead of 1/γ*".into());
            }
            1.0 / gamma
        };
        let alpha_bar_y_star = sa5.alpha_vstar_bar.plus(&det.alpha_w_bar.scaled(w_weight));
        let alpha_tilde_y_star = compose(&alpha_y, &alpha_bar_y_star.inverse());
        let map = alpha_tilde_y_star.identity_minus(1.0 / gamma);
        let beta_tilde = KlBound::new(map.clone());
        let beta_star = KlBound::with_outer(alpha_bar_y_star.clone(), map, alpha_lower_y.inverse());
        let alpha_v_bar = init.alpha_v_bar(gamma)?;
        let alpha_bar_y = alpha_v_bar.plus(&det.alpha_w_bar.scaled(1.0 / gamma));
        Ok(Self {
            gamma,
            gamma_star: gs,
            alpha_lower_y,
            alpha_y,
            alpha_bar_y_star,
            alpha_tilde_y_star,
            beta_tilde,
            alpha_bar_y,
            alpha_v_bar,
            beta_star,
            y_recipe: "V^i + W/gamma".into(),
            notes,
        })
    }

    /// `Υⁱ(s, γ) = (1 − γ)γⁱ ᾱ_V(β*(s, i), γ)`.
    pub fn upsilon(&self, s: f64, i: u32) -> Result<f64> {
        let g = self.gamma;
        Ok((1.0 - g) * g.powi(i as i32) * self.alpha_v_bar.eval(self.beta_star.value(s, i)?)?)
    }

    /// `Yⁱ(x) = Vⁱ(x) + W(x)/γ`.
    pub fn y_value(&self, v: f64, w: f64) -> f64 {
        v + w / self.gamma
    }
}

/// Which problem family a bundle certifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Finite,
    Lq,
    Grid,
}

/// One row of a γ sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub in_range: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_v_bar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub istar_linear: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Envelope>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Everything the verifier and the reports need about an instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateBundle {
    pub backend: Backend,
    pub detectability: DetectabilityCertificate,
    pub initial_policy: InitialPolicyCertificate,
    pub sa5: Sa5Certificate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearGainBundle>,
    pub gamma0: f64,
    pub gamma_star: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remark3: Option<Remark3>,
    /// Upper end of the probe grids used for sampled function checks.
    pub probe_upper: f64,
    /// Probe checks backing the certificate (detectability, LMI, initial-policy envelope, ...).
    pub probes: Vec<CheckEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl CertificateBundle {
    pub fn table1(&self, gamma: f64) -> Result<Table1> {
        Table1::build(&self.detectability, &self.initial_policy, &self.sa5, gamma)
    }

    pub fn in_range(&self, gamma: f64) -> bool {
        gamma > self.gamma_star && gamma < self.gamma0
    }

    pub fn probes_passed(&self) -> bool {
        self.probes.iter().all(|p| !p.blocks())
    }

    pub fn hash(&self) -> Result<String> {
        crate::report::json_hash(self)
    }

    /// Fills [`Self::sweep`] with `n` uniform discounts on `[lo, hi]`.
    pub fn fill_sweep(&mut self, lo: f64, hi: f64, n: usize) {
        self.sweep = (0..n)
            .map(|j| {
                let gamma = if n == 1 { lo } else { lo + (hi - lo) * j as f64 / (n - 1) as f64 };
                self.sweep_row(gamma)
            })
            .collect();
    }

    pub fn sweep_row(&self, gamma: f64) -> SweepRow {
        let mut row =
            SweepRow { gamma, in_range: self.in_range(gamma), a_v_bar: None, istar_linear: None, envelope: None, note: None };
        if !row.in_range {
            row.note = Some(format!("outside ({:.6}, {:.6})", self.gamma_star, self.gamma0));
            return row;
        }
        row.a_v_bar = self.initial_policy.a_v_bar(gamma).ok();
        if let Some(lg) = &self.linear {
            match istar_linear(lg, gamma) {
                Ok(i) => row.istar_linear = Some(i.value),
                Err(e) => row.note = Some(e.to_string()),
            }
            match envelope_constants(lg, gamma) {
                Ok(env) => row.envelope = Some(env),
                Err(e) => {
                    row.note.get_or_insert_with(String::new).push_str(&format!(" envelope: {e}"));
                }
            }
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nonholonomic_gains() -> LinearGainBundle {
        LinearGainBundle::new(1.0, 0.0, 22.0 / 5.0, 22.0 / 3.0, 256.0 / 225.0).unwrap()
    }

    #[test]
    fn lemma1_gamma0() {
        assert_eq!(gamma0_from_rate(256.0 / 225.0), 225.0 / 256.0);
        assert_eq!(gamma0_from_rate(0.36), 1.0);
        assert_eq!(gamma0_from_rate(4.0), 0.25);
    }

    #[test]
    fn gamma_star_examples() {
        let lg = nonholonomic_gains();
        assert!((gamma_star_linear(&lg).unwrap() - 17.0 / 22.0).abs() < 1e-15);
        let flat = LinearGainBundle::new(1.0, 0.0, 1.0, 1.0, 0.5).unwrap();
        assert_eq!(gamma_star_linear(&flat).unwrap(), 0.0);
        let none = LinearGainBundle::new(1.0, 0.0, 100.0, 1.0, 2.0).unwrap();
        assert!(matches!(gamma_star_linear(&none), Err(Error::NoStabilizingDiscount { .. })));
    }

    #[test]
    fn general_gamma_star_matches_closed_form() {
        let g = gamma_star_general(&ComparisonFn::identity(), &ComparisonFn::linear(4.4), 225.0 / 256.0, 4.0).unwrap();
        assert!((g - 17.0 / 22.0).abs() < 1e-9);
    }

    #[test]
    fn remark3_examples() {
        let r = remark3_compare(&nonholonomic_gains());
        assert!((r.gamma_star - 17.0 / 22.0).abs() < 1e-15);
        assert!((r.gamma_star_6 - 17.0 / 22.0).abs() < 1e-15);
        assert!((r.gamma_star_17 - 22.0 / 27.0).abs() < 1e-15);
        assert!(r.holds);
        let unit = remark3_compare(&LinearGainBundle::new(1.0, 1.0, 1.0, 1.0, 0.5).unwrap());
        assert_eq!((unit.gamma_star, unit.gamma_star_6, unit.gamma_star_17), (0.0, 0.5, 0.5));
    }

    #[test]
    fn w_function_eval() {
        let q = WFunction::Quadratic { s2: Mat::identity(2, 2) * 2.0 };
        assert_eq!(q.eval(StateRef::Point(&[1.0, 1.0]), 0.0).unwrap(), 4.0);
        assert_eq!(WFunction::ScaledSigma { w: 0.5 }.eval(StateRef::Index(3), 4.0).unwrap(), 2.0);
        assert!(WFunction::Table { values: vec![1.0] }.eval(StateRef::Point(&[0.0]), 0.0).is_err());
    }
}
