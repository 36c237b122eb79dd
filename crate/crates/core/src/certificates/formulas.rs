use serde::{Deserialize, Serialize};

use super::{LinearGainBundle, Table1};
use crate::compfn::invert;
use crate::error::{Error, Result};

/// An iteration threshold together with the arguments it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Istar {
    /// Ceiling of `raw`, clamped at 0.
    pub value: u64,
    /// Argument of the logarithm in the numerator.
    pub numerator: f64,
    /// Argument of the logarithm in the denominator (`γ` for the general form).
    pub denominator: f64,
    pub raw: f64,
}

impl Istar {
    fn from_logs(formula: &'static str, numerator: f64, denominator: f64) -> Result<Self> {
        if !(denominator > 0.0 && denominator < 1.0) {
            return Err(Error::FormulaDomain {
                formula,
                detail: format!("denominator log argument {denominator} outside (0, 1)"),
            });
        }
        if !(numerator > 0.0) {
            return Err(Error::FormulaDomain { formula, detail: format!("numerator log argument {numerator} is not positive") });
        }
        if numerator >= 1.0 {
            return Ok(Self { value: 0, numerator, denominator, raw: numerator.ln() / denominator.ln() });
        }
        let raw = numerator.ln() / denominator.ln();
        Ok(Self { value: raw.ceil().max(0.0) as u64, numerator, denominator, raw })
    }
}

/// Weight on `ā_W` in the optimal-loop sandwich: `1/γ*`, or `1/γ` when `γ* = 0`.
fn w_weight(gamma_star: f64, gamma: f64) -> f64 {
    if gamma_star > 0.0 {
        1.0 / gamma_star
    } else {
        1.0 / gamma
    }
}

/// Threshold for the semiglobal practical bound on `{σ ≤ Δ}` with ultimate
/// bound `δ`:
/// `ln(α_Y(ᾱ_Y⁻¹(α̲_Y(δ))) / (2(1−γ)ᾱ_V(β*(α̲_Y⁻¹(ᾱ_Y(Δ)), 0)))) / ln γ`.
pub fn istar_general(t: &Table1, delta: f64, big_delta: f64) -> Result<Istar> {
    const NAME: &str = "semiglobal iteration threshold";
    if !(delta > 0.0 && big_delta > 0.0) {
        return Err(Error::FormulaDomain { formula: NAME, detail: format!("δ = {delta}, Δ = {big_delta} must be positive") });
    }
    let g = t.gamma;
    let top = t.alpha_y.eval(invert(&t.alpha_bar_y, t.alpha_lower_y.eval(delta)?)?)?;
    let reach = invert(&t.alpha_lower_y, t.alpha_bar_y.eval(big_delta)?)?;
    let bottom = 2.0 * (1.0 - g) * t.alpha_v_bar.eval(t.beta_star.value(reach, 0)?)?;
    Istar::from_logs(NAME, top / bottom, g)
}

/// Threshold in the linear-gain case:
/// `ln(γ*(γ−γ*)a_W² / (2γ(1−γ)²ā_V(γ)(γ*ā_V* + ā_W))) / ln(γ − γ*(γ−γ*)a_W/((1−γ)(γ*ā_V* + ā_W)))`.
///
/// Written through `K = (γ*ā_V* + ā_W)/(γ*a_W)`, which stays finite at `γ* = 0`.
pub fn istar_linear(lg: &LinearGainBundle, gamma: f64) -> Result<Istar> {
    let g = gamma;
    let gs = lg.gamma_star();
    let a_v = lg.a_v_bar(g)?;
    let k = overshoot(lg, g);
    let numerator = lg.a_w * (g - gs) / (2.0 * g * (1.0 - g).powi(2) * a_v * k);
    let denominator = g - (g - gs) / ((1.0 - g) * k);
    Istar::from_logs("linear-gain iteration threshold", numerator, denominator)
}

/// `K = (γ*ā_V* + ā_W)/(γ*a_W) = ᾱ_Y*/a_W`.
fn overshoot(lg: &LinearGainBundle, gamma: f64) -> f64 {
    (lg.a_vstar_bar + lg.a_w_bar * w_weight(lg.gamma_star(), gamma)) / lg.a_w
}

/// Constants of the exponential envelope `σ(φⁱ(k,x)) ≤ c₁σ(x)e^{−c₂k}` and
/// of the optimal-loop bound `β*(s,k) = K e^{−λk} s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub c1: f64,
    pub c2: f64,
    pub k: f64,
    /// Decay rate as stated with the `(1−γ)` factor.
    pub lambda: f64,
    /// Per-step factor of `β*` obtained from the comparison-function
    /// construction, `1 − a_W(γ−γ*)/(γ(1−γ*)Ka_W)`.
    pub pipeline_rate: f64,
}

pub fn envelope_constants(lg: &LinearGainBundle, gamma: f64) -> Result<Envelope> {
    const NAME: &str = "envelope constants";
    let g = gamma;
    let gs = lg.gamma_star();
    let a_v = lg.a_v_bar(g)?;
    let a_y = a_v + lg.a_w_bar / g;
    let c1 = (g * a_v + lg.a_w_bar) / (g * lg.a_w);
    let k = overshoot(lg, g);
    let c2_arg = 1.0 - lg.a_w * (g - gs) / (2.0 * g * (1.0 - g) * a_y);
    let lambda_arg = 1.0 - (g - gs) / (g * (1.0 - g) * k);
    let pipeline_rate = 1.0 - (g - gs) / (g * (1.0 - gs) * k);
    for (what, arg) in [("c2", c2_arg), ("lambda", lambda_arg)] {
        if !(arg > 0.0 && arg < 1.0) {
            return Err(Error::FormulaDomain { formula: NAME, detail: format!("{what} log argument {arg} outside (0, 1) at γ = {g}") });
        }
    }
    Ok(Envelope { c1, c2: -c2_arg.ln(), k, lambda: -lambda_arg.ln(), pipeline_rate })
}

/// `γⁱ ᾱ_V(β*(σ, i), γ)`.
pub fn theorem1_bound(t: &Table1, sigma: f64, i: u32) -> Result<f64> {
    Ok(t.gamma.powi(i as i32) * t.alpha_v_bar.eval(t.beta_star.value(sigma, i)?)?)
}

/// Closed form of [`theorem1_bound`] for linear gains: `γⁱ ā_V K ρⁱ σ`
/// with `ρ` the construction's per-step factor.
pub fn theorem1_bound_linear(lg: &LinearGainBundle, gamma: f64, sigma: f64, i: u32) -> Result<f64> {
    let env = envelope_constants(lg, gamma)?;
    Ok((gamma * env.pipeline_rate).powi(i as i32) * lg.a_v_bar(gamma)? * env.k * sigma)
}

/// Smallest `δ` (to relative 1e−9) whose threshold on `{σ ≤ Δ}` is at most `i`.
pub fn delta_for_iteration(t: &Table1, big_delta: f64, i: u64) -> Result<f64> {
    let fits = |d: f64| istar_general(t, d, big_delta).map(|s| s.value <= i).unwrap_or(false);
    let mut hi = big_delta;
    while !fits(hi) {
        hi *= 10.0;
        if !hi.is_finite() || hi > 1e300 {
            return Err(Error::FormulaDomain {
                formula: "semiglobal iteration threshold",
                detail: format!("no δ reaches threshold {i} for Δ = {big_delta}"),
            });
        }
    }
    let mut lo = hi / 10.0;
    while fits(lo) {
        hi = lo;
        lo /= 10.0;
        if lo < 1e-300 {
            return Ok(hi);
        }
    }
    while hi / lo > 1.0 + 1e-9 {
        let mid = (lo * hi).sqrt();
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
