//! Comparison functions (class K, K-infinity and the one-step maps used to
//! build KL bounds).
//!
//! A [`ComparisonFn`] is an immutable expression tree over a handful of
//! primitive kinds. Linear gains are tracked through every combinator so that
//! the exponential closed forms are available whenever the whole tree is
//! linear; everything else is evaluated numerically (bisection for inverses,
//! scan-and-refine for the running maximum in [`kl_bound`]).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::CompFnError;

/// Relative tolerance of [`invert`].
pub const TOL_INV: f64 = 1e-10;
/// Uniform scan density of [`kl_bound`] for non-monotone maps.
pub const N_SCAN: usize = 512;
/// Probe-grid size for sampled monotonicity checks.
pub const N_PROBE: usize = 1024;
/// Upper bracket cap for inversion over unbounded domains.
pub const BRACKET_CAP: f64 = 1e15;

// Slack for "map(s) <= s" so that float rounding in s - c*s does not trip it.
const CONTRACTION_SLACK: f64 = 1e-12;
const GOLDEN_ITERS: usize = 80;

/// Declared class of a comparison function. Sampled checks may downgrade it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FnClass {
    KInfinity,
    K,
    Unclassified,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Repr {
    LinearGain { gain: f64 },
    Power { coeff: f64, exponent: f64 },
    Scaled { factor: f64, inner: Arc<ComparisonFn> },
    Sum { left: Arc<ComparisonFn>, right: Arc<ComparisonFn> },
    Composed { outer: Arc<ComparisonFn>, inner: Arc<ComparisonFn> },
    /// `s - scale * inner(s)`, the one-step contraction of a decrease condition.
    IdentityMinus { scale: f64, inner: Arc<ComparisonFn> },
    /// `s -> max_{t in [0, s]} map^(k)(t)`.
    PointwiseMaxScan { map: Arc<ComparisonFn>, k: u32 },
    InverseOf { inner: Arc<ComparisonFn> },
    /// Opaque closure; only used for synthetic maps and never serialized.
    #[serde(skip)]
    Sampled { name: String, func: SampledFn },
}

#[derive(Clone)]
pub struct SampledFn(pub Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl fmt::Debug for SampledFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<closure>")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonFn {
    pub repr: Repr,
    pub class: FnClass,
    /// Upper end of the domain; `None` for `[0, inf)`.
    pub domain_max: Option<f64>,
}

impl ComparisonFn {
    pub fn identity() -> Self {
        Self::linear(1.0)
    }

    pub fn zero() -> Self {
        Self { repr: Repr::LinearGain { gain: 0.0 }, class: FnClass::K, domain_max: None }
    }

    pub fn linear(gain: f64) -> Self {
        let class = if gain > 0.0 { FnClass::KInfinity } else { FnClass::K };
        Self { repr: Repr::LinearGain { gain }, class, domain_max: None }
    }

    pub fn power(coeff: f64, exponent: f64) -> Self {
        let class = if coeff > 0.0 && exponent > 0.0 { FnClass::KInfinity } else { FnClass::Unclassified };
        Self { repr: Repr::Power { coeff, exponent }, class, domain_max: None }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        if let Some(g) = self.exact_linear() {
            return Self::linear(factor * g);
        }
        let class = if factor > 0.0 { self.class } else { FnClass::Unclassified };
        Self {
            repr: Repr::Scaled { factor, inner: Arc::new(self.clone()) },
            class,
            domain_max: self.domain_max,
        }
    }

    pub fn plus(&self, other: &ComparisonFn) -> Self {
        if let (Some(a), Some(b)) = (self.exact_linear(), other.exact_linear()) {
            return Self::linear(a + b);
        }
        let class = match (self.class, other.class) {
            (FnClass::KInfinity, FnClass::KInfinity | FnClass::K) | (FnClass::K, FnClass::KInfinity) => {
                FnClass::KInfinity
            }
            (FnClass::K, FnClass::K) => FnClass::K,
            _ => FnClass::Unclassified,
        };
        Self {
            repr: Repr::Sum { left: Arc::new(self.clone()), right: Arc::new(other.clone()) },
            class,
            domain_max: min_domain(self.domain_max, other.domain_max),
        }
    }

    /// `s -> s - scale * self(s)`. Not a class-K function in general.
    pub fn identity_minus(&self, scale: f64) -> Self {
        if let Some(g) = self.exact_linear() {
            let mut f = Self::linear(1.0 - scale * g);
            f.class = FnClass::Unclassified;
            return f;
        }
        Self {
            repr: Repr::IdentityMinus { scale, inner: Arc::new(self.clone()) },
            class: FnClass::Unclassified,
            domain_max: self.domain_max,
        }
    }

    pub fn inverse(&self) -> Self {
        if let Some(g) = self.exact_linear() {
            if g > 0.0 {
                return Self::linear(1.0 / g);
            }
        }
        Self {
            repr: Repr::InverseOf { inner: Arc::new(self.clone()) },
            class: self.class,
            domain_max: None,
        }
    }

    pub fn max_scan(map: &ComparisonFn, k: u32) -> Self {
        Self {
            repr: Repr::PointwiseMaxScan { map: Arc::new(map.clone()), k },
            class: FnClass::K,
            domain_max: map.domain_max,
        }
    }

    pub fn sampled(name: impl Into<String>, func: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            repr: Repr::Sampled { name: name.into(), func: SampledFn(Arc::new(func)) },
            class: FnClass::Unclassified,
            domain_max: None,
        }
    }

    pub fn with_domain(mut self, upper: f64) -> Self {
        self.domain_max = Some(upper);
        self
    }

    pub fn with_class(mut self, class: FnClass) -> Self {
        self.class = class;
        self
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.repr {
            Repr::LinearGain { .. } => "linear-gain",
            Repr::Power { .. } => "power",
            Repr::Scaled { .. } => "scaled",
            Repr::Sum { .. } => "sum",
            Repr::Composed { .. } => "composed",
            Repr::IdentityMinus { .. } => "identity-minus",
            Repr::PointwiseMaxScan { .. } => "pointwise-max-scan",
            Repr::InverseOf { .. } => "inverse-of",
            Repr::Sampled { .. } => "sampled",
        }
    }

    /// The gain `g` if this function is exactly `s -> g s`.
    pub fn linear_gain(&self) -> Option<f64> {
        match &self.repr {
            Repr::LinearGain { gain } => Some(*gain),
            Repr::Power { coeff, exponent } if *exponent == 1.0 => Some(*coeff),
            Repr::Power { .. } | Repr::Sampled { .. } => None,
            Repr::Scaled { factor, inner } => inner.linear_gain().map(|g| factor * g),
            Repr::Sum { left, right } => Some(left.linear_gain()? + right.linear_gain()?),
            Repr::Composed { outer, inner } => Some(outer.linear_gain()? * inner.linear_gain()?),
            Repr::IdentityMinus { scale, inner } => inner.linear_gain().map(|g| 1.0 - scale * g),
            Repr::InverseOf { inner } => inner.linear_gain().filter(|g| *g > 0.0).map(|g| 1.0 / g),
            Repr::PointwiseMaxScan { map, k } => {
                map.linear_gain().filter(|r| *r >= 0.0).map(|r| r.powi(*k as i32))
            }
        }
    }

    fn exact_linear(&self) -> Option<f64> {
        match self.repr {
            Repr::LinearGain { gain } if self.domain_max.is_none() => Some(gain),
            _ => None,
        }
    }

    pub fn eval(&self, s: f64) -> Result<f64, CompFnError> {
        evaluate(self, s)
    }

    /// Sampled check of the K-infinity properties on `(0, upper]`: zero at
    /// zero and strictly increasing on a log-spaced probe grid.
    pub fn check_k_infinity(&self, upper: f64) -> Result<(), CompFnError> {
        let name = self.kind_name().to_string();
        if evaluate(self, 0.0)?.abs() > 1e-12 {
            return Err(CompFnError::NotMonotone { name, lo: 0.0, hi: 0.0 });
        }
        let grid = log_probe_grid(upper, N_PROBE);
        let mut prev_s = 0.0;
        let mut prev = 0.0;
        for &s in &grid {
            let v = evaluate(self, s)?;
            if v <= prev {
                return Err(CompFnError::NotMonotone { name, lo: prev_s, hi: s });
            }
            prev_s = s;
            prev = v;
        }
        Ok(())
    }

    /// Runs [`Self::check_k_infinity`] and downgrades the declared class on failure.
    pub fn verified(mut self, upper: f64) -> Self {
        if self.class == FnClass::KInfinity && self.check_k_infinity(upper).is_err() {
            self.class = FnClass::Unclassified;
        }
        self
    }

    pub fn require_k_infinity(&self, upper: f64) -> Result<(), CompFnError> {
        if self.class != FnClass::KInfinity {
            return Err(CompFnError::NotMonotone { name: self.kind_name().into(), lo: 0.0, hi: upper });
        }
        self.check_k_infinity(upper)
    }
}

fn min_domain(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

/// `points` log-spaced samples on `(0, upper]`, from `upper * 1e-6` up.
pub fn log_probe_grid(upper: f64, points: usize) -> Vec<f64> {
    let lo = (upper * 1e-6).ln();
    let hi = upper.ln();
    (0..points)
        .map(|j| {
            if j + 1 == points {
                upper
            } else {
                (lo + (hi - lo) * j as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

pub fn evaluate(f: &ComparisonFn, s: f64) -> Result<f64, CompFnError> {
    let upper = f.domain_max.unwrap_or(f64::INFINITY);
    if !(s >= 0.0) || s > upper * (1.0 + 1e-12) {
        return Err(CompFnError::Domain { value: s, upper });
    }
    let s = s.min(upper);
    match &f.repr {
        Repr::LinearGain { gain } => Ok(gain * s),
        Repr::Power { coeff, exponent } => Ok(coeff * s.powf(*exponent)),
        Repr::Scaled { factor, inner } => Ok(factor * evaluate(inner, s)?),
        Repr::Sum { left, right } => Ok(evaluate(left, s)? + evaluate(right, s)?),
        Repr::Composed { outer, inner } => evaluate(outer, evaluate(inner, s)?),
        Repr::IdentityMinus { scale, inner } => Ok(s - scale * evaluate(inner, s)?),
        Repr::PointwiseMaxScan { map, k } => kl_bound(map, s, *k),
        Repr::InverseOf { inner } => invert(inner, s),
        Repr::Sampled { func, .. } => Ok((func.0)(s)),
    }
}

/// Solves `f(s) = y` for a K-infinity `f` by bracketing bisection.
///
/// The bracket starts at `[0, max(1, y)]` and doubles until it contains `y`;
/// it never exceeds [`BRACKET_CAP`] or the function's domain.
pub fn invert(f: &ComparisonFn, y: f64) -> Result<f64, CompFnError> {
    if !(y >= 0.0) {
        return Err(CompFnError::Domain { value: y, upper: f64::INFINITY });
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    match &f.repr {
        Repr::LinearGain { gain } if *gain > 0.0 && f.domain_max.is_none() => return Ok(y / gain),
        Repr::Power { coeff, exponent } if *coeff > 0.0 && *exponent > 0.0 && f.domain_max.is_none() => {
            return Ok((y / coeff).powf(1.0 / exponent));
        }
        Repr::InverseOf { inner } => return evaluate(inner, y),
        _ => {}
    }
    let cap = f.domain_max.unwrap_or(BRACKET_CAP).min(BRACKET_CAP);
    let tol = TOL_INV * y.max(1.0);
    let mut lo = 0.0;
    let mut hi = y.max(1.0).min(cap);
    loop {
        let v = evaluate(f, hi)?;
        if (v - y).abs() <= tol {
            return Ok(hi);
        }
        if v > y {
            break;
        }
        if hi >= cap {
            return Err(CompFnError::Unreachable { target: y, cap });
        }
        lo = hi;
        hi = (2.0 * hi).min(cap);
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let v = evaluate(f, mid)?;
        if (v - y).abs() <= tol {
            return Ok(mid);
        }
        if v < y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Composition `f ∘ g`. Linear-by-linear collapses to a single gain.
pub fn compose(f: &ComparisonFn, g: &ComparisonFn) -> ComparisonFn {
    if let (Some(a), Some(b)) = (f.exact_linear(), g.exact_linear()) {
        return ComparisonFn::linear(a * b);
    }
    let class = match (f.class, g.class) {
        (FnClass::KInfinity, FnClass::KInfinity) => FnClass::KInfinity,
        (FnClass::K | FnClass::KInfinity, FnClass::K | FnClass::KInfinity) => FnClass::K,
        _ => FnClass::Unclassified,
    };
    ComparisonFn {
        repr: Repr::Composed { outer: Arc::new(f.clone()), inner: Arc::new(g.clone()) },
        class,
        domain_max: g.domain_max,
    }
}

/// `map^(k)(s)`, rejecting any step where the map expands.
pub fn iterate_contraction(map: &ComparisonFn, s: f64, k: u32) -> Result<f64, CompFnError> {
    if let Some(rho) = map.linear_gain() {
        if rho > 1.0 + CONTRACTION_SLACK && s > 0.0 && k > 0 {
            return Err(CompFnError::NotContractive { at: s, image: rho * s });
        }
        if rho < 0.0 && s > 0.0 && k > 0 {
            return Err(CompFnError::NotContractive { at: s, image: rho * s });
        }
        return Ok(rho.powi(k as i32) * s);
    }
    let mut cur = s;
    for _ in 0..k {
        let next = evaluate(map, cur)?;
        if next > cur + CONTRACTION_SLACK * cur.max(1.0) || next < -CONTRACTION_SLACK {
            return Err(CompFnError::NotContractive { at: cur, image: next });
        }
        cur = next.max(0.0);
    }
    Ok(cur)
}

fn nondecreasing_on(map: &ComparisonFn, s: f64) -> Result<bool, CompFnError> {
    let mut prev = evaluate(map, 0.0)?;
    for j in 1..N_PROBE {
        let t = s * j as f64 / (N_PROBE - 1) as f64;
        let v = evaluate(map, t)?;
        if v < prev {
            return Ok(false);
        }
        prev = v;
    }
    Ok(true)
}

/// `max_{t in [0, s]} map^(k)(t)`.
///
/// Linear maps use the closed form. Maps that are nondecreasing on the probe
/// grid short-circuit to `map^(k)(s)`. Otherwise a uniform scan of
/// [`N_SCAN`] points is refined by golden-section search around the best
/// sample.
pub fn kl_bound(map: &ComparisonFn, s: f64, k: u32) -> Result<f64, CompFnError> {
    if !(s >= 0.0) {
        return Err(CompFnError::Domain { value: s, upper: f64::INFINITY });
    }
    if k == 0 || s == 0.0 {
        return Ok(s);
    }
    if map.linear_gain().is_some() || nondecreasing_on(map, s)? {
        return iterate_contraction(map, s, k);
    }
    let step = s / (N_SCAN - 1) as f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    for j in 0..N_SCAN {
        let t = step * j as f64;
        let v = iterate_contraction(map, t, k)?;
        if v > best.1 {
            best = (j, v);
        }
    }
    let mut a = step * best.0.saturating_sub(1) as f64;
    let mut b = (step * (best.0 + 1) as f64).min(s);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = iterate_contraction(map, c, k)?;
    let mut fd = iterate_contraction(map, d, k)?;
    for _ in 0..GOLDEN_ITERS {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = iterate_contraction(map, c, k)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = iterate_contraction(map, d, k)?;
        }
    }
    Ok(best.1.max(fc).max(fd))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    IteratedComposition,
    ExponentialClosedForm,
}

/// A KL bound of the form `(s, k) -> post(max_{t <= pre(s)} map^(k)(t))`.
///
/// With identity `pre`/`post` this is the bare running-maximum bound; the
/// state-measure bound of the optimal closed loop uses `pre` = the upper
/// sandwich function and `post` = the inverse of the lower one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KlBound {
    pub pre: ComparisonFn,
    pub map: ComparisonFn,
    pub post: ComparisonFn,
    pub mode: KlMode,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LatticeReport {
    pub nonincreasing_in_k: bool,
    pub nondecreasing_in_s: bool,
    pub vanishes: bool,
    pub points: usize,
    /// Largest value of `value(s, K_probe)` over the probed `s`.
    pub tail_value: f64,
}

impl LatticeReport {
    pub fn passed(&self) -> bool {
        self.nonincreasing_in_k && self.nondecreasing_in_s && self.vanishes
    }
}

impl KlBound {
    pub fn new(map: ComparisonFn) -> Self {
        Self::with_outer(ComparisonFn::identity(), map, ComparisonFn::identity())
    }

    pub fn with_outer(pre: ComparisonFn, map: ComparisonFn, post: ComparisonFn) -> Self {
        let mode = if map.linear_gain().is_some() {
            KlMode::ExponentialClosedForm
        } else {
            KlMode::IteratedComposition
        };
        Self { pre, map, post, mode }
    }

    /// Per-step contraction factor when the map is linear.
    pub fn rate(&self) -> Option<f64> {
        self.map.linear_gain()
    }

    pub fn value(&self, s: f64, k: u32) -> Result<f64, CompFnError> {
        let inner = evaluate(&self.pre, s)?;
        let scanned = match (self.mode, self.rate()) {
            (KlMode::ExponentialClosedForm, Some(rho)) => {
                if !(0.0..=1.0 + CONTRACTION_SLACK).contains(&rho) {
                    return Err(CompFnError::NotContractive { at: inner, image: rho * inner });
                }
                rho.powi(k as i32) * inner
            }
            _ => kl_bound(&self.map, inner, k)?,
        };
        evaluate(&self.post, scanned)
    }

    /// Monotonicity lattice check on `n x n` points of `(0, s_max] x [0, k_max]`
    /// plus the vanishing probe `value(s, k_probe) < eps`.
    pub fn check_lattice(
        &self,
        s_max: f64,
        k_max: u32,
        n: usize,
        k_probe: u32,
        eps: f64,
    ) -> Result<LatticeReport, CompFnError> {
        let ss: Vec<f64> = (1..=n).map(|j| s_max * j as f64 / n as f64).collect();
        let ks: Vec<u32> = (0..n).map(|j| (k_max as usize * j / (n - 1).max(1)) as u32).collect();
        let mut table = vec![vec![0.0; ks.len()]; ss.len()];
        for (a, &s) in ss.iter().enumerate() {
            for (b, &k) in ks.iter().enumerate() {
                table[a][b] = self.value(s, k)?;
            }
        }
        let slack = |x: f64| 1e-12 * x.abs().max(1e-300);
        let mut report = LatticeReport { nonincreasing_in_k: true, nondecreasing_in_s: true, vanishes: true, points: n * n, tail_value: 0.0 };
        for row in &table {
            if row.windows(2).any(|w| w[1] > w[0] + slack(w[0])) {
                report.nonincreasing_in_k = false;
            }
        }
        for pair in table.windows(2) {
            if pair[0].iter().zip(&pair[1]).any(|(lo, hi)| hi + slack(*lo) < *lo) {
                report.nondecreasing_in_s = false;
            }
        }
        for &s in &ss {
            let tail = self.value(s, k_probe)?;
            report.tail_value = report.tail_value.max(tail);
            if tail >= eps {
                report.vanishes = false;
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(ComparisonFn::identity().eval(0.7).unwrap(), 0.7);
        assert!(close(ComparisonFn::linear(22.0 / 5.0).eval(1.0).unwrap(), 4.4, 1e-15));
        assert_eq!(ComparisonFn::power(1.0, 2.0).eval(3.0).unwrap(), 9.0);
    }

    #[test]
    fn evaluate_rejects_out_of_domain() {
        let f = ComparisonFn::power(1.0, 2.0).with_domain(2.0);
        assert!(matches!(f.eval(3.0), Err(CompFnError::Domain { .. })));
        assert!(matches!(f.eval(-1.0), Err(CompFnError::Domain { .. })));
        assert!(matches!(ComparisonFn::identity().eval(f64::NAN), Err(CompFnError::Domain { .. })));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(invert(&ComparisonFn::linear(2.0), 10.0).unwrap(), 5.0);
        assert!(close(invert(&ComparisonFn::power(1.0, 2.0), 16.0).unwrap(), 4.0, 1e-12));
        // 3 s^2 = 12 by hand gives s = 2; goes through the bisection path
        let f = compose(&ComparisonFn::linear(3.0), &ComparisonFn::power(1.0, 2.0));
        assert_eq!(f.kind_name(), "composed");
        let s = invert(&f, 12.0).unwrap();
        assert!((s - 2.0).abs() <= 1e-10, "{s}");
    }

    #[test]
    fn invert_unreachable_on_bounded_range() {
        let f = ComparisonFn::sampled("atan", |s: f64| s.atan()).with_class(FnClass::K);
        assert!(matches!(invert(&f, 2.0), Err(CompFnError::Unreachable { .. })));
        let g = ComparisonFn::power(1.0, 3.0).plus(&ComparisonFn::identity()).with_domain(1.0);
        assert!(matches!(invert(&g, 5.0), Err(CompFnError::Unreachable { .. })));
    }

    #[test]
    fn compose_examples() {
        let f = ComparisonFn::power(2.0, 1.5);
        let id_f = compose(&ComparisonFn::identity(), &f);
        for s in [0.0, 0.3, 1.0, 7.5] {
            assert_eq!(id_f.eval(s).unwrap(), f.eval(s).unwrap());
        }
        let six = compose(&ComparisonFn::linear(2.0), &ComparisonFn::linear(3.0));
        assert!(matches!(six.repr, Repr::LinearGain { gain } if gain == 6.0));
        let g = compose(&ComparisonFn::linear(0.25), &ComparisonFn::linear(5.5));
        assert_eq!(g.linear_gain(), Some(0.25 * 5.5));
    }

    #[test]
    fn iterate_examples() {
        let any = ComparisonFn::power(0.5, 2.0);
        assert_eq!(iterate_contraction(&any, 5.0, 0).unwrap(), 5.0);
        let half = ComparisonFn::linear(0.5);
        assert_eq!(iterate_contraction(&half, 8.0, 3).unwrap(), 1.0);
        // nonholonomic factor at gamma = 0.86: 0.86 - (110*0.86 - 85)/(484*0.14)
        let factor = 0.86 - 9.6 / 67.76;
        let map = ComparisonFn::linear(factor);
        assert!(close(iterate_contraction(&map, 1.0, 1).unwrap(), 0.718_323_494_687_131_1, 1e-14));
    }

    #[test]
    fn iterate_rejects_expanding_map() {
        let grow = ComparisonFn::linear(1.5);
        assert!(matches!(iterate_contraction(&grow, 1.0, 2), Err(CompFnError::NotContractive { .. })));
        let bump = ComparisonFn::sampled("bump", |s: f64| s + 0.1 * (s * 3.0).sin().abs());
        assert!(matches!(iterate_contraction(&bump, 1.0, 1), Err(CompFnError::NotContractive { .. })));
    }

    #[test]
    fn kl_bound_examples() {
        let lin = ComparisonFn::linear(0.7);
        for k in 0..6 {
            assert_eq!(kl_bound(&lin, 3.0, k).unwrap(), iterate_contraction(&lin, 3.0, k).unwrap());
        }
        assert_eq!(kl_bound(&ComparisonFn::power(0.3, 2.0), 2.5, 0).unwrap(), 2.5);
        // max of t(1 - t) on [0, 1] is 1/4 at t = 1/2
        let hump = ComparisonFn::sampled("logistic", |s: f64| s * (1.0 - s)).with_domain(1.0);
        let v = kl_bound(&hump, 1.0, 1).unwrap();
        assert!((v - 0.25).abs() <= 1e-12, "{v}");
    }

    #[test]
    fn monotone_nonlinear_map_short_circuits() {
        let map = ComparisonFn::power(1.0, 2.0).scaled(0.2).identity_minus(1.0).with_domain(2.0);
        // s - 0.2 s^2 is increasing on [0, 2.5]
        let direct = iterate_contraction(&map, 2.0, 4).unwrap();
        assert_eq!(kl_bound(&map, 2.0, 4).unwrap(), direct);
    }

    #[test]
    fn k_infinity_probe_downgrades() {
        let ok = ComparisonFn::power(2.0, 2.0).verified(10.0);
        assert_eq!(ok.class, FnClass::KInfinity);
        let flat = ComparisonFn::sampled("flat", |s: f64| s.min(1.0)).with_class(FnClass::KInfinity).verified(10.0);
        assert_eq!(flat.class, FnClass::Unclassified);
        assert!(flat.require_k_infinity(10.0).is_err());
    }

    #[test]
    fn linear_gain_tracks_combinators() {
        let f = ComparisonFn::linear(2.0).plus(&ComparisonFn::linear(3.0).scaled(0.5));
        assert_eq!(f.linear_gain(), Some(3.5));
        assert_eq!(f.inverse().linear_gain(), Some(1.0 / 3.5));
        let m = ComparisonFn::linear(0.2).identity_minus(2.0);
        assert!(close(m.linear_gain().unwrap(), 0.6, 1e-15));
        assert!(ComparisonFn::power(1.0, 2.0).linear_gain().is_none());
    }

    #[test]
    fn kl_bound_struct_closed_form() {
        let kl = KlBound::new(ComparisonFn::linear(0.9));
        assert_eq!(kl.mode, KlMode::ExponentialClosedForm);
        assert!(close(kl.value(2.0, 3).unwrap(), 2.0 * 0.729, 1e-15));
        let rep = kl.check_lattice(5.0, 40, 20, 2000, 1e-6).unwrap();
        assert!(rep.passed());
    }

    #[test]
    fn serde_roundtrip_preserves_values() {
        let f = compose(&ComparisonFn::power(2.0, 1.5), &ComparisonFn::linear(3.0).plus(&ComparisonFn::power(1.0, 2.0)));
        let json = serde_json::to_string(&f).unwrap();
        let g: ComparisonFn = serde_json::from_str(&json).unwrap();
        for s in [0.0, 0.5, 2.0] {
            assert_eq!(f.eval(s).unwrap(), g.eval(s).unwrap());
        }
    }
}
