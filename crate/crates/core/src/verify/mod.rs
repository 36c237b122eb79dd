//! Pointwise checks of every inequality along PI iterates, reported as
//! worst margins with replayable witnesses.

mod plot;
mod suite;

use nalgebra::DVector;
use rayon::prelude::*;

pub use plot::*;
pub use suite::*;

use crate::certificates::{DetectabilityCertificate, Envelope, Table1, WFunction, StateRef};
use crate::compfn::invert;
use crate::error::{Error, Result};
use crate::linalg;
use crate::pi::{PiRun, Policy, PolicyIterate, ValueFn};
use crate::report::{CheckEntry, CheckKind, MarginTracker, Witness};
use crate::system::{FiniteProblem, GridAbstraction, GridProblem, LqProblem};

/// What the checks need from a closed loop.
pub trait Plant: Sync {
    type State: Clone + Send + Sync;
    fn gamma(&self) -> f64;
    fn sigma_of(&self, x: &Self::State) -> f64;
    fn value_at(&self, v: &ValueFn, x: &Self::State) -> Result<f64>;
    fn closed_step(&self, h: &Policy, x: &Self::State) -> Result<Self::State>;
    fn w_at(&self, w: &WFunction, x: &Self::State) -> Result<f64>;
    fn witness(&self, x: &Self::State) -> Witness;
}

impl Plant for FiniteProblem {
    type State = usize;

    fn gamma(&self) -> f64 {
        FiniteProblem::gamma(self)
    }

    fn sigma_of(&self, x: &usize) -> f64 {
        self.sigma(*x)
    }

    fn value_at(&self, v: &ValueFn, x: &usize) -> Result<f64> {
        v.table()?.get(*x).copied().ok_or_else(|| Error::Shape(format!("no value for state {x}")))
    }

    fn closed_step(&self, h: &Policy, x: &usize) -> Result<usize> {
        let t = h.table()?;
        let u = *t.get(*x).ok_or_else(|| Error::Shape(format!("policy has no entry for state {x}")))?;
        self.step(*x, u)
    }

    fn w_at(&self, w: &WFunction, x: &usize) -> Result<f64> {
        w.eval(StateRef::Index(*x), self.sigma(*x))
    }

    fn witness(&self, x: &usize) -> Witness {
        Witness::at(x.to_string()).node(*x)
    }
}

impl Plant for LqProblem {
    type State = DVector<f64>;

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn sigma_of(&self, x: &DVector<f64>) -> f64 {
        self.sigma(x)
    }

    fn value_at(&self, v: &ValueFn, x: &DVector<f64>) -> Result<f64> {
        v.at_vector(x)
    }

    fn closed_step(&self, h: &Policy, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.closed_loop(h.gain()?) * x)
    }

    fn w_at(&self, w: &WFunction, x: &DVector<f64>) -> Result<f64> {
        w.eval(StateRef::Point(x.as_slice()), self.sigma(x))
    }

    fn witness(&self, x: &DVector<f64>) -> Witness {
        Witness::at(format!("{:?}", x.as_slice()))
    }
}

/// The finite abstraction of a [`GridProblem`], with witnesses in coordinates.
pub struct GridPlant<'a> {
    pub grid: &'a GridProblem,
    pub abstraction: &'a GridAbstraction,
}

impl Plant for GridPlant<'_> {
    type State = usize;

    fn gamma(&self) -> f64 {
        self.abstraction.finite.gamma()
    }

    fn sigma_of(&self, x: &usize) -> f64 {
        self.abstraction.finite.sigma(*x)
    }

    fn value_at(&self, v: &ValueFn, x: &usize) -> Result<f64> {
        self.abstraction.finite.value_at(v, x)
    }

    fn closed_step(&self, h: &Policy, x: &usize) -> Result<usize> {
        self.abstraction.finite.closed_step(h, x)
    }

    fn w_at(&self, w: &WFunction, x: &usize) -> Result<f64> {
        self.abstraction.finite.w_at(w, x)
    }

    fn witness(&self, x: &usize) -> Witness {
        let at = if *x == self.abstraction.sink { "sink".to_string() } else { format!("{:?}", self.grid.coords(*x)) };
        Witness::at(at).node(*x)
    }
}

/// Final Bellman residual of the run against `tol`.
pub fn check_bellman(run: &PiRun, tol: f64) -> CheckEntry {
    let mut t = MarginTracker::new(CheckKind::BellmanResidual, "Bellman residual at the last iterate", run.gamma, tol)
        .iteration(run.len() - 1);
    let r = *run.bellman_residuals.last().expect("at least one residual");
    t.observe(r, 0.0, || Witness::default().iteration(run.len() - 1));
    t.finish()
}

/// `V^{i+1} ≤ V^i` pointwise (tables) or in the Loewner order (quadratics).
pub fn check_lemma2(run: &PiRun, tol: f64) -> Result<CheckEntry> {
    let mut t = MarginTracker::new(CheckKind::Lemma2Monotone, "V^{i+1} <= V^i", run.gamma, tol);
    for (i, w) in run.iterates.windows(2).enumerate() {
        match (&w[0].value, &w[1].value) {
            (ValueFn::Table(a), ValueFn::Table(b)) => {
                for (x, (va, vb)) in a.iter().zip(b).enumerate() {
                    t.observe(*vb, *va, || Witness::at(x.to_string()).node(x).iteration(i));
                }
            }
            (ValueFn::Quadratic(a), ValueFn::Quadratic(b)) => {
                t.observe(linalg::lambda_max(&(b - a)), 0.0, || Witness::at("max eigenvector of P^{i+1} - P^i").iteration(i));
            }
            _ => return Err(Error::Shape("mixed value representations in one run".into())),
        }
    }
    Ok(t.finish())
}

/// `(V^i − V*)(x) ≤ γⁱ(V⁰ − V*)(φ*(i,x))` and, given a table, the bound
/// `γⁱ ᾱ_V(β*(σ(x), i), γ)`.
pub fn check_theorem1<P: Plant>(
    p: &P,
    run: &PiRun,
    v_star: &ValueFn,
    h_star: &Policy,
    samples: &[P::State],
    table: Option<&Table1>,
    tol: f64,
) -> Result<Vec<CheckEntry>> {
    let g = p.gamma();
    let mut first = MarginTracker::new(CheckKind::Thm1FirstIneq, "(V^i - V*)(x) <= gamma^i (V^0 - V*)(phi*(i,x))", g, tol);
    let mut full = MarginTracker::new(CheckKind::Thm1FullBound, "(V^i - V*)(x) <= gamma^i alpha_V_bar(beta*(sigma(x), i))", g, tol);
    let v0 = run.value_at(0);
    let mut phi: Vec<P::State> = samples.to_vec();
    for i in 0..run.len() {
        let vi = run.value_at(i);
        let gi = g.powi(i as i32);
        for (x, fx) in samples.iter().zip(&phi) {
            let lhs = p.value_at(vi, x)? - p.value_at(v_star, x)?;
            let rhs = gi * (p.value_at(v0, fx)? - p.value_at(v_star, fx)?);
            first.observe(lhs, rhs, || p.witness(x).iteration(i));
            if let Some(t) = table {
                let bound = crate::certificates::theorem1_bound(t, p.sigma_of(x), i as u32)?;
                full.observe(lhs, bound, || p.witness(x).iteration(i));
            }
        }
        for fx in phi.iter_mut() {
            *fx = p.closed_step(h_star, fx)?;
        }
    }
    let mut out = vec![first.finish()];
    if table.is_some() {
        out.push(full.finish());
    }
    Ok(out)
}

/// Sandwich and dissipation inequalities for `Yⁱ = Vⁱ + W/γ` along `v = f(x, hⁱ(x))`.
pub fn check_theorem2<P: Plant>(
    p: &P,
    run: &PiRun,
    det: &DetectabilityCertificate,
    table: &Table1,
    samples: &[P::State],
    tol: f64,
) -> Result<Vec<CheckEntry>> {
    let g = p.gamma();
    let mut lower = MarginTracker::new(CheckKind::Thm2Lyapunov, "alpha_Y_lower(sigma) <= Y^i", g, tol);
    let mut upper = MarginTracker::new(CheckKind::Thm2Lyapunov, "Y^i <= alpha_Y_bar(sigma)", g, tol);
    let mut decrease =
        MarginTracker::new(CheckKind::Thm2Lyapunov, "Y^i(v) - Y^i(x) <= (-alpha_Y(sigma) + Upsilon^i(sigma)) / gamma", g, tol);
    for i in 0..run.len() {
        let it = run.at(i);
        let y = |x: &P::State| -> Result<f64> { Ok(table.y_value(p.value_at(&it.value, x)?, p.w_at(&det.w, x)?)) };
        for x in samples {
            let s = p.sigma_of(x);
            let yx = y(x)?;
            lower.observe(table.alpha_lower_y.eval(s)?, yx, || p.witness(x).iteration(i));
            upper.observe(yx, table.alpha_bar_y.eval(s)?, || p.witness(x).iteration(i));
            let v = p.closed_step(&it.policy, x)?;
            let rhs = (-table.alpha_y.eval(s)? + table.upsilon(s, i as u32)?) / g;
            decrease.observe(y(&v)? - yx, rhs, || p.witness(x).iteration(i));
        }
    }
    Ok(vec![lower.finish(), upper.finish(), decrease.finish()])
}

/// Steps σ stays below δ before a trajectory counts as settled.
pub const SETTLE_WINDOW: usize = 50;

/// Options shared by the trajectory checks.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryOpts {
    pub horizon: usize,
    pub tol: f64,
    /// Extra allowance for abstraction error, reported apart from `tol`.
    pub slack: Option<f64>,
    /// Set when the check's hypotheses do not hold (e.g. `i < i*`).
    pub informational: bool,
}

fn trajectory<P: Plant>(p: &P, h: &Policy, x0: &P::State, steps: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    out.push(p.sigma_of(&x));
    for _ in 0..steps {
        x = p.closed_step(h, &x)?;
        out.push(p.sigma_of(&x));
    }
    Ok(out)
}

fn tracker(kind: CheckKind, label: &str, gamma: f64, i: Option<usize>, o: &TrajectoryOpts) -> MarginTracker {
    let mut t = MarginTracker::new(kind, label, gamma, o.tol).informational(o.informational);
    if let Some(i) = i {
        t = t.iteration(i);
    }
    if let Some(s) = o.slack {
        t = t.slack(s);
    }
    t
}

/// Checkable consequences of the semiglobal practical bound for policy `hⁱ`:
/// (a) ultimate bound — σ ≤ δ over the last [`SETTLE_WINDOW`] steps of the
/// horizon; (b) uniform bound `σ(φ(k)) ≤ α̲_Y⁻¹(max{ᾱ_Y(σ(x)), α̲_Y(δ) + Υⁱ(δ)/γ})`
/// implied by the Lyapunov sandwich.
#[allow(clippy::too_many_arguments)]
pub fn check_theorem3<P: Plant>(
    p: &P,
    policy: &Policy,
    i: usize,
    table: &Table1,
    delta: f64,
    samples: &[P::State],
    opts: &TrajectoryOpts,
) -> Result<Vec<CheckEntry>> {
    let g = p.gamma();
    let mut ultimate = tracker(CheckKind::Thm3Practical, "sigma(phi(k)) <= delta after settling", g, Some(i), opts);
    let mut bounded = tracker(CheckKind::Thm3Practical, "sigma(phi(k)) <= uniform Lyapunov bound", g, Some(i), opts);
    let cap = table.alpha_lower_y.eval(delta)? + table.upsilon(delta, i as u32)? / g;
    let steps = opts.horizon + SETTLE_WINDOW;
    let parts = samples
        .par_iter()
        .map(|x| -> Result<(MarginTracker, MarginTracker, usize, f64)> {
            let (mut u, mut b) = (ultimate.fork(), bounded.fork());
            let sig = trajectory(p, policy, x, steps)?;
            let reach = invert(&table.alpha_lower_y, table.alpha_bar_y.eval(sig[0])?.max(cap))?;
            for (k, s) in sig.iter().enumerate() {
                b.observe(*s, reach, || p.witness(x).iteration(i).time(k));
            }
            let first_tail = steps - SETTLE_WINDOW + 1;
            for (k, s) in sig.iter().enumerate().skip(first_tail) {
                u.observe(*s, delta, || p.witness(x).iteration(i).time(k));
            }
            let settle = (0..=steps - SETTLE_WINDOW)
                .find(|&k| sig[k..k + SETTLE_WINDOW].iter().all(|s| *s <= delta))
                .unwrap_or(steps);
            let peak = sig.iter().copied().fold(0.0, f64::max);
            Ok((u, b, settle, peak))
        })
        .collect::<Vec<_>>();
    let mut worst_settle = 0usize;
    // monotone envelope of observed peaks against σ(x), reported alongside
    let mut fitted: Vec<(f64, f64)> = Vec::with_capacity(samples.len());
    for (x, part) in samples.iter().zip(parts) {
        let (u, b, settle, peak) = part?;
        ultimate.merge(u);
        bounded.merge(b);
        worst_settle = worst_settle.max(settle);
        fitted.push((p.sigma_of(x), peak));
    }
    fitted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fitted_top = fitted.iter().map(|f| f.1).fold(0.0, f64::max);
    let ultimate = ultimate.note(format!("delta = {delta:.6e}; worst K_settle = {worst_settle} (window {SETTLE_WINDOW})"));
    let bounded = bounded.note(format!(
        "Lyapunov floor alpha_Y_lower(delta) + Upsilon^i(delta)/gamma = {cap:.6e}; fitted envelope B(max sigma) = {fitted_top:.6e}"
    ));
    Ok(vec![ultimate.finish(), bounded.finish()])
}

/// `σ(φⁱ(k,x)) ≤ c₁σ(x)e^{−c₂k}` for `k ≤ horizon`.
pub fn check_corollary1<P: Plant>(
    p: &P,
    policy: &Policy,
    i: usize,
    env: &Envelope,
    samples: &[P::State],
    opts: &TrajectoryOpts,
) -> Result<CheckEntry> {
    let mut t = tracker(CheckKind::Cor1Envelope, "sigma(phi(k)) <= c1 sigma(x) exp(-c2 k)", p.gamma(), Some(i), opts)
        .note(format!("c1 = {:.12e}, c2 = {:.12e}", env.c1, env.c2));
    let parts = samples
        .par_iter()
        .map(|x| {
            let mut f = t.fork();
            let sig = trajectory(p, policy, x, opts.horizon)?;
            for (k, s) in sig.iter().enumerate() {
                f.observe(*s, envelope_bound(env, sig[0], k), || p.witness(x).iteration(i).time(k));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    parts.into_iter().for_each(|f| t.merge(f));
    Ok(t.finish())
}

pub fn envelope_bound(env: &Envelope, sigma0: f64, k: usize) -> f64 {
    env.c1 * sigma0 * (-env.c2 * k as f64).exp()
}

/// `σ(φ*(k,x)) ≤ β*(σ(x), k)` for `k ≤ horizon`.
pub fn check_proposition1<P: Plant>(
    p: &P,
    h_star: &Policy,
    table: &Table1,
    samples: &[P::State],
    opts: &TrajectoryOpts,
) -> Result<CheckEntry> {
    let mut t = tracker(CheckKind::Prop1Kl, "sigma(phi*(k,x)) <= beta*(sigma(x), k)", p.gamma(), None, opts);
    let parts = samples
        .par_iter()
        .map(|x| {
            let mut f = t.fork();
            let sig = trajectory(p, h_star, x, opts.horizon)?;
            for (k, s) in sig.iter().enumerate() {
                f.observe(*s, table.beta_star.value(sig[0], k as u32)?, || p.witness(x).time(k));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    parts.into_iter().for_each(|f| t.merge(f));
    Ok(t.finish())
}

/// `ρ(A + BKⁱ) < 1` for every iterate from `from` on.
pub fn check_schur(lq: &LqProblem, run: &PiRun, from: usize, informational: bool) -> Result<CheckEntry> {
    let mut t = MarginTracker::new(CheckKind::Schur, "rho(A + B K^i) < 1", lq.gamma, 0.0).informational(informational);
    for i in from.min(run.len() - 1)..run.len() {
        let rho = linalg::spectral_radius(&lq.closed_loop(run.policy_at(i).gain()?));
        // strict inequality: the margin must be positive
        t.observe(rho, 1.0 - f64::EPSILON, || Witness::at("closed-loop spectrum").iteration(i));
    }
    Ok(t.finish().tap_note(format!("checked iterates {}..{} (later ones repeat the last)", from.min(run.len() - 1), run.len() - 1)))
}

trait TapNote {
    fn tap_note(self, note: String) -> Self;
}

impl TapNote for CheckEntry {
    fn tap_note(mut self, note: String) -> Self {
        self.note = Some(note);
        self
    }
}

/// Recomputes an envelope witness: `(σ(φ(k, x₀)), c₁σ(x₀)e^{−c₂k})`.
pub fn replay_envelope<P: Plant>(p: &P, policy: &Policy, x0: &P::State, k: usize, env: &Envelope) -> Result<(f64, f64)> {
    let sig = trajectory(p, policy, x0, k)?;
    Ok((sig[k], envelope_bound(env, sig[0], k)))
}

/// Runs PI on a problem and returns it together with `V*` and a greedy
/// optimal selection, for the finite backend.
pub fn finite_reference(p: &FiniteProblem, sup_tol: f64) -> Result<(ValueFn, Policy)> {
    let v = crate::pi::value_iteration_oracle(p, sup_tol);
    let h = p.improve_policy(&v)?;
    Ok((v, h))
}
