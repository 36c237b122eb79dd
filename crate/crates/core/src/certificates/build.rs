use std::collections::BinaryHeap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::*;
use crate::compfn::log_probe_grid;
use crate::pi::{riccati_oracle, value_iteration_oracle};
use crate::report::{CheckKind, MarginTracker, Witness};
use crate::system::{halton_in_box, nonholonomic_h0, FiniteProblem, GridModel, GridProblem, LqProblem};

/// Tolerance shared by the certificate probes.
pub const PROBE_TOL: f64 = 1e-9;
/// Maximum eigenvalue allowed for the detectability LMI block.
pub const LMI_TOL: f64 = 1e-10;
const PROBE_POINTS: usize = 1024;
const LEMMA1_STEPS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmiOutcome {
    pub passed: bool,
    pub max_eigenvalue: f64,
}

/// Checks `[[AᵀS₂A − S₂ + S₁ − Q, AᵀS₂B], [BᵀS₂A, BᵀS₂B − R]] ⪯ 0`.
/// `S₁` and `S₂` are symmetrized first.
pub fn verify_lmi(a: &Mat, b: &Mat, q: &Mat, r: &Mat, s1: &Mat, s2: &Mat) -> Result<LmiOutcome> {
    let n = a.nrows();
    let m = b.ncols();
    linalg::check_square("A", a, n)?;
    linalg::check_square("Q", q, n)?;
    linalg::check_square("R", r, m)?;
    linalg::check_square("S1", s1, n)?;
    linalg::check_square("S2", s2, n)?;
    if b.nrows() != n {
        return Err(Error::Shape(format!("B must have {n} rows")));
    }
    let s1 = linalg::symmetrize(s1);
    let s2 = linalg::symmetrize(s2);
    let mut block = Mat::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(&(a.transpose() * &s2 * a - &s2 + &s1 - q));
    let off = a.transpose() * &s2 * b;
    block.view_mut((0, n), (n, m)).copy_from(&off);
    block.view_mut((n, 0), (m, n)).copy_from(&off.transpose());
    block.view_mut((n, n), (m, m)).copy_from(&(b.transpose() * &s2 * b - r));
    let max_eigenvalue = linalg::lambda_max(&block);
    Ok(LmiOutcome { passed: max_eigenvalue <= LMI_TOL, max_eigenvalue })
}

fn sa3_trackers(label: &str) -> (MarginTracker, MarginTracker) {
    (
        MarginTracker::new(CheckKind::Sa3Detectability, format!("{label}: W <= alpha_W_bar(sigma)"), f64::NAN, PROBE_TOL),
        MarginTracker::new(CheckKind::Sa3Detectability, format!("{label}: W(f) - W <= -alpha_W(sigma) + l"), f64::NAN, PROBE_TOL),
    )
}

/// Both detectability inequalities on every state–action pair.
pub fn verify_detectability_finite(p: &FiniteProblem, det: &DetectabilityCertificate) -> Result<Vec<CheckEntry>> {
    let (mut upper, mut decrease) = sa3_trackers("finite");
    let w: Vec<f64> =
        (0..p.n_states()).map(|x| det.w.eval(StateRef::Index(x), p.sigma(x))).collect::<Result<_>>()?;
    for x in 0..p.n_states() {
        let s = p.sigma(x);
        upper.observe(w[x], det.alpha_w_bar.eval(s)?, || Witness::at(x.to_string()).node(x));
        let aw = det.alpha_w.eval(s)?;
        for (u, (y, c)) in p.row(x).enumerate() {
            decrease.observe(w[y] - w[x], -aw + c, || Witness::at(format!("{x} u={u}")).node(x));
        }
    }
    Ok(vec![upper.finish(), decrease.finish()])
}

/// Detectability on deterministic (x, u) samples from `[−1, 1]^(n+m)`;
/// the inequalities are homogeneous of degree two.
pub fn verify_detectability_lq(lq: &LqProblem, det: &DetectabilityCertificate) -> Result<Vec<CheckEntry>> {
    let (n, m) = (lq.n_states(), lq.n_inputs());
    let (mut upper, mut decrease) = sa3_trackers("lq");
    for z in halton_in_box(&vec![(-1.0, 1.0); n + m], PROBE_POINTS) {
        let x = DVector::from_column_slice(&z[..n]);
        let u = DVector::from_column_slice(&z[n..]);
        let s = lq.sigma(&x);
        let wx = det.w.eval(StateRef::Point(x.as_slice()), s)?;
        let y = lq.step(&x, &u)?;
        let wy = det.w.eval(StateRef::Point(y.as_slice()), lq.sigma(&y))?;
        let witness = || Witness::at(format!("x={:?} u={:?}", x.as_slice(), u.as_slice()));
        upper.observe(wx, det.alpha_w_bar.eval(s)?, witness);
        decrease.observe(wy - wx, -det.alpha_w.eval(s)? + lq.stage_cost(&x, &u), witness);
    }
    Ok(vec![upper.finish(), decrease.finish()])
}

/// Detectability of the continuous grid plant on Halton points of the box
/// against every grid action.
pub fn verify_detectability_grid(g: &GridProblem, det: &DetectabilityCertificate) -> Result<Vec<CheckEntry>> {
    let model = g.model();
    let (mut upper, mut decrease) = sa3_trackers("grid");
    let w = |x: &[f64]| match &det.w {
        WFunction::Zero => Ok(0.0),
        WFunction::ScaledSigma { w } => Ok(w * model.sigma(x)),
        other => Err(Error::Backend(format!("W of kind {other:?} is not defined off the grid"))),
    };
    for x in halton_in_box(&g.spec().bounds, PROBE_POINTS) {
        let s = model.sigma(&x);
        let wx = w(&x)?;
        upper.observe(wx, det.alpha_w_bar.eval(s)?, || Witness::at(format!("{x:?}")));
        let aw = det.alpha_w.eval(s)?;
        for (ui, u) in g.actions().iter().enumerate() {
            let y = model.dynamics(&x, u);
            decrease.observe(w(&y)? - wx, -aw + model.stage_cost(&x, u), || Witness::at(format!("{x:?} u#{ui}")));
        }
    }
    Ok(vec![upper.finish(), decrease.finish()])
}

/// Cost ratio `ℓ_k / (M aᵏ χ(σ(x)))`, observed against 1.
fn lemma1_tracker(label: &str) -> MarginTracker {
    MarginTracker::new(CheckKind::Lemma1Envelope, label, f64::NAN, PROBE_TOL)
        .note("stage cost along initial-policy rollouts divided by M a^k chi(sigma(x))")
}

fn lemma1_observe(t: &mut MarginTracker, cert: &InitialPolicyCertificate, cost: f64, sigma0: f64, k: usize, what: impl Fn() -> String) -> Result<()> {
    let scale = cert.m * cert.a.powi(k as i32) * cert.chi.eval(sigma0)?;
    if scale > 0.0 {
        t.observe(cost / scale, 1.0, || Witness::at(what()).time(k));
    } else {
        t.observe(cost, 0.0, || Witness::at(what()).time(k));
    }
    Ok(())
}

/// Fits the tightest `(M, a)` with `ℓ(φ(k,x,h₀)) ≤ M aᵏ σ(x)`. Every
/// trajectory is on its terminal cycle after `n` steps, so ratios are
/// collected for `k < n` and the cycle costs cover the rest.
pub fn lemma1_finite(p: &FiniteProblem, h0: &[usize]) -> Result<InitialPolicyCertificate> {
    p.check_policy(h0)?;
    let n = p.n_states();
    let cycle_max = terminal_cycle_max(p, h0);
    let per_k = (0..n)
        .into_par_iter()
        .map(|x0| -> Result<Vec<f64>> {
            let s = p.sigma(x0);
            let mut ratios = vec![0.0; n];
            let mut x = x0;
            for r in ratios.iter_mut() {
                let c = p.cost(x, h0[x]);
                if s == 0.0 {
                    if c > 0.0 {
                        return Err(Error::NoCertificate(format!(
                            "state {x0} has sigma = 0 but the initial policy incurs cost {c} along its trajectory"
                        )));
                    }
                } else {
                    *r = c / s;
                }
                x = p.next(x, h0[x]);
            }
            if s == 0.0 && cycle_max[x0] > 0.0 {
                return Err(Error::NoCertificate(format!("state {x0} has sigma = 0 but ends on a costly cycle")));
            }
            Ok(ratios)
        })
        .try_reduce(
            || vec![0.0; n],
            |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()),
        )?;
    let costly_cycle = (0..n).any(|x| p.sigma(x) > 0.0 && cycle_max[x] > 0.0);
    let r_cycle = (0..n).filter(|&x| p.sigma(x) > 0.0).map(|x| cycle_max[x] / p.sigma(x)).fold(0.0, f64::max);
    let mut notes = Vec::new();
    let (mut m, mut a) = if per_k.first().copied().unwrap_or(0.0) > 0.0 {
        let m = per_k[0];
        let a = per_k.iter().enumerate().skip(1).map(|(k, r)| (r / m).powf(1.0 / k as f64)).fold(0.0, f64::max);
        (m, a)
    } else {
        notes.push("initial stage costs vanish; M taken as the largest ratio with a >= 1".into());
        (per_k.iter().copied().fold(0.0, f64::max), 1.0)
    };
    if costly_cycle {
        a = a.max(1.0);
        m = m.max(r_cycle);
    }
    if m == 0.0 {
        notes.push("initial policy has zero cost everywhere; M floored at 1e-12".into());
        m = 1e-12;
    }
    let mut cert = InitialPolicyCertificate::new(m, a, ComparisonFn::identity(), "fitted on exhaustive rollouts");
    cert.notes = notes;
    Ok(cert)
}

/// Largest stage cost on the cycle each state's trajectory ends in.
fn terminal_cycle_max(p: &FiniteProblem, h: &[usize]) -> Vec<f64> {
    let n = p.n_states();
    let mut out = vec![f64::NAN; n];
    let mut mark = vec![0u8; n];
    let mut path = Vec::new();
    for start in 0..n {
        if mark[start] != 0 {
            continue;
        }
        path.clear();
        let mut x = start;
        while mark[x] == 0 {
            mark[x] = 1;
            path.push(x);
            x = p.next(x, h[x]);
        }
        let value = if mark[x] == 1 {
            let pos = path.iter().position(|&y| y == x).expect("on path");
            let v = path[pos..].iter().map(|&y| p.cost(y, h[y])).fold(0.0, f64::max);
            for &y in &path[pos..] {
                out[y] = v;
            }
            v
        } else {
            out[x]
        };
        for &y in &path {
            if out[y].is_nan() {
                out[y] = value;
            }
            mark[y] = 2;
        }
    }
    out
}

/// `ℓ(φ(k,x,K₀x)) ≤ M aᵏ|x|²` with `M = ‖Q + K₀ᵀRK₀‖`, `a = ‖A + BK₀‖²`.
pub fn lemma1_lq(lq: &LqProblem) -> InitialPolicyCertificate {
    let m = linalg::spectral_norm(&(&lq.q + lq.k0.transpose() * &lq.r * &lq.k0));
    let a = linalg::spectral_norm(&lq.closed_loop(&lq.k0)).powi(2);
    InitialPolicyCertificate::new(m, a, ComparisonFn::identity(), "closed form from the initial gain")
}

/// `M = 22/3`, `a = 256/225` for `h(x) = (x₁/15, −x₂)`.
pub fn lemma1_nonholonomic() -> InitialPolicyCertificate {
    InitialPolicyCertificate::new(22.0 / 3.0, 256.0 / 225.0, ComparisonFn::identity(), "analytic constants for h(x) = (x1/15, -x2)")
}

pub fn probe_lemma1_finite(p: &FiniteProblem, h0: &[usize], cert: &InitialPolicyCertificate) -> Result<CheckEntry> {
    let mut t = lemma1_tracker("finite: l(phi(k)) <= M a^k sigma");
    let horizon = 2 * p.n_states() + 2;
    for x0 in 0..p.n_states() {
        let traj = p.rollout(h0, x0, horizon)?;
        for (k, &c) in traj.costs.iter().enumerate() {
            lemma1_observe(&mut t, cert, c, p.sigma(x0), k, || x0.to_string())?;
        }
    }
    Ok(t.finish())
}

pub fn probe_lemma1_lq(lq: &LqProblem, cert: &InitialPolicyCertificate) -> Result<CheckEntry> {
    let mut t = lemma1_tracker("lq: l(phi(k)) <= M a^k |x|^2");
    for z in halton_in_box(&vec![(-1.0, 1.0); lq.n_states()], 128) {
        let x0 = DVector::from_column_slice(&z);
        let traj = lq.rollout(&lq.k0, &x0, LEMMA1_STEPS)?;
        for (k, &c) in traj.costs.iter().enumerate() {
            lemma1_observe(&mut t, cert, c, lq.sigma(&x0), k, || format!("{:?}", z))?;
        }
    }
    Ok(t.finish())
}

/// Exact continuous rollouts of `h(x) = (x₁/15, −x₂)` from Halton points.
pub fn probe_lemma1_nonholonomic(g: &GridProblem, cert: &InitialPolicyCertificate) -> Result<CheckEntry> {
    let model = g.model();
    let mut t = lemma1_tracker("grid: l(phi(k)) <= M a^k sigma (continuous plant)");
    for x0 in halton_in_box(&g.spec().bounds, PROBE_POINTS) {
        let s0 = model.sigma(&x0);
        let mut x = x0.clone();
        for k in 0..LEMMA1_STEPS {
            let u = nonholonomic_h0(&x);
            lemma1_observe(&mut t, cert, model.stage_cost(&x, &u), s0, k, || format!("{x0:?}"))?;
            x = model.dynamics(&x, &u);
        }
    }
    Ok(t.finish())
}

/// Undiscounted optimal cost: zero on states with an infinite zero-cost
/// path, shortest path to that set elsewhere (costs are nonnegative).
pub fn undiscounted_value(p: &FiniteProblem) -> Vec<f64> {
    let n = p.n_states();
    let mut free: Vec<bool> = (0..n).map(|x| p.row(x).any(|(_, c)| c == 0.0)).collect();
    loop {
        let next: Vec<bool> = (0..n).map(|x| free[x] && p.row(x).any(|(y, c)| c == 0.0 && free[y])).collect();
        if next == free {
            break;
        }
        free = next;
    }
    let mut reverse: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for x in 0..n {
        for (y, c) in p.row(x) {
            reverse[y].push((x, c));
        }
    }
    #[derive(PartialEq)]
    struct Item(f64, usize);
    impl Eq for Item {}
    impl PartialOrd for Item {
        fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for Item {
        fn cmp(&self, o: &Self) -> std::cmp::Ordering {
            o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
        }
    }
    let mut v = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for x in (0..n).filter(|&x| free[x]) {
        v[x] = 0.0;
        heap.push(Item(0.0, x));
    }
    while let Some(Item(d, y)) = heap.pop() {
        if d > v[y] {
            continue;
        }
        for &(x, c) in &reverse[y] {
            if d + c < v[x] {
                v[x] = d + c;
                heap.push(Item(v[x], x));
            }
        }
    }
    v
}

/// `ᾱ_V* = ā_V* s` bounding `V*_γ ≤ V*_{γ₀}` for every `γ < γ₀`.
pub fn sa5_finite(p: &FiniteProblem, gamma0: f64) -> Result<(f64, String)> {
    const VI_TOL: f64 = 1e-10;
    let (reference, slack, label) = if gamma0 >= 1.0 {
        (undiscounted_value(p), 0.0, "undiscounted optimal cost (shortest path to zero-cost cycles)".to_string())
    } else {
        let v = value_iteration_oracle(&p.with_gamma(gamma0)?, VI_TOL);
        (v.table()?.to_vec(), VI_TOL, format!("value iteration at gamma0 = {gamma0}"))
    };
    let mut gain: f64 = 0.0;
    for (x, &r) in reference.iter().enumerate() {
        let v = r + slack;
        if !v.is_finite() {
            return Err(Error::NoCertificate(format!("optimal cost at state {x} is unbounded as gamma -> {gamma0}")));
        }
        let s = p.sigma(x);
        if s == 0.0 {
            if r > slack {
                return Err(Error::NoCertificate(format!("state {x} has sigma = 0 but positive optimal cost {}", r)));
            }
        } else {
            gain = gain.max(v / s);
        }
    }
    Ok((gain, label))
}

/// `W ≡ 0` with the largest `a_W` such that `ℓ(x,u) ≥ a_W σ(x)`.
pub fn default_detectability_finite(p: &FiniteProblem) -> Result<DetectabilityCertificate> {
    let a_w = (0..p.n_states())
        .filter(|&x| p.sigma(x) > 0.0)
        .map(|x| p.row(x).map(|(_, c)| c).fold(f64::INFINITY, f64::min) / p.sigma(x))
        .fold(f64::INFINITY, f64::min);
    if !(a_w > 0.0 && a_w.is_finite()) {
        return Err(Error::NoCertificate(format!("stage cost does not dominate sigma (best a_W = {a_w})")));
    }
    Ok(DetectabilityCertificate {
        w: WFunction::Zero,
        alpha_w: ComparisonFn::linear(a_w),
        alpha_w_bar: ComparisonFn::zero(),
        s1: None,
        s2: None,
    })
}

/// Certificate for `W = wσ`, `α_W = 𝕀`, `ᾱ_W = w𝕀`.
pub fn scaled_sigma_detectability(w: f64) -> DetectabilityCertificate {
    DetectabilityCertificate {
        w: WFunction::ScaledSigma { w },
        alpha_w: ComparisonFn::identity(),
        alpha_w_bar: ComparisonFn::linear(w),
        s1: None,
        s2: None,
    }
}

pub fn finite_bundle(p: &FiniteProblem, h0: &[usize], det: Option<DetectabilityCertificate>) -> Result<CertificateBundle> {
    let det = match det {
        Some(d) => d,
        None => default_detectability_finite(p)?,
    };
    let mut probes = verify_detectability_finite(p, &det)?;
    let init = lemma1_finite(p, h0)?;
    probes.push(probe_lemma1_finite(p, h0, &init)?);
    let (gain, reference) = sa5_finite(p, init.gamma0)?;
    let upper = p.sigmas().iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    assemble(Backend::Finite, det, init, ComparisonFn::linear(gain), reference, probes, Vec::new(), upper)
}

/// `S₂ = 0`, `S₁ = Q` unless given; `ā_V* = λ_max(P*₁)`.
pub fn lq_bundle(lq: &LqProblem, s1: Option<Mat>, s2: Option<Mat>) -> Result<CertificateBundle> {
    let n = lq.n_states();
    let s1 = linalg::symmetrize(&s1.unwrap_or_else(|| lq.q.clone()));
    let s2 = linalg::symmetrize(&s2.unwrap_or_else(|| Mat::zeros(n, n)));
    let lmi = verify_lmi(&lq.a, &lq.b, &lq.q, &lq.r, &s1, &s2)?;
    let mut probes = vec![CheckEntry::verdict(CheckKind::Lmi, "detectability LMI: max eigenvalue <= 0", f64::NAN, -lmi.max_eigenvalue, LMI_TOL)];
    let a_w = linalg::lambda_min(&s1);
    if !(a_w > 0.0) {
        return Err(Error::NoCertificate(format!("lambda_min(S1) = {a_w} must be positive (Q singular? supply S1, S2)")));
    }
    let det = DetectabilityCertificate {
        w: WFunction::Quadratic { s2: s2.clone() },
        alpha_w: ComparisonFn::linear(a_w),
        alpha_w_bar: ComparisonFn::linear(linalg::lambda_max(&s2).max(0.0)),
        s1: Some(s1),
        s2: Some(s2),
    };
    probes.extend(verify_detectability_lq(lq, &det)?);
    let mut init = lemma1_lq(lq);
    let diag = lq.diagnostics();
    if diag.initial_radius >= 1.0 {
        init.notes.push(format!("initial policy not stabilizing: rho(A + B K0) = {:.6}", diag.initial_radius));
    }
    probes.push(probe_lemma1_lq(lq, &init)?);
    let undiscounted = LqProblem { gamma: 1.0, ..lq.clone() };
    let p1 = riccati_oracle(&undiscounted, 1e-12, 1_000_000)
        .map_err(|e| Error::NoCertificate(format!("undiscounted Riccati iteration failed: {e}")))?;
    let mut notes = Vec::new();
    if !diag.stabilizable || !diag.detectable {
        notes.push("(A, B) not stabilizable or (A, Q) not detectable".into());
    }
    assemble(
        Backend::Lq,
        det,
        init,
        ComparisonFn::linear(linalg::lambda_max(&p1)),
        "lambda_max of the undiscounted Riccati solution".into(),
        probes,
        notes,
        1.0,
    )
}

/// Analytic certificate for the nonholonomic integrator: `W = 0`, `α_W = 𝕀`,
/// `ᾱ_V* = (22/5)𝕀`, initial-policy cost constants for `h(x) = (x₁/15, −x₂)`.
pub fn grid_bundle(g: &GridProblem) -> Result<CertificateBundle> {
    if g.model() != GridModel::Nonholonomic {
        return Err(Error::NoCertificate("analytic certificates exist only for the nonholonomic model".into()));
    }
    let det = DetectabilityCertificate {
        w: WFunction::Zero,
        alpha_w: ComparisonFn::identity(),
        alpha_w_bar: ComparisonFn::zero(),
        s1: None,
        s2: None,
    };
    let mut probes = verify_detectability_grid(g, &det)?;
    let init = lemma1_nonholonomic();
    probes.push(probe_lemma1_nonholonomic(g, &init)?);
    let notes = vec![
        "upper bound V* <= (22/5) sigma is the known bound for this plant; it is not re-derived here".to_string(),
        "probes use the continuous plant; the grid abstraction is verified separately with slack".to_string(),
    ];
    assemble(
        Backend::Grid,
        det,
        init,
        ComparisonFn::linear(22.0 / 5.0),
        "known bound for the nonholonomic integrator".into(),
        probes,
        notes,
        g.delta_grid(),
    )
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    backend: Backend,
    det: DetectabilityCertificate,
    init: InitialPolicyCertificate,
    alpha_vstar_bar: ComparisonFn,
    reference: String,
    mut probes: Vec<CheckEntry>,
    notes: Vec<String>,
    probe_upper: f64,
) -> Result<CertificateBundle> {
    let gamma0 = init.gamma0;
    let linear = match (det.alpha_w.linear_gain(), det.alpha_w_bar.linear_gain(), alpha_vstar_bar.linear_gain(), init.chi.linear_gain()) {
        (Some(a_w), Some(a_w_bar), Some(a_vs), Some(chi)) => Some(LinearGainBundle::new(a_w, a_w_bar, a_vs, init.m * chi, init.a)?),
        _ => None,
    };
    let gamma_star = match &linear {
        Some(lg) => gamma_star_linear(lg)?,
        None => gamma_star_general(&det.alpha_w, &alpha_vstar_bar, gamma0, probe_upper)?,
    };
    let mut eq9 = MarginTracker::new(CheckKind::Sa5Bound, "(1 - gamma*) alpha_V*_bar <= alpha_W on probe grid", f64::NAN, PROBE_TOL);
    for s in log_probe_grid(probe_upper, crate::compfn::N_PROBE) {
        eq9.observe((1.0 - gamma_star) * alpha_vstar_bar.eval(s)?, det.alpha_w.eval(s)?, || Witness::at(format!("s={s}")));
    }
    probes.push(eq9.finish());
    let sa5 = Sa5Certificate { alpha_vstar_bar, gamma_star, reference };
    let mid = 0.5 * (gamma_star + gamma0);
    let table = Table1::build(&det, &init, &sa5, mid)?;
    probes.push(kl_lattice_entry(&table, probe_upper)?);
    Ok(CertificateBundle {
        backend,
        remark3: linear.as_ref().map(remark3_compare),
        detectability: det,
        initial_policy: init,
        sa5,
        linear,
        gamma0,
        gamma_star,
        probe_upper,
        probes,
        sweep: Vec::new(),
        notes,
    })
}

/// Probe-lattice check of `β*` as one report entry.
pub fn kl_lattice_entry(t: &Table1, probe_upper: f64) -> Result<CheckEntry> {
    let eps = 1e-6 * probe_upper.max(1.0);
    let r = t.beta_star.check_lattice(probe_upper, 200, 24, 5000, eps)?;
    let margin = if r.nonincreasing_in_k && r.nondecreasing_in_s { eps - r.tail_value } else { -1.0 };
    let mut e = CheckEntry::verdict(CheckKind::KlLattice, "beta* probe lattice (monotone, vanishing)", t.gamma, margin, 0.0);
    e.note = Some(format!(
        "nonincreasing_in_k={} nondecreasing_in_s={} tail={:.3e} points={}",
        r.nonincreasing_in_k, r.nondecreasing_in_s, r.tail_value, r.points
    ));
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::build_nonholonomic_example;

    #[test]
    fn lmi_examples() {
        let i2 = Mat::identity(2, 2);
        let a = Mat::from_row_slice(2, 2, &[1.2, 0.5, 0.0, 0.9]);
        let z = Mat::zeros(2, 2);
        let ok = verify_lmi(&a, &i2, &i2, &i2, &i2, &z).unwrap();
        assert!(ok.passed);
        assert!(ok.max_eigenvalue.abs() < 1e-12, "{}", ok.max_eigenvalue);
        assert!(!verify_lmi(&a, &i2, &i2, &i2, &(&i2 * 2.0), &z).unwrap().passed);
        let zeros = verify_lmi(&a, &i2, &i2, &i2, &z, &z).unwrap();
        assert!(zeros.passed && (zeros.max_eigenvalue + 1.0).abs() < 1e-12);
        assert!(matches!(verify_lmi(&a, &i2, &i2, &i2, &Mat::zeros(3, 3), &z), Err(Error::Shape(_))));
    }

    #[test]
    fn lmi_symmetrization_invariance() {
        let i2 = Mat::identity(2, 2);
        let a = Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]);
        let s2 = Mat::from_row_slice(2, 2, &[0.3, 0.2, 0.0, 0.3]);
        let x = verify_lmi(&a, &i2, &i2, &i2, &(&i2 * 0.5), &s2).unwrap();
        let y = verify_lmi(&a, &i2, &i2, &i2, &(&i2 * 0.5), &linalg::symmetrize(&s2)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn detectability_violation_is_reported() {
        // W = σ, ℓ ≡ 0, α_W = 2ᾱ_W: the decrease condition fails
        let p = FiniteProblem::new(vec![vec![0], vec![1]], vec![vec![0.0], vec![0.0]], vec![0.0, 1.0], 0.5).unwrap();
        let mut det = scaled_sigma_detectability(1.0);
        det.alpha_w = ComparisonFn::linear(2.0);
        let entries = verify_detectability_finite(&p, &det).unwrap();
        assert!(entries[0].passed);
        assert!(!entries[1].passed);
        assert_eq!(entries[1].witness.as_ref().unwrap().node, Some(1));
        assert!((entries[1].worst_margin + 2.0).abs() < 1e-15);
    }

    #[test]
    fn lemma1_fit_bounds_long_rollouts() {
        for seed in 0..10 {
            let p = FiniteProblem::random_certified(40, 3, 0.9, 0.5, seed).unwrap();
            let h0: Vec<usize> = (0..40).map(|x| if x == 0 { 0 } else { (x + seed as usize) % 3 }).collect();
            let cert = lemma1_finite(&p, &h0).unwrap();
            for x0 in 1..40 {
                let traj = p.rollout(&h0, x0, 200).unwrap();
                for (k, c) in traj.costs.iter().enumerate() {
                    assert!(*c <= cert.m * cert.a.powi(k as i32) * p.sigma(x0) * (1.0 + 1e-12), "seed {seed} x {x0} k {k}");
                }
            }
        }
    }

    #[test]
    fn lemma1_one_step_attractor() {
        // every state jumps to the absorbing attractor with ℓ = σ
        let p = FiniteProblem::new(vec![vec![0], vec![0], vec![0]], vec![vec![0.0], vec![1.0], vec![2.0]], vec![0.0, 1.0, 2.0], 0.9)
            .unwrap();
        let cert = lemma1_finite(&p, &[0, 0, 0]).unwrap();
        assert_eq!(cert.m, 1.0);
        assert!(cert.a <= 1.0);
        assert_eq!(cert.gamma0, 1.0);
    }

    #[test]
    fn lemma1_rejects_costly_attractor() {
        let p = FiniteProblem::new(vec![vec![0]], vec![vec![1.0]], vec![0.0], 0.9).unwrap();
        assert!(matches!(lemma1_finite(&p, &[0]), Err(Error::NoCertificate(_))));
    }

    #[test]
    fn undiscounted_value_matches_hand_values() {
        // 0 absorbing free; 1 → 0 cost 2, or 1 → 2 cost 0; 2 → 0 cost 1
        let p = FiniteProblem::new(
            vec![vec![0], vec![0, 2], vec![0]],
            vec![vec![0.0], vec![2.0, 0.0], vec![1.0]],
            vec![0.0, 1.0, 1.0],
            0.9,
        )
        .unwrap();
        assert_eq!(undiscounted_value(&p), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn lq_bundle_matches_closed_forms() {
        let lq = LqProblem::example(LqProblem::example_k0(), 0.7).unwrap();
        let b = lq_bundle(&lq, None, None).unwrap();
        assert!(b.probes_passed(), "{:#?}", b.probes.iter().filter(|p| p.blocks()).collect::<Vec<_>>());
        assert!((b.initial_policy.a - 0.36).abs() < 1e-12);
        assert_eq!(b.gamma0, 1.0);
        let p1 = riccati_oracle(&LqProblem { gamma: 1.0, ..lq.clone() }, 1e-12, 1_000_000).unwrap();
        assert!((b.gamma_star - (1.0 - 1.0 / linalg::lambda_max(&p1))).abs() < 1e-12);
        assert!((b.gamma_star - 0.564).abs() < 1e-3, "{}", b.gamma_star);
    }

    #[test]
    fn lq_scalar_gamma0() {
        let lq = LqProblem::scalar(2.0, 1.0, 1.0, 1.0, 0.2, 0.0).unwrap();
        let b = lq_bundle(&lq, None, None);
        // γ* for this plant is above γ₀ = 1/4, so no certificate exists
        match b {
            Ok(b) => assert!((b.gamma0 - 0.25).abs() < 1e-15),
            Err(e) => assert!(matches!(e, Error::NoStabilizingDiscount { .. }), "{e}"),
        }
        assert!((lemma1_lq(&lq).gamma0 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nonholonomic_bundle_constants() {
        let g = build_nonholonomic_example(0.86, None).unwrap();
        let b = grid_bundle(&g).unwrap();
        assert!((b.gamma0 - 225.0 / 256.0).abs() < 1e-12);
        assert!((b.gamma_star - 17.0 / 22.0).abs() < 1e-12);
        assert!(b.probes_passed(), "{:#?}", b.probes.iter().filter(|p| p.blocks()).collect::<Vec<_>>());
        let lg = b.linear.unwrap();
        assert_eq!(istar_linear(&lg, 0.86).unwrap().value, 20);
    }

    #[test]
    fn finite_bundle_on_certified_problem() {
        let p = FiniteProblem::random_certified(30, 3, 0.9, 0.5, 3).unwrap();
        let h0 = vec![0; 30];
        let b = finite_bundle(&p, &h0, Some(scaled_sigma_detectability(0.5))).unwrap();
        assert!(b.probes_passed());
        assert!(b.gamma_star < b.gamma0);
        let auto = finite_bundle(&p, &h0, None).unwrap();
        assert!(auto.probes_passed());
    }

    #[test]
    fn sweep_flags_out_of_range() {
        let g = build_nonholonomic_example(0.86, None).unwrap();
        let mut b = grid_bundle(&g).unwrap();
        b.fill_sweep(0.5, 0.95, 10);
        assert!(!b.sweep[0].in_range && !b.sweep[9].in_range);
        assert!(b.sweep.iter().any(|r| r.in_range && r.istar_linear.is_some()));
    }
}
