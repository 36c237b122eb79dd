//! Backend drivers: pick samples and oracles, run every check, collect plot data.

use nalgebra::DVector;

use super::*;
use crate::certificates::{
    envelope_constants, istar_general, istar_linear, theorem1_bound, CertificateBundle, Envelope, Istar,
};
use crate::pi::{greedy_gain, optimal_closed_loop, riccati_oracle, value_iteration_oracle};
use crate::report::VerificationReport;
use crate::system::halton_in_box;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub tol: f64,
    pub horizon: usize,
    /// Sampled initial states (LQ and grid; finite problems use every state).
    pub samples: usize,
    /// Iteration whose policy drives the trajectory checks; defaults to the
    /// certified threshold.
    pub iteration: Option<usize>,
    /// Ultimate bound `δ` as a fraction of the region size `Δ`.
    pub delta_fraction: f64,
    /// Sup-norm target of the value-iteration oracle.
    pub oracle_tol: f64,
    /// Samples drawn into the σ-vs-k plot series.
    pub plot_samples: usize,
    /// Selects a later window of the low-discrepancy sample sequence.
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { tol: 1e-9, horizon: 200, samples: 100, iteration: None, delta_fraction: 0.1, oracle_tol: 1e-12, plot_samples: 20, seed: 0 }
    }
}

pub struct Verification {
    pub report: VerificationReport,
    pub plot: PlotData,
}

/// Everything a theorem pass needs beyond the plant itself.
struct Setting<'a, S> {
    run: &'a PiRun,
    v_star: ValueFn,
    h_star: Policy,
    samples: Vec<S>,
    /// Region `{σ ≤ Δ}` the samples were drawn from.
    big_delta: f64,
    slack: Option<f64>,
    /// Value bounds are exact on this plant (false for grid abstractions).
    exact_values: bool,
}

const FINITE_SAMPLE_CAP: usize = 20_000;

pub fn verify_finite(p: &FiniteProblem, run: &PiRun, bundle: Option<&CertificateBundle>, opts: &VerifyOptions) -> Result<Verification> {
    let v_star = value_iteration_oracle(p, opts.oracle_tol);
    let h_star = optimal_closed_loop(p, &v_star)?;
    let n = p.n_states();
    let stride = n.div_ceil(FINITE_SAMPLE_CAP).max(1);
    let samples: Vec<usize> = (0..n).step_by(stride).collect();
    let big_delta = samples.iter().map(|&x| p.sigma(x)).fold(0.0, f64::max);
    let mut report = VerificationReport::new("finite", p.gamma());
    report.env("states", n);
    report.env("sampled_states", samples.len());
    report.env("oracle", format!("value iteration, sup-norm stop {:e}", opts.oracle_tol));
    let setting = Setting { run, v_star, h_star, samples, big_delta, slack: None, exact_values: true };
    finish(p, setting, bundle, opts, report)
}

pub fn verify_lq(lq: &LqProblem, run: &PiRun, bundle: Option<&CertificateBundle>, opts: &VerifyOptions) -> Result<Verification> {
    let p_star = riccati_oracle(lq, 1e-13, 1_000_000)?;
    let h_star = Policy::Gain(greedy_gain(lq, &p_star)?);
    let n = lq.n_states();
    let skip = opts.seed as usize * opts.samples;
    let samples: Vec<DVector<f64>> =
        halton_in_box(&vec![(-1.0, 1.0); n], skip + opts.samples).into_iter().skip(skip).map(DVector::from_vec).collect();
    let big_delta = samples.iter().map(|x| lq.sigma(x)).fold(0.0, f64::max);
    let mut report = VerificationReport::new("lq", lq.gamma);
    report.env("samples", format!("{} Halton points in [-1, 1]^{n}", samples.len()));
    report.env("oracle", "Riccati fixed-point iteration");
    let setting = Setting { run, v_star: ValueFn::Quadratic(p_star), h_star, samples, big_delta, slack: None, exact_values: true };
    let from = bundle
        .and_then(|b| b.linear.as_ref())
        .and_then(|lg| istar_linear(lg, lq.gamma).ok())
        .map(|s| s.value as usize);
    let schur = check_schur(lq, run, from.unwrap_or(0), from.is_none())?;
    let mut out = finish(lq, setting, bundle, opts, report)?;
    out.report.push(schur);
    Ok(out)
}

/// Checks on the finite abstraction; trajectory checks carry `ε_grid` slack.
pub fn verify_grid(
    g: &GridProblem,
    abs: &GridAbstraction,
    run: &PiRun,
    bundle: Option<&CertificateBundle>,
    opts: &VerifyOptions,
) -> Result<Verification> {
    let plant = GridPlant { grid: g, abstraction: abs };
    let v_star = value_iteration_oracle(&abs.finite, opts.oracle_tol);
    let h_star = optimal_closed_loop(&abs.finite, &v_star)?;
    let big_delta = g.delta_grid();
    let skip = opts.seed as usize * opts.samples;
    let samples: Vec<usize> = g.sample_nodes(skip + opts.samples, big_delta).into_iter().skip(skip).collect();
    let slack = g.slack(abs, opts.horizon);
    let mut report = VerificationReport::new("grid", g.gamma());
    report.env("nodes", g.n_nodes());
    report.env("points_per_axis", g.spec().points_per_axis);
    report.env("actions", g.actions().len());
    report.env("delta_grid", big_delta);
    report.env("epsilon_grid", slack);
    report.env("max_displacement", abs.max_displacement);
    report.env("samples", samples.len());
    let setting = Setting { run, v_star, h_star, samples, big_delta, slack: Some(slack), exact_values: false };
    finish(&plant, setting, bundle, opts, report)
}

fn finish<P: Plant>(
    p: &P,
    s: Setting<'_, P::State>,
    bundle: Option<&CertificateBundle>,
    opts: &VerifyOptions,
    mut report: VerificationReport,
) -> Result<Verification> {
    let g = p.gamma();
    let run = s.run;
    let mut plot = PlotData::default();
    report.env("iterations", run.len());
    report.env("converged_at", run.converged_at);
    report.env("horizon", opts.horizon);
    report.env("seed", opts.seed);
    report.env("region_delta", s.big_delta);
    report.push(check_bellman(run, opts.tol));
    report.push(check_lemma2(run, opts.tol)?);

    let table = match bundle {
        Some(b) => {
            report.certificate_hash = Some(b.hash()?);
            report.checks.extend(b.probes.iter().cloned());
            if b.in_range(g) {
                Some(b.table1(g)?)
            } else {
                report.env("out_of_range", format!("gamma = {g} outside ({}, {})", b.gamma_star, b.gamma0));
                None
            }
        }
        None => None,
    };

    let mut t1 = check_theorem1(p, run, &s.v_star, &s.h_star, &s.samples, table.as_ref(), opts.tol)?;
    if !s.exact_values {
        for e in t1.iter_mut().skip(1) {
            e.informational = true;
        }
    }
    report.checks.extend(t1);
    plot.bound_vs_i = bound_series(p, run, &s.v_star, &s.h_star, &s.samples, table.as_ref())?;

    let Some(t) = table else {
        return Ok(Verification { report, plot });
    };
    let b = bundle.expect("table implies bundle");

    let mut t2 = check_theorem2(p, run, &b.detectability, &t, &s.samples, opts.tol)?;
    if !s.exact_values {
        t2.iter_mut().for_each(|e| e.informational = true);
    }
    report.checks.extend(t2);

    let traj = |informational| TrajectoryOpts { horizon: opts.horizon, tol: opts.tol, slack: s.slack, informational };

    // semiglobal practical bound
    let delta0 = opts.delta_fraction * s.big_delta;
    match istar_general(&t, delta0, s.big_delta) {
        Ok(ig) => {
            record_istar(&mut report, "istar_general", &ig);
            let (i, delta) = match opts.iteration {
                Some(i) => match crate::certificates::delta_for_iteration(&t, s.big_delta, i as u64) {
                    Ok(d) => (i, d),
                    Err(_) => (i, delta0),
                },
                None => (ig.value as usize, delta0),
            };
            let below = istar_general(&t, delta, s.big_delta).map_or(true, |s| (i as u64) < s.value);
            report.env("theorem3_delta", delta);
            report.env("theorem3_iteration", i);
            report.checks.extend(check_theorem3(p, run.policy_at(i), i, &t, delta, &s.samples, &traj(below))?);
        }
        Err(e) => report.env("istar_general", e.to_string()),
    }

    // exponential envelope
    if let Some(lg) = &b.linear {
        match (istar_linear(lg, g), envelope_constants(lg, g)) {
            (Ok(il), Ok(env)) => {
                record_istar(&mut report, "istar_linear", &il);
                report.env("envelope", env);
                let i = opts.iteration.unwrap_or(il.value as usize);
                let below = (i as u64) < il.value;
                report.push(check_corollary1(p, run.policy_at(i), i, &env, &s.samples, &traj(below))?);
                plot.envelope = envelope_series(p, run.policy_at(i), &env, &s.samples[..opts.plot_samples.min(s.samples.len())], opts.horizon)?;
            }
            (Err(e), _) | (_, Err(e)) => report.env("envelope", e.to_string()),
        }
    }

    report.push(check_proposition1(p, &s.h_star, &t, &s.samples, &traj(false))?);
    Ok(Verification { report, plot })
}

fn record_istar(report: &mut VerificationReport, key: &str, s: &Istar) {
    report.env(key, s);
}

/// Per iteration: worst gap `V^i − V*`, worst first-inequality right-hand
/// side and (with a table) the bound at the largest sampled σ.
fn bound_series<P: Plant>(
    p: &P,
    run: &PiRun,
    v_star: &ValueFn,
    h_star: &Policy,
    samples: &[P::State],
    table: Option<&Table1>,
) -> Result<Vec<BoundRow>> {
    let g = p.gamma();
    let v0 = run.value_at(0);
    let s_max = samples.iter().map(|x| p.sigma_of(x)).fold(0.0, f64::max);
    let mut phi = samples.to_vec();
    let mut rows = Vec::with_capacity(run.len());
    for i in 0..run.len() {
        let vi = run.value_at(i);
        let (mut gap, mut first) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, fx) in samples.iter().zip(&phi) {
            gap = gap.max(p.value_at(vi, x)? - p.value_at(v_star, x)?);
            first = first.max(g.powi(i as i32) * (p.value_at(v0, fx)? - p.value_at(v_star, fx)?));
        }
        let bound = table.map(|t| theorem1_bound(t, s_max, i as u32)).transpose()?;
        rows.push(BoundRow { iteration: i, max_gap: gap, max_first_rhs: first, bound_at_max_sigma: bound });
        for fx in phi.iter_mut() {
            *fx = p.closed_step(h_star, fx)?;
        }
    }
    Ok(rows)
}

fn envelope_series<P: Plant>(p: &P, h: &Policy, env: &Envelope, samples: &[P::State], horizon: usize) -> Result<Vec<EnvelopeRow>> {
    let mut rows = Vec::with_capacity(samples.len() * (horizon + 1));
    for (j, x) in samples.iter().enumerate() {
        let sig = trajectory(p, h, x, horizon)?;
        rows.extend(sig.iter().enumerate().map(|(k, s)| EnvelopeRow { sample: j, k, sigma: *s, bound: envelope_bound(env, sig[0], k) }));
    }
    Ok(rows)
}
