//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fail.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use picert::certificates::{
    finite_bundle, grid_bundle, istar_general, istar_linear, lq_bundle, remark3_compare, scaled_sigma_detectability,
    CertificateBundle, LinearGainBundle,
};
use picert::compfn::{invert, ComparisonFn};
use picert::pi::{optimal_closed_loop, run_pi, value_iteration_oracle, Policy, ValueFn, DEFAULT_RESIDUAL_TOL};
use picert::report::CheckKind;
use picert::system::{build_nonholonomic_example, nonholonomic_h0, FiniteProblem, GridSpec, LqProblem};
use picert::verify::{check_lemma2, check_theorem1, replay_envelope, verify_grid, verify_lq, GridPlant, VerifyOptions};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

type Criterion = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("1 nonholonomic constants", c1_constants),
        ("2 oracle equivalence", c2_oracle),
        ("3 monotone values", c3_monotone),
        ("4 first value-gap inequality", c4_first_ineq),
        ("5 LQ end-to-end", c5_lq),
        ("6 discount threshold ordering", c6_remark3),
        ("7 threshold cross-validation", c7_cross),
        ("8 nonholonomic grid envelope", c8_grid),
        ("9 KL machinery", c9_kl),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let o = f();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!("{verdict} [{name}] {} ({:.2}s)", o.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!o.passed);
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn nonholonomic_bundle(gamma: f64) -> CertificateBundle {
    let mut spec = GridSpec::nonholonomic(gamma);
    spec.points_per_axis = 11;
    grid_bundle(&build_nonholonomic_example(gamma, Some(spec)).unwrap()).unwrap()
}

fn c1_constants() -> Outcome {
    let b = nonholonomic_bundle(0.86);
    let lg = b.linear.unwrap();
    let g0 = (b.gamma0 - 225.0 / 256.0).abs();
    let gs = (b.gamma_star - 17.0 / 22.0).abs();
    let i = istar_linear(&lg, 0.86).unwrap();
    outcome(
        g0 <= 1e-12 && gs <= 1e-12 && i.value == 20,
        format!("|γ₀−225/256|={g0:.1e} |γ*−17/22|={gs:.1e} i*(0.86)={} (raw {:.4})", i.value, i.raw),
    )
}

/// The 20 seeded problems of criteria 2–4: runs with their oracle values.
fn random_runs() -> Vec<(FiniteProblem, picert::pi::PiRun, ValueFn)> {
    (0..20)
        .map(|seed| {
            let p = FiniteProblem::random(50, 5, 0.9, seed).unwrap();
            let run = run_pi(&p, Policy::Table(vec![0; 50]), None, DEFAULT_RESIDUAL_TOL).unwrap();
            let v = value_iteration_oracle(&p, 1e-12);
            (p, run, v)
        })
        .collect()
}

fn c2_oracle() -> Outcome {
    let start = Instant::now();
    let runs = random_runs();
    let mut worst_gap: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for (_, run, v) in &runs {
        let a = run.last().value.table().unwrap();
        let b = v.table().unwrap();
        worst_gap = worst_gap.max(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        worst_res = worst_res.max(*run.bellman_residuals.last().unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_gap <= 1e-8 && worst_res <= 1e-10 && secs < 10.0,
        format!("sup|V^∞−V*|={worst_gap:.2e} max residual={worst_res:.2e} in {secs:.2}s"),
    )
}

fn c3_monotone() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut ok = true;
    for (_, run, _) in random_runs() {
        let e = check_lemma2(&run, 1e-9).unwrap();
        worst = worst.min(e.worst_margin);
        ok &= e.passed;
    }
    outcome(ok && worst >= -1e-9, format!("min margin V^i − V^(i+1) = {worst:.2e}"))
}

fn c4_first_ineq() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut ok = true;
    for (p, run, v) in random_runs() {
        let h = optimal_closed_loop(&p, &v).unwrap();
        let states: Vec<usize> = (0..p.n_states()).collect();
        let e = check_theorem1(&p, &run, &v, &h, &states, None, 1e-9).unwrap().remove(0);
        worst = worst.min(e.worst_margin);
        ok &= e.passed;
    }
    outcome(ok, format!("worst margin {worst:.2e} over all states and iterations"))
}

fn c5_lq() -> Outcome {
    let scalar = LqProblem::scalar(2.0, 1.0, 1.0, 1.0, 0.2, 0.0).unwrap();
    let run = run_pi(&scalar, Policy::Gain(nalgebra::DMatrix::zeros(1, 1)), None, DEFAULT_RESIDUAL_TOL).unwrap();
    let p_err = (run.last().value.matrix().unwrap()[(0, 0)] - 5f64.sqrt()).abs();

    let gamma = 0.7;
    let lq = LqProblem::example(LqProblem::example_k0(), gamma).unwrap();
    let b = lq_bundle(&lq, None, None).unwrap();
    let run2 = run_pi(&lq, Policy::Gain(LqProblem::example_k0()), None, DEFAULT_RESIDUAL_TOL).unwrap();
    let istar = istar_linear(b.linear.as_ref().unwrap(), gamma).unwrap().value;
    let v = verify_lq(&lq, &run2, Some(&b), &VerifyOptions::default()).unwrap().report;
    let find = |k: CheckKind| v.checks.iter().find(|c| c.kind == k).unwrap();
    let schur = find(CheckKind::Schur);
    let env = find(CheckKind::Cor1Envelope);
    let ok = p_err <= 1e-8
        && b.in_range(gamma)
        && schur.passed
        && !schur.informational
        && env.passed
        && !env.informational
        && env.tolerance == 1e-9
        && env.count == 100 * 201;
    outcome(
        ok,
        format!(
            "scalar |P−√5|={p_err:.1e}; 2-D γ={gamma} ∈ ({:.4}, {:.4}), i*={istar}, Schur margin {:.3e}, envelope margin {:.3e} over {} points",
            b.gamma_star, b.gamma0, schur.worst_margin, env.worst_margin, env.count
        ),
    )
}

fn c6_remark3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for _ in 0..1000 {
        let lg = LinearGainBundle::new(
            rng.random_range(0.01..10.0),
            rng.random_range(0.0..10.0),
            rng.random_range(0.01..10.0),
            rng.random_range(0.01..10.0),
            rng.random_range(0.0..5.0),
        )
        .unwrap();
        bad += usize::from(!remark3_compare(&lg).holds);
    }
    outcome(bad == 0, format!("{bad} violations over 1000 bundles"))
}

fn c7_cross() -> Outcome {
    let lq = LqProblem::example(LqProblem::example_k0(), 0.7).unwrap();
    let bundles = [nonholonomic_bundle(0.86), lq_bundle(&lq, None, None).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    let mut shown = Vec::new();
    let mut errors = 0;
    for j in 0..50 {
        let b = &bundles[j % 2];
        let lg = b.linear.as_ref().unwrap();
        let lo = b.gamma_star + 0.05 * (b.gamma0 - b.gamma_star);
        let hi = b.gamma_star + 0.95 * (b.gamma0 - b.gamma_star);
        let g = rng.random_range(lo..hi);
        let big = rng.random_range(0.5..4.0);
        let delta = big * rng.random_range(0.1..1.0);
        let t = b.table1(g).unwrap();
        match (istar_general(&t, delta, big), istar_linear(lg, g)) {
            (Ok(a), Ok(c)) => {
                if a.value.abs_diff(c.value) <= 1 {
                    agree += 1;
                } else if shown.len() < 4 {
                    shown.push(format!("γ={g:.4} δ={delta:.3} Δ={big:.3}: general {} vs linear {}", a.value, c.value));
                }
            }
            _ => errors += 1,
        }
    }
    outcome(agree == 50, format!("{agree}/50 within ±1, {errors} domain errors; e.g. {}", shown.join("; ")))
}

fn c8_grid() -> Outcome {
    let start = Instant::now();
    let g = build_nonholonomic_example(0.86, None).unwrap();
    let abs = g.abstraction().unwrap();
    let b = grid_bundle(&g).unwrap();
    let h0 = g.policy_from_feedback(nonholonomic_h0);
    let run = run_pi(&abs.finite, Policy::Table(h0), None, DEFAULT_RESIDUAL_TOL).unwrap();
    let opts = VerifyOptions { iteration: Some(20), ..VerifyOptions::default() };
    let v = verify_grid(&g, &abs, &run, Some(&b), &opts).unwrap().report;
    let env = v.checks.iter().find(|c| c.kind == CheckKind::Cor1Envelope).unwrap();
    let plant = GridPlant { grid: &g, abstraction: &abs };
    let e = picert::certificates::envelope_constants(b.linear.as_ref().unwrap(), 0.86).unwrap();
    let replays = env.excess_witnesses.iter().all(|w| {
        replay_envelope(&plant, run.policy_at(20), &w.node.unwrap(), w.time.unwrap(), &e).unwrap() == (w.lhs, w.rhs)
    });
    let secs = start.elapsed().as_secs_f64();
    let samples = env.count / (opts.horizon + 1);
    let ok = env.slack.is_some() && samples == 100 && replays && env.violations == 0 && secs < 120.0;
    outcome(
        ok,
        format!(
            "{samples} samples, exact worst margin {:.3e} ({} exact violations), ε_grid={:.3e}, {} beyond slack, witnesses replay: {replays}, {secs:.1}s",
            env.worst_margin,
            env.exact_violations,
            env.slack.unwrap_or(f64::NAN),
            env.violations
        ),
    )
}

fn c9_kl() -> Outcome {
    let base = FiniteProblem::random_certified(30, 3, 0.9, 0.5, 3).unwrap();
    let lq = LqProblem::example(LqProblem::example_k0(), 0.7).unwrap();
    let bundles = [
        finite_bundle(&base, &[0; 30], Some(scaled_sigma_detectability(0.5))).unwrap(),
        lq_bundle(&lq, None, None).unwrap(),
        nonholonomic_bundle(0.86),
    ];
    let mut lattice_ok = true;
    for b in &bundles {
        for frac in [0.25, 0.5, 0.75] {
            let g = b.gamma_star + frac * (b.gamma0 - b.gamma_star);
            let t = b.table1(g).unwrap();
            lattice_ok &= picert::certificates::kl_lattice_entry(&t, b.probe_upper).unwrap().passed;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let f = random_k_infinity(&mut rng);
        for _ in 0..50 {
            let y = 10f64.powf(rng.random_range(-6.0..4.0));
            let s = invert(&f, y).unwrap();
            worst = worst.max((f.eval(s).unwrap() - y).abs() / y.max(1.0));
        }
    }
    outcome(lattice_ok && worst <= 1e-10, format!("lattice ok: {lattice_ok}; worst round-trip error {worst:.2e}"))
}

fn random_k_infinity(rng: &mut ChaCha8Rng) -> ComparisonFn {
    let lin = ComparisonFn::linear(rng.random_range(0.1..10.0));
    let pow = ComparisonFn::power(rng.random_range(0.1..5.0), rng.random_range(0.3..3.0));
    match rng.random_range(0..4) {
        0 => lin.plus(&pow),
        1 => pow,
        2 => picert::compfn::compose(&pow, &lin.plus(&ComparisonFn::power(1.0, 2.0))),
        _ => ComparisonFn::sampled("s + atan s", |s: f64| s + s.atan()),
    }
}
