use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use picert::certificates::{istar_linear, CertificateBundle, SweepRow};
use picert::pi::{riccati_oracle, PiRun, Policy, StopReason, ValueFn};
use picert::report::VerificationReport;
use picert::system::{build_nonholonomic_example, GridSpec, LqProblem, ProblemSpec};
use picert::verify::{verify_finite, verify_grid, verify_lq, Verification, VerifyOptions};

use crate::load::{from_spec, load, Loaded};
use crate::{Common, Example, Failure, ReproduceArgs, Sweep, VerifyArgs};

/// Points of the default sweep, spread strictly inside `(γ*, γ₀)`.
const DEFAULT_SWEEP_POINTS: usize = 21;

pub fn solve(c: &Common) -> Result<(), Failure> {
    let problem = load(c)?;
    out_dir(&c.out)?;
    let run = problem.solve(c.max_iters)?;
    write_solution(&problem, &run, &c.out)?;
    let residual = run.bellman_residuals.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} backend, gamma = {}: {} iterates, stop = {:?}, converged_at = {}, residual = {:.3e}",
        problem.backend(),
        run.gamma,
        run.len(),
        run.stop_reason,
        run.converged_at.map_or("none".to_string(), |i| i.to_string()),
        residual
    );
    if run.stop_reason == StopReason::MaxIters {
        eprintln!("warning: iteration cap reached before convergence");
    }
    Ok(())
}

pub fn certify(c: &Common) -> Result<(), Failure> {
    let problem = load(c)?;
    out_dir(&c.out)?;
    let mut bundle = problem.bundle()?;
    bundle.sweep = sweep_rows(&bundle, c.gamma_sweep);
    write_json(&c.out.join("certificates.json"), &bundle)?;
    print_constants(&bundle, problem.gamma());
    let failed: Vec<_> = bundle.probes.iter().filter(|p| p.blocks()).collect();
    if failed.is_empty() {
        return Ok(());
    }
    for f in &failed {
        eprintln!("certificate probe failed: {} (worst margin {:.3e}) at {:?}", f.label, f.worst_margin, f.witness);
    }
    Err(Failure::Check(format!("{} certificate probe(s) failed", failed.len())))
}

pub fn verify(v: &VerifyArgs) -> Result<(), Failure> {
    let c = &v.common;
    let problem = load(c)?;
    out_dir(&c.out)?;
    let run = match &v.pirun {
        Some(path) => {
            let run: PiRun = read_json(path)?;
            if (run.gamma - problem.gamma()).abs() > 1e-15 {
                return Err(Failure::Config(format!(
                    "{} was computed at gamma = {}, the problem has gamma = {}",
                    path.display(),
                    run.gamma,
                    problem.gamma()
                )));
            }
            run
        }
        None => problem.solve(c.max_iters)?,
    };
    let bundle = match &v.certificates {
        Some(path) => Some(read_json::<CertificateBundle>(path)?),
        None => match problem.bundle() {
            Ok(b) => Some(b),
            Err(e) => {
                eprintln!("note: no certificate ({e}); checking certificate-free properties only");
                None
            }
        },
    };
    let opts = VerifyOptions {
        tol: c.tol,
        horizon: c.horizon,
        samples: v.samples,
        iteration: v.iteration,
        seed: c.seed,
        ..VerifyOptions::default()
    };
    let out = run_verify(&problem, &run, bundle.as_ref(), &opts)?;
    emit_report(&out, &c.out)
}

pub fn reproduce(r: &ReproduceArgs) -> Result<(), Failure> {
    out_dir(&r.out)?;
    let spec = match r.example {
        Example::Lq => {
            let lq = LqProblem::example(LqProblem::example_k0(), r.gamma.unwrap_or(0.7))?;
            ProblemSpec::Lq(lq.to_spec())
        }
        Example::Nonholonomic => {
            let gamma = r.gamma.unwrap_or(0.86);
            let mut spec = GridSpec::nonholonomic(gamma);
            if let Some(n) = r.grid_points {
                spec.points_per_axis = n;
            }
            // validates the spec the same way the grid backend does
            build_nonholonomic_example(gamma, Some(spec.clone()))?;
            ProblemSpec::Grid(spec)
        }
    };
    write_json(&r.out.join("problem.json"), &spec)?;
    let problem = from_spec(spec)?;
    let gamma = problem.gamma();
    let mut bundle = problem.bundle()?;
    bundle.sweep = sweep_rows(&bundle, r.gamma_sweep);
    write_json(&r.out.join("certificates.json"), &bundle)?;
    print_constants(&bundle, gamma);
    write_summary(&r.out.join("summary.csv"), &bundle, gamma)?;

    let run = problem.solve(None)?;
    write_solution(&problem, &run, &r.out)?;
    if let Loaded::Lq { lq, .. } = &problem {
        let p_star = riccati_oracle(lq, 1e-13, 1_000_000)?;
        let gap = (run.last().value.matrix()? - &p_star).abs().max();
        println!("Riccati vs PI: max |P^i - P*| = {gap:.3e} ({})", if gap <= 1e-8 { "agree" } else { "DISAGREE" });
        if gap > 1e-8 {
            return Err(Failure::Check(format!("PI and the Riccati oracle differ by {gap:e}")));
        }
    }
    let iteration = bundle.linear.as_ref().and_then(|lg| istar_linear(lg, gamma).ok()).map(|s| s.value as usize);
    let opts = VerifyOptions { tol: r.tol, horizon: r.horizon, seed: r.seed, iteration, ..VerifyOptions::default() };
    let out = run_verify(&problem, &run, Some(&bundle), &opts)?;
    emit_report(&out, &r.out)
}

fn run_verify(
    problem: &Loaded,
    run: &PiRun,
    bundle: Option<&CertificateBundle>,
    opts: &VerifyOptions,
) -> Result<Verification, Failure> {
    Ok(match problem {
        Loaded::Finite { p, .. } => verify_finite(p, run, bundle, opts)?,
        Loaded::Lq { lq, .. } => verify_lq(lq, run, bundle, opts)?,
        Loaded::Grid { g, abs } => verify_grid(g, abs, run, bundle, opts)?,
    })
}

fn emit_report(out: &Verification, dir: &Path) -> Result<(), Failure> {
    let report = &out.report;
    report.write_json(&dir.join("report.json"))?;
    report.write_csv(&dir.join("report.csv"))?;
    out.plot.write(&dir.join("plotdata"))?;
    print_report(report);
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{} check(s) failed", report.failures().count())))
    }
}

fn print_report(report: &VerificationReport) {
    println!("{} checks on the {} backend at gamma = {}", report.checks.len(), report.backend, report.gamma);
    if let Some(why) = report.environment.get("out_of_range") {
        println!("  note: {} - theorem bounds not checked", why.as_str().unwrap_or_default());
    }
    for c in &report.checks {
        let verdict = match (c.passed, c.informational) {
            (true, _) => "ok  ",
            (false, true) => "info",
            (false, false) => "FAIL",
        };
        let slack = c.slack.map_or(String::new(), |s| format!(" (slack {s:.3e}, {} exact violations)", c.exact_violations));
        let at = c.iteration.map_or(String::new(), |i| format!(" i={i}"));
        println!("  {verdict} {:<18} {}{at}: margin {:.3e}{slack}", c.kind.as_str(), c.label, c.worst_margin);
        if c.blocks() {
            if let Some(w) = &c.witness {
                println!("       witness: {}", serde_json::to_string(w).unwrap_or_default());
            }
        }
    }
}

fn sweep_rows(bundle: &CertificateBundle, sweep: Option<Sweep>) -> Vec<SweepRow> {
    let gammas: Vec<f64> = match sweep {
        Some(Sweep { lo, hi, n }) => {
            (0..n).map(|j| if n == 1 { lo } else { lo + (hi - lo) * j as f64 / (n - 1) as f64 }).collect()
        }
        None => {
            let (lo, hi) = (bundle.gamma_star, bundle.gamma0.min(1.0));
            let n = DEFAULT_SWEEP_POINTS;
            (1..=n).map(|j| lo + (hi - lo) * j as f64 / (n + 1) as f64).collect()
        }
    };
    gammas.into_par_iter().map(|g| bundle.sweep_row(g)).collect()
}

fn print_constants(bundle: &CertificateBundle, gamma: f64) {
    println!("gamma0 = {:.12}   gamma* = {:.12}", bundle.gamma0, bundle.gamma_star);
    if let Some(r) = &bundle.remark3 {
        println!(
            "discount thresholds: gamma* = {:.6} <= {:.6} and <= {:.6}: {}",
            r.gamma_star, r.gamma_star_6, r.gamma_star_17, r.holds
        );
    }
    let row = bundle.sweep_row(gamma);
    match row.istar_linear {
        Some(i) => println!("gamma={gamma}, i*={i}"),
        None => println!("gamma={gamma}: {}", row.note.as_deref().unwrap_or("no threshold")),
    }
    println!("{:>10} {:>8} {:>8} {:>14} {:>14}", "gamma", "range", "i*", "c1", "c2");
    for r in &bundle.sweep {
        let i = r.istar_linear.map_or("-".to_string(), |i| i.to_string());
        let (c1, c2) = r.envelope.map_or(("-".to_string(), "-".to_string()), |e| (format!("{:.6e}", e.c1), format!("{:.6e}", e.c2)));
        println!("{:>10.6} {:>8} {:>8} {:>14} {:>14}", r.gamma, if r.in_range { "in" } else { "out" }, i, c1, c2);
    }
}

#[derive(Serialize)]
struct SummaryRow {
    gamma: f64,
    requested: bool,
    in_range: bool,
    istar: Option<u64>,
    c1: Option<f64>,
    c2: Option<f64>,
    note: Option<String>,
}

fn write_summary(path: &Path, bundle: &CertificateBundle, gamma: f64) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(picert::Error::from)?;
    let requested = bundle.sweep_row(gamma);
    let rows = std::iter::once((true, &requested)).chain(bundle.sweep.iter().map(|r| (false, r)));
    for (req, r) in rows {
        w.serialize(SummaryRow {
            gamma: r.gamma,
            requested: req,
            in_range: r.in_range,
            istar: r.istar_linear,
            c1: r.envelope.map(|e| e.c1),
            c2: r.envelope.map(|e| e.c2),
            note: r.note.clone(),
        })
        .map_err(picert::Error::from)?;
    }
    w.flush().map_err(picert::Error::from)?;
    Ok(())
}

fn write_solution(problem: &Loaded, run: &PiRun, dir: &Path) -> Result<(), Failure> {
    write_json(&dir.join("pirun.json"), run)?;
    let last = run.len() - 1;
    let it = run.last();
    let mut values = csv::Writer::from_path(dir.join("values.csv")).map_err(picert::Error::from)?;
    let mut policy = csv::Writer::from_path(dir.join("policy.csv")).map_err(picert::Error::from)?;
    let csv_err = |e: csv::Error| Failure::from(picert::Error::from(e));
    match (problem, &it.value, &it.policy) {
        (Loaded::Finite { p, .. }, ValueFn::Table(v), Policy::Table(h)) => {
            values.write_record(["iteration", "state", "sigma", "value"]).map_err(csv_err)?;
            policy.write_record(["iteration", "state", "action", "successor"]).map_err(csv_err)?;
            for x in 0..p.n_states() {
                values.write_record([last.to_string(), x.to_string(), p.sigma(x).to_string(), v[x].to_string()]).map_err(csv_err)?;
                let y = p.next(x, h[x]);
                policy.write_record([last.to_string(), x.to_string(), h[x].to_string(), y.to_string()]).map_err(csv_err)?;
            }
        }
        (Loaded::Grid { g, abs }, ValueFn::Table(v), Policy::Table(h)) => {
            let axes: Vec<String> = (1..=g.dim()).map(|d| format!("x{d}")).collect();
            let inputs: Vec<String> = (1..=g.actions()[0].len()).map(|d| format!("u{d}")).collect();
            let head = |extra: &[&str]| {
                let mut r = vec!["iteration".to_string(), "node".to_string()];
                r.extend(axes.iter().cloned());
                r.extend(extra.iter().map(|s| s.to_string()));
                r
            };
            values.write_record(head(&["sigma", "value"])).map_err(csv_err)?;
            let mut ph = head(&["action"]);
            ph.extend(inputs.iter().cloned());
            policy.write_record(ph).map_err(csv_err)?;
            for node in 0..g.n_nodes() {
                let mut base = vec![last.to_string(), node.to_string()];
                base.extend(g.coords(node).iter().map(f64::to_string));
                let mut vr = base.clone();
                vr.extend([abs.finite.sigma(node).to_string(), v[node].to_string()]);
                values.write_record(vr).map_err(csv_err)?;
                let mut pr = base;
                pr.push(h[node].to_string());
                pr.extend(g.actions()[h[node]].iter().map(f64::to_string));
                policy.write_record(pr).map_err(csv_err)?;
            }
        }
        (Loaded::Lq { .. }, ValueFn::Quadratic(pm), Policy::Gain(k)) => {
            values.write_record(["iteration", "row", "col", "p"]).map_err(csv_err)?;
            policy.write_record(["iteration", "row", "col", "k"]).map_err(csv_err)?;
            for i in 0..pm.nrows() {
                for j in 0..pm.ncols() {
                    values.write_record([last.to_string(), i.to_string(), j.to_string(), pm[(i, j)].to_string()]).map_err(csv_err)?;
                }
            }
            for i in 0..k.nrows() {
                for j in 0..k.ncols() {
                    policy.write_record([last.to_string(), i.to_string(), j.to_string(), k[(i, j)].to_string()]).map_err(csv_err)?;
                }
            }
        }
        _ => return Err(Failure::Config("iterate representation does not match the backend".into())),
    }
    values.flush().map_err(picert::Error::from)?;
    policy.flush().map_err(picert::Error::from)?;
    Ok(())
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("output directory {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(picert::Error::from)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(picert::Error::from)?;
    f.write_all(b"\n").map_err(picert::Error::from)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}
