//! Margin reports shared by certificate probes and the verification harness.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Lemma2Monotone,
    Thm1FirstIneq,
    Thm1FullBound,
    Thm2Lyapunov,
    Thm3Practical,
    Cor1Envelope,
    Prop1Kl,
    BellmanResidual,
    Sa3Detectability,
    Lmi,
    Lemma1Envelope,
    Sa5Bound,
    KlLattice,
    Schur,
}

impl CheckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::Lemma2Monotone => "lemma2-monotone",
            CheckKind::Thm1FirstIneq => "thm1-first-ineq",
            CheckKind::Thm1FullBound => "thm1-full-bound",
            CheckKind::Thm2Lyapunov => "thm2-lyapunov",
            CheckKind::Thm3Practical => "thm3-practical",
            CheckKind::Cor1Envelope => "cor1-envelope",
            CheckKind::Prop1Kl => "prop1-kl",
            CheckKind::BellmanResidual => "bellman-residual",
            CheckKind::Sa3Detectability => "sa3-detectability",
            CheckKind::Lmi => "lmi",
            CheckKind::Lemma1Envelope => "lemma1-envelope",
            CheckKind::Sa5Bound => "sa5-bound",
            CheckKind::KlLattice => "kl-lattice",
            CheckKind::Schur => "schur",
        }
    }
}

/// Where the worst margin of a check was attained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// State identifier: an index on finite backends, coordinates otherwise.
    pub state: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
}

impl Witness {
    pub fn at(state: impl Into<String>) -> Self {
        Self { state: state.into(), ..Default::default() }
    }

    pub fn node(mut self, node: usize) -> Self {
        self.node = Some(node);
        self
    }

    pub fn iteration(mut self, i: usize) -> Self {
        self.iteration = Some(i);
        self
    }

    pub fn time(mut self, k: usize) -> Self {
        self.time = Some(k);
        self
    }

    fn describe(&self) -> String {
        let mut s = format!("state={}", self.state);
        if let Some(n) = self.node {
            s += &format!(" node={n}");
        }
        if let Some(i) = self.iteration {
            s += &format!(" i={i}");
        }
        if let Some(k) = self.time {
            s += &format!(" k={k}");
        }
        s + &format!(" lhs={:e} rhs={:e}", self.lhs, self.rhs)
    }
}

/// One inequality checked over many samples. Margins are `rhs − lhs`, so
/// negative values are violations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub kind: CheckKind,
    pub label: String,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub passed: bool,
    /// Outside the result's hypotheses; never fails a report.
    pub informational: bool,
    pub tolerance: f64,
    /// Worst exact margin, before any discretisation slack.
    pub worst_margin: f64,
    /// Discretisation slack `ε_grid` allowed on top of `tolerance`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slack: Option<f64>,
    pub count: usize,
    /// Samples with margin below `−tolerance`.
    pub exact_violations: usize,
    /// Samples with margin below `−(tolerance + slack)`.
    pub violations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    /// Every sample beyond the slack, for replay.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excess_witnesses: Vec<Witness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Accumulates margins into a [`CheckEntry`].
#[derive(Clone, Debug)]
pub struct MarginTracker {
    entry: CheckEntry,
    keep_excess: usize,
}

impl MarginTracker {
    pub fn new(kind: CheckKind, label: impl Into<String>, gamma: f64, tolerance: f64) -> Self {
        Self {
            entry: CheckEntry {
                kind,
                label: label.into(),
                gamma,
                iteration: None,
                passed: true,
                informational: false,
                tolerance,
                worst_margin: f64::INFINITY,
                slack: None,
                count: 0,
                exact_violations: 0,
                violations: 0,
                witness: None,
                excess_witnesses: Vec::new(),
                note: None,
            },
            keep_excess: 1000,
        }
    }

    pub fn iteration(mut self, i: usize) -> Self {
        self.entry.iteration = Some(i);
        self
    }

    pub fn slack(mut self, slack: f64) -> Self {
        self.entry.slack = Some(slack);
        self
    }

    pub fn informational(mut self, yes: bool) -> Self {
        self.entry.informational = yes;
        self
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.entry.note = Some(note.into());
        self
    }

    /// Records `lhs ≤ rhs`; `witness` is built only when needed.
    pub fn observe(&mut self, lhs: f64, rhs: f64, witness: impl FnOnce() -> Witness) {
        let margin = if lhs.is_nan() || rhs.is_nan() { f64::NEG_INFINITY } else { rhs - lhs };
        let e = &mut self.entry;
        e.count += 1;
        let beyond_tol = margin < -e.tolerance;
        let beyond_slack = margin < -(e.tolerance + e.slack.unwrap_or(0.0));
        if beyond_tol {
            e.exact_violations += 1;
        }
        let worse = margin < e.worst_margin;
        if !(worse || beyond_slack) {
            return;
        }
        let mut w = witness();
        w.lhs = lhs;
        w.rhs = rhs;
        if beyond_slack {
            e.violations += 1;
            if e.excess_witnesses.len() < self.keep_excess {
                e.excess_witnesses.push(w.clone());
            }
        }
        if worse {
            e.worst_margin = margin;
            e.witness = Some(w);
        }
    }

    pub fn merge(&mut self, other: MarginTracker) {
        let o = other.entry;
        let e = &mut self.entry;
        e.count += o.count;
        e.exact_violations += o.exact_violations;
        e.violations += o.violations;
        let room = self.keep_excess.saturating_sub(e.excess_witnesses.len());
        e.excess_witnesses.extend(o.excess_witnesses.into_iter().take(room));
        if o.worst_margin < e.worst_margin {
            e.worst_margin = o.worst_margin;
            e.witness = o.witness;
        }
    }

    /// A fresh tracker with the same settings and no observations.
    pub fn fork(&self) -> Self {
        let mut t = self.clone();
        let e = &mut t.entry;
        e.count = 0;
        e.exact_violations = 0;
        e.violations = 0;
        e.worst_margin = f64::INFINITY;
        e.witness = None;
        e.excess_witnesses.clear();
        t
    }

    pub fn finish(mut self) -> CheckEntry {
        let e = &mut self.entry;
        e.passed = e.violations == 0;
        if e.count == 0 {
            e.worst_margin = 0.0;
        }
        self.entry
    }
}

impl CheckEntry {
    /// A check with a single pass/fail verdict and no samples.
    pub fn verdict(kind: CheckKind, label: impl Into<String>, gamma: f64, margin: f64, tolerance: f64) -> Self {
        let mut t = MarginTracker::new(kind, label, gamma, tolerance);
        t.observe(0.0, margin, Witness::default);
        t.finish()
    }

    pub fn blocks(&self) -> bool {
        !self.passed && !self.informational
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub backend: String,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate_hash: Option<String>,
    /// Free-form environment facts (grid spec, probe densities, seeds).
    #[serde(default)]
    pub environment: serde_json::Map<String, serde_json::Value>,
    pub checks: Vec<CheckEntry>,
}

impl VerificationReport {
    pub fn new(backend: impl Into<String>, gamma: f64) -> Self {
        Self { backend: backend.into(), gamma, ..Default::default() }
    }

    pub fn env(&mut self, key: &str, value: impl Serialize) {
        self.environment.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    pub fn push(&mut self, entry: CheckEntry) {
        self.checks.push(entry);
    }

    pub fn all_passed(&self) -> bool {
        !self.checks.iter().any(CheckEntry::blocks)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.checks.iter().filter(|c| c.blocks())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// One row per check: kind, label, γ, i, verdict, margin, slack, witness.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "kind",
            "label",
            "gamma",
            "iteration",
            "passed",
            "informational",
            "worst_margin",
            "tolerance",
            "slack",
            "count",
            "exact_violations",
            "violations",
            "witness",
        ])?;
        for c in &self.checks {
            w.write_record([
                c.kind.as_str().to_string(),
                c.label.clone(),
                c.gamma.to_string(),
                c.iteration.map_or(String::new(), |i| i.to_string()),
                c.passed.to_string(),
                c.informational.to_string(),
                format!("{:e}", c.worst_margin),
                format!("{:e}", c.tolerance),
                c.slack.map_or(String::new(), |s| format!("{s:e}")),
                c.count.to_string(),
                c.exact_violations.to_string(),
                c.violations.to_string(),
                c.witness.as_ref().map_or(String::new(), Witness::describe),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn json_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
