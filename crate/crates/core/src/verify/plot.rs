use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRow {
    pub sample: usize,
    pub k: usize,
    pub sigma: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub iteration: usize,
    pub max_gap: f64,
    pub max_first_rhs: f64,
    pub bound_at_max_sigma: Option<f64>,
}

/// Series for σ-vs-k and bound-vs-i plots.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub envelope: Vec<EnvelopeRow>,
    pub bound_vs_i: Vec<BoundRow>,
}

impl PlotData {
    /// Writes `sigma_vs_k.csv` and `bound_vs_i.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_rows(&dir.join("sigma_vs_k.csv"), &self.envelope)?;
        write_rows(&dir.join("bound_vs_i.csv"), &self.bound_vs_i)
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
