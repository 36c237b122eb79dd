//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn lambda_min(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn lambda_max(m: &Mat) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

pub fn spectral_radius(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

/// Numerical rank of a complex matrix via its singular values.
fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    let sv = m.clone().singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    let tol = 1e-9 * top.max(1.0);
    sv.iter().filter(|&&s| s > tol).count()
}

fn to_complex(m: &Mat) -> DMatrix<Complex<f64>> {
    m.map(|x| Complex::new(x, 0.0))
}

/// PBH test: `rank [A - λI, B] = n` for every eigenvalue of `A` with `|λ| >= 1`.
pub fn is_stabilizable(a: &Mat, b: &Mat) -> bool {
    let n = a.nrows();
    let ac = to_complex(a);
    let bc = to_complex(b);
    a.complex_eigenvalues().iter().filter(|z| z.norm() >= 1.0 - 1e-12).all(|&lam| {
        let mut block = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        let shifted = &ac - DMatrix::<Complex<f64>>::identity(n, n) * lam;
        block.view_mut((0, 0), (n, n)).copy_from(&shifted);
        block.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        complex_rank(&block) == n
    })
}

/// Dual PBH test with the observation weight `Q = CᵀC` in place of `C`.
pub fn is_detectable(a: &Mat, q: &Mat) -> bool {
    is_stabilizable(&a.transpose(), q)
}

pub fn check_square(name: &str, m: &Mat, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Shape(format!("{name} must be {n}x{n}, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Serde adapter: matrices as row-major nested arrays.
pub mod rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Mat;

    pub fn serialize<S: Serializer>(m: &Mat, ser: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        super::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub mod opt_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Mat;

    pub fn serialize<S: Serializer>(m: &Option<Mat>, ser: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(super::to_rows).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<Mat>, D::Error> {
        let rows = Option::<Vec<Vec<f64>>>::deserialize(de)?;
        rows.map(|r| super::from_rows(&r).map_err(serde::de::Error::custom)).transpose()
    }
}
