use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use super::features::FeatureMatrix;
use crate::error::{Error, Result};

/// Gaussian summary of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased (`1/(n-1)`) covariance.
pub fn fit_stats(features: &FeatureMatrix) -> Result<FeatureStats> {
    let (n, d) = (features.n, features.d);
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mut mu = DVector::zeros(d);
    for row in features.rows() {
        for (m, x) in mu.iter_mut().zip(row) {
            *m += x;
        }
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in features.rows() {
        for (c, (x, m)) in centered.iter_mut().zip(row.iter().zip(mu.iter())) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                sigma[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = sigma[(i, j)] / (n - 1) as f64;
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    Ok(FeatureStats { mu, sigma, n })
}

/// Eigenvalues of a symmetric matrix after checking they are not negative
/// beyond `1e-8 * trace`.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let trace: f64 = eig.eigenvalues.iter().map(|l| l.abs()).sum();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-8 * trace.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd(min));
    }
    Ok(eig)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the cross term equals the trace of the symmetric square root
/// of `sqrt(S_a) S_b sqrt(S_a)`, which is computed by eigendecomposition.
/// Small negative eigenvalues from rounding are clamped to zero, and so is
/// the final result.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let diff = &a.mu - &b.mu;
    let sqrt_a = psd_sqrt(&a.sigma)?;
    psd_eigen(&b.sigma)?;
    let inner = &sqrt_a * &b.sigma * &sqrt_a;
    let cross: f64 = psd_eigen(&inner)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = diff.norm_squared() + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// One dataset group of an FID comparison table.
#[derive(Debug, Clone)]
pub struct FidGroup {
    pub name: String,
    /// Real groups become rows; every group is a column.
    pub real: bool,
    pub stats: FeatureStats,
}

/// Pairwise FID laid out with real groups as rows and all groups as
/// columns. The self-comparison cells are empty. The average row averages
/// each column over its non-empty cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidTable {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub average: Vec<Option<f64>>,
}

pub fn fid_table(groups: &[FidGroup]) -> Result<FidTable> {
    let columns: Vec<String> = groups.iter().map(|g| g.name.clone()).collect();
    let real: Vec<&FidGroup> = groups.iter().filter(|g| g.real).collect();
    let mut values = Vec::with_capacity(real.len());
    for r in &real {
        let mut row = Vec::with_capacity(groups.len());
        for c in groups {
            row.push(if c.name == r.name {
                None
            } else {
                Some(frechet_distance(&r.stats, &c.stats)?)
            });
        }
        values.push(row);
    }
    let average = (0..groups.len())
        .map(|j| {
            let cells: Vec<f64> = values.iter().filter_map(|row| row[j]).collect();
            (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
        })
        .collect();
    Ok(FidTable {
        rows: real.iter().map(|g| g.name.clone()).collect(),
        columns,
        values,
        average,
    })
}

impl FidTable {
    /// CSV text: a header of column names, one line per real group, then
    /// the average line. Empty cells are written as `-`.
    pub fn to_csv(&self) -> String {
        let cell = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("reference");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.rows.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                out.push(',');
                out.push_str(&cell(v));
            }
            out.push('\n');
        }
        out.push_str("average");
        for v in &self.average {
            out.push(',');
            out.push_str(&cell(v));
        }
        out.push('\n');
        out
    }
}
