//! Aligned RMSD and coverage / matching scores for conformer ensembles.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zmatrix::{centroid, Conformer};

/// RMSD after optimal proper-rotation superposition (Kabsch).
pub fn kabsch_rmsd(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<f64> {
    kabsch_rmsd_masked(x, y, None)
}

/// As [`kabsch_rmsd`], restricted to atoms whose mask entry is true.
pub fn kabsch_rmsd_masked(x: &[Vector3<f64>], y: &[Vector3<f64>], mask: Option<&[bool]>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::structural(format!("conformers have {} and {} atoms", x.len(), y.len())));
    }
    let pick = |v: &[Vector3<f64>]| -> Vec<Vector3<f64>> {
        match mask {
            Some(m) => v.iter().zip(m).filter(|(_, k)| **k).map(|(p, _)| *p).collect(),
            None => v.to_vec(),
        }
    };
    let (a, b) = (pick(x), pick(y));
    if a.is_empty() {
        return Err(Error::validation("RMSD needs at least one atom"));
    }
    let (ca, cb) = (centroid(&a), centroid(&b));
    let a: Vec<_> = a.iter().map(|p| p - ca).collect();
    let b: Vec<_> = b.iter().map(|p| p - cb).collect();
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(&b) {
        h += p * q.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("svd u"), svd.v_t.expect("svd v"));
    let d = (vt.transpose() * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let r = vt.transpose() * fix * u.transpose();
    let s: f64 = a.iter().zip(&b).map(|(p, q)| (r * p - q).norm_squared()).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// `|C| × |C*|` matrix of aligned RMSDs.
pub fn rmsd_matrix(generated: &[Conformer], reference: &[Conformer], mask: Option<&[bool]>) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(generated.len(), reference.len());
    for (i, g) in generated.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            m[(i, j)] = kabsch_rmsd_masked(g, r, mask)?;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percentage of references within `delta` of some generated conformer.
    pub cov_r: f64,
    /// Mean over references of the closest generated RMSD.
    pub mat_r: f64,
    pub cov_p: f64,
    pub mat_p: f64,
    pub delta: f64,
    pub n_generated: usize,
    pub n_reference: usize,
}

/// Coverage and matching from a precomputed RMSD matrix (rows generated,
/// columns reference).
pub fn cov_mat_from_matrix(d: &DMatrix<f64>, delta: f64) -> Result<MetricsReport> {
    let (ng, nr) = d.shape();
    if ng == 0 || nr == 0 {
        return Err(Error::validation("coverage needs non-empty generated and reference sets"));
    }
    if !(delta >= 0.0) {
        return Err(Error::validation(format!("delta must be non-negative, got {delta}")));
    }
    let col_min: Vec<f64> = (0..nr).map(|j| d.column(j).min()).collect();
    let row_min: Vec<f64> = (0..ng).map(|i| d.row(i).min()).collect();
    let cov = |mins: &[f64]| 100.0 * mins.iter().filter(|m| **m <= delta).count() as f64 / mins.len() as f64;
    let mean = |mins: &[f64]| mins.iter().sum::<f64>() / mins.len() as f64;
    Ok(MetricsReport {
        cov_r: cov(&col_min),
        mat_r: mean(&col_min),
        cov_p: cov(&row_min),
        mat_p: mean(&row_min),
        delta,
        n_generated: ng,
        n_reference: nr,
    })
}

pub fn cov_mat(generated: &[Conformer], reference: &[Conformer], delta: f64) -> Result<MetricsReport> {
    cov_mat_masked(generated, reference, delta, None)
}

pub fn cov_mat_masked(generated: &[Conformer], reference: &[Conformer], delta: f64, mask: Option<&[bool]>) -> Result<MetricsReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::validation("coverage needs non-empty generated and reference sets"));
    }
    cov_mat_from_matrix(&rmsd_matrix(generated, reference, mask)?, delta)
}

/// Mean and median of each score across molecules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mean: ScoreRow,
    pub median: ScoreRow,
    pub n_molecules: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub cov_r: f64,
    pub mat_r: f64,
    pub cov_p: f64,
    pub mat_p: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(reports: &[MetricsReport]) -> Result<MetricsSummary> {
    if reports.is_empty() {
        return Err(Error::validation("no per-molecule reports to summarize"));
    }
    let col = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<f64>>();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let fields: [fn(&MetricsReport) -> f64; 4] = [|r| r.cov_r, |r| r.mat_r, |r| r.cov_p, |r| r.mat_p];
    let means: Vec<f64> = fields.iter().map(|f| mean(col(*f))).collect();
    let medians: Vec<f64> = fields.iter().map(|f| median(col(*f))).collect();
    let row = |v: &[f64]| ScoreRow {
        cov_r: v[0],
        mat_r: v[1],
        cov_p: v[2],
        mat_p: v[3],
    };
    Ok(MetricsSummary {
        mean: row(&means),
        median: row(&medians),
        n_molecules: reports.len(),
    })
}

/// Signed CDF difference `F_a − F_b` on the pieces between consecutive
/// sample points, with the piece widths.
fn cdf_gaps(a: &[f64], b: &[f64]) -> Vec<(f64, f64)> {
    let mut events: Vec<(f64, f64)> = a
        .iter()
        .map(|x| (*x, 1.0 / a.len() as f64))
        .chain(b.iter().map(|x| (*x, -1.0 / b.len() as f64)))
        .collect();
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut d = 0.0;
    let mut out = Vec::with_capacity(events.len());
    for w in events.windows(2) {
        d += w[0].1;
        out.push((d, w[1].0 - w[0].0));
    }
    out
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("Wasserstein distance needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::validation("Wasserstein distance of non-finite samples"));
    }
    Ok(())
}

/// Wasserstein-1 distance between two empirical distributions on the line.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, b)?;
    Ok(cdf_gaps(a, b).iter().map(|(d, w)| d.abs() * w).sum())
}

/// Wasserstein-1 distance between empirical distributions of angles on the
/// circle (arc-length ground metric). Uses `min_α ∫|F_a − F_b − α|`, with
/// the optimal shift at a weighted median of the CDF difference.
pub fn circular_wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    check_samples(a, b)?;
    let wrap = |v: &[f64]| v.iter().map(|x| x.rem_euclid(2.0 * std::f64::consts::PI)).collect::<Vec<_>>();
    let (a, b) = (wrap(a), wrap(b));
    let mut gaps = cdf_gaps(&a, &b);
    // the last piece wraps around to the first point
    let first = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
    let last = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max);
    gaps.push((0.0, 2.0 * std::f64::consts::PI - (last - first)));
    let mut sorted = gaps.clone();
    sorted.sort_by(|p, q| p.0.total_cmp(&q.0));
    let total: f64 = sorted.iter().map(|g| g.1).sum();
    let mut acc = 0.0;
    let mut alpha = sorted[0].0;
    for (d, w) in &sorted {
        acc += w;
        if acc >= 0.5 * total {
            alpha = *d;
            break;
        }
    }
    Ok(gaps.iter().map(|(d, w)| (d - alpha).abs() * w).sum())
}
