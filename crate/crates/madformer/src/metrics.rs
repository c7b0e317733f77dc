//! Latent Fréchet distance and the metrics CSV.

use std::io::Write;
use std::path::Path;

use madformer_core::layout::LatentGrid;
use madformer_core::trainer::StepReport;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{AppError, Result};

/// Eigenvalues down to this (scaled by the largest magnitude) count as zero.
pub const EIG_CLAMP: f64 = 1e-8;
/// Shrinkage toward the diagonal when there are too few samples.
pub const SHRINKAGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FrechetStats {
    /// Mean and unbiased covariance of flattened vectors. With fewer than
    /// `dim + 1` samples the covariance is shrunk toward its diagonal.
    pub fn from_vectors(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(AppError::Config(format!(
                "need at least 2 samples for statistics, got {n}"
            )));
        }
        let dim = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(AppError::DimensionMismatch(dim, r.len()));
        }
        let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
        let mean = DVector::from_fn(dim, |j, _| x.column(j).mean());
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centred.transpose() * &centred / (n as f64 - 1.0);
        if n < dim + 1 {
            let diag = DMatrix::from_diagonal(&cov.diagonal());
            cov = cov * (1.0 - SHRINKAGE) + diag * SHRINKAGE;
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn from_grids(grids: &[LatentGrid]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = grids.iter().map(|g| g.data.clone()).collect();
        Self::from_vectors(&rows)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000).ok_or(AppError::NonConvergedSqrt(f64::NAN))?;
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -EIG_CLAMP * scale {
            return Err(AppError::NonConvergedSqrt(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + tr Σ₁ + tr Σ₂ − 2 tr (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(AppError::DimensionMismatch(a.dim(), b.dim()));
    }
    let s1 = psd_sqrt(&a.cov)?;
    let inner = &s1 * &b.cov * &s1;
    let cross = psd_sqrt(&inner)?.trace();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "lr",
    "total",
    "text_nll",
    "image_mse",
    "hidden_mse",
    "tower_mse",
    "grad_norm",
    "wall_ms",
];

/// Appends step rows to a metrics CSV, writing the header for a new file.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(AppError::io(path))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            inner.write_record(METRICS_HEADER)?;
        }
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &StepReport, wall_ms: u128) -> Result<()> {
        let l = &r.loss;
        self.inner.write_record([
            r.step.to_string(),
            format!("{:e}", r.lr),
            format!("{:e}", l.total),
            format!("{:e}", l.text_nll),
            format!("{:e}", l.image_mse),
            format!("{:e}", l.hidden_mse),
            format!("{:e}", l.tower_mse),
            format!("{:e}", r.grad_norm),
            wall_ms.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| AppError::Csv(e.into()))
    }
}

/// Drops CSV rows whose step exceeds `step` (used when resuming from an
/// earlier checkpoint than the last logged step).
pub fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(AppError::io(path))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(AppError::io(path))?;
    f.write_all(out.as_bytes()).map_err(AppError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: &[f64], cov: &[f64]) -> FrechetStats {
        let d = mean.len();
        FrechetStats {
            mean: DVector::from_row_slice(mean),
            cov: DMatrix::from_row_slice(d, d, cov),
            count: 100,
        }
    }

    #[test]
    fn identical_stats_are_zero() {
        let a = stats(&[1.0, -2.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn mean_shift_with_equal_covariance() {
        let a = stats(&[0.0, 0.0, 0.0], &[1.0, 0.2, 0.0, 0.2, 1.0, 0.1, 0.0, 0.1, 2.0]);
        let mut b = a.clone();
        b.mean = DVector::from_row_slice(&[1.0, 2.0, -0.5]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 5.25).abs() < 1e-9, "{d}");
    }

    #[test]
    fn scalar_formula() {
        let a = stats(&[0.0], &[1.0]);
        let b = stats(&[0.0], &[4.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
    }

    #[test]
    fn commuting_covariances_match_diagonal_formula() {
        // Diagonal Σ: distance is Σ (√a_i − √b_i)².
        let a = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 9.0]);
        let b = stats(&[0.0, 0.0], &[4.0, 0.0, 0.0, 1.0]);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - (1.0 + 4.0)).abs() < 1e-10, "{d}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let a = stats(&[0.3, 0.1], &[2.0, 0.7, 0.7, 1.0]);
        let b = stats(&[-0.2, 0.4], &[0.5, -0.1, -0.1, 3.0]);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        let a = stats(&[0.0], &[1.0]);
        let b = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            frechet_distance(&a, &b),
            Err(AppError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let a = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(frechet_distance(&a, &a), Err(AppError::NonConvergedSqrt(_))));
    }

    #[test]
    fn sample_stats_and_shrinkage() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 10.0]];
        let s = FrechetStats::from_vectors(&rows).unwrap();
        assert_eq!(s.mean.as_slice(), &[3.0, 6.0]);
        assert!((s.cov[(0, 1)] - 8.0).abs() < 1e-12);
        let few = FrechetStats::from_vectors(&rows[..2]).unwrap();
        // two samples in two dimensions: off-diagonal shrunk
        assert!((few.cov[(0, 1)] - 4.0 * (1.0 - SHRINKAGE)).abs() < 1e-12);
        assert!((few.cov[(0, 0)] - 2.0).abs() < 1e-12);
    }
}
