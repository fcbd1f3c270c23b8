//! Fréchet distance between Gaussian fits of two sample sets, computed in raw
//! flattened sample space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Added to the diagonal when the fitted covariance is numerically singular.
pub const COV_REGULARIZATION: f64 = 1e-6;
pub const SINGULAR_THRESHOLD: f64 = 1e-10;
/// Eigenvalues of the cross term below this are an error; above it they clamp to zero.
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and `N−1`-normalized covariance, regularized when near-singular.
pub fn fit_stats<S: AsRef<[f64]>>(samples: &[S]) -> Result<GaussianStats> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let d = samples[0].as_ref().len();
    let n = samples.len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        let s = s.as_ref();
        if s.len() != d {
            return Err(Error::ShapeMismatch { expected: d, got: s.len() });
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for s in samples {
        for ((c, v), m) in centered.iter_mut().zip(s.as_ref()).zip(mean.iter()) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if min_eig < SINGULAR_THRESHOLD {
        for i in 0..d {
            cov[(i, i)] += COV_REGULARIZATION;
        }
    }
    Ok(GaussianStats { mean, cov })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigenvalues_checked(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::new(symmetrize(&m));
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < NEGATIVE_EIGEN_TOLERANCE) {
        return Err(Error::NotPsd(bad));
    }
    Ok(eig)
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, with the trace of the cross
/// term taken as `Tr sqrt(Σa^{1/2} Σb Σa^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let ea = eigenvalues_checked(a.cov.clone())?;
    let root_vals = ea.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root_a = &ea.eigenvectors * DMatrix::from_diagonal(&root_vals) * ea.eigenvectors.transpose();
    let cross = &root_a * &b.cov * &root_a;
    let cross_trace: f64 = eigenvalues_checked(cross)?
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross_trace;
    Ok(d.max(0.0))
}

pub fn fid_between<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<f64> {
    frechet_distance(&fit_stats(a)?, &fit_stats(b)?)
}
