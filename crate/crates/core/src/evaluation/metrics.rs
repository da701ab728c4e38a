//! Sample-set metrics: Fréchet distance between Gaussian fits and Euclidean
//! pairwise diversity.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Added to both covariances when either is singular.
pub const REGULARIZATION: f64 = 1e-8;
/// Eigenvalues of the product above `-EIGEN_DUST` are treated as zero.
pub const EIGEN_DUST: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frechet {
    pub value: f64,
    /// True when a covariance was singular and `REGULARIZATION·I` was added.
    pub regularized: bool,
}

/// Sample mean and unbiased covariance.
pub fn sample_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = samples.len();
    let d = samples.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return Err(Error::Shape(format!("moments need at least 2 non-empty samples, got {n}")));
    }
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("samples have mixed dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_iterator(d, s.iter().zip(&mean).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    Ok((mean, cov / (n - 1) as f64))
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = symmetric(m).symmetric_eigen();
    let root = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    symmetric(m).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(Σa^{½} Σb Σa^{½})^{½})`.
pub fn frechet_from_moments(mean_a: &[f64], cov_a: &DMatrix<f64>, mean_b: &[f64], cov_b: &DMatrix<f64>) -> Result<Frechet> {
    let d = mean_a.len();
    if mean_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Shape("moment dimensions disagree".into()));
    }
    if mean_a.iter().chain(mean_b).chain(cov_a.iter()).chain(cov_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite moments".into()));
    }
    let (mut ca, mut cb) = (symmetric(cov_a), symmetric(cov_b));
    let regularized = min_eigen(&ca) <= 0.0 || min_eigen(&cb) <= 0.0;
    if regularized {
        ca += DMatrix::identity(d, d) * REGULARIZATION;
        cb += DMatrix::identity(d, d) * REGULARIZATION;
    }
    let ra = psd_sqrt(&ca);
    let inner = symmetric(&(&ra * &cb * &ra));
    let mut tr_sqrt = 0.0;
    for l in inner.symmetric_eigenvalues().iter() {
        if *l < -EIGEN_DUST * (1.0 + inner.norm()) {
            return Err(Error::Numeric(format!("covariance product has eigenvalue {l}")));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let dm: f64 = mean_a.iter().zip(mean_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = dm + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(Frechet { value: value.max(0.0), regularized })
}

/// Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Frechet> {
    let d = a.first().map_or(0, Vec::len);
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::Shape(format!("Fréchet distance needs at least dim + 1 = {} points per set", d + 1)));
    }
    let (ma, ca) = sample_moments(a)?;
    let (mb, cb) = sample_moments(b)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diversity {
    pub mean_pairwise: f64,
    /// Mean over groups of the within-group mean pairwise distance.
    pub intra: Option<f64>,
    /// Groups with a single member, left out of `intra`.
    pub skipped_groups: Vec<usize>,
}

fn mean_pairwise(points: &[&[f64]]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += points[i].iter().zip(points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Mean Euclidean distance over unordered pairs, overall and within groups.
pub fn diversity(samples: &[Vec<f64>], groups: Option<&[usize]>) -> Result<Diversity> {
    if samples.len() < 2 {
        return Err(Error::Shape(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    let all: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
    let mut out = Diversity { mean_pairwise: mean_pairwise(&all), intra: None, skipped_groups: Vec::new() };
    if let Some(g) = groups {
        if g.len() != samples.len() {
            return Err(Error::Shape("one group id per sample is required".into()));
        }
        let mut by: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (s, &id) in all.iter().zip(g) {
            by.entry(id).or_default().push(s);
        }
        let mut sum = 0.0;
        let mut count = 0;
        for (id, members) in by {
            if members.len() < 2 {
                out.skipped_groups.push(id);
            } else {
                sum += mean_pairwise(&members);
                count += 1;
            }
        }
        out.intra = (count > 0).then(|| sum / count as f64);
    }
    Ok(out)
}
