use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-8;
const EIGEN_REL_TOL: f64 = 1e-6;

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

fn as_matrix(features: &Tensor) -> Result<DMatrix<f64>> {
    if features.ndim() != 2 {
        return Err(Error::Dimension(format!("features must be [N, D], got {:?}", features.shape())));
    }
    Ok(DMatrix::from_row_slice(features.dim(0), features.dim(1), features.data()))
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!("mean has {d} entries, cov is {}x{}", cov.nrows(), cov.ncols())));
        }
        if n < 2 {
            return Err(Error::Usage(format!("feature statistics need at least 2 samples, got {n}")));
        }
        Ok(FeatureStats { mean, cov, n })
    }

    /// Statistics of `[N, D]` features. Summation runs over a sorted copy
    /// of the rows, so the result does not depend on sample order.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let m = as_matrix(features)?;
        let (n, d) = m.shape();
        if n < 2 {
            return Err(Error::Usage(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let mut rows: Vec<&[f64]> = features.data().chunks(d).collect();
        rows.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
        let mut mean = DVector::zeros(d);
        for r in &rows {
            for j in 0..d {
                mean[j] += r[j];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &rows {
            for a in 0..d {
                let da = r[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (r[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / (n - 1) as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        FeatureStats::new(mean, cov, n)
    }
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Validation(format!("{what} covariance is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric PSD matrix with tiny negatives clamped to 0.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    let lmax = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    for v in e.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_REL_TOL * lmax {
                return Err(Error::Numerical(format!(
                    "{what} has eigenvalue {v:e}, below -{EIGEN_REL_TOL:e} x lambda_max ({lmax:e})"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(e)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m.clone(), what)?;
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * s * e.eigenvectors.transpose())
}

/// `||mu_r - mu_g||² + Tr(S_r + S_g - 2 (S_r S_g)^{1/2})`, with the trace of
/// the square root taken from the eigenvalues of `S_r^{1/2} S_g S_r^{1/2}`.
pub fn fid(real: &FeatureStats, gen: &FeatureStats) -> Result<f64> {
    if real.mean.len() != gen.mean.len() {
        return Err(Error::Dimension(format!(
            "feature dims differ: {} vs {}",
            real.mean.len(),
            gen.mean.len()
        )));
    }
    check_symmetric(&real.cov, "real")?;
    check_symmetric(&gen.cov, "generated")?;
    let root = sqrt_psd(&real.cov, "real covariance")?;
    let inner = &root * &gen.cov * &root;
    let e = psd_eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = (&real.mean - &gen.mean).norm_squared();
    Ok(diff + real.cov.trace() + gen.cov.trace() - 2.0 * tr_sqrt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KidConfig {
    pub subsets: usize,
    /// Defaults to `min(N, M, 100)`.
    pub subset_size: Option<usize>,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        KidConfig {
            subsets: 10,
            subset_size: None,
            seed: 0,
        }
    }
}

/// Cubic polynomial kernel `(x·y / D + 1)³`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² between two row sets. Kernel values are accumulated
/// relative to `k(x_0, y_0)`; the estimator's weights sum to zero, so the
/// shift cancels and identical constant sets give exactly 0.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let n = y.len() as f64;
    let k0 = poly_kernel(x[0], y[0]);
    let k = |a: &[f64], b: &[f64]| poly_kernel(a, b) - k0;
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += k(x[i], x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += k(y[i], y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for a in x {
        for b in y {
            kxy += k(a, b);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

/// Subset mean and (population) standard deviation of the unbiased MMD².
pub fn kid(real: &Tensor, gen: &Tensor, cfg: &KidConfig) -> Result<(f64, f64)> {
    let a = as_matrix(real)?;
    let b = as_matrix(gen)?;
    if a.ncols() != b.ncols() {
        return Err(Error::Dimension(format!("feature dims differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let (n, m) = (a.nrows(), b.nrows());
    let size = cfg.subset_size.unwrap_or(n.min(m).min(100));
    if size < 2 || size > n || size > m {
        return Err(Error::Usage(format!(
            "KID needs subsets of at least 2 within {n} real and {m} generated samples (subset size {size})"
        )));
    }
    if cfg.subsets == 0 {
        return Err(Error::Usage("KID needs at least one subset".into()));
    }
    let d = a.ncols();
    let rows_r: Vec<&[f64]> = real.data().chunks(d).collect();
    let rows_g: Vec<&[f64]> = gen.data().chunks(d).collect();
    let mut r = rng::stream(cfg.seed, "kid:subsets", 0);
    let mut vals = Vec::with_capacity(cfg.subsets);
    for _ in 0..cfg.subsets {
        let ia = index::sample(&mut r, n, size);
        let ib = index::sample(&mut r, m, size);
        let xs: Vec<&[f64]> = ia.iter().map(|i| rows_r[i]).collect();
        let ys: Vec<&[f64]> = ib.iter().map(|i| rows_g[i]).collect();
        vals.push(mmd2_unbiased(&xs, &ys));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Mean over rows of `w · max(cos(a_i, b_i), 0)`.
pub fn clip_score(image_embeds: &Tensor, text_embeds: &Tensor, w: f64) -> Result<f64> {
    if image_embeds.ndim() != 2 || image_embeds.shape() != text_embeds.shape() {
        return Err(Error::Dimension(format!(
            "embeddings must share an [N, D] shape, got {:?} and {:?}",
            image_embeds.shape(),
            text_embeds.shape()
        )));
    }
    let (n, d) = (image_embeds.dim(0), image_embeds.dim(1));
    if n == 0 {
        return Err(Error::Usage("clip score needs at least one pair".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let a = &image_embeds.data()[i * d..(i + 1) * d];
        let b = &text_embeds.data()[i * d..(i + 1) * d];
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Validation(format!("row {i} has zero norm")));
        }
        let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        total += w * cos.clamp(-1.0, 1.0).max(0.0);
    }
    Ok(total / n as f64)
}
