//! Gaussian feature statistics and the Fréchet distance between them.
//!
//! `FID = ‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_rΣ_g)^{1/2})`. The mean term is the
//! squared Euclidean norm.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues of a covariance may dip this far below zero (relative to its scale).
pub const PSD_TOLERANCE: f64 = 1e-6;
/// Slightly negative distances down to this value are rounding noise and clamp to 0.
pub const NEGATIVE_FID_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StatsFile", into = "StatsFile")]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    n: usize,
    mu: Vec<f64>,
    /// Row-major.
    sigma: Vec<f64>,
}

impl From<GaussianStats> for StatsFile {
    fn from(s: GaussianStats) -> Self {
        Self {
            n: s.n,
            mu: s.mu.iter().copied().collect(),
            sigma: s.sigma.transpose().iter().copied().collect(),
        }
    }
}

impl TryFrom<StatsFile> for GaussianStats {
    type Error = String;

    fn try_from(f: StatsFile) -> std::result::Result<Self, String> {
        let d = f.mu.len();
        if f.sigma.len() != d * d {
            return Err(format!(
                "covariance has {} entries for dimension {d}",
                f.sigma.len()
            ));
        }
        Ok(Self {
            mu: DVector::from_vec(f.mu),
            sigma: DMatrix::from_row_slice(d, d, &f.sigma),
            n: f.n,
        })
    }
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Builds stats from explicit moments; `sigma` must be symmetric PSD within tolerance.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, n: usize) -> Result<Self> {
        if sigma.nrows() != mu.len() || sigma.ncols() != mu.len() {
            return Err(Error::dim(format!(
                "covariance {}x{} for mean of length {}",
                sigma.nrows(),
                sigma.ncols(),
                mu.len()
            )));
        }
        check_psd("covariance", &sigma)?;
        Ok(Self { mu, sigma, n })
    }

    /// [`GaussianStats::new`] from a mean slice and a row-major covariance.
    pub fn from_slices(mu: &[f64], sigma: &[f64], n: usize) -> Result<Self> {
        let d = mu.len();
        if sigma.len() != d * d {
            return Err(Error::dim(format!(
                "covariance has {} entries for dimension {d}",
                sigma.len()
            )));
        }
        Self::new(
            DVector::from_column_slice(mu),
            DMatrix::from_row_slice(d, d, sigma),
            n,
        )
    }
}

/// Mean and unbiased covariance of `n × dim` row-major features.
pub fn gaussian_stats<T: Copy + Into<f64>>(features: &[T], dim: usize) -> Result<GaussianStats> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::dim(format!(
            "{} feature values do not form rows of {dim}",
            features.len()
        )));
    }
    let n = features.len() / dim;
    if n < 2 {
        return Err(Error::invalid(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let x = DMatrix::from_iterator(dim, n, features.iter().map(|&v| v.into()));
    let mu = x.column_mean();
    let mut centered = x;
    for mut col in centered.column_iter_mut() {
        col -= &mu;
    }
    let mut sigma = &centered * centered.transpose() / (n - 1) as f64;
    symmetrize(&mut sigma);
    Ok(GaussianStats { mu, sigma, n })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn check_square(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "{name} is {}x{}, not square",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn scale(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(1.0f64, |a, v| a.max(v.abs()))
}

/// Symmetric eigendecomposition with exactly-zero rows split off first: they are eigenvectors
/// with eigenvalue 0, and nalgebra returns NaN for some matrices that contain them.
fn sym_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    let live: Vec<usize> = (0..n)
        .filter(|&i| m.row(i).iter().any(|&v| v != 0.0))
        .collect();
    let eig = if live.len() == n {
        SymmetricEigen::try_new(m, f64::EPSILON, 0)
    } else {
        let block = DMatrix::from_fn(live.len(), live.len(), |i, j| m[(live[i], live[j])]);
        SymmetricEigen::try_new(block, f64::EPSILON, 0).map(|b| {
            let mut eigenvalues = DVector::zeros(n);
            let mut eigenvectors = DMatrix::zeros(n, n);
            for k in 0..live.len() {
                eigenvalues[k] = b.eigenvalues[k];
                for (r, &row) in live.iter().enumerate() {
                    eigenvectors[(row, k)] = b.eigenvectors[(r, k)];
                }
            }
            let dead = (0..n).filter(|i| live.binary_search(i).is_err());
            for (k, i) in (live.len()..n).zip(dead) {
                eigenvectors[(i, k)] = 1.0;
            }
            SymmetricEigen {
                eigenvectors,
                eigenvalues,
            }
        })
    };
    let eig = eig.ok_or_else(|| {
        Error::Numerical(format!("eigendecomposition of {what} did not converge"))
    })?;
    if eig
        .eigenvalues
        .iter()
        .chain(eig.eigenvectors.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical(format!(
            "eigendecomposition of {what} produced non-finite values"
        )));
    }
    Ok(eig)
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    check_square(name, m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{name} has non-finite entries")));
    }
    let tol = 1e-9 * scale(m);
    if (m - m.transpose()).amax() > tol {
        return Err(Error::Numerical(format!("{name} is not symmetric")));
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym_eigen(sym, name)?;
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE * scale(m) {
        return Err(Error::Numerical(format!(
            "{name} has eigenvalue {min}, not positive semi-definite"
        )));
    }
    Ok(eig)
}

/// `V·f(Λ)·Vᵀ` with eigenvalues clamped at 0 first.
fn spectral_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let d = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| f(l.max(0.0))),
    );
    let mut out = v * DMatrix::from_diagonal(&d) * v.transpose();
    symmetrize(&mut out);
    out
}

fn check_pair(
    sigma_r: &DMatrix<f64>,
    sigma_g: &DMatrix<f64>,
) -> Result<(
    SymmetricEigen<f64, nalgebra::Dyn>,
    SymmetricEigen<f64, nalgebra::Dyn>,
)> {
    let er = check_psd("Σ_r", sigma_r)?;
    let eg = check_psd("Σ_g", sigma_g)?;
    if sigma_r.shape() != sigma_g.shape() {
        return Err(Error::dim(format!(
            "covariances of different sizes {:?} and {:?}",
            sigma_r.shape(),
            sigma_g.shape()
        )));
    }
    Ok((er, eg))
}

/// `P^{1/2}·(P^{1/2} Q P^{1/2})^{1/2}·P^{-1/2}`, a square root of `P·Q` whenever `P` is
/// nonsingular. `A = P^{1/2} Q P^{1/2}` is symmetric, so no complex arithmetic is needed.
fn conjugated_sqrt(
    ep: &SymmetricEigen<f64, nalgebra::Dyn>,
    q: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p_half = spectral_map(ep, f64::sqrt);
    let mut a = &p_half * q * &p_half;
    symmetrize(&mut a);
    let ea = sym_eigen(a.clone(), "the symmetrized product")?;
    let min = ea.eigenvalues.min();
    if min < -PSD_TOLERANCE * scale(&a) {
        return Err(Error::Numerical(format!(
            "product square root has a residue of {min} (would be complex)"
        )));
    }
    let cutoff = ep.eigenvalues.amax() * 1e-14;
    let p_pinv_half = spectral_map(ep, |l| if l > cutoff { 1.0 / l.sqrt() } else { 0.0 });
    Ok(p_half * spectral_map(&ea, f64::sqrt) * p_pinv_half)
}

/// `S` with `S·S = Σ_rΣ_g`.
///
/// Conjugates through whichever of `Σ_r` or `Σ_g` gives the smaller residual: with `R = Σ_r^{1/2}`,
/// `S = R·(RΣ_gR)^{1/2}·R⁻¹`; with `G = Σ_g^{1/2}`, `S = G⁻¹·(GΣ_rG)^{1/2}·G`. When both
/// covariances are singular the product can lack a square root altogether. The result is
/// rejected when the relative Frobenius error exceeds `1e-6`.
pub fn matrix_sqrt_product(sigma_r: &DMatrix<f64>, sigma_g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (er, eg) = check_pair(sigma_r, sigma_g)?;
    let target = sigma_r * sigma_g;
    let norm = target.norm().max(f64::MIN_POSITIVE);
    let residual = |s: &DMatrix<f64>| (s * s - &target).norm() / norm;

    let from_r = conjugated_sqrt(&er, sigma_g)?;
    let err_r = residual(&from_r);
    if err_r <= 1e-6 {
        return Ok(from_r);
    }
    // G⁻¹·(GΣ_rG)^{1/2}·G is the transpose of the same construction with the roles swapped
    let from_g = conjugated_sqrt(&eg, sigma_r)?.transpose();
    let err_g = residual(&from_g);
    let (s, err) = if err_g < err_r {
        (from_g, err_g)
    } else {
        (from_r, err_r)
    };
    if err > 1e-6 {
        return Err(Error::Numerical(format!(
            "matrix square root residual {err:.3e} exceeds 1e-6"
        )));
    }
    Ok(s)
}

/// `Tr (Σ_rΣ_g)^{1/2}`.
///
/// The eigenvalues of `(Σ_rΣ_g)^{1/2}` are the singular values of `M = Σ_r^{1/2}Σ_g^{1/2}`, so the
/// trace is its nuclear norm. Unlike square-rooting the eigenvalues of `Σ_r^{1/2}Σ_gΣ_r^{1/2}`,
/// this does not blow rounding noise in null directions up to `√ε`, and swapping the arguments
/// only transposes `M`. The singular values come from the symmetric `[[0, M], [Mᵀ, 0]]`, whose
/// eigenvalues are `±σ_i` (nalgebra's SVD can stall on near-degenerate inputs).
pub fn trace_sqrt_product(sigma_r: &DMatrix<f64>, sigma_g: &DMatrix<f64>) -> Result<f64> {
    let (er, eg) = check_pair(sigma_r, sigma_g)?;
    let m = spectral_map(&er, f64::sqrt) * spectral_map(&eg, f64::sqrt);
    let n = m.nrows();
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    j.view_mut((0, n), (n, n)).copy_from(&m);
    j.view_mut((n, 0), (n, n)).copy_from(&m.transpose());
    let eig = sym_eigen(j, "the product trace matrix")?;
    Ok(eig.eigenvalues.iter().map(|l| l.abs()).sum::<f64>() / 2.0)
}

pub fn fid(r: &GaussianStats, g: &GaussianStats) -> Result<f64> {
    if r.dim() != g.dim() {
        return Err(Error::dim(format!(
            "feature dimensions {} and {} differ",
            r.dim(),
            g.dim()
        )));
    }
    let mean_term = (&r.mu - &g.mu).norm_squared();
    let value = mean_term + r.sigma.trace() + g.sigma.trace()
        - 2.0 * trace_sqrt_product(&r.sigma, &g.sigma)?;
    if value >= 0.0 {
        Ok(value)
    } else if value > -NEGATIVE_FID_TOLERANCE {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!(
            "Fréchet distance evaluated to {value}"
        )))
    }
}

/// `√(FID² + MSE)`; MSE enters un-squared.
pub fn selection_score(fid: f64, mse: f64) -> Result<f64> {
    if !(fid >= 0.0) || !(mse >= 0.0) {
        return Err(Error::invalid(format!(
            "selection score needs fid, mse ≥ 0; got {fid}, {mse}"
        )));
    }
    Ok((fid * fid + mse).sqrt())
}
