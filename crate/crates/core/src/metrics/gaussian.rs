use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricsError;

const SYMMETRY_TOL: f64 = 1e-10;
const NEGATIVE_EIG_TOL: f64 = 1e-8;
const SQRTM_TOL: f64 = 1e-8;

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Checks symmetry and that no eigenvalue is below `-1e-8`; the
    /// covariance is stored exactly symmetrized.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, MetricsError> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(MetricsError::Dimension(d, cov.nrows()));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > SYMMETRY_TOL * cov.amax().max(1.0) {
            return Err(MetricsError::NotPsd(format!("asymmetry {asym:e}")));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        if d > 0 {
            let min = eigen(&cov)?.eigenvalues.min();
            if min < -NEGATIVE_EIG_TOL * cov.amax().max(1.0) {
                return Err(MetricsError::NotPsd(format!("eigenvalue {min:e}")));
            }
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of at least two feature vectors.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self, MetricsError> {
        if features.len() < 2 {
            return Err(MetricsError::Insufficient {
                what: "feature vectors for a covariance",
                needed: 2,
                have: features.len(),
            });
        }
        let d = features[0].len();
        let n = features.len();
        let mut x = DMatrix::zeros(n, d);
        for (i, f) in features.iter().enumerate() {
            if f.len() != d {
                return Err(MetricsError::Dimension(d, f.len()));
            }
            for (j, v) in f.iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        for j in 0..d {
            let m = mean[j];
            x.column_mut(j).add_scalar_mut(-m);
        }
        let cov = x.transpose() * &x / (n - 1) as f64;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

fn eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricsError> {
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or(MetricsError::Sqrtm { residual: f64::NAN })
}

/// `f` applied to the clamped eigenvalues of a symmetric matrix.
fn spectral(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>, MetricsError> {
    let e = eigen(m)?;
    let vals = e.eigenvalues.map(|v| f(v.max(0.0)));
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

fn relative_residual(s: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    let norm = target.norm();
    let r = (s * s - target).norm();
    if norm == 0.0 {
        r
    } else {
        r / norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqrtmMethod {
    Eigen,
    NewtonSchulz,
}

#[derive(Debug, Clone)]
pub struct SqrtmResult {
    pub sqrt: DMatrix<f64>,
    pub residual: f64,
    pub method: SqrtmMethod,
}

fn newton_schulz(p: &DMatrix<f64>, iters: usize) -> DMatrix<f64> {
    let d = p.nrows();
    let c = p.norm();
    if c == 0.0 {
        return DMatrix::zeros(d, d);
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let mut y = p / c;
    let mut z = eye.clone();
    for _ in 0..iters {
        let t = (&eye * 3.0 - &z * &y) * 0.5;
        y = &y * &t;
        z = &t * &z;
    }
    y * c.sqrt()
}

/// Square root `S` of `Σ_a Σ_b` for PSD inputs, via `A^½ (A^½ Σ_b A^½)^½ A^-½`.
/// Falls back to a coupled Newton-Schulz iteration when the relative
/// residual `‖S S − Σ_a Σ_b‖_F / ‖Σ_a Σ_b‖_F` exceeds `1e-8`, and errors
/// with the residual if that fails too.
pub fn sqrtm_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SqrtmResult, MetricsError> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(MetricsError::Dimension(a.nrows(), b.nrows()));
    }
    let product = a * b;
    let mut best = None;
    if let Ok(e) = eigen(a) {
        let floor = e.eigenvalues.amax() * 1e-14;
        let half = e.eigenvalues.map(|v| v.max(0.0).sqrt());
        let inv_half = e
            .eigenvalues
            .map(|v| if v > floor { 1.0 / v.sqrt() } else { 0.0 });
        let q = &e.eigenvectors;
        let a_half = q * DMatrix::from_diagonal(&half) * q.transpose();
        let a_inv_half = q * DMatrix::from_diagonal(&inv_half) * q.transpose();
        let mid = &a_half * b * &a_half;
        let mid = (&mid + mid.transpose()) * 0.5;
        if let Ok(mid_sqrt) = spectral(&mid, f64::sqrt) {
            let s = &a_half * mid_sqrt * a_inv_half;
            let residual = relative_residual(&s, &product);
            if residual < SQRTM_TOL {
                return Ok(SqrtmResult {
                    sqrt: s,
                    residual,
                    method: SqrtmMethod::Eigen,
                });
            }
            best = Some(residual);
        }
    }
    let s = newton_schulz(&product, 200);
    let residual = relative_residual(&s, &product);
    if residual.is_finite() && residual < SQRTM_TOL {
        return Ok(SqrtmResult {
            sqrt: s,
            residual,
            method: SqrtmMethod::NewtonSchulz,
        });
    }
    Err(MetricsError::Sqrtm {
        residual: best.map_or(residual, |b: f64| b.min(residual)),
    })
}

/// Fréchet distance `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^½)`, with
/// tiny negative results clamped to zero.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension(a.dim(), b.dim()));
    }
    if a == b {
        return Ok(0.0);
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    // Tr (Σ_a Σ_b)^½ equals the trace of the symmetric (A^½ Σ_b A^½)^½.
    let a_half = spectral(&a.cov, f64::sqrt)?;
    let mid = &a_half * &b.cov * &a_half;
    let mid = (&mid + mid.transpose()) * 0.5;
    let tr_sqrt = match eigen(&mid) {
        Ok(e) => e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>(),
        Err(_) => sqrtm_product(&a.cov, &b.cov)?.sqrt.trace(),
    };
    let value = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(mu: f64, var: f64) -> GaussianStats {
        GaussianStats::new(
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, var),
        )
        .unwrap()
    }

    #[test]
    fn closed_form_examples() {
        assert!((fid(&one_d(0.0, 1.0), &one_d(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-12);
        assert!((fid(&one_d(1.0, 4.0), &one_d(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(fid(&one_d(2.0, 3.0), &one_d(2.0, 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianStats::new(DVector::zeros(2), bad).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianStats::new(DVector::zeros(2), neg).is_err());
        assert!(fid(
            &one_d(0.0, 1.0),
            &GaussianStats::fit(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
        )
        .is_err());
        assert!(GaussianStats::fit(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fit_matches_unbiased_covariance() {
        let s = GaussianStats::fit(&[vec![1.0, 2.0], vec![3.0, 2.0], vec![5.0, 5.0]]).unwrap();
        assert_eq!(s.mean().as_slice(), &[3.0, 3.0]);
        assert!((s.cov()[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((s.cov()[(0, 1)] - 3.0).abs() < 1e-12);
        assert!((s.cov()[(1, 1)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sqrtm_of_commuting_diagonals() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let r = sqrtm_product(&a, &b).unwrap();
        assert!((r.sqrt[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((r.sqrt[(1, 1)] - 6.0).abs() < 1e-12);
        assert_eq!(r.method, SqrtmMethod::Eigen);
    }

    #[test]
    fn newton_schulz_fallback_converges() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 3.0]);
        let p = &a * &b;
        let s = newton_schulz(&p, 100);
        assert!(relative_residual(&s, &p) < 1e-12);
    }
}
