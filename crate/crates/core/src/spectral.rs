//! Symmetric eigendecomposition, graph Fourier analysis and the
//! high-frequency-aware kernel `I - alpha * L_sym` with its best low-rank
//! symmetric factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::GraphMatrices;

/// Inputs whose largest asymmetry exceeds this are rejected.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues in ascending order with matching orthonormal eigenvectors
/// stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(lambda) U^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let u = &self.eigenvectors;
        u * DMatrix::from_diagonal(&self.eigenvalues) * u.transpose()
    }

    /// `max |U^T U - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.dim();
        let gram = self.eigenvectors.transpose() * &self.eigenvectors;
        (gram - DMatrix::<f64>::identity(n, n)).amax()
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Each eigenvector is oriented so that its entry of largest magnitude is
/// positive (first such entry on exact ties).
pub fn eigendecompose(m: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "eigendecompose needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric(asym));
    }
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.norm();

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= f64::EPSILON * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = v.column(src);
        let mut lead = 0;
        for k in 1..n {
            if col[k].abs() > col[lead].abs() {
                lead = k;
            }
        }
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        eigenvectors.set_column(dst, &(col * sign));
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Spectral-clustering features: row `v` is `(u_1(v), ..., u_K(v))`.
pub fn low_pass_features(d: &SpectralDecomposition, k: usize) -> Result<DMatrix<f64>> {
    check_rank(k, d.dim())?;
    Ok(d.eigenvectors.columns(0, k).into_owned())
}

/// Ideal low-pass filtering of the delta signal at `v`: `L_K U^T delta_v`,
/// where `L_K` keeps the `k` lowest frequencies. The trailing `N - k`
/// entries are zero; the leading `k` entries equal row `v` of
/// [`low_pass_features`].
pub fn low_pass_delta(d: &SpectralDecomposition, k: usize, v: usize) -> Result<DVector<f64>> {
    let n = d.dim();
    check_rank(k, n)?;
    if v >= n {
        return Err(Error::out_of_range("node", v, format!("< {n}")));
    }
    let mut delta = DVector::zeros(n);
    delta[v] = 1.0;
    let coeffs = d.eigenvectors.transpose() * delta;
    let step = DVector::from_fn(n, |i, _| if i < k { 1.0 } else { 0.0 });
    Ok(coeffs.component_mul(&step))
}

/// Graph Fourier transform `U^T x`.
pub fn graph_fourier(x: &DVector<f64>, d: &SpectralDecomposition) -> Result<DVector<f64>> {
    if x.len() != d.dim() {
        return Err(Error::DimensionMismatch(format!(
            "signal of length {} for a {}-node spectrum",
            x.len(),
            d.dim()
        )));
    }
    Ok(d.eigenvectors.transpose() * x)
}

/// The kernel `I - alpha * L_sym`.
#[derive(Debug, Clone, PartialEq)]
pub struct HfcKernel {
    pub alpha: f64,
    pub kernel: DMatrix<f64>,
}

pub fn hfc_kernel(gm: &GraphMatrices, alpha: f64) -> Result<HfcKernel> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::out_of_range("alpha", alpha, "[0, 1]"));
    }
    let n = gm.node_count();
    let kernel = DMatrix::<f64>::identity(n, n) - &gm.sym_laplacian * alpha;
    Ok(HfcKernel { alpha, kernel })
}

/// A rank-K symmetric factor `F` and its residual `||kernel - F F^T||_F^2`.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    pub factor: DMatrix<f64>,
    pub residual: f64,
    /// Kernel eigenvalues, descending, that were kept.
    pub kept_eigenvalues: Vec<f64>,
}

/// Best rank-K factorization `F F^T` of a kernel: the K largest eigenpairs
/// with negative eigenvalues clamped to zero. The residual is measured
/// against the unclamped kernel.
pub fn best_rank_k(k: &HfcKernel, rank: usize) -> Result<LowRankFactor> {
    let n = k.kernel.nrows();
    check_rank(rank, n)?;
    let d = eigendecompose(&k.kernel)?;
    let top = top_eigenvectors(&d, rank);
    let kept: Vec<f64> = (0..rank).map(|i| d.eigenvalues[n - 1 - i]).collect();
    let mut factor = top;
    for (j, &lambda) in kept.iter().enumerate() {
        let w = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(w);
    }
    let residual = factorization_residual(&k.kernel, &factor);
    Ok(LowRankFactor {
        factor,
        residual,
        kept_eigenvalues: kept,
    })
}

/// Eigenvectors of the `k` largest eigenvalues, largest first.
pub fn top_eigenvectors(d: &SpectralDecomposition, k: usize) -> DMatrix<f64> {
    let n = d.dim();
    DMatrix::from_fn(n, k, |i, j| d.eigenvectors[(i, n - 1 - j)])
}

/// `||kernel - F F^T||_F^2`.
pub fn factorization_residual(kernel: &DMatrix<f64>, factor: &DMatrix<f64>) -> f64 {
    (kernel - factor * factor.transpose()).norm_squared()
}

/// Largest principal angle (radians) between the column spans of `a` and
/// `b`.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let sv = (qa.transpose() * qb).singular_values();
    let smallest = sv.iter().copied().fold(f64::INFINITY, f64::min);
    smallest.clamp(-1.0, 1.0).acos()
}

fn check_rank(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::out_of_range("K", k, format!("1..={n}")));
    }
    Ok(())
}
