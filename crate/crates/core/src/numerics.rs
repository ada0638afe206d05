//! Matrix kernels shared by every other module.
//!
//! Singular values and eigenvalues are always reported in descending order so
//! that the i-th channel gain and the i-th covariance eigenvalue pair up
//! deterministically in the precoder. Decompositions are backed by `nalgebra`;
//! the Stein and Riccati solvers and the bisection root finder are local.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

pub type RMat = DMatrix<f64>;
pub type CMat = DMatrix<Complex<f64>>;
pub type RVec = DVector<f64>;
pub type CVec = DVector<Complex<f64>>;

/// Full singular value decomposition `H = V * Pi * U^H`.
///
/// `u` is `N_s x N_s`, `v` is `N_c x N_c` and `pi` is the `N_c x N_s`
/// rectangular diagonal with descending entries.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: CMat,
    pub pi: RMat,
    pub v: CMat,
    pub singular_values: Vec<f64>,
}

impl SvdResult {
    /// Multiplies the factors back together.
    pub fn reconstruct(&self) -> CMat {
        &self.v * self.pi.map(|p| Complex::new(p, 0.0)) * self.u.adjoint()
    }
}

/// Eigendecomposition `Sigma = S * Lambda * S^T` of a symmetric PSD matrix,
/// eigenvalues descending.
#[derive(Debug, Clone)]
pub struct EigSymResult {
    pub s: RMat,
    pub lambda: Vec<f64>,
}

impl EigSymResult {
    pub fn reconstruct(&self) -> RMat {
        &self.s * RMat::from_diagonal(&RVec::from_column_slice(&self.lambda)) * self.s.transpose()
    }
}

pub fn to_complex(m: &RMat) -> CMat {
    m.map(|v| Complex::new(v, 0.0))
}

pub fn max_abs(m: &RMat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn symmetrize(m: &RMat) -> RMat {
    (m + m.transpose()) * 0.5
}

pub fn spectral_norm(m: &RMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().fold(0.0_f64, |acc, &s| acc.max(s))
}

/// Eigenvalues of a general real square matrix (complex in general).
pub fn eigenvalues(m: &RMat) -> Vec<Complex<f64>> {
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(m: &RMat) -> f64 {
    eigenvalues(m).iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

fn ensure_finite_c(h: &CMat) -> Result<()> {
    if h.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::InputDomain("matrix has non-finite entries".into()))
    }
}

/// Extends `thin` (orthonormal columns) to a square unitary matrix by
/// Gram-Schmidt against the standard basis.
fn complete_unitary(thin: &CMat) -> CMat {
    let n = thin.nrows();
    let mut cols: Vec<CVec> = thin.column_iter().map(|c| c.into_owned()).collect();
    while cols.len() < n {
        let mut best: Option<CVec> = None;
        let mut best_norm = -1.0;
        for j in 0..n {
            let mut e = CVec::zeros(n);
            e[j] = Complex::new(1.0, 0.0);
            // two passes keep the residual orthogonal to working precision
            for _ in 0..2 {
                for c in &cols {
                    let proj = c.dotc(&e);
                    e -= c * proj;
                }
            }
            let nrm = e.norm();
            if nrm > best_norm {
                best_norm = nrm;
                best = Some(e);
            }
        }
        let v = best.expect("at least one basis candidate");
        cols.push(v.unscale(best_norm));
    }
    CMat::from_columns(&cols)
}

/// Singular value decomposition with full unitary factors.
pub fn svd(h: &CMat) -> Result<SvdResult> {
    ensure_finite_c(h)?;
    let (nc, ns) = h.shape();
    let r = nc.min(ns);
    let dec = SVD::new(h.clone(), true, true);
    let left = dec.u.expect("requested u");
    let right_t = dec.v_t.expect("requested v_t");

    // nalgebra sorts already; a stable re-sort keeps the contract explicit
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| dec.singular_values[i]).collect();
    let v_thin = CMat::from_columns(&order.iter().map(|&i| left.column(i).into_owned()).collect::<Vec<_>>());
    let right = right_t.adjoint();
    let u_thin = CMat::from_columns(&order.iter().map(|&i| right.column(i).into_owned()).collect::<Vec<_>>());

    let mut pi = RMat::zeros(nc, ns);
    for (i, &s) in singular_values.iter().enumerate() {
        pi[(i, i)] = s;
    }
    Ok(SvdResult { u: complete_unitary(&u_thin), pi, v: complete_unitary(&v_thin), singular_values })
}

/// Symmetric eigendecomposition for covariance matrices.
///
/// Eigenvalues within `1e-12 * max(1, |Sigma|)` below zero are clamped to 0;
/// anything more negative is rejected as not PSD. Ties keep the order the
/// underlying solver produced.
pub fn eig_sym(sigma: &RMat) -> Result<EigSymResult> {
    if !sigma.is_square() {
        return Err(Error::Dimension(format!("eig_sym needs a square matrix, got {:?}", sigma.shape())));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::InputDomain("matrix has non-finite entries".into()));
    }
    let scale = max_abs(sigma).max(1.0);
    let asym = max_abs(&(sigma - sigma.transpose()));
    if asym > 1e-10 * scale {
        return Err(Error::InputDomain(format!("matrix is not symmetric (max asymmetry {asym:.3e})")));
    }
    let dec = SymmetricEigen::new(symmetrize(sigma));
    let k = sigma.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.eigenvalues[b].total_cmp(&dec.eigenvalues[a]));
    let mut lambda = Vec::with_capacity(k);
    for &i in &order {
        let l = dec.eigenvalues[i];
        if l < -1e-12 * scale {
            return Err(Error::InputDomain(format!("matrix is not PSD (eigenvalue {l:.3e})")));
        }
        lambda.push(l.max(0.0));
    }
    let s = RMat::from_columns(&order.iter().map(|&i| dec.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    Ok(EigSymResult { s, lambda })
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrt_psd(m: &RMat) -> Result<RMat> {
    let e = eig_sym(m)?;
    let d = RVec::from_iterator(e.lambda.len(), e.lambda.iter().map(|l| l.sqrt()));
    Ok(&e.s * RMat::from_diagonal(&d) * e.s.transpose())
}

/// Solves the discrete Lyapunov (Stein) equation `F^T Q F - Q = -T`.
pub fn solve_stein(f: &RMat, t: &RMat) -> Result<RMat> {
    let k = f.nrows();
    if !f.is_square() || t.shape() != (k, k) {
        return Err(Error::Dimension(format!("stein: F {:?}, T {:?}", f.shape(), t.shape())));
    }
    let rho = spectral_radius(f);
    if rho >= 1.0 {
        return Err(Error::NotSchurStable(rho));
    }
    // column-major vec: vec(F^T Q F) = (F^T kron F^T) vec(Q)
    let ft = f.transpose();
    let system = RMat::identity(k * k, k * k) - ft.kronecker(&ft);
    let rhs = RVec::from_column_slice(t.as_slice());
    let sol = system.lu().solve(&rhs).ok_or_else(|| Error::Numerical("Stein system is singular".into()))?;
    Ok(symmetrize(&RMat::from_column_slice(k, k, sol.as_slice())))
}

pub const DARE_MAX_ITER: usize = 200;

/// Solves `Z = A^T Z A - A^T Z B (B^T Z B + R)^-1 B^T Z A + P` with the
/// structured doubling iteration on `(A, B R^-1 B^T, P)`.
pub fn solve_dare(a: &RMat, b: &RMat, p: &RMat, r: &RMat) -> Result<RMat> {
    let k = a.nrows();
    let d = b.ncols();
    if !a.is_square() || b.nrows() != k || p.shape() != (k, k) || r.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "dare: A {:?}, B {:?}, P {:?}, R {:?}",
            a.shape(),
            b.shape(),
            p.shape(),
            r.shape()
        )));
    }
    let r_inv = r.clone().try_inverse().ok_or_else(|| Error::Numerical("R is singular".into()))?;
    let eye = RMat::identity(k, k);
    let mut ak = a.clone();
    let mut gk = symmetrize(&(b * r_inv * b.transpose()));
    let mut hk = symmetrize(p);
    for _ in 0..DARE_MAX_ITER {
        let w_inv =
            (&eye + &gk * &hk).try_inverse().ok_or_else(|| Error::Numerical("doubling step is singular".into()))?;
        let a_next = &ak * &w_inv * &ak;
        let g_next = symmetrize(&(&gk + &ak * &w_inv * &gk * ak.transpose()));
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_inv * &ak));
        if h_next.iter().chain(a_next.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NoConvergence(DARE_MAX_ITER));
        }
        let diff = max_abs(&(&h_next - &hk));
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if diff <= 1e-13 * max_abs(&hk).max(1.0) {
            return Ok(hk);
        }
    }
    Err(Error::NoConvergence(DARE_MAX_ITER))
}

/// Final bracket `[lo, hi]` around a root of a monotone function.
///
/// Stops when `|f(mid)| <= tol` or the bracket is narrower than
/// `tol * max(1, |mid|)`.
pub fn bisect_bracket<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    let (mut lo, mut hi) = (lo, hi);
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok((lo, lo));
    }
    if f_hi == 0.0 {
        return Ok((hi, hi));
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(Error::Bracket { lo, hi, f_lo, f_hi });
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok((mid, mid));
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        if f_mid.abs() <= tol || (hi - lo).abs() <= tol * mid.abs().max(1.0) {
            break;
        }
    }
    Ok((lo, hi))
}

pub fn bisect<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let (lo, hi) = bisect_bracket(f, lo, hi, tol)?;
    Ok(0.5 * (lo + hi))
}
