//! Virtual covariance recursion and the augmented-measurement state estimator.

use nalgebra::Complex;

use crate::error::{Error, Result};
use crate::numerics::{eig_sym, symmetrize, to_complex, CMat, CVec, EigSymResult, RMat, RVec};

/// Imaginary residue above which the estimator update is rejected.
pub const IMAG_TOLERANCE: f64 = 1e-6;

/// Relative eigenvalue floor below which `Sigma` is treated as singular and
/// the information (Gram) form is avoided.
const NEAR_SINGULAR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct CovarianceState {
    sigma: RMat,
    eig: EigSymResult,
}

impl CovarianceState {
    pub fn new(sigma: RMat) -> Result<Self> {
        let eig = eig_sym(&sigma)?;
        Ok(Self { sigma: symmetrize(&sigma), eig })
    }

    pub fn zeros(k: usize) -> Self {
        Self::new(RMat::zeros(k, k)).expect("zero matrix is PSD")
    }

    pub fn sigma(&self) -> &RMat {
        &self.sigma
    }
    pub fn eig(&self) -> &EigSymResult {
        &self.eig
    }
    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }
    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    fn is_near_singular(&self) -> bool {
        let top = self.eig.lambda.first().copied().unwrap_or(0.0);
        let bottom = self.eig.lambda.last().copied().unwrap_or(0.0);
        bottom <= NEAR_SINGULAR * top.max(1.0)
    }
}

/// `F~ = H F g` and its Gram matrix `2 Re{F~^H F~}`.
#[derive(Debug, Clone)]
pub struct EffectiveChannel {
    pub ftilde: CMat,
    pub gram2re: RMat,
}

impl EffectiveChannel {
    pub fn new(h: &CMat, f: &CMat, g: f64) -> Self {
        Self::from_ftilde(h * f * Complex::new(g, 0.0))
    }

    pub fn from_ftilde(ftilde: CMat) -> Self {
        let gram = ftilde.adjoint() * &ftilde;
        let gram2re = symmetrize(&gram.map(|z| 2.0 * z.re));
        Self { ftilde, gram2re }
    }

    pub fn k(&self) -> usize {
        self.ftilde.ncols()
    }

    pub fn is_zero(&self) -> bool {
        self.ftilde.iter().all(|z| z.norm_sqr() == 0.0)
    }

    /// `F~^a`: `F~` stacked over its element-wise conjugate.
    pub fn augmented(&self) -> CMat {
        let (nc, k) = self.ftilde.shape();
        let mut fa = CMat::zeros(2 * nc, k);
        fa.rows_mut(0, nc).copy_from(&self.ftilde);
        fa.rows_mut(nc, nc).copy_from(&self.ftilde.map(|z| z.conj()));
        fa
    }

    /// Real matrix `sqrt(2) [Re F~; Im F~]` with the same Gram matrix and
    /// unit-variance noise.
    pub fn realified(&self) -> RMat {
        let (nc, k) = self.ftilde.shape();
        let s = std::f64::consts::SQRT_2;
        let mut r = RMat::zeros(2 * nc, k);
        r.rows_mut(0, nc).copy_from(&self.ftilde.map(|z| s * z.re));
        r.rows_mut(nc, nc).copy_from(&self.ftilde.map(|z| s * z.im));
        r
    }
}

/// Measurement update via the explicit augmented stack in Joseph form:
/// `K = Sigma F^aH (F^a Sigma F^aH + I)^-1`,
/// `(I - K F^a) Sigma (I - K F^a)^H + K K^H`.
pub fn posterior_augmented(sigma: &RMat, eff: &EffectiveChannel) -> Result<RMat> {
    let fa = eff.augmented();
    let sc = to_complex(sigma);
    let s = &fa * &sc * fa.adjoint() + CMat::identity(fa.nrows(), fa.nrows());
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numerical("augmented innovation covariance is not positive definite".into()))?;
    let gain = chol.solve(&(&fa * &sc)).adjoint();
    let j = CMat::identity(sc.nrows(), sc.nrows()) - &gain * &fa;
    let post = &j * &sc * j.adjoint() + &gain * gain.adjoint();
    real_part_checked(&post, "augmented covariance update")
}

/// Measurement update via the information form `(2 Re{F~^H F~} + Sigma^-1)^-1`.
pub fn posterior_gram(sigma: &RMat, eff: &EffectiveChannel) -> Result<RMat> {
    let sinv =
        sigma.clone().cholesky().ok_or_else(|| Error::Numerical("Sigma is not positive definite".into()))?.inverse();
    let info = &eff.gram2re + sinv;
    let post = info
        .cholesky()
        .ok_or_else(|| Error::Numerical("information matrix is not positive definite".into()))?
        .inverse();
    Ok(symmetrize(&post))
}

/// Measurement update on the real-ified model; valid for singular `Sigma`.
pub fn posterior_realified(sigma: &RMat, eff: &EffectiveChannel) -> Result<RMat> {
    let r = eff.realified();
    let s = &r * sigma * r.transpose() + RMat::identity(r.nrows(), r.nrows());
    let gain_t = s
        .cholesky()
        .ok_or_else(|| Error::Numerical("innovation covariance is not positive definite".into()))?
        .solve(&(&r * sigma));
    Ok(symmetrize(&(sigma - sigma * r.transpose() * gain_t)))
}

fn real_part_checked(m: &CMat, what: &str) -> Result<RMat> {
    let scale = m.iter().map(|z| z.re.abs()).fold(1.0, f64::max);
    let imag = m.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if imag > IMAG_TOLERANCE * scale {
        return Err(Error::Numerical(format!("{what}: imaginary residue {imag:.3e}")));
    }
    Ok(m.map(|z| z.re))
}

/// One step of the virtual covariance recursion.
pub fn sigma_step(
    state: &CovarianceState,
    eff: &EffectiveChannel,
    gamma: u8,
    a: &RMat,
    w: &RMat,
) -> Result<CovarianceState> {
    let sigma = state.sigma();
    let post = if gamma == 0 || eff.is_zero() {
        sigma.clone()
    } else if state.is_near_singular() {
        posterior_realified(sigma, eff)?
    } else {
        posterior_gram(sigma, eff)?
    };
    CovarianceState::new(symmetrize(&(a * post * a.transpose() + w)))
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub x_hat: RVec,
    pub cov: CovarianceState,
}

impl EstimatorState {
    pub fn new(k: usize) -> Self {
        Self { x_hat: RVec::zeros(k), cov: CovarianceState::zeros(k) }
    }
}

/// `x_hat' = A x_hat + gamma A K (y^a - F^a x_hat) + B u_prev`, using the
/// covariance currently held in `est`. The covariance itself is advanced
/// separately by [`sigma_step`].
pub fn estimate_step(
    est: &EstimatorState,
    y: &CVec,
    eff: &EffectiveChannel,
    gamma: u8,
    a: &RMat,
    b: &RMat,
    u_prev: &RVec,
) -> Result<RVec> {
    let mut pred = a * &est.x_hat + b * u_prev;
    if gamma == 0 || eff.is_zero() {
        return Ok(pred);
    }
    let nc = eff.ftilde.nrows();
    if y.len() != nc {
        return Err(Error::Dimension(format!("y has {} entries, expected {nc}", y.len())));
    }
    let fa = eff.augmented();
    // K = Sigma F^aH (F^a Sigma F^aH + I)^-1, or the equivalent
    // (2 Re{F~^H F~} + Sigma^-1)^-1 F^aH, which stays well conditioned for a
    // strong channel
    let gain = if est.cov.is_near_singular() {
        let sc = to_complex(est.cov.sigma());
        let s = &fa * &sc * fa.adjoint() + CMat::identity(2 * nc, 2 * nc);
        let inv =
            s.try_inverse().ok_or_else(|| Error::Numerical("augmented innovation covariance is singular".into()))?;
        &sc * fa.adjoint() * inv
    } else {
        to_complex(&posterior_gram(est.cov.sigma(), eff)?) * fa.adjoint()
    };

    let mut ya = CVec::zeros(2 * nc);
    ya.rows_mut(0, nc).copy_from(y);
    ya.rows_mut(nc, nc).copy_from(&y.map(|z| z.conj()));
    let innovation = ya - &fa * est.x_hat.map(|v| Complex::new(v, 0.0));
    let corr = gain * innovation;

    let scale = corr.iter().map(|z| z.re.abs()).fold(1.0, f64::max);
    let imag = corr.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if imag > IMAG_TOLERANCE * scale {
        return Err(Error::Numerical(format!("estimator update: imaginary residue {imag:.3e}")));
    }
    pred += a * corr.map(|z| z.re);
    Ok(pred)
}

/// `||x - x_hat||^2`.
pub fn mse_sample(x: &RVec, x_hat: &RVec) -> f64 {
    (x - x_hat).norm_squared()
}
