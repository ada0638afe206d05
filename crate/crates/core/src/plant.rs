//! Linear stochastic plant `x(n+1) = A x(n) + B u(n) + w(n)` under the
//! certainty-equivalent law `u(n) = -Psi A x_hat(n)`.

use crate::error::{Error, Result};
use crate::numerics::{eig_sym, eigenvalues, max_abs, solve_dare, spectral_radius, RMat, RVec};

#[derive(Debug, Clone)]
pub struct PlantModel {
    a: RMat,
    b: RMat,
    w: RMat,
    psi: RMat,
    closed_loop: RMat,
}

impl PlantModel {
    /// Validates dimensions, `W` symmetric PSD and `A - B Psi A` Schur-stable.
    pub fn new(a: RMat, b: RMat, w: RMat, psi: RMat) -> Result<Self> {
        let k = a.nrows();
        if !a.is_square() {
            return Err(Error::Dimension(format!("A must be square, got {:?}", a.shape())));
        }
        if b.nrows() != k {
            return Err(Error::Dimension(format!("B has {} rows, expected {k}", b.nrows())));
        }
        let d = b.ncols();
        if psi.shape() != (d, k) {
            return Err(Error::Dimension(format!("Psi is {:?}, expected ({d}, {k})", psi.shape())));
        }
        if w.shape() != (k, k) {
            return Err(Error::Dimension(format!("W is {:?}, expected ({k}, {k})", w.shape())));
        }
        eig_sym(&w)?;
        let closed_loop = &a - &b * &psi * &a;
        let rho = spectral_radius(&closed_loop);
        if rho >= 1.0 {
            return Err(Error::NotSchurStable(rho));
        }
        Ok(Self { a, b, w, psi, closed_loop })
    }

    pub fn a(&self) -> &RMat {
        &self.a
    }
    pub fn b(&self) -> &RMat {
        &self.b
    }
    pub fn w(&self) -> &RMat {
        &self.w
    }
    pub fn psi(&self) -> &RMat {
        &self.psi
    }
    /// `A - B Psi A`.
    pub fn closed_loop(&self) -> &RMat {
        &self.closed_loop
    }
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &RVec, u: &RVec, w: &RVec) -> Result<RVec> {
        let k = self.state_dim();
        if x.len() != k || w.len() != k || u.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "step: x {}, u {}, w {} for K = {k}, D = {}",
                x.len(),
                u.len(),
                w.len(),
                self.input_dim()
            )));
        }
        Ok(&self.a * x + &self.b * u + w)
    }

    pub fn control(&self, x_hat: &RVec) -> RVec {
        -(&self.psi * (&self.a * x_hat))
    }
}

/// `prod_i max(1, |mu_i(M)|)` over the (complex) eigenvalues of `m`.
pub fn instability_measure(m: &RMat) -> f64 {
    eigenvalues(m).iter().map(|z| z.norm().max(1.0)).product()
}

/// Sign applied to `(B^T Z B + R)^-1 B^T Z` when forming `Psi`.
///
/// `AsWritten` keeps the leading minus of the published expression, which
/// together with `u = -Psi A x_hat` yields positive feedback; `Standard`
/// gives the usual LQR law `u = -(B^T Z B + R)^-1 B^T Z A x_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainSign {
    AsWritten,
    Standard,
}

/// Certainty-equivalent gain from the DARE solution, checked for closed-loop
/// stability.
pub fn design_gain_ce(a: &RMat, b: &RMat, p: &RMat, r: &RMat, sign: GainSign) -> Result<RMat> {
    if max_abs(b) == 0.0 {
        return Err(Error::Design("B = 0: the plant is not controllable".into()));
    }
    let z = solve_dare(a, b, p, r).map_err(|e| Error::Design(format!("DARE failed: {e}")))?;
    let bt = b.transpose();
    let inner = (&bt * &z * b + r).try_inverse().ok_or_else(|| Error::Design("B^T Z B + R is singular".into()))?;
    let base = inner * bt * z;
    let psi = match sign {
        GainSign::AsWritten => -base,
        GainSign::Standard => base,
    };
    let rho = spectral_radius(&(a - b * &psi * a));
    if rho >= 1.0 {
        return Err(Error::Design(format!("closed loop spectral radius {rho:.4} >= 1")));
    }
    Ok(psi)
}
