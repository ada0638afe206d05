//! Adaptive-range energy limiter.

use crate::error::{Error, Result};
use crate::numerics::{solve_stein, spectral_norm, RMat, RVec};
use crate::plant::PlantModel;

/// Which gain multiplies `sqrt(Tr Sigma - Tr W)` in the dynamic range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeCoefficient {
    /// `||B Psi A||`.
    ClosedLoop,
    /// `||B Psi||`, the value used by the decoupled two-state worked example.
    Feedback,
}

#[derive(Debug, Clone)]
pub struct LimiterParams {
    pub m: f64,
    pub eps: f64,
    pub theta: f64,
    pub coefficient: RangeCoefficient,
    // cached norms of the plant the params were built for
    closed_loop_norm: f64,
    gain_norm: f64,
    trace_w: f64,
}

impl LimiterParams {
    pub fn new(model: &PlantModel, m: f64, eps: f64, coefficient: RangeCoefficient) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InputDomain(format!("M = {m} must be positive")));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::InputDomain(format!("eps = {eps} must lie in (0, 1)")));
        }
        let theta = compute_theta(model)?;
        let bpsi = model.b() * model.psi();
        let gain_norm = match coefficient {
            RangeCoefficient::ClosedLoop => spectral_norm(&(&bpsi * model.a())),
            RangeCoefficient::Feedback => spectral_norm(&bpsi),
        };
        Ok(Self {
            m,
            eps,
            theta,
            coefficient,
            closed_loop_norm: spectral_norm(model.closed_loop()),
            gain_norm,
            trace_w: model.w().trace(),
        })
    }

    /// `(1/sqrt(eps)) (1 + ||A - B Psi A|| Theta)`.
    pub fn prefactor(&self) -> f64 {
        (1.0 + self.closed_loop_norm * self.theta) / self.eps.sqrt()
    }

    pub fn gain_norm(&self) -> f64 {
        self.gain_norm
    }

    /// Dynamic range `L` for a covariance with trace `trace_sigma`.
    ///
    /// The radicand is clamped at zero, which only matters before the
    /// recursion has added `W` once.
    pub fn dynamic_range_from_trace(&self, trace_sigma: f64) -> f64 {
        let excess = (trace_sigma - self.trace_w).max(0.0);
        self.prefactor() * (self.gain_norm * excess.sqrt() + self.trace_w.sqrt())
    }

    pub fn dynamic_range(&self, sigma: &RMat) -> f64 {
        self.dynamic_range_from_trace(sigma.trace())
    }
}

/// `Theta` with `T = I` and `Q` solving `F^T Q F - Q = -I` for the closed loop `F`.
pub fn compute_theta(model: &PlantModel) -> Result<f64> {
    theta_for(model.closed_loop())
}

pub fn theta_for(closed_loop: &RMat) -> Result<f64> {
    let k = closed_loop.nrows();
    let q = solve_stein(closed_loop, &RMat::identity(k, k))?;
    let ftq = spectral_norm(&(closed_loop.transpose() * &q));
    // mu_min(T) = 1 for T = I
    Ok(ftq + (ftq * ftq + spectral_norm(&q)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimiterOutput {
    pub q: RVec,
    pub g: f64,
    pub saturated: bool,
}

impl LimiterOutput {
    /// `gamma(n)`: 1 when the state passed through the linear region.
    pub fn gamma(&self) -> u8 {
        u8::from(!self.saturated)
    }
}

pub fn clip(x: &RVec, l: f64, m: f64) -> Result<LimiterOutput> {
    if !(l > 0.0) || !(m > 0.0) {
        return Err(Error::InputDomain(format!("clip needs L > 0 and M > 0, got L = {l}, M = {m}")));
    }
    let norm = x.norm();
    let saturated = norm > l;
    let g = if saturated { m / norm } else { m / l };
    Ok(LimiterOutput { q: x * g, g, saturated })
}
