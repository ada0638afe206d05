//! Stability condition, design requirements, MSE bound and the one-slot
//! drift diagnostic.

use std::fmt::Write as _;

use crate::channel::PiTildeStats;
use crate::error::{Error, Result};
use crate::limiter::LimiterParams;
use crate::numerics::{spectral_norm, CMat};
use crate::plant::{instability_measure, PlantModel};
use crate::precoder::{problem1_objective, DriftContext};

/// `sqrt(2/eps) (1 + ||A - B Psi A|| Theta) ||B Psi|| ||A||`.
pub fn delta_constant(model: &PlantModel, params: &LimiterParams) -> f64 {
    let bpsi = spectral_norm(&(model.b() * model.psi()));
    (2.0 / params.eps).sqrt()
        * (1.0 + spectral_norm(model.closed_loop()) * params.theta)
        * bpsi
        * spectral_norm(model.a())
}

/// Plant-side constants shared by the stability condition and the MSE bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantConstants {
    pub k: usize,
    pub eps: f64,
    pub tau: f64,
    pub delta: f64,
    pub bpsi_norm: f64,
    pub m_a: f64,
    pub m_aat: f64,
    pub trace_w: f64,
}

impl PlantConstants {
    pub fn new(model: &PlantModel, params: &LimiterParams, tau: f64) -> Self {
        let a = model.a();
        Self {
            k: model.state_dim(),
            eps: params.eps,
            tau,
            delta: delta_constant(model, params),
            bpsi_norm: spectral_norm(&(model.b() * model.psi())),
            m_a: instability_measure(a),
            m_aat: instability_measure(&(a * a.transpose())),
            trace_w: model.w().trace(),
        }
    }

    /// `delta^2 K tau M(A) M(AA^T)`, the factor multiplying `E[1/pi~ | pi~ >= xi]`.
    fn drift_scale(&self) -> f64 {
        self.delta * self.delta * self.k as f64 * self.tau * self.m_a * self.m_aat
    }

    fn numerator(&self, pr: f64) -> f64 {
        1.0 - (self.eps + self.k as f64 * pr) * self.m_aat
    }

    /// Right-hand side of the stability condition at one threshold.
    pub fn rhs(&self, pr: f64, inv_mean: f64) -> f64 {
        self.numerator(pr) / (self.drift_scale() * inv_mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub satisfied: bool,
    /// `E[1/alpha] + 1/theta`.
    pub lhs: f64,
    pub rhs_max: f64,
    pub xi_star: f64,
    /// Spacing to the neighbouring grid points around `xi_star`.
    pub xi_resolution: f64,
    pub pr_star: f64,
    pub inv_mean_star: f64,
    pub margin: f64,
    pub constants: PlantConstants,
    pub e_inv_alpha: f64,
    pub theta: f64,
    pub eps_cap: f64,
    pub eps_ok: bool,
    pub theta_floor: f64,
    pub theta_ok: bool,
    pub arrival_floor: f64,
    pub arrival_ok: bool,
}

/// Evaluates the stability condition on `xi_grid` and the three design
/// requirements at the maximizer.
pub fn check_stability(
    constants: &PlantConstants,
    stats: &PiTildeStats,
    e_inv_alpha: f64,
    theta: f64,
    mean_alpha: f64,
    xi_grid: &[f64],
) -> Result<StabilityReport> {
    if stats.is_empty() || xi_grid.is_empty() {
        return Err(Error::EmptyStats);
    }
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for (j, &xi) in xi_grid.iter().enumerate() {
        let Some(inv_mean) = stats.conditional_inverse_mean(xi) else { continue };
        let pr = stats.cdf(xi);
        let r = constants.rhs(pr, inv_mean);
        if best.is_none_or(|(_, b, _, _)| r > b) {
            best = Some((j, r, pr, inv_mean));
        }
    }
    let (j, rhs_max, pr_star, inv_mean_star) = best.ok_or(Error::EmptyStats)?;
    let xi_star = xi_grid[j];
    let left = if j > 0 { xi_star - xi_grid[j - 1] } else { 0.0 };
    let right = if j + 1 < xi_grid.len() { xi_grid[j + 1] - xi_star } else { 0.0 };

    let lhs = e_inv_alpha + 1.0 / theta;
    let eps_cap = 1.0 / constants.m_aat - constants.k as f64 * pr_star;
    let theta_floor = if rhs_max > 0.0 { 1.0 / rhs_max } else { f64::INFINITY };
    let slack = rhs_max - 1.0 / theta;
    let arrival_floor = if slack > 0.0 { 1.0 / slack } else { f64::INFINITY };
    Ok(StabilityReport {
        satisfied: lhs < rhs_max,
        lhs,
        rhs_max,
        xi_star,
        xi_resolution: left.max(right),
        pr_star,
        inv_mean_star,
        margin: rhs_max - lhs,
        constants: *constants,
        e_inv_alpha,
        theta,
        eps_cap,
        eps_ok: constants.eps < eps_cap,
        theta_floor,
        theta_ok: theta > theta_floor,
        arrival_floor,
        arrival_ok: mean_alpha > arrival_floor,
    })
}

impl StabilityReport {
    pub fn to_text(&self) -> String {
        let c = &self.constants;
        let mut s = String::new();
        let _ = writeln!(s, "satisfied: {}", self.satisfied);
        let _ = writeln!(s, "lhs (E[1/alpha] + 1/theta): {:.6e}", self.lhs);
        let _ = writeln!(s, "rhs_max: {:.6e}", self.rhs_max);
        let _ = writeln!(s, "margin: {:.6e}", self.margin);
        let _ = writeln!(s, "xi_star: {:.6e} (+/- {:.3e})", self.xi_star, self.xi_resolution);
        let _ = writeln!(s, "pr_below_xi_star: {:.6e}", self.pr_star);
        let _ = writeln!(s, "inv_mean_above_xi_star: {:.6e}", self.inv_mean_star);
        let _ = writeln!(s, "delta: {:.6e}", c.delta);
        let _ = writeln!(s, "M(A): {:.6}", c.m_a);
        let _ = writeln!(s, "M(AA^T): {:.6}", c.m_aat);
        let _ = writeln!(s, "E[1/alpha | alpha > 0]: {:.6e}", self.e_inv_alpha);
        let _ = writeln!(s, "limiter eps: {} < cap {:.6e}: {}", c.eps, self.eps_cap, self.eps_ok);
        let _ = writeln!(s, "battery theta: {} > floor {:.6e}: {}", self.theta, self.theta_floor, self.theta_ok);
        let _ = writeln!(s, "arrival mean floor {:.6e}: {}", self.arrival_floor, self.arrival_ok);
        s
    }

    pub const CSV_HEADER: &'static str =
        "satisfied,lhs,rhs_max,margin,xi_star,pr_star,inv_mean_star,delta,m_a,m_aat,eps_cap,theta_floor,arrival_floor";

    pub fn csv_row(&self) -> String {
        let c = &self.constants;
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.satisfied,
            self.lhs,
            self.rhs_max,
            self.margin,
            self.xi_star,
            self.pr_star,
            self.inv_mean_star,
            c.delta,
            c.m_a,
            c.m_aat,
            self.eps_cap,
            self.theta_floor,
            self.arrival_floor
        )
    }
}

/// Reading of the drift factor in `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaConvention {
    /// `K delta^2 tau ...`.
    WithoutPeriod,
    /// `K T delta^2 tau ...` with the given `T`.
    WithPeriod(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseBoundReport {
    pub eta: f64,
    pub bound: f64,
}

/// `eta` and the MSE bound at `xi_star` of a stability report.
pub fn mse_bound(report: &StabilityReport, convention: EtaConvention) -> Result<MseBoundReport> {
    mse_bound_from(
        &report.constants,
        report.pr_star,
        report.inv_mean_star,
        report.e_inv_alpha,
        report.theta,
        convention,
    )
}

pub fn mse_bound_from(
    c: &PlantConstants,
    pr_star: f64,
    inv_mean_star: f64,
    e_inv_alpha: f64,
    theta: f64,
    convention: EtaConvention,
) -> Result<MseBoundReport> {
    let lhs = e_inv_alpha + 1.0 / theta;
    let period = match convention {
        EtaConvention::WithoutPeriod => 1.0,
        EtaConvention::WithPeriod(t) => t,
    };
    let eta = c.numerator(pr_star) - lhs * period * c.drift_scale() * inv_mean_star;
    if !(eta > 0.0) {
        return Err(Error::BoundUndefined(eta));
    }
    let k = c.k as f64;
    let gain =
        1.0 + k * c.tau * (c.delta * c.delta / (c.bpsi_norm * c.bpsi_norm)) * inv_mean_star * lhs * c.m_a * c.m_aat;
    Ok(MseBoundReport { eta, bound: gain * c.trace_w / eta + theta * theta / eta })
}

/// One-slot drift upper bound for precoder `f`:
/// `(||AA^T||/2)(eps Tr Sigma + Tr((2 Re{F~^H F~} + Sigma^-1)^-1)) + M^2 Tr(F^H F) tau (theta - E) - Tr(Sigma)/2`.
pub fn drift_bound(ctx: &DriftContext, f: &CMat, eps: f64) -> Result<f64> {
    let tr = ctx.sigma.trace();
    Ok(problem1_objective(ctx, f)? + 0.5 * ctx.norm_aat * eps * tr - 0.5 * tr)
}
