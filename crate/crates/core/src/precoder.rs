//! Drift-minimizing event-driven water-filling precoder and the five
//! reference precoders it is compared against.
//!
//! The state covariance `Sigma = S Lambda S^T` and the channel
//! `H = V Pi U^H` are both diagonalized, which reduces the drift
//! minimization to a scalar water-filling over `K` streams. Stream `i`
//! pairs the `i`-th largest channel singular value with the `i`-th largest
//! covariance eigenvalue.

use std::fmt;
use std::io::Write;

use nalgebra::Complex;

use crate::channel::{ChannelDraw, DEGENERATE_SV};
use crate::energy::budget_energy;
use crate::error::{Error, Result};
use crate::estimator::{posterior_realified, CovarianceState, EffectiveChannel};
use crate::numerics::{bisect_bracket, CMat, RMat};

/// Strict-positivity tolerance of the dormant test.
pub const DORMANT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dormant,
    Active,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dormant => "dormant",
            Mode::Active => "active",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PrecoderDecision {
    pub f: CMat,
    pub mode: Mode,
    pub beta: f64,
    /// Per-stream allocations: `Y*_ii` for the proposed precoder, powers
    /// `p_i` for the baselines.
    pub allocations: Vec<f64>,
    /// `M^2 Tr(F^H F) tau`.
    pub energy_used: f64,
}

impl PrecoderDecision {
    fn dormant(ns: usize, k: usize) -> Self {
        Self { f: CMat::zeros(ns, k), mode: Mode::Dormant, beta: 0.0, allocations: vec![0.0; k], energy_used: 0.0 }
    }
}

/// Everything the per-slot precoding decision depends on.
#[derive(Debug, Clone)]
pub struct DriftContext {
    pub sigma: RMat,
    pub s: RMat,
    /// Eigenvalues of `Sigma`, descending.
    pub lambda: Vec<f64>,
    pub h: CMat,
    pub u_k: CMat,
    /// Leading `K` singular values of `H`, descending.
    pub pi: Vec<f64>,
    pub e: f64,
    pub theta: f64,
    pub tau: f64,
    pub m: f64,
    pub l: f64,
    /// `||A A^T||`.
    pub norm_aat: f64,
}

impl DriftContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cov: &CovarianceState,
        draw: &ChannelDraw,
        e: f64,
        theta: f64,
        tau: f64,
        m: f64,
        l: f64,
        norm_aat: f64,
    ) -> Result<Self> {
        if draw.k() != cov.dim() {
            return Err(Error::Dimension(format!("{} streams for a {}-dimensional state", draw.k(), cov.dim())));
        }
        Ok(Self {
            sigma: cov.sigma().clone(),
            s: cov.eig().s.clone(),
            lambda: cov.eig().lambda.clone(),
            h: draw.h.clone(),
            u_k: draw.u_k(),
            pi: draw.pi_k.clone(),
            e,
            theta,
            tau,
            m,
            l,
            norm_aat,
        })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }
    pub fn ns(&self) -> usize {
        self.u_k.nrows()
    }

    fn validate(&self) -> Result<()> {
        if !(self.e >= 0.0) {
            return Err(Error::InputDomain(format!("E = {} must be non-negative", self.e)));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::InputDomain(format!("L = {} must be positive", self.l)));
        }
        if !(self.tau > 0.0 && self.m > 0.0) {
            return Err(Error::InputDomain(format!("tau = {}, M = {} must be positive", self.tau, self.m)));
        }
        Ok(())
    }

    fn usable(&self, i: usize) -> bool {
        self.pi[i] >= DEGENERATE_SV && self.lambda[i] > 0.0
    }

    /// `[theta - E]^+`.
    fn headroom(&self) -> f64 {
        (self.theta - self.e).max(0.0)
    }

    /// Energy `L^2 tau sum y_i / pi_i^2` of a diagonal allocation.
    pub fn allocation_energy(&self, y: &[f64]) -> f64 {
        let s: f64 = (0..self.k()).filter(|&i| y[i] > 0.0).map(|i| y[i] / (self.pi[i] * self.pi[i])).sum();
        self.l * self.l * self.tau * s
    }

    /// `F = (L/M) U_K diag(sqrt(y_i) / pi_i) S^T`.
    pub fn assemble(&self, y: &[f64]) -> CMat {
        let k = self.k();
        let mut d = RMat::zeros(k, k);
        for i in 0..k {
            if y[i] > 0.0 {
                d[(i, i)] = y[i].sqrt() / self.pi[i];
            }
        }
        let inner = (d * self.s.transpose()).map(|v| Complex::new(v * self.l / self.m, 0.0));
        &self.u_k * inner
    }

    /// Closed-form allocation for a given multiplier `beta`.
    pub fn allocation(&self, beta: f64) -> Vec<f64> {
        let denom = self.headroom() + beta;
        (0..self.k())
            .map(|i| {
                if !self.usable(i) {
                    return 0.0;
                }
                let level = (self.pi[i] / self.l) * (self.norm_aat / (denom * self.tau)).sqrt();
                0.5 * (level - 1.0 / self.lambda[i]).max(0.0)
            })
            .collect()
    }

    /// `theta - (||AA^T|| lambda_i^2 pi_i^2 / (tau L^2) + E)` for every stream.
    pub fn dormant_thresholds(&self) -> Vec<f64> {
        (0..self.k())
            .map(|i| {
                let lp = self.lambda[i] * self.pi[i];
                self.theta - (self.norm_aat * lp * lp / (self.tau * self.l * self.l) + self.e)
            })
            .collect()
    }

    pub fn is_dormant(&self) -> bool {
        self.dormant_thresholds().iter().all(|&t| t > DORMANT_TOL)
    }
}

/// Drift-minimizing precoder.
pub fn solve_drift_optimal(ctx: &DriftContext) -> Result<PrecoderDecision> {
    ctx.validate()?;
    let (ns, k) = (ctx.ns(), ctx.k());
    if ctx.is_dormant() || ctx.e == 0.0 {
        return Ok(PrecoderDecision::dormant(ns, k));
    }

    let unconstrained = if ctx.headroom() > 0.0 { ctx.allocation_energy(&ctx.allocation(0.0)) } else { f64::INFINITY };
    let (beta, y) = if unconstrained < ctx.e { (0.0, ctx.allocation(0.0)) } else { binding_allocation(ctx)? };
    let f = ctx.assemble(&y);
    let mode = if y.iter().any(|&v| v > 0.0) { Mode::Active } else { Mode::Dormant };
    Ok(PrecoderDecision { energy_used: budget_energy(&f, ctx.m, ctx.tau), f, mode, beta, allocations: y })
}

/// Multiplier that makes the allocation spend exactly `E`.
///
/// Bisection locates the active set; on that set the energy is affine in
/// `1/sqrt([theta - E]^+ + beta)`, which is then solved exactly.
fn binding_allocation(ctx: &DriftContext) -> Result<(f64, Vec<f64>)> {
    let target = ctx.e;
    let energy = |beta: f64| ctx.allocation_energy(&ctx.allocation(beta)) - target;
    let mut hi = ctx.theta.max(1.0);
    while energy(hi) >= 0.0 {
        hi *= 4.0;
        if !hi.is_finite() {
            return Err(Error::Numerical("no multiplier brings the precoder energy below E".into()));
        }
    }
    let (lo, hi) = bisect_bracket(energy, 0.0, hi, 1e-13)?;

    let active: Vec<usize> = {
        let y = ctx.allocation(0.5 * (lo + hi));
        (0..ctx.k()).filter(|&i| y[i] > 0.0).collect()
    };
    let (beta, y) = if active.is_empty() {
        (hi, ctx.allocation(hi))
    } else {
        let coef = ctx.l * ctx.l * ctx.tau / 2.0;
        let mut slope = 0.0;
        let mut offset = 0.0;
        for &i in &active {
            let p2 = ctx.pi[i] * ctx.pi[i];
            slope += (ctx.pi[i] / ctx.l) * (ctx.norm_aat / ctx.tau).sqrt() / p2;
            offset += 1.0 / (ctx.lambda[i] * p2);
        }
        // coef * (slope / r - offset) = E with r = sqrt(headroom + beta)
        let r = slope / (target / coef + offset);
        let beta = r * r - ctx.headroom();
        let y = ctx.allocation(beta);
        let consistent = beta >= 0.0 && (0..ctx.k()).all(|i| (y[i] > 0.0) == active.contains(&i));
        if consistent && ctx.allocation_energy(&y) <= target * (1.0 + 1e-12) {
            (beta, y)
        } else {
            (hi, ctx.allocation(hi))
        }
    };
    Ok((beta, y))
}

/// Value of the diagonalized drift problem at a diagonal allocation:
/// `L^2 tau (theta - E) sum y_i / pi_i^2 + (||AA^T|| / 2) sum 1 / (2 y_i + 1/lambda_i)`.
pub fn p2_objective(ctx: &DriftContext, y: &[f64]) -> f64 {
    let k = ctx.k();
    let energy_term = ctx.allocation_energy(y) * (ctx.theta - ctx.e);
    let est_term: f64 =
        (0..k).map(|i| if ctx.lambda[i] > 0.0 { 1.0 / (2.0 * y[i] + 1.0 / ctx.lambda[i]) } else { 0.0 }).sum();
    energy_term + 0.5 * ctx.norm_aat * est_term
}

/// Precoder-dependent part of the drift bound evaluated directly from `F`:
/// `M^2 Tr(F^H F) tau (theta - E) + (||AA^T|| / 2) Tr((2 Re{F~^H F~} + Sigma^-1)^-1)`
/// with `F~ = H F M / L`.
pub fn problem1_objective(ctx: &DriftContext, f: &CMat) -> Result<f64> {
    let eff = EffectiveChannel::new(&ctx.h, f, ctx.m / ctx.l);
    let post = posterior_realified(&ctx.sigma, &eff)?;
    Ok(budget_energy(f, ctx.m, ctx.tau) * (ctx.theta - ctx.e) + 0.5 * ctx.norm_aat * post.trace())
}

/// Largest violation of the optimality conditions of the diagonalized problem.
///
/// Stationarity residuals are scaled by the larger of the two terms they
/// balance; slackness is scaled by `max(1, E)`.
#[allow(clippy::needless_range_loop)]
pub fn kkt_residual(ctx: &DriftContext, d: &PrecoderDecision) -> f64 {
    let y = &d.allocations;
    let energy = ctx.allocation_energy(y);
    let scale = ctx.e.max(1.0);
    let mut worst: f64 = 0.0;
    worst = worst.max((energy - ctx.e).max(0.0) / scale);
    worst = worst.max((-d.beta).max(0.0));
    worst = worst.max((d.beta * (energy - ctx.e)).abs() / scale);
    worst = worst.max(y.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max));
    if ctx.e == 0.0 {
        return worst;
    }
    let mult = ctx.theta - ctx.e + d.beta;
    for i in 0..ctx.k() {
        if ctx.pi[i] < DEGENERATE_SV {
            continue;
        }
        let cost = mult * ctx.tau * ctx.l * ctx.l / (ctx.pi[i] * ctx.pi[i]);
        let gain = if ctx.lambda[i] > 0.0 {
            let den = 2.0 * y[i] + 1.0 / ctx.lambda[i];
            ctx.norm_aat / (den * den)
        } else {
            0.0
        };
        let grad = cost - gain;
        let s = cost.abs().max(gain).max(f64::MIN_POSITIVE);
        let r = if y[i] > 0.0 { grad.abs() } else { (-grad).max(0.0) };
        worst = worst.max(r / s);
    }
    worst
}

/// Shape of a reference water-filling profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// `p_i = [gamma - 1/pi_i]^+`.
    Capacity,
    /// `p_i = [gamma / sqrt(pi_i) - 1/pi_i]^+`.
    Mmse,
}

/// Per-stream powers summing to `budget`. Both profiles activate streams in
/// decreasing order of `pi`, so the active set is a prefix and the water
/// level has a closed form on it.
pub fn water_fill(pi: &[f64], budget: f64, profile: Profile) -> Vec<f64> {
    let k = pi.len();
    let mut p = vec![0.0; k];
    if !(budget > 0.0) {
        return p;
    }
    let usable = pi.iter().take_while(|&&v| v >= DEGENERATE_SV).count();
    for n in (1..=usable).rev() {
        let inv: f64 = pi[..n].iter().map(|v| 1.0 / v).sum();
        let (level, floor_n) = match profile {
            Profile::Capacity => ((budget + inv) / n as f64, 1.0 / pi[n - 1]),
            Profile::Mmse => {
                let w: f64 = pi[..n].iter().map(|v| 1.0 / v.sqrt()).sum();
                ((budget + inv) / w, 1.0 / pi[n - 1].sqrt())
            }
        };
        if level > floor_n {
            for i in 0..n {
                p[i] = match profile {
                    Profile::Capacity => level - 1.0 / pi[i],
                    Profile::Mmse => level / pi[i].sqrt() - 1.0 / pi[i],
                }
                .max(0.0);
            }
            return p;
        }
    }
    p
}

/// `F = U_K diag(sqrt(p_i))` with `sum p_i = budget_energy / (M^2 tau)`.
pub fn baseline_water_filling(ctx: &DriftContext, budget_energy_j: f64, profile: Profile) -> Result<PrecoderDecision> {
    ctx.validate()?;
    let (ns, k) = (ctx.ns(), ctx.k());
    let budget = budget_energy_j.min(ctx.e) / (ctx.m * ctx.m * ctx.tau);
    let p = water_fill(&ctx.pi, budget, profile);
    if p.iter().all(|&v| v == 0.0) {
        return Ok(PrecoderDecision::dormant(ns, k));
    }
    let mut f = CMat::zeros(ns, k);
    for i in 0..k {
        let amp = Complex::new(p[i].sqrt(), 0.0);
        for r in 0..ns {
            f[(r, i)] = ctx.u_k[(r, i)] * amp;
        }
    }
    // normalize away round-off so the budget is never exceeded
    let mut energy_used = budget_energy(&f, ctx.m, ctx.tau);
    let cap = budget_energy_j.min(ctx.e);
    if energy_used > cap && energy_used > 0.0 {
        f *= Complex::new((cap / energy_used).sqrt(), 0.0);
        energy_used = budget_energy(&f, ctx.m, ctx.tau);
    }
    Ok(PrecoderDecision { f, mode: Mode::Active, beta: 0.0, allocations: p, energy_used })
}

/// Baseline 1: capacity water-filling on the whole battery.
pub fn baseline_capacity_wf(ctx: &DriftContext) -> Result<PrecoderDecision> {
    baseline_water_filling(ctx, ctx.e, Profile::Capacity)
}

/// Baseline 2: Baseline 1 on slots that are multiples of `period`, silent otherwise.
pub fn baseline_periodic_wf(ctx: &DriftContext, slot: usize, period: usize) -> Result<PrecoderDecision> {
    if period == 0 {
        return Err(Error::InputDomain("period must be at least one slot".into()));
    }
    if slot.is_multiple_of(period) {
        baseline_capacity_wf(ctx)
    } else {
        ctx.validate()?;
        Ok(PrecoderDecision::dormant(ctx.ns(), ctx.k()))
    }
}

/// Baseline 3: MMSE water-filling on the whole battery.
pub fn baseline_mmse_wf(ctx: &DriftContext) -> Result<PrecoderDecision> {
    baseline_water_filling(ctx, ctx.e, Profile::Mmse)
}

/// Baselines 4 and 5: nominal budget `E[alpha]`, capped by the stored energy.
pub fn baseline_constant_power(ctx: &DriftContext, mean_alpha: f64, profile: Profile) -> Result<PrecoderDecision> {
    baseline_water_filling(ctx, mean_alpha, profile)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Proposed,
    Capacity,
    Periodic {
        period: usize,
    },
    Mmse,
    ConstantCapacity {
        mean_alpha: f64,
    },
    ConstantMmse {
        mean_alpha: f64,
    },
    /// Never transmits.
    Silent,
}

impl Policy {
    pub fn decide(&self, ctx: &DriftContext, slot: usize) -> Result<PrecoderDecision> {
        match *self {
            Policy::Proposed => solve_drift_optimal(ctx),
            Policy::Capacity => baseline_capacity_wf(ctx),
            Policy::Periodic { period } => baseline_periodic_wf(ctx, slot, period),
            Policy::Mmse => baseline_mmse_wf(ctx),
            Policy::ConstantCapacity { mean_alpha } => baseline_constant_power(ctx, mean_alpha, Profile::Capacity),
            Policy::ConstantMmse { mean_alpha } => baseline_constant_power(ctx, mean_alpha, Profile::Mmse),
            Policy::Silent => {
                ctx.validate()?;
                Ok(PrecoderDecision::dormant(ctx.ns(), ctx.k()))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Proposed => "proposed",
            Policy::Capacity => "baseline1",
            Policy::Periodic { .. } => "baseline2",
            Policy::Mmse => "baseline3",
            Policy::ConstantCapacity { .. } => "baseline4",
            Policy::ConstantMmse { .. } => "baseline5",
            Policy::Silent => "silent",
        }
    }

    /// Parses a policy name; `period` and `mean_alpha` fill the parameters of
    /// the baselines that need them.
    pub fn from_name(name: &str, period: usize, mean_alpha: f64) -> Option<Self> {
        Some(match name {
            "proposed" => Policy::Proposed,
            "baseline1" => Policy::Capacity,
            "baseline2" => Policy::Periodic { period },
            "baseline3" => Policy::Mmse,
            "baseline4" => Policy::ConstantCapacity { mean_alpha },
            "baseline5" => Policy::ConstantMmse { mean_alpha },
            "silent" => Policy::Silent,
            _ => return None,
        })
    }
}

pub fn write_decision_header<W: Write>(mut out: W, k: usize) -> Result<()> {
    write!(out, "slot,mode,beta")?;
    for i in 1..=k {
        write!(out, ",alloc_{i}")?;
    }
    writeln!(out, ",energy_used")?;
    Ok(())
}

pub fn write_decision_row<W: Write>(mut out: W, slot: usize, d: &PrecoderDecision) -> Result<()> {
    write!(out, "{slot},{},{:.12e}", d.mode, d.beta)?;
    for a in &d.allocations {
        write!(out, ",{a:.12e}")?;
    }
    writeln!(out, ",{:.12e}", d.energy_used)?;
    Ok(())
}
