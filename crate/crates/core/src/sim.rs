//! Per-slot closed-loop state machine and Monte Carlo harness.

use std::io::Write;

use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::channel::{receive, sample_channel, ChannelDraw};
use crate::energy::{budget_energy, ArrivalModel, EnergyQueue, FEASIBILITY_SLACK};
use crate::error::{Error, Result};
use crate::estimator::{estimate_step, mse_sample, sigma_step, CovarianceState, EffectiveChannel, EstimatorState};
use crate::limiter::{clip, LimiterParams};
use crate::numerics::{spectral_norm, sqrt_psd, CMat, RMat, RVec};
use crate::plant::PlantModel;
use crate::precoder::{solve_drift_optimal, DriftContext, Mode, Policy};

pub const DEFAULT_DIVERGENCE_GUARD: f64 = 1e12;

/// Normal quantile used for every reported confidence interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub model: PlantModel,
    pub limiter: LimiterParams,
    pub nc: usize,
    pub ns: usize,
    pub arrival: ArrivalModel,
    pub theta: f64,
    /// Initial battery level; `None` means half of `theta`.
    pub e0: Option<f64>,
    pub tau: f64,
    pub divergence_guard: f64,
}

impl SimConfig {
    pub fn k(&self) -> usize {
        self.model.state_dim()
    }

    pub fn initial_energy(&self) -> f64 {
        self.e0.unwrap_or(self.theta / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k > self.nc.min(self.ns) {
            return Err(Error::Dimension(format!("K = {k} exceeds min(Ns = {}, Nc = {})", self.ns, self.nc)));
        }
        self.arrival.validate()?;
        EnergyQueue::new(self.initial_energy(), self.theta, self.tau)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotTrace {
    pub n: usize,
    pub e_before: f64,
    pub l: f64,
    pub mode: Mode,
    pub gamma: u8,
    /// Energy actually drawn, `||F q||^2 tau`.
    pub energy_used: f64,
    /// Worst-case energy `M^2 Tr(F^H F) tau` checked against the battery.
    pub energy_budget: f64,
    pub alpha: f64,
    pub tr_sigma: f64,
    pub sq_error: f64,
    pub x_norm_sq: f64,
}

impl SlotTrace {
    pub const CSV_HEADER: &'static str =
        "slot,energy_before,dynamic_range,mode,gamma,energy_used,energy_budget,alpha,trace_sigma,sq_error,state_norm_sq";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.n,
            self.e_before,
            self.l,
            self.mode,
            self.gamma,
            self.energy_used,
            self.energy_budget,
            self.alpha,
            self.tr_sigma,
            self.sq_error,
            self.x_norm_sq
        )
    }
}

/// Mutable state of one simulated path.
#[derive(Debug, Clone)]
pub struct PathState {
    pub n: usize,
    pub x: RVec,
    pub est: EstimatorState,
    pub queue: EnergyQueue,
}

impl PathState {
    pub fn initial(cfg: &SimConfig) -> Result<Self> {
        let k = cfg.k();
        Ok(Self {
            n: 0,
            x: RVec::zeros(k),
            est: EstimatorState::new(k),
            queue: EnergyQueue::new(cfg.initial_energy(), cfg.theta, cfg.tau)?,
        })
    }
}

/// Quantities fixed for the whole run.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    w_sqrt: RMat,
    norm_aat: f64,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let w_sqrt = sqrt_psd(cfg.model.w())?;
        let a = cfg.model.a();
        let norm_aat = spectral_norm(&(a * a.transpose()));
        Ok(Self { cfg, w_sqrt, norm_aat })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn norm_aat(&self) -> f64 {
        self.norm_aat
    }

    pub fn drift_context(&self, state: &PathState, draw: &ChannelDraw) -> Result<DriftContext> {
        let cfg = &self.cfg;
        let l = cfg.limiter.dynamic_range(state.est.cov.sigma());
        DriftContext::new(
            &state.est.cov,
            draw,
            state.queue.level(),
            cfg.theta,
            cfg.tau,
            cfg.limiter.m,
            l,
            self.norm_aat,
        )
    }

    /// Advances one slot: channel draw, precoding, limiting, reception,
    /// estimation, plant update and the battery update, in that order.
    pub fn run_slot<R: Rng + ?Sized>(&self, state: &mut PathState, policy: &Policy, rng: &mut R) -> Result<SlotTrace> {
        let cfg = &self.cfg;
        let model = &cfg.model;
        let k = cfg.k();
        let n = state.n;

        let draw = sample_channel(rng, cfg.nc, cfg.ns, k)?;
        let ctx = self.drift_context(state, &draw)?;
        let l = ctx.l;
        let decision = policy.decide(&ctx, n)?;
        let e_before = state.queue.level();
        if !state.queue.check_feasible(&decision.f, cfg.limiter.m) {
            return Err(Error::Infeasible(format!(
                "slot {n}: {} needs {:.6e} J with {:.6e} J stored",
                policy.name(),
                decision.energy_used,
                e_before
            )));
        }

        let lim = clip(&state.x, l, cfg.limiter.m)?;
        let y = receive(&draw, &decision.f, &lim.q, rng)?;
        let eff = EffectiveChannel::new(&draw.h, &decision.f, lim.g);

        let tr_sigma = state.est.cov.trace();
        let sq_error = mse_sample(&state.x, &state.est.x_hat);
        let x_norm_sq = state.x.norm_squared();

        // the control uses the prediction of x(n) available before this
        // slot's measurement is folded in
        let u = model.control(&state.est.x_hat);
        let x_hat_next = estimate_step(&state.est, &y, &eff, lim.gamma(), model.a(), model.b(), &u)?;
        let cov_next = sigma_step(&state.est.cov, &eff, lim.gamma(), model.a(), model.w())?;
        state.est = EstimatorState { x_hat: x_hat_next, cov: cov_next };

        let z = RVec::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = &self.w_sqrt * z;
        state.x = model.step(&state.x, &u, &w)?;

        let fq = &decision.f * lim.q.map(|v| Complex::new(v, 0.0));
        let energy_used = fq.norm_squared() * cfg.tau;
        let alpha = cfg.arrival.sample(rng);
        state.queue.spend_and_harvest(energy_used, alpha)?;
        state.n += 1;

        Ok(SlotTrace {
            n,
            e_before,
            l,
            mode: decision.mode,
            gamma: lim.gamma(),
            energy_used,
            energy_budget: budget_energy(&decision.f, cfg.limiter.m, cfg.tau),
            alpha,
            tr_sigma,
            sq_error,
            x_norm_sq,
        })
    }

    /// Runs one path on its own RNG stream `(seed, path)`.
    pub fn run_path(
        &self,
        policy: &Policy,
        path: u64,
        n_slots: usize,
        seed: u64,
        keep_trace: bool,
    ) -> Result<PathResult> {
        let mut rng = path_rng(seed, path);
        let mut state = PathState::initial(&self.cfg)?;
        let mut acc = PathAccumulator::new(self.cfg.k(), state.queue.level(), keep_trace);
        for _ in 0..n_slots {
            let t = self.run_slot(&mut state, policy, &mut rng)?;
            acc.push(t, state.queue.level(), self.cfg.theta);
            if state.x.norm_squared() > self.cfg.divergence_guard || !state.x.iter().all(|v| v.is_finite()) {
                acc.diverged = true;
                break;
            }
        }
        Ok(acc.finish(path, state.queue.overspend_events()))
    }
}

pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Mean and 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub ci: f64,
    pub n: usize,
}

impl Stat {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, ci: f64::NAN, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, ci: 0.0, n };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Self { mean, ci: Z95 * (var / n as f64).sqrt(), n }
    }

    pub fn lo(&self) -> f64 {
        self.mean - self.ci
    }
    pub fn hi(&self) -> f64 {
        self.mean + self.ci
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub path: u64,
    pub slots: usize,
    pub diverged: bool,
    /// Time average of `||x - x_hat||^2 / K`.
    pub normalized_mse: f64,
    pub mean_sq_error: f64,
    pub mean_tr_sigma: f64,
    pub mean_state_sq: f64,
    pub saturation_rate: f64,
    pub saturated_slots: usize,
    pub duty_cycle: f64,
    /// Mean squared error on slots that follow an active slot, with count.
    pub after_active: (f64, usize),
    pub after_dormant: (f64, usize),
    pub infeasible_slots: usize,
    pub queue_violations: usize,
    pub overspend_events: usize,
    pub total_spent: f64,
    pub total_harvest: f64,
    pub initial_energy: f64,
    pub traces: Option<Vec<SlotTrace>>,
}

struct PathAccumulator {
    k: usize,
    slots: usize,
    sq_error: f64,
    tr_sigma: f64,
    state_sq: f64,
    saturated: usize,
    active: usize,
    prev_mode: Option<Mode>,
    after_active: (f64, usize),
    after_dormant: (f64, usize),
    infeasible: usize,
    queue_violations: usize,
    spent: f64,
    harvest: f64,
    e0: f64,
    diverged: bool,
    traces: Option<Vec<SlotTrace>>,
}

impl PathAccumulator {
    fn new(k: usize, e0: f64, keep_trace: bool) -> Self {
        Self {
            k,
            slots: 0,
            sq_error: 0.0,
            tr_sigma: 0.0,
            state_sq: 0.0,
            saturated: 0,
            active: 0,
            prev_mode: None,
            after_active: (0.0, 0),
            after_dormant: (0.0, 0),
            infeasible: 0,
            queue_violations: 0,
            spent: 0.0,
            harvest: 0.0,
            e0,
            diverged: false,
            traces: keep_trace.then(Vec::new),
        }
    }

    fn push(&mut self, t: SlotTrace, e_after: f64, theta: f64) {
        self.slots += 1;
        self.sq_error += t.sq_error;
        self.tr_sigma += t.tr_sigma;
        self.state_sq += t.x_norm_sq;
        self.saturated += usize::from(t.gamma == 0);
        self.active += usize::from(t.mode == Mode::Active);
        match self.prev_mode {
            Some(Mode::Active) => {
                self.after_active.0 += t.sq_error;
                self.after_active.1 += 1;
            }
            Some(Mode::Dormant) => {
                self.after_dormant.0 += t.sq_error;
                self.after_dormant.1 += 1;
            }
            None => {}
        }
        self.prev_mode = Some(t.mode);
        self.infeasible += usize::from(t.energy_budget > t.e_before + FEASIBILITY_SLACK);
        self.queue_violations += usize::from(!(0.0..=theta).contains(&e_after));
        self.spent += t.energy_used;
        self.harvest += t.alpha;
        if let Some(tr) = self.traces.as_mut() {
            tr.push(t);
        }
    }

    fn finish(self, path: u64, overspend_events: usize) -> PathResult {
        let s = self.slots.max(1) as f64;
        let cond = |(sum, n): (f64, usize)| (if n > 0 { sum / n as f64 } else { f64::NAN }, n);
        PathResult {
            path,
            slots: self.slots,
            diverged: self.diverged,
            normalized_mse: self.sq_error / s / self.k as f64,
            mean_sq_error: self.sq_error / s,
            mean_tr_sigma: self.tr_sigma / s,
            mean_state_sq: self.state_sq / s,
            saturation_rate: self.saturated as f64 / s,
            saturated_slots: self.saturated,
            duty_cycle: self.active as f64 / s,
            after_active: cond(self.after_active),
            after_dormant: cond(self.after_dormant),
            infeasible_slots: self.infeasible,
            queue_violations: self.queue_violations,
            overspend_events,
            total_spent: self.spent,
            total_harvest: self.harvest,
            initial_energy: self.e0,
            traces: self.traces,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventReset {
    pub after_active: Stat,
    pub after_dormant: Stat,
    /// Per-path `after_dormant - after_active`.
    pub difference: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub policy: String,
    pub n_paths: usize,
    pub n_slots: usize,
    pub seed: u64,
    pub normalized_mse: Stat,
    pub mean_tr_sigma: Stat,
    pub saturation_rate: Stat,
    pub duty_cycle: Stat,
    pub divergent_paths: usize,
    pub total_slots: usize,
    pub saturated_slots: usize,
    pub infeasible_slots: usize,
    pub queue_violations: usize,
    pub event_reset: EventReset,
    pub paths: Vec<PathResult>,
}

impl RunResult {
    pub fn from_paths(policy: &Policy, n_slots: usize, seed: u64, paths: Vec<PathResult>) -> Self {
        let col = |f: fn(&PathResult) -> f64| Stat::from_samples(&paths.iter().map(f).collect::<Vec<_>>());
        let both: Vec<&PathResult> = paths.iter().filter(|p| p.after_active.1 > 0 && p.after_dormant.1 > 0).collect();
        let event_reset = EventReset {
            after_active: Stat::from_samples(&both.iter().map(|p| p.after_active.0).collect::<Vec<_>>()),
            after_dormant: Stat::from_samples(&both.iter().map(|p| p.after_dormant.0).collect::<Vec<_>>()),
            difference: Stat::from_samples(
                &both.iter().map(|p| p.after_dormant.0 - p.after_active.0).collect::<Vec<_>>(),
            ),
        };
        Self {
            policy: policy.name().to_string(),
            n_paths: paths.len(),
            n_slots,
            seed,
            normalized_mse: col(|p| p.normalized_mse),
            mean_tr_sigma: col(|p| p.mean_tr_sigma),
            saturation_rate: col(|p| p.saturation_rate),
            duty_cycle: col(|p| p.duty_cycle),
            divergent_paths: paths.iter().filter(|p| p.diverged).count(),
            total_slots: paths.iter().map(|p| p.slots).sum(),
            saturated_slots: paths.iter().map(|p| p.saturated_slots).sum(),
            infeasible_slots: paths.iter().map(|p| p.infeasible_slots).sum(),
            queue_violations: paths.iter().map(|p| p.queue_violations).sum(),
            event_reset,
            paths,
        }
    }

    pub fn divergent_fraction(&self) -> f64 {
        self.divergent_paths as f64 / self.n_paths.max(1) as f64
    }

    /// Saturated slots over all simulated slots.
    pub fn pooled_saturation_rate(&self) -> f64 {
        self.saturated_slots as f64 / self.total_slots.max(1) as f64
    }

    pub const CSV_HEADER: &'static str = "policy,paths,slots,normalized_mse,normalized_mse_ci95,mean_trace_sigma,\
mean_trace_sigma_ci95,saturation_rate,saturation_rate_ci95,duty_cycle,duty_cycle_ci95,divergent_paths";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.policy,
            self.n_paths,
            self.n_slots,
            self.normalized_mse.mean,
            self.normalized_mse.ci,
            self.mean_tr_sigma.mean,
            self.mean_tr_sigma.ci,
            self.saturation_rate.mean,
            self.saturation_rate.ci,
            self.duty_cycle.mean,
            self.duty_cycle.ci,
            self.divergent_paths
        )
    }
}

/// Runs `n_paths` independent paths in parallel. Results are collected in
/// path order, so the aggregates do not depend on scheduling.
pub fn run_monte_carlo(
    cfg: &SimConfig,
    policy: &Policy,
    n_paths: usize,
    n_slots: usize,
    seed: u64,
    keep_traces: bool,
) -> Result<RunResult> {
    let sim = Simulator::new(cfg.clone())?;
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| sim.run_path(policy, p, n_slots, seed, keep_traces))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunResult::from_paths(policy, n_slots, seed, paths))
}

pub fn write_trace_csv<W: Write>(mut out: W, traces: &[SlotTrace]) -> Result<()> {
    writeln!(out, "{}", SlotTrace::CSV_HEADER)?;
    for t in traces {
        writeln!(out, "{}", t.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Theta,
    MeanAlpha,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Theta => "theta",
            SweepAxis::MeanAlpha => "mean_alpha",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub result: RunResult,
}

impl SweepRow {
    pub fn csv_header() -> String {
        format!("axis,value,{}", RunResult::CSV_HEADER)
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.axis.name(), self.value, self.result.csv_row())
    }
}

/// Config with one axis moved. Sweeping the mean arrival keeps the arrival
/// family and rescales it; the constant-supply baselines follow the new mean.
pub fn with_axis(cfg: &SimConfig, policy: &Policy, axis: SweepAxis, value: f64) -> Result<(SimConfig, Policy)> {
    let mut c = cfg.clone();
    let mut p = *policy;
    match axis {
        SweepAxis::Theta => {
            c.theta = value;
            if let Some(e0) = c.e0 {
                c.e0 = Some(e0.min(value));
            }
        }
        SweepAxis::MeanAlpha => {
            c.arrival = match &cfg.arrival {
                ArrivalModel::Poisson { .. } => ArrivalModel::Poisson { mean: value },
                ArrivalModel::Deterministic { .. } => ArrivalModel::Deterministic { value },
                ArrivalModel::Empirical { values } => {
                    let m = cfg.arrival.mean();
                    if m <= 0.0 {
                        return Err(Error::InputDomain("cannot rescale an all-zero arrival list".into()));
                    }
                    ArrivalModel::Empirical { values: values.iter().map(|v| v * value / m).collect() }
                }
            };
            p = match p {
                Policy::ConstantCapacity { .. } => Policy::ConstantCapacity { mean_alpha: value },
                Policy::ConstantMmse { .. } => Policy::ConstantMmse { mean_alpha: value },
                other => other,
            };
        }
    }
    Ok((c, p))
}

/// One Monte Carlo run per `(policy, value)`, all on the same seed.
pub fn sweep(
    cfg: &SimConfig,
    policies: &[Policy],
    axis: SweepAxis,
    values: &[f64],
    n_paths: usize,
    n_slots: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if values.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InputDomain("sweep values must be ascending".into()));
    }
    let mut rows = Vec::with_capacity(policies.len() * values.len());
    for policy in policies {
        for &value in values {
            let (c, p) = with_axis(cfg, policy, axis, value)?;
            let result = run_monte_carlo(&c, &p, n_paths, n_slots, seed, false)?;
            rows.push(SweepRow { axis, value, result });
        }
    }
    Ok(rows)
}

/// Decoupled two-subsystem setup used for the activation-region scan.
#[derive(Debug, Clone)]
pub struct RegionConfig {
    pub model: PlantModel,
    pub limiter: LimiterParams,
    pub theta: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub e: f64,
    pub h2: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// `counts[i][j]`: active streams at `(h2[i], sigma2[j])`.
    pub counts: Vec<Vec<u8>>,
}

impl RegionMap {
    pub fn write_csv<W: Write>(&self, mut out: W, header: bool) -> Result<()> {
        if header {
            writeln!(out, "energy,h2,sigma2,active_streams")?;
        }
        for (i, h) in self.h2.iter().enumerate() {
            for (j, s) in self.sigma2.iter().enumerate() {
                writeln!(out, "{},{:.9e},{:.9e},{}", self.e, h, s, self.counts[i][j])?;
            }
        }
        Ok(())
    }
}

/// Active-stream count from the drift-minimizing precoder for
/// `H = diag(h1, h2)`, `Sigma = diag(sigma1, sigma2)` on a uniform grid
/// `h2 = h2_max j / grid`, `sigma2 = sigma2_max j / grid`, `j = 1..=grid`.
pub fn decision_region_scan(
    rc: &RegionConfig,
    e: f64,
    h1: f64,
    sigma1: f64,
    grid: usize,
    h2_max: f64,
    sigma2_max: f64,
) -> Result<RegionMap> {
    let a = rc.model.a();
    let norm_aat = spectral_norm(&(a * a.transpose()));
    let h2: Vec<f64> = (1..=grid).map(|j| h2_max * j as f64 / grid as f64).collect();
    let sigma2: Vec<f64> = (1..=grid).map(|j| sigma2_max * j as f64 / grid as f64).collect();
    let mut counts = vec![vec![0u8; grid]; grid];
    for (i, &hv) in h2.iter().enumerate() {
        let mut h = CMat::zeros(2, 2);
        h[(0, 0)] = Complex::new(h1, 0.0);
        h[(1, 1)] = Complex::new(hv, 0.0);
        let draw = ChannelDraw::from_matrix(h, 2)?;
        for (j, &sv) in sigma2.iter().enumerate() {
            let cov = CovarianceState::new(RMat::from_diagonal(&RVec::from_vec(vec![sigma1, sv])))?;
            let l = rc.limiter.dynamic_range(cov.sigma());
            let ctx = DriftContext::new(&cov, &draw, e, rc.theta, rc.tau, rc.limiter.m, l, norm_aat)?;
            let d = solve_drift_optimal(&ctx)?;
            counts[i][j] = d.allocations.iter().filter(|&&v| v > 0.0).count() as u8;
        }
    }
    Ok(RegionMap { e, h2, sigma2, counts })
}
