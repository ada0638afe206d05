//! Renewable-energy arrivals and the battery queue.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::numerics::CMat;

/// Absolute slack on the energy-availability check.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct EnergyQueue {
    level: f64,
    theta: f64,
    tau: f64,
    overspend_events: usize,
}

impl EnergyQueue {
    pub fn new(level: f64, theta: f64, tau: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::InputDomain(format!("theta = {theta} must be positive")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InputDomain(format!("tau = {tau} must be positive")));
        }
        if !(0.0..=theta).contains(&level) {
            return Err(Error::InputDomain(format!("E = {level} outside [0, {theta}]")));
        }
        Ok(Self { level, theta, tau, overspend_events: 0 })
    }

    pub fn level(&self) -> f64 {
        self.level
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    /// Number of updates where the spend exceeded the stored energy.
    pub fn overspend_events(&self) -> usize {
        self.overspend_events
    }

    /// `E <- min([E - spend]^+ + alpha, theta)`.
    pub fn spend_and_harvest(&mut self, spend: f64, alpha: f64) -> Result<()> {
        if !(spend >= 0.0) || !(alpha >= 0.0) {
            return Err(Error::InputDomain(format!("spend = {spend}, alpha = {alpha} must be non-negative")));
        }
        if spend > self.level {
            self.overspend_events += 1;
        }
        self.level = ((self.level - spend).max(0.0) + alpha).min(self.theta);
        Ok(())
    }

    /// `M^2 Tr(F^H F) tau <= E + 1e-9`.
    pub fn check_feasible(&self, f: &CMat, m: f64) -> bool {
        budget_energy(f, m, self.tau) <= self.level + FEASIBILITY_SLACK
    }
}

/// Worst-case energy `M^2 Tr(F^H F) tau` of a precoder.
pub fn budget_energy(f: &CMat, m: f64, tau: f64) -> f64 {
    m * m * f.norm_squared() * tau
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalModel {
    Poisson {
        mean: f64,
    },
    Deterministic {
        value: f64,
    },
    /// Uniform draw from a fixed list of values.
    Empirical {
        values: Vec<f64>,
    },
}

impl ArrivalModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Poisson { mean } if !(*mean > 0.0 && mean.is_finite()) => {
                Err(Error::InputDomain(format!("Poisson mean {mean} must be positive")))
            }
            Self::Deterministic { value } if !(*value >= 0.0 && value.is_finite()) => {
                Err(Error::InputDomain(format!("deterministic arrival {value} must be non-negative")))
            }
            Self::Empirical { values } if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) => {
                Err(Error::InputDomain("empirical arrivals must be a non-empty list of non-negative values".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Poisson { mean } => *mean,
            Self::Deterministic { value } => *value,
            Self::Empirical { values } => values.iter().sum::<f64>() / values.len() as f64,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Poisson { mean } => Poisson::new(*mean).expect("validated mean").sample(rng),
            Self::Deterministic { value } => *value,
            Self::Empirical { values } => values[rng.random_range(0..values.len())],
        }
    }

    /// `E[1/alpha | alpha > 0]` together with `Pr(alpha = 0)`.
    ///
    /// Exact for the deterministic and empirical models; the Poisson sum is
    /// truncated once the remaining tail mass drops below `1e-16`.
    pub fn inverse_mean(&self) -> InverseMean {
        match self {
            Self::Deterministic { value } if *value > 0.0 => InverseMean { value: 1.0 / value, zero_mass: 0.0 },
            Self::Deterministic { .. } => InverseMean { value: f64::INFINITY, zero_mass: 1.0 },
            Self::Empirical { values } => {
                let pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
                let zero_mass = 1.0 - pos.len() as f64 / values.len() as f64;
                let value = if pos.is_empty() {
                    f64::INFINITY
                } else {
                    pos.iter().map(|v| 1.0 / v).sum::<f64>() / pos.len() as f64
                };
                InverseMean { value, zero_mass }
            }
            Self::Poisson { mean } => poisson_inverse_mean(*mean),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseMean {
    /// `E[1/alpha | alpha > 0]`.
    pub value: f64,
    /// `Pr(alpha = 0)`, reported separately because `1/alpha` is undefined there.
    pub zero_mass: f64,
}

fn poisson_inverse_mean(mean: f64) -> InverseMean {
    // pmf in log space so large means do not underflow the early terms
    let ln_mean = mean.ln();
    let zero_mass = (-mean).exp();
    let mut acc = 0.0;
    let mut seen = zero_mass;
    let mut ln_fact = 0.0;
    let mut k = 1u64;
    loop {
        ln_fact += (k as f64).ln();
        let p = (k as f64 * ln_mean - mean - ln_fact).exp();
        acc += p / k as f64;
        seen += p;
        if (k as f64 > mean && 1.0 - seen < 1e-16) || k > 100_000 {
            break;
        }
        k += 1;
    }
    InverseMean { value: acc / (1.0 - zero_mass), zero_mass }
}

/// Monte Carlo estimate of `E[1/alpha | alpha > 0]`; zero draws are excluded
/// and counted.
pub fn estimate_inverse_mean<R: Rng + ?Sized>(model: &ArrivalModel, rng: &mut R, n: usize) -> InverseMean {
    let mut acc = 0.0;
    let mut zeros = 0usize;
    for _ in 0..n {
        let a = model.sample(rng);
        if a > 0.0 {
            acc += 1.0 / a;
        } else {
            zeros += 1;
        }
    }
    let pos = n - zeros;
    InverseMean {
        value: if pos == 0 { f64::INFINITY } else { acc / pos as f64 },
        zero_mass: zeros as f64 / n.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Complex;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn queue_examples() {
        let mut q = EnergyQueue::new(10.0, 30.0, 1.0).unwrap();
        q.spend_and_harvest(4.0, 2.0).unwrap();
        assert_eq!(q.level(), 8.0);

        let mut q = EnergyQueue::new(29.0, 30.0, 1.0).unwrap();
        q.spend_and_harvest(0.0, 5.0).unwrap();
        assert_eq!(q.level(), 30.0);

        let mut q = EnergyQueue::new(3.0, 30.0, 1.0).unwrap();
        q.spend_and_harvest(5.0, 0.0).unwrap();
        assert_eq!(q.level(), 0.0);
        assert_eq!(q.overspend_events(), 1);

        assert!(q.spend_and_harvest(-1.0, 0.0).is_err());
    }

    #[test]
    fn feasibility_examples() {
        let q = EnergyQueue::new(2.0, 30.0, 1.0).unwrap();
        assert!(q.check_feasible(&CMat::zeros(3, 2), 1.0));

        let mut f = CMat::zeros(2, 2);
        f[(0, 0)] = Complex::new(1.0, 1.0);
        assert!(q.check_feasible(&f, 1.0));

        f[(1, 1)] = Complex::new(1e-3f64.sqrt(), 0.0);
        assert!(!q.check_feasible(&f, 1.0));
    }

    #[test]
    fn arrival_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(ArrivalModel::Deterministic { value: 5.0 }.sample(&mut rng), 5.0);

        let p = ArrivalModel::Poisson { mean: 40.0 };
        let n = 100_000;
        let mean = (0..n).map(|_| p.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 40.0).abs() < 0.5, "{mean}");
    }

    #[test]
    fn poisson_inverse_mean_exact_vs_monte_carlo() {
        let p = ArrivalModel::Poisson { mean: 5.0 };
        let exact = p.inverse_mean();
        // direct pmf summation as an independent check
        let mut direct = 0.0;
        let mut pk = (-5.0f64).exp();
        for k in 1..200 {
            pk *= 5.0 / k as f64;
            direct += pk / k as f64;
        }
        direct /= 1.0 - (-5.0f64).exp();
        assert_relative_eq!(exact.value, direct, max_relative = 1e-12);
        assert_relative_eq!(exact.zero_mass, (-5.0f64).exp(), max_relative = 1e-12);

        let mc = estimate_inverse_mean(&p, &mut ChaCha8Rng::seed_from_u64(2), 200_000);
        assert!((mc.value - exact.value).abs() < 0.005);
        assert!((mc.zero_mass - exact.zero_mass).abs() < 0.002);
    }

    #[test]
    fn validation() {
        assert!(ArrivalModel::Poisson { mean: 0.0 }.validate().is_err());
        assert!(ArrivalModel::Empirical { values: vec![] }.validate().is_err());
        assert!(EnergyQueue::new(31.0, 30.0, 1.0).is_err());
    }
}
