#![allow(dead_code)]

use nalgebra::Complex;
use ncs_core::channel::ChannelDraw;
use ncs_core::energy::ArrivalModel;
use ncs_core::estimator::CovarianceState;
use ncs_core::limiter::{LimiterParams, RangeCoefficient};
use ncs_core::numerics::{CMat, RMat, RVec};
use ncs_core::plant::PlantModel;
use ncs_core::precoder::DriftContext;
use ncs_core::sim::{SimConfig, DEFAULT_DIVERGENCE_GUARD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn diag(v: &[f64]) -> RMat {
    RMat::from_diagonal(&RVec::from_column_slice(v))
}

pub fn reference_plant() -> PlantModel {
    PlantModel::new(
        RMat::from_row_slice(2, 2, &[1.3, 0.1, -0.2, 1.2]),
        RMat::identity(2, 2),
        diag(&[1.0, 2.0]),
        diag(&[0.25, 0.25]),
    )
    .unwrap()
}

pub fn reference(eps: f64, mean_alpha: f64, theta: f64) -> SimConfig {
    let model = reference_plant();
    let limiter = LimiterParams::new(&model, 1.0, eps, RangeCoefficient::ClosedLoop).unwrap();
    SimConfig {
        model,
        limiter,
        nc: 2,
        ns: 3,
        arrival: ArrivalModel::Poisson { mean: mean_alpha },
        theta,
        e0: None,
        tau: 0.01,
        divergence_guard: DEFAULT_DIVERGENCE_GUARD,
    }
}

pub fn decoupled_plant() -> PlantModel {
    PlantModel::new(diag(&[1.6, 1.1]), RMat::identity(2, 2), RMat::identity(2, 2), diag(&[0.5, 0.5])).unwrap()
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

pub fn randn<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn rand_real(rng: &mut impl Rng, r: usize, c: usize) -> RMat {
    RMat::from_fn(r, c, |_, _| randn(rng))
}

pub fn rand_complex(rng: &mut impl Rng, r: usize, c: usize) -> CMat {
    CMat::from_fn(r, c, |_, _| Complex::new(randn(rng), randn(rng)))
}

/// Random symmetric positive definite matrix with eigenvalues spread over
/// `[lo, hi]` on a log scale.
pub fn rand_spd(rng: &mut impl Rng, k: usize, lo: f64, hi: f64) -> RMat {
    let q = rand_real(rng, k, k).qr().q();
    let ev: Vec<f64> = (0..k).map(|_| lo * (hi / lo).powf(rng.random::<f64>())).collect();
    let m = &q * diag(&ev) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Random unitary matrix from the QR factor of a complex Gaussian matrix.
pub fn rand_unitary(rng: &mut impl Rng, n: usize) -> CMat {
    rand_complex(rng, n, n).qr().q()
}

/// Relative difference with a floor on the scale.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn rel_mat(a: &RMat, b: &RMat) -> f64 {
    (a - b).abs().max() / a.abs().max().max(b.abs().max()).max(1e-300)
}

/// Random precoder instance with a mix of dormant, slack and binding cases.
pub fn random_instance(rng: &mut impl Rng) -> DriftContext {
    let k = rng.random_range(1..=4);
    let nc = k + rng.random_range(0..=2);
    let ns = k + rng.random_range(0..=2);
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    let h = rand_complex(rng, nc, ns) * Complex::new(scale, 0.0);
    let draw = ChannelDraw::from_matrix(h, k).unwrap();
    let sigma = rand_spd(rng, k, 0.1, 200.0);
    let cov = CovarianceState::new(sigma).unwrap();
    let tau = if rng.random_bool(0.5) { 0.01 } else { 1.0 };
    let theta = 10f64.powf(rng.random_range(0.0..2.0));
    let e = theta * rng.random::<f64>();
    let l = 10f64.powf(rng.random_range(0.0..1.7));
    let norm_aat = rng.random_range(1.0..5.0);
    DriftContext::new(&cov, &draw, e, theta, tau, 1.0, l, norm_aat).unwrap()
}

/// Minimizes the diagonalized drift problem
/// `(theta - E) sum z_i + (c/2) sum 1/(a_i z_i + 1/lambda_i)` over per-stream
/// energies `z >= 0` with `sum z <= E`, where `a_i = 2 pi_i^2 / (L^2 tau)`,
/// by accelerated projected gradient with backtracking and restarts.
///
/// Returns the minimal value.
pub fn p2_oracle(ctx: &DriftContext) -> f64 {
    let k = ctx.k();
    let c = ctx.norm_aat;
    let headroom = ctx.theta - ctx.e;
    let a: Vec<f64> = (0..k).map(|i| 2.0 * ctx.pi[i] * ctx.pi[i] / (ctx.l * ctx.l * ctx.tau)).collect();
    let b: Vec<f64> = (0..k).map(|i| if ctx.lambda[i] > 0.0 { 1.0 / ctx.lambda[i] } else { f64::INFINITY }).collect();
    let obj = |z: &[f64]| -> f64 {
        let mut v = headroom * z.iter().sum::<f64>();
        for i in 0..k {
            if b[i].is_finite() {
                v += 0.5 * c / (a[i] * z[i] + b[i]);
            }
        }
        v
    };
    let grad = |z: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| {
                if b[i].is_finite() {
                    let d = a[i] * z[i] + b[i];
                    headroom - 0.5 * c * a[i] / (d * d)
                } else {
                    headroom
                }
            })
            .collect()
    };
    let budget = ctx.e;
    let project = |v: &[f64]| -> Vec<f64> {
        let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
        if clipped.iter().sum::<f64>() <= budget {
            return clipped;
        }
        // Euclidean projection onto the simplex sum z = budget
        let mut u = v.to_vec();
        u.sort_by(|p, q| q.total_cmp(p));
        let mut acc = 0.0;
        let mut mu = 0.0;
        for (j, uj) in u.iter().enumerate() {
            acc += uj;
            let cand = (acc - budget) / (j + 1) as f64;
            if uj - cand > 0.0 {
                mu = cand;
            }
        }
        v.iter().map(|x| (x - mu).max(0.0)).collect()
    };

    let mut best = obj(&vec![0.0; k]);
    if budget <= 0.0 {
        return best;
    }
    // several starts: empty, uniform spend, all on the best stream
    let mut starts = vec![vec![0.0; k], vec![budget / k as f64; k]];
    for i in 0..k {
        let mut z = vec![0.0; k];
        z[i] = budget;
        starts.push(z);
    }
    for z0 in starts {
        let mut x = project(&z0);
        let mut y = x.clone();
        let mut t: f64 = 1.0;
        let mut step = 1.0;
        let mut fx = obj(&x);
        for _ in 0..20_000 {
            let g = grad(&y);
            let fy = obj(&y);
            let x_new = loop {
                let cand = project(&y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect::<Vec<_>>());
                let diff: f64 = cand.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
                let lin: f64 = cand.iter().zip(&y).zip(&g).map(|((p, q), gi)| gi * (p - q)).sum();
                if obj(&cand) <= fy + lin + diff / (2.0 * step) + 1e-15 * fy.abs() || step < 1e-300 {
                    break cand;
                }
                step *= 0.5;
            };
            let f_new = obj(&x_new);
            if f_new > fx {
                // adaptive restart
                t = 1.0;
                y = x.clone();
                step *= 2.0;
                continue;
            }
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let mom = (t - 1.0) / t_new;
            y = x_new.iter().zip(&x).map(|(xn, xo)| xn + mom * (xn - xo)).map(|v| v.max(0.0)).collect();
            let moved: f64 = x_new.iter().zip(&x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            x = x_new;
            let converged = fx - f_new <= 1e-16 * f_new.abs() && moved <= 1e-14 * budget.max(1.0);
            fx = f_new;
            t = t_new;
            step *= 1.5;
            if converged {
                break;
            }
        }
        best = best.min(fx);
    }
    best
}
