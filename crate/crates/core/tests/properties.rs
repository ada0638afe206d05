mod common;

use common::*;
use nalgebra::Complex;
use ncs_core::analysis::{check_stability, mse_bound_from, EtaConvention, PlantConstants};
use ncs_core::channel::{pitilde_of, ChannelDraw, PiTildeStats};
use ncs_core::energy::{budget_energy, EnergyQueue, FEASIBILITY_SLACK};
use ncs_core::estimator::{sigma_step, CovarianceState, EffectiveChannel};
use ncs_core::limiter::clip;
use ncs_core::numerics::{eig_sym, eigenvalues, solve_dare, solve_stein, spectral_radius, svd, CMat, RMat, RVec};
use ncs_core::plant::instability_measure;
use ncs_core::precoder::{problem1_objective, solve_drift_optimal, DriftContext, Mode, Policy};
use ncs_core::sim::{run_monte_carlo, Simulator};
use proptest::prelude::*;
use rand::Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

fn frob(m: &RMat) -> f64 {
    m.norm()
}

proptest! {
    #![proptest_config(cases(1000))]

    #[test]
    fn svd_reconstructs_with_unitary_factors(seed in any::<u64>(), r in 1usize..=8, c in 1usize..=8) {
        let mut g = rng(seed);
        let h = rand_complex(&mut g, r, c);
        let s = svd(&h).unwrap();
        let scale = h.norm().max(1e-300);
        prop_assert!((s.reconstruct() - &h).norm() / scale < 1e-10);
        prop_assert!((s.u.adjoint() * &s.u - CMat::identity(c, c)).norm() < 1e-10);
        prop_assert!((s.v.adjoint() * &s.v - CMat::identity(r, r)).norm() < 1e-10);
        prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eig_sym_preserves_trace_and_frobenius(seed in any::<u64>(), k in 1usize..=8) {
        let mut g = rng(seed);
        let m = rand_real(&mut g, k, k);
        let sigma = &m * m.transpose();
        let e = eig_sym(&sigma).unwrap();
        let tr: f64 = e.lambda.iter().sum();
        let fro: f64 = e.lambda.iter().map(|l| l * l).sum::<f64>().sqrt();
        prop_assert!(rel(tr, sigma.trace()) < 1e-10);
        prop_assert!(rel(fro, frob(&sigma)) < 1e-10);
        prop_assert!(e.lambda.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn stein_residual_is_small(seed in any::<u64>(), k in 1usize..=5, rho in 0.05f64..0.95) {
        let mut g = rng(seed);
        let f0 = rand_real(&mut g, k, k);
        let f = &f0 * (rho / spectral_radius(&f0).max(1e-12));
        let t = rand_spd(&mut g, k, 0.1, 10.0);
        let q = solve_stein(&f, &t).unwrap();
        let residual = f.transpose() * &q * &f - &q + &t;
        prop_assert!(residual.abs().max() < 1e-9 * q.abs().max().max(1.0));
    }

    #[test]
    fn instability_measure_at_least_one(seed in any::<u64>(), k in 1usize..=5, s in 0.1f64..2.0) {
        let mut g = rng(seed);
        let a = rand_real(&mut g, k, k) * s;
        let m = instability_measure(&a);
        prop_assert!(m >= 1.0);
        let all_inside = eigenvalues(&a).iter().all(|z| z.norm() <= 1.0);
        prop_assert_eq!(m == 1.0, all_inside);
    }

    #[test]
    fn instability_measure_symmetric_matches_complex_path(seed in any::<u64>(), k in 1usize..=5) {
        let mut g = rng(seed);
        let a = rand_real(&mut g, k, k);
        let aat = &a * a.transpose();
        let via_sym: f64 = eig_sym(&aat).unwrap().lambda.iter().map(|l| l.max(1.0)).product();
        prop_assert!(rel(instability_measure(&aat), via_sym) < 1e-9);
    }

    #[test]
    fn clip_bounds_and_preserves_direction(seed in any::<u64>(), k in 1usize..=6, l in 0.01f64..100.0, m in 0.1f64..5.0) {
        let mut g = rng(seed);
        let scale = 10f64.powf(g.random_range(-3.0..3.0));
        let x = RVec::from_fn(k, |_, _| randn(&mut g) * scale);
        let out = clip(&x, l, m).unwrap();
        prop_assert!(out.q.norm() <= m * (1.0 + 1e-12));
        prop_assert!(out.g >= 0.0);
        prop_assert!((&out.q - &x * out.g).norm() <= 1e-12 * out.q.norm().max(1e-300));
        prop_assert_eq!(out.saturated, x.norm() > l);
    }

    #[test]
    fn gram2re_equals_augmented_gram(seed in any::<u64>(), k in 1usize..=4, extra in 0usize..=3) {
        let mut g = rng(seed);
        let eff = EffectiveChannel::from_ftilde(rand_complex(&mut g, k + extra, k));
        let aug = eff.augmented();
        let stacked = (aug.adjoint() * &aug).map(|z| z.re);
        prop_assert!((stacked - &eff.gram2re).abs().max() < 1e-12 * eff.gram2re.abs().max().max(1.0));
    }
}

proptest! {
    #![proptest_config(cases(200))]

    #[test]
    fn dare_solution_satisfies_riccati(seed in any::<u64>(), k in 1usize..=4, d in 1usize..=3) {
        let mut g = rng(seed);
        let a = rand_real(&mut g, k, k) * 0.7;
        let b = rand_real(&mut g, k, d);
        let p = rand_spd(&mut g, k, 0.5, 2.0);
        let r = rand_spd(&mut g, d, 0.5, 2.0);
        let z = solve_dare(&a, &b, &p, &r).unwrap();
        let inner = (b.transpose() * &z * &b + &r).try_inverse().unwrap();
        let aza = a.transpose() * &z * &a;
        let rhs = &aza - a.transpose() * &z * &b * inner * b.transpose() * &z * &a + &p;
        // scaled by the largest term of the equation
        let scale = z.abs().max().max(aza.abs().max()).max(1.0);
        prop_assert!((&rhs - &z).abs().max() < 1e-8 * scale);
        prop_assert!((&z - z.transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn pitilde_invariant_under_rotation(seed in any::<u64>(), k in 1usize..=3, extra in 0usize..=2) {
        let mut g = rng(seed);
        let (nc, ns) = (k + extra, k + 1);
        let h = rand_complex(&mut g, nc, ns);
        let q1 = rand_unitary(&mut g, nc);
        let q2 = rand_unitary(&mut g, ns);
        let a = pitilde_of(&ChannelDraw::from_matrix(h.clone(), k).unwrap()).unwrap();
        let b = pitilde_of(&ChannelDraw::from_matrix(&q1 * h * q2, k).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(rel(*x, *y) < 1e-10);
        }
    }

    #[test]
    fn pitilde_stats_are_monotone(seed in any::<u64>(), n in 10usize..300) {
        let mut g = rng(seed);
        let samples: Vec<f64> = (0..n).map(|_| g.random_range(0.01..3.0)).collect();
        let stats = PiTildeStats::from_samples(samples, 0);
        let grid = stats.quantile_grid(50);
        let mut last_cdf = -1.0;
        let mut last_inv = f64::INFINITY;
        for xi in grid {
            let c = stats.cdf(xi);
            prop_assert!(c >= last_cdf);
            last_cdf = c;
            if let Some(inv) = stats.conditional_inverse_mean(xi) {
                prop_assert!(inv <= last_inv * (1.0 + 1e-12));
                last_inv = inv;
            }
        }
    }

    #[test]
    fn queue_stays_in_range(seed in any::<u64>(), theta in 0.1f64..100.0, steps in 1usize..200) {
        let mut g = rng(seed);
        let mut q = EnergyQueue::new(theta * g.random::<f64>(), theta, 0.01).unwrap();
        for _ in 0..steps {
            let spend = q.level() * g.random::<f64>();
            let alpha = theta * g.random::<f64>();
            q.spend_and_harvest(spend, alpha).unwrap();
            prop_assert!(q.level() >= 0.0 && q.level() <= theta);
        }
    }

    #[test]
    fn sigma_stays_psd_and_above_w(seed in any::<u64>(), k in 1usize..=3, steps in 1usize..40) {
        let mut g = rng(seed);
        let a = rand_real(&mut g, k, k) * 1.2;
        let w = rand_spd(&mut g, k, 0.5, 2.0);
        let mut cov = CovarianceState::zeros(k);
        for _ in 0..steps {
            let eff = EffectiveChannel::from_ftilde(rand_complex(&mut g, k + 1, k) * Complex::new(g.random_range(0.0..2.0), 0.0));
            let gamma = u8::from(g.random_bool(0.8));
            cov = sigma_step(&cov, &eff, gamma, &a, &w).unwrap();
            let s = cov.sigma();
            prop_assert!((s - s.transpose()).abs().max() == 0.0);
            let gap = eig_sym(&(s - &w)).unwrap();
            prop_assert!(gap.lambda.iter().all(|l| *l >= -1e-9 * s.abs().max().max(1.0)));
        }
    }

    #[test]
    fn every_policy_is_feasible(seed in any::<u64>(), slot in 0usize..10) {
        let mut g = rng(seed);
        let ctx = random_instance(&mut g);
        let mean_alpha = ctx.theta * g.random::<f64>();
        for name in ["proposed", "baseline1", "baseline2", "baseline3", "baseline4", "baseline5", "silent"] {
            let policy = Policy::from_name(name, 3, mean_alpha).unwrap();
            let d = policy.decide(&ctx, slot).unwrap();
            prop_assert!(budget_energy(&d.f, ctx.m, ctx.tau) <= ctx.e + FEASIBILITY_SLACK, "{name}");
            if d.mode == Mode::Dormant {
                prop_assert!(d.f.iter().all(|z| *z == Complex::new(0.0, 0.0)), "{name}");
            }
        }
    }

    #[test]
    fn dormant_test_sign_decides_silence(seed in any::<u64>()) {
        let mut g = rng(seed);
        let ctx = random_instance(&mut g);
        let d = solve_drift_optimal(&ctx).unwrap();
        if ctx.is_dormant() {
            prop_assert_eq!(d.mode, Mode::Dormant);
            prop_assert!(d.f.iter().all(|z| z.norm() == 0.0));
        } else if ctx.e > 0.0 {
            prop_assert_eq!(d.mode, Mode::Active);
        }
    }

    #[test]
    fn allocations_grow_with_energy(seed in any::<u64>()) {
        let mut g = rng(seed);
        let base = random_instance(&mut g);
        let mut last: Option<Vec<f64>> = None;
        for step in 0..=20 {
            let mut ctx = base.clone();
            ctx.e = base.theta * step as f64 / 20.0;
            let y = solve_drift_optimal(&ctx).unwrap().allocations;
            if let Some(prev) = &last {
                for (a, b) in prev.iter().zip(&y) {
                    prop_assert!(*b >= *a * (1.0 - 1e-9) - 1e-15, "{prev:?} -> {y:?}");
                }
            }
            last = Some(y);
        }
    }

    #[test]
    fn objective_invariant_under_channel_rotation(seed in any::<u64>()) {
        let mut g = rng(seed);
        let ctx = random_instance(&mut g);
        let (nc, ns) = (ctx.h.nrows(), ctx.h.ncols());
        let q1 = rand_unitary(&mut g, nc);
        let q2 = rand_unitary(&mut g, ns);
        let draw = ChannelDraw::from_matrix(&q1 * &ctx.h * &q2, ctx.k()).unwrap();
        let cov = CovarianceState::new(ctx.sigma.clone()).unwrap();
        let rotated = DriftContext::new(&cov, &draw, ctx.e, ctx.theta, ctx.tau, ctx.m, ctx.l, ctx.norm_aat).unwrap();
        let a = problem1_objective(&ctx, &solve_drift_optimal(&ctx).unwrap().f).unwrap();
        let b = problem1_objective(&rotated, &solve_drift_optimal(&rotated).unwrap().f).unwrap();
        prop_assert!(rel(a, b) < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn stability_never_lost_with_more_storage_or_arrivals(
        seed in any::<u64>(),
        theta in 1.0f64..500.0,
        inv_alpha in 0.001f64..1.0,
        grow in 1.0f64..5.0,
    ) {
        let mut g = rng(seed);
        let samples: Vec<f64> = (0..400).map(|_| g.random_range(0.05..1.5)).collect();
        let stats = PiTildeStats::from_samples(samples, 0);
        let c = PlantConstants {
            k: 2, eps: 0.01, tau: 0.01, delta: g.random_range(0.5..5.0), bpsi_norm: 0.25,
            m_a: 1.2, m_aat: 1.4, trace_w: 3.0,
        };
        let grid = stats.quantile_grid(50);
        let base = check_stability(&c, &stats, inv_alpha, theta, 1.0 / inv_alpha, &grid).unwrap();
        let more_theta = check_stability(&c, &stats, inv_alpha, theta * grow, 1.0 / inv_alpha, &grid).unwrap();
        let more_alpha = check_stability(&c, &stats, inv_alpha / grow, theta, grow / inv_alpha, &grid).unwrap();
        prop_assert!(!base.satisfied || more_theta.satisfied);
        prop_assert!(!base.satisfied || more_alpha.satisfied);
    }

    #[test]
    fn mse_bound_monotone_in_arrivals_and_noise(inv_alpha in 0.001f64..0.05, shrink in 0.1f64..1.0, tw in 0.5f64..10.0) {
        let c = PlantConstants { k: 2, eps: 0.01, tau: 0.01, delta: 0.5, bpsi_norm: 0.25, m_a: 1.2, m_aat: 1.4, trace_w: tw };
        let theta = 1000.0;
        let Ok(base) = mse_bound_from(&c, 0.0, 1.0, inv_alpha, theta, EtaConvention::WithoutPeriod) else {
            return Ok(());
        };
        let richer = mse_bound_from(&c, 0.0, 1.0, inv_alpha * shrink, theta, EtaConvention::WithoutPeriod).unwrap();
        prop_assert!(richer.bound <= base.bound);
        let noisier = PlantConstants { trace_w: tw * 2.0, ..c };
        let worse = mse_bound_from(&noisier, 0.0, 1.0, inv_alpha, theta, EtaConvention::WithoutPeriod).unwrap();
        prop_assert!(worse.bound > base.bound);
    }
}

#[test]
fn water_filling_invariant_to_tie_permutation() {
    let mut g = rng(11);
    for _ in 0..50 {
        let base = random_instance(&mut g);
        let k = base.k();
        let mut ctx = base.clone();
        ctx.sigma = RMat::identity(k, k) * 5.0;
        ctx.lambda = vec![5.0; k];
        let mut rotated = ctx.clone();
        rotated.s = rand_real(&mut g, k, k).qr().q();
        let mut permuted = ctx.clone();
        permuted.s = RMat::from_fn(k, k, |i, j| if (i + 1) % k == j { 1.0 } else { 0.0 });
        let a = problem1_objective(&ctx, &solve_drift_optimal(&ctx).unwrap().f).unwrap();
        for other in [&rotated, &permuted] {
            let b = problem1_objective(other, &solve_drift_optimal(other).unwrap().f).unwrap();
            assert!(rel(a, b) < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn energy_ledger_holds_on_every_path() {
    let cfg = reference(0.05, 40.0, 80.0);
    for name in ["proposed", "baseline1", "baseline4"] {
        let policy = Policy::from_name(name, 3, 40.0).unwrap();
        let r = run_monte_carlo(&cfg, &policy, 30, 100, 21, false).unwrap();
        for p in &r.paths {
            assert!(p.total_spent <= p.initial_energy + p.total_harvest + 1e-9, "{name} path {}", p.path);
        }
    }
}

#[test]
fn estimation_error_within_virtual_covariance() {
    let cfg = reference(0.05, 40.0, 80.0);
    let r = run_monte_carlo(&cfg, &Policy::Proposed, 200, 300, 22, false).unwrap();
    let err = ncs_core::sim::Stat::from_samples(&r.paths.iter().map(|p| p.mean_sq_error).collect::<Vec<_>>());
    assert!(err.mean <= r.mean_tr_sigma.mean + err.ci + r.mean_tr_sigma.ci, "{err:?} vs {:?}", r.mean_tr_sigma);
    assert_eq!(r.divergent_paths, 0);
}

#[test]
fn confidence_interval_shrinks_with_paths() {
    let cfg = reference(0.05, 40.0, 80.0);
    let small = run_monte_carlo(&cfg, &Policy::Proposed, 200, 100, 23, false).unwrap();
    let large = run_monte_carlo(&cfg, &Policy::Proposed, 400, 100, 23, false).unwrap();
    let ratio = large.normalized_mse.ci / small.normalized_mse.ci;
    assert!((ratio - 0.5f64.sqrt()).abs() <= 0.2 * 0.5f64.sqrt(), "ratio {ratio}");
}

#[test]
fn aggregates_do_not_depend_on_execution_order() {
    let cfg = reference(0.05, 40.0, 80.0);
    let parallel = run_monte_carlo(&cfg, &Policy::Proposed, 16, 50, 24, false).unwrap();
    let sim = Simulator::new(cfg).unwrap();
    let mut paths: Vec<_> =
        (0..16u64).rev().map(|p| sim.run_path(&Policy::Proposed, p, 50, 24, false).unwrap()).collect();
    paths.reverse();
    let sequential = ncs_core::sim::RunResult::from_paths(&Policy::Proposed, 50, 24, paths);
    assert_eq!(parallel, sequential);
}

#[test]
fn region_scan_far_corner_and_seabed() {
    let model = decoupled_plant();
    let limiter =
        ncs_core::limiter::LimiterParams::new(&model, 1.0, 0.1, ncs_core::limiter::RangeCoefficient::Feedback).unwrap();
    let rc = ncs_core::sim::RegionConfig { model, limiter, theta: 36.0, tau: 1.0 };
    let map = ncs_core::sim::decision_region_scan(&rc, 12.0, 4.0, 70.0, 50, 8.0, 100.0).unwrap();
    // tiny h2 and sigma2: the second channel stays off
    assert!(map.counts[0][0] <= 1);
    // along sigma2 at the strongest h2, activation never switches back off
    let row = &map.counts[49];
    assert!(row.windows(2).all(|w| w[1] >= w[0]), "{row:?}");
    let _ = RMat::zeros(1, 1);
}
