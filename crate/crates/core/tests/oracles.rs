mod common;

use std::f64::consts::PI;

use common::{b_end_by_ode, backward_propagators, gaussian_exit_probability_2d, stable_matrix, TwistedLoop};
use lcpm_core::cycle::{analyze_cycle, monodromy_crosscheck, CycleOptions};
use lcpm_core::linalg::{expm, so_log};
use lcpm_core::models::{AffineDiffusion2, Hopf, ShearedHopf};
use lcpm_core::norms::adapted_norm;
use lcpm_core::rpm::{lyapunov_top, run_linear_ensemble, KestenSpec, LinearPMSpec};
use lcpm_core::sde::{stream_rng, ConstantDiffusion};
use lcpm_core::stats::{
    clopper_pearson, geometric_tail_fit, hazard_curve, hazard_flatness, pooled_hazard, synthetic_geometric,
    ExitSample, FitStatus, TailFitOptions,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn hopf_coefficients_match_closed_forms() {
    let an = analyze_cycle(&Hopf, &ConstantDiffusion::identity(2), &[1.5, 0.0], &CycleOptions::default()).unwrap();
    let c = &an.coefficients;
    assert!((an.cycle.period - 2.0 * PI).abs() < 1e-8);
    assert!(rel(c.a_mat[(0, 0)], (-4.0 * PI).exp()) < 1e-6);
    assert!((c.b_mat[(0, 0)] + 4.0 * PI).abs() < 1e-4);
    for i in 0..c.n_grid {
        assert!((c.r[i][(0, 0)] + 4.0 * PI).abs() < 1e-5, "R({i}) = {}", c.r[i][(0, 0)]);
        assert!(c.a[i].amax() < 1e-6);
        assert!((c.h[i].norm_squared() - 1.0 / (2.0 * PI)).abs() < 1e-8);
    }
    // ξ has variance ∫|h|² = 1/2π; η = ∫ e^{−4π(1−s)} √(2π) dW has variance
    // (1 − e^{−8π})/4; they are uncorrelated because h ⟂ H.
    assert!(rel(c.sigma[(0, 0)], 1.0 / (2.0 * PI)) < 1e-6);
    assert!(rel(c.sigma[(1, 1)], 0.25 * (1.0 - (-8.0 * PI).exp())) < 1e-4);
    assert!(c.sigma[(0, 1)].abs() < 1e-8);
}

#[test]
fn twisted_loop_has_analytic_multipliers_and_holonomy() {
    let field = TwistedLoop {
        k_r: 1.0,
        k_z: 0.5,
        lift: 0.4,
    };
    let opts = CycleOptions {
        grid_points: 4096,
        ..CycleOptions::default()
    };
    let an = analyze_cycle(&field, &ConstantDiffusion::identity(3), &[1.2, 0.0, 0.3], &opts).unwrap();
    assert!((an.cycle.period - 2.0 * PI).abs() < 1e-7);
    let mut got: Vec<f64> = an.cycle.nontrivial_multipliers().iter().map(|z| z.re).collect();
    got.sort_by(f64::total_cmp);
    let mut want = field.multipliers();
    want.sort_by(f64::total_cmp);
    for (g, w) in got.iter().zip(&want) {
        assert!(rel(*g, *w) < 1e-5, "{g} vs {w}");
    }
    let check = monodromy_crosscheck(&an.cycle, &an.frame, &an.coefficients);
    assert!(check.max_relative_error < 1e-4);
    assert!(check.trivial_error < 1e-6);
    // A non-planar loop: transport alone leaves a rotation at the seam.
    let angle = an.frame.holonomy_log[(1, 0)].abs();
    assert!(angle > 1e-3, "holonomy angle {angle}");
    assert!((an.frame.holonomy.determinant() - 1.0).abs() < 1e-10);
    assert!(an.frame.closure_error < 1e-10);
    assert!(an.frame.orthonormality_error() < 1e-12);
    assert!(an.frame.tangency_error() < 1e-12);
    let d = &an.coefficients.diagnostics;
    assert!(d.liouville_error < 1e-6, "{}", d.liouville_error);
    assert!(d.conjugacy_residual < 1e-6, "{}", d.conjugacy_residual);
}

#[test]
fn sheared_hopf_b_and_propagators_agree_with_independent_integrators() {
    let field = ShearedHopf { shear: 1.0 };
    let diff = AffineDiffusion2 { alpha: 0.3, beta: 0.2 };
    let an = analyze_cycle(&field, &diff, &[1.5, 0.0], &CycleOptions::default()).unwrap();
    let c = &an.coefficients;
    assert!(c.a.iter().map(|a| a.amax()).fold(0.0, f64::max) > 0.1);
    let b1 = b_end_by_ode(c);
    // X(1)⁻¹ ~ e^{4π} makes b(1) large; compare relatively.
    let b_code = &c.b[c.n_grid];
    assert!((&b1 - b_code).amax() < 1e-5 * b1.amax(), "{} vs {}", b1[0], b_code[0]);
    let phi = backward_propagators(c);
    assert!(rel(phi[0][(0, 0)], c.a_mat[(0, 0)]) < 1e-5);
}

#[test]
fn sigma_converges_under_grid_refinement() {
    // Rotation-invariant noise, so Σ does not depend on where Newton puts u(0).
    let field = ShearedHopf { shear: 0.5 };
    let diff = ConstantDiffusion::identity(2);
    let sig = |n: usize| {
        let opts = CycleOptions {
            grid_points: n,
            dt: 2.0 * PI / n as f64,
            ..CycleOptions::default()
        };
        analyze_cycle(&field, &diff, &[1.5, 0.0], &opts).unwrap().coefficients.sigma
    };
    let (s1, s2, s3) = (sig(2048), sig(4096), sig(8192));
    let relerr = |a: &DMatrix<f64>| (a - &s3).component_div(&s3.map(|v| v.abs().max(1e-3))).amax();
    let (e1, e2) = (relerr(&s1), relerr(&s2));
    assert!(e2 < 0.5 * e1, "no convergence: {e1} then {e2}");
    assert!(e2 < 1e-4, "{e2}");
}

#[test]
fn memoryless_map_exit_probability_matches_quadrature() {
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.1, 0.0, 0.1, 1.0, 0.3, 0.0, 0.3, 0.5]);
    let spec = LinearPMSpec::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), cov.clone(), 1.0).unwrap();
    let oracle = adapted_norm(&spec.a, 0.5).unwrap();
    let h = 1.6;
    let samples = run_linear_ensemble(&spec, &oracle, h, &[0.0, 0.0], 10_000, 20_000, 3);
    let pooled = pooled_hazard(&hazard_curve(&samples).unwrap(), 1);
    let eta = cov.view((1, 1), (2, 2)).into_owned();
    let p = gaussian_exit_probability_2d(&eta, h, 256);
    assert!((pooled.p_hat - p).abs() < 3.0 * pooled.std_error, "{} vs {p}", pooled.p_hat);
}

#[test]
fn planar_quadrature_reduces_to_chi_square_for_isotropic_noise() {
    // |η|² ~ s²χ²₂, so P(|η| > ρ) = exp(−ρ²/(2s²)).
    let c = DMatrix::identity(2, 2) * 0.7;
    let p = gaussian_exit_probability_2d(&c, 1.3, 64);
    assert!((p - (-1.3f64.powi(2) / 1.4).exp()).abs() < 1e-14);
}

#[test]
fn scalar_lyapunov_exponent_matches_quadrature() {
    // α = log a + E log|1 + σξ|, the expectation by the midpoint rule on a
    // wide fine grid (the log singularity is integrable).
    let (a, sigma) = (0.6, 0.4);
    let m = 2_000_000;
    let (lo, hi) = (-12.0, 12.0);
    let dx = (hi - lo) / m as f64;
    let mut e = 0.0;
    for i in 0..m {
        let x: f64 = lo + (i as f64 + 0.5) * dx;
        e += (1.0 + sigma * x).abs().ln() * (-0.5 * x * x).exp();
    }
    e *= dx / (2.0 * PI).sqrt();
    let spec = KestenSpec::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        sigma,
        0.0,
    )
    .unwrap();
    let est = lyapunov_top(&spec, 2_000_000, None, &mut stream_rng(11, 0));
    let want = a.ln() + e;
    assert!((est.alpha - want).abs() < 4.0 * est.std_error + 1e-4, "{} vs {want}", est.alpha);
}

#[test]
fn clopper_pearson_bounds_hit_binomial_tails() {
    for &(k, n) in &[(3u64, 40u64), (17, 50), (1, 1000), (250, 500)] {
        let alpha = 0.01;
        let (lo, hi) = clopper_pearson(k, n, alpha);
        let upper = Binomial::new(hi, n).unwrap();
        assert!((upper.cdf(k) - alpha / 2.0).abs() < 1e-8);
        let lower = Binomial::new(lo, n).unwrap();
        assert!((1.0 - lower.cdf(k - 1) - alpha / 2.0).abs() < 1e-8);
    }
}

#[test]
fn geometric_samples_have_flat_hazard_and_pass_the_tail_fit() {
    let mut rng = stream_rng(21, 0);
    let samples = synthetic_geometric(0.05, 20_000, 400, &mut rng);
    let curve = hazard_curve(&samples).unwrap();
    let pooled = pooled_hazard(&curve, 1);
    assert!((pooled.p_hat - 0.05).abs() < 3.0 * pooled.std_error);
    assert!(hazard_flatness(&curve, 1, 100).flat);
    let fit = geometric_tail_fit(&samples, 1, &TailFitOptions::default());
    assert_eq!(fit.status, FitStatus::Pass);
    assert!((fit.p_mle - 0.05).abs() < 3.0 * fit.p_std_error);
}

#[test]
fn humped_law_with_geometric_tail() {
    // τ = 3 + Geometric(0.2) mixed with a point mass at 2: the hazard is not
    // flat from n = 1, but the law is geometric beyond n = 4.
    let mut rng = stream_rng(5, 0);
    let mut samples = synthetic_geometric(0.2, 6000, 10_000, &mut rng);
    for s in samples.iter_mut() {
        s.tau += 3;
    }
    samples.extend((0..3000).map(|i| ExitSample::exited(10_000 + i, 2, 0)));
    let curve = hazard_curve(&samples).unwrap();
    assert!(!hazard_flatness(&curve, 1, 100).flat);
    assert_eq!(geometric_tail_fit(&samples, 1, &TailFitOptions::default()).status, FitStatus::Fail);
    let tail = geometric_tail_fit(&samples, 5, &TailFitOptions::default());
    assert_eq!(tail.status, FitStatus::Pass);
    assert!((tail.p_mle - 0.2).abs() < 3.0 * tail.p_std_error);
}

#[test]
fn mixture_tail_is_governed_by_the_smaller_hazard() {
    // 0.5 Geom(0.1) + 0.5 Geom(0.5): past n ≈ 15 the fast component has died
    // out (0.5^14 ≈ 6e-5) and the tail is Geom(0.1).
    let mut rng = stream_rng(8, 0);
    let mut samples = synthetic_geometric(0.1, 20_000, 100_000, &mut rng);
    samples.extend(synthetic_geometric(0.5, 20_000, 100_000, &mut rng));
    let fit = geometric_tail_fit(&samples, 15, &TailFitOptions::default());
    assert!((fit.p_mle - 0.1).abs() < 3.0 * fit.p_std_error, "{}", fit.p_mle);
    assert_eq!(fit.status, FitStatus::Pass);
    assert!(geometric_tail_fit(&samples, 1, &TailFitOptions::default()).p_mle > 0.15);
}

#[test]
fn constant_exit_time_is_not_geometric() {
    let samples: Vec<_> = (0..500).map(|i| ExitSample::exited(i, 5, 0)).collect();
    let curve = hazard_curve(&samples).unwrap();
    assert!(!hazard_flatness(&curve, 1, 1).flat);
    assert_eq!(geometric_tail_fit(&samples, 1, &TailFitOptions::default()).status, FitStatus::Fail);
}

fn rotation_generator(d: usize, seed: u64, max_angle: f64) -> DMatrix<f64> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0);
    let mut k = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            let v: f64 = rng.random_range(-1.0..1.0);
            k[(i, j)] = v;
            k[(j, i)] = -v;
        }
    }
    // Scale so every rotation angle stays below `max_angle`.
    let w = (&k * k.transpose()).symmetric_eigenvalues().amax().sqrt();
    if w > 0.0 {
        k * (max_angle / w)
    } else {
        k
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapted_norm_contracts_and_is_equivalent(
        d in 1usize..6,
        radius in 0.05f64..0.95,
        frac in 0.05f64..0.95,
        seed in any::<u64>(),
        x in proptest::collection::vec(-10.0f64..10.0, 6),
        y in proptest::collection::vec(-10.0f64..10.0, 6),
    ) {
        let a = stable_matrix(d, radius, seed);
        let eps = frac * (1.0 - radius);
        let o = adapted_norm(&a, eps).unwrap();
        let xv = DVector::from_column_slice(&x[..d]);
        let yv = DVector::from_column_slice(&y[..d]);
        let nx = o.norm_vec(&xv);
        let ax = &a * &xv;
        prop_assert!(o.norm_vec(&ax) <= (1.0 - eps) * nx * (1.0 + 1e-12));
        let (g1, g2) = o.equivalence_constants();
        prop_assert!(g1 * xv.norm() <= nx * (1.0 + 1e-12));
        prop_assert!(nx <= g2 * xv.norm() * (1.0 + 1e-12));
        prop_assert!(o.norm_vec(&(&xv + &yv)) <= (nx + o.norm_vec(&yv)) * (1.0 + 1e-12));
        prop_assert!((o.norm_vec(&(&xv * -2.5)) - 2.5 * nx).abs() <= 1e-12 * nx);
    }

    #[test]
    fn so_log_inverts_exp(d in 2usize..7, seed in any::<u64>(), angle in 0.0f64..3.0) {
        let k = rotation_generator(d, seed, angle);
        let q = expm(&k);
        let l = so_log(&q).unwrap();
        prop_assert!((&l + l.transpose()).amax() < 1e-12);
        prop_assert!((expm(&l) - &q).amax() < 1e-10);
        prop_assert!((&l - &k).amax() < 1e-8 * (1.0 + k.amax()));
    }

    #[test]
    fn twisted_frames_are_orthonormal_and_periodic(lift in -0.8f64..0.8, k_z in 0.3f64..2.0) {
        let field = TwistedLoop { k_r: 1.0, k_z, lift };
        let opts = CycleOptions { grid_points: 1024, ..CycleOptions::default() };
        let an = analyze_cycle(&field, &ConstantDiffusion::identity(3), &[1.1, 0.0, 0.0], &opts).unwrap();
        prop_assert!(an.frame.orthonormality_error() < 1e-12);
        prop_assert!(an.frame.tangency_error() < 1e-12);
        prop_assert!(an.frame.closure_error < 1e-10);
        prop_assert!((an.frame.holonomy.determinant() - 1.0).abs() < 1e-10);
        let mut got: Vec<f64> = lcpm_core::linalg::eigenvalues(&an.coefficients.a_mat).iter().map(|z| z.re).collect();
        got.sort_by(f64::total_cmp);
        let mut want = field.multipliers();
        want.sort_by(f64::total_cmp);
        prop_assert!(rel(got[0], want[0]) < 1e-3 && rel(got[1], want[1]) < 1e-3, "{:?} vs {:?}", got, want);
    }
}
