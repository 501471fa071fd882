//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use lcpm_core::cycle::PMCoefficients;
use lcpm_core::sde::VectorField;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Closed curve `γ(θ) = (cos θ, sin θ, c g(θ))`, `g = sin 2θ + 0.6 cos 3θ`,
/// made attracting in 3D.
///
/// In the coordinates `r`, `θ = atan2(y, x)` and `w = z − c g(θ)` the field
/// reads `ṙ = k_r(1 − r)`, `θ̇ = 1/r`, `ẇ = −k_z w + c g′(θ)(1 − 1/r)`.
/// The linearization on the cycle is triangular, so the period is `2π` and
/// the nontrivial Floquet multipliers are `e^{−2πk_r}` and `e^{−2πk_z}`. For
/// `c ≠ 0` the curve is not planar and has no symmetry reversing it, so the
/// transported frame does not close up on its own.
#[derive(Debug, Clone, Copy)]
pub struct TwistedLoop {
    pub k_r: f64,
    pub k_z: f64,
    pub lift: f64,
}

impl TwistedLoop {
    pub fn multipliers(&self) -> [f64; 2] {
        [(-2.0 * PI * self.k_r).exp(), (-2.0 * PI * self.k_z).exp()]
    }
}

impl VectorField for TwistedLoop {
    fn dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let r = x[0].hypot(x[1]);
        let (s, c) = (x[1] / r, x[0] / r);
        let th = x[1].atan2(x[0]);
        let radial = self.k_r * (1.0 - r);
        out[0] = -s + radial * c;
        out[1] = c + radial * s;
        let g = (2.0 * th).sin() + 0.6 * (3.0 * th).cos();
        let dg = 2.0 * (2.0 * th).cos() - 1.8 * (3.0 * th).sin();
        out[2] = self.lift * dg + self.k_z * (self.lift * g - x[2]);
    }
}

/// `Φ(1, θ_i)` for `i = 0..=n` on the coarse grid, by backward products of
/// `exp(h (R_i + R_{i+1}) / 2)`.
pub fn backward_propagators(c: &PMCoefficients) -> Vec<DMatrix<f64>> {
    let n = c.n_grid;
    let d = c.transverse_dim();
    let h = 1.0 / n as f64;
    let mut phi = vec![DMatrix::identity(d, d); n + 1];
    for i in (0..n).rev() {
        let avg = (&c.r[i] + &c.r[(i + 1) % n]) * (0.5 * h);
        phi[i] = &phi[i + 1] * avg.exp();
    }
    phi
}

/// `b(1)` from `ḃ = −a − Rᵀb`, `b(0) = 0`, RK4 with linearly interpolated
/// coefficients.
pub fn b_end_by_ode(c: &PMCoefficients) -> DVector<f64> {
    let n = c.n_grid;
    let d = c.transverse_dim();
    let h = 1.0 / n as f64;
    let rhs = |a: &DVector<f64>, r: &DMatrix<f64>, b: &DVector<f64>| -> DVector<f64> { -a - r.transpose() * b };
    let mut b = DVector::zeros(d);
    for i in 0..n {
        let (a0, a1) = (&c.a[i], &c.a[(i + 1) % n]);
        let (r0, r1) = (&c.r[i], &c.r[(i + 1) % n]);
        let am = (a0 + a1) * 0.5;
        let rm = (r0 + r1) * 0.5;
        let k1 = rhs(a0, r0, &b);
        let k2 = rhs(&am, &rm, &(&b + &k1 * (0.5 * h)));
        let k3 = rhs(&am, &rm, &(&b + &k2 * (0.5 * h)));
        let k4 = rhs(a1, r1, &(&b + &k3 * h));
        b += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    b
}

/// Sample covariance of `(ζ, η)` with entrywise standard errors.
pub struct McCovariance {
    pub cov: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
    pub paths: usize,
}

/// Monte Carlo over Brownian paths of `ξ = ∫hᵀdW`, `η = ∫Φ(1,s)Hᵀ(s)dW` and
/// `ζ = ξ − b(1)ᵀη`. The integrands are deterministic, so each pair of coarse
/// cells uses one Gaussian increment with the integrand at its midpoint.
pub fn mc_covariance(c: &PMCoefficients, paths: usize, seed: u64) -> McCovariance {
    let n = c.n_grid;
    assert!(n % 2 == 0);
    let d = c.transverse_dim();
    let k = c.h[0].len();
    let phi = backward_propagators(c);
    let b1 = b_end_by_ode(c);
    let steps = n / 2;
    let sd = (2.0 / n as f64).sqrt();
    let mut g_rm: Vec<f64> = Vec::with_capacity(steps * d * k);
    let mut h_rm: Vec<f64> = Vec::with_capacity(steps * k);
    for s in 0..steps {
        let i = 2 * s + 1;
        let g = &phi[i] * c.h_mat[i].transpose();
        for p in 0..d {
            for q in 0..k {
                g_rm.push(g[(p, q)]);
            }
        }
        h_rm.extend(c.h[i].iter());
    }
    let chunk = 1000;
    let chunks = paths.div_ceil(chunk);
    let samples: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ci as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let count = chunk.min(paths - ci * chunk);
            let mut out = Vec::with_capacity(count);
            let mut dw = vec![0.0f64; k];
            for _ in 0..count {
                let mut xi = 0.0;
                let mut eta = vec![0.0; d];
                for s in 0..steps {
                    for w in dw.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *w = z * sd;
                    }
                    let hs = &h_rm[s * k..(s + 1) * k];
                    xi += hs.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>();
                    let gs = &g_rm[s * d * k..(s + 1) * d * k];
                    for p in 0..d {
                        eta[p] += gs[p * k..(p + 1) * k].iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                let zeta = xi - eta.iter().zip(b1.iter()).map(|(a, b)| a * b).sum::<f64>();
                let mut y = Vec::with_capacity(d + 1);
                y.push(zeta);
                y.extend(eta);
                out.push(y);
            }
            out
        })
        .collect();
    sample_covariance(&samples)
}

pub fn sample_covariance(samples: &[Vec<f64>]) -> McCovariance {
    let n = samples.len();
    let m = samples[0].len();
    let mut mean = vec![0.0; m];
    for y in samples {
        for (a, b) in mean.iter_mut().zip(y) {
            *a += b / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(m, m);
    let mut se = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let prods: Vec<f64> = samples.iter().map(|y| (y[i] - mean[i]) * (y[j] - mean[j])).collect();
            let mu = prods.iter().sum::<f64>() / n as f64;
            let var = prods.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / (n - 1) as f64;
            let c = mu * n as f64 / (n - 1) as f64;
            let s = (var / n as f64).sqrt();
            cov[(i, j)] = c;
            cov[(j, i)] = c;
            se[(i, j)] = s;
            se[(j, i)] = s;
        }
    }
    McCovariance {
        cov,
        std_error: se,
        paths: n,
    }
}

/// Largest `|Σ_ij − Ŝ_ij| / SE_ij`.
pub fn max_standardized_gap(sigma: &DMatrix<f64>, mc: &McCovariance) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..sigma.nrows() {
        for j in 0..sigma.ncols() {
            let gap = (sigma[(i, j)] - mc.cov[(i, j)]).abs();
            worst = worst.max(gap / mc.std_error[(i, j)]);
        }
    }
    worst
}

/// `P(|η| > ρ)` for `η ~ N(0, C)` in the plane. In polar coordinates the
/// radial integral is exact, leaving a smooth periodic integrand in the angle
/// for which the trapezoid rule converges geometrically.
pub fn gaussian_exit_probability_2d(c: &DMatrix<f64>, rho: f64, nodes: usize) -> f64 {
    let inv = c.clone().try_inverse().expect("covariance must be invertible");
    let det = c.determinant();
    let mut acc = 0.0;
    for j in 0..nodes {
        let phi = 2.0 * PI * j as f64 / nodes as f64;
        let u = DVector::from_vec(vec![phi.cos(), phi.sin()]);
        let q = (u.transpose() * &inv * &u)[(0, 0)];
        acc += (-0.5 * rho * rho * q).exp() / q;
    }
    acc * (2.0 * PI / nodes as f64) / (2.0 * PI * det.sqrt())
}

/// Random stable matrix: an orthogonal similarity of a block-diagonal matrix
/// with prescribed moduli, so the spectral radius is exactly `radius`.
pub fn stable_matrix(d: usize, radius: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut core = DMatrix::zeros(d, d);
    let mut i = 0;
    let mut first = true;
    while i < d {
        let u: f64 = rand::Rng::random(&mut rng);
        let modulus = if first { radius } else { radius * u };
        first = false;
        if i + 1 < d && u < 0.5 {
            let ang = PI * rand::Rng::random::<f64>(&mut rng);
            core[(i, i)] = modulus * ang.cos();
            core[(i, i + 1)] = -modulus * ang.sin();
            core[(i + 1, i)] = modulus * ang.sin();
            core[(i + 1, i + 1)] = modulus * ang.cos();
            // Nonnormal coupling above the blocks.
            if i + 2 < d {
                core[(i, i + 2)] = 2.0 * u;
            }
            i += 2;
        } else {
            core[(i, i)] = if u < 0.75 { modulus } else { -modulus };
            if i + 1 < d {
                core[(i, i + 1)] = 1.5;
            }
            i += 1;
        }
    }
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    &q * core * q.transpose()
}
