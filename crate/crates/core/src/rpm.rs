//! Random Poincaré maps: the linearized map
//! `ϱ_n = A(I + σBζ_n)ϱ_{n−1} + ση_n`, the affine recursion
//! `y_n = A(I + σξ_nB)y_{n−1} + δGη_n`, and the full return map obtained by
//! integrating the SDE between returns to the section through `u(0)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cycle::{FrameBundle, LimitCycle, PMCoefficients};
use crate::error::{Error, Result};
use crate::linalg::{min_sym_eigenvalue, sym_sqrt};
use crate::norms::NormOracle;
use crate::sde::{stream_rng, Diffusion, EulerMaruyama, VectorField};
use crate::stats::ExitSample;

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn matvec(m: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        out[i] = acc;
    }
}

fn check_square(symbol: &'static str, m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.nrows() != d {
        return Err(Error::DimensionMismatch {
            symbol,
            expected: d,
            got: m.nrows(),
        });
    }
    if m.ncols() != d {
        return Err(Error::DimensionMismatch {
            symbol,
            expected: d,
            got: m.ncols(),
        });
    }
    Ok(())
}

/// Linearized random return map.
#[derive(Debug, Clone)]
pub struct LinearPMSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: f64,
    /// Covariance of `(ζ, η)`, size `(1+d)×(1+d)`, `ζ` first.
    pub cov: DMatrix<f64>,
    factor: Vec<f64>,
    a_rm: Vec<f64>,
    b_rm: Vec<f64>,
}

impl LinearPMSpec {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, cov: DMatrix<f64>, sigma: f64) -> Result<Self> {
        let d = a.nrows();
        check_square("A", &a, d)?;
        check_square("B", &b, d)?;
        check_square("Sigma", &cov, d + 1)?;
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise intensity must be nonnegative, got {sigma}"
            )));
        }
        let asym = (&cov - cov.transpose()).amax();
        let scale = cov.amax().max(1e-300);
        if asym > 1e-10 * scale {
            return Err(Error::InvalidArgument("Sigma is not symmetric".into()));
        }
        if min_sym_eigenvalue(&cov) < -1e-10 * scale {
            return Err(Error::InvalidArgument(
                "Sigma is not positive semidefinite".into(),
            ));
        }
        let factor = row_major(&sym_sqrt(&cov));
        Ok(Self {
            a_rm: row_major(&a),
            b_rm: row_major(&b),
            a,
            b,
            sigma,
            cov,
            factor,
        })
    }

    pub fn from_coefficients(coeffs: &PMCoefficients, sigma: f64) -> Result<Self> {
        Self::new(
            coeffs.a_mat.clone(),
            coeffs.b_mat.clone(),
            coeffs.sigma.clone(),
            sigma,
        )
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Draw `(ζ, η)` into `out` (length `1+d`) using `scratch` (same length).
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R, scratch: &mut [f64], out: &mut [f64]) {
        let n = self.dim() + 1;
        for s in scratch.iter_mut() {
            *s = StandardNormal.sample(rng);
        }
        matvec(&self.factor, n, scratch, out);
    }
}

/// Allocation-free stepping for [`LinearPMSpec`].
#[derive(Debug, Clone)]
pub struct LinearStepper<'a> {
    spec: &'a LinearPMSpec,
    noise: Vec<f64>,
    scratch: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
}

impl<'a> LinearStepper<'a> {
    pub fn new(spec: &'a LinearPMSpec) -> Self {
        let d = spec.dim();
        Self {
            spec,
            noise: vec![0.0; d + 1],
            scratch: vec![0.0; d + 1],
            tmp: vec![0.0; d],
            tmp2: vec![0.0; d],
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, state: &mut [f64], rng: &mut R) {
        let s = self.spec;
        let d = s.dim();
        if s.sigma == 0.0 {
            self.tmp.copy_from_slice(state);
            matvec(&s.a_rm, d, &self.tmp, state);
            return;
        }
        s.sample_noise(rng, &mut self.scratch, &mut self.noise);
        let zeta = self.noise[0];
        // tmp = ϱ + σζ Bϱ
        matvec(&s.b_rm, d, state, &mut self.tmp);
        for i in 0..d {
            self.tmp2[i] = state[i] + s.sigma * zeta * self.tmp[i];
        }
        matvec(&s.a_rm, d, &self.tmp2, state);
        for i in 0..d {
            state[i] += s.sigma * self.noise[1 + i];
        }
    }
}

/// One application of the linearized map.
pub fn step_linear<R: Rng + ?Sized>(state: &DVector<f64>, spec: &LinearPMSpec, rng: &mut R) -> DVector<f64> {
    let mut x = state.clone();
    LinearStepper::new(spec).step(x.as_mut_slice(), rng);
    x
}

/// Affine recursion with IID standard normal `ξ_n ∈ R`, `η_n ∈ R^d`.
#[derive(Debug, Clone)]
pub struct KestenSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Symmetric positive definite loading (replaced by `(GGᵀ)^{1/2}` if
    /// needed; the law of `Gη` is unchanged).
    pub g: DMatrix<f64>,
    pub sigma: f64,
    pub delta: f64,
    a_rm: Vec<f64>,
    b_rm: Vec<f64>,
    g_rm: Vec<f64>,
}

impl KestenSpec {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>, sigma: f64, delta: f64) -> Result<Self> {
        let d = a.nrows();
        check_square("A", &a, d)?;
        check_square("B", &b, d)?;
        check_square("G", &g, d)?;
        if !(sigma >= 0.0) || !(delta >= 0.0) {
            return Err(Error::InvalidArgument(
                "sigma and delta must be nonnegative".into(),
            ));
        }
        let g = if d > 0 && g.determinant().abs() == 0.0 {
            return Err(Error::InvalidArgument("G is degenerate".into()));
        } else {
            let symmetric = (&g - g.transpose()).amax() <= 1e-14 * g.amax().max(1e-300);
            if symmetric && min_sym_eigenvalue(&g) > 0.0 {
                g
            } else {
                sym_sqrt(&(&g * g.transpose()))
            }
        };
        Ok(Self {
            a_rm: row_major(&a),
            b_rm: row_major(&b),
            g_rm: row_major(&g),
            a,
            b,
            g,
            sigma,
            delta,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct KestenStepper<'a> {
    spec: &'a KestenSpec,
    eta: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
}

impl<'a> KestenStepper<'a> {
    pub fn new(spec: &'a KestenSpec) -> Self {
        let d = spec.dim();
        Self {
            spec,
            eta: vec![0.0; d],
            tmp: vec![0.0; d],
            tmp2: vec![0.0; d],
        }
    }

    pub fn step<R: Rng + ?Sized>(&mut self, y: &mut [f64], rng: &mut R) {
        let s = self.spec;
        let d = s.dim();
        let xi: f64 = StandardNormal.sample(rng);
        for e in self.eta.iter_mut() {
            *e = StandardNormal.sample(rng);
        }
        matvec(&s.b_rm, d, y, &mut self.tmp);
        for i in 0..d {
            self.tmp2[i] = y[i] + s.sigma * xi * self.tmp[i];
        }
        matvec(&s.a_rm, d, &self.tmp2, y);
        matvec(&s.g_rm, d, &self.eta, &mut self.tmp);
        for i in 0..d {
            y[i] += s.delta * self.tmp[i];
        }
    }
}

pub fn step_kesten<R: Rng + ?Sized>(y: &DVector<f64>, spec: &KestenSpec, rng: &mut R) -> DVector<f64> {
    let mut x = y.clone();
    KestenStepper::new(spec).step(x.as_mut_slice(), rng);
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovEstimate {
    pub alpha: f64,
    /// Batch-means standard error.
    pub std_error: f64,
    pub steps: usize,
    /// `log((1−ε)(1 + σc))`, `c = |B|′√(2/π)`, with `|B|′` bounded by
    /// `γ₂|B|₂`; present when a norm oracle is supplied.
    pub sufficient_bound: Option<f64>,
}

/// Top Lyapunov exponent of the products `∏ A(I + σξ_kB)` by normalized
/// vector iteration. The log growth is accumulated step by step, so the
/// product never overflows.
pub fn lyapunov_top<R: Rng + ?Sized>(
    spec: &KestenSpec,
    n_steps: usize,
    oracle: Option<&NormOracle>,
    rng: &mut R,
) -> LyapunovEstimate {
    let d = spec.dim();
    let batches = 50usize.min(n_steps.max(1));
    let per_batch = (n_steps / batches).max(1);
    let mut y = vec![1.0 / (d as f64).sqrt(); d];
    let mut tmp = vec![0.0; d];
    let mut tmp2 = vec![0.0; d];
    let mut batch_means = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut acc = 0.0;
        for _ in 0..per_batch {
            let xi: f64 = if spec.sigma != 0.0 {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            matvec(&spec.b_rm, d, &y, &mut tmp);
            for i in 0..d {
                tmp2[i] = y[i] + spec.sigma * xi * tmp[i];
            }
            matvec(&spec.a_rm, d, &tmp2, &mut y);
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                acc = f64::NEG_INFINITY;
                y.iter_mut().for_each(|v| *v = 1.0 / (d as f64).sqrt());
                continue;
            }
            acc += norm.ln();
            y.iter_mut().for_each(|v| *v /= norm);
        }
        batch_means.push(acc / per_batch as f64);
    }
    let nb = batch_means.len() as f64;
    let alpha = batch_means.iter().sum::<f64>() / nb;
    let var = if nb > 1.0 {
        batch_means.iter().map(|m| (m - alpha) * (m - alpha)).sum::<f64>() / (nb - 1.0)
    } else {
        f64::NAN
    };
    let sufficient_bound = oracle.map(|o| {
        let c = o.operator_norm_bound(&spec.b) * (2.0 / std::f64::consts::PI).sqrt();
        ((1.0 - o.epsilon) * (1.0 + spec.sigma * c)).ln()
    });
    LyapunovEstimate {
        alpha,
        std_error: (var / nb).sqrt(),
        steps: per_batch * batches,
        sufficient_bound,
    }
}

/// Exit of the linearized map from `D_h`: first `n` with `|ϱ_n|′ > h`,
/// censored at `max_n`.
pub fn simulate_exit_linear<R: Rng + ?Sized>(
    spec: &LinearPMSpec,
    oracle: &NormOracle,
    h: f64,
    start: &[f64],
    max_n: u64,
    rng: &mut R,
) -> (u64, bool) {
    let mut state = start.to_vec();
    let mut stepper = LinearStepper::new(spec);
    for n in 1..=max_n {
        stepper.step(&mut state, rng);
        if !oracle.in_domain(&state, h) {
            return (n, false);
        }
    }
    (max_n, true)
}

/// Exit of the affine recursion from `D_h`.
pub fn simulate_exit_kesten<R: Rng + ?Sized>(
    spec: &KestenSpec,
    oracle: &NormOracle,
    h: f64,
    start: &[f64],
    max_n: u64,
    rng: &mut R,
) -> (u64, bool) {
    let mut state = start.to_vec();
    let mut stepper = KestenStepper::new(spec);
    for n in 1..=max_n {
        stepper.step(&mut state, rng);
        if !oracle.in_domain(&state, h) {
            return (n, false);
        }
    }
    (max_n, true)
}

fn collect_samples<Fun>(replicates: u64, master_seed: u64, run: Fun) -> Vec<ExitSample>
where
    Fun: Fn(&mut rand_chacha::ChaCha8Rng) -> (u64, bool) + Sync,
{
    (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(master_seed, i);
            let (tau, censored) = run(&mut rng);
            ExitSample {
                replicate: i,
                tau,
                censored,
                seed: master_seed,
            }
        })
        .collect()
}

/// Independent replicates of [`simulate_exit_linear`]; replicate `i` uses RNG
/// stream `i` of `master_seed`, so results do not depend on thread count.
pub fn run_linear_ensemble(
    spec: &LinearPMSpec,
    oracle: &NormOracle,
    h: f64,
    start: &[f64],
    max_n: u64,
    replicates: u64,
    master_seed: u64,
) -> Vec<ExitSample> {
    collect_samples(replicates, master_seed, |rng| {
        simulate_exit_linear(spec, oracle, h, start, max_n, rng)
    })
}

pub fn run_kesten_ensemble(
    spec: &KestenSpec,
    oracle: &NormOracle,
    h: f64,
    start: &[f64],
    max_n: u64,
    replicates: u64,
    master_seed: u64,
) -> Vec<ExitSample> {
    collect_samples(replicates, master_seed, |rng| {
        simulate_exit_kesten(spec, oracle, h, start, max_n, rng)
    })
}

/// Section data for the full return map.
#[derive(Debug, Clone)]
pub struct ReturnSection {
    pub u0: DVector<f64>,
    pub v0: DVector<f64>,
    pub z0: DMatrix<f64>,
    pub period: f64,
}

impl ReturnSection {
    pub fn from_cycle(cycle: &LimitCycle, frame: &FrameBundle) -> Self {
        Self {
            u0: cycle.u[0].clone(),
            v0: frame.v[0].clone(),
            z0: frame.z[0].clone(),
            period: cycle.period,
        }
    }

    /// Transverse coordinate `ρ = Z(0)ᵀ(x − u(0))`.
    pub fn coordinate(&self, x: &[f64]) -> DVector<f64> {
        let dx = DVector::from_column_slice(x) - &self.u0;
        self.z0.transpose() * dx
    }

    /// Point `u(0) + Z(0)ρ` on the section.
    pub fn point(&self, rho: &[f64]) -> Vec<f64> {
        (&self.u0 + &self.z0 * DVector::from_column_slice(rho))
            .as_slice()
            .to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct FullMapOptions {
    /// Euler–Maruyama step in original time units.
    pub dt: f64,
    /// Crossings farther than this from `u(0)` are not returns.
    pub section_radius: f64,
    /// A return must come at least this fraction of the period after the
    /// previous one.
    pub min_return_fraction: f64,
    /// No return within this many periods counts as leaving the tube.
    pub return_timeout: f64,
    /// Optional global box `[lo, hi]`; leaving it ends the run.
    pub bounding_box: Option<(Vec<f64>, Vec<f64>)>,
    /// Keep the transverse coordinates of every return.
    pub record_returns: bool,
}

impl Default for FullMapOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            section_radius: 1.0,
            min_return_fraction: 0.5,
            return_timeout: 2.0,
            bounding_box: None,
            record_returns: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullExit {
    pub tau: u64,
    pub censored: bool,
    /// Ended by leaving the bounding box or by a missing return.
    pub escaped: bool,
    pub returns: Vec<DVector<f64>>,
}

/// Iterate the full stochastic return map from `u(0) + Z(0)ρ₀` until the
/// transverse coordinate leaves `D_h`, the trajectory escapes, or
/// `max_returns` returns have occurred.
#[allow(clippy::too_many_arguments)]
pub fn simulate_exit_full<F, D, R>(
    field: &F,
    diff: &D,
    section: &ReturnSection,
    oracle: &NormOracle,
    sigma: f64,
    h: f64,
    max_returns: u64,
    start: &[f64],
    opts: &FullMapOptions,
    rng: &mut R,
) -> Result<FullExit>
where
    F: VectorField + ?Sized,
    D: Diffusion + ?Sized,
    R: Rng + ?Sized,
{
    let m = field.dim();
    if start.len() + 1 != m {
        return Err(Error::DimensionMismatch {
            symbol: "rho0",
            expected: m - 1,
            got: start.len(),
        });
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise intensity must be nonnegative, got {sigma}"
        )));
    }
    let dt = opts.dt;
    let u0 = section.u0.as_slice();
    let v0 = section.v0.as_slice();
    let g = |x: &[f64]| -> f64 { v0.iter().zip(x.iter().zip(u0)).map(|(n, (a, b))| n * (a - b)).sum() };
    let min_gap = opts.min_return_fraction * section.period;
    let timeout = opts.return_timeout * section.period;
    let r2 = opts.section_radius * opts.section_radius;

    let mut x = section.point(start);
    let mut x_prev = x.clone();
    let mut em = EulerMaruyama::new(m, diff.noise_dim());
    let mut g_prev = g(&x);
    let mut since = 0.0;
    let mut n = 0u64;
    let mut returns = Vec::new();
    let mut step = 0usize;
    loop {
        x_prev.copy_from_slice(&x);
        em.step(field, diff, &mut x, dt, sigma, rng);
        step += 1;
        since += dt;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step,
                time: step as f64 * dt,
            });
        }
        if let Some((lo, hi)) = &opts.bounding_box {
            if x.iter().zip(lo.iter().zip(hi)).any(|(v, (l, u))| v < l || v > u) {
                return Ok(FullExit {
                    tau: n + 1,
                    censored: false,
                    escaped: true,
                    returns,
                });
            }
        }
        let g_now = g(&x);
        if g_prev < 0.0 && g_now >= 0.0 && since >= min_gap {
            let s = g_prev / (g_prev - g_now);
            let xc: Vec<f64> = x_prev.iter().zip(&x).map(|(a, b)| a + s * (b - a)).collect();
            let d2: f64 = xc.iter().zip(u0).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 <= r2 {
                n += 1;
                since = (1.0 - s) * dt;
                let rho = section.coordinate(&xc);
                let outside = !oracle.in_domain(rho.as_slice(), h);
                if opts.record_returns {
                    returns.push(rho);
                }
                if outside {
                    return Ok(FullExit {
                        tau: n,
                        censored: false,
                        escaped: false,
                        returns,
                    });
                }
                if n >= max_returns {
                    return Ok(FullExit {
                        tau: n,
                        censored: true,
                        escaped: false,
                        returns,
                    });
                }
            }
        }
        g_prev = g_now;
        if since > timeout {
            return Ok(FullExit {
                tau: n + 1,
                censored: false,
                escaped: true,
                returns,
            });
        }
    }
}

/// Independent replicates of [`simulate_exit_full`] started on the cycle.
#[allow(clippy::too_many_arguments)]
pub fn run_full_ensemble<F, D>(
    field: &F,
    diff: &D,
    section: &ReturnSection,
    oracle: &NormOracle,
    sigma: f64,
    h: f64,
    max_returns: u64,
    opts: &FullMapOptions,
    replicates: u64,
    master_seed: u64,
) -> Result<Vec<(ExitSample, bool)>>
where
    F: VectorField + ?Sized,
    D: Diffusion + ?Sized,
{
    let start = vec![0.0; field.dim() - 1];
    (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(master_seed, i);
            let out = simulate_exit_full(
                field, diff, section, oracle, sigma, h, max_returns, &start, opts, &mut rng,
            )?;
            Ok((
                ExitSample {
                    replicate: i,
                    tau: out.tau,
                    censored: out.censored,
                    seed: master_seed,
                },
                out.escaped,
            ))
        })
        .collect()
}
