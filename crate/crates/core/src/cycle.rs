//! Limit cycle location, moving frame and reduced-system coefficients.
//!
//! Time is rescaled so that the stored cycle has period one: on the rescaled
//! clock the drift is `F = T f`, its Jacobian `T Df`, and the diffusion
//! `√T P` (Brownian scaling of `W_{Tθ}`).
//!
//! Grid conventions: the cycle and the frame live on a fine grid of `N`
//! points `θ_j = j/N`. The coefficient tables live on the coarse grid of
//! `N/2` points; the principal solution `X` is advanced by RK4 with step
//! `2/N`, taking the midpoint stages from the odd fine points.

use log::{debug, warn};
use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    eigenvalues, expm, max_abs, orthonormal_complement, polar_orthonormalize, so_log,
    spectral_norm,
};
use crate::sde::{drift_vec, Diffusion, Rk4, VectorField};

#[derive(Debug, Clone)]
pub struct CycleOptions {
    /// Step used for the transient (original time units).
    pub dt: f64,
    /// Fine grid size per period; rounded up to a multiple of 4 and to at
    /// least `T/dt`.
    pub grid_points: usize,
    /// Shooting residual tolerance, relative to `1 + |x|`.
    pub tol_newton: f64,
    pub max_newton_iter: usize,
    /// Time spent before the first section is placed.
    pub burn_in: f64,
    /// Upper bound on transient time.
    pub max_transient: f64,
    /// Successive returns closer than this (relative to the loop diameter)
    /// end the transient.
    pub coarse_tol: f64,
    /// Tolerance for declaring a nontrivial Floquet multiplier critical.
    pub unit_circle_tol: f64,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            grid_points: 4096,
            tol_newton: 1e-10,
            max_newton_iter: 30,
            burn_in: 0.0,
            max_transient: 1e4,
            coarse_tol: 1e-4,
            unit_circle_tol: 1e-6,
        }
    }
}

/// Periodic orbit sampled on `θ_j = j/N`, period `T` in original time.
#[derive(Debug, Clone)]
pub struct LimitCycle {
    pub dim: usize,
    pub period: f64,
    /// `u[j] = u(j/N)`, `j = 0..N` (the endpoint is not repeated).
    pub u: Vec<DVector<f64>>,
    /// Full-space monodromy `DΦ_T(u(0))`.
    pub monodromy: DMatrix<f64>,
    /// `|Φ_T(u(0)) − u(0)|` on the stored grid.
    pub closure_error: f64,
    pub newton_iterations: usize,
    pub warnings: Vec<String>,
}

impl LimitCycle {
    pub fn n_grid(&self) -> usize {
        self.u.len()
    }

    pub fn theta(&self, j: usize) -> f64 {
        j as f64 / self.n_grid() as f64
    }

    /// Nontrivial multipliers of the full monodromy (the one closest to 1
    /// is removed).
    pub fn nontrivial_multipliers(&self) -> Vec<Complex<f64>> {
        let mut eig = eigenvalues(&self.monodromy);
        if let Some((k, _)) = eig
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1.0).norm().total_cmp(&(b.1 - 1.0).norm()))
        {
            eig.remove(k);
        }
        eig
    }
}

/// RK4 flow with the variational equation; returns the end state, the
/// monodromy and (optionally) the visited states.
fn flow_with_variations<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    horizon: f64,
    steps: usize,
    record: bool,
) -> Result<(Vec<f64>, DMatrix<f64>, Vec<DVector<f64>>)> {
    let m = x0.len();
    let h = horizon / steps as f64;
    let mut x = DVector::from_column_slice(x0);
    let mut mm = DMatrix::<f64>::identity(m, m);
    let mut samples = Vec::new();
    if record {
        samples.reserve(steps);
    }
    for step in 0..steps {
        if record {
            samples.push(x.clone());
        }
        let k1 = drift_vec(field, x.as_slice());
        let j1 = field.jacobian(x.as_slice()) * &mm;
        let x2 = &x + &k1 * (0.5 * h);
        let m2 = &mm + &j1 * (0.5 * h);
        let k2 = drift_vec(field, x2.as_slice());
        let j2 = field.jacobian(x2.as_slice()) * &m2;
        let x3 = &x + &k2 * (0.5 * h);
        let m3 = &mm + &j2 * (0.5 * h);
        let k3 = drift_vec(field, x3.as_slice());
        let j3 = field.jacobian(x3.as_slice()) * &m3;
        let x4 = &x + &k3 * h;
        let m4 = &mm + &j3 * h;
        let k4 = drift_vec(field, x4.as_slice());
        let j4 = field.jacobian(x4.as_slice()) * &m4;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        mm += (j1 + j2 * 2.0 + j3 * 2.0 + j4) * (h / 6.0);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step: step + 1,
                time: (step + 1) as f64 * h,
            });
        }
    }
    Ok((x.as_slice().to_vec(), mm, samples))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Integrate until successive returns to a section through a point on the
/// trajectory agree; returns `(x on the cycle, period estimate)`.
fn settle_onto_cycle<F: VectorField + ?Sized>(
    field: &F,
    guess: &[f64],
    opts: &CycleOptions,
) -> Result<(Vec<f64>, f64)> {
    let m = field.dim();
    let dt = opts.dt;
    let mut rk = Rk4::new(m);
    let mut x = guess.to_vec();
    let mut t = 0.0;
    let mut step_idx = 0usize;
    let advance = |x: &mut Vec<f64>, t: &mut f64, step_idx: &mut usize, rk: &mut Rk4| -> Result<()> {
        rk.step(field, x, dt);
        *t += dt;
        *step_idx += 1;
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Diverged {
                step: *step_idx,
                time: *t,
            })
        }
    };
    while t < opts.burn_in {
        advance(&mut x, &mut t, &mut step_idx, &mut rk)?;
    }

    let mut f = vec![0.0; m];
    let mut budget = 1000.0 * dt;
    let mut last_return: Option<(Vec<f64>, f64)> = None;
    'restart: loop {
        // Place a section through the current state, normal to the flow.
        field.drift(&x, &mut f);
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(fnorm > 1e-12 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max))) {
            return Err(Error::CycleNotFound(
                "trajectory settled onto an equilibrium".into(),
            ));
        }
        let x_ref = x.clone();
        let normal: Vec<f64> = f.iter().map(|v| v / fnorm).collect();
        let g = |y: &[f64]| -> f64 {
            normal
                .iter()
                .zip(y.iter().zip(&x_ref))
                .map(|(n, (a, b))| n * (a - b))
                .sum()
        };
        let mut g_prev = 0.0;
        let mut t_start = t;
        let mut diameter: f64 = 0.0;
        loop {
            if t > opts.max_transient {
                return Err(Error::CycleNotFound(format!(
                    "no convergent returns within transient time {}",
                    opts.max_transient
                )));
            }
            let x_prev = x.clone();
            advance(&mut x, &mut t, &mut step_idx, &mut rk)?;
            diameter = diameter.max(dist(&x, &x_ref));
            let g_now = g(&x);
            if g_prev < 0.0 && g_now >= 0.0 {
                let s = g_prev / (g_prev - g_now);
                let xc: Vec<f64> = x_prev.iter().zip(&x).map(|(a, b)| a + s * (b - a)).collect();
                let tc = t - dt + s * dt;
                if dist(&xc, &x_ref) <= 0.25 * diameter {
                    let loop_time = tc - t_start;
                    if let Some((prev_x, prev_t)) = &last_return {
                        let dx = dist(&xc, prev_x);
                        let dtc = (loop_time - prev_t).abs();
                        debug!("transient return: t={tc:.6} period~{loop_time:.6} dx={dx:.3e}");
                        if dx <= opts.coarse_tol * diameter && dtc <= opts.coarse_tol * loop_time {
                            return Ok((xc, loop_time));
                        }
                    }
                    last_return = Some((xc, loop_time));
                    t_start = tc;
                    diameter = 0.0;
                    budget = budget.max(3.0 * loop_time);
                }
            }
            g_prev = g_now;
            if t - t_start > budget {
                budget *= 2.0;
                last_return = None;
                continue 'restart;
            }
        }
    }
}

/// Locate an attracting periodic orbit from `guess`: transient integration
/// followed by Newton shooting on `(x, T)` with the phase condition
/// `nᵀ(x − x₀) = 0`.
pub fn find_limit_cycle<F: VectorField + ?Sized>(
    field: &F,
    guess: &[f64],
    opts: &CycleOptions,
) -> Result<LimitCycle> {
    let m = field.dim();
    if guess.len() != m {
        return Err(Error::DimensionMismatch {
            symbol: "guess",
            expected: m,
            got: guess.len(),
        });
    }
    if m < 2 {
        return Err(Error::InvalidArgument(
            "a limit cycle needs at least two dimensions".into(),
        ));
    }
    let (x_start, t_start) = settle_onto_cycle(field, guess, opts)?;
    let mut steps = opts.grid_points.max((t_start / opts.dt).ceil() as usize);
    steps = steps.div_ceil(4) * 4;

    let f0 = drift_vec(field, &x_start);
    let normal = &f0 / f0.norm();
    let anchor = DVector::from_column_slice(&x_start);
    let mut x = anchor.clone();
    let mut period = t_start;
    let mut iterations = 0;
    loop {
        let (xt, mono, samples) = flow_with_variations(field, x.as_slice(), period, steps, true)?;
        let xt = DVector::from_vec(xt);
        let residual = (&xt - &x).norm();
        let scale = 1.0 + x.amax();
        debug!("newton iter {iterations}: residual {residual:.3e}, period {period:.12}");
        if residual <= opts.tol_newton * scale {
            let mut warnings = Vec::new();
            let cycle = LimitCycle {
                dim: m,
                period,
                u: samples,
                monodromy: mono,
                closure_error: residual,
                newton_iterations: iterations,
                warnings: Vec::new(),
            };
            for mu in cycle.nontrivial_multipliers() {
                let r = mu.norm();
                if (r - 1.0).abs() <= opts.unit_circle_tol {
                    warnings.push(format!(
                        "non-hyperbolic cycle: nontrivial multiplier {mu} on the unit circle"
                    ));
                } else if r > 1.0 {
                    warnings.push(format!("unstable cycle: multiplier {mu} outside the unit circle"));
                }
            }
            for w in &warnings {
                warn!("{w}");
            }
            return Ok(LimitCycle { warnings, ..cycle });
        }
        if iterations >= opts.max_newton_iter {
            return Err(Error::CycleNotFound(format!(
                "Newton shooting did not converge in {} iterations (residual {residual:.3e})",
                opts.max_newton_iter
            )));
        }
        let fend = drift_vec(field, xt.as_slice());
        let mut jac = DMatrix::<f64>::zeros(m + 1, m + 1);
        jac.view_mut((0, 0), (m, m))
            .copy_from(&(mono - DMatrix::identity(m, m)));
        jac.view_mut((0, m), (m, 1)).copy_from(&fend);
        jac.view_mut((m, 0), (1, m)).copy_from(&normal.transpose());
        let mut rhs = DVector::<f64>::zeros(m + 1);
        rhs.rows_mut(0, m).copy_from(&(&x - &xt));
        rhs[m] = -normal.dot(&(&x - &anchor));
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::CycleNotFound("singular shooting Jacobian".into()))?;
        x += delta.rows(0, m);
        period += delta[m];
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::CycleNotFound("Newton produced a nonpositive period".into()));
        }
        iterations += 1;
    }
}

/// Periodic orthonormal moving frame `{v(θ), Z(θ)}` on the fine grid.
#[derive(Debug, Clone)]
pub struct FrameBundle {
    pub v: Vec<DVector<f64>>,
    pub z: Vec<DMatrix<f64>>,
    /// `Q = Z(0)ᵀ Z_transported(1) ∈ SO(m−1)` before correction.
    pub holonomy: DMatrix<f64>,
    /// `L = log Q`; the stored frame is `Z_transported(θ) exp(−θL)`.
    pub holonomy_log: DMatrix<f64>,
    /// `max|Z(1) − Z(0)|` after correction.
    pub closure_error: f64,
    /// `max_j max|Z_{j+1} − Z_j| / Δθ`.
    pub max_step_change: f64,
}

impl FrameBundle {
    pub fn n_grid(&self) -> usize {
        self.v.len()
    }

    /// `max_j max|Z_jᵀZ_j − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        self.z
            .iter()
            .map(|z| {
                let d = z.ncols();
                max_abs(&(z.transpose() * z - DMatrix::identity(d, d)))
            })
            .fold(0.0, f64::max)
    }

    /// `max_j max(|v_jᵀv_j − 1|, max|v_jᵀZ_j|)`.
    pub fn tangency_error(&self) -> f64 {
        self.v
            .iter()
            .zip(&self.z)
            .map(|(v, z)| (v.norm_squared() - 1.0).abs().max((z.transpose() * v).amax()))
            .fold(0.0, f64::max)
    }
}

/// Build the frame by transporting `Z` along the grid (project onto `v⊥`,
/// then take the orthonormal polar factor) and spreading the holonomy back
/// along the cycle with a one-parameter subgroup of SO(m−1).
pub fn build_frame<F: VectorField + ?Sized>(field: &F, cycle: &LimitCycle) -> Result<FrameBundle> {
    let n = cycle.n_grid();
    let mut v = Vec::with_capacity(n);
    let mut speeds = Vec::with_capacity(n);
    for uj in &cycle.u {
        let f = drift_vec(field, uj.as_slice());
        speeds.push(f.norm());
        v.push(f);
    }
    let max_speed = speeds.iter().copied().fold(0.0, f64::max);
    for (j, (vj, &s)) in v.iter_mut().zip(&speeds).enumerate() {
        if !(s > 1e-10 * max_speed) {
            return Err(Error::TangentDegenerate { index: j, norm: s });
        }
        *vj /= s;
    }

    let z0 = orthonormal_complement(&v[0]);
    let mut z = Vec::with_capacity(n);
    z.push(z0.clone());
    let transport = |zp: &DMatrix<f64>, vj: &DVector<f64>| -> DMatrix<f64> {
        let proj = zp - vj * (vj.transpose() * zp);
        polar_orthonormalize(&proj)
    };
    for j in 1..n {
        let next = transport(&z[j - 1], &v[j]);
        z.push(next);
    }
    let z_end = transport(&z[n - 1], &v[0]);
    let holonomy = z0.transpose() * &z_end;
    let holonomy_log = so_log(&holonomy)?;
    for (j, zj) in z.iter_mut().enumerate().skip(1) {
        let theta = j as f64 / n as f64;
        *zj = &*zj * expm(&(&holonomy_log * (-theta)));
    }
    let z_end_corr = &z_end * expm(&(-&holonomy_log));
    let closure_error = max_abs(&(&z_end_corr - &z0));

    let mut max_step_change: f64 = 0.0;
    for j in 0..n {
        let next = if j + 1 < n { &z[j + 1] } else { &z_end_corr };
        max_step_change = max_step_change.max(max_abs(&(next - &z[j])) * n as f64);
    }
    Ok(FrameBundle {
        v,
        z,
        holonomy,
        holonomy_log,
        closure_error,
        max_step_change,
    })
}

/// Coefficients of the reduced system and of the linearized return map, on
/// the rescaled clock.
#[derive(Debug, Clone)]
pub struct PMCoefficients {
    pub period: f64,
    /// Coarse grid size; entries `i` correspond to `θ_i = i/n_grid`.
    pub n_grid: usize,
    /// Phase–amplitude coupling `a(θ) ∈ R^{m−1}`.
    pub a: Vec<DVector<f64>>,
    /// Transverse linearization `R(θ)`.
    pub r: Vec<DMatrix<f64>>,
    /// Phase noise loading `h(θ) ∈ R^k`.
    pub h: Vec<DVector<f64>>,
    /// Transverse noise loading `H(θ) = P̃ᵀZ ∈ R^{k×(m−1)}`.
    pub h_mat: Vec<DMatrix<f64>>,
    /// Principal solution of `Ẋ = R X`, `n_grid + 1` entries.
    pub x: Vec<DMatrix<f64>>,
    /// `b(θ)`, `n_grid + 1` entries.
    pub b: Vec<DVector<f64>>,
    pub a_mat: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub var_xi: f64,
    pub cov_xi_eta: DVector<f64>,
    pub cov_eta: DMatrix<f64>,
    /// Joint covariance of `(ζ, η)`; index 0 is `ζ`.
    pub sigma: DMatrix<f64>,
    pub diagnostics: CoefficientDiagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct CoefficientDiagnostics {
    /// `max_θ |log det X(θ) − ∫₀^θ tr R|`, i.e. the relative error of the
    /// determinant identity.
    pub liouville_error: f64,
    /// `|Ẋ(1) − R(0)X(1)| / (|R(0)| |X(1)|)` with `Ẋ(1)` from a one-sided
    /// difference of the computed `X`.
    pub conjugacy_residual: f64,
    /// Richardson estimate of the trapezoid error in `Σ`.
    pub quadrature_error: f64,
    /// 2-norm condition number of `X(1)`.
    pub cond_x1: f64,
    pub warnings: Vec<String>,
}

impl PMCoefficients {
    pub fn transverse_dim(&self) -> usize {
        self.a_mat.nrows()
    }

    pub fn theta(&self, i: usize) -> f64 {
        i as f64 / self.n_grid as f64
    }
}

fn rk4_propagator(r0: &DMatrix<f64>, rm: &DMatrix<f64>, r1: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let d = r0.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let k1 = r0.clone();
    let k2 = rm * (&id + &k1 * (0.5 * h));
    let k3 = rm * (&id + &k2 * (0.5 * h));
    let k4 = r1 * (&id + &k3 * h);
    id + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Evaluate `a, R, h, H`, integrate `X`, and assemble `A`, `B`, `b` and the
/// covariance of `(ζ, η)` by the Itô isometry.
pub fn compute_coefficients<F, D>(
    field: &F,
    diff: &D,
    cycle: &LimitCycle,
    frame: &FrameBundle,
) -> Result<PMCoefficients>
where
    F: VectorField + ?Sized,
    D: Diffusion + ?Sized,
{
    let m = cycle.dim;
    let n = cycle.n_grid();
    if field.dim() != m {
        return Err(Error::DimensionMismatch {
            symbol: "f",
            expected: m,
            got: field.dim(),
        });
    }
    if diff.dim() != m {
        return Err(Error::DimensionMismatch {
            symbol: "P",
            expected: m,
            got: diff.dim(),
        });
    }
    if frame.n_grid() != n {
        return Err(Error::DimensionMismatch {
            symbol: "Z",
            expected: n,
            got: frame.n_grid(),
        });
    }
    if n % 4 != 0 || n < 8 {
        return Err(Error::InvalidArgument(format!(
            "grid size must be a multiple of 4 and at least 8, got {n}"
        )));
    }
    let d = m - 1;
    let tp = cycle.period;
    let sqrt_t = tp.sqrt();
    let dth = 1.0 / n as f64;

    // Fine-grid R(θ) = Zᵀ DF Z − Zᵀ Z′ with a fourth-order periodic difference.
    let z = &frame.z;
    let mut r_fine = Vec::with_capacity(n);
    let mut dfs = Vec::with_capacity(n);
    for j in 0..n {
        let df = field.jacobian(cycle.u[j].as_slice()) * tp;
        let zp = (&z[(j + n - 2) % n] - &z[(j + 2) % n] + (&z[(j + 1) % n] - &z[(j + n - 1) % n]) * 8.0)
            * (1.0 / (12.0 * dth));
        let zj = &z[j];
        let rj = zj.transpose() * &df * zj - zj.transpose() * zp;
        r_fine.push(rj);
        dfs.push(df);
    }

    let nc = n / 2;
    let hc = 1.0 / nc as f64;
    let mut a = Vec::with_capacity(nc);
    let mut h = Vec::with_capacity(nc);
    let mut h_mat = Vec::with_capacity(nc);
    let mut r = Vec::with_capacity(nc);
    for i in 0..nc {
        let j = 2 * i;
        let u = cycle.u[j].as_slice();
        let f_resc = drift_vec(field, u) * tp;
        let fn2 = f_resc.norm_squared();
        let fnorm = fn2.sqrt();
        let v = &frame.v[j];
        let zj = &z[j];
        let df = &dfs[j];
        let dfs_sym = (df + df.transpose()) * 0.5;
        a.push(zj.transpose() * (&dfs_sym * v) * (2.0 / fnorm));
        let p = diff.matrix(u) * sqrt_t;
        h.push(p.transpose() * &f_resc / fn2);
        h_mat.push(p.transpose() * zj);
        r.push(r_fine[j].clone());
    }

    // Principal solution and propagators.
    let mut props = Vec::with_capacity(nc);
    let mut x = Vec::with_capacity(nc + 1);
    x.push(DMatrix::<f64>::identity(d, d));
    let mut logdet = vec![0.0; nc + 1];
    for i in 0..nc {
        let p = rk4_propagator(&r_fine[2 * i], &r_fine[2 * i + 1], &r_fine[(2 * i + 2) % n], hc);
        let det = p.determinant();
        logdet[i + 1] = logdet[i] + det.abs().ln();
        let next = &p * &x[i];
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step: i + 1,
                time: (i + 1) as f64 * hc,
            });
        }
        x.push(next);
        props.push(p);
    }
    let a_mat = x[nc].clone();

    // Liouville: log det X(θ_i) vs Simpson on tr R over the fine grid.
    let tr: Vec<f64> = r_fine.iter().map(|m| m.trace()).collect();
    let mut integral = 0.0;
    let mut liouville_error: f64 = 0.0;
    for i in 0..nc {
        let j = 2 * i;
        integral += dth / 3.0 * (tr[j] + 4.0 * tr[j + 1] + tr[(j + 2) % n]);
        liouville_error = liouville_error.max((logdet[i + 1] - integral).abs());
    }

    // B = X(1)⁻¹ Ẋ(1) with Ẋ(1) = R(1)X(1) = R(0)X(1).
    let x1 = &a_mat;
    let xdot1 = &r[0] * x1;
    let lu = x1.clone().lu();
    let b_mat = lu.solve(&xdot1).ok_or_else(|| {
        Error::InvalidArgument("X(1) is singular; B is undefined".into())
    })?;
    let xdot_fd = (&x[nc] * 25.0 - &x[nc - 1] * 48.0 + &x[nc - 2] * 36.0 - &x[nc - 3] * 16.0
        + &x[nc - 4] * 3.0)
        * (1.0 / (12.0 * hc));
    let denom = r[0].norm() * x1.norm();
    let conjugacy_residual = if denom > 0.0 {
        (&xdot_fd - &xdot1).norm() / denom
    } else {
        (&xdot_fd - &xdot1).norm()
    };
    let sv = x1.singular_values();
    let cond_x1 = if d == 0 { 1.0 } else { sv.max() / sv.min() };

    // b(θ)ᵀ = −(∫₀^θ aᵀ X ds) X(θ)⁻¹, cumulative trapezoid.
    let mut cum = DVector::<f64>::zeros(d);
    let mut b = Vec::with_capacity(nc + 1);
    b.push(DVector::zeros(d));
    for i in 0..nc {
        let left = x[i].transpose() * &a[i];
        let right = x[i + 1].transpose() * &a[(i + 1) % nc];
        cum += (left + right) * (0.5 * hc);
        let bi = x[i + 1]
            .transpose()
            .lu()
            .solve(&(-&cum))
            .unwrap_or_else(|| DVector::from_element(d, f64::NAN));
        b.push(bi);
    }
    let b1 = b[nc].clone();

    // Φ(1, θ_i) by backward products, then the Itô-isometry integrals.
    let mut phi = vec![DMatrix::<f64>::identity(d, d); nc + 1];
    for i in (0..nc).rev() {
        phi[i] = &phi[i + 1] * &props[i];
    }
    let integrand = |i: usize| -> (DMatrix<f64>, DVector<f64>, f64) {
        let ip = i % nc;
        let g = &phi[i] * h_mat[ip].transpose();
        (&g * g.transpose(), &g * &h[ip], h[ip].norm_squared())
    };
    let trapezoid = |stride: usize| -> (DMatrix<f64>, DVector<f64>, f64) {
        let step = stride as f64 * hc;
        let mut ce = DMatrix::<f64>::zeros(d, d);
        let mut cx = DVector::<f64>::zeros(d);
        let mut vx = 0.0;
        let mut i = 0;
        while i <= nc {
            let w = if i == 0 || i == nc { 0.5 } else { 1.0 } * step;
            let (gg, gh, hh) = integrand(i);
            ce += gg * w;
            cx += gh * w;
            vx += hh * w;
            i += stride;
        }
        (ce, cx, vx)
    };
    let (cov_eta, cov_xi_eta, var_xi) = trapezoid(1);
    let (ce2, cx2, vx2) = trapezoid(2);
    let cov_eta = (&cov_eta + cov_eta.transpose()) * 0.5;
    let quadrature_error = (max_abs(&(&cov_eta - &ce2)))
        .max((&cov_xi_eta - &cx2).amax())
        .max((var_xi - vx2).abs())
        / 3.0;

    let var_zeta = var_xi - 2.0 * b1.dot(&cov_xi_eta) + b1.dot(&(&cov_eta * &b1));
    let cov_zeta_eta = &cov_xi_eta - &cov_eta * &b1;
    let mut sigma = DMatrix::<f64>::zeros(d + 1, d + 1);
    sigma[(0, 0)] = var_zeta;
    for p in 0..d {
        sigma[(0, p + 1)] = cov_zeta_eta[p];
        sigma[(p + 1, 0)] = cov_zeta_eta[p];
        for q in 0..d {
            sigma[(p + 1, q + 1)] = cov_eta[(p, q)];
        }
    }

    let mut warnings = Vec::new();
    if cond_x1 > 1e10 {
        warnings.push(format!(
            "X(1) is ill-conditioned (cond {cond_x1:.2e}); b(1) and the ζ-entries of Σ are unreliable"
        ));
    }
    Ok(PMCoefficients {
        period: tp,
        n_grid: nc,
        a,
        r,
        h,
        h_mat,
        x,
        b,
        a_mat,
        b_mat,
        var_xi,
        cov_xi_eta,
        cov_eta,
        sigma,
        diagnostics: CoefficientDiagnostics {
            liouville_error,
            conjugacy_residual,
            quadrature_error,
            cond_x1,
            warnings,
        },
    })
}

/// Floquet moduli of `A` and the stability margin.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    /// Moduli in decreasing order.
    pub moduli: Vec<f64>,
    pub spectral_radius: f64,
    /// Largest `ε` with `ρ(A) < 1 − ε`, i.e. `1 − ρ(A)`.
    pub epsilon_max: f64,
    pub stable: bool,
    /// Whether the requested `ε` satisfies `ρ(A) < 1 − ε`.
    pub satisfies_radius: bool,
}

pub fn floquet_stability(a: &DMatrix<f64>, epsilon: f64) -> StabilityReport {
    let mut moduli: Vec<f64> = eigenvalues(a).iter().map(|z| z.norm()).collect();
    moduli.sort_by(|x, y| y.total_cmp(x));
    let rho = moduli.first().copied().unwrap_or(0.0);
    StabilityReport {
        spectral_radius: rho,
        epsilon_max: 1.0 - rho,
        stable: rho < 1.0,
        satisfies_radius: rho < 1.0 - epsilon,
        moduli,
    }
}

/// Comparison of the full-space monodromy with the reduced map.
#[derive(Debug, Clone)]
pub struct MonodromyCheck {
    pub full_multipliers: Vec<Complex<f64>>,
    pub reduced_multipliers: Vec<Complex<f64>>,
    /// `|μ − 1|` for the multiplier of `M` closest to one.
    pub trivial_error: f64,
    /// Largest `|μ_full − μ_A| / (|μ_A| + floor)` over matched pairs, where
    /// `floor = 1e-8 |M|` absorbs eigensolver rounding on tiny multipliers.
    pub max_relative_error: f64,
    /// `|A − Z(0)ᵀ M Z(0)| / |A|`.
    pub projection_error: f64,
}

pub fn monodromy_crosscheck(
    cycle: &LimitCycle,
    frame: &FrameBundle,
    coeffs: &PMCoefficients,
) -> MonodromyCheck {
    let full = eigenvalues(&cycle.monodromy);
    let reduced = eigenvalues(&coeffs.a_mat);
    let mut rest = full.clone();
    let (k, trivial_error) = rest
        .iter()
        .enumerate()
        .map(|(k, z)| (k, (z - 1.0).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, f64::NAN));
    if !rest.is_empty() {
        rest.remove(k);
    }
    let floor = 1e-8 * spectral_norm(&cycle.monodromy);
    let mut max_rel: f64 = 0.0;
    let mut pool = rest;
    for mu in &reduced {
        if pool.is_empty() {
            max_rel = f64::INFINITY;
            break;
        }
        let (idx, err) = pool
            .iter()
            .enumerate()
            .map(|(i, z)| (i, (z - mu).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        pool.remove(idx);
        max_rel = max_rel.max(err / (mu.norm() + floor));
    }
    let z0 = &frame.z[0];
    let proj = z0.transpose() * &cycle.monodromy * z0;
    let an = coeffs.a_mat.norm();
    let projection_error = (&proj - &coeffs.a_mat).norm() / if an > 0.0 { an } else { 1.0 };
    MonodromyCheck {
        full_multipliers: full,
        reduced_multipliers: reduced,
        trivial_error,
        max_relative_error: max_rel,
        projection_error,
    }
}

/// Everything derived from one deterministic cycle.
#[derive(Debug, Clone)]
pub struct CycleAnalysis {
    pub cycle: LimitCycle,
    pub frame: FrameBundle,
    pub coefficients: PMCoefficients,
}

pub fn analyze_cycle<F, D>(field: &F, diff: &D, guess: &[f64], opts: &CycleOptions) -> Result<CycleAnalysis>
where
    F: VectorField + ?Sized,
    D: Diffusion + ?Sized,
{
    let cycle = find_limit_cycle(field, guess, opts)?;
    let frame = build_frame(field, &cycle)?;
    let coefficients = compute_coefficients(field, diff, &cycle, &frame)?;
    Ok(CycleAnalysis {
        cycle,
        frame,
        coefficients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Hopf, LinearField};
    use crate::sde::ConstantDiffusion;
    use std::f64::consts::PI;

    fn hopf_opts() -> CycleOptions {
        CycleOptions {
            grid_points: 2048,
            ..Default::default()
        }
    }

    #[test]
    fn hopf_cycle_period_and_shape() {
        let c = find_limit_cycle(&Hopf, &[2.0, 0.0], &hopf_opts()).unwrap();
        assert!((c.period - 2.0 * PI).abs() < 1e-6);
        for u in &c.u {
            assert!((u.norm() - 1.0).abs() < 1e-8);
        }
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn focus_has_no_cycle() {
        let f = LinearField::focus(0.5, 1.0);
        let opts = CycleOptions {
            max_transient: 200.0,
            ..Default::default()
        };
        match find_limit_cycle(&f, &[1.0, 0.5], &opts) {
            Err(Error::CycleNotFound(_)) => {}
            other => panic!("expected CycleNotFound, got {other:?}"),
        }
    }

    #[test]
    fn hopf_frame_is_analytic_normal() {
        let c = find_limit_cycle(&Hopf, &[2.0, 0.0], &hopf_opts()).unwrap();
        let fr = build_frame(&Hopf, &c).unwrap();
        assert!(max_abs(&(&fr.holonomy - DMatrix::identity(1, 1))) < 1e-12);
        let mut sign = 0.0;
        for (u, z) in c.u.iter().zip(&fr.z) {
            let s = z[(0, 0)] * u[0] + z[(1, 0)] * u[1];
            if sign == 0.0 {
                sign = s.signum();
            }
            assert!((s - sign).abs() < 1e-8);
        }
        assert!(fr.orthonormality_error() < 1e-12);
        assert!(fr.tangency_error() < 1e-12);
    }

    #[test]
    fn hopf_coefficients_match_closed_form() {
        let c = find_limit_cycle(&Hopf, &[2.0, 0.0], &hopf_opts()).unwrap();
        let fr = build_frame(&Hopf, &c).unwrap();
        let co = compute_coefficients(&Hopf, &ConstantDiffusion::identity(2), &c, &fr).unwrap();
        let a = co.a_mat[(0, 0)];
        assert!((a / (-4.0 * PI).exp() - 1.0).abs() < 1e-6, "A = {a}");
        assert!((co.b_mat[(0, 0)] + 4.0 * PI).abs() < 1e-4);
        for ri in &co.r {
            assert!((ri[(0, 0)] + 4.0 * PI).abs() < 1e-6);
        }
        for ai in &co.a {
            assert!(ai.amax() < 1e-8);
        }
        assert!((co.var_xi - 1.0 / (2.0 * PI)).abs() < 1e-8);
        let ce = (1.0 - (-8.0 * PI).exp()) / 4.0;
        assert!((co.cov_eta[(0, 0)] / ce - 1.0).abs() < 1e-4);
        assert!(co.cov_xi_eta.amax() < 1e-8);
    }

    #[test]
    fn zero_diffusion_gives_zero_noise_terms() {
        let c = find_limit_cycle(&Hopf, &[2.0, 0.0], &hopf_opts()).unwrap();
        let fr = build_frame(&Hopf, &c).unwrap();
        let co = compute_coefficients(&Hopf, &ConstantDiffusion::zero(2), &c, &fr).unwrap();
        assert!(co.h.iter().all(|v| v.amax() == 0.0));
        assert!(co.h_mat.iter().all(|v| v.amax() == 0.0));
        assert_eq!(max_abs(&co.sigma), 0.0);
    }

    #[test]
    fn stability_report_cases() {
        let r = floquet_stability(&DMatrix::from_element(1, 1, (-4.0 * PI).exp()), 0.5);
        assert!(r.stable && r.satisfies_radius);
        assert!((r.epsilon_max - 1.0).abs() < 1e-5);
        let r = floquet_stability(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.1, 0.2])), 0.1);
        assert!(!r.stable);
        let r = floquet_stability(&DMatrix::zeros(2, 2), 0.3);
        assert_eq!(r.spectral_radius, 0.0);
        assert_eq!(r.epsilon_max, 1.0);
    }

    #[test]
    fn dimension_mismatch_is_named() {
        let c = find_limit_cycle(&Hopf, &[2.0, 0.0], &hopf_opts()).unwrap();
        let fr = build_frame(&Hopf, &c).unwrap();
        match compute_coefficients(&Hopf, &ConstantDiffusion::identity(3), &c, &fr) {
            Err(Error::DimensionMismatch { symbol, .. }) => assert_eq!(symbol, "P"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
