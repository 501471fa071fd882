//! Fixed-step integration of `ẋ = f(x) + σ P(x) Ẇ` and section-crossing
//! detection.
//!
//! The deterministic integrator is classical RK4. The stochastic integrator is
//! Euler–Maruyama in the Itô sense; with `σ = 0` it collapses to explicit Euler,
//! so it is first order in `dt` even without noise while RK4 is fourth order.
//! Convergence of stochastic runs is checked by refining `dt`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Autonomous vector field `f: R^m → R^m`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Jacobian `Df(x)`. The default is a central difference with step
    /// `1e-6·(1+|x_j|)` per coordinate.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        fd_jacobian(self, x)
    }
}

pub fn fd_jacobian<F: VectorField + ?Sized>(field: &F, x: &[f64]) -> DMatrix<f64> {
    let m = field.dim();
    let mut jac = DMatrix::zeros(m, m);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; m];
    let mut fm = vec![0.0; m];
    for j in 0..m {
        let step = 1e-6 * (1.0 + x[j].abs());
        xp[j] = x[j] + step;
        field.drift(&xp, &mut fp);
        xp[j] = x[j] - step;
        field.drift(&xp, &mut fm);
        xp[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}

pub fn drift_vec<F: VectorField + ?Sized>(field: &F, x: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(field.dim());
    field.drift(x, out.as_mut_slice());
    out
}

/// Diffusion matrix `P(x) ∈ R^{m×k}` driven by a `k`-dimensional Wiener process.
pub trait Diffusion: Sync {
    fn dim(&self) -> usize;

    fn noise_dim(&self) -> usize {
        self.dim()
    }

    fn matrix(&self, x: &[f64]) -> DMatrix<f64>;

    /// `out += scale · P(x) dw`.
    fn add_noise(&self, x: &[f64], dw: &[f64], scale: f64, out: &mut [f64]) {
        let p = self.matrix(x);
        for i in 0..p.nrows() {
            let mut acc = 0.0;
            for j in 0..p.ncols() {
                acc += p[(i, j)] * dw[j];
            }
            out[i] += scale * acc;
        }
    }
}

/// Constant diffusion matrix.
#[derive(Debug, Clone)]
pub struct ConstantDiffusion {
    pub matrix: DMatrix<f64>,
}

impl ConstantDiffusion {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn identity(m: usize) -> Self {
        Self::new(DMatrix::identity(m, m))
    }

    pub fn zero(m: usize) -> Self {
        Self::new(DMatrix::zeros(m, m))
    }
}

impl Diffusion for ConstantDiffusion {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn noise_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn matrix(&self, _x: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }

    fn add_noise(&self, _x: &[f64], dw: &[f64], scale: f64, out: &mut [f64]) {
        let p = &self.matrix;
        for j in 0..p.ncols() {
            let w = scale * dw[j];
            if w == 0.0 {
                continue;
            }
            for i in 0..p.nrows() {
                out[i] += p[(i, j)] * w;
            }
        }
    }
}

/// Noise entering selected coordinates only: coordinate `rows[j]` receives
/// `gains[j] · dW_j`. Neuron models use this for current noise on the
/// membrane potentials.
#[derive(Debug, Clone)]
pub struct SelectorDiffusion {
    pub dim: usize,
    pub rows: Vec<usize>,
    pub gains: Vec<f64>,
}

impl Diffusion for SelectorDiffusion {
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.rows.len()
    }

    fn matrix(&self, _x: &[f64]) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.dim, self.rows.len());
        for (j, (&r, &g)) in self.rows.iter().zip(&self.gains).enumerate() {
            p[(r, j)] = g;
        }
        p
    }

    fn add_noise(&self, _x: &[f64], dw: &[f64], scale: f64, out: &mut [f64]) {
        for (j, (&r, &g)) in self.rows.iter().zip(&self.gains).enumerate() {
            out[r] += scale * g * dw[j];
        }
    }
}

/// Sampled trajectory. `states` is stored flat, `dim` values per time.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub seed: Option<u64>,
}

impl Path {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            times: Vec::new(),
            states: Vec::new(),
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        if self.is_empty() {
            None
        } else {
            Some(self.state(self.len() - 1))
        }
    }

    pub fn push(&mut self, t: f64, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        self.times.push(t);
        self.states.extend_from_slice(x);
    }

    /// Values of coordinate `k` along the path.
    pub fn component(&self, k: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.state(i)[k]).collect()
    }
}

/// Classical RK4 stepper with reusable stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(m: usize) -> Self {
        Self {
            k1: vec![0.0; m],
            k2: vec![0.0; m],
            k3: vec![0.0; m],
            k4: vec![0.0; m],
            tmp: vec![0.0; m],
        }
    }

    /// Advance `x` in place by one step of size `h`.
    pub fn step<F: VectorField + ?Sized>(&mut self, field: &F, x: &mut [f64], h: f64) {
        let m = x.len();
        field.drift(x, &mut self.k1);
        for i in 0..m {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        field.drift(&self.tmp, &mut self.k2);
        for i in 0..m {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        field.drift(&self.tmp, &mut self.k3);
        for i in 0..m {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        field.drift(&self.tmp, &mut self.k4);
        for i in 0..m {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Number of fixed steps covering `[t0, t1]` with nominal size `dt`; the step
/// actually used is `(t1 − t0)/n` so the grid ends exactly at `t1`.
pub fn step_count(t0: f64, t1: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!(
            "empty time span [{t0}, {t1}]"
        )));
    }
    let ratio = (t1 - t0) / dt;
    let n = if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) {
        ratio.round()
    } else {
        ratio.ceil()
    };
    Ok((n as usize).max(1))
}

fn check_finite(x: &[f64], step: usize, t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step, time: t })
    }
}

fn check_dims<F: VectorField + ?Sized>(field: &F, x0: &[f64]) -> Result<()> {
    if x0.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            symbol: "x0",
            expected: field.dim(),
            got: x0.len(),
        });
    }
    Ok(())
}

/// RK4 on a fixed grid over `t_span`.
pub fn integrate_deterministic<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t_span: (f64, f64),
    dt: f64,
) -> Result<Path> {
    check_dims(field, x0)?;
    let (t0, t1) = t_span;
    let n = step_count(t0, t1, dt)?;
    let h = (t1 - t0) / n as f64;
    let mut path = Path::new(x0.len());
    path.times.reserve(n + 1);
    path.states.reserve((n + 1) * x0.len());
    let mut x = x0.to_vec();
    path.push(t0, &x);
    let mut rk = Rk4::new(x.len());
    for k in 1..=n {
        rk.step(field, &mut x, h);
        let t = t0 + k as f64 * h;
        check_finite(&x, k, t)?;
        path.push(t, &x);
    }
    Ok(path)
}

/// Explicit Euler on the same grid convention as [`integrate_deterministic`].
pub fn integrate_euler<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t_span: (f64, f64),
    dt: f64,
) -> Result<Path> {
    check_dims(field, x0)?;
    let (t0, t1) = t_span;
    let n = step_count(t0, t1, dt)?;
    let h = (t1 - t0) / n as f64;
    let m = x0.len();
    let mut path = Path::new(m);
    let mut x = x0.to_vec();
    let mut f = vec![0.0; m];
    path.push(t0, &x);
    for k in 1..=n {
        field.drift(&x, &mut f);
        for i in 0..m {
            x[i] += f[i] * h;
        }
        let t = t0 + k as f64 * h;
        check_finite(&x, k, t)?;
        path.push(t, &x);
    }
    Ok(path)
}

/// Independent RNG stream for replicate `index` under `master_seed`.
pub fn stream_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Reusable Euler–Maruyama stepper.
#[derive(Debug, Clone)]
pub struct EulerMaruyama {
    f: Vec<f64>,
    dw: Vec<f64>,
    incr: Vec<f64>,
}

impl EulerMaruyama {
    pub fn new(m: usize, k: usize) -> Self {
        Self {
            f: vec![0.0; m],
            dw: vec![0.0; k],
            incr: vec![0.0; m],
        }
    }

    /// One step `x ← x + f(x)h + σP(x)ΔW`, `ΔW ~ N(0, h·I)`, with `P` taken at
    /// the pre-step state. No random numbers are drawn when `σ = 0`.
    pub fn step<F, D, R>(&mut self, field: &F, diff: &D, x: &mut [f64], h: f64, sigma: f64, rng: &mut R)
    where
        F: VectorField + ?Sized,
        D: Diffusion + ?Sized,
        R: rand::Rng + ?Sized,
    {
        field.drift(x, &mut self.f);
        if sigma != 0.0 {
            let sq = h.sqrt();
            for w in self.dw.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * sq;
            }
            self.incr.iter_mut().for_each(|v| *v = 0.0);
            diff.add_noise(x, &self.dw, sigma, &mut self.incr);
            for i in 0..x.len() {
                x[i] += self.f[i] * h + self.incr[i];
            }
        } else {
            for i in 0..x.len() {
                x[i] += self.f[i] * h;
            }
        }
    }
}

/// Euler–Maruyama path with the RNG seeded from `seed` (stream 0).
pub fn integrate_sde<F, D>(
    field: &F,
    diff: &D,
    x0: &[f64],
    t_span: (f64, f64),
    dt: f64,
    sigma: f64,
    seed: u64,
) -> Result<Path>
where
    F: VectorField + ?Sized,
    D: Diffusion + ?Sized,
{
    let mut rng = stream_rng(seed, 0);
    let mut path = integrate_sde_with(field, diff, x0, t_span, dt, sigma, &mut rng)?;
    path.seed = Some(seed);
    Ok(path)
}

/// Euler–Maruyama path drawing increments from a caller-supplied RNG.
pub fn integrate_sde_with<F, D, R>(
    field: &F,
    diff: &D,
    x0: &[f64],
    t_span: (f64, f64),
    dt: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Path>
where
    F: VectorField + ?Sized,
    D: Diffusion + ?Sized,
    R: rand::Rng + ?Sized,
{
    check_dims(field, x0)?;
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise intensity must be nonnegative, got {sigma}"
        )));
    }
    if diff.dim() != field.dim() {
        return Err(Error::DimensionMismatch {
            symbol: "P",
            expected: field.dim(),
            got: diff.dim(),
        });
    }
    let (t0, t1) = t_span;
    let n = step_count(t0, t1, dt)?;
    let h = (t1 - t0) / n as f64;
    let m = x0.len();
    let mut path = Path::new(m);
    path.times.reserve(n + 1);
    path.states.reserve((n + 1) * m);
    let mut x = x0.to_vec();
    let mut em = EulerMaruyama::new(m, diff.noise_dim());
    path.push(t0, &x);
    for k in 1..=n {
        em.step(field, diff, &mut x, h, sigma, rng);
        let t = t0 + k as f64 * h;
        check_finite(&x, k, t)?;
        path.push(t, &x);
    }
    Ok(path)
}

/// Affine hyperplane `{x : n·(x − x*) = 0}`, optionally restricted to a ball
/// of radius `radius` around `x*`.
#[derive(Debug, Clone)]
pub struct Section {
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    pub radius: Option<f64>,
}

impl Section {
    pub fn new(point: Vec<f64>, normal: Vec<f64>) -> Self {
        Self {
            point,
            normal,
            radius: None,
        }
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = Some(radius);
        self
    }

    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        self.normal
            .iter()
            .zip(x.iter().zip(&self.point))
            .map(|(n, (a, b))| n * (a - b))
            .sum()
    }

    fn accepts(&self, x: &[f64]) -> bool {
        match self.radius {
            None => true,
            Some(r) => {
                let d2: f64 = x.iter().zip(&self.point).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 <= r * r
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossingDirection {
    /// Signed distance goes from negative to nonnegative.
    Up,
    /// Signed distance goes from positive to nonpositive.
    Down,
}

impl CrossingDirection {
    pub fn from_sign(sign: i32) -> Result<Self> {
        match sign {
            1 => Ok(Self::Up),
            -1 => Ok(Self::Down),
            _ => Err(Error::InvalidArgument(format!(
                "crossing direction must be +1 or -1, got {sign}"
            ))),
        }
    }
}

/// Streaming crossing detector: feed samples in time order.
#[derive(Debug, Clone)]
pub struct CrossingDetector {
    pub section: Section,
    pub direction: CrossingDirection,
    prev: Option<(f64, f64, Vec<f64>)>,
}

impl CrossingDetector {
    pub fn new(section: Section, direction: CrossingDirection) -> Self {
        Self {
            section,
            direction,
            prev: None,
        }
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }

    /// Returns the linearly interpolated crossing `(time, state)` if the
    /// segment from the previous sample to `(t, x)` crosses the section.
    pub fn push(&mut self, t: f64, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let g = self.section.signed_distance(x);
        let mut event = None;
        if let Some((tp, gp, xp)) = &self.prev {
            let crossed = match self.direction {
                CrossingDirection::Up => *gp < 0.0 && g >= 0.0,
                CrossingDirection::Down => *gp > 0.0 && g <= 0.0,
            };
            if crossed {
                let s = gp / (gp - g);
                let tc = tp + s * (t - tp);
                let xc: Vec<f64> = xp.iter().zip(x).map(|(a, b)| a + s * (b - a)).collect();
                if self.section.accepts(&xc) {
                    event = Some((tc, xc));
                }
            }
        }
        match &mut self.prev {
            Some((tp, gp, xp)) => {
                *tp = t;
                *gp = g;
                xp.copy_from_slice(x);
            }
            None => self.prev = Some((t, g, x.to_vec())),
        }
        event
    }
}

/// All crossings of `section` along `path` in the given direction.
pub fn detect_section_crossings(
    path: &Path,
    section: &Section,
    direction: CrossingDirection,
) -> Vec<(f64, Vec<f64>)> {
    let mut det = CrossingDetector::new(section.clone(), direction);
    let mut out = Vec::new();
    for i in 0..path.len() {
        if let Some(ev) = det.push(path.times[i], path.state(i)) {
            out.push(ev);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Hopf, LinearField};

    #[test]
    fn zero_field_constant_path() {
        let f = LinearField::new(DMatrix::zeros(2, 2));
        let p = integrate_deterministic(&f, &[1.0, 2.0], (0.0, 1.0), 0.1).unwrap();
        for i in 0..p.len() {
            assert_eq!(p.state(i), &[1.0, 2.0]);
        }
    }

    #[test]
    fn exponential_decay_rk4() {
        let f = LinearField::new(DMatrix::from_element(1, 1, -1.0));
        let p = integrate_deterministic(&f, &[1.0], (0.0, 1.0), 1e-3).unwrap();
        assert!((p.last_state().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-10);
        assert_eq!(p.len(), 1001);
    }

    #[test]
    fn hopf_radius_converges() {
        let p = integrate_deterministic(&Hopf, &[2.0, 0.0], (0.0, 20.0), 1e-3).unwrap();
        let x = p.last_state().unwrap();
        // Closed form of ṙ = r(1 − r²): r² = 1 / (1 + (1/r0² − 1) e^{−2t}).
        let r_exact = (1.0 / (1.0 + (0.25 - 1.0) * (-40.0f64).exp())).sqrt();
        assert!(((x[0] * x[0] + x[1] * x[1]).sqrt() - r_exact).abs() < 1e-6);
    }

    #[test]
    fn zero_noise_matches_euler_bitwise() {
        let diff = ConstantDiffusion::identity(2);
        let a = integrate_sde(&Hopf, &diff, &[0.5, 0.1], (0.0, 3.0), 1e-2, 0.0, 9).unwrap();
        let b = integrate_euler(&Hopf, &[0.5, 0.1], (0.0, 3.0), 1e-2).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.times, b.times);
    }

    #[test]
    fn same_seed_same_path() {
        let diff = ConstantDiffusion::identity(2);
        let a = integrate_sde(&Hopf, &diff, &[1.0, 0.0], (0.0, 2.0), 1e-3, 0.3, 42).unwrap();
        let b = integrate_sde(&Hopf, &diff, &[1.0, 0.0], (0.0, 2.0), 1e-3, 0.3, 42).unwrap();
        assert_eq!(a, b);
        let c = integrate_sde(&Hopf, &diff, &[1.0, 0.0], (0.0, 2.0), 1e-3, 0.3, 43).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn negative_sigma_rejected() {
        let diff = ConstantDiffusion::identity(2);
        assert!(integrate_sde(&Hopf, &diff, &[1.0, 0.0], (0.0, 1.0), 1e-3, -0.1, 1).is_err());
    }

    #[test]
    fn bad_span_rejected() {
        assert!(integrate_deterministic(&Hopf, &[1.0, 0.0], (1.0, 1.0), 1e-3).is_err());
        assert!(integrate_deterministic(&Hopf, &[1.0, 0.0], (0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let f = LinearField::new(DMatrix::from_element(1, 1, 1000.0));
        match integrate_euler(&f, &[1.0], (0.0, 100.0), 0.1) {
            Err(Error::Diverged { step, .. }) => assert!(step > 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn circle_crossings() {
        let dt = 1e-3;
        let mut path = Path::new(2);
        let n = 2500;
        for i in 0..=n {
            let t = i as f64 * dt;
            let a = 2.0 * std::f64::consts::PI * t;
            path.push(t, &[a.cos(), a.sin()]);
        }
        let sec = Section::new(vec![1.0, 0.0], vec![0.0, 1.0]);
        let ev = detect_section_crossings(&path, &sec, CrossingDirection::Up);
        assert_eq!(ev.len(), 2);
        assert!((ev[0].0 - 1.0).abs() < 2.0 * dt);
        assert!((ev[1].0 - 2.0).abs() < 2.0 * dt);
        let never = Section::new(vec![0.0, 5.0], vec![0.0, 1.0]);
        assert!(detect_section_crossings(&path, &never, CrossingDirection::Up).is_empty());
        assert!(detect_section_crossings(&Path::new(2), &sec, CrossingDirection::Up).is_empty());
    }

    #[test]
    fn hopf_period_from_crossings() {
        let p = integrate_deterministic(&Hopf, &[1.0, 0.0], (0.0, 40.0), 1e-3).unwrap();
        // Section through (1, 0) transverse to the circle.
        let sec = Section::new(vec![1.0, 0.0], vec![0.0, 1.0]).with_radius(0.5);
        let ev = detect_section_crossings(&p, &sec, CrossingDirection::Up);
        assert!(ev.len() >= 5);
        for w in ev.windows(2) {
            assert!((w[1].0 - w[0].0 - 2.0 * std::f64::consts::PI).abs() < 1e-3);
        }
    }
}
