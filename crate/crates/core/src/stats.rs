//! Exit-time statistics: hazard curves with Wilson intervals, geometric tail
//! fits with a parametric-bootstrap KS test, and scaling regressions.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::sde::stream_rng;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// One exit-time record. `tau` counts map iterations (or events); a censored
/// record survived `tau` steps without exiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitSample {
    pub replicate: u64,
    pub tau: u64,
    pub censored: bool,
    pub seed: u64,
}

impl ExitSample {
    pub fn exited(replicate: u64, tau: u64, seed: u64) -> Self {
        Self {
            replicate,
            tau,
            censored: false,
            seed,
        }
    }

    pub fn censored(replicate: u64, tau: u64, seed: u64) -> Self {
        Self {
            replicate,
            tau,
            censored: true,
            seed,
        }
    }
}

/// Run-level metadata shared by a batch of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sigma: f64,
    pub h: f64,
    pub spec_id: String,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardEstimate {
    pub n: u64,
    pub at_risk: u64,
    pub events: u64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0).min(p), (center + half).min(1.0).max(p))
}

/// Counts of exits at each step and of censored records ending at each step.
fn tally(samples: &[ExitSample]) -> (Vec<u64>, Vec<u64>) {
    let max_tau = samples.iter().map(|s| s.tau).max().unwrap_or(0) as usize;
    let mut events = vec![0u64; max_tau + 1];
    let mut censored = vec![0u64; max_tau + 1];
    for s in samples {
        if s.censored {
            censored[s.tau as usize] += 1;
        } else {
            events[s.tau as usize] += 1;
        }
    }
    (events, censored)
}

/// `p̂_n = #{τ = n, exited} / #{τ ≥ n}` with Wilson 95% intervals.
/// Censored records are at risk up to and including their censoring step.
pub fn hazard_curve(samples: &[ExitSample]) -> Result<Vec<HazardEstimate>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("exit samples"));
    }
    if samples.iter().any(|s| s.tau == 0) {
        return Err(Error::InvalidArgument("exit times start at 1".into()));
    }
    if samples.iter().all(|s| s.censored) {
        return Err(Error::EmptyInput("uncensored exit samples"));
    }
    let (events, censored) = tally(samples);
    let mut at_risk = samples.len() as u64;
    let mut out = Vec::with_capacity(events.len());
    for n in 1..events.len() {
        if at_risk == 0 {
            break;
        }
        let e = events[n];
        let (lo, hi) = wilson_interval(e, at_risk, Z95);
        out.push(HazardEstimate {
            n: n as u64,
            at_risk,
            events: e,
            p_hat: e as f64 / at_risk as f64,
            ci_low: lo,
            ci_high: hi,
        });
        at_risk -= e + censored[n];
    }
    Ok(out)
}

/// Empirical law: counts of exits at each `n` (index 0 unused) and the number
/// of censored records. Counts always add up to the sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    pub total: u64,
    pub exits: Vec<u64>,
    pub censored: u64,
}

impl EmpiricalLaw {
    pub fn pmf(&self) -> Vec<f64> {
        self.exits.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    pub fn censored_fraction(&self) -> f64 {
        self.censored as f64 / self.total as f64
    }
}

pub fn empirical_law(samples: &[ExitSample]) -> EmpiricalLaw {
    let (exits, censored) = tally(samples);
    EmpiricalLaw {
        total: samples.len() as u64,
        exits,
        censored: censored.iter().sum(),
    }
}

/// Pooled hazard over a window of steps, with its Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledHazard {
    pub events: u64,
    pub exposure: u64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Binomial standard error `√(p(1−p)/exposure)`.
    pub std_error: f64,
}

/// Pool events and at-risk counts over all `n ≥ n0`.
pub fn pooled_hazard(curve: &[HazardEstimate], n0: u64) -> PooledHazard {
    let (events, exposure) = curve
        .iter()
        .filter(|e| e.n >= n0)
        .fold((0u64, 0u64), |(e, x), h| (e + h.events, x + h.at_risk));
    let p = if exposure > 0 {
        events as f64 / exposure as f64
    } else {
        0.0
    };
    let (lo, hi) = wilson_interval(events, exposure, Z95);
    PooledHazard {
        events,
        exposure,
        p_hat: p,
        ci_low: lo,
        ci_high: hi,
        std_error: if exposure > 0 {
            (p * (1.0 - p) / exposure as f64).sqrt()
        } else {
            f64::INFINITY
        },
    }
}

/// Exact (Clopper–Pearson) two-sided interval for `k` successes in `n`
/// trials at level `1 − alpha`.
pub fn clopper_pearson(k: u64, n: u64, alpha: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(k as f64, (n - k + 1) as f64)
            .expect("positive shape parameters")
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new((k + 1) as f64, (n - k) as f64)
            .expect("positive shape parameters")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

/// Is the hazard constant for `n ≥ n0`?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub n0: u64,
    pub min_at_risk: u64,
    /// Number of steps tested.
    pub steps: usize,
    /// Per-step two-sided level after the Bonferroni adjustment.
    pub alpha_per_step: f64,
    pub max_low: f64,
    pub min_high: f64,
    /// Whether one constant lies inside every adjusted interval.
    pub flat: bool,
    pub pooled: PooledHazard,
}

/// Tests whether one constant fits inside every per-step interval with
/// `n ≥ n0` and `at_risk ≥ min_at_risk`, at the family-wise 95% level
/// (Bonferroni over the tested steps). The adjusted levels are far in the
/// tails, where Wilson intervals lose coverage for small expected counts,
/// so exact binomial intervals are used here.
pub fn hazard_flatness(curve: &[HazardEstimate], n0: u64, min_at_risk: u64) -> FlatnessReport {
    let tested: Vec<&HazardEstimate> = curve
        .iter()
        .filter(|e| e.n >= n0 && e.at_risk >= min_at_risk)
        .collect();
    let alpha = 0.05 / tested.len().max(1) as f64;
    let mut max_low: f64 = 0.0;
    let mut min_high: f64 = 1.0;
    for e in &tested {
        let (lo, hi) = clopper_pearson(e.events, e.at_risk, alpha);
        max_low = max_low.max(lo);
        min_high = min_high.min(hi);
    }
    let pooled = pooled_hazard(
        &tested.iter().map(|e| **e).collect::<Vec<_>>(),
        n0,
    );
    FlatnessReport {
        n0,
        min_at_risk,
        steps: tested.len(),
        alpha_per_step: alpha,
        max_low,
        min_high,
        flat: !tested.is_empty() && max_low <= min_high,
        pooled,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub n0: u64,
    pub n_tail: usize,
    pub events: u64,
    /// Geometric parameter of `τ − n0 + 1` given `τ ≥ n0`.
    pub p_mle: f64,
    pub p_std_error: f64,
    /// Sup distance between the Kaplan–Meier survival and `(1−p)^k`.
    pub ks_stat: f64,
    pub p_value: f64,
    pub bootstrap_replicates: usize,
    pub status: FitStatus,
}

#[derive(Debug, Clone)]
pub struct TailFitOptions {
    pub bootstrap_replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    pub min_tail: usize,
    pub min_events: u64,
}

impl Default for TailFitOptions {
    fn default() -> Self {
        Self {
            bootstrap_replicates: 200,
            seed: 0x5eed,
            alpha: 0.01,
            min_tail: 30,
            min_events: 10,
        }
    }
}

/// Shifted tail records `(k ≥ 1, censored)`.
fn shifted_tail(samples: &[ExitSample], n0: u64) -> Vec<(u64, bool)> {
    samples
        .iter()
        .filter(|s| s.tau >= n0)
        .map(|s| (s.tau - n0 + 1, s.censored))
        .collect()
}

fn geometric_mle(tail: &[(u64, bool)]) -> (f64, u64, u64) {
    let events = tail.iter().filter(|t| !t.1).count() as u64;
    let exposure: u64 = tail.iter().map(|t| t.0).sum();
    let p = if exposure > 0 {
        events as f64 / exposure as f64
    } else {
        0.0
    };
    (p, events, exposure)
}

/// Kaplan–Meier vs geometric survival, sup over integer support points.
fn ks_distance(tail: &[(u64, bool)], p: f64) -> f64 {
    let max_k = tail.iter().map(|t| t.0).max().unwrap_or(0) as usize;
    let mut ev = vec![0u64; max_k + 1];
    let mut ce = vec![0u64; max_k + 1];
    for &(k, c) in tail {
        if c {
            ce[k as usize] += 1;
        } else {
            ev[k as usize] += 1;
        }
    }
    let mut at_risk = tail.len() as u64;
    let mut surv = 1.0;
    let mut model = 1.0;
    let mut d: f64 = 0.0;
    for k in 1..=max_k {
        if at_risk == 0 {
            break;
        }
        surv *= 1.0 - ev[k] as f64 / at_risk as f64;
        model *= 1.0 - p;
        d = d.max((surv - model).abs());
        at_risk -= ev[k] + ce[k];
    }
    d
}

/// Conditional on `τ ≥ n0`, fit `τ − n0 + 1 ~ Geometric(p)` by maximum
/// likelihood (censoring-aware) and test the fit with a KS statistic
/// calibrated by a parametric bootstrap under the same censoring limit.
pub fn geometric_tail_fit(samples: &[ExitSample], n0: u64, opts: &TailFitOptions) -> TailFit {
    let n0 = n0.max(1);
    let tail = shifted_tail(samples, n0);
    let (p, events, exposure) = geometric_mle(&tail);
    let inconclusive = |ks: f64| TailFit {
        n0,
        n_tail: tail.len(),
        events,
        p_mle: p,
        p_std_error: f64::NAN,
        ks_stat: ks,
        p_value: f64::NAN,
        bootstrap_replicates: 0,
        status: FitStatus::Inconclusive,
    };
    if tail.len() < opts.min_tail || events < opts.min_events || !(p > 0.0) {
        return inconclusive(f64::NAN);
    }
    let ks = ks_distance(&tail, p);
    // Observed information of the censored geometric likelihood.
    let p_std_error = if p < 1.0 {
        let info = events as f64 / (p * p) + (exposure - events) as f64 / ((1.0 - p) * (1.0 - p));
        1.0 / info.sqrt()
    } else {
        0.0
    };
    let limit = tail.iter().filter(|t| t.1).map(|t| t.0).max();
    let mut exceed = 0usize;
    let b = opts.bootstrap_replicates;
    if p >= 1.0 {
        // Degenerate at k = 1: the fitted law reproduces the data exactly.
        return TailFit {
            n0,
            n_tail: tail.len(),
            events,
            p_mle: p,
            p_std_error,
            ks_stat: ks,
            p_value: 1.0,
            bootstrap_replicates: 0,
            status: FitStatus::Pass,
        };
    }
    let geo = Geometric::new(p).expect("valid geometric parameter");
    let mut sim = vec![(0u64, false); tail.len()];
    for rep in 0..b {
        let mut rng = stream_rng(opts.seed, rep as u64);
        for slot in sim.iter_mut() {
            let k = 1 + geo.sample(&mut rng);
            *slot = match limit {
                Some(c) if k > c => (c, true),
                _ => (k, false),
            };
        }
        let (ps, ..) = geometric_mle(&sim);
        if ks_distance(&sim, ps) >= ks {
            exceed += 1;
        }
    }
    let p_value = (1 + exceed) as f64 / (b + 1) as f64;
    TailFit {
        n0,
        n_tail: tail.len(),
        events,
        p_mle: p,
        p_std_error,
        ks_stat: ks,
        p_value,
        bootstrap_replicates: b,
        status: if p_value > opts.alpha {
            FitStatus::Pass
        } else {
            FitStatus::Fail
        },
    }
}

/// Convert per-epoch event counts (all observed, none censored) into samples
/// with `tau = count + shift`. Counts that can be zero need `shift ≥ 1`.
pub fn counts_to_samples(counts: &[u64], shift: u64) -> Vec<ExitSample> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| ExitSample::exited(i as u64, c + shift, 0))
        .collect()
}

/// Start of the asymptotic regime: the largest `n` that still has at least
/// `min_at_risk` samples at risk, but no earlier than the mode of `tau`.
pub fn tail_onset(samples: &[ExitSample], min_at_risk: u64) -> Option<u64> {
    let taus: Vec<u64> = samples.iter().map(|s| s.tau).collect();
    let m = mode(&taus)?;
    let curve = hazard_curve(samples).ok()?;
    let deepest = curve
        .iter()
        .filter(|e| e.at_risk >= min_at_risk)
        .map(|e| e.n)
        .max()?;
    Some(deepest.max(m))
}

/// Most frequent count (ties go to the smaller value).
pub fn mode(counts: &[u64]) -> Option<u64> {
    let max = *counts.iter().max()?;
    let mut hist = vec![0usize; max as usize + 1];
    for &c in counts {
        hist[c as usize] += 1;
    }
    let best = hist.iter().copied().max().unwrap();
    hist.iter().position(|&h| h == best).map(|i| i as u64)
}

/// Ordinary least squares `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_std_error: f64,
    pub n: usize,
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::DimensionMismatch {
            symbol: "y",
            expected: n,
            got: y.len(),
        });
    }
    if n < 2 {
        return Err(Error::EmptyInput("regression points"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("regressor has no spread".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - intercept - slope * a;
            e * e
        })
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_std_error = if n > 2 {
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        slope_std_error,
        n,
    })
}

/// Hazard estimate at one noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPoint {
    pub sigma: f64,
    pub p_hat: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaScalingReport {
    pub points: Vec<SigmaPoint>,
    /// Fit of `log(p̂/σ)` against `σ^{-2}`.
    pub fit: Option<LinearFit>,
    pub slope_negative: bool,
    pub status: FitStatus,
    pub notes: Vec<String>,
}

/// Regress `log(p̂/σ)` on `σ^{-2}`. Passes when the slope is negative.
/// Inconclusive with fewer than 4 usable points (`p̂ > 0`).
pub fn fit_sigma_law(points: &[SigmaPoint]) -> SigmaScalingReport {
    let mut notes = Vec::new();
    let usable: Vec<&SigmaPoint> = points.iter().filter(|p| p.p_hat > 0.0 && p.sigma > 0.0).collect();
    if usable.len() < points.len() {
        notes.push(format!(
            "{} noise levels without exits were left out",
            points.len() - usable.len()
        ));
    }
    if usable.len() < 4 {
        notes.push("fewer than 4 noise levels with estimable hazard".into());
        return SigmaScalingReport {
            points: points.to_vec(),
            fit: None,
            slope_negative: false,
            status: FitStatus::Inconclusive,
            notes,
        };
    }
    let x: Vec<f64> = usable.iter().map(|p| p.sigma.powi(-2)).collect();
    let y: Vec<f64> = usable.iter().map(|p| (p.p_hat / p.sigma).ln()).collect();
    match ols(&x, &y) {
        Ok(fit) => {
            let neg = fit.slope < 0.0;
            if !neg {
                notes.push("hazard does not decrease with the noise level as expected".into());
            }
            SigmaScalingReport {
                points: points.to_vec(),
                fit: Some(fit),
                slope_negative: neg,
                status: if neg { FitStatus::Pass } else { FitStatus::Fail },
                notes,
            }
        }
        Err(e) => {
            notes.push(e.to_string());
            SigmaScalingReport {
                points: points.to_vec(),
                fit: None,
                slope_negative: false,
                status: FitStatus::Inconclusive,
                notes,
            }
        }
    }
}

/// Pooled tail hazard of each run, then [`fit_sigma_law`].
pub fn sigma_scaling_report(runs: &[(f64, Vec<ExitSample>)], n0: u64) -> Result<SigmaScalingReport> {
    let mut points = Vec::with_capacity(runs.len());
    for (sigma, samples) in runs {
        let curve = hazard_curve(samples)?;
        let pooled = pooled_hazard(&curve, n0);
        points.push(SigmaPoint {
            sigma: *sigma,
            p_hat: pooled.p_hat,
            std_error: pooled.std_error,
        });
    }
    Ok(fit_sigma_law(&points))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapePoint {
    pub sigma: f64,
    pub h: f64,
    pub p_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperShapeReport {
    pub points: Vec<ShapePoint>,
    /// Fit of `log p̂` against `log(σh²)`.
    pub fit: Option<LinearFit>,
    /// `max p̂ / (σh²)^{2/3}` over points with `σh² > 0`.
    pub c_hat: f64,
    pub all_below_envelope: bool,
}

/// Diagnostic for the upper bound `p ≤ C (σh²)^{2/3}`.
pub fn hazard_upper_shape(points: &[ShapePoint]) -> UpperShapeReport {
    let scale = |p: &ShapePoint| p.sigma * p.h * p.h;
    let c_hat = points
        .iter()
        .filter(|p| scale(p) > 0.0)
        .map(|p| p.p_hat / scale(p).powf(2.0 / 3.0))
        .fold(0.0, f64::max);
    let all_below = points.iter().all(|p| {
        let s = scale(p);
        if s > 0.0 {
            p.p_hat <= c_hat * s.powf(2.0 / 3.0) * (1.0 + 1e-12)
        } else {
            p.p_hat == 0.0
        }
    });
    let usable: Vec<&ShapePoint> = points.iter().filter(|p| p.p_hat > 0.0 && scale(p) > 0.0).collect();
    let fit = if usable.len() >= 2 {
        let x: Vec<f64> = usable.iter().map(|p| scale(p).ln()).collect();
        let y: Vec<f64> = usable.iter().map(|p| p.p_hat.ln()).collect();
        ols(&x, &y).ok()
    } else {
        None
    };
    UpperShapeReport {
        points: points.to_vec(),
        fit,
        c_hat,
        all_below_envelope: all_below,
    }
}

/// Draw `n` geometric exit times with parameter `p` (support `1, 2, …`),
/// censored at `max_n`.
pub fn synthetic_geometric<R: Rng + ?Sized>(p: f64, n: usize, max_n: u64, rng: &mut R) -> Vec<ExitSample> {
    let geo = Geometric::new(p).expect("valid geometric parameter");
    (0..n)
        .map(|i| {
            let k = 1 + geo.sample(rng);
            if k > max_n {
                ExitSample::censored(i as u64, max_n, 0)
            } else {
                ExitSample::exited(i as u64, k, 0)
            }
        })
        .collect()
}
