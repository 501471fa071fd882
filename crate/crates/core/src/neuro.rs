//! Conductance-based neuron models and spike/burst segmentation.
//!
//! Three models are provided:
//!
//! * `inapik_burster`: persistent sodium plus fast and slow (M-type)
//!   potassium currents, mV/ms units.
//! * `beta_cell_pair`: two electrically coupled pancreatic β-cells, mV and
//!   seconds (conductances in s⁻¹ as tabulated).
//! * `hh_mmo`: a Hodgkin–Huxley variant with slowed potassium activation that
//!   produces mixed-mode oscillations near its Hopf point, mV/ms units.
//!
//! Noise is current noise on the membrane potentials only, with gain `1/C_m`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cycle::{CycleOptions, LimitCycle};
use crate::error::{Error, Result};
use crate::sde::{stream_rng, Diffusion, EulerMaruyama, Path, SelectorDiffusion, VectorField};
use crate::stats::{counts_to_samples, ExitSample};

/// `u / (1 − e^{−u})`, continuous at `u = 0`.
fn exprel(u: f64) -> f64 {
    if u.abs() < 1e-6 {
        1.0 + 0.5 * u + u * u / 12.0
    } else {
        u / -(-u).exp_m1()
    }
}

fn sigmoid(v: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + ((a - v) / b).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuroModelName {
    InapikBurster,
    BetaCellPair,
    HhMmo,
}

impl NeuroModelName {
    pub const ALL: [NeuroModelName; 3] = [Self::InapikBurster, Self::BetaCellPair, Self::HhMmo];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::InapikBurster => "inapik_burster",
            Self::BetaCellPair => "beta_cell_pair",
            Self::HhMmo => "hh_mmo",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))
    }

    /// Default parameter table.
    pub fn default_params(&self) -> &'static [(&'static str, f64)] {
        match self {
            Self::InapikBurster => INAPIK_DEFAULTS,
            Self::BetaCellPair => BETA_DEFAULTS,
            Self::HhMmo => HH_DEFAULTS,
        }
    }

    pub fn default_sigma(&self) -> f64 {
        match self {
            Self::InapikBurster => 1.0,
            Self::BetaCellPair => 10.0,
            Self::HhMmo => 5e-4,
        }
    }
}

const INAPIK_DEFAULTS: &[(&str, f64)] = &[
    ("g_nap", 20.0),
    ("g_k", 10.0),
    ("g_km", 5.0),
    ("g_l", 8.0),
    ("e_na", 60.0),
    ("e_k", -90.0),
    ("e_l", -80.0),
    ("tau_n", 0.152),
    ("tau_y", 20.0),
    ("i_app", 5.0),
    ("a_m", -20.0),
    ("b_m", 15.0),
    ("a_n", -25.0),
    ("b_n", 5.0),
    ("a_y", -10.0),
    ("b_y", 5.0),
    ("c_m", 1.0),
];

const BETA_DEFAULTS: &[(&str, f64)] = &[
    ("g_naca", 1800.0),
    ("e_naca", 100.0),
    ("g_k", 1700.0),
    ("e_k", -75.0),
    ("k_c", 12.0 / 18.0),
    ("g_l", 7.0),
    ("e_l", -40.0),
    ("g_kca", 12.0),
    ("e_ca", 100.0),
    ("epsilon", 0.03),
    ("c_m", 1.0),
    ("g_couple", 170.0),
];

const HH_DEFAULTS: &[(&str, f64)] = &[
    ("g_na", 120.0),
    ("g_k", 36.0),
    ("g_l", 0.3),
    ("e_na", 115.0),
    ("e_k", -12.0),
    ("e_l", 10.5999),
    ("tau_n_bar", 20.0),
    ("tau_h_bar", 1.0),
    ("c_m", 1.0),
    ("i_app", 6.0999),
];

/// Model choice plus a complete parameter map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuroModelSpec {
    pub name: NeuroModelName,
    pub params: BTreeMap<String, f64>,
    pub noise_sigma: f64,
}

impl NeuroModelSpec {
    pub fn defaults(name: NeuroModelName) -> Self {
        Self {
            name,
            params: name
                .default_params()
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            noise_sigma: name.default_sigma(),
        }
    }

    /// Defaults with `overrides` applied; unknown keys are rejected.
    pub fn with_overrides(name: NeuroModelName, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut spec = Self::defaults(name);
        for (k, v) in overrides {
            if k == "sigma" {
                spec.noise_sigma = *v;
                continue;
            }
            match spec.params.get_mut(k) {
                Some(slot) => *slot = *v,
                None => return Err(Error::UnknownParameter(k.clone())),
            }
        }
        Ok(spec)
    }

    fn get(&self, key: &str) -> Result<f64> {
        self.params
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingParameter(key.to_string()))
    }

    pub fn build(&self) -> Result<NeuroModel> {
        for (k, v) in &self.params {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("parameter {k} is not finite")));
            }
            if k.starts_with("g_") && *v < 0.0 {
                return Err(Error::InvalidArgument(format!("conductance {k} is negative")));
            }
        }
        if !(self.get("c_m")? > 0.0) {
            return Err(Error::InvalidArgument("capacitance must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise intensity must be nonnegative".into()));
        }
        Ok(match self.name {
            NeuroModelName::InapikBurster => NeuroModel::Inapik(Inapik {
                g_nap: self.get("g_nap")?,
                g_k: self.get("g_k")?,
                g_km: self.get("g_km")?,
                g_l: self.get("g_l")?,
                e_na: self.get("e_na")?,
                e_k: self.get("e_k")?,
                e_l: self.get("e_l")?,
                tau_n: self.get("tau_n")?,
                tau_y: self.get("tau_y")?,
                i_app: self.get("i_app")?,
                a_m: self.get("a_m")?,
                b_m: self.get("b_m")?,
                a_n: self.get("a_n")?,
                b_n: self.get("b_n")?,
                a_y: self.get("a_y")?,
                b_y: self.get("b_y")?,
                c_m: self.get("c_m")?,
            }),
            NeuroModelName::BetaCellPair => NeuroModel::BetaPair(BetaPair {
                g_naca: self.get("g_naca")?,
                e_naca: self.get("e_naca")?,
                g_k: self.get("g_k")?,
                e_k: self.get("e_k")?,
                k_c: self.get("k_c")?,
                g_l: self.get("g_l")?,
                e_l: self.get("e_l")?,
                g_kca: self.get("g_kca")?,
                e_ca: self.get("e_ca")?,
                epsilon: self.get("epsilon")?,
                c_m: self.get("c_m")?,
                g_couple: self.get("g_couple")?,
            }),
            NeuroModelName::HhMmo => NeuroModel::HhMmo(HhMmo {
                g_na: self.get("g_na")?,
                g_k: self.get("g_k")?,
                g_l: self.get("g_l")?,
                e_na: self.get("e_na")?,
                e_k: self.get("e_k")?,
                e_l: self.get("e_l")?,
                tau_n_bar: self.get("tau_n_bar")?,
                tau_h_bar: self.get("tau_h_bar")?,
                c_m: self.get("c_m")?,
                i_app: self.get("i_app")?,
            }),
        })
    }
}

/// `C_m v̇ = −g_NaP m∞(v)(v−E_Na) − g_K n(v−E_K) − g_KM y(v−E_K) − g_L(v−E_L) + I`,
/// `ṅ = (n∞(v) − n)/τ_n`, `ẏ = (y∞(v) − y)/τ_y`, with
/// `s∞(v) = 1/(1 + exp((a_s − v)/b_s))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Inapik {
    pub g_nap: f64,
    pub g_k: f64,
    pub g_km: f64,
    pub g_l: f64,
    pub e_na: f64,
    pub e_k: f64,
    pub e_l: f64,
    pub tau_n: f64,
    pub tau_y: f64,
    pub i_app: f64,
    pub a_m: f64,
    pub b_m: f64,
    pub a_n: f64,
    pub b_n: f64,
    pub a_y: f64,
    pub b_y: f64,
    pub c_m: f64,
}

impl Inapik {
    pub fn m_inf(&self, v: f64) -> f64 {
        sigmoid(v, self.a_m, self.b_m)
    }

    pub fn n_inf(&self, v: f64) -> f64 {
        sigmoid(v, self.a_n, self.b_n)
    }

    pub fn y_inf(&self, v: f64) -> f64 {
        sigmoid(v, self.a_y, self.b_y)
    }
}

impl VectorField for Inapik {
    fn dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (v, n, y) = (x[0], x[1], x[2]);
        let i_ion = self.g_nap * self.m_inf(v) * (v - self.e_na)
            + self.g_k * n * (v - self.e_k)
            + self.g_km * y * (v - self.e_k)
            + self.g_l * (v - self.e_l);
        out[0] = (self.i_app - i_ion) / self.c_m;
        out[1] = (self.n_inf(v) - n) / self.tau_n;
        out[2] = (self.y_inf(v) - y) / self.tau_y;
    }
}

/// Gating rates of the β-cell model (mV).
#[derive(Debug, Clone, Copy)]
pub struct BetaRates {
    pub m_inf: f64,
    pub h_inf: f64,
    pub n_inf: f64,
    /// `(230(α_n + β_n))^{-1}`, in seconds.
    pub tau_n: f64,
}

pub fn beta_rates(v: f64) -> BetaRates {
    let am = exprel(0.1 * (v + 25.0));
    let bm = 4.0 * (-(v + 50.0) / 18.0).exp();
    let ah = 0.07 * (-0.05 * (v + 50.0)).exp();
    let bh = 1.0 / (1.0 + (-0.1 * (v + 20.0)).exp());
    let an = 0.1 * exprel(0.1 * (v + 20.0));
    let bn = 0.125 * (-(v + 30.0) / 80.0).exp();
    BetaRates {
        m_inf: am / (am + bm),
        h_inf: ah / (ah + bh),
        n_inf: an / (an + bn),
        tau_n: 1.0 / (230.0 * (an + bn)),
    }
}

/// Two β-cells with state `(v₁, n₁, y₁, v₂, n₂, y₂)`:
/// `C_m v̇ᵢ = g_NaCa m∞³h∞(E_NaCa − v) + g_KCa y/(1+y)(E_K − v) + g_K n⁴(E_K − v)
///          + g_l(E_l − v) + g(v_j − v_i)`,
/// `ṅᵢ = (n∞ − n)/τ_n`, `ẏᵢ = ε(m∞³h∞(E_Ca − v) − k_C y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaPair {
    pub g_naca: f64,
    pub e_naca: f64,
    pub g_k: f64,
    pub e_k: f64,
    pub k_c: f64,
    pub g_l: f64,
    pub e_l: f64,
    pub g_kca: f64,
    pub e_ca: f64,
    pub epsilon: f64,
    pub c_m: f64,
    pub g_couple: f64,
}

impl BetaPair {
    fn cell(&self, v: f64, n: f64, y: f64) -> (f64, f64, f64) {
        let r = beta_rates(v);
        let gate = r.m_inf.powi(3) * r.h_inf;
        let i_naca = self.g_naca * gate * (self.e_naca - v);
        let i_kca = self.g_kca * y / (1.0 + y) * (self.e_k - v);
        let i_k = self.g_k * n.powi(4) * (self.e_k - v);
        let i_l = self.g_l * (self.e_l - v);
        (
            i_naca + i_kca + i_k + i_l,
            (r.n_inf - n) / r.tau_n,
            self.epsilon * (gate * (self.e_ca - v) - self.k_c * y),
        )
    }
}

impl VectorField for BetaPair {
    fn dim(&self) -> usize {
        6
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (a1, b1, c1) = self.cell(x[0], x[1], x[2]);
        let (a2, b2, c2) = self.cell(x[3], x[4], x[5]);
        out[0] = (a1 + self.g_couple * (x[3] - x[0])) / self.c_m;
        out[1] = b1;
        out[2] = c1;
        out[3] = (a2 + self.g_couple * (x[0] - x[3])) / self.c_m;
        out[4] = b2;
        out[5] = c2;
    }
}

/// Hodgkin–Huxley rates (mV, ms).
#[derive(Debug, Clone, Copy)]
pub struct HhRates {
    pub m_inf: f64,
    pub n_inf: f64,
    pub h_inf: f64,
    /// `1/(α_n + β_n)` before scaling by `τ̄_n`.
    pub tau_n: f64,
    pub tau_h: f64,
}

pub fn hh_rates(v: f64) -> HhRates {
    let am = exprel(0.1 * (v - 25.0));
    let bm = 4.0 * (-v / 18.0).exp();
    let ah = 0.07 * (-0.05 * v).exp();
    let bh = 1.0 / (1.0 + (0.1 * (30.0 - v)).exp());
    let an = 0.1 * exprel(0.1 * (v - 10.0));
    let bn = 0.125 * (-v / 80.0).exp();
    HhRates {
        m_inf: am / (am + bm),
        n_inf: an / (an + bn),
        h_inf: ah / (ah + bh),
        tau_n: 1.0 / (an + bn),
        tau_h: 1.0 / (ah + bh),
    }
}

/// `C_m v̇ = −g_Na m∞³h(v − E_Na) − g_K n⁴(v − E_K) − g_l(v − E_l) + I`,
/// `ṅ = (n∞ − n)/(τ̄_n τ_n)`, `ḣ = (h∞ − h)/(τ̄_h τ_h)`.
///
/// The time-constant scale factors `τ̄` multiply the voltage-dependent time
/// constants. `I` is a constant applied current that places the system just
/// past its Hopf point, where the small-amplitude cycle exists.
#[derive(Debug, Clone, PartialEq)]
pub struct HhMmo {
    pub g_na: f64,
    pub g_k: f64,
    pub g_l: f64,
    pub e_na: f64,
    pub e_k: f64,
    pub e_l: f64,
    pub tau_n_bar: f64,
    pub tau_h_bar: f64,
    pub c_m: f64,
    pub i_app: f64,
}

impl VectorField for HhMmo {
    fn dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (v, n, h) = (x[0], x[1], x[2]);
        let r = hh_rates(v);
        let i_ion = self.g_na * r.m_inf.powi(3) * h * (v - self.e_na)
            + self.g_k * n.powi(4) * (v - self.e_k)
            + self.g_l * (v - self.e_l);
        out[0] = (self.i_app - i_ion) / self.c_m;
        out[1] = (r.n_inf - n) / (self.tau_n_bar * r.tau_n);
        out[2] = (r.h_inf - h) / (self.tau_h_bar * r.tau_h);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NeuroModel {
    Inapik(Inapik),
    BetaPair(BetaPair),
    HhMmo(HhMmo),
}

impl VectorField for NeuroModel {
    fn dim(&self) -> usize {
        match self {
            Self::Inapik(m) => m.dim(),
            Self::BetaPair(m) => m.dim(),
            Self::HhMmo(m) => m.dim(),
        }
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Inapik(m) => m.drift(x, out),
            Self::BetaPair(m) => m.drift(x, out),
            Self::HhMmo(m) => m.drift(x, out),
        }
    }
}

impl NeuroModel {
    pub fn name(&self) -> NeuroModelName {
        match self {
            Self::Inapik(_) => NeuroModelName::InapikBurster,
            Self::BetaPair(_) => NeuroModelName::BetaCellPair,
            Self::HhMmo(_) => NeuroModelName::HhMmo,
        }
    }

    fn c_m(&self) -> f64 {
        match self {
            Self::Inapik(m) => m.c_m,
            Self::BetaPair(m) => m.c_m,
            Self::HhMmo(m) => m.c_m,
        }
    }

    /// Unit-intensity current noise on the membrane potentials.
    pub fn diffusion(&self) -> SelectorDiffusion {
        let g = 1.0 / self.c_m();
        match self {
            Self::BetaPair(_) => SelectorDiffusion {
                dim: 6,
                rows: vec![0, 3],
                gains: vec![g, g],
            },
            _ => SelectorDiffusion {
                dim: 3,
                rows: vec![0],
                gains: vec![g],
            },
        }
    }

    /// Index of the recorded membrane potential.
    pub fn voltage_index(&self) -> usize {
        0
    }

    /// A state close to the deterministic cycle for default parameters.
    pub fn default_guess(&self) -> Vec<f64> {
        match self {
            Self::Inapik(_) => vec![-30.0, 0.3, 0.03],
            Self::BetaPair(_) => vec![-42.8, 0.2583, 0.3377, -42.8, 0.2583, 0.3377],
            Self::HhMmo(_) => vec![3.85, 0.3772, 0.4751],
        }
    }

    /// Cycle-finder settings suited to the time scales of each model.
    pub fn cycle_options(&self) -> CycleOptions {
        match self {
            Self::Inapik(_) => CycleOptions {
                dt: 1e-3,
                grid_points: 32768,
                burn_in: 200.0,
                max_transient: 2000.0,
                ..Default::default()
            },
            Self::BetaPair(_) => CycleOptions {
                dt: 1e-5,
                grid_points: 65536,
                burn_in: 2.0,
                max_transient: 600.0,
                ..Default::default()
            },
            Self::HhMmo(_) => CycleOptions {
                dt: 5e-3,
                grid_points: 16384,
                burn_in: 500.0,
                max_transient: 20000.0,
                ..Default::default()
            },
        }
    }

    /// Step used for long stochastic runs.
    pub fn default_sde_dt(&self) -> f64 {
        match self {
            Self::Inapik(_) => 1e-3,
            Self::BetaPair(_) => 1e-5,
            Self::HhMmo(_) => 5e-3,
        }
    }

    /// Segmentation rule derived from the deterministic cycle's voltage range.
    pub fn segmentation(&self, cycle: &LimitCycle) -> Segmentation {
        let vi = self.voltage_index();
        let (lo, hi) = cycle
            .u
            .iter()
            .map(|u| u[vi])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let mid = 0.5 * (lo + hi);
        let amp = hi - lo;
        match self {
            Self::Inapik(_) | Self::BetaPair(_) => Segmentation::SpikesPerBurst {
                up: mid,
                down: mid - 10.0,
                gap_factor: match self {
                    Self::Inapik(_) => 3.0,
                    _ => 2.0,
                },
            },
            Self::HhMmo(_) => Segmentation::SmallBetweenSpikes {
                small_up: mid,
                small_down: mid - 0.25 * amp,
                big_up: hi + 4.0 * amp,
                big_down: hi,
                merge_window: 0.5 * cycle.period,
            },
        }
    }
}

/// Hysteresis spike detector: an event is an upward crossing of `up` after
/// the signal has been below `down`.
#[derive(Debug, Clone)]
pub struct SpikeDetector {
    pub up: f64,
    pub down: f64,
    armed: bool,
    prev: Option<(f64, f64)>,
}

impl SpikeDetector {
    pub fn new(up: f64, down: f64) -> Result<Self> {
        if !(up > down) {
            return Err(Error::InvalidArgument(format!(
                "spike thresholds need up > down, got up={up}, down={down}"
            )));
        }
        Ok(Self {
            up,
            down,
            armed: false,
            prev: None,
        })
    }

    pub fn push(&mut self, t: f64, v: f64) -> Option<f64> {
        let mut event = None;
        if let Some((tp, vp)) = self.prev {
            if vp < self.down {
                self.armed = true;
            }
            if self.armed && vp < self.up && v >= self.up {
                event = Some(tp + (self.up - vp) / (v - vp) * (t - tp));
                self.armed = false;
            }
        }
        self.prev = Some((t, v));
        event
    }
}

/// Spike times along coordinate `v_index` of `path`.
pub fn detect_spikes(path: &Path, v_index: usize, up: f64, down: f64) -> Result<Vec<f64>> {
    let mut det = SpikeDetector::new(up, down)?;
    Ok((0..path.len())
        .filter_map(|i| det.push(path.times[i], path.state(i)[v_index]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Segmentation {
    SpikesPerBurst {
        up: f64,
        down: f64,
        gap_factor: f64,
    },
    SmallBetweenSpikes {
        small_up: f64,
        small_down: f64,
        big_up: f64,
        big_down: f64,
        /// A small event this close before a large spike is its upstroke.
        merge_window: f64,
    },
}

/// How [`count_per_epoch`] groups events.
#[derive(Debug, Clone, PartialEq)]
pub enum CountMode<'a> {
    /// Bursts are separated by inter-spike intervals longer than
    /// `gap_factor` times the median interval.
    SpikesPerBurst { gap_factor: f64 },
    /// Count `small_events` strictly between consecutive large spikes, not
    /// counting a small event within `merge_window` before the closing spike.
    SmallBetweenSpikes { small_events: &'a [f64], merge_window: f64 },
}

/// Per-epoch counts with epoch start/end times.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub counts: Vec<u64>,
    pub starts: Vec<f64>,
    pub ends: Vec<f64>,
    /// Count in the epoch still running when the record ends, if any.
    pub open_tail: Option<u64>,
}

impl EventCounts {
    /// Completed epochs as observed samples, the running epoch as a
    /// censored one; `tau = count + shift`.
    pub fn to_samples(&self, shift: u64) -> Vec<ExitSample> {
        let mut out = counts_to_samples(&self.counts, shift);
        if let Some(c) = self.open_tail {
            if c + shift > 0 {
                out.push(ExitSample::censored(out.len() as u64, c + shift, 0));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Group event times into epochs and count events per epoch. With
/// `trim_edges`, the first and last epochs (which a finite record may cut)
/// are dropped from `counts`; the last one is kept as `open_tail`.
pub fn count_per_epoch(events: &[f64], mode: &CountMode<'_>, trim_edges: bool) -> EventCounts {
    let mut out = EventCounts::default();
    match mode {
        CountMode::SpikesPerBurst { .. } if events.len() < 2 => {
            if trim_edges && !events.is_empty() {
                out.open_tail = Some(events.len() as u64);
            } else if !events.is_empty() {
                out.counts.push(events.len() as u64);
                out.starts.push(events[0]);
                out.ends.push(events[0]);
            }
        }
        CountMode::SpikesPerBurst { gap_factor } => {
            let isi: Vec<f64> = events.windows(2).map(|w| w[1] - w[0]).collect();
            let threshold = gap_factor * median(&isi);
            let mut start = events[0];
            let mut count = 1u64;
            for (i, gap) in isi.iter().enumerate() {
                if *gap > threshold {
                    out.counts.push(count);
                    out.starts.push(start);
                    out.ends.push(events[i]);
                    start = events[i + 1];
                    count = 1;
                } else {
                    count += 1;
                }
            }
            out.counts.push(count);
            out.starts.push(start);
            out.ends.push(*events.last().unwrap());
            if trim_edges {
                let n = out.counts.len();
                let last = out.counts[n - 1];
                if n <= 2 {
                    return EventCounts {
                        open_tail: Some(last),
                        ..Default::default()
                    };
                }
                out.open_tail = Some(last);
                out.counts = out.counts[1..n - 1].to_vec();
                out.starts = out.starts[1..n - 1].to_vec();
                out.ends = out.ends[1..n - 1].to_vec();
            }
        }
        CountMode::SmallBetweenSpikes {
            small_events,
            merge_window,
        } => {
            // Big spikes bound the epochs, so every epoch is complete.
            let mut j = 0;
            for w in events.windows(2) {
                let (a, b) = (w[0], w[1]);
                while j < small_events.len() && small_events[j] <= a {
                    j += 1;
                }
                let mut k = j;
                let mut c = 0;
                while k < small_events.len() && small_events[k] < b {
                    if small_events[k] < b - merge_window {
                        c += 1;
                    }
                    k += 1;
                }
                out.counts.push(c);
                out.starts.push(a);
                out.ends.push(b);
            }
            let last = events.last().copied().unwrap_or(f64::NEG_INFINITY);
            out.open_tail = Some(small_events.iter().filter(|&&t| t > last).count() as u64);
        }
    }
    out
}

/// Output of a long stochastic run.
#[derive(Debug, Clone, Default)]
pub struct NeuroRun {
    /// Primary events: spikes (burst mode) or large spikes (MMO mode).
    pub spikes: Vec<f64>,
    /// Small-oscillation events (MMO mode only).
    pub small_events: Vec<f64>,
    pub counts: EventCounts,
    /// Decimated trajectory, if requested.
    pub trace: Option<Path>,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct NeuroRunOptions {
    pub dt: f64,
    pub duration: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Record every `trace_stride`-th state (0 disables the trace).
    pub trace_stride: usize,
    /// Stop early once this many epochs are complete (0 disables).
    pub target_epochs: usize,
}

/// Simulate a neuron model with Euler–Maruyama, segmenting on the fly.
pub fn run_neuro(model: &NeuroModel, x0: &[f64], seg: &Segmentation, opts: &NeuroRunOptions) -> Result<NeuroRun> {
    let mut rng = stream_rng(opts.seed, 0);
    run_neuro_with(model, x0, seg, opts, &mut rng)
}

pub fn run_neuro_with<R: Rng + ?Sized>(
    model: &NeuroModel,
    x0: &[f64],
    seg: &Segmentation,
    opts: &NeuroRunOptions,
    rng: &mut R,
) -> Result<NeuroRun> {
    let m = model.dim();
    if x0.len() != m {
        return Err(Error::DimensionMismatch {
            symbol: "x0",
            expected: m,
            got: x0.len(),
        });
    }
    if !(opts.dt > 0.0) || !(opts.duration > 0.0) {
        return Err(Error::InvalidArgument("dt and duration must be positive".into()));
    }
    if !(opts.sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise intensity must be nonnegative".into()));
    }
    let diff = model.diffusion();
    let vi = model.voltage_index();
    let (mut primary, mut secondary) = match seg {
        Segmentation::SpikesPerBurst { up, down, .. } => (SpikeDetector::new(*up, *down)?, None),
        Segmentation::SmallBetweenSpikes {
            small_up,
            small_down,
            big_up,
            big_down,
            ..
        } => (
            SpikeDetector::new(*big_up, *big_down)?,
            Some(SpikeDetector::new(*small_up, *small_down)?),
        ),
    };
    let n_steps = (opts.duration / opts.dt).ceil() as u64;
    let mut x = x0.to_vec();
    let mut em = EulerMaruyama::new(m, diff.noise_dim());
    let mut run = NeuroRun::default();
    let mut trace = (opts.trace_stride > 0).then(|| Path::new(m));
    if let Some(tr) = trace.as_mut() {
        tr.seed = Some(opts.seed);
        tr.push(0.0, &x);
    }
    let gap_factor = match seg {
        Segmentation::SpikesPerBurst { gap_factor, .. } => Some(*gap_factor),
        _ => None,
    };
    primary.push(0.0, x[vi]);
    if let Some(s) = secondary.as_mut() {
        s.push(0.0, x[vi]);
    }
    for k in 1..=n_steps {
        em.step(model, &diff, &mut x, opts.dt, opts.sigma, rng);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step: k as usize,
                time: k as f64 * opts.dt,
            });
        }
        let t = k as f64 * opts.dt;
        let v = x[vi];
        if let Some(ev) = primary.push(t, v) {
            run.spikes.push(ev);
            if opts.target_epochs > 0 && run.spikes.len() % 64 == 0 {
                let done = match gap_factor {
                    Some(g) => count_per_epoch(&run.spikes, &CountMode::SpikesPerBurst { gap_factor: g }, true).len(),
                    None => run.spikes.len().saturating_sub(1),
                };
                if done >= opts.target_epochs {
                    run.steps = k;
                    break;
                }
            }
        }
        if let Some(s) = secondary.as_mut() {
            if let Some(ev) = s.push(t, v) {
                run.small_events.push(ev);
            }
        }
        if let Some(tr) = trace.as_mut() {
            if k % opts.trace_stride as u64 == 0 {
                tr.push(t, &x);
            }
        }
        run.steps = k;
    }
    run.counts = match seg {
        Segmentation::SpikesPerBurst { gap_factor, .. } => count_per_epoch(
            &run.spikes,
            &CountMode::SpikesPerBurst {
                gap_factor: *gap_factor,
            },
            true,
        ),
        Segmentation::SmallBetweenSpikes { merge_window, .. } => count_per_epoch(
            &run.spikes,
            &CountMode::SmallBetweenSpikes {
                small_events: &run.small_events,
                merge_window: *merge_window,
            },
            false,
        ),
    };
    run.trace = trace;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_midpoint() {
        let m = NeuroModelSpec::defaults(NeuroModelName::InapikBurster).build().unwrap();
        if let NeuroModel::Inapik(p) = m {
            assert_eq!(p.m_inf(-20.0), 0.5);
        } else {
            unreachable!()
        }
    }

    #[test]
    fn exprel_is_smooth_at_zero() {
        for u in [-1e-3, -1e-7, 0.0, 1e-7, 1e-3] {
            let direct = if u == 0.0 { 1.0 } else { u / (1.0 - (-u as f64).exp()) };
            assert!((exprel(u) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn unknown_and_missing_parameters() {
        let mut over = BTreeMap::new();
        over.insert("g_xyz".to_string(), 1.0);
        assert!(matches!(
            NeuroModelSpec::with_overrides(NeuroModelName::HhMmo, &over),
            Err(Error::UnknownParameter(_))
        ));
        let mut spec = NeuroModelSpec::defaults(NeuroModelName::HhMmo);
        spec.params.remove("g_na");
        match spec.build() {
            Err(Error::MissingParameter(p)) => assert_eq!(p, "g_na"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_conductance_rejected() {
        let mut over = BTreeMap::new();
        over.insert("g_k".to_string(), -1.0);
        let spec = NeuroModelSpec::with_overrides(NeuroModelName::InapikBurster, &over).unwrap();
        assert!(spec.build().is_err());
    }

    #[test]
    fn hysteresis_suppresses_chatter() {
        let mut d = SpikeDetector::new(1.0, 0.0).unwrap();
        let sig = [-1.0, 0.5, 1.2, 0.9, 1.1, 0.95, 1.3, 0.8, 1.05];
        let ev: Vec<f64> = sig.iter().enumerate().filter_map(|(i, &v)| d.push(i as f64, v)).collect();
        assert_eq!(ev.len(), 1);
        assert!(SpikeDetector::new(0.0, 1.0).is_err());
    }

    #[test]
    fn bursts_from_constructed_events() {
        let ev = [1.0, 2.0, 3.0, 10.0, 11.0];
        let c = count_per_epoch(&ev, &CountMode::SpikesPerBurst { gap_factor: 3.0 }, false);
        assert_eq!(c.counts, vec![3, 2]);
        let single = count_per_epoch(&[1.0, 2.0, 3.0, 4.0], &CountMode::SpikesPerBurst { gap_factor: 3.0 }, false);
        assert_eq!(single.counts, vec![4]);
        let lone = count_per_epoch(&[1.0], &CountMode::SpikesPerBurst { gap_factor: 3.0 }, false);
        assert_eq!(lone.counts, vec![1]);
        let trimmed = count_per_epoch(&[1.0], &CountMode::SpikesPerBurst { gap_factor: 3.0 }, true);
        assert!(trimmed.is_empty());
        assert_eq!(trimmed.open_tail, Some(1));
        assert!(count_per_epoch(&[], &CountMode::SpikesPerBurst { gap_factor: 3.0 }, false).is_empty());
    }

    #[test]
    fn small_oscillations_between_spikes() {
        let big = [0.0, 100.0, 150.0];
        let small = [10.0, 20.0, 30.0, 99.5, 120.0, 149.8];
        let c = count_per_epoch(
            &big,
            &CountMode::SmallBetweenSpikes {
                small_events: &small,
                merge_window: 1.0,
            },
            false,
        );
        assert_eq!(c.counts, vec![3, 1]);
    }
}
