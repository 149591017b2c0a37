//! Synthetic multipath channel: channel transfer function (CTF) synthesis,
//! frequency coherence function (FCF) and wideband received power.
//!
//! A channel realization is a list of discrete paths, each with a linear
//! amplitude, an absolute delay and a phase. The CTF at frequency `f` is the
//! coherent sum `H(f) = sum_l a_l exp(-j (2 pi f tau_l - theta_l))`.
//!
//! The stochastic part ([`draw_realization`]) is a parametric stand-in for a
//! measured indoor channel. Large-scale structure (path count, excess delays,
//! ray gains, shadowing) is drawn per spatial cell; phases are drawn per exact
//! position. Everything is a pure function of `(profile, position, seed)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::environment::{Environment, Point};
use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// RSS reported for an all-zero sweep.
pub const RSS_FLOOR_DB: f64 = -150.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultipathComponent {
    /// Linear gain, non-negative.
    pub amplitude: f64,
    /// Absolute delay in seconds, non-negative.
    pub delay_s: f64,
    /// Radians.
    pub phase: f64,
}

impl MultipathComponent {
    pub fn new(amplitude: f64, delay_s: f64, phase: f64) -> Result<Self> {
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::invalid(format!("path amplitude must be >= 0, got {amplitude}")));
        }
        if !(delay_s >= 0.0) || !delay_s.is_finite() {
            return Err(Error::invalid(format!("path delay must be >= 0, got {delay_s}")));
        }
        if !phase.is_finite() {
            return Err(Error::invalid("path phase must be finite"));
        }
        Ok(MultipathComponent {
            amplitude,
            delay_s,
            phase,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    components: Vec<MultipathComponent>,
}

impl ChannelRealization {
    pub fn new(components: Vec<MultipathComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("channel realization needs at least one path"));
        }
        Ok(ChannelRealization { components })
    }

    pub fn components(&self) -> &[MultipathComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Sum of path amplitudes; an upper bound on `|H(f)|`.
    pub fn amplitude_sum(&self) -> f64 {
        self.components.iter().map(|c| c.amplitude).sum()
    }

    /// Copy with Gaussian phase perturbation of standard deviation `std_rad`.
    pub fn jitter_phases<R: Rng + ?Sized>(&self, std_rad: f64, rng: &mut R) -> Self {
        let components = self
            .components
            .iter()
            .map(|c| {
                let dz: f64 = rng.sample(StandardNormal);
                MultipathComponent {
                    phase: c.phase + std_rad * dz,
                    ..*c
                }
            })
            .collect();
        ChannelRealization { components }
    }
}

/// Uniformly spaced frequency points centred on `center_hz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid {
    center_hz: f64,
    span_hz: f64,
    n_points: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid {
            center_hz: 2.4e9,
            span_hz: 100e6,
            n_points: 64,
        }
    }
}

impl FrequencyGrid {
    pub fn new(center_hz: f64, span_hz: f64, n_points: usize) -> Result<Self> {
        if !(center_hz > 0.0) || !center_hz.is_finite() {
            return Err(Error::invalid("frequency grid center must be positive"));
        }
        if !(span_hz > 0.0) || !span_hz.is_finite() {
            return Err(Error::invalid("frequency grid span must be positive"));
        }
        if n_points < 2 {
            return Err(Error::invalid("frequency grid needs at least 2 points"));
        }
        Ok(FrequencyGrid {
            center_hz,
            span_hz,
            n_points,
        })
    }

    pub fn center_hz(&self) -> f64 {
        self.center_hz
    }

    pub fn span_hz(&self) -> f64 {
        self.span_hz
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn step_hz(&self) -> f64 {
        self.span_hz / (self.n_points - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.center_hz - self.span_hz / 2.0 + i as f64 * self.step_hz()
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(|i| self.point(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtfSweep {
    grid: FrequencyGrid,
    values: Vec<Complex64>,
}

impl CtfSweep {
    pub fn new(grid: FrequencyGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::DimensionMismatch {
                expected: grid.n_points(),
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid(format!("CTF value {i} is not finite")));
        }
        Ok(CtfSweep { grid, values })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Adds circular complex Gaussian noise at the given SNR relative to the
    /// sweep's mean power.
    pub fn with_noise<R: Rng + ?Sized>(&self, snr_db: f64, rng: &mut R) -> Self {
        let power = mean_power(&self.values);
        let sigma = (power / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
        let values = self
            .values
            .iter()
            .map(|v| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                v + Complex64::new(sigma * re, sigma * im)
            })
            .collect();
        CtfSweep {
            grid: self.grid,
            values,
        }
    }
}

/// Autocorrelation of a CTF over frequency shifts `m * lag_step_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcfSweep {
    lag_step_hz: f64,
    values: Vec<Complex64>,
}

impl FcfSweep {
    pub fn new(lag_step_hz: f64, values: Vec<Complex64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("FCF needs at least lag 0"));
        }
        if let Some(i) = values.iter().position(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid(format!("FCF value {i} is not finite")));
        }
        Ok(FcfSweep {
            lag_step_hz,
            values,
        })
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn lag_step_hz(&self) -> f64 {
        self.lag_step_hz
    }

    /// Largest lag index stored.
    pub fn max_lag(&self) -> usize {
        self.values.len() - 1
    }

    pub fn lags_hz(&self) -> Vec<f64> {
        (0..self.values.len())
            .map(|m| m as f64 * self.lag_step_hz)
            .collect()
    }
}

/// Evaluates the multipath sum at every grid frequency.
pub fn synth_ctf(realization: &ChannelRealization, grid: &FrequencyGrid) -> CtfSweep {
    let values = grid
        .points()
        .map(|f| {
            realization
                .components()
                .iter()
                .map(|c| Complex64::from_polar(c.amplitude, -(2.0 * PI * f * c.delay_s - c.phase)))
                .sum()
        })
        .collect();
    CtfSweep {
        grid: *grid,
        values,
    }
}

/// Linear autocorrelation over the valid overlap, normalized per lag:
/// `R[m] = 1/(N-m) * sum_{n<N-m} H[n] conj(H[n+m])` for `m = 0..=max_lag`.
pub fn compute_fcf(ctf: &CtfSweep, max_lag: usize) -> Result<FcfSweep> {
    let h = ctf.values();
    let n = h.len();
    if max_lag >= n {
        return Err(Error::invalid(format!(
            "max_lag {max_lag} must be below the sweep length {n}"
        )));
    }
    let values = (0..=max_lag)
        .map(|m| {
            let acc: Complex64 = h[..n - m]
                .iter()
                .zip(&h[m..])
                .map(|(a, b)| a * b.conj())
                .sum();
            acc / (n - m) as f64
        })
        .collect();
    Ok(FcfSweep {
        lag_step_hz: ctf.grid().step_hz(),
        values,
    })
}

fn mean_power(values: &[Complex64]) -> f64 {
    values.iter().map(|v| v.norm_sqr()).sum::<f64>() / values.len() as f64
}

/// Wideband mean power in dB, floored at [`RSS_FLOOR_DB`].
pub fn compute_rss(ctf: &CtfSweep) -> f64 {
    compute_rss_with_floor(ctf, RSS_FLOOR_DB)
}

pub fn compute_rss_with_floor(ctf: &CtfSweep, floor_db: f64) -> f64 {
    let p = mean_power(ctf.values());
    if p > 0.0 {
        (10.0 * p.log10()).max(floor_db)
    } else {
        floor_db
    }
}

/// Parameters of the stochastic channel for one environment class.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentProfile {
    pub env: Environment,
    /// Inclusive range for the number of paths, line-of-sight included.
    pub multipath_count: (usize, usize),
    /// Mean excess delay of scattered paths, seconds.
    pub delay_spread_s: f64,
    /// Line-of-sight power relative to a unit-power scattered ray.
    pub los_power_ratio: f64,
    /// Scattered amplitude decays as `exp(-excess_delay / amplitude_decay_s)`.
    pub amplitude_decay_s: f64,
    pub path_loss_exponent: f64,
    /// Standard deviation of per-cell log-normal shadowing, dB.
    pub shadowing_db: f64,
    /// Side of the square cell sharing large-scale parameters, cm.
    pub correlation_cell_cm: f64,
    /// Per-iteration phase perturbation, radians.
    pub phase_jitter_rad: f64,
    /// Additive noise SNR; `None` disables noise.
    pub snr_db: Option<f64>,
    pub tx_position: Point,
}

impl EnvironmentProfile {
    pub fn default_for(env: Environment) -> Self {
        let base = EnvironmentProfile {
            env,
            multipath_count: (1, 1),
            delay_spread_s: 20e-9,
            los_power_ratio: 1.0,
            amplitude_decay_s: 20e-9,
            path_loss_exponent: 2.0,
            shadowing_db: 2.0,
            correlation_cell_cm: 100.0,
            phase_jitter_rad: 0.01,
            snr_db: None,
            tx_position: Point::new(-150.0, -150.0),
        };
        match env {
            Environment::Lab => EnvironmentProfile {
                multipath_count: (15, 25),
                delay_spread_s: 40e-9,
                los_power_ratio: 0.5,
                amplitude_decay_s: 30e-9,
                path_loss_exponent: 3.0,
                shadowing_db: 8.0,
                ..base
            },
            Environment::NarrowCorridor => EnvironmentProfile {
                multipath_count: (10, 16),
                delay_spread_s: 30e-9,
                los_power_ratio: 1.0,
                amplitude_decay_s: 25e-9,
                path_loss_exponent: 2.6,
                shadowing_db: 7.5,
                ..base
            },
            Environment::Lobby => EnvironmentProfile {
                multipath_count: (6, 10),
                delay_spread_s: 25e-9,
                los_power_ratio: 2.0,
                amplitude_decay_s: 20e-9,
                path_loss_exponent: 2.2,
                shadowing_db: 7.0,
                ..base
            },
            Environment::SportsHall => EnvironmentProfile {
                multipath_count: (2, 5),
                delay_spread_s: 20e-9,
                los_power_ratio: 4.0,
                amplitude_decay_s: 15e-9,
                path_loss_exponent: 2.0,
                shadowing_db: 6.5,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.multipath_count;
        if lo < 1 || hi < lo {
            return Err(Error::invalid(format!(
                "{}: multipath count range [{lo}, {hi}] is empty or below 1",
                self.env
            )));
        }
        let positive = [
            ("delay_spread_s", self.delay_spread_s),
            ("amplitude_decay_s", self.amplitude_decay_s),
            ("correlation_cell_cm", self.correlation_cell_cm),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{}: {name} must be positive", self.env)));
            }
        }
        let non_negative = [
            ("los_power_ratio", self.los_power_ratio),
            ("path_loss_exponent", self.path_loss_exponent),
            ("shadowing_db", self.shadowing_db),
            ("phase_jitter_rad", self.phase_jitter_rad),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{}: {name} must be >= 0", self.env)));
            }
        }
        Ok(())
    }

    /// Writes this profile into `kv` under the `<Env>.` prefix.
    pub fn to_kv(&self, kv: &mut KvFile) {
        let p = self.env.name();
        kv.set(&format!("{p}.multipath_min"), self.multipath_count.0);
        kv.set(&format!("{p}.multipath_max"), self.multipath_count.1);
        kv.set(&format!("{p}.delay_spread_s"), self.delay_spread_s);
        kv.set(&format!("{p}.los_power_ratio"), self.los_power_ratio);
        kv.set(&format!("{p}.amplitude_decay_s"), self.amplitude_decay_s);
        kv.set(&format!("{p}.path_loss_exponent"), self.path_loss_exponent);
        kv.set(&format!("{p}.shadowing_db"), self.shadowing_db);
        kv.set(&format!("{p}.correlation_cell_cm"), self.correlation_cell_cm);
        kv.set(&format!("{p}.phase_jitter_rad"), self.phase_jitter_rad);
        kv.set(
            &format!("{p}.snr_db"),
            self.snr_db.map_or_else(|| "off".to_string(), |s| s.to_string()),
        );
        kv.set(&format!("{p}.tx_x_cm"), self.tx_position.x);
        kv.set(&format!("{p}.tx_y_cm"), self.tx_position.y);
    }

    /// Starts from the built-in defaults for `env` and applies any
    /// `<Env>.<field>` keys present in `kv`.
    pub fn from_kv(env: Environment, kv: &KvFile) -> Result<Self> {
        let mut p = EnvironmentProfile::default_for(env);
        let key = |f: &str| format!("{}.{f}", env.name());
        if let Some(v) = kv.parse_opt(&key("multipath_min"))? {
            p.multipath_count.0 = v;
        }
        if let Some(v) = kv.parse_opt(&key("multipath_max"))? {
            p.multipath_count.1 = v;
        }
        macro_rules! field {
            ($name:literal, $slot:expr) => {
                if let Some(v) = kv.parse_opt::<f64>(&key($name))? {
                    $slot = v;
                }
            };
        }
        field!("delay_spread_s", p.delay_spread_s);
        field!("los_power_ratio", p.los_power_ratio);
        field!("amplitude_decay_s", p.amplitude_decay_s);
        field!("path_loss_exponent", p.path_loss_exponent);
        field!("shadowing_db", p.shadowing_db);
        field!("correlation_cell_cm", p.correlation_cell_cm);
        field!("phase_jitter_rad", p.phase_jitter_rad);
        field!("tx_x_cm", p.tx_position.x);
        field!("tx_y_cm", p.tx_position.y);
        if let Some(v) = kv.get(&key("snr_db")) {
            p.snr_db = match v {
                "off" | "none" | "" => None,
                s => Some(
                    s.parse::<f64>()
                        .map_err(|_| Error::data(format!("bad snr_db '{s}' for {env}")))?,
                ),
            };
        }
        p.validate()?;
        Ok(p)
    }
}

/// Stream tags keep the generator streams for different purposes apart.
pub(crate) mod stream {
    pub const LARGE_SCALE: u64 = 0x4c41_5247;
    pub const PHASE: u64 = 0x5048_4153;
    pub const ITERATION: u64 = 0x4954_4552;
    pub const SPLIT: u64 = 0x5350_4c54;
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into a 64-bit seed. Fixed-width integer
/// arithmetic only, so the result is platform independent.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |h, &p| {
        mix64(h ^ mix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    })
}

pub(crate) fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

fn quantize(v: f64, step: f64) -> u64 {
    (v / step).floor() as i64 as u64
}

/// Draws the multipath parameters seen at `position` (cm).
///
/// The first path is the line-of-sight ray from the transmitter; the rest
/// are scattered rays with exponential excess delays. Path count, excess
/// delays, ray gains and shadowing depend only on the correlation cell
/// containing `position`; phases depend on the position rounded to 1 mm.
pub fn draw_realization(
    profile: &EnvironmentProfile,
    position: Point,
    seed: u64,
) -> Result<ChannelRealization> {
    profile.validate()?;
    let env = profile.env.index() as u64;
    let cell = profile.correlation_cell_cm;
    let mut large = rng_for(&[
        seed,
        stream::LARGE_SCALE,
        env,
        quantize(position.x, cell),
        quantize(position.y, cell),
    ]);
    let mut small = rng_for(&[
        seed,
        stream::PHASE,
        env,
        quantize(position.x, 0.1),
        quantize(position.y, 0.1),
    ]);

    let (lo, hi) = profile.multipath_count;
    let count = large.random_range(lo..=hi);
    let shadow_db = profile.shadowing_db * large.sample::<f64, _>(StandardNormal);

    let distance_m = (position.distance(profile.tx_position) / 100.0).max(0.1);
    let path_gain =
        distance_m.powf(-profile.path_loss_exponent / 2.0) * 10f64.powf(shadow_db / 20.0);
    let los_delay = distance_m / SPEED_OF_LIGHT;

    let mut components = Vec::with_capacity(count);
    components.push(MultipathComponent {
        amplitude: path_gain * profile.los_power_ratio.sqrt(),
        delay_s: los_delay,
        phase: 0.0,
    });
    for _ in 1..count {
        let u: f64 = large.random();
        let excess = -profile.delay_spread_s * (1.0 - u).ln();
        let v: f64 = large.random();
        let ray_gain = (-(1.0 - v).ln()).sqrt();
        let phase = 2.0 * PI * small.random::<f64>();
        components.push(MultipathComponent {
            amplitude: path_gain * (-excess / profile.amplitude_decay_s).exp() * ray_gain,
            delay_s: los_delay + excess,
            phase,
        });
    }
    ChannelRealization::new(components)
}
