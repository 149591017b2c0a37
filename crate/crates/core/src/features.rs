//! Real-valued feature vectors from RF observations.
//!
//! A feature vector is the concatenation of up to three blocks, always in the
//! order RSS, CTF, FCF. In [`ReprMode::Scalar`] the CTF and FCF blocks hold
//! one complex value each (real then imaginary part), so the full hybrid is
//! five-dimensional. In [`ReprMode::Sweep`] they hold every CTF bin and FCF
//! lags `0..=max_lag`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::{MeasurementSet, RfObservation, DEFAULT_MAX_LAG};
use crate::environment::{Environment, Point};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKind {
    Rss,
    Ctf,
    Fcf,
    RssCtf,
    RssFcf,
    CtfFcf,
    RssCtfFcf,
}

impl FeatureKind {
    /// Primary kinds first, then hybrids.
    pub const ALL: [FeatureKind; 7] = [
        FeatureKind::Rss,
        FeatureKind::Ctf,
        FeatureKind::Fcf,
        FeatureKind::RssCtf,
        FeatureKind::RssFcf,
        FeatureKind::CtfFcf,
        FeatureKind::RssCtfFcf,
    ];

    /// Which of (RSS, CTF, FCF) the kind includes.
    pub fn blocks(self) -> (bool, bool, bool) {
        match self {
            FeatureKind::Rss => (true, false, false),
            FeatureKind::Ctf => (false, true, false),
            FeatureKind::Fcf => (false, false, true),
            FeatureKind::RssCtf => (true, true, false),
            FeatureKind::RssFcf => (true, false, true),
            FeatureKind::CtfFcf => (false, true, true),
            FeatureKind::RssCtfFcf => (true, true, true),
        }
    }

    pub fn from_blocks(rss: bool, ctf: bool, fcf: bool) -> Option<FeatureKind> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.blocks() == (rss, ctf, fcf))
    }

    pub fn block_count(self) -> usize {
        let (a, b, c) = self.blocks();
        a as usize + b as usize + c as usize
    }

    /// Position in [`FeatureKind::ALL`].
    pub fn column(self) -> usize {
        FeatureKind::ALL
            .iter()
            .position(|&k| k == self)
            .expect("every kind is listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Rss => "RSS",
            FeatureKind::Ctf => "CTF",
            FeatureKind::Fcf => "FCF",
            FeatureKind::RssCtf => "RSS+CTF",
            FeatureKind::RssFcf => "RSS+FCF",
            FeatureKind::CtfFcf => "CTF+FCF",
            FeatureKind::RssCtfFcf => "RSS+CTF+FCF",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    /// Accepts any order and spacing of `RSS`, `CTF`, `FCF` joined by `+`.
    fn from_str(s: &str) -> Result<Self> {
        let (mut rss, mut ctf, mut fcf) = (false, false, false);
        for part in s.split('+') {
            let slot = match part.trim().to_ascii_uppercase().as_str() {
                "RSS" => &mut rss,
                "CTF" => &mut ctf,
                "FCF" => &mut fcf,
                _ => return Err(Error::invalid(format!("unknown feature kind '{s}'"))),
            };
            if *slot {
                return Err(Error::invalid(format!("feature repeated in '{s}'")));
            }
            *slot = true;
        }
        FeatureKind::from_blocks(rss, ctf, fcf)
            .ok_or_else(|| Error::invalid(format!("unknown feature kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprMode {
    Scalar,
    Sweep,
}

impl FromStr for ReprMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "scalar" => Ok(ReprMode::Scalar),
            "sweep" => Ok(ReprMode::Sweep),
            _ => Err(Error::invalid(format!("repr must be scalar or sweep, got '{s}'"))),
        }
    }
}

impl fmt::Display for ReprMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReprMode::Scalar => "scalar",
            ReprMode::Sweep => "sweep",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureRepr {
    pub mode: ReprMode,
    /// CTF bin used in scalar mode; `None` selects the centre bin `n / 2`.
    pub scalar_bin: Option<usize>,
    pub max_lag: usize,
}

impl Default for FeatureRepr {
    fn default() -> Self {
        FeatureRepr {
            mode: ReprMode::Sweep,
            scalar_bin: None,
            max_lag: DEFAULT_MAX_LAG,
        }
    }
}

impl FeatureRepr {
    pub fn scalar() -> Self {
        FeatureRepr {
            mode: ReprMode::Scalar,
            ..FeatureRepr::default()
        }
    }

    pub fn sweep(max_lag: usize) -> Self {
        FeatureRepr {
            mode: ReprMode::Sweep,
            scalar_bin: None,
            max_lag,
        }
    }

    fn ctf_bin(&self, n_points: usize) -> usize {
        self.scalar_bin.unwrap_or(n_points / 2)
    }

    /// Feature length for `kind` over sweeps of `n_points` CTF bins.
    pub fn dim(&self, kind: FeatureKind, n_points: usize) -> usize {
        let (rss, ctf, fcf) = kind.blocks();
        let (ctf_len, fcf_len) = match self.mode {
            ReprMode::Scalar => (2, 2),
            ReprMode::Sweep => (2 * n_points, 2 * (self.max_lag + 1)),
        };
        rss as usize + if ctf { ctf_len } else { 0 } + if fcf { fcf_len } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
    pub position: Point,
    pub env: Environment,
}

/// Builds the raw feature values of `obs`.
pub fn feature_values(
    obs: &impl RfObservation,
    kind: FeatureKind,
    repr: &FeatureRepr,
) -> Result<Vec<f64>> {
    let ctf = obs.ctf().values();
    let fcf = obs.fcf().values();
    let (use_rss, use_ctf, use_fcf) = kind.blocks();
    let mut out = Vec::with_capacity(repr.dim(kind, ctf.len()));
    if use_rss {
        out.push(obs.rss_db());
    }
    match repr.mode {
        ReprMode::Scalar => {
            let bin = repr.ctf_bin(ctf.len());
            if bin >= ctf.len() {
                return Err(Error::invalid(format!(
                    "scalar bin {bin} outside a {}-point sweep",
                    ctf.len()
                )));
            }
            let lag = bin.min(repr.max_lag);
            if use_ctf {
                out.extend([ctf[bin].re, ctf[bin].im]);
            }
            if use_fcf {
                let v = fcf.get(lag).ok_or_else(|| {
                    Error::invalid(format!("FCF lag {lag} not stored (have {})", fcf.len()))
                })?;
                out.extend([v.re, v.im]);
            }
        }
        ReprMode::Sweep => {
            if use_ctf {
                out.extend(ctf.iter().flat_map(|v| [v.re, v.im]));
            }
            if use_fcf {
                if repr.max_lag >= fcf.len() {
                    return Err(Error::invalid(format!(
                        "max_lag {} but only {} FCF lags stored",
                        repr.max_lag,
                        fcf.len()
                    )));
                }
                out.extend(fcf[..=repr.max_lag].iter().flat_map(|v| [v.re, v.im]));
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("feature vector has non-finite values"));
    }
    Ok(out)
}

pub fn build_feature(
    m: &crate::dataset::Measurement,
    kind: FeatureKind,
    repr: &FeatureRepr,
) -> Result<FeatureVector> {
    Ok(FeatureVector {
        kind,
        values: feature_values(m, kind, repr)?,
        position: m.position,
        env: m.env,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    #[default]
    Raw,
    ZScore,
}

impl FromStr for Scaling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(Scaling::Raw),
            "zscore" | "z-score" => Ok(Scaling::ZScore),
            _ => Err(Error::invalid(format!("scaling must be raw or zscore, got '{s}'"))),
        }
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scaling::Raw => "raw",
            Scaling::ZScore => "zscore",
        })
    }
}

/// Per-dimension standardization fitted on a training matrix. Uses the
/// population standard deviation; constant dimensions get unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ZScore {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let first = rows.first().ok_or_else(|| Error::invalid("cannot fit z-score on no rows"))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut degenerate = 0;
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    degenerate += 1;
                    1.0
                }
            })
            .collect();
        if degenerate > 0 {
            log::warn!("z-score: {degenerate} zero-variance dimension(s) left at unit scale");
        }
        Ok(ZScore { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, values: &mut [f64]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: values.len(),
            });
        }
        for ((v, m), s) in values.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub kind: FeatureKind,
    pub repr: FeatureRepr,
    pub vectors: Vec<FeatureVector>,
    pub scaler: Option<ZScore>,
}

/// One feature vector per measurement, in input order. Under
/// [`Scaling::ZScore`] the scaler is fitted on this set and applied to it.
pub fn build_matrix(
    set: &MeasurementSet,
    kind: FeatureKind,
    repr: &FeatureRepr,
    scaling: Scaling,
) -> Result<FeatureMatrix> {
    if set.is_empty() {
        return Err(Error::invalid(format!("{} set is empty", set.env())));
    }
    let mut vectors = set
        .measurements
        .par_iter()
        .map(|m| build_feature(m, kind, repr))
        .collect::<Result<Vec<_>>>()?;
    let scaler = match scaling {
        Scaling::Raw => None,
        Scaling::ZScore => {
            let z = ZScore::fit(vectors.iter().map(|v| v.values.as_slice()))?;
            for v in &mut vectors {
                z.apply(&mut v.values)?;
            }
            Some(z)
        }
    };
    Ok(FeatureMatrix {
        kind,
        repr: *repr,
        vectors,
        scaler,
    })
}
