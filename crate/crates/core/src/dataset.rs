//! Fingerprint measurement sets: synthetic generation, seeded train/test
//! split, and delimited-text import/export.
//!
//! On disk a set is a CSV-like table plus a `key = value` manifest that maps
//! column names to roles. Complex sweeps are stored as interleaved real/imag
//! column pairs (`ctf_re_0, ctf_im_0, ctf_re_1, ...`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::channel::{
    compute_fcf, compute_rss, draw_realization, rng_for, stream, synth_ctf, CtfSweep,
    EnvironmentProfile, FcfSweep, FrequencyGrid,
};
use crate::environment::{Environment, Point};
use crate::error::{Error, Result};
use crate::kv::KvFile;

/// Default number of FCF lags stored with each measurement (lags `0..=16`).
pub const DEFAULT_MAX_LAG: usize = 16;

/// Rectangular survey grid. Point `i` sits at column `i % cols`, row
/// `i / cols`, i.e. `(col * spacing, row * spacing)` in cm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub spacing_cm: f64,
}

impl Default for GridGeometry {
    fn default() -> Self {
        GridGeometry {
            rows: 14,
            cols: 14,
            spacing_cm: 50.0,
        }
    }
}

impl GridGeometry {
    pub fn new(rows: usize, cols: usize, spacing_cm: f64) -> Result<Self> {
        let g = GridGeometry {
            rows,
            cols,
            spacing_cm,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::invalid(format!(
                "grid {}x{} has no points",
                self.rows, self.cols
            )));
        }
        if !(self.spacing_cm > 0.0) || !self.spacing_cm.is_finite() {
            return Err(Error::invalid("grid spacing must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, index: usize) -> Point {
        let row = index / self.cols;
        let col = index % self.cols;
        Point::new(col as f64 * self.spacing_cm, row as f64 * self.spacing_cm)
    }

    /// Grid index of a point lying on the grid (within 1e-6 cm).
    pub fn index_of(&self, p: Point) -> Option<usize> {
        let col = (p.x / self.spacing_cm).round();
        let row = (p.y / self.spacing_cm).round();
        if col < 0.0 || row < 0.0 || col >= self.cols as f64 || row >= self.rows as f64 {
            return None;
        }
        let idx = row as usize * self.cols + col as usize;
        (self.position(idx).distance(p) < 1e-6).then_some(idx)
    }

    /// Bounding box `(min, max)` of the grid points.
    pub fn bounds(&self) -> (Point, Point) {
        (
            Point::new(0.0, 0.0),
            Point::new(
                (self.cols - 1) as f64 * self.spacing_cm,
                (self.rows - 1) as f64 * self.spacing_cm,
            ),
        )
    }
}

impl std::str::FromStr for GridGeometry {
    type Err = Error;

    /// Parses `RxC`, e.g. `14x14`. Spacing is left at the default.
    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::invalid(format!("grid must look like RxC, got '{s}'")))?;
        let rows = r.trim().parse().map_err(|_| Error::invalid(format!("bad grid rows in '{s}'")))?;
        let cols = c.trim().parse().map_err(|_| Error::invalid(format!("bad grid cols in '{s}'")))?;
        GridGeometry::new(rows, cols, GridGeometry::default().spacing_cm)
    }
}

/// The RF part of an observation, with or without ground truth attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub rss_db: f64,
    pub ctf: CtfSweep,
    pub fcf: FcfSweep,
}

impl Observation {
    /// Derives RSS and FCF from a CTF sweep.
    pub fn from_ctf(ctf: CtfSweep, max_lag: usize) -> Result<Self> {
        let fcf = compute_fcf(&ctf, max_lag)?;
        Ok(Observation {
            rss_db: compute_rss(&ctf),
            ctf,
            fcf,
        })
    }
}

/// One observation at a surveyed grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub env: Environment,
    pub grid_index: usize,
    /// Ground-truth position, cm.
    pub position: Point,
    pub iteration: usize,
    pub rss_db: f64,
    pub ctf: CtfSweep,
    pub fcf: FcfSweep,
}

/// Anything features can be built from.
pub trait RfObservation {
    fn rss_db(&self) -> f64;
    fn ctf(&self) -> &CtfSweep;
    fn fcf(&self) -> &FcfSweep;
}

impl RfObservation for Measurement {
    fn rss_db(&self) -> f64 {
        self.rss_db
    }
    fn ctf(&self) -> &CtfSweep {
        &self.ctf
    }
    fn fcf(&self) -> &FcfSweep {
        &self.fcf
    }
}

impl RfObservation for Observation {
    fn rss_db(&self) -> f64 {
        self.rss_db
    }
    fn ctf(&self) -> &CtfSweep {
        &self.ctf
    }
    fn fcf(&self) -> &FcfSweep {
        &self.fcf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetMetadata {
    pub env: Environment,
    pub geometry: GridGeometry,
    pub grid: FrequencyGrid,
    /// Number of iterations per grid point in the originating survey.
    pub iterations: usize,
    /// Free text, e.g. `synthetic seed=42` or a source file name.
    pub provenance: String,
}

/// Measurements for a single environment sharing one frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub meta: SetMetadata,
    pub measurements: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn new(meta: SetMetadata, measurements: Vec<Measurement>) -> Result<Self> {
        for m in &measurements {
            if m.env != meta.env {
                return Err(Error::data(format!(
                    "measurement labelled {} in a {} set",
                    m.env, meta.env
                )));
            }
            if m.ctf.grid() != &meta.grid {
                return Err(Error::data("measurement frequency grid differs from the set's"));
            }
        }
        Ok(MeasurementSet { meta, measurements })
    }

    pub fn env(&self) -> Environment {
        self.meta.env
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Number of FCF lags stored, i.e. `max_lag + 1` (0 for an empty set).
    pub fn fcf_len(&self) -> usize {
        self.measurements.first().map_or(0, |m| m.fcf.values().len())
    }

    fn with_measurements(&self, measurements: Vec<Measurement>) -> Self {
        MeasurementSet {
            meta: self.meta.clone(),
            measurements,
        }
    }
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub geometry: GridGeometry,
    pub iterations: usize,
    pub grid: FrequencyGrid,
    pub max_lag: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            geometry: GridGeometry::default(),
            iterations: 10,
            grid: FrequencyGrid::default(),
            max_lag: DEFAULT_MAX_LAG,
        }
    }
}

/// Generates one measurement per `(grid point, iteration)`.
///
/// Each grid point keeps its realization from [`draw_realization`]; every
/// iteration perturbs the phases with an iteration-specific sub-seed and, if
/// the profile enables it, adds noise. Output is sorted by
/// `(grid_index, iteration)` regardless of thread count.
pub fn generate_synthetic(
    profile: &EnvironmentProfile,
    config: &SynthConfig,
    seed: u64,
) -> Result<MeasurementSet> {
    profile.validate()?;
    config.geometry.validate()?;
    if config.iterations == 0 {
        return Err(Error::invalid("iterations must be >= 1"));
    }
    if config.max_lag >= config.grid.n_points() {
        return Err(Error::invalid("max_lag must be below the number of frequency points"));
    }
    let env = profile.env;
    let per_point: Vec<Result<Vec<Measurement>>> = (0..config.geometry.len())
        .into_par_iter()
        .map(|grid_index| {
            let position = config.geometry.position(grid_index);
            let base = draw_realization(profile, position, seed)?;
            (0..config.iterations)
                .map(|iteration| {
                    let mut rng = rng_for(&[
                        seed,
                        stream::ITERATION,
                        env.index() as u64,
                        grid_index as u64,
                        iteration as u64,
                    ]);
                    let realization = base.jitter_phases(profile.phase_jitter_rad, &mut rng);
                    let mut ctf = synth_ctf(&realization, &config.grid);
                    if let Some(snr) = profile.snr_db {
                        ctf = ctf.with_noise(snr, &mut rng);
                    }
                    let obs = Observation::from_ctf(ctf, config.max_lag)?;
                    Ok(Measurement {
                        env,
                        grid_index,
                        position,
                        iteration,
                        rss_db: obs.rss_db,
                        ctf: obs.ctf,
                        fcf: obs.fcf,
                    })
                })
                .collect()
        })
        .collect();
    let mut measurements = Vec::with_capacity(config.geometry.len() * config.iterations);
    for chunk in per_point {
        measurements.extend(chunk?);
    }
    Ok(MeasurementSet {
        meta: SetMetadata {
            env,
            geometry: config.geometry,
            grid: config.grid,
            iterations: config.iterations,
            provenance: format!("synthetic seed={seed}"),
        },
        measurements,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify_by_grid_point: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.75,
            seed: 0,
            stratify_by_grid_point: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// How many of `count` items go to the first part when `prior` items have
/// already been allocated, so that running totals stay at
/// `floor(total * fraction)`. Keeps every per-group count within one of
/// `count * fraction` and the grand total exact.
fn cumulative_share(prior: usize, count: usize, fraction: f64) -> usize {
    let before = (prior as f64 * fraction + 1e-9).floor() as usize;
    let after = ((prior + count) as f64 * fraction + 1e-9).floor() as usize;
    after - before
}

fn group_by_point(set: &MeasurementSet) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, m) in set.measurements.iter().enumerate() {
        groups.entry(m.grid_index).or_default().push(i);
    }
    groups
}

fn take(set: &MeasurementSet, mut idx: Vec<usize>) -> MeasurementSet {
    idx.sort_unstable();
    set.with_measurements(idx.into_iter().map(|i| set.measurements[i].clone()).collect())
}

/// Seeded train/test partition.
///
/// Stratified mode shuffles the iterations of each grid point and sends
/// `cumulative_share` of them to train, so a 10-iteration point at 0.75
/// contributes 7 or 8 and 1960 rows split exactly 1470/490. Both outputs keep
/// the input order.
pub fn split(set: &MeasurementSet, spec: &SplitSpec) -> Result<(MeasurementSet, MeasurementSet)> {
    spec.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("cannot split an empty measurement set"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    if spec.stratify_by_grid_point {
        let mut prior = 0;
        for (point, mut members) in group_by_point(set) {
            let mut rng = rng_for(&[spec.seed, stream::SPLIT, set.env().index() as u64, point as u64]);
            members.shuffle(&mut rng);
            let n_train = cumulative_share(prior, members.len(), spec.train_fraction);
            prior += members.len();
            train.extend_from_slice(&members[..n_train]);
            test.extend_from_slice(&members[n_train..]);
        }
    } else {
        let mut all: Vec<usize> = (0..set.len()).collect();
        let mut rng = rng_for(&[spec.seed, stream::SPLIT, set.env().index() as u64, u64::MAX]);
        all.shuffle(&mut rng);
        let n_train = cumulative_share(0, all.len(), spec.train_fraction);
        test = all.split_off(n_train);
        train = all;
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!(
            "{} measurements are too few for a {} train fraction",
            set.len(),
            spec.train_fraction
        )));
    }
    Ok((take(set, train), take(set, test)))
}

/// Holds out the highest-iteration `fraction` of each grid point's samples.
/// Returns `(fit, holdout)`.
pub fn carve_by_iteration(
    set: &MeasurementSet,
    fraction: f64,
) -> Result<(MeasurementSet, MeasurementSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let mut fit = Vec::new();
    let mut holdout = Vec::new();
    let mut prior = 0;
    for (_, mut members) in group_by_point(set) {
        members.sort_by_key(|&i| set.measurements[i].iteration);
        let n_hold = cumulative_share(prior, members.len(), fraction);
        prior += members.len();
        let cut = members.len() - n_hold;
        fit.extend_from_slice(&members[..cut]);
        holdout.extend_from_slice(&members[cut..]);
    }
    if fit.is_empty() || holdout.is_empty() {
        return Err(Error::invalid(format!(
            "{} measurements are too few to hold out {fraction}",
            set.len()
        )));
    }
    Ok((take(set, fit), take(set, holdout)))
}

/// Column names and layout of a measurement table.
///
/// Sweep column patterns contain `{i}`, replaced by the bin or lag index.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Data file, relative to the manifest's directory.
    pub data: Option<String>,
    pub environment: Option<Environment>,
    pub geometry: GridGeometry,
    pub freq_center_hz: f64,
    pub freq_span_hz: f64,
    /// Declared CTF length; inferred from the header when absent.
    pub freq_points: Option<usize>,
    /// Lags to compute when the table has no FCF columns.
    pub max_lag: usize,
    pub iterations: Option<usize>,
    pub provenance: Option<String>,
    pub delimiter: u8,
    pub col_env: String,
    pub col_grid_index: String,
    pub col_x: String,
    pub col_y: String,
    pub col_iteration: String,
    pub col_rss: String,
    pub col_ctf_re: String,
    pub col_ctf_im: String,
    pub col_fcf_re: String,
    pub col_fcf_im: String,
}

impl Default for Manifest {
    fn default() -> Self {
        let grid = FrequencyGrid::default();
        Manifest {
            data: None,
            environment: None,
            geometry: GridGeometry::default(),
            freq_center_hz: grid.center_hz(),
            freq_span_hz: grid.span_hz(),
            freq_points: None,
            max_lag: DEFAULT_MAX_LAG,
            iterations: None,
            provenance: None,
            delimiter: b',',
            col_env: "env".into(),
            col_grid_index: "grid_index".into(),
            col_x: "x_cm".into(),
            col_y: "y_cm".into(),
            col_iteration: "iteration".into(),
            col_rss: "rss_db".into(),
            col_ctf_re: "ctf_re_{i}".into(),
            col_ctf_im: "ctf_im_{i}".into(),
            col_fcf_re: "fcf_re_{i}".into(),
            col_fcf_im: "fcf_im_{i}".into(),
        }
    }
}

impl Manifest {
    /// Manifest describing how [`write_table`] lays out `set`.
    pub fn for_set(set: &MeasurementSet, data_file: &str) -> Self {
        Manifest {
            data: Some(data_file.to_string()),
            environment: Some(set.env()),
            geometry: set.meta.geometry,
            freq_center_hz: set.meta.grid.center_hz(),
            freq_span_hz: set.meta.grid.span_hz(),
            freq_points: Some(set.meta.grid.n_points()),
            max_lag: set.fcf_len().saturating_sub(1),
            iterations: Some(set.meta.iterations),
            provenance: Some(set.meta.provenance.clone()),
            ..Manifest::default()
        }
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut m = Manifest {
            data: kv.get("data").map(str::to_string),
            environment: kv.parse_opt("environment")?,
            ..Manifest::default()
        };
        let rows = kv.parse_opt("grid.rows")?.unwrap_or(m.geometry.rows);
        let cols = kv.parse_opt("grid.cols")?.unwrap_or(m.geometry.cols);
        let spacing = kv.parse_opt("grid.spacing_cm")?.unwrap_or(m.geometry.spacing_cm);
        m.geometry = GridGeometry::new(rows, cols, spacing)?;
        m.freq_center_hz = kv.parse_opt("freq.center_hz")?.unwrap_or(m.freq_center_hz);
        m.freq_span_hz = kv.parse_opt("freq.span_hz")?.unwrap_or(m.freq_span_hz);
        m.freq_points = kv.parse_opt("freq.points")?;
        m.max_lag = kv.parse_opt("fcf.max_lag")?.unwrap_or(m.max_lag);
        m.iterations = kv.parse_opt("iterations")?;
        m.provenance = kv.get("provenance").map(str::to_string);
        if let Some(d) = kv.get("delimiter") {
            m.delimiter = match d {
                "tab" | "\\t" => b'\t',
                "comma" => b',',
                "semicolon" => b';',
                s if s.len() == 1 => s.as_bytes()[0],
                s => return Err(Error::data(format!("bad delimiter '{s}'"))),
            };
        }
        let cols = [
            ("column.env", &mut m.col_env),
            ("column.grid_index", &mut m.col_grid_index),
            ("column.x", &mut m.col_x),
            ("column.y", &mut m.col_y),
            ("column.iteration", &mut m.col_iteration),
            ("column.rss", &mut m.col_rss),
            ("column.ctf_re", &mut m.col_ctf_re),
            ("column.ctf_im", &mut m.col_ctf_im),
            ("column.fcf_re", &mut m.col_fcf_re),
            ("column.fcf_im", &mut m.col_fcf_im),
        ];
        for (key, slot) in cols {
            if let Some(v) = kv.get(key) {
                *slot = v.to_string();
            }
        }
        Ok(m)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        if let Some(d) = &self.data {
            kv.set("data", d);
        }
        if let Some(e) = self.environment {
            kv.set("environment", e);
        }
        kv.set("grid.rows", self.geometry.rows);
        kv.set("grid.cols", self.geometry.cols);
        kv.set("grid.spacing_cm", self.geometry.spacing_cm);
        kv.set("freq.center_hz", self.freq_center_hz);
        kv.set("freq.span_hz", self.freq_span_hz);
        if let Some(n) = self.freq_points {
            kv.set("freq.points", n);
        }
        kv.set("fcf.max_lag", self.max_lag);
        if let Some(n) = self.iterations {
            kv.set("iterations", n);
        }
        if let Some(p) = &self.provenance {
            kv.set("provenance", p);
        }
        let delim = match self.delimiter {
            b'\t' => "tab".to_string(),
            b => (b as char).to_string(),
        };
        kv.set("delimiter", delim);
        kv.set("column.env", &self.col_env);
        kv.set("column.grid_index", &self.col_grid_index);
        kv.set("column.x", &self.col_x);
        kv.set("column.y", &self.col_y);
        kv.set("column.iteration", &self.col_iteration);
        kv.set("column.rss", &self.col_rss);
        kv.set("column.ctf_re", &self.col_ctf_re);
        kv.set("column.ctf_im", &self.col_ctf_im);
        kv.set("column.fcf_re", &self.col_fcf_re);
        kv.set("column.fcf_im", &self.col_fcf_im);
        kv
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path, "fingerloc measurement manifest")
    }

    /// Resolves the data file relative to the manifest at `manifest_path`.
    pub fn data_path(&self, manifest_path: &Path) -> Option<PathBuf> {
        let data = self.data.as_ref()?;
        let p = Path::new(data);
        Some(if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        })
    }
}

fn fmt_f64(out: &mut String, v: f64) {
    let _ = write!(out, "{v}");
}

/// Writes `set` as a delimited table in the default column layout.
pub fn write_table(set: &MeasurementSet, path: &Path) -> Result<()> {
    let n = set.meta.grid.n_points();
    let lags = set.fcf_len();
    let mut text = String::new();
    text.push_str("env,grid_index,x_cm,y_cm,iteration,rss_db");
    for i in 0..n {
        let _ = write!(text, ",ctf_re_{i},ctf_im_{i}");
    }
    for m in 0..lags {
        let _ = write!(text, ",fcf_re_{m},fcf_im_{m}");
    }
    text.push('\n');
    for m in &set.measurements {
        let _ = write!(text, "{},{},", m.env, m.grid_index);
        fmt_f64(&mut text, m.position.x);
        text.push(',');
        fmt_f64(&mut text, m.position.y);
        let _ = write!(text, ",{},", m.iteration);
        fmt_f64(&mut text, m.rss_db);
        for v in m.ctf.values().iter().chain(m.fcf.values()) {
            text.push(',');
            fmt_f64(&mut text, v.re);
            text.push(',');
            fmt_f64(&mut text, v.im);
        }
        text.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<Env>.csv` and `<dir>/<Env>.manifest`; returns the manifest path.
pub fn export(set: &MeasurementSet, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = format!("{}.csv", set.env());
    write_table(set, &dir.join(&data))?;
    let manifest_path = dir.join(format!("{}.manifest", set.env()));
    Manifest::for_set(set, &data).write(&manifest_path)?;
    Ok(manifest_path)
}

/// One parsed table row; fields the table lacks are `None`.
#[derive(Debug, Clone)]
pub struct Row {
    /// 1-based line number in the source file.
    pub line: u64,
    pub env: Option<Environment>,
    pub grid_index: Option<usize>,
    pub position: Option<Point>,
    pub iteration: Option<usize>,
    pub observation: Observation,
}

struct Layout {
    env: Option<usize>,
    grid_index: Option<usize>,
    x: Option<usize>,
    y: Option<usize>,
    iteration: Option<usize>,
    rss: Option<usize>,
    ctf: Vec<(usize, usize)>,
    fcf: Vec<(usize, usize)>,
}

fn sweep_columns(
    header: &BTreeMap<&str, usize>,
    re_pat: &str,
    im_pat: &str,
) -> Result<Vec<(usize, usize)>> {
    let mut cols = Vec::new();
    for i in 0.. {
        let re = header.get(re_pat.replace("{i}", &i.to_string()).as_str()).copied();
        let im = header.get(im_pat.replace("{i}", &i.to_string()).as_str()).copied();
        match (re, im) {
            (Some(r), Some(m)) => cols.push((r, m)),
            (None, None) => break,
            _ => {
                return Err(Error::data(format!(
                    "sweep column {i} has only one of '{re_pat}' / '{im_pat}'"
                )))
            }
        }
    }
    Ok(cols)
}

impl Layout {
    fn from_header(header: &csv::StringRecord, manifest: &Manifest) -> Result<Self> {
        let names: BTreeMap<&str, usize> = header
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim(), i))
            .collect();
        let find = |name: &str| names.get(name).copied();
        let ctf = sweep_columns(&names, &manifest.col_ctf_re, &manifest.col_ctf_im)?;
        if ctf.len() < 2 {
            return Err(Error::data_at(
                1,
                format!(
                    "need at least 2 CTF column pairs matching '{}'",
                    manifest.col_ctf_re
                ),
            ));
        }
        if let Some(n) = manifest.freq_points {
            if n != ctf.len() {
                return Err(Error::data_at(
                    1,
                    format!("manifest declares {n} frequency points, header has {}", ctf.len()),
                ));
            }
        }
        let fcf = sweep_columns(&names, &manifest.col_fcf_re, &manifest.col_fcf_im)?;
        if fcf.len() > ctf.len() {
            return Err(Error::data_at(1, "more FCF lags than CTF points"));
        }
        Ok(Layout {
            env: find(&manifest.col_env),
            grid_index: find(&manifest.col_grid_index),
            x: find(&manifest.col_x),
            y: find(&manifest.col_y),
            iteration: find(&manifest.col_iteration),
            rss: find(&manifest.col_rss),
            ctf,
            fcf,
        })
    }
}

fn field(rec: &csv::StringRecord, col: usize, line: u64) -> Result<&str> {
    rec.get(col)
        .map(str::trim)
        .ok_or_else(|| Error::data_at(line, format!("missing column {}", col + 1)))
}

fn number(rec: &csv::StringRecord, col: usize, line: u64, what: &str) -> Result<f64> {
    let s = field(rec, col, line)?;
    let v: f64 = s
        .parse()
        .map_err(|_| Error::data_at(line, format!("{what}: '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data_at(line, format!("{what}: value '{s}' is not finite")));
    }
    Ok(v)
}

fn integer(rec: &csv::StringRecord, col: usize, line: u64, what: &str) -> Result<usize> {
    let s = field(rec, col, line)?;
    s.parse()
        .map_err(|_| Error::data_at(line, format!("{what}: '{s}' is not a non-negative integer")))
}

fn sweep(
    rec: &csv::StringRecord,
    cols: &[(usize, usize)],
    line: u64,
    what: &str,
) -> Result<Vec<Complex64>> {
    cols.iter()
        .enumerate()
        .map(|(i, &(r, m))| {
            Ok(Complex64::new(
                number(rec, r, line, &format!("{what} bin {i} real"))?,
                number(rec, m, line, &format!("{what} bin {i} imag"))?,
            ))
        })
        .collect()
}

fn parse_row(
    rec: &csv::StringRecord,
    layout: &Layout,
    grid: &FrequencyGrid,
    max_lag: usize,
    line: u64,
) -> Result<Row> {
    let env = layout
        .env
        .map(|c| field(rec, c, line)?.parse::<Environment>().map_err(|e| relabel(e, line)))
        .transpose()?;
    let grid_index = layout
        .grid_index
        .map(|c| integer(rec, c, line, "grid_index"))
        .transpose()?;
    let position = match (layout.x, layout.y) {
        (Some(x), Some(y)) => Some(Point::new(
            number(rec, x, line, "x")?,
            number(rec, y, line, "y")?,
        )),
        _ => None,
    };
    let iteration = layout
        .iteration
        .map(|c| integer(rec, c, line, "iteration"))
        .transpose()?;
    let ctf = CtfSweep::new(*grid, sweep(rec, &layout.ctf, line, "CTF")?)
        .map_err(|e| relabel(e, line))?;
    let fcf = if layout.fcf.is_empty() {
        compute_fcf(&ctf, max_lag).map_err(|e| relabel(e, line))?
    } else {
        FcfSweep::new(grid.step_hz(), sweep(rec, &layout.fcf, line, "FCF")?)
            .map_err(|e| relabel(e, line))?
    };
    let rss_db = match layout.rss {
        Some(c) => number(rec, c, line, "rss")?,
        None => compute_rss(&ctf),
    };
    Ok(Row {
        line,
        env,
        grid_index,
        position,
        iteration,
        observation: Observation { rss_db, ctf, fcf },
    })
}

fn relabel(e: Error, line: u64) -> Error {
    match e {
        Error::Data { message, .. } => Error::data_at(line, message),
        Error::InvalidArgument(message) => Error::data_at(line, message),
        Error::DimensionMismatch { expected, found } => Error::data_at(
            line,
            format!("sweep length {found}, expected {expected}"),
        ),
        other => other,
    }
}

const MAX_REPORTED_ROWS: usize = 20;

/// Parses every row of a table. Invalid rows are collected and reported
/// together (up to 20), each with its line number.
pub fn read_rows(path: &Path, manifest: &Manifest) -> Result<(FrequencyGrid, Vec<Row>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        let n = manifest.freq_points.unwrap_or(FrequencyGrid::default().n_points());
        let grid = FrequencyGrid::new(manifest.freq_center_hz, manifest.freq_span_hz, n)?;
        return Ok((grid, Vec::new()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(manifest.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::data_at(1, e.to_string()))?
        .clone();
    let layout = Layout::from_header(&header, manifest)
        .map_err(|e| with_path(e, path))?;
    let grid = FrequencyGrid::new(manifest.freq_center_hz, manifest.freq_span_hz, layout.ctf.len())?;
    let max_lag = manifest.max_lag.min(grid.n_points() - 1);

    let mut rows = Vec::new();
    let mut failures: Vec<(u64, String)> = Vec::new();
    for rec in reader.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                failures.push((line, e.to_string()));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            failures.push((line, format!("expected {} fields, found {}", header.len(), rec.len())));
            continue;
        }
        match parse_row(&rec, &layout, &grid, max_lag, line) {
            Ok(r) => rows.push(r),
            Err(Error::Data { line: l, message }) => failures.push((l.unwrap_or(line), message)),
            Err(e) => return Err(e),
        }
    }
    if let Some(&(first, _)) = failures.first() {
        let mut message = format!("{}: {} invalid row(s)", path.display(), failures.len());
        for (line, why) in failures.iter().take(MAX_REPORTED_ROWS) {
            let _ = write!(message, "\n  line {line}: {why}");
        }
        return Err(Error::data_at(first, message));
    }
    Ok((grid, rows))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Data { line, message } => Error::Data {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Loads a table and groups it into one set per environment, in
/// [`Environment::ALL`] order.
pub fn load_partitions(path: &Path, manifest: &Manifest) -> Result<Vec<MeasurementSet>> {
    let (grid, rows) = read_rows(path, manifest)?;
    let geometry = manifest.geometry;
    let mut by_env: BTreeMap<Environment, Vec<Measurement>> = BTreeMap::new();
    let mut seen_iterations: BTreeMap<(Environment, usize), usize> = BTreeMap::new();
    for row in rows {
        let line = row.line;
        let env = row.env.or(manifest.environment).ok_or_else(|| {
            Error::data_at(line, "row has no environment label and the manifest sets none")
        })?;
        let grid_index = match (row.grid_index, row.position) {
            (Some(i), _) if i >= geometry.len() => {
                return Err(Error::data_at(
                    line,
                    format!("grid index {i} outside a {}-point grid", geometry.len()),
                ))
            }
            (Some(i), Some(p)) => {
                if geometry.position(i).distance(p) > 1e-6 {
                    return Err(Error::data_at(
                        line,
                        format!("position ({}, {}) is not grid point {i}", p.x, p.y),
                    ));
                }
                i
            }
            (Some(i), None) => i,
            (None, Some(p)) => geometry.index_of(p).ok_or_else(|| {
                Error::data_at(line, format!("position ({}, {}) is not on the grid", p.x, p.y))
            })?,
            (None, None) => {
                return Err(Error::data_at(line, "row has neither grid index nor position"))
            }
        };
        let counter = seen_iterations.entry((env, grid_index)).or_insert(0);
        let iteration = row.iteration.unwrap_or(*counter);
        *counter += 1;
        if let Some(n) = manifest.iterations {
            if iteration >= n {
                return Err(Error::data_at(
                    line,
                    format!("iteration {iteration} outside [0, {n})"),
                ));
            }
        }
        let obs = row.observation;
        by_env.entry(env).or_default().push(Measurement {
            env,
            grid_index,
            position: geometry.position(grid_index),
            iteration,
            rss_db: obs.rss_db,
            ctf: obs.ctf,
            fcf: obs.fcf,
        });
    }
    let provenance = manifest
        .provenance
        .clone()
        .unwrap_or_else(|| path.display().to_string());
    by_env
        .into_iter()
        .map(|(env, measurements)| {
            let iterations = manifest.iterations.unwrap_or_else(|| {
                measurements.iter().map(|m| m.iteration + 1).max().unwrap_or(0)
            });
            MeasurementSet::new(
                SetMetadata {
                    env,
                    geometry,
                    grid,
                    iterations,
                    provenance: provenance.clone(),
                },
                measurements,
            )
        })
        .collect()
}

/// Loads a single-environment table.
pub fn load_measurements(path: &Path, manifest: &Manifest) -> Result<MeasurementSet> {
    let mut sets = load_partitions(path, manifest)?;
    match sets.len() {
        1 => Ok(sets.pop().expect("one set")),
        0 => {
            let env = manifest.environment.ok_or_else(|| {
                Error::data(format!("{}: no rows and no environment declared", path.display()))
            })?;
            let n = manifest.freq_points.unwrap_or(FrequencyGrid::default().n_points());
            Ok(MeasurementSet {
                meta: SetMetadata {
                    env,
                    geometry: manifest.geometry,
                    grid: FrequencyGrid::new(manifest.freq_center_hz, manifest.freq_span_hz, n)?,
                    iterations: manifest.iterations.unwrap_or(0),
                    provenance: path.display().to_string(),
                },
                measurements: Vec::new(),
            })
        }
        n => Err(Error::data(format!(
            "{}: expected one environment, found {n}",
            path.display()
        ))),
    }
}

/// Loads a set described by a manifest file carrying a `data` key.
pub fn load_from_manifest(manifest_path: &Path) -> Result<MeasurementSet> {
    let manifest = Manifest::read(manifest_path)?;
    let data = manifest.data_path(manifest_path).ok_or_else(|| {
        Error::data(format!("{}: manifest has no 'data' key", manifest_path.display()))
    })?;
    load_measurements(&data, &manifest)
}

/// Loads every `*.manifest` in `dir`, sorted by environment.
pub fn load_dir(dir: &Path) -> Result<Vec<MeasurementSet>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifests: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "manifest") {
            manifests.push(p);
        }
    }
    manifests.sort();
    if manifests.is_empty() {
        return Err(Error::data(format!("{}: no *.manifest files", dir.display())));
    }
    let mut sets = manifests
        .iter()
        .map(|p| load_from_manifest(p))
        .collect::<Result<Vec<_>>>()?;
    sets.sort_by_key(|s| s.env());
    for w in sets.windows(2) {
        if w[0].env() == w[1].env() {
            return Err(Error::data(format!(
                "{}: two datasets for {}",
                dir.display(),
                w[0].env()
            )));
        }
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::EnvironmentProfile;

    fn small_config(rows: usize, cols: usize, iterations: usize) -> SynthConfig {
        SynthConfig {
            geometry: GridGeometry::new(rows, cols, 50.0).unwrap(),
            iterations,
            grid: FrequencyGrid::new(2.4e9, 100e6, 16).unwrap(),
            max_lag: 4,
        }
    }

    fn profile() -> EnvironmentProfile {
        EnvironmentProfile::default_for(Environment::Lobby)
    }

    #[test]
    fn single_point_single_iteration() {
        let set = generate_synthetic(&profile(), &small_config(1, 1, 1), 1).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.measurements[0].position, Point::new(0.0, 0.0));
        assert_eq!(set.fcf_len(), 5);
    }

    #[test]
    fn rejects_zero_grid_and_iterations() {
        assert!(GridGeometry::new(0, 3, 50.0).is_err());
        let mut cfg = small_config(1, 1, 1);
        cfg.iterations = 0;
        assert!(generate_synthetic(&profile(), &cfg, 1).is_err());
    }

    #[test]
    fn geometry_index_round_trip() {
        let g = GridGeometry::new(3, 4, 25.0).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index_of(g.position(i)), Some(i));
        }
        assert_eq!(g.index_of(Point::new(10.0, 0.0)), None);
        assert_eq!(g.index_of(Point::new(100.0, 0.0)), None);
        assert_eq!("2x3".parse::<GridGeometry>().unwrap().cols, 3);
        assert!("2by3".parse::<GridGeometry>().is_err());
    }

    #[test]
    fn cumulative_share_alternates() {
        let shares: Vec<usize> = (0..4).map(|j| cumulative_share(10 * j, 10, 0.75)).collect();
        assert_eq!(shares, vec![7, 8, 7, 8]);
        assert_eq!(cumulative_share(0, 2, 0.5), 1);
        assert_eq!(cumulative_share(2, 2, 0.5), 1);
    }

    #[test]
    fn half_split_on_two_iterations() {
        let set = generate_synthetic(&profile(), &small_config(2, 2, 2), 3).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.5,
            seed: 9,
            stratify_by_grid_point: true,
        };
        let (train, test) = split(&set, &spec).unwrap();
        for g in 0..4 {
            assert_eq!(train.measurements.iter().filter(|m| m.grid_index == g).count(), 1);
            assert_eq!(test.measurements.iter().filter(|m| m.grid_index == g).count(), 1);
        }
    }

    #[test]
    fn split_rejects_bad_fraction_and_tiny_sets() {
        let set = generate_synthetic(&profile(), &small_config(1, 1, 1), 3).unwrap();
        let mut spec = SplitSpec::default();
        assert!(split(&set, &spec).is_err());
        spec.train_fraction = 1.0;
        assert!(split(&set, &spec).is_err());
    }

    #[test]
    fn unstratified_split_is_exact_partition() {
        let set = generate_synthetic(&profile(), &small_config(2, 3, 4), 3).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.75,
            seed: 1,
            stratify_by_grid_point: false,
        };
        let (train, test) = split(&set, &spec).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(test.len(), 6);
    }

    #[test]
    fn carve_holds_out_last_iterations() {
        let set = generate_synthetic(&profile(), &small_config(1, 2, 5), 3).unwrap();
        let (fit, hold) = carve_by_iteration(&set, 0.2).unwrap();
        assert_eq!(fit.len(), 8);
        assert_eq!(hold.len(), 2);
        assert!(hold.measurements.iter().all(|m| m.iteration == 4));
    }

    #[test]
    fn manifest_kv_round_trip() {
        let set = generate_synthetic(&profile(), &small_config(2, 2, 1), 3).unwrap();
        let m = Manifest::for_set(&set, "Lobby.csv");
        assert_eq!(Manifest::from_kv(&m.to_kv()).unwrap(), m);
    }
}
