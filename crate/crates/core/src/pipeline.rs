//! End-to-end commands behind the `fingerloc` binary.
//!
//! Every command takes a resolved [`RunConfig`], writes into `config.out`
//! and echoes the effective configuration to `effective_config.txt` there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cascade::{self, CascadeConfig, CascadeModel, Policy, DEFAULT_VALIDATION_FRACTION};
use crate::channel::EnvironmentProfile;
use crate::dataset::{
    self, GridGeometry, Manifest, MeasurementSet, SplitSpec, SynthConfig, DEFAULT_MAX_LAG,
};
use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::features::{FeatureKind, FeatureRepr, ReprMode, Scaling};
use crate::knn::{Aggregation, KnnConfig};
use crate::kv::KvFile;

pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";
pub const DEFAULT_SEED: u64 = 42;

/// Parameters shared by all commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: GridGeometry,
    pub iterations: usize,
    pub train_fraction: f64,
    pub k1: usize,
    pub k2: usize,
    pub repr: ReprMode,
    pub max_lag: usize,
    pub stage1_kind: FeatureKind,
    pub policy_override: Option<String>,
    pub scaling: Scaling,
    pub aggregation: Aggregation,
    /// Largest k in the evaluation sweep.
    pub k_max: usize,
    /// Stage-1 timing repetitions; 0 skips timing.
    pub timing_reps: usize,
    pub threads: Option<usize>,
    pub out: PathBuf,
    /// Dataset directory (manifests) or a single manifest.
    pub data: Option<PathBuf>,
    /// Saved cascade model directory.
    pub model: Option<PathBuf>,
    /// Output directory of an earlier `train` run.
    pub run: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub profiles: BTreeMap<Environment, EnvironmentProfile>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            geometry: GridGeometry::default(),
            iterations: 10,
            train_fraction: 0.75,
            k1: 1,
            k2: 1,
            repr: ReprMode::Sweep,
            max_lag: DEFAULT_MAX_LAG,
            stage1_kind: FeatureKind::CtfFcf,
            policy_override: None,
            scaling: Scaling::Raw,
            aggregation: Aggregation::Centroid,
            k_max: 60,
            timing_reps: 1000,
            threads: None,
            out: PathBuf::from("out"),
            data: None,
            model: None,
            run: None,
            input: None,
            manifest: None,
            output: None,
            profiles: Environment::ALL
                .iter()
                .map(|&e| (e, EnvironmentProfile::default_for(e)))
                .collect(),
        }
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::invalid(format!("grid must look like RxC, got '{s}'")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad grid dimension '{v}'")))
    };
    Ok((parse(r)?, parse(c)?))
}

impl RunConfig {
    /// Defaults, then `file`, then `flags`. Both use flag names as keys;
    /// `file` may also carry `<Env>.<field>` channel profile keys.
    pub fn resolve(file: Option<&KvFile>, flags: &KvFile) -> Result<Self> {
        let usage = |e: Error| match e {
            Error::Data { message, .. } => Error::InvalidArgument(message),
            other => other,
        };
        let mut c = RunConfig::default();
        if let Some(f) = file {
            c.apply(f).map_err(usage)?;
        }
        c.apply(flags).map_err(usage)?;
        c.validate().map_err(usage)?;
        Ok(c)
    }

    /// Overwrites every field whose key is present in `kv`.
    pub fn apply(&mut self, kv: &KvFile) -> Result<()> {
        for (key, _) in kv.iter() {
            let known = matches!(
                key,
                "seed" | "grid" | "spacing-cm" | "iters" | "split" | "k1" | "k2" | "repr"
                    | "max-lag" | "stage1-kind" | "policy-override" | "scaling" | "aggregation"
                    | "k-max" | "timing-reps" | "threads" | "out" | "data" | "model" | "run"
                    | "input" | "manifest" | "output"
            );
            let profile_key = key
                .split_once('.')
                .is_some_and(|(env, _)| env.parse::<Environment>().is_ok());
            if !known && !profile_key {
                return Err(Error::invalid(format!("unknown config key '{key}'")));
            }
        }
        if let Some(v) = kv.parse_opt("seed")? {
            self.seed = v;
        }
        if let Some(g) = kv.get("grid") {
            let (rows, cols) = parse_grid(g)?;
            self.geometry.rows = rows;
            self.geometry.cols = cols;
        }
        if let Some(v) = kv.parse_opt("spacing-cm")? {
            self.geometry.spacing_cm = v;
        }
        if let Some(v) = kv.parse_opt("iters")? {
            self.iterations = v;
        }
        if let Some(v) = kv.parse_opt("split")? {
            self.train_fraction = v;
        }
        if let Some(v) = kv.parse_opt("k1")? {
            self.k1 = v;
        }
        if let Some(v) = kv.parse_opt("k2")? {
            self.k2 = v;
        }
        if let Some(v) = kv.parse_opt("repr")? {
            self.repr = v;
        }
        if let Some(v) = kv.parse_opt("max-lag")? {
            self.max_lag = v;
        }
        if let Some(v) = kv.parse_opt("stage1-kind")? {
            self.stage1_kind = v;
        }
        if let Some(v) = kv.get("policy-override") {
            self.policy_override = (!v.trim().is_empty()).then(|| v.to_string());
        }
        if let Some(v) = kv.parse_opt("scaling")? {
            self.scaling = v;
        }
        if let Some(v) = kv.parse_opt("aggregation")? {
            self.aggregation = v;
        }
        if let Some(v) = kv.parse_opt("k-max")? {
            self.k_max = v;
        }
        if let Some(v) = kv.parse_opt("timing-reps")? {
            self.timing_reps = v;
        }
        if let Some(v) = kv.parse_opt::<usize>("threads")? {
            self.threads = (v > 0).then_some(v);
        }
        let path = |key: &str| kv.get(key).filter(|v| !v.is_empty()).map(PathBuf::from);
        if let Some(p) = path("out") {
            self.out = p;
        }
        for (key, slot) in [
            ("data", &mut self.data),
            ("model", &mut self.model),
            ("run", &mut self.run),
            ("input", &mut self.input),
            ("manifest", &mut self.manifest),
            ("output", &mut self.output),
        ] {
            if let Some(p) = path(key) {
                *slot = Some(p);
            }
        }
        let mut profile_kv = KvFile::new();
        for p in self.profiles.values() {
            p.to_kv(&mut profile_kv);
        }
        let mut touched = false;
        for (key, value) in kv.iter() {
            if key.contains('.') {
                profile_kv.set(key, value);
                touched = true;
            }
        }
        if touched {
            for env in Environment::ALL {
                self.profiles.insert(env, EnvironmentProfile::from_kv(env, &profile_kv)?);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.iterations == 0 {
            return Err(Error::invalid("iters must be >= 1"));
        }
        self.split_spec().validate()?;
        KnnConfig::new(self.k1)?;
        KnnConfig::new(self.k2)?;
        if self.k_max == 0 {
            return Err(Error::invalid("k-max must be >= 1"));
        }
        if let Some(o) = &self.policy_override {
            Policy::uniform(Environment::ALL, FeatureKind::Rss).apply_overrides(o)?;
        }
        for p in self.profiles.values() {
            p.validate()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("seed", self.seed);
        kv.set("grid", format!("{}x{}", self.geometry.rows, self.geometry.cols));
        kv.set("spacing-cm", self.geometry.spacing_cm);
        kv.set("iters", self.iterations);
        kv.set("split", self.train_fraction);
        kv.set("k1", self.k1);
        kv.set("k2", self.k2);
        kv.set("repr", self.repr);
        kv.set("max-lag", self.max_lag);
        kv.set("stage1-kind", self.stage1_kind);
        kv.set("policy-override", self.policy_override.as_deref().unwrap_or(""));
        kv.set("scaling", self.scaling);
        kv.set("aggregation", self.aggregation);
        kv.set("k-max", self.k_max);
        kv.set("timing-reps", self.timing_reps);
        kv.set("threads", self.threads.unwrap_or(0));
        kv.set("out", self.out.display());
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        kv.set("data", opt(&self.data));
        kv.set("model", opt(&self.model));
        kv.set("run", opt(&self.run));
        kv.set("input", opt(&self.input));
        kv.set("manifest", opt(&self.manifest));
        kv.set("output", opt(&self.output));
        for p in self.profiles.values() {
            p.to_kv(&mut kv);
        }
        kv
    }

    pub fn feature_repr(&self) -> FeatureRepr {
        match self.repr {
            ReprMode::Sweep => FeatureRepr::sweep(self.max_lag),
            ReprMode::Scalar => FeatureRepr {
                max_lag: self.max_lag,
                ..FeatureRepr::scalar()
            },
        }
    }

    pub fn cascade_config(&self) -> Result<CascadeConfig> {
        Ok(CascadeConfig {
            repr: self.feature_repr(),
            scaling: self.scaling,
            stage1_kind: self.stage1_kind,
            k1: KnnConfig::new(self.k1)?,
            k2: KnnConfig::new(self.k2)?,
            aggregation: self.aggregation,
        })
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            seed: self.seed,
            stratify_by_grid_point: true,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            geometry: self.geometry,
            iterations: self.iterations,
            max_lag: self.max_lag,
            ..SynthConfig::default()
        }
    }

    /// Writes [`EFFECTIVE_CONFIG`] into `out`.
    pub fn echo(&self) -> Result<()> {
        create_dir(&self.out)?;
        self.to_kv()
            .write(&self.out.join(EFFECTIVE_CONFIG), "fingerloc effective configuration")
    }

    /// Runs `f` on a rayon pool capped at `threads`, or on the global pool.
    pub fn with_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.threads {
            None => f(),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Internal(format!("thread pool: {e}")))?
                .install(f),
        }
    }
}

/// Process exit code for an error: 1 usage, 2 data or I/O, 3 internal.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::Data { .. } | Error::Io { .. } | Error::DimensionMismatch { .. } => 2,
        Error::Internal(_) => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// One synthetic survey per environment, in [`Environment::ALL`] order.
pub fn synthesize(config: &RunConfig) -> Result<Vec<MeasurementSet>> {
    let synth = config.synth_config();
    config
        .profiles
        .values()
        .map(|p| dataset::generate_synthetic(p, &synth, config.seed))
        .collect()
}

/// Seeded split of every set. Returns `(train, test)`.
pub fn split_all(
    sets: &[MeasurementSet],
    spec: &SplitSpec,
) -> Result<(Vec<MeasurementSet>, Vec<MeasurementSet>)> {
    let mut train = Vec::with_capacity(sets.len());
    let mut test = Vec::with_capacity(sets.len());
    for s in sets {
        let (a, b) = dataset::split(s, spec)?;
        train.push(a);
        test.push(b);
    }
    Ok((train, test))
}

fn export_all(sets: &[MeasurementSet], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for s in sets {
        dataset::export(s, dir)?;
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<Vec<MeasurementSet>> {
    if path.is_dir() {
        dataset::load_dir(path)
    } else {
        Ok(vec![dataset::load_from_manifest(path)?])
    }
}

fn count_lines(sets: &[MeasurementSet]) -> String {
    let mut s = String::new();
    for set in sets {
        let _ = writeln!(s, "{}: {} measurements", set.env(), set.len());
    }
    s
}

/// Writes four synthetic datasets with manifests into `out`.
pub fn generate(config: &RunConfig) -> Result<String> {
    config.echo()?;
    let sets = synthesize(config)?;
    export_all(&sets, &config.out)?;
    Ok(count_lines(&sets))
}

/// Loads datasets through their manifests and re-exports them in the
/// canonical layout, with FCF and RSS filled in.
pub fn ingest(config: &RunConfig) -> Result<String> {
    let data = config
        .data
        .as_deref()
        .ok_or_else(|| Error::invalid("ingest needs --data (manifest file or directory)"))?;
    config.echo()?;
    let sets = load_data(data)?;
    export_all(&sets, &config.out)?;
    Ok(count_lines(&sets))
}

/// Outcome of [`train_sets`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: CascadeModel,
    pub policy_fit: cascade::PolicyFit,
    pub train: Vec<MeasurementSet>,
    pub test: Vec<MeasurementSet>,
}

/// Split, fit the policy on a validation carve of the training part, apply
/// overrides, then fit the cascade on the whole training part.
pub fn train_sets(sets: &[MeasurementSet], config: &RunConfig) -> Result<Trained> {
    let (train, test) = split_all(sets, &config.split_spec())?;
    let cc = config.cascade_config()?;
    let (fit_part, val_part) = cascade::validation_carve(&train, DEFAULT_VALIDATION_FRACTION)?;
    let policy_fit = cascade::fit_policy(&fit_part, &val_part, &FeatureKind::ALL, &cc)?;
    let mut policy = policy_fit.policy.clone();
    if let Some(o) = &config.policy_override {
        policy.apply_overrides(o)?;
    }
    let model = cascade::fit(&train, &policy, &cc)?;
    Ok(Trained {
        model,
        policy_fit,
        train,
        test,
    })
}

fn train_summary(t: &Trained, config: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}", config.seed);
    let _ = writeln!(s, "stage1-kind = {}", t.model.policy.stage1_kind);
    let _ = writeln!(s, "repr = {}", config.repr);
    let _ = writeln!(s, "k1 = {}", t.model.k1.k);
    let _ = writeln!(s, "k2 = {}", t.model.k2.k);
    for (tr, te) in t.train.iter().zip(&t.test) {
        let _ = writeln!(s, "{}: {} train / {} test", tr.env(), tr.len(), te.len());
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "policy (validation RMSE, cm):");
    for (env, scores) in &t.policy_fit.scores {
        let chosen = t.model.policy.get(*env).map_or("NA", |k| k.name());
        let fitted = t.policy_fit.policy.get(*env).map_or("NA", |k| k.name());
        let note = if chosen != fitted { " (override)" } else { "" };
        let _ = writeln!(s, "  {env} -> {chosen}{note}");
        for (kind, v) in scores {
            let _ = writeln!(s, "    {:<14}{v:.3}", kind.name());
        }
    }
    s
}

/// Split, fit and save. Writes `train/`, `test/`, `model/`, `policy.txt`
/// and `train_summary.txt` into `out`.
pub fn train(config: &RunConfig) -> Result<String> {
    let data = config
        .data
        .as_deref()
        .ok_or_else(|| Error::invalid("train needs --data (dataset directory)"))?;
    config.echo()?;
    let sets = load_data(data)?;
    let t = train_sets(&sets, config)?;
    save_training(&t, config)
}

fn save_training(t: &Trained, config: &RunConfig) -> Result<String> {
    export_all(&t.train, &config.out.join("train"))?;
    export_all(&t.test, &config.out.join("test"))?;
    t.model.save(&config.out.join("model"))?;
    t.model.policy.write(&config.out.join("policy.txt"))?;
    let summary = train_summary(t, config);
    write_text(&config.out.join("train_summary.txt"), &summary)?;
    Ok(summary)
}

/// Settings a saved model was trained with.
pub fn config_of(model: &CascadeModel) -> CascadeConfig {
    CascadeConfig {
        repr: *model.stage1.repr(),
        scaling: if model.stage1.scaler().is_some() {
            Scaling::ZScore
        } else {
            Scaling::Raw
        },
        stage1_kind: model.policy.stage1_kind,
        k1: model.k1,
        k2: model.k2,
        aggregation: model.aggregation,
    }
}

/// Builds the full report for a trained model and its partitions.
pub fn evaluate_sets(
    model: &CascadeModel,
    train: &[MeasurementSet],
    test: &[MeasurementSet],
    config: &RunConfig,
) -> Result<EvalReport> {
    for s in test {
        if s.meta.grid != model.grid {
            return Err(Error::data(format!(
                "{} test data uses a {}-point grid around {} Hz but the model expects {} points around {} Hz",
                s.env(),
                s.meta.grid.n_points(),
                s.meta.grid.center_hz(),
                model.grid.n_points(),
                model.grid.center_hz()
            )));
        }
    }
    let cc = config_of(model);
    let min_train = train.iter().map(MeasurementSet::len).min().unwrap_or(0);
    let k_values: Vec<usize> = (1..=config.k_max.min(min_train)).collect();
    let latency = if config.timing_reps == 0 {
        None
    } else {
        let queries = test
            .iter()
            .flat_map(|s| s.measurements.iter())
            .map(|m| model.stage1.query_features(m))
            .collect::<Result<Vec<_>>>()?;
        Some(eval::time_queries(&model.stage1, &queries, model.k1.k, config.timing_reps)?)
    };
    Ok(EvalReport {
        confusion: eval::confusion(model, test)?,
        table: eval::feature_table(train, test, &FeatureKind::ALL, &cc)?,
        sweep: eval::sweep_k(train, test, &FeatureKind::ALL, &k_values, &cc)?,
        cascade: eval::cascade_rmse(model, test)?,
        policy: model.policy.clone(),
        latency,
    })
}

/// Reads `train/`, `test/` and `model/` from `run` (default: `out`) and
/// writes the report files into `out/report`.
pub fn evaluate(config: &RunConfig) -> Result<String> {
    let run = config.run.clone().unwrap_or_else(|| config.out.clone());
    config.echo()?;
    let model_dir = config.model.clone().unwrap_or_else(|| run.join("model"));
    let model = CascadeModel::load(&model_dir)?;
    let train = dataset::load_dir(&run.join("train"))?;
    let test = match &config.data {
        Some(d) => load_data(d)?,
        None => dataset::load_dir(&run.join("test"))?,
    };
    let report = evaluate_sets(&model, &train, &test, config)?;
    report.write(&config.out.join("report"))?;
    Ok(report.summary())
}

/// Localizes every row of `input`. Output columns: `row,predicted_env,x_cm,y_cm`;
/// an input without data rows gives empty output.
pub fn localize_file(model: &CascadeModel, input: &Path, manifest: Option<&Manifest>) -> Result<String> {
    let empty = std::fs::metadata(input).map_err(|e| Error::io(input, e))?.len() == 0;
    if empty {
        return Ok(String::new());
    }
    let manifest = match manifest {
        Some(m) => m.clone(),
        None => Manifest {
            freq_center_hz: model.grid.center_hz(),
            freq_span_hz: model.grid.span_hz(),
            ..Manifest::default()
        },
    };
    let (_, rows) = dataset::read_rows(input, &manifest)?;
    if rows.is_empty() {
        return Ok(String::new());
    }
    use rayon::prelude::*;
    let results = rows
        .par_iter()
        .map(|r| model.localize(&r.observation))
        .collect::<Result<Vec<_>>>()?;
    let mut s = String::from("row,predicted_env,x_cm,y_cm\n");
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", r.predicted_env, r.position.x, r.position.y);
    }
    Ok(s)
}

/// Runs [`localize_file`] on `--input` with the model at `--model`
/// (default `out/model`). Writes to `--output` when given.
pub fn localize(config: &RunConfig) -> Result<String> {
    let input = config
        .input
        .as_deref()
        .ok_or_else(|| Error::invalid("localize needs --input"))?;
    let model_dir = config.model.clone().unwrap_or_else(|| config.out.join("model"));
    let model = CascadeModel::load(&model_dir)?;
    let manifest = config.manifest.as_deref().map(Manifest::read).transpose()?;
    let out = localize_file(&model, input, manifest.as_ref())?;
    if let Some(p) = &config.output {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_text(p, &out)?;
    }
    Ok(out)
}

/// Generate, train and evaluate in one go. Layout under `out`: `data/`,
/// `train/`, `test/`, `model/`, `policy.txt`, `train_summary.txt`, `report/`.
pub fn reproduce(config: &RunConfig) -> Result<String> {
    config.echo()?;
    let sets = synthesize(config)?;
    export_all(&sets, &config.out.join("data"))?;
    let t = train_sets(&sets, config)?;
    save_training(&t, config)?;
    let report = evaluate_sets(&t.model, &t.train, &t.test, config)?;
    report.write(&config.out.join("report"))?;
    Ok(report.summary())
}
