//! Two-stage localization.
//!
//! Stage 1 classifies the environment with a k-NN model pooled over every
//! environment. Stage 2 looks the predicted environment up in a [`Policy`] to
//! pick a feature kind, then runs k-NN position estimation against that
//! environment's own fingerprint database. A misclassified query proceeds
//! with the wrong environment's database; there is no rejection path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::channel::FrequencyGrid;
use crate::dataset::{carve_by_iteration, MeasurementSet, RfObservation};
use crate::environment::{Environment, Point};
use crate::error::{Error, Result};
use crate::eval::rmse;
use crate::features::{build_feature, build_matrix, FeatureKind, FeatureRepr, Scaling, ZScore};
use crate::knn::{Aggregation, FingerprintModel, KnnConfig, Neighbor};
use crate::kv::KvFile;

/// Share of each grid point's training iterations held out for policy
/// selection.
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

/// Environment -> stage-2 feature kind, plus the stage-1 kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub stage1_kind: FeatureKind,
    pub entries: BTreeMap<Environment, FeatureKind>,
}

impl Policy {
    pub fn uniform(envs: impl IntoIterator<Item = Environment>, kind: FeatureKind) -> Self {
        Policy {
            stage1_kind: FeatureKind::CtfFcf,
            entries: envs.into_iter().map(|e| (e, kind)).collect(),
        }
    }

    /// The selection reported for the measured campaign: CTF+FCF everywhere
    /// except the open sports hall, which uses FCF alone.
    pub fn measured_reference() -> Self {
        let mut p = Policy::uniform(Environment::ALL, FeatureKind::CtfFcf);
        p.entries.insert(Environment::SportsHall, FeatureKind::Fcf);
        p
    }

    pub fn get(&self, env: Environment) -> Option<FeatureKind> {
        self.entries.get(&env).copied()
    }

    /// Applies `Env=KIND` pairs separated by commas or semicolons.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<()> {
        for part in spec.split([',', ';']).map(str::trim).filter(|s| !s.is_empty()) {
            let (env, kind) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("policy override '{part}' is not Env=KIND")))?;
            let env: Environment = env.trim().parse()?;
            let kind: FeatureKind = kind.trim().parse()?;
            self.entries.insert(env, kind);
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("stage1_kind", self.stage1_kind);
        for (e, k) in &self.entries {
            kv.set(e.name(), k);
        }
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let stage1_kind = kv.parse_opt("stage1_kind")?.unwrap_or(FeatureKind::CtfFcf);
        let mut entries = BTreeMap::new();
        for (k, v) in kv.iter() {
            if k == "stage1_kind" {
                continue;
            }
            entries.insert(k.parse::<Environment>()?, v.parse::<FeatureKind>()?);
        }
        Ok(Policy {
            stage1_kind,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path, "fingerloc policy: environment = stage-2 feature kind")
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeConfig {
    pub repr: FeatureRepr,
    pub scaling: Scaling,
    pub stage1_kind: FeatureKind,
    pub k1: KnnConfig,
    pub k2: KnnConfig,
    pub aggregation: Aggregation,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            repr: FeatureRepr::default(),
            scaling: Scaling::Raw,
            stage1_kind: FeatureKind::CtfFcf,
            k1: KnnConfig::default(),
            k2: KnnConfig::default(),
            aggregation: Aggregation::Centroid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub stage1: FingerprintModel,
    pub stage2: BTreeMap<Environment, FingerprintModel>,
    pub policy: Policy,
    pub k1: KnnConfig,
    pub k2: KnnConfig,
    pub aggregation: Aggregation,
    pub grid: FrequencyGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub predicted_env: Environment,
    pub position: Point,
    pub stage1_neighbors: Vec<Neighbor>,
    pub stage2_neighbors: Vec<Neighbor>,
}

/// How stage 1 picks the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage1 {
    Classify,
    /// Skip classification and use the given label.
    Oracle(Environment),
}

fn check_grids(sets: &[MeasurementSet]) -> Result<FrequencyGrid> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("need at least one environment"))?;
    for s in sets {
        if s.is_empty() {
            return Err(Error::invalid(format!("{} training set is empty", s.env())));
        }
        if s.meta.grid != first.meta.grid {
            return Err(Error::data(format!(
                "{} and {} use different frequency grids",
                first.env(),
                s.env()
            )));
        }
    }
    for w in sets.windows(2) {
        if w[0].env() == w[1].env() {
            return Err(Error::invalid(format!("{} appears twice", w[0].env())));
        }
    }
    Ok(first.meta.grid)
}

/// Stage-1 database: every set's vectors, labelled, in input order.
pub fn pooled_model(
    sets: &[MeasurementSet],
    kind: FeatureKind,
    repr: &FeatureRepr,
    scaling: Scaling,
) -> Result<FingerprintModel> {
    let mut rows = Vec::new();
    for set in sets {
        let part = set
            .measurements
            .par_iter()
            .map(|m| build_feature(m, kind, repr))
            .collect::<Result<Vec<_>>>()?;
        rows.extend(part);
    }
    let scaler = match scaling {
        Scaling::Raw => None,
        Scaling::ZScore => {
            let z = ZScore::fit(rows.iter().map(|v| v.values.as_slice()))?;
            for v in &mut rows {
                z.apply(&mut v.values)?;
            }
            Some(z)
        }
    };
    FingerprintModel::from_rows(
        kind,
        *repr,
        scaler,
        rows.into_iter().map(|v| (v.values, v.position, v.env)),
    )
}

/// Stage-2 database for one environment and kind.
pub fn stage2_model(
    set: &MeasurementSet,
    kind: FeatureKind,
    repr: &FeatureRepr,
    scaling: Scaling,
) -> Result<FingerprintModel> {
    FingerprintModel::from_matrix(build_matrix(set, kind, repr, scaling)?)
}

/// Localizes every measurement of `test` against a stage-2 model; returns
/// the estimates in input order.
pub fn stage2_estimates(
    model: &FingerprintModel,
    test: &MeasurementSet,
    k: usize,
    how: Aggregation,
) -> Result<Vec<Point>> {
    test.measurements
        .par_iter()
        .map(|m| {
            let q = model.query_features(m)?;
            model.aggregate(&model.nearest(&q, k)?, how)
        })
        .collect()
}

/// Standalone stage-2 RMSE for one environment and kind.
pub fn stage2_rmse(
    train: &MeasurementSet,
    test: &MeasurementSet,
    kind: FeatureKind,
    config: &CascadeConfig,
) -> Result<f64> {
    let model = stage2_model(train, kind, &config.repr, config.scaling)?;
    let est = stage2_estimates(&model, test, config.k2.k, config.aggregation)?;
    let truth: Vec<Point> = test.measurements.iter().map(|m| m.position).collect();
    rmse(&est, &truth)
}

/// Builds the pooled stage-1 model and one stage-2 model per environment.
pub fn fit(train: &[MeasurementSet], policy: &Policy, config: &CascadeConfig) -> Result<CascadeModel> {
    let grid = check_grids(train)?;
    for s in train {
        if policy.get(s.env()).is_none() {
            return Err(Error::invalid(format!("policy has no entry for {}", s.env())));
        }
    }
    let stage1 = pooled_model(train, policy.stage1_kind, &config.repr, config.scaling)?;
    let stage2 = train
        .iter()
        .map(|s| {
            let kind = policy.get(s.env()).expect("checked above");
            Ok((s.env(), stage2_model(s, kind, &config.repr, config.scaling)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let policy = Policy {
        stage1_kind: policy.stage1_kind,
        entries: train
            .iter()
            .map(|s| (s.env(), policy.get(s.env()).expect("checked above")))
            .collect(),
    };
    Ok(CascadeModel {
        stage1,
        stage2,
        policy,
        k1: config.k1,
        k2: config.k2,
        aggregation: config.aggregation,
        grid,
    })
}

/// Validation RMSE of every candidate kind per environment, plus the winner.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFit {
    pub policy: Policy,
    pub scores: BTreeMap<Environment, Vec<(FeatureKind, f64)>>,
}

/// Selects, per environment, the candidate with the lowest validation RMSE.
/// Ties prefer fewer feature blocks, then the earlier kind in
/// [`FeatureKind::ALL`].
pub fn fit_policy(
    train: &[MeasurementSet],
    validation: &[MeasurementSet],
    candidates: &[FeatureKind],
    config: &CascadeConfig,
) -> Result<PolicyFit> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate feature kinds"));
    }
    check_grids(train)?;
    let mut entries = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for t in train {
        let v = validation
            .iter()
            .find(|v| v.env() == t.env())
            .ok_or_else(|| Error::invalid(format!("no validation data for {}", t.env())))?;
        let mut env_scores = Vec::with_capacity(candidates.len());
        for &kind in candidates {
            env_scores.push((kind, stage2_rmse(t, v, kind, config)?));
        }
        let best = env_scores
            .iter()
            .min_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then(a.0.block_count().cmp(&b.0.block_count()))
                    .then(a.0.column().cmp(&b.0.column()))
            })
            .expect("non-empty")
            .0;
        entries.insert(t.env(), best);
        scores.insert(t.env(), env_scores);
    }
    Ok(PolicyFit {
        policy: Policy {
            stage1_kind: config.stage1_kind,
            entries,
        },
        scores,
    })
}

/// Splits each training set into fit and validation parts by iteration.
pub fn validation_carve(
    train: &[MeasurementSet],
    fraction: f64,
) -> Result<(Vec<MeasurementSet>, Vec<MeasurementSet>)> {
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for s in train {
        let (f, v) = carve_by_iteration(s, fraction)?;
        fit.push(f);
        val.push(v);
    }
    Ok((fit, val))
}

fn same_grid(a: &FrequencyGrid, b: &FrequencyGrid) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs());
    a.n_points() == b.n_points()
        && close(a.center_hz(), b.center_hz())
        && close(a.span_hz(), b.span_hz())
}

impl CascadeModel {
    pub fn environments(&self) -> impl Iterator<Item = Environment> + '_ {
        self.stage2.keys().copied()
    }

    pub fn localize(&self, obs: &impl RfObservation) -> Result<LocalizationResult> {
        self.localize_with(obs, Stage1::Classify)
    }

    pub fn localize_with(&self, obs: &impl RfObservation, stage1: Stage1) -> Result<LocalizationResult> {
        if !same_grid(obs.ctf().grid(), &self.grid) {
            return Err(Error::data(format!(
                "query sweep ({} points around {} Hz) does not match the model grid ({} points around {} Hz)",
                obs.ctf().grid().n_points(),
                obs.ctf().grid().center_hz(),
                self.grid.n_points(),
                self.grid.center_hz()
            )));
        }
        let (env, stage1_neighbors) = match stage1 {
            Stage1::Classify => {
                let q = self.stage1.query_features(obs)?;
                let n = self.stage1.nearest(&q, self.k1.k)?;
                (self.stage1.vote(&n)?, n)
            }
            Stage1::Oracle(e) => (e, Vec::new()),
        };
        let model = self.stage2.get(&env).ok_or_else(|| {
            Error::Internal(format!("stage 1 produced {env}, which has no stage-2 model"))
        })?;
        let q = model.query_features(obs)?;
        let stage2_neighbors = model.nearest(&q, self.k2.k)?;
        let position = model.aggregate(&stage2_neighbors, self.aggregation)?;
        Ok(LocalizationResult {
            predicted_env: env,
            position,
            stage1_neighbors,
            stage2_neighbors,
        })
    }

    /// Stage-1 label only.
    pub fn classify(&self, obs: &impl RfObservation) -> Result<Environment> {
        let q = self.stage1.query_features(obs)?;
        self.stage1.classify(&q, self.k1.k)
    }

    /// Writes `cascade.meta`, `policy.txt`, `stage1.model` and one
    /// `stage2_<Env>.model` per environment into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = KvFile::new();
        meta.set("k1", self.k1.k);
        meta.set("k2", self.k2.k);
        meta.set("aggregation", self.aggregation);
        meta.set("freq.center_hz", self.grid.center_hz());
        meta.set("freq.span_hz", self.grid.span_hz());
        meta.set("freq.points", self.grid.n_points());
        let envs: Vec<&str> = self.stage2.keys().map(|e| e.name()).collect();
        meta.set("environments", envs.join(","));
        meta.write(&dir.join("cascade.meta"), "fingerloc cascade model")?;
        self.policy.write(&dir.join("policy.txt"))?;
        self.stage1.write(&dir.join("stage1.model"))?;
        for (env, m) in &self.stage2 {
            m.write(&dir.join(format!("stage2_{env}.model")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = KvFile::read(&dir.join("cascade.meta"))?;
        let policy = Policy::read(&dir.join("policy.txt"))?;
        let stage1 = FingerprintModel::read(&dir.join("stage1.model"))?;
        let mut stage2 = BTreeMap::new();
        let envs: String = meta.require("environments")?;
        for name in envs.split(',').filter(|s| !s.is_empty()) {
            let env: Environment = name.parse()?;
            let m = FingerprintModel::read(&dir.join(format!("stage2_{env}.model")))?;
            if policy.get(env) != Some(m.kind()) {
                return Err(Error::data(format!(
                    "stage-2 model for {env} uses {} but the policy says {:?}",
                    m.kind(),
                    policy.get(env).map(|k| k.name())
                )));
            }
            stage2.insert(env, m);
        }
        for env in policy.entries.keys() {
            if !stage2.contains_key(env) {
                return Err(Error::data(format!("policy lists {env} but no stage-2 model exists")));
            }
        }
        Ok(CascadeModel {
            stage1,
            stage2,
            policy,
            k1: KnnConfig::new(meta.require("k1")?)?,
            k2: KnnConfig::new(meta.require("k2")?)?,
            aggregation: meta.parse_opt("aggregation")?.unwrap_or_default(),
            grid: FrequencyGrid::new(
                meta.require("freq.center_hz")?,
                meta.require("freq.span_hz")?,
                meta.require("freq.points")?,
            )?,
        })
    }

    /// Human-readable one-line-per-item summary.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "stage 1: {} vectors, kind {}, k = {}",
            self.stage1.len(),
            self.policy.stage1_kind,
            self.k1.k
        );
        for (env, m) in &self.stage2 {
            let _ = writeln!(s, "stage 2 {env}: {} vectors, kind {}, k = {}", m.len(), m.kind(), self.k2.k);
        }
        s
    }
}
