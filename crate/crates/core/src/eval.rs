//! Metrics and experiment drivers: RMSE, the relative-improvement metric
//! alpha, confusion matrices, per-kind RMSE tables, k sweeps and query
//! latency.
//!
//! Every driver evaluates queries in parallel but collects results in input
//! order before reducing, so reports do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::cascade::{stage2_model, CascadeConfig, CascadeModel, Stage1};
use crate::dataset::MeasurementSet;
use crate::environment::{Environment, Point};
use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::knn::FingerprintModel;

/// Root mean square of planar Euclidean position errors, in the input unit.
pub fn rmse(estimates: &[Point], truths: &[Point]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            found: estimates.len(),
        });
    }
    if estimates.is_empty() {
        return Err(Error::invalid("rmse of an empty batch"));
    }
    let sum: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| {
            let dx = e.x - t.x;
            let dy = e.y - t.y;
            dx * dx + dy * dy
        })
        .sum();
    Ok((sum / estimates.len() as f64).sqrt())
}

/// Percentage reduction of `rmse_beta` relative to the RSS baseline.
pub fn alpha(rmse_rss: f64, rmse_beta: f64) -> Result<f64> {
    if !(rmse_rss > 0.0) || !rmse_rss.is_finite() {
        return Err(Error::invalid(format!(
            "baseline RMSE must be positive, got {rmse_rss}"
        )));
    }
    Ok((rmse_rss - rmse_beta) / rmse_rss * 100.0)
}

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<Environment>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<Environment>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    fn slot(&self, env: Environment) -> Result<usize> {
        self.labels
            .iter()
            .position(|&e| e == env)
            .ok_or_else(|| Error::invalid(format!("{env} is not a confusion-matrix label")))
    }

    pub fn record(&mut self, truth: Environment, predicted: Environment) -> Result<()> {
        let (r, c) = (self.slot(truth)?, self.slot(predicted)?);
        self.counts[r][c] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`, 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.trace() as f64 / t as f64
        }
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    /// Rows normalized to 100 (rows with no samples stay 0).
    pub fn percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s == 0 { 0.0 } else { 100.0 * c as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        s.push_str(",total,percent_correct\n");
        let pct = self.percentages();
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(s, "{l}");
            for c in &self.counts[i] {
                let _ = write!(s, ",{c}");
            }
            let _ = writeln!(s, ",{},{:.4}", self.row_total(i), pct[i][i]);
        }
        let _ = writeln!(s, "# accuracy = {:.6}", self.accuracy());
        s
    }
}

/// Stage-1 confusion over labelled test sets.
pub fn confusion(model: &CascadeModel, test: &[MeasurementSet]) -> Result<ConfusionMatrix> {
    let mut labels: Vec<Environment> = model.environments().collect();
    for t in test {
        if !labels.contains(&t.env()) {
            labels.push(t.env());
        }
    }
    labels.sort();
    let mut cm = ConfusionMatrix::new(labels);
    for set in test {
        let predicted = set
            .measurements
            .par_iter()
            .map(|m| model.classify(m))
            .collect::<Result<Vec<_>>>()?;
        for p in predicted {
            cm.record(set.env(), p)?;
        }
    }
    Ok(cm)
}

/// Standalone stage-2 RMSE per (environment, kind), with the best kind and
/// its alpha against the RSS column.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub envs: Vec<Environment>,
    pub kinds: Vec<FeatureKind>,
    /// `rmse[env][kind]`, cm.
    pub rmse: Vec<Vec<f64>>,
    pub best: Vec<FeatureKind>,
    /// `None` when RSS is not among the kinds.
    pub alpha: Vec<Option<f64>>,
}

impl FeatureTable {
    pub fn get(&self, env: Environment, kind: FeatureKind) -> Option<f64> {
        let e = self.envs.iter().position(|&x| x == env)?;
        let k = self.kinds.iter().position(|&x| x == kind)?;
        Some(self.rmse[e][k])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("environment");
        for k in &self.kinds {
            let _ = write!(s, ",{k}");
        }
        s.push_str(",best,alpha_percent\n");
        for (i, env) in self.envs.iter().enumerate() {
            let _ = write!(s, "{env}");
            for v in &self.rmse[i] {
                let _ = write!(s, ",{v:.6}");
            }
            let _ = write!(s, ",{}", self.best[i]);
            match self.alpha[i] {
                Some(a) => {
                    let _ = writeln!(s, ",{a:.6}");
                }
                None => s.push_str(",NA\n"),
            }
        }
        s
    }
}

fn pair<'a>(train: &'a [MeasurementSet], test: &'a [MeasurementSet]) -> Result<Vec<(&'a MeasurementSet, &'a MeasurementSet)>> {
    train
        .iter()
        .map(|t| {
            let v = test
                .iter()
                .find(|v| v.env() == t.env())
                .ok_or_else(|| Error::invalid(format!("no test partition for {}", t.env())))?;
            if v.is_empty() {
                return Err(Error::invalid(format!("{} test partition is empty", t.env())));
            }
            Ok((t, v))
        })
        .collect()
}

fn truths(set: &MeasurementSet) -> Vec<Point> {
    set.measurements.iter().map(|m| m.position).collect()
}

/// RMSE for every `k` in `k_values`, computed from one ranked neighbour
/// list of length `max(k_values)` per query.
fn rmse_for_ks(
    model: &FingerprintModel,
    test: &MeasurementSet,
    k_values: &[usize],
    config: &CascadeConfig,
) -> Result<Vec<f64>> {
    let k_max = *k_values.iter().max().ok_or_else(|| Error::invalid("no k values"))?;
    if k_values.contains(&0) || k_max > model.len() {
        return Err(Error::invalid(format!(
            "k values must lie in [1, {}] for {}",
            model.len(),
            test.env()
        )));
    }
    let per_query = test
        .measurements
        .par_iter()
        .map(|m| {
            let q = model.query_features(m)?;
            let ranked = model.nearest(&q, k_max)?;
            k_values
                .iter()
                .map(|&k| model.aggregate(&ranked[..k], config.aggregation))
                .collect::<Result<Vec<Point>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = truths(test);
    (0..k_values.len())
        .map(|j| {
            let est: Vec<Point> = per_query.iter().map(|row| row[j]).collect();
            rmse(&est, &truth)
        })
        .collect()
}

/// Table of standalone stage-2 RMSE at `k = config.k2`.
pub fn feature_table(
    train: &[MeasurementSet],
    test: &[MeasurementSet],
    kinds: &[FeatureKind],
    config: &CascadeConfig,
) -> Result<FeatureTable> {
    if kinds.is_empty() {
        return Err(Error::invalid("no feature kinds"));
    }
    let pairs = pair(train, test)?;
    let mut table = FeatureTable {
        envs: Vec::new(),
        kinds: kinds.to_vec(),
        rmse: Vec::new(),
        best: Vec::new(),
        alpha: Vec::new(),
    };
    for (tr, te) in pairs {
        let mut row = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let model = stage2_model(tr, kind, &config.repr, config.scaling)?;
            row.push(rmse_for_ks(&model, te, &[config.k2.k], config)?[0]);
        }
        let best_i = (0..kinds.len())
            .min_by(|&a, &b| {
                row[a]
                    .total_cmp(&row[b])
                    .then(kinds[a].block_count().cmp(&kinds[b].block_count()))
                    .then(kinds[a].column().cmp(&kinds[b].column()))
            })
            .expect("non-empty");
        // baseline winning means no reduction, even when its RMSE is 0
        let alpha_v = kinds.iter().position(|&k| k == FeatureKind::Rss).and_then(|r| {
            if r == best_i {
                Some(0.0)
            } else {
                alpha(row[r], row[best_i]).ok()
            }
        });
        table.envs.push(tr.env());
        table.best.push(kinds[best_i]);
        table.alpha.push(alpha_v);
        table.rmse.push(row);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub env: Environment,
    pub kind: FeatureKind,
    pub k: usize,
    pub rmse: f64,
}

pub fn default_k_values() -> Vec<usize> {
    (1..=60).collect()
}

/// Standalone stage-2 RMSE as a function of k, long format.
pub fn sweep_k(
    train: &[MeasurementSet],
    test: &[MeasurementSet],
    kinds: &[FeatureKind],
    k_values: &[usize],
    config: &CascadeConfig,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for (tr, te) in pair(train, test)? {
        for &kind in kinds {
            let model = stage2_model(tr, kind, &config.repr, config.scaling)?;
            let values = rmse_for_ks(&model, te, k_values, config)?;
            out.extend(k_values.iter().zip(values).map(|(&k, rmse)| SweepPoint {
                env: tr.env(),
                kind,
                k,
                rmse,
            }));
        }
    }
    Ok(out)
}

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("environment,kind,k,rmse_cm\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{:.6}", p.env, p.kind, p.k, p.rmse);
    }
    s
}

/// Per-environment cascade RMSE with classified and with oracle stage 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeRow {
    pub env: Environment,
    pub n: usize,
    pub stage1_accuracy: f64,
    pub cascade_rmse: f64,
    pub oracle_rmse: f64,
}

pub fn cascade_rmse(model: &CascadeModel, test: &[MeasurementSet]) -> Result<Vec<CascadeRow>> {
    test.iter()
        .map(|set| {
            let results = set
                .measurements
                .par_iter()
                .map(|m| {
                    let full = model.localize_with(m, Stage1::Classify)?;
                    let oracle = model.localize_with(m, Stage1::Oracle(set.env()))?;
                    Ok((full.predicted_env, full.position, oracle.position))
                })
                .collect::<Result<Vec<_>>>()?;
            let truth = truths(set);
            let full: Vec<Point> = results.iter().map(|r| r.1).collect();
            let oracle: Vec<Point> = results.iter().map(|r| r.2).collect();
            let correct = results.iter().filter(|r| r.0 == set.env()).count();
            Ok(CascadeRow {
                env: set.env(),
                n: set.len(),
                stage1_accuracy: correct as f64 / set.len().max(1) as f64,
                cascade_rmse: rmse(&full, &truth)?,
                oracle_rmse: rmse(&oracle, &truth)?,
            })
        })
        .collect()
}

pub fn cascade_to_csv(rows: &[CascadeRow], policy: &crate::cascade::Policy) -> String {
    let mut s = String::from("environment,n_test,policy_kind,stage1_accuracy,cascade_rmse_cm,oracle_stage1_rmse_cm\n");
    for r in rows {
        let kind = policy.get(r.env).map_or("NA", |k| k.name());
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.env, r.n, kind, r.stage1_accuracy, r.cascade_rmse, r.oracle_rmse
        );
    }
    s
}

/// Wall-clock latency of single stage-1 classifications, nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub samples: usize,
    pub model_size: usize,
    pub median_ns: f64,
    pub p95_ns: f64,
    pub mean_ns: f64,
}

pub const MIN_TIMING_REPETITIONS: usize = 100;

/// Times `repetitions` single-query classifications against `model`, cycling
/// through `queries`, after an untimed warm-up pass of the same length.
pub fn time_queries(
    model: &FingerprintModel,
    queries: &[Vec<f64>],
    k: usize,
    repetitions: usize,
) -> Result<LatencyStats> {
    if repetitions < MIN_TIMING_REPETITIONS {
        return Err(Error::invalid(format!(
            "need at least {MIN_TIMING_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries to time"));
    }
    let mut sink = 0usize;
    for r in 0..repetitions {
        sink += model.classify(&queries[r % queries.len()], k)?.index();
    }
    let mut samples = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let q = &queries[r % queries.len()];
        let t0 = Instant::now();
        let label = model.classify(q, k)?;
        let dt = t0.elapsed();
        sink += label.index();
        samples.push(dt.as_nanos().max(1) as f64);
    }
    std::hint::black_box(sink);
    samples.sort_by(f64::total_cmp);
    let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
    Ok(LatencyStats {
        samples: samples.len(),
        model_size: model.len(),
        median_ns: pick(0.5),
        p95_ns: pick(0.95),
        mean_ns: samples.iter().sum::<f64>() / samples.len() as f64,
    })
}

impl LatencyStats {
    pub fn render(&self) -> String {
        format!(
            "stage-1 classification latency\nmodel_size = {}\nsamples = {}\nmedian_us = {:.3}\np95_us = {:.3}\nmean_us = {:.3}\n",
            self.model_size,
            self.samples,
            self.median_ns / 1e3,
            self.p95_ns / 1e3,
            self.mean_ns / 1e3
        )
    }
}

/// Everything `evaluate` produces.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub table: FeatureTable,
    pub sweep: Vec<SweepPoint>,
    pub cascade: Vec<CascadeRow>,
    pub policy: crate::cascade::Policy,
    pub latency: Option<LatencyStats>,
}

/// Deterministic report files, in write order.
pub const REPORT_FILES: [&str; 5] = [
    "confusion.csv",
    "feature_table.csv",
    "k_sweep.csv",
    "cascade_rmse.csv",
    "summary.txt",
];

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "stage-1 accuracy: {:.4} ({} / {} test queries)",
            self.confusion.accuracy(),
            self.confusion.trace(),
            self.confusion.total()
        );
        let _ = writeln!(s, "stage-1 kind: {}", self.policy.stage1_kind);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16}{:>14}{:>16}{:>16}{:>12}", "environment", "policy", "cascade_cm", "oracle_cm", "alpha_%");
        for row in &self.cascade {
            let kind = self.policy.get(row.env).map_or("NA", |k| k.name());
            let a = self
                .table
                .envs
                .iter()
                .position(|&e| e == row.env)
                .and_then(|i| self.table.alpha[i])
                .map_or_else(|| "NA".to_string(), |a| format!("{a:.1}"));
            let _ = writeln!(
                s,
                "{:<16}{:>14}{:>16.2}{:>16.2}{:>12}",
                row.env.name(),
                kind,
                row.cascade_rmse,
                row.oracle_rmse,
                a
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "best kind by test RMSE:");
        for (i, env) in self.table.envs.iter().enumerate() {
            let best = self.table.best[i];
            let v = self.table.rmse[i][self.table.kinds.iter().position(|&k| k == best).expect("best is a column")];
            let _ = writeln!(s, "  {:<16}{:<14}{:.2} cm", env.name(), best.name(), v);
        }
        s
    }

    /// Writes [`REPORT_FILES`] and, when timed, `latency.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files: BTreeMap<&str, String> = [
            ("confusion.csv", self.confusion.to_csv()),
            ("feature_table.csv", self.table.to_csv()),
            ("k_sweep.csv", sweep_to_csv(&self.sweep)),
            ("cascade_rmse.csv", cascade_to_csv(&self.cascade, &self.policy)),
            ("summary.txt", self.summary()),
        ]
        .into_iter()
        .collect();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        if let Some(l) = &self.latency {
            let p = dir.join("latency.txt");
            std::fs::write(&p, l.render()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
