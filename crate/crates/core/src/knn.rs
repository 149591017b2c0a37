//! Exhaustive k-nearest-neighbour search over a fingerprint database.
//!
//! Neighbours are ranked by Euclidean distance; equal distances are ordered
//! by ascending training index, so every query has exactly one answer.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::RfObservation;
use crate::environment::{Environment, Point};
use crate::error::{Error, Result};
use crate::features::{feature_values, FeatureKind, FeatureMatrix, FeatureRepr, ReprMode, ZScore};
use crate::kv::KvFile;

/// `sqrt(sum_i (a_i - b_i)^2)`.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(sq_dist(a, b).sqrt())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    // four independent lanes so the loop vectorises
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += (x - y) * (x - y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.index.cmp(&b.index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnnConfig {
    pub k: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 1 }
    }
}

impl KnnConfig {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        Ok(KnnConfig { k })
    }
}

/// How neighbour positions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Centroid,
    /// Weights `1 / distance`; an exact match short-circuits to that position.
    InverseDistance,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "centroid" => Ok(Aggregation::Centroid),
            "inverse-distance" | "idw" => Ok(Aggregation::InverseDistance),
            _ => Err(Error::invalid(format!("unknown aggregation '{s}'"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Centroid => "centroid",
            Aggregation::InverseDistance => "inverse-distance",
        })
    }
}

/// Immutable training database: labelled, positioned feature vectors of one
/// kind and representation, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintModel {
    kind: FeatureKind,
    repr: FeatureRepr,
    scaler: Option<ZScore>,
    dim: usize,
    data: Vec<f64>,
    positions: Vec<Point>,
    labels: Vec<Environment>,
}

impl FingerprintModel {
    pub fn from_matrix(matrix: FeatureMatrix) -> Result<Self> {
        let FeatureMatrix {
            kind,
            repr,
            vectors,
            scaler,
        } = matrix;
        let rows = vectors
            .into_iter()
            .map(|v| (v.values, v.position, v.env));
        Self::from_rows(kind, repr, scaler, rows)
    }

    pub fn from_rows(
        kind: FeatureKind,
        repr: FeatureRepr,
        scaler: Option<ZScore>,
        rows: impl IntoIterator<Item = (Vec<f64>, Point, Environment)>,
    ) -> Result<Self> {
        let mut dim = None;
        let mut data = Vec::new();
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        for (values, position, env) in rows {
            let d = *dim.get_or_insert(values.len());
            if values.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: values.len(),
                });
            }
            data.extend_from_slice(&values);
            positions.push(position);
            labels.push(env);
        }
        let dim = dim.ok_or_else(|| Error::invalid("fingerprint model needs at least one vector"))?;
        if dim == 0 {
            return Err(Error::invalid("fingerprint vectors are empty"));
        }
        if let Some(z) = &scaler {
            if z.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: z.dim(),
                });
            }
        }
        Ok(FingerprintModel {
            kind,
            repr,
            scaler,
            dim,
            data,
            positions,
            labels,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn repr(&self) -> &FeatureRepr {
        &self.repr
    }

    pub fn scaler(&self) -> Option<&ZScore> {
        self.scaler.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, i: usize) -> Point {
        self.positions[i]
    }

    pub fn label(&self, i: usize) -> Environment {
        self.labels[i]
    }

    /// Builds the model's feature for `obs`, scaled like the training data.
    pub fn query_features(&self, obs: &impl RfObservation) -> Result<Vec<f64>> {
        let mut q = feature_values(obs, self.kind, &self.repr)?;
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        if let Some(z) = &self.scaler {
            z.apply(&mut q)?;
        }
        Ok(q)
    }

    fn check(&self, query: &[f64], k: usize) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside [1, {}] for this model",
                self.len()
            )));
        }
        Ok(())
    }

    /// The `k` closest training vectors, ascending by `(distance, index)`.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.check(query, k)?;
        if k * 8 <= self.len() {
            // small k: keep a sorted buffer of the best k seen so far
            let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
            for (index, row) in self.data.chunks_exact(self.dim).enumerate() {
                let n = Neighbor {
                    index,
                    distance: sq_dist(row, query).sqrt(),
                };
                if best.len() == k && rank(&n, &best[k - 1]) != Ordering::Less {
                    continue;
                }
                let at = best.partition_point(|b| rank(b, &n) == Ordering::Less);
                best.insert(at, n);
                best.truncate(k);
            }
            return Ok(best);
        }
        let mut all: Vec<Neighbor> = self
            .data
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(index, row)| Neighbor {
                index,
                distance: sq_dist(row, query).sqrt(),
            })
            .collect();
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, rank);
            all.truncate(k);
        }
        all.sort_unstable_by(rank);
        Ok(all)
    }

    /// Majority label among `neighbors`. A tie goes to the tied label that
    /// appears first in the (already ranked) neighbour list.
    pub fn vote(&self, neighbors: &[Neighbor]) -> Result<Environment> {
        let mut tally: BTreeMap<Environment, (usize, usize)> = BTreeMap::new();
        for (rank, n) in neighbors.iter().enumerate() {
            let e = tally.entry(self.labels[n.index]).or_insert((0, rank));
            e.0 += 1;
        }
        tally
            .into_iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            .map(|(label, _)| label)
            .ok_or_else(|| Error::invalid("no neighbours to vote"))
    }

    pub fn classify(&self, query: &[f64], k: usize) -> Result<Environment> {
        self.vote(&self.nearest(query, k)?)
    }

    /// Combines neighbour positions. The centroid sums in rank order.
    pub fn aggregate(&self, neighbors: &[Neighbor], how: Aggregation) -> Result<Point> {
        if neighbors.is_empty() {
            return Err(Error::invalid("no neighbours to aggregate"));
        }
        match how {
            Aggregation::Centroid => {
                let (mut x, mut y) = (0.0, 0.0);
                for n in neighbors {
                    let p = self.positions[n.index];
                    x += p.x;
                    y += p.y;
                }
                let k = neighbors.len() as f64;
                Ok(Point::new(x / k, y / k))
            }
            Aggregation::InverseDistance => {
                if let Some(n) = neighbors.iter().find(|n| n.distance == 0.0) {
                    return Ok(self.positions[n.index]);
                }
                let (mut x, mut y, mut w) = (0.0, 0.0, 0.0);
                for n in neighbors {
                    let p = self.positions[n.index];
                    let wi = 1.0 / n.distance;
                    x += wi * p.x;
                    y += wi * p.y;
                    w += wi;
                }
                Ok(Point::new(x / w, y / w))
            }
        }
    }

    /// Unweighted centroid of the `k` nearest positions.
    pub fn locate(&self, query: &[f64], k: usize) -> Result<Point> {
        self.aggregate(&self.nearest(query, k)?, Aggregation::Centroid)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut meta = KvFile::new();
        meta.set("kind", self.kind);
        meta.set("repr", self.repr.mode);
        meta.set(
            "scalar_bin",
            self.repr.scalar_bin.map_or_else(|| "center".to_string(), |b| b.to_string()),
        );
        meta.set("max_lag", self.repr.max_lag);
        meta.set("dim", self.dim);
        meta.set("rows", self.len());
        if let Some(z) = &self.scaler {
            meta.set("scaling", "zscore");
            meta.set("zscore.mean", join(&z.mean));
            meta.set("zscore.scale", join(&z.scale));
        } else {
            meta.set("scaling", "raw");
        }
        let mut text = String::from("# fingerloc fingerprint model\n");
        for (k, v) in meta.iter() {
            let _ = writeln!(text, "# {k} = {v}");
        }
        text.push_str("env,x_cm,y_cm");
        for i in 0..self.dim {
            let _ = write!(text, ",f{i}");
        }
        text.push('\n');
        for i in 0..self.len() {
            let p = self.positions[i];
            let _ = write!(text, "{},{},{}", self.labels[i], p.x, p.y);
            for v in self.vector(i) {
                let _ = write!(text, ",{v}");
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut meta_text = String::new();
        let mut body = String::new();
        let mut body_start = 0u64;
        for (i, line) in text.lines().enumerate() {
            if body.is_empty() && line.starts_with('#') {
                let entry = line.trim_start_matches('#');
                if entry.contains('=') {
                    meta_text.push_str(entry);
                    meta_text.push('\n');
                }
            } else {
                if body.is_empty() {
                    body_start = i as u64;
                }
                body.push_str(line);
                body.push('\n');
            }
        }
        let meta = KvFile::parse(&meta_text)?;
        let kind: FeatureKind = meta.require("kind")?;
        let mode: ReprMode = meta.require("repr")?;
        let scalar_bin = match meta.get("scalar_bin") {
            None | Some("center") => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::data(format!("bad scalar_bin '{s}'")))?,
            ),
        };
        let repr = FeatureRepr {
            mode,
            scalar_bin,
            max_lag: meta.require("max_lag")?,
        };
        let dim: usize = meta.require("dim")?;
        let scaler = match meta.get("scaling") {
            Some("zscore") => Some(ZScore {
                mean: split_floats(meta.get("zscore.mean").unwrap_or(""))?,
                scale: split_floats(meta.get("zscore.scale").unwrap_or(""))?,
            }),
            _ => None,
        };
        let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let line = body_start + rec.position().map_or(0, |p| p.line());
            if rec.len() != dim + 3 {
                return Err(Error::data_at(
                    line,
                    format!("{}: expected {} fields", path.display(), dim + 3),
                ));
            }
            let env: Environment = rec[0].parse()?;
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::data_at(line, format!("{}: bad number '{s}'", path.display())))
            };
            let pos = Point::new(num(&rec[1])?, num(&rec[2])?);
            let values = (3..rec.len()).map(|j| num(&rec[j])).collect::<Result<Vec<_>>>()?;
            rows.push((values, pos, env));
        }
        Self::from_rows(kind, repr, scaler, rows)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn split_floats(s: &str) -> Result<Vec<f64>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::data(format!("bad number '{p}' in scaler")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(rows: &[(&[f64], (f64, f64), Environment)]) -> FingerprintModel {
        FingerprintModel::from_rows(
            FeatureKind::Ctf,
            FeatureRepr::default(),
            None,
            rows.iter()
                .map(|(v, (x, y), e)| (v.to_vec(), Point::new(*x, *y), *e)),
        )
        .unwrap()
    }

    use Environment::*;

    #[test]
    fn distance_basics() {
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_vector_model() {
        let m = model(&[(&[1.0, 1.0], (10.0, 20.0), Lab)]);
        let n = m.nearest(&[9.0, -4.0], 1).unwrap();
        assert_eq!(n[0].index, 0);
        assert_eq!(m.locate(&[9.0, -4.0], 1).unwrap(), Point::new(10.0, 20.0));
    }

    #[test]
    fn exact_match_at_zero_distance() {
        let m = model(&[
            (&[0.0, 0.0], (0.0, 0.0), Lab),
            (&[2.0, 2.0], (50.0, 0.0), Lab),
        ]);
        let n = m.nearest(&[2.0, 2.0], 1).unwrap();
        assert_eq!(n[0], Neighbor { index: 1, distance: 0.0 });
    }

    #[test]
    fn ties_break_by_index() {
        let m = model(&[
            (&[1.0], (0.0, 0.0), Lobby),
            (&[-1.0], (100.0, 0.0), Lab),
            (&[1.0], (200.0, 0.0), Lab),
        ]);
        let n = m.nearest(&[0.0], 3).unwrap();
        assert_eq!(n.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        // two-way tie on k=2: Lobby (index 0) came first.
        assert_eq!(m.classify(&[0.0], 2).unwrap(), Lobby);
    }

    #[test]
    fn majority_vote() {
        let m = model(&[
            (&[0.0], (0.0, 0.0), Lab),
            (&[0.1], (0.0, 0.0), Lab),
            (&[0.2], (0.0, 0.0), SportsHall),
        ]);
        assert_eq!(m.classify(&[0.19], 1).unwrap(), SportsHall);
        assert_eq!(m.classify(&[0.19], 3).unwrap(), Lab);
    }

    #[test]
    fn midpoint_for_two_neighbours() {
        let m = model(&[
            (&[0.0], (0.0, 0.0), Lab),
            (&[1.0], (100.0, 0.0), Lab),
            (&[10.0], (500.0, 500.0), Lab),
        ]);
        assert_eq!(m.locate(&[0.5], 2).unwrap(), Point::new(50.0, 0.0));
    }

    #[test]
    fn inverse_distance_weights() {
        let m = model(&[(&[0.0], (0.0, 0.0), Lab), (&[3.0], (90.0, 0.0), Lab)]);
        let n = m.nearest(&[1.0], 2).unwrap();
        let p = m.aggregate(&n, Aggregation::InverseDistance).unwrap();
        assert!((p.x - 30.0).abs() < 1e-12);
    }

    #[test]
    fn k_and_dimension_are_checked() {
        let m = model(&[(&[0.0, 1.0], (0.0, 0.0), Lab)]);
        assert!(m.nearest(&[0.0, 1.0], 2).is_err());
        assert!(m.nearest(&[0.0, 1.0], 0).is_err());
        assert!(m.nearest(&[0.0], 1).is_err());
        assert!(KnnConfig::new(0).is_err());
        assert!(FingerprintModel::from_rows(FeatureKind::Rss, FeatureRepr::default(), None, vec![])
            .is_err());
    }

    #[test]
    fn mismatched_rows_are_rejected() {
        let rows = vec![
            (vec![0.0], Point::default(), Lab),
            (vec![0.0, 1.0], Point::default(), Lab),
        ];
        assert!(FingerprintModel::from_rows(FeatureKind::Rss, FeatureRepr::default(), None, rows)
            .is_err());
    }

    #[test]
    fn file_round_trip() {
        let m = FingerprintModel::from_rows(
            FeatureKind::RssFcf,
            FeatureRepr::scalar(),
            Some(ZScore {
                mean: vec![0.5, -1.0, 2.0],
                scale: vec![1.0, 0.25, 3.0],
            }),
            vec![
                (vec![0.1, 0.2, 1.0 / 3.0], Point::new(0.0, 50.0), Lab),
                (vec![-7.0, 1e-9, 4.0], Point::new(100.0, 0.0), SportsHall),
            ],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.model");
        m.write(&p).unwrap();
        assert_eq!(FingerprintModel::read(&p).unwrap(), m);
    }
}
