use fingerloc::channel::EnvironmentProfile;
use fingerloc::dataset::{generate_synthetic, GridGeometry, MeasurementSet, SynthConfig};
use fingerloc::features::{build_feature, build_matrix, FeatureKind, FeatureRepr, Scaling, ZScore};
use fingerloc::knn::{distance, Aggregation, FingerprintModel};
use fingerloc::{Environment, Point};
use proptest::prelude::*;

fn small_set() -> MeasurementSet {
    let config = SynthConfig {
        geometry: GridGeometry::new(3, 3, 50.0).unwrap(),
        iterations: 2,
        ..SynthConfig::default()
    };
    generate_synthetic(&EnvironmentProfile::default_for(Environment::Lobby), &config, 17).unwrap()
}

fn model(rows: Vec<(Vec<f64>, Point, Environment)>) -> FingerprintModel {
    FingerprintModel::from_rows(FeatureKind::Rss, FeatureRepr::default(), None, rows).unwrap()
}

#[test]
fn scalar_dims_follow_block_count() {
    let set = small_set();
    let m = &set.measurements[0];
    let scalar = FeatureRepr::scalar();
    let want = [1, 2, 2, 3, 3, 4, 5];
    for (kind, d) in FeatureKind::ALL.iter().zip(want) {
        assert_eq!(build_feature(m, *kind, &scalar).unwrap().values.len(), d, "{kind}");
        assert_eq!(scalar.dim(*kind, 64), d);
    }
}

#[test]
fn sweep_ctf_fcf_layout() {
    let set = small_set();
    let m = &set.measurements[4];
    let v = build_feature(m, FeatureKind::CtfFcf, &FeatureRepr::sweep(16)).unwrap().values;
    assert_eq!(v.len(), 2 * 64 + 2 * 17);
    for (i, h) in m.ctf.values().iter().enumerate() {
        assert_eq!((v[2 * i], v[2 * i + 1]), (h.re, h.im));
    }
    for (j, r) in m.fcf.values()[..17].iter().enumerate() {
        assert_eq!((v[128 + 2 * j], v[128 + 2 * j + 1]), (r.re, r.im));
    }
}

#[test]
fn hybrid_dims_add_up_and_rss_leads() {
    let set = small_set();
    let m = &set.measurements[3];
    for repr in [FeatureRepr::scalar(), FeatureRepr::sweep(16), FeatureRepr::sweep(5)] {
        let dim = |k: FeatureKind| build_feature(m, k, &repr).unwrap().values.len();
        for kind in FeatureKind::ALL {
            let (r, c, f) = kind.blocks();
            let parts = [(r, FeatureKind::Rss), (c, FeatureKind::Ctf), (f, FeatureKind::Fcf)];
            let sum: usize = parts.iter().filter(|p| p.0).map(|p| dim(p.1)).sum();
            assert_eq!(dim(kind), sum);
        }
        let full = build_feature(m, FeatureKind::RssCtfFcf, &repr).unwrap().values;
        assert_eq!(full[0], build_feature(m, FeatureKind::Rss, &repr).unwrap().values[0]);
        assert_eq!(full[0], m.rss_db);
    }
}

#[test]
fn rss_matrix_is_rss_column() {
    let set = small_set();
    let mx = build_matrix(&set, FeatureKind::Rss, &FeatureRepr::default(), Scaling::Raw).unwrap();
    for (v, m) in mx.vectors.iter().zip(&set.measurements) {
        assert_eq!(v.values, vec![m.rss_db]);
    }
    assert!(mx.scaler.is_none());
}

#[test]
fn zscore_moments_and_idempotence() {
    let set = small_set();
    let mx = build_matrix(&set, FeatureKind::RssFcf, &FeatureRepr::default(), Scaling::ZScore).unwrap();
    let n = mx.vectors.len() as f64;
    let dim = mx.vectors[0].values.len();
    for d in 0..dim {
        let col: Vec<f64> = mx.vectors.iter().map(|v| v.values[d]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-9, "dim {d} mean {mean}");
        // FCF lag 0 imaginary part is identically zero and stays unscaled
        assert!((sd - 1.0).abs() <= 1e-9 || sd == 0.0, "dim {d} sd {sd}");
    }
    let refit = ZScore::fit(mx.vectors.iter().map(|v| v.values.as_slice())).unwrap();
    for v in &mx.vectors {
        let mut again = v.values.clone();
        refit.apply(&mut again).unwrap();
        for (a, b) in again.iter().zip(&v.values) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn distance_examples() {
    assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
    assert!(distance(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn knn_small_examples() {
    let m = model(vec![(vec![1.0, 1.0], Point::new(7.0, 8.0), Environment::Lobby)]);
    assert_eq!(m.nearest(&[50.0, -3.0], 1).unwrap()[0].index, 0);

    let m = model(vec![
        (vec![0.0], Point::new(0.0, 0.0), Environment::Lab),
        (vec![1.0], Point::new(100.0, 0.0), Environment::Lab),
        (vec![2.0], Point::new(0.0, 0.0), Environment::SportsHall),
        (vec![9.0], Point::new(0.0, 0.0), Environment::Lobby),
    ]);
    assert_eq!(m.classify(&[0.9], 3).unwrap(), Environment::Lab);
    assert_eq!(m.locate(&[0.4], 2).unwrap(), Point::new(50.0, 0.0));
    let hit = m.nearest(&[2.0], 1).unwrap();
    assert_eq!((hit[0].index, hit[0].distance), (2, 0.0));
    assert!(m.nearest(&[0.0], 0).is_err());
    assert!(m.nearest(&[0.0], 5).is_err());
}

#[test]
fn ties_resolve_by_index() {
    let m = model(vec![
        (vec![1.0], Point::new(0.0, 0.0), Environment::Lobby),
        (vec![-1.0], Point::new(10.0, 0.0), Environment::Lab),
        (vec![1.0], Point::new(20.0, 0.0), Environment::Lab),
    ]);
    let n = m.nearest(&[0.0], 3).unwrap();
    assert_eq!(n.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    // 2-way vote tie: Lobby (rank 0) vs Lab (rank 1) -> Lobby
    assert_eq!(m.classify(&[0.0], 2).unwrap(), Environment::Lobby);
    assert_eq!(m.locate(&[1.0], 1).unwrap(), Point::new(0.0, 0.0));
}

#[test]
fn inverse_distance_weighting() {
    let m = model(vec![
        (vec![0.0], Point::new(0.0, 0.0), Environment::Lab),
        (vec![3.0], Point::new(90.0, 0.0), Environment::Lab),
    ]);
    let n = m.nearest(&[1.0], 2).unwrap();
    // weights 1/1 and 1/2
    let p = m.aggregate(&n, Aggregation::InverseDistance).unwrap();
    assert!((p.x - 30.0).abs() < 1e-12 && p.y == 0.0);
}

#[test]
fn model_file_round_trip() {
    let set = small_set();
    let mx = build_matrix(&set, FeatureKind::CtfFcf, &FeatureRepr::sweep(4), Scaling::ZScore).unwrap();
    let m = FingerprintModel::from_matrix(mx).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.model");
    m.write(&path).unwrap();
    assert_eq!(FingerprintModel::read(&path).unwrap(), m);
}

#[test]
fn self_query_returns_own_position() {
    let set = small_set();
    let mx = build_matrix(&set, FeatureKind::Ctf, &FeatureRepr::default(), Scaling::Raw).unwrap();
    let m = FingerprintModel::from_matrix(mx.clone()).unwrap();
    for v in &mx.vectors {
        assert_eq!(m.locate(&v.values, 1).unwrap(), v.position);
    }
}

fn rows_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize)> {
    (1usize..6, 1usize..200).prop_flat_map(|(dim, n)| {
        (
            prop::collection::vec(prop::collection::vec(-50.0..50.0f64, dim), n),
            prop::collection::vec(-50.0..50.0f64, dim),
            1..=n,
        )
    })
}

proptest! {
    #[test]
    fn nearest_matches_sort_oracle((data, q, k) in rows_strategy()) {
        let m = model(
            data.iter()
                .enumerate()
                .map(|(i, v)| (v.clone(), Point::new(i as f64, 0.0), Environment::ALL[i % 4]))
                .collect(),
        );
        let mut oracle: Vec<(f64, usize)> = data
            .iter()
            .enumerate()
            .map(|(i, v)| (v.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let got = m.nearest(&q, k).unwrap();
        prop_assert_eq!(
            got.iter().map(|n| n.index).collect::<Vec<_>>(),
            oracle[..k].iter().map(|o| o.1).collect::<Vec<_>>()
        );
    }

    #[test]
    fn permutation_invariance_without_ties((data, q, k) in rows_strategy(), rot in 0usize..200) {
        let n = data.len();
        let rows: Vec<_> = data
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), Point::new(i as f64 * 3.0, 1.0), Environment::ALL[i % 4]))
            .collect();
        let mut rotated = rows.clone();
        rotated.rotate_left(rot % n);
        let a = model(rows);
        let b = model(rotated);
        let mut d: Vec<f64> = data.iter().map(|v| distance(v, &q).unwrap()).collect();
        d.sort_by(f64::total_cmp);
        prop_assume!(d.windows(2).all(|w| w[0] != w[1]));
        prop_assert_eq!(a.classify(&q, k).unwrap(), b.classify(&q, k).unwrap());
        let (pa, pb) = (a.locate(&q, k).unwrap(), b.locate(&q, k).unwrap());
        prop_assert!(pa.distance(pb) <= 1e-9);
    }

    #[test]
    fn distance_matches_elementwise(a in prop::collection::vec(-1e3..1e3f64, 5), b in prop::collection::vec(-1e3..1e3f64, 5)) {
        let want = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!((distance(&a, &b).unwrap() - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn metric_axioms(
        a in prop::collection::vec(-1e3..1e3f64, 4),
        b in prop::collection::vec(-1e3..1e3f64, 4),
        c in prop::collection::vec(-1e3..1e3f64, 4),
    ) {
        let d = |x: &[f64], y: &[f64]| distance(x, y).unwrap();
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }
}
