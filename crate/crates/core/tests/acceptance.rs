//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! gating criterion fails. Runs under `cargo test` with its own `main`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fingerloc::cascade::{self, Stage1};
use fingerloc::channel::{compute_fcf, CtfSweep, FrequencyGrid};
use fingerloc::dataset::{self, MeasurementSet};
use fingerloc::eval::{self, REPORT_FILES};
use fingerloc::features::FeatureKind;
use fingerloc::knn::{distance, FingerprintModel};
use fingerloc::pipeline::{self, RunConfig, Trained};
use fingerloc::{Environment, Point};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and pinned fixtures.
const ALPHA_TOL: f64 = 0.05;
const FCF_REL_TOL: f64 = 1e-9;
const LOCATE_TOL: f64 = 1e-9;
const TRIANGLE_SLACK: f64 = 1e-12;
const MIN_STAGE1_ACCURACY: f64 = 0.95;
/// alpha(RSS, CTF+FCF) on the pinned dataset, recorded from the first run.
const PINNED_ALPHA: [(Environment, f64); 2] =
    [(Environment::Lab, 100.0), (Environment::NarrowCorridor, 100.0)];
const PINNED_ALPHA_TOL: f64 = 1e-9;
const PINNED_SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Pinned {
    sets: Vec<MeasurementSet>,
    trained: Trained,
    config: RunConfig,
}

fn pinned() -> Pinned {
    let config = RunConfig {
        seed: PINNED_SEED,
        ..RunConfig::default()
    };
    let sets = pipeline::synthesize(&config).expect("synthesize");
    let trained = pipeline::train_sets(&sets, &config).expect("train");
    Pinned {
        sets,
        trained,
        config,
    }
}

fn c1_alpha() -> Outcome {
    let rows = [
        ("Lab", 109.19, 39.68, 63.7),
        ("Corridor", 105.3, 30.49, 71.0),
        ("Lobby", 106.25, 27.18, 74.4),
        ("SportsHall", 111.3, 55.2, 50.4),
    ];
    let mut ok = true;
    let mut got = Vec::new();
    for (name, rss, beta, want) in rows {
        let a = eval::alpha(rss, beta).expect("positive baseline");
        ok &= (a - want).abs() <= ALPHA_TOL;
        got.push(format!("{name}={a:.2}"));
    }
    outcome(ok, got.join(" "))
}

fn fcf_oracle(h: &[Complex64], max_lag: usize) -> Vec<Complex64> {
    let n = h.len();
    (0..=max_lag)
        .map(|m| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n - m {
                acc += h[i] * h[i + m].conj();
            }
            acc / (n - m) as f64
        })
        .collect()
}

fn c2_fcf() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=256);
        let max_lag = rng.random_range(0..n);
        let h: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let grid = FrequencyGrid::new(2.4e9, 100e6, n).expect("grid");
        let got = compute_fcf(&CtfSweep::new(grid, h.clone()).expect("sweep"), max_lag).expect("fcf");
        let want = fcf_oracle(&h, max_lag);
        let scale = want[0].norm();
        for (g, w) in got.values().iter().zip(&want) {
            let rel = (g - w).norm() / w.norm().max(scale).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
        }
    }
    outcome(worst <= FCF_REL_TOL, format!("1000 sweeps, worst relative error {worst:.2e}"))
}

fn brute_rank(data: &[Vec<f64>], q: &[f64]) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = data
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()))
        .collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)));
    all
}

fn c3_knn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for case in 0..500 {
        let size = rng.random_range(1..=1000);
        let dim = rng.random_range(1..=12);
        // every other case uses small integers so exact ties occur
        let coarse = case % 2 == 0;
        let data: Vec<Vec<f64>> = (0..size)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        if coarse {
                            rng.random_range(0..3) as f64
                        } else {
                            rng.random_range(-10.0..10.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let labels: Vec<Environment> = (0..size)
            .map(|_| Environment::ALL[rng.random_range(0..4)])
            .collect();
        let positions: Vec<Point> = (0..size)
            .map(|_| Point::new(rng.random_range(0.0..700.0), rng.random_range(0.0..700.0)))
            .collect();
        let q: Vec<f64> = (0..dim)
            .map(|_| {
                if coarse {
                    rng.random_range(0..3) as f64
                } else {
                    rng.random_range(-10.0..10.0)
                }
            })
            .collect();
        let k = rng.random_range(1..=size);
        let model = FingerprintModel::from_rows(
            FeatureKind::Rss,
            Default::default(),
            None,
            (0..size).map(|i| (data[i].clone(), positions[i], labels[i])),
        )
        .expect("model");

        let want = &brute_rank(&data, &q)[..k];
        let got = model.nearest(&q, k).expect("nearest");
        let same_ranking = got.len() == k
            && got
                .iter()
                .zip(want)
                .all(|(g, w)| g.index == w.0 && (g.distance - w.1).abs() <= 1e-12 * w.1.max(1.0));

        let mut votes = [0usize; 4];
        for w in want {
            votes[labels[w.0].index()] += 1;
        }
        let top = *votes.iter().max().expect("four labels");
        let want_label = want
            .iter()
            .map(|w| labels[w.0])
            .find(|l| votes[l.index()] == top)
            .expect("non-empty");
        let same_label = model.classify(&q, k).expect("classify") == want_label;

        let (sx, sy) = want
            .iter()
            .fold((0.0, 0.0), |(x, y), w| (x + positions[w.0].x, y + positions[w.0].y));
        let centroid = Point::new(sx / k as f64, sy / k as f64);
        let same_pos = model.locate(&q, k).expect("locate").distance(centroid) <= LOCATE_TOL;

        if !(same_ranking && same_label && same_pos) {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("500 instances, {failures} disagreements"))
}

fn c4_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = [0usize; 4];
    for _ in 0..10_000 {
        let dim = rng.random_range(1..=32);
        let mut v = || -> Vec<f64> { (0..dim).map(|_| rng.random_range(-100.0..100.0)).collect() };
        let (a, b, c) = (v(), v(), v());
        let d = |x: &[f64], y: &[f64]| distance(x, y).expect("same dim");
        bad[0] += usize::from(d(&a, &b) < 0.0);
        bad[1] += usize::from(d(&a, &b) != d(&b, &a));
        bad[2] += usize::from(d(&a, &a) != 0.0);
        let (ab, bc, ac) = (d(&a, &b), d(&b, &c), d(&a, &c));
        bad[3] += usize::from(ac > ab + bc + TRIANGLE_SLACK * (ab + bc));
    }
    outcome(
        bad.iter().all(|&n| n == 0),
        format!(
            "10000 triples; violations: non-negativity {}, symmetry {}, identity {}, triangle {}",
            bad[0], bad[1], bad[2], bad[3]
        ),
    )
}

fn c5_oracle_decomposition(p: &Pinned) -> Outcome {
    let model = &p.trained.model;
    let cc = pipeline::config_of(model);
    let mut ok = true;
    let mut parts = Vec::new();
    for test in &p.trained.test {
        let env = test.env();
        let train = p.trained.train.iter().find(|t| t.env() == env).expect("paired");
        let kind = model.policy.get(env).expect("policy entry");
        let standalone = cascade::stage2_rmse(train, test, kind, &cc).expect("stage-2");
        let est: Vec<Point> = test
            .measurements
            .iter()
            .map(|m| model.localize_with(m, Stage1::Oracle(env)).expect("localize").position)
            .collect();
        let truth: Vec<Point> = test.measurements.iter().map(|m| m.position).collect();
        let forced = eval::rmse(&est, &truth).expect("rmse");
        ok &= forced.to_bits() == standalone.to_bits();
        parts.push(format!("{env}={forced}"));
    }
    outcome(ok, format!("oracle-forced == standalone bitwise: {}", parts.join(" ")))
}

fn c6_accuracy(p: &Pinned) -> Outcome {
    let cm = eval::confusion(&p.trained.model, &p.trained.test).expect("confusion");
    let acc = cm.accuracy();
    outcome(
        acc >= MIN_STAGE1_ACCURACY && p.trained.model.k1.k == 1 && p.trained.model.policy.stage1_kind == FeatureKind::CtfFcf,
        format!("accuracy {acc:.4} ({} / {}), need >= {MIN_STAGE1_ACCURACY}", cm.trace(), cm.total()),
    )
}

fn c7_hybrid(table: &eval::FeatureTable) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (env, pinned_alpha) in PINNED_ALPHA {
        let rss = table.get(env, FeatureKind::Rss).expect("RSS column");
        let hyb = table.get(env, FeatureKind::CtfFcf).expect("CTF+FCF column");
        let a = eval::alpha(rss, hyb).expect("positive baseline");
        ok &= hyb < rss && (a - pinned_alpha).abs() <= PINNED_ALPHA_TOL;
        parts.push(format!("{env}: RSS {rss:.2} cm, CTF+FCF {hyb:.2} cm, alpha {a:.4}%"));
    }
    outcome(ok, parts.join("; "))
}

fn c8_sweep(p: &Pinned) -> Outcome {
    let cc = pipeline::config_of(&p.trained.model);
    let sweep = eval::sweep_k(&p.trained.train, &p.trained.test, &FeatureKind::ALL, &[1, 50], &cc)
        .expect("sweep");
    let mut violations = Vec::new();
    let mut min_margin = f64::INFINITY;
    for pair in sweep.chunks_exact(2) {
        let (k1, k50) = (pair[0], pair[1]);
        assert!(k1.k == 1 && k50.k == 50 && k1.kind == k50.kind && k1.env == k50.env);
        min_margin = min_margin.min(k50.rmse - k1.rmse);
        if k50.rmse < k1.rmse {
            violations.push(format!("{}/{}", k1.env, k1.kind));
        }
    }
    outcome(
        violations.is_empty() && sweep.len() == 56,
        format!(
            "28 (env, kind) pairs, smallest rmse(50) - rmse(1) = {min_margin:.2} cm, violations: [{}]",
            violations.join(", ")
        ),
    )
}

fn c9_split(p: &Pinned) -> Outcome {
    let mut ok = p.sets.len() == 4;
    let mut parts = Vec::new();
    for (s, (tr, te)) in p.sets.iter().zip(p.trained.train.iter().zip(&p.trained.test)) {
        ok &= s.len() == 1960 && tr.len() == 1470 && te.len() == 490;
        parts.push(format!("{}: {} = {} + {}", s.env(), s.len(), tr.len(), te.len()));
    }
    outcome(ok, parts.join("; "))
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let bin = env!("CARGO_BIN_EXE_fingerloc");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(bin)
            .args(["reproduce", "--seed", &PINNED_SEED.to_string(), "--timing-reps", "100", "--out"])
            .arg(&out)
            .output()
            .expect("spawn fingerloc");
        (status.status.success(), out)
    };
    let (ok_a, a) = run("a");
    let (ok_b, b) = run("b");
    if !(ok_a && ok_b) {
        return outcome(false, "reproduce exited with an error");
    }
    let read = |dir: &Path, f: &str| std::fs::read(dir.join("report").join(f)).unwrap_or_default();
    let differing: Vec<&str> = REPORT_FILES
        .iter()
        .copied()
        .filter(|f| {
            let x = read(&a, f);
            x.is_empty() || x != read(&b, f)
        })
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} report files compared, differing: {:?}", REPORT_FILES.len(), differing),
    )
}

/// Set FINGERLOC_REAL_DATA to a directory of manifests to run this one.
fn c11_real_data() -> Option<Outcome> {
    let dir = std::env::var_os("FINGERLOC_REAL_DATA")?;
    let sets = match dataset::load_dir(Path::new(&dir)) {
        Ok(s) => s,
        Err(e) => return Some(outcome(false, format!("load failed: {e}"))),
    };
    let config = RunConfig::default();
    let t = match pipeline::train_sets(&sets, &config) {
        Ok(t) => t,
        Err(e) => return Some(outcome(false, format!("training failed: {e}"))),
    };
    let acc = eval::confusion(&t.model, &t.test).map(|c| c.accuracy()).unwrap_or(0.0);
    let cc = pipeline::config_of(&t.model);
    let table = eval::feature_table(&t.train, &t.test, &FeatureKind::ALL, &cc);
    let reference = [
        (Environment::Lab, 39.68),
        (Environment::NarrowCorridor, 30.49),
        (Environment::Lobby, 27.18),
        (Environment::SportsHall, 55.2),
    ];
    let mut ok = (acc - 0.993).abs() <= 0.03;
    let mut parts = vec![format!("accuracy {acc:.4}")];
    if let Ok(table) = table {
        for (env, want) in reference {
            if let Some(i) = table.envs.iter().position(|&e| e == env) {
                let best = table.rmse[i].iter().copied().fold(f64::INFINITY, f64::min);
                ok &= ((best - want) / want).abs() <= 0.15;
                parts.push(format!("{env} best {best:.2} cm"));
            }
        }
    }
    Some(outcome(ok, parts.join("; ")))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        results.push((n, name, o, t0.elapsed().as_secs_f64()));
    };
    timed(1, "alpha reproduces reference values", &mut c1_alpha);
    timed(2, "FCF matches double-loop oracle", &mut c2_fcf);
    timed(3, "k-NN matches brute-force oracles", &mut c3_knn);
    timed(4, "Euclidean metric axioms", &mut c4_metric);
    let t0 = Instant::now();
    let p = pinned();
    let cc = pipeline::config_of(&p.trained.model);
    let table = eval::feature_table(&p.trained.train, &p.trained.test, &FeatureKind::ALL, &cc)
        .expect("feature table");
    println!("pinned dataset (seed {}) built in {:.1}s", p.config.seed, t0.elapsed().as_secs_f64());
    timed(5, "oracle-forced cascade equals standalone stage 2", &mut || c5_oracle_decomposition(&p));
    timed(6, "synthetic stage-1 accuracy", &mut || c6_accuracy(&p));
    timed(7, "hybrid beats RSS baseline (pinned alpha)", &mut || c7_hybrid(&table));
    timed(8, "k-sweep: rmse(k=50) >= rmse(k=1)", &mut || c8_sweep(&p));
    timed(9, "split counts 1960 = 1470 + 490", &mut || c9_split(&p));
    timed(10, "reproduce is byte-deterministic", &mut c10_determinism);

    let mut failed = 0;
    for (n, name, o, secs) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("criterion {n:>2} {tag} {name} ({secs:.2}s): {}", o.detail);
    }
    match c11_real_data() {
        Some(o) => println!(
            "criterion 11 {} real dataset (non-gating): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ),
        None => println!("criterion 11 SKIP real dataset (non-gating): FINGERLOC_REAL_DATA not set"),
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
    println!("all gating criteria passed");
}
