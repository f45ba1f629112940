//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

// `ensure!` negates the whole condition so that a NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stormloss::cart::{best_split, fit_tree, impurity, Criterion, MaxFeatures, TreeHyperparams};
use stormloss::cli::{self, run_stage, RunConfig, Stage};
use stormloss::data_model::{
    clean_and_join, ingest_events, ingest_meteo, ingest_resilience, EventColumns, MeteoColumns,
    ResilienceColumns, StudyWindow,
};
use stormloss::forest::{default_feature_importance, fit_forest, fit_forest_with_threads, ForestHyperparams};
use stormloss::labeling::{assign_loss_levels, filter_massive_losses, split, LabeledDataset, LossLevel};
use stormloss::metrics::{evaluate, ConfusionMatrix};
use stormloss::stats::equal_frequency_quartiles;
use stormloss::synth::{generate, loss_table_events, with_placeholder_features, SynthConfig};
use stormloss::tuning::{reference_tuned_params, TuningResult};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn within(elapsed: Duration, limit: Duration) -> Outcome {
    if elapsed <= limit {
        Ok(format!("{:.2}s", elapsed.as_secs_f64()))
    } else {
        Err(format!("took {:.2}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

/// Published quartile and level ranges and means of the loss tables.
const QUARTILES: [(f64, f64, f64); 4] = [
    (42.0, 987.0, 492.22),
    (1_014.0, 5_860.0, 2_700.58),
    (6_008.0, 44_864.0, 17_626.69),
    (45_076.0, 19_298_377.0, 851_468.14),
];
const LEVELS: [(f64, f64, f64, usize); 3] = [
    (45_076.0, 110_451.0, 71_233.98, 68),
    (112_089.0, 575_431.0, 256_001.41, 68),
    (630_242.0, 19_298_377.0, 2_227_168.98, 68),
];

fn quartile_fixture() -> Outcome {
    let t = Instant::now();
    let path = fixtures().join("loss_table/events.csv");
    let ingested = ingest_events(&path, &EventColumns::default(), &StudyWindow::default())
        .map_err(|e| e.to_string())?;
    ensure!(ingested.records == loss_table_events(), "bundled fixture differs from generator");
    let joined = with_placeholder_features(ingested.records);

    let losses: Vec<f64> = joined.iter().map(|e| e.loss_eur()).collect();
    let (q, _) = equal_frequency_quartiles(&losses).map_err(|e| e.to_string())?;
    for (k, (b, (min, max, mean))) in q.quartiles.iter().zip(QUARTILES).enumerate() {
        ensure!(b.min == min && b.max == max, "Q{} range {}-{}", k + 1, b.min, b.max);
        ensure!((b.mean - mean).abs() <= 0.01, "Q{} mean {}", k + 1, b.mean);
        ensure!(b.count == 204, "Q{} count {}", k + 1, b.count);
    }

    let q4 = filter_massive_losses(&joined).map_err(|e| e.to_string())?;
    let q4_min = q4.iter().map(|e| e.loss_eur()).fold(f64::INFINITY, f64::min);
    ensure!(q4_min == 45_076.0, "Q4 min {q4_min}");
    let ds = assign_loss_levels(&q4).map_err(|e| e.to_string())?;
    ensure!(ds.class_counts() == [68, 68, 68], "counts {:?}", ds.class_counts());
    for (s, (min, max, mean, count)) in ds.boundaries.levels.iter().zip(LEVELS) {
        ensure!(s.min == min && s.max == max, "{} range {}-{}", s.level, s.min, s.max);
        ensure!((s.mean - mean).abs() <= 0.01, "{} mean {}", s.level, s.mean);
        ensure!(s.count == count, "{} count {}", s.level, s.count);
    }
    ensure!(ds.labels.iter().zip(&ds.losses).all(|(l, &v)| v != 45_076.0 || *l == LossLevel::Level1),
        "45,076 not in Level 1");
    within(t.elapsed(), Duration::from_secs(1)).map(|s| format!("Q4 min 45076, levels 68/68/68 ({s})"))
}

fn labeled(n_per_level: usize) -> LabeledDataset {
    let losses: Vec<f64> = (0..3 * n_per_level).map(|i| 50_000.0 + 1_000.0 * i as f64).collect();
    let events: Vec<_> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut e = loss_table_events()[0].clone();
            e.event_id = format!("S{i}");
            e.loss_eur = l;
            e
        })
        .collect();
    assign_loss_levels(&with_placeholder_features(events)).expect("labels")
}

fn split_fixture() -> Outcome {
    let ds = labeled(68);
    ensure!(ds.len() == 204, "dataset size {}", ds.len());
    for seed in [0, 1, 42, 2024] {
        let sp = split(&ds, 0.25, seed, true).map_err(|e| e.to_string())?;
        ensure!(sp.test.len() == 51 && sp.train.len() == 153, "sizes {}/{}", sp.test.len(), sp.train.len());
        ensure!(sp.test.class_counts() == [17, 17, 17], "test counts {:?}", sp.test.class_counts());
        ensure!(sp.train.class_counts() == [51, 51, 51], "train counts {:?}", sp.train.class_counts());
    }
    Ok("51 test / 153 train, test levels (17, 17, 17)".into())
}

/// Per-class (precision, recall, f1) from TP/FP/FN, with f1 taken as
/// 2TP / (2TP + FP + FN) rather than the harmonic mean of P and R.
fn metric_oracle(m: &[Vec<usize>]) -> (Vec<(f64, f64, f64)>, f64) {
    let k = m.len();
    let total: usize = m.iter().flatten().sum();
    let trace: usize = (0..k).map(|i| m[i][i]).sum();
    let per = (0..k)
        .map(|c| {
            let tp = m[c][c];
            let fp: usize = (0..k).filter(|&r| r != c).map(|r| m[r][c]).sum();
            let fn_: usize = (0..k).filter(|&p| p != c).map(|p| m[c][p]).sum();
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            (ratio(tp, tp + fp), ratio(tp, tp + fn_), ratio(2 * tp, 2 * tp + fp + fn_))
        })
        .collect();
    (per, trace as f64 / total as f64)
}

fn metric_suite() -> Outcome {
    let matrices: Vec<Vec<Vec<usize>>> = vec![
        vec![vec![5, 5], vec![0, 10]],
        vec![vec![14, 3, 0], vec![4, 12, 1], vec![0, 1, 16]],
        vec![vec![10, 0], vec![0, 10]],
        vec![vec![0, 4], vec![0, 6]],
        vec![vec![3, 1, 1], vec![2, 5, 0], vec![1, 1, 6]],
        vec![vec![1, 0, 0], vec![0, 0, 0], vec![0, 0, 1]],
        vec![vec![7, 2, 1, 0], vec![1, 8, 0, 1], vec![0, 3, 6, 1], vec![2, 0, 0, 8]],
        vec![vec![0, 3], vec![3, 0]],
        vec![vec![50, 0, 0], vec![25, 0, 0], vec![25, 0, 0]],
        vec![vec![9, 1, 0], vec![2, 7, 1], vec![0, 3, 27]],
        vec![vec![1]],
        vec![vec![33, 1], vec![1, 1]],
    ];
    let mut checked = 0;
    for m in &matrices {
        let names: Vec<String> = (0..m.len()).map(|i| format!("c{i}")).collect();
        let cm = ConfusionMatrix::from_counts(names, m.clone()).map_err(|e| e.to_string())?;
        let r = evaluate(&cm).map_err(|e| e.to_string())?;
        let (per, acc) = metric_oracle(m);
        ensure!((r.accuracy - acc).abs() <= 1e-12, "accuracy {} vs {acc} for {m:?}", r.accuracy);
        let k = m.len() as f64;
        let mut macro_f1 = 0.0;
        let mut weighted_f1 = 0.0;
        let total: usize = m.iter().flatten().sum();
        for (c, (p, rc, f)) in per.iter().enumerate() {
            let got = &r.per_class[c];
            ensure!((got.precision - p).abs() <= 1e-12, "precision c{c} {m:?}");
            ensure!((got.recall - rc).abs() <= 1e-12, "recall c{c} {m:?}");
            ensure!((got.f1 - f).abs() <= 1e-12, "f1 c{c} {} vs {f} {m:?}", got.f1);
            macro_f1 += f / k;
            weighted_f1 += f * m[c].iter().sum::<usize>() as f64 / total as f64;
        }
        ensure!((r.macro_avg.f1 - macro_f1).abs() <= 1e-12, "macro f1 {m:?}");
        ensure!((r.weighted_avg.f1 - weighted_f1).abs() <= 1e-12, "weighted f1 {m:?}");
        checked += 1;
    }
    // Hand values for the two named matrices.
    let r = evaluate(&ConfusionMatrix::from_counts(vec!["a".into(), "b".into()], matrices[0].clone()).unwrap()).unwrap();
    ensure!(r.per_class[0].precision == 1.0 && r.per_class[0].recall == 0.5, "[[5,5],[0,10]] class a");
    ensure!((r.per_class[0].f1 - 2.0 / 3.0).abs() <= 1e-12, "[[5,5],[0,10]] f1 a");
    ensure!((r.per_class[1].precision - 2.0 / 3.0).abs() <= 1e-12 && r.per_class[1].recall == 1.0, "[[5,5],[0,10]] class b");
    ensure!((r.per_class[1].f1 - 0.8).abs() <= 1e-12 && r.accuracy == 0.75, "[[5,5],[0,10]] f1 b / accuracy");
    let names: Vec<String> = LossLevel::class_names();
    let r = evaluate(&ConfusionMatrix::from_counts(names, matrices[1].clone()).unwrap()).unwrap();
    ensure!((r.accuracy - 0.8235).abs() <= 0.0005, "42/51 accuracy {}", r.accuracy);
    Ok(format!("{checked} matrices match, 42/51 accuracy {:.4}", r.accuracy))
}

fn random_dataset(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>, usize) {
    let n = rng.random_range(2..=20);
    let d = rng.random_range(1..=4);
    let k = rng.random_range(2..=3);
    // Small integer grids produce ties in values and in decreases.
    let x = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(0..6) as f64 * 0.5).collect())
        .collect();
    let y = (0..n).map(|_| rng.random_range(0..k)).collect();
    (x, y, k)
}

fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>()
}

fn cart_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = TreeHyperparams {
        max_features: MaxFeatures::All,
        ..Default::default()
    };
    let mut with_split = 0;
    for case in 0..100 {
        let (x, y, k) = random_dataset(&mut rng);
        let n = x.len();
        let d = x[0].len();
        let samples: Vec<usize> = (0..n).collect();
        let features: Vec<usize> = (0..d).collect();
        let got = best_split(&x, &y, k, &samples, &features, &params);

        // Every (feature, gap between consecutive distinct values).
        let mut counts = vec![0; k];
        y.iter().for_each(|&c| counts[c] += 1);
        let parent = gini(&counts);
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for f in 0..d {
            let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let (mut l, mut r) = (vec![0; k], vec![0; k]);
                for (row, &c) in x.iter().zip(&y) {
                    if row[f] <= w[0] { l[c] += 1 } else { r[c] += 1 }
                }
                let nl: usize = l.iter().sum();
                let nr: usize = r.iter().sum();
                let dec = parent - (nl as f64 * gini(&l) + nr as f64 * gini(&r)) / n as f64;
                if dec <= 1e-12 {
                    continue;
                }
                if best.is_none_or(|b| dec > b.0 + 1e-12) {
                    best = Some((dec, f, w[0], w[1]));
                }
            }
        }
        match (got, best) {
            (None, None) => {}
            (Some(g), Some((dec, f, lo, hi))) => {
                with_split += 1;
                ensure!(
                    g.feature == f && lo <= g.threshold && g.threshold < hi,
                    "case {case}: got feature {} threshold {}, oracle feature {f} gap {lo}-{hi}",
                    g.feature,
                    g.threshold
                );
                ensure!((g.impurity_decrease - dec).abs() <= 1e-12, "case {case}: decrease");
            }
            (g, b) => return Err(format!("case {case}: got {g:?}, oracle {b:?}")),
        }
    }
    within(t.elapsed(), Duration::from_secs(10))
        .map(|s| format!("100 datasets agree ({with_split} with a split) ({s})"))
}

fn impurity_checks() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    for c in [Criterion::Gini, Criterion::Entropy] {
        ensure!(impurity(&[5, 0, 0], c).unwrap() == 0.0, "{c} pure");
    }
    ensure!(close(impurity(&[1, 1], Criterion::Gini).unwrap(), 0.5), "gini (1,1)");
    ensure!(close(impurity(&[2, 1], Criterion::Gini).unwrap(), 4.0 / 9.0), "gini (2,1)");
    ensure!(close(impurity(&[1, 1], Criterion::Entropy).unwrap(), 1.0), "entropy (1,1)");
    let h21 = -(2.0f64 / 3.0) * (2.0f64 / 3.0).log2() - (1.0f64 / 3.0) * (1.0f64 / 3.0).log2();
    ensure!(close(impurity(&[2, 1], Criterion::Entropy).unwrap(), h21), "entropy (2,1)");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut splits = 0;
    for i in 0..1000 {
        let n = rng.random_range(4..40);
        let d = rng.random_range(1..6);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(0..8) as f64).collect()).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let params = TreeHyperparams {
            criterion: if i % 2 == 0 { Criterion::Gini } else { Criterion::Entropy },
            max_features: if i % 3 == 0 { MaxFeatures::Sqrt } else { MaxFeatures::All },
            ..Default::default()
        };
        let tree = fit_tree(&x, &y, 3, &params, &mut rng).map_err(|e| e.to_string())?;
        for (_, dec) in tree.split_decreases() {
            ensure!(dec > 0.0, "tree {i}: split with decrease {dec}");
            splits += 1;
        }
    }
    Ok(format!("formulas exact, {splits} splits in 1000 trees all positive"))
}

fn synthetic_labeled(seed: u64) -> Result<LabeledDataset, String> {
    let t = generate(&SynthConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
    let (joined, _) = clean_and_join(&t.events, &t.meteo, &t.resilience);
    let q4 = filter_massive_losses(&joined).map_err(|e| e.to_string())?;
    assign_loss_levels(&q4).map_err(|e| e.to_string())
}

fn bundled_labeled() -> Result<LabeledDataset, String> {
    let dir = fixtures().join("synthetic");
    let ev = ingest_events(&dir.join("events.csv"), &EventColumns::default(), &StudyWindow::default())
        .map_err(|e| e.to_string())?;
    let me = ingest_meteo(&dir.join("meteo.csv"), &MeteoColumns::default()).map_err(|e| e.to_string())?;
    let re = ingest_resilience(&dir.join("resilience.csv"), &ResilienceColumns::default())
        .map_err(|e| e.to_string())?;
    let (joined, _) = clean_and_join(&ev.records, &me.records, &re.records);
    let q4 = filter_massive_losses(&joined).map_err(|e| e.to_string())?;
    assign_loss_levels(&q4).map_err(|e| e.to_string())
}

fn forest_determinism() -> Outcome {
    let t = Instant::now();
    let ds = bundled_labeled()?;
    let params = ForestHyperparams {
        n_estimators: 50,
        seed: 42,
        ..Default::default()
    };
    let y = ds.label_indices();
    let one = fit_forest_with_threads(&ds.features.rows, &y, 3, &params, 1).map_err(|e| e.to_string())?;
    let eight = fit_forest_with_threads(&ds.features.rows, &y, 3, &params, 8).map_err(|e| e.to_string())?;
    let (a, b) = (one.to_json().unwrap(), eight.to_json().unwrap());
    ensure!(a == b, "serialized forests differ");
    within(t.elapsed(), Duration::from_secs(30)).map(|s| format!("{} identical bytes ({s})", a.len()))
}

fn pipeline_config(out: &Path) -> RunConfig {
    let data = fixtures().join("synthetic");
    let mut cfg = RunConfig {
        seed: 42,
        output_dir: out.to_path_buf(),
        ..Default::default()
    };
    cfg.inputs.events = data.join("events.csv");
    cfg.inputs.meteo = data.join("meteo.csv");
    cfg.inputs.resilience = data.join("resilience.csv");
    cfg
}

fn read_tuning(path: &Path) -> Result<TuningResult, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let a: cli::Artifact<TuningResult> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(a.body)
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = pipeline_config(dir.path());
    cfg.model.source = cli::ModelSource::Search;
    let grid = &cfg.tuning.grid;
    let tuned = reference_tuned_params();
    ensure!(grid.size() >= 24, "grid has {} combinations", grid.size());
    ensure!(
        grid.combinations().iter().any(|c| c.n_estimators == tuned.n_estimators && c.tree == tuned.tree),
        "grid lacks the tuned preset"
    );
    ensure!(cfg.tuning.folds == 5, "folds {}", cfg.tuning.folds);
    cli::run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let r = read_tuning(&cfg.out(cli::TUNING_JSON))?;
    let best = r.test_report.macro_avg.f1;
    let default = r.default_reference.test_report.macro_avg.f1;
    ensure!(best >= 0.70, "tuned test macro F1 {best:.4} < 0.70");
    ensure!(best >= default - 0.02, "tuned {best:.4} < default {default:.4} - 0.02");
    within(t.elapsed(), Duration::from_secs(300)).map(|s| {
        format!(
            "{} combos x 5 folds, tuned macro F1 {best:.4}, default {default:.4} ({s})",
            r.grid_size
        )
    })
}

fn importance_sanity() -> Outcome {
    let mut ranks = Vec::new();
    for seed in 42..47 {
        let ds = synthetic_labeled(seed)?;
        let sp = split(&ds, 0.25, seed, true).map_err(|e| e.to_string())?;
        let params = ForestHyperparams {
            seed,
            ..reference_tuned_params()
        };
        let forest = fit_forest(&sp.train.features.rows, &sp.train.label_indices(), 3, &params)
            .map_err(|e| e.to_string())?
            .with_columns(ds.features.columns.clone());
        let rep = default_feature_importance(&forest);
        let total: f64 = rep.features.iter().map(|f| f.importance).sum();
        ensure!((total - 1.0).abs() <= 1e-9, "seed {seed}: importances sum to {total}");
        let a = rep.rank_of("affected_systems").unwrap_or(usize::MAX);
        let w = rep.rank_of("max_wind_kmh").unwrap_or(usize::MAX);
        ensure!(a < 5 && w < 5, "seed {seed}: affected_systems rank {}, max_wind rank {}", a + 1, w + 1);
        ranks.push(format!("{}/{}", a + 1, w + 1));
    }
    Ok(format!("ranks (affected_systems/max_wind) {}", ranks.join(", ")))
}

fn digests(cfg: &RunConfig) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(&cfg.output_dir).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, cli::artifact_digest(&p).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn pipeline_determinism() -> Outcome {
    let a_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = |out: &Path, threads: usize| {
        let mut cfg = pipeline_config(out);
        cfg.threads = threads;
        cfg.model.source = cli::ModelSource::Search;
        cfg.tuning.grid.n_estimators = vec![25];
        cfg.tuning.grid.max_depth = vec![Some(8)];
        cfg.tuning.folds = 3;
        cfg
    };
    let a = small(a_dir.path(), 1);
    let b = small(b_dir.path(), 4);
    let sa_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sb_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth_a = small(sa_dir.path(), 1);
    let synth_b = small(sb_dir.path(), 4);
    let mut stages = 0;
    for stage in Stage::PIPELINE {
        run_stage(stage, &a).map_err(|e| e.to_string())?;
        let first = digests(&a)?;
        run_stage(stage, &a).map_err(|e| e.to_string())?;
        ensure!(digests(&a)? == first, "{} rerun changed an artifact", stage.name());
        run_stage(stage, &b).map_err(|e| e.to_string())?;
        ensure!(digests(&b)? == first, "{} differs across output dirs/threads", stage.name());
        stages += 1;
    }
    run_stage(Stage::Synth, &synth_a).map_err(|e| e.to_string())?;
    run_stage(Stage::Synth, &synth_b).map_err(|e| e.to_string())?;
    ensure!(digests(&synth_a)? == digests(&synth_b)?, "synth differs");
    let n = digests(&a)?.len();
    Ok(format!("{} stages rerun, {n} artifacts with identical hashes", stages + 1))
}

fn main() -> ExitCode {
    let criteria: [Check; 9] = [
        ("quartile/tertile fixture", quartile_fixture),
        ("stratified split fixture", split_fixture),
        ("metric oracle suite", metric_suite),
        ("CART exhaustive oracle", cart_oracle),
        ("impurity formulas and positive decreases", impurity_checks),
        ("forest thread determinism", forest_determinism),
        ("end-to-end synthetic benchmark", end_to_end),
        ("importance sanity", importance_sanity),
        ("pipeline determinism", pipeline_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
