//! Exhaustive grid search over forest hyperparameters with stratified k-fold
//! cross-validation on the training partition.
//!
//! The test partition is handed over as a [`SealedTest`] and only opened
//! after the winning combination has been chosen.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cart::{Criterion, MaxFeatures, TreeHyperparams};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestHyperparams};
use crate::labeling::{LabeledDataset, LossLevel};
use crate::metrics::{evaluate_labels, EvaluationReport, Metric};

/// Library defaults of the reference random-forest classifier: 100 trees,
/// `min_samples_split` 2, `min_samples_leaf` 1, sqrt features, unlimited
/// depth, Gini.
pub fn default_params() -> ForestHyperparams {
    ForestHyperparams::default()
}

/// The tuned preset: 1135 trees, `min_samples_split` 5, `min_samples_leaf`
/// 4, `"auto"` features (sqrt), depth 100, Gini.
pub fn reference_tuned_params() -> ForestHyperparams {
    ForestHyperparams {
        n_estimators: 1135,
        tree: TreeHyperparams {
            max_depth: Some(100),
            min_samples_split: 5,
            min_samples_leaf: 4,
            max_features: MaxFeatures::Sqrt,
            criterion: Criterion::Gini,
        },
        bootstrap: true,
        seed: 0,
    }
}

mod depth_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Depth {
        Limit(usize),
        Name(String),
    }

    pub fn serialize<S: Serializer>(v: &[Option<usize>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|d| match d {
                Some(n) => Depth::Limit(*n),
                None => Depth::Name("none".into()),
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<usize>>, D::Error> {
        Vec::<Depth>::deserialize(d)?
            .into_iter()
            .map(|x| match x {
                Depth::Limit(n) => Ok(Some(n)),
                Depth::Name(s) if s.eq_ignore_ascii_case("none") => Ok(None),
                Depth::Name(s) => Err(serde::de::Error::custom(format!("bad max_depth `{s}`"))),
            })
            .collect()
    }
}

/// Candidate values per hyperparameter. Combinations are enumerated with
/// `n_estimators` varying slowest and `criterion` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub n_estimators: Vec<usize>,
    pub min_samples_split: Vec<usize>,
    pub min_samples_leaf: Vec<usize>,
    pub max_features: Vec<MaxFeatures>,
    /// `"none"` in config files means unlimited depth.
    #[serde(with = "depth_list")]
    pub max_depth: Vec<Option<usize>>,
    pub criterion: Vec<Criterion>,
}

impl ParamGrid {
    /// A grid holding exactly one combination.
    pub fn single(p: &ForestHyperparams) -> ParamGrid {
        ParamGrid {
            n_estimators: vec![p.n_estimators],
            min_samples_split: vec![p.tree.min_samples_split],
            min_samples_leaf: vec![p.tree.min_samples_leaf],
            max_features: vec![p.tree.max_features],
            max_depth: vec![p.tree.max_depth],
            criterion: vec![p.tree.criterion],
        }
    }

    pub fn size(&self) -> usize {
        self.n_estimators.len()
            * self.min_samples_split.len()
            * self.min_samples_leaf.len()
            * self.max_features.len()
            * self.max_depth.len()
            * self.criterion.len()
    }

    pub fn combinations(&self) -> Vec<ForestHyperparams> {
        let mut out = Vec::with_capacity(self.size());
        for &n_estimators in &self.n_estimators {
            for &min_samples_split in &self.min_samples_split {
                for &min_samples_leaf in &self.min_samples_leaf {
                    for &max_features in &self.max_features {
                        for &max_depth in &self.max_depth {
                            for &criterion in &self.criterion {
                                out.push(ForestHyperparams {
                                    n_estimators,
                                    tree: TreeHyperparams {
                                        max_depth,
                                        min_samples_split,
                                        min_samples_leaf,
                                        max_features,
                                        criterion,
                                    },
                                    bootstrap: true,
                                    seed: 0,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub folds: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            folds: 5,
            metric: Metric::MacroF1,
            seed: 42,
        }
    }
}

/// Held-out test partition that only the final evaluation may read.
#[derive(Debug)]
pub struct SealedTest(LabeledDataset);

impl SealedTest {
    pub fn new(test: LabeledDataset) -> Self {
        SealedTest(test)
    }

    fn open(self) -> LabeledDataset {
        self.0
    }
}

/// Seed of one combination, derived from the search seed and the
/// hyperparameter values (not the position in the grid), so a combination
/// scores the same in any grid that contains it.
pub fn combination_seed(seed: u64, params: &ForestHyperparams) -> u64 {
    let t = &params.tree;
    let key = format!(
        "{seed}|{}|{}|{}|{}|{:?}|{}|{}",
        params.n_estimators,
        t.min_samples_split,
        t.min_samples_leaf,
        t.max_features,
        t.max_depth,
        t.criterion,
        params.bootstrap
    );
    let digest = Sha256::digest(key.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Fold index (0..k) per sample; each class is shuffled and dealt round-robin
/// across the folds.
pub fn stratified_folds(labels: &[LossLevel], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidParameter("need at least 2 folds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    for level in LossLevel::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == level).collect();
        if members.len() < k {
            return Err(Error::ClassTooSmall {
                class: level.to_string(),
                count: members.len(),
                needed: k,
            });
        }
        members.shuffle(&mut rng);
        for (pos, i) in members.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub index: usize,
    pub params: ForestHyperparams,
    pub fold_scores: Vec<f64>,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceResult {
    pub params: ForestHyperparams,
    pub test_report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub metric: Metric,
    pub folds: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub entries: Vec<GridEntry>,
    pub best_index: usize,
    pub best_params: ForestHyperparams,
    /// Best combination refit on the whole training partition and scored on
    /// the test partition.
    pub test_report: EvaluationReport,
    /// Library-default parameters, fitted and scored the same way.
    pub default_reference: ReferenceResult,
}

impl TuningResult {
    pub fn best(&self) -> &GridEntry {
        &self.entries[self.best_index]
    }

    /// One row per combination per fold, then one `mean` row per combination.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let ctx = "tuning csv";
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "index",
            "n_estimators",
            "min_samples_split",
            "min_samples_leaf",
            "max_features",
            "max_depth",
            "criterion",
            "fold",
            self.metric.name(),
        ])
        .map_err(|e| Error::csv(ctx, e))?;
        let row = |e: &GridEntry, fold: String, score: f64| {
            let t = &e.params.tree;
            vec![
                e.index.to_string(),
                e.params.n_estimators.to_string(),
                t.min_samples_split.to_string(),
                t.min_samples_leaf.to_string(),
                t.max_features.to_string(),
                t.max_depth.map_or("none".to_string(), |d| d.to_string()),
                t.criterion.to_string(),
                fold,
                score.to_string(),
            ]
        };
        for e in &self.entries {
            for (f, s) in e.fold_scores.iter().enumerate() {
                w.write_record(row(e, f.to_string(), *s))
                    .map_err(|e| Error::csv(ctx, e))?;
            }
        }
        for e in &self.entries {
            w.write_record(row(e, "mean".into(), e.mean_score))
                .map_err(|e| Error::csv(ctx, e))?;
        }
        w.flush().map_err(|e| Error::io(ctx, e))
    }
}

fn rows_of(ds: &LabeledDataset, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    (
        idx.iter().map(|&i| ds.features.rows[i].clone()).collect(),
        idx.iter().map(|&i| ds.labels[i].index()).collect(),
    )
}

fn score_combination(
    train: &LabeledDataset,
    folds: &[usize],
    k: usize,
    params: &ForestHyperparams,
    metric: Metric,
) -> Result<Vec<f64>> {
    let classes = LossLevel::class_names();
    (0..k)
        .map(|f| {
            let fit_idx: Vec<usize> = (0..train.len()).filter(|&i| folds[i] != f).collect();
            let val_idx: Vec<usize> = (0..train.len()).filter(|&i| folds[i] == f).collect();
            let (x, y) = rows_of(train, &fit_idx);
            let (vx, vy) = rows_of(train, &val_idx);
            let forest = fit_forest(&x, &y, 3, params)?;
            let report = evaluate_labels(&vy, &forest.predict(&vx)?, &classes)?;
            Ok(report.score(metric))
        })
        .collect()
}

/// Ordering used to pick the winner: higher mean score, then fewer trees,
/// then shallower depth (unlimited counts as deepest), then grid position.
fn selection_key(e: &GridEntry) -> (f64, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>) {
    use std::cmp::Reverse;
    (
        e.mean_score,
        Reverse(e.params.n_estimators),
        Reverse(e.params.tree.max_depth.unwrap_or(usize::MAX)),
        Reverse(e.index),
    )
}

fn better(a: &GridEntry, b: &GridEntry) -> bool {
    let (ka, kb) = (selection_key(a), selection_key(b));
    ka.0 > kb.0 || (ka.0 == kb.0 && (ka.1, ka.2, ka.3) > (kb.1, kb.2, kb.3))
}

/// Fits `params` on the full training partition and scores it on `test`.
pub fn fit_and_evaluate(
    train: &LabeledDataset,
    test: &LabeledDataset,
    params: &ForestHyperparams,
) -> Result<EvaluationReport> {
    let forest = fit_forest(&train.features.rows, &train.label_indices(), 3, params)?;
    evaluate_labels(
        &test.label_indices(),
        &forest.predict(&test.features.rows)?,
        &LossLevel::class_names(),
    )
}

/// Cross-validates every combination of `grid` on `train`, refits the
/// winner on all of `train` and evaluates it (and the default parameters)
/// on the sealed test partition.
pub fn grid_search(
    train: &LabeledDataset,
    test: SealedTest,
    grid: &ParamGrid,
    config: &SearchConfig,
) -> Result<TuningResult> {
    let combos = grid.combinations();
    if combos.is_empty() {
        return Err(Error::InvalidParameter("empty parameter grid".into()));
    }
    for c in &combos {
        c.validate()?;
    }
    let folds = stratified_folds(&train.labels, config.folds, config.seed)?;

    let entries = combos
        .into_par_iter()
        .enumerate()
        .map(|(index, mut params)| {
            params.seed = combination_seed(config.seed, &params);
            let fold_scores = score_combination(train, &folds, config.folds, &params, config.metric)?;
            let mean_score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
            Ok(GridEntry {
                index,
                params,
                fold_scores,
                mean_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best_index = entries
        .iter()
        .fold(0, |b, e| if better(e, &entries[b]) { e.index } else { b });
    let best_params = entries[best_index].params;

    let mut reference = default_params();
    reference.seed = combination_seed(config.seed, &reference);

    let test = test.open();
    let test_report = fit_and_evaluate(train, &test, &best_params)?;
    let reference_report = fit_and_evaluate(train, &test, &reference)?;

    Ok(TuningResult {
        metric: config.metric,
        folds: config.folds,
        seed: config.seed,
        grid_size: entries.len(),
        entries,
        best_index,
        best_params,
        test_report,
        default_reference: ReferenceResult {
            params: reference,
            test_report: reference_report,
        },
    })
}
