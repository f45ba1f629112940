//! Random forest of CART trees.
//!
//! Tree `i` draws its bootstrap resample and its per-node feature subsets
//! from a ChaCha stream selected by `(seed, i)`, so a fitted forest depends
//! only on the data and the hyperparameters, never on how many threads
//! trained it. Prediction averages the per-tree class probabilities.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{fit_tree_on, Criterion, DecisionTree, MaxFeatures, TreeHyperparams};
use crate::data_model::{feature_category, FeatureCategory};
use crate::error::{Error, Result};

pub const FOREST_FORMAT: &str = "stormloss.forest";
pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestHyperparams {
    pub n_estimators: usize,
    pub tree: TreeHyperparams,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestHyperparams {
    fn default() -> Self {
        ForestHyperparams {
            n_estimators: 100,
            tree: TreeHyperparams {
                max_depth: None,
                min_samples_split: 2,
                min_samples_leaf: 1,
                max_features: MaxFeatures::Sqrt,
                criterion: Criterion::Gini,
            },
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 {
            return Err(Error::InvalidParameter("n_estimators must be >= 1".into()));
        }
        self.tree.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub hyperparams: ForestHyperparams,
    pub n_classes: usize,
    pub classes: Vec<String>,
    pub columns: Vec<String>,
    pub trees: Vec<DecisionTree>,
}

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    format: &'a str,
    version: u32,
    #[serde(flatten)]
    forest: &'a Forest,
}

#[derive(Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    #[serde(flatten)]
    forest: Forest,
}

/// The rng stream of tree `index` for a forest seeded with `seed`.
pub fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn fit_one(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &ForestHyperparams,
    index: usize,
) -> Result<DecisionTree> {
    let mut rng = tree_rng(params.seed, index);
    let n = x.len();
    let samples = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    fit_tree_on(x, y, n_classes, samples, &params.tree, &mut rng)
}

/// Fits `n_estimators` trees on the current rayon pool.
pub fn fit_forest(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &ForestHyperparams,
) -> Result<Forest> {
    params.validate()?;
    if x.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let trees = (0..params.n_estimators)
        .into_par_iter()
        .map(|i| fit_one(x, y, n_classes, params, i))
        .collect::<Result<Vec<_>>>()?;
    let width = x[0].len();
    Ok(Forest {
        hyperparams: *params,
        n_classes,
        classes: (0..n_classes).map(|k| k.to_string()).collect(),
        columns: (0..width).map(|j| format!("x{j}")).collect(),
        trees,
    })
}

/// [`fit_forest`] on a dedicated pool of `threads` workers (0 = rayon's
/// default).
pub fn fit_forest_with_threads(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &ForestHyperparams,
    threads: usize,
) -> Result<Forest> {
    with_threads(threads, || fit_forest(x, y, n_classes, params))
}

/// Runs `f` inside a rayon pool of `threads` workers (0 = default size).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(f)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

impl Forest {
    pub fn with_classes(mut self, classes: Vec<String>) -> Self {
        self.classes = classes;
        self
    }

    pub fn with_columns(mut self, columns: Vec<String>) -> Self {
        self.columns = columns;
        self
    }

    pub fn n_features(&self) -> usize {
        self.trees.first().map_or(0, |t| t.n_features)
    }

    fn proba_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.n_classes];
        for tree in &self.trees {
            for (a, p) in acc.iter_mut().zip(tree.predict_proba(row)?) {
                *a += p;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// Mean of the per-tree probability vectors for each row.
    pub fn predict_proba(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.par_iter().map(|r| self.proba_row(r)).collect()
    }

    /// Class index with the highest mean probability; ties go to the lower
    /// class index.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(rows)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(&EnvelopeRef {
            format: FOREST_FORMAT,
            version: FOREST_FORMAT_VERSION,
            forest: self,
        })
        .map_err(|e| Error::json("forest", e))
    }

    pub fn from_json(s: &str) -> Result<Forest> {
        let env: Envelope = serde_json::from_str(s).map_err(|e| Error::json("forest", e))?;
        if env.format != FOREST_FORMAT || env.version != FOREST_FORMAT_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported model format {} v{}",
                env.format, env.version
            )));
        }
        Ok(env.forest)
    }
}

pub fn predict_proba(forest: &Forest, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    forest.predict_proba(rows)
}

pub fn predict(forest: &Forest, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
    forest.predict(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub name: String,
    pub category: FeatureCategory,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryImportance {
    pub category: FeatureCategory,
    pub importance: f64,
}

/// Mean-decrease-in-impurity importances, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportanceReport {
    pub features: Vec<FeatureImportance>,
    pub categories: Vec<CategoryImportance>,
}

impl FeatureImportanceReport {
    pub fn rank_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn total(&self) -> f64 {
        self.features.iter().map(|f| f.importance).sum()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let ctx = "importance csv";
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rank", "feature", "category", "importance"])
            .map_err(|e| Error::csv(ctx, e))?;
        for (i, f) in self.features.iter().enumerate() {
            let category = serde_json::to_value(f.category)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            w.write_record([
                (i + 1).to_string(),
                f.name.clone(),
                category,
                f.importance.to_string(),
            ])
            .map_err(|e| Error::csv(ctx, e))?;
        }
        w.flush().map_err(|e| Error::io(ctx, e))
    }
}

/// Importance per feature: each tree's impurity importances are normalized
/// to sum 1, averaged over the trees that have at least one split, and the
/// average is normalized again. A forest without any split yields zeros.
pub fn feature_importance(
    forest: &Forest,
    columns: &[String],
    category_of: &dyn Fn(&str) -> FeatureCategory,
) -> FeatureImportanceReport {
    let width = forest.n_features();
    let mut sum = vec![0.0; width];
    for tree in &forest.trees {
        let imp = tree.impurity_importances();
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            for (s, v) in sum.iter_mut().zip(&imp) {
                *s += v / total;
            }
        }
    }
    let total: f64 = sum.iter().sum();
    if total > 0.0 {
        sum.iter_mut().for_each(|v| *v /= total);
    }

    let mut features: Vec<FeatureImportance> = sum
        .iter()
        .enumerate()
        .map(|(j, &importance)| {
            let name = columns.get(j).cloned().unwrap_or_else(|| format!("x{j}"));
            FeatureImportance {
                category: category_of(&name),
                name,
                importance,
            }
        })
        .collect();
    features.sort_by(|a, b| b.importance.total_cmp(&a.importance));

    let categories = FeatureCategory::ALL
        .iter()
        .map(|&category| CategoryImportance {
            category,
            importance: features
                .iter()
                .filter(|f| f.category == category)
                // fold from +0.0: an empty f64 sum is -0.0
                .fold(0.0, |acc, f| acc + f.importance),
        })
        .collect();
    FeatureImportanceReport {
        features,
        categories,
    }
}

/// [`feature_importance`] with the forest's own column names and the
/// standard feature categories.
pub fn default_feature_importance(forest: &Forest) -> FeatureImportanceReport {
    feature_importance(forest, &forest.columns, &feature_category)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cart::{fit_tree, Node};

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Vec<f64>> = (0..90)
            .map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let y = x
            .iter()
            .map(|r| if r[0] < 0.33 { 0 } else if r[0] < 0.66 { 1 } else { 2 })
            .collect();
        (x, y)
    }

    #[test]
    fn single_tree_without_bootstrap_matches_tree() {
        let (x, y) = toy();
        let params = ForestHyperparams {
            n_estimators: 1,
            bootstrap: false,
            seed: 5,
            ..Default::default()
        };
        let forest = fit_forest(&x, &y, 3, &params).unwrap();
        let tree = fit_tree(&x, &y, 3, &params.tree, &mut tree_rng(5, 0)).unwrap();
        assert_eq!(forest.trees[0], tree);
        let proba = forest.predict_proba(&x).unwrap();
        for (r, p) in x.iter().zip(&proba) {
            assert_eq!(*p, tree.predict_proba(r).unwrap());
        }
    }

    fn leaf_tree(counts: Vec<usize>) -> DecisionTree {
        DecisionTree {
            n_classes: 3,
            n_features: 1,
            nodes: vec![Node::Leaf {
                counts,
                impurity: 0.0,
            }],
        }
    }

    #[test]
    fn averaging_and_tie_rule() {
        let forest = Forest {
            hyperparams: ForestHyperparams::default(),
            n_classes: 3,
            classes: vec!["a".into(), "b".into(), "c".into()],
            columns: vec!["x".into()],
            trees: vec![leaf_tree(vec![4, 0, 0]), leaf_tree(vec![0, 2, 0])],
        };
        assert_eq!(forest.predict_proba(&[vec![0.0]]).unwrap()[0], [0.5, 0.5, 0.0]);
        assert_eq!(forest.predict(&[vec![0.0]]).unwrap(), [0]);
        assert!(matches!(
            forest.predict(&[vec![0.0, 1.0]]),
            Err(Error::WidthMismatch { .. })
        ));
        assert_eq!(argmax(&[0.2, 0.3, 0.5]), 2);
    }

    #[test]
    fn three_tree_forest_matches_hand_average() {
        let (x, y) = toy();
        let params = ForestHyperparams {
            n_estimators: 3,
            seed: 8,
            ..Default::default()
        };
        let forest = fit_forest(&x[..30], &y[..30], 3, &params).unwrap();
        for row in &x[30..] {
            let per_tree: Vec<Vec<f64>> = forest
                .trees
                .iter()
                .map(|t| t.predict_proba(row).unwrap())
                .collect();
            let got = &forest.predict_proba(std::slice::from_ref(row)).unwrap()[0];
            for k in 0..3 {
                let hand = (per_tree[0][k] + per_tree[1][k] + per_tree[2][k]) / 3.0;
                assert!((got[k] - hand).abs() < 1e-15);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn thread_count_does_not_change_forest() {
        let (x, y) = toy();
        let params = ForestHyperparams {
            n_estimators: 20,
            seed: 1,
            ..Default::default()
        };
        let a = fit_forest_with_threads(&x, &y, 3, &params, 1).unwrap();
        let b = fit_forest_with_threads(&x, &y, 3, &params, 4).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn bootstrap_distinct_fraction() {
        // Oracle: expected distinct rows in a size-n resample is
        // n (1 - (1 - 1/n)^n) ≈ 126.6 for n = 200.
        let n = 200usize;
        let expected = n as f64 * (1.0 - (1.0 - 1.0 / n as f64).powi(n as i32));
        assert!((expected - 126.6).abs() < 0.1);
        let mut total = 0.0;
        for i in 0..50 {
            let mut rng = tree_rng(99, i);
            let mut seen = vec![false; n];
            for _ in 0..n {
                seen[rng.random_range(0..n)] = true;
            }
            total += seen.iter().filter(|s| **s).count() as f64;
        }
        assert!((total / 50.0 - expected).abs() <= 10.0);
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let (x, y) = toy();
        let params = ForestHyperparams {
            n_estimators: 4,
            ..Default::default()
        };
        let forest = fit_forest(&x, &y, 3, &params).unwrap();
        let json = forest.to_json().unwrap();
        assert!(json.starts_with("{\"format\":\"stormloss.forest\",\"version\":1"));
        assert_eq!(Forest::from_json(&json).unwrap(), forest);
        let bad = json.replace("\"version\":1", "\"version\":9");
        assert!(Forest::from_json(&bad).is_err());
    }

    #[test]
    fn only_split_feature_gets_importance() {
        let (x, y) = toy();
        let params = ForestHyperparams {
            n_estimators: 10,
            tree: TreeHyperparams {
                max_features: MaxFeatures::All,
                ..Default::default()
            },
            ..Default::default()
        };
        // Columns other than 0 are constant, so only feature 0 can split.
        let xs: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0], 1.0, 2.0]).collect();
        let forest = fit_forest(&xs, &y, 3, &params).unwrap();
        let cols: Vec<String> = ["max_wind_kmh", "coast_km", "pop_foreign"].map(String::from).to_vec();
        let rep = feature_importance(&forest, &cols, &feature_category);
        assert_eq!(rep.features[0].name, "max_wind_kmh");
        assert!((rep.features[0].importance - 1.0).abs() < 1e-12);
        assert_eq!(rep.features[1].importance, 0.0);
        for c in &rep.categories {
            let members: f64 = rep
                .features
                .iter()
                .filter(|f| f.category == c.category)
                .map(|f| f.importance)
                .sum();
            assert!((c.importance - members).abs() < 1e-9);
        }
    }

    #[test]
    fn stump_forest_has_zero_importance() {
        let x = vec![vec![1.0, 2.0]; 6];
        let y = vec![0, 1, 0, 1, 0, 1];
        let forest = fit_forest(&x, &y, 2, &ForestHyperparams {
            n_estimators: 3,
            ..Default::default()
        })
        .unwrap();
        let rep = default_feature_importance(&forest);
        assert_eq!(rep.total(), 0.0);
    }

    #[test]
    fn zero_estimators_rejected() {
        let (x, y) = toy();
        let params = ForestHyperparams {
            n_estimators: 0,
            ..Default::default()
        };
        assert!(fit_forest(&x, &y, 3, &params).is_err());
        assert!(fit_forest(&[], &[], 3, &ForestHyperparams::default()).is_err());
    }
}
