//! CART classification trees.
//!
//! Trees are grown greedily: at every node the split with the largest
//! weighted impurity decrease is chosen among all midpoints between
//! consecutive distinct values of the candidate features. A sample goes left
//! when its value is `<= threshold`. Ties between equally good splits are
//! broken by the lowest feature index, then the lowest threshold, so growth
//! is fully determined by the data, the hyperparameters and the rng stream
//! used to draw candidate features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest impurity decrease accepted as an improvement. Guards against
/// splits whose gain is pure rounding noise.
pub const MIN_IMPURITY_DECREASE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gini,
    Entropy,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Gini => "gini",
            Criterion::Entropy => "entropy",
        })
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gini" => Ok(Criterion::Gini),
            "entropy" => Ok(Criterion::Entropy),
            other => Err(Error::InvalidParameter(format!("unknown criterion `{other}`"))),
        }
    }
}

/// Number of features considered at each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaxFeaturesRepr", into = "String")]
pub enum MaxFeatures {
    All,
    /// `floor(sqrt(n_features))`; `"auto"` parses to this.
    Sqrt,
    /// `floor(log2(n_features))`.
    Log2,
    /// `floor(f * n_features)` for `f` in `(0, 1]`.
    Fraction(f64),
}

impl MaxFeatures {
    /// Number of candidate features out of `n_features`, at least 1.
    pub fn count(&self, n_features: usize) -> usize {
        let n = n_features as f64;
        let k = match *self {
            MaxFeatures::All => n_features,
            MaxFeatures::Sqrt => n.sqrt().floor() as usize,
            MaxFeatures::Log2 => n.log2().floor() as usize,
            MaxFeatures::Fraction(f) => (f * n).floor() as usize,
        };
        k.clamp(1, n_features.max(1))
    }
}

impl fmt::Display for MaxFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaxFeatures::All => f.write_str("all"),
            MaxFeatures::Sqrt => f.write_str("sqrt"),
            MaxFeatures::Log2 => f.write_str("log2"),
            MaxFeatures::Fraction(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for MaxFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" | "none" => Ok(MaxFeatures::All),
            "sqrt" | "auto" => Ok(MaxFeatures::Sqrt),
            "log2" => Ok(MaxFeatures::Log2),
            other => match other.parse::<f64>() {
                Ok(v) if v > 0.0 && v <= 1.0 => Ok(MaxFeatures::Fraction(v)),
                _ => Err(Error::InvalidParameter(format!("bad max_features `{s}`"))),
            },
        }
    }
}

impl From<MaxFeatures> for String {
    fn from(m: MaxFeatures) -> String {
        m.to_string()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MaxFeaturesRepr {
    Name(String),
    Fraction(f64),
}

impl TryFrom<MaxFeaturesRepr> for MaxFeatures {
    type Error = Error;

    fn try_from(r: MaxFeaturesRepr) -> Result<Self> {
        match r {
            MaxFeaturesRepr::Name(s) => s.parse(),
            MaxFeaturesRepr::Fraction(v) => v.to_string().parse(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeHyperparams {
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub criterion: Criterion,
}

impl Default for TreeHyperparams {
    fn default() -> Self {
        TreeHyperparams {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
            criterion: Criterion::Gini,
        }
    }
}

impl TreeHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == Some(0) {
            return Err(Error::InvalidParameter("max_depth must be positive".into()));
        }
        if self.min_samples_split < 2 {
            return Err(Error::InvalidParameter("min_samples_split must be >= 2".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::InvalidParameter("min_samples_leaf must be >= 1".into()));
        }
        if let MaxFeatures::Fraction(f) = self.max_features {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidParameter("max_features fraction must be in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

fn impurity_of(counts: &[usize], total: usize, criterion: Criterion) -> f64 {
    let n = total as f64;
    match criterion {
        Criterion::Gini => {
            1.0 - counts
                .iter()
                .map(|&c| {
                    let p = c as f64 / n;
                    p * p
                })
                .sum::<f64>()
        }
        Criterion::Entropy => -counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.log2()
            })
            .sum::<f64>(),
    }
    .max(0.0)
}

/// Gini (`1 - sum p_k^2`) or entropy (`-sum p_k log2 p_k`) of a class-count
/// vector.
pub fn impurity(class_counts: &[usize], criterion: Criterion) -> Result<f64> {
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput("impurity of all-zero counts"));
    }
    Ok(impurity_of(class_counts, total, criterion))
}

/// Weighted impurity of two children, `(n_l * i_l + n_r * i_r) / n`.
fn children_impurity(left: &[usize], right: &[usize], criterion: Criterion) -> f64 {
    let nl: usize = left.iter().sum();
    let nr: usize = right.iter().sum();
    let n = (nl + nr) as f64;
    (nl as f64 * impurity_of(left, nl, criterion) + nr as f64 * impurity_of(right, nr, criterion)) / n
}

/// Threshold between two consecutive distinct sorted values.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo / 2.0 + hi / 2.0;
    if m >= hi || m < lo {
        lo
    } else {
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

impl SplitCandidate {
    fn beats(&self, other: &SplitCandidate) -> bool {
        self.impurity_decrease > other.impurity_decrease
            || (self.impurity_decrease == other.impurity_decrease
                && (self.feature, self.threshold) < (other.feature, other.threshold))
    }
}

fn class_counts(y: &[usize], samples: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &i in samples {
        counts[y[i]] += 1;
    }
    counts
}

/// Best split of the samples at a node, or `None` when no split of the
/// candidate features leaves `min_samples_leaf` samples on both sides and
/// lowers impurity.
pub fn best_split(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    samples: &[usize],
    features: &[usize],
    params: &TreeHyperparams,
) -> Option<SplitCandidate> {
    let n = samples.len();
    let leaf = params.min_samples_leaf.max(1);
    if n < params.min_samples_split || n < 2 * leaf {
        return None;
    }
    let parent_counts = class_counts(y, samples, n_classes);
    let parent = impurity_of(&parent_counts, n, params.criterion);
    if parent == 0.0 {
        return None;
    }

    let mut best: Option<SplitCandidate> = None;
    let mut column: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &f in features {
        column.clear();
        column.extend(samples.iter().map(|&i| (x[i][f], y[i])));
        column.sort_by(|a, b| a.0.total_cmp(&b.0));
        if column[0].0 == column[n - 1].0 {
            continue;
        }
        let mut left = vec![0; n_classes];
        let mut right = parent_counts.clone();
        for i in 0..n - 1 {
            let label = column[i].1;
            left[label] += 1;
            right[label] -= 1;
            let (lo, hi) = (column[i].0, column[i + 1].0);
            let n_left = i + 1;
            if lo == hi || n_left < leaf || n - n_left < leaf {
                continue;
            }
            let decrease = parent - children_impurity(&left, &right, params.criterion);
            if decrease <= MIN_IMPURITY_DECREASE {
                continue;
            }
            let cand = SplitCandidate {
                feature: f,
                threshold: midpoint(lo, hi),
                impurity_decrease: decrease,
            };
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                best = Some(cand);
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        samples: usize,
        impurity: f64,
    },
    Leaf {
        counts: Vec<usize>,
        impurity: f64,
    },
}

impl Node {
    pub fn samples(&self) -> usize {
        match self {
            Node::Split { samples, .. } => *samples,
            Node::Leaf { counts, .. } => counts.iter().sum(),
        }
    }

    pub fn impurity(&self) -> f64 {
        match self {
            Node::Split { impurity, .. } | Node::Leaf { impurity, .. } => *impurity,
        }
    }
}

/// A fitted classification tree. Node 0 is the root; labels are class
/// indices `0..n_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub n_classes: usize,
    pub n_features: usize,
    pub nodes: Vec<Node>,
}

struct Builder<'a, R: Rng + ?Sized> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    n_features: usize,
    params: &'a TreeHyperparams,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn leaf(&mut self, idx: usize, counts: Vec<usize>, impurity: f64) -> usize {
        self.nodes[idx] = Node::Leaf { counts, impurity };
        idx
    }

    fn grow(&mut self, samples: Vec<usize>, depth: usize) -> usize {
        let idx = self.nodes.len();
        let counts = class_counts(self.y, &samples, self.n_classes);
        let imp = impurity_of(&counts, samples.len(), self.params.criterion);
        self.nodes.push(Node::Leaf {
            counts: Vec::new(),
            impurity: imp,
        });

        let at_depth = self.params.max_depth.is_some_and(|d| depth >= d);
        if imp == 0.0 || at_depth || samples.len() < self.params.min_samples_split {
            return self.leaf(idx, counts, imp);
        }
        let k = self.params.max_features.count(self.n_features);
        let mut features = if k >= self.n_features {
            (0..self.n_features).collect()
        } else {
            rand::seq::index::sample(self.rng, self.n_features, k).into_vec()
        };
        features.sort_unstable();

        let Some(split) = best_split(self.x, self.y, self.n_classes, &samples, &features, self.params)
        else {
            return self.leaf(idx, counts, imp);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = samples
            .iter()
            .partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let n = samples.len();
        drop(samples);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[idx] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
            samples: n,
            impurity: imp,
        };
        idx
    }
}

fn check_training(x: &[Vec<f64>], y: &[usize], n_classes: usize) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let width = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != width) {
        return Err(Error::WidthMismatch {
            expected: width,
            got: r.len(),
        });
    }
    if let Some(&l) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::UnknownLabel(l.to_string()));
    }
    Ok(width)
}

/// Fits a tree on all rows of `x`.
pub fn fit_tree<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    params: &TreeHyperparams,
    rng: &mut R,
) -> Result<DecisionTree> {
    fit_tree_on(x, y, n_classes, (0..x.len()).collect(), params, rng)
}

/// Fits a tree on the rows listed in `samples`; repeated indices count as
/// repeated samples (bootstrap resamples).
pub fn fit_tree_on<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    samples: Vec<usize>,
    params: &TreeHyperparams,
    rng: &mut R,
) -> Result<DecisionTree> {
    params.validate()?;
    let n_features = check_training(x, y, n_classes)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let mut b = Builder {
        x,
        y,
        n_classes,
        n_features,
        params,
        rng,
        nodes: Vec::new(),
    };
    b.grow(samples, 0);
    Ok(DecisionTree {
        n_classes,
        n_features,
        nodes: b.nodes,
    })
}

impl DecisionTree {
    fn leaf_counts(&self, row: &[f64]) -> &[usize] {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => idx = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { counts, .. } => return counts,
            }
        }
    }

    /// Class probabilities of the leaf reached by `row`.
    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.n_features {
            return Err(Error::WidthMismatch {
                expected: self.n_features,
                got: row.len(),
            });
        }
        let counts = self.leaf_counts(row);
        let total: usize = counts.iter().sum();
        Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    /// Impurity decrease of every split node as `(feature, decrease)`, where
    /// decrease is `i - (n_l/n) i_l - (n_r/n) i_r` for the node's own samples.
    pub fn split_decreases(&self) -> Vec<(usize, f64)> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split {
                    feature,
                    left,
                    right,
                    samples,
                    impurity,
                    ..
                } => {
                    let (l, r) = (&self.nodes[*left], &self.nodes[*right]);
                    let s = *samples as f64;
                    let weighted =
                        (l.samples() as f64 * l.impurity() + r.samples() as f64 * r.impurity()) / s;
                    Some((*feature, impurity - weighted))
                }
                Node::Leaf { .. } => None,
            })
            .collect()
    }

    /// Unnormalized mean-decrease-in-impurity per feature: each split adds
    /// its impurity decrease times the fraction of root samples it sees.
    pub fn impurity_importances(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        let root = self.nodes[0].samples() as f64;
        let mut decreases = self.split_decreases().into_iter();
        for node in &self.nodes {
            if let Node::Split { samples, .. } = node {
                let (f, d) = decreases.next().expect("one decrease per split");
                imp[f] += d * (*samples as f64 / root);
            }
        }
        imp
    }
}

/// Free-function form of [`DecisionTree::predict_proba`].
pub fn predict_proba_tree(tree: &DecisionTree, row: &[f64]) -> Result<Vec<f64>> {
    tree.predict_proba(row)
}
