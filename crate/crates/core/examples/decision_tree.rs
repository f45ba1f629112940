//! A single CART tree on a small two-feature problem: node impurities,
//! split thresholds and predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stormloss::cart::{fit_tree, impurity, Criterion, MaxFeatures, TreeHyperparams};

fn main() -> stormloss::Result<()> {
    // The class follows x0 alone; x1 is noise the tree should ignore.
    let x: Vec<Vec<f64>> = vec![
        vec![0.5, 1.0],
        vec![1.0, 7.0],
        vec![1.5, 3.0],
        vec![2.5, 2.0],
        vec![3.0, 4.0],
        vec![3.5, 6.0],
        vec![4.0, 8.0],
        vec![4.5, 9.0],
    ];
    let y = vec![0, 0, 0, 1, 1, 2, 2, 2];
    println!("root gini    {:.4}", impurity(&[3, 2, 3], Criterion::Gini)?);
    println!("root entropy {:.4}", impurity(&[3, 2, 3], Criterion::Entropy)?);

    let params = TreeHyperparams {
        max_depth: None,
        min_samples_split: 2,
        min_samples_leaf: 1,
        max_features: MaxFeatures::All,
        criterion: Criterion::Gini,
    };
    let tree = fit_tree(&x, &y, 3, &params, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!(
        "depth {}, {} nodes, {} leaves",
        tree.depth(),
        tree.node_count(),
        tree.leaf_count()
    );
    for (feature, decrease) in tree.split_decreases() {
        println!("split on x{feature}: weighted impurity decrease {decrease:.4}");
    }
    for row in [[1.0, 9.0], [3.0, 1.0], [4.2, 1.0]] {
        println!("{row:?} -> {:?}", tree.predict_proba(&row)?);
    }
    Ok(())
}
