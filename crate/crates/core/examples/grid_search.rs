//! Cross-validated grid search on the training partition, then a single
//! look at the held-out test set for the winner and the default model.

use stormloss::cart::MaxFeatures;
use stormloss::data_model::clean_and_join;
use stormloss::labeling::{assign_loss_levels, filter_massive_losses, split};
use stormloss::synth::{generate, SynthConfig};
use stormloss::tuning::{grid_search, ParamGrid, SealedTest, SearchConfig};

fn main() -> stormloss::Result<()> {
    let t = generate(&SynthConfig::default())?;
    let (joined, _) = clean_and_join(&t.events, &t.meteo, &t.resilience);
    let labeled = assign_loss_levels(&filter_massive_losses(&joined)?)?;
    let sp = split(&labeled, 0.25, 42, true)?;

    let grid = ParamGrid {
        n_estimators: vec![50, 200],
        min_samples_split: vec![2, 5],
        min_samples_leaf: vec![1, 4],
        max_features: vec![MaxFeatures::Sqrt, MaxFeatures::All],
        ..ParamGrid::single(&Default::default())
    };
    let result = grid_search(
        &sp.train,
        SealedTest::new(sp.test),
        &grid,
        &SearchConfig::default(),
    )?;

    for e in &result.entries {
        let p = &e.params;
        println!(
            "#{:<2} n={:<4} split={} leaf={} features={:?}  cv {} = {:.4}",
            e.index,
            p.n_estimators,
            p.tree.min_samples_split,
            p.tree.min_samples_leaf,
            p.tree.max_features,
            result.metric.name(),
            e.mean_score
        );
    }
    println!(
        "\nbest #{}: test {} {:.4} (default params {:.4})",
        result.best_index,
        result.metric.name(),
        result.test_report.score(result.metric),
        result.default_reference.test_report.score(result.metric)
    );
    Ok(())
}
