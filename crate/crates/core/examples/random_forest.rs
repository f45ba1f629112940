//! Trains a forest on the synthetic top-quartile events, scores the test
//! partition and lists the feature importances.

use stormloss::data_model::clean_and_join;
use stormloss::forest::{default_feature_importance, fit_forest, ForestHyperparams};
use stormloss::labeling::{assign_loss_levels, filter_massive_losses, split, LossLevel};
use stormloss::metrics::evaluate_labels;
use stormloss::synth::{generate, SynthConfig};

fn main() -> stormloss::Result<()> {
    let t = generate(&SynthConfig::default())?;
    let (joined, _) = clean_and_join(&t.events, &t.meteo, &t.resilience);
    let labeled = assign_loss_levels(&filter_massive_losses(&joined)?)?;
    let sp = split(&labeled, 0.25, 42, true)?;

    let params = ForestHyperparams {
        seed: 42,
        ..ForestHyperparams::default()
    };
    let forest = fit_forest(
        &sp.train.features.rows,
        &sp.train.label_indices(),
        3,
        &params,
    )?
    .with_columns(labeled.features.columns.clone())
    .with_classes(LossLevel::class_names());

    let pred = forest.predict(&sp.test.features.rows)?;
    let report = evaluate_labels(&sp.test.label_indices(), &pred, &LossLevel::class_names())?;
    println!(
        "accuracy {:.3}, macro F1 {:.3} on {} test events",
        report.accuracy,
        report.macro_avg.f1,
        pred.len()
    );

    let imp = default_feature_importance(&forest);
    for f in imp.features.iter().take(8) {
        println!("{:<22} {:.4}", f.name, f.importance);
    }
    for c in &imp.categories {
        println!("{:?}: {:.3}", c.category, c.importance);
    }
    Ok(())
}
