//! Loss quartiles, the top-quartile loss levels and a stratified split,
//! on the loss-table fixture (816 events).

use stormloss::labeling::{assign_loss_levels, filter_massive_losses, split};
use stormloss::stats::equal_frequency_quartiles;
use stormloss::synth::{loss_table_events, with_placeholder_features};

fn main() -> stormloss::Result<()> {
    let joined = with_placeholder_features(loss_table_events());
    let losses: Vec<f64> = joined.iter().map(|e| e.loss_eur()).collect();

    let (summary, _) = equal_frequency_quartiles(&losses)?;
    println!("quartile  count            min            max           mean");
    for (i, q) in summary.quartiles.iter().enumerate() {
        println!(
            "Q{}       {:>5} {:>14.2} {:>14.2} {:>14.2}",
            i + 1,
            q.count,
            q.min,
            q.max,
            q.mean
        );
    }

    let q4 = filter_massive_losses(&joined)?;
    let labeled = assign_loss_levels(&q4)?;
    println!("\nlevel            count            min            max           mean");
    for l in &labeled.boundaries.levels {
        println!(
            "{} {:<13} {:>5} {:>14.2} {:>14.2} {:>14.2}",
            l.level.code(),
            l.level.description(),
            l.count,
            l.min,
            l.max,
            l.mean
        );
    }

    let sp = split(&labeled, 0.25, 42, true)?;
    println!(
        "\nsplit: train {:?}, test {:?}",
        sp.train.class_counts(),
        sp.test.class_counts()
    );
    Ok(())
}
