//! Pearson correlations between the model features of a synthetic data set.
//! Prints the strongest pairs and writes the full matrix as CSV to stdout
//! when `--csv` is given.

use stormloss::data_model::{clean_and_join, vectorize};
use stormloss::stats::pearson_correlation;
use stormloss::synth::{generate, SynthConfig};

fn main() -> stormloss::Result<()> {
    let t = generate(&SynthConfig::default())?;
    let (joined, _) = clean_and_join(&t.events, &t.meteo, &t.resilience);
    let corr = pearson_correlation(&vectorize(&joined)?)?;

    if std::env::args().any(|a| a == "--csv") {
        return corr.write_csv(std::io::stdout().lock());
    }

    let n = corr.names.len();
    let mut pairs: Vec<(f64, &str, &str)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (corr.values[i][j], corr.names[i].as_str(), corr.names[j].as_str()))
        .collect();
    pairs.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()));
    for (r, a, b) in pairs.iter().take(15) {
        println!("{r:+.3}  {a} / {b}");
    }
    if !corr.zero_variance.is_empty() {
        println!("constant columns: {}", corr.zero_variance.join(", "));
    }
    Ok(())
}
