//! Every CLI stage in order on the bundled synthetic fixture, with a grid
//! search small enough to finish in seconds. Artifacts go to OUT_DIR
//! (default `pipeline_out`).

use std::path::PathBuf;

use stormloss::cli::{run_pipeline, InputPaths, ModelSource, RunConfig, REPORT_TXT};
use stormloss::tuning::ParamGrid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "pipeline_out".into());
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic");

    let mut cfg = RunConfig {
        output_dir: out.into(),
        inputs: InputPaths {
            events: fixtures.join("events.csv"),
            meteo: fixtures.join("meteo.csv"),
            resilience: fixtures.join("resilience.csv"),
        },
        ..RunConfig::default()
    };
    cfg.model.source = ModelSource::Search;
    cfg.tuning.grid = ParamGrid {
        n_estimators: vec![100],
        min_samples_split: vec![2, 5],
        min_samples_leaf: vec![1, 4],
        ..ParamGrid::single(&Default::default())
    };

    for path in run_pipeline(&cfg)? {
        println!("{}", path.display());
    }
    let path = cfg.out(REPORT_TXT);
    let report = std::fs::read_to_string(&path)?;
    println!("\n{report}");
    Ok(())
}
