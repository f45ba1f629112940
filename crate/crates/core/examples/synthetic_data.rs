//! Writes a synthetic data set to a directory.
//!
//!     cargo run --example synthetic_data -- OUT_DIR [SEED] [SIGNAL]
//!
//! `SIGNAL` in [0, 1] controls how strongly losses follow the affected
//! systems and wind; 0 gives losses unrelated to the features.

use std::path::PathBuf;

use stormloss::synth::{generate_to_dir, SynthConfig};

fn main() -> stormloss::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synth_out".into()));
    let mut cfg = SynthConfig::default();
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("SEED must be an integer");
    }
    if let Some(s) = args.next() {
        cfg.signal_strength = s.parse().expect("SIGNAL must be a number");
    }
    let paths = generate_to_dir(&cfg, &dir)?;
    for p in [&paths.events, &paths.meteo, &paths.resilience] {
        println!("{}", p.display());
    }
    Ok(())
}
