//! Reads the three source tables, joins them and prints what was dropped.
//!
//!     cargo run --example ingest_and_join -- [DIR]
//!
//! `DIR` holds events.csv, meteo.csv and resilience.csv; the bundled
//! synthetic fixture is used when omitted.

use std::path::PathBuf;

use stormloss::data_model::{
    clean_and_join, ingest_events, ingest_meteo, ingest_resilience, EventColumns, MeteoColumns,
    ResilienceColumns, StudyWindow,
};

fn main() -> stormloss::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic"));

    let events = ingest_events(
        &dir.join("events.csv"),
        &EventColumns::default(),
        &StudyWindow::default(),
    )?;
    let meteo = ingest_meteo(&dir.join("meteo.csv"), &MeteoColumns::default())?;
    let res = ingest_resilience(&dir.join("resilience.csv"), &ResilienceColumns::default())?;
    for (name, rows, rejects) in [
        ("events", events.data_rows, events.rejects.len()),
        ("meteo", meteo.data_rows, meteo.rejects.len()),
        ("resilience", res.data_rows, res.rejects.len()),
    ] {
        println!("{name:<11} {rows:>5} rows, {rejects} rejected");
    }

    let (joined, report) = clean_and_join(&events.records, &meteo.records, &res.records);
    println!(
        "joined {} of {} events (no meteo {}, no resilience {}, invalid {})",
        joined.len(),
        report.events_in,
        report.no_meteo,
        report.no_resilience,
        report.invariant_violation
    );
    if let Some(first) = joined.first() {
        println!(
            "first: {} {} {} season={} loss={:.2}",
            first.event.event_id,
            first.event.province,
            first.event.start_date,
            first.season(),
            first.loss_eur()
        );
    }
    Ok(())
}
