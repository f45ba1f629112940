//! Seeded generator of event, meteo and resilience tables in the shapes the
//! ingestion layer reads.
//!
//! Loss is log-normal. Its log depends on a standardized mix of
//! `ln(affected_systems)` and `max_wind_kmh`; `signal_strength` sets how
//! much of the log-loss is signal and how much is noise. Social indicators
//! share one latent factor per province, temperature falls with wind speed,
//! and precipitation and duration are independent of everything else.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    write_events_csv, write_meteo_csv, write_resilience_csv, EventRecord, JoinedEvent,
    MeteoFeatures, ResilienceFeatures, ResilienceKey, Season,
};
use crate::error::{Error, Result};

/// Weight of `ln(affected_systems)` in the loss signal; `max_wind_kmh` gets
/// the rest.
pub const AFFECTED_SYSTEMS_WEIGHT: f64 = 0.8;

const LOG_LOSS_CENTRE: f64 = 8.699_514_748_210_191; // ln(6000)
const LOG_LOSS_SPREAD: f64 = 2.5;

const PROVINCES: [&str; 52] = [
    "A Coruña", "Álava", "Albacete", "Alicante", "Almería", "Asturias", "Ávila", "Badajoz",
    "Baleares", "Barcelona", "Bizkaia", "Burgos", "Cáceres", "Cádiz", "Cantabria", "Castellón",
    "Ceuta", "Ciudad Real", "Córdoba", "Cuenca", "Gipuzkoa", "Girona", "Granada", "Guadalajara",
    "Huelva", "Huesca", "Jaén", "La Rioja", "Las Palmas", "León", "Lleida", "Lugo", "Madrid",
    "Málaga", "Melilla", "Murcia", "Navarra", "Ourense", "Palencia", "Pontevedra", "Salamanca",
    "Santa Cruz de Tenerife", "Segovia", "Sevilla", "Soria", "Tarragona", "Teruel", "Toledo",
    "Valencia", "Valladolid", "Zamora", "Zaragoza",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_events: usize,
    pub provinces: usize,
    pub first_year: i32,
    pub last_year: i32,
    /// 0 gives losses independent of every feature, 1 a deterministic
    /// function of the signal.
    pub signal_strength: f64,
    /// Loading of the social indicators on their shared province factor.
    pub social_correlation: f64,
    /// Strength of the negative dependence of temperature on wind speed.
    pub temp_wind_correlation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_events: 756,
            provinces: 20,
            first_year: 2013,
            last_year: 2022,
            signal_strength: 0.8,
            social_correlation: 0.95,
            temp_wind_correlation: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("synth: {m}")));
        if self.n_events < 8 {
            return bad("n_events must be at least 8");
        }
        if self.provinces < 1 {
            return bad("provinces must be at least 1");
        }
        if self.first_year > self.last_year {
            return bad("first_year after last_year");
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("social_correlation", self.social_correlation),
            ("temp_wind_correlation", self.temp_wind_correlation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// The three generated tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTables {
    pub events: Vec<EventRecord>,
    pub meteo: BTreeMap<String, MeteoFeatures>,
    pub resilience: BTreeMap<ResilienceKey, ResilienceFeatures>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthPaths {
    pub events: PathBuf,
    pub meteo: PathBuf,
    pub resilience: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            events: dir.join("events.csv"),
            meteo: dir.join("meteo.csv"),
            resilience: dir.join("resilience.csv"),
        }
    }
}

fn province_name(i: usize) -> String {
    match PROVINCES.get(i) {
        Some(p) => p.to_string(),
        None => format!("Province {}", i + 1),
    }
}

fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Mean temperature and wind offset per season.
fn season_climate(s: Season) -> (f64, f64) {
    match s {
        Season::Winter => (8.0, 12.0),
        Season::Spring => (14.0, 2.0),
        Season::Summer => (23.0, -10.0),
        Season::Autumn => (15.0, 4.0),
    }
}

struct Province {
    name: String,
    social: f64,
    economic: f64,
    population: f64,
    surface_km2: f64,
    coast_km: f64,
    road_density: f64,
    agri_share: f64,
    trend: f64,
}

fn provinces(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Province> {
    (0..config.provinces)
        .map(|i| {
            let surface_km2 = round_to(rng.random_range(1_500.0..22_000.0), 1);
            Province {
                name: province_name(i),
                social: normal(rng),
                economic: normal(rng),
                population: (13.5 + 0.9 * normal(rng)).exp(),
                surface_km2,
                coast_km: if rng.random_bool(0.45) {
                    round_to(rng.random_range(40.0..900.0), 1)
                } else {
                    0.0
                },
                road_density: rng.random_range(0.25..0.9),
                agri_share: rng.random_range(0.2..0.7),
                trend: rng.random_range(-0.01..0.02),
            }
        })
        .collect()
}

fn resilience_row(
    p: &Province,
    years_in: f64,
    loading: f64,
    rng: &mut ChaCha8Rng,
) -> ResilienceFeatures {
    let idio = (1.0f64 - loading * loading).sqrt();
    let mut social = || loading * p.social + idio * normal(rng);
    // An older province has more over-65s, fewer children and workers, and
    // fewer foreign residents.
    let median_age = 44.0 + 3.0 * social() + 0.15 * years_in;
    let over_65 = 20.0 + 4.0 * social() + 0.2 * years_in;
    let under_15 = 14.5 - 2.0 * social() - 0.05 * years_in;
    let working = 65.5 - 2.5 * social() - 0.15 * years_in;
    let foreign = (10.0 - 3.5 * social()).clamp(0.5, 40.0);
    let e = p.economic;
    let growth = 1.0 + p.trend * years_in;
    let unemployment = (14.0 - 4.0 * e + 0.8 * normal(rng)).clamp(2.0, 40.0);
    let r2 = |x: f64| round_to(x, 2);
    let mut r = ResilienceFeatures {
        median_age: r2(median_age),
        total_population: (p.population * growth).round(),
        pop_over_65: r2(over_65.clamp(5.0, 40.0)),
        pop_under_15: r2(under_15.clamp(5.0, 30.0)),
        pop_16_64: r2(working.clamp(45.0, 80.0)),
        pop_spanish: 0.0,
        pop_foreign: r2(foreign),
        employment_rate: r2((50.0 + 5.0 * e + normal(rng)).clamp(20.0, 80.0)),
        unemployment_rate: r2(unemployment),
        gdp_per_capita: (25_000.0 * growth * (1.0 + 0.18 * e)).max(8_000.0).round(),
        spending_household: (30_000.0 * growth * (1.0 + 0.12 * e)).max(10_000.0).round(),
        income_household: (32_000.0 * growth * (1.0 + 0.15 * e)).max(10_000.0).round(),
        avg_salary: (23_000.0 * growth * (1.0 + 0.1 * e)).max(9_000.0).round(),
        affected_systems: 0.0,
        road_km: round_to(p.surface_km2 * p.road_density * (1.0 + 0.002 * years_in), 1),
        total_surface_km2: p.surface_km2,
        agricultural_surface_ha: (p.surface_km2 * 100.0 * p.agri_share * (1.0 - 0.003 * years_in))
            .round(),
        coast_km: p.coast_km,
    };
    r.pop_spanish = r2(100.0 - r.pop_foreign);
    r
}

/// Generates the three tables for `config`. Same config, same tables.
pub fn generate(config: &SynthConfig) -> Result<SynthTables> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let provs = provinces(config, &mut rng);

    let mut resilience = BTreeMap::new();
    for p in &provs {
        for year in config.first_year..=config.last_year {
            let years_in = (year - config.first_year) as f64;
            let row = resilience_row(p, years_in, config.social_correlation, &mut rng);
            resilience.insert((p.name.clone(), year), row);
        }
    }

    let n = config.n_events;
    let width = n.to_string().len().max(4);
    let mut events = Vec::with_capacity(n);
    let mut meteo_rows = Vec::with_capacity(n);
    let rho = config.temp_wind_correlation;
    for i in 0..n {
        let province = provs[rng.random_range(0..provs.len())].name.clone();
        let year = rng.random_range(config.first_year..=config.last_year);
        let start_date = NaiveDate::from_yo_opt(year, rng.random_range(1..=365)).expect("valid day");
        let season = Season::from_date(start_date);
        let (base_temp, wind_offset) = season_climate(season);

        let wind_z = normal(&mut rng);
        let max_wind = round_to((95.0 + wind_offset + 18.0 * wind_z).clamp(40.0, 200.0), 1);
        let avg_wind = round_to(max_wind * rng.random_range(0.4..0.7), 1);
        let temp_noise = normal(&mut rng);
        let avg_temp = round_to(
            base_temp + 4.0 * (-rho * wind_z + (1.0 - rho * rho).sqrt() * temp_noise),
            1,
        );
        let min_temp = round_to(avg_temp - rng.random_range(1.0..7.0), 1);
        let max_temp = round_to(avg_temp + rng.random_range(1.0..9.0), 1);
        let precipitation = round_to((2.5 + normal(&mut rng)).exp(), 1);
        let affected = (3.0 + normal(&mut rng)).exp().round() as u32 + 1;
        let duration = 1 + (rng.random::<f64>().ln() / 0.55f64.ln()).floor().min(9.0) as u32;

        events.push(EventRecord {
            event_id: format!("EV{:0width$}", i + 1),
            province,
            start_date,
            duration_days: duration,
            loss_eur: 0.0,
            affected_systems: affected,
        });
        meteo_rows.push(MeteoFeatures {
            avg_wind_kmh: avg_wind,
            max_wind_kmh: max_wind,
            precipitation_mm: precipitation,
            avg_temp_c: avg_temp,
            max_temp_c: max_temp,
            min_temp_c: min_temp,
            season: Some(season),
        });
    }

    let z_affected =
        standardize(&events.iter().map(|e| (e.affected_systems as f64).ln()).collect::<Vec<_>>());
    let z_wind = standardize(&meteo_rows.iter().map(|m| m.max_wind_kmh).collect::<Vec<_>>());
    let mixed: Vec<f64> = z_affected
        .iter()
        .zip(&z_wind)
        .map(|(a, w)| AFFECTED_SYSTEMS_WEIGHT * a + (1.0 - AFFECTED_SYSTEMS_WEIGHT) * w)
        .collect();
    let signal = standardize(&mixed);
    let s = config.signal_strength;
    let noise_weight = (1.0 - s).powi(2);
    let scale: f64 = (s * s + noise_weight * noise_weight).sqrt();
    for (ev, z) in events.iter_mut().zip(&signal) {
        let e = normal(&mut rng);
        let log_loss = LOG_LOSS_CENTRE + LOG_LOSS_SPREAD * (s * z + noise_weight * e) / scale;
        ev.loss_eur = round_to(log_loss.exp(), 2).max(0.01);
    }

    let meteo = events
        .iter()
        .map(|e| e.event_id.clone())
        .zip(meteo_rows)
        .collect();
    Ok(SynthTables {
        events,
        meteo,
        resilience,
    })
}

impl SynthTables {
    pub fn write(&self, paths: &SynthPaths) -> Result<()> {
        let create = |p: &Path| -> Result<BufWriter<File>> {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            Ok(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))
        };
        write_events_csv(create(&paths.events)?, &self.events)?;
        write_meteo_csv(
            create(&paths.meteo)?,
            self.meteo.iter().map(|(k, v)| (k.as_str(), v)),
        )?;
        write_resilience_csv(create(&paths.resilience)?, self.resilience.iter())
    }
}

/// Generates and writes `events.csv`, `meteo.csv` and `resilience.csv`
/// under `dir`.
pub fn generate_to_dir(config: &SynthConfig, dir: &Path) -> Result<SynthPaths> {
    let paths = SynthPaths::in_dir(dir);
    generate(config)?.write(&paths)?;
    Ok(paths)
}

/// One equal-frequency block of the loss-table fixture: range, exact sum in
/// cents, and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBlock {
    pub min: f64,
    pub max: f64,
    pub sum_cents: i64,
    pub count: usize,
}

/// Blocks of the 816-event loss-table fixture: the three lower quartiles,
/// then the three levels of the top quartile (68 events each).
///
/// The reference level means and top-quartile mean are not consistent to the
/// cent: no three level sums average to the quartile mean. Each level sum
/// sits 60 cents above `68 × reference mean`, which leaves every mean, level
/// and quartile alike, less than a cent from its reference value.
pub const LOSS_TABLE_BLOCKS: [LossBlock; 6] = [
    LossBlock { min: 42.0, max: 987.0, sum_cents: 10_041_288, count: 204 },
    LossBlock { min: 1_014.0, max: 5_860.0, sum_cents: 55_091_832, count: 204 },
    LossBlock { min: 6_008.0, max: 44_864.0, sum_cents: 359_584_476, count: 204 },
    LossBlock { min: 45_076.0, max: 110_451.0, sum_cents: 484_391_124, count: 68 },
    LossBlock { min: 112_089.0, max: 575_431.0, sum_cents: 1_740_809_648, count: 68 },
    LossBlock { min: 630_242.0, max: 19_298_377.0, sum_cents: 15_144_749_124, count: 68 },
];

/// Values in cents with the given min, max, count and exact sum: the two
/// extremes once each and a power-curve interior whose exponent is found by
/// bisection.
fn block_values(b: &LossBlock) -> Vec<i64> {
    let lo = (b.min * 100.0).round() as i64;
    let hi = (b.max * 100.0).round() as i64;
    let m = b.count - 2;
    let target = (b.sum_cents - lo - hi) as f64;
    let interior = |p: f64| -> Vec<f64> {
        (0..m)
            .map(|i| {
                let u = (i as f64 + 0.5) / m as f64;
                lo as f64 + (hi - lo) as f64 * u.powf(p)
            })
            .collect()
    };
    let (mut a, mut z) = (1e-3f64, 1e3f64);
    for _ in 0..200 {
        let mid = (a * z).sqrt();
        // Larger exponents pull the interior toward `lo`.
        if interior(mid).iter().sum::<f64>() > target {
            a = mid;
        } else {
            z = mid;
        }
    }
    let mut v: Vec<i64> = interior((a * z).sqrt()).iter().map(|x| x.round() as i64).collect();
    let mut residual = target as i64 - v.iter().sum::<i64>();
    let mut k = m / 2;
    while residual != 0 {
        let step = residual.signum();
        if v[k] + step > lo && v[k] + step < hi {
            v[k] += step;
            residual -= step;
        }
        k = (k + 1) % m;
    }
    v.push(lo);
    v.push(hi);
    v
}

/// Losses of the 816-event loss-table fixture in shuffled order.
pub fn loss_table_losses() -> Vec<f64> {
    let mut cents: Vec<i64> = LOSS_TABLE_BLOCKS.iter().flat_map(block_values).collect();
    cents.shuffle(&mut ChaCha8Rng::seed_from_u64(816));
    cents.into_iter().map(|c| c as f64 / 100.0).collect()
}

/// The loss-table fixture as an events table with placeholder non-loss
/// fields.
pub fn loss_table_events() -> Vec<EventRecord> {
    let first = NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date");
    loss_table_losses()
        .into_iter()
        .enumerate()
        .map(|(i, loss)| EventRecord {
            event_id: format!("LT{:04}", i + 1),
            province: province_name(i % 17),
            start_date: first + chrono::Days::new((i as u64 * 4) % 3650),
            duration_days: 1,
            loss_eur: loss,
            affected_systems: 1,
        })
        .collect()
}

/// Wraps events with constant meteo and resilience values, for code paths
/// that only read the loss.
pub fn with_placeholder_features(events: Vec<EventRecord>) -> Vec<JoinedEvent> {
    events
        .into_iter()
        .map(|event| {
            let mut resilience = ResilienceFeatures::from_values([0.0; 18]);
            resilience.pop_spanish = 100.0;
            resilience.affected_systems = event.affected_systems as f64;
            JoinedEvent {
                meteo: MeteoFeatures {
                    avg_wind_kmh: 0.0,
                    max_wind_kmh: 0.0,
                    precipitation_mm: 0.0,
                    avg_temp_c: 0.0,
                    max_temp_c: 0.0,
                    min_temp_c: 0.0,
                    season: Some(Season::from_date(event.start_date)),
                },
                event,
                resilience,
            }
        })
        .collect()
}
