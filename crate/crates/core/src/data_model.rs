//! Domain records for windstorm events, CSV ingestion, cleaning and the
//! event ↔ meteorology ↔ resilience join.
//!
//! Three tables feed the pipeline:
//!
//! * **events** – one row per insured windstorm event (identifier, province,
//!   ISO-8601 start date, duration in days, total loss in euros and the number
//!   of affected systems),
//! * **meteo** – one row per event with wind, precipitation and temperature
//!   observations for the period of the event,
//! * **resilience** – one row per `(province, year)` with the social,
//!   economic, infrastructure and environmental indicators.
//!
//! Ingestion is total: every data row becomes either a record or a [`Reject`]
//! carrying the row number and reason. [`clean_and_join`] then drops events
//! that cannot be fully resolved and reports the drops by reason.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meteorological season. The one-hot encoding uses this declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Autumn];

    /// Meteorological seasons: Dec–Feb winter, Mar–May spring, Jun–Aug
    /// summer, Sep–Nov autumn.
    pub fn from_month(month: u32) -> Season {
        match month {
            12 | 1 | 2 => Season::Winter,
            3..=5 => Season::Spring,
            6..=8 => Season::Summer,
            _ => Season::Autumn,
        }
    }

    pub fn from_date(date: NaiveDate) -> Season {
        Season::from_month(date.month())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Autumn => "autumn",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Season {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "winter" => Ok(Season::Winter),
            "spring" => Ok(Season::Spring),
            "summer" => Ok(Season::Summer),
            "autumn" | "fall" => Ok(Season::Autumn),
            _ => Err(()),
        }
    }
}

/// Inclusive range of calendar years accepted for event start dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub first_year: i32,
    pub last_year: i32,
}

impl Default for StudyWindow {
    fn default() -> Self {
        StudyWindow {
            first_year: 2013,
            last_year: 2022,
        }
    }
}

impl StudyWindow {
    pub fn contains(&self, date: NaiveDate) -> bool {
        (self.first_year..=self.last_year).contains(&date.year())
    }
}

/// One windstorm insurance event.
///
/// `affected_systems` is event-scoped but belongs to the infrastructure
/// resilience group; it is read from the events table and copied into the
/// joined [`ResilienceFeatures`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub province: String,
    pub start_date: NaiveDate,
    pub duration_days: u32,
    pub loss_eur: f64,
    pub affected_systems: u32,
}

impl EventRecord {
    pub fn year(&self) -> i32 {
        self.start_date.year()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeteoFeatures {
    pub avg_wind_kmh: f64,
    pub max_wind_kmh: f64,
    pub precipitation_mm: f64,
    pub avg_temp_c: f64,
    pub max_temp_c: f64,
    pub min_temp_c: f64,
    /// `None` when the meteo table has no season column; resolved from the
    /// event start date during the join.
    pub season: Option<Season>,
}

impl MeteoFeatures {
    fn check(&self) -> std::result::Result<(), RejectReason> {
        let finite = [
            self.avg_wind_kmh,
            self.max_wind_kmh,
            self.precipitation_mm,
            self.avg_temp_c,
            self.max_temp_c,
            self.min_temp_c,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(RejectReason::NonFinite);
        }
        if self.avg_wind_kmh < 0.0 || self.max_wind_kmh < self.avg_wind_kmh {
            return Err(RejectReason::WindOrdering);
        }
        if self.precipitation_mm < 0.0 {
            return Err(RejectReason::Negative("precipitation"));
        }
        if !(self.min_temp_c <= self.avg_temp_c && self.avg_temp_c <= self.max_temp_c) {
            return Err(RejectReason::TemperatureOrdering);
        }
        Ok(())
    }
}

/// Resilience subdomain of an indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subdomain {
    Social,
    Economic,
    Infrastructure,
    Environmental,
}

/// Province/year resilience indicators plus the event-scoped affected
/// systems count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceFeatures {
    // social
    pub median_age: f64,
    pub total_population: f64,
    pub pop_over_65: f64,
    pub pop_under_15: f64,
    pub pop_16_64: f64,
    pub pop_spanish: f64,
    pub pop_foreign: f64,
    // economic
    pub employment_rate: f64,
    pub unemployment_rate: f64,
    pub gdp_per_capita: f64,
    pub spending_household: f64,
    pub income_household: f64,
    pub avg_salary: f64,
    // infrastructure
    pub affected_systems: f64,
    pub road_km: f64,
    // environmental
    pub total_surface_km2: f64,
    pub agricultural_surface_ha: f64,
    pub coast_km: f64,
}

/// Resilience fields in feature order with their subdomain and whether the
/// value is a percentage.
pub const RESILIENCE_FIELDS: [(&str, Subdomain, bool); 18] = [
    ("median_age", Subdomain::Social, false),
    ("total_population", Subdomain::Social, false),
    ("pop_over_65", Subdomain::Social, true),
    ("pop_under_15", Subdomain::Social, true),
    ("pop_16_64", Subdomain::Social, true),
    ("pop_spanish", Subdomain::Social, true),
    ("pop_foreign", Subdomain::Social, true),
    ("employment_rate", Subdomain::Economic, true),
    ("unemployment_rate", Subdomain::Economic, true),
    ("gdp_per_capita", Subdomain::Economic, false),
    ("spending_household", Subdomain::Economic, false),
    ("income_household", Subdomain::Economic, false),
    ("avg_salary", Subdomain::Economic, false),
    ("affected_systems", Subdomain::Infrastructure, false),
    ("road_km", Subdomain::Infrastructure, false),
    ("total_surface_km2", Subdomain::Environmental, false),
    ("agricultural_surface_ha", Subdomain::Environmental, false),
    ("coast_km", Subdomain::Environmental, false),
];

impl ResilienceFeatures {
    pub fn values(&self) -> [f64; 18] {
        [
            self.median_age,
            self.total_population,
            self.pop_over_65,
            self.pop_under_15,
            self.pop_16_64,
            self.pop_spanish,
            self.pop_foreign,
            self.employment_rate,
            self.unemployment_rate,
            self.gdp_per_capita,
            self.spending_household,
            self.income_household,
            self.avg_salary,
            self.affected_systems,
            self.road_km,
            self.total_surface_km2,
            self.agricultural_surface_ha,
            self.coast_km,
        ]
    }

    pub fn from_values(v: [f64; 18]) -> Self {
        ResilienceFeatures {
            median_age: v[0],
            total_population: v[1],
            pop_over_65: v[2],
            pop_under_15: v[3],
            pop_16_64: v[4],
            pop_spanish: v[5],
            pop_foreign: v[6],
            employment_rate: v[7],
            unemployment_rate: v[8],
            gdp_per_capita: v[9],
            spending_household: v[10],
            income_household: v[11],
            avg_salary: v[12],
            affected_systems: v[13],
            road_km: v[14],
            total_surface_km2: v[15],
            agricultural_surface_ha: v[16],
            coast_km: v[17],
        }
    }

    fn check(&self) -> std::result::Result<(), RejectReason> {
        let values = self.values();
        for (v, (name, _, percent)) in values.iter().zip(RESILIENCE_FIELDS.iter()) {
            if !v.is_finite() {
                return Err(RejectReason::NonFinite);
            }
            if *percent && !(0.0..=100.0).contains(v) {
                return Err(RejectReason::PercentOutOfRange(name));
            }
            if *v < 0.0 {
                return Err(RejectReason::Negative(name));
            }
        }
        let share = self.pop_spanish + self.pop_foreign;
        if !(99.0..=101.0).contains(&share) {
            return Err(RejectReason::PopulationShares);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedEvent {
    pub event: EventRecord,
    pub meteo: MeteoFeatures,
    pub resilience: ResilienceFeatures,
}

impl JoinedEvent {
    pub fn loss_eur(&self) -> f64 {
        self.event.loss_eur
    }

    pub fn season(&self) -> Season {
        self.meteo
            .season
            .unwrap_or_else(|| Season::from_date(self.event.start_date))
    }

    fn check(&self) -> std::result::Result<(), RejectReason> {
        if !self.event.loss_eur.is_finite() {
            return Err(RejectReason::NonFinite);
        }
        if self.event.loss_eur < 0.0 {
            return Err(RejectReason::Negative("loss"));
        }
        if self.event.duration_days < 1 {
            return Err(RejectReason::DurationBelowOne);
        }
        self.meteo.check()?;
        self.resilience.check()
    }
}

/// Why an input row was not turned into a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String")]
pub enum RejectReason {
    Missing(&'static str),
    Unparseable(&'static str),
    Negative(&'static str),
    NonFinite,
    DurationBelowOne,
    OutsideStudyWindow,
    DuplicateEventId,
    WindOrdering,
    TemperatureOrdering,
    PercentOutOfRange(&'static str),
    PopulationShares,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Missing(field) => write!(f, "missing {field}"),
            RejectReason::Unparseable(field) => write!(f, "unparseable {field}"),
            RejectReason::Negative(field) => write!(f, "negative {field}"),
            RejectReason::NonFinite => f.write_str("non-finite value"),
            RejectReason::DurationBelowOne => f.write_str("duration below one day"),
            RejectReason::OutsideStudyWindow => f.write_str("start date outside study window"),
            RejectReason::DuplicateEventId => f.write_str("duplicate event id"),
            RejectReason::WindOrdering => f.write_str("wind ordering"),
            RejectReason::TemperatureOrdering => f.write_str("temperature ordering"),
            RejectReason::PercentOutOfRange(field) => write!(f, "percent out of range ({field})"),
            RejectReason::PopulationShares => {
                f.write_str("spanish and foreign population shares do not sum to 100")
            }
        }
    }
}

impl From<RejectReason> for String {
    fn from(r: RejectReason) -> String {
        r.to_string()
    }
}

/// A data row that did not produce a record. `row` is the 1-based data row
/// number (the header is row 0).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reject {
    pub row: usize,
    pub reason: RejectReason,
}

/// Output of one ingestion: the records plus every rejected row.
#[derive(Debug, Clone)]
pub struct Ingested<T> {
    pub records: T,
    pub rejects: Vec<Reject>,
    pub data_rows: usize,
}

/// Column names of the events table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventColumns {
    pub event_id: String,
    pub province: String,
    pub start_date: String,
    pub duration_days: String,
    pub loss_eur: String,
    pub affected_systems: String,
}

impl Default for EventColumns {
    fn default() -> Self {
        EventColumns {
            event_id: "event_id".into(),
            province: "province".into(),
            start_date: "start_date".into(),
            duration_days: "duration_days".into(),
            loss_eur: "loss_eur".into(),
            affected_systems: "affected_systems".into(),
        }
    }
}

/// Column names of the meteo table. `season` is optional; when the column
/// is absent the season is derived from the event date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeteoColumns {
    pub event_id: String,
    pub avg_wind_kmh: String,
    pub max_wind_kmh: String,
    pub precipitation_mm: String,
    pub avg_temp_c: String,
    pub max_temp_c: String,
    pub min_temp_c: String,
    pub season: Option<String>,
}

impl Default for MeteoColumns {
    fn default() -> Self {
        MeteoColumns {
            event_id: "event_id".into(),
            avg_wind_kmh: "avg_wind_kmh".into(),
            max_wind_kmh: "max_wind_kmh".into(),
            precipitation_mm: "precipitation_mm".into(),
            avg_temp_c: "avg_temp_c".into(),
            max_temp_c: "max_temp_c".into(),
            min_temp_c: "min_temp_c".into(),
            season: Some("season".into()),
        }
    }
}

/// Column names of the resilience table. Indicator columns map from the
/// canonical field name (see [`RESILIENCE_FIELDS`]) to the header name; any
/// field without an entry uses its canonical name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResilienceColumns {
    pub province: String,
    pub year: String,
    pub renames: BTreeMap<String, String>,
}

impl Default for ResilienceColumns {
    fn default() -> Self {
        ResilienceColumns {
            province: "province".into(),
            year: "year".into(),
            renames: BTreeMap::new(),
        }
    }
}

impl ResilienceColumns {
    fn column_for<'a>(&'a self, field: &'a str) -> &'a str {
        self.renames.get(field).map(String::as_str).unwrap_or(field)
    }
}

/// Province/year key of the resilience table.
pub type ResilienceKey = (String, i32);

struct Header {
    context: String,
    names: Vec<String>,
}

impl Header {
    fn index(&self, column: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == column)
            .ok_or_else(|| Error::MissingColumn {
                context: self.context.clone(),
                column: column.to_string(),
            })
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn read_header<R: Read>(rdr: &mut csv::Reader<R>, context: &str) -> Result<Header> {
    let names = rdr
        .headers()
        .map_err(|e| Error::csv(format!("{context}: unparseable header"), e))?
        .iter()
        .map(|s| s.trim_start_matches('\u{feff}').to_string())
        .collect();
    Ok(Header {
        context: context.to_string(),
        names,
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn field<'r>(
    record: &'r csv::StringRecord,
    idx: usize,
    name: &'static str,
) -> std::result::Result<&'r str, RejectReason> {
    match record.get(idx) {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(RejectReason::Missing(name)),
    }
}

fn parse_f64(
    record: &csv::StringRecord,
    idx: usize,
    name: &'static str,
) -> std::result::Result<f64, RejectReason> {
    let raw = field(record, idx, name)?;
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(RejectReason::Unparseable(name)),
    }
}

fn parse_u32(
    record: &csv::StringRecord,
    idx: usize,
    name: &'static str,
) -> std::result::Result<u32, RejectReason> {
    field(record, idx, name)?
        .parse::<u32>()
        .map_err(|_| RejectReason::Unparseable(name))
}

fn parse_date(
    record: &csv::StringRecord,
    idx: usize,
    name: &'static str,
) -> std::result::Result<NaiveDate, RejectReason> {
    NaiveDate::parse_from_str(field(record, idx, name)?, "%Y-%m-%d")
        .map_err(|_| RejectReason::Unparseable(name))
}

fn read_record(
    rdr: &mut csv::Reader<impl Read>,
    record: &mut csv::StringRecord,
    context: &str,
) -> Result<bool> {
    rdr.read_record(record)
        .map_err(|e| Error::csv(context.to_string(), e))
}

pub fn ingest_events(
    path: &Path,
    columns: &EventColumns,
    window: &StudyWindow,
) -> Result<Ingested<Vec<EventRecord>>> {
    read_events(open(path)?, &path.display().to_string(), columns, window)
}

/// Reads the events table from any reader. `context` names the source in
/// error messages.
pub fn read_events<R: Read>(
    reader: R,
    context: &str,
    columns: &EventColumns,
    window: &StudyWindow,
) -> Result<Ingested<Vec<EventRecord>>> {
    let mut rdr = csv_reader(reader);
    let header = read_header(&mut rdr, context)?;
    let i_id = header.index(&columns.event_id)?;
    let i_prov = header.index(&columns.province)?;
    let i_date = header.index(&columns.start_date)?;
    let i_dur = header.index(&columns.duration_days)?;
    let i_loss = header.index(&columns.loss_eur)?;
    let i_aff = header.index(&columns.affected_systems)?;

    let mut out = Ingested {
        records: Vec::new(),
        rejects: Vec::new(),
        data_rows: 0,
    };
    let mut seen = HashSet::new();
    let mut record = csv::StringRecord::new();
    while read_record(&mut rdr, &mut record, context)? {
        out.data_rows += 1;
        let parsed = (|| {
            let event_id = field(&record, i_id, "event id")?.to_string();
            let province = field(&record, i_prov, "province")?.to_string();
            let start_date = parse_date(&record, i_date, "start date")?;
            let duration_days = parse_u32(&record, i_dur, "duration")?;
            let loss_eur = parse_f64(&record, i_loss, "loss")?;
            let affected_systems = parse_u32(&record, i_aff, "affected systems")?;
            if loss_eur < 0.0 {
                return Err(RejectReason::Negative("loss"));
            }
            if duration_days < 1 {
                return Err(RejectReason::DurationBelowOne);
            }
            if !window.contains(start_date) {
                return Err(RejectReason::OutsideStudyWindow);
            }
            if seen.contains(&event_id) {
                return Err(RejectReason::DuplicateEventId);
            }
            Ok(EventRecord {
                event_id,
                province,
                start_date,
                duration_days,
                loss_eur,
                affected_systems,
            })
        })();
        match parsed {
            Ok(ev) => {
                seen.insert(ev.event_id.clone());
                out.records.push(ev);
            }
            Err(reason) => out.rejects.push(Reject {
                row: out.data_rows,
                reason,
            }),
        }
    }
    Ok(out)
}

pub fn ingest_meteo(
    path: &Path,
    columns: &MeteoColumns,
) -> Result<Ingested<BTreeMap<String, MeteoFeatures>>> {
    read_meteo(open(path)?, &path.display().to_string(), columns)
}

/// Reads the meteo table keyed by event id. A repeated event id is an error.
pub fn read_meteo<R: Read>(
    reader: R,
    context: &str,
    columns: &MeteoColumns,
) -> Result<Ingested<BTreeMap<String, MeteoFeatures>>> {
    let mut rdr = csv_reader(reader);
    let header = read_header(&mut rdr, context)?;
    let i_id = header.index(&columns.event_id)?;
    let i_avg_w = header.index(&columns.avg_wind_kmh)?;
    let i_max_w = header.index(&columns.max_wind_kmh)?;
    let i_prec = header.index(&columns.precipitation_mm)?;
    let i_avg_t = header.index(&columns.avg_temp_c)?;
    let i_max_t = header.index(&columns.max_temp_c)?;
    let i_min_t = header.index(&columns.min_temp_c)?;
    // A configured season column that is absent from the file falls back to
    // date-derived seasons.
    let i_season = columns
        .season
        .as_deref()
        .and_then(|c| header.names.iter().position(|n| n == c));

    let mut out = Ingested {
        records: BTreeMap::new(),
        rejects: Vec::new(),
        data_rows: 0,
    };
    let mut record = csv::StringRecord::new();
    while read_record(&mut rdr, &mut record, context)? {
        out.data_rows += 1;
        let parsed = (|| {
            let event_id = field(&record, i_id, "event id")?.to_string();
            let season = match i_season {
                Some(i) => Some(
                    field(&record, i, "season")?
                        .parse::<Season>()
                        .map_err(|_| RejectReason::Unparseable("season"))?,
                ),
                None => None,
            };
            let meteo = MeteoFeatures {
                avg_wind_kmh: parse_f64(&record, i_avg_w, "avg wind")?,
                max_wind_kmh: parse_f64(&record, i_max_w, "max wind")?,
                precipitation_mm: parse_f64(&record, i_prec, "precipitation")?,
                avg_temp_c: parse_f64(&record, i_avg_t, "avg temperature")?,
                max_temp_c: parse_f64(&record, i_max_t, "max temperature")?,
                min_temp_c: parse_f64(&record, i_min_t, "min temperature")?,
                season,
            };
            meteo.check()?;
            Ok((event_id, meteo))
        })();
        match parsed {
            Ok((id, meteo)) => {
                if out.records.contains_key(&id) {
                    return Err(Error::DuplicateKey {
                        context: context.to_string(),
                        what: "meteo",
                        key: id,
                    });
                }
                out.records.insert(id, meteo);
            }
            Err(reason) => out.rejects.push(Reject {
                row: out.data_rows,
                reason,
            }),
        }
    }
    Ok(out)
}

pub fn ingest_resilience(
    path: &Path,
    columns: &ResilienceColumns,
) -> Result<Ingested<BTreeMap<ResilienceKey, ResilienceFeatures>>> {
    read_resilience(open(path)?, &path.display().to_string(), columns)
}

/// Reads the resilience table keyed by `(province, year)`.
///
/// The table carries no `affected_systems` column; that value is event
/// scoped and is filled in by [`clean_and_join`], so ingested records hold 0.
pub fn read_resilience<R: Read>(
    reader: R,
    context: &str,
    columns: &ResilienceColumns,
) -> Result<Ingested<BTreeMap<ResilienceKey, ResilienceFeatures>>> {
    let mut rdr = csv_reader(reader);
    let header = read_header(&mut rdr, context)?;
    let i_prov = header.index(&columns.province)?;
    let i_year = header.index(&columns.year)?;
    let mut indices = [None; 18];
    for (slot, (name, _, _)) in indices.iter_mut().zip(RESILIENCE_FIELDS.iter()) {
        if *name != "affected_systems" {
            *slot = Some(header.index(columns.column_for(name))?);
        }
    }

    let mut out = Ingested {
        records: BTreeMap::new(),
        rejects: Vec::new(),
        data_rows: 0,
    };
    let mut record = csv::StringRecord::new();
    while read_record(&mut rdr, &mut record, context)? {
        out.data_rows += 1;
        let parsed = (|| {
            let province = field(&record, i_prov, "province")?.to_string();
            let year = field(&record, i_year, "year")?
                .parse::<i32>()
                .map_err(|_| RejectReason::Unparseable("year"))?;
            let mut values = [0.0; 18];
            for ((v, idx), (name, _, _)) in values
                .iter_mut()
                .zip(indices.iter())
                .zip(RESILIENCE_FIELDS.iter())
            {
                if let Some(i) = idx {
                    *v = parse_f64(&record, *i, name)?;
                }
            }
            let features = ResilienceFeatures::from_values(values);
            features.check()?;
            Ok(((province, year), features))
        })();
        match parsed {
            Ok((key, features)) => {
                if out.records.contains_key(&key) {
                    return Err(Error::DuplicateKey {
                        context: context.to_string(),
                        what: "resilience",
                        key: format!("({}, {})", key.0, key.1),
                    });
                }
                out.records.insert(key, features);
            }
            Err(reason) => out.rejects.push(Reject {
                row: out.data_rows,
                reason,
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    NoMeteo,
    NoResilience,
    InvariantViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedEvent {
    pub event_id: String,
    pub reason: DropReason,
}

/// Counts of events removed during the join, by reason.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub events_in: usize,
    pub joined: usize,
    pub no_meteo: usize,
    pub no_resilience: usize,
    pub invariant_violation: usize,
    pub dropped: Vec<DroppedEvent>,
}

impl DropReport {
    fn drop(&mut self, event_id: &str, reason: DropReason) {
        match reason {
            DropReason::NoMeteo => self.no_meteo += 1,
            DropReason::NoResilience => self.no_resilience += 1,
            DropReason::InvariantViolation => self.invariant_violation += 1,
        }
        self.dropped.push(DroppedEvent {
            event_id: event_id.to_string(),
            reason,
        });
    }
}

/// Joins each event with its meteo row (by event id) and the resilience row
/// of its province in the year of its start date.
///
/// Output is sorted by `(start_date, province, event_id)` and every returned
/// event has its season resolved and `affected_systems` copied from the
/// event into the resilience block.
pub fn clean_and_join(
    events: &[EventRecord],
    meteo: &BTreeMap<String, MeteoFeatures>,
    resilience: &BTreeMap<ResilienceKey, ResilienceFeatures>,
) -> (Vec<JoinedEvent>, DropReport) {
    let mut report = DropReport {
        events_in: events.len(),
        ..Default::default()
    };
    let mut joined = Vec::with_capacity(events.len());
    for ev in events {
        let Some(m) = meteo.get(&ev.event_id) else {
            report.drop(&ev.event_id, DropReason::NoMeteo);
            continue;
        };
        let Some(r) = resilience.get(&(ev.province.clone(), ev.year())) else {
            report.drop(&ev.event_id, DropReason::NoResilience);
            continue;
        };
        let mut meteo = m.clone();
        meteo.season = Some(meteo.season.unwrap_or_else(|| Season::from_date(ev.start_date)));
        let mut resilience = r.clone();
        resilience.affected_systems = f64::from(ev.affected_systems);
        let je = JoinedEvent {
            event: ev.clone(),
            meteo,
            resilience,
        };
        if je.check().is_err() {
            report.drop(&ev.event_id, DropReason::InvariantViolation);
            continue;
        }
        joined.push(je);
    }
    joined.sort_by(|a, b| {
        (a.event.start_date, &a.event.province, &a.event.event_id).cmp(&(
            b.event.start_date,
            &b.event.province,
            &b.event.event_id,
        ))
    });
    report.joined = joined.len();
    (joined, report)
}

/// Number of feature columns produced by [`vectorize`].
pub const FEATURE_COUNT: usize = 29;

/// Feature columns in matrix order: duration and meteorological numerics,
/// season one-hot (winter, spring, summer, autumn), then the 18 resilience
/// indicators.
pub const FEATURE_COLUMNS: [&str; FEATURE_COUNT] = [
    "duration_days",
    "avg_wind_kmh",
    "max_wind_kmh",
    "precipitation_mm",
    "avg_temp_c",
    "max_temp_c",
    "min_temp_c",
    "season_winter",
    "season_spring",
    "season_summer",
    "season_autumn",
    "median_age",
    "total_population",
    "pop_over_65",
    "pop_under_15",
    "pop_16_64",
    "pop_spanish",
    "pop_foreign",
    "employment_rate",
    "unemployment_rate",
    "gdp_per_capita",
    "spending_household",
    "income_household",
    "avg_salary",
    "affected_systems",
    "road_km",
    "total_surface_km2",
    "agricultural_surface_ha",
    "coast_km",
];

/// Reporting group of a feature column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureCategory {
    Disaster,
    Meteorological,
    Social,
    Economic,
    Infrastructure,
    Environmental,
}

impl FeatureCategory {
    pub const ALL: [FeatureCategory; 6] = [
        FeatureCategory::Meteorological,
        FeatureCategory::Social,
        FeatureCategory::Economic,
        FeatureCategory::Infrastructure,
        FeatureCategory::Environmental,
        FeatureCategory::Disaster,
    ];
}

impl From<Subdomain> for FeatureCategory {
    fn from(s: Subdomain) -> Self {
        match s {
            Subdomain::Social => FeatureCategory::Social,
            Subdomain::Economic => FeatureCategory::Economic,
            Subdomain::Infrastructure => FeatureCategory::Infrastructure,
            Subdomain::Environmental => FeatureCategory::Environmental,
        }
    }
}

/// Category of a feature column by name. Duration and season are grouped
/// with the meteorological features; unknown names fall back to `Disaster`.
pub fn feature_category(name: &str) -> FeatureCategory {
    if let Some((_, sub, _)) = RESILIENCE_FIELDS.iter().find(|(n, _, _)| *n == name) {
        return (*sub).into();
    }
    if FEATURE_COLUMNS[..11].contains(&name) {
        FeatureCategory::Meteorological
    } else {
        FeatureCategory::Disaster
    }
}

/// Dense row-major feature matrix with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            columns: self.columns.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

pub fn feature_row(je: &JoinedEvent) -> Vec<f64> {
    let m = &je.meteo;
    let mut row = Vec::with_capacity(FEATURE_COUNT);
    row.extend([
        f64::from(je.event.duration_days),
        m.avg_wind_kmh,
        m.max_wind_kmh,
        m.precipitation_mm,
        m.avg_temp_c,
        m.max_temp_c,
        m.min_temp_c,
    ]);
    row.extend(je.season().one_hot());
    row.extend(je.resilience.values());
    row
}

/// Encodes joined events as a 29-column feature matrix.
pub fn vectorize(joined: &[JoinedEvent]) -> Result<FeatureMatrix> {
    if joined.is_empty() {
        return Err(Error::EmptyInput("vectorize needs at least one event"));
    }
    Ok(FeatureMatrix {
        columns: FEATURE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows: joined.iter().map(feature_row).collect(),
    })
}

const JOINED_KEYS: [&str; 4] = ["event_id", "province", "start_date", "loss_eur"];

/// Header of the canonical joined CSV: key columns followed by the feature
/// columns.
pub fn joined_header() -> Vec<&'static str> {
    JOINED_KEYS.iter().chain(FEATURE_COLUMNS.iter()).copied().collect()
}

/// Writes joined events in the canonical joined-table format.
pub fn write_joined_csv<W: Write>(writer: W, joined: &[JoinedEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let ctx = "joined csv";
    w.write_record(joined_header())
        .map_err(|e| Error::csv(ctx, e))?;
    for je in joined {
        let mut rec = vec![
            je.event.event_id.clone(),
            je.event.province.clone(),
            je.event.start_date.format("%Y-%m-%d").to_string(),
            je.event.loss_eur.to_string(),
        ];
        rec.extend(feature_row(je).iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io("joined csv", e))?;
    Ok(())
}

/// Reads the canonical joined CSV back into joined events.
pub fn read_joined_csv<R: Read>(reader: R, context: &str) -> Result<Vec<JoinedEvent>> {
    let mut rdr = csv_reader(reader);
    let header = read_header(&mut rdr, context)?;
    let idx: Vec<usize> = joined_header()
        .iter()
        .map(|c| header.index(c))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut row = 0;
    while read_record(&mut rdr, &mut record, context)? {
        row += 1;
        let bad = |what: &str| Error::InvalidParameter(format!("{context}: row {row}: bad {what}"));
        let get = |k: usize| record.get(idx[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            get(k).parse::<f64>().map_err(|_| bad(joined_header()[k]))
        };
        let start_date =
            NaiveDate::parse_from_str(get(2), "%Y-%m-%d").map_err(|_| bad("start_date"))?;
        let f: Vec<f64> = (4..4 + FEATURE_COUNT).map(num).collect::<Result<_>>()?;
        let season_idx = (7..11)
            .find(|&j| f[j] == 1.0)
            .ok_or_else(|| bad("season one-hot"))?
            - 7;
        let mut res = [0.0; 18];
        res.copy_from_slice(&f[11..]);
        out.push(JoinedEvent {
            event: EventRecord {
                event_id: get(0).to_string(),
                province: get(1).to_string(),
                start_date,
                duration_days: f[0] as u32,
                loss_eur: num(3)?,
                affected_systems: res[13] as u32,
            },
            meteo: MeteoFeatures {
                avg_wind_kmh: f[1],
                max_wind_kmh: f[2],
                precipitation_mm: f[3],
                avg_temp_c: f[4],
                max_temp_c: f[5],
                min_temp_c: f[6],
                season: Some(Season::ALL[season_idx]),
            },
            resilience: ResilienceFeatures::from_values(res),
        });
    }
    Ok(out)
}

/// Header of the events table written by the synthetic generator and [`decompose`] callers.
pub const EVENTS_HEADER: [&str; 6] = [
    "event_id",
    "province",
    "start_date",
    "duration_days",
    "loss_eur",
    "affected_systems",
];

/// Header of the meteo table written by the synthetic generator and [`decompose`] callers.
pub const METEO_HEADER: [&str; 8] = [
    "event_id",
    "avg_wind_kmh",
    "max_wind_kmh",
    "precipitation_mm",
    "avg_temp_c",
    "max_temp_c",
    "min_temp_c",
    "season",
];

/// Header of the resilience table: key columns then every indicator except
/// `affected_systems`.
pub fn resilience_header() -> Vec<&'static str> {
    ["province", "year"]
        .into_iter()
        .chain(
            RESILIENCE_FIELDS
                .iter()
                .map(|(n, _, _)| *n)
                .filter(|n| *n != "affected_systems"),
        )
        .collect()
}

pub fn write_events_csv<W: Write>(writer: W, events: &[EventRecord]) -> Result<()> {
    let ctx = "events csv";
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVENTS_HEADER).map_err(|e| Error::csv(ctx, e))?;
    for ev in events {
        w.write_record([
            ev.event_id.clone(),
            ev.province.clone(),
            ev.start_date.format("%Y-%m-%d").to_string(),
            ev.duration_days.to_string(),
            ev.loss_eur.to_string(),
            ev.affected_systems.to_string(),
        ])
        .map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}

pub fn write_meteo_csv<'a, W: Write>(
    writer: W,
    rows: impl IntoIterator<Item = (&'a str, &'a MeteoFeatures)>,
) -> Result<()> {
    let ctx = "meteo csv";
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METEO_HEADER).map_err(|e| Error::csv(ctx, e))?;
    for (id, m) in rows {
        w.write_record([
            id.to_string(),
            m.avg_wind_kmh.to_string(),
            m.max_wind_kmh.to_string(),
            m.precipitation_mm.to_string(),
            m.avg_temp_c.to_string(),
            m.max_temp_c.to_string(),
            m.min_temp_c.to_string(),
            m.season.map(|s| s.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}

pub fn write_resilience_csv<'a, W: Write>(
    writer: W,
    rows: impl IntoIterator<Item = (&'a ResilienceKey, &'a ResilienceFeatures)>,
) -> Result<()> {
    let ctx = "resilience csv";
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(resilience_header())
        .map_err(|e| Error::csv(ctx, e))?;
    for ((province, year), r) in rows {
        let mut rec = vec![province.clone(), year.to_string()];
        rec.extend(
            r.values()
                .iter()
                .zip(RESILIENCE_FIELDS.iter())
                .filter(|(_, (n, _, _))| *n != "affected_systems")
                .map(|(v, _)| v.to_string()),
        );
        w.write_record(&rec).map_err(|e| Error::csv(ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}

/// Splits joined events back into the three source tables.
pub fn decompose(
    joined: &[JoinedEvent],
) -> (
    Vec<EventRecord>,
    BTreeMap<String, MeteoFeatures>,
    BTreeMap<ResilienceKey, ResilienceFeatures>,
) {
    let mut events = Vec::with_capacity(joined.len());
    let mut meteo = BTreeMap::new();
    let mut resilience = BTreeMap::new();
    for je in joined {
        events.push(je.event.clone());
        meteo.insert(je.event.event_id.clone(), je.meteo.clone());
        let mut r = je.resilience.clone();
        r.affected_systems = 0.0;
        resilience.insert((je.event.province.clone(), je.event.year()), r);
    }
    (events, meteo, resilience)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EVENTS: &str = "\
event_id,province,start_date,duration_days,loss_eur,affected_systems
e1,Asturias,2015-01-10,2,1200.5,4
e2,Bizkaia,2016-07-03,1,80000,12
e3,Asturias,2015-03-02,3,45076,7
";

    fn meteo_csv(rows: &[&str]) -> String {
        let mut s = METEO_HEADER.join(",");
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s
    }

    fn resilience_row(province: &str, year: i32) -> String {
        format!(
            "{province},{year},44.1,1000000,21.5,13.2,65.3,87.6,12.4,48.2,14.1,25000,30000,32000,24000,1200,10600,210000,350"
        )
    }

    fn resilience_csv(rows: &[String]) -> String {
        let mut s = resilience_header().join(",");
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s
    }

    fn events() -> Ingested<Vec<EventRecord>> {
        read_events(
            EVENTS.as_bytes(),
            "events",
            &EventColumns::default(),
            &StudyWindow::default(),
        )
        .unwrap()
    }

    #[test]
    fn three_valid_events() {
        let got = events();
        assert_eq!(got.records.len(), 3);
        assert!(got.rejects.is_empty());
        assert_eq!(got.records[2].loss_eur, 45076.0);
        assert_eq!(got.records[0].start_date, NaiveDate::from_ymd_opt(2015, 1, 10).unwrap());
    }

    #[test]
    fn unparseable_loss_is_rejected() {
        let csv = "event_id,province,start_date,duration_days,loss_eur,affected_systems\n\
                   e1,Asturias,2015-01-10,2,n/a,4\n";
        let got = read_events(
            csv.as_bytes(),
            "events",
            &EventColumns::default(),
            &StudyWindow::default(),
        )
        .unwrap();
        assert!(got.records.is_empty());
        assert_eq!(got.rejects.len(), 1);
        assert_eq!(got.rejects[0].row, 1);
        assert_eq!(got.rejects[0].reason.to_string(), "unparseable loss");
    }

    #[test]
    fn event_rejects_cover_invariants() {
        let csv = "event_id,province,start_date,duration_days,loss_eur,affected_systems\n\
                   a,P,2015-01-10,0,10,1\n\
                   b,P,2012-12-31,1,10,1\n\
                   c,P,10/01/2015,1,10,1\n\
                   d,P,2015-01-10,1,-5,1\n\
                   e,P,2015-01-10,1,5\n\
                   e,P,2015-01-10,1,5,1\n\
                   e,P,2015-01-10,1,5,1\n";
        let got = read_events(
            csv.as_bytes(),
            "events",
            &EventColumns::default(),
            &StudyWindow::default(),
        )
        .unwrap();
        let reasons: Vec<String> = got.rejects.iter().map(|r| r.reason.to_string()).collect();
        assert_eq!(
            reasons,
            [
                "duration below one day",
                "start date outside study window",
                "unparseable start date",
                "negative loss",
                "missing affected systems",
                "duplicate event id",
            ]
        );
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.records.len() + got.rejects.len(), got.data_rows);
    }

    #[test]
    fn mapped_columns_and_missing_column() {
        let csv = "id,prov,date,days,euros,systems\ne1,P,2015-01-10,1,5,1\n";
        let cols = EventColumns {
            event_id: "id".into(),
            province: "prov".into(),
            start_date: "date".into(),
            duration_days: "days".into(),
            loss_eur: "euros".into(),
            affected_systems: "systems".into(),
        };
        let got = read_events(csv.as_bytes(), "ev", &cols, &StudyWindow::default()).unwrap();
        assert_eq!(got.records.len(), 1);

        let err = read_events(
            csv.as_bytes(),
            "ev",
            &EventColumns::default(),
            &StudyWindow::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingColumn { ref column, .. } if column == "event_id"));
    }

    #[test]
    fn missing_file_names_path() {
        let err = ingest_events(
            Path::new("/nonexistent/events.csv"),
            &EventColumns::default(),
            &StudyWindow::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("/nonexistent/events.csv"));
    }

    #[test]
    fn meteo_rejects_and_season_parsing() {
        let csv = meteo_csv(&[
            "e1,50,40,1,10,15,5,winter",
            "e2,30,60,0,10,15,5,SUMMER",
            "e3,30,60,0,10,8,5,spring",
            "e4,30,60,-1,10,15,5,spring",
            "e5,30,60,1,10,15,5,monsoon",
        ]);
        let got = read_meteo(csv.as_bytes(), "meteo", &MeteoColumns::default()).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.records["e2"].season, Some(Season::Summer));
        let reasons: Vec<String> = got.rejects.iter().map(|r| r.reason.to_string()).collect();
        assert_eq!(
            reasons,
            [
                "wind ordering",
                "temperature ordering",
                "negative precipitation",
                "unparseable season"
            ]
        );
    }

    #[test]
    fn meteo_without_season_column_derives_from_date() {
        let csv = "event_id,avg_wind_kmh,max_wind_kmh,precipitation_mm,avg_temp_c,max_temp_c,min_temp_c\n\
                   e1,30,60,0,10,15,5\n";
        let meteo = read_meteo(csv.as_bytes(), "meteo", &MeteoColumns::default()).unwrap();
        assert_eq!(meteo.records["e1"].season, None);
        let ev = events();
        let res = read_resilience(
            resilience_csv(&[resilience_row("Asturias", 2015)]).as_bytes(),
            "res",
            &ResilienceColumns::default(),
        )
        .unwrap();
        let (joined, _) = clean_and_join(&ev.records[..1], &meteo.records, &res.records);
        assert_eq!(joined[0].season(), Season::Winter);
        assert_eq!(joined[0].meteo.season, Some(Season::Winter));
    }

    #[test]
    fn resilience_duplicate_key_is_error() {
        let csv = resilience_csv(&[resilience_row("P", 2015), resilience_row("P", 2015)]);
        let err = read_resilience(csv.as_bytes(), "res", &ResilienceColumns::default()).unwrap_err();
        assert!(err.to_string().contains("duplicate resilience key"));
    }

    #[test]
    fn resilience_percent_checks() {
        let ok = resilience_row("P", 2015);
        let over = ok.replacen(",21.5,", ",140,", 1);
        let bad_share = ok.replacen(",87.6,12.4,", ",80,12.4,", 1);
        let csv = resilience_csv(&[ok, over.replacen("P,", "Q,", 1), bad_share.replacen("P,", "R,", 1)]);
        let got = read_resilience(csv.as_bytes(), "res", &ResilienceColumns::default()).unwrap();
        assert_eq!(got.records.len(), 1);
        let r = &got.records[&("P".to_string(), 2015)];
        assert_eq!((r.pop_spanish, r.pop_foreign), (87.6, 12.4));
        assert!(got.rejects[0].reason.to_string().starts_with("percent out of range"));
        assert_eq!(got.rejects[1].reason, RejectReason::PopulationShares);
    }

    #[test]
    fn join_drops_by_reason_and_sorts() {
        let ev = events();
        let meteo = read_meteo(
            meteo_csv(&["e1,30,60,0,10,15,5,winter", "e2,30,60,0,10,15,5,summer"]).as_bytes(),
            "meteo",
            &MeteoColumns::default(),
        )
        .unwrap();
        let res = read_resilience(
            resilience_csv(&[resilience_row("Asturias", 2015)]).as_bytes(),
            "res",
            &ResilienceColumns::default(),
        )
        .unwrap();
        let (joined, report) = clean_and_join(&ev.records, &meteo.records, &res.records);
        assert_eq!(joined.len(), 1);
        assert_eq!(joined[0].event.event_id, "e1");
        assert_eq!(joined[0].resilience.affected_systems, 4.0);
        assert_eq!(report.no_meteo, 1);
        assert_eq!(report.no_resilience, 1);
        assert_eq!(report.joined, 1);
        assert_eq!(report.events_in, 3);
    }

    #[test]
    fn feature_categories() {
        assert_eq!(feature_category("max_wind_kmh"), FeatureCategory::Meteorological);
        assert_eq!(feature_category("duration_days"), FeatureCategory::Meteorological);
        assert_eq!(feature_category("season_summer"), FeatureCategory::Meteorological);
        assert_eq!(feature_category("pop_foreign"), FeatureCategory::Social);
        assert_eq!(feature_category("affected_systems"), FeatureCategory::Infrastructure);
        assert_eq!(feature_category("coast_km"), FeatureCategory::Environmental);
        assert_eq!(feature_category("avg_salary"), FeatureCategory::Economic);
        assert!(!FEATURE_COLUMNS.contains(&"province"));
    }

    #[test]
    fn summer_one_hot() {
        assert_eq!(Season::Summer.one_hot(), [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(Season::from_month(12), Season::Winter);
        assert_eq!(Season::from_month(9), Season::Autumn);
    }

    #[test]
    fn vectorize_empty_is_error() {
        assert!(matches!(vectorize(&[]), Err(Error::EmptyInput(_))));
    }
}
