//! Stage-per-command pipeline driven by one TOML run configuration.
//!
//! Every stage reads its inputs from files, writes its artifacts to the
//! output directory and returns the written paths. JSON artifacts carry a
//! `provenance` block with schema version, config hash, seed and timestamp.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cart::{Criterion, MaxFeatures};
use crate::data_model::{
    clean_and_join, ingest_events, ingest_meteo, ingest_resilience, read_joined_csv,
    write_joined_csv, DropReport, EventColumns, MeteoColumns, Reject, ResilienceColumns,
    StudyWindow,
};
use crate::error::{Error, Result};
use crate::forest::{
    default_feature_importance, fit_forest, with_threads, FeatureImportanceReport, Forest,
    ForestHyperparams,
};
use crate::labeling::{
    apply_split, assign_loss_levels, filter_massive_losses, split, LabeledDataset,
    LevelBoundaryReport, LossLevel, SplitIndices,
};
use crate::metrics::{evaluate_labels, EvaluationReport, Metric};
use crate::stats::{equal_frequency_quartiles, QuartileSummary};
use crate::synth::{generate, SynthConfig, SynthPaths};
use crate::tuning::{
    default_params, grid_search, reference_tuned_params, ParamGrid, SealedTest, SearchConfig,
    TuningResult,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const JOINED_CSV: &str = "joined.csv";
pub const DROP_REPORT_JSON: &str = "drop_report.json";
pub const LABELED_CSV: &str = "labeled.csv";
pub const LEVEL_REPORT_JSON: &str = "level_report.json";
pub const SPLIT_JSON: &str = "split.json";
pub const MODEL_JSON: &str = "model.json";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const TUNING_CSV: &str = "tuning.csv";
pub const TUNING_JSON: &str = "tuning.json";
pub const IMPORTANCE_CSV: &str = "importance.csv";
pub const IMPORTANCE_JSON: &str = "importance.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const SYNTH_JSON: &str = "synth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub events: PathBuf,
    pub meteo: PathBuf,
    pub resilience: PathBuf,
}

impl Default for InputPaths {
    fn default() -> Self {
        InputPaths {
            events: "events.csv".into(),
            meteo: "meteo.csv".into(),
            resilience: "resilience.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnConfig {
    pub events: EventColumns,
    pub meteo: MeteoColumns,
    pub resilience: ResilienceColumns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// Fewest top-quartile events accepted for labeling.
    pub min_events: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig { min_events: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub stratified: bool,
    /// Falls back to the run seed.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.25,
            stratified: true,
            seed: None,
        }
    }
}

/// Where `train` takes its hyperparameters from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    /// Library defaults (100 trees, sqrt features, unlimited depth).
    #[default]
    Default,
    /// The fixed tuned preset (1135 trees, split 5, leaf 4, depth 100).
    ReferenceTuned,
    /// Best combination of a previous `tune` run.
    Search,
    /// `model.params` as given.
    Custom,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub source: ModelSource,
    pub params: Option<ForestHyperparams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub grid: ParamGrid,
    pub folds: usize,
    pub metric: Metric,
}

/// 32 combinations, including the tuned preset.
pub fn default_grid() -> ParamGrid {
    ParamGrid {
        n_estimators: vec![100, 1135],
        min_samples_split: vec![2, 5],
        min_samples_leaf: vec![1, 4],
        max_features: vec![MaxFeatures::Sqrt, MaxFeatures::All],
        max_depth: vec![Some(8), Some(100)],
        criterion: vec![Criterion::Gini],
    }
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            grid: default_grid(),
            folds: 5,
            metric: Metric::MacroF1,
        }
    }
}

/// Generator settings; the seed is the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_events: usize,
    pub provinces: usize,
    pub first_year: i32,
    pub last_year: i32,
    pub signal_strength: f64,
    pub social_correlation: f64,
    pub temp_wind_correlation: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            n_events: d.n_events,
            provinces: d.provinces,
            first_year: d.first_year,
            last_year: d.last_year,
            signal_strength: d.signal_strength,
            social_correlation: d.social_correlation,
            temp_wind_correlation: d.temp_wind_correlation,
        }
    }
}

impl SynthSection {
    pub fn with_seed(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_events: self.n_events,
            provinces: self.provinces,
            first_year: self.first_year,
            last_year: self.last_year,
            signal_strength: self.signal_strength,
            social_correlation: self.social_correlation,
            temp_wind_correlation: self.temp_wind_correlation,
        }
    }
}

/// Everything a run needs. Relative paths in a config file are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 uses every core. Does not affect any output.
    pub threads: usize,
    pub output_dir: PathBuf,
    pub inputs: InputPaths,
    pub columns: ColumnConfig,
    pub window: StudyWindow,
    pub labeling: LabelingConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub tuning: TuningConfig,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            threads: 0,
            output_dir: "out".into(),
            inputs: InputPaths::default(),
            columns: ColumnConfig::default(),
            window: StudyWindow::default(),
            labeling: LabelingConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            tuning: TuningConfig::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, context: &Path) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config {
            path: context.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml_str(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.inputs.events,
            &mut cfg.inputs.meteo,
            &mut cfg.inputs.resilience,
            &mut cfg.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad(format!("split.test_fraction must be in (0, 1), got {}", self.split.test_fraction));
        }
        if self.tuning.folds < 2 {
            return bad("tuning.folds must be at least 2".into());
        }
        if self.labeling.min_events < 3 {
            return bad("labeling.min_events must be at least 3".into());
        }
        if self.model.source == ModelSource::Custom && self.model.params.is_none() {
            return bad("model.source = \"custom\" needs model.params".into());
        }
        if let Some(p) = &self.model.params {
            p.validate()?;
        }
        self.synth.with_seed(self.seed).validate()
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    /// SHA-256 of the config with the thread count and output directory
    /// blanked, since neither changes any result.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.threads = 0;
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// RFC 3339 UTC; `SOURCE_DATE_EPOCH` wins over the clock when set.
    pub generated_at: String,
}

impl Provenance {
    pub fn new(stage: Stage, cfg: &RunConfig) -> Provenance {
        let now = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|s| s.trim().parse::<i64>().ok())
            .and_then(|t| DateTime::<Utc>::from_timestamp(t, 0))
            .unwrap_or_else(Utc::now);
        Provenance {
            schema_version: SCHEMA_VERSION,
            stage: stage.name().into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            generated_at: now.to_rfc3339_opts(SecondsFormat::Secs, true),
        }
    }
}

/// A JSON artifact: provenance plus the stage's own fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Label,
    Train,
    Tune,
    Evaluate,
    Importance,
    Report,
    Synth,
}

impl Stage {
    /// Stages run by [`run_pipeline`], in order.
    pub const PIPELINE: [Stage; 7] = [
        Stage::Ingest,
        Stage::Label,
        Stage::Tune,
        Stage::Train,
        Stage::Evaluate,
        Stage::Importance,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Label => "label",
            Stage::Train => "train",
            Stage::Tune => "tune",
            Stage::Evaluate => "evaluate",
            Stage::Importance => "importance",
            Stage::Report => "report",
            Stage::Synth => "synth",
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_artifact<T: Serialize>(path: &Path, stage: Stage, cfg: &RunConfig, body: T) -> Result<()> {
    write_json(
        path,
        &Artifact {
            provenance: Provenance::new(stage, cfg),
            body,
        },
    )
}

/// Opens a stage input, reporting which stage produces it when it is
/// missing.
fn open_artifact(path: &Path, producer: Stage) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: producer.name(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn read_artifact<T: DeserializeOwned>(path: &Path, producer: Stage) -> Result<Artifact<T>> {
    serde_json::from_reader(open_artifact(path, producer)?)
        .map_err(|e| Error::json(path.display().to_string(), e))
}

/// SHA-256 of an artifact with `provenance.generated_at` removed from JSON
/// files, so reruns of a stage compare equal.
pub fn artifact_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if !is_json {
        return Ok(hex(&Sha256::digest(&bytes)));
    }
    let mut v: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
    if let Some(p) = v.get_mut("provenance").and_then(|p| p.as_object_mut()) {
        p.remove("generated_at");
    }
    let canon = serde_json::to_vec(&v).map_err(|e| Error::json(path.display().to_string(), e))?;
    Ok(hex(&Sha256::digest(&canon)))
}

#[derive(Debug, Clone, Serialize)]
pub struct TableSummary {
    pub path: PathBuf,
    pub data_rows: usize,
    pub records: usize,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub events: TableSummary,
    pub meteo: TableSummary,
    pub resilience: TableSummary,
    pub join: DropReport,
}

/// Reads and validates the three source tables, joins them and writes
/// `joined.csv` and `drop_report.json`.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let inp = &cfg.inputs;
    let cols = &cfg.columns;
    let events = ingest_events(&inp.events, &cols.events, &cfg.window)?;
    let meteo = ingest_meteo(&inp.meteo, &cols.meteo)?;
    let resilience = ingest_resilience(&inp.resilience, &cols.resilience)?;
    let (joined, join) = clean_and_join(&events.records, &meteo.records, &resilience.records);

    let joined_path = cfg.out(JOINED_CSV);
    let mut w = create(&joined_path)?;
    write_joined_csv(&mut w, &joined)?;
    w.flush().map_err(|e| Error::io(&joined_path, e))?;

    let report = IngestReport {
        events: TableSummary {
            path: inp.events.clone(),
            data_rows: events.data_rows,
            records: events.records.len(),
            rejects: events.rejects,
        },
        meteo: TableSummary {
            path: inp.meteo.clone(),
            data_rows: meteo.data_rows,
            records: meteo.records.len(),
            rejects: meteo.rejects,
        },
        resilience: TableSummary {
            path: inp.resilience.clone(),
            data_rows: resilience.data_rows,
            records: resilience.records.len(),
            rejects: resilience.rejects,
        },
        join,
    };
    let report_path = cfg.out(DROP_REPORT_JSON);
    write_artifact(&report_path, Stage::Ingest, cfg, report)?;
    Ok(vec![joined_path, report_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub events_in: usize,
    pub retained: usize,
    pub quartiles: QuartileSummary,
    #[serde(flatten)]
    pub boundaries: LevelBoundaryReport,
    pub train_counts: [usize; 3],
    pub test_counts: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    #[serde(flatten)]
    pub split: SplitIndices,
}

/// Keeps the top loss quartile, assigns loss levels, and fixes the
/// train/test split: `labeled.csv`, `level_report.json`, `split.json`.
pub fn cmd_label(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let joined_path = cfg.out(JOINED_CSV);
    let joined = read_joined_csv(
        open_artifact(&joined_path, Stage::Ingest)?,
        &joined_path.display().to_string(),
    )?;
    let losses: Vec<f64> = joined.iter().map(|e| e.loss_eur()).collect();
    let (quartiles, _) = equal_frequency_quartiles(&losses)?;
    let q4 = filter_massive_losses(&joined)?;
    if q4.len() < cfg.labeling.min_events {
        return Err(Error::TooFewValues {
            needed: cfg.labeling.min_events,
            got: q4.len(),
        });
    }
    let labeled = assign_loss_levels(&q4)?;
    let sp = split(&labeled, cfg.split.test_fraction, cfg.split_seed(), cfg.split.stratified)?;

    let labeled_path = cfg.out(LABELED_CSV);
    let mut w = create(&labeled_path)?;
    labeled.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(&labeled_path, e))?;

    let report_path = cfg.out(LEVEL_REPORT_JSON);
    write_artifact(
        &report_path,
        Stage::Label,
        cfg,
        LevelReport {
            events_in: joined.len(),
            retained: labeled.len(),
            quartiles,
            boundaries: labeled.boundaries.clone(),
            train_counts: sp.train.class_counts(),
            test_counts: sp.test.class_counts(),
        },
    )?;
    let split_path = cfg.out(SPLIT_JSON);
    write_artifact(&split_path, Stage::Label, cfg, SplitFile { split: sp.indices() })?;
    Ok(vec![labeled_path, report_path, split_path])
}

fn load_labeled(cfg: &RunConfig) -> Result<(LabeledDataset, SplitIndices)> {
    let report: Artifact<LevelReport> = read_artifact(&cfg.out(LEVEL_REPORT_JSON), Stage::Label)?;
    let path = cfg.out(LABELED_CSV);
    let ds = LabeledDataset::read_csv(
        open_artifact(&path, Stage::Label)?,
        &path.display().to_string(),
        report.body.boundaries,
    )?;
    let split: Artifact<SplitFile> = read_artifact(&cfg.out(SPLIT_JSON), Stage::Label)?;
    Ok((ds, split.body.split))
}

/// Hyperparameters `train` uses under the configured [`ModelSource`].
pub fn resolve_params(cfg: &RunConfig) -> Result<ForestHyperparams> {
    Ok(match cfg.model.source {
        ModelSource::Default => ForestHyperparams {
            seed: cfg.seed,
            ..default_params()
        },
        ModelSource::ReferenceTuned => ForestHyperparams {
            seed: cfg.seed,
            ..reference_tuned_params()
        },
        ModelSource::Custom => cfg
            .model
            .params
            .ok_or_else(|| Error::InvalidParameter("model.params missing".into()))?,
        ModelSource::Search => {
            let t: Artifact<TuningResult> = read_artifact(&cfg.out(TUNING_JSON), Stage::Tune)?;
            t.body.best_params
        }
    })
}

#[derive(Serialize)]
struct ModelFileOut {
    source: ModelSource,
    model: serde_json::Value,
}

#[derive(Deserialize)]
struct ModelFileIn {
    model: serde_json::Value,
}

/// Fits a forest on the training partition: `model.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (ds, idx) = load_labeled(cfg)?;
    let sp = apply_split(&ds, &idx)?;
    let params = resolve_params(cfg)?;
    let forest = fit_forest(&sp.train.features.rows, &sp.train.label_indices(), 3, &params)?
        .with_classes(LossLevel::class_names())
        .with_columns(ds.features.columns.clone());
    let model: serde_json::Value =
        serde_json::from_str(&forest.to_json()?).map_err(|e| Error::json("forest", e))?;
    let path = cfg.out(MODEL_JSON);
    write_artifact(
        &path,
        Stage::Train,
        cfg,
        ModelFileOut {
            source: cfg.model.source,
            model,
        },
    )?;
    Ok(vec![path])
}

/// Loads the forest written by `train`.
pub fn load_model(cfg: &RunConfig) -> Result<Forest> {
    let a: Artifact<ModelFileIn> = read_artifact(&cfg.out(MODEL_JSON), Stage::Train)?;
    Forest::from_json(&a.body.model.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub params: ForestHyperparams,
    pub n_test: usize,
    pub report: EvaluationReport,
}

/// Scores the trained forest on the test partition: `evaluation.json`,
/// `confusion.csv`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let forest = load_model(cfg)?;
    let (ds, idx) = load_labeled(cfg)?;
    let sp = apply_split(&ds, &idx)?;
    let pred = forest.predict(&sp.test.features.rows)?;
    let report = evaluate_labels(&sp.test.label_indices(), &pred, &LossLevel::class_names())?;

    let cm_path = cfg.out(CONFUSION_CSV);
    let mut w = create(&cm_path)?;
    report.confusion.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(&cm_path, e))?;

    let path = cfg.out(EVALUATION_JSON);
    write_artifact(
        &path,
        Stage::Evaluate,
        cfg,
        EvaluationFile {
            params: forest.hyperparams,
            n_test: sp.test.len(),
            report,
        },
    )?;
    Ok(vec![path, cm_path])
}

/// Grid search with k-fold CV on the training partition: `tuning.csv`,
/// `tuning.json`.
pub fn cmd_tune(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (ds, idx) = load_labeled(cfg)?;
    let sp = apply_split(&ds, &idx)?;
    let search = SearchConfig {
        folds: cfg.tuning.folds,
        metric: cfg.tuning.metric,
        seed: cfg.seed,
    };
    let result = grid_search(&sp.train, SealedTest::new(sp.test), &cfg.tuning.grid, &search)?;

    let csv_path = cfg.out(TUNING_CSV);
    let mut w = create(&csv_path)?;
    result.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let path = cfg.out(TUNING_JSON);
    write_artifact(&path, Stage::Tune, cfg, result)?;
    Ok(vec![csv_path, path])
}

/// Mean-decrease-in-impurity importances of the trained forest:
/// `importance.csv`, `importance.json`.
pub fn cmd_importance(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let forest = load_model(cfg)?;
    let report = default_feature_importance(&forest);
    let csv_path = cfg.out(IMPORTANCE_CSV);
    let mut w = create(&csv_path)?;
    report.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let path = cfg.out(IMPORTANCE_JSON);
    write_artifact(&path, Stage::Importance, cfg, report)?;
    Ok(vec![csv_path, path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSummary {
    pub grid_size: usize,
    pub folds: usize,
    pub metric: Metric,
    pub best_params: ForestHyperparams,
    pub best_cv_score: f64,
    pub best_test_score: f64,
    pub default_test_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub events_in: usize,
    pub events_joined: usize,
    pub top_quartile: usize,
    pub levels: LevelBoundaryReport,
    pub evaluation: EvaluationFile,
    pub importance: FeatureImportanceReport,
    pub tuning: Option<TuningSummary>,
    /// Digest of every artifact read, timestamps excluded.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct JoinCounts {
    join: DropReport,
}

/// Consolidates the stage artifacts into `report.json` and `report.txt`.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let drop: Artifact<JoinCounts> = read_artifact(&cfg.out(DROP_REPORT_JSON), Stage::Ingest)?;
    let levels: Artifact<LevelReport> = read_artifact(&cfg.out(LEVEL_REPORT_JSON), Stage::Label)?;
    let eval: Artifact<EvaluationFile> = read_artifact(&cfg.out(EVALUATION_JSON), Stage::Evaluate)?;
    let imp: Artifact<FeatureImportanceReport> =
        read_artifact(&cfg.out(IMPORTANCE_JSON), Stage::Importance)?;
    let tuning_path = cfg.out(TUNING_JSON);
    let tuning = if tuning_path.exists() {
        let t: Artifact<TuningResult> = read_artifact(&tuning_path, Stage::Tune)?;
        let t = t.body;
        Some(TuningSummary {
            grid_size: t.grid_size,
            folds: t.folds,
            metric: t.metric,
            best_params: t.best_params,
            best_cv_score: t.best().mean_score,
            best_test_score: t.test_report.score(t.metric),
            default_test_score: t.default_reference.test_report.score(t.metric),
        })
    } else {
        None
    };

    let mut artifacts = BTreeMap::new();
    for name in [
        JOINED_CSV,
        DROP_REPORT_JSON,
        LABELED_CSV,
        LEVEL_REPORT_JSON,
        SPLIT_JSON,
        MODEL_JSON,
        EVALUATION_JSON,
        CONFUSION_CSV,
        TUNING_CSV,
        TUNING_JSON,
        IMPORTANCE_CSV,
        IMPORTANCE_JSON,
    ] {
        let p = cfg.out(name);
        if p.exists() {
            artifacts.insert(name.to_string(), artifact_digest(&p)?);
        }
    }

    let report = RunReport {
        events_in: drop.body.join.events_in,
        events_joined: drop.body.join.joined,
        top_quartile: levels.body.retained,
        levels: levels.body.boundaries,
        evaluation: eval.body,
        importance: imp.body,
        tuning,
        artifacts,
    };
    let txt_path = cfg.out(REPORT_TXT);
    let mut w = create(&txt_path)?;
    w.write_all(render_text(&report, cfg).as_bytes())
        .map_err(|e| Error::io(&txt_path, e))?;
    w.flush().map_err(|e| Error::io(&txt_path, e))?;
    let path = cfg.out(REPORT_JSON);
    write_artifact(&path, Stage::Report, cfg, report)?;
    Ok(vec![path, txt_path])
}

/// Plain-text summary. Carries the config hash and seed but no timestamp.
pub fn render_text(r: &RunReport, cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config {}  seed {}", cfg.hash(), cfg.seed);
    let _ = writeln!(
        s,
        "events {}  joined {}  top quartile {}",
        r.events_in, r.events_joined, r.top_quartile
    );
    let _ = writeln!(s, "\n{:<10} {:>16} {:>16} {:>16} {:>6}", "level", "min", "max", "mean", "n");
    for l in &r.levels.levels {
        let _ = writeln!(
            s,
            "{:<10} {:>16.2} {:>16.2} {:>16.2} {:>6}",
            l.level.to_string(),
            l.min,
            l.max,
            l.mean,
            l.count
        );
    }
    let e = &r.evaluation.report;
    let _ = writeln!(
        s,
        "\nmodel: {} trees, split {}, leaf {}, features {}, depth {}, {}",
        r.evaluation.params.n_estimators,
        r.evaluation.params.tree.min_samples_split,
        r.evaluation.params.tree.min_samples_leaf,
        r.evaluation.params.tree.max_features,
        r.evaluation.params.tree.max_depth.map_or("none".into(), |d| d.to_string()),
        r.evaluation.params.tree.criterion
    );
    let _ = writeln!(s, "\n{:<14} {:>9} {:>9} {:>9} {:>8}", "", "precision", "recall", "f1", "support");
    for c in &e.per_class {
        let _ = writeln!(
            s,
            "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            c.class, c.precision, c.recall, c.f1, c.support
        );
    }
    for (name, a) in [("macro avg", &e.macro_avg), ("weighted avg", &e.weighted_avg)] {
        let _ = writeln!(
            s,
            "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            name,
            a.precision,
            a.recall,
            a.f1,
            e.confusion.total()
        );
    }
    let _ = writeln!(s, "{:<14} {:>29.4}", "accuracy", e.accuracy);
    let _ = writeln!(s, "\nconfusion (rows true, columns predicted)");
    for (name, row) in e.confusion.classes.iter().zip(&e.confusion.counts) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        let _ = writeln!(s, "{:<10}{}", name, cells.join(""));
    }
    if let Some(t) = &r.tuning {
        let _ = writeln!(
            s,
            "\ngrid search: {} combinations, {} folds, {}",
            t.grid_size,
            t.folds,
            t.metric.name()
        );
        let _ = writeln!(
            s,
            "best cv {:.4}  best test {:.4}  default test {:.4}",
            t.best_cv_score, t.best_test_score, t.default_test_score
        );
    }
    let _ = writeln!(s, "\ntop features");
    for (i, f) in r.importance.features.iter().take(10).enumerate() {
        let _ = writeln!(s, "{:>3} {:<26} {:<15} {:.4}", i + 1, f.name, format!("{:?}", f.category), f.importance);
    }
    s
}

#[derive(Serialize)]
struct SynthManifest {
    config: SynthConfig,
    files: [&'static str; 3],
}

/// Writes a synthetic `events.csv`, `meteo.csv`, `resilience.csv` and
/// `synth.json` to the output directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let sc = cfg.synth.with_seed(cfg.seed);
    let paths = SynthPaths::in_dir(&cfg.output_dir);
    generate(&sc)?.write(&paths)?;
    let manifest = cfg.out(SYNTH_JSON);
    write_artifact(
        &manifest,
        Stage::Synth,
        cfg,
        SynthManifest {
            config: sc,
            files: ["events.csv", "meteo.csv", "resilience.csv"],
        },
    )?;
    Ok(vec![paths.events, paths.meteo, paths.resilience, manifest])
}

/// Runs one stage on a pool of `cfg.threads` workers.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    with_threads(cfg.threads, || match stage {
        Stage::Ingest => cmd_ingest(cfg),
        Stage::Label => cmd_label(cfg),
        Stage::Train => cmd_train(cfg),
        Stage::Tune => cmd_tune(cfg),
        Stage::Evaluate => cmd_evaluate(cfg),
        Stage::Importance => cmd_importance(cfg),
        Stage::Report => cmd_report(cfg),
        Stage::Synth => cmd_synth(cfg),
    })
}

/// Runs [`Stage::PIPELINE`] in order.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for stage in Stage::PIPELINE {
        out.extend(run_stage(stage, cfg)?);
    }
    Ok(out)
}
