//! Massive-loss filtering, three-level loss labeling and the train/test split.

use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{vectorize, FeatureMatrix, JoinedEvent};
use crate::error::{Error, Result};
use crate::stats::{equal_frequency_blocks, equal_frequency_quartiles, BlockSummary};

/// Loss level of a massive-loss event, ordered by loss magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossLevel {
    /// Moderate.
    Level1,
    /// Severe.
    Level2,
    /// Catastrophic.
    Level3,
}

impl LossLevel {
    pub const ALL: [LossLevel; 3] = [LossLevel::Level1, LossLevel::Level2, LossLevel::Level3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<LossLevel> {
        LossLevel::ALL.get(i).copied()
    }

    /// Numeric code used in CSV files (1, 2 or 3).
    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn description(self) -> &'static str {
        match self {
            LossLevel::Level1 => "moderate",
            LossLevel::Level2 => "severe",
            LossLevel::Level3 => "catastrophic",
        }
    }

    pub fn class_names() -> Vec<String> {
        LossLevel::ALL.iter().map(|l| l.to_string()).collect()
    }
}

impl fmt::Display for LossLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Level {}", self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: LossLevel,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelBoundaryReport {
    pub levels: Vec<LevelSummary>,
}

/// Feature rows with their loss level. `event_ids` and `losses` are kept
/// alongside for traceability; they are never model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub labels: Vec<LossLevel>,
    pub event_ids: Vec<String>,
    pub losses: Vec<f64>,
    pub boundaries: LevelBoundaryReport,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for l in &self.labels {
            c[l.index()] += 1;
        }
        c
    }

    /// Rows at `indices`, in that order. The boundary report is carried over
    /// unchanged.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            event_ids: indices.iter().map(|&i| self.event_ids[i].clone()).collect(),
            losses: indices.iter().map(|&i| self.losses[i]).collect(),
            boundaries: self.boundaries.clone(),
        }
    }

    /// Writes `event_id`, `loss_eur`, the feature columns and `loss_level`
    /// (1, 2 or 3).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let ctx = "labeled csv";
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["event_id".to_string(), "loss_eur".to_string()];
        header.extend(self.features.columns.iter().cloned());
        header.push("loss_level".into());
        w.write_record(&header).map_err(|e| Error::csv(ctx, e))?;
        for i in 0..self.len() {
            let mut rec = vec![self.event_ids[i].clone(), self.losses[i].to_string()];
            rec.extend(self.features.rows[i].iter().map(f64::to_string));
            rec.push(self.labels[i].code().to_string());
            w.write_record(&rec).map_err(|e| Error::csv(ctx, e))?;
        }
        w.flush().map_err(|e| Error::io(ctx, e))
    }

    /// Reads a labeled CSV written by [`LabeledDataset::write_csv`] together
    /// with its boundary report.
    pub fn read_csv<R: Read>(
        reader: R,
        context: &str,
        boundaries: LevelBoundaryReport,
    ) -> Result<LabeledDataset> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::csv(context, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let n = header.len();
        if n < 4 || header[0] != "event_id" || header[1] != "loss_eur" || header[n - 1] != "loss_level" {
            return Err(Error::InvalidParameter(format!(
                "{context}: expected event_id, loss_eur, features..., loss_level header"
            )));
        }
        let mut ds = LabeledDataset {
            features: FeatureMatrix {
                columns: header[2..n - 1].to_vec(),
                rows: Vec::new(),
            },
            labels: Vec::new(),
            event_ids: Vec::new(),
            losses: Vec::new(),
            boundaries,
        };
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(context, e))?;
            let bad = || Error::InvalidParameter(format!("{context}: bad value in row {}", row + 1));
            let nums: Vec<f64> = rec
                .iter()
                .skip(1)
                .take(n - 2)
                .map(|s| s.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let level = rec
                .get(n - 1)
                .and_then(|s| s.parse::<usize>().ok())
                .and_then(|c| c.checked_sub(1))
                .and_then(LossLevel::from_index)
                .ok_or_else(bad)?;
            ds.event_ids.push(rec.get(0).unwrap_or_default().to_string());
            ds.losses.push(nums[0]);
            ds.features.rows.push(nums[1..].to_vec());
            ds.labels.push(level);
        }
        Ok(ds)
    }
}

/// Keeps the top equal-frequency quartile (Q4) of events by loss, in input
/// order.
pub fn filter_massive_losses(joined: &[JoinedEvent]) -> Result<Vec<JoinedEvent>> {
    let losses: Vec<f64> = joined.iter().map(JoinedEvent::loss_eur).collect();
    let (_, assignment) = equal_frequency_quartiles(&losses)?;
    Ok(joined
        .iter()
        .zip(assignment)
        .filter(|(_, q)| *q == 3)
        .map(|(e, _)| e.clone())
        .collect())
}

/// Equal-frequency tertile labels for a list of losses, plus the boundary
/// report. The remainder goes to the lowest levels; ties keep input order.
pub fn loss_levels(losses: &[f64]) -> Result<(Vec<LossLevel>, LevelBoundaryReport)> {
    if losses.len() < 3 {
        return Err(Error::TooFewValues {
            needed: 3,
            got: losses.len(),
        });
    }
    let blocks = equal_frequency_blocks(losses, 3)?;
    let labels = blocks
        .assignment
        .iter()
        .map(|&b| LossLevel::ALL[b])
        .collect();
    let levels = blocks
        .blocks
        .into_iter()
        .zip(LossLevel::ALL)
        .map(|(BlockSummary { min, max, mean, count }, level)| LevelSummary {
            level,
            min,
            max,
            mean,
            count,
        })
        .collect();
    Ok((labels, LevelBoundaryReport { levels }))
}

pub fn assign_loss_levels(q4_events: &[JoinedEvent]) -> Result<LabeledDataset> {
    let losses: Vec<f64> = q4_events.iter().map(JoinedEvent::loss_eur).collect();
    let (labels, boundaries) = loss_levels(&losses)?;
    Ok(LabeledDataset {
        features: vectorize(q4_events)?,
        labels,
        event_ids: q4_events.iter().map(|e| e.event.event_id.clone()).collect(),
        losses,
        boundaries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub test_fraction: f64,
    pub stratified: bool,
}

/// Indices of the train/test partitions, as persisted between stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub seed: u64,
    pub test_fraction: f64,
    pub stratified: bool,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitDataset {
    pub fn indices(&self) -> SplitIndices {
        SplitIndices {
            seed: self.seed,
            test_fraction: self.test_fraction,
            stratified: self.stratified,
            train: self.train_indices.clone(),
            test: self.test_indices.clone(),
        }
    }
}

/// Per-class test counts for a stratified split: floors of the ideal counts,
/// with the leftover (to reach `round(n * fraction)`) assigned to the
/// classes with the largest fractional parts, lowest class first on ties.
pub fn stratified_test_counts(class_counts: &[usize], test_fraction: f64) -> Vec<usize> {
    let n: usize = class_counts.iter().sum();
    let target = (n as f64 * test_fraction).round() as usize;
    let ideal: Vec<f64> = class_counts
        .iter()
        .map(|&c| c as f64 * test_fraction)
        .collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(counts.iter().sum());
    for k in order {
        if remaining == 0 {
            break;
        }
        if counts[k] < class_counts[k] {
            counts[k] += 1;
            remaining -= 1;
        }
    }
    counts
}

/// Shuffle split into train and test partitions, deterministic given
/// `seed`. With `stratified`, each level is split separately so level
/// proportions are preserved in both partitions.
pub fn split(
    dataset: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<SplitDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let counts = dataset.class_counts();
    for level in LossLevel::ALL {
        let c = counts[level.index()];
        if c < 2 {
            return Err(Error::ClassTooSmall {
                class: level.to_string(),
                count: c,
                needed: 2,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    if stratified {
        let per_class = stratified_test_counts(&counts, test_fraction);
        for level in LossLevel::ALL {
            let mut members: Vec<usize> = (0..dataset.len())
                .filter(|&i| dataset.labels[i] == level)
                .collect();
            members.shuffle(&mut rng);
            test.extend_from_slice(&members[..per_class[level.index()]]);
        }
    } else {
        let target = (dataset.len() as f64 * test_fraction).round() as usize;
        let mut all: Vec<usize> = (0..dataset.len()).collect();
        all.shuffle(&mut rng);
        test.extend_from_slice(&all[..target]);
    }
    test.sort_unstable();
    let mut in_test = vec![false; dataset.len()];
    for &i in &test {
        in_test[i] = true;
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| !in_test[i]).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidParameter(
            "split leaves an empty partition".into(),
        ));
    }
    Ok(SplitDataset {
        train: dataset.subset(&train),
        test: dataset.subset(&test),
        train_indices: train,
        test_indices: test,
        seed,
        test_fraction,
        stratified,
    })
}

/// Rebuilds a split from persisted indices.
pub fn apply_split(dataset: &LabeledDataset, idx: &SplitIndices) -> Result<SplitDataset> {
    let n = dataset.len();
    if idx.train.iter().chain(&idx.test).any(|&i| i >= n) || idx.train.len() + idx.test.len() != n {
        return Err(Error::InvalidParameter(
            "split indices do not match the labeled dataset".into(),
        ));
    }
    Ok(SplitDataset {
        train: dataset.subset(&idx.train),
        test: dataset.subset(&idx.test),
        train_indices: idx.train.clone(),
        test_indices: idx.test.clone(),
        seed: idx.seed,
        test_fraction: idx.test_fraction,
        stratified: idx.stratified,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data_model::{EventRecord, MeteoFeatures, ResilienceFeatures, Season};
    use chrono::NaiveDate;
    use proptest::prelude::*;

    /// A complete joined event with placeholder features and the given loss.
    pub(crate) fn event_with_loss(id: usize, loss: f64) -> JoinedEvent {
        JoinedEvent {
            event: EventRecord {
                event_id: format!("ev{id:04}"),
                province: "P".into(),
                start_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
                duration_days: 1,
                loss_eur: loss,
                affected_systems: 1,
            },
            meteo: MeteoFeatures {
                avg_wind_kmh: 40.0,
                max_wind_kmh: 80.0 + id as f64,
                precipitation_mm: 3.0,
                avg_temp_c: 10.0,
                max_temp_c: 14.0,
                min_temp_c: 6.0,
                season: Some(Season::Winter),
            },
            resilience: ResilienceFeatures::from_values([
                44.0, 1e6, 20.0, 14.0, 66.0, 90.0, 10.0, 50.0, 12.0, 25e3, 30e3, 32e3, 24e3,
                1.0, 1000.0, 10e3, 2e5, 300.0,
            ]),
        }
    }

    fn events(losses: &[f64]) -> Vec<JoinedEvent> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| event_with_loss(i, l))
            .collect()
    }

    #[test]
    fn q4_of_eight() {
        let ev = events(&[3.0, 8.0, 1.0, 7.0, 2.0, 6.0, 5.0, 4.0]);
        let kept: Vec<f64> = filter_massive_losses(&ev)
            .unwrap()
            .iter()
            .map(|e| e.loss_eur())
            .collect();
        assert_eq!(kept, [8.0, 7.0]);
        assert!(filter_massive_losses(&ev[..3]).is_err());
    }

    #[test]
    fn three_losses_three_levels() {
        let ds = assign_loss_levels(&events(&[30.0, 10.0, 20.0])).unwrap();
        assert_eq!(ds.labels, [LossLevel::Level3, LossLevel::Level1, LossLevel::Level2]);
        assert_eq!(ds.features.n_cols(), 29);
        assert!(assign_loss_levels(&events(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn level_display_and_order() {
        assert!(LossLevel::Level1 < LossLevel::Level2 && LossLevel::Level2 < LossLevel::Level3);
        assert_eq!(LossLevel::Level3.to_string(), "Level 3");
        assert_eq!(LossLevel::Level2.description(), "severe");
    }

    fn balanced(n_per_class: usize) -> LabeledDataset {
        let losses: Vec<f64> = (0..3 * n_per_class).map(|i| (i * 7 % (3 * n_per_class)) as f64).collect();
        assign_loss_levels(&events(&losses)).unwrap()
    }

    #[test]
    fn split_204_is_51_153_stratified() {
        let ds = balanced(68);
        let s = split(&ds, 0.25, 42, true).unwrap();
        assert_eq!((s.test.len(), s.train.len()), (51, 153));
        assert_eq!(s.test.class_counts(), [17, 17, 17]);
        let again = split(&ds, 0.25, 42, true).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn stratified_counts_exhaustive() {
        // Every class-count triple up to 30 per class and a range of fractions:
        // total equals round(n f) and each class is within 1 of its ideal.
        for a in 2..30 {
            for b in 2..30 {
                for c in [2, 5, 17, 29] {
                    for f in [0.1, 0.2, 0.25, 0.3, 0.5] {
                        let counts = stratified_test_counts(&[a, b, c], f);
                        let n = a + b + c;
                        assert_eq!(counts.iter().sum::<usize>(), (n as f64 * f).round() as usize);
                        for (k, cls) in [a, b, c].iter().enumerate() {
                            assert!((counts[k] as f64 - *cls as f64 * f).abs() < 1.0);
                        }
                    }
                }
            }
        }
        assert_eq!(stratified_test_counts(&[68, 68, 68], 0.25), [17, 17, 17]);
    }

    #[test]
    fn split_errors() {
        let ds = assign_loss_levels(&events(&[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        // counts (2, 2, 1)
        assert!(matches!(split(&ds, 0.25, 1, true), Err(Error::ClassTooSmall { .. })));
        let ds = balanced(4);
        assert!(split(&ds, 0.0, 1, true).is_err());
        assert!(split(&ds, 1.0, 1, true).is_err());
    }

    #[test]
    fn random_split_size() {
        let ds = balanced(68);
        let s = split(&ds, 0.25, 3, false).unwrap();
        assert_eq!(s.test.len(), 51);
        assert!(!s.stratified);
    }

    #[test]
    fn csv_round_trip() {
        let ds = balanced(3);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = LabeledDataset::read_csv(buf.as_slice(), "t", ds.boundaries.clone()).unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #[test]
        fn labels_follow_loss_order(losses in proptest::collection::vec(0.0f64..1e7, 12..120)) {
            let ev = events(&losses);
            let q4 = filter_massive_losses(&ev).unwrap();
            let ds = assign_loss_levels(&q4).unwrap();
            let counts = ds.class_counts();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            for i in 0..ds.len() {
                for j in 0..ds.len() {
                    if ds.losses[i] < ds.losses[j] {
                        prop_assert!(ds.labels[i] <= ds.labels[j]);
                    }
                }
            }
            let lv = &ds.boundaries.levels;
            for l in lv {
                prop_assert!(l.min <= l.mean && l.mean <= l.max);
            }
            for w in lv.windows(2) {
                prop_assert!(w[0].max <= w[1].min);
            }
        }

        #[test]
        fn split_is_a_partition(n in 2usize..40, seed: u64, f in 0.1f64..0.6, stratified: bool) {
            let ds = balanced(n);
            let s = split(&ds, f, seed, stratified).unwrap();
            let mut all: Vec<usize> = s.train_indices.iter().chain(&s.test_indices).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
            prop_assert_eq!(s.test.len(), (ds.len() as f64 * f).round() as usize);
        }
    }
}
