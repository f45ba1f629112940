//! Equal-frequency rank blocks and Pearson correlation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data_model::FeatureMatrix;
use crate::error::{Error, Result};

/// Summary of one rank block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

/// Result of splitting values into `k` contiguous rank blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankBlocks {
    /// Block index (0-based) of each input value, in input order.
    pub assignment: Vec<usize>,
    pub blocks: Vec<BlockSummary>,
}

/// Sizes of `k` equal-frequency blocks over `n` values. The remainder
/// `n % k` goes to the lowest blocks.
pub fn block_sizes(n: usize, k: usize) -> Vec<usize> {
    let (base, rem) = (n / k, n % k);
    (0..k).map(|b| base + usize::from(b < rem)).collect()
}

/// Sorts `values` ascending (stable, so ties keep input order) and cuts the
/// ranks into `k` contiguous blocks of near-equal size.
pub fn equal_frequency_blocks(values: &[f64], k: usize) -> Result<RankBlocks> {
    if k == 0 || values.len() < k {
        return Err(Error::TooFewValues {
            needed: k.max(1),
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite value in input".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut assignment = vec![0; values.len()];
    let mut blocks = Vec::with_capacity(k);
    let mut start = 0;
    for (b, size) in block_sizes(values.len(), k).into_iter().enumerate() {
        let ranks = &order[start..start + size];
        let mut sum = 0.0;
        for &i in ranks {
            assignment[i] = b;
            sum += values[i];
        }
        blocks.push(BlockSummary {
            min: values[ranks[0]],
            max: values[ranks[size - 1]],
            mean: sum / size as f64,
            count: size,
        });
        start += size;
    }
    Ok(RankBlocks { assignment, blocks })
}

/// Quartile thresholds and per-quartile summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileSummary {
    pub q1_max: f64,
    pub q2_max: f64,
    pub q3_max: f64,
    pub quartiles: Vec<BlockSummary>,
}

/// Equal-frequency quartiles of non-negative losses. The assignment holds
/// 0..=3 for Q1..Q4 per input value.
pub fn equal_frequency_quartiles(losses: &[f64]) -> Result<(QuartileSummary, Vec<usize>)> {
    if losses.len() < 4 {
        return Err(Error::TooFewValues {
            needed: 4,
            got: losses.len(),
        });
    }
    if losses.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("negative loss".into()));
    }
    let rb = equal_frequency_blocks(losses, 4)?;
    let summary = QuartileSummary {
        q1_max: rb.blocks[0].max,
        q2_max: rb.blocks[1].max,
        q3_max: rb.blocks[2].max,
        quartiles: rb.blocks,
    };
    Ok((summary, rb.assignment))
}

/// Symmetric Pearson correlation matrix indexed by feature name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Columns with zero variance; their off-diagonal entries are 0.
    pub zero_variance: Vec<String>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.values[i][j])
    }

    /// CSV with a leading `feature` column and one column per feature.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let ctx = "correlation csv";
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["feature".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::csv(ctx, e))?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(|e| Error::csv(ctx, e))?;
        }
        w.flush().map_err(|e| Error::io(ctx, e))
    }
}

pub fn pearson_correlation(matrix: &FeatureMatrix) -> Result<CorrelationMatrix> {
    let n = matrix.n_rows();
    if n < 2 {
        return Err(Error::TooFewValues { needed: 2, got: n });
    }
    let p = matrix.n_cols();
    let centered: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mean = matrix.rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            matrix.rows.iter().map(|r| r[j] - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let mut values = vec![vec![0.0; p]; p];
    for i in 0..p {
        values[i][i] = 1.0;
        for j in (i + 1)..p {
            let r = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    let zero_variance = norms
        .iter()
        .zip(&matrix.columns)
        .filter(|(s, _)| **s == 0.0)
        .map(|(_, c)| c.clone())
        .collect();
    Ok(CorrelationMatrix {
        names: matrix.columns.clone(),
        values,
        zero_variance,
    })
}
