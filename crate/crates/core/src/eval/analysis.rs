use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use super::metrics::{ndcg_at, MetricConfig};
use super::rerank::{rerank, RegionRecord};
use super::trec::{Qrels, RunFile};
use crate::error::{Result, TklError};
use crate::model::Model;
use crate::text::{DocumentStore, QueryStore};

/// Bin lower bounds; the last bin is open-ended. Must start at 0 and be
/// strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bins {
    lower: Vec<usize>,
}

impl Bins {
    pub fn new(lower: Vec<usize>) -> Result<Self> {
        if lower.first() != Some(&0) || lower.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TklError::Argument(format!(
                "bin bounds must start at 0 and increase strictly: {lower:?}"
            )));
        }
        Ok(Bins { lower })
    }

    /// `[0, step, 2·step, …]` up to and including `max`.
    pub fn linear(step: usize, max: usize) -> Result<Self> {
        if step == 0 {
            return Err(TklError::Argument("bin step must be positive".into()));
        }
        Bins::new((0..=max).step_by(step).collect())
    }

    /// `0` followed by `count` roughly log-spaced bounds from 1 to `max`.
    pub fn log_spaced(max: usize, count: usize) -> Result<Self> {
        let mut lower = vec![0];
        for i in 0..count {
            let v = (max.max(2) as f64).powf(i as f64 / (count.max(2) - 1) as f64).round() as usize;
            if v > *lower.last().expect("nonempty") {
                lower.push(v);
            }
        }
        Bins::new(lower)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn index(&self, value: usize) -> usize {
        self.lower.partition_point(|&b| b <= value) - 1
    }

    pub fn range(&self, i: usize) -> (usize, Option<usize>) {
        (self.lower[i], self.lower.get(i + 1).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthBin {
    pub bin_start: usize,
    pub bin_end: Option<usize>,
    pub judged: usize,
    pub relevant: usize,
    /// Relevant documents retrieved within the cutoff.
    pub retrieved: usize,
    pub p_rel: Option<f64>,
    pub p_ret: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBiasReport {
    pub top: usize,
    pub bins: Vec<LengthBin>,
}

impl LengthBiasReport {
    /// `p_rel - p_ret` per bin, `None` where undefined.
    pub fn deficits(&self) -> Vec<Option<f64>> {
        self.bins
            .iter()
            .map(|b| Some(b.p_rel? - b.p_ret?))
            .collect()
    }
}

/// Relevance versus top-`top` retrieval by raw document length. Only
/// judged pairs of queries present in the run are counted.
pub fn length_bias(
    run: &RunFile,
    qrels: &Qrels,
    lengths: &HashMap<String, usize>,
    top: usize,
    bins: &Bins,
    cfg: &MetricConfig,
) -> Result<LengthBiasReport> {
    let mut judged = vec![0usize; bins.len()];
    let mut relevant = vec![0usize; bins.len()];
    let mut retrieved = vec![0usize; bins.len()];
    let mut missing = Vec::new();
    for (qid, entries) in run.queries() {
        let Some(judgements) = qrels.query(qid) else { continue };
        let top_docs: std::collections::HashSet<&str> = entries.iter().take(top).map(|e| e.docid.as_str()).collect();
        for (docid, &grade) in judgements {
            let Some(&len) = lengths.get(docid) else {
                missing.push(docid.clone());
                continue;
            };
            let b = bins.index(len);
            judged[b] += 1;
            if grade >= cfg.relevance_threshold {
                relevant[b] += 1;
                if top_docs.contains(docid.as_str()) {
                    retrieved[b] += 1;
                }
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(TklError::UnknownId(format!("no length for {}", missing.join(", "))));
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let rows = (0..bins.len())
        .map(|i| {
            let (bin_start, bin_end) = bins.range(i);
            LengthBin {
                bin_start,
                bin_end,
                judged: judged[i],
                relevant: relevant[i],
                retrieved: retrieved[i],
                p_rel: ratio(relevant[i], judged[i]),
                p_ret: ratio(retrieved[i], relevant[i]),
            }
        })
        .collect();
    Ok(LengthBiasReport { top, bins: rows })
}

#[derive(Serialize)]
struct LengthBiasRow<'a> {
    run: &'a str,
    bin_start: usize,
    bin_end: Option<usize>,
    judged: usize,
    relevant: usize,
    retrieved: usize,
    p_rel: Option<f64>,
    p_ret: Option<f64>,
}

/// CSV with header `run,bin_start,bin_end,judged,relevant,retrieved,p_rel,p_ret`.
pub fn write_length_bias_csv(reports: &[(&str, &LengthBiasReport)], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (run, report) in reports {
        for bin in &report.bins {
            let row = LengthBiasRow {
                run,
                bin_start: bin.bin_start,
                bin_end: bin.bin_end,
                judged: bin.judged,
                relevant: bin.relevant,
                retrieved: bin.retrieved,
                p_rel: bin.p_rel,
                p_ret: bin.p_ret,
            };
            w.serialize(row).map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| TklError::io("csv", e))
}

fn csv_error(e: csv::Error) -> TklError {
    TklError::Argument(format!("csv: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankPositions {
    /// 1-based region rank.
    pub rank: usize,
    pub counts: Vec<usize>,
    pub total: usize,
    pub beyond_cutoff: usize,
    pub fraction_beyond: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPositionReport {
    pub bins: Bins,
    pub cutoff: usize,
    pub ranks: Vec<RankPositions>,
}

/// Histograms of region start tokens for the first `ranks` regions of each
/// record, and the fraction starting after `cutoff`.
pub fn region_positions<'a>(
    records: impl IntoIterator<Item = &'a RegionRecord>,
    ranks: usize,
    bins: &Bins,
    cutoff: usize,
) -> RegionPositionReport {
    let mut out: Vec<RankPositions> = (0..ranks)
        .map(|r| RankPositions {
            rank: r + 1,
            counts: vec![0; bins.len()],
            total: 0,
            beyond_cutoff: 0,
            fraction_beyond: 0.0,
        })
        .collect();
    for rec in records {
        for (slot, region) in out.iter_mut().zip(&rec.regions) {
            slot.counts[bins.index(region.start_token)] += 1;
            slot.total += 1;
            if region.start_token > cutoff {
                slot.beyond_cutoff += 1;
            }
        }
    }
    for slot in &mut out {
        if slot.total > 0 {
            slot.fraction_beyond = slot.beyond_cutoff as f64 / slot.total as f64;
        }
    }
    RegionPositionReport {
        bins: bins.clone(),
        cutoff,
        ranks: out,
    }
}

#[derive(Serialize)]
struct PositionRow {
    rank: usize,
    bin_start: usize,
    bin_end: Option<usize>,
    count: usize,
    fraction_beyond_cutoff: f64,
}

/// CSV with header `rank,bin_start,bin_end,count,fraction_beyond_cutoff`.
pub fn write_region_positions_csv(report: &RegionPositionReport, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for rank in &report.ranks {
        for (i, &count) in rank.counts.iter().enumerate() {
            let (bin_start, bin_end) = report.bins.range(i);
            w.serialize(PositionRow {
                rank: rank.rank,
                bin_start,
                bin_end,
                count,
                fraction_beyond_cutoff: rank.fraction_beyond,
            })
            .map_err(csv_error)?;
        }
    }
    w.flush().map_err(|e| TklError::io("csv", e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityRow {
    pub max_len: usize,
    pub ndcg_10: f64,
}

/// nDCG@10 of one model re-ranking `run` under each truncation length.
pub fn quality_vs_maxlen(
    model: &Model,
    run: &RunFile,
    queries: &QueryStore,
    docs: &DocumentStore,
    qrels: &Qrels,
    lengths: &[usize],
    cfg: &MetricConfig,
) -> Result<Vec<QualityRow>> {
    lengths
        .iter()
        .map(|&max_len| {
            let (reranked, _) = rerank(model, run, queries, docs, max_len)?;
            Ok(QualityRow {
                max_len,
                ndcg_10: ndcg_at(&reranked, qrels, 10, cfg).mean,
            })
        })
        .collect()
}

/// CSV with header `max_len,ndcg_10`.
pub fn write_quality_csv(rows: &[QualityRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| TklError::io("csv", e))
}
