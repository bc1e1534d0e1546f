//! Ranking metrics, TREC file formats, re-ranking and length analyses.

mod analysis;
mod metrics;
mod rerank;
mod trec;

pub use analysis::{
    length_bias, quality_vs_maxlen, region_positions, write_length_bias_csv, write_quality_csv,
    write_region_positions_csv, Bins, LengthBiasReport, LengthBin, QualityRow, RankPositions, RegionPositionReport,
};
pub use metrics::{map_at, mrr_at, ndcg_at, summarize, Gain, MetricConfig, MetricResult, MetricSummary};
pub use rerank::{read_regions, rerank, rerank_parallel, rerank_with, write_regions, RegionRecord, RegionSpan};
pub use trec::{Qrels, RunEntry, RunFile};
