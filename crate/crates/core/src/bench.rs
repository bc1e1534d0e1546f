//! Attention cost accounting and scoring throughput measurement.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{plan_windows, AttentionStats};
use crate::error::{Result, TklError};
use crate::model::{Encoded, Model};
use crate::text::EmbeddedSequence;

/// Query·key score entries of full versus windowed attention over `L`
/// tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    pub length: usize,
    pub window: usize,
    pub overlap: usize,
    pub windows: usize,
    pub full_entries: u64,
    pub windowed_entries: u64,
}

/// Counts from window geometry alone: `L²` for full attention and
/// `Σ_k size_k²` over the `ceil(L / w)` windows, where window `k` spans
/// `[max(0, k·w − o), min(L, (k+1)·w + o))`.
pub fn attention_cost(length: usize, window: usize, overlap: usize) -> Result<AttentionCost> {
    if window == 0 || overlap >= window || length == 0 {
        return Err(TklError::Argument(format!(
            "invalid geometry L={length}, w={window}, o={overlap}"
        )));
    }
    let windows = length.div_ceil(window);
    let windowed_entries = (0..windows)
        .map(|k| {
            let start = (k * window).saturating_sub(overlap);
            let end = ((k + 1) * window + overlap).min(length);
            ((end - start) as u64).pow(2)
        })
        .sum();
    Ok(AttentionCost {
        length,
        window,
        overlap,
        windows,
        full_entries: (length as u64).pow(2),
        windowed_entries,
    })
}

pub fn write_cost_csv(rows: &[AttentionCost], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| TklError::Argument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| TklError::io("csv", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repetitions: usize,
    pub batch_size: usize,
    /// Pads every document of a batch to this length; otherwise to the
    /// longest document of the batch.
    pub pad_to: Option<usize>,
    /// Documents are truncated to this many tokens.
    pub max_doc_len: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 3,
            repetitions: 10,
            batch_size: 8,
            pad_to: None,
            max_doc_len: 2000,
        }
    }
}

/// One benchmark configuration's counts and timings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub max_doc_len: usize,
    pub batch_size: usize,
    pub documents: usize,
    pub padded_tokens: usize,
    /// `Σ padded_len²` over documents.
    pub full_entries: u64,
    /// Counted by the encoder.
    pub windowed_entries: u64,
    /// Derived from window plans and true lengths.
    pub predicted_entries: u64,
    pub windows_computed: usize,
    pub windows_skipped: usize,
    pub predicted_skipped: usize,
    pub skipped_fraction: f64,
    /// Attention maps and per-row intermediates of windowed attention.
    pub activation_floats: u64,
    pub activation_floats_full: u64,
    pub median_ms: f64,
    pub docs_per_ms: f64,
}

fn activation_floats(model: &Model, entries: u64, rows: u64) -> u64 {
    let cfg = &model.config;
    let per_row = (4 * cfg.embedding_dim + cfg.ffn_dim) as u64;
    cfg.layers as u64 * (cfg.heads as u64 * entries + rows * per_row)
}

/// Scores every document against `query` with packed windowed attention,
/// `warmup` untimed passes and `repetitions` timed passes.
pub fn run_benchmark(model: &Model, query: &[u32], docs: &[Vec<u32>], cfg: &BenchConfig) -> Result<BenchRow> {
    if docs.is_empty() || query.is_empty() {
        return Err(TklError::Empty("benchmark needs a query and documents".into()));
    }
    if cfg.batch_size == 0 || cfg.repetitions == 0 {
        return Err(TklError::Config("batch_size and repetitions must be positive".into()));
    }
    let (w, o) = (model.config.window, model.config.overlap);
    let truncated: Vec<&[u32]> = docs
        .iter()
        .map(|d| &d[..d.len().min(cfg.max_doc_len)])
        .filter(|d| !d.is_empty())
        .collect();
    if truncated.is_empty() {
        return Err(TklError::Empty("every document is empty".into()));
    }
    let encoded_query = model.encode_query(query);
    let encoder = model.encoder();

    let mut batches = Vec::new();
    let (mut full_entries, mut predicted_entries, mut predicted_skipped, mut padded_tokens) = (0u64, 0u64, 0, 0);
    for chunk in truncated.chunks(cfg.batch_size) {
        let longest = chunk.iter().map(|d| d.len()).max().expect("nonempty chunk");
        let len = cfg.pad_to.unwrap_or(longest).max(longest);
        let seqs: Vec<EmbeddedSequence> = chunk
            .iter()
            .map(|d| EmbeddedSequence::padded(d, len, &model.params.embeddings))
            .collect();
        let plans = (0..chunk.len())
            .map(|_| plan_windows(len, w, o))
            .collect::<Result<Vec<_>>>()?;
        for (d, plan) in chunk.iter().zip(&plans) {
            full_entries += (len as u64).pow(2);
            padded_tokens += len;
            let needed = d.len().div_ceil(w);
            predicted_skipped += plan.windows.len() - needed;
            predicted_entries += plan.windows[..needed].iter().map(|w| (w.size() as u64).pow(2)).sum::<u64>();
        }
        batches.push((chunk, seqs, plans));
    }

    let mut stats = AttentionStats::default();
    let mut pass = |collect: bool| -> Result<f64> {
        let started = Instant::now();
        let mut checksum = 0.0;
        for (chunk, seqs, plans) in &batches {
            let packed = encoder.pack_and_contextualize(seqs, plans)?;
            if collect {
                stats.score_entries += packed.stats.score_entries;
                stats.windows_computed += packed.stats.windows_computed;
                stats.windows_skipped += packed.stats.windows_skipped;
                stats.packed_rows += packed.stats.packed_rows;
            }
            for (d, out) in chunk.iter().zip(packed.outputs) {
                let doc = Encoded {
                    ids: d.to_vec(),
                    mask: vec![true; d.len()],
                    vectors: out.slice_move(ndarray::s![..d.len(), ..]),
                };
                checksum += model.score_encoded(&encoded_query, &doc).score;
            }
        }
        std::hint::black_box(checksum);
        Ok(started.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..cfg.warmup {
        pass(false)?;
    }
    pass(true)?;
    let mut times = (0..cfg.repetitions).map(|_| pass(false)).collect::<Result<Vec<f64>>>()?;
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median_ms = if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    };
    let total_windows = stats.windows_computed + stats.windows_skipped;
    Ok(BenchRow {
        max_doc_len: cfg.max_doc_len,
        batch_size: cfg.batch_size,
        documents: truncated.len(),
        padded_tokens,
        full_entries,
        windowed_entries: stats.score_entries,
        predicted_entries,
        windows_computed: stats.windows_computed,
        windows_skipped: stats.windows_skipped,
        predicted_skipped,
        skipped_fraction: stats.windows_skipped as f64 / total_windows.max(1) as f64,
        activation_floats: activation_floats(model, stats.score_entries, stats.packed_rows as u64),
        activation_floats_full: activation_floats(model, full_entries, padded_tokens as u64),
        median_ms,
        docs_per_ms: truncated.len() as f64 / median_ms,
    })
}

pub fn write_bench_csv(rows: &[BenchRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| TklError::Argument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| TklError::io("csv", e))
}
