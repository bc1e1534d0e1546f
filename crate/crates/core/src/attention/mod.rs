//! Local self-attention: queries are contextualized in one window, documents
//! in overlapping fixed-size windows whose kept cores are stitched back
//! together. Windows whose kept range is pure padding are skipped, and the
//! remaining windows of a whole batch are packed into one row matrix so the
//! Transformer runs once per batch.

mod transformer;
mod window;

pub use transformer::{masked_softmax, EncoderLayer, LayerNorm, Linear, Segment, StackCache, TransformerStack};
pub use window::{plan_windows, Window, WindowPlan};

use ndarray::{Array1, Array2, ArrayView2, Zip};

use crate::error::{Result, TklError};
use crate::text::EmbeddedSequence;

/// Instrumented work counters for one encoder call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionStats {
    /// Query·key score entries of one attention map (per head, per layer).
    pub score_entries: u64,
    /// Windows run through the Transformer.
    pub windows_computed: usize,
    /// Windows dropped because they keep only padding.
    pub windows_skipped: usize,
    /// Rows in the packed matrix.
    pub packed_rows: usize,
}

/// One sequence to encode, with the windows to run over it.
pub struct EncodeItem<'a> {
    pub embeddings: ArrayView2<'a, f64>,
    pub mask: &'a [bool],
    pub windows: Vec<Window>,
}

/// Everything the reverse pass needs.
pub struct EncodeCache {
    stack: StackCache,
    /// Packed row → (item, token).
    sources: Vec<(usize, usize)>,
    /// Per item, per token: packed row that supplies the kept vector.
    keep_rows: Vec<Vec<Option<usize>>>,
    embeddings: Vec<Array2<f64>>,
    contextual: Vec<Array2<f64>>,
    masks: Vec<Vec<bool>>,
    gate: Array1<f64>,
}

/// A Transformer stack plus the highway gate that mixes its output with the
/// raw embeddings: `g ⊙ emb + (1 − g) ⊙ TF(emb)`, `g = sigmoid(gate)`.
#[derive(Clone, Copy)]
pub struct LocalEncoder<'a> {
    pub stack: &'a TransformerStack,
    pub gate: &'a Array1<f64>,
    pub positional: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fixed sinusoidal encoding for window-relative position `pos`.
fn positional_encoding(pos: usize, dim: usize) -> impl Iterator<Item = f64> {
    (0..dim).map(move |j| {
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let angle = pos as f64 / rate;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl<'a> LocalEncoder<'a> {
    pub fn new(stack: &'a TransformerStack, gate: &'a Array1<f64>) -> Self {
        LocalEncoder {
            stack,
            gate,
            positional: false,
        }
    }

    /// Encodes every item in one packed pass.
    ///
    /// Output rows not kept by any listed window are zero, as are rows at
    /// padding positions.
    pub fn encode(&self, items: &[EncodeItem<'_>]) -> (Vec<Array2<f64>>, EncodeCache, AttentionStats) {
        let dim = self.gate.len();
        let mut stats = AttentionStats::default();
        let mut segments = Vec::new();
        let mut sources = Vec::new();
        let mut keep_rows: Vec<Vec<Option<usize>>> = Vec::with_capacity(items.len());
        for (item_idx, item) in items.iter().enumerate() {
            let mut keep = vec![None; item.embeddings.nrows()];
            for w in &item.windows {
                let offset = sources.len();
                segments.push(Segment {
                    offset,
                    len: w.size(),
                });
                stats.score_entries += (w.size() as u64).pow(2);
                for t in w.start..w.end {
                    sources.push((item_idx, t));
                }
                for (t, slot) in keep.iter_mut().enumerate().take(w.keep_end).skip(w.keep_start) {
                    *slot = Some(offset + t - w.start);
                }
            }
            stats.windows_computed += item.windows.len();
            keep_rows.push(keep);
        }
        stats.packed_rows = sources.len();

        let mut packed = Array2::zeros((sources.len(), dim));
        let mut packed_mask = Vec::with_capacity(sources.len());
        for (row, &(item_idx, t)) in sources.iter().enumerate() {
            packed.row_mut(row).assign(&items[item_idx].embeddings.row(t));
            packed_mask.push(items[item_idx].mask[t]);
        }
        if self.positional {
            for seg in &segments {
                for pos in 0..seg.len {
                    let mut row = packed.row_mut(seg.offset + pos);
                    for (v, pe) in row.iter_mut().zip(positional_encoding(pos, dim)) {
                        *v += pe;
                    }
                }
            }
        }

        let (tf_out, stack_cache) = self.stack.forward(packed, &segments, &packed_mask);
        let gate = self.gate.mapv(sigmoid);

        let mut outputs = Vec::with_capacity(items.len());
        let mut contextual = Vec::with_capacity(items.len());
        for (item, keep) in items.iter().zip(&keep_rows) {
            let len = item.embeddings.nrows();
            let mut tf = Array2::zeros((len, dim));
            for (t, row) in keep.iter().enumerate() {
                if let Some(r) = row {
                    tf.row_mut(t).assign(&tf_out.row(*r));
                }
            }
            let mut out = Array2::zeros((len, dim));
            for t in 0..len {
                if !item.mask[t] {
                    continue;
                }
                Zip::from(out.row_mut(t))
                    .and(item.embeddings.row(t))
                    .and(tf.row(t))
                    .and(&gate)
                    .for_each(|o, &e, &f, &g| *o = g * e + (1.0 - g) * f);
            }
            outputs.push(out);
            contextual.push(tf);
        }

        let cache = EncodeCache {
            stack: stack_cache,
            sources,
            keep_rows,
            embeddings: items.iter().map(|i| i.embeddings.to_owned()).collect(),
            contextual,
            masks: items.iter().map(|i| i.mask.to_vec()).collect(),
            gate,
        };
        (outputs, cache, stats)
    }

    /// Reverse pass of [`encode`](Self::encode). Accumulates into the stack
    /// and gate gradients and returns `dL/d embeddings` per item.
    pub fn backward(
        &self,
        cache: &EncodeCache,
        d_outputs: &[Array2<f64>],
        grad_stack: &mut TransformerStack,
        grad_gate: &mut Array1<f64>,
    ) -> Vec<Array2<f64>> {
        let dim = self.gate.len();
        let mut d_embeddings: Vec<Array2<f64>> = cache.embeddings.iter().map(|e| Array2::zeros(e.raw_dim())).collect();
        let mut d_packed = Array2::zeros((cache.sources.len(), dim));

        for (item, d_out) in d_outputs.iter().enumerate() {
            let emb = &cache.embeddings[item];
            let tf = &cache.contextual[item];
            for t in 0..d_out.nrows() {
                if !cache.masks[item][t] {
                    continue;
                }
                let d_row = d_out.row(t);
                Zip::from(d_embeddings[item].row_mut(t))
                    .and(&d_row)
                    .and(&cache.gate)
                    .for_each(|de, &d, &g| *de += d * g);
                Zip::from(&mut *grad_gate)
                    .and(&d_row)
                    .and(emb.row(t))
                    .and(tf.row(t))
                    .and(&cache.gate)
                    .for_each(|gg, &d, &e, &f, &g| *gg += d * (e - f) * g * (1.0 - g));
                if let Some(r) = cache.keep_rows[item][t] {
                    Zip::from(d_packed.row_mut(r))
                        .and(&d_row)
                        .and(&cache.gate)
                        .for_each(|dp, &d, &g| *dp += d * (1.0 - g));
                }
            }
        }

        let d_in = self.stack.backward(&cache.stack, d_packed, grad_stack);
        for (row, &(item, t)) in cache.sources.iter().enumerate() {
            let mut target = d_embeddings[item].row_mut(t);
            target += &d_in.row(row);
        }
        d_embeddings
    }

    /// Full attention over the whole query in a single window.
    pub fn contextualize_query(&self, seq: &EmbeddedSequence) -> Result<Array2<f64>> {
        if seq.is_empty() {
            return Err(TklError::Argument("query must have at least one token".into()));
        }
        let item = EncodeItem {
            embeddings: seq.embeddings.view(),
            mask: &seq.mask,
            windows: vec![Window::whole(seq.len())],
        };
        let (mut out, _, _) = self.encode(&[item]);
        Ok(out.pop().expect("one item"))
    }

    /// Windowed attention over every window in `plan` (no skipping).
    pub fn contextualize_document(&self, seq: &EmbeddedSequence, plan: &WindowPlan) -> Result<Array2<f64>> {
        Ok(self.contextualize_document_with_stats(seq, plan)?.0)
    }

    pub fn contextualize_document_with_stats(
        &self,
        seq: &EmbeddedSequence,
        plan: &WindowPlan,
    ) -> Result<(Array2<f64>, AttentionStats)> {
        if plan.length != seq.len() {
            return Err(TklError::Argument(format!(
                "window plan covers {} tokens but the sequence has {}",
                plan.length,
                seq.len()
            )));
        }
        let item = EncodeItem {
            embeddings: seq.embeddings.view(),
            mask: &seq.mask,
            windows: plan.windows.clone(),
        };
        let (mut out, _, stats) = self.encode(&[item]);
        Ok((out.pop().expect("one item"), stats))
    }

    /// Drops padding-only windows from every document and runs the rest of
    /// the batch as one packed matrix.
    pub fn pack_and_contextualize(&self, batch: &[EmbeddedSequence], plans: &[WindowPlan]) -> Result<PackedOutput> {
        if batch.len() != plans.len() {
            return Err(TklError::Argument("one window plan per sequence required".into()));
        }
        let mut items = Vec::with_capacity(batch.len());
        let mut skipped = Vec::with_capacity(batch.len());
        for (seq, plan) in batch.iter().zip(plans) {
            if plan.length != seq.len() {
                return Err(TklError::Argument(format!(
                    "window plan covers {} tokens but the sequence has {}",
                    plan.length,
                    seq.len()
                )));
            }
            let (windows, dropped) = plan.packable(&seq.mask);
            skipped.push(dropped);
            items.push(EncodeItem {
                embeddings: seq.embeddings.view(),
                mask: &seq.mask,
                windows,
            });
        }
        let (outputs, _, mut stats) = self.encode(&items);
        stats.windows_skipped = skipped.iter().sum();
        Ok(PackedOutput {
            outputs,
            skipped_per_sequence: skipped,
            stats,
        })
    }
}

/// Result of [`LocalEncoder::pack_and_contextualize`].
#[derive(Debug, Clone)]
pub struct PackedOutput {
    pub outputs: Vec<Array2<f64>>,
    pub skipped_per_sequence: Vec<usize>,
    pub stats: AttentionStats,
}
