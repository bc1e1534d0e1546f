//! Tokenization, vocabulary, word-vector ingestion, IDF, and the TSV
//! stores for corpus documents, queries, and training triples.

mod embeddings;
pub(crate) mod store;
mod vocab;

pub use embeddings::{
    compute_idf, load_embeddings, read_embeddings, write_embeddings, EmbeddingTable, SalienceTable,
};
pub use store::{
    ingest_corpus, ingest_queries, ingest_triples, read_text_tsv, read_triples, DocumentStore, QueryStore,
    Strictness, TextRecord, TextStore, Triple,
};
pub use vocab::{split_words, tokenize, Vocabulary, OOV_ID, PAD_ID};

use ndarray::Array2;

/// Token ids of one query or document with their looked-up vectors.
/// Padding is on the right only.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence {
    pub ids: Vec<u32>,
    pub embeddings: Array2<f64>,
    pub mask: Vec<bool>,
    pub true_len: usize,
}

impl EmbeddedSequence {
    /// Looks up `ids` in `table`. Positions holding [`PAD_ID`] are masked out.
    pub fn new(ids: &[u32], table: &Array2<f64>) -> Self {
        let mut embeddings = Array2::zeros((ids.len(), table.ncols()));
        for (row, &id) in ids.iter().enumerate() {
            embeddings.row_mut(row).assign(&table.row(id as usize));
        }
        let mask: Vec<bool> = ids.iter().map(|&id| id != PAD_ID).collect();
        let true_len = mask.iter().filter(|&&m| m).count();
        EmbeddedSequence {
            ids: ids.to_vec(),
            embeddings,
            mask,
            true_len,
        }
    }

    /// `ids` right-padded with [`PAD_ID`] to `len`.
    pub fn padded(ids: &[u32], len: usize, table: &Array2<f64>) -> Self {
        let mut padded = ids.to_vec();
        padded.resize(len.max(ids.len()), PAD_ID);
        Self::new(&padded, table)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
