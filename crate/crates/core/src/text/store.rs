use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::vocab::{tokenize, Vocabulary};
use crate::error::{Result, TklError};

/// What to do with a malformed line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Abort on the first malformed line.
    #[default]
    Strict,
    /// Log, record the line number, and continue.
    Lenient,
}

/// A tokenized text record keyed by its string id.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    /// Whitespace-separated word count of the raw text, before any truncation.
    pub raw_len: usize,
}

impl TextRecord {
    /// Tokens cut at `max_len` (documents are truncated before windowing).
    pub fn truncated(&self, max_len: usize) -> &[u32] {
        &self.tokens[..self.tokens.len().min(max_len)]
    }
}

/// Immutable id → record store used for both corpus documents and queries.
#[derive(Debug, Clone, Default)]
pub struct TextStore {
    records: Vec<TextRecord>,
    index: HashMap<String, usize>,
    /// 1-based line numbers skipped under [`Strictness::Lenient`].
    pub skipped_lines: Vec<usize>,
}

pub type DocumentStore = TextStore;
pub type QueryStore = TextStore;

impl TextStore {
    pub fn from_records(records: impl IntoIterator<Item = TextRecord>) -> Result<Self> {
        let mut store = TextStore::default();
        for r in records {
            store.push(r)?;
        }
        Ok(store)
    }

    fn push(&mut self, record: TextRecord) -> Result<()> {
        if self.index.contains_key(&record.id) {
            return Err(TklError::DuplicateId(record.id));
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&TextRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TextRecord> {
        self.records.iter()
    }

    /// Median raw length; the mean of the two middle values for even counts.
    pub fn median_length(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let mut lens: Vec<usize> = self.records.iter().map(|r| r.raw_len).collect();
        lens.sort_unstable();
        let mid = lens.len() / 2;
        Some(if lens.len() % 2 == 1 {
            lens[mid] as f64
        } else {
            (lens[mid - 1] + lens[mid]) as f64 / 2.0
        })
    }

    /// Raw whitespace lengths keyed by id.
    pub fn raw_lengths(&self) -> HashMap<String, usize> {
        self.records.iter().map(|r| (r.id.clone(), r.raw_len)).collect()
    }
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| TklError::io(path, e))
}

/// Reads an `id\ttext` TSV (corpus or queries).
pub fn read_text_tsv(
    reader: impl BufRead,
    source: &str,
    vocab: &Vocabulary,
    strictness: Strictness,
) -> Result<TextStore> {
    let mut store = TextStore::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| TklError::io(source, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let parsed = match line.split_once('\t') {
            Some((id, text)) if !id.trim().is_empty() => Ok((id.trim(), text)),
            _ => Err(TklError::format(source, lineno, "expected `id<TAB>text`")),
        };
        match parsed {
            Ok((id, text)) => store.push(TextRecord {
                id: id.to_string(),
                tokens: tokenize(text, vocab),
                raw_len: text.split_whitespace().count(),
            })?,
            Err(e) if strictness == Strictness::Lenient => {
                log::warn!("skipping malformed line: {e}");
                store.skipped_lines.push(lineno);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(store)
}

pub fn ingest_corpus(path: impl AsRef<Path>, vocab: &Vocabulary, strictness: Strictness) -> Result<DocumentStore> {
    let path = path.as_ref();
    read_text_tsv(open(path)?, &path.display().to_string(), vocab, strictness)
}

pub fn ingest_queries(path: impl AsRef<Path>, vocab: &Vocabulary, strictness: Strictness) -> Result<QueryStore> {
    ingest_corpus(path, vocab, strictness)
}

/// One pairwise training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub qid: String,
    pub positive: String,
    pub negative: String,
}

/// Reads `qid\tposdocid\tnegdocid` lines and resolves every id.
pub fn read_triples(
    reader: impl BufRead,
    source: &str,
    queries: &QueryStore,
    corpus: &DocumentStore,
    strictness: Strictness,
) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| TklError::io(source, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            let err = TklError::format(source, lineno, "expected `qid<TAB>posdocid<TAB>negdocid`");
            if strictness == Strictness::Lenient {
                log::warn!("skipping malformed line: {err}");
                continue;
            }
            return Err(err);
        }
        if !queries.contains(fields[0]) {
            return Err(TklError::UnknownId(format!("query `{}` (line {lineno})", fields[0])));
        }
        for doc in &fields[1..] {
            if !corpus.contains(doc) {
                return Err(TklError::UnknownId(format!("document `{doc}` (line {lineno})")));
            }
        }
        triples.push(Triple {
            qid: fields[0].to_string(),
            positive: fields[1].to_string(),
            negative: fields[2].to_string(),
        });
    }
    Ok(triples)
}

pub fn ingest_triples(
    path: impl AsRef<Path>,
    queries: &QueryStore,
    corpus: &DocumentStore,
    strictness: Strictness,
) -> Result<Vec<Triple>> {
    let path = path.as_ref();
    read_triples(open(path)?, &path.display().to_string(), queries, corpus, strictness)
}
