use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{Result, TklError};

/// `V × e` word vectors, one row per vocabulary id. Row [`PAD_ID`] is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// One learned salience scalar per vocabulary id, initialised to IDF.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceTable {
    pub values: Array1<f64>,
}

/// Reads a text word-vector file (`token v1 … v_e` per line).
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Vocabulary, EmbeddingTable)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| TklError::io(path, e))?;
    read_embeddings(BufReader::new(file), &path.display().to_string())
}

pub fn read_embeddings(reader: impl BufRead, source: &str) -> Result<(Vocabulary, EmbeddingTable)> {
    let mut vocab = Vocabulary::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| TklError::io(source, e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let token = fields.next().expect("non-empty line has a first field");
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| TklError::format(source, lineno, format!("non-numeric field `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(TklError::format(source, lineno, "line has no vector"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(TklError::format(
                    source,
                    lineno,
                    format!("expected {d} values, found {}", values.len()),
                ))
            }
            Some(_) => {}
        }
        if vocab.get(token).is_some() {
            return Err(TklError::format(source, lineno, format!("duplicate token `{token}`")));
        }
        vocab.insert(token);
        rows.extend(values);
    }

    let dim = dim.unwrap_or(0);
    let mut vectors = Array2::zeros((vocab.len(), dim));
    if dim > 0 {
        let file_rows = Array2::from_shape_vec((vocab.len() - 2, dim), rows)
            .expect("row count matches vocabulary");
        vectors.slice_mut(ndarray::s![2.., ..]).assign(&file_rows);
    }
    Ok((
        vocab,
        EmbeddingTable {
            vectors,
        },
    ))
}

/// Writes non-reserved rows back out in the same text format.
pub fn write_embeddings(writer: impl Write, vocab: &Vocabulary, table: &EmbeddingTable) -> std::io::Result<()> {
    let mut out = BufWriter::new(writer);
    for (offset, token) in vocab.tokens().iter().enumerate() {
        let row = table.vectors.row(offset + 2);
        write!(out, "{token}")?;
        for v in row.iter() {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

/// Inverse document frequency `ln(N / max(df, 1))` for every vocabulary id.
/// The padding id gets 0.
pub fn compute_idf<'a, I>(corpus: I, vocab_size: usize) -> Result<SalienceTable>
where
    I: IntoIterator<Item = &'a [u32]>,
{
    let mut df = vec![0usize; vocab_size];
    let mut n_docs = 0usize;
    let mut seen = HashSet::new();
    for doc in corpus {
        n_docs += 1;
        seen.clear();
        for &id in doc {
            if id != PAD_ID && (id as usize) < vocab_size && seen.insert(id) {
                df[id as usize] += 1;
            }
        }
    }
    if n_docs == 0 {
        return Err(TklError::Empty("IDF needs at least one document".into()));
    }
    let n = n_docs as f64;
    let mut values: Array1<f64> = df.iter().map(|&d| (n / d.max(1) as f64).ln()).collect();
    if vocab_size > 0 {
        values[PAD_ID as usize] = 0.0;
    }
    Ok(SalienceTable { values })
}
