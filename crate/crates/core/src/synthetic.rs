//! A planted-signal retrieval task: long random documents where relevance
//! is carried by one dense region of query terms placed anywhere in the
//! document.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TklError};
use crate::eval::{Qrels, RunFile};
use crate::text::{
    compute_idf, write_embeddings, DocumentStore, EmbeddingTable, QueryStore, SalienceTable, TextRecord, TextStore,
    Triple, Vocabulary, OOV_ID, PAD_ID,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub documents: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocabulary: usize,
    pub embedding_dim: usize,
    pub queries: usize,
    pub query_terms: usize,
    pub region_size: usize,
    /// Occurrences of each query term inside the planted region.
    pub repeats: usize,
    /// Documents per query that get the query terms scattered near the start.
    pub hard_negatives: usize,
    /// Scattered terms of hard negatives land in `[0, hard_window)`.
    pub hard_window: usize,
    /// Candidates per query in the re-ranking runs.
    pub pool_size: usize,
    pub train_queries: usize,
    pub validation_queries: usize,
    pub test_queries: usize,
    /// Negatives paired with each relevant document in the training triples.
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            documents: 2000,
            min_len: 1000,
            max_len: 2000,
            vocabulary: 1000,
            embedding_dim: 32,
            queries: 500,
            query_terms: 4,
            region_size: 30,
            repeats: 3,
            hard_negatives: 30,
            hard_window: 200,
            pool_size: 50,
            train_queries: 150,
            validation_queries: 20,
            test_queries: 300,
            negatives_per_positive: 3,
            seed: 2020,
        }
    }
}

impl SyntheticConfig {
    fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(TklError::Config(format!("synthetic: {m}")));
        if self.min_len < self.region_size || self.min_len > self.max_len {
            return fail("need region_size <= min_len <= max_len");
        }
        if self.query_terms * self.repeats > self.region_size {
            return fail("planted terms do not fit in the region");
        }
        if self.query_terms > self.vocabulary || self.queries == 0 || self.documents < self.queries {
            return fail("need at least one document per query and query_terms <= vocabulary");
        }
        if self.train_queries + self.validation_queries + self.test_queries > self.queries {
            return fail("splits exceed the number of queries");
        }
        let relevant = self.documents.div_ceil(self.queries);
        if self.pool_size < relevant + self.hard_negatives || self.pool_size > self.documents {
            return fail("pool_size must hold relevant and hard-negative documents");
        }
        if self.hard_window < self.query_terms || self.hard_window > self.min_len {
            return fail("hard_window must fit the query terms and the shortest document");
        }
        Ok(())
    }
}

/// Token span `[start, end)` of a planted region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingTable,
    /// IDF of every term.
    pub salience: SalienceTable,
    pub docs: DocumentStore,
    pub queries: QueryStore,
    /// Planted region of every relevant document.
    pub planted: HashMap<String, Planted>,
    /// All judgements (grade 1 for each relevant document).
    pub qrels: Qrels,
    pub triples: Vec<Triple>,
    pub train_run: RunFile,
    pub validation_run: RunFile,
    pub test_run: RunFile,
}

fn doc_id(i: usize) -> String {
    format!("d{i:05}")
}

fn query_id(i: usize) -> String {
    format!("q{i:04}")
}

/// Builds the task deterministically from `cfg.seed`.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticTask> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = Vocabulary::from_tokens((0..cfg.vocabulary).map(|i| format!("w{i:04}")));
    let first_term = OOV_ID + 1;
    let term_range = first_term..first_term + cfg.vocabulary as u32;

    let mut vectors: Array2<f64> =
        Array2::from_shape_simple_fn((vocab.len(), cfg.embedding_dim), || StandardNormal.sample(&mut rng));
    vectors.row_mut(PAD_ID as usize).fill(0.0);
    vectors.row_mut(OOV_ID as usize).fill(0.0);

    let all_terms: Vec<u32> = term_range.clone().collect();
    let query_terms: Vec<Vec<u32>> = (0..cfg.queries)
        .map(|_| all_terms.choose_multiple(&mut rng, cfg.query_terms).copied().collect())
        .collect();

    let mut tokens: Vec<Vec<u32>> = (0..cfg.documents)
        .map(|_| {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            (0..len).map(|_| rng.random_range(term_range.clone())).collect()
        })
        .collect();

    let mut planted = HashMap::new();
    let mut qrels = Qrels::new();
    let mut relevant: Vec<Vec<usize>> = vec![Vec::new(); cfg.queries];
    let mut protected: Vec<Option<Planted>> = vec![None; cfg.documents];
    for (d, doc) in tokens.iter_mut().enumerate() {
        let q = d % cfg.queries;
        let start = rng.random_range(0..=doc.len() - cfg.region_size);
        let mut slots: Vec<usize> = (start..start + cfg.region_size).collect();
        slots.shuffle(&mut rng);
        let mut planted_terms = query_terms[q].iter().flat_map(|&t| std::iter::repeat_n(t, cfg.repeats));
        for &slot in &slots {
            match planted_terms.next() {
                Some(t) => doc[slot] = t,
                None => {
                    // keep stray query terms out of the rest of the region
                    while query_terms[q].contains(&doc[slot]) {
                        doc[slot] = rng.random_range(term_range.clone());
                    }
                }
            }
        }
        let span = Planted {
            start,
            end: start + cfg.region_size,
        };
        planted.insert(doc_id(d), span);
        protected[d] = Some(span);
        relevant[q].push(d);
        qrels.insert(query_id(q), doc_id(d), 1)?;
    }

    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(cfg.queries);
    for (q, rel) in relevant.iter().enumerate() {
        let others: Vec<usize> = (0..cfg.documents).filter(|d| d % cfg.queries != q).collect();
        let picked: Vec<usize> = others
            .choose_multiple(&mut rng, cfg.pool_size - rel.len())
            .copied()
            .collect();
        for &d in picked.iter().take(cfg.hard_negatives) {
            let region = protected[d].expect("every document has a region");
            let free: Vec<usize> = (0..cfg.hard_window)
                .filter(|p| *p < region.start || *p >= region.end)
                .collect();
            for (&pos, &term) in free.choose_multiple(&mut rng, cfg.query_terms).zip(&query_terms[q]) {
                tokens[d][pos] = term;
            }
        }
        let mut pool = rel.clone();
        pool.extend(picked);
        pools.push(pool);
    }

    let order = {
        let mut ids: Vec<usize> = (0..cfg.queries).collect();
        ids.shuffle(&mut rng);
        ids
    };
    let (train_ids, rest) = order.split_at(cfg.train_queries);
    let (validation_ids, rest) = rest.split_at(cfg.validation_queries);
    let test_ids = &rest[..cfg.test_queries];

    let make_run = |ids: &[usize], rng: &mut ChaCha8Rng| -> Result<RunFile> {
        let mut run = RunFile::new("initial");
        for &q in ids {
            let mut pool = pools[q].clone();
            pool.shuffle(rng);
            let n = pool.len();
            run.set_query(
                query_id(q),
                pool.into_iter().enumerate().map(|(i, d)| (doc_id(d), (n - i) as f64)).collect(),
            )?;
        }
        Ok(run)
    };
    let train_run = make_run(train_ids, &mut rng)?;
    let validation_run = make_run(validation_ids, &mut rng)?;
    let test_run = make_run(test_ids, &mut rng)?;

    let mut triples = Vec::new();
    for &q in train_ids {
        let negatives: Vec<usize> = pools[q].iter().copied().filter(|d| d % cfg.queries != q).collect();
        for &pos in &relevant[q] {
            for &neg in negatives.choose_multiple(&mut rng, cfg.negatives_per_positive) {
                triples.push(Triple {
                    qid: query_id(q),
                    positive: doc_id(pos),
                    negative: doc_id(neg),
                });
            }
        }
    }
    triples.shuffle(&mut rng);

    let salience = compute_idf(tokens.iter().map(Vec::as_slice), vocab.len())?;
    let docs = TextStore::from_records(tokens.into_iter().enumerate().map(|(d, t)| TextRecord {
        id: doc_id(d),
        raw_len: t.len(),
        tokens: t,
    }))?;
    let queries = TextStore::from_records(query_terms.into_iter().enumerate().map(|(q, t)| TextRecord {
        id: query_id(q),
        raw_len: t.len(),
        tokens: t,
    }))?;

    Ok(SyntheticTask {
        config: cfg.clone(),
        vocab,
        embeddings: EmbeddingTable {
            vectors,
        },
        salience,
        docs,
        queries,
        planted,
        qrels,
        triples,
        train_run,
        validation_run,
        test_run,
    })
}

impl SyntheticTask {
    /// Relevant documents of the runs' queries, keyed by query id.
    pub fn relevant(&self) -> BTreeMap<String, Vec<String>> {
        self.qrels
            .queries()
            .map(|(q, docs)| (q.clone(), docs.keys().cloned().collect()))
            .collect()
    }

    fn text(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.vocab.token(id).unwrap_or("<oov>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Writes the task as plain files: `corpus.tsv`, `queries.tsv`,
    /// `triples.tsv`, `qrels.txt`, `train.run`, `validation.run`,
    /// `test.run`, `embeddings.txt` and `planted.json`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| TklError::io(dir, e))?;
        let create = |name: &str| -> Result<(std::path::PathBuf, std::io::BufWriter<std::fs::File>)> {
            let path = dir.join(name);
            let file = std::fs::File::create(&path).map_err(|e| TklError::io(&path, e))?;
            Ok((path, std::io::BufWriter::new(file)))
        };
        let store_file = |name: &str, store: &TextStore| -> Result<()> {
            let (path, mut w) = create(name)?;
            for r in store.iter() {
                writeln!(w, "{}\t{}", r.id, self.text(&r.tokens)).map_err(|e| TklError::io(&path, e))?;
            }
            w.flush().map_err(|e| TklError::io(&path, e))
        };
        store_file("corpus.tsv", &self.docs)?;
        store_file("queries.tsv", &self.queries)?;

        let (path, mut w) = create("triples.tsv")?;
        for t in &self.triples {
            writeln!(w, "{}\t{}\t{}", t.qid, t.positive, t.negative).map_err(|e| TklError::io(&path, e))?;
        }
        w.flush().map_err(|e| TklError::io(&path, e))?;

        let (path, mut w) = create("qrels.txt")?;
        self.qrels
            .write(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| TklError::io(&path, e))?;
        self.train_run.save(dir.join("train.run"))?;
        self.validation_run.save(dir.join("validation.run"))?;
        self.test_run.save(dir.join("test.run"))?;

        let (path, w) = create("embeddings.txt")?;
        write_embeddings(w, &self.vocab, &self.embeddings).map_err(|e| TklError::io(&path, e))?;

        let planted: BTreeMap<&String, &Planted> = self.planted.iter().collect();
        let (path, mut w) = create("planted.json")?;
        serde_json::to_writer_pretty(&mut w, &planted)
            .map_err(std::io::Error::from)
            .and_then(|_| w.flush())
            .map_err(|e| TklError::io(&path, e))
    }
}
