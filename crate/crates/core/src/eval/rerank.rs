use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::trec::RunFile;
use crate::error::{Result, TklError};
use crate::model::{Encoded, Model};
use crate::scoring::ScoredRegions;
use crate::text::{DocumentStore, QueryStore};

/// One highlighted region of a scored document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpan {
    pub start_token: usize,
    pub end_token: usize,
    pub peak: f64,
}

/// Selected regions of one scored (query, document) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub qid: String,
    pub docid: String,
    pub score: f64,
    pub regions: Vec<RegionSpan>,
}

impl RegionRecord {
    pub fn from_scored(qid: &str, docid: &str, scored: &ScoredRegions) -> Self {
        RegionRecord {
            qid: qid.to_string(),
            docid: docid.to_string(),
            score: scored.score,
            regions: scored
                .peaks
                .iter()
                .map(|p| RegionSpan {
                    start_token: p.start_token,
                    end_token: p.end_token,
                    peak: p.value,
                })
                .collect(),
        }
    }
}

pub fn write_regions<'a>(records: impl IntoIterator<Item = &'a RegionRecord>, mut writer: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_regions(reader: impl BufRead, source: &str) -> Result<Vec<RegionRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TklError::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TklError::format(source, idx + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Re-scores every candidate of `run` with `score(qid, docid)`.
pub fn rerank_with(run: &RunFile, mut score: impl FnMut(&str, &str) -> Result<f64>) -> Result<RunFile> {
    let mut out = RunFile::new(run.tag.clone());
    for (qid, entries) in run.queries() {
        let scored = entries
            .iter()
            .map(|e| Ok((e.docid.clone(), score(qid, &e.docid)?)))
            .collect::<Result<Vec<_>>>()?;
        out.set_query(qid.clone(), scored)?;
    }
    Ok(out)
}

fn check_ids(run: &RunFile, queries: &QueryStore, docs: &DocumentStore) -> Result<()> {
    let mut missing = BTreeSet::new();
    for (qid, entries) in run.queries() {
        if !queries.contains(qid) {
            missing.insert(format!("query:{qid}"));
        }
        for e in entries {
            if !docs.contains(&e.docid) {
                missing.insert(format!("doc:{}", e.docid));
            }
        }
    }
    if missing.is_empty() {
        return Ok(());
    }
    let shown: Vec<&str> = missing.iter().take(20).map(String::as_str).collect();
    let more = missing.len().saturating_sub(shown.len());
    let suffix = if more > 0 { format!(" (+{more} more)") } else { String::new() };
    Err(TklError::UnknownId(format!("{}{suffix}", shown.join(", "))))
}

type DocJob<'a> = (&'a str, Vec<&'a str>);

fn score_jobs<'a>(
    model: &Model,
    docs: &DocumentStore,
    queries: &HashMap<&'a str, Encoded>,
    max_doc_len: usize,
    jobs: &[DocJob<'a>],
) -> Vec<((&'a str, &'a str), ScoredRegions)> {
    let mut out = Vec::new();
    for (docid, qids) in jobs {
        let doc = model.encode_document(&docs.get(docid).expect("checked").tokens, max_doc_len);
        for qid in qids {
            out.push(((*qid, *docid), model.score_encoded(&queries[qid], &doc)));
        }
    }
    out
}

/// Model re-ranking of `run`, with documents truncated to `max_doc_len`.
/// Each document is contextualized once and scored against every query
/// that retrieved it. Region records come back in output rank order.
pub fn rerank(
    model: &Model,
    run: &RunFile,
    queries: &QueryStore,
    docs: &DocumentStore,
    max_doc_len: usize,
) -> Result<(RunFile, Vec<RegionRecord>)> {
    rerank_parallel(model, run, queries, docs, max_doc_len, 1)
}

/// [`rerank`] with documents spread over `workers` threads. The output does
/// not depend on the worker count.
pub fn rerank_parallel(
    model: &Model,
    run: &RunFile,
    queries: &QueryStore,
    docs: &DocumentStore,
    max_doc_len: usize,
    workers: usize,
) -> Result<(RunFile, Vec<RegionRecord>)> {
    check_ids(run, queries, docs)?;
    let mut by_doc: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (qid, entries) in run.queries() {
        for e in entries {
            by_doc.entry(e.docid.as_str()).or_default().push(qid.as_str());
        }
    }
    let encoded_queries: HashMap<&str, Encoded> = run
        .queries()
        .map(|(qid, _)| (qid.as_str(), model.encode_query(&queries.get(qid).expect("checked").tokens)))
        .collect();
    let jobs: Vec<DocJob<'_>> = by_doc.into_iter().collect();
    let score_chunk = |chunk| score_jobs(model, docs, &encoded_queries, max_doc_len, chunk);
    let workers = workers.clamp(1, jobs.len().max(1));
    let mut scored: HashMap<(&str, &str), ScoredRegions> = HashMap::new();
    if workers == 1 {
        scored.extend(score_chunk(&jobs));
    } else {
        let chunk_len = jobs.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.chunks(chunk_len).map(|c| s.spawn(move || score_chunk(c))).collect();
            for h in handles {
                scored.extend(h.join().expect("scoring thread panicked"));
            }
        });
    }
    let reranked = rerank_with(run, |q, d| Ok(scored[&(q, d)].score))?;
    let mut records = Vec::with_capacity(scored.len());
    for (qid, entries) in reranked.queries() {
        for e in entries {
            records.push(RegionRecord::from_scored(qid, &e.docid, &scored[&(qid.as_str(), e.docid.as_str())]));
        }
    }
    Ok((reranked, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_rank_reproduces_order() {
        let text = "q Q0 c 1 9 t\nq Q0 a 2 8 t\nq Q0 b 3 7 t\n";
        let run = RunFile::read(text.as_bytes(), "r").unwrap();
        let ranks: HashMap<String, f64> = run
            .ranking("q")
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, e)| (e.docid.clone(), -(i as f64)))
            .collect();
        let out = rerank_with(&run, |_, d| Ok(ranks[d])).unwrap();
        let a: Vec<_> = run.ranking("q").unwrap().iter().map(|e| &e.docid).collect();
        let b: Vec<_> = out.ranking("q").unwrap().iter().map(|e| &e.docid).collect();
        assert_eq!(a, b);
        let zero = rerank_with(&run, |_, _| Ok(0.0)).unwrap();
        let z: Vec<_> = zero.ranking("q").unwrap().iter().map(|e| e.docid.as_str()).collect();
        assert_eq!(z, ["a", "b", "c"]);
    }

    #[test]
    fn region_json_round_trip() {
        let rec = RegionRecord {
            qid: "1".into(),
            docid: "d".into(),
            score: 0.5,
            regions: vec![RegionSpan {
                start_token: 3,
                end_token: 33,
                peak: 1.25,
            }],
        };
        let mut buf = Vec::new();
        write_regions([&rec, &rec], &mut buf).unwrap();
        assert_eq!(read_regions(buf.as_slice(), "x").unwrap(), vec![rec.clone(), rec]);
    }
}
