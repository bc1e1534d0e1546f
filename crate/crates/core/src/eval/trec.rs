use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Result, TklError};
use crate::text::store::open;

/// Graded relevance judgements, `qid -> docid -> grade`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgements: BTreeMap<String, BTreeMap<String, i32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, docid: impl Into<String>, grade: i32) -> Result<()> {
        let qid = qid.into();
        let docid = docid.into();
        if grade < 0 {
            return Err(TklError::Argument(format!("negative grade {grade} for ({qid}, {docid})")));
        }
        let per_query = self.judgements.entry(qid.clone()).or_default();
        if per_query.contains_key(&docid) {
            return Err(TklError::DuplicateId(format!("{qid}/{docid}")));
        }
        per_query.insert(docid, grade);
        Ok(())
    }

    pub fn grade(&self, qid: &str, docid: &str) -> Option<i32> {
        self.judgements.get(qid)?.get(docid).copied()
    }

    pub fn query(&self, qid: &str) -> Option<&BTreeMap<String, i32>> {
        self.judgements.get(qid)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgements.contains_key(qid)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, i32>)> {
        self.judgements.iter()
    }

    pub fn len(&self) -> usize {
        self.judgements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgements.is_empty()
    }

    /// Parses `qid 0 docid grade` lines.
    pub fn read(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut qrels = Qrels::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| TklError::io(source, e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 4 {
                return Err(TklError::format(source, idx + 1, "expected `qid 0 docid grade`"));
            }
            let grade: i32 = fields[3]
                .parse()
                .map_err(|_| TklError::format(source, idx + 1, format!("bad grade `{}`", fields[3])))?;
            if grade < 0 {
                return Err(TklError::format(source, idx + 1, format!("negative grade {grade}")));
            }
            qrels.insert(fields[0], fields[2], grade).map_err(|e| match e {
                TklError::DuplicateId(id) => TklError::format(source, idx + 1, format!("duplicate judgement {id}")),
                other => other,
            })?;
        }
        Ok(qrels)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Qrels::read(open(path)?, &path.display().to_string())
    }

    pub fn write(&self, mut writer: impl Write) -> std::io::Result<()> {
        for (qid, docs) in &self.judgements {
            for (docid, grade) in docs {
                writeln!(writer, "{qid} 0 {docid} {grade}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub docid: String,
    pub score: f64,
}

/// Ranked lists per query, always kept in rank order: descending score,
/// ties by ascending docid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    rankings: BTreeMap<String, Vec<RunEntry>>,
    pub tag: String,
}

fn rank_order(a: &RunEntry, b: &RunEntry) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.docid.cmp(&b.docid))
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        RunFile {
            rankings: BTreeMap::new(),
            tag: tag.into(),
        }
    }

    /// Sets the candidates of `qid`, sorting them into rank order.
    pub fn set_query(&mut self, qid: impl Into<String>, entries: Vec<(String, f64)>) -> Result<()> {
        let qid = qid.into();
        let mut seen = std::collections::HashSet::new();
        let mut list = Vec::with_capacity(entries.len());
        for (docid, score) in entries {
            if !score.is_finite() {
                return Err(TklError::Argument(format!("non-finite score for ({qid}, {docid})")));
            }
            if !seen.insert(docid.clone()) {
                return Err(TklError::DuplicateId(format!("{qid}/{docid}")));
            }
            list.push(RunEntry { docid, score });
        }
        list.sort_by(rank_order);
        self.rankings.insert(qid, list);
        Ok(())
    }

    pub fn ranking(&self, qid: &str) -> Option<&[RunEntry]> {
        self.rankings.get(qid).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&String, &Vec<RunEntry>)> {
        self.rankings.iter()
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// Parses `qid Q0 docid rank score tag` lines. Ranks in the file are
    /// ignored in favour of score order.
    pub fn read(reader: impl BufRead, source: &str) -> Result<Self> {
        let mut grouped: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut seen = std::collections::HashSet::new();
        let mut tag = String::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| TklError::io(source, e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 6 {
                return Err(TklError::format(source, idx + 1, "expected `qid Q0 docid rank score tag`"));
            }
            let score: f64 = fields[4]
                .parse()
                .ok()
                .filter(|s: &f64| s.is_finite())
                .ok_or_else(|| TklError::format(source, idx + 1, format!("bad score `{}`", fields[4])))?;
            if !seen.insert((fields[0].to_string(), fields[2].to_string())) {
                return Err(TklError::format(
                    source,
                    idx + 1,
                    format!("duplicate docid {} for query {}", fields[2], fields[0]),
                ));
            }
            if tag.is_empty() {
                tag = fields[5].to_string();
            }
            grouped
                .entry(fields[0].to_string())
                .or_default()
                .push((fields[2].to_string(), score));
        }
        let mut run = RunFile::new(tag);
        for (qid, entries) in grouped {
            run.set_query(qid, entries)?;
        }
        Ok(run)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        RunFile::read(open(path)?, &path.display().to_string())
    }

    pub fn write(&self, mut writer: impl Write) -> std::io::Result<()> {
        let tag = if self.tag.is_empty() { "tkl" } else { self.tag.as_str() };
        for (qid, entries) in &self.rankings {
            for (rank, e) in entries.iter().enumerate() {
                writeln!(writer, "{qid} Q0 {} {} {:?} {tag}", e.docid, rank + 1, e.score)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| TklError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w).and_then(|_| w.flush()).map_err(|e| TklError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_round_trip_and_order() {
        let text = "q1 Q0 b 1 2.0 x\nq1 Q0 a 2 2.0 x\nq1 Q0 c 3 5 x\nq2 Q0 z 1 -1 x\n";
        let run = RunFile::read(text.as_bytes(), "run").unwrap();
        let order: Vec<&str> = run.ranking("q1").unwrap().iter().map(|e| e.docid.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
        let mut out = Vec::new();
        run.write(&mut out).unwrap();
        let again = RunFile::read(out.as_slice(), "run").unwrap();
        assert_eq!(run, again);
        let first = String::from_utf8(out).unwrap();
        assert!(first.starts_with("q1 Q0 c 1 5.0 x\n"));
    }

    #[test]
    fn run_rejects_duplicates_and_garbage() {
        assert!(RunFile::read("q Q0 a 1 1 t\nq Q0 a 2 0 t\n".as_bytes(), "r").is_err());
        assert!(RunFile::read("q Q0 a 1 nan t\n".as_bytes(), "r").is_err());
        assert!(RunFile::read("q Q0 a 1\n".as_bytes(), "r").is_err());
    }

    #[test]
    fn qrels_parse() {
        let q = Qrels::read("1 0 d1 2\n1 0 d2 0\n\n2 0 d9 1\n".as_bytes(), "qrels").unwrap();
        assert_eq!(q.grade("1", "d1"), Some(2));
        assert_eq!(q.grade("2", "d1"), None);
        assert_eq!(q.len(), 2);
        let err = Qrels::read("1 0 d1 2\n1 0 d1 1\n".as_bytes(), "qrels").unwrap_err();
        assert!(matches!(err, TklError::Format { line: 2, .. }));
        assert!(Qrels::read("1 0 d1 -1\n".as_bytes(), "qrels").is_err());
    }
}
