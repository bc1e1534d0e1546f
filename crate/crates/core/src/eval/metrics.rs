use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trec::{Qrels, RunFile};

/// Gain applied to a relevance grade in DCG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `2^grade - 1`
    #[default]
    Exponential,
    /// `grade`
    Linear,
}

impl Gain {
    pub fn apply(self, grade: i32) -> f64 {
        let g = grade.max(0);
        match self {
            Gain::Exponential => 2f64.powi(g) - 1.0,
            Gain::Linear => g as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Minimum grade counted as relevant by binary metrics.
    pub relevance_threshold: i32,
    pub gain: Gain,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            relevance_threshold: 1,
            gain: Gain::Exponential,
        }
    }
}

/// Per-query values and their mean.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricResult {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Run queries with no judgements at all.
    pub missing_qrels: Vec<String>,
    /// Judged run queries without any relevant document.
    pub no_relevant: Vec<String>,
}

fn evaluate(run: &RunFile, qrels: &Qrels, cfg: &MetricConfig, mut per_query: impl FnMut(&[&str], &BTreeMap<String, i32>) -> f64) -> MetricResult {
    let mut result = MetricResult::default();
    for (qid, entries) in run.queries() {
        let Some(judged) = qrels.query(qid) else {
            result.missing_qrels.push(qid.clone());
            continue;
        };
        if !judged.values().any(|&g| g >= cfg.relevance_threshold) {
            result.no_relevant.push(qid.clone());
            continue;
        }
        let ranked: Vec<&str> = entries.iter().map(|e| e.docid.as_str()).collect();
        result.per_query.insert(qid.clone(), per_query(&ranked, judged));
    }
    if !result.missing_qrels.is_empty() {
        log::warn!("{} run queries have no judgements and were skipped", result.missing_qrels.len());
    }
    if !result.per_query.is_empty() {
        result.mean = result.per_query.values().sum::<f64>() / result.per_query.len() as f64;
    }
    result
}

/// nDCG at cutoff `k` with `log2(rank + 1)` discount.
pub fn ndcg_at(run: &RunFile, qrels: &Qrels, k: usize, cfg: &MetricConfig) -> MetricResult {
    evaluate(run, qrels, cfg, |ranked, judged| {
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, d)| cfg.gain.apply(judged.get(*d).copied().unwrap_or(0)) / (i as f64 + 2.0).log2())
            .sum();
        let mut grades: Vec<i32> = judged.values().copied().collect();
        grades.sort_unstable_by(|a, b| b.cmp(a));
        let ideal: f64 = grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| cfg.gain.apply(g) / (i as f64 + 2.0).log2())
            .sum();
        if ideal > 0.0 {
            dcg / ideal
        } else {
            0.0
        }
    })
}

/// Reciprocal rank of the first relevant document within `k`.
pub fn mrr_at(run: &RunFile, qrels: &Qrels, k: usize, cfg: &MetricConfig) -> MetricResult {
    evaluate(run, qrels, cfg, |ranked, judged| {
        ranked
            .iter()
            .take(k)
            .position(|d| judged.get(*d).is_some_and(|&g| g >= cfg.relevance_threshold))
            .map_or(0.0, |i| 1.0 / (i as f64 + 1.0))
    })
}

/// Average precision over the top `k`, normalised by all relevant
/// documents in the judgements.
pub fn map_at(run: &RunFile, qrels: &Qrels, k: usize, cfg: &MetricConfig) -> MetricResult {
    evaluate(run, qrels, cfg, |ranked, judged| {
        let total = judged.values().filter(|&&g| g >= cfg.relevance_threshold).count();
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, d) in ranked.iter().take(k).enumerate() {
            if judged.get(*d).is_some_and(|&g| g >= cfg.relevance_threshold) {
                hits += 1;
                sum += hits as f64 / (i as f64 + 1.0);
            }
        }
        sum / total as f64
    })
}

/// The three standard metrics of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub ndcg_10: f64,
    pub mrr_10: f64,
    pub map_100: f64,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
}

pub fn summarize(run: &RunFile, qrels: &Qrels, cfg: &MetricConfig) -> MetricSummary {
    let ndcg = ndcg_at(run, qrels, 10, cfg);
    MetricSummary {
        ndcg_10: ndcg.mean,
        mrr_10: mrr_at(run, qrels, 10, cfg).mean,
        map_100: map_at(run, qrels, 100, cfg).mean,
        evaluated_queries: ndcg.per_query.len(),
        skipped_queries: ndcg.missing_qrels.len() + ndcg.no_relevant.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_of(qid: &str, docs: &[&str]) -> RunFile {
        let mut run = RunFile::new("t");
        let n = docs.len() as f64;
        run.set_query(qid, docs.iter().enumerate().map(|(i, d)| (d.to_string(), n - i as f64)).collect())
            .unwrap();
        run
    }

    #[test]
    fn single_relevant() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "r", 1).unwrap();
        let cfg = MetricConfig::default();
        let top = run_of("q", &["r", "a", "b"]);
        assert_eq!(ndcg_at(&top, &qrels, 10, &cfg).mean, 1.0);
        let docs = ["a", "r", "b", "c", "d", "e", "f", "g", "h", "i"];
        let second = run_of("q", &docs);
        assert!((ndcg_at(&second, &qrels, 10, &cfg).mean - 0.63093).abs() < 1e-5);
        let fourth = run_of("q", &["a", "b", "c", "r"]);
        assert_eq!(mrr_at(&fourth, &qrels, 10, &cfg).mean, 0.25);
        assert_eq!(mrr_at(&fourth, &qrels, 3, &cfg).mean, 0.0);
    }

    #[test]
    fn unjudged_and_irrelevant_queries_are_skipped() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "r", 1).unwrap();
        qrels.insert("z", "r", 0).unwrap();
        let mut run = run_of("q", &["r"]);
        run.set_query("other", vec![("r".into(), 1.0)]).unwrap();
        run.set_query("z", vec![("r".into(), 1.0)]).unwrap();
        let res = ndcg_at(&run, &qrels, 10, &MetricConfig::default());
        assert_eq!(res.per_query.len(), 1);
        assert_eq!(res.missing_qrels, ["other"]);
        assert_eq!(res.no_relevant, ["z"]);
    }

    #[test]
    fn threshold_and_linear_gain() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "a", 1).unwrap();
        qrels.insert("q", "b", 3).unwrap();
        let run = run_of("q", &["a", "b"]);
        let strict = MetricConfig {
            relevance_threshold: 2,
            gain: Gain::Linear,
        };
        assert_eq!(mrr_at(&run, &qrels, 10, &strict).mean, 0.5);
        let expected = (1.0 + 3.0 / 3f64.log2()) / (3.0 + 1.0 / 3f64.log2());
        assert!((ndcg_at(&run, &qrels, 10, &strict).mean - expected).abs() < 1e-12);
    }
}
