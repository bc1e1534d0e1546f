mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tkl::eval::{map_at, mrr_at, ndcg_at, summarize, MetricConfig, Qrels, RunFile};

#[test]
fn randomized_fixtures_match_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = MetricConfig::default();
    for _ in 0..1000 {
        let (run, qrels, naive_run, naive_qrels) = common::metric_fixture(&mut rng);
        let k = rng.random_range(1..12);
        for (got, want) in [
            (ndcg_at(&run, &qrels, 10, &cfg).mean, common::ndcg(&naive_run, &naive_qrels, 10)),
            (ndcg_at(&run, &qrels, k, &cfg).mean, common::ndcg(&naive_run, &naive_qrels, k)),
            (mrr_at(&run, &qrels, 10, &cfg).mean, common::mrr(&naive_run, &naive_qrels, 10)),
            (mrr_at(&run, &qrels, k, &cfg).mean, common::mrr(&naive_run, &naive_qrels, k)),
            (map_at(&run, &qrels, 100, &cfg).mean, common::average_precision(&naive_run, &naive_qrels, 100)),
            (map_at(&run, &qrels, k, &cfg).mean, common::average_precision(&naive_run, &naive_qrels, k)),
        ] {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}

const QRELS: &str = "q1 0 d1 2\nq1 0 d2 0\nq1 0 d3 1\nq2 0 d4 1\nq3 0 d5 0\n";
const RUN: &str = "q1 Q0 d2 1 3.0 x\nq1 Q0 d1 2 2.0 x\nq1 Q0 d3 3 1.0 x\nq2 Q0 d6 1 2.0 x\nq2 Q0 d4 2 1.0 x\nq3 Q0 d5 1 1.0 x\nq4 Q0 d1 1 1.0 x\n";

#[test]
fn three_query_fixture_by_hand() {
    let qrels = Qrels::read(QRELS.as_bytes(), "qrels").unwrap();
    let run = RunFile::read(RUN.as_bytes(), "run").unwrap();
    let cfg = MetricConfig::default();

    // q1: d2 (0), d1 (2), d3 (1). Ideal d1, d3.
    let q1 = (3.0 / 3f64.log2() + 1.0 / 2.0) / (3.0 + 1.0 / 3f64.log2());
    // q2: unjudged d6, then d4 (1).
    let q2 = 1.0 / 3f64.log2();
    let ndcg = ndcg_at(&run, &qrels, 10, &cfg);
    assert_eq!(ndcg.per_query.len(), 2);
    assert!((ndcg.per_query["q1"] - q1).abs() < 1e-12);
    assert!((ndcg.per_query["q2"] - q2).abs() < 1e-12);
    assert_eq!(ndcg.no_relevant, ["q3"]);
    assert_eq!(ndcg.missing_qrels, ["q4"]);

    let mrr = mrr_at(&run, &qrels, 10, &cfg);
    assert_eq!(mrr.mean, 0.5);

    let map = map_at(&run, &qrels, 100, &cfg);
    assert!((map.per_query["q1"] - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(map.per_query["q2"], 0.5);

    let summary = summarize(&run, &qrels, &cfg);
    assert_eq!(summary.evaluated_queries, 2);
    assert!((summary.ndcg_10 - (q1 + q2) / 2.0).abs() < 1e-12);
}

#[test]
fn threshold_two_counts_only_highly_relevant() {
    let qrels = Qrels::read(QRELS.as_bytes(), "qrels").unwrap();
    let run = RunFile::read(RUN.as_bytes(), "run").unwrap();
    let cfg = MetricConfig {
        relevance_threshold: 2,
        ..MetricConfig::default()
    };
    let mrr = mrr_at(&run, &qrels, 10, &cfg);
    assert_eq!(mrr.per_query.len(), 1);
    assert_eq!(mrr.per_query["q1"], 0.5);
}

#[test]
fn trec_files_round_trip() {
    let qrels = Qrels::read(QRELS.as_bytes(), "qrels").unwrap();
    let run = RunFile::read(RUN.as_bytes(), "run").unwrap();
    let mut q_out = Vec::new();
    qrels.write(&mut q_out).unwrap();
    assert_eq!(Qrels::read(q_out.as_slice(), "again").unwrap().len(), qrels.len());
    let mut r_out = Vec::new();
    run.write(&mut r_out).unwrap();
    let again = RunFile::read(r_out.as_slice(), "again").unwrap();
    for (qid, entries) in run.queries() {
        assert_eq!(again.ranking(qid).unwrap(), entries.as_slice());
    }
}
