//! Straightforward reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

/// `out[k][i][p] = Σ_{j ∈ [p·stride, p·stride + r) ∩ [0, m)} v[k][i][j]`.
pub fn region_sums(values: &[Vec<Vec<f64>>], r: usize, stride: usize) -> (Vec<Vec<Vec<f64>>>, Vec<usize>) {
    let m = values[0][0].len();
    let mut starts = Vec::new();
    let mut s = 0;
    while s < m {
        starts.push(s);
        s += stride;
    }
    let out = values
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|row| {
                    starts
                        .iter()
                        .map(|&s| {
                            let mut total = 0.0;
                            for (j, v) in row.iter().enumerate() {
                                if j >= s && j < s + r {
                                    total += v;
                                }
                            }
                            total
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    (out, starts)
}

pub fn topography(sat: &[Vec<Vec<f64>>], weights: &[f64], query_mask: &[bool]) -> Vec<f64> {
    let regions = sat[0][0].len();
    let mut out = vec![0.0; regions];
    for (p, o) in out.iter_mut().enumerate() {
        for (k, rows) in sat.iter().enumerate() {
            for (i, row) in rows.iter().enumerate() {
                if query_mask[i] {
                    *o += weights[k] * row[p];
                }
            }
        }
    }
    out
}

/// Chosen positions and the flattened neighbourhood features.
pub fn top_local_max(values: &[f64], starts: &[usize], t: usize, f: usize, sep: usize) -> (Vec<usize>, Vec<f64>) {
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..t {
        let mut best: Option<usize> = None;
        for p in 0..values.len() {
            if chosen.contains(&p) {
                continue;
            }
            let far = chosen.iter().all(|&q| {
                let (a, b) = (starts[p] as i64, starts[q] as i64);
                (a - b).abs() >= sep as i64
            });
            if !far {
                continue;
            }
            if best.is_none_or(|b| values[p] > values[b]) {
                best = Some(p);
            }
        }
        match best {
            Some(p) => chosen.push(p),
            None => break,
        }
    }
    let mut features = Vec::new();
    for slot in 0..t {
        for off in -(f as i64)..=(f as i64) {
            let v = chosen.get(slot).and_then(|&p| {
                let idx = p as i64 + off;
                (idx >= 0 && (idx as usize) < values.len()).then(|| values[idx as usize])
            });
            features.push(v.unwrap_or(0.0));
        }
    }
    (chosen, features)
}

/// Ranked document ids per query: score descending, id ascending on ties.
pub type Ranking = Vec<(String, Vec<(String, f64)>)>;

fn ranked(entries: &[(String, f64)]) -> Vec<String> {
    let mut v = entries.to_vec();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    v.into_iter().map(|(d, _)| d).collect()
}

fn has_relevant(j: &HashMap<String, i32>) -> bool {
    j.values().any(|&g| g >= 1)
}

/// Mean nDCG@k with `2^g − 1` gains, over queries with a relevant document.
pub fn ndcg(run: &Ranking, qrels: &HashMap<String, HashMap<String, i32>>, k: usize) -> f64 {
    let mut values = Vec::new();
    for (qid, entries) in run {
        let Some(j) = qrels.get(qid) else { continue };
        if !has_relevant(j) {
            continue;
        }
        let gain = |g: i32| 2f64.powi(g.max(0)) - 1.0;
        let disc = |rank: usize| 1.0 / ((rank + 1) as f64).ln() * 2f64.ln();
        let mut dcg = 0.0;
        for (r, d) in ranked(entries).iter().enumerate() {
            if r < k {
                dcg += gain(*j.get(d).unwrap_or(&0)) * disc(r + 1);
            }
        }
        let mut grades: Vec<i32> = j.values().copied().collect();
        grades.sort();
        grades.reverse();
        let mut idcg = 0.0;
        for (r, g) in grades.iter().enumerate() {
            if r < k {
                idcg += gain(*g) * disc(r + 1);
            }
        }
        values.push(dcg / idcg);
    }
    mean(&values)
}

pub fn mrr(run: &Ranking, qrels: &HashMap<String, HashMap<String, i32>>, k: usize) -> f64 {
    let mut values = Vec::new();
    for (qid, entries) in run {
        let Some(j) = qrels.get(qid) else { continue };
        if !has_relevant(j) {
            continue;
        }
        let mut rr = 0.0;
        for (r, d) in ranked(entries).iter().enumerate() {
            if r < k && j.get(d).copied().unwrap_or(0) >= 1 {
                rr = 1.0 / (r + 1) as f64;
                break;
            }
        }
        values.push(rr);
    }
    mean(&values)
}

pub fn average_precision(run: &Ranking, qrels: &HashMap<String, HashMap<String, i32>>, k: usize) -> f64 {
    let mut values = Vec::new();
    for (qid, entries) in run {
        let Some(j) = qrels.get(qid) else { continue };
        if !has_relevant(j) {
            continue;
        }
        let total = j.values().filter(|&&g| g >= 1).count() as f64;
        let list = ranked(entries);
        let mut ap = 0.0;
        for r in 0..list.len().min(k) {
            if j.get(&list[r]).copied().unwrap_or(0) >= 1 {
                let hits = list[..=r].iter().filter(|d| j.get(*d).copied().unwrap_or(0) >= 1).count();
                ap += hits as f64 / (r + 1) as f64;
            }
        }
        values.push(ap / total);
    }
    mean(&values)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn layer_norm(x: &[f64], gain: &ndarray::Array1<f64>, bias: &ndarray::Array1<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(j, v)| (v - mean) / sd * gain[j] + bias[j]).collect()
}

fn affine(x: &[f64], l: &tkl::attention::Linear) -> Vec<f64> {
    (0..l.weight.ncols())
        .map(|o| l.bias[o] + x.iter().enumerate().map(|(i, v)| v * l.weight[[i, o]]).sum::<f64>())
        .collect()
}

/// Full self-attention over every token of `emb`, one layer at a time, then
/// the highway gate. Rows at padding positions are zero.
pub fn full_encode(
    stack: &tkl::attention::TransformerStack,
    gate: &ndarray::Array1<f64>,
    emb: &ndarray::Array2<f64>,
    mask: &[bool],
) -> ndarray::Array2<f64> {
    let (len, dim) = emb.dim();
    let dh = dim / stack.heads;
    let mut h: Vec<Vec<f64>> = emb.rows().into_iter().map(|r| r.to_vec()).collect();
    for layer in &stack.layers {
        let q: Vec<Vec<f64>> = h.iter().map(|x| affine(x, &layer.query)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|x| affine(x, &layer.key)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|x| affine(x, &layer.value)).collect();
        let mut next = Vec::with_capacity(len);
        for i in 0..len {
            let mut attn = vec![0.0; dim];
            if mask[i] {
                for head in 0..stack.heads {
                    let cols = head * dh..(head + 1) * dh;
                    let scores: Vec<Option<f64>> = (0..len)
                        .map(|j| {
                            mask[j].then(|| {
                                cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                            })
                        })
                        .collect();
                    let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let weights: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
                    let total: f64 = weights.iter().sum();
                    for (j, w) in weights.iter().enumerate() {
                        for c in cols.clone() {
                            attn[c] += w / total * v[j][c];
                        }
                    }
                }
            }
            let a = affine(&attn, &layer.output);
            let r1: Vec<f64> = h[i].iter().zip(&a).map(|(x, y)| x + y).collect();
            let y1 = layer_norm(&r1, &layer.norm1.gain, &layer.norm1.bias);
            let hidden: Vec<f64> = affine(&y1, &layer.ff_in).into_iter().map(|z| z.max(0.0)).collect();
            let f = affine(&hidden, &layer.ff_out);
            let r2: Vec<f64> = y1.iter().zip(&f).map(|(x, y)| x + y).collect();
            next.push(layer_norm(&r2, &layer.norm2.gain, &layer.norm2.bias));
        }
        h = next;
    }
    let mut out = ndarray::Array2::zeros((len, dim));
    for t in (0..len).filter(|&t| mask[t]) {
        for c in 0..dim {
            let g = 1.0 / (1.0 + (-gate[c]).exp());
            out[[t, c]] = g * emb[[t, c]] + (1.0 - g) * h[t][c];
        }
    }
    out
}

pub type Judgements = HashMap<String, HashMap<String, i32>>;

/// Random run and judgements with score ties, unjudged documents and
/// queries lacking judgements.
pub fn metric_fixture(rng: &mut impl Rng) -> (tkl::eval::RunFile, tkl::eval::Qrels, Ranking, Judgements) {
    let mut run = tkl::eval::RunFile::new("r");
    let mut qrels = tkl::eval::Qrels::new();
    let mut naive_run = Vec::new();
    let mut naive_qrels: Judgements = HashMap::new();
    let docs: Vec<String> = (0..30).map(|d| format!("d{d}")).collect();
    for q in 0..rng.random_range(1..6) {
        let qid = format!("q{q}");
        let n = rng.random_range(1..25);
        let mut pool = docs.clone();
        pool.shuffle(rng);
        let entries: Vec<(String, f64)> = pool[..n]
            .iter()
            .map(|d| (d.clone(), rng.random_range(0..6) as f64 * 0.5))
            .collect();
        run.set_query(qid.clone(), entries.clone()).unwrap();
        naive_run.push((qid.clone(), entries));
        if rng.random_bool(0.85) {
            pool.shuffle(rng);
            let judged = rng.random_range(1..15);
            let map = naive_qrels.entry(qid.clone()).or_default();
            for d in &pool[..judged] {
                let grade = rng.random_range(0..4);
                qrels.insert(qid.clone(), d.clone(), grade).unwrap();
                map.insert(d.clone(), grade);
            }
        }
    }
    (run, qrels, naive_run, naive_qrels)
}
