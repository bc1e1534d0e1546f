//! Learned saturation of region kernel sums, the relevance topography, and
//! top-local-max aggregation into a final score with extractable regions.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::kernel::RegionSums;

/// Lower bound on the exponent denominator `b` so `1/b` stays in `(0, 1)`.
pub const B_FLOOR: f64 = 1.0 + 1e-3;
/// Added inside the power so the derivative at zero mass stays finite.
pub const POW_EPS: f64 = 1e-10;
/// Initial value of the `b` bias, which makes `K^{1/b}` a log-approximation.
pub const B_INIT: f64 = 100.0;

/// Shape of the non-linearity applied to region kernel sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SaturationMode {
    /// `a·K − c` (exponent fixed at 1).
    Linear,
    /// `ln(1 + K)`, the fixed saturation of earlier kernel-pooling rankers.
    Log,
    /// `a·K^{1/b} − c` with `a, b, c` conditioned on query-term salience and
    /// region fill.
    #[default]
    Embedding,
}

impl std::str::FromStr for SaturationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(SaturationMode::Linear),
            "log" => Ok(SaturationMode::Log),
            "embedding" => Ok(SaturationMode::Embedding),
            other => Err(format!("unknown saturation mode `{other}` (linear | log | embedding)")),
        }
    }
}

impl std::fmt::Display for SaturationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SaturationMode::Linear => "linear",
            SaturationMode::Log => "log",
            SaturationMode::Embedding => "embedding",
        })
    }
}

/// Affine maps from `[ReLU(e_i); c_len]` to the saturation coefficients.
/// Row 0 produces `a`, row 1 `b`, row 2 `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationParameters {
    /// `3 × 2`
    pub weights: Array2<f64>,
    /// `3`
    pub biases: Array1<f64>,
}

impl Default for SaturationParameters {
    fn default() -> Self {
        SaturationParameters {
            weights: Array2::zeros((3, 2)),
            biases: Array1::from(vec![1.0, B_INIT, 0.0]),
        }
    }
}

impl SaturationParameters {
    pub fn zeros() -> Self {
        SaturationParameters {
            weights: Array2::zeros((3, 2)),
            biases: Array1::zeros(3),
        }
    }
}

/// Per-term, per-region coefficients of the saturation function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// True when `b` was raised to [`B_FLOOR`].
    pub b_clamped: bool,
}

pub fn saturation_coefficients(params: &SaturationParameters, salience: f64, fill: f64) -> Coefficients {
    let x = [salience.max(0.0), fill];
    let affine = |row: usize| params.weights[[row, 0]] * x[0] + params.weights[[row, 1]] * x[1] + params.biases[row];
    let raw_b = affine(1);
    Coefficients {
        a: affine(0),
        b: raw_b.max(B_FLOOR),
        c: affine(2),
        b_clamped: raw_b < B_FLOOR,
    }
}

/// Saturated region sums plus what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct Saturated {
    /// `K × n × R`
    pub values: Array3<f64>,
    mode: SaturationMode,
    /// `n × R` coefficients (empty for [`SaturationMode::Log`]).
    coefficients: Vec<Coefficients>,
    regions: usize,
}

/// Applies the configured saturation to every `(kernel, term, region)` sum.
/// `salience[i]` is the salience of query term `i`.
pub fn saturate(rs: &RegionSums, salience: &[f64], params: &SaturationParameters, mode: SaturationMode) -> Saturated {
    let (kernels, n, regions) = rs.sums.dim();
    let fills = rs.normalized_counts();
    let mut values = Array3::zeros((kernels, n, regions));
    let mut coefficients = Vec::new();
    match mode {
        SaturationMode::Log => {
            ndarray::Zip::from(&mut values)
                .and(&rs.sums)
                .for_each(|o, &s| *o = s.ln_1p());
        }
        SaturationMode::Linear | SaturationMode::Embedding => {
            coefficients.reserve(n * regions);
            for &e in salience.iter().take(n) {
                for &fill in &fills {
                    coefficients.push(saturation_coefficients(params, e, fill));
                }
            }
            for k in 0..kernels {
                for i in 0..n {
                    for p in 0..regions {
                        let co = coefficients[i * regions + p];
                        let s = rs.sums[[k, i, p]];
                        values[[k, i, p]] = match mode {
                            SaturationMode::Linear => co.a * s - co.c,
                            _ => co.a * (s + POW_EPS).powf(1.0 / co.b) - co.c,
                        };
                    }
                }
            }
        }
    }
    Saturated {
        values,
        mode,
        coefficients,
        regions,
    }
}

/// Reverse pass of [`saturate`]. Returns `(dL/dsums, dL/dsalience)` and
/// accumulates into `grad`.
pub fn saturate_backward(
    rs: &RegionSums,
    salience: &[f64],
    params: &SaturationParameters,
    sat: &Saturated,
    d_values: &Array3<f64>,
    grad: &mut SaturationParameters,
) -> (Array3<f64>, Vec<f64>) {
    let (kernels, n, regions) = rs.sums.dim();
    let mut d_sums = Array3::zeros(rs.sums.raw_dim());
    let mut d_salience = vec![0.0; n];
    if sat.mode == SaturationMode::Log {
        ndarray::Zip::from(&mut d_sums)
            .and(&rs.sums)
            .and(d_values)
            .for_each(|ds, &s, &g| *ds = g / (1.0 + s));
        return (d_sums, d_salience);
    }
    let fills = rs.normalized_counts();
    for i in 0..n {
        let relu_e = salience[i].max(0.0);
        let mut d_relu = 0.0;
        for p in 0..regions {
            let co = sat.coefficients[i * sat.regions + p];
            let (mut da, mut db, mut dc) = (0.0, 0.0, 0.0);
            for k in 0..kernels {
                let g = d_values[[k, i, p]];
                if g == 0.0 {
                    continue;
                }
                let s = rs.sums[[k, i, p]];
                dc -= g;
                match sat.mode {
                    SaturationMode::Linear => {
                        da += g * s;
                        d_sums[[k, i, p]] = g * co.a;
                    }
                    _ => {
                        let base = s + POW_EPS;
                        let pow = base.powf(1.0 / co.b);
                        da += g * pow;
                        d_sums[[k, i, p]] = g * co.a * pow / (co.b * base);
                        if !co.b_clamped {
                            db -= g * co.a * pow * base.ln() / (co.b * co.b);
                        }
                    }
                }
            }
            let x = [relu_e, fills[p]];
            for (row, d) in [(0, da), (1, db), (2, dc)] {
                grad.weights[[row, 0]] += d * x[0];
                grad.weights[[row, 1]] += d * x[1];
                grad.biases[row] += d;
                d_relu += d * params.weights[[row, 0]];
            }
        }
        if salience[i] > 0.0 {
            d_salience[i] = d_relu;
        }
    }
    (d_sums, d_salience)
}

/// Per-region relevance scores over a document.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceTopography {
    pub values: Vec<f64>,
    /// Token offset of each region.
    pub starts: Vec<usize>,
    pub region_size: usize,
    pub stride: usize,
    pub doc_len: usize,
}

impl RelevanceTopography {
    pub fn from_values(values: Vec<f64>, region_size: usize, stride: usize) -> Self {
        let starts = (0..values.len()).map(|p| p * stride).collect();
        let doc_len = values.len() * stride;
        RelevanceTopography {
            values,
            starts,
            region_size,
            stride,
            doc_len,
        }
    }
}

/// Sums saturated values over non-padding query terms, then weights kernels.
pub fn topography(sat: &Array3<f64>, kernel_weights: &Array1<f64>, query_mask: &[bool], rs: &RegionSums) -> RelevanceTopography {
    let (kernels, n, regions) = sat.dim();
    let mut values = vec![0.0; regions];
    for k in 0..kernels {
        let w = kernel_weights[k];
        for i in (0..n).filter(|&i| query_mask[i]) {
            let row = sat.slice(ndarray::s![k, i, ..]);
            for (v, &s) in values.iter_mut().zip(row.iter()) {
                *v += w * s;
            }
        }
    }
    RelevanceTopography {
        values,
        starts: rs.starts.clone(),
        region_size: rs.region_size,
        stride: rs.stride,
        doc_len: rs.doc_len,
    }
}

/// Reverse pass of [`topography`]: returns `dL/dsat` and accumulates
/// `dL/dW_k`.
pub fn topography_backward(
    sat: &Array3<f64>,
    kernel_weights: &Array1<f64>,
    query_mask: &[bool],
    d_topo: &[f64],
    grad_kernel_weights: &mut Array1<f64>,
) -> Array3<f64> {
    let (kernels, n, _) = sat.dim();
    let mut d_sat = Array3::zeros(sat.raw_dim());
    let d = ndarray::ArrayView1::from(d_topo);
    for k in 0..kernels {
        for i in (0..n).filter(|&i| query_mask[i]) {
            let row = sat.slice(ndarray::s![k, i, ..]);
            grad_kernel_weights[k] += row.dot(&d);
            d_sat
                .slice_mut(ndarray::s![k, i, ..])
                .assign(&(&d * kernel_weights[k]));
        }
    }
    d_sat
}

/// A selected peak of the topography.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Region index into the topography.
    pub position: usize,
    pub start_token: usize,
    pub end_token: usize,
    pub value: f64,
    /// `f` values left of the peak in position order, 0 past the boundary.
    pub left: Vec<f64>,
    /// `f` values right of the peak in position order, 0 past the boundary.
    pub right: Vec<f64>,
}

/// Output of top-local-max: the peaks, the flattened `t·(2f+1)` feature
/// vector fed to `W_s`, and the final score once weighted.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRegions {
    pub peaks: Vec<Peak>,
    pub features: Vec<f64>,
    /// Topography index behind each feature, `None` for zero fill.
    pub sources: Vec<Option<usize>>,
    pub score: f64,
}

/// Greedy top-t selection: repeatedly takes the highest remaining value
/// whose start is at least `min_separation` tokens from every chosen peak
/// (lower position wins ties). Each peak contributes
/// `[left_f … left_1, peak, right_1 … right_f]` to the features; missing
/// peaks contribute zeros.
pub fn top_local_max(topo: &RelevanceTopography, t: usize, f: usize, min_separation: usize) -> ScoredRegions {
    let values = &topo.values;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut chosen: Vec<usize> = Vec::with_capacity(t);
    for &p in &order {
        if chosen.len() == t {
            break;
        }
        let start = topo.starts[p];
        if chosen.iter().all(|&q| topo.starts[q].abs_diff(start) >= min_separation) {
            chosen.push(p);
        }
    }

    let width = 2 * f + 1;
    let mut features = vec![0.0; t * width];
    let mut sources = vec![None; t * width];
    let mut peaks = Vec::with_capacity(chosen.len());
    for (slot, &p) in chosen.iter().enumerate() {
        for offset in 0..width {
            let idx = (p + offset).checked_sub(f).filter(|&i| i < values.len());
            if let Some(i) = idx {
                features[slot * width + offset] = values[i];
                sources[slot * width + offset] = Some(i);
            }
        }
        let base = slot * width;
        peaks.push(Peak {
            position: p,
            start_token: topo.starts[p],
            end_token: (topo.starts[p] + topo.region_size).min(topo.doc_len),
            value: values[p],
            left: features[base..base + f].to_vec(),
            right: features[base + f + 1..base + width].to_vec(),
        });
    }
    ScoredRegions {
        peaks,
        features,
        sources,
        score: 0.0,
    }
}

/// `features · W_s`.
pub fn final_score(regions: &ScoredRegions, region_weights: &Array1<f64>) -> f64 {
    regions
        .features
        .iter()
        .zip(region_weights.iter())
        .map(|(a, b)| a * b)
        .sum()
}

/// Gradient of the final score with respect to the topography, scaled by
/// `d_score`, and accumulation of `dL/dW_s`.
pub fn top_local_max_backward(
    regions: &ScoredRegions,
    region_weights: &Array1<f64>,
    d_score: f64,
    topo_len: usize,
    grad_region_weights: &mut Array1<f64>,
) -> Vec<f64> {
    let mut d_topo = vec![0.0; topo_len];
    for (idx, (&feat, src)) in regions.features.iter().zip(&regions.sources).enumerate() {
        grad_region_weights[idx] += d_score * feat;
        if let Some(i) = src {
            d_topo[*i] += d_score * region_weights[idx];
        }
    }
    d_topo
}
