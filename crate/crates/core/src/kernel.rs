//! Cosine interactions between contextual query and document vectors,
//! Gaussian kernel activations, and sliding-region kernel sums.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TklError};

/// Gaussian kernel centres `μ_k` sharing one width `σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    centers: Vec<f64>,
    sigma: f64,
}

impl KernelBank {
    pub fn new(centers: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(TklError::Argument(format!("kernel width must be positive, got {sigma}")));
        }
        if centers.is_empty() {
            return Err(TklError::Argument("at least one kernel is required".into()));
        }
        if centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TklError::Argument("kernel centres must be strictly increasing".into()));
        }
        if centers.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return Err(TklError::Argument("kernel centres must lie in [-1, 1]".into()));
        }
        Ok(KernelBank { centers, sigma })
    }

    /// `count` centres evenly spaced over `[-1, 1]`; a single kernel sits at 1.
    pub fn evenly_spaced(count: usize, sigma: f64) -> Result<Self> {
        let centers = match count {
            0 => Vec::new(),
            1 => vec![1.0],
            _ => (0..count)
                .map(|k| -1.0 + 2.0 * k as f64 / (count - 1) as f64)
                .collect(),
        };
        Self::new(centers, sigma)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// `n × m` cosine similarities plus what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct CosineMatrix {
    pub values: Array2<f64>,
    query_unit: Array2<f64>,
    doc_unit: Array2<f64>,
    query_norm: Array1<f64>,
    doc_norm: Array1<f64>,
}

fn unit_rows(x: &Array2<f64>, mask: &[bool]) -> (Array2<f64>, Array1<f64>) {
    let mut unit = x.clone();
    let mut norms = Array1::zeros(x.nrows());
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if mask[i] && norm > 0.0 {
            row /= norm;
            norms[i] = norm;
        } else {
            row.fill(0.0);
        }
    }
    (unit, norms)
}

/// Cosine similarity of every query row with every document row. Padding
/// rows and zero vectors give 0.
pub fn cosine_matrix(query: &Array2<f64>, doc: &Array2<f64>, query_mask: &[bool], doc_mask: &[bool]) -> CosineMatrix {
    let (query_unit, query_norm) = unit_rows(query, query_mask);
    let (doc_unit, doc_norm) = unit_rows(doc, doc_mask);
    let mut values = query_unit.dot(&doc_unit.t());
    values.mapv_inplace(|c| c.clamp(-1.0, 1.0));
    CosineMatrix {
        values,
        query_unit,
        doc_unit,
        query_norm,
        doc_norm,
    }
}

fn unit_backward(d_unit: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut dx = d_unit.clone();
    for ((mut row, u), &norm) in dx.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
        if norm == 0.0 {
            row.fill(0.0);
            continue;
        }
        let along = row.dot(&u);
        row.scaled_add(-along, &u);
        row /= norm;
    }
    dx
}

/// Reverse pass of [`cosine_matrix`]: `(dL/dquery, dL/ddoc)`.
pub fn cosine_backward(cos: &CosineMatrix, d_cos: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let d_query_unit = d_cos.dot(&cos.doc_unit);
    let d_doc_unit = d_cos.t().dot(&cos.query_unit);
    (
        unit_backward(&d_query_unit, &cos.query_unit, &cos.query_norm),
        unit_backward(&d_doc_unit, &cos.doc_unit, &cos.doc_norm),
    )
}

/// `K × n × m` kernel activations with padding rows and columns zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    pub values: Array3<f64>,
    pub query_mask: Vec<bool>,
    pub doc_mask: Vec<bool>,
}

impl KernelTensor {
    pub fn kernels(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn doc_len(&self) -> usize {
        self.values.len_of(Axis(2))
    }
}

/// `exp(-(cos - μ_k)² / (2σ²))` for every kernel and term pair.
pub fn kernel_activations(cos: &Array2<f64>, bank: &KernelBank, query_mask: &[bool], doc_mask: &[bool]) -> KernelTensor {
    let (n, m) = cos.dim();
    let denom = 2.0 * bank.sigma * bank.sigma;
    let mut values = Array3::zeros((bank.len(), n, m));
    for (k, &mu) in bank.centers.iter().enumerate() {
        for i in 0..n {
            if !query_mask[i] {
                continue;
            }
            let cos_row = cos.row(i);
            let mut out = values.slice_mut(ndarray::s![k, i, ..]);
            for ((o, &c), &dm) in out.iter_mut().zip(cos_row.iter()).zip(doc_mask) {
                if dm {
                    let diff = c.clamp(-1.0, 1.0) - mu;
                    *o = (-diff * diff / denom).exp();
                }
            }
        }
    }
    KernelTensor {
        values,
        query_mask: query_mask.to_vec(),
        doc_mask: doc_mask.to_vec(),
    }
}

/// Reverse pass of [`kernel_activations`] with respect to the cosines.
pub fn kernel_backward(cos: &Array2<f64>, bank: &KernelBank, kt: &KernelTensor, d_values: &Array3<f64>) -> Array2<f64> {
    let inv_var = 1.0 / (bank.sigma * bank.sigma);
    let mut d_cos = Array2::zeros(cos.raw_dim());
    for (k, &mu) in bank.centers.iter().enumerate() {
        let act = kt.values.index_axis(Axis(0), k);
        let grad = d_values.index_axis(Axis(0), k);
        ndarray::Zip::from(&mut d_cos)
            .and(cos)
            .and(&act)
            .and(&grad)
            .for_each(|dc, &c, &a, &g| *dc -= g * a * (c - mu) * inv_var);
    }
    d_cos
}

/// Kernel mass per query term inside each sliding document region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSums {
    /// `K × n × R`
    pub sums: Array3<f64>,
    /// Non-padding tokens per region.
    pub counts: Vec<usize>,
    /// Token offset where each region starts.
    pub starts: Vec<usize>,
    pub region_size: usize,
    pub stride: usize,
    pub doc_len: usize,
}

impl RegionSums {
    pub fn regions(&self) -> usize {
        self.starts.len()
    }

    /// End (exclusive) of region `p`, clipped to the document.
    pub fn end(&self, p: usize) -> usize {
        (self.starts[p] + self.region_size).min(self.doc_len)
    }

    /// Token counts divided by the region size, in `[0, 1]`.
    pub fn normalized_counts(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.region_size as f64)
            .collect()
    }
}

/// Sums activations over `[p·stride, p·stride + r_size)` for
/// `p = 0 .. ceil(m / stride)`; trailing partial regions are kept.
pub fn region_sums(kt: &KernelTensor, region_size: usize, stride: usize) -> Result<RegionSums> {
    if region_size == 0 || stride == 0 {
        return Err(TklError::Argument("region size and stride must be positive".into()));
    }
    let (kernels, n, m) = kt.values.dim();
    let regions = m.div_ceil(stride);
    let starts: Vec<usize> = (0..regions).map(|p| p * stride).collect();
    let mut sums = Array3::zeros((kernels, n, regions));
    let counts = starts
        .iter()
        .map(|&s| kt.doc_mask[s..(s + region_size).min(m)].iter().filter(|&&x| x).count())
        .collect();
    for k in 0..kernels {
        for i in 0..n {
            let row = kt.values.slice(ndarray::s![k, i, ..]);
            let row = row.as_slice().expect("contiguous kernel row");
            let mut out = sums.slice_mut(ndarray::s![k, i, ..]);
            for (p, &s) in starts.iter().enumerate() {
                out[p] = row[s..(s + region_size).min(m)].iter().sum();
            }
        }
    }
    Ok(RegionSums {
        sums,
        counts,
        starts,
        region_size,
        stride,
        doc_len: m,
    })
}

/// Reverse pass of [`region_sums`]: spreads each region gradient back over
/// the tokens it covers.
pub fn region_sums_backward(rs: &RegionSums, d_sums: &Array3<f64>) -> Array3<f64> {
    let (kernels, n, _) = d_sums.dim();
    let mut d_values = Array3::zeros((kernels, n, rs.doc_len));
    for k in 0..kernels {
        for i in 0..n {
            let grad = d_sums.slice(ndarray::s![k, i, ..]);
            let mut out = d_values.slice_mut(ndarray::s![k, i, ..]);
            let out = out.as_slice_mut().expect("contiguous");
            for (p, &s) in rs.starts.iter().enumerate() {
                let g = grad[p];
                if g != 0.0 {
                    for v in &mut out[s..rs.end(p)] {
                        *v += g;
                    }
                }
            }
        }
    }
    d_values
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    #[test]
    fn default_bank() {
        let bank = KernelBank::evenly_spaced(11, 0.1).unwrap();
        assert_eq!(bank.len(), 11);
        assert!((bank.centers()[1] + 0.8).abs() < 1e-12);
        assert_eq!(bank.centers()[10], 1.0);
        assert!(KernelBank::new(vec![0.0, 0.0], 0.1).is_err());
        assert!(KernelBank::new(vec![0.0], 0.0).is_err());
        assert!(KernelBank::new(vec![1.5], 0.1).is_err());
    }

    #[test]
    fn cosine_basics() {
        let q = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let d = Array2::from_shape_vec((3, 3), vec![2.0, 4.0, 6.0, 3.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = cosine_matrix(&q, &d, &ones(2), &ones(3));
        assert!((c.values[[0, 0]] - 1.0).abs() < 1e-15);
        assert!(c.values[[0, 1]].abs() < 1e-15); // orthogonal
        assert!((c.values[[0, 2]] - 2.0 / 14f64.sqrt()).abs() < 1e-15);
        assert!(c.values.row(1).iter().all(|&v| v == 0.0)); // zero vector
    }

    #[test]
    fn cosine_hand_fixture() {
        // 2×3 query, 4×3 document
        let q = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let d = Array2::from_shape_vec(
            (4, 3),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0, 0.0],
        )
        .unwrap();
        let c = cosine_matrix(&q, &d, &ones(2), &ones(4));
        let s2 = 2f64.sqrt();
        let s3 = 3f64.sqrt();
        let expect = [
            [1.0, 0.0, 1.0 / s3, -1.0],
            [1.0 / s2, 1.0 / s2, 2.0 / (s2 * s3), -1.0 / s2],
        ];
        for i in 0..2 {
            for j in 0..4 {
                assert!((c.values[[i, j]] - expect[i][j]).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn kernel_values_at_offsets() {
        let bank = KernelBank::evenly_spaced(11, 0.1).unwrap();
        let mu = bank.centers()[5];
        let cos = Array2::from_shape_vec((1, 3), vec![mu, mu + 0.1, mu + 0.3]).unwrap();
        let kt = kernel_activations(&cos, &bank, &[true], &ones(3));
        assert_eq!(kt.values[[5, 0, 0]], 1.0);
        assert!((kt.values[[5, 0, 1]] - 0.60653).abs() < 1e-5);
        assert!((kt.values[[5, 0, 2]] - 0.011109).abs() < 1e-6);
    }

    #[test]
    fn masked_positions_are_zero() {
        let bank = KernelBank::evenly_spaced(3, 0.5).unwrap();
        let cos = Array2::from_elem((2, 4), 0.3);
        let kt = kernel_activations(&cos, &bank, &[true, false], &[true, true, false, true]);
        assert!(kt.values.slice(ndarray::s![.., 1, ..]).iter().all(|&v| v == 0.0));
        assert!(kt.values.slice(ndarray::s![.., 0, 2]).iter().all(|&v| v == 0.0));
        assert!(kt.values[[1, 0, 0]] > 0.0);
    }

    #[test]
    fn single_region_is_row_sum() {
        let values = Array3::from_shape_fn((2, 2, 30), |(k, i, j)| (k + i + j) as f64 * 0.01);
        let kt = KernelTensor {
            values: values.clone(),
            query_mask: ones(2),
            doc_mask: ones(30),
        };
        let rs = region_sums(&kt, 30, 30).unwrap();
        assert_eq!(rs.regions(), 1);
        assert_eq!(rs.sums[[1, 1, 0]], values.slice(ndarray::s![1, 1, ..]).sum());
        assert_eq!(rs.counts, vec![30]);
    }

    #[test]
    fn zero_tensor_gives_zero_sums() {
        let kt = KernelTensor {
            values: Array3::zeros((3, 2, 17)),
            query_mask: ones(2),
            doc_mask: ones(17),
        };
        let rs = region_sums(&kt, 5, 1).unwrap();
        assert_eq!(rs.regions(), 17);
        assert!(rs.sums.iter().all(|&v| v == 0.0));
        assert_eq!(rs.counts[16], 1);
        assert!(region_sums(&kt, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn kernels_bounded_and_symmetric(c in -1.0f64..1.0, k in 0usize..11) {
            let bank = KernelBank::evenly_spaced(11, 0.1).unwrap();
            let mu = bank.centers()[k];
            let cos = Array2::from_shape_vec((1, 1), vec![c]).unwrap();
            let v = kernel_activations(&cos, &bank, &[true], &[true]).values[[k, 0, 0]];
            prop_assert!(v > 0.0 || (c - mu).abs() > 3.0);
            prop_assert!(v <= 1.0);
            let mirrored = 2.0 * mu - c;
            if (-1.0..=1.0).contains(&mirrored) {
                let cos2 = Array2::from_shape_vec((1, 1), vec![mirrored]).unwrap();
                let v2 = kernel_activations(&cos2, &bank, &[true], &[true]).values[[k, 0, 0]];
                prop_assert!((v - v2).abs() < 1e-12);
            }
        }

        #[test]
        fn stride_r_partitions_the_row(m in 1usize..120, r in 1usize..40, seed in 0u64..1000) {
            let values = Array3::from_shape_fn((2, 2, m), |(k, i, j)| {
                (((k * 131 + i * 17 + j) as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0
            });
            let kt = KernelTensor { values: values.clone(), query_mask: ones(2), doc_mask: ones(m) };
            let rs = region_sums(&kt, r, r).unwrap();
            for k in 0..2 {
                for i in 0..2 {
                    let total: f64 = rs.sums.slice(ndarray::s![k, i, ..]).sum();
                    let full: f64 = values.slice(ndarray::s![k, i, ..]).sum();
                    prop_assert!((total - full).abs() < 1e-9);
                }
            }
            prop_assert!(rs.counts.iter().all(|&c| c <= r));
        }

        #[test]
        fn padding_shift_translates_regions(m in 2usize..60, r in 1usize..10) {
            // Prepending one zero (padding-like) column shifts stride-1 regions by one.
            let values = Array3::from_shape_fn((1, 1, m), |(_, _, j)| ((j * 7919) % 13) as f64 / 13.0);
            let mut shifted = Array3::zeros((1, 1, m + 1));
            shifted.slice_mut(ndarray::s![.., .., 1..]).assign(&values);
            let mut mask = ones(m + 1);
            mask[0] = false;
            let a = region_sums(&KernelTensor { values, query_mask: ones(1), doc_mask: ones(m) }, r, 1).unwrap();
            let b = region_sums(&KernelTensor { values: shifted, query_mask: ones(1), doc_mask: mask }, r, 1).unwrap();
            for p in 0..a.regions() {
                prop_assert_eq!(a.sums[[0, 0, p]], b.sums[[0, 0, p + 1]]);
            }
        }

        #[test]
        fn adding_a_match_only_grows_sums(m in 1usize..50, j in 0usize..50, r in 1usize..12) {
            let j = j % m;
            let mut values = Array3::from_shape_fn((1, 1, m), |(_, _, x)| ((x * 31) % 7) as f64 / 10.0);
            let mut mask = ones(m);
            mask[j] = false;
            values[[0, 0, j]] = 0.0;
            let before = region_sums(&KernelTensor { values: values.clone(), query_mask: ones(1), doc_mask: mask.clone() }, r, 1).unwrap();
            values[[0, 0, j]] = 0.4;
            mask[j] = true;
            let after = region_sums(&KernelTensor { values, query_mask: ones(1), doc_mask: mask }, r, 1).unwrap();
            for p in 0..before.regions() {
                prop_assert!(after.sums[[0, 0, p]] >= before.sums[[0, 0, p]]);
            }
        }
    }
}
