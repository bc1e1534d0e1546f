mod common;

use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use tkl::kernel::{cosine_matrix, kernel_activations, region_sums, KernelBank, KernelTensor};
use tkl::scoring::{saturate, top_local_max, topography, RelevanceTopography, SaturationMode, SaturationParameters};

fn nested(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter()
        .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

/// `K × n × m` tensor with a doc mask whose trailing positions are padding.
fn tensor_strategy() -> impl Strategy<Value = (Array3<f64>, Vec<bool>)> {
    (1usize..4, 1usize..4, 1usize..40).prop_flat_map(|(k, n, m)| {
        (
            prop::collection::vec(0.0f64..1.0, k * n * m),
            0..=m,
        )
            .prop_map(move |(vals, pad)| {
                let mask: Vec<bool> = (0..m).map(|j| j < m - pad).collect();
                let mut values = Array3::from_shape_vec((k, n, m), vals).unwrap();
                for ((_, _, j), v) in values.indexed_iter_mut() {
                    if !mask[j] {
                        *v = 0.0;
                    }
                }
                (values, mask)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn region_sums_match_naive((values, mask) in tensor_strategy(), r in 1usize..12, stride_is_r in any::<bool>()) {
        let stride = if stride_is_r { r } else { 1 };
        let n = values.dim().1;
        let kt = KernelTensor { values: values.clone(), query_mask: vec![true; n], doc_mask: mask.clone() };
        let rs = region_sums(&kt, r, stride).unwrap();
        let (expected, starts) = common::region_sums(&nested(&values), r, stride);
        prop_assert_eq!(&rs.starts, &starts);
        for (p, &s) in starts.iter().enumerate() {
            let real = mask.iter().enumerate().filter(|&(j, &m)| m && j >= s && j < s + r).count();
            prop_assert_eq!(rs.counts[p], real);
        }
        for ((k, i, p), v) in rs.sums.indexed_iter() {
            prop_assert!((v - expected[k][i][p]).abs() <= 1e-6);
        }
    }

    #[test]
    fn topography_matches_naive(
        (sat, _) in tensor_strategy(),
        w in prop::collection::vec(-2.0f64..2.0, 3),
        qmask_bits in any::<u8>(),
    ) {
        let (k, n, m) = sat.dim();
        let weights = Array1::from(w[..k].to_vec());
        let qmask: Vec<bool> = (0..n).map(|i| i == 0 || qmask_bits & (1 << i) != 0).collect();
        let kt = KernelTensor { values: Array3::zeros((k, n, m)), query_mask: qmask.clone(), doc_mask: vec![true; m] };
        let rs = region_sums(&kt, 1, 1).unwrap();
        let topo = topography(&sat, &weights, &qmask, &rs);
        let expected = common::topography(&nested(&sat), weights.as_slice().unwrap(), &qmask);
        for (a, b) in topo.values.iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn top_local_max_matches_naive(
        values in prop::collection::vec(prop_oneof![prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0, 2.0]), -5.0f64..5.0], 1..60),
        stride in 1usize..4,
        t in 1usize..5,
        f in 0usize..4,
        sep in 0usize..15,
    ) {
        let topo = RelevanceTopography::from_values(values.clone(), 10, stride);
        let got = top_local_max(&topo, t, f, sep);
        let (positions, features) = common::top_local_max(&values, &topo.starts, t, f, sep);
        let got_positions: Vec<usize> = got.peaks.iter().map(|p| p.position).collect();
        prop_assert_eq!(got_positions, positions);
        prop_assert_eq!(got.features.len(), features.len());
        for (a, b) in got.features.iter().zip(&features) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn cosines_and_kernels_are_bounded(
        q in prop::collection::vec(-3.0f64..3.0, 12),
        d in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        let q = Array2::from_shape_vec((3, 4), q).unwrap();
        let d = Array2::from_shape_vec((5, 4), d).unwrap();
        let cos = cosine_matrix(&q, &d, &[true; 3], &[true, true, true, true, false]);
        let bank = KernelBank::evenly_spaced(11, 0.1).unwrap();
        let kt = kernel_activations(&cos.values, &bank, &[true; 3], &[true, true, true, true, false]);
        for v in cos.values.iter() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(v));
        }
        for ((_, _, j), v) in kt.values.indexed_iter() {
            prop_assert!((0.0..=1.0).contains(v));
            if j == 4 {
                prop_assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn saturation_is_finite_and_monotone_in_mass(
        mass in prop::collection::vec(0.0f64..30.0, 8),
        salience in 0.0f64..8.0,
        w in prop::collection::vec(-0.5f64..0.5, 6),
    ) {
        let mut sorted = mass.clone();
        sorted.sort_by(f64::total_cmp);
        let kt = KernelTensor { values: Array3::zeros((1, 1, 8)), query_mask: vec![true], doc_mask: vec![true; 8] };
        let mut rs = region_sums(&kt, 1, 1).unwrap();
        rs.sums = Array3::from_shape_vec((1, 1, 8), sorted).unwrap();
        let params = SaturationParameters { weights: Array2::from_shape_vec((3, 2), w).unwrap(), ..Default::default() };
        for mode in [SaturationMode::Embedding, SaturationMode::Log, SaturationMode::Linear] {
            let sat = saturate(&rs, &[salience], &params, mode);
            let row: Vec<f64> = sat.values.iter().copied().collect();
            prop_assert!(row.iter().all(|v| v.is_finite()));
            let up = row.windows(2).all(|p| p[1] >= p[0] - 1e-12);
            let down = row.windows(2).all(|p| p[1] <= p[0] + 1e-12);
            prop_assert!(up || down, "{mode:?} not monotone: {row:?}");
        }
    }
}

#[test]
fn kernel_values_at_offsets_from_each_center() {
    let bank = KernelBank::evenly_spaced(11, 0.1).unwrap();
    let sigma = bank.sigma();
    for &mu in bank.centers() {
        for (offset, expected) in [
            (0.0, 1.0),
            (sigma, (-0.5f64).exp()),
            (-sigma, (-0.5f64).exp()),
            (3.0 * sigma, (-4.5f64).exp()),
            (-3.0 * sigma, (-4.5f64).exp()),
        ] {
            let c = mu + offset;
            if !(-1.0..=1.0).contains(&c) {
                continue;
            }
            let cos = Array2::from_elem((1, 1), c);
            let kt = kernel_activations(&cos, &bank, &[true], &[true]);
            let k = bank.centers().iter().position(|&m| m == mu).unwrap();
            assert!((kt.values[[k, 0, 0]] - expected).abs() < 1e-6, "mu={mu} offset={offset}");
        }
    }
}

#[test]
fn bank_centers() {
    let bank = KernelBank::evenly_spaced(11, 0.1).unwrap();
    let expected = [-1.0, -0.8, -0.6, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    for (a, b) in bank.centers().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}
