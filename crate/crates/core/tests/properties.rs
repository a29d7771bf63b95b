use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use patchsae::metrics::{self, average_precision, CodeMatrix};
use patchsae::sae::{self, Gradients, SaeParams};
use patchsae::store::{self, epoch_permutation, Dataset};
use patchsae::train::init_params;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shard_round_trip_is_bit_exact(rows in 1usize..20, dim in 1usize..9, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let x = gaussian(rows, dim, seed).mapv(|v| v as f32);
        store::write_shard(x.view(), dim, &path).unwrap();
        let (header, back) = store::read_shard(&path).unwrap();
        prop_assert_eq!(header.count, rows as u64);
        prop_assert_eq!(back, x);
    }

    #[test]
    fn dataset_write_open_preserves_rows_and_labels(count in 1usize..40, per_shard in 1usize..12, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let x = gaussian(count, 3, seed).mapv(|v| v as f32);
        let labels: Vec<u16> = (0..count).map(|i| (i % 5) as u16).collect();
        let ds = Dataset::from_matrix(x.clone(), Some(labels.clone()), Some(5)).unwrap();
        let manifest = ds.write(dir.path(), per_shard, &store::DatasetManifest::synthetic()).unwrap();
        let back = Dataset::open(&manifest).unwrap();
        prop_assert_eq!(back.count(), count as u64);
        prop_assert_eq!(back.labels().unwrap(), &labels[..]);
        let batch = back.to_batch().unwrap();
        prop_assert_eq!(batch.x, x.mapv(|v| v as f64));
    }

    #[test]
    fn epoch_is_a_permutation(count in 1u64..300, seed in any::<u64>(), epoch in 0u64..5) {
        let mut ids = epoch_permutation(count, seed, epoch);
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..count).collect::<Vec<_>>());
    }

    #[test]
    fn stream_epoch_covers_every_row(count in 1usize..60, batch in 1usize..16, seed in any::<u64>()) {
        let ds = Dataset::from_matrix(Array2::from_shape_fn((count, 1), |(i, _)| i as f32), None, None).unwrap();
        let mut seen: Vec<u64> = store::stream_epoch(&ds, batch, seed, 0)
            .unwrap()
            .flat_map(|b| b.unwrap().x.column(0).iter().map(|&v| v as u64).collect::<Vec<_>>())
            .collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..count as u64).collect::<Vec<_>>());
    }

    #[test]
    fn normalized_decoder_has_unit_columns(d in 1usize..10, n in 1usize..12, seed in any::<u64>()) {
        let mut params = SaeParams::zeros(n, d);
        params.w_dec = gaussian(d, n, seed) * 7.0;
        sae::normalize_decoder(&mut params).unwrap();
        prop_assert!(params.max_decoder_norm_error() <= 1e-12);
    }

    #[test]
    fn projected_gradient_is_orthogonal_to_column(d in 1usize..10, n in 1usize..12, seed in any::<u64>()) {
        let params = init_params(n, d, seed);
        let mut grads = Gradients::zeros_like(&params);
        grads.w_dec = gaussian(d, n, seed ^ 1);
        sae::project_decoder_gradient(&params, &mut grads).unwrap();
        for (g, c) in grads.w_dec.columns().into_iter().zip(params.w_dec.columns()) {
            let bound = 1e-12 * (g.dot(&g).sqrt() * c.dot(&c).sqrt()).max(1e-300);
            prop_assert!(g.dot(&c).abs() <= bound.max(1e-15));
        }
    }

    #[test]
    fn ap_invariant_to_monotone_transform(scores in prop::collection::vec(-5.0f64..5.0, 2..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = scores.iter().map(|_| rand::Rng::random_bool(&mut rng, 0.4)).collect();
        let transformed: Vec<f64> = scores.iter().map(|&s| 3.0 * s.exp() + 1.0).collect();
        prop_assert_eq!(average_precision(&scores, &labels), average_precision(&transformed, &labels));
    }

    #[test]
    fn nmse_is_rotation_invariant(rows in 3usize..20, seed in any::<u64>()) {
        let x = gaussian(rows, 2, seed);
        let r = &x + &(gaussian(rows, 2, seed ^ 7) * 0.3);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = ndarray::array![[c, -s], [s, c]];
        let a = metrics::nmse(x.view(), r.view()).unwrap();
        let b = metrics::nmse(x.dot(&rot).view(), r.dot(&rot).view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn code_matrix_matches_dense(rows in 1usize..20, cols in 1usize..8, seed in any::<u64>()) {
        let dense = gaussian(rows, cols, seed).mapv(|v| if v > 0.3 { (v as f32) as f64 } else { 0.0 });
        let m = CodeMatrix::from_dense(dense.view());
        prop_assert_eq!(m.nnz(), dense.iter().filter(|&&v| v != 0.0).count());
        for j in 0..cols {
            prop_assert_eq!(m.dense_column(j), dense.column(j).to_vec());
        }
        prop_assert_eq!(CodeMatrix::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}

#[test]
fn labels_sidecar_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.u16");
    let labels = vec![0u16, 65535, 7, 7, 1];
    store::write_labels(&path, &labels).unwrap();
    assert_eq!(store::read_labels(&path).unwrap(), labels);
}

#[test]
fn nmse_of_mean_predictor_is_one() {
    let x = gaussian(30, 4, 5);
    let mean: Array1<f64> = metrics::column_mean(x.view());
    let recon = Array2::from_shape_fn(x.raw_dim(), |(_, j)| mean[j]);
    assert_abs_diff_eq!(metrics::nmse(x.view(), recon.view()).unwrap(), 1.0, epsilon = 1e-12);
}
