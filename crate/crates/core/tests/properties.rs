//! Randomized invariants over the tensor core and metrics.

use boqsa_core::metrics::{adjusted_rand_index, fg_extraction};
use boqsa_core::tensor::Tensor;
use proptest::prelude::*;

fn small_tensor(max_dim: usize) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    proptest::collection::vec(1..=max_dim, 1..=3).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        proptest::collection::vec(-10.0f64..10.0, n).prop_map(move |data| (dims.clone(), data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_add_matches_explicit_tiling(
        (dims, data) in small_tensor(4),
        scalar in -5.0f64..5.0,
    ) {
        // broadcast a [1, ..., 1, last] row over the full shape
        let a = Tensor::from_vec(data.clone(), dims.clone()).unwrap();
        let last = *dims.last().unwrap();
        let row: Vec<f64> = (0..last).map(|i| scalar + i as f64).collect();
        let b = Tensor::from_vec(row, vec![last]).unwrap();
        let direct = a.add(&b).unwrap();
        let tiled = a
            .add(&b.broadcast_to(dims.clone()).unwrap())
            .unwrap();
        prop_assert_eq!(direct.to_vec(), tiled.to_vec());
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized(
        data in proptest::collection::vec(-30.0f64..30.0, 2..24),
        shift in -50.0f64..50.0,
    ) {
        let n = data.len();
        let x = Tensor::from_vec(data, vec![n]).unwrap();
        let a = x.softmax(0).unwrap().to_vec();
        let b = x.add_scalar(shift).softmax(0).unwrap().to_vec();
        let sum: f64 = a.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
            prop_assert!(*x >= 0.0);
        }
    }

    #[test]
    fn ari_is_relabeling_invariant(
        labels in proptest::collection::vec(0u32..4, 2..48),
        other in proptest::collection::vec(0u32..4, 2..48),
    ) {
        let n = labels.len().min(other.len());
        let a = &labels[..n];
        let b = &other[..n];
        let base = adjusted_rand_index(a, b);
        // permute label ids on both sides
        let relabel = |v: &[u32], off: u32| -> Vec<u32> {
            v.iter().map(|x| (x + off) % 7 + 100).collect()
        };
        let r1 = adjusted_rand_index(&relabel(a, 3), b);
        let r2 = adjusted_rand_index(a, &relabel(b, 5));
        prop_assert!((base - r1).abs() < 1e-12);
        prop_assert!((base - r2).abs() < 1e-12);
    }

    #[test]
    fn dice_follows_iou_identity(
        pred in proptest::collection::vec(0u32..3, 4..64),
        fg in proptest::collection::vec(any::<bool>(), 4..64),
    ) {
        let n = pred.len().min(fg.len());
        if let Some((iou, dice)) = fg_extraction(&pred[..n], 3, &fg[..n]) {
            prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
            prop_assert!(dice >= iou);
        }
    }

    #[test]
    fn mse_loss_matches_brute_force(
        a in proptest::collection::vec(-2.0f64..2.0, 1..48),
        b in proptest::collection::vec(-2.0f64..2.0, 1..48),
    ) {
        let n = a.len().min(b.len());
        let ta = Tensor::from_vec(a[..n].to_vec(), vec![n]).unwrap();
        let tb = Tensor::from_vec(b[..n].to_vec(), vec![n]).unwrap();
        let got = ta.mse_loss(&tb).unwrap().item();
        let want: f64 = a[..n]
            .iter()
            .zip(&b[..n])
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>() / n as f64;
        prop_assert!((got - want).abs() < 1e-9);
    }
}
