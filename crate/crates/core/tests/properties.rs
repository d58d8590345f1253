//! Randomized invariants over the quantizer and rotation primitives.

use proptest::prelude::*;
use stq::linalg::{fwht, fwht_inverse};
use stq::quant::{Granularity, QuantParams, Scheme};
use stq::tensor::Tensor;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, len)
}

proptest! {
    #[test]
    fn roundtrip_error_within_half_scale(data in finite_vec(64), bits in prop::sample::select(vec![4u8, 6, 8])) {
        let x = Tensor::new(vec![64], data).unwrap();
        let qp = QuantParams::calibrate(&x, bits, Scheme::Symmetric, Granularity::PerTensor).unwrap();
        let back = qp.fake_quant(&x);
        let s = qp.scales[0];
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= s / 2.0 + 1e-12);
        }
    }

    #[test]
    fn quantize_is_monotone(data in finite_vec(64)) {
        let x = Tensor::new(vec![64], data).unwrap();
        let qp = QuantParams::calibrate(&x, 4, Scheme::Asymmetric, Granularity::PerTensor).unwrap();
        let q = qp.quantize(&x);
        let mut idx: Vec<usize> = (0..64).collect();
        idx.sort_by(|&a, &b| x.data()[a].partial_cmp(&x.data()[b]).unwrap());
        for w in idx.windows(2) {
            prop_assert!(q.data()[w[0]] <= q.data()[w[1]]);
        }
    }

    #[test]
    fn rotation_preserves_norm_and_inverts(data in finite_vec(32), seed in any::<u64>()) {
        let x = Tensor::new(vec![2, 16], data).unwrap();
        let y = fwht(&x, seed).unwrap();
        let n0: f64 = x.data().iter().map(|v| v * v).sum();
        let n1: f64 = y.data().iter().map(|v| v * v).sum();
        prop_assert!((n0 - n1).abs() <= 1e-9 * n0.max(1.0));
        let back = fwht_inverse(&y, seed).unwrap();
        prop_assert!(x.max_abs_diff(&back) <= 1e-10);
    }

    #[test]
    fn fake_quant_is_idempotent(data in finite_vec(32)) {
        let x = Tensor::new(vec![32], data).unwrap();
        let qp = QuantParams::calibrate(&x, 6, Scheme::Symmetric, Granularity::PerTensor).unwrap();
        let once = qp.fake_quant(&x);
        let twice = qp.fake_quant(&once);
        prop_assert!(once.max_abs_diff(&twice) == 0.0);
    }
}
