mod common;

use common::oracle;
use metaseg_core::ops::{self, ConvSpec};
use metaseg_core::{Shape, Tensor};
use proptest::prelude::*;

fn arb_tensor(max_c: usize, max_side: usize, bound: f64) -> impl Strategy<Value = Tensor> {
    (1usize..=2, 1..=max_c, 1..=max_side, 1..=max_side).prop_flat_map(move |(n, c, h, w)| {
        prop::collection::vec(-bound..bound, n * c * h * w).prop_map(move |d| Tensor::new(Shape::new(n, c, h, w), d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in arb_tensor(3, 6, 30.0)) {
        let y = ops::softmax_lastdim(&x);
        let s = y.shape();
        for row in y.data().chunks(s.w) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn pooling_and_resizing_keep_constants(v in -5.0f64..5.0, r in 1usize..=4, k in 1usize..=3, dh in 0usize..6, dw in 0usize..6) {
        let x = Tensor::full(Shape::new(1, 2, r * k, r * k), v);
        let (oh, ow) = (r * k + dh, r * k + dw);
        let p = ops::avg_pool(&x, r).unwrap();
        prop_assert!(p.data().iter().all(|&a| (a - v).abs() < 1e-12));
        let u = ops::upsample_bilinear(&x, oh, ow).unwrap();
        prop_assert!(u.data().iter().all(|&a| (a - v).abs() < 1e-12));
    }

    #[test]
    fn resize_matches_oracle(x in arb_tensor(2, 5, 1.0), dh in 0usize..10, dw in 0usize..10) {
        let (oh, ow) = (x.shape().h + dh, x.shape().w + dw);
        let got = ops::upsample_bilinear(&x, oh, ow).unwrap();
        prop_assert!(got.max_abs_diff(&oracle::upsample(&x, oh, ow)) < 1e-12);
    }

    #[test]
    fn shrinking_resize_is_rejected(x in arb_tensor(2, 5, 1.0)) {
        let s = x.shape();
        prop_assume!(s.h > 1);
        prop_assert!(ops::upsample_bilinear(&x, s.h - 1, s.w).is_err());
    }

    #[test]
    fn identity_layers(x in arb_tensor(4, 5, 3.0)) {
        let c = x.shape().c;
        prop_assert_eq!(ops::linear(&x, &Tensor::eye(c, c), None).unwrap(), x.clone());
        let mut k = Tensor::zeros(Shape::new(c, c, 3, 3));
        for i in 0..c {
            *k.at_mut(i, i, 1, 1) = 1.0;
        }
        prop_assert_eq!(ops::conv2d(&x, &k, None, ConvSpec::new(1, 1, 1)).unwrap(), x);
    }

    #[test]
    fn linear_matches_oracle(x in arb_tensor(4, 4, 2.0), cout in 1usize..5, seed in any::<u64>()) {
        let w = common::random(Shape::matrix(x.shape().c, cout), seed, 1.0);
        let b = common::random(Shape::vector(cout), seed ^ 1, 1.0);
        let got = ops::linear(&x, &w, Some(&b)).unwrap();
        prop_assert!(got.max_abs_diff(&oracle::linear(&x, &w, Some(&b))) < 1e-12);
    }
}
