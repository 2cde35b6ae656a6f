//! Fast f32 kernels against the f64 reference loops.

use proptest::prelude::*;
use reviewkd::oracles::{
    adaptive_max_pool_naive, conv2d_naive, cross_entropy_naive, hcl_naive, interpolate_nearest_naive,
};
use reviewkd::review::{hcl, HclSpec};
use reviewkd::tensor::kernels;
use reviewkd::tensor::{Tape, Tensor};

const TOL: f64 = 1e-6;

fn tensor(shape: Vec<usize>, values: Vec<f32>) -> Tensor<f32> {
    Tensor::new(shape, values).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, n)
}

fn max_diff(fast: &Tensor<f32>, slow: &Tensor<f64>) -> f64 {
    assert_eq!(fast.shape(), slow.shape());
    fast.data()
        .iter()
        .zip(slow.data())
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max)
}

fn conv_case() -> impl Strategy<Value = (Tensor<f32>, Tensor<f32>, Tensor<f32>, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..5, 3usize..9, prop::sample::select(vec![1usize, 3]), 1usize..3)
        .prop_flat_map(|(n, c, o, h, k, stride)| {
            let pad = k / 2;
            (
                values(n * c * h * h).prop_map(move |v| tensor(vec![n, c, h, h], v)),
                values(o * c * k * k).prop_map(move |v| tensor(vec![o, c, k, k], v)),
                values(o).prop_map(move |v| tensor(vec![o], v)),
                Just(stride),
                Just(pad),
            )
        })
}

fn plane_case(max_side: usize) -> impl Strategy<Value = Tensor<f32>> {
    (1usize..3, 1usize..4, 1usize..max_side)
        .prop_flat_map(|(n, c, h)| values(n * c * h * h).prop_map(move |v| tensor(vec![n, c, h, h], v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv2d_matches_direct_sum((x, k, b, stride, pad) in conv_case()) {
        let fast = kernels::conv2d(&x, &k, Some(&b), stride, pad).unwrap();
        let slow = conv2d_naive(&x.cast(), &k.cast(), Some(&b.cast()), stride, pad).unwrap();
        prop_assert!(max_diff(&fast, &slow) < TOL);
    }

    #[test]
    fn adaptive_max_pool_matches_windows(x in plane_case(10), frac in 0.0f64..1.0) {
        let h = x.shape()[2];
        let size = 1 + ((h - 1) as f64 * frac) as usize;
        let (fast, _) = kernels::adaptive_max_pool(&x, size).unwrap();
        let slow = adaptive_max_pool_naive(&x.cast(), size).unwrap();
        prop_assert!(max_diff(&fast, &slow) < TOL);
    }

    #[test]
    fn interpolate_matches_scan(x in plane_case(6), oh in 1usize..12, ow in 1usize..12) {
        let fast = kernels::interpolate_nearest(&x, oh, ow).unwrap();
        let slow = interpolate_nearest_naive(&x.cast(), oh, ow).unwrap();
        prop_assert!(max_diff(&fast, &slow) < TOL);
    }

    #[test]
    fn cross_entropy_matches_loop(
        (logits, labels) in (1usize..6, 2usize..12).prop_flat_map(|(n, k)| (
            prop::collection::vec(-5.0f32..5.0, n * k).prop_map(move |v| tensor(vec![n, k], v)),
            prop::collection::vec(0..k, n),
        ))
    ) {
        let (fast, _) = kernels::softmax_cross_entropy(&logits, &labels).unwrap();
        let slow = cross_entropy_naive(&logits.cast(), &labels).unwrap();
        prop_assert!((fast.item() as f64 - slow).abs() < TOL);
    }

    #[test]
    fn hcl_matches_level_loops(
        (a, b) in (1usize..3, 1usize..4, 4usize..9).prop_flat_map(|(n, c, h)| (
            values(n * c * h * h).prop_map(move |v| tensor(vec![n, c, h, h], v)),
            values(n * c * h * h).prop_map(move |v| tensor(vec![n, c, h, h], v)),
        )),
        normalize in any::<bool>(),
    ) {
        let spec = HclSpec::parse("h,h/2,1", "1,0.5,0.25", normalize).unwrap();
        let mut tape = Tape::<f32>::no_grad();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l = hcl(&mut tape, va, vb, &spec).unwrap();
        let slow = hcl_naive(&a.cast(), &b.cast(), &spec).unwrap();
        prop_assert!((tape.value(l).item() as f64 - slow).abs() < TOL);
    }
}
