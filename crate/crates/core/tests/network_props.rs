use proptest::prelude::*;

use tpis::neuralseg::layers::softmax_forward;
use tpis::neuralseg::{build_net, desk_reference, focal_loss, forward, FeatureTensor};

fn logits_strategy() -> impl Strategy<Value = FeatureTensor<f64>> {
    (1usize..3, 1usize..5, 1usize..5, 2usize..5).prop_flat_map(|(b, h, w, c)| {
        proptest::collection::vec(-30.0..30.0f64, b * h * w * c)
            .prop_map(move |v| FeatureTensor::from_vec((b, h, w, c), v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_sum_to_one(x in logits_strategy()) {
        let p = softmax_forward(&x);
        for px in p.data.chunks(p.channels) {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn focal_loss_is_nonnegative(x in logits_strategy(), alpha in 0.0..2.0f64, gamma in 0.0..4.0f64, seed in 0usize..1000) {
        let p = softmax_forward(&x);
        let targets: Vec<usize> = (0..p.batch * p.pixels()).map(|i| (i * 31 + seed) % p.channels).collect();
        let l = focal_loss(&p, &targets, alpha, gamma, p.batch).unwrap();
        prop_assert!(l.value >= 0.0);
        prop_assert!(l.value.is_finite());
        prop_assert!(l.grad_logits.is_finite());
    }
}

#[test]
fn census_is_stable_across_builds() {
    let spec = desk_reference(2, 16, 24, [4, 8, 8]).unwrap();
    let (a, ca) = build_net::<f32>(&spec, 1).unwrap();
    let (b, cb) = build_net::<f32>(&spec, 2).unwrap();
    assert_eq!(ca, cb);
    assert_ne!(a, b);
    let (c, _) = build_net::<f32>(&spec, 1).unwrap();
    assert_eq!(a, c);
}

#[test]
fn inference_forward_is_pure_and_normalized() {
    let spec = desk_reference(3, 16, 24, [4, 8, 8]).unwrap();
    let (params, _) = build_net::<f32>(&spec, 5).unwrap();
    let input = FeatureTensor::from_vec((2, 16, 24, 1), (0..2 * 16 * 24).map(|i| ((i * 13) % 17) as f32 / 17.0).collect());
    let a = forward(&spec, &params, &input).unwrap();
    let b = forward(&spec, &params, &input).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), (2, 16, 24, 4));
    for px in a.data.chunks(4) {
        assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn incompatible_input_is_rejected() {
    let spec = desk_reference(2, 16, 24, [4, 8, 8]).unwrap();
    let (params, _) = build_net::<f32>(&spec, 0).unwrap();
    let odd = FeatureTensor::from_vec((1, 15, 24, 1), vec![0.0; 15 * 24]);
    assert!(forward(&spec, &params, &odd).is_err());
}
