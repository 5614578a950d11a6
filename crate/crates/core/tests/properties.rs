mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tearflow::metrics::{hd95, ImageMetrics, SegMask};
use tearflow::model::{TfNet, TfNetConfig};
use tearflow::params::Parameterized;
use tearflow::reparam::{fold_bn, pad_1x1_to_3x3};
use tearflow::tensor::{
    adaptive_avg_pool, batchnorm_infer, bilinear_resize, conv2d, conv2d_direct, softmax_channels, BatchNormParams,
    ConvParams, Shape, Tensor,
};

use common::random_tensor;

fn conv_case(seed: u64, cin: usize, cout: usize, k: usize, stride: usize, depthwise: bool) -> (ConvParams<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cout, groups) = if depthwise { (cin, cin) } else { (cout, 1) };
    let w = random_tensor(&mut rng, Shape::new(cout, cin / groups, k, k), -1.0, 1.0);
    let p = ConvParams::new(w, None, stride, k / 2, groups).unwrap();
    let x = random_tensor(&mut rng, Shape::new(2, cin, 9, 7), -1.0, 1.0);
    (p, x)
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn convolution_is_linear(seed in any::<u64>(), cin in 1usize..6, cout in 1usize..6,
                             k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3,
                             depthwise in any::<bool>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (p, x) = conv_case(seed, cin, cout, k, stride, depthwise);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let y = random_tensor(&mut rng, x.shape(), -1.0, 1.0);
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &p).unwrap();
        let rhs = conv2d(&x, &p).unwrap().scale(a).add(&conv2d(&y, &p).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn gemm_convolution_matches_direct_loops(seed in any::<u64>(), cin in 1usize..6, cout in 1usize..6,
                                             k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3,
                                             depthwise in any::<bool>()) {
        let (p, x) = conv_case(seed, cin, cout, k, stride, depthwise);
        let a = conv2d(&x, &p).unwrap();
        let b = conv2d_direct(&x, &p).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn folding_a_norm_preserves_the_function(seed in any::<u64>(), cin in 1usize..5, cout in 1usize..5) {
        let (p, x) = conv_case(seed, cin, cout, 1, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bn = BatchNormParams::<f64>::neutral(p.out_channels(), 1e-5);
        for c in 0..bn.channels() {
            bn.gamma[c] = rand::Rng::gen_range(&mut rng, 0.2..2.0);
            bn.beta[c] = rand::Rng::gen_range(&mut rng, -1.0..1.0);
            bn.running_mean[c] = rand::Rng::gen_range(&mut rng, -1.0..1.0);
            bn.running_var[c] = rand::Rng::gen_range(&mut rng, 0.1..3.0);
        }
        let reference = batchnorm_infer(&conv2d(&x, &p).unwrap(), &bn).unwrap();
        let folded = fold_bn(&p, &bn).unwrap();
        prop_assert!(conv2d(&x, &folded).unwrap().max_abs_diff(&reference).unwrap() < 1e-12);
        // a 1x1 kernel lifted to 3x3 with padding 1 computes the same map
        let lifted = pad_1x1_to_3x3(&folded).unwrap();
        prop_assert!(conv2d(&x, &lifted).unwrap().max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn pooling_preserves_the_mean_on_even_tilings(seed in any::<u64>(), oh in 1usize..5, ow in 1usize..5,
                                                  fh in 1usize..4, fw in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, Shape::new(1, 2, oh * fh, ow * fw), -5.0, 5.0);
        let y = adaptive_avg_pool(&x, oh, ow).unwrap();
        for c in 0..2 {
            let mx: f64 = x.plane(0, c).iter().sum::<f64>() / x.plane(0, c).len() as f64;
            let my: f64 = y.plane(0, c).iter().sum::<f64>() / y.plane(0, c).len() as f64;
            prop_assert!((mx - my).abs() < 1e-12);
        }
        let g = adaptive_avg_pool(&x, 1, 1).unwrap();
        prop_assert!((g.at(0, 0, 0, 0) - x.plane(0, 0).iter().sum::<f64>() / x.plane(0, 0).len() as f64).abs() < 1e-12);
    }

    #[test]
    fn resizing_keeps_constants_and_same_size_is_identity(seed in any::<u64>(), h in 1usize..9, w in 1usize..9,
                                                          oh in 1usize..17, ow in 1usize..17, v in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, Shape::new(1, 2, h, w), -1.0, 1.0);
        prop_assert_eq!(bilinear_resize(&x, h, w).unwrap(), x);
        let c = Tensor::full(Shape::new(1, 1, h, w), v);
        let r = bilinear_resize(&c, oh, ow).unwrap();
        prop_assert!(r.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }

    #[test]
    fn softmax_is_a_distribution(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, Shape::new(2, 3, 4, 5), -50.0, 50.0);
        let p = softmax_channels(&x).unwrap();
        for n in 0..2 {
            for i in 0..20 {
                let s: f64 = (0..3).map(|c| p.plane(n, c)[i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlap_metrics_are_symmetric(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::checks::random_mask(&mut rng, h, w);
        let b = common::checks::random_mask(&mut rng, h, w);
        let ab = ImageMetrics::compute(&a, &b).unwrap();
        let ba = ImageMetrics::compute(&b, &a).unwrap();
        prop_assert_eq!(ab.classes[1].iou, ba.classes[1].iou);
        prop_assert_eq!(ab.classes[1].dsc, ba.classes[1].dsc);
        // pooled distances are summed in a different order when swapped
        let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs() < 1e-12,
            (x, y) => x == y,
        };
        prop_assert!(close(ab.hd95, ba.hd95));
        prop_assert!(close(ab.assd, ba.assd));
    }
}

#[test]
fn building_and_running_are_deterministic() {
    let mut cfg = TfNetConfig::with_widths([8, 8, 16, 16, 32]);
    cfg.num_branches = 2;
    let a = TfNet::<f32>::build(cfg.clone(), 77).unwrap();
    let b = TfNet::<f32>::build(cfg.clone(), 77).unwrap();
    let c = TfNet::<f32>::build(cfg, 78).unwrap();
    let bits = |n: &TfNet<f32>| -> Vec<u32> { n.params().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = common::random_tensor_f32(&mut rng, Shape::new(2, 3, 64, 64), 0.0, 1.0);
    let many = a.forward(&x).unwrap();
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| a.forward(&x).unwrap());
    // identical bits regardless of the thread count
    assert_eq!(
        many.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        one.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn a_single_pixel_mask_has_zero_distance_to_itself() {
    let m = SegMask::from_fn(5, 5, |y, x| (y, x) == (0, 4));
    assert_eq!(hd95(&m, &m).unwrap(), Some(0.0));
}
