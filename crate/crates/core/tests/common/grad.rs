//! Central finite-difference checks of every backward pass, in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tearflow::loss::{weighted_ce, weighted_ce_grad};
use tearflow::model::{TfNet, TfNetConfig};
use tearflow::params::{ParamKind, Parameterized};
use tearflow::tensor::{
    adaptive_avg_pool, adaptive_avg_pool_vjp, batchnorm_infer, batchnorm_infer_vjp, batchnorm_train,
    batchnorm_train_vjp, bilinear_resize, bilinear_resize_vjp, concat_channels, concat_channels_vjp, conv2d,
    conv2d_vjp, relu, relu_vjp, BatchNormParams, ConvParams, Shape, Tensor,
};

use super::random_tensor;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;
/// Both derivatives below this magnitude are treated as agreeing zeros.
pub const ZERO_FLOOR: f64 = 1e-8;

#[derive(Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_rel <= TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare `analytic[i]` with the central difference of `f` along coordinate `i`
/// of `x`, for every `i` in `coords`.
fn compare(
    name: &str,
    x: &mut [f64],
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> GradCheck {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in coords {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(x);
        x[i] = orig - STEP;
        let down = f(x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
        checked += 1;
    }
    GradCheck {
        name: name.to_string(),
        checked,
        worst_rel: worst,
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).unwrap()
}

pub fn conv_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    // (in_ch, out_ch, k, stride, groups, bias, h, w)
    let cases = [
        (2, 3, 3, 1, 1, true, 5, 5),
        (2, 2, 3, 2, 1, true, 6, 5),
        (4, 4, 3, 1, 4, false, 5, 6),
        (4, 4, 3, 2, 4, true, 7, 7),
        (4, 6, 1, 1, 2, true, 4, 4),
        (3, 5, 1, 2, 1, false, 6, 6),
    ];
    for (ci, (cin, cout, k, stride, groups, bias, h, w)) in cases.into_iter().enumerate() {
        let x = random_tensor(&mut rng, Shape::new(2, cin, h, w), -1.0, 1.0);
        let weight = random_tensor(&mut rng, Shape::new(cout, cin / groups, k, k), -1.0, 1.0);
        let b = bias.then(|| (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
        let p = ConvParams::new(weight, b, stride, k / 2, groups).unwrap();
        let y = conv2d(&x, &p).unwrap();
        let up = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let g = conv2d_vjp(&x, &p, &up).unwrap();
        let tag = format!("conv[{ci}] k{k} s{stride} g{groups}");

        let mut xd = x.data().to_vec();
        let n = xd.len();
        out.push(compare(&format!("{tag} input"), &mut xd, g.input.data(), 0..n, &mut |d| {
            dot(&conv2d(&with_data(&x, d), &p).unwrap(), &up)
        }));

        let mut wd = p.weight.data().to_vec();
        let n = wd.len();
        out.push(compare(&format!("{tag} weight"), &mut wd, g.weight.data(), 0..n, &mut |d| {
            let mut q = p.clone();
            q.weight = with_data(&p.weight, d);
            dot(&conv2d(&x, &q).unwrap(), &up)
        }));

        if bias {
            let mut bd = p.bias.clone().unwrap();
            let n = bd.len();
            out.push(compare(&format!("{tag} bias"), &mut bd, &g.bias, 0..n, &mut |d| {
                let mut q = p.clone();
                q.bias = Some(d.to_vec());
                dot(&conv2d(&x, &q).unwrap(), &up)
            }));
        }
    }
    out
}

fn random_bn(rng: &mut ChaCha8Rng, c: usize) -> BatchNormParams<f64> {
    let mut bn = BatchNormParams::neutral(c, 1e-5);
    for i in 0..c {
        bn.gamma[i] = rng.gen_range(0.5..1.5);
        bn.beta[i] = rng.gen_range(-0.5..0.5);
        bn.running_mean[i] = rng.gen_range(-0.5..0.5);
        bn.running_var[i] = rng.gen_range(0.5..2.0);
    }
    bn
}

pub fn batchnorm_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = random_tensor(&mut rng, Shape::new(2, 3, 4, 5), -2.0, 2.0);
    let bn = random_bn(&mut rng, 3);
    let up = random_tensor(&mut rng, x.shape(), -1.0, 1.0);

    // training mode: batch statistics depend on the input
    let (_, stats) = batchnorm_train(&x, &bn).unwrap();
    let g = batchnorm_train_vjp(&bn, &stats, &up).unwrap();
    let train_loss = |x: &Tensor<f64>, bn: &BatchNormParams<f64>| dot(&batchnorm_train(x, bn).unwrap().0, &up);
    let mut xd = x.data().to_vec();
    let n = xd.len();
    out.push(compare("batchnorm(train) input", &mut xd, g.input.data(), 0..n, &mut |d| {
        train_loss(&with_data(&x, d), &bn)
    }));
    let mut gd = bn.gamma.clone();
    out.push(compare("batchnorm(train) gamma", &mut gd, &g.gamma, 0..3, &mut |d| {
        let mut b = bn.clone();
        b.gamma = d.to_vec();
        train_loss(&x, &b)
    }));
    let mut bd = bn.beta.clone();
    out.push(compare("batchnorm(train) beta", &mut bd, &g.beta, 0..3, &mut |d| {
        let mut b = bn.clone();
        b.beta = d.to_vec();
        train_loss(&x, &b)
    }));

    // inference mode: running statistics are constants
    let g = batchnorm_infer_vjp(&x, &bn, &up).unwrap();
    let infer_loss = |x: &Tensor<f64>, bn: &BatchNormParams<f64>| dot(&batchnorm_infer(x, bn).unwrap(), &up);
    let mut xd = x.data().to_vec();
    out.push(compare("batchnorm(infer) input", &mut xd, g.input.data(), 0..n, &mut |d| {
        infer_loss(&with_data(&x, d), &bn)
    }));
    let mut gd = bn.gamma.clone();
    out.push(compare("batchnorm(infer) gamma", &mut gd, &g.gamma, 0..3, &mut |d| {
        let mut b = bn.clone();
        b.gamma = d.to_vec();
        infer_loss(&x, &b)
    }));
    let mut bd = bn.beta.clone();
    out.push(compare("batchnorm(infer) beta", &mut bd, &g.beta, 0..3, &mut |d| {
        let mut b = bn.clone();
        b.beta = d.to_vec();
        infer_loss(&x, &b)
    }));
    out
}

pub fn elementwise_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // keep inputs away from the ReLU kink so the difference quotient is smooth
    let x = Tensor::from_fn(Shape::new(2, 3, 4, 4), |_, _, _, _| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let up = random_tensor(&mut rng, x.shape(), -1.0, 1.0);
    let g = relu_vjp(&x, &up).unwrap();
    let mut xd = x.data().to_vec();
    let n = xd.len();
    out.push(compare("relu", &mut xd, g.data(), 0..n, &mut |d| dot(&relu(&with_data(&x, d)), &up)));

    for (ih, iw, oh, ow) in [(7, 5, 3, 2), (6, 6, 1, 1), (4, 4, 4, 4), (2, 3, 6, 6), (6, 6, 6, 4)] {
        let x = random_tensor(&mut rng, Shape::new(2, 2, ih, iw), -1.0, 1.0);
        let y = adaptive_avg_pool(&x, oh, ow).unwrap();
        let up = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let g = adaptive_avg_pool_vjp(x.shape(), &up).unwrap();
        let mut xd = x.data().to_vec();
        let n = xd.len();
        out.push(compare(
            &format!("adaptive_avg_pool {ih}x{iw}->{oh}x{ow}"),
            &mut xd,
            g.data(),
            0..n,
            &mut |d| dot(&adaptive_avg_pool(&with_data(&x, d), oh, ow).unwrap(), &up),
        ));
    }

    for (ih, iw, oh, ow) in [(2, 2, 4, 4), (3, 4, 7, 9), (1, 1, 5, 3), (4, 4, 8, 8), (8, 6, 3, 4)] {
        let x = random_tensor(&mut rng, Shape::new(1, 2, ih, iw), -1.0, 1.0);
        let y = bilinear_resize(&x, oh, ow).unwrap();
        let up = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
        let g = bilinear_resize_vjp(x.shape(), &up).unwrap();
        let mut xd = x.data().to_vec();
        let n = xd.len();
        out.push(compare(
            &format!("bilinear_resize {ih}x{iw}->{oh}x{ow}"),
            &mut xd,
            g.data(),
            0..n,
            &mut |d| dot(&bilinear_resize(&with_data(&x, d), oh, ow).unwrap(), &up),
        ));
    }

    let a = random_tensor(&mut rng, Shape::new(2, 2, 3, 3), -1.0, 1.0);
    let b = random_tensor(&mut rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
    let y = concat_channels(&[&a, &b]).unwrap();
    let up = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
    let parts = concat_channels_vjp(&[2, 3], &up).unwrap();
    let mut ad = a.data().to_vec();
    let n = ad.len();
    out.push(compare("concat first input", &mut ad, parts[0].data(), 0..n, &mut |d| {
        dot(&concat_channels(&[&with_data(&a, d), &b]).unwrap(), &up)
    }));
    let mut bd = b.data().to_vec();
    let n = bd.len();
    out.push(compare("concat second input", &mut bd, parts[1].data(), 0..n, &mut |d| {
        dot(&concat_channels(&[&a, &with_data(&b, d)]).unwrap(), &up)
    }));
    out
}

pub fn weighted_ce_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (case, (n, c, h, w)) in [(1, 2, 4, 4), (2, 2, 3, 5), (1, 3, 4, 3)].into_iter().enumerate() {
        let logits = random_tensor(&mut rng, Shape::new(n, c, h, w), -3.0, 3.0);
        let target: Vec<u8> = (0..n * h * w).map(|_| rng.gen_range(0..c as u8)).collect();
        let mut weights: Vec<f64> = (0..c).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= total);
        let g = weighted_ce_grad(&logits, &target, &weights).unwrap();
        let mut ld = logits.data().to_vec();
        let len = ld.len();
        out.push(compare(&format!("weighted_ce[{case}]"), &mut ld, g.data(), 0..len, &mut |d| {
            weighted_ce(&with_data(&logits, d), &target, &weights).unwrap()
        }));
    }
    out
}

/// Full loss gradient of a micro network (widths [4,8,8,8,8], two 32x32
/// images) on `coords` randomly sampled trainable scalars.
pub fn micro_model_check(seed: u64, coords: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = TfNetConfig::with_widths([4, 8, 8, 8, 8]);
    cfg.input_size = 32;
    let mut net = TfNet::<f64>::build(cfg, seed).unwrap();
    net.randomize_norms(&mut rng);
    let x = random_tensor(&mut rng, Shape::new(2, 3, 32, 32), 0.0, 1.0);
    let target: Vec<u8> = (0..2 * 32 * 32).map(|i| u8::from((i % 32) > 20 && (i / 32) % 32 > 10)).collect();
    let weights = [0.3, 0.7];

    let loss_of = |net: &TfNet<f64>| {
        let (logits, _) = net.forward_train(&x).unwrap();
        weighted_ce(&logits, &target, &weights).unwrap()
    };
    let (logits, cache) = net.forward_train(&x).unwrap();
    let dlogits = weighted_ce_grad(&logits, &target, &weights).unwrap();
    let mut grads = net.zeros_like();
    net.backward(&cache, &dlogits, &mut grads).unwrap();

    // flatten (tensor, element) coordinates of trainable parameters
    let layout: Vec<(usize, usize)> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(i, p)| (i, p.data.len()))
        .collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    let analytic_all: Vec<Vec<f64>> = grads.params().iter().map(|p| p.data.to_vec()).collect();
    let locate = |mut flat: usize| {
        for &(ti, n) in &layout {
            if flat < n {
                return (ti, flat);
            }
            flat -= n;
        }
        unreachable!()
    };

    let mut worst: f64 = 0.0;
    let picks = sample(&mut rng, total, coords.min(total));
    for flat in picks.iter() {
        let (ti, ei) = locate(flat);
        let orig = net.params()[ti].data[ei];
        let mut eval_at = |v: f64| {
            net.params_mut()[ti].data[ei] = v;
            loss_of(&net)
        };
        let numeric = (eval_at(orig + STEP) - eval_at(orig - STEP)) / (2.0 * STEP);
        eval_at(orig);
        worst = worst.max(rel_err(analytic_all[ti][ei], numeric));
    }
    GradCheck {
        name: "micro TF-Net loss".into(),
        checked: picks.len(),
        worst_rel: worst,
    }
}

/// Every primitive check.
pub fn all_op_checks(seed: u64) -> Vec<GradCheck> {
    let mut v = conv_checks(seed);
    v.extend(batchnorm_checks(seed + 1));
    v.extend(elementwise_checks(seed + 2));
    v.extend(weighted_ce_checks(seed + 3));
    v
}
