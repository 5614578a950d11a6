//! Randomized train-form vs fused-form equivalence checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tearflow::model::{TfNet, TfNetConfig};
use tearflow::reparam::{fuse_block, BlockSpec, MobileOneBlockTrain};
use tearflow::tensor::{BatchNormParams, Shape};

use super::random_tensor_f32;

pub const BLOCK_TOLERANCE: f32 = 1e-4;
pub const MODEL_TOLERANCE: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// 3x3, one group per channel.
    Depthwise,
    /// 1x1, dense.
    Pointwise,
}

#[derive(Clone, Debug)]
pub struct BlockCase {
    pub spec: BlockSpec,
    pub layout: Layout,
    pub input: Shape,
    pub max_abs: f32,
}

fn randomize_bn<R: Rng>(bn: &mut BatchNormParams<f32>, rng: &mut R) {
    for c in 0..bn.channels() {
        bn.gamma[c] = rng.gen_range(0.5..1.5);
        bn.beta[c] = rng.gen_range(-0.5..0.5);
        bn.running_mean[c] = rng.gen_range(-0.5..0.5);
        bn.running_var[c] = rng.gen_range(0.25..2.0);
    }
}

pub fn randomize_block_norms<R: Rng>(block: &mut MobileOneBlockTrain<f32>, rng: &mut R) {
    for cb in block.kxk_branches.iter_mut().chain(block.scale_branch.iter_mut()) {
        randomize_bn(&mut cb.bn, rng);
    }
    if let Some(bn) = block.identity_branch.as_mut() {
        randomize_bn(bn, rng);
    }
}

/// Every combination of branch count {1, 2, 4}, stride {1, 2}, layout,
/// scale branch and identity branch (where legal), cycled with random widths
/// and spatial sizes until at least `min_cases` blocks have been checked.
pub fn block_fusion_cases(seed: u64, min_cases: usize) -> Vec<BlockCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos = Vec::new();
    for branches in [1, 2, 4] {
        for stride in [1, 2] {
            for layout in [Layout::Depthwise, Layout::Pointwise] {
                for scale in [false, true] {
                    for identity in [false, true] {
                        // the scale branch only exists on 3x3 blocks
                        if scale && layout == Layout::Pointwise {
                            continue;
                        }
                        combos.push((branches, stride, layout, scale, identity));
                    }
                }
            }
        }
    }
    let mut cases = Vec::new();
    while cases.len() < min_cases {
        for &(branches, stride, layout, scale, identity) in &combos {
            let in_ch = rng.gen_range(1..=12);
            let out_ch = match (layout, identity) {
                (Layout::Depthwise, _) => in_ch,
                (Layout::Pointwise, true) => in_ch,
                (Layout::Pointwise, false) => rng.gen_range(1..=12),
            };
            let spec = BlockSpec {
                in_ch,
                out_ch,
                kernel: if layout == Layout::Depthwise { 3 } else { 1 },
                stride,
                groups: if layout == Layout::Depthwise { in_ch } else { 1 },
                branches,
                scale,
                // an identity path cannot change resolution
                identity: identity && stride == 1,
                activation: rng.gen_bool(0.5),
            };
            let mut block = MobileOneBlockTrain::random(spec, 1e-5f32, &mut rng).expect("valid spec");
            randomize_block_norms(&mut block, &mut rng);
            let fused = fuse_block(&block).expect("fusable");
            let input = Shape::new(
                rng.gen_range(1..=2),
                in_ch,
                rng.gen_range(3..=17),
                rng.gen_range(3..=17),
            );
            let x = random_tensor_f32(&mut rng, input, -2.0, 2.0);
            let a = block.forward(&x).expect("train forward");
            let b = fused.forward(&x).expect("fused forward");
            let max_abs = a.max_abs_diff(&b).expect("same shape");
            cases.push(BlockCase {
                spec,
                layout,
                input,
                max_abs,
            });
        }
    }
    cases
}

/// Max-abs difference between the train and fused mini0 network on one
/// random `size x size` image, with randomized norm statistics.
pub fn whole_model_fusion(seed: u64, size: usize) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = TfNetConfig::default();
    cfg.input_size = size;
    let mut net = TfNet::<f32>::build(cfg, seed).expect("default config builds");
    net.randomize_norms(&mut rng);
    let fused = net.fuse().expect("fuse");
    let x = random_tensor_f32(&mut rng, Shape::new(1, 3, size, size), 0.0, 1.0);
    let a = net.forward(&x).expect("train forward");
    let b = fused.forward(&x).expect("fused forward");
    a.max_abs_diff(&b).expect("same shape")
}
