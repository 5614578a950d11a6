//! MobileOne-style multi-branch blocks and their collapse into one convolution.
//!
//! A train-form block sums `K` conv+BN branches of the block's kernel size, an
//! optional 1x1 conv+BN "scale" branch (3x3 blocks only) and an optional BN-only
//! identity branch. Every branch is affine in the input, so after folding each
//! BN into its convolution, lifting 1x1 and identity kernels to the block's
//! kernel size and summing, the block becomes a single convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ParamView, ParamViewMut, Parameterized};
use crate::tensor::{
    batchnorm_infer, batchnorm_train, batchnorm_train_vjp, conv2d, conv2d_vjp, relu, relu_vjp,
    BatchNormParams, BatchStats, ConvParams, Element, Shape, Tensor,
};

/// A bias-free convolution followed by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T = f32> {
    pub conv: ConvParams<T>,
    pub bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MobileOneBlockTrain<T = f32> {
    pub kxk_branches: Vec<ConvBn<T>>,
    pub scale_branch: Option<ConvBn<T>>,
    pub identity_branch: Option<BatchNormParams<T>>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub activation: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T = f32> {
    pub conv: ConvParams<T>,
    pub activation: bool,
}

/// Either form of a block.
#[derive(Clone, Debug, PartialEq)]
pub enum Block<T = f32> {
    Train(MobileOneBlockTrain<T>),
    Fused(FusedConv<T>),
}

/// Structural description used to build a random train-form block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub branches: usize,
    pub scale: bool,
    pub identity: bool,
    pub activation: bool,
}

impl BlockSpec {
    /// Whether an identity branch is legal for this geometry.
    pub fn identity_allowed(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }
}

/// Activations cached by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    input: Tensor<T>,
    branch_stats: Vec<BatchStats<T>>,
    scale_stats: Option<BatchStats<T>>,
    identity_stats: Option<BatchStats<T>>,
    output: Tensor<T>,
}

impl<T> BlockCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

/// Fold an inference-mode batch norm into the preceding convolution.
pub fn fold_bn<T: Element>(conv: &ConvParams<T>, bn: &BatchNormParams<T>) -> Result<ConvParams<T>> {
    let out = conv.out_channels();
    bn.check_channels(out)?;
    let per = conv.weight.shape().len() / out.max(1);
    let mut weight = conv.weight.clone();
    let mut bias = vec![T::zero(); out];
    for (o, b) in bias.iter_mut().enumerate() {
        let scale = bn.gamma[o] / (bn.running_var[o] + bn.eps).sqrt();
        for w in &mut weight.data_mut()[o * per..(o + 1) * per] {
            *w = *w * scale;
        }
        let b0 = conv.bias.as_ref().map_or(T::zero(), |b| b[o]);
        *b = bn.beta[o] + (b0 - bn.running_mean[o]) * scale;
    }
    ConvParams::new(weight, Some(bias), conv.stride, conv.padding, conv.groups)
}

/// Embed a 1x1 kernel at the centre of a zero 3x3 kernel, padding grown by one.
pub fn pad_1x1_to_3x3<T: Element>(conv: &ConvParams<T>) -> Result<ConvParams<T>> {
    lift_kernel(conv, 3)
}

fn lift_kernel<T: Element>(conv: &ConvParams<T>, kernel: usize) -> Result<ConvParams<T>> {
    let s = conv.weight.shape();
    if s.h != 1 {
        return Err(Error::shape(format!("expected a 1x1 kernel, got {}x{}", s.h, s.w)));
    }
    if kernel == 1 {
        return Ok(conv.clone());
    }
    let c = kernel / 2;
    let weight = Tensor::from_fn(Shape::new(s.n, s.c, kernel, kernel), |o, i, y, x| {
        if y == c && x == c {
            conv.weight.at(o, i, 0, 0)
        } else {
            T::zero()
        }
    });
    ConvParams::new(weight, conv.bias.clone(), conv.stride, conv.padding + c, conv.groups)
}

/// Grouped `kernel x kernel` convolution that reproduces its input.
pub fn identity_to_conv<T: Element>(channels: usize, groups: usize, kernel: usize) -> Result<ConvParams<T>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::shape(format!(
            "identity over {channels} channels cannot use {groups} groups"
        )));
    }
    let per = channels / groups;
    let c = kernel / 2;
    let weight = Tensor::from_fn(Shape::new(channels, per, kernel, kernel), |o, i, y, x| {
        if i == o % per && y == c && x == c {
            T::one()
        } else {
            T::zero()
        }
    });
    ConvParams::new(weight, None, 1, c, groups)
}

fn uniform_conv<T: Element, R: Rng>(
    rng: &mut R,
    out_ch: usize,
    in_pg: usize,
    kernel: usize,
    bound: f64,
) -> Tensor<T> {
    Tensor::from_fn(Shape::new(out_ch, in_pg, kernel, kernel), |_, _, _, _| {
        T::from_f64_lossy(rng.gen_range(-bound..=bound))
    })
}

impl<T: Element> MobileOneBlockTrain<T> {
    /// Random block with fan-in scaled uniform kernels and neutral norms.
    ///
    /// The bound `sqrt(6 / (fan_in * paths))` keeps the summed output at unit
    /// second moment when there are `paths` parallel branches.
    pub fn random<R: Rng>(spec: BlockSpec, eps: T, rng: &mut R) -> Result<Self> {
        if spec.kernel != 1 && spec.kernel != 3 {
            return Err(Error::config(format!("unsupported kernel size {}", spec.kernel)));
        }
        if spec.groups == 0 || spec.in_ch % spec.groups != 0 || spec.out_ch % spec.groups != 0 {
            return Err(Error::config(format!(
                "{} -> {} channels cannot use {} groups",
                spec.in_ch, spec.out_ch, spec.groups
            )));
        }
        if spec.identity && !spec.identity_allowed() {
            return Err(Error::config("identity branch needs stride 1 and equal channels"));
        }
        let scale = spec.scale && spec.kernel > 1;
        let paths = spec.branches + scale as usize + spec.identity as usize;
        if paths == 0 {
            return Err(Error::config("block needs at least one branch"));
        }
        let in_pg = spec.in_ch / spec.groups;
        let mk = |rng: &mut R, kernel: usize| -> Result<ConvBn<T>> {
            let fan_in = (in_pg * kernel * kernel) as f64;
            let bound = (6.0 / (fan_in * paths as f64)).sqrt();
            Ok(ConvBn {
                conv: ConvParams::new(
                    uniform_conv(rng, spec.out_ch, in_pg, kernel, bound),
                    None,
                    spec.stride,
                    kernel / 2,
                    spec.groups,
                )?,
                bn: BatchNormParams::neutral(spec.out_ch, eps),
            })
        };
        let kxk_branches = (0..spec.branches)
            .map(|_| mk(rng, spec.kernel))
            .collect::<Result<Vec<_>>>()?;
        let scale_branch = if scale { Some(mk(rng, 1)?) } else { None };
        Ok(MobileOneBlockTrain {
            kxk_branches,
            scale_branch,
            identity_branch: spec.identity.then(|| BatchNormParams::neutral(spec.out_ch, eps)),
            in_ch: spec.in_ch,
            out_ch: spec.out_ch,
            kernel: spec.kernel,
            stride: spec.stride,
            groups: spec.groups,
            activation: spec.activation,
        })
    }

    /// Check that every branch agrees with the block geometry.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::shape(format!("malformed block: {msg}")));
        if self.kxk_branches.is_empty() && self.scale_branch.is_none() && self.identity_branch.is_none() {
            return bad("no branches".into());
        }
        let expect = |cb: &ConvBn<T>, kernel: usize| -> Result<()> {
            cb.conv.validate()?;
            let s = cb.conv.weight.shape();
            if s.n != self.out_ch
                || cb.conv.in_channels() != self.in_ch
                || s.h != kernel
                || cb.conv.stride != self.stride
                || cb.conv.groups != self.groups
                || cb.conv.padding != kernel / 2
            {
                return Err(Error::shape(format!(
                    "malformed block: branch {s} (stride {}, groups {}) does not fit {}->{} k{} s{} g{}",
                    cb.conv.stride, cb.conv.groups, self.in_ch, self.out_ch, kernel, self.stride, self.groups
                )));
            }
            cb.bn.check_channels(self.out_ch)
        };
        for b in &self.kxk_branches {
            expect(b, self.kernel)?;
        }
        if let Some(s) = &self.scale_branch {
            if self.kernel == 1 {
                return bad("scale branch on a 1x1 block".into());
            }
            expect(s, 1)?;
        }
        if let Some(id) = &self.identity_branch {
            if self.stride != 1 || self.in_ch != self.out_ch {
                return bad("identity branch needs stride 1 and equal channels".into());
            }
            id.check_channels(self.out_ch)?;
        }
        Ok(())
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        let probe = ConvParams::<T>::zeros(self.out_ch, self.in_ch, self.kernel, self.stride, self.groups, false)?;
        probe.output_shape(x)
    }

    /// Inference forward: branches normalized with running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        let mut add = |t: Tensor<T>| -> Result<()> {
            match &mut acc {
                Some(a) => a.add_assign(&t),
                None => {
                    acc = Some(t);
                    Ok(())
                }
            }
        };
        for b in self.kxk_branches.iter().chain(&self.scale_branch) {
            add(batchnorm_infer(&conv2d(x, &b.conv)?, &b.bn)?)?;
        }
        if let Some(id) = &self.identity_branch {
            add(batchnorm_infer(x, id)?)?;
        }
        let pre = acc.ok_or_else(|| Error::shape("malformed block: no branches"))?;
        Ok(if self.activation { relu(&pre) } else { pre })
    }

    /// Training forward: branches normalized with batch statistics.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let os = self.output_shape(x.shape())?;
        let mut pre = Tensor::zeros(os);
        let mut branch_stats = Vec::with_capacity(self.kxk_branches.len());
        for b in &self.kxk_branches {
            let (y, st) = batchnorm_train(&conv2d(x, &b.conv)?, &b.bn)?;
            pre.add_assign(&y)?;
            branch_stats.push(st);
        }
        let scale_stats = match &self.scale_branch {
            Some(b) => {
                let (y, st) = batchnorm_train(&conv2d(x, &b.conv)?, &b.bn)?;
                pre.add_assign(&y)?;
                Some(st)
            }
            None => None,
        };
        let identity_stats = match &self.identity_branch {
            Some(bn) => {
                let (y, st) = batchnorm_train(x, bn)?;
                pre.add_assign(&y)?;
                Some(st)
            }
            None => None,
        };
        let output = if self.activation { relu(&pre) } else { pre };
        Ok((
            output.clone(),
            BlockCache {
                input: x.clone(),
                branch_stats,
                scale_stats,
                identity_stats,
                output,
            },
        ))
    }

    /// Backpropagate `upstream` through a cached training forward.
    ///
    /// Parameter gradients are accumulated into `grads`, which must have this
    /// block's structure (see [`MobileOneBlockTrain::zeros_like`]).
    pub fn backward(&self, cache: &BlockCache<T>, upstream: &Tensor<T>, grads: &mut Self) -> Result<Tensor<T>> {
        let dpre = if self.activation {
            relu_vjp(&cache.output, upstream)?
        } else {
            upstream.clone()
        };
        let mut dx = Tensor::zeros(cache.input.shape());
        let branch = |b: &ConvBn<T>, st: &BatchStats<T>, g: &mut ConvBn<T>, dx: &mut Tensor<T>| -> Result<()> {
            let bn_g = batchnorm_train_vjp(&b.bn, st, &dpre)?;
            accumulate(&mut g.bn.gamma, &bn_g.gamma);
            accumulate(&mut g.bn.beta, &bn_g.beta);
            let cg = conv2d_vjp(&cache.input, &b.conv, &bn_g.input)?;
            accumulate(g.conv.weight.data_mut(), cg.weight.data());
            dx.add_assign(&cg.input)
        };
        for ((b, st), g) in self.kxk_branches.iter().zip(&cache.branch_stats).zip(&mut grads.kxk_branches) {
            branch(b, st, g, &mut dx)?;
        }
        if let (Some(b), Some(st), Some(g)) = (&self.scale_branch, &cache.scale_stats, &mut grads.scale_branch) {
            branch(b, st, g, &mut dx)?;
        }
        if let (Some(bn), Some(st), Some(g)) = (&self.identity_branch, &cache.identity_stats, &mut grads.identity_branch)
        {
            let bn_g = batchnorm_train_vjp(bn, st, &dpre)?;
            accumulate(&mut g.gamma, &bn_g.gamma);
            accumulate(&mut g.beta, &bn_g.beta);
            dx.add_assign(&bn_g.input)?;
        }
        Ok(dx)
    }

    /// Fold the batch statistics of a training pass into the running statistics.
    pub fn update_running_stats(&mut self, cache: &BlockCache<T>, momentum: T) {
        for (b, st) in self.kxk_branches.iter_mut().zip(&cache.branch_stats) {
            b.bn.update_running(st, momentum);
        }
        if let (Some(b), Some(st)) = (&mut self.scale_branch, &cache.scale_stats) {
            b.bn.update_running(st, momentum);
        }
        if let (Some(bn), Some(st)) = (&mut self.identity_branch, &cache.identity_stats) {
            bn.update_running(st, momentum);
        }
    }

    /// Same structure with every scalar set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.trainable_count()
    }
}

fn accumulate<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Collapse a train-form block into one convolution of the block's kernel size.
pub fn fuse_block<T: Element>(block: &MobileOneBlockTrain<T>) -> Result<FusedConv<T>> {
    block.validate()?;
    let mut fused = ConvParams::zeros(block.out_ch, block.in_ch, block.kernel, block.stride, block.groups, true)?;
    let mut add = |c: &ConvParams<T>| {
        accumulate(fused.weight.data_mut(), c.weight.data());
        accumulate(fused.bias.as_mut().unwrap(), c.bias.as_deref().unwrap());
    };
    for b in &block.kxk_branches {
        add(&fold_bn(&b.conv, &b.bn)?);
    }
    if let Some(b) = &block.scale_branch {
        add(&lift_kernel(&fold_bn(&b.conv, &b.bn)?, block.kernel)?);
    }
    if let Some(bn) = &block.identity_branch {
        add(&fold_bn(&identity_to_conv(block.in_ch, block.groups, block.kernel)?, bn)?);
    }
    Ok(FusedConv {
        conv: fused,
        activation: block.activation,
    })
}

impl<T: Element> FusedConv<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.conv)?;
        Ok(if self.activation { relu(&y) } else { y })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

impl<T: Element> Block<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Block::Train(b) => b.forward(x),
            Block::Fused(f) => f.forward(x),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, Block::Fused(_))
    }

    pub fn fuse(&self) -> Result<Self> {
        match self {
            Block::Train(b) => Ok(Block::Fused(fuse_block(b)?)),
            Block::Fused(_) => Err(Error::AlreadyFused),
        }
    }

    pub fn as_train(&self) -> Option<&MobileOneBlockTrain<T>> {
        match self {
            Block::Train(b) => Some(b),
            Block::Fused(_) => None,
        }
    }

    pub fn as_train_mut(&mut self) -> Option<&mut MobileOneBlockTrain<T>> {
        match self {
            Block::Train(b) => Some(b),
            Block::Fused(_) => None,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Train(b) => b.out_ch,
            Block::Fused(f) => f.conv.out_channels(),
        }
    }
}

impl<T: Element> Parameterized<T> for ConvBn<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.conv.visit(&join(prefix, "conv"), out);
        self.bn.visit(&join(prefix, "bn"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.conv.visit_mut(&join(prefix, "conv"), out);
        self.bn.visit_mut(&join(prefix, "bn"), out);
    }
}

impl<T: Element> Parameterized<T> for MobileOneBlockTrain<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        for (i, b) in self.kxk_branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{i}")), out);
        }
        if let Some(s) = &self.scale_branch {
            s.visit(&join(prefix, "scale"), out);
        }
        if let Some(id) = &self.identity_branch {
            id.visit(&join(prefix, "identity"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        for (i, b) in self.kxk_branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{i}")), out);
        }
        if let Some(s) = &mut self.scale_branch {
            s.visit_mut(&join(prefix, "scale"), out);
        }
        if let Some(id) = &mut self.identity_branch {
            id.visit_mut(&join(prefix, "identity"), out);
        }
    }
}

impl<T: Element> Parameterized<T> for FusedConv<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.conv.visit(&join(prefix, "fused"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.conv.visit_mut(&join(prefix, "fused"), out);
    }
}

impl<T: Element> Parameterized<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        match self {
            Block::Train(b) => b.visit(prefix, out),
            Block::Fused(f) => f.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        match self {
            Block::Train(b) => b.visit_mut(prefix, out),
            Block::Fused(f) => f.visit_mut(prefix, out),
        }
    }
}
