use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TfNetConfig;
use crate::error::{Error, Result};
use crate::metrics::SegMask;
use crate::params::{join, ParamView, ParamViewMut, Parameterized};
use crate::reparam::{Block, BlockCache, BlockSpec, MobileOneBlockTrain};
use crate::tensor::{
    adaptive_avg_pool, adaptive_avg_pool_vjp, bilinear_resize, bilinear_resize_vjp, concat_channels,
    concat_channels_vjp, conv2d, conv2d_vjp, relu, relu_vjp, ConvParams, Element, Shape, Tensor,
};

/// Depthwise 3x3 block followed by a pointwise 1x1 block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderUnit<T = f32> {
    pub depthwise: Block<T>,
    pub pointwise: Block<T>,
}

/// One pooling scale: adaptive pool, 1x1 projection with bias, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct PpmBranch<T = f32> {
    pub scale: usize,
    pub proj: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ppm<T = f32> {
    pub branches: Vec<PpmBranch<T>>,
    pub merge: Block<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfNet<T = f32> {
    config: TfNetConfig,
    pub stem: Block<T>,
    pub stages: Vec<Vec<EncoderUnit<T>>>,
    pub ppm: Option<Ppm<T>>,
    /// Deepest (stride 16) first, shallowest (stride 2) last.
    pub decoder: Vec<Block<T>>,
    pub head: ConvParams<T>,
}

/// Activations retained by [`TfNet::forward_train`].
#[derive(Debug)]
pub struct NetCache<T> {
    input_shape: Shape,
    stem: BlockCache<T>,
    stages: Vec<Vec<(BlockCache<T>, BlockCache<T>)>>,
    ppm: Option<PpmCache<T>>,
    decoder: Vec<DecoderCache<T>>,
    head_input: Tensor<T>,
    decoder_out_shape: Shape,
}

#[derive(Debug)]
struct PpmCache<T> {
    pooled: Vec<Tensor<T>>,
    projected: Vec<Tensor<T>>,
    merge: BlockCache<T>,
}

#[derive(Debug)]
struct DecoderCache<T> {
    upsampled_from: Shape,
    split: Vec<usize>,
    block: BlockCache<T>,
}

struct Features<T> {
    skips: [Tensor<T>; 4],
    deep: Tensor<T>,
}

impl<T: Element> TfNet<T> {
    /// Build a train-form network with deterministic initialization.
    pub fn build(config: TfNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = T::from_f64_lossy(config.bn_eps);
        let w = config.stage_widths;
        let spec = |in_ch, out_ch, kernel, stride, groups| {
            let mut s = BlockSpec {
                in_ch,
                out_ch,
                kernel,
                stride,
                groups,
                branches: config.num_branches,
                scale: config.scale_branch && kernel > 1,
                identity: false,
                activation: true,
            };
            s.identity = config.identity_branch && s.identity_allowed();
            s
        };
        let block = |s: BlockSpec, rng: &mut ChaCha8Rng| -> Result<Block<T>> {
            Ok(Block::Train(MobileOneBlockTrain::random(s, eps, rng)?))
        };

        let stem = block(spec(3, w[0], 3, 2, 1), &mut rng)?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let mut units = Vec::with_capacity(config.stage_repetitions[s]);
            for u in 0..config.stage_repetitions[s] {
                let cin = if u == 0 { w[s] } else { w[s + 1] };
                let stride = if u == 0 { 2 } else { 1 };
                units.push(EncoderUnit {
                    depthwise: block(spec(cin, cin, 3, stride, cin), &mut rng)?,
                    pointwise: block(spec(cin, w[s + 1], 1, 1, 1), &mut rng)?,
                });
            }
            stages.push(units);
        }

        let ppm = if config.ppm_enabled {
            let bw = config.ppm_branch_width();
            let mut branches = Vec::with_capacity(config.ppm_scales.len());
            for &scale in &config.ppm_scales {
                branches.push(PpmBranch {
                    scale,
                    proj: random_linear(&mut rng, bw, w[4], true)?,
                });
            }
            let merge_in = w[4] + bw * config.ppm_scales.len();
            let merge = block(spec(merge_in, w[4], 3, 1, 1), &mut rng)?;
            Some(Ppm { branches, merge })
        } else {
            None
        };

        let mut decoder = Vec::with_capacity(4);
        let mut prev = w[4];
        for level in (0..4).rev() {
            let cin = if config.skips_enabled { prev + w[level] } else { prev };
            decoder.push(block(spec(cin, w[level], 3, 1, 1), &mut rng)?);
            prev = w[level];
        }
        let head = random_linear(&mut rng, config.num_classes, w[0], true)?;

        Ok(TfNet {
            config,
            stem,
            stages,
            ppm,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &TfNetConfig {
        &self.config
    }

    pub fn is_fused(&self) -> bool {
        self.blocks().any(Block::is_fused)
    }

    fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        std::iter::once(&self.stem)
            .chain(self.stages.iter().flatten().flat_map(|u| [&u.depthwise, &u.pointwise]))
            .chain(self.ppm.iter().map(|p| &p.merge))
            .chain(&self.decoder)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<T>> {
        std::iter::once(&mut self.stem)
            .chain(
                self.stages
                    .iter_mut()
                    .flatten()
                    .flat_map(|u| [&mut u.depthwise, &mut u.pointwise]),
            )
            .chain(self.ppm.iter_mut().map(|p| &mut p.merge))
            .chain(&mut self.decoder)
    }

    /// Replace every multi-branch block with its single-convolution form.
    pub fn fuse(&self) -> Result<Self> {
        if self.is_fused() {
            return Err(Error::AlreadyFused);
        }
        let mut out = self.clone();
        for b in out.blocks_mut() {
            *b = b.fuse()?;
        }
        Ok(out)
    }

    /// Exact number of trainable scalars in the current form.
    pub fn param_count(&self) -> usize {
        self.trainable_count()
    }

    /// Structural copy with every scalar zeroed; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Draw every batch-norm affine and running statistic at random.
    ///
    /// Freshly built networks carry neutral norms, which make folding nearly
    /// trivial; this gives fusion checks something to fold.
    pub fn randomize_norms<R: Rng>(&mut self, rng: &mut R) {
        for b in self.blocks_mut() {
            let Some(t) = b.as_train_mut() else { continue };
            let norms = t
                .kxk_branches
                .iter_mut()
                .chain(t.scale_branch.iter_mut())
                .map(|cb| &mut cb.bn)
                .chain(t.identity_branch.iter_mut());
            for bn in norms {
                for c in 0..bn.channels() {
                    bn.gamma[c] = T::from_f64_lossy(rng.gen_range(0.5..1.5));
                    bn.beta[c] = T::from_f64_lossy(rng.gen_range(-0.1..0.1));
                    bn.running_mean[c] = T::from_f64_lossy(rng.gen_range(-0.1..0.1));
                    bn.running_var[c] = T::from_f64_lossy(rng.gen_range(0.5..2.0));
                }
            }
        }
    }

    /// Convert element type, e.g. to `f64` for gradient checks.
    pub fn cast<U: Element>(&self) -> TfNet<U> {
        let mut out = TfNet::<U>::build(self.config.clone(), 0).expect("config already validated");
        if self.is_fused() {
            out = out.fuse().expect("fresh model is train-form");
        }
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d = U::from_f64_lossy(s.to_f64_lossy());
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::shape(format!("expected a 3-channel image, got {s}")));
        }
        if s.h == 0 || s.w == 0 || s.h % 32 != 0 || s.w % 32 != 0 {
            return Err(Error::shape(format!(
                "image size {}x{} is not a positive multiple of 32",
                s.h, s.w
            )));
        }
        Ok(())
    }

    fn encode(&self, x: &Tensor<T>) -> Result<Features<T>> {
        let s0 = self.stem.forward(x)?;
        let mut feats = Vec::with_capacity(4);
        let mut cur = s0.clone();
        for units in &self.stages {
            for u in units {
                cur = u.pointwise.forward(&u.depthwise.forward(&cur)?)?;
            }
            feats.push(cur.clone());
        }
        let deep = feats.pop().expect("four stages");
        let [f1, f2, f3]: [Tensor<T>; 3] = feats.try_into().expect("three skip stages");
        Ok(Features {
            skips: [s0, f1, f2, f3],
            deep,
        })
    }

    fn pyramid(&self, deep: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(ppm) = &self.ppm else {
            return Ok(deep.clone());
        };
        let ds = deep.shape();
        let mut parts = vec![deep.clone()];
        for b in &ppm.branches {
            let pooled = adaptive_avg_pool(deep, b.scale, b.scale)?;
            let projected = relu(&conv2d(&pooled, &b.proj)?);
            parts.push(bilinear_resize(&projected, ds.h, ds.w)?);
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        ppm.merge.forward(&concat_channels(&refs)?)
    }

    /// Logits of shape `(n, num_classes, h, w)`.
    ///
    /// Train-form blocks normalize with their running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let Features { skips, deep } = self.encode(x)?;
        let mut d = self.pyramid(&deep)?;
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let ss = skip.shape();
            let up = bilinear_resize(&d, ss.h, ss.w)?;
            let inp = if self.config.skips_enabled {
                concat_channels(&[&up, skip])?
            } else {
                up
            };
            d = block.forward(&inp)?;
        }
        let xs = x.shape();
        let full = bilinear_resize(&d, xs.h, xs.w)?;
        let logits = conv2d(&full, &self.head)?;
        logits.ensure_finite("forward")?;
        Ok(logits)
    }

    /// Per-pixel argmax of the logits for each image in the batch.
    pub fn predict_masks(&self, x: &Tensor<T>) -> Result<Vec<SegMask>> {
        let logits = self.forward(x)?;
        Ok(argmax_masks(&logits))
    }

    pub fn predict_mask(&self, x: &Tensor<T>) -> Result<SegMask> {
        if x.shape().n != 1 {
            return Err(Error::shape(format!("predict_mask takes one image, got {}", x.shape().n)));
        }
        Ok(self.predict_masks(x)?.remove(0))
    }

    /// Training forward: every norm uses batch statistics; activations are cached.
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, NetCache<T>)> {
        self.check_input(x)?;
        let train = train_block::<T>;
        let (s0, stem_cache) = train(&self.stem)?.forward_train(x)?;
        let mut skips = vec![s0.clone()];
        let mut stage_caches = Vec::with_capacity(4);
        let mut cur = s0;
        for units in &self.stages {
            let mut uc = Vec::with_capacity(units.len());
            for u in units {
                let (a, ca) = train(&u.depthwise)?.forward_train(&cur)?;
                let (b, cb) = train(&u.pointwise)?.forward_train(&a)?;
                cur = b;
                uc.push((ca, cb));
            }
            skips.push(cur.clone());
            stage_caches.push(uc);
        }
        let deep = skips.pop().expect("deep features");
        let ds = deep.shape();

        let (mut d, ppm_cache) = match &self.ppm {
            Some(ppm) => {
                let mut parts = vec![deep.clone()];
                let mut pooled = Vec::new();
                let mut projected = Vec::new();
                for b in &ppm.branches {
                    let p = adaptive_avg_pool(&deep, b.scale, b.scale)?;
                    let r = relu(&conv2d(&p, &b.proj)?);
                    parts.push(bilinear_resize(&r, ds.h, ds.w)?);
                    pooled.push(p);
                    projected.push(r);
                }
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                let (m, mc) = train(&ppm.merge)?.forward_train(&concat_channels(&refs)?)?;
                (
                    m,
                    Some(PpmCache {
                        pooled,
                        projected,
                        merge: mc,
                    }),
                )
            }
            None => (deep, None),
        };

        let mut dec_caches = Vec::with_capacity(4);
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let ss = skip.shape();
            let upsampled_from = d.shape();
            let up = bilinear_resize(&d, ss.h, ss.w)?;
            let (inp, split) = if self.config.skips_enabled {
                let split = vec![up.shape().c, ss.c];
                (concat_channels(&[&up, skip])?, split)
            } else {
                let split = vec![up.shape().c];
                (up, split)
            };
            let (out, bc) = train(block)?.forward_train(&inp)?;
            d = out;
            dec_caches.push(DecoderCache {
                upsampled_from,
                split,
                block: bc,
            });
        }
        let xs = x.shape();
        let decoder_out_shape = d.shape();
        let head_input = bilinear_resize(&d, xs.h, xs.w)?;
        let logits = conv2d(&head_input, &self.head)?;
        logits.ensure_finite("forward_train")?;
        Ok((
            logits,
            NetCache {
                input_shape: xs,
                stem: stem_cache,
                stages: stage_caches,
                ppm: ppm_cache,
                decoder: dec_caches,
                head_input,
                decoder_out_shape,
            },
        ))
    }

    /// Backpropagate logit gradients; parameter gradients accumulate into `grads`
    /// (a [`TfNet::zeros_like`] copy). Returns the gradient with respect to the image.
    pub fn backward(&self, cache: &NetCache<T>, dlogits: &Tensor<T>, grads: &mut TfNet<T>) -> Result<Tensor<T>> {
        let hg = conv2d_vjp(&cache.head_input, &self.head, dlogits)?;
        add_into(grads.head.weight.data_mut(), hg.weight.data());
        add_into(grads.head.bias.as_mut().expect("head has bias"), &hg.bias);
        let mut dd = bilinear_resize_vjp(cache.decoder_out_shape, &hg.input)?;

        // decoder, shallowest level first; skip gradients collected per level
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; 4];
        for (i, dc) in cache.decoder.iter().enumerate().rev() {
            let block = train_block(&self.decoder[i])?;
            let gblock = train_block_mut(&mut grads.decoder[i])?;
            let dinp = block.backward(&dc.block, &dd, gblock)?;
            let mut parts = concat_channels_vjp(&dc.split, &dinp)?;
            if parts.len() == 2 {
                // level i consumes skip 3 - i
                dskips[3 - i] = parts.pop();
            }
            let dup = parts.pop().expect("upsampled part");
            dd = bilinear_resize_vjp(dc.upsampled_from, &dup)?;
        }

        let mut ddeep = match (&self.ppm, &cache.ppm) {
            (Some(ppm), Some(pc)) => {
                let gppm = grads.ppm.as_mut().expect("grads mirror model");
                let merge = train_block(&ppm.merge)?;
                let dcat = merge.backward(&pc.merge, &dd, train_block_mut(&mut gppm.merge)?)?;
                let deep_c = dcat.shape().c - ppm.branches.len() * self.config.ppm_branch_width();
                let mut split = vec![deep_c];
                split.extend(ppm.branches.iter().map(|b| b.proj.out_channels()));
                let parts = concat_channels_vjp(&split, &dcat)?;
                let mut it = parts.into_iter();
                let mut ddeep = it.next().expect("deep part");
                let deep_shape = ddeep.shape();
                for (((b, gb), dup), (pooled, projected)) in ppm
                    .branches
                    .iter()
                    .zip(&mut gppm.branches)
                    .zip(it)
                    .zip(pc.pooled.iter().zip(&pc.projected))
                {
                    let dr = bilinear_resize_vjp(projected.shape(), &dup)?;
                    let dconv = relu_vjp(projected, &dr)?;
                    let cg = conv2d_vjp(pooled, &b.proj, &dconv)?;
                    add_into(gb.proj.weight.data_mut(), cg.weight.data());
                    add_into(gb.proj.bias.as_mut().expect("projection has bias"), &cg.bias);
                    ddeep.add_assign(&adaptive_avg_pool_vjp(deep_shape, &cg.input)?)?;
                }
                ddeep
            }
            _ => dd,
        };

        for (s, (units, caches)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            for (u, (uc, gu)) in units.iter().zip(caches.iter().zip(&mut grads.stages[s])).rev() {
                let (ca, cb) = uc;
                let da = train_block(&u.pointwise)?.backward(cb, &ddeep, train_block_mut(&mut gu.pointwise)?)?;
                ddeep = train_block(&u.depthwise)?.backward(ca, &da, train_block_mut(&mut gu.depthwise)?)?;
            }
            // output of stage s - 1 (or the stem) feeds stage s and skip s
            if let Some(ds) = dskips[s].take() {
                ddeep.add_assign(&ds)?;
            }
        }
        let dx = train_block(&self.stem)?.backward(&cache.stem, &ddeep, train_block_mut(&mut grads.stem)?)?;
        debug_assert_eq!(dx.shape(), cache.input_shape);
        Ok(dx)
    }

    /// Apply the batch statistics of a training pass to every running estimate.
    pub fn update_running_stats(&mut self, cache: &NetCache<T>, momentum: T) {
        let mut caches: Vec<&BlockCache<T>> = vec![&cache.stem];
        for units in &cache.stages {
            for (a, b) in units {
                caches.push(a);
                caches.push(b);
            }
        }
        if let Some(pc) = &cache.ppm {
            caches.push(&pc.merge);
        }
        caches.extend(cache.decoder.iter().map(|d| &d.block));
        for (b, c) in self.blocks_mut().zip(caches) {
            if let Some(t) = b.as_train_mut() {
                t.update_running_stats(c, momentum);
            }
        }
    }

    /// Replace every running estimate with the average of the batch statistics
    /// over `images`, so inference-mode normalization matches the final weights
    /// instead of lagging behind them.
    pub fn recalibrate_running_stats(&mut self, images: &[Tensor<T>]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::config("recalibration needs at least one image"));
        }
        for (k, img) in images.iter().enumerate() {
            let (_, cache) = self.forward_train(img)?;
            // cumulative average: the first image overwrites, later ones blend in
            let momentum = T::one() / T::from_usize(k + 1).expect("small integer");
            self.update_running_stats(&cache, momentum);
        }
        Ok(())
    }
}

fn train_block<T>(b: &Block<T>) -> Result<&MobileOneBlockTrain<T>> {
    match b {
        Block::Train(t) => Ok(t),
        Block::Fused(_) => Err(Error::config("fused networks are inference-only")),
    }
}

fn train_block_mut<T>(b: &mut Block<T>) -> Result<&mut MobileOneBlockTrain<T>> {
    match b {
        Block::Train(t) => Ok(t),
        Block::Fused(_) => Err(Error::config("gradient buffer is fused")),
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn random_linear<T: Element, R: Rng>(rng: &mut R, out_ch: usize, in_ch: usize, bias: bool) -> Result<ConvParams<T>> {
    let bound = (1.0 / in_ch as f64).sqrt();
    let mut draw = || T::from_f64_lossy(rng.gen_range(-bound..=bound));
    let weight = Tensor::from_fn(Shape::new(out_ch, in_ch, 1, 1), |_, _, _, _| draw());
    let bias = bias.then(|| (0..out_ch).map(|_| draw()).collect());
    ConvParams::new(weight, bias, 1, 0, 1)
}

/// Per-pixel argmax; ties resolve to the lowest class index (background).
pub fn argmax_masks<T: Element>(logits: &Tensor<T>) -> Vec<SegMask> {
    let s = logits.shape();
    (0..s.n)
        .map(|n| {
            let labels = (0..s.plane())
                .map(|p| {
                    let mut best = 0;
                    let mut best_v = logits.plane(n, 0)[p];
                    for c in 1..s.c {
                        let v = logits.plane(n, c)[p];
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    best.min(u8::MAX as usize) as u8
                })
                .collect();
            SegMask::from_labels_unchecked(s.h, s.w, labels)
        })
        .collect()
}

impl<T: Element> Parameterized<T> for TfNet<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.stem.visit(&join(prefix, "stem"), out);
        for (s, units) in self.stages.iter().enumerate() {
            for (i, u) in units.iter().enumerate() {
                let p = join(prefix, &format!("stage{}.unit{i}", s + 1));
                u.depthwise.visit(&join(&p, "dw"), out);
                u.pointwise.visit(&join(&p, "pw"), out);
            }
        }
        if let Some(ppm) = &self.ppm {
            for b in &ppm.branches {
                b.proj.visit(&join(prefix, &format!("ppm.scale{}.proj", b.scale)), out);
            }
            ppm.merge.visit(&join(prefix, "ppm.merge"), out);
        }
        for (i, d) in self.decoder.iter().enumerate() {
            d.visit(&join(prefix, &format!("decoder.level{}", 3 - i)), out);
        }
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.stem.visit_mut(&join(prefix, "stem"), out);
        for (s, units) in self.stages.iter_mut().enumerate() {
            for (i, u) in units.iter_mut().enumerate() {
                let p = join(prefix, &format!("stage{}.unit{i}", s + 1));
                u.depthwise.visit_mut(&join(&p, "dw"), out);
                u.pointwise.visit_mut(&join(&p, "pw"), out);
            }
        }
        if let Some(ppm) = &mut self.ppm {
            for b in &mut ppm.branches {
                b.proj.visit_mut(&join(prefix, &format!("ppm.scale{}.proj", b.scale)), out);
            }
            ppm.merge.visit_mut(&join(prefix, "ppm.merge"), out);
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("decoder.level{}", 3 - i)), out);
        }
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}
