//! Network definition, parameter storage and the forward/backward passes.
//!
//! Topology: a target encoder (1 input channel) and a context encoder (image
//! plus prompt, 2 channels) of identical shape. Each encoder level is two
//! 3×3×3 convolutions, each followed by instance norm and leaky-ReLU, then 2×
//! average pooling. Context
//! features are averaged over the context set at every level. The decoder
//! starts at the deepest level from `[target, fused context]`, then at each
//! shallower level convolves `[upsampled decoder state, target skip, fused
//! context]`. A 1×1×1 head produces one logit per voxel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ops::{self, sigmoid};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{ContextSet, Mask3D, PromptChannel, PromptType, Shape3, Volume3D};

/// How per-pair context features are pooled across the context set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub input_shape: [usize; 3],
    pub fusion: Fusion,
    /// Context pairs encoded together before being folded into the running sum.
    pub context_minibatch: usize,
    pub prompt_type: PromptType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            base_channels: 8,
            input_shape: [32, 32, 32],
            fusion: Fusion::Mean,
            context_minibatch: 1,
            prompt_type: PromptType::Box,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("model.levels", "must be at least 1"));
        }
        if self.base_channels < 1 {
            return Err(Error::config("model.base_channels", "must be at least 1"));
        }
        if self.context_minibatch < 1 {
            return Err(Error::config("model.context_minibatch", "must be at least 1"));
        }
        let div = 1usize << (self.levels - 1);
        if self.input_shape.iter().any(|&n| n == 0 || n % div != 0) {
            return Err(Error::config(
                "model.input_shape",
                format!("extents {:?} must be positive multiples of {div}", self.input_shape),
            ));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape3 {
        Shape3(self.input_shape)
    }

    /// Channel width at level `k`.
    pub fn width(&self, k: usize) -> usize {
        self.base_channels << k
    }

    pub fn level_dims(&self, k: usize) -> [usize; 3] {
        self.input_shape.map(|n| n >> k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter (or gradient) tensors in a fixed, config-determined order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor { name: t.name.clone(), shape: t.shape.clone(), data: vec![T::zero(); t.data.len()] })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat read access by global index (tensor order, then row-major).
    pub fn get(&self, mut i: usize) -> T {
        for t in &self.tensors {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, v: T) {
        for t in &mut self.tensors {
            if i < t.data.len() {
                t.data[i] = v;
                return;
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn name_of(&self, mut i: usize) -> &str {
        for t in &self.tensors {
            if i < t.data.len() {
                return &t.name;
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    cout: usize,
    ksize: usize,
}

/// Instance normalization with a per-channel affine map; `scale` indexes
/// the gain tensor and the shift follows it.
#[derive(Debug, Clone, Copy)]
struct Norm {
    scale: usize,
}

/// conv → norm → LeakyReLU, twice.
#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct Topology {
    target: Vec<Block>,
    context: Vec<Block>,
    decoder: Vec<Block>,
    head: Conv,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>)>,
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, ksize: usize, bias: bool) -> Conv {
        let weight = self.specs.len();
        self.specs.push((format!("{name}.weight"), vec![cout, cin, ksize, ksize, ksize]));
        let bias = bias.then(|| {
            self.specs.push((format!("{name}.bias"), vec![cout]));
            weight + 1
        });
        Conv { weight, bias, cout, ksize }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let scale = self.specs.len();
        self.specs.push((format!("{name}.weight"), vec![channels]));
        self.specs.push((format!("{name}.bias"), vec![channels]));
        Norm { scale }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            norm1: self.norm(&format!("{name}.norm1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false),
            norm2: self.norm(&format!("{name}.norm2"), cout),
        }
    }
}

fn topology(config: &ModelConfig) -> (Topology, Vec<(String, Vec<usize>)>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let levels = config.levels;
    let encoder = |b: &mut LayoutBuilder, branch: &str, input: usize| -> Vec<Block> {
        (0..levels)
            .map(|k| {
                let cin = if k == 0 { input } else { config.width(k - 1) };
                b.block(&format!("{branch}.enc{k}"), cin, config.width(k))
            })
            .collect()
    };
    let target = encoder(&mut b, "target", 1);
    let context = encoder(&mut b, "context", 2);
    let decoder = (0..levels)
        .map(|k| {
            let c = config.width(k);
            let cin = if k + 1 == levels { 2 * c } else { config.width(k + 1) + 2 * c };
            b.block(&format!("decoder.dec{k}"), cin, c)
        })
        .collect();
    let head = b.conv("head", config.width(0), 1, 1, true);
    (Topology { target, context, decoder, head }, b.specs)
}

/// Activations of one block, kept for the backward pass.
struct BlockCache<T> {
    input: Tensor<T>,
    pre1: Tensor<T>,
    hidden: Tensor<T>,
    pre2: Tensor<T>,
    output: Tensor<T>,
}

fn conv_forward<T: Scalar>(p: &Params<T>, c: Conv, x: &Tensor<T>) -> Tensor<T> {
    let zero = vec![T::zero(); c.cout];
    let bias = c.bias.map_or(&zero[..], |i| &p.tensors[i].data[..]);
    ops::conv3d(x, &p.tensors[c.weight].data, bias, c.cout, c.ksize)
}

fn conv_backward<T: Scalar>(
    p: &Params<T>,
    g: &mut Params<T>,
    c: Conv,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let mut scratch = Vec::new();
    let (head, tail) = g.tensors.split_at_mut(c.weight + 1);
    let dbias = match c.bias {
        Some(_) => &mut tail[0].data,
        None => {
            scratch.resize(c.cout, T::zero());
            &mut scratch
        }
    };
    ops::conv3d_backward(x, &p.tensors[c.weight].data, dy, &mut head[c.weight].data, dbias, c.ksize, need_dx)
}

fn norm_act_forward<T: Scalar>(p: &Params<T>, n: Norm, pre: &Tensor<T>) -> Tensor<T> {
    let mut y = ops::instance_norm(pre, &p.tensors[n.scale].data, &p.tensors[n.scale + 1].data);
    ops::leaky_relu(&mut y);
    y
}

fn norm_act_backward<T: Scalar>(p: &Params<T>, g: &mut Params<T>, n: Norm, pre: &Tensor<T>, out: &Tensor<T>, mut d_out: Tensor<T>) -> Tensor<T> {
    ops::leaky_relu_backward(out, &mut d_out);
    let (head, tail) = g.tensors.split_at_mut(n.scale + 1);
    ops::instance_norm_backward(pre, &p.tensors[n.scale].data, &d_out, &mut head[n.scale].data, &mut tail[0].data)
}

fn block_forward<T: Scalar>(p: &Params<T>, b: Block, input: Tensor<T>) -> BlockCache<T> {
    let pre1 = conv_forward(p, b.conv1, &input);
    let hidden = norm_act_forward(p, b.norm1, &pre1);
    let pre2 = conv_forward(p, b.conv2, &hidden);
    let output = norm_act_forward(p, b.norm2, &pre2);
    BlockCache { input, pre1, hidden, pre2, output }
}

fn block_backward<T: Scalar>(
    p: &Params<T>,
    g: &mut Params<T>,
    b: Block,
    cache: &BlockCache<T>,
    d_out: Tensor<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let d_pre2 = norm_act_backward(p, g, b.norm2, &cache.pre2, &cache.output, d_out);
    let d_hidden = conv_backward(p, g, b.conv2, &cache.hidden, &d_pre2, true).expect("dx requested");
    let d_pre1 = norm_act_backward(p, g, b.norm1, &cache.pre1, &cache.hidden, d_hidden);
    conv_backward(p, g, b.conv1, &cache.input, &d_pre1, need_dx)
}

fn encoder_forward<T: Scalar>(p: &Params<T>, blocks: &[Block], input: Tensor<T>) -> Vec<BlockCache<T>> {
    let mut caches: Vec<BlockCache<T>> = Vec::with_capacity(blocks.len());
    let mut next = Some(input);
    for &b in blocks {
        let x = match next.take() {
            Some(x) => x,
            None => ops::avg_pool2(&caches.last().expect("previous level").output),
        };
        caches.push(block_forward(p, b, x));
    }
    caches
}

/// Features only, dropping the intermediate activations level by level.
fn encoder_features<T: Scalar>(p: &Params<T>, blocks: &[Block], input: Tensor<T>) -> Vec<Tensor<T>> {
    let mut feats: Vec<Tensor<T>> = Vec::with_capacity(blocks.len());
    let mut input = Some(input);
    for &b in blocks {
        let x = match input.take() {
            Some(x) => x,
            None => ops::avg_pool2(feats.last().expect("previous level")),
        };
        feats.push(block_forward(p, b, x).output);
    }
    feats
}

fn encoder_backward<T: Scalar>(
    p: &Params<T>,
    g: &mut Params<T>,
    blocks: &[Block],
    caches: &[BlockCache<T>],
    d_features: &[Tensor<T>],
) {
    let mut carry: Option<Tensor<T>> = None;
    for k in (0..blocks.len()).rev() {
        let mut d = d_features[k].clone();
        if let Some(c) = carry.take() {
            d.add_assign(&c);
        }
        let dx = block_backward(p, g, blocks[k], &caches[k], d, k > 0);
        if k > 0 {
            carry = Some(ops::avg_pool2_backward(&dx.expect("dx requested"), caches[k - 1].output.dims));
        }
    }
}

/// Network output for one target: per-voxel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub scores: Volume3D<T>,
    pub threshold: T,
}

impl<T: Scalar> Prediction<T> {
    pub fn shape(&self) -> Shape3 {
        self.scores.shape()
    }

    pub fn binarize(&self) -> Mask3D {
        self.scores.threshold(self.threshold)
    }
}

/// Output logit at initialization: a 5% foreground prior, so early training
/// does not spend its steps pulling every voxel down from 0.5.
pub const HEAD_BIAS_INIT: f64 = -2.944_438_979_166_440_5;

/// Default binarization threshold on the sigmoid output.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Network parameters together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub step: u64,
    pub seed: u64,
}

/// Output of [`ModelState::loss_and_gradients`].
#[derive(Debug, Clone)]
pub struct LossAndGrad<T> {
    pub loss: f64,
    pub grads: Params<T>,
}

impl<T: Scalar> ModelState<T> {
    /// He-normal convolution weights, unit norm gains, zero biases except the
    /// output bias ([`HEAD_BIAS_INIT`]).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (_, specs) = topology(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 && name.ends_with(".weight") {
                    vec![T::one(); n]
                } else if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| { let g: f64 = StandardNormal.sample(&mut rng); T::from_f64_lossy(std * g) }).collect()
                } else if name == "head.bias" {
                    vec![T::from_f64_lossy(HEAD_BIAS_INIT); n]
                } else {
                    vec![T::zero(); n]
                };
                ParamTensor { name, shape, data }
            })
            .collect();
        Ok(ModelState { config, params: Params { tensors }, step: 0, seed })
    }

    /// Parameter names and shapes implied by `config`.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        topology(config).1
    }

    fn topology(&self) -> Topology {
        topology(&self.config).0
    }

    fn check_shape(&self, s: Shape3) -> Result<()> {
        if s.0 != self.config.input_shape {
            return Err(Error::ShapeMismatch { expected: self.config.input_shape, actual: s.0 });
        }
        Ok(())
    }

    fn check_context(&self, ctx: &ContextSet<T>) -> Result<()> {
        if ctx.prompt_type() != self.config.prompt_type {
            return Err(Error::PromptTypeMismatch {
                expected: self.config.prompt_type.to_string(),
                actual: ctx.prompt_type().to_string(),
            });
        }
        self.check_shape(ctx.shape())
    }

    fn context_input(x: &Volume3D<T>, u: &PromptChannel<T>) -> Tensor<T> {
        Tensor::from_channels(x.shape().0, &[x.data(), u.data()])
    }

    /// Per-level context features of one image/prompt pair.
    pub fn encode_context_pair(&self, x: &Volume3D<T>, u: &PromptChannel<T>) -> Result<Vec<Tensor<T>>> {
        self.check_shape(x.shape())?;
        self.check_shape(u.shape())?;
        Ok(encoder_features(&self.params, &self.topology().context, Self::context_input(x, u)))
    }

    /// Mean context features, streaming the set through the encoder
    /// `minibatch` pairs at a time.
    pub fn fuse_context_with(&self, ctx: &ContextSet<T>, minibatch: usize) -> Result<Vec<Tensor<T>>> {
        self.check_context(ctx)?;
        let topo = self.topology();
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for chunk in ctx.pairs().chunks(minibatch.max(1)) {
            let feats: Vec<Vec<Tensor<T>>> = chunk
                .iter()
                .map(|(x, u)| encoder_features(&self.params, &topo.context, Self::context_input(x, u)))
                .collect();
            for f in feats {
                match acc.as_mut() {
                    None => acc = Some(f),
                    Some(a) => a.iter_mut().zip(&f).for_each(|(a, f)| a.add_assign(f)),
                }
            }
        }
        let mut fused = acc.ok_or(Error::EmptyContext)?;
        let inv = T::one() / T::from_usize(ctx.len()).expect("context size");
        fused.iter_mut().for_each(|t| t.scale(inv));
        Ok(fused)
    }

    pub fn fuse_context(&self, ctx: &ContextSet<T>) -> Result<Vec<Tensor<T>>> {
        self.fuse_context_with(ctx, self.config.context_minibatch)
    }

    fn decode(&self, topo: &Topology, target: &[Tensor<T>], fused: &[Tensor<T>]) -> (Vec<BlockCache<T>>, Tensor<T>) {
        let levels = self.config.levels;
        let mut caches: Vec<Option<BlockCache<T>>> = (0..levels).map(|_| None).collect();
        let mut state: Option<Tensor<T>> = None;
        for k in (0..levels).rev() {
            let input = match &state {
                None => Tensor::concat(&[&target[k], &fused[k]]),
                Some(h) => Tensor::concat(&[&ops::upsample2(h), &target[k], &fused[k]]),
            };
            let cache = block_forward(&self.params, topo.decoder[k], input);
            state = Some(cache.output.clone());
            caches[k] = Some(cache);
        }
        let logits = conv_forward(&self.params, topo.head, &state.expect("at least one level"));
        (caches.into_iter().map(|c| c.expect("every level decoded")).collect(), logits)
    }

    fn scores(&self, logits: Tensor<T>) -> Volume3D<T> {
        let data = logits.data.into_iter().map(sigmoid).collect();
        Volume3D::new(self.config.shape(), data).expect("head output matches input shape")
    }

    /// Prediction for `x` given precomputed fused context features.
    pub fn predict_fused(&self, x: &Volume3D<T>, fused: &[Tensor<T>]) -> Result<Prediction<T>> {
        self.check_shape(x.shape())?;
        let topo = self.topology();
        let input = Tensor::from_channels(x.shape().0, &[x.data()]);
        let target = encoder_features(&self.params, &topo.target, input);
        let (_, logits) = self.decode(&topo, &target, fused);
        Ok(Prediction { scores: self.scores(logits), threshold: T::from_f64_lossy(DEFAULT_THRESHOLD) })
    }

    /// Segments `x` conditioned on the prompted context set.
    pub fn forward_icl(&self, x: &Volume3D<T>, ctx: &ContextSet<T>) -> Result<Prediction<T>> {
        let fused = self.fuse_context(ctx)?;
        self.predict_fused(x, &fused)
    }

    /// Mean smooth-L1 loss over `targets` (each against the same context set)
    /// and its gradient with respect to every parameter.
    ///
    /// Context activations are recomputed pair by pair during the backward
    /// pass, so memory does not grow with the context size.
    pub fn loss_and_gradients(
        &self,
        targets: &[(&Volume3D<T>, &Mask3D)],
        ctx: &ContextSet<T>,
        beta: f64,
    ) -> Result<LossAndGrad<T>> {
        if targets.is_empty() {
            return Err(Error::config("batch", "needs at least one target"));
        }
        let topo = self.topology();
        let fused = self.fuse_context(ctx)?;
        let mut grads = self.params.zeros_like();
        let mut d_fused: Vec<Tensor<T>> = fused.iter().map(|f| Tensor::zeros(f.channels, f.dims)).collect();
        let mut total = 0.0;
        let batch = targets.len() as f64;
        for &(x, y) in targets {
            self.check_shape(x.shape())?;
            self.check_shape(y.shape())?;
            let input = Tensor::from_channels(x.shape().0, &[x.data()]);
            let enc = encoder_forward(&self.params, &topo.target, input);
            let target_feats: Vec<Tensor<T>> = enc.iter().map(|c| c.output.clone()).collect();
            let (dec, logits) = self.decode(&topo, &target_feats, &fused);
            let probs: Vec<T> = logits.data.iter().map(|&v| sigmoid(v)).collect();
            let (loss, d_probs) = crate::train::smooth_l1_with_grad(&probs, y.data(), beta)?;
            total += loss / batch;
            let scale = T::from_f64_lossy(1.0 / batch);
            let mut d_logits = Tensor::zeros(1, logits.dims);
            for ((d, &p), &g) in d_logits.data.iter_mut().zip(&probs).zip(&d_probs) {
                *d = g * p * (T::one() - p) * scale;
            }
            let head_input = &dec[0].output;
            let mut d_state = conv_backward(&self.params, &mut grads, topo.head, head_input, &d_logits, true)
                .expect("dx requested");
            let mut d_target: Vec<Tensor<T>> = Vec::with_capacity(self.config.levels);
            for k in 0..self.config.levels {
                let d_in = block_backward(&self.params, &mut grads, topo.decoder[k], &dec[k], d_state, true)
                    .expect("dx requested");
                let c = self.config.width(k);
                let mut parts = if k + 1 == self.config.levels {
                    d_in.split(&[c, c])
                } else {
                    d_in.split(&[self.config.width(k + 1), c, c])
                };
                d_fused[k].add_assign(&parts.pop().expect("fused part"));
                d_target.push(parts.pop().expect("target part"));
                d_state = match parts.pop() {
                    Some(d_up) => ops::upsample2_backward(&d_up),
                    None => Tensor::zeros(0, [0, 0, 0]),
                };
            }
            encoder_backward(&self.params, &mut grads, &topo.target, &enc, &d_target);
        }
        let inv = T::one() / T::from_usize(ctx.len()).expect("context size");
        d_fused.iter_mut().for_each(|t| t.scale(inv));
        for (x, u) in ctx.pairs() {
            let caches = encoder_forward(&self.params, &topo.context, Self::context_input(x, u));
            encoder_backward(&self.params, &mut grads, &topo.context, &caches, &d_fused);
        }
        Ok(LossAndGrad { loss: total, grads })
    }

    /// Mean loss only, for finite-difference checks.
    pub fn loss(&self, targets: &[(&Volume3D<T>, &Mask3D)], ctx: &ContextSet<T>, beta: f64) -> Result<f64> {
        let fused = self.fuse_context(ctx)?;
        let mut total = 0.0;
        for &(x, y) in targets {
            let pred = self.predict_fused(x, &fused)?;
            total += crate::train::smooth_l1_with_grad(pred.scores.data(), y.data(), beta)?.0;
        }
        Ok(total / targets.len() as f64)
    }
}
