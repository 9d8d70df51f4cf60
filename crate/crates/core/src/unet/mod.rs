//! Depth-`d` U-Net: two 3×3 conv-ReLU layers per encoder stage followed by
//! 2×2 max pooling, a two-convolution bottleneck with dropout, decoder
//! stages of 2×2 stride-2 transposed convolution, skip concatenation and two
//! conv-ReLU layers, and a 1×1 head.
//!
//! Layer identifiers (used for activation taps and checkpoint blocks):
//!
//! | id             | output                                   |
//! |----------------|------------------------------------------|
//! | `enc.s.c1/c2`  | ReLU output of encoder stage `s`         |
//! | `pool.s`       | max-pooled output of encoder stage `s`   |
//! | `mid.c1/c2`    | ReLU output of the bottleneck convs      |
//! | `up.s`         | transposed-conv output feeding stage `s` |
//! | `dec.s.c1/c2`  | ReLU output of decoder stage `s`         |
//! | `head`         | logits                                   |
//!
//! Decoder stages are numbered after the encoder stage whose skip they
//! consume, so they run `depth − 1` down to `0`.

mod checkpoint;
mod layers;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use layers::{
    concat_backward, concat_forward, conv2d_backward, conv2d_forward, dropout, dropout_backward, layer_backward,
    maxpool_backward, maxpool_forward, relu, relu_backward, relu_forward, upconv_backward, upconv_forward, ConcatCache,
    ConvCache, DropoutCache, LayerCache, LayerGrads, LayerKind, Mode, PoolCache, ReluCache, UpConvCache,
};

use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input spatial size {h}x{w} is not divisible by 2^{depth}")]
    IndivisibleSpatialDims { h: usize, w: usize, depth: usize },
    #[error("max pooling needs even spatial dims, got {0}")]
    OddSpatialDims(Shape),
    #[error("backward cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("invalid U-Net config: {0}")]
    ConfigInvalid(String),
    #[error("invalid checkpoint: {0}")]
    FormatInvalid(String),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub conv_kernel: usize,
    pub conv_pad: usize,
    pub up_kernel: usize,
    pub up_stride: usize,
    pub pool_kernel: usize,
    pub dropout_p: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 9,
            out_channels: 3,
            depth: 4,
            base_channels: 16,
            conv_kernel: 3,
            conv_pad: 1,
            up_kernel: 2,
            up_stride: 2,
            pool_kernel: 2,
            dropout_p: 0.2,
        }
    }
}

/// Upper bounds that keep parameter counts addressable when configs come
/// from untrusted files.
const MAX_DEPTH: usize = 12;
const MAX_CHANNELS: usize = 1 << 16;

impl UNetConfig {
    pub fn validate(&self) -> Result<(), UNetError> {
        let fail = |m: String| Err(UNetError::ConfigInvalid(m));
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return fail(format!("depth {} outside 1..={}", self.depth, MAX_DEPTH));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        let widest = self.base_channels.checked_shl(self.depth as u32).filter(|&c| c <= MAX_CHANNELS);
        if widest.is_none() || self.in_channels > MAX_CHANNELS || self.out_channels > MAX_CHANNELS {
            return fail(format!("channel counts exceed {MAX_CHANNELS}"));
        }
        if self.conv_kernel.is_multiple_of(2) || self.conv_pad * 2 + 1 != self.conv_kernel {
            return fail(format!(
                "conv kernel {} with pad {} does not preserve spatial size",
                self.conv_kernel, self.conv_pad
            ));
        }
        if self.up_kernel != 2 || self.up_stride != 2 || self.pool_kernel != 2 {
            return fail("only 2x2 pooling and 2x2 stride-2 upsampling are supported".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    /// Output channels of encoder stage `s`; stage `depth` is the bottleneck.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Every layer identifier in forward order.
    pub fn layer_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for s in 0..self.depth {
            ids.extend([format!("enc.{s}.c1"), format!("enc.{s}.c2"), format!("pool.{s}")]);
        }
        ids.extend(["mid.c1".to_string(), "mid.c2".to_string()]);
        for s in (0..self.depth).rev() {
            ids.extend([format!("up.{s}"), format!("dec.{s}.c1"), format!("dec.{s}.c2")]);
        }
        ids.push("head".into());
        ids
    }

    /// The eight layers shown in the representation figure: the first,
    /// third, fifth and seventh encoder convolutions, the first and third
    /// transposed convolutions, the last pooling layer and the second
    /// bottleneck convolution. Other depths get the nearest equivalents.
    pub fn paper_tap_layers(&self) -> Vec<String> {
        let last = self.depth - 1;
        let mut ids: Vec<String> = (0..self.depth.min(4)).map(|s| format!("enc.{s}.c1")).collect();
        ids.push(format!("up.{last}"));
        if self.depth >= 3 {
            ids.push(format!("up.{}", last - 2));
        }
        ids.push(format!("pool.{last}"));
        ids.push("mid.c2".into());
        ids
    }

    /// Output shape of every layer for an input of `n × in_channels × h × w`.
    pub fn layer_shapes(&self, n: usize, h: usize, w: usize) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        for s in 0..self.depth {
            let (hs, ws, c) = (h >> s, w >> s, self.stage_channels(s));
            out.push((format!("enc.{s}.c1"), Shape::new(n, c, hs, ws)));
            out.push((format!("enc.{s}.c2"), Shape::new(n, c, hs, ws)));
            out.push((format!("pool.{s}"), Shape::new(n, c, hs / 2, ws / 2)));
        }
        let (hm, wm, cm) = (h >> self.depth, w >> self.depth, self.stage_channels(self.depth));
        out.push(("mid.c1".into(), Shape::new(n, cm, hm, wm)));
        out.push(("mid.c2".into(), Shape::new(n, cm, hm, wm)));
        for s in (0..self.depth).rev() {
            let (hs, ws, c) = (h >> s, w >> s, self.stage_channels(s));
            out.push((format!("up.{s}"), Shape::new(n, c, hs, ws)));
            out.push((format!("dec.{s}.c1"), Shape::new(n, c, hs, ws)));
            out.push((format!("dec.{s}.c2"), Shape::new(n, c, hs, ws)));
        }
        out.push(("head".into(), Shape::new(n, self.out_channels, h, w)));
        out
    }

    /// `(name, kernel shape)` of every parameter block in canonical order:
    /// encoder stages, bottleneck, decoder stages (deepest first), head.
    pub fn block_layout(&self) -> Vec<(String, Shape)> {
        let k = self.conv_kernel;
        let mut blocks = Vec::new();
        let mut c_in = self.in_channels;
        for s in 0..self.depth {
            let c = self.stage_channels(s);
            blocks.push((format!("enc.{s}.c1"), Shape::new(c, c_in, k, k)));
            blocks.push((format!("enc.{s}.c2"), Shape::new(c, c, k, k)));
            c_in = c;
        }
        let cm = self.stage_channels(self.depth);
        blocks.push(("mid.c1".into(), Shape::new(cm, c_in, k, k)));
        blocks.push(("mid.c2".into(), Shape::new(cm, cm, k, k)));
        let mut c_prev = cm;
        for s in (0..self.depth).rev() {
            let c = self.stage_channels(s);
            blocks.push((format!("up.{s}"), Shape::new(c, c_prev, 2, 2)));
            blocks.push((format!("dec.{s}.c1"), Shape::new(c, 2 * c, k, k)));
            blocks.push((format!("dec.{s}.c2"), Shape::new(c, c, k, k)));
            c_prev = c;
        }
        blocks.push(("head".into(), Shape::new(self.out_channels, c_prev, 1, 1)));
        blocks
    }

    fn enc_block(&self, s: usize, j: usize) -> usize {
        2 * s + j
    }

    fn mid_block(&self, j: usize) -> usize {
        2 * self.depth + j
    }

    /// Index of the upconv block of decoder stage `s`; the two convs follow.
    fn dec_block(&self, s: usize) -> usize {
        2 * self.depth + 2 + 3 * (self.depth - 1 - s)
    }

    fn head_block(&self) -> usize {
        5 * self.depth + 2
    }
}

/// Kernel and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<T: Real = f32> {
    pub name: String,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ParamBlock<T> {
    /// Inputs feeding each output element. A 2×2 stride-2 transposed
    /// convolution touches one kernel tap per input channel.
    pub fn fan_in(&self) -> usize {
        let s = self.kernel.shape();
        if self.name.starts_with("up.") {
            s.c
        } else {
            s.c * s.h * s.w
        }
    }
}

/// All U-Net weights, in the canonical block order of
/// [`UNetConfig::block_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    pub blocks: Vec<ParamBlock<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: &UNetConfig) -> Self {
        let blocks = config
            .block_layout()
            .into_iter()
            .map(|(name, shape)| ParamBlock { name, kernel: Tensor::zeros(shape), bias: vec![T::zero(); shape.n] })
            .collect();
        Self { blocks }
    }

    pub fn zeros_like(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| ParamBlock {
                name: b.name.clone(),
                kernel: Tensor::zeros(b.kernel.shape()),
                bias: vec![T::zero(); b.bias.len()],
            })
            .collect();
        Self { blocks }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| ParamBlock {
                name: b.name.clone(),
                kernel: b.kernel.cast(),
                bias: b.bias.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))).collect(),
            })
            .collect();
        ModelParams { blocks }
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.kernel.len() + b.bias.len()).sum()
    }

    /// Checks that block names and shapes match `config`.
    pub fn conforms_to(&self, config: &UNetConfig) -> Result<(), UNetError> {
        let layout = config.block_layout();
        if layout.len() != self.blocks.len() {
            return Err(UNetError::ShapeMismatch(format!(
                "{} blocks, config expects {}",
                self.blocks.len(),
                layout.len()
            )));
        }
        for ((name, shape), b) in layout.iter().zip(&self.blocks) {
            if &b.name != name || b.kernel.shape() != *shape || b.bias.len() != shape.n {
                return Err(UNetError::ShapeMismatch(format!(
                    "block {} {} does not match expected {} {}",
                    b.name,
                    b.kernel.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Visits every scalar (kernel then bias, block by block).
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.blocks.iter().flat_map(|b| b.kernel.data().iter().chain(&b.bias).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.blocks.iter_mut().flat_map(|b| b.kernel.data_mut().iter_mut().chain(b.bias.iter_mut()))
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock<T>> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Kaiming-uniform kernels (bound `sqrt(6 / fan_in)`) and zero biases.
pub fn init_params(config: &UNetConfig, seed: u64) -> Result<ModelParams<f32>, UNetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f32>::zeros(config);
    for block in &mut params.blocks {
        let bound = (6.0 / block.fan_in() as f64).sqrt();
        for v in block.kernel.data_mut() {
            *v = rng.gen_range(-bound..bound) as f32;
        }
    }
    Ok(params)
}

/// Post-nonlinearity output of one tapped layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord<T: Real = f32> {
    pub layer: String,
    pub tensor: Tensor<T>,
}

struct EncoderTrace<T: Real> {
    conv1: ConvCache<T>,
    relu1: ReluCache<T>,
    conv2: ConvCache<T>,
    relu2: ReluCache<T>,
    pool: PoolCache,
}

struct MidTrace<T: Real> {
    conv1: ConvCache<T>,
    relu1: ReluCache<T>,
    drop1: DropoutCache<T>,
    conv2: ConvCache<T>,
    relu2: ReluCache<T>,
    drop2: DropoutCache<T>,
}

struct DecoderTrace<T: Real> {
    up: UpConvCache<T>,
    concat: ConcatCache,
    conv1: ConvCache<T>,
    relu1: ReluCache<T>,
    conv2: ConvCache<T>,
    relu2: ReluCache<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace<T: Real> {
    encoder: Vec<EncoderTrace<T>>,
    mid: MidTrace<T>,
    /// Indexed by decoder stage `s` (so `decoder[0]` is the last to run).
    decoder: Vec<Option<DecoderTrace<T>>>,
    head: ConvCache<T>,
}

struct Recorder<'a, T: Real> {
    wanted: &'a [String],
    got: HashMap<String, Tensor<T>>,
}

impl<T: Real> Recorder<'_, T> {
    fn record(&mut self, id: String, t: &Tensor<T>) {
        if self.wanted.contains(&id) {
            self.got.insert(id, t.clone());
        }
    }
}

fn check_input(config: &UNetConfig, params_len: usize, x: Shape) -> Result<(), UNetError> {
    config.validate()?;
    if params_len != config.block_layout().len() {
        return Err(UNetError::ShapeMismatch(format!("params have {params_len} blocks for this config")));
    }
    if x.c != config.in_channels {
        return Err(UNetError::ShapeMismatch(format!(
            "input {} has {} channels, expected {}",
            x, x.c, config.in_channels
        )));
    }
    let m = 1usize << config.depth;
    if !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) || x.h == 0 || x.w == 0 {
        return Err(UNetError::IndivisibleSpatialDims { h: x.h, w: x.w, depth: config.depth });
    }
    Ok(())
}

/// Forward pass returning logits, requested activations in request order,
/// and the trace for [`unet_backward`].
pub fn forward_with_trace<T: Real, R: Rng + ?Sized>(
    config: &UNetConfig,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    mode: Mode,
    taps: &[String],
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<ActivationRecord<T>>, ForwardTrace<T>), UNetError> {
    check_input(config, params.blocks.len(), x.shape())?;
    let ids = config.layer_ids();
    if let Some(bad) = taps.iter().find(|t| !ids.contains(t)) {
        return Err(UNetError::UnknownLayer(bad.clone()));
    }
    let pad = config.conv_pad;
    let blk = |i: usize| &params.blocks[i];
    let conv = |x: &Tensor<T>, i: usize| conv2d_forward(x, &blk(i).kernel, &blk(i).bias, pad);
    let mut rec = Recorder { wanted: taps, got: HashMap::new() };

    let mut skips = Vec::with_capacity(config.depth);
    let mut encoder = Vec::with_capacity(config.depth);
    let mut h = x.clone();
    for s in 0..config.depth {
        let (a, conv1) = conv(&h, config.enc_block(s, 0))?;
        let (a, relu1) = relu_forward(&a);
        rec.record(format!("enc.{s}.c1"), &a);
        let (a, conv2) = conv(&a, config.enc_block(s, 1))?;
        let (a, relu2) = relu_forward(&a);
        rec.record(format!("enc.{s}.c2"), &a);
        let (p, pool) = maxpool_forward(&a)?;
        rec.record(format!("pool.{s}"), &p);
        skips.push(a);
        encoder.push(EncoderTrace { conv1, relu1, conv2, relu2, pool });
        h = p;
    }

    let (a, conv1) = conv(&h, config.mid_block(0))?;
    let (a, relu1) = relu_forward(&a);
    rec.record("mid.c1".into(), &a);
    let (a, drop1) = dropout(&a, config.dropout_p, mode, rng)?;
    let (a, conv2) = conv(&a, config.mid_block(1))?;
    let (a, relu2) = relu_forward(&a);
    rec.record("mid.c2".into(), &a);
    let (mut h, drop2) = dropout(&a, config.dropout_p, mode, rng)?;
    let mid = MidTrace { conv1, relu1, drop1, conv2, relu2, drop2 };

    let mut decoder: Vec<Option<DecoderTrace<T>>> = (0..config.depth).map(|_| None).collect();
    for s in (0..config.depth).rev() {
        let b = config.dec_block(s);
        let (u, up) = upconv_forward(&h, &blk(b).kernel, &blk(b).bias)?;
        rec.record(format!("up.{s}"), &u);
        let (cat, concat) = concat_forward(&skips[s], &u)?;
        let (a, conv1) = conv(&cat, b + 1)?;
        let (a, relu1) = relu_forward(&a);
        rec.record(format!("dec.{s}.c1"), &a);
        let (a, conv2) = conv(&a, b + 2)?;
        let (a, relu2) = relu_forward(&a);
        rec.record(format!("dec.{s}.c2"), &a);
        decoder[s] = Some(DecoderTrace { up, concat, conv1, relu1, conv2, relu2 });
        h = a;
    }

    let head_idx = config.head_block();
    let (logits, head) = conv2d_forward(&h, &blk(head_idx).kernel, &blk(head_idx).bias, 0)?;
    rec.record("head".into(), &logits);

    let records = taps.iter().map(|id| ActivationRecord { layer: id.clone(), tensor: rec.got[id].clone() }).collect();
    Ok((logits, records, ForwardTrace { encoder, mid, decoder, head }))
}

/// Logits of shape `(n, out_channels, h, w)` plus the requested activations.
pub fn unet_forward<T: Real, R: Rng + ?Sized>(
    config: &UNetConfig,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    mode: Mode,
    taps: &[String],
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<ActivationRecord<T>>), UNetError> {
    let (logits, records, _) = forward_with_trace(config, params, x, mode, taps, rng)?;
    Ok((logits, records))
}

/// Eval-mode logits without taps.
pub fn predict_logits<T: Real>(
    config: &UNetConfig,
    params: &ModelParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>, UNetError> {
    // Eval mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(unet_forward(config, params, x, Mode::Eval, &[], &mut rng)?.0)
}

/// Gradient of the loss with respect to every parameter, given the gradient
/// with respect to the logits.
pub fn unet_backward<T: Real>(
    config: &UNetConfig,
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    grad_logits: &Tensor<T>,
) -> Result<ModelParams<T>, UNetError> {
    let mut grads = params.zeros_like();
    let mut put = |i: usize, k: Tensor<T>, b: Vec<T>| {
        grads.blocks[i].kernel = k;
        grads.blocks[i].bias = b;
    };
    let blk = |i: usize| &params.blocks[i].kernel;

    let hi = config.head_block();
    let (mut g, gk, gb) = conv2d_backward(&trace.head, blk(hi), grad_logits)?;
    put(hi, gk, gb);

    let mut skip_grads: Vec<Option<Tensor<T>>> = (0..config.depth).map(|_| None).collect();
    for s in 0..config.depth {
        let d = trace.decoder[s].as_ref().expect("decoder stage traced");
        let b = config.dec_block(s);
        let gr = relu_backward(&d.relu2, &g)?;
        let (gc, gk, gb) = conv2d_backward(&d.conv2, blk(b + 2), &gr)?;
        put(b + 2, gk, gb);
        let gr = relu_backward(&d.relu1, &gc)?;
        let (gcat, gk, gb) = conv2d_backward(&d.conv1, blk(b + 1), &gr)?;
        put(b + 1, gk, gb);
        let (gskip, gup) = concat_backward(&d.concat, &gcat)?;
        skip_grads[s] = Some(gskip);
        let (gprev, gk, gb) = upconv_backward(&d.up, blk(b), &gup)?;
        put(b, gk, gb);
        g = gprev;
    }

    let m = &trace.mid;
    let g2 = dropout_backward(&m.drop2, &g)?;
    let g2 = relu_backward(&m.relu2, &g2)?;
    let (g1, gk, gb) = conv2d_backward(&m.conv2, blk(config.mid_block(1)), &g2)?;
    put(config.mid_block(1), gk, gb);
    let g1 = dropout_backward(&m.drop1, &g1)?;
    let g1 = relu_backward(&m.relu1, &g1)?;
    let (mut g, gk, gb) = conv2d_backward(&m.conv1, blk(config.mid_block(0)), &g1)?;
    put(config.mid_block(0), gk, gb);

    for s in (0..config.depth).rev() {
        let e = &trace.encoder[s];
        let mut ga = maxpool_backward(&e.pool, &g)?;
        let skip = skip_grads[s].take().expect("skip gradient recorded");
        for (a, b) in ga.data_mut().iter_mut().zip(skip.data()) {
            *a = *a + *b;
        }
        let ga = relu_backward(&e.relu2, &ga)?;
        let (g1, gk, gb) = conv2d_backward(&e.conv2, blk(config.enc_block(s, 1)), &ga)?;
        put(config.enc_block(s, 1), gk, gb);
        let g1 = relu_backward(&e.relu1, &g1)?;
        let (g0, gk, gb) = conv2d_backward(&e.conv1, blk(config.enc_block(s, 0)), &g1)?;
        put(config.enc_block(s, 0), gk, gb);
        g = g0;
    }
    Ok(grads)
}
