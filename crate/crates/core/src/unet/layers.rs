//! Forward and backward passes of the individual U-Net layers.
//!
//! Every forward returns the output plus a cache holding exactly what its
//! backward needs. Backward passes are exact analytic adjoints; parameter
//! gradients are summed over the batch in sample order.

use rand::Rng;

use super::UNetError;
use crate::tensor::{concat_channels, crop_pad2d, split_channels, zero_pad2d, Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    UpConv,
    Dropout,
    Concat,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T: Real> {
    padded_input: Tensor<T>,
    pad: usize,
    out_shape: Shape,
}

#[derive(Debug, Clone)]
pub struct ReluCache<T: Real> {
    output: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: Shape,
    out_shape: Shape,
    /// Winning offset within each input plane, one per output element.
    argmax: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct UpConvCache<T: Real> {
    input: Tensor<T>,
    out_shape: Shape,
}

#[derive(Debug, Clone)]
pub struct DropoutCache<T: Real> {
    kept: Vec<bool>,
    scale: T,
    shape: Shape,
}

#[derive(Debug, Clone)]
pub struct ConcatCache {
    split_at: usize,
    out_shape: Shape,
}

/// Cache of one forward call, tagged by layer kind.
#[derive(Debug, Clone)]
pub enum LayerCache<T: Real> {
    Conv(ConvCache<T>),
    Relu(ReluCache<T>),
    MaxPool(PoolCache),
    UpConv(UpConvCache<T>),
    Dropout(DropoutCache<T>),
    Concat(ConcatCache),
}

impl<T: Real> LayerCache<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerCache::Conv(_) => LayerKind::Conv,
            LayerCache::Relu(_) => LayerKind::Relu,
            LayerCache::MaxPool(_) => LayerKind::MaxPool,
            LayerCache::UpConv(_) => LayerKind::UpConv,
            LayerCache::Dropout(_) => LayerKind::Dropout,
            LayerCache::Concat(_) => LayerKind::Concat,
        }
    }

    fn out_shape(&self) -> Shape {
        match self {
            LayerCache::Conv(c) => c.out_shape,
            LayerCache::Relu(c) => c.output.shape(),
            LayerCache::MaxPool(c) => c.out_shape,
            LayerCache::UpConv(c) => c.out_shape,
            LayerCache::Dropout(c) => c.shape,
            LayerCache::Concat(c) => c.out_shape,
        }
    }
}

/// Gradients produced by [`layer_backward`]. `grad_inputs` has two entries
/// for concat (in argument order) and one otherwise.
#[derive(Debug, Clone)]
pub struct LayerGrads<T: Real> {
    pub grad_inputs: Vec<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Vec<T>>,
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Eight independent partial sums so the loop vectorizes; the summation
/// order is fixed, so results stay reproducible.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

fn check_conv_params<T: Real>(x: Shape, kernel: &Tensor<T>, bias: &[T]) -> Result<(), UNetError> {
    let k = kernel.shape();
    if k.c != x.c {
        return Err(UNetError::ShapeMismatch(format!("kernel {} expects {} input channels, got input {}", k, k.c, x)));
    }
    if bias.len() != k.n {
        return Err(UNetError::ShapeMismatch(format!("{} biases for {} output channels", bias.len(), k.n)));
    }
    Ok(())
}

/// Unrolls sample `n` of a padded input into rows indexed by
/// `(channel, ky, kx)`, each holding the `ho × wo` window positions.
fn im2col<T: Real>(xp: &Tensor<T>, n: usize, k: usize, ho: usize, wo: usize, col: &mut [T]) {
    let pw = xp.shape().w;
    let plane = ho * wo;
    let mut j = 0;
    for c in 0..xp.shape().c {
        let src = xp.plane(n, c);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[j * plane..(j + 1) * plane];
                for y in 0..ho {
                    let s0 = (y + ky) * pw + kx;
                    row[y * wo..(y + 1) * wo].copy_from_slice(&src[s0..s0 + wo]);
                }
                j += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters rows back onto sample `n`, summing overlaps.
fn col2im_add<T: Real>(col: &[T], n: usize, k: usize, ho: usize, wo: usize, xp: &mut Tensor<T>) {
    let pw = xp.shape().w;
    let plane = ho * wo;
    let mut j = 0;
    for c in 0..xp.shape().c {
        let dst = xp.plane_mut(n, c);
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[j * plane..(j + 1) * plane];
                for y in 0..ho {
                    let d0 = (y + ky) * pw + kx;
                    for (d, &v) in dst[d0..d0 + wo].iter_mut().zip(&row[y * wo..(y + 1) * wo]) {
                        *d = *d + v;
                    }
                }
                j += 1;
            }
        }
    }
}

/// Cross-correlation of `x` with `kernel` of shape `(c_out, c_in, k, k)`
/// after zero-padding by `pad`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &[T],
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>), UNetError> {
    check_conv_params(x.shape(), kernel, bias)?;
    let ks = kernel.shape();
    if ks.h != ks.w {
        return Err(UNetError::ShapeMismatch(format!("non-square kernel {}", ks)));
    }
    let k = ks.h;
    let xp = zero_pad2d(x, pad);
    let ps = xp.shape();
    if ps.h < k || ps.w < k {
        return Err(UNetError::ShapeMismatch(format!("kernel {} larger than padded input {}", ks, ps)));
    }
    let (ho, wo) = (ps.h - k + 1, ps.w - k + 1);
    let out_shape = Shape::new(ps.n, ks.n, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let ck = ks.c * k * k;
    let plane = ho * wo;
    let mut col = vec![T::zero(); ck * plane];
    for n in 0..ps.n {
        im2col(&xp, n, k, ho, wo, &mut col);
        for o in 0..ks.n {
            let dst = out.plane_mut(n, o);
            dst.fill(bias[o]);
            let weights = &kernel.data()[o * ck..(o + 1) * ck];
            for (j, &w) in weights.iter().enumerate() {
                axpy(w, &col[j * plane..(j + 1) * plane], dst);
            }
        }
    }
    Ok((out, ConvCache { padded_input: xp, pad, out_shape }))
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>), UNetError> {
    if grad_out.shape() != cache.out_shape {
        return Err(UNetError::CacheMismatch(format!("conv grad {} vs output {}", grad_out.shape(), cache.out_shape)));
    }
    let ks = kernel.shape();
    let ps = cache.padded_input.shape();
    if ks.c != ps.c || ks.n != cache.out_shape.c {
        return Err(UNetError::CacheMismatch(format!("kernel {} does not match cached input {}", ks, ps)));
    }
    let k = ks.h;
    let (ho, wo) = (cache.out_shape.h, cache.out_shape.w);
    let ck = ks.c * k * k;
    let plane = ho * wo;
    let mut grad_xp = Tensor::zeros(ps);
    let mut grad_k = Tensor::zeros(ks);
    let mut grad_b = vec![T::zero(); ks.n];
    let mut col = vec![T::zero(); ck * plane];
    let mut grad_col = vec![T::zero(); ck * plane];
    for n in 0..ps.n {
        im2col(&cache.padded_input, n, k, ho, wo, &mut col);
        for o in 0..ks.n {
            let g = grad_out.plane(n, o);
            grad_b[o] = grad_b[o] + g.iter().fold(T::zero(), |a, &v| a + v);
            let gk = &mut grad_k.data_mut()[o * ck..(o + 1) * ck];
            for (j, acc) in gk.iter_mut().enumerate() {
                *acc = *acc + dot(g, &col[j * plane..(j + 1) * plane]);
            }
        }
        grad_col.fill(T::zero());
        for j in 0..ck {
            let dst = &mut grad_col[j * plane..(j + 1) * plane];
            for o in 0..ks.n {
                axpy(kernel.data()[o * ck + j], grad_out.plane(n, o), dst);
            }
        }
        col2im_add(&grad_col, n, k, ho, wo, &mut grad_xp);
    }
    Ok((crop_pad2d(&grad_xp, cache.pad), grad_k, grad_b))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, ReluCache<T>) {
    let out = relu(x);
    (out.clone(), ReluCache { output: out })
}

/// Passes gradient where the forward output was strictly positive.
pub fn relu_backward<T: Real>(cache: &ReluCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, UNetError> {
    if grad_out.shape() != cache.output.shape() {
        return Err(UNetError::CacheMismatch(format!(
            "relu grad {} vs output {}",
            grad_out.shape(),
            cache.output.shape()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(cache.output.data())
        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_vec(grad_out.shape(), data).expect("same shape"))
}

/// 2×2 max pooling with stride 2. Ties go to the first window element in
/// row-major order.
pub fn maxpool_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache), UNetError> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(UNetError::OddSpatialDims(s));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                for xo in 0..wo {
                    let base = 2 * y * s.w + 2 * xo;
                    let mut best = base;
                    for cand in [base + 1, base + s.w, base + s.w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[y * wo + xo] = src[best];
                    argmax.push(best as u32);
                }
            }
        }
    }
    Ok((out, PoolCache { input_shape: s, out_shape, argmax }))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool_backward<T: Real>(cache: &PoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>, UNetError> {
    if grad_out.shape() != cache.out_shape {
        return Err(UNetError::CacheMismatch(format!("pool grad {} vs output {}", grad_out.shape(), cache.out_shape)));
    }
    let s = cache.input_shape;
    let mut grad_in = Tensor::zeros(s);
    let po = cache.out_shape.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let plane_idx = n * s.c + c;
            let g = grad_out.plane(n, c);
            let idx = &cache.argmax[plane_idx * po..(plane_idx + 1) * po];
            let dst = grad_in.plane_mut(n, c);
            for (&gi, &a) in g.iter().zip(idx) {
                dst[a as usize] = dst[a as usize] + gi;
            }
        }
    }
    Ok(grad_in)
}

/// Transposed convolution with a 2×2 kernel and stride 2: each input pixel
/// paints one 2×2 output block. Kernel shape is `(c_out, c_in, 2, 2)`.
pub fn upconv_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &[T],
) -> Result<(Tensor<T>, UpConvCache<T>), UNetError> {
    check_conv_params(x.shape(), kernel, bias)?;
    let ks = kernel.shape();
    if ks.h != 2 || ks.w != 2 {
        return Err(UNetError::ShapeMismatch(format!("upconv kernel must be 2x2, got {}", ks)));
    }
    let s = x.shape();
    let (ho, wo) = (2 * s.h, 2 * s.w);
    let out_shape = Shape::new(s.n, ks.n, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for o in 0..ks.n {
            let dst = out.plane_mut(n, o);
            dst.fill(bias[o]);
            for c in 0..s.c {
                let src = x.plane(n, c);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let w = kernel.at(o, c, dy, dx);
                        for i in 0..s.h {
                            let row = &mut dst[(2 * i + dy) * wo..(2 * i + dy + 1) * wo];
                            for (j, &v) in src[i * s.w..(i + 1) * s.w].iter().enumerate() {
                                row[2 * j + dx] = row[2 * j + dx] + w * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, UpConvCache { input: x.clone(), out_shape }))
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn upconv_backward<T: Real>(
    cache: &UpConvCache<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>), UNetError> {
    if grad_out.shape() != cache.out_shape {
        return Err(UNetError::CacheMismatch(format!(
            "upconv grad {} vs output {}",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    let ks = kernel.shape();
    let s = cache.input.shape();
    if ks.c != s.c || ks.n != cache.out_shape.c {
        return Err(UNetError::CacheMismatch(format!("kernel {} does not match cached input {}", ks, s)));
    }
    let wo = cache.out_shape.w;
    let mut grad_x = Tensor::zeros(s);
    let mut grad_k = Tensor::zeros(ks);
    let mut grad_b = vec![T::zero(); ks.n];
    for n in 0..s.n {
        for o in 0..ks.n {
            let g = grad_out.plane(n, o);
            grad_b[o] = grad_b[o] + g.iter().fold(T::zero(), |a, &v| a + v);
            for c in 0..s.c {
                let src = cache.input.plane(n, c);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let w = kernel.at(o, c, dy, dx);
                        let mut acc = T::zero();
                        let dst = grad_x.plane_mut(n, c);
                        for i in 0..s.h {
                            let grow = &g[(2 * i + dy) * wo..(2 * i + dy + 1) * wo];
                            for j in 0..s.w {
                                let gv = grow[2 * j + dx];
                                acc = acc + src[i * s.w + j] * gv;
                                dst[i * s.w + j] = dst[i * s.w + j] + w * gv;
                            }
                        }
                        let k = grad_k.offset(o, c, dy, dx);
                        grad_k.data_mut()[k] = grad_k.data()[k] + acc;
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_k, grad_b))
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `p` and survivors are scaled by `1 / (1 − p)`. Eval mode is the identity.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, DropoutCache<T>), UNetError> {
    if !(0.0..1.0).contains(&p) {
        return Err(UNetError::ConfigInvalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        let cache = DropoutCache { kept: vec![true; x.len()], scale: T::one(), shape: x.shape() };
        return Ok((x.clone(), cache));
    }
    let scale = T::from_f64_lossy(1.0 / (1.0 - p));
    let kept: Vec<bool> = (0..x.len()).map(|_| rng.gen::<f64>() >= p).collect();
    let data = x.data().iter().zip(&kept).map(|(&v, &k)| if k { v * scale } else { T::zero() }).collect();
    Ok((Tensor::from_vec(x.shape(), data).expect("same shape"), DropoutCache { kept, scale, shape: x.shape() }))
}

pub fn dropout_backward<T: Real>(cache: &DropoutCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>, UNetError> {
    if grad_out.shape() != cache.shape {
        return Err(UNetError::CacheMismatch(format!("dropout grad {} vs output {}", grad_out.shape(), cache.shape)));
    }
    let data =
        grad_out.data().iter().zip(&cache.kept).map(|(&g, &k)| if k { g * cache.scale } else { T::zero() }).collect();
    Ok(Tensor::from_vec(cache.shape, data).expect("same shape"))
}

impl<T: Real> DropoutCache<T> {
    pub fn kept(&self) -> &[bool] {
        &self.kept
    }
}

pub fn concat_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, ConcatCache), UNetError> {
    let out = concat_channels(a, b).map_err(|e| UNetError::ShapeMismatch(e.to_string()))?;
    let out_shape = out.shape();
    Ok((out, ConcatCache { split_at: a.shape().c, out_shape }))
}

pub fn concat_backward<T: Real>(
    cache: &ConcatCache,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), UNetError> {
    if grad_out.shape() != cache.out_shape {
        return Err(UNetError::CacheMismatch(format!(
            "concat grad {} vs output {}",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    split_channels(grad_out, cache.split_at).map_err(|e| UNetError::CacheMismatch(e.to_string()))
}

/// Backward pass of any layer kind. `kernel` is required for conv and
/// upconv and ignored otherwise.
pub fn layer_backward<T: Real>(
    kind: LayerKind,
    cache: &LayerCache<T>,
    kernel: Option<&Tensor<T>>,
    grad_out: &Tensor<T>,
) -> Result<LayerGrads<T>, UNetError> {
    if cache.kind() != kind {
        return Err(UNetError::CacheMismatch(format!("{:?} backward given a {:?} cache", kind, cache.kind())));
    }
    if grad_out.shape() != cache.out_shape() {
        return Err(UNetError::CacheMismatch(format!(
            "grad {} vs cached output {}",
            grad_out.shape(),
            cache.out_shape()
        )));
    }
    let need_kernel = || kernel.ok_or_else(|| UNetError::CacheMismatch(format!("{kind:?} backward needs its kernel")));
    let single = |g: Tensor<T>| LayerGrads { grad_inputs: vec![g], kernel: None, bias: None };
    Ok(match cache {
        LayerCache::Conv(c) => {
            let (g, k, b) = conv2d_backward(c, need_kernel()?, grad_out)?;
            LayerGrads { grad_inputs: vec![g], kernel: Some(k), bias: Some(b) }
        }
        LayerCache::UpConv(c) => {
            let (g, k, b) = upconv_backward(c, need_kernel()?, grad_out)?;
            LayerGrads { grad_inputs: vec![g], kernel: Some(k), bias: Some(b) }
        }
        LayerCache::Relu(c) => single(relu_backward(c, grad_out)?),
        LayerCache::MaxPool(c) => single(maxpool_backward(c, grad_out)?),
        LayerCache::Dropout(c) => single(dropout_backward(c, grad_out)?),
        LayerCache::Concat(c) => {
            let (a, b) = concat_backward(c, grad_out)?;
            LayerGrads { grad_inputs: vec![a, b], kernel: None, bias: None }
        }
    })
}
