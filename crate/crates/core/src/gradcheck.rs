//! Central finite-difference checks of the analytic gradients, run in `f64`.
//!
//! Each layer is wrapped in a scalar probe `L = Σ r ⊙ layer(inputs)` with a
//! fixed random `r`, so the analytic gradient is the layer's backward pass fed
//! with `r`. Every input and parameter element is perturbed by `±FD_STEP`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};
use crate::train::{batch_loss_and_grads, combined_loss_and_grad, LossConfig};
use crate::unet::{
    concat_backward, concat_forward, conv2d_backward, conv2d_forward, dropout, dropout_backward, init_params,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, unet_forward, upconv_backward, upconv_forward,
    Mode, ModelParams, UNetConfig,
};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Central differences of a 64-bit
/// U-Net loss carry about `1e-10` of round-off at this step, so gradients
/// smaller than the floor are held to an absolute bound of `1e-9`.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x`.
pub fn compare_with_fd(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so no probe straddles the ReLU kink.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn probe(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with(shape: Shape, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).expect("probe keeps shape")
}

fn report(name: &str, checked: usize, max_rel_error: f64) -> GradCheck {
    GradCheck { name: name.to_string(), checked, max_rel_error }
}

pub fn check_conv(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(Shape::new(2, 3, 6, 5), &mut rng);
    let k = random(Shape::new(4, 3, 3, 3), &mut rng);
    let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (out, cache) = conv2d_forward(&x, &k, &b, 1).unwrap();
    let r = random(out.shape(), &mut rng);
    let (gx, gk, gb) = conv2d_backward(&cache, &k, &r).unwrap();
    let e1 =
        compare_with_fd(x.data(), gx.data(), |v| probe(&conv2d_forward(&with(x.shape(), v), &k, &b, 1).unwrap().0, &r));
    let e2 =
        compare_with_fd(k.data(), gk.data(), |v| probe(&conv2d_forward(&x, &with(k.shape(), v), &b, 1).unwrap().0, &r));
    let e3 = compare_with_fd(&b, &gb, |v| probe(&conv2d_forward(&x, &k, v, 1).unwrap().0, &r));
    report("conv", x.len() + k.len() + b.len(), e1.max(e2).max(e3))
}

pub fn check_relu(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(Shape::new(2, 3, 4, 4), &mut rng);
    let (out, cache) = relu_forward(&x);
    let r = random(out.shape(), &mut rng);
    let gx = relu_backward(&cache, &r).unwrap();
    let e = compare_with_fd(x.data(), gx.data(), |v| probe(&relu_forward(&with(x.shape(), v)).0, &r));
    report("relu", x.len(), e)
}

pub fn check_maxpool(seed: u64) -> GradCheck {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(2, 3, 6, 4);
    // Distinct values spaced far wider than the probe step.
    let mut values: Vec<f64> = (0..shape.len()).map(|i| i as f64 * 0.01).collect();
    values.shuffle(&mut rng);
    let x = with(shape, &values);
    let (out, cache) = maxpool_forward(&x).unwrap();
    let r = random(out.shape(), &mut rng);
    let gx = maxpool_backward(&cache, &r).unwrap();
    let e = compare_with_fd(x.data(), gx.data(), |v| probe(&maxpool_forward(&with(shape, v)).unwrap().0, &r));
    report("maxpool", x.len(), e)
}

pub fn check_upconv(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(Shape::new(2, 3, 3, 4), &mut rng);
    let k = random(Shape::new(2, 3, 2, 2), &mut rng);
    let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (out, cache) = upconv_forward(&x, &k, &b).unwrap();
    let r = random(out.shape(), &mut rng);
    let (gx, gk, gb) = upconv_backward(&cache, &k, &r).unwrap();
    let e1 =
        compare_with_fd(x.data(), gx.data(), |v| probe(&upconv_forward(&with(x.shape(), v), &k, &b).unwrap().0, &r));
    let e2 =
        compare_with_fd(k.data(), gk.data(), |v| probe(&upconv_forward(&x, &with(k.shape(), v), &b).unwrap().0, &r));
    let e3 = compare_with_fd(&b, &gb, |v| probe(&upconv_forward(&x, &k, v).unwrap().0, &r));
    report("upconv", x.len() + k.len() + b.len(), e1.max(e2).max(e3))
}

pub fn check_dropout(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(Shape::new(2, 3, 4, 4), &mut rng);
    let mask_seed = rng.gen::<u64>();
    let run = |x: &Tensor<f64>| dropout(x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
    let (out, cache) = run(&x);
    let r = random(out.shape(), &mut rng);
    let gx = dropout_backward(&cache, &r).unwrap();
    let e = compare_with_fd(x.data(), gx.data(), |v| probe(&run(&with(x.shape(), v)).0, &r));
    report("dropout", x.len(), e)
}

pub fn check_concat(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random(Shape::new(2, 2, 3, 3), &mut rng);
    let b = random(Shape::new(2, 3, 3, 3), &mut rng);
    let (out, cache) = concat_forward(&a, &b).unwrap();
    let r = random(out.shape(), &mut rng);
    let (ga, gb) = concat_backward(&cache, &r).unwrap();
    let e1 = compare_with_fd(a.data(), ga.data(), |v| probe(&concat_forward(&with(a.shape(), v), &b).unwrap().0, &r));
    let e2 = compare_with_fd(b.data(), gb.data(), |v| probe(&concat_forward(&a, &with(b.shape(), v)).unwrap().0, &r));
    report("concat", a.len() + b.len(), e1.max(e2))
}

/// Combined BCE + Dice loss on random `1×3×4×4` logits.
pub fn check_loss(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 3, 4, 4);
    let logits = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-3.0..3.0));
    let target = Tensor::from_fn(shape, |_, _, _, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
    let cfg = LossConfig::default();
    let (_, grad) = combined_loss_and_grad(&logits, &target, &cfg).unwrap();
    let e = compare_with_fd(logits.data(), grad.data(), |v| {
        combined_loss_and_grad(&with(shape, v), &target, &cfg).unwrap().0
    });
    report("loss", logits.len(), e)
}

pub fn check_all_layers(seed: u64) -> Vec<GradCheck> {
    vec![
        check_conv(seed),
        check_relu(seed),
        check_maxpool(seed),
        check_upconv(seed),
        check_dropout(seed),
        check_concat(seed),
        check_loss(seed),
    ]
}

/// Every parameter of a train-mode U-Net under the combined loss, with the
/// dropout masks pinned by reseeding before each forward pass.
pub fn check_end_to_end(base_channels: usize, size: usize, seed: u64) -> GradCheck {
    let cfg = UNetConfig { base_channels, ..Default::default() };
    let params: ModelParams<f64> = init_params(&cfg, seed).expect("valid config").cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let x = random(Shape::new(1, cfg.in_channels, size, size), &mut rng);
    let target =
        Tensor::from_fn(
            Shape::new(1, cfg.out_channels, size, size),
            |_, _, _, _| {
                if rng.gen_bool(0.3) {
                    1.0
                } else {
                    0.0
                }
            },
        );
    let loss_cfg = LossConfig::default();
    let dropout_seed = rng.gen::<u64>();
    let eval = |p: &ModelParams<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        batch_loss_and_grads(&cfg, p, &x, &target, &loss_cfg, Mode::Train, &mut r).expect("shapes agree")
    };
    let loss_only = |p: &ModelParams<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (logits, _) = unet_forward(&cfg, p, &x, Mode::Train, &[], &mut r).expect("shapes agree");
        combined_loss_and_grad(&logits, &target, &loss_cfg).expect("shapes agree").0
    };
    let (_, grads) = eval(&params);
    let flat: Vec<f64> = params.values().collect();
    let analytic: Vec<f64> = grads.values().collect();
    let mut scratch = params.clone();
    let e = compare_with_fd(&flat, &analytic, |v| {
        for (dst, &src) in scratch.values_mut().zip(v) {
            *dst = src;
        }
        loss_only(&scratch)
    });
    report("end_to_end", flat.len(), e)
}
