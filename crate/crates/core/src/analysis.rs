//! Predictions, accuracy, and the images and statistics used to inspect a
//! trained model.

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{save_gray, save_rgb, to_display_u8, GeodataError, LabelMask, BACKGROUND, CLEAN_ICE, DEBRIS};
use crate::sampling::Patch;
use crate::tensor::{minmax_normalize, Tensor};
use crate::train::sigmoid_probs;
use crate::unet::{unet_forward, ActivationRecord, Mode, ModelParams, UNetConfig, UNetError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("region selects no pixels")]
    EmptyRegion,
    #[error("no records to rank")]
    EmptyRecords,
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Geodata(#[from] GeodataError),
}

/// Class names in output-channel order.
pub const CLASS_CHANNELS: [&str; 3] = ["clean_ice", "debris", "background"];

/// Mask code predicted for each output channel.
const CHANNEL_CODES: [u8; 3] = [CLEAN_ICE, DEBRIS, BACKGROUND];

/// Model outputs for one patch.
#[derive(Debug, Clone)]
pub struct PatchOutputs {
    pub probs: Tensor<f32>,
    pub prediction: LabelMask,
    pub activations: Vec<ActivationRecord<f32>>,
}

/// Per-pixel argmax over channels, ties to the lowest channel.
pub fn argmax_mask(probs: &Tensor<f32>) -> Result<LabelMask, AnalysisError> {
    let s = probs.shape();
    if s.n != 1 || s.c != CHANNEL_CODES.len() {
        return Err(AnalysisError::ShapeMismatch(format!("expected (1, 3, h, w) probabilities, got {s}")));
    }
    let planes: Vec<&[f32]> = (0..s.c).map(|c| probs.plane(0, c)).collect();
    let codes = (0..s.plane())
        .map(|i| {
            let mut best = 0;
            for c in 1..planes.len() {
                if planes[c][i] > planes[best][i] {
                    best = c;
                }
            }
            CHANNEL_CODES[best]
        })
        .collect();
    Ok(LabelMask::new(s.w, s.h, codes)?)
}

fn check_patch(config: &UNetConfig, patch: &Patch) -> Result<(), AnalysisError> {
    let s = patch.input.shape();
    if s.n != 1 || s.c != config.in_channels {
        return Err(AnalysisError::ShapeMismatch(format!(
            "patch {} input {s} for {} channels",
            patch.spec.id, config.in_channels
        )));
    }
    Ok(())
}

/// One eval-mode forward pass yielding probabilities, the predicted mask and
/// the requested activations.
pub fn run_patch(
    config: &UNetConfig,
    params: &ModelParams<f32>,
    patch: &Patch,
    taps: &[String],
) -> Result<PatchOutputs, AnalysisError> {
    check_patch(config, patch)?;
    // Eval mode draws nothing from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, activations) = unet_forward(config, params, &patch.input, Mode::Eval, taps, &mut rng)?;
    let probs = sigmoid_probs(&logits);
    let prediction = argmax_mask(&probs)?;
    Ok(PatchOutputs { probs, prediction, activations })
}

pub fn predict_patch(
    config: &UNetConfig,
    params: &ModelParams<f32>,
    patch: &Patch,
) -> Result<LabelMask, AnalysisError> {
    Ok(run_patch(config, params, patch, &[])?.prediction)
}

fn same_size(a: &LabelMask, b: &LabelMask) -> Result<(), AnalysisError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(AnalysisError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Fraction of pixels whose codes agree.
pub fn pixel_accuracy(pred: &LabelMask, truth: &LabelMask) -> Result<f64, AnalysisError> {
    same_size(pred, truth)?;
    let n = pred.values().len();
    if n == 0 {
        return Err(AnalysisError::EmptyRegion);
    }
    let agree = pred.values().iter().zip(truth.values()).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / n as f64)
}

/// Pixel accuracy over the pixels where `region` is true, in row-major order.
pub fn region_accuracy(pred: &LabelMask, truth: &LabelMask, region: &[bool]) -> Result<f64, AnalysisError> {
    same_size(pred, truth)?;
    if region.len() != pred.values().len() {
        return Err(AnalysisError::ShapeMismatch(format!(
            "region of {} for {} pixels",
            region.len(),
            pred.values().len()
        )));
    }
    let (mut total, mut agree) = (0usize, 0usize);
    for ((a, b), &r) in pred.values().iter().zip(truth.values()).zip(region) {
        if r {
            total += 1;
            agree += usize::from(a == b);
        }
    }
    if total == 0 {
        return Err(AnalysisError::EmptyRegion);
    }
    Ok(agree as f64 / total as f64)
}

/// One line of `records.jsonl`. Artifact paths are relative to the
/// evaluation directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub split: String,
    pub accuracy: f64,
    pub image: String,
    pub mask: String,
    pub pred: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rank: usize,
    pub id: String,
    pub accuracy: f64,
}

/// Records ordered by ascending accuracy, ties by id; `rank` is the
/// zero-based position.
pub fn accuracy_curve(records: &[EvalRecord]) -> Result<Vec<CurvePoint>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::EmptyRecords);
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then_with(|| a.id.cmp(&b.id)));
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(rank, r)| CurvePoint { rank, id: r.id.clone(), accuracy: r.accuracy })
        .collect())
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("rank,id,accuracy\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.rank, p.id, p.accuracy));
    }
    out
}

pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<EvalRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Channel indices shown in an activation grid: `min(n, channels)` drawn
/// without replacement, in ascending order.
pub fn grid_channels(channels: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, channels, n.min(channels)).into_vec();
    picked.sort_unstable();
    picked
}

/// Min-max normalized grayscale tile of one plane; constant planes are black.
fn gray_tile(values: &[f32]) -> Vec<u8> {
    minmax_normalize(values).into_iter().map(|v| to_display_u8(v as f64, 0.0, 1.0)).collect()
}

/// Sampled channels of the first sample of `activation`, tiled left to right.
pub fn activation_grid(activation: &Tensor<f32>, n: usize, seed: u64) -> GrayImage {
    let s = activation.shape();
    let channels = grid_channels(s.c, n, seed);
    let width = s.w * channels.len();
    let mut img = GrayImage::new(width as u32, s.h as u32);
    for (k, &c) in channels.iter().enumerate() {
        let tile = gray_tile(activation.plane(0, c));
        for y in 0..s.h {
            for x in 0..s.w {
                img.put_pixel((k * s.w + x) as u32, y as u32, image::Luma([tile[y * s.w + x]]));
            }
        }
    }
    img
}

pub fn activation_grid_png(
    config: &UNetConfig,
    params: &ModelParams<f32>,
    patch: &Patch,
    layer: &str,
    n: usize,
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<(), AnalysisError> {
    let outputs = run_patch(config, params, patch, &[layer.to_string()])?;
    save_gray(&activation_grid(&outputs.activations[0].tensor, n, seed), out)?;
    Ok(())
}

/// Sigmoid probabilities of each class channel side by side, intensity
/// `round(255·p)`.
pub fn probability_panels(probs: &Tensor<f32>) -> GrayImage {
    let s = probs.shape();
    let mut img = GrayImage::new((s.w * s.c) as u32, s.h as u32);
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = to_display_u8(probs.at(0, c, y, x) as f64, 0.0, 1.0);
                img.put_pixel((c * s.w + x) as u32, y as u32, image::Luma([v]));
            }
        }
    }
    img
}

/// A single channel's probabilities as a grayscale image.
pub fn probability_image(probs: &Tensor<f32>, channel: usize) -> GrayImage {
    let s = probs.shape();
    let values: Vec<u8> = probs.plane(0, channel).iter().map(|&p| to_display_u8(p as f64, 0.0, 1.0)).collect();
    GrayImage::from_raw(s.w as u32, s.h as u32, values).expect("plane sized to image")
}

pub fn probability_panels_png(
    config: &UNetConfig,
    params: &ModelParams<f32>,
    patch: &Patch,
    out: impl AsRef<Path>,
) -> Result<(), AnalysisError> {
    let outputs = run_patch(config, params, patch, &[])?;
    save_gray(&probability_panels(&outputs.probs), out)?;
    Ok(())
}

/// Colors for background, clean ice and debris.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Palette {
    pub background: [u8; 3],
    pub clean_ice: [u8; 3],
    pub debris: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self { background: [128, 128, 128], clean_ice: [0, 0, 255], debris: [0, 255, 0] }
    }
}

impl Palette {
    pub fn color(&self, code: u8) -> [u8; 3] {
        match code {
            CLEAN_ICE => self.clean_ice,
            DEBRIS => self.debris,
            _ => self.background,
        }
    }
}

pub fn mask_image(mask: &LabelMask, palette: &Palette) -> RgbImage {
    let buf: Vec<u8> = mask.values().iter().flat_map(|&c| palette.color(c)).collect();
    RgbImage::from_raw(mask.width() as u32, mask.height() as u32, buf).expect("buffer sized to image")
}

pub fn render_mask_png(mask: &LabelMask, palette: &Palette, out: impl AsRef<Path>) -> Result<(), AnalysisError> {
    save_rgb(&mask_image(mask, palette), out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: String,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Mean Pearson correlation over channel pairs; pairs involving a
    /// constant channel count as 0.
    pub mean_correlation: f64,
}

/// Statistics of the first sample of an activation tensor.
pub fn activation_stats(layer: &str, activation: &Tensor<f32>) -> LayerStats {
    let s = activation.shape();
    let n = s.plane() as f64;
    let planes: Vec<Vec<f64>> = (0..s.c).map(|c| activation.plane(0, c).iter().map(|&v| v as f64).collect()).collect();
    let means: Vec<f64> = planes.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let variances: Vec<f64> =
        planes.iter().zip(&means).map(|(p, m)| p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..s.c {
        for j in i + 1..s.c {
            pairs += 1;
            if variances[i] == 0.0 || variances[j] == 0.0 {
                continue;
            }
            let cov = planes[i].iter().zip(&planes[j]).map(|(a, b)| (a - means[i]) * (b - means[j])).sum::<f64>() / n;
            total += (cov / (variances[i] * variances[j]).sqrt()).clamp(-1.0, 1.0);
        }
    }
    let mean_correlation = if pairs == 0 { 0.0 } else { total / pairs as f64 };
    LayerStats { layer: layer.to_string(), means, variances, mean_correlation }
}

pub fn layer_statistics(
    config: &UNetConfig,
    params: &ModelParams<f32>,
    patch: &Patch,
    layers: &[String],
) -> Result<Vec<LayerStats>, AnalysisError> {
    let outputs = run_patch(config, params, patch, layers)?;
    Ok(outputs.activations.iter().map(|r| activation_stats(&r.layer, &r.tensor)).collect())
}
