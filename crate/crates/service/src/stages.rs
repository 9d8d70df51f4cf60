//! Pipeline stages over on-disk artifacts.
//!
//! ```text
//! synth       <out>/raster.grd polygons.geojson mask.grd
//! preprocess  <out>/raster.grd polygons.geojson mask.grd hist_raw.csv hist_eq.csv
//! sample      <out>/specs.csv scene_meta.json patches/<id>_x.grd patches/<id>_y.grd
//! train       <out>/ckpt_epoch_<n>.glck loss.csv steps.csv
//! infer       <out>/<id>_pred.grd <id>_pred.png
//! eval        <out>/records.jsonl curve.csv meta.json patches/<id>/...
//! repr        <out>/activations/<layer>.png probabilities.png layer_stats.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use glacier_core::analysis::{
    accuracy_curve, activation_grid, activation_stats, curve_to_csv, pixel_accuracy, probability_image,
    probability_panels, records_to_jsonl, render_mask_png, run_patch, EvalRecord, LayerStats, CLASS_CHANNELS,
};
use glacier_core::geodata::{rgb_image, save_gray, save_rgb, synth_scene, write_mask, GeoTransform, SceneBundle};
use glacier_core::preprocess::{histograms_to_csv, preprocess_scene, raster_histograms};
use glacier_core::sampling::{
    extract_patch, read_specs, sample_centers, split_patches, write_specs, Patch, RasterGeometry, Split,
};
use glacier_core::train::{train, LossCurve, TrainConfig};
use glacier_core::unet::{load_checkpoint_expecting, ModelParams};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

pub const SPECS_FILE: &str = "specs.csv";
pub const SCENE_META_FILE: &str = "scene_meta.json";
pub const PATCH_DIR: &str = "patches";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const CURVE_FILE: &str = "curve.csv";
pub const META_FILE: &str = "meta.json";
pub const LOSS_FILE: &str = "loss.csv";

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(seed: u64, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<SceneBundle> {
    let bundle = synth_scene(seed, &cfg.scene)?;
    create_dir(out)?;
    bundle.save(out)?;
    log::info!(
        "synthesized {}x{} scene with {} glaciers",
        bundle.raster.width(),
        bundle.raster.height(),
        bundle.polygons.features.len()
    );
    Ok(bundle)
}

pub fn preprocess(input: &Path, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<SceneBundle> {
    let raw = SceneBundle::load(input)?;
    let bins = cfg.analysis.histogram_bins;
    let prepared = preprocess_scene(&raw)?;
    create_dir(out)?;
    prepared.save(out)?;
    write_text(&out.join("hist_raw.csv"), &histograms_to_csv(&raster_histograms(&raw.raster, bins, None)?))?;
    write_text(
        &out.join("hist_eq.csv"),
        &histograms_to_csv(&raster_histograms(&prepared.raster, bins, Some((-1.0, 1.0)))?),
    )?;
    Ok(prepared)
}

/// Extent and placement of the scene patches were cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub width: usize,
    pub height: usize,
    pub geotransform: GeoTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

impl SceneMeta {
    pub fn bounds(&self) -> Bounds {
        let corners = [(0, 0), (self.width, 0), (0, self.height), (self.width, self.height)]
            .map(|(c, r)| self.geotransform.apply(c as f64, r as f64));
        let fold =
            |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| corners.iter().map(pick).fold(init, f);
        Bounds {
            west: fold(f64::min, f64::INFINITY, |p| p.0),
            east: fold(f64::max, f64::NEG_INFINITY, |p| p.0),
            south: fold(f64::min, f64::INFINITY, |p| p.1),
            north: fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn sample(input: &Path, seed: u64, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<Vec<Patch>> {
    let scene = SceneBundle::load(input)?;
    let s = &cfg.sampling;
    let specs = sample_centers(&scene.polygons, s.patches, RasterGeometry::of(&scene.raster), s.patch_size, seed)?;
    let specs = split_patches(&specs, s.test_fraction, seed)?;
    let patch_dir = out.join(PATCH_DIR);
    create_dir(&patch_dir)?;
    let patches = specs.iter().map(|spec| extract_patch(&scene, spec)).collect::<Result<Vec<_>, _>>()?;
    for p in &patches {
        p.save(&patch_dir)?;
    }
    write_specs(&specs, out.join(SPECS_FILE))?;
    let meta = SceneMeta {
        width: scene.raster.width(),
        height: scene.raster.height(),
        geotransform: scene.raster.geotransform(),
    };
    write_json(&out.join(SCENE_META_FILE), &meta)?;
    log::info!("sampled {} patches", patches.len());
    Ok(patches)
}

/// Patches written by [`sample`], optionally restricted to one split.
pub fn load_patches(dir: &Path, split: Option<Split>) -> anyhow::Result<Vec<Patch>> {
    let specs = read_specs(dir.join(SPECS_FILE))?;
    specs
        .iter()
        .filter(|s| split.is_none_or(|want| s.split == want))
        .map(|s| Patch::load(dir.join(PATCH_DIR), s).map_err(Into::into))
        .collect()
}

pub struct TrainArtifacts {
    pub params: ModelParams<f32>,
    pub curve: LossCurve,
    pub last_checkpoint: PathBuf,
}

pub fn train_stage(input: &Path, seed: u64, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<TrainArtifacts> {
    let patches = load_patches(input, Some(Split::Train))?;
    ensure!(!patches.is_empty(), "{} holds no training patches", input.display());
    let train_cfg = TrainConfig { seed, patch_size: patches[0].spec.size, ..cfg.train.clone() };
    create_dir(out)?;
    let outcome = train(&patches, &train_cfg, &cfg.loss, &cfg.optimizer, &cfg.unet, Some(out))?;
    write_text(&out.join(LOSS_FILE), &outcome.curve.to_csv())?;
    let mut steps = String::from("step,loss\n");
    for (i, l) in outcome.step_losses.iter().enumerate() {
        steps.push_str(&format!("{},{}\n", i + 1, l));
    }
    write_text(&out.join("steps.csv"), &steps)?;
    let last_checkpoint = outcome.checkpoints.last().cloned().context("training wrote no checkpoint")?;
    Ok(TrainArtifacts { params: outcome.params, curve: outcome.curve, last_checkpoint })
}

/// A checkpoint file, or the latest `ckpt_epoch_<n>.glck` in a directory.
pub fn resolve_checkpoint(path: &Path) -> anyhow::Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        let epoch = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt_epoch_")?.strip_suffix(".glck")?.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, p));
            }
        }
    }
    match best {
        Some((_, p)) => Ok(p),
        None => bail!("no checkpoints in {}", path.display()),
    }
}

fn load_model(checkpoint: &Path, cfg: &PipelineConfig) -> anyhow::Result<ModelParams<f32>> {
    let path = resolve_checkpoint(checkpoint)?;
    load_checkpoint_expecting(&path, &cfg.unet).with_context(|| format!("loading {}", path.display()))
}

pub fn infer(checkpoint: &Path, input: &Path, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<usize> {
    let params = load_model(checkpoint, cfg)?;
    let patches = load_patches(input, None)?;
    create_dir(out)?;
    for p in &patches {
        let pred = run_patch(&cfg.unet, &params, p, &[])?.prediction;
        write_mask(&pred, p.geotransform, out.join(format!("{}_pred.grd", p.spec.id)))?;
        render_mask_png(&pred, &cfg.analysis.palette, out.join(format!("{}_pred.png", p.spec.id)))?;
    }
    Ok(patches.len())
}

/// Equalized bands shown as an RGB composite.
const RGB_BANDS: [&str; 3] = ["B3", "B2", "B1"];

/// Document served at `/api/meta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub bounds: Bounds,
    pub palette: glacier_core::analysis::Palette,
    pub classes: Vec<String>,
    pub layers: Vec<String>,
    pub patch_size: usize,
    pub rgb_bands: Vec<String>,
}

/// Artifact paths of one patch, relative to the evaluation root.
pub fn patch_artifact(id: &str, name: &str) -> String {
    format!("{PATCH_DIR}/{id}/{name}")
}

pub fn eval(
    checkpoint: &Path,
    input: &Path,
    seed: u64,
    cfg: &PipelineConfig,
    out: &Path,
) -> anyhow::Result<Vec<EvalRecord>> {
    let params = load_model(checkpoint, cfg)?;
    let patches = load_patches(input, None)?;
    ensure!(!patches.is_empty(), "{} holds no patches", input.display());
    let scene: SceneMeta = read_json(&input.join(SCENE_META_FILE))?;
    let layers = cfg.tap_layers();
    let mut records = Vec::with_capacity(patches.len());
    for p in &patches {
        let id = &p.spec.id;
        let dir = out.join(PATCH_DIR).join(id);
        create_dir(&dir.join("prob"))?;
        create_dir(&dir.join("activations"))?;
        let outputs = run_patch(&cfg.unet, &params, p, &layers)?;
        let accuracy = pixel_accuracy(&outputs.prediction, &p.mask)?;

        let raster = p.to_raster();
        save_rgb(&rgb_image(&raster, RGB_BANDS, [(-1.0, 1.0); 3])?, dir.join("image.png"))?;
        render_mask_png(&p.mask, &cfg.analysis.palette, dir.join("mask.png"))?;
        render_mask_png(&outputs.prediction, &cfg.analysis.palette, dir.join("pred.png"))?;
        for (c, name) in CLASS_CHANNELS.iter().enumerate() {
            save_gray(&probability_image(&outputs.probs, c), dir.join("prob").join(format!("{name}.png")))?;
        }
        for rec in &outputs.activations {
            let grid = activation_grid(&rec.tensor, cfg.analysis.grid_tiles, seed);
            save_gray(&grid, dir.join("activations").join(format!("{}.png", rec.layer)))?;
        }

        let (lon, lat) = p.spec.center_lonlat(scene.geotransform);
        records.push(EvalRecord {
            id: id.clone(),
            lon,
            lat,
            split: p.spec.split.to_string(),
            accuracy,
            image: patch_artifact(id, "image.png"),
            mask: patch_artifact(id, "mask.png"),
            pred: patch_artifact(id, "pred.png"),
        });
    }
    write_text(&out.join(RECORDS_FILE), &records_to_jsonl(&records))?;
    write_text(&out.join(CURVE_FILE), &curve_to_csv(&accuracy_curve(&records)?))?;
    let meta = EvalMeta {
        bounds: scene.bounds(),
        palette: cfg.analysis.palette,
        classes: CLASS_CHANNELS.iter().map(|s| s.to_string()).collect(),
        layers,
        patch_size: patches[0].spec.size,
        rgb_bands: RGB_BANDS.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join(META_FILE), &meta)?;
    log::info!("evaluated {} patches", records.len());
    Ok(records)
}

pub struct ReprArtifacts {
    pub patch_id: String,
    pub grids: Vec<PathBuf>,
    pub stats: Vec<LayerStats>,
}

/// Activation grids for the configured taps, the probability panels, and
/// statistics of every layer, for one patch (the first test patch by default).
pub fn repr(
    checkpoint: &Path,
    input: &Path,
    patch_id: Option<&str>,
    seed: u64,
    cfg: &PipelineConfig,
    out: &Path,
) -> anyhow::Result<ReprArtifacts> {
    let params = load_model(checkpoint, cfg)?;
    let patches = load_patches(input, None)?;
    let patch = match patch_id {
        Some(id) => patches.iter().find(|p| p.spec.id == id).with_context(|| format!("no patch {id:?}"))?,
        None => {
            patches.iter().find(|p| p.spec.split == Split::Test).or(patches.first()).context("no patches to analyse")?
        }
    };
    let all_layers = cfg.unet.layer_ids();
    let outputs = run_patch(&cfg.unet, &params, patch, &all_layers)?;
    let taps = cfg.tap_layers();
    create_dir(&out.join("activations"))?;
    let mut grids = Vec::new();
    for rec in outputs.activations.iter().filter(|r| taps.contains(&r.layer)) {
        let path = out.join("activations").join(format!("{}.png", rec.layer));
        save_gray(&activation_grid(&rec.tensor, cfg.analysis.grid_tiles, seed), &path)?;
        grids.push(path);
    }
    save_gray(&probability_panels(&outputs.probs), out.join("probabilities.png"))?;
    let stats: Vec<LayerStats> = outputs.activations.iter().map(|r| activation_stats(&r.layer, &r.tensor)).collect();
    write_json(&out.join("layer_stats.json"), &stats)?;
    Ok(ReprArtifacts { patch_id: patch.spec.id.clone(), grids, stats })
}
