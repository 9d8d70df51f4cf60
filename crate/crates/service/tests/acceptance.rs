//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use glacier_core::analysis::{accuracy_curve, pixel_accuracy, predict_patch, records_from_jsonl, region_accuracy};
use glacier_core::geodata::{
    encode_raster, synth_scene, LabelMask, PolygonLayer, Ring, SceneBundle, SceneConfig, BACKGROUND,
};
use glacier_core::gradcheck::{check_all_layers, check_end_to_end};
use glacier_core::preprocess::{equalize_band, preprocess_scene};
use glacier_core::sampling::{
    point_in_polygon, sample_centers, sample_patches, specs_to_csv, split_patches, Patch, RasterGeometry,
};
use glacier_core::train::{train, AdamConfig, LossConfig, TrainConfig};
use glacier_core::unet::{
    encode_checkpoint, init_params, load_checkpoint, predict_logits, save_checkpoint, UNetConfig,
};
use glacier_service::config::PipelineConfig;
use glacier_service::server::{router, ServeState};
use glacier_service::stages;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tower::ServiceExt;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> anyhow::Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_suite() -> anyhow::Result<Outcome> {
    const BOUND: f64 = 1e-4;
    let start = Instant::now();
    let mut checks = check_all_layers(0);
    checks.push(check_end_to_end(2, 16, 0));
    let elapsed = start.elapsed();
    let kinds = ["conv", "relu", "maxpool", "upconv", "dropout", "concat", "loss", "end_to_end"];
    let covered = kinds.iter().all(|k| checks.iter().any(|c| c.name.contains(k)));
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let parts: Vec<String> =
        checks.iter().map(|c| format!("{} {:.1e} ({} values)", c.name, c.max_rel_error, c.checked)).collect();
    let pass = covered && worst < BOUND && checks.iter().all(|c| c.checked > 0) && elapsed < Duration::from_secs(60);
    outcome(pass, format!("max relative error {worst:.2e} < {BOUND:e}; {}; {}", parts.join(", "), secs(elapsed)))
}

fn ks_to_uniform(values: &[f32]) -> f64 {
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let cdf = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

fn equalization() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gauss: Vec<f32> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
    let ks = ks_to_uniform(&equalize_band(&gauss)?);

    // Small integers keep the transforms exact in f32 and produce ties.
    let transforms: [fn(f32) -> f32; 3] = [|v| 4.0 * v - 7.0, |v| v * v * v, |v| (v / 8.0).exp()];
    let mut invariant = 0;
    for _ in 0..100 {
        let len = rng.gen_range(2..500);
        let v: Vec<f32> = (0..len).map(|_| rng.gen_range(-50..=50) as f32).collect();
        let base = equalize_band(&v)?;
        if transforms.iter().all(|f| equalize_band(&v.iter().map(|&x| f(x)).collect::<Vec<_>>()).unwrap() == base) {
            invariant += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = ks < 0.01 && invariant == 100 && elapsed < Duration::from_secs(5);
    outcome(pass, format!("KS {ks:.2e} < 0.01; monotone invariance {invariant}/100 vectors; {}", secs(elapsed)))
}

/// Parity of crossings of an upward vertical ray, over all rings.
fn crossing_oracle((px, py): (f64, f64), rings: &[Vec<(f64, f64)>]) -> bool {
    let mut crossings = 0;
    for ring in rings {
        for k in 0..ring.len() {
            let (a, b) = (ring[k], ring[(k + 1) % ring.len()]);
            if (a.0 > px) != (b.0 > px) {
                let y = a.1 + (px - a.0) * (b.1 - a.1) / (b.0 - a.0);
                if y > py {
                    crossings += 1;
                }
            }
        }
    }
    crossings % 2 == 1
}

fn open_rings(rings: &[Ring]) -> Vec<Vec<(f64, f64)>> {
    rings.iter().map(|r| r.vertices()[..r.vertices().len() - 1].to_vec()).collect()
}

fn in_layer_oracle(point: (f64, f64), layer: &PolygonLayer) -> bool {
    layer.features.iter().any(|f| crossing_oracle(point, &open_rings(&f.rings)))
}

fn sampling() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let cfg = SceneConfig { width: 256, height: 256, ..Default::default() };
    let scene = synth_scene(5, &cfg)?;
    let specs = sample_centers(&scene.polygons, 1000, RasterGeometry::of(&scene.raster), 16, 8)?;
    let gt = scene.raster.geotransform();
    let inside = specs.iter().filter(|s| in_layer_oracle(gt.pixel_center(s.col, s.row), &scene.polygons)).count();

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut agree = 0;
    const TRIALS: usize = 10_000;
    for _ in 0..TRIALS {
        let ring_count = rng.gen_range(1..=2);
        let open: Vec<Vec<(f64, f64)>> = (0..ring_count)
            .map(|_| (0..rng.gen_range(3..12)).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect())
            .collect();
        let rings = open.iter().map(|v| Ring::closed(v.clone())).collect::<Result<Vec<_>, _>>()?;
        let point = (rng.gen_range(-0.1..1.1), rng.gen_range(-0.1..1.1));
        if point_in_polygon(point, &rings) == crossing_oracle(point, &open) {
            agree += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = specs.len() == 1000 && inside == 1000 && agree == TRIALS && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!("{inside}/{} centers inside; oracle agreement {agree}/{TRIALS}; {}", specs.len(), secs(elapsed)),
    )
}

fn overfit_patches() -> anyhow::Result<Vec<Patch>> {
    let cfg = SceneConfig { width: 256, height: 256, ..Default::default() };
    let scene = preprocess_scene(&synth_scene(3, &cfg)?)?;
    Ok(sample_patches(&scene, 8, 64, 5)?)
}

fn parse_loss_csv(text: &str) -> anyhow::Result<Vec<f64>> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some("epoch,loss"), "unexpected loss CSV header");
    lines
        .map(|l| {
            let (_, loss) = l.split_once(',').context("malformed loss row")?;
            Ok(loss.parse()?)
        })
        .collect()
}

fn overfit() -> anyhow::Result<Outcome> {
    const STEPS: usize = 400;
    let start = Instant::now();
    let patches = overfit_patches()?;
    let unet = UNetConfig { base_channels: 8, ..Default::default() };
    // One batch holds every patch, so each epoch is one Adam step.
    let tc = TrainConfig { epochs: STEPS, batch_size: 8, seed: 0, patch_size: 64, checkpoint_every: STEPS };
    let adam = AdamConfig { lr: 1e-3, ..Default::default() };
    let out = train(&patches, &tc, &LossConfig::default(), &adam, &unet, None)?;
    ensure!(out.step_losses.len() == STEPS, "expected {STEPS} steps, got {}", out.step_losses.len());
    let losses = parse_loss_csv(&out.curve.to_csv())?;
    ensure!(losses.len() == STEPS, "loss CSV has {} rows", losses.len());

    let (initial, last) = (losses[0], losses[STEPS - 1]);
    let means: Vec<f64> = losses.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let trend = means.windows(2).all(|w| w[1] <= w[0] + 0.01);
    let (mut correct, mut total) = (0usize, 0usize);
    for p in &patches {
        let pred = predict_patch(&unet, &out.params, p)?;
        correct += pred.values().iter().zip(p.mask.values()).filter(|(a, b)| a == b).count();
        total += pred.values().len();
    }
    let accuracy = correct as f64 / total as f64;
    let elapsed = start.elapsed();
    let pass = last < 0.2 * initial && accuracy >= 0.9 && trend && elapsed < Duration::from_secs(600);
    let means: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    outcome(
        pass,
        format!(
            "{STEPS} steps at lr 1e-3: loss {initial:.4} -> {last:.4} ({:.1}% of initial); pixel accuracy {accuracy:.4}; 50-step means [{}]; {}",
            100.0 * last / initial,
            means.join(", "),
            secs(elapsed)
        ),
    )
}

fn incomplete_labels() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let patch = overfit_patches()?.remove(0);
    let truth = patch.mask.clone();
    let (w, h) = (truth.width(), truth.height());
    // Blank the quadrant holding the most glacier; the prediction stays correct there.
    let quadrant = |q: usize, c: usize, r: usize| (c >= w / 2) == (q % 2 == 1) && (r >= h / 2) == (q / 2 == 1);
    let glacier_in = |q: usize| {
        (0..h)
            .flat_map(|r| (0..w).map(move |c| (c, r)))
            .filter(|&(c, r)| quadrant(q, c, r) && truth.get(c, r) != BACKGROUND)
            .count()
    };
    let q = (0..4).max_by_key(|&q| glacier_in(q)).unwrap();
    let mut blanked = truth.clone();
    let mut region = vec![true; w * h];
    for r in 0..h {
        for c in 0..w {
            if quadrant(q, c, r) {
                blanked.set(c, r, BACKGROUND);
                region[r * w + c] = false;
            }
        }
    }
    let pred: LabelMask = truth.clone();
    let pixel = pixel_accuracy(&pred, &blanked)?;
    let regional = region_accuracy(&pred, &blanked, &region)?;

    let (mut agree_all, mut agree_in, mut n_in, mut lost) = (0usize, 0usize, 0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            let ok = pred.get(c, r) == blanked.get(c, r);
            agree_all += ok as usize;
            if region[r * w + c] {
                n_in += 1;
                agree_in += ok as usize;
            } else if truth.get(c, r) != BACKGROUND {
                lost += 1;
            }
        }
    }
    let oracle_pixel = agree_all as f64 / (w * h) as f64;
    let oracle_region = agree_in as f64 / n_in as f64;
    let fraction = lost as f64 / (w * h) as f64;
    let elapsed = start.elapsed();
    let pass = fraction > 0.0
        && (pixel - oracle_pixel).abs() < 1e-12
        && (regional - oracle_region).abs() < 1e-12
        && pixel < regional
        && regional - pixel >= fraction - 0.02
        && elapsed < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "pixel {pixel:.4} vs region {regional:.4} (oracle {oracle_pixel:.4}/{oracle_region:.4}); gap {:.4} >= blanked glacier fraction {fraction:.4} - 0.02; {}",
            regional - pixel,
            secs(elapsed)
        ),
    )
}

fn scene_bytes(b: &SceneBundle) -> anyhow::Result<(Vec<u8>, String, Vec<u8>)> {
    Ok((encode_raster(&b.raster)?, b.polygons.to_geojson_string(), b.mask.values().to_vec()))
}

fn determinism() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let cfg =
        SceneConfig { width: 128, height: 128, blob_radius_min: 10.0, blob_radius_max: 20.0, ..Default::default() };
    let scene = || synth_scene(9, &cfg);
    let (a, b) = (scene()?, scene()?);
    let scenes = scene_bytes(&a)? == scene_bytes(&b)?;

    let specs = || -> anyhow::Result<String> {
        let centers = sample_centers(&a.polygons, 20, RasterGeometry::of(&a.raster), 32, 4)?;
        Ok(specs_to_csv(&split_patches(&centers, 0.2, 4)?))
    };
    let spec_match = specs()? == specs()?;

    let unet = UNetConfig { base_channels: 2, ..Default::default() };
    let init = encode_checkpoint(&unet, &init_params(&unet, 4)?)? == encode_checkpoint(&unet, &init_params(&unet, 4)?)?;

    let prepared = preprocess_scene(&a)?;
    let patches = sample_patches(&prepared, 6, 32, 4)?;
    let tc = TrainConfig { epochs: 3, batch_size: 2, seed: 4, patch_size: 32, checkpoint_every: 3 };
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut finals = Vec::new();
    for d in &dirs {
        let out = train(&patches, &tc, &LossConfig::default(), &AdamConfig::default(), &unet, Some(d.path()))?;
        finals.push(std::fs::read(out.checkpoints.last().context("no checkpoint")?)?);
    }
    let checkpoints = finals[0] == finals[1];

    let (_, params) = glacier_core::unet::decode_checkpoint(&finals[0])?;
    let path = dirs[0].path().join("roundtrip.glck");
    save_checkpoint(&path, &unet, &params)?;
    let (_, loaded) = load_checkpoint(&path)?;
    let x = glacier_core::train::make_batch(&patches.iter().collect::<Vec<_>>())?.0;
    let bits = |p| -> anyhow::Result<Vec<u32>> {
        Ok(predict_logits(&unet, p, &x)?.data().iter().map(|v| v.to_bits()).collect())
    };
    let logits = bits(&params)? == bits(&loaded)?;

    let pass = scenes && spec_match && init && checkpoints && logits;
    outcome(
        pass,
        format!(
            "scenes {scenes}, specs {spec_match}, initial params {init}, final checkpoints {checkpoints}, logits after save/load {logits}; {}",
            secs(start.elapsed())
        ),
    )
}

struct Desk {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: PipelineConfig,
}

fn desk_run() -> anyhow::Result<Desk> {
    let dir = tempfile::tempdir()?;
    let root = dir.path().to_path_buf();
    let cfg = PipelineConfig::load(Some(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")))?;
    stages::synth(0, &cfg, &root.join("scene"))?;
    stages::preprocess(&root.join("scene"), &cfg, &root.join("prep"))?;
    stages::sample(&root.join("prep"), 0, &cfg, &root.join("patches"))?;
    stages::train_stage(&root.join("patches"), 0, &cfg, &root.join("model"))?;
    stages::eval(&root.join("model"), &root.join("patches"), 0, &cfg, &root.join("eval"))?;
    Ok(Desk { _dir: dir, root, cfg })
}

fn representation(desk: &Desk) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let cfg = &desk.cfg;
    let out = desk.root.join("repr");
    let art = stages::repr(&desk.root.join("model"), &desk.root.join("patches"), None, 0, cfg, &out)?;
    let size = cfg.sampling.patch_size;
    let shapes = cfg.unet.layer_shapes(1, size, size);
    let taps = cfg.unet.paper_tap_layers();
    let mut good = 0;
    let mut tiles = Vec::new();
    for layer in &taps {
        let path = out.join("activations").join(format!("{layer}.png"));
        let shape = shapes.iter().find(|(l, _)| l == layer).context("unknown tap")?.1;
        let Ok(img) = image::open(&path) else { continue };
        let want = shape.c.min(cfg.analysis.grid_tiles);
        if img.width() as usize == want * shape.w && img.height() as usize == shape.h {
            good += 1;
            tiles.push(format!("{layer}:{want}"));
        }
    }
    let all_layers = cfg.unet.layer_ids();
    let stats_layers: Vec<&String> = art.stats.iter().map(|s| &s.layer).collect();
    let finite = art
        .stats
        .iter()
        .all(|s| s.mean_correlation.is_finite() && s.means.iter().chain(&s.variances).all(|v| v.is_finite()));
    let pass = taps.len() == 8 && good == 8 && art.grids.len() == 8 && finite && stats_layers.len() == all_layers.len();
    outcome(
        pass,
        format!(
            "{good}/8 tap grids with min(8, channels) tiles [{}] on patch {}; stats finite for {} layers: {finite}; {}",
            tiles.join(" "),
            art.patch_id,
            stats_layers.len(),
            secs(start.elapsed())
        ),
    )
}

async fn fetch(app: &axum::Router, uri: &str) -> anyhow::Result<(StatusCode, Vec<u8>)> {
    let resp = app.clone().oneshot(Request::get(uri).body(Body::empty())?).await?;
    let status = resp.status();
    Ok((status, resp.into_body().collect().await?.to_bytes().to_vec()))
}

async fn service_checks(desk: &Desk) -> anyhow::Result<Outcome> {
    let root = desk.root.join("eval");
    let app = router(ServeState::load(&root)?, None);
    let records = records_from_jsonl(&std::fs::read_to_string(root.join("records.jsonl"))?)?;
    let mut problems = Vec::new();

    let (status, body) = fetch(&app, "/api/patches").await?;
    let patches: Vec<serde_json::Value> =
        if status == StatusCode::OK { serde_json::from_slice(&body)? } else { Vec::new() };
    let max_diff = records
        .iter()
        .map(|r| {
            patches
                .iter()
                .find(|p| p["id"] == r.id.as_str())
                .and_then(|p| p["accuracy"].as_f64())
                .map_or(f64::INFINITY, |a| (a - r.accuracy).abs())
        })
        .fold(0.0, f64::max);
    if patches.len() != records.len() || max_diff > 1e-6 {
        problems.push(format!("/api/patches: {} entries, max accuracy diff {max_diff:e}", patches.len()));
    }
    let shaped = patches.iter().all(|p| {
        ["id", "lon", "lat", "split", "accuracy"].iter().all(|k| p.get(k).is_some())
            && p.as_object().is_some_and(|o| o.len() == 5)
    });
    if !shaped {
        problems.push("/api/patches entry shape".into());
    }

    let (status, body) = fetch(&app, "/api/curve").await?;
    let curve: Vec<glacier_core::analysis::CurvePoint> = serde_json::from_slice(&body)?;
    let sorted =
        curve.windows(2).all(|w| w[0].accuracy <= w[1].accuracy) && curve.iter().enumerate().all(|(i, p)| p.rank == i);
    if status != StatusCode::OK || curve != accuracy_curve(&records)? || !sorted {
        problems.push("/api/curve".into());
    }

    let (status, body) = fetch(&app, "/api/meta").await?;
    let meta: serde_json::Value = serde_json::from_slice(&body)?;
    let meta_ok = status == StatusCode::OK
        && ["west", "south", "east", "north"].iter().all(|k| meta["bounds"][k].is_f64())
        && meta["palette"].is_object()
        && meta["classes"].as_array().is_some_and(|c| c.len() == 3)
        && meta["layers"].as_array().is_some_and(|l| l.len() == 8);
    if !meta_ok {
        problems.push("/api/meta".into());
    }

    let size = desk.cfg.sampling.patch_size;
    let shapes = desk.cfg.unet.layer_shapes(1, size, size);
    let mut pngs = 0;
    for r in &records {
        let mut expected: Vec<(String, (u32, u32))> = ["image", "mask", "pred"]
            .iter()
            .map(|a| (format!("{a}.png"), (size as u32, size as u32)))
            .chain(
                ["clean_ice", "debris", "background"]
                    .iter()
                    .map(|c| (format!("prob/{c}.png"), (size as u32, size as u32))),
            )
            .collect();
        for layer in desk.cfg.tap_layers() {
            let s = shapes.iter().find(|(l, _)| *l == layer).context("unknown tap")?.1;
            expected.push((format!("activations/{layer}.png"), ((s.c.min(8) * s.w) as u32, s.h as u32)));
        }
        for (artifact, dims) in expected {
            let uri = format!("/api/patches/{}/{artifact}", r.id);
            let (status, body) = fetch(&app, &uri).await?;
            let ok = status == StatusCode::OK
                && image::load_from_memory_with_format(&body, image::ImageFormat::Png)
                    .is_ok_and(|i| (i.width(), i.height()) == dims);
            if ok {
                pngs += 1;
            } else {
                problems.push(uri);
            }
        }
    }

    let mut not_found = 0;
    let unknown = ["/api/patches/p9999/image.png", "/api/patches/nope/pred.png", "/api/patches/p0000/secret.png"];
    for uri in unknown {
        if fetch(&app, uri).await?.0 == StatusCode::NOT_FOUND {
            not_found += 1;
        } else {
            problems.push(format!("{uri} not 404"));
        }
    }
    let mean = records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64;
    outcome(
        problems.is_empty(),
        format!(
            "{} patches (mean accuracy {mean:.4}), {pngs} PNG artifacts OK, accuracy diff {max_diff:.1e}, {not_found}/{} unknown paths 404{}",
            records.len(),
            unknown.len(),
            if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join(", ")) }
        ),
    )
}

fn service_contract(desk: &Desk) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let rt = tokio::runtime::Runtime::new()?;
    let mut out = rt.block_on(service_checks(desk))?;
    out.detail = format!("{}; {}", out.detail, secs(start.elapsed()));
    Ok(out)
}

fn report(name: &str, result: anyhow::Result<Outcome>) -> bool {
    match result {
        Ok(o) => {
            println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("FAIL {name}: error: {e:#}");
            false
        }
    }
}

fn main() {
    let mut passed = vec![
        report("gradient suite", gradient_suite()),
        report("equalization", equalization()),
        report("sampling", sampling()),
        report("overfit smoke", overfit()),
        report("incomplete labels", incomplete_labels()),
        report("determinism and roundtrips", determinism()),
    ];
    match desk_run() {
        Ok(desk) => {
            passed.push(report("representation outputs", representation(&desk)));
            passed.push(report("service contract", service_contract(&desk)));
        }
        Err(e) => {
            for name in ["representation outputs", "service contract"] {
                passed.push(report(name, Err(anyhow::anyhow!("desk pipeline failed: {e:#}"))));
            }
        }
    }
    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
