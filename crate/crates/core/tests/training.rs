use glacier_core::analysis::predict_patch;
use glacier_core::geodata::{synth_scene, SceneConfig};
use glacier_core::preprocess::preprocess_scene;
use glacier_core::sampling::{sample_patches, Patch};
use glacier_core::train::{train, AdamConfig, LossConfig, TrainConfig, TrainError};
use glacier_core::unet::{decode_checkpoint, load_checkpoint_expecting, UNetConfig};

fn patches(n: usize, size: usize) -> Vec<Patch> {
    let cfg =
        SceneConfig { width: 128, height: 128, blob_radius_min: 10.0, blob_radius_max: 20.0, ..Default::default() };
    let scene = preprocess_scene(&synth_scene(2, &cfg).unwrap()).unwrap();
    sample_patches(&scene, n, size, 3).unwrap()
}

fn tiny() -> UNetConfig {
    UNetConfig { base_channels: 2, ..Default::default() }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = patches(5, 32);
    let tc = TrainConfig { epochs: 3, batch_size: 2, seed: 4, patch_size: 32, checkpoint_every: 2 };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&data, &tc, &LossConfig::default(), &AdamConfig::default(), &tiny(), Some(dir.path())).unwrap();
        let names: Vec<String> =
            out.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, vec!["ckpt_epoch_2.glck", "ckpt_epoch_3.glck"]);
        let bytes = std::fs::read(out.checkpoints.last().unwrap()).unwrap();
        (out, bytes, dir)
    };
    let (a, bytes_a, dir) = run();
    let (b, bytes_b, _) = run();
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    // Three batches per epoch: 2 + 2 + 1.
    assert_eq!(a.step_losses.len(), 9);

    let (_, params) = decode_checkpoint(&bytes_a).unwrap();
    assert_eq!(params, a.params);
    let loaded = load_checkpoint_expecting(&dir.path().join("ckpt_epoch_3.glck"), &tiny()).unwrap();
    let p = &data[0];
    assert_eq!(predict_patch(&tiny(), &loaded, p).unwrap(), predict_patch(&tiny(), &a.params, p).unwrap());
}

#[test]
fn different_seed_changes_training() {
    let data = patches(3, 32);
    let tc = TrainConfig { epochs: 1, batch_size: 3, seed: 1, patch_size: 32, checkpoint_every: 1 };
    let a = train(&data, &tc, &LossConfig::default(), &AdamConfig::default(), &tiny(), None).unwrap();
    let b = train(&data, &TrainConfig { seed: 2, ..tc }, &LossConfig::default(), &AdamConfig::default(), &tiny(), None)
        .unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn loss_decreases_over_a_short_run() {
    let data = patches(4, 32);
    let tc = TrainConfig { epochs: 100, batch_size: 4, seed: 0, patch_size: 32, checkpoint_every: 100 };
    let adam = AdamConfig { lr: 1e-3, ..Default::default() };
    let out =
        train(&data, &tc, &LossConfig::default(), &adam, &UNetConfig { base_channels: 4, ..Default::default() }, None)
            .unwrap();
    let first = out.curve.points[0].1;
    let last = out.curve.points.last().unwrap().1;
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn rejects_empty_and_mismatched_sets() {
    let tc = TrainConfig { epochs: 1, batch_size: 1, seed: 0, patch_size: 32, checkpoint_every: 1 };
    let err = train(&[], &tc, &LossConfig::default(), &AdamConfig::default(), &tiny(), None).unwrap_err();
    assert!(matches!(err, TrainError::EmptyTrainingSet));
    let data = patches(1, 16);
    let err = train(&data, &tc, &LossConfig::default(), &AdamConfig::default(), &tiny(), None).unwrap_err();
    assert!(matches!(err, TrainError::ShapeMismatch(_)));
}
