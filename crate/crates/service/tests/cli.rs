use std::path::Path;
use std::process::Command;

fn glacier(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_glacier")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"scene": {"width": 64, "height": 48, "blob_radius_min": 5, "blob_radius_max": 9}}"#)
        .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = glacier(&["synth", "--seed", "7", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = read_all(&a);
    assert_eq!(
        files.iter().map(|f| f.0.as_str()).collect::<Vec<_>>(),
        vec!["mask.grd", "polygons.geojson", "raster.grd"]
    );
    assert_eq!(files, read_all(&b));
}

#[test]
fn usage_errors_exit_2() {
    let o = glacier(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(glacier(&["synth"]).status.code(), Some(2));
    assert_eq!(glacier(&["synth", "--out", "x", "--seed", "abc"]).status.code(), Some(2));
    assert_eq!(glacier(&["--help"]).status.code(), Some(0));
}

#[test]
fn stage_errors_exit_1_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o =
        glacier(&["preprocess", "--input", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: "), "{err}");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"unet": {"depth": 0}}"#).unwrap();
    let o = glacier(&["synth", "--config", bad.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "scene stage ignores the network section");
    let o = glacier(&["serve", "--root", missing.to_str().unwrap(), "--port", "0"]);
    assert_eq!(o.status.code(), Some(1));
}
