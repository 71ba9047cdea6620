//! Exit-code and surface checks for the `picnet` binary.

use std::path::Path;
use std::process::Command;

fn picnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_picnet"))
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    let text = format!(
        r#"
[world]
n_places = 12
area_m = 400.0
min_spacing_m = 30.0
seed = 3
cloud_points = 32
image_height = 16
image_width = 16

[pipeline]
variant = "pic01"

[pipeline.dims]
clusters = 4
point_feature_dim = 8
image_feature_dim = 8
hidden = 16
cloud_points = 32
image_height = 16
image_width = 16
patch = 8

[training]
steps = 8
seed = 1

[output]
dir = "{}"
seeds = [0]
"#,
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn print_config_round_trips_through_parser() {
    let out = picnet().arg("print-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[world]"));
    assert!(text.contains("variant = \"pic04\""));
    // The printed defaults must parse back.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    std::fs::write(&path, &text).unwrap();
    // gradcheck parses the config up front and exercises it without needing
    // a dataset on disk.
    let out = picnet()
        .args(["gradcheck", "--config"])
        .arg(&path)
        .env("PICNET_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_cycle_generate_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    for sub in ["generate", "train"] {
        let out = picnet().arg(sub).arg("--config").arg(&config).output().unwrap();
        assert!(
            out.status.success(),
            "{sub}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = picnet()
        .args(["eval", "--queries-from", "database", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("recall@1 1.0000"), "self-retrieval not perfect: {text}");
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_small_config(dir.path());
    let out = picnet().arg("train").arg("--config").arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unparseable_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "[world\nn_places = ").unwrap();
    let out = picnet().arg("generate").arg("--config").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_exits_zero_and_lists_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = picnet()
        .arg("gradcheck")
        .env("PICNET_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for op in [
        "point_backbone",
        "image_backbone",
        "soft_assign",
        "spatial_attention",
        "att_vlad",
        "local_channel_attention",
        "global_channel_attention",
        "lazy_quadruplet_loss",
        "full_pipeline",
    ] {
        assert_eq!(
            text.matches(op).count(),
            1,
            "op {op} should be listed exactly once:\n{text}"
        );
    }
    assert_eq!(text.matches("PASS").count(), 9);
}

#[test]
fn out_env_overrides_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let override_dir = dir.path().join("elsewhere");
    let config = write_small_config(dir.path());
    let out = picnet()
        .arg("generate")
        .arg("--config")
        .arg(&config)
        .env("PICNET_OUT", &override_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(override_dir.join("dataset/manifest.json").exists());
    assert!(!dir.path().join("out/dataset").exists());
}
