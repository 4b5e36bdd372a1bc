use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uforecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uforecon")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = uforecon(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_scene(dir: &Path, count: usize, size: usize) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    let json = format!(r#"{{ "rig": {{ "count": {count} }}, "width": {size}, "height": {size}, "track_samples": 150 }}"#);
    fs::write(&spec, json).unwrap();
    let scene = dir.join("scene");
    ok(&["gen-scene", "--spec", p(&spec), "--out", p(&scene)]);
    scene
}

#[test]
fn vc_score_lists_every_triple() {
    let dir = tempfile::tempdir().unwrap();
    let scene = make_scene(dir.path(), 5, 16);
    let csv = dir.path().join("vc.csv");
    ok(&["vc-score", "--scene", p(&scene), "--k", "3", "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    let scores: Vec<f64> = rows.iter().map(|r| r.split(';').nth(1).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(rows[0].ends_with(";favorable") && rows[9].ends_with(";unfavorable"));
}

#[test]
fn missing_flag_is_a_usage_error() {
    let out = uforecon(&["vc-score", "--k", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--scene"));
}

#[test]
fn runtime_failure_exits_with_two() {
    let out = uforecon(&["vc-score", "--scene", "/nonexistent/scene", "--k", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn pipeline_from_scene_to_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let scene = make_scene(dir.path(), 6, 16);
    let config = dir.path().join("train.json");
    let micro = r#"{
        "n_source_views": 3, "rays_per_step": 16, "steps": 2, "lr": 0.0005,
        "sampling_mode": "random", "checkpoint_every": 1,
        "model": {
            "backbone": { "levels": 1, "encoder_channels": [4], "fpn_width": 4, "out_channels": [4], "attention_blocks": 2, "heads": 2 },
            "frustum": { "hypotheses": [4], "shrink": 0.5, "reg_channels": [2, 2, 2], "volume_channels": 2 },
            "renderer": { "coarse_samples": 8, "fine_samples": 0, "token_dim": 4, "heads": 2, "aggregation_blocks": 1,
                          "ray_blocks": 1, "sdf_hidden": 4, "octaves": 2, "init_sharpness": 4.0, "depth_prior": false },
            "similarity_groups": 2
        }
    }"#;
    fs::write(&config, micro).unwrap();
    let run = dir.path().join("run");
    let stdout = ok(&["--seed", "3", "train", "--scene", p(&scene), "--config", p(&config), "--out", p(&run)]);
    assert!(stdout.contains("\"seed\": 3"));
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(run.join("checkpoint.bin").exists());

    let renders = dir.path().join("renders");
    ok(&["render", "--run", p(&run), "--scene", p(&scene), "--views", "0,1,2", "--target", "3", "--out", p(&renders)]);
    assert!(renders.join("0003.ppm").exists() && renders.join("0003_depth.pfm").exists());

    for set in ["favorable", "unfavorable", "0,2,4"] {
        let report = dir.path().join(format!("eval_{set}.json"));
        ok(&["eval", "--run", p(&run), "--scene", p(&scene), "--set", set, "--out", p(&report)]);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert!(json["mae"].as_f64().unwrap().is_finite());
        assert_eq!(json["set"].as_array().unwrap().len(), 3);
        assert_eq!(json["per_view"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn resume_continues_the_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let scene = make_scene(dir.path(), 5, 16);
    let config = dir.path().join("train.json");
    let body = |steps: usize| {
        format!(
            r#"{{ "n_source_views": 2, "rays_per_step": 8, "steps": {steps}, "sampling_mode": "random",
                 "model": {{ "backbone": {{ "levels": 1, "encoder_channels": [4], "fpn_width": 4, "out_channels": [4], "attention_blocks": 2, "heads": 2 }},
                            "frustum": {{ "hypotheses": [4], "reg_channels": [2, 2, 2], "volume_channels": 2 }},
                            "renderer": {{ "coarse_samples": 4, "fine_samples": 0, "token_dim": 4, "heads": 2, "aggregation_blocks": 1,
                                          "ray_blocks": 1, "sdf_hidden": 4, "octaves": 2, "depth_prior": false }},
                            "similarity_groups": 2 }} }}"#
        )
    };
    let run = dir.path().join("run");
    fs::write(&config, body(1)).unwrap();
    ok(&["train", "--scene", p(&scene), "--config", p(&config), "--out", p(&run), "--double"]);
    fs::write(&config, body(3)).unwrap();
    let stdout = ok(&["train", "--scene", p(&scene), "--config", p(&config), "--out", p(&run), "--double", "--resume"]);
    assert!(stdout.contains("resumed at step 1"));
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2"]);
}

#[test]
fn grad_check_passes_in_double_precision() {
    let stdout = ok(&["grad-check", "--double"]);
    assert!(stdout.contains("gradient checks passed"));
    assert!(stdout.lines().any(|l| l.contains("pipeline")));
}
