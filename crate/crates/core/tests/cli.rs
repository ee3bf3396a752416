mod common;

use std::fs;

use common::*;
use rsalign::toyvlm::load_params;

fn json(o: &std::process::Output) -> serde_json::Value {
    serde_json::from_str(&stdout(o)).unwrap_or_else(|e| panic!("bad JSON ({e}): {}", stdout(o)))
}

#[test]
fn dris_spike_fixture_reports_one_roi() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_fixture_grid(dir.path(), "spike.fgrd", &spike_grid(32, 32, (21, 6), 50.0));
    let cfg = write_text(
        dir.path(),
        "run.cfg",
        "dris.k = 1\ndris.roi_height = 2\ndris.roi_width = 2\n",
    );
    let out = dir.path().join("out");
    let o = run(&[
        "dris",
        "--data",
        path_str(&grid),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    let rois = v["rois"].as_array().unwrap();
    assert_eq!(rois.len(), 1);
    let r: Vec<usize> = rois[0]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as usize)
        .collect();
    assert!(
        r[0] * 4 <= 21 && 21 < r[2] * 4 && r[1] * 4 <= 6 && 6 < r[3] * 4,
        "{r:?}"
    );
    assert!(v["savings_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(v["config"]["k"], 1);
    let csv = fs::read_to_string(out.join("saliency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 8);
    assert!(out.join("dris_report.json").exists());
}

#[test]
fn dris_with_n_one_reports_savings_at_least_one() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write_fixture_grid(dir.path(), "g.fgrd", &spike_grid(8, 8, (3, 3), 1.0));
    let o = bin()
        .args(["dris", "--data", path_str(&grid)])
        .env("RSALIGN_DRIS_N", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(json(&o)["savings_ratio"].as_f64().unwrap() >= 1.0);
}

#[test]
fn missing_file_exits_nonzero_with_diagnostic() {
    let o = run(&["dris", "--data", "/definitely/not/here.fgrd"]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("/definitely/not/here.fgrd"),
        "{}",
        stderr(&o)
    );
    assert!(stdout(&o).is_empty());
}

#[test]
fn bad_config_and_unknown_override_are_run_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_text(dir.path(), "bad.cfg", "dris.k = 2\ndris.sigmaa = 1\n");
    let o = run(&["selfcheck", "--config", path_str(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = bin()
        .args(["train"])
        .env("RSALIGN_NOT_A_KEY", "1")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("RSALIGN_NOT_A_KEY"));
}

fn aligned_fixture(dir: &std::path::Path, dim: usize) -> std::path::PathBuf {
    write_fixture_grid(dir, "ship.fgrd", &aligned_grid("ship", 8, 8, dim));
    let rec = serde_json::json!({
        "image_path": "ship.fgrd",
        "caption": "ship",
        "boxes": [[0, 0, 8, 8]],
        "box_labels": ["ship"],
        "region_masks": [{"height": 8, "width": 8, "runs": [0, 64]}],
        "phrases": ["ship", "ship"],
        "phrase_positive": [0],
    });
    write_text(dir, "ann.jsonl", &format!("{rec}\n"))
}

#[test]
fn aligned_fixture_leaves_only_the_nce_term() {
    let dir = tempfile::tempdir().unwrap();
    let ann = aligned_fixture(dir.path(), 16);
    let out = dir.path().join("out");
    let o = run(&["align", "--data", path_str(&ann), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    let item = &v["items"][0];
    let (beta, mu) = (1.0 / 3.0, 0.5);
    // Two identical phrases tie every score, so the contrastive term is ln 2.
    let want = beta * (1.0 - mu) * 2f64.ln();
    for key in ["l_obj", "l_reg_hard", "l_glob"] {
        assert!(
            item[key].as_f64().unwrap().abs() < 1e-6,
            "{key} = {}",
            item[key]
        );
    }
    assert!((item["l_reg_nce"].as_f64().unwrap() - 2f64.ln()).abs() < 1e-9);
    assert!((item["l_align"].as_f64().unwrap() - want).abs() < 1e-6);
    assert!(out.join("align_report.json").exists());
}

#[test]
fn zero_tier_weights_zero_every_item() {
    let dir = tempfile::tempdir().unwrap();
    let ann = aligned_fixture(dir.path(), 16);
    let cfg = write_text(
        dir.path(),
        "zero.cfg",
        "align.alpha = 0\nalign.beta = 0\nalign.gamma = 0\n",
    );
    let o = run(&[
        "align",
        "--data",
        path_str(&ann),
        "--config",
        path_str(&cfg),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for item in json(&o)["items"].as_array().unwrap() {
        assert_eq!(item["l_align"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn dim_mismatch_is_a_record_indexed_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let ann = aligned_fixture(dir.path(), 16);
    write_fixture_grid(dir.path(), "narrow.fgrd", &aligned_grid("ship", 8, 8, 8));
    let mut text = fs::read_to_string(&ann).unwrap();
    text.push_str(&text.replace("ship.fgrd", "narrow.fgrd"));
    fs::write(&ann, text).unwrap();
    let o = run(&["align", "--data", path_str(&ann)]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("record 1") && err.contains("shape"), "{err}");
    let v = json(&o);
    assert_eq!(v["items"].as_array().unwrap().len(), 1);
    assert_eq!(v["errors"][0]["index"], 1);
}

#[test]
fn metrics_identity_and_empty_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let same = serde_json::json!({"image_path": "a", "caption": "two white boats docked at the pier", "candidate": "two white boats docked at the pier"});
    let ann = write_text(dir.path(), "m.jsonl", &format!("{same}\n"));
    let out = dir.path().join("out");
    let o = run(&["metrics", "--data", path_str(&ann), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let values: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(&values[..4], ["1.000"; 4]);
    assert!(table.lines().next().unwrap().contains("CIDEr×10"));
    assert!(out.join("metrics.json").exists());

    let empty = serde_json::json!({"image_path": "b", "caption": "a road", "candidate": ""});
    let ann = write_text(dir.path(), "m2.jsonl", &format!("{same}\n{empty}\n"));
    let o = run(&["metrics", "--data", path_str(&ann), "--out", path_str(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("record 1"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["items"].as_array().unwrap().len(), 1);
    assert_eq!(report["bleu"][0], 1.0);
}

const SHORT_TRAIN: &str =
    "train.steps = 12\ntrain.total_steps = 12\ntrain.warmup_steps = 3\ntrain.pairs = 8\n";

#[test]
fn train_is_byte_deterministic_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_text(dir.path(), "t.cfg", SHORT_TRAIN);
    let mut csvs = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        let o = run(&[
            "train",
            "--config",
            path_str(&cfg),
            "--seed",
            "9",
            "--out",
            path_str(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("frozen_unchanged=true"));
        csvs.push(fs::read(out.join("loss_curve.csv")).unwrap());
        let params = load_params(fs::File::open(out.join("model.tvlm")).unwrap()).unwrap();
        assert_eq!(params.config().embed_dim, 32);
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(String::from_utf8_lossy(&csvs[0]).lines().count(), 13);

    let out = dir.path().join("c");
    let o = run(&[
        "train",
        "--config",
        path_str(&cfg),
        "--seed",
        "10",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success());
    assert_ne!(fs::read(out.join("loss_curve.csv")).unwrap(), csvs[0]);
}

#[test]
fn nonfinite_injection_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_text(dir.path(), "t.cfg", SHORT_TRAIN);
    let o = run(&[
        "train",
        "--config",
        path_str(&cfg),
        "--inject-nonfinite-at",
        "5",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("step 5"), "{}", stderr(&o));
}

#[test]
fn selfcheck_reports_a_corrupted_gradient_by_name() {
    let o = run(&[
        "selfcheck",
        "--instances",
        "2",
        "--skip-training",
        "--corrupt-gradient",
    ]);
    assert!(!o.status.success());
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let failed: Vec<&str> = lines
        .iter()
        .filter(|l| l["passed"] == false)
        .map(|l| l["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["gradient.align"]);
    assert_eq!(lines.last().unwrap()["summary"]["failed"], 1);
    assert!(stderr(&o).contains("FAIL gradient.align"));
}
