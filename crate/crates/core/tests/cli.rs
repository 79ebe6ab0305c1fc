use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hrstnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrstnet"))
        .args(args)
        .env("HRST_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, data: &Path, epochs: usize) -> std::path::PathBuf {
    let cfg = dir.join("run.toml");
    let text = format!(
        r#"
[model]
variant = 2
embed_dim = 8
window = 2
heads = [2, 4, 8, 16]
in_channels = 1
num_classes = 2

[train]
epochs = {epochs}
crop = [16, 16, 16]
base_lr = 1e-2
warmup_epochs = 1

[data]
train_dir = "{}"
"#,
        data.display()
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn synth_train_predict_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = hrstnet(&["synth", "--out", p(&data), "--cases", "2", "--dims", "16", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("images/case_001.hvol").exists());
    assert!(data.join("manifest.json").exists());

    let cfg = write_config(tmp.path(), &data, 2);
    let run = tmp.path().join("run");
    let o = hrstnet(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");

    let pred = tmp.path().join("pred");
    let ckpt = run.join("last.ckpt");
    let o = hrstnet(&[
        "predict", "--checkpoint", p(&ckpt), "--input", p(&data.join("images")), "--out", p(&pred),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(pred.join("case_000.hvol").exists() && pred.join("case_001.hvol").exists());

    let eval = tmp.path().join("eval");
    let o = hrstnet(&[
        "evaluate", "--pred", p(&pred), "--gt", p(&data.join("labels")), "--regions", "classes",
        "--out", p(&eval),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(eval.join("per_case.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean"));
}

#[test]
fn evaluating_ground_truth_against_itself_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(hrstnet(&["synth", "--out", p(&data), "--dims", "16"]).status.success());
    let labels = data.join("labels");
    let eval = tmp.path().join("eval");
    let o = hrstnet(&[
        "evaluate", "--pred", p(&labels), "--gt", p(&labels), "--regions", "classes", "--out", p(&eval),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cases: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("cases.json")).unwrap()).unwrap();
    let text = cases.to_string();
    assert!(text.contains("\"dice\":1.0"), "{text}");
}

#[test]
fn missing_config_is_exit_2() {
    let o = hrstnet(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_config_key_is_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let o = hrstnet(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
}

#[test]
fn bad_roi_is_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(hrstnet(&["synth", "--out", p(&data), "--dims", "16"]).status.success());
    let cfg = write_config(tmp.path(), &data, 1);
    let run = tmp.path().join("run");
    assert!(hrstnet(&["train", "--config", p(&cfg), "--out", p(&run)]).status.success());
    for roi in ["32", "12"] {
        let o = hrstnet(&[
            "predict", "--checkpoint", p(&run.join("last.ckpt")), "--input",
            p(&data.join("images/case_000.hvol")), "--out", p(&tmp.path().join("pred")), "--roi", roi,
        ]);
        assert_eq!(o.status.code(), Some(2), "roi {roi}");
        assert!(stderr(&o).contains("roi"), "{}", stderr(&o));
    }
}

#[test]
fn unmatched_cases_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(hrstnet(&["synth", "--out", p(&data), "--cases", "2", "--dims", "16"]).status.success());
    let pred = tmp.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    fs::copy(data.join("labels/case_000.hvol"), pred.join("case_000.hvol")).unwrap();
    let o = hrstnet(&[
        "evaluate", "--pred", p(&pred), "--gt", p(&data.join("labels")), "--out",
        p(&tmp.path().join("eval")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("case_001"), "{}", stderr(&o));
}

#[test]
fn trace_json_and_bad_extent() {
    let o = hrstnet(&["trace", "--input", "64", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["streams"].as_array().unwrap().len(), 4);
    let o = hrstnet(&["trace", "--input", "100"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = hrstnet(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
}
