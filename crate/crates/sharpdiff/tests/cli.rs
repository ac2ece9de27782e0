use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sharpdiff"))
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

fn twice(sub: &str, spec: &str, extra: &[&str]) -> Vec<(String, Vec<u8>)> {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "spec.json", spec);
    let mut runs = vec![];
    for k in 0..2 {
        let out = tmp.path().join(format!("run{k}"));
        let o = out.to_string_lossy().into_owned();
        let mut args = vec![sub, "--config", &cfg, "--out", &o];
        args.extend_from_slice(extra);
        let (code, err) = run(&args);
        assert_eq!(code, 0, "{sub} failed: {err}");
        runs.push(outputs(&out));
    }
    assert_eq!(runs[0], runs[1], "{sub} is not reproducible");
    runs.pop().unwrap()
}

#[test]
fn lemmas_are_reproducible() {
    let files = twice("verify-lemmas", r#"{"lemmas": {"matrices": 2, "samples": 500, "mixtures": 1, "mixture_samples": 500}}"#, &[]);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["lemma_report.csv", "lemma_z.svg", "manifest.json"]);
}

#[test]
fn seed_flag_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let spec = write(tmp.path(), "s.json", r#"{"lemmas": {"matrices": 1, "samples": 100, "mixtures": 1, "mixture_samples": 100}}"#);
    let (code, _) = run(&["verify-lemmas", "--config", &spec, "--out", out.to_str().unwrap(), "--seed", "5", "--jobs", "1"]);
    assert_eq!(code, 0);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 5"));
}

#[test]
fn detect_spectrum_sail_sample_are_reproducible() {
    twice("detect", r#"{"source": {"bank": {"config": {"sharp_conditions": 5, "broad_conditions": 5}}}, "detect": {"generations": 2}}"#, &["--jobs", "2"]);
    twice(
        "spectrum",
        r#"{"source": {"toy": {}}, "spectrum": {"seeds": 4, "sampler": {"inference_steps": 20, "guidance": 1.0}}}"#,
        &[],
    );
    twice("sail", r#"{"source": {"toy": {}}, "mitigation": {"seeds": 4, "control_seeds": 2, "sail": {"max_iters": 3}}}"#, &[]);
    let files = twice("sample", r#"{"source": {"toy": {}}, "condition": "broad", "count": 6}"#, &["--seed", "3"]);
    let csv = String::from_utf8(files.iter().find(|f| f.0 == "samples.csv").unwrap().1.clone()).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn train_writes_a_loadable_checkpoint() {
    let spec = r#"{"dataset": {"toy": {"config": {"samples": 64}}}, "net": {"hidden": [8]}, "train": {"epochs": 2, "batch_size": 32}}"#;
    let files = twice("train", spec, &[]);
    let tmp = TempDir::new().unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    fs::write(&ckpt, &files.iter().find(|f| f.0 == "model.ckpt").unwrap().1).unwrap();
    let (net, header) = sharpdiff::scorenet::load_checkpoint(&ckpt, None).unwrap();
    assert_eq!(net.config().dim, 2);
    assert_eq!(header.param_count, net.param_count());

    let sample = format!(
        r#"{{"source": {{"checkpoint": {{"path": {:?}, "dataset": {{"toy": {{"config": {{"samples": 64}}}}}}}}}}, "count": 3, "condition": "sharp"}}"#,
        ckpt.to_str().unwrap()
    );
    twice("sample", &sample, &[]);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let (code, err) = run(&["detect", "--frobnicate", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"));
    assert!(!out.exists());
}

#[test]
fn missing_files_fail_validation_and_write_nothing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();
    let spec = write(
        tmp.path(),
        "d.json",
        r#"{"source": {"checkpoint": {"path": "/nonexistent/model.ckpt", "dataset": {"toy": {}}}}}"#,
    );
    let (code, err) = run(&["detect", "--config", &spec, "--out", o]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/model.ckpt"), "{err}");
    assert!(!out.exists());

    let (code, err) = run(&["detect", "--config", "/nonexistent/spec.json", "--out", o]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/spec.json"));

    let mnist = write(
        tmp.path(),
        "m.json",
        r#"{"dataset": {"mnist": {"images": "/nonexistent/images", "labels": "/nonexistent/labels"}}}"#,
    );
    let (code, err) = run(&["train", "--config", &mnist, "--out", o]);
    assert_eq!(code, 1);
    assert!(err.contains("/nonexistent/images"));
    assert!(!out.exists());
}

#[test]
fn unknown_spec_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let spec = write(tmp.path(), "d.json", r#"{"source": {"toy": {}}, "detect": {"generation": 4}}"#);
    let (code, err) = run(&["detect", "--config", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("generation"));
    assert!(!out.exists());
}

#[test]
fn runtime_failure_leaves_a_sentinel() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    // Valid JSON and schema, but the label is not in the mixture.
    let spec = write(tmp.path(), "s.json", r#"{"source": {"toy": {}}, "condition": "nope", "count": 2}"#);
    let (code, _) = run(&["sample", "--config", &spec, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    let msg = fs::read_to_string(out.join(".failed")).unwrap();
    assert!(msg.contains("nope"));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn help_documents_the_schema() {
    let out = bin().arg("help").arg("detect").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("SPEC FILES") && text.contains("EXIT CODES"));
}
