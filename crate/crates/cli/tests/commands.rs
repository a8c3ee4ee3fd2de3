use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set",
    "scene.feature_dim=32",
    "--set",
    "decoder.d=32",
    "--set",
    "decoder.layers=2",
    "--set",
    "queries={\"world\":30,\"image\":15,\"radar\":15}",
    "--set",
    "rings.rings=5",
];

fn hetquery(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetquery")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = hetquery(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn run_then_analyze_and_link() {
    let dir = tempfile::tempdir().unwrap();
    let report = path(dir.path(), "r.json");
    let mut args = vec!["run", "--out", &report, "--precision", "f32"];
    args.extend(SMALL);
    ok(&args);
    let timing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{report}.timing.json")).unwrap()).unwrap();
    assert!(timing["stages"].is_array());

    let csv = path(dir.path(), "attn.csv");
    ok(&["analyze-attn", &report, "--out", &csv]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 9);

    let links = path(dir.path(), "links.json");
    ok(&["links", &report, "--out", &links]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&links).unwrap()).unwrap();
    assert!(doc["links"].is_array());
    assert!(doc["note"].as_str().unwrap().contains("untrained"));
}

#[test]
fn scene_and_weights_files() {
    let dir = tempfile::tempdir().unwrap();
    let scene = path(dir.path(), "scene.json");
    ok(&["gen-scene", "--scene-seed", "5", "--out", &scene]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&scene).unwrap()).unwrap();
    assert_eq!(doc["seed"], 5);
    assert_eq!(doc["objects"].as_array().unwrap().len(), 30);
    assert_eq!(doc["rig"]["cameras"].as_array().unwrap().len(), 6);

    let weights = path(dir.path(), "w.cfw");
    let mut args = vec!["init-weights", "--weights-seed", "8", "--out", &weights];
    args.extend(SMALL);
    ok(&args);
    let bytes = std::fs::read(&weights).unwrap();
    let split = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[..split]).unwrap();
    assert_eq!(manifest["format"], "cfw");

    // A run from the saved file matches a run from the same seed.
    let (a, b) = (path(dir.path(), "a.json"), path(dir.path(), "b.json"));
    let weights_set = format!("weights_path={weights:?}");
    let mut from_file = vec!["run", "--out", &a, "--set", &weights_set];
    from_file.extend(SMALL);
    ok(&from_file);
    let mut from_seed = vec!["run", "--out", &b, "--weights-seed", "8"];
    from_seed.extend(SMALL);
    ok(&from_seed);
    let strip = |p: &str| {
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v["config"]["weights_path"] = serde_json::Value::Null;
        v["config"]["seeds"]["weights"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn errors_are_reported_as_json() {
    let out = hetquery(&["run", "--out", "/dev/null", "--set", "decoder.bogus=1"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("decoder.bogus"));

    let out = hetquery(&["run", "--preset", "nope", "--out", "/dev/null"]);
    assert!(!out.status.success());

    let dir = tempfile::tempdir().unwrap();
    let bad = path(dir.path(), "bad.cfw");
    std::fs::write(&bad, b"{}\n\n").unwrap();
    let weights_set = format!("weights_path={bad:?}");
    let out = hetquery(&["run", "--out", "/dev/null", "--set", &weights_set]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "format");
}
