use std::path::Path;
use std::process::{Command, Output};

fn postmask(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_postmask"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn synth(dir: &Path) {
    let out = postmask(
        dir,
        &["synth", "--out-dir", "corpus", "--train", "2", "--val", "1", "--test", "2", "--duration", "0.6"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[train]\nlr = 1\n").unwrap();
    let out = postmask(d, &["stats", "--manifest", "m.jsonl", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    let out = postmask(d, &["stats"]);
    assert_eq!(out.status.code(), Some(2), "missing manifest is a usage error");

    std::fs::write(d.join("m.jsonl"), "{\"clean\": \"nope.wav\", \"coded\": \"surrogate:q_low\", \"split\": \"test\"}\n").unwrap();
    let out = postmask(d, &["stats", "--manifest", "m.jsonl"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = postmask(d, &["oracle", "--bounds", "0"]);
    assert_eq!(out.status.code(), Some(2), "clap rejects the bound");
}

#[test]
fn every_command_writes_a_run_header() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let out = postmask(d, &["stats", "--manifest", "corpus/manifest.jsonl", "--out-dir", "stats"]);
    assert!(out.status.success());
    let header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("stats/run.json")).unwrap()).unwrap();
    assert_eq!(header["command"], "stats");
    assert_eq!(header["seed"], 0);
    assert!(header["pipeline"]["mask"]["alpha"].is_number());
    assert!(d.join("corpus/run.json").exists());

    let table = std::fs::read_to_string(d.join("stats/stats.csv")).unwrap();
    let total: f64 = table.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-8, "{table}");
}

#[test]
fn degrade_writes_one_coded_file_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let out = postmask(
        d,
        &["degrade", "--manifest", "corpus/manifest.jsonl", "--preset", "q_high", "--out-dir", "deg", "--jobs", "3"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(d.join("deg/manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec["preset"], "q_high");
        assert_eq!(rec["coded"], format!("coded/utt_a_{i:04}_q_high.wav"));
        assert!(d.join("deg").join(rec["coded"].as_str().unwrap()).exists());
    }

    // the coded manifest is usable downstream, grouped by preset
    let out = postmask(d, &["eval", "--manifest", "deg/manifest.jsonl", "--out-dir", "eval", "--system", "oracle:inf"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = std::fs::read_to_string(d.join("eval/eval.csv")).unwrap();
    assert!(eval.lines().nth(1).unwrap().contains(",q_high,mask_inf,"), "{eval}");
    assert_eq!(eval.lines().count(), 1 + 2 + 1);
}

#[test]
fn enhance_requires_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let out = postmask(
        d,
        &["enhance", "--model", "missing.mpf", "--input", "corpus/utt_a_0000.wav", "--output", "x.wav"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!d.join("x.wav").exists());
}
