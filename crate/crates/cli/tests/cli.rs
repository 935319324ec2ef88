use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_duplex-curate"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixtures(dir: &Path) {
    let out = run(&["synth-fixtures", "--out", p(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_validate_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let (input, output) = (tmp.path().join("in"), tmp.path().join("out"));
    fixtures(&input);

    let out = run(&["run", "--input", p(&input), "--output", p(&output), "--workers", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("4 ok, 0 failed") && stdout.contains("Total"), "{stdout}");

    let out = run(&["validate-manifest", p(&output)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.starts_with("ok")).count(), 4);

    let out = run(&["evaluate", "rtf", "--summary", p(&output.join("summary.json"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("asr"));

    // A damaged manifest fails validation.
    let m = output.join("brief_10s").join("manifest.json");
    std::fs::write(&m, std::fs::read_to_string(&m).unwrap().replace("\"status\"", "\"state\"")).unwrap();
    assert_eq!(run(&["validate-manifest", p(&m)]).status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    std::fs::create_dir(&input).unwrap();

    let empty = run(&["run", "--input", p(&input), "--output", p(&tmp.path().join("o1"))]);
    assert_eq!(empty.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&empty.stdout).contains("0 file(s)"));

    let missing = run(&["run", "--input", p(&tmp.path().join("nope")), "--output", p(&tmp.path().join("o2"))]);
    assert_eq!(missing.status.code(), Some(2));
    let bad_key = run(&["run", "--input", p(&input), "--set", "stages.nonsense=true"]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert_eq!(run(&["run", "--bogus-flag"]).status.code(), Some(2));

    fixtures(&input);
    std::fs::write(input.join("zz_broken.wav"), b"not audio").unwrap();
    let partial = run(&["run", "--input", p(&input), "--output", p(&tmp.path().join("o3"))]);
    assert_eq!(partial.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&partial.stdout).contains("4 ok, 1 failed"));
}

#[test]
fn conformance_over_stdio_and_in_process() {
    let tmp = tempfile::tempdir().unwrap();
    fixtures(tmp.path());
    let worker = env!("CARGO_BIN_EXE_duplex-curate");
    let out = run(&["backend-conformance", "--fixtures", p(tmp.path()), "--command", worker, "mock-worker", "--fixtures", p(tmp.path())]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("frame errors: 0") && !text.contains("FAIL"), "{text}");

    let out = run(&["backend-conformance", "--fixtures", p(tmp.path()), "--mock"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn evaluate_scores_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (r, h) = (tmp.path().join("ref.txt"), tmp.path().join("hyp.txt"));
    std::fs::write(&r, "the cat sat on the mat").unwrap();
    std::fs::write(&h, "The cat sat on mat.").unwrap();
    let out = run(&["evaluate", "wer", "--ref", p(&r), "--hyp", p(&h)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["deletions"], 1);
    assert!((v["wer"].as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-12);

    let rttm = "SPEAKER rec 1 0.00 5.00 <NA> <NA> A <NA> <NA>\nSPEAKER rec 1 5.50 3.50 <NA> <NA> B <NA> <NA>\n";
    let (rr, hh) = (tmp.path().join("ref.rttm"), tmp.path().join("hyp.rttm"));
    std::fs::write(&rr, rttm).unwrap();
    std::fs::write(&hh, rttm.replace(" A ", " x ").replace(" B ", " y ")).unwrap();
    let out = run(&["evaluate", "der", "--ref", p(&rr), "--hyp", p(&hh)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["der"]["der"], 0.0);
    assert_eq!(v["mapping"]["A"], "x");

    let out = run(&["evaluate", "rtf", "--stage", "all=20.95", "--duration", "120"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.1746"));
}

#[test]
fn schema_and_config_print() {
    let out = run(&["schema"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["title"], "Manifest");
    let out = run(&["print-config", "--set", "stages.denoise=true"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("denoise = true"));
}
