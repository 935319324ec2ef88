use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use duplex_curate::fixtures::synth::{default_corpus, write_corpus, ConversationSpec};
use duplex_curate::flags::Flag;
use duplex_curate::metrics::rtf_report;
use duplex_curate::pipeline::manifest::MANIFEST_FILE;
use duplex_curate::pipeline::{
    check_manifest, connect_backends, manifest_schema, read_manifest, run_with, FileStatus, Manifest, ManifestStatus,
    PipelineConfig, PipelineError,
};
use duplex_curate::protocol::mock::caption_context_count;
use duplex_curate::protocol::TaskKind;

fn config(input: &Path, output: &Path, overrides: &[&str]) -> PipelineConfig {
    let mut o: Vec<String> = vec![
        format!("input_dir={:?}", input.to_string_lossy()),
        format!("output_dir={:?}", output.to_string_lossy()),
    ];
    o.extend(overrides.iter().map(|s| s.to_string()));
    PipelineConfig::load(None, &o).unwrap()
}

fn small_corpus(dir: &Path) {
    let specs = vec![ConversationSpec::short("one", 3), ConversationSpec::new("two", 30.0, 3, 5)];
    write_corpus(dir, &specs).unwrap();
}

fn manifest_bytes(out: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(out)
        .unwrap()
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path().join(MANIFEST_FILE)).unwrap()))
        .collect()
}

fn manifest(out: &Path, stem: &str) -> Manifest {
    read_manifest(&out.join(stem).join(MANIFEST_FILE)).unwrap()
}

#[test]
fn end_to_end_manifests_are_valid_and_deterministic() {
    let input = tempfile::tempdir().unwrap();
    write_corpus(input.path(), &default_corpus()).unwrap();
    let out1 = tempfile::tempdir().unwrap();
    let out4 = tempfile::tempdir().unwrap();

    let cfg1 = config(input.path(), out1.path(), &["worker_count=1"]);
    let d1 = connect_backends(&cfg1).unwrap();
    let s1 = run_with(&cfg1, &d1).unwrap();
    assert_eq!(s1.failed_count(), 0, "{s1:?}");
    let cfg4 = config(input.path(), out4.path(), &["worker_count=4"]);
    let s4 = run_with(&cfg4, &connect_backends(&cfg4).unwrap()).unwrap();
    assert_eq!(s4.failed_count(), 0);

    let m1 = manifest_bytes(out1.path());
    assert_eq!(m1.len(), 4);
    assert_eq!(m1, manifest_bytes(out4.path()));

    let mut saw = BTreeMap::<&str, bool>::new();
    for stem in m1.keys() {
        let m = manifest(out1.path(), stem);
        assert_eq!(m.status, ManifestStatus::Complete);
        let problems = check_manifest(&m, &out1.path().join(stem));
        assert!(problems.is_empty(), "{stem}: {problems:?}");
        for c in &m.chunks {
            for s in &c.segments {
                if s.flags.contains(&Flag::MusicFlagged) {
                    saw.insert("music", true);
                }
                if s.transcript.as_ref().is_some_and(|t| !t.words.is_empty()) {
                    saw.insert("words", true);
                }
            }
            if c.overlaps.iter().any(|o| o.cand1_speaker.is_some()) {
                saw.insert("separated", true);
            }
        }
        if m.duplex_regions.iter().any(|r| r.audio.is_some()) {
            saw.insert("duplex", true);
        }
    }
    for what in ["music", "words", "separated", "duplex"] {
        assert!(saw.contains_key(what), "corpus never exercised {what}");
    }

    // Summary RTF is the ratio of the sums.
    let report = s1.rtf_report().unwrap();
    let total: f64 = s1.stage_timings.iter().map(|t| t.processing_s).sum();
    let dur: f64 = s1.files.iter().filter_map(|f| f.duration_s).sum();
    assert!((report.total_rtf - total / dur).abs() < 1e-12);
    let again = rtf_report(&s1.stage_timings.iter().map(|t| (t.stage.as_str(), t.processing_s)).collect::<Vec<_>>(), dur);
    assert_eq!(again, report);
    assert!(d1.log().iter().all(|r| r.ok), "mock requests failed");
}

#[test]
fn disabled_stage_dispatches_nothing() {
    let input = tempfile::tempdir().unwrap();
    small_corpus(input.path());
    let out = tempfile::tempdir().unwrap();
    let cfg = config(input.path(), out.path(), &["stages.asr=false", "stages.caption=false"]);
    let d = connect_backends(&cfg).unwrap();
    let summary = run_with(&cfg, &d).unwrap();
    assert_eq!(summary.failed_count(), 0);
    assert!(d.log().iter().all(|r| r.task_kind != TaskKind::Asr && r.task_kind != TaskKind::Caption));
    assert!(d.log().iter().any(|r| r.task_kind == TaskKind::Diarize));
    let m = manifest(out.path(), "one");
    assert!(m.chunks.iter().flat_map(|c| &c.segments).all(|s| s.transcript.is_none() && s.caption.is_none()));
    assert!(m.stage_timings.iter().all(|t| t.stage != "asr"));
}

#[test]
fn empty_input_is_an_empty_success() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = config(input.path(), out.path(), &[]);
    let summary = run_with(&cfg, &connect_backends(&cfg).unwrap()).unwrap();
    assert!(summary.files.is_empty());
    assert_eq!(summary.total_rtf, None);
}

#[test]
fn captions_carry_preceding_context() {
    let input = tempfile::tempdir().unwrap();
    small_corpus(input.path());
    let out = tempfile::tempdir().unwrap();
    let cfg = config(input.path(), out.path(), &[]);
    run_with(&cfg, &connect_backends(&cfg).unwrap()).unwrap();
    let m = manifest(out.path(), "two");
    for c in &m.chunks {
        let counts: Vec<usize> =
            c.segments.iter().filter_map(|s| s.caption.as_deref()).map(|t| caption_context_count(t).unwrap()).collect();
        let expected: Vec<usize> = (0..counts.len()).map(|k| k.min(2)).collect();
        assert_eq!(counts, expected);
    }
}

#[test]
fn resume_skips_complete_and_redoes_the_rest() {
    let input = tempfile::tempdir().unwrap();
    small_corpus(input.path());
    let out = tempfile::tempdir().unwrap();
    let cfg = config(input.path(), out.path(), &[]);
    run_with(&cfg, &connect_backends(&cfg).unwrap()).unwrap();
    let first = manifest_bytes(out.path());

    let d = connect_backends(&cfg).unwrap();
    let s = run_with(&cfg, &d).unwrap();
    assert_eq!(d.dispatched_count(), 0);
    assert!(s.files.iter().all(|f| f.status == FileStatus::Skipped));

    std::fs::remove_file(out.path().join("one").join(MANIFEST_FILE)).unwrap();
    std::fs::write(out.path().join("two").join(MANIFEST_FILE), "{ not json").unwrap();
    let d = connect_backends(&cfg).unwrap();
    let s = run_with(&cfg, &d).unwrap();
    assert!(s.files.iter().all(|f| f.status == FileStatus::Complete));
    assert_eq!(manifest_bytes(out.path()), first);

    let p = out.path().join("one").join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    std::fs::write(&p, text).unwrap();
    assert!(matches!(run_with(&cfg, &connect_backends(&cfg).unwrap()), Err(PipelineError::Config(_))));
}

#[test]
fn unreadable_input_fails_only_that_file() {
    let input = tempfile::tempdir().unwrap();
    small_corpus(input.path());
    std::fs::write(input.path().join("broken.wav"), b"RIFF nonsense").unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = config(input.path(), out.path(), &[]);
    let s = run_with(&cfg, &connect_backends(&cfg).unwrap()).unwrap();
    assert_eq!(s.failed_count(), 1);
    let m = manifest(out.path(), "broken");
    assert_eq!(m.status, ManifestStatus::Failed);
    assert!(m.error.is_some());
    assert_eq!(manifest(out.path(), "one").status, ManifestStatus::Complete);
}

#[test]
fn missing_backend_capability_is_a_config_error() {
    let input = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = config(input.path(), out.path(), &["asr.models=[\"asr_a\",\"asr_z\"]"]);
    assert!(matches!(connect_backends(&cfg), Err(PipelineError::Config(_))));
}

#[test]
fn published_schema_is_current() {
    let doc = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/manifest.schema.json");
    let published = std::fs::read_to_string(&doc).unwrap_or_default();
    assert_eq!(published, manifest_schema(), "regenerate with `duplex-curate schema > docs/manifest.schema.json`");
}
