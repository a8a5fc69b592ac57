mod common;

use std::fs;
use std::path::{Path, PathBuf};

use vocab_prune::pipeline::{self, ConfigError, Pipeline, PipelineConfig, PipelineError, Stage, TokenizerMismatch};
use vocab_prune::{parse_sp_model, serialize_sp_model};

fn toy_config(out: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::load(&common::fixtures().join("toy/config.toml")).unwrap();
    c.paths.output_dir = out.to_owned();
    c
}

fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != pipeline::TIMINGS)
        .map(|p| (PathBuf::from(p.file_name().unwrap()), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn toy_run_is_clean_and_budget_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(toy_config(dir.path()), false).unwrap();
    let mut summary = Vec::new();
    let outcome = p.run_all(&mut summary).unwrap();
    let r = &outcome.report;
    assert!(outcome.verification.ok);
    assert!(r.vocabulary.budget_met);
    assert_eq!(r.vocabulary.v_new, 27);
    assert_eq!(r.verification.sample_unk_tokens, 0);
    assert!(r.actual.size_law_holds);
    assert!(r.actual.matches_estimate, "{:?} vs {:?}", r.actual, r.estimate);
    assert_eq!(
        r.estimate.predicted.bytes_old - r.estimate.predicted.bytes_new,
        r.actual.payload_bytes_old - r.actual.payload_bytes_new
    );
    let text = String::from_utf8(summary).unwrap();
    assert!(text.contains("verification: ok"), "{text}");
}

#[test]
fn missing_corpus_fails_validation_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut c = toy_config(&out);
    c.paths.secondary_corpus = dir.path().join("nope.txt");
    let err = Pipeline::new(c, false).err().expect("validation error");
    assert!(matches!(err, PipelineError::Config(ConfigError::Invalid(ref m)) if m.contains("secondary_corpus")));
    assert!(!out.exists());
}

#[test]
fn reruns_skip_and_force_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let c = toy_config(dir.path());
    Pipeline::new(c.clone(), false)
        .unwrap()
        .run_all(&mut Vec::new())
        .unwrap();
    let first = artifacts(dir.path());

    let again = Pipeline::new(c.clone(), false).unwrap();
    again.run_all(&mut Vec::new()).unwrap();
    let skipped: Vec<Stage> = again.timings().iter().filter(|t| t.skipped).map(|t| t.stage).collect();
    assert_eq!(skipped, Stage::ALL[..5].to_vec());
    assert_eq!(artifacts(dir.path()), first);

    let forced = Pipeline::new(c, true).unwrap();
    forced.run_all(&mut Vec::new()).unwrap();
    assert!(forced.timings().iter().all(|t| !t.skipped));
    assert_eq!(artifacts(dir.path()), first);
}

#[test]
fn changed_setting_reruns_dependent_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = toy_config(dir.path());
    Pipeline::new(c.clone(), false)
        .unwrap()
        .run_all(&mut Vec::new())
        .unwrap();
    c.selection.n_total = 26;
    let p = Pipeline::new(c, false).unwrap();
    let outcome = p.run_all(&mut Vec::new()).unwrap();
    assert_eq!(outcome.report.vocabulary.v_new, 26);
    assert!(p.timings().iter().all(|t| !t.skipped));
}

#[test]
fn independent_output_dirs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cb = toy_config(b.path());
    cb.jobs = 4;
    cb.shard_lines = 3;
    Pipeline::new(toy_config(a.path()), false)
        .unwrap()
        .run_all(&mut Vec::new())
        .unwrap();
    Pipeline::new(cb, false).unwrap().run_all(&mut Vec::new()).unwrap();
    assert_eq!(artifacts(a.path()), artifacts(b.path()));
}

#[test]
fn report_stage_reproduces_from_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let c = toy_config(dir.path());
    Pipeline::new(c.clone(), false)
        .unwrap()
        .run_all(&mut Vec::new())
        .unwrap();
    let report = dir.path().join(pipeline::REPORT);
    let before = fs::read(&report).unwrap();
    fs::remove_file(&report).unwrap();
    Pipeline::new(c, false).unwrap().report(&mut Vec::new()).unwrap();
    assert_eq!(fs::read(&report).unwrap(), before);
}

#[test]
fn corrupted_tokenizer_piece_is_one_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let c = toy_config(dir.path());
    let p = Pipeline::new(c.clone(), false).unwrap();
    p.run_all(&mut Vec::new()).unwrap();

    let path = dir.path().join(pipeline::TOKENIZER);
    let mut model = parse_sp_model(&fs::read(&path).unwrap()).unwrap();
    model.pieces[3].text = "corrupt".into();
    fs::write(&path, serialize_sp_model(&model)).unwrap();

    let p = Pipeline::new(c, false).unwrap();
    let v = p.verify().unwrap();
    assert!(!v.ok);
    assert_eq!(v.tokenizer.len(), 1);
    assert!(matches!(&v.tokenizer[0], TokenizerMismatch::Piece { new_id: 3, fields, .. } if fields == &["text"]));
    assert!(v.checkpoint.ok());
    assert!(!p.report(&mut Vec::new()).unwrap().verification.ok);
}

#[test]
fn later_stage_without_inputs_names_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(toy_config(dir.path()), false).unwrap();
    match p.prune_model() {
        Err(PipelineError::Stage { stage, artifact, .. }) => {
            assert_eq!(stage, Stage::PruneModel);
            assert_eq!(artifact, dir.path().join(pipeline::PLAN));
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
}
