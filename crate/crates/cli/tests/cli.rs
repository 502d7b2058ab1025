//! End-to-end tests of the `sitref` binary: every subcommand driven through
//! a real process, exit codes and stable error prefixes included.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sitref"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

fn write_profile(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("profile.json");
    std::fs::write(
        &path,
        format!(r#"{{"domain": "mixed", "n_dialogues": {n}, "seed": {seed}}}"#),
    )
    .unwrap();
    path
}

fn synth_corpus(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let profile = write_profile(dir, n, seed);
    let corpus = dir.join("corpus.json");
    let out = run_in(
        dir,
        &[
            "synth",
            "--profile",
            profile.to_str().unwrap(),
            "--out",
            corpus.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    corpus
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["run", "--config", "nope.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("E_CONFIG:"), "{}", stderr(&out));
}

#[test]
fn validate_reports_clean_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 5, 3);
    let out = run_in(dir.path(), &["validate", corpus.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("validation: clean"));
}

#[test]
fn validate_flags_corrupted_corpus_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 3, 3);
    // Inject an out-of-scene gold id.
    let text = std::fs::read_to_string(&corpus).unwrap();
    let corrupted = text.replacen("\"user_refs\": [", "\"user_refs\": [4040, ", 1);
    assert_ne!(
        text, corrupted,
        "fixture has at least one non-empty gold set"
    );
    std::fs::write(&corpus, corrupted).unwrap();

    let out = run_in(dir.path(), &["validate", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).starts_with("E_DATA:"), "{}", stderr(&out));
    assert!(stdout(&out).contains("finding:"));
}

#[test]
fn zero_shot_prompt_has_no_example_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 3, 9);
    let out = run_in(
        dir.path(),
        &[
            "render-prompt",
            "--corpus",
            corpus.to_str().unwrap(),
            "--unit",
            "synth_fashion_00000:0",
            "--mode",
            "zero-shot",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(!text.contains("Example 1:"), "{text}");
    assert!(text.contains("--- system ---"));
    assert!(text.contains("--- user ---"));
}

#[test]
fn few_shot_prompt_has_three_examples_and_ablation_strips_markers() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 3, 9);
    let base = [
        "render-prompt",
        "--corpus",
        corpus.to_str().unwrap(),
        "--unit",
        "synth_furniture_00001:1",
        "--mode",
        "few-shot",
    ];
    let out = run_in(dir.path(), &base);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for i in 1..=3 {
        assert!(text.contains(&format!("Example {i}:")));
    }

    let mut with_ablation = base.to_vec();
    with_ablation.extend(["--ablation", "no-object-references"]);
    let out = run_in(dir.path(), &with_ablation);
    let text = stdout(&out);
    let user_section = text
        .split("--- user ---")
        .nth(1)
        .expect("user section present");
    assert!(!user_section.contains("<SOM>"), "{user_section}");
}

#[test]
fn oracle_run_then_report_shows_perfect_f1() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 10, 21);
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"corpus_path": {:?}, "mode": "few-shot", "ablation": "all-info",
                "style": "full_nl", "backend": {{"type": "oracle"}},
                "output_dir": "out", "parallelism": 2}}"#,
            corpus.to_str().unwrap()
        ),
    )
    .unwrap();

    let out = run_in(dir.path(), &["run", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("effective config:"));
    assert!(text.contains("f1: 100.00"), "{text}");

    let summary = dir.path().join("out/summary.json");
    let out = run_in(
        dir.path(),
        &[
            "report",
            "--inputs",
            summary.to_str().unwrap(),
            "--kind",
            "counts",
            "--format",
            "csv",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("run,avg predicted,avg correct"), "{text}");

    let out = run_in(dir.path(), &["rescore", "out/records.jsonl", "--strict"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("f1: 100.00"));
}

#[test]
fn delta_report_needs_exactly_two_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 4, 2);
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"corpus_path": {:?}, "mode": "zero-shot", "ablation": "all-info",
                "style": "structured_raw", "backend": {{"type": "heuristic"}},
                "output_dir": "out", "parallelism": 1}}"#,
            corpus.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = run_in(dir.path(), &["run", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));

    let summary = dir.path().join("out/summary.json");
    let out = run_in(
        dir.path(),
        &[
            "report",
            "--inputs",
            summary.to_str().unwrap(),
            "--kind",
            "delta",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("E_CONFIG:"));
}

#[test]
fn export_sft_writes_header_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 6, 17);
    let out_path = dir.path().join("sft.jsonl");
    let out = run_in(
        dir.path(),
        &[
            "export-sft",
            "--corpus",
            corpus.to_str().unwrap(),
            "--domain",
            "furniture",
            "--out",
            out_path.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let first = text.lines().next().unwrap();
    assert!(first.contains("\"rank\":4"));
    assert!(first.contains("\"alpha\":8.0"));
    assert!(first.contains("\"dropout\":0.05"));
    assert!(text.lines().count() > 1);
}

#[test]
fn run_flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 6, 27);
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"corpus_path": {:?}, "mode": "few-shot", "ablation": "all-info",
                "style": "full_nl", "backend": {{"type": "oracle"}},
                "output_dir": "out", "parallelism": 1}}"#,
            corpus.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--mode",
            "zero-shot",
            "--max-units",
            "3",
            "--output-dir",
            "out2",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("\"mode\":\"zero-shot\""), "{text}");
    assert!(text.contains("units: 3"), "{text}");
    assert!(dir.path().join("out2/records.jsonl").exists());
}
