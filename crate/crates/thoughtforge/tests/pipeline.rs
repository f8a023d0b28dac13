//! End-to-end checks of the command-line interface: each test drives the
//! compiled binary through a scratch pool directory and asserts on exit
//! codes, printed lines, and the files left on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use thoughtforge::ingest::{DumpRow, ProblemSpec};
use thoughtforge_core::corpus::{Difficulty, Domain};
use thoughtforge_core::format::{render_trajectory, Trajectory, BEGIN_SOLUTION, END_SOLUTION};
use thoughtforge_core::verify::GroundTruth;

fn run(dir: &Path, args: &[&str]) -> Output {
    let pool = dir.join("pool");
    let config = dir.join("config.toml");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_thoughtforge"));
    cmd.arg("--pool").arg(&pool);
    if config.exists() {
        cmd.arg("--config").arg(&config);
    }
    cmd.args(args);
    cmd.output().expect("binary runs")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_ok(output: &Output, context: &str) {
    assert_eq!(
        output.status.code(),
        Some(0),
        "{context} failed\nstdout: {}\nstderr: {}",
        stdout_of(output),
        stderr_of(output)
    );
}

const SIMULATED_CONFIG: &str = r#"
run_seed = 4242
max_iterations = 6

[backend]
kind = "simulated"

[backend.simulator]
skill_hard = 0.6
skill_normal = 1.0

[mix]
total = 3
allow_shortfall = false

[mix.weights]
"math/normal" = 1.0

[explore]
rollouts_per_problem = 3
threads = 2
"#;

fn write_config(dir: &Path) {
    fs::write(dir.join("config.toml"), SIMULATED_CONFIG).unwrap();
}

/// Three normal problems (teacher material) and four hard ones (the
/// exploration frontier), written as an ingestable JSONL file.
fn write_problem_file(dir: &Path) -> PathBuf {
    let mut lines = String::new();
    for i in 0..7 {
        let (difficulty, tier) = if i < 3 {
            (Difficulty::Normal, "routine")
        } else {
            (Difficulty::Hard, "competition")
        };
        let spec = ProblemSpec {
            text: format!("Evaluate {tier} quantity number {i} of the benchmark set."),
            domain: Domain::Math,
            difficulty,
            answer: GroundTruth::numeric(&(i + 40).to_string()),
            source: Some("pipeline-test".to_owned()),
        };
        lines.push_str(&serde_json::to_string(&spec).unwrap());
        lines.push('\n');
    }
    let path = dir.join("problems.jsonl");
    fs::write(&path, lines).unwrap();
    path
}

/// The stored problem set, keyed by id, read back from the pool directory
/// the way any other consumer would.
fn stored_problems(dir: &Path) -> BTreeMap<String, serde_json::Value> {
    let text = fs::read_to_string(dir.join("pool/problems.jsonl")).unwrap();
    text.lines()
        .map(|line| {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            (value["id"].as_str().unwrap().to_owned(), value)
        })
        .collect()
}

/// A long, repetition-free thought: every word is unique to its position.
fn teacher_thought(tag: usize) -> Vec<String> {
    (0..8)
        .map(|step| {
            let words: Vec<String> = (0..15)
                .map(|k| format!("term{tag}x{step}y{k}"))
                .collect();
            format!("Step {}: {}.", step + 1, words.join(" "))
        })
        .collect()
}

fn teacher_text(tag: usize, answer: &str) -> String {
    let solution = format!("Carrying the reduction through gives the value.\n\nThe final answer is \\boxed{{{answer}}}");
    let trajectory = Trajectory::new(&teacher_thought(tag), &solution).unwrap();
    render_trajectory(&trajectory).unwrap()
}

/// One correct teacher row per normal problem, written as a dump file.
fn write_dump_file(dir: &Path) -> PathBuf {
    let mut lines = String::new();
    for (tag, (id, problem)) in stored_problems(dir)
        .iter()
        .filter(|(_, p)| p["difficulty"] == "normal")
        .enumerate()
    {
        let answer = problem["answer"]["value"].as_str().unwrap();
        let row = DumpRow {
            problem_id: id.clone(),
            text: teacher_text(tag, answer),
            model_ref: None,
        };
        lines.push_str(&serde_json::to_string(&row).unwrap());
        lines.push('\n');
    }
    let path = dir.join("dump.jsonl");
    fs::write(&path, lines).unwrap();
    path
}

/// Runs ingest → mix → iterate in `dir`, asserting every step.
fn run_lifecycle(dir: &Path) {
    write_config(dir);
    let problems = write_problem_file(dir);
    let out = run(dir, &["ingest", "--problems", problems.to_str().unwrap()]);
    assert_ok(&out, "ingest --problems");
    assert!(stdout_of(&out).contains("problems: 7 added, 7 total"));

    let dump = write_dump_file(dir);
    let out = run(dir, &["ingest", "--dump", dump.to_str().unwrap()]);
    assert_ok(&out, "ingest --dump");
    let text = stdout_of(&out);
    assert!(text.contains("dump: 3 rows, 0 repaired, 3 retained, 3 appended"), "{text}");

    let out = run(dir, &["mix"]);
    assert_ok(&out, "mix");
    assert!(stdout_of(&out).contains("D0: drew 3 of 3 candidates"));

    let out = run(dir, &["iterate", "--iterations", "6"]);
    assert_ok(&out, "iterate");
    let text = stdout_of(&out);
    assert!(text.contains("D1:"), "no derived version in: {text}");
    assert!(
        text.contains("exhausted: no new correct trajectories"),
        "run did not exhaust: {text}"
    );
}

#[test]
fn the_full_lifecycle_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    run_lifecycle(dir.path());

    // The iterate rounds exported training files for each derived version.
    let sft = dir.path().join("pool/exports/D1/sft.jsonl");
    let dpo = dir.path().join("pool/exports/D1/dpo.jsonl");
    assert!(sft.exists(), "missing {}", sft.display());
    assert!(dpo.exists(), "missing {}", dpo.display());
    assert!(fs::read_to_string(&sft).unwrap().lines().count() >= 3);

    // Pool-wide and per-version statistics both render.
    let out = run(dir.path(), &["stats"]);
    assert_ok(&out, "stats");
    let text = stdout_of(&out);
    assert!(text.contains("records"), "{text}");
    assert!(text.contains("by bucket:"), "{text}");

    let out = run(dir.path(), &["stats", "--version", "D1"]);
    assert_ok(&out, "stats --version D1");
    assert!(stdout_of(&out).contains("version D1 (iteration 1, parent D0,"));

    // Selection previews without writing; emission writes where told.
    let out = run(dir.path(), &["select", "--version", "D0"]);
    assert_ok(&out, "select");
    assert!(stdout_of(&out).contains("D0: would keep 3 of 3 members"));

    let custom = dir.path().join("custom-sft.jsonl");
    let out = run(
        dir.path(),
        &["emit-sft", "--version", "D0", "--out", custom.to_str().unwrap()],
    );
    assert_ok(&out, "emit-sft");
    assert!(stdout_of(&out).contains("D0: wrote 3 rows"));
    assert_eq!(fs::read_to_string(&custom).unwrap().lines().count(), 3);

    let pairs = dir.path().join("custom-dpo.jsonl");
    let out = run(
        dir.path(),
        &["emit-dpo", "--mode", "thought_only", "--out", pairs.to_str().unwrap()],
    );
    assert_ok(&out, "emit-dpo");
    for line in fs::read_to_string(&pairs).unwrap().lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        let chosen = row["chosen"].as_str().unwrap();
        let rejected = row["rejected"].as_str().unwrap();
        assert!(!chosen.contains(BEGIN_SOLUTION) && !chosen.contains(END_SOLUTION));
        assert!(!rejected.contains(BEGIN_SOLUTION) && !rejected.contains(END_SOLUTION));
    }

    // The filter command is a dry run over the whole pool.
    let out = run(dir.path(), &["filter"]);
    assert_ok(&out, "filter");
    assert!(stdout_of(&out).contains("filter:"));
}

#[test]
fn a_finished_run_is_idempotent_and_a_zero_cap_is_a_no_op() {
    let dir = TempDir::new().unwrap();
    run_lifecycle(dir.path());
    let records = dir.path().join("pool/records.jsonl");
    let before = fs::read(&records).unwrap();

    // Rerunning after exhaustion changes nothing and reports exhaustion.
    let out = run(dir.path(), &["iterate"]);
    assert_ok(&out, "iterate rerun");
    assert!(stdout_of(&out).contains("exhausted: no new correct trajectories"));
    assert_eq!(fs::read(&records).unwrap(), before);

    // A cap of zero runs no rounds at all.
    let out = run(dir.path(), &["iterate", "--iterations", "0"]);
    assert_ok(&out, "iterate --iterations 0");
    assert!(stdout_of(&out).contains("stopped at the iteration cap (0)"));
    assert_eq!(fs::read(&records).unwrap(), before);
}

/// Every file under `root`, relative path mapped to contents.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let relative = path.strip_prefix(root).unwrap();
                files.insert(
                    relative.to_string_lossy().into_owned(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    files
}

#[test]
fn reruns_with_the_same_seed_produce_identical_artifacts() {
    let first = TempDir::new().unwrap();
    let second = TempDir::new().unwrap();
    run_lifecycle(first.path());
    run_lifecycle(second.path());

    let a = snapshot(&first.path().join("pool"));
    let b = snapshot(&second.path().join("pool"));
    let names: Vec<&String> = a.keys().collect();
    assert_eq!(names, b.keys().collect::<Vec<_>>(), "file sets differ");
    for (name, bytes) in &a {
        assert_eq!(bytes, &b[name], "{name} differs between runs");
    }
    assert!(a.contains_key("records.jsonl"));
    assert!(a.contains_key("versions/D0.json"));
    assert!(a.contains_key("versions/D1.json"));
}

#[test]
fn thought_only_rows_are_repaired_when_asked() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path());
    let problems = write_problem_file(dir.path());
    assert_ok(
        &run(dir.path(), &["ingest", "--problems", problems.to_str().unwrap()]),
        "ingest --problems",
    );

    // One row that stops after its thinking, with no solution section.
    let (id, _) = stored_problems(dir.path())
        .into_iter()
        .find(|(_, p)| p["difficulty"] == "normal")
        .unwrap();
    let row = DumpRow {
        problem_id: id,
        text: teacher_thought(9).join("\n\n"),
        model_ref: None,
    };
    let dump = dir.path().join("cut.jsonl");
    fs::write(&dump, format!("{}\n", serde_json::to_string(&row).unwrap())).unwrap();

    // Without the repair flag the row is rejected as malformed.
    let out = run(dir.path(), &["ingest", "--dump", dump.to_str().unwrap()]);
    assert_ok(&out, "ingest without repair");
    let text = stdout_of(&out);
    assert!(text.contains("1 rows, 0 repaired, 0 retained"), "{text}");

    // With it, the backend finishes the solution and the row verifies.
    let out = run(
        dir.path(),
        &["ingest", "--dump", dump.to_str().unwrap(), "--complete-solutions"],
    );
    assert_ok(&out, "ingest --complete-solutions");
    let text = stdout_of(&out);
    assert!(text.contains("1 rows, 1 repaired, 1 retained, 1 appended"), "{text}");
}

#[test]
fn bad_dump_lines_warn_without_stopping_the_ingest() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path());
    let problems = write_problem_file(dir.path());
    assert_ok(
        &run(dir.path(), &["ingest", "--problems", problems.to_str().unwrap()]),
        "ingest --problems",
    );

    let (id, problem) = stored_problems(dir.path())
        .into_iter()
        .find(|(_, p)| p["difficulty"] == "normal")
        .unwrap();
    let good = DumpRow {
        problem_id: id,
        text: teacher_text(3, problem["answer"]["value"].as_str().unwrap()),
        model_ref: None,
    };
    let unknown = DumpRow {
        problem_id: "not-a-problem".to_owned(),
        text: "irrelevant".to_owned(),
        model_ref: None,
    };
    let dump = dir.path().join("messy.jsonl");
    fs::write(
        &dump,
        format!(
            "{}\nthis line is not json\n{}\n",
            serde_json::to_string(&good).unwrap(),
            serde_json::to_string(&unknown).unwrap()
        ),
    )
    .unwrap();

    let out = run(dir.path(), &["ingest", "--dump", dump.to_str().unwrap()]);
    assert_ok(&out, "ingest of a messy dump");
    let text = stdout_of(&out);
    let warnings = stderr_of(&out);
    assert!(text.contains("2 rows, 0 repaired, 1 retained, 1 appended"), "{text}");
    assert!(warnings.contains("messy.jsonl:2"), "{warnings}");
    assert!(warnings.contains("unknown problem"), "{warnings}");
}

#[test]
fn an_empty_pool_prints_a_zero_report() {
    let dir = TempDir::new().unwrap();
    let out = run(dir.path(), &["stats"]);
    assert_ok(&out, "stats on an empty pool");
    let text = stdout_of(&out);
    assert!(text.contains("records          0"), "{text}");
    assert!(text.contains("solved problems  0 (0.0%)"), "{text}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();

    let out = run(dir.path(), &["ingest"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("nothing to ingest"));

    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1), "unknown subcommand");

    let out = run(dir.path(), &["stats", "--bogus"]);
    assert_eq!(out.status.code(), Some(1), "unknown flag");

    let out = run(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0), "--help is not an error");
    assert!(stdout_of(&out).contains("iterate"));
}

#[test]
fn data_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path());

    let out = run(dir.path(), &["stats", "--version", "D9"]);
    assert_eq!(out.status.code(), Some(2), "unknown version");
    assert!(stderr_of(&out).contains("D9"));

    let missing = dir.path().join("nope.jsonl");
    let out = run(dir.path(), &["ingest", "--problems", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "unreadable input");
    assert!(stderr_of(&out).contains("cannot read"));

    let out = run(dir.path(), &["select"]);
    assert_eq!(out.status.code(), Some(2), "select before mix");
    assert!(stderr_of(&out).contains("no dataset versions"));

    let out = run(dir.path(), &["iterate"]);
    assert_eq!(out.status.code(), Some(2), "iterate before mix");
    assert!(stderr_of(&out).contains("no seed dataset manifest"));

    // A mixture that asks for more records than exist is a data error.
    let out = run(dir.path(), &["mix"]);
    assert_eq!(out.status.code(), Some(2), "mix on an empty pool");

    fs::write(dir.path().join("config.toml"), "run_seed = [not toml").unwrap();
    let out = run(dir.path(), &["stats"]);
    assert_eq!(out.status.code(), Some(2), "unparseable config");
}

#[test]
fn a_dead_http_backend_exits_three() {
    let dir = TempDir::new().unwrap();
    // Port 9 is the discard service; nothing listens there, so every
    // connection is refused immediately.
    fs::write(
        dir.path().join("config.toml"),
        r#"
run_seed = 1

[backend]
kind = "http"
base_url = "http://127.0.0.1:9"
model = "dead"
timeout_secs = 1
max_retries = 0
"#,
    )
    .unwrap();
    let problems = write_problem_file(dir.path());
    assert_ok(
        &run(dir.path(), &["ingest", "--problems", problems.to_str().unwrap()]),
        "ingest --problems",
    );

    let pool = dir.path().join("pool");
    let config = dir.path().join("config.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_thoughtforge"))
        .arg("--pool")
        .arg(&pool)
        .arg("--config")
        .arg(&config)
        .arg("explore")
        .env("THOUGHTFORGE_API_KEY", "test-key")
        .output()
        .expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(3),
        "stdout: {}\nstderr: {}",
        stdout_of(&out),
        stderr_of(&out)
    );
    assert!(stderr_of(&out).contains("every rollout stream failed"));
}
