//! Corpus intake: problem statements and teacher trajectory dumps.
//!
//! Problems land in `problems.jsonl` inside the pool directory, keyed by
//! content id. Dump rows become iteration-0 records: canonicalized when they
//! parse, repaired through a solution-completion prompt when they carry only
//! a thought section and a backend is available, and kept raw (to be
//! rejected by the filter as malformed) otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thoughtforge_core::backend::{Backend, GenRequest};
use thoughtforge_core::corpus::{filter_records, Difficulty, Domain, FilterPolicy, FilterReport, Problem};
use thoughtforge_core::format::{
    build_solution_completion, canonicalize, solution_completion_fragment, PromptTemplate,
    BEGIN_THOUGHT, END_THOUGHT,
};
use thoughtforge_core::record::{Origin, Provenance, TrajectoryRecord};
use thoughtforge_core::verify::{verify_solution, GroundTruth, Verdict};

use crate::pool::{Pool, PoolError};

/// Failures while reading input files or storing their contents.
#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}:{line}: {source}")]
    BadLine {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot serialize problem set: {0}")]
    Json(#[from] serde_json::Error),
}

/// One problem statement as written in an input file; the content id is
/// derived on ingest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub text: String,
    pub domain: Domain,
    pub difficulty: Difficulty,
    pub answer: GroundTruth,
    #[serde(default)]
    pub source: Option<String>,
}

/// One teacher trajectory as written in a dump file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpRow {
    pub problem_id: String,
    pub text: String,
    /// Teacher identifier; falls back to the ingest-wide default.
    #[serde(default)]
    pub model_ref: Option<String>,
}

/// Reads a JSONL file of `T`, reporting the line number of the first bad
/// row. Blank lines are ignored.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IngestError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|source| IngestError::BadLine {
            path: path.to_path_buf(),
            line: index + 1,
            source,
        })?);
    }
    Ok(rows)
}

/// Reads a dump file leniently: rows that fail to parse are reported as
/// messages rather than aborting the ingest. Only an unreadable file is
/// fatal.
pub fn read_dump_rows(path: &Path) -> Result<(Vec<DumpRow>, Vec<String>), IngestError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    let mut complaints = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(row) => rows.push(row),
            Err(e) => complaints.push(format!("{}:{}: {e}", path.display(), index + 1)),
        }
    }
    Ok((rows, complaints))
}

/// Location of the problem set inside a pool directory.
pub fn problems_path(pool_dir: &Path) -> PathBuf {
    pool_dir.join("problems.jsonl")
}

/// Loads the stored problem set, keyed by problem id. A missing file is an
/// empty set.
pub fn load_problems(pool_dir: &Path) -> Result<BTreeMap<String, Problem>, IngestError> {
    let path = problems_path(pool_dir);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let problems: Vec<Problem> = read_jsonl(&path)?;
    Ok(problems.into_iter().map(|p| (p.id.clone(), p)).collect())
}

/// Merges problem specs into the stored set; returns (newly added, total).
/// The file is rewritten sorted by id, so its contents depend only on the
/// set of problems, never on ingest order.
pub fn ingest_problems(
    pool_dir: &Path,
    specs: &[ProblemSpec],
) -> Result<(usize, usize), IngestError> {
    let mut problems = load_problems(pool_dir)?;
    let mut added = 0;
    for spec in specs {
        let problem = Problem::new(
            &spec.text,
            spec.domain,
            spec.difficulty,
            spec.answer.clone(),
            spec.source.as_deref().unwrap_or("unspecified"),
        );
        if problems.insert(problem.id.clone(), problem).is_none() {
            added += 1;
        }
    }
    let mut out = String::new();
    for problem in problems.values() {
        out.push_str(&serde_json::to_string(problem)?);
        out.push('\n');
    }
    fs::write(problems_path(pool_dir), out)?;
    Ok((added, problems.len()))
}

/// The bare thought content of a row that stops after its thinking: a
/// marker-wrapped thought section is unwrapped, anything else is taken as
/// the thought itself.
fn bare_thought(text: &str) -> &str {
    let trimmed = text.trim();
    trimmed
        .strip_prefix(BEGIN_THOUGHT)
        .and_then(|rest| rest.strip_suffix(END_THOUGHT))
        .map(str::trim)
        .unwrap_or(trimmed)
}

/// Accounting for one dump ingest.
#[derive(Debug)]
pub struct IngestSummary {
    pub rows: usize,
    /// Thought-only rows completed through the backend.
    pub repaired: usize,
    pub retained: usize,
    /// Records actually new to the pool (replays append nothing).
    pub appended: usize,
    /// Per-row problems that did not stop the ingest (unknown problem ids).
    pub skipped: Vec<String>,
    pub report: FilterReport,
}

/// Ingests teacher trajectories as iteration-0 records: canonicalize,
/// verify, filter, append. Rows referencing unknown problems are skipped
/// and reported in the summary, not fatal.
pub fn ingest_dump(
    pool: &mut Pool,
    problems: &BTreeMap<String, Problem>,
    rows: &[DumpRow],
    origin: Origin,
    default_model_ref: &str,
    filter: &FilterPolicy,
    repair_backend: Option<&dyn Backend>,
) -> Result<IngestSummary, IngestError> {
    let template = PromptTemplate::default();
    let mut candidates = Vec::with_capacity(rows.len());
    let mut repaired = 0;
    let mut skipped = Vec::new();
    for (index, row) in rows.iter().enumerate() {
        let Some(problem) = problems.get(&row.problem_id) else {
            skipped.push(format!(
                "row {}: unknown problem {}",
                index + 1,
                row.problem_id
            ));
            continue;
        };
        let mut text = row.text.clone();
        if canonicalize(&text).is_err() {
            if let Some(backend) = repair_backend {
                // The row ends at the thought; ask the backend to finish
                // the solution section and stitch the halves together. A
                // repair only counts if the result actually parses.
                let thought = bare_thought(&text);
                if let (Ok(prompt), Ok(fragment)) = (
                    build_solution_completion(&template, &problem.text, thought),
                    solution_completion_fragment(thought),
                ) {
                    if let Ok(generated) = backend.generate(&GenRequest::new(&prompt)) {
                        let stitched = format!("{fragment}{}", generated.text);
                        if canonicalize(&stitched).is_ok() {
                            repaired += 1;
                            text = stitched;
                        }
                    }
                }
            }
        }
        let (text, verdict) = match canonicalize(&text) {
            Ok(canonical) => {
                let verdict = verify_solution(&canonical, &problem.answer);
                (canonical, verdict)
            }
            // Kept raw so the filter report counts it as malformed.
            Err(_) => (text, Verdict::unparseable()),
        };
        let model_ref = row.model_ref.as_deref().unwrap_or(default_model_ref);
        let mut record = TrajectoryRecord::new(
            &problem.id,
            &text,
            verdict,
            None,
            Provenance::distilled(origin, model_ref),
        );
        record.requires_external_verdict = problem.domain == Domain::Code;
        candidates.push(record);
    }
    let (retained, report) = filter_records(&candidates, filter);
    let appended = pool.append_all(&retained)?;
    Ok(IngestSummary {
        rows: rows.len(),
        repaired,
        retained: retained.len(),
        appended,
        skipped,
        report,
    })
}
