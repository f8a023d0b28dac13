//! Training-file emission: JSONL writers for supervised rows and preference
//! pairs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thoughtforge_core::corpus::Problem;
use thoughtforge_core::format::{render_prompt, FormatError, PromptTemplate};
use thoughtforge_core::record::TrajectoryRecord;
use thoughtforge_core::refine::PreferencePair;

use crate::stats::LengthStats;

/// Failures while writing training files.
#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("record {record_id} references problem {problem_id}, which is not in the problem set")]
    UnknownProblem {
        record_id: String,
        problem_id: String,
    },
    #[error("cannot build prompt: {0}")]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot serialize row: {0}")]
    Json(#[from] serde_json::Error),
}

/// One supervised fine-tuning example: the generation prompt and the full
/// four-marker trajectory to imitate, traceable back to its pool record.
#[derive(Serialize)]
struct SftRow<'a> {
    prompt: &'a str,
    response: &'a str,
    record_id: &'a str,
}

/// One preference pair, reduced to the stable training schema. The richer
/// bookkeeping on [`PreferencePair`] stays internal; consumers of the file
/// get exactly these six fields.
#[derive(Serialize)]
struct DpoRow<'a> {
    prompt: &'a str,
    chosen: &'a str,
    rejected: &'a str,
    sft_target: &'a str,
    mode: &'static str,
    problem_id: &'a str,
}

/// Writes one supervised row per record and returns the thought-length
/// distribution of what was written.
pub fn emit_sft(
    records: &[TrajectoryRecord],
    problems: &BTreeMap<String, Problem>,
    template: &PromptTemplate,
    out: &mut dyn Write,
) -> Result<LengthStats, EmitError> {
    let mut lengths = Vec::with_capacity(records.len());
    for rec in records {
        let problem =
            problems
                .get(&rec.problem_id)
                .ok_or_else(|| EmitError::UnknownProblem {
                    record_id: rec.record_id.clone(),
                    problem_id: rec.problem_id.clone(),
                })?;
        let prompt = render_prompt(template, &problem.text)?;
        let row = SftRow {
            prompt: &prompt,
            response: &rec.text,
            record_id: &rec.record_id,
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
        lengths.push(rec.thought_chars().unwrap_or(0));
    }
    Ok(LengthStats::of(lengths))
}

/// Writes one preference row per pair; returns how many were written.
pub fn emit_dpo(pairs: &[PreferencePair], out: &mut dyn Write) -> Result<usize, EmitError> {
    for pair in pairs {
        let row = DpoRow {
            prompt: &pair.prompt,
            chosen: &pair.chosen,
            rejected: &pair.rejected,
            sft_target: &pair.sft_target,
            mode: pair.mode.name(),
            problem_id: &pair.problem_id,
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use thoughtforge_core::corpus::{Difficulty, Domain};
    use thoughtforge_core::format::{render_trajectory, Trajectory};
    use thoughtforge_core::record::{Origin, Provenance};
    use thoughtforge_core::refine::PairMode;
    use thoughtforge_core::verify::{GroundTruth, Verdict};

    fn fixture() -> (Problem, TrajectoryRecord) {
        let problem = Problem::new(
            "What is three plus four?",
            Domain::Math,
            Difficulty::Normal,
            GroundTruth::numeric("7"),
            "unit-test",
        );
        let traj = Trajectory::new(
            &["Adding the two numbers directly.", "Three and four make seven."],
            "The final answer is \\boxed{7}",
        )
        .unwrap();
        let record = TrajectoryRecord::new(
            &problem.id,
            &render_trajectory(&traj).unwrap(),
            Verdict::matched("7"),
            Some(1.2),
            Provenance::distilled(Origin::DistilledR1, "teacher"),
        );
        (problem, record)
    }

    #[test]
    fn sft_rows_carry_prompt_response_and_record_id() {
        let (problem, record) = fixture();
        let problems: BTreeMap<String, Problem> =
            [(problem.id.clone(), problem.clone())].into_iter().collect();
        let template = PromptTemplate::default();
        let mut buf = Vec::new();
        let stats = emit_sft(
            std::slice::from_ref(&record),
            &problems,
            &template,
            &mut buf,
        )
        .unwrap();
        assert_eq!(stats.count, 1);

        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(
            row["prompt"],
            render_prompt(&template, &problem.text).unwrap()
        );
        assert_eq!(row["response"], record.text);
        assert_eq!(row["record_id"], record.record_id);
    }

    #[test]
    fn unknown_problems_are_an_error() {
        let (_, record) = fixture();
        let problems = BTreeMap::new();
        let mut buf = Vec::new();
        let err = emit_sft(
            std::slice::from_ref(&record),
            &problems,
            &PromptTemplate::default(),
            &mut buf,
        )
        .unwrap_err();
        assert!(matches!(err, EmitError::UnknownProblem { .. }));
    }

    #[test]
    fn dpo_rows_expose_exactly_the_stable_fields() {
        let pair = PreferencePair {
            problem_id: "p1".into(),
            prompt: "prompt text".into(),
            chosen: "good".into(),
            rejected: "bad".into(),
            sft_target: "good".into(),
            mode: PairMode::Full,
            chosen_record_id: "c".into(),
            rejected_record_id: "r".into(),
            chosen_perplexity: 2.0,
            rejected_perplexity: 1.0,
        };
        let mut buf = Vec::new();
        assert_eq!(emit_dpo(std::slice::from_ref(&pair), &mut buf).unwrap(), 1);
        let row: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let keys: Vec<&String> = row.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            ["chosen", "mode", "problem_id", "prompt", "rejected", "sft_target"]
        );
        assert_eq!(row["mode"], "full");
    }
}
