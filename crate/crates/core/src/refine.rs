//! Dataset refinement: selecting which correct trajectories feed supervised
//! fine-tuning, and pairing correct against incorrect trajectories for
//! preference optimization.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::corpus::{language_mix_score, repetition_score, Problem};
use crate::format::{render_prompt, truncate_to_thought, PromptTemplate, Trajectory};
use crate::record::TrajectoryRecord;

/// How perplexity orders candidate records within one problem.
///
/// `Highest` prefers the trajectory the generating model found most
/// surprising — the longest-shot solve — which concentrates training signal
/// on reasoning the model does not already do confidently. `None` disables
/// perplexity ranking and falls back to record-id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplRank {
    Highest,
    None,
}

/// Filters and ranking applied when selecting records for supervised
/// fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionPolicy {
    /// Minimum thought-section length in characters.
    pub min_length: usize,
    /// n-gram order for the repetition screen.
    pub repetition_n: usize,
    /// Drop candidates whose repetition score exceeds this.
    pub repetition_threshold: f64,
    /// Drop candidates whose minority-script fraction exceeds this.
    pub language_mix_threshold: f64,
    pub ppl_rank_for_sft: PplRank,
    /// Records kept per problem. 0 selects nothing.
    pub per_problem_cap: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy {
            min_length: 500,
            repetition_n: 8,
            repetition_threshold: 0.25,
            language_mix_threshold: 0.05,
            ppl_rank_for_sft: PplRank::Highest,
            per_problem_cap: 1,
        }
    }
}

/// Supplies perplexity for records that do not carry one, typically by
/// scoring the text under a backend.
pub trait RecordScorer {
    fn perplexity_of(&self, record: &TrajectoryRecord) -> Result<f64, BackendError>;
}

/// Failures during selection and pairing.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RefineError {
    #[error("record {record_id} has no perplexity and no scorer is available")]
    ScoringUnavailable { record_id: String },
    #[error("scoring record {record_id} failed: {source}")]
    ScoringFailed {
        record_id: String,
        source: BackendError,
    },
    #[error("record {record_id} references problem {problem_id}, which is not in the problem set")]
    UnknownProblem {
        record_id: String,
        problem_id: String,
    },
}

fn resolve_perplexity(
    record: &TrajectoryRecord,
    scorer: Option<&dyn RecordScorer>,
) -> Result<f64, RefineError> {
    if let Some(ppl) = record.perplexity {
        return Ok(ppl);
    }
    match scorer {
        Some(scorer) => scorer.perplexity_of(record).map_err(|source| {
            RefineError::ScoringFailed {
                record_id: record.record_id.clone(),
                source,
            }
        }),
        None => Err(RefineError::ScoringUnavailable {
            record_id: record.record_id.clone(),
        }),
    }
}

/// Orders two (perplexity, record id) keys descending by perplexity with
/// ties broken by record id ascending, so ranking is total and stable.
fn ppl_desc_then_id(a: &(f64, &TrajectoryRecord), b: &(f64, &TrajectoryRecord)) -> core::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(core::cmp::Ordering::Equal)
        .then_with(|| a.1.record_id.cmp(&b.1.record_id))
}

/// Selects records for supervised fine-tuning.
///
/// A candidate must be correct, well-formed, long enough, and clean under
/// the repetition and language screens. Within each problem, candidates are
/// ranked (highest perplexity first under [`PplRank::Highest`], record id
/// otherwise) and the top `per_problem_cap` survive. Output is sorted by
/// (problem id, rank), so the result depends only on the record set, never
/// on input order.
pub fn select_sft(
    records: &[TrajectoryRecord],
    policy: &SelectionPolicy,
    scorer: Option<&dyn RecordScorer>,
) -> Result<Vec<TrajectoryRecord>, RefineError> {
    let mut by_problem: BTreeMap<&str, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for rec in records {
        if !rec.verdict.correct {
            continue;
        }
        let Some(traj) = rec.parsed() else { continue };
        if traj.thought_chars() < policy.min_length {
            continue;
        }
        if repetition_score(&rec.text, policy.repetition_n) > policy.repetition_threshold {
            continue;
        }
        if language_mix_score(&rec.text) > policy.language_mix_threshold {
            continue;
        }
        by_problem.entry(rec.problem_id.as_str()).or_default().push(rec);
    }

    let mut selected: Vec<TrajectoryRecord> = Vec::new();
    for (_, candidates) in by_problem {
        let mut ranked: Vec<(f64, &TrajectoryRecord)> = Vec::with_capacity(candidates.len());
        for rec in candidates {
            let key = match policy.ppl_rank_for_sft {
                PplRank::Highest => resolve_perplexity(rec, scorer)?,
                PplRank::None => 0.0,
            };
            ranked.push((key, rec));
        }
        ranked.sort_by(ppl_desc_then_id);
        selected.extend(
            ranked
                .into_iter()
                .take(policy.per_problem_cap)
                .map(|(_, rec)| rec.clone()),
        );
    }
    Ok(selected)
}

/// What the paired texts contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Chosen and rejected carry the full four-marker trajectory.
    Full,
    /// Chosen and rejected carry only the thought section; the full chosen
    /// trajectory still rides along as `sft_target`.
    ThoughtOnly,
}

impl PairMode {
    /// Stable lowercase name, matching the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            PairMode::Full => "full",
            PairMode::ThoughtOnly => "thought_only",
        }
    }
}

impl core::fmt::Display for PairMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// One preference pair for a problem: a correct trajectory preferred over an
/// incorrect one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub problem_id: String,
    /// The generation prompt both texts answer.
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    /// Full canonical chosen trajectory, regardless of mode, so the pair can
    /// double as supervised data.
    pub sft_target: String,
    pub mode: PairMode,
    pub chosen_record_id: String,
    pub rejected_record_id: String,
    pub chosen_perplexity: f64,
    pub rejected_perplexity: f64,
}

/// Builds at most one preference pair per problem.
///
/// Chosen is the correct trajectory with the highest perplexity (the
/// hardest-won solve); rejected is the incorrect but well-formed trajectory
/// with the lowest perplexity (the most confidently wrong one). Ties break
/// toward the smaller record id. Problems missing either side yield no
/// pair. Output is sorted by problem id, so the result depends only on the
/// record set.
pub fn make_dpo_pairs(
    records: &[TrajectoryRecord],
    problems: &BTreeMap<String, Problem>,
    template: &PromptTemplate,
    mode: PairMode,
    scorer: Option<&dyn RecordScorer>,
) -> Result<Vec<PreferencePair>, RefineError> {
    // (record, parsed trajectory), grouped per problem and split by verdict.
    let mut correct: BTreeMap<&str, Vec<(f64, &TrajectoryRecord, Trajectory)>> = BTreeMap::new();
    let mut incorrect: BTreeMap<&str, Vec<(f64, &TrajectoryRecord, Trajectory)>> = BTreeMap::new();
    for rec in records {
        let Some(traj) = rec.parsed() else { continue };
        let side = if rec.verdict.correct { &mut correct } else { &mut incorrect };
        let ppl = resolve_perplexity(rec, scorer)?;
        side.entry(rec.problem_id.as_str()).or_default().push((ppl, rec, traj));
    }

    let mut pairs: Vec<PreferencePair> = Vec::new();
    for (problem_id, mut winners) in correct {
        let Some(mut losers) = incorrect.remove(problem_id) else { continue };
        // Highest perplexity first; the loser list is consumed from the
        // back, so the minimum sits last.
        winners.sort_by(|a, b| ppl_desc_then_id(&(a.0, a.1), &(b.0, b.1)));
        losers.sort_by(|a, b| ppl_desc_then_id(&(a.0, a.1), &(b.0, b.1)));
        let (chosen_ppl, chosen_rec, chosen_traj) = winners.remove(0);
        let (rejected_ppl, rejected_rec, rejected_traj) = losers.pop().expect("non-empty");

        let problem = problems.get(problem_id).ok_or_else(|| RefineError::UnknownProblem {
            record_id: chosen_rec.record_id.clone(),
            problem_id: problem_id.into(),
        })?;
        let prompt = render_prompt(template, &problem.text)
            .expect("roster problems have non-empty text");
        let full_chosen = crate::format::render_trajectory(&chosen_traj)
            .expect("parsed trajectories re-render");
        let (chosen_text, rejected_text) = match mode {
            PairMode::Full => (
                full_chosen.clone(),
                crate::format::render_trajectory(&rejected_traj)
                    .expect("parsed trajectories re-render"),
            ),
            PairMode::ThoughtOnly => (
                truncate_to_thought(&chosen_traj).expect("parsed trajectories re-render"),
                truncate_to_thought(&rejected_traj).expect("parsed trajectories re-render"),
            ),
        };
        pairs.push(PreferencePair {
            problem_id: problem_id.into(),
            prompt,
            chosen: chosen_text,
            rejected: rejected_text,
            sft_target: full_chosen,
            mode,
            chosen_record_id: chosen_rec.record_id.clone(),
            rejected_record_id: rejected_rec.record_id.clone(),
            chosen_perplexity: chosen_ppl,
            rejected_perplexity: rejected_ppl,
        });
    }
    Ok(pairs)
}
