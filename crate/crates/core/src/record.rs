//! Trajectory records: one generated solution attempt for one problem,
//! together with its verdict and generation provenance. Records are the unit
//! stored in pools, filtered, selected into datasets, and emitted for
//! training.

use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::format::{parse_trajectory, Trajectory};
use crate::util::sha_hex;
use crate::verify::{Verdict, VerdictReason};

/// Where a record's trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Imported from a teacher dump (first teacher).
    DistilledR1,
    /// Imported from a teacher dump (second teacher).
    DistilledQwq,
    /// Generated by an exploration rollout against the policy backend.
    Explored,
}

impl Origin {
    /// Stable lowercase name, matching the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            Origin::DistilledR1 => "distilled_r1",
            Origin::DistilledQwq => "distilled_qwq",
            Origin::Explored => "explored",
        }
    }

    /// Whether the record was imported rather than generated in-house.
    pub fn is_distilled(self) -> bool {
        matches!(self, Origin::DistilledR1 | Origin::DistilledQwq)
    }
}

impl core::fmt::Display for Origin {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Generation metadata carried on every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: Origin,
    /// Identifier of the model or backend that produced the text.
    pub model_ref: String,
    /// 0 for distilled seed data, >= 1 for exploration rounds.
    pub iteration: u32,
    /// Position of this rollout within its problem's attempt stream.
    pub rollout_index: u32,
    /// Sampling temperature used for generation.
    pub temperature: f64,
    /// RFC 3339 UTC creation time. Unset for deterministic runs so reruns
    /// produce byte-identical records.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp: Option<String>,
}

impl Provenance {
    /// Provenance for an imported record (iteration 0).
    pub fn distilled(origin: Origin, model_ref: &str) -> Self {
        Provenance {
            origin,
            model_ref: model_ref.to_string(),
            iteration: 0,
            rollout_index: 0,
            temperature: 0.0,
            timestamp: None,
        }
    }

    /// Provenance for an exploration rollout.
    pub fn explored(model_ref: &str, iteration: u32, rollout_index: u32, temperature: f64) -> Self {
        Provenance {
            origin: Origin::Explored,
            model_ref: model_ref.to_string(),
            iteration,
            rollout_index,
            temperature,
            timestamp: None,
        }
    }
}

/// Why a record fails its consistency check.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("record_id does not match the hash of (problem_id, text)")]
    IdMismatch,
    #[error("distilled records must carry iteration 0, explored records iteration >= 1")]
    IterationOriginMismatch,
    #[error("a correct verdict must carry reason `matched` and an extracted answer")]
    VerdictInconsistent,
}

/// One generated trajectory for one problem.
///
/// `text` holds the canonical four-marker rendering when the response
/// parsed, and the raw response otherwise (in which case the verdict reason
/// is `unparseable`). Incorrect records are kept: they are the negative side
/// of preference pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// Content id: hash of (problem_id, text). Identical regenerations
    /// collide on purpose, which makes pool appends idempotent.
    pub record_id: String,
    pub problem_id: String,
    pub text: String,
    pub verdict: Verdict,
    /// Perplexity of the generated text under the generating model, when
    /// the backend reported token log-probabilities.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perplexity: Option<f64>,
    pub provenance: Provenance,
    /// Set on code-domain records: the stored verdict is a provisional
    /// string-level comparison and final judgment needs an execution
    /// sandbox this pipeline does not include.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub requires_external_verdict: bool,
}

/// Content id for a record: hex SHA-256 over the problem id and the exact
/// stored text.
pub fn record_id(problem_id: &str, text: &str) -> String {
    sha_hex(&[problem_id.as_bytes(), text.as_bytes()])
}

impl TrajectoryRecord {
    /// Builds a record, deriving its content id.
    pub fn new(
        problem_id: &str,
        text: &str,
        verdict: Verdict,
        perplexity: Option<f64>,
        provenance: Provenance,
    ) -> Self {
        TrajectoryRecord {
            record_id: record_id(problem_id, text),
            problem_id: problem_id.to_string(),
            text: text.to_string(),
            verdict,
            perplexity,
            provenance,
            requires_external_verdict: false,
        }
    }

    /// Validates internal consistency: the id matches the content hash, the
    /// origin agrees with the iteration number, and a correct verdict is
    /// backed by a matched extraction.
    pub fn check(&self) -> Result<(), RecordError> {
        if self.record_id != record_id(&self.problem_id, &self.text) {
            return Err(RecordError::IdMismatch);
        }
        let distilled = self.provenance.origin.is_distilled();
        if distilled != (self.provenance.iteration == 0) {
            return Err(RecordError::IterationOriginMismatch);
        }
        if self.verdict.correct
            && (self.verdict.reason != VerdictReason::Matched || self.verdict.extracted.is_none())
        {
            return Err(RecordError::VerdictInconsistent);
        }
        Ok(())
    }

    /// Parses the stored text, if it is a well-formed trajectory.
    pub fn parsed(&self) -> Option<Trajectory> {
        parse_trajectory(&self.text).ok()
    }

    /// Length of the thought section in characters, if the text parses.
    pub fn thought_chars(&self) -> Option<usize> {
        self.parsed().map(|t| t.thought_chars())
    }
}
