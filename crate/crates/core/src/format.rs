//! The four-marker trajectory format.
//!
//! A trajectory is a thought section followed by a solution section, each
//! wrapped in begin/end markers. Parsing tolerates text outside the marked
//! spans (chat preambles, trailing notes); rendering always produces the
//! canonical form: a single `\n` after opening markers and before closing
//! markers, thought steps joined by exactly one blank line, and one blank
//! line between the two sections.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

/// Opens the thought section.
pub const BEGIN_THOUGHT: &str = "<|begin_of_thought|>";
/// Closes the thought section.
pub const END_THOUGHT: &str = "<|end_of_thought|>";
/// Opens the solution section.
pub const BEGIN_SOLUTION: &str = "<|begin_of_solution|>";
/// Closes the solution section.
pub const END_SOLUTION: &str = "<|end_of_solution|>";

/// Instruction preamble prepended to every generation prompt.
///
/// The wording is load-bearing: the seed demonstration data was produced
/// against this exact text (typos included), so it must never be paraphrased
/// or reflowed.
pub const REASONING_PROMPT: &str = r#"Your role as an assistant involves thoroughly exploring questions through a systematic long thinking process before providing the final precise and accurate solutions. This requires engaging in a comprehensive cycle of analysis, summarizing, exploration, reassessment, reflection, backtracing, and iteration to develop well-considered thinking process.

Please structure your response into two main sections: Thought and Solution.

In the Thought section, detail your reasoning process using the specified format:
'''
<|begin_of_thought|>
{thought with steps separated with "\n\n"}
<|end_of_thought|>
'''

Each step should include detailed considerations such as analisying questions, summarizing relevant findings, brainstorming new ideas, verifying the accuracy of the current steps, refining any errors, and revisiting previous steps.

In the Solution section, based on various attempts, explorations, and reflections from the Thought section, systematically present the final solution that you deem correct. The solution should remain a logical, accurate, concise expression style and detail necessary step needed to reach the conclusion, formatted as follows:
'''
<|begin_of_solution|>
{final formatted, precise, and clear solution}
<|end_of_solution|>
'''

Now, try to solve the following question through the above guidelines:"#;

/// The four section markers, in the order they must appear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    BeginThought,
    EndThought,
    BeginSolution,
    EndSolution,
}

impl Marker {
    /// All markers in required order of appearance.
    pub const ALL: [Marker; 4] = [
        Marker::BeginThought,
        Marker::EndThought,
        Marker::BeginSolution,
        Marker::EndSolution,
    ];

    /// The literal marker token.
    pub fn token(self) -> &'static str {
        match self {
            Marker::BeginThought => BEGIN_THOUGHT,
            Marker::EndThought => END_THOUGHT,
            Marker::BeginSolution => BEGIN_SOLUTION,
            Marker::EndSolution => END_SOLUTION,
        }
    }
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// The two marked sections of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Thought,
    Solution,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Section::Thought => f.write_str("thought"),
            Section::Solution => f.write_str("solution"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("missing marker {0}")]
    MissingMarker(Marker),
    #[error("duplicate marker {0}")]
    DuplicateMarker(Marker),
    #[error("markers out of order")]
    MarkerOrderViolation,
    #[error("{0} section is empty")]
    EmptySection(Section),
    #[error("invariant violation: {0}")]
    InvariantViolation(&'static str),
    #[error("problem text is empty")]
    EmptyProblem,
    #[error("input text is empty")]
    EmptyInput,
}

/// A long-form reasoning trajectory: ordered thought steps plus a solution.
///
/// Equality is structural — `thought_steps` and `solution` only. `raw_text`
/// preserves the exact source string a trajectory was parsed from (including
/// any text outside the marked spans) and is ignored by comparisons and
/// dropped on rendering.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub thought_steps: Vec<String>,
    pub solution: String,
    pub raw_text: Option<String>,
}

impl PartialEq for Trajectory {
    fn eq(&self, other: &Self) -> bool {
        self.thought_steps == other.thought_steps && self.solution == other.solution
    }
}

impl Eq for Trajectory {}

impl Trajectory {
    /// Builds a trajectory, trimming each step and the solution and checking
    /// the format invariants (non-empty, marker-free, no blank line inside a
    /// step).
    pub fn new<S: AsRef<str>>(thought_steps: &[S], solution: &str) -> Result<Self, FormatError> {
        let steps: Vec<String> = thought_steps
            .iter()
            .map(|s| s.as_ref().trim().to_string())
            .collect();
        let trajectory = Trajectory {
            thought_steps: steps,
            solution: solution.trim().to_string(),
            raw_text: None,
        };
        trajectory.check()?;
        Ok(trajectory)
    }

    /// Verifies the invariants that make canonical rendering round-trip.
    pub fn check(&self) -> Result<(), FormatError> {
        if self.thought_steps.is_empty() {
            return Err(FormatError::EmptySection(Section::Thought));
        }
        for step in &self.thought_steps {
            if step.is_empty() {
                return Err(FormatError::InvariantViolation("empty thought step"));
            }
            if step.trim() != step {
                return Err(FormatError::InvariantViolation(
                    "thought step has surrounding whitespace",
                ));
            }
            if step.contains("\n\n") {
                return Err(FormatError::InvariantViolation(
                    "thought step contains a blank line",
                ));
            }
            if contains_marker(step) {
                return Err(FormatError::InvariantViolation(
                    "thought step contains a marker token",
                ));
            }
        }
        if self.solution.is_empty() {
            return Err(FormatError::EmptySection(Section::Solution));
        }
        if self.solution.trim() != self.solution {
            return Err(FormatError::InvariantViolation(
                "solution has surrounding whitespace",
            ));
        }
        if contains_marker(&self.solution) {
            return Err(FormatError::InvariantViolation(
                "solution contains a marker token",
            ));
        }
        Ok(())
    }

    /// The thought section body: steps joined by one blank line.
    pub fn thought_text(&self) -> String {
        self.thought_steps.join("\n\n")
    }

    /// Character count of the thought section body.
    pub fn thought_chars(&self) -> usize {
        let sep_chars = 2 * self.thought_steps.len().saturating_sub(1);
        self.thought_steps
            .iter()
            .map(|s| s.chars().count())
            .sum::<usize>()
            + sep_chars
    }
}

fn contains_marker(text: &str) -> bool {
    Marker::ALL.iter().any(|m| text.contains(m.token()))
}

/// Parses a trajectory out of `text`.
///
/// Succeeds iff the text contains exactly one of each marker, in order, with
/// non-whitespace content inside both spans. The thought span is split into
/// steps on blank lines; whatever surrounds the marked spans is kept in
/// `raw_text` but otherwise ignored.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, FormatError> {
    let mut positions = [0usize; 4];
    for (i, marker) in Marker::ALL.iter().enumerate() {
        let mut found = text.match_indices(marker.token());
        let first = found
            .next()
            .ok_or(FormatError::MissingMarker(*marker))?
            .0;
        if found.next().is_some() {
            return Err(FormatError::DuplicateMarker(*marker));
        }
        positions[i] = first;
    }
    if !(positions[0] < positions[1] && positions[1] < positions[2] && positions[2] < positions[3])
    {
        return Err(FormatError::MarkerOrderViolation);
    }

    let thought_span = &text[positions[0] + BEGIN_THOUGHT.len()..positions[1]];
    let solution_span = &text[positions[2] + BEGIN_SOLUTION.len()..positions[3]];
    if thought_span.trim().is_empty() {
        return Err(FormatError::EmptySection(Section::Thought));
    }
    if solution_span.trim().is_empty() {
        return Err(FormatError::EmptySection(Section::Solution));
    }

    let thought_steps: Vec<String> = thought_span
        .trim()
        .split("\n\n")
        .map(str::trim)
        .filter(|chunk| !chunk.is_empty())
        .map(ToString::to_string)
        .collect();

    Ok(Trajectory {
        thought_steps,
        solution: solution_span.trim().to_string(),
        raw_text: Some(text.to_string()),
    })
}

/// Renders a trajectory into the canonical form.
///
/// The inverse of [`parse_trajectory`] on canonical input: for any valid
/// trajectory `t`, `parse_trajectory(&render_trajectory(&t)?) == Ok(t)`.
pub fn render_trajectory(trajectory: &Trajectory) -> Result<String, FormatError> {
    trajectory.check()?;
    Ok(format!(
        "{BEGIN_THOUGHT}\n{}\n{END_THOUGHT}\n\n{BEGIN_SOLUTION}\n{}\n{END_SOLUTION}",
        trajectory.thought_text(),
        trajectory.solution,
    ))
}

/// Parses and re-renders, producing the canonical form of `text`.
///
/// Idempotent: canonicalizing a canonical string returns it unchanged.
pub fn canonicalize(text: &str) -> Result<String, FormatError> {
    render_trajectory(&parse_trajectory(text)?)
}

/// The instruction preamble used to build generation prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            template_text: REASONING_PROMPT.to_string(),
        }
    }
}

/// Builds the generation prompt for a problem: the template with the problem
/// text appended after its final line.
pub fn render_prompt(template: &PromptTemplate, problem_text: &str) -> Result<String, FormatError> {
    if problem_text.trim().is_empty() {
        return Err(FormatError::EmptyProblem);
    }
    Ok(format!("{}\n{}", template.template_text, problem_text.trim()))
}

/// The continuation fragment for solution completion: the thought section
/// rendered with its markers, followed by an opened solution marker. A
/// backend continuation appended to this fragment yields a full parseable
/// trajectory once the model closes the solution section.
pub fn solution_completion_fragment(thought_only_text: &str) -> Result<String, FormatError> {
    let thought = thought_only_text.trim();
    if thought.is_empty() {
        return Err(FormatError::EmptyInput);
    }
    Ok(format!(
        "{BEGIN_THOUGHT}\n{thought}\n{END_THOUGHT}\n\n{BEGIN_SOLUTION}\n"
    ))
}

/// Builds the full solution-completion prompt: generation prompt for the
/// problem, then the thought section with an opened solution marker, so that
/// a continuation produces only the missing solution section.
pub fn build_solution_completion(
    template: &PromptTemplate,
    problem_text: &str,
    thought_only_text: &str,
) -> Result<String, FormatError> {
    let prompt = render_prompt(template, problem_text)?;
    let fragment = solution_completion_fragment(thought_only_text)?;
    Ok(format!("{prompt}\n\n{fragment}"))
}

/// Renders just the thought section of a trajectory, ending exactly at the
/// closing thought marker. Used when aligning on thought content alone.
pub fn truncate_to_thought(trajectory: &Trajectory) -> Result<String, FormatError> {
    trajectory.check()?;
    Ok(format!(
        "{BEGIN_THOUGHT}\n{}\n{END_THOUGHT}",
        trajectory.thought_text()
    ))
}
