//! Text-generation backend contract, perplexity scoring, and a
//! deterministic simulated backend for tests and offline runs.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Difficulty, Problem};
use crate::format::{PromptTemplate, Trajectory, BEGIN_THOUGHT, END_SOLUTION};
use crate::util::sha_u64;
use crate::verify::GroundTruth;

/// Default generation budget, sized for long-form reasoning traces.
pub const DEFAULT_MAX_TOKENS: u32 = 32_768;

/// Default sampling temperature for exploration rollouts.
pub const DEFAULT_ROLLOUT_TEMPERATURE: f64 = 0.7;

/// A single generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    /// Generation budget in whitespace tokens (approximating model tokens).
    pub max_tokens: u32,
    /// Sampling temperature; must be finite and >= 0, where 0 means greedy.
    pub temperature: f64,
    /// Seed for reproducible sampling; backends that cannot honor it ignore
    /// it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    /// Stop sequences: generation is cut before the first occurrence.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stop: Option<Vec<String>>,
}

impl GenRequest {
    /// A greedy request with the default token budget.
    pub fn new(prompt: &str) -> Self {
        GenRequest {
            prompt: prompt.to_string(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            seed: None,
            stop: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    /// Validates the request before it is sent anywhere.
    pub fn check(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".to_owned()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens is 0".to_owned()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is not finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Generated text with optional per-token log probabilities.
///
/// When present, every log probability is <= 0 (probabilities never exceed
/// 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_logprobs: Option<Vec<f64>>,
}

/// Failures surfaced by backends.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request timed out")]
    Timeout,
    #[error("rate limited (retry-after: {retry_after_secs:?}s)")]
    RateLimited { retry_after_secs: Option<u64> },
    /// Non-success response. Transport-level failures (connection refused,
    /// DNS) are reported with status 0.
    #[error("bad response (status {status}): {body}")]
    BadResponse { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("backend does not support {0}")]
    UnsupportedCapability(&'static str),
}

/// A text-generation backend: prompted generation plus scoring of given
/// text under the model.
pub trait Backend: Send + Sync {
    /// Identifier recorded in provenance (model name or simulator tag).
    fn model_ref(&self) -> &str;

    /// Generates a continuation of `request.prompt`.
    fn generate(&self, request: &GenRequest) -> Result<ScoredText, BackendError>;

    /// Per-token log probabilities of `text` as a continuation of `prompt`.
    fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// The token sequence was empty, so perplexity is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cannot compute perplexity of an empty token sequence")]
pub struct EmptySequence;

/// Perplexity of a token sequence: `exp(-mean(log probabilities))`.
///
/// For valid inputs (all log probabilities <= 0) the result is >= 1. The
/// value depends only on the mean, so padding a sequence with copies of
/// itself does not change it.
pub fn compute_perplexity(token_logprobs: &[f64]) -> Result<f64, EmptySequence> {
    if token_logprobs.is_empty() {
        return Err(EmptySequence);
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok(Float::exp(-mean))
}

/// Seed for one rollout, derived from the run seed, the problem, and the
/// rollout's index in its problem's attempt stream. Because the index is
/// part of the derivation, raising the rollout cap replays the earlier
/// attempts identically and only appends new ones.
pub fn rollout_seed(run_seed: u64, problem_id: &str, rollout_index: u32) -> u64 {
    sha_u64(&[
        &run_seed.to_le_bytes(),
        problem_id.as_bytes(),
        &rollout_index.to_le_bytes(),
    ])
}

/// Seed for one exploration round, derived from the run seed and the
/// iteration number. A problem left unsolved by one round gets a fresh
/// attempt stream in the next instead of replaying the same failures,
/// while the run as a whole stays reproducible from the run seed alone.
pub fn round_seed(run_seed: u64, iteration: u32) -> u64 {
    sha_u64(&[&run_seed.to_le_bytes(), &iteration.to_le_bytes()])
}

// ---------------------------------------------------------------------------
// Simulated backend
// ---------------------------------------------------------------------------

/// Control knobs for [`SimulatedBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    /// Mixed into every derived stream; two simulators with different seeds
    /// disagree everywhere.
    pub seed: u64,
    /// Probability of answering a hard problem correctly.
    pub skill_hard: f64,
    /// Probability of answering a normal problem correctly.
    pub skill_normal: f64,
    /// Thought step count is uniform in `mean - spread ..= mean + spread`,
    /// floored at 1.
    pub thought_steps_mean: u32,
    pub thought_steps_spread: u32,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            seed: 0,
            skill_hard: 0.05,
            skill_normal: 0.5,
            thought_steps_mean: 10,
            thought_steps_spread: 3,
        }
    }
}

struct RosterEntry {
    difficulty: Difficulty,
    answer: GroundTruth,
}

/// Deterministic stand-in for a model server.
///
/// It is constructed over a problem roster so it can recognize which problem
/// a prompt asks about and answer correctly with a difficulty-dependent
/// probability. Identical (config, prompt, request seed) always yields an
/// identical response, which makes every downstream artifact reproducible.
pub struct SimulatedBackend {
    config: SimulatorConfig,
    template_final_line: String,
    roster: BTreeMap<String, RosterEntry>,
}

/// Filler vocabulary for simulated reasoning steps.
const STEP_WORDS: [&str; 24] = [
    "consider", "the", "bound", "term", "sum", "ratio", "sequence", "estimate", "since",
    "therefore", "substitute", "expand", "simplify", "factor", "compare", "limit", "integral",
    "degree", "modulo", "root", "case", "check", "value", "holds",
];

impl SimulatedBackend {
    pub fn new(config: SimulatorConfig, problems: &[Problem]) -> Self {
        let template = PromptTemplate::default();
        let template_final_line = template
            .template_text
            .lines()
            .last()
            .unwrap_or_default()
            .to_owned();
        let roster = problems
            .iter()
            .map(|p| {
                (
                    collapse_ws(&p.text),
                    RosterEntry {
                        difficulty: p.difficulty,
                        answer: p.answer.clone(),
                    },
                )
            })
            .collect();
        SimulatedBackend {
            config,
            template_final_line,
            roster,
        }
    }

    /// Splits a prompt into the problem statement and, when present, the
    /// completion fragment that follows it.
    fn parse_prompt<'a>(&self, prompt: &'a str) -> (&'a str, bool) {
        let tail = match prompt.rfind(self.template_final_line.as_str()) {
            Some(pos) if !self.template_final_line.is_empty() => {
                &prompt[pos + self.template_final_line.len()..]
            }
            // Bare problem text without the instruction preamble also works.
            _ => prompt,
        };
        match tail.find(BEGIN_THOUGHT) {
            Some(marker) => (&tail[..marker], true),
            None => (tail, false),
        }
    }

    fn skill_for(&self, difficulty: Difficulty) -> f64 {
        let p = match difficulty {
            Difficulty::Hard => self.config.skill_hard,
            Difficulty::Normal => self.config.skill_normal,
        };
        p.clamp(0.0, 1.0)
    }

    fn filler_step(index: usize, rng: &mut ChaCha8Rng) -> String {
        let word_count = rng.gen_range(14..=20);
        let mut step = format!("Step {}:", index + 1);
        for _ in 0..word_count {
            step.push(' ');
            step.push_str(STEP_WORDS[rng.gen_range(0..STEP_WORDS.len())]);
        }
        step.push('.');
        step
    }

    fn wrong_answer(truth: &GroundTruth, rng: &mut ChaCha8Rng) -> String {
        match truth {
            // Prepending a digit always changes the magnitude, and the
            // result still parses as a number ("204" -> "9204",
            // "1/2" -> "91/2").
            GroundTruth::Numeric(v) => {
                format!("{}{}", rng.gen_range(1..=9), v.trim_start_matches('-'))
            }
            GroundTruth::Expression(v) => format!("({v})+1"),
            GroundTruth::Choice(c) => {
                let idx = c.bytes().next().unwrap_or(b'A').saturating_sub(b'A');
                char::from(b'A' + (idx + 1) % 26).to_string()
            }
            GroundTruth::Text(s) => format!("not {s}"),
        }
    }
}

impl Backend for SimulatedBackend {
    fn model_ref(&self) -> &str {
        "simulated-v1"
    }

    fn generate(&self, request: &GenRequest) -> Result<ScoredText, BackendError> {
        request.check()?;
        let (problem_text, completion_mode) = self.parse_prompt(&request.prompt);
        let entry = self
            .roster
            .get(&collapse_ws(problem_text))
            .ok_or_else(|| {
                BackendError::InvalidRequest("prompt does not reference a roster problem".to_owned())
            })?;

        let request_seed = request
            .seed
            .unwrap_or_else(|| sha_u64(&[request.prompt.as_bytes()]));
        let mut rng = ChaCha8Rng::seed_from_u64(sha_u64(&[
            &self.config.seed.to_le_bytes(),
            &request_seed.to_le_bytes(),
        ]));

        let correct = rng.gen_bool(self.skill_for(entry.difficulty));
        let answer = if correct {
            entry.answer.answer_text().to_owned()
        } else {
            Self::wrong_answer(&entry.answer, &mut rng)
        };
        let solution = format!(
            "Working through the relations above pins the quantity down.\n\n\
             The final answer is \\boxed{{{answer}}}"
        );

        let mut text = if completion_mode {
            // The prompt already carries the thought and the opening
            // solution marker; emit only the continuation.
            format!("{solution}\n{END_SOLUTION}")
        } else {
            let lo = self.config.thought_steps_mean.saturating_sub(self.config.thought_steps_spread).max(1);
            let hi = self.config.thought_steps_mean + self.config.thought_steps_spread;
            let step_count = rng.gen_range(lo..=hi.max(lo));
            let steps: Vec<String> = (0..step_count)
                .map(|i| Self::filler_step(i as usize, &mut rng))
                .collect();
            let trajectory = Trajectory::new(&steps, &solution)
                .expect("simulated steps are non-empty single paragraphs");
            crate::format::render_trajectory(&trajectory)
                .expect("simulated trajectories are well-formed by construction")
        };

        if let Some(stops) = &request.stop {
            if let Some(cut) = stops.iter().filter_map(|s| text.find(s.as_str())).min() {
                text.truncate(cut);
            }
        }
        if let Some(prefix) = token_prefix(&text, request.max_tokens as usize) {
            text.truncate(prefix);
        }

        let token_count = text.split_whitespace().count();
        let token_logprobs: Vec<f64> =
            (0..token_count).map(|_| rng.gen_range(-3.0..-0.05)).collect();
        Ok(ScoredText {
            text,
            token_logprobs: Some(token_logprobs),
        })
    }

    fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>, BackendError> {
        let mut rng = ChaCha8Rng::seed_from_u64(sha_u64(&[
            &self.config.seed.to_le_bytes(),
            b"score",
            prompt.as_bytes(),
            text.as_bytes(),
        ]));
        Ok((0..text.split_whitespace().count())
            .map(|_| rng.gen_range(-3.0..-0.05))
            .collect())
    }
}

fn collapse_ws(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    words.join(" ")
}

/// Byte length of the prefix of `text` containing at most `max_tokens`
/// whitespace tokens, or `None` when the text already fits.
fn token_prefix(text: &str, max_tokens: usize) -> Option<usize> {
    let mut tokens = 0usize;
    let mut in_token = false;
    for (pos, c) in text.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            tokens += 1;
            if tokens > max_tokens {
                return Some(pos);
            }
        }
    }
    None
}
