//! The exploration loop: repeated sampling against a backend until a
//! problem is solved or its rollout budget runs out, fanned out across a
//! worker pool.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thoughtforge_core::backend::{rollout_seed, Backend, BackendError, GenRequest};
use thoughtforge_core::compute_perplexity;
use thoughtforge_core::corpus::{Domain, Problem};
use thoughtforge_core::format::{canonicalize, render_prompt, PromptTemplate};
use thoughtforge_core::record::{Provenance, TrajectoryRecord};
use thoughtforge_core::verify::{verify_solution, Verdict};

use crate::config::ExploreConfig;

/// Per-run knobs for the exploration loop.
#[derive(Debug, Clone)]
pub struct ExplorePolicy {
    pub rollouts_per_problem: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Cut a problem's rollout stream at the first correct answer.
    pub stop_on_first_correct: bool,
    pub threads: usize,
    /// Stamp records with wall-clock creation time. Off for deterministic
    /// runs so replays are byte-identical; on for live backends, where the
    /// stamp is worth more than replayability.
    pub record_timestamps: bool,
}

impl ExplorePolicy {
    pub fn from_config(config: &ExploreConfig) -> Self {
        ExplorePolicy {
            rollouts_per_problem: config.rollouts_per_problem,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            stop_on_first_correct: config.stop_on_first_correct,
            threads: config.threads,
            record_timestamps: false,
        }
    }

    pub fn with_timestamps(mut self, on: bool) -> Self {
        self.record_timestamps = on;
        self
    }
}

/// Everything one problem's rollout stream produced.
#[derive(Debug)]
pub struct ProblemOutcome {
    pub problem_id: String,
    /// One record per completed rollout, in rollout order.
    pub records: Vec<TrajectoryRecord>,
    /// The backend error that cut the stream short, if any.
    pub failure: Option<BackendError>,
    /// Whether any rollout verified as correct.
    pub solved: bool,
}

/// Aggregate accounting for one exploration pass.
#[derive(Debug)]
pub struct ExploreSummary {
    pub outcomes: Vec<ProblemOutcome>,
    /// Generation calls issued; every call either produced a record or
    /// ended its problem's stream with a failure.
    pub rollouts_issued: usize,
    pub records_written: usize,
    /// Problems whose stream ended in a backend error.
    pub failures: usize,
    pub solved_count: usize,
}

/// Runs one problem's rollout stream: sample, verify, repeat. Each rollout's
/// seed is derived from `(run_seed, problem, rollout index)`, so raising the
/// budget later replays the early attempts and only appends new ones. A
/// backend error ends the stream but keeps the records already earned.
pub fn explore_problem(
    backend: &dyn Backend,
    template: &PromptTemplate,
    problem: &Problem,
    run_seed: u64,
    iteration: u32,
    policy: &ExplorePolicy,
) -> ProblemOutcome {
    let mut outcome = ProblemOutcome {
        problem_id: problem.id.clone(),
        records: Vec::new(),
        failure: None,
        solved: false,
    };
    let prompt = match render_prompt(template, &problem.text) {
        Ok(p) => p,
        Err(e) => {
            outcome.failure = Some(BackendError::InvalidRequest(e.to_string()));
            return outcome;
        }
    };
    for index in 0..policy.rollouts_per_problem {
        let request = GenRequest::new(&prompt)
            .with_temperature(policy.temperature)
            .with_seed(rollout_seed(run_seed, &problem.id, index))
            .with_max_tokens(policy.max_tokens);
        let scored = match backend.generate(&request) {
            Ok(s) => s,
            Err(e) => {
                outcome.failure = Some(e);
                break;
            }
        };
        // Keep the canonical rendering when the response parses; otherwise
        // store the raw text with an unparseable verdict — failures are
        // preference-pair material, not garbage.
        let (text, verdict) = match canonicalize(&scored.text) {
            Ok(canonical) => {
                let verdict = verify_solution(&canonical, &problem.answer);
                (canonical, verdict)
            }
            Err(_) => (scored.text.clone(), Verdict::unparseable()),
        };
        let perplexity = scored
            .token_logprobs
            .as_deref()
            .and_then(|lp| compute_perplexity(lp).ok());
        let mut provenance =
            Provenance::explored(backend.model_ref(), iteration, index, policy.temperature);
        if policy.record_timestamps {
            provenance.timestamp = Some(chrono::Utc::now().to_rfc3339());
        }
        let mut record = TrajectoryRecord::new(&problem.id, &text, verdict, perplexity, provenance);
        // String comparison cannot judge code; flag these records so a
        // downstream execution harness knows the verdict is provisional.
        record.requires_external_verdict = problem.domain == Domain::Code;
        let correct = record.verdict.correct;
        outcome.records.push(record);
        if correct {
            outcome.solved = true;
            if policy.stop_on_first_correct {
                break;
            }
        }
    }
    outcome
}

/// Explores every problem across a fixed-size worker pool. Workers pull
/// problems from a shared cursor; results are reordered afterwards, so the
/// outcome list matches the input order regardless of thread count.
pub fn explore_set(
    backend: &dyn Backend,
    template: &PromptTemplate,
    problems: &[Problem],
    run_seed: u64,
    iteration: u32,
    policy: &ExplorePolicy,
) -> ExploreSummary {
    let cursor = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, ProblemOutcome)>> = Mutex::new(Vec::with_capacity(problems.len()));
    let workers = policy.threads.max(1).min(problems.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(problem) = problems.get(index) else {
                    break;
                };
                let outcome =
                    explore_problem(backend, template, problem, run_seed, iteration, policy);
                results.lock().unwrap().push((index, outcome));
            });
        }
    });
    let mut indexed = results.into_inner().unwrap();
    indexed.sort_by_key(|(index, _)| *index);
    let outcomes: Vec<ProblemOutcome> = indexed.into_iter().map(|(_, o)| o).collect();

    let records_written = outcomes.iter().map(|o| o.records.len()).sum::<usize>();
    let failures = outcomes.iter().filter(|o| o.failure.is_some()).count();
    ExploreSummary {
        rollouts_issued: records_written + failures,
        records_written,
        failures,
        solved_count: outcomes.iter().filter(|o| o.solved).count(),
        outcomes,
    }
}
