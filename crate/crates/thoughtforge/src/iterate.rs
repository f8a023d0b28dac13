//! Pipeline orchestration: seeding the first dataset version from the
//! distilled pool, running explore-verify-retain iterations until the hard
//! set is exhausted, and emitting training files per version.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use thoughtforge_core::backend::{round_seed, Backend, BackendError};
use thoughtforge_core::compute_perplexity;
use thoughtforge_core::corpus::{
    filter_records, mix_sample, CorpusError, Difficulty, MixSpec, Problem,
};
use thoughtforge_core::format::{render_prompt, PromptTemplate};
use thoughtforge_core::record::TrajectoryRecord;
use thoughtforge_core::refine::{make_dpo_pairs, select_sft, RecordScorer, RefineError};

use crate::config::PipelineConfig;
use crate::emit::{emit_dpo, emit_sft, EmitError};
use crate::explore::{explore_set, ExplorePolicy, ExploreSummary};
use crate::pool::{DatasetVersion, Pool, PoolError};
use crate::stats::LengthStats;

/// Failures from pipeline orchestration.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("no seed dataset manifest; run `ingest` and `mix` first")]
    NoSeedVersion,
    #[error("record {record_id} references problem {problem_id}, which is not in the problem set")]
    UnknownProblem {
        record_id: String,
        problem_id: String,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Emit(#[from] EmitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scores records through the backend when they carry no recorded
/// perplexity (imported teacher data has none — the dump format carries no
/// token log-probabilities).
pub struct BackendScorer<'a> {
    backend: &'a dyn Backend,
    problems: &'a BTreeMap<String, Problem>,
    template: PromptTemplate,
}

impl<'a> BackendScorer<'a> {
    pub fn new(backend: &'a dyn Backend, problems: &'a BTreeMap<String, Problem>) -> Self {
        BackendScorer {
            backend,
            problems,
            template: PromptTemplate::default(),
        }
    }
}

impl RecordScorer for BackendScorer<'_> {
    fn perplexity_of(&self, record: &TrajectoryRecord) -> Result<f64, BackendError> {
        let problem = self.problems.get(&record.problem_id).ok_or_else(|| {
            BackendError::InvalidRequest(format!("unknown problem {}", record.problem_id))
        })?;
        let prompt = render_prompt(&self.template, &problem.text)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let logprobs = self.backend.score(&prompt, &record.text)?;
        compute_perplexity(&logprobs).map_err(|e| BackendError::InvalidRequest(e.to_string()))
    }
}

/// What seeding the first dataset version produced.
#[derive(Debug)]
pub struct SeedOutcome {
    pub version: DatasetVersion,
    /// Correct distilled records that were eligible for the draw.
    pub candidates: usize,
    pub sampled: usize,
}

/// Draws the seed dataset `D0` from the pool's correct distilled records
/// according to the configured mixture, and writes its manifest.
pub fn seed_dataset(
    pool: &mut Pool,
    problems: &BTreeMap<String, Problem>,
    config: &PipelineConfig,
    created_at: Option<String>,
) -> Result<SeedOutcome, PipelineError> {
    let records = pool.load_all()?;
    let candidates: Vec<&TrajectoryRecord> = records
        .iter()
        .filter(|r| r.verdict.correct && r.provenance.iteration == 0)
        .collect();
    for rec in &candidates {
        if !problems.contains_key(&rec.problem_id) {
            return Err(PipelineError::UnknownProblem {
                record_id: rec.record_id.clone(),
                problem_id: rec.problem_id.clone(),
            });
        }
    }
    let spec = MixSpec {
        weights: config.mix.weights.clone(),
        total: config.mix.total,
        allow_shortfall: config.mix.allow_shortfall,
    };
    let sampled = mix_sample(
        &candidates,
        &spec,
        config.run_seed,
        |r| problems[&r.problem_id].bucket(),
        |r| r.record_id.as_str(),
    )?;
    let member_ids: Vec<String> = sampled.iter().map(|r| r.record_id.clone()).collect();
    let version = pool.initial_version(
        member_ids,
        Some(spec),
        None,
        config.training.clone(),
        config.as_settings(),
        created_at,
    )?;
    Ok(SeedOutcome {
        candidates: candidates.len(),
        sampled: version.member_ids.len(),
        version,
    })
}

/// One explore-verify-retain round.
#[derive(Debug)]
pub struct IterationOutcome {
    pub iteration: u32,
    /// Hard problems still unsolved going in — the exploration targets.
    pub targets: usize,
    pub explore: ExploreSummary,
    /// Records new to the pool after this round's appends.
    pub appended: usize,
    /// New records that survived the filter (correct and incorrect both;
    /// the incorrect ones are preference-pair material).
    pub additions_retained: usize,
    pub new_correct: usize,
    /// The freshly derived version, or `None` when the round found no new
    /// correct trajectories and the run has converged.
    pub version: Option<DatasetVersion>,
}

/// Hard problems with no correct record in the pool — the exploration
/// frontier.
pub fn unsolved_hard_targets(
    pool: &mut Pool,
    problems: &BTreeMap<String, Problem>,
) -> Result<Vec<Problem>, PipelineError> {
    let solved: BTreeSet<String> = pool
        .load_all()?
        .iter()
        .filter(|r| r.verdict.correct)
        .map(|r| r.problem_id.clone())
        .collect();
    Ok(problems
        .values()
        .filter(|p| p.difficulty == Difficulty::Hard && !solved.contains(&p.id))
        .cloned()
        .collect())
}

/// One exploration pass at the given iteration number: roll out the
/// targets and append everything to the pool. Returns the exploration
/// summary and how many records were actually new.
pub fn explore_once(
    pool: &mut Pool,
    targets: &[Problem],
    backend: &dyn Backend,
    config: &PipelineConfig,
    iteration: u32,
    record_timestamps: bool,
) -> Result<(ExploreSummary, usize), PipelineError> {
    let template = PromptTemplate::default();
    let policy = ExplorePolicy::from_config(&config.explore).with_timestamps(record_timestamps);
    // Each round samples under its own derived seed; otherwise a problem
    // unsolved in round t would replay the very same rollouts in round
    // t + 1 and the loop could never make progress on it.
    let summary = explore_set(
        backend,
        &template,
        targets,
        round_seed(config.run_seed, iteration),
        iteration,
        &policy,
    );
    let fresh: Vec<TrajectoryRecord> = summary
        .outcomes
        .iter()
        .flat_map(|o| o.records.iter().cloned())
        .collect();
    let appended = pool.append_all(&fresh)?;
    Ok((summary, appended))
}

/// Runs one iteration: explore the unsolved hard problems, append
/// everything, and derive the next dataset version from the retained
/// additions.
///
/// Additions are recomputed from pool state (records at this iteration
/// number that are not already members of the parent version), so a rerun
/// after a crash between append and manifest write picks up exactly where
/// it left off — the appends replay as no-ops.
pub fn run_iteration(
    pool: &mut Pool,
    problems: &BTreeMap<String, Problem>,
    backend: &dyn Backend,
    config: &PipelineConfig,
    record_timestamps: bool,
) -> Result<IterationOutcome, PipelineError> {
    let parent = pool.latest_version()?.ok_or(PipelineError::NoSeedVersion)?;
    let iteration = parent.iteration + 1;
    let targets = unsolved_hard_targets(pool, problems)?;
    let (summary, appended) =
        explore_once(pool, &targets, backend, config, iteration, record_timestamps)?;

    let parent_members = parent.member_set();
    let additions: Vec<TrajectoryRecord> = pool
        .load_all()?
        .into_iter()
        .filter(|r| r.provenance.iteration == iteration && !parent_members.contains(&r.record_id))
        .collect();
    let (retained, report) = filter_records(&additions, &config.filter);
    let new_correct = retained.iter().filter(|r| r.verdict.correct).count();
    if new_correct == 0 {
        return Ok(IterationOutcome {
            iteration,
            targets: targets.len(),
            explore: summary,
            appended,
            additions_retained: retained.len(),
            new_correct,
            version: None,
        });
    }

    let additions: Vec<String> = retained.iter().map(|r| r.record_id.clone()).collect();
    let created_at = record_timestamps.then(|| chrono::Utc::now().to_rfc3339());
    let version = pool.derive_version(
        &parent,
        additions,
        Some(report),
        config.training.clone(),
        config.as_settings(),
        created_at,
    )?;
    Ok(IterationOutcome {
        iteration,
        targets: targets.len(),
        explore: summary,
        appended,
        additions_retained: retained.len(),
        new_correct,
        version: Some(version),
    })
}

/// Where one version's training files landed.
#[derive(Debug)]
pub struct EmitOutcome {
    pub version_id: String,
    pub sft_path: PathBuf,
    pub dpo_path: PathBuf,
    pub sft_rows: usize,
    pub dpo_rows: usize,
    pub sft_thought_chars: LengthStats,
}

/// Writes the supervised rows for one version to `out_path`. Returns the
/// row count and thought-length stats. The backend, when given, supplies
/// perplexity for members that carry none.
pub fn emit_sft_file(
    pool: &mut Pool,
    problems: &BTreeMap<String, Problem>,
    version: &DatasetVersion,
    config: &PipelineConfig,
    backend: Option<&dyn Backend>,
    out_path: &Path,
) -> Result<(usize, LengthStats), PipelineError> {
    let members = pool.members(&version.member_ids)?;
    let scorer = backend.map(|b| BackendScorer::new(b, problems));
    let scorer_ref = scorer.as_ref().map(|s| s as &dyn RecordScorer);
    let template = PromptTemplate::default();
    let selected = select_sft(&members, &config.select, scorer_ref)?;
    let mut buf = Vec::new();
    let stats = emit_sft(&selected, problems, &template, &mut buf)?;
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out_path, &buf)?;
    Ok((selected.len(), stats))
}

/// Writes the preference pairs for one version to `out_path` in the given
/// pair mode. Returns the pair count.
pub fn emit_dpo_file(
    pool: &mut Pool,
    problems: &BTreeMap<String, Problem>,
    version: &DatasetVersion,
    mode: thoughtforge_core::refine::PairMode,
    backend: Option<&dyn Backend>,
    out_path: &Path,
) -> Result<usize, PipelineError> {
    let members = pool.members(&version.member_ids)?;
    let scorer = backend.map(|b| BackendScorer::new(b, problems));
    let scorer_ref = scorer.as_ref().map(|s| s as &dyn RecordScorer);
    let template = PromptTemplate::default();
    let pairs = make_dpo_pairs(&members, problems, &template, mode, scorer_ref)?;
    let mut buf = Vec::new();
    let count = emit_dpo(&pairs, &mut buf)?;
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(out_path, &buf)?;
    Ok(count)
}

/// Emits `sft.jsonl` and `dpo.jsonl` for one version under
/// `out_dir/<version id>/`, selecting and pairing over the full member set.
pub fn emit_version(
    pool: &mut Pool,
    problems: &BTreeMap<String, Problem>,
    version: &DatasetVersion,
    config: &PipelineConfig,
    out_dir: &Path,
    backend: Option<&dyn Backend>,
) -> Result<EmitOutcome, PipelineError> {
    let dir = out_dir.join(&version.version_id);
    let sft_path = dir.join("sft.jsonl");
    let dpo_path = dir.join("dpo.jsonl");
    let (sft_rows, sft_thought_chars) =
        emit_sft_file(pool, problems, version, config, backend, &sft_path)?;
    let dpo_rows = emit_dpo_file(
        pool,
        problems,
        version,
        config.dpo.mode,
        backend,
        &dpo_path,
    )?;
    Ok(EmitOutcome {
        version_id: version.version_id.clone(),
        sft_path,
        dpo_path,
        sft_rows,
        dpo_rows,
        sft_thought_chars,
    })
}

/// Outcome of an iterate run: the rounds performed and whether the run
/// ended because exploration stopped producing new correct trajectories.
#[derive(Debug)]
pub struct LoopOutcome {
    pub iterations: Vec<IterationOutcome>,
    pub converged: bool,
}

/// Runs up to `max_iterations` rounds, emitting training files for every
/// version derived along the way. The loop usually ends earlier, through
/// the exhaustion rule: a round that yields no new correct trajectories
/// derives nothing and stops the run. A cap of 0 runs nothing.
pub fn run_until_exhausted(
    pool: &mut Pool,
    problems: &BTreeMap<String, Problem>,
    backend: &dyn Backend,
    config: &PipelineConfig,
    out_dir: &Path,
    record_timestamps: bool,
    max_iterations: u32,
) -> Result<LoopOutcome, PipelineError> {
    let mut iterations = Vec::new();
    loop {
        if iterations.len() as u32 >= max_iterations {
            return Ok(LoopOutcome {
                iterations,
                converged: false,
            });
        }
        let outcome = run_iteration(pool, problems, backend, config, record_timestamps)?;
        let converged = outcome.version.is_none();
        if let Some(version) = &outcome.version {
            emit_version(pool, problems, version, config, out_dir, Some(backend))?;
        }
        iterations.push(outcome);
        if converged {
            return Ok(LoopOutcome {
                iterations,
                converged: true,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;
    use thoughtforge_core::backend::{SimulatedBackend, SimulatorConfig};
    use thoughtforge_core::corpus::Domain;
    use thoughtforge_core::format::{render_trajectory, Trajectory};
    use thoughtforge_core::record::{Origin, Provenance};
    use thoughtforge_core::verify::{GroundTruth, Verdict};

    const WORDS: [&str; 16] = [
        "bound", "residue", "lattice", "kernel", "measure", "norm", "field", "orbit", "spectrum",
        "margin", "index", "degree", "weight", "trace", "closure", "rank",
    ];

    fn long_steps(salt: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + salt);
        (0..8)
            .map(|i| {
                let filler: Vec<&str> = (0..16)
                    .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
                    .collect();
                format!("Step {}: {}.", i + 1, filler.join(" "))
            })
            .collect()
    }

    fn problem(i: usize, difficulty: Difficulty) -> Problem {
        Problem::new(
            &format!("Determine quantity number {i} of the arrangement."),
            Domain::Math,
            difficulty,
            GroundTruth::numeric(&i.to_string()),
            "unit-test",
        )
    }

    fn distilled(problem: &Problem, salt: u64) -> TrajectoryRecord {
        let traj = Trajectory::new(
            &long_steps(salt),
            &format!("The final answer is \\boxed{{{}}}", problem.answer.value()),
        )
        .unwrap();
        TrajectoryRecord::new(
            &problem.id,
            &render_trajectory(&traj).unwrap(),
            Verdict::matched(problem.answer.value()),
            None,
            Provenance::distilled(Origin::DistilledR1, "teacher"),
        )
    }

    struct Fixture {
        dir: TempDir,
        problems: BTreeMap<String, Problem>,
        config: PipelineConfig,
    }

    /// Four normal problems with correct distilled records, four hard ones
    /// with nothing — the exploration frontier.
    fn fixture(skill_hard: f64) -> Fixture {
        let dir = TempDir::new().unwrap();
        let mut problems = BTreeMap::new();
        let mut pool = Pool::open(dir.path()).unwrap();
        for i in 0..4 {
            let p = problem(i, Difficulty::Normal);
            pool.append(&distilled(&p, i as u64)).unwrap();
            problems.insert(p.id.clone(), p);
        }
        for i in 4..8 {
            let p = problem(i, Difficulty::Hard);
            problems.insert(p.id.clone(), p);
        }
        drop(pool);

        let mut config = PipelineConfig::default();
        config.run_seed = 42;
        config.mix.total = 4;
        config.mix.weights.insert("math/normal".to_owned(), 1.0);
        config.backend.simulator = SimulatorConfig {
            skill_hard,
            skill_normal: 1.0,
            ..SimulatorConfig::default()
        };
        config.explore.rollouts_per_problem = 6;
        config.explore.threads = 2;
        config.select.min_length = 50;
        Fixture {
            dir,
            problems,
            config,
        }
    }

    fn backend_for(fixture: &Fixture) -> SimulatedBackend {
        let roster: Vec<Problem> = fixture.problems.values().cloned().collect();
        SimulatedBackend::new(fixture.config.backend.simulator.clone(), &roster)
    }

    #[test]
    fn iterating_without_a_seed_version_is_an_error() {
        let fx = fixture(1.0);
        let backend = backend_for(&fx);
        let mut pool = Pool::open(fx.dir.path()).unwrap();
        let err =
            run_iteration(&mut pool, &fx.problems, &backend, &fx.config, false).unwrap_err();
        assert!(matches!(err, PipelineError::NoSeedVersion));
    }

    #[test]
    fn seed_then_iterate_grows_a_monotone_version_chain() {
        let fx = fixture(0.8);
        let backend = backend_for(&fx);
        let mut pool = Pool::open(fx.dir.path()).unwrap();

        let seed = seed_dataset(&mut pool, &fx.problems, &fx.config, None).unwrap();
        assert_eq!(seed.version.version_id, "D0");
        assert_eq!(seed.candidates, 4);
        assert_eq!(seed.sampled, 4);

        let out_dir = fx.dir.path().join("exports");
        let run = run_until_exhausted(
            &mut pool,
            &fx.problems,
            &backend,
            &fx.config,
            &out_dir,
            false,
            10,
        )
        .unwrap();
        assert!(run.converged);
        let last = run.iterations.last().unwrap();
        assert_eq!(last.version, None);
        assert_eq!(last.new_correct, 0);

        // Each derived version strictly contains its parent.
        let ids = pool.version_ids().unwrap();
        assert!(ids.len() >= 2, "expected at least D0 and D1, got {ids:?}");
        let mut previous = pool.read_version("D0").unwrap();
        for id in &ids[1..] {
            let version = pool.read_version(id).unwrap();
            let prev_set = previous.member_set();
            let this_set = version.member_set();
            assert!(prev_set.is_subset(&this_set));
            assert!(prev_set.len() < this_set.len());
            assert_eq!(version.parent.as_deref(), Some(previous.version_id.as_str()));
            previous = version;
        }

        // With skill 0.8 and six rollouts per problem, all four hard
        // problems are all but guaranteed solved by convergence.
        let records = pool.load_all().unwrap();
        let solved: BTreeSet<&str> = records
            .iter()
            .filter(|r| r.verdict.correct)
            .map(|r| r.problem_id.as_str())
            .collect();
        assert_eq!(solved.len(), 8);

        // Training files exist for every derived version.
        for id in &ids {
            let sft = out_dir.join(id).join("sft.jsonl");
            let dpo = out_dir.join(id).join("dpo.jsonl");
            if *id == "D0" {
                // D0 is seeded, not derived; the loop does not emit it.
                continue;
            }
            assert!(sft.exists(), "missing {sft:?}");
            assert!(dpo.exists(), "missing {dpo:?}");
            let text = fs::read_to_string(&sft).unwrap();
            for line in text.lines() {
                let row: serde_json::Value = serde_json::from_str(line).unwrap();
                assert!(row["response"]
                    .as_str()
                    .unwrap()
                    .contains("<|begin_of_solution|>"));
            }
        }
    }

    #[test]
    fn a_round_with_no_new_corrects_converges_without_a_version() {
        let fx = fixture(0.0);
        let backend = backend_for(&fx);
        let mut pool = Pool::open(fx.dir.path()).unwrap();
        seed_dataset(&mut pool, &fx.problems, &fx.config, None).unwrap();

        let out_dir = fx.dir.path().join("exports");
        let run = run_until_exhausted(
            &mut pool,
            &fx.problems,
            &backend,
            &fx.config,
            &out_dir,
            false,
            10,
        )
        .unwrap();
        assert!(run.converged);
        assert_eq!(run.iterations.len(), 1);
        let only = &run.iterations[0];
        assert_eq!(only.targets, 4);
        assert_eq!(only.version, None);
        // The failed rollouts still joined the pool as negatives.
        assert!(only.appended > 0);
        assert_eq!(pool.latest_version().unwrap().unwrap().version_id, "D0");
    }

    #[test]
    fn a_cap_of_zero_runs_nothing() {
        let fx = fixture(1.0);
        let backend = backend_for(&fx);
        let mut pool = Pool::open(fx.dir.path()).unwrap();
        seed_dataset(&mut pool, &fx.problems, &fx.config, None).unwrap();
        let before = pool.len();
        let run = run_until_exhausted(
            &mut pool,
            &fx.problems,
            &backend,
            &fx.config,
            &fx.dir.path().join("exports"),
            false,
            0,
        )
        .unwrap();
        assert!(run.iterations.is_empty());
        assert!(!run.converged);
        assert_eq!(pool.len(), before);
    }

    #[test]
    fn reruns_replay_appends_as_no_ops() {
        let fx = fixture(0.9);
        let backend = backend_for(&fx);
        let mut pool = Pool::open(fx.dir.path()).unwrap();
        seed_dataset(&mut pool, &fx.problems, &fx.config, None).unwrap();

        let first = run_iteration(&mut pool, &fx.problems, &backend, &fx.config, false).unwrap();
        assert!(first.version.is_some());
        assert!(first.appended > 0);
        let pool_size = pool.len();

        // The next round targets only what is still unsolved; with all hard
        // problems solved it finds nothing new and derives no version.
        let second = run_iteration(&mut pool, &fx.problems, &backend, &fx.config, false).unwrap();
        if second.targets == 0 {
            assert_eq!(second.appended, 0);
            assert_eq!(second.version, None);
            assert_eq!(pool.len(), pool_size);
        }
    }

    #[test]
    fn emission_scores_unscored_members_through_the_backend() {
        let fx = fixture(1.0);
        let backend = backend_for(&fx);
        let mut pool = Pool::open(fx.dir.path()).unwrap();
        let seed = seed_dataset(&mut pool, &fx.problems, &fx.config, None).unwrap();
        let out_dir = fx.dir.path().join("exports");

        // Distilled members carry no perplexity: without a scorer the
        // ranking cannot run.
        let err = emit_version(
            &mut pool,
            &fx.problems,
            &seed.version,
            &fx.config,
            &out_dir,
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Refine(RefineError::ScoringUnavailable { .. })
        ));

        let emitted = emit_version(
            &mut pool,
            &fx.problems,
            &seed.version,
            &fx.config,
            &out_dir,
            Some(&backend),
        )
        .unwrap();
        assert_eq!(emitted.sft_rows, 4);
        assert_eq!(emitted.dpo_rows, 0);
        assert!(emitted.sft_path.exists());
        let dpo_text = fs::read_to_string(&emitted.dpo_path).unwrap();
        assert!(dpo_text.is_empty());
    }
}
