//! Operator-facing command line: wires the pool, the backends, and the
//! pipeline stages together, and maps every failure onto the stable exit
//! codes (0 success, 1 usage, 2 data, 3 backend).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use thoughtforge_core::backend::{Backend, SimulatedBackend};
use thoughtforge_core::corpus::{filter_records, FilterReport, Problem};
use thoughtforge_core::record::{Origin, TrajectoryRecord};
use thoughtforge_core::refine::{select_sft, PairMode, RecordScorer, RefineError};

use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::emit::EmitError;
use crate::http::HttpBackend;
use crate::ingest::{self, IngestError, ProblemSpec};
use crate::iterate::{
    emit_dpo_file, emit_sft_file, explore_once, run_until_exhausted, seed_dataset,
    unsolved_hard_targets, BackendScorer, PipelineError,
};
use crate::pool::{DatasetVersion, Pool, PoolError};
use crate::stats::{pool_stats, LengthStats};

/// Exit code for bad flags or argument combinations.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for problems with the data itself: unreadable or malformed
/// inputs, unknown ids, failed validation. Rerunning with the same inputs
/// fails the same way.
pub const EXIT_DATA: i32 = 2;
/// Exit code for infrastructure failures — the generation backend, a held
/// pool lock, IO. Rerunning may succeed.
pub const EXIT_BACKEND: i32 = 3;

/// A command failure carrying its exit class.
#[derive(Debug)]
pub struct CliFailure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> CliFailure {
    CliFailure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn data(message: impl Into<String>) -> CliFailure {
    CliFailure {
        code: EXIT_DATA,
        message: message.into(),
    }
}

fn backend_failure(message: impl Into<String>) -> CliFailure {
    CliFailure {
        code: EXIT_BACKEND,
        message: message.into(),
    }
}

impl From<PoolError> for CliFailure {
    fn from(e: PoolError) -> Self {
        let code = match &e {
            PoolError::Locked { .. } | PoolError::Io(_) => EXIT_BACKEND,
            _ => EXIT_DATA,
        };
        CliFailure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliFailure {
    fn from(e: ConfigError) -> Self {
        data(e.to_string())
    }
}

impl From<IngestError> for CliFailure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Pool(pool) => pool.into(),
            IngestError::Io(io) => backend_failure(io.to_string()),
            other => data(other.to_string()),
        }
    }
}

impl From<EmitError> for CliFailure {
    fn from(e: EmitError) -> Self {
        match e {
            EmitError::Io(io) => backend_failure(io.to_string()),
            other => data(other.to_string()),
        }
    }
}

impl From<RefineError> for CliFailure {
    fn from(e: RefineError) -> Self {
        match &e {
            RefineError::ScoringFailed { .. } => backend_failure(e.to_string()),
            _ => data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliFailure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Pool(pool) => pool.into(),
            PipelineError::Emit(emit) => emit.into(),
            PipelineError::Refine(refine) => refine.into(),
            PipelineError::Io(io) => backend_failure(io.to_string()),
            other => data(other.to_string()),
        }
    }
}

/// Pipeline for reasoning-trajectory training data: pool, exploration,
/// dataset versions, and training-file emission.
#[derive(Debug, Parser)]
#[command(name = "thoughtforge", version)]
pub struct Cli {
    #[command(flatten)]
    pub globals: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Configuration file (TOML); missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Pool directory (overrides the config).
    #[arg(long, global = true)]
    pub pool: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Backend to use (overrides the config).
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendChoice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Simulated,
    Http,
}

/// Origin recorded on ingested dump rows; names match the serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OriginChoice {
    #[value(name = "distilled_r1")]
    DistilledR1,
    #[value(name = "distilled_qwq")]
    DistilledQwq,
}

impl OriginChoice {
    fn origin(self) -> Origin {
        match self {
            OriginChoice::DistilledR1 => Origin::DistilledR1,
            OriginChoice::DistilledQwq => Origin::DistilledQwq,
        }
    }
}

/// Preference-pair payload mode; names match the serialized form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeChoice {
    Full,
    #[value(name = "thought_only")]
    ThoughtOnly,
}

impl ModeChoice {
    fn mode(self) -> PairMode {
        match self {
            ModeChoice::Full => PairMode::Full,
            ModeChoice::ThoughtOnly => PairMode::ThoughtOnly,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add problems and teacher trajectories to the pool.
    Ingest {
        /// Problem statements to add (JSONL).
        #[arg(long)]
        problems: Option<PathBuf>,
        /// Teacher trajectory dump to ingest (JSONL).
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Origin recorded for dump rows.
        #[arg(long, value_enum, default_value_t = OriginChoice::DistilledR1)]
        origin: OriginChoice,
        /// Fallback teacher identifier for rows that name none.
        #[arg(long, default_value = "teacher")]
        model_ref: String,
        /// Complete thought-only rows through the backend before verifying.
        #[arg(long)]
        complete_solutions: bool,
    },
    /// Run the rejection filter and print its report, writing nothing.
    Filter {
        /// Records to screen (JSONL); defaults to the whole pool.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Draw the seed dataset from correct teacher records per the mixture.
    Mix,
    /// Roll out the unsolved hard problems once and append the results.
    Explore,
    /// Preview what supervised emission would select from a version.
    Select {
        /// Version to select from; defaults to the latest.
        #[arg(long)]
        version: Option<String>,
    },
    /// Write supervised fine-tuning rows for a version.
    EmitSft {
        /// Version to emit; defaults to the latest.
        #[arg(long)]
        version: Option<String>,
        /// Output path; defaults to <out dir>/<version>/sft.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write preference pairs for a version.
    EmitDpo {
        /// Version to emit; defaults to the latest.
        #[arg(long)]
        version: Option<String>,
        /// Output path; defaults to <out dir>/<version>/dpo.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pair payload mode (overrides the config).
        #[arg(long, value_enum)]
        mode: Option<ModeChoice>,
    },
    /// Run explore → filter → derive → emit rounds until exhaustion.
    Iterate {
        /// Cap on rounds (overrides the config); 0 runs nothing.
        #[arg(long)]
        iterations: Option<u32>,
    },
    /// Print pool or dataset-version statistics.
    Stats {
        /// Restrict to one version's members instead of the whole pool.
        #[arg(long)]
        version: Option<String>,
    },
}

/// Effective settings for one invocation: config with flag overrides
/// applied, plus the resolved pool directory.
struct Context {
    config: PipelineConfig,
    pool_dir: PathBuf,
}

fn resolve(globals: &GlobalArgs) -> Result<Context, CliFailure> {
    let mut config = match &globals.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = globals.seed {
        config.run_seed = seed;
    }
    if let Some(choice) = globals.backend {
        config.backend.kind = match choice {
            BackendChoice::Simulated => BackendKind::Simulated,
            BackendChoice::Http => BackendKind::Http,
        };
    }
    let pool_dir = globals
        .pool
        .clone()
        .or_else(|| config.pool.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("pool"));
    Ok(Context { config, pool_dir })
}

impl Context {
    fn out_dir(&self) -> PathBuf {
        self.config
            .out_dir
            .as_ref()
            .map(PathBuf::from)
            .unwrap_or_else(|| self.pool_dir.join("exports"))
    }

    fn open_pool(&self) -> Result<Pool, CliFailure> {
        Ok(Pool::open(&self.pool_dir)?)
    }

    fn load_problems(&self) -> Result<BTreeMap<String, Problem>, CliFailure> {
        Ok(ingest::load_problems(&self.pool_dir)?)
    }

    fn backend(&self, problems: &BTreeMap<String, Problem>) -> Box<dyn Backend> {
        match self.config.backend.kind {
            BackendKind::Simulated => {
                let roster: Vec<Problem> = problems.values().cloned().collect();
                Box::new(SimulatedBackend::new(
                    self.config.backend.simulator.clone(),
                    &roster,
                ))
            }
            BackendKind::Http => Box::new(HttpBackend::from_config(&self.config.backend)),
        }
    }

    /// Wall-clock provenance is recorded only for real backends, keeping
    /// simulator runs byte-for-byte reproducible.
    fn record_timestamps(&self) -> bool {
        self.config.backend.kind == BackendKind::Http
    }

    fn now(&self) -> Option<String> {
        self.record_timestamps()
            .then(|| chrono::Utc::now().to_rfc3339())
    }
}

/// Reads a user-supplied JSONL file. Unreadability here is a data error —
/// the path names nothing readable — not an infrastructure one.
fn read_input<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliFailure> {
    ingest::read_jsonl(path).map_err(|e| match e {
        IngestError::Io(io) => data(format!("cannot read {}: {io}", path.display())),
        other => other.into(),
    })
}

fn resolve_version(pool: &Pool, flag: Option<&str>) -> Result<DatasetVersion, CliFailure> {
    match flag {
        Some(id) => Ok(pool.read_version(id)?),
        None => pool
            .latest_version()?
            .ok_or_else(|| data("no dataset versions exist yet; run `mix` first")),
    }
}

fn report_line(report: &FilterReport) -> String {
    format!(
        "kept {} of {} (malformed {}, duplicate {}, near-duplicate {}, repetition {}, language-mix {}, too-short {})",
        report.retained,
        report.input,
        report.malformed,
        report.duplicate,
        report.near_duplicate,
        report.repetition,
        report.language_mix,
        report.too_short
    )
}

/// Runs one parsed invocation to completion.
pub fn run(cli: &Cli) -> Result<(), CliFailure> {
    let ctx = resolve(&cli.globals)?;
    match &cli.command {
        Command::Ingest {
            problems,
            dump,
            origin,
            model_ref,
            complete_solutions,
        } => cmd_ingest(
            &ctx,
            problems.as_deref(),
            dump.as_deref(),
            origin.origin(),
            model_ref,
            *complete_solutions,
        ),
        Command::Filter { input } => cmd_filter(&ctx, input.as_deref()),
        Command::Mix => cmd_mix(&ctx),
        Command::Explore => cmd_explore(&ctx),
        Command::Select { version } => cmd_select(&ctx, version.as_deref()),
        Command::EmitSft { version, out } => {
            cmd_emit_sft(&ctx, version.as_deref(), out.as_deref())
        }
        Command::EmitDpo { version, out, mode } => {
            cmd_emit_dpo(&ctx, version.as_deref(), out.as_deref(), *mode)
        }
        Command::Iterate { iterations } => cmd_iterate(&ctx, *iterations),
        Command::Stats { version } => cmd_stats(&ctx, version.as_deref()),
    }
}

fn cmd_ingest(
    ctx: &Context,
    problems_path: Option<&Path>,
    dump_path: Option<&Path>,
    origin: Origin,
    model_ref: &str,
    complete_solutions: bool,
) -> Result<(), CliFailure> {
    if problems_path.is_none() && dump_path.is_none() {
        return Err(usage("nothing to ingest; pass --problems and/or --dump"));
    }
    let mut pool = ctx.open_pool()?;
    if let Some(path) = problems_path {
        let specs: Vec<ProblemSpec> = read_input(path)?;
        let (added, total) = ingest::ingest_problems(&ctx.pool_dir, &specs)?;
        println!("problems: {added} added, {total} total");
    }
    if let Some(path) = dump_path {
        let problems = ctx.load_problems()?;
        let (rows, complaints) = ingest::read_dump_rows(path).map_err(|e| match e {
            IngestError::Io(io) => data(format!("cannot read {}: {io}", path.display())),
            other => other.into(),
        })?;
        for complaint in &complaints {
            eprintln!("warning: {complaint}");
        }
        let backend = complete_solutions.then(|| ctx.backend(&problems));
        let summary = ingest::ingest_dump(
            &mut pool,
            &problems,
            &rows,
            origin,
            model_ref,
            &ctx.config.filter,
            backend.as_deref(),
        )?;
        for skip in &summary.skipped {
            eprintln!("warning: {skip}");
        }
        println!(
            "dump: {} rows, {} repaired, {} retained, {} appended",
            summary.rows, summary.repaired, summary.retained, summary.appended
        );
        println!("filter: {}", report_line(&summary.report));
    }
    Ok(())
}

fn cmd_filter(ctx: &Context, input: Option<&Path>) -> Result<(), CliFailure> {
    let records: Vec<TrajectoryRecord> = match input {
        Some(path) => read_input(path)?,
        None => ctx.open_pool()?.load_all()?,
    };
    let (_, report) = filter_records(&records, &ctx.config.filter);
    println!("filter: {}", report_line(&report));
    Ok(())
}

fn cmd_mix(ctx: &Context) -> Result<(), CliFailure> {
    let mut pool = ctx.open_pool()?;
    let problems = ctx.load_problems()?;
    let outcome = seed_dataset(&mut pool, &problems, &ctx.config, ctx.now())?;
    println!(
        "{}: drew {} of {} candidates",
        outcome.version.version_id, outcome.sampled, outcome.candidates
    );
    Ok(())
}

fn cmd_explore(ctx: &Context) -> Result<(), CliFailure> {
    let mut pool = ctx.open_pool()?;
    let problems = ctx.load_problems()?;
    let backend = ctx.backend(&problems);
    let iteration = pool
        .latest_version()?
        .map(|v| v.iteration + 1)
        .unwrap_or(1);
    let targets = unsolved_hard_targets(&mut pool, &problems)?;
    let (summary, appended) = explore_once(
        &mut pool,
        &targets,
        backend.as_ref(),
        &ctx.config,
        iteration,
        ctx.record_timestamps(),
    )?;
    println!(
        "iteration {iteration}: {} targets, {} rollouts, {} solved, {appended} new records",
        targets.len(),
        summary.rollouts_issued,
        summary.solved_count
    );
    if summary.failures > 0 {
        eprintln!(
            "warning: {} rollout streams ended in backend errors",
            summary.failures
        );
        if summary.failures == targets.len() {
            let last = summary
                .outcomes
                .iter()
                .rev()
                .find_map(|o| o.failure.as_ref())
                .expect("a failed stream recorded its error");
            return Err(backend_failure(format!(
                "every rollout stream failed; last: {last}"
            )));
        }
    }
    Ok(())
}

fn cmd_select(ctx: &Context, version: Option<&str>) -> Result<(), CliFailure> {
    let mut pool = ctx.open_pool()?;
    let problems = ctx.load_problems()?;
    let version = resolve_version(&pool, version)?;
    let members = pool.members(&version.member_ids)?;
    let backend = ctx.backend(&problems);
    let scorer = BackendScorer::new(backend.as_ref(), &problems);
    let selected = select_sft(&members, &ctx.config.select, Some(&scorer as &dyn RecordScorer))?;
    let lengths = LengthStats::of(selected.iter().filter_map(|r| r.thought_chars()).collect());
    println!(
        "{}: would keep {} of {} members",
        version.version_id,
        selected.len(),
        members.len()
    );
    println!(
        "thought chars: mean {:.1}, p50 {}, p90 {}",
        lengths.mean, lengths.p50, lengths.p90
    );
    Ok(())
}

fn cmd_emit_sft(ctx: &Context, version: Option<&str>, out: Option<&Path>) -> Result<(), CliFailure> {
    let mut pool = ctx.open_pool()?;
    let problems = ctx.load_problems()?;
    let version = resolve_version(&pool, version)?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out_dir().join(&version.version_id).join("sft.jsonl"));
    let backend = ctx.backend(&problems);
    let (rows, lengths) = emit_sft_file(
        &mut pool,
        &problems,
        &version,
        &ctx.config,
        Some(backend.as_ref()),
        &out_path,
    )?;
    println!(
        "{}: wrote {rows} rows to {} (thought chars mean {:.1}, p50 {}, p90 {})",
        version.version_id,
        out_path.display(),
        lengths.mean,
        lengths.p50,
        lengths.p90
    );
    Ok(())
}

fn cmd_emit_dpo(
    ctx: &Context,
    version: Option<&str>,
    out: Option<&Path>,
    mode: Option<ModeChoice>,
) -> Result<(), CliFailure> {
    let mut pool = ctx.open_pool()?;
    let problems = ctx.load_problems()?;
    let version = resolve_version(&pool, version)?;
    let mode = mode.map(ModeChoice::mode).unwrap_or(ctx.config.dpo.mode);
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out_dir().join(&version.version_id).join("dpo.jsonl"));
    let backend = ctx.backend(&problems);
    let pairs = emit_dpo_file(
        &mut pool,
        &problems,
        &version,
        mode,
        Some(backend.as_ref()),
        &out_path,
    )?;
    println!(
        "{}: wrote {pairs} pairs to {}",
        version.version_id,
        out_path.display()
    );
    Ok(())
}

fn cmd_iterate(ctx: &Context, iterations: Option<u32>) -> Result<(), CliFailure> {
    let cap = iterations.unwrap_or(ctx.config.max_iterations);
    let mut pool = ctx.open_pool()?;
    let problems = ctx.load_problems()?;
    let backend = ctx.backend(&problems);
    let out_dir = ctx.out_dir();
    let run = run_until_exhausted(
        &mut pool,
        &problems,
        backend.as_ref(),
        &ctx.config,
        &out_dir,
        ctx.record_timestamps(),
        cap,
    )?;
    for outcome in &run.iterations {
        match &outcome.version {
            Some(version) => println!(
                "{}: {} targets, {} solved, {} new correct, {} members",
                version.version_id,
                outcome.targets,
                outcome.explore.solved_count,
                outcome.new_correct,
                version.member_ids.len()
            ),
            None => println!(
                "iteration {}: {} targets, no new correct trajectories",
                outcome.iteration, outcome.targets
            ),
        }
        if outcome.explore.failures > 0 {
            eprintln!(
                "warning: iteration {}: {} rollout streams ended in backend errors",
                outcome.iteration, outcome.explore.failures
            );
        }
    }
    // A round where every stream died is a dead backend, not exhaustion.
    if let Some(last) = run.iterations.last() {
        if last.targets > 0
            && last.explore.failures == last.targets
            && last.explore.records_written == 0
        {
            let failure = last
                .explore
                .outcomes
                .iter()
                .rev()
                .find_map(|o| o.failure.as_ref())
                .expect("a failed stream recorded its error");
            return Err(backend_failure(format!(
                "every rollout stream failed during iteration {}; last: {failure}",
                last.iteration
            )));
        }
    }
    if run.iterations.iter().any(|o| o.version.is_some()) {
        println!("training files under {}", out_dir.display());
    }
    if run.converged {
        println!("exhausted: no new correct trajectories");
    } else {
        println!("stopped at the iteration cap ({cap})");
    }
    Ok(())
}

fn cmd_stats(ctx: &Context, version: Option<&str>) -> Result<(), CliFailure> {
    let mut pool = ctx.open_pool()?;
    let problems = ctx.load_problems()?;
    let records = match version {
        Some(id) => {
            let version = pool.read_version(id)?;
            let parent = version
                .parent
                .as_ref()
                .map(|p| format!(", parent {p}"))
                .unwrap_or_default();
            println!(
                "version {} (iteration {}{parent}, {} members)",
                version.version_id,
                version.iteration,
                version.member_ids.len()
            );
            pool.members(&version.member_ids)?
        }
        None => pool.load_all()?,
    };
    let stats = pool_stats(&records, (!problems.is_empty()).then_some(&problems));
    println!("{stats}");
    Ok(())
}
