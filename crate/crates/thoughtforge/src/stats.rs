//! Accounting over pool contents: counts by origin, verdict, and iteration,
//! solve coverage, and thought-length distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thoughtforge_core::corpus::Problem;
use thoughtforge_core::record::TrajectoryRecord;
use thoughtforge_core::verify::VerdictReason;

/// Count, mean, median, and 90th percentile of a set of lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthStats {
    pub count: usize,
    pub mean: f64,
    pub p50: usize,
    pub p90: usize,
}

impl LengthStats {
    /// Nearest-rank percentiles over the given lengths. An empty input
    /// yields all-zero stats.
    pub fn of(mut lengths: Vec<usize>) -> LengthStats {
        if lengths.is_empty() {
            return LengthStats {
                count: 0,
                mean: 0.0,
                p50: 0,
                p90: 0,
            };
        }
        lengths.sort_unstable();
        let count = lengths.len();
        let mean = lengths.iter().sum::<usize>() as f64 / count as f64;
        LengthStats {
            count,
            mean,
            p50: percentile(&lengths, 0.50),
            p90: percentile(&lengths, 0.90),
        }
    }
}

/// Nearest-rank percentile of a sorted, non-empty slice.
fn percentile(sorted: &[usize], q: f64) -> usize {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn reason_name(reason: VerdictReason) -> &'static str {
    match reason {
        VerdictReason::Matched => "matched",
        VerdictReason::Mismatch => "mismatch",
        VerdictReason::NoAnswerFound => "no_answer_found",
        VerdictReason::Unparseable => "unparseable",
    }
}

/// Summary of a record set, printable as a small text report.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolStats {
    pub records: usize,
    /// Distinct problems referenced by at least one record.
    pub problems: usize,
    /// Distinct problems with at least one correct record.
    pub solved_problems: usize,
    pub correct_records: usize,
    pub by_origin: BTreeMap<&'static str, usize>,
    pub by_verdict: BTreeMap<&'static str, usize>,
    pub by_iteration: BTreeMap<u32, usize>,
    /// Counts per `domain/difficulty` bucket; present only when problem
    /// metadata was supplied.
    pub by_bucket: Option<BTreeMap<String, usize>>,
    /// Thought lengths (characters) of the records that parse.
    pub thought_chars: LengthStats,
}

/// Summarizes `records`, attributing domain/difficulty buckets when the
/// problem set is available.
pub fn pool_stats(
    records: &[TrajectoryRecord],
    problems: Option<&BTreeMap<String, Problem>>,
) -> PoolStats {
    let mut referenced: BTreeSet<&str> = BTreeSet::new();
    let mut solved: BTreeSet<&str> = BTreeSet::new();
    let mut by_origin: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut by_verdict: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut by_iteration: BTreeMap<u32, usize> = BTreeMap::new();
    let mut by_bucket: BTreeMap<String, usize> = BTreeMap::new();
    let mut lengths: Vec<usize> = Vec::new();
    let mut correct_records = 0;

    for rec in records {
        referenced.insert(&rec.problem_id);
        if rec.verdict.correct {
            correct_records += 1;
            solved.insert(&rec.problem_id);
        }
        *by_origin.entry(rec.provenance.origin.name()).or_default() += 1;
        *by_verdict.entry(reason_name(rec.verdict.reason)).or_default() += 1;
        *by_iteration.entry(rec.provenance.iteration).or_default() += 1;
        if let Some(problems) = problems {
            if let Some(problem) = problems.get(&rec.problem_id) {
                *by_bucket.entry(problem.bucket()).or_default() += 1;
            }
        }
        if let Some(chars) = rec.thought_chars() {
            lengths.push(chars);
        }
    }

    PoolStats {
        records: records.len(),
        problems: referenced.len(),
        solved_problems: solved.len(),
        correct_records,
        by_origin,
        by_verdict,
        by_iteration,
        by_bucket: problems.map(|_| by_bucket),
        thought_chars: LengthStats::of(lengths),
    }
}

impl fmt::Display for PoolStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records          {}", self.records)?;
        writeln!(f, "problems         {}", self.problems)?;
        let coverage = if self.problems == 0 {
            0.0
        } else {
            100.0 * self.solved_problems as f64 / self.problems as f64
        };
        writeln!(
            f,
            "solved problems  {} ({coverage:.1}%)",
            self.solved_problems
        )?;
        writeln!(f, "correct records  {}", self.correct_records)?;
        writeln!(f, "by origin:")?;
        for (name, count) in &self.by_origin {
            writeln!(f, "  {name:<16} {count}")?;
        }
        writeln!(f, "by verdict:")?;
        for (name, count) in &self.by_verdict {
            writeln!(f, "  {name:<16} {count}")?;
        }
        writeln!(f, "by iteration:")?;
        for (iteration, count) in &self.by_iteration {
            writeln!(f, "  {iteration:<16} {count}")?;
        }
        if let Some(buckets) = &self.by_bucket {
            writeln!(f, "by bucket:")?;
            for (bucket, count) in buckets {
                writeln!(f, "  {bucket:<16} {count}")?;
            }
        }
        write!(
            f,
            "thought chars    mean {:.1}, p50 {}, p90 {} (n={})",
            self.thought_chars.mean, self.thought_chars.p50, self.thought_chars.p90,
            self.thought_chars.count
        )
    }
}
