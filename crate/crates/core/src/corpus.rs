//! Problem corpus: problem records, text-quality scores, the fixed-order
//! rejection filter, and seeded mixture sampling over domain/difficulty
//! buckets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::format::parse_trajectory;
use crate::record::TrajectoryRecord;
use crate::util::{sha_hex, sha_u64};
use crate::verify::GroundTruth;

/// Task family a problem belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Math,
    Code,
    Science,
    Puzzle,
}

impl Domain {
    /// Stable lowercase name, matching the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            Domain::Math => "math",
            Domain::Code => "code",
            Domain::Science => "science",
            Domain::Puzzle => "puzzle",
        }
    }
}

impl core::fmt::Display for Domain {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Difficulty tier a problem is tagged with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Normal,
    Hard,
}

impl Difficulty {
    /// Stable lowercase name, matching the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Normal => "normal",
            Difficulty::Hard => "hard",
        }
    }
}

impl core::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// A problem with its reference answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    /// Content id derived from the whitespace-normalized statement text.
    pub id: String,
    pub text: String,
    pub domain: Domain,
    pub difficulty: Difficulty,
    pub answer: GroundTruth,
    /// Where the problem came from (dataset or collection name).
    pub source: String,
}

impl Problem {
    /// Builds a problem, deriving its id from the statement text.
    pub fn new(
        text: &str,
        domain: Domain,
        difficulty: Difficulty,
        answer: GroundTruth,
        source: &str,
    ) -> Self {
        Problem {
            id: problem_id(text),
            text: text.to_string(),
            domain,
            difficulty,
            answer,
            source: source.to_string(),
        }
    }

    /// Mixture bucket this problem falls into, e.g. `math/hard`.
    pub fn bucket(&self) -> String {
        bucket_name(self.domain, self.difficulty)
    }
}

/// Bucket label for a (domain, difficulty) pair, e.g. `science/normal`.
pub fn bucket_name(domain: Domain, difficulty: Difficulty) -> String {
    format!("{domain}/{difficulty}")
}

/// Content id for a problem: hex SHA-256 of the statement with all
/// whitespace runs collapsed to single spaces, so formatting variants of the
/// same statement share an id.
pub fn problem_id(text: &str) -> String {
    let collapsed: Vec<&str> = text.split_whitespace().collect();
    sha_hex(&[collapsed.join(" ").as_bytes()])
}

// ---------------------------------------------------------------------------
// Text-quality scores
// ---------------------------------------------------------------------------

/// Fraction of repeated word n-grams in `text`: `1 - distinct/total` over
/// whitespace tokens. Returns 0.0 when the text has at most one n-gram (or
/// `n` is 0), since repetition is undefined there.
pub fn repetition_score(text: &str, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    if total <= 1 {
        return 0.0;
    }
    let distinct: BTreeSet<&[&str]> = tokens.windows(n).collect();
    1.0 - distinct.len() as f64 / total as f64
}

/// Fraction of alphabetic codepoints belonging to the minority script,
/// counted over Latin letters and CJK ideographs (plus kana). Returns 0.0
/// when either script is absent: a single-script text is not mixed.
pub fn language_mix_score(text: &str) -> f64 {
    let mut latin = 0u64;
    let mut cjk = 0u64;
    for c in text.chars() {
        if is_latin_letter(c) {
            latin += 1;
        } else if is_cjk_letter(c) {
            cjk += 1;
        }
    }
    if latin == 0 || cjk == 0 {
        return 0.0;
    }
    latin.min(cjk) as f64 / (latin + cjk) as f64
}

fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic() || (('\u{00C0}'..='\u{024F}').contains(&c) && c.is_alphabetic())
}

fn is_cjk_letter(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}'   // unified ideographs
        | '\u{3400}'..='\u{4DBF}' // ideograph extension A
        | '\u{F900}'..='\u{FAFF}' // compatibility ideographs
        | '\u{3040}'..='\u{309F}' // hiragana
        | '\u{30A0}'..='\u{30FF}' // katakana
        | '\u{AC00}'..='\u{D7AF}' // hangul syllables
    )
}

/// Jaccard similarity of the word n-gram sets of two texts. Two texts that
/// are both too short to form an n-gram count as identical (1.0); if only
/// one is too short they count as disjoint (0.0).
pub fn near_duplicate(a: &str, b: &str, n: usize) -> f64 {
    let tokens_a: Vec<&str> = a.split_whitespace().collect();
    let tokens_b: Vec<&str> = b.split_whitespace().collect();
    let grams_a: BTreeSet<&[&str]> = if n > 0 && tokens_a.len() >= n {
        tokens_a.windows(n).collect()
    } else {
        BTreeSet::new()
    };
    let grams_b: BTreeSet<&[&str]> = if n > 0 && tokens_b.len() >= n {
        tokens_b.windows(n).collect()
    } else {
        BTreeSet::new()
    };
    match (grams_a.is_empty(), grams_b.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => {
            let intersection = grams_a.intersection(&grams_b).count();
            let union = grams_a.len() + grams_b.len() - intersection;
            intersection as f64 / union as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Rejection filter
// ---------------------------------------------------------------------------

/// Thresholds for the rejection filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    /// n-gram order used by the repetition score.
    pub repetition_n: usize,
    /// Reject when the repetition score exceeds this.
    pub repetition_threshold: f64,
    /// n-gram order used by near-duplicate comparison.
    pub near_dup_n: usize,
    /// Reject when Jaccard similarity to an already-retained record of the
    /// same problem reaches this.
    pub near_dup_threshold: f64,
    /// Reject when the minority-script fraction exceeds this.
    pub language_mix_threshold: f64,
    /// Reject when the thought section has fewer characters than this.
    pub min_thought_chars: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            repetition_n: 8,
            repetition_threshold: 0.25,
            near_dup_n: 5,
            near_dup_threshold: 0.90,
            language_mix_threshold: 0.05,
            min_thought_chars: 500,
        }
    }
}

/// Why the filter rejected a record. Variants are listed in check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Malformed,
    Duplicate,
    NearDuplicate,
    Repetition,
    LanguageMix,
    TooShort,
}

/// Accounting for one filter pass. Every input record is either retained or
/// counted under exactly one rejection reason, so
/// `retained + rejected() == input` always holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub retained: usize,
    pub malformed: usize,
    pub duplicate: usize,
    pub near_duplicate: usize,
    pub repetition: usize,
    pub language_mix: usize,
    pub too_short: usize,
}

impl FilterReport {
    /// Total rejected across all reasons.
    pub fn rejected(&self) -> usize {
        self.malformed
            + self.duplicate
            + self.near_duplicate
            + self.repetition
            + self.language_mix
            + self.too_short
    }

    /// Whether the counts add up.
    pub fn balances(&self) -> bool {
        self.retained + self.rejected() == self.input
    }

    fn count(&mut self, reason: RejectReason) {
        match reason {
            RejectReason::Malformed => self.malformed += 1,
            RejectReason::Duplicate => self.duplicate += 1,
            RejectReason::NearDuplicate => self.near_duplicate += 1,
            RejectReason::Repetition => self.repetition += 1,
            RejectReason::LanguageMix => self.language_mix += 1,
            RejectReason::TooShort => self.too_short += 1,
        }
    }
}

/// Runs the rejection filter over records in input order. Checks apply in a
/// fixed sequence — malformed, exact duplicate, near-duplicate, repetition,
/// language mix, too short — and the first failing check decides the
/// rejection reason.
///
/// Exact duplicates are keyed on the full text, across all problems.
/// Near-duplicate comparison is scoped to records already retained for the
/// same problem, which makes the filter idempotent: running it again over
/// its own retained output rejects nothing.
pub fn filter_records(
    records: &[TrajectoryRecord],
    policy: &FilterPolicy,
) -> (Vec<TrajectoryRecord>, FilterReport) {
    let mut report = FilterReport {
        input: records.len(),
        ..FilterReport::default()
    };
    let mut seen_texts: BTreeSet<String> = BTreeSet::new();
    // problem_id -> indices into `retained`
    let mut retained_by_problem: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut retained: Vec<TrajectoryRecord> = Vec::new();

    'next: for rec in records {
        let Ok(traj) = parse_trajectory(&rec.text) else {
            report.count(RejectReason::Malformed);
            continue;
        };
        let text_hash = sha_hex(&[rec.text.as_bytes()]);
        if !seen_texts.insert(text_hash) {
            report.count(RejectReason::Duplicate);
            continue;
        }
        if let Some(indices) = retained_by_problem.get(&rec.problem_id) {
            for &i in indices {
                if near_duplicate(&rec.text, &retained[i].text, policy.near_dup_n)
                    >= policy.near_dup_threshold
                {
                    report.count(RejectReason::NearDuplicate);
                    continue 'next;
                }
            }
        }
        if repetition_score(&rec.text, policy.repetition_n) > policy.repetition_threshold {
            report.count(RejectReason::Repetition);
            continue;
        }
        if language_mix_score(&rec.text) > policy.language_mix_threshold {
            report.count(RejectReason::LanguageMix);
            continue;
        }
        if traj.thought_chars() < policy.min_thought_chars {
            report.count(RejectReason::TooShort);
            continue;
        }
        retained_by_problem
            .entry(rec.problem_id.clone())
            .or_default()
            .push(retained.len());
        retained.push(rec.clone());
    }

    report.retained = retained.len();
    debug_assert!(report.balances());
    (retained, report)
}

// ---------------------------------------------------------------------------
// Mixture sampling
// ---------------------------------------------------------------------------

/// Errors from mixture validation and sampling.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid mix spec: {0}")]
    InvalidMixSpec(&'static str),
    #[error("bucket {bucket} has only {available} candidates, quota needs {wanted}")]
    BucketUnderflow {
        bucket: String,
        wanted: usize,
        available: usize,
    },
}

/// Target mixture over buckets for drawing a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Bucket name (e.g. `math/hard`) to non-negative weight. Weights are
    /// normalized before apportionment, so they need not sum to 1.
    pub weights: BTreeMap<String, f64>,
    /// Number of items to draw in total.
    pub total: usize,
    /// When a bucket has fewer candidates than its quota, take what exists
    /// instead of erroring. The sample then comes up short.
    #[serde(default)]
    pub allow_shortfall: bool,
}

impl MixSpec {
    /// Validates the spec: weights must be finite and non-negative, with at
    /// least one strictly positive.
    pub fn check(&self) -> Result<(), CorpusError> {
        if self.weights.is_empty() {
            return Err(CorpusError::InvalidMixSpec("no buckets"));
        }
        let mut any_positive = false;
        for w in self.weights.values() {
            if !w.is_finite() || *w < 0.0 {
                return Err(CorpusError::InvalidMixSpec(
                    "weights must be finite and non-negative",
                ));
            }
            any_positive |= *w > 0.0;
        }
        if !any_positive {
            return Err(CorpusError::InvalidMixSpec(
                "at least one weight must be positive",
            ));
        }
        Ok(())
    }

    /// Splits `total` across buckets by largest-remainder apportionment:
    /// each bucket gets the floor of its proportional share, and leftover
    /// units go to the largest fractional remainders, ties broken by bucket
    /// name ascending. Quotas therefore always sum to exactly `total`.
    pub fn apportion(&self) -> Result<BTreeMap<String, usize>, CorpusError> {
        self.check()?;
        let weight_sum: f64 = self.weights.values().sum();
        let mut quotas: BTreeMap<String, usize> = BTreeMap::new();
        // (remainder, name) per bucket, for distributing the leftovers.
        let mut remainders: Vec<(f64, &str)> = Vec::new();
        let mut assigned = 0usize;
        for (name, weight) in &self.weights {
            let share = weight / weight_sum * self.total as f64;
            let floor = share as usize;
            quotas.insert(name.clone(), floor);
            remainders.push((share - floor as f64, name));
            assigned += floor;
        }
        remainders.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(b.1))
        });
        for (_, name) in remainders.iter().take(self.total - assigned) {
            *quotas.get_mut(*name).unwrap() += 1;
        }
        debug_assert_eq!(quotas.values().sum::<usize>(), self.total);
        Ok(quotas)
    }
}

/// Draws a deterministic mixture sample. Items are grouped by
/// `bucket_of`, each bucket's candidates are ordered by `sort_key`, and the
/// bucket's quota is drawn without replacement using a ChaCha stream seeded
/// from `(seed, bucket name)` — so adding items to one bucket never disturbs
/// the draw in another. Output is grouped by bucket name ascending.
///
/// A bucket with fewer candidates than its quota is an error unless the spec
/// allows shortfall, in which case every candidate it has is taken.
pub fn mix_sample<'a, T, B, K>(
    items: &'a [T],
    spec: &MixSpec,
    seed: u64,
    bucket_of: B,
    sort_key: K,
) -> Result<Vec<&'a T>, CorpusError>
where
    B: Fn(&T) -> String,
    K: Fn(&T) -> &str,
{
    let quotas = spec.apportion()?;
    let mut by_bucket: BTreeMap<String, Vec<&T>> = BTreeMap::new();
    for item in items {
        by_bucket.entry(bucket_of(item)).or_default().push(item);
    }
    let mut sample: Vec<&T> = Vec::new();
    for (bucket, wanted) in &quotas {
        if *wanted == 0 {
            continue;
        }
        let mut candidates = by_bucket.remove(bucket).unwrap_or_default();
        candidates.sort_by(|a, b| sort_key(a).cmp(sort_key(b)));
        let take = if candidates.len() < *wanted {
            if !spec.allow_shortfall {
                return Err(CorpusError::BucketUnderflow {
                    bucket: bucket.clone(),
                    wanted: *wanted,
                    available: candidates.len(),
                });
            }
            candidates.len()
        } else {
            *wanted
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sha_u64(&[&seed.to_le_bytes(), bucket.as_bytes()]));
        // Partial Fisher-Yates: only the first `take` positions matter.
        for i in 0..take {
            let j = rng.gen_range(i..candidates.len());
            candidates.swap(i, j);
        }
        sample.extend(candidates.into_iter().take(take));
    }
    Ok(sample)
}
