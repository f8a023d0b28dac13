//! Answer extraction and equivalence checking.
//!
//! Solutions carry their final answer either in the last balanced
//! `\boxed{...}` group or after a final-answer cue on the last line.
//! Extracted answers are normalized per ground-truth kind and compared with
//! exact rational arithmetic where possible, falling back to a combined
//! absolute/relative tolerance for inexact values.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

/// Combined absolute/relative tolerance used when either side of a numeric
/// comparison is not exact.
pub const NUMERIC_TOLERANCE: f64 = 1e-6;

/// A problem's reference answer.
///
/// Numeric values are stored exactly (integer, fraction `a/b`, or decimal);
/// choices are a single letter `A`–`Z`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum GroundTruth {
    Numeric(String),
    Expression(String),
    Choice(String),
    #[serde(rename = "string")]
    Text(String),
}

impl GroundTruth {
    pub fn numeric(value: &str) -> Self {
        GroundTruth::Numeric(value.trim().to_string())
    }

    pub fn expression(value: &str) -> Self {
        GroundTruth::Expression(value.trim().to_string())
    }

    /// Stores the uppercased letter.
    pub fn choice(letter: char) -> Self {
        GroundTruth::Choice(letter.to_ascii_uppercase().to_string())
    }

    pub fn text(value: &str) -> Self {
        GroundTruth::Text(value.trim().to_string())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            GroundTruth::Numeric(_) => "numeric",
            GroundTruth::Expression(_) => "expression",
            GroundTruth::Choice(_) => "choice",
            GroundTruth::Text(_) => "string",
        }
    }

    pub fn value(&self) -> &str {
        match self {
            GroundTruth::Numeric(v)
            | GroundTruth::Expression(v)
            | GroundTruth::Choice(v)
            | GroundTruth::Text(v) => v,
        }
    }

    /// The answer rendered back to text, as a model would state it.
    pub fn answer_text(&self) -> String {
        self.value().to_string()
    }
}

/// Why a verdict came out the way it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Matched,
    Mismatch,
    NoAnswerFound,
    Unparseable,
}

/// Outcome of checking one response against a ground truth.
///
/// `correct` implies `extracted` is present and `reason` is `Matched`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub extracted: Option<String>,
    pub reason: VerdictReason,
}

impl Verdict {
    pub fn matched(extracted: &str) -> Self {
        Verdict {
            correct: true,
            extracted: Some(extracted.to_string()),
            reason: VerdictReason::Matched,
        }
    }

    pub fn mismatch(extracted: &str) -> Self {
        Verdict {
            correct: false,
            extracted: Some(extracted.to_string()),
            reason: VerdictReason::Mismatch,
        }
    }

    pub fn no_answer_found() -> Self {
        Verdict {
            correct: false,
            extracted: None,
            reason: VerdictReason::NoAnswerFound,
        }
    }

    /// For responses whose trajectory structure could not be parsed at all.
    pub fn unparseable() -> Self {
        Verdict {
            correct: false,
            extracted: None,
            reason: VerdictReason::Unparseable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerifyError {
    #[error("cannot normalize {input:?} as {kind}")]
    Unparseable { kind: &'static str, input: String },
}

/// Pulls the final answer out of a rendered solution.
///
/// Prefers the content of the last balanced `\boxed{...}` group; without one,
/// falls back to the last line's trailing tokens after a final-answer cue
/// (`answer is` or `=`). Returns `None` when neither is present.
pub fn extract_answer(solution_text: &str) -> Option<String> {
    let occurrences: Vec<usize> = solution_text
        .match_indices("\\boxed{")
        .map(|(i, _)| i)
        .collect();
    for start in occurrences.iter().rev() {
        if let Some(inner) = scan_balanced_group(&solution_text[start + "\\boxed{".len() - 1..]) {
            return Some(inner);
        }
    }

    let last_line = solution_text.lines().rev().find(|l| !l.trim().is_empty())?;
    let lower = last_line.to_lowercase();
    if let Some(pos) = lower.rfind("answer is") {
        let tail = last_line[pos + "answer is".len()..]
            .trim_start_matches([':', ',', ' '])
            .trim()
            .trim_end_matches(['.', '!'])
            .trim_matches('*')
            .trim();
        if !tail.is_empty() {
            return Some(tail.to_string());
        }
    }
    if let Some(pos) = last_line.rfind('=') {
        let tail = last_line[pos + 1..].trim().trim_end_matches(['.', '!']).trim();
        if !tail.is_empty() {
            return Some(tail.to_string());
        }
    }
    None
}

/// Reads the content of a `{...}` group starting at the opening brace,
/// counting nested braces and skipping escaped characters. Returns `None`
/// when the group never closes.
fn scan_balanced_group(text: &str) -> Option<String> {
    let mut chars = text.char_indices();
    match chars.next() {
        Some((_, '{')) => {}
        _ => return None,
    }
    let mut depth = 1usize;
    while let Some((i, c)) = chars.next() {
        match c {
            '\\' => {
                chars.next();
            }
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[1..i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Normalizes an answer string according to the ground-truth kind it will be
/// compared under. See the per-kind rules in [`equivalent`].
pub fn normalize(answer: &str, kind: &GroundTruth) -> Result<String, VerifyError> {
    let cleaned = strip_latex_noise(answer);
    match kind {
        GroundTruth::Numeric(_) => match first_number(&cleaned) {
            Some((_, display)) => Ok(display),
            None => Err(VerifyError::Unparseable {
                kind: "numeric",
                input: answer.to_string(),
            }),
        },
        GroundTruth::Expression(_) => Ok(normalize_expression(&cleaned)),
        GroundTruth::Choice(_) => match extract_choice_letter(&cleaned) {
            Some(letter) => Ok(letter.to_string()),
            None => Err(VerifyError::Unparseable {
                kind: "choice",
                input: answer.to_string(),
            }),
        },
        GroundTruth::Text(_) => Ok(normalize_text(&cleaned)),
    }
}

/// Checks an extracted answer against a ground truth.
///
/// - numeric: exact rational equality when both sides parse exactly,
///   otherwise combined absolute/relative tolerance of [`NUMERIC_TOLERANCE`];
/// - expression: normalized string equality, with tuple-aware comparison
///   (top-level comma split inside parentheses) and per-component numeric
///   fallback;
/// - choice: single-letter comparison, case-insensitive;
/// - string: case-insensitive comparison with collapsed whitespace.
pub fn equivalent(answer: &str, truth: &GroundTruth) -> Verdict {
    let matched = match truth {
        GroundTruth::Numeric(expected) => numbers_match(answer, expected),
        GroundTruth::Expression(expected) => expressions_match(answer, expected),
        GroundTruth::Choice(expected) => {
            let got = extract_choice_letter(&strip_latex_noise(answer));
            let want = extract_choice_letter(expected);
            match (got, want) {
                (Some(g), Some(w)) => g == w,
                _ => false,
            }
        }
        GroundTruth::Text(expected) => {
            normalize_text(&strip_latex_noise(answer)) == normalize_text(expected)
        }
    };
    if matched {
        Verdict::matched(&answer)
    } else {
        Verdict::mismatch(&answer)
    }
}

/// Extraction plus equivalence in one step: the verdict for a rendered
/// solution section.
pub fn verify_solution(solution_text: &str, truth: &GroundTruth) -> Verdict {
    match extract_answer(solution_text) {
        Some(answer) => equivalent(&answer, truth),
        None => Verdict::no_answer_found(),
    }
}

/// A parsed numeric value: exact rational when the text permits, otherwise a
/// float approximation (scientific notation, overflow).
#[derive(Debug, Clone, Copy, PartialEq)]
enum Number {
    Exact(Ratio<i128>),
    Approx(f64),
}

impl Number {
    fn to_f64(self) -> f64 {
        match self {
            Number::Exact(r) => *r.numer() as f64 / *r.denom() as f64,
            Number::Approx(v) => v,
        }
    }
}

fn numbers_match(answer: &str, expected: &str) -> bool {
    let got = first_number(&strip_latex_noise(answer)).map(|(value, _)| value);
    let want = first_number(&strip_latex_noise(expected)).map(|(value, _)| value);
    let (got, want) = match (got, want) {
        (Some(g), Some(w)) => (g, w),
        _ => return false,
    };
    match (got, want) {
        (Number::Exact(a), Number::Exact(b)) => a == b,
        (a, b) => {
            let (x, y) = (a.to_f64(), b.to_f64());
            (x - y).abs() <= NUMERIC_TOLERANCE.max(NUMERIC_TOLERANCE * y.abs())
        }
    }
}

fn expressions_match(answer: &str, expected: &str) -> bool {
    let a = normalize_expression(&strip_latex_noise(answer));
    let b = normalize_expression(&strip_latex_noise(expected));
    if a == b {
        return true;
    }
    let parts_a = split_top_level(&a);
    let parts_b = split_top_level(&b);
    if parts_a.len() != parts_b.len() {
        return false;
    }
    parts_a.iter().zip(parts_b.iter()).all(|(x, y)| {
        x == y
            || match (
                parse_number(x).map(|(value, _)| value),
                parse_number(y).map(|(value, _)| value),
            ) {
                (Some(Number::Exact(p)), Some(Number::Exact(q))) => p == q,
                (Some(p), Some(q)) => {
                    let (x, y) = (p.to_f64(), q.to_f64());
                    (x - y).abs() <= NUMERIC_TOLERANCE.max(NUMERIC_TOLERANCE * y.abs())
                }
                _ => false,
            }
    })
}

/// Strips `$` delimiters, `\,` spacing, and unwraps `\text{...}` groups,
/// keeping their content surrounded by spaces.
fn strip_latex_noise(answer: &str) -> String {
    let mut out = answer.replace('$', "").replace("\\,", " ");
    while let Some(pos) = out.find("\\text{") {
        let group_start = pos + "\\text".len();
        match scan_balanced_group(&out[group_start..]) {
            Some(inner) => {
                let after = group_start + 1 + inner.len() + 1;
                out = format!("{} {} {}", &out[..pos], inner, &out[after..]);
            }
            None => break,
        }
    }
    out.trim().to_string()
}

/// Rewrites `\frac{A}{B}` (and `\dfrac`/`\tfrac`) as `A/B`, reducing when both
/// sides are integers.
fn rewrite_fractions(text: &str) -> String {
    let mut out = text.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac");
    while let Some(pos) = out.find("\\frac{") {
        let first_start = pos + "\\frac".len();
        let Some(numer) = scan_balanced_group(&out[first_start..]) else {
            break;
        };
        let second_start = first_start + 1 + numer.len() + 1;
        if !out[second_start..].starts_with('{') {
            break;
        }
        let Some(denom) = scan_balanced_group(&out[second_start..]) else {
            break;
        };
        let after = second_start + 1 + denom.len() + 1;
        let replacement = match (parse_integer(&numer), parse_integer(&denom)) {
            (Some(n), Some(d)) if d != 0 => render_number(&Number::Exact(Ratio::new(n, d))),
            _ => format!("{}/{}", numer.trim(), denom.trim()),
        };
        out = format!("{}{}{}", &out[..pos], replacement, &out[after..]);
    }
    out
}

/// Expression canonical form: fractions rewritten, whitespace removed,
/// decimals trimmed, and letters lowercased outside `\command` names.
fn normalize_expression(text: &str) -> String {
    let rewritten = rewrite_fractions(text);
    let mut out = String::with_capacity(rewritten.len());
    let mut chars = rewritten.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        if c == '\\' {
            out.push(c);
            while let Some(&n) = chars.peek() {
                if n.is_ascii_alphabetic() {
                    out.push(n);
                    chars.next();
                } else {
                    break;
                }
            }
        } else {
            out.extend(c.to_lowercase());
        }
    }
    trim_decimal_zeros(&out)
}

/// Removes trailing zeros from decimal literals: `2.50` -> `2.5`, `3.0` -> `3`.
fn trim_decimal_zeros(text: &str) -> String {
    let bytes: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len()
                && bytes[i] == '.'
                && i + 1 < bytes.len()
                && bytes[i + 1].is_ascii_digit()
            {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let mut literal: String = bytes[start..i].iter().collect();
                while literal.ends_with('0') {
                    literal.pop();
                }
                if literal.ends_with('.') {
                    literal.pop();
                }
                out.push_str(&literal);
            } else {
                out.extend(&bytes[start..i]);
            }
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    out
}

fn normalize_text(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed: Vec<&str> = lowered.split_whitespace().collect();
    collapsed.join(" ").trim_end_matches('.').to_string()
}

fn extract_choice_letter(text: &str) -> Option<char> {
    let trimmed = text
        .trim()
        .trim_matches(['(', ')', '[', ']', '{', '}'])
        .trim_end_matches(['.', ':', ')'])
        .trim();
    let mut letters = trimmed.chars().filter(|c| c.is_ascii_alphabetic());
    match (letters.next(), letters.next()) {
        (Some(letter), None) if trimmed.chars().count() <= 2 => {
            Some(letter.to_ascii_uppercase())
        }
        _ => None,
    }
}

/// Splits a normalized expression on commas at parenthesis depth zero,
/// stripping one layer of outer parentheses when it wraps the whole string.
fn split_top_level(text: &str) -> Vec<String> {
    let inner = strip_outer_parens(text);
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for c in inner.chars() {
        match c {
            '(' | '[' | '{' => {
                depth += 1;
                current.push(c);
            }
            ')' | ']' | '}' => {
                depth = depth.saturating_sub(1);
                current.push(c);
            }
            ',' if depth == 0 => {
                parts.push(core::mem::take(&mut current));
            }
            _ => current.push(c),
        }
    }
    parts.push(current);
    parts
}

fn strip_outer_parens(text: &str) -> &str {
    if !(text.starts_with('(') && text.ends_with(')')) {
        return text;
    }
    let mut depth = 0usize;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 && i != text.len() - 1 {
                    return text; // outer parens do not wrap the whole string
                }
            }
            _ => {}
        }
    }
    &text[1..text.len() - 1]
}

/// Finds the first number in the text: an integer, a decimal, or a fraction
/// `a/b` (after `\frac` rewriting). Digit-group commas are tolerated.
/// Returns the parsed value together with its canonical display, which
/// preserves the written form: fractions stay fractions (reduced), decimals
/// stay decimals (trailing zeros trimmed).
fn first_number(text: &str) -> Option<(Number, String)> {
    let rewritten = rewrite_fractions(text);
    let stripped = strip_digit_group_commas(&rewritten);
    for token in stripped.split_whitespace() {
        let candidate = token.trim_matches(|c: char| {
            !(c.is_ascii_digit() || c == '-' || c == '+' || c == '.')
        });
        if candidate.is_empty() {
            // A fraction like `1/2` survives only full-token parsing.
            if let Some((value, form)) = parse_number(token) {
                return Some((value, display_number(&value, form, token)));
            }
            continue;
        }
        if let Some((value, form)) = parse_number(candidate) {
            return Some((value, display_number(&value, form, candidate)));
        }
        if let Some((value, form)) = parse_number(token) {
            return Some((value, display_number(&value, form, token)));
        }
    }
    let rest = stripped.trim();
    parse_number(rest).map(|(value, form)| {
        let display = display_number(&value, form, rest);
        (value, display)
    })
}

fn strip_digit_group_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == ','
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())
        {
            continue;
        }
        out.push(c);
    }
    out
}

/// How a numeric literal was written, which normalization preserves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NumberForm {
    Integer,
    Fraction,
    Decimal,
    Scientific,
}

/// Parses one numeric literal: integer, fraction of integers, or decimal.
/// Scientific notation and overflowing decimals fall back to an approximate
/// float.
fn parse_number(text: &str) -> Option<(Number, NumberForm)> {
    let t = text.trim().trim_start_matches('+');
    if t.is_empty() {
        return None;
    }
    if let Some(v) = parse_integer(t) {
        return Some((Number::Exact(Ratio::from_integer(v)), NumberForm::Integer));
    }
    if let Some((numer, denom)) = t.split_once('/') {
        if let (Some(n), Some(d)) = (parse_integer(numer.trim()), parse_integer(denom.trim())) {
            if d != 0 {
                return Some((Number::Exact(Ratio::new(n, d)), NumberForm::Fraction));
            }
        }
        return None;
    }
    if let Some((whole, frac)) = t.split_once('.') {
        let negative = whole.starts_with('-');
        let whole_digits = whole.trim_start_matches('-');
        if (whole_digits.is_empty() || whole_digits.bytes().all(|b| b.is_ascii_digit()))
            && !frac.is_empty()
            && frac.bytes().all(|b| b.is_ascii_digit())
        {
            let scale = 10i128.checked_pow(frac.len() as u32);
            let whole_val: Option<i128> = if whole_digits.is_empty() {
                Some(0)
            } else {
                whole_digits.parse().ok()
            };
            if let (Some(scale), Some(whole_val), Ok(frac_val)) =
                (scale, whole_val, frac.parse::<i128>())
            {
                if let Some(numer) = whole_val
                    .checked_mul(scale)
                    .and_then(|w| w.checked_add(frac_val))
                {
                    let signed = if negative { -numer } else { numer };
                    return Some((Number::Exact(Ratio::new(signed, scale)), NumberForm::Decimal));
                }
            }
        }
    }
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(|v| (Number::Approx(v), NumberForm::Scientific))
}

fn parse_integer(text: &str) -> Option<i128> {
    let t = text.trim().trim_start_matches('+');
    if t.is_empty() || t == "-" {
        return None;
    }
    let digits = t.strip_prefix('-').unwrap_or(t);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    t.parse().ok()
}

/// Canonical display that keeps the literal's written form: integers and
/// fractions render from the reduced value, decimals keep decimal notation
/// with trailing zeros trimmed, anything approximate renders as the
/// shortest float.
fn display_number(value: &Number, form: NumberForm, token: &str) -> String {
    match (value, form) {
        (Number::Exact(_), NumberForm::Decimal) => canonical_decimal(token),
        (Number::Approx(v), _) => format!("{v}"),
        (Number::Exact(_), _) => render_number(value),
    }
}

/// Tidies a decimal literal in place: strips an explicit plus sign, leading
/// zeros in the integer part, trailing zeros in the fraction, and a then
/// dangling decimal point ("02.50" -> "2.5", "3.0" -> "3", ".5" -> "0.5").
fn canonical_decimal(token: &str) -> String {
    let t = token.trim().trim_start_matches('+');
    let (negative, digits) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    let int_part = int_part.trim_start_matches('0');
    let frac_part = frac_part.trim_end_matches('0');
    let mut out = String::new();
    if negative && !(int_part.is_empty() && frac_part.is_empty()) {
        out.push('-');
    }
    out.push_str(if int_part.is_empty() { "0" } else { int_part });
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    out
}

/// Canonical text for a parsed number: reduced `a/b` for non-integral
/// rationals, plain integer otherwise, shortest float for approximations.
fn render_number(number: &Number) -> String {
    match number {
        Number::Exact(r) => {
            if *r.denom() == 1 {
                format!("{}", r.numer())
            } else {
                format!("{}/{}", r.numer(), r.denom())
            }
        }
        Number::Approx(v) => format!("{v}"),
    }
}
