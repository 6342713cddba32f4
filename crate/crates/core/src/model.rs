//! Domain types shared by every stage of the pipeline: questions, sample
//! tallies, hyperparameters, pricing and the cost ledger, plus the small
//! pure functions that operate on them (answer normalization, majority vote,
//! entropy).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_difficulty: Option<f64>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_answer: gold.into(),
            gold_difficulty: None,
        }
    }

    pub fn with_difficulty(mut self, difficulty: f64) -> Self {
        self.gold_difficulty = Some(difficulty);
        self
    }
}

/// Answers drawn for one question, in draw order, with the tokens each draw cost.
///
/// When several samples come back from one request the request's input
/// tokens are attributed to the first of them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTally {
    samples: Vec<String>,
    token_cost: Vec<(u64, u64)>,
}

impl SampleTally {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a tally from already-normalized answers with zero token cost.
    pub fn from_answers<I, S>(answers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tally = Self::new();
        for a in answers {
            tally.push(a.into(), 0, 0);
        }
        tally
    }

    pub fn push(&mut self, normalized_answer: String, input_tokens: u64, output_tokens: u64) {
        self.samples.push(normalized_answer);
        self.token_cost.push((input_tokens, output_tokens));
    }

    pub fn extend_from(&mut self, other: &SampleTally) {
        self.samples.extend(other.samples.iter().cloned());
        self.token_cost.extend(other.token_cost.iter().copied());
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn token_cost(&self) -> &[(u64, u64)] {
        &self.token_cost
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_tokens(&self) -> u64 {
        self.token_cost.iter().map(|(i, _)| i).sum()
    }

    pub fn output_tokens(&self) -> u64 {
        self.token_cost.iter().map(|(_, o)| o).sum()
    }

    /// Distinct answers with their multiplicities, ordered by first occurrence.
    pub fn counts(&self) -> Vec<(&str, usize)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut counts: Vec<(&str, usize)> = Vec::new();
        for s in &self.samples {
            match index.get(s.as_str()) {
                Some(&i) => counts[i].1 += 1,
                None => {
                    index.insert(s.as_str(), counts.len());
                    counts.push((s.as_str(), 1));
                }
            }
        }
        counts
    }

    pub fn distinct(&self) -> usize {
        self.counts().len()
    }
}

/// Most frequent answer; ties go to the answer drawn first.
pub fn majority_vote(tally: &SampleTally) -> Result<(String, usize)> {
    let counts = tally.counts();
    let mut best: Option<(&str, usize)> = None;
    for (answer, count) in counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((answer, count));
        }
    }
    best.map(|(a, c)| (a.to_string(), c)).ok_or(Error::NoSamples)
}

/// Shannon entropy of the empirical answer distribution, in nats.
///
/// Exactly `0.0` when every sample agrees.
pub fn entropy(tally: &SampleTally) -> Result<f64> {
    if tally.is_empty() {
        return Err(Error::NoSamples);
    }
    let counts = tally.counts();
    if counts.len() == 1 {
        return Ok(0.0);
    }
    let n = tally.len() as f64;
    Ok(counts
        .iter()
        .map(|&(_, c)| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

static NUMERIC: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^([+-]?)(\d{1,3}(?:,\d{3})+|\d*)(?:\.(\d*))?$").unwrap()
});

const TRAILING_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '。'];

/// Canonical form used for voting and for comparing against gold answers.
///
/// Rules: trim, lowercase, drop trailing punctuation, and for numeric
/// strings remove thousands separators, leading zeros, a leading `+`, and
/// trailing fractional zeros (`"1,024.0"` becomes `"1024"`).
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    let stripped = lowered.trim_end_matches(|c: char| TRAILING_PUNCT.contains(&c) || c.is_whitespace());
    canonical_number(stripped).unwrap_or_else(|| stripped.to_string())
}

fn canonical_number(s: &str) -> Option<String> {
    let caps = NUMERIC.captures(s)?;
    let sign = caps.get(1).map_or("", |m| m.as_str());
    let int_raw = caps.get(2).map_or("", |m| m.as_str()).replace(',', "");
    let frac_raw = caps.get(3).map_or("", |m| m.as_str());
    if int_raw.is_empty() && frac_raw.is_empty() {
        return None;
    }
    let int_part = int_raw.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let frac_part = frac_raw.trim_end_matches('0');
    let mut out = String::new();
    let is_zero = int_part == "0" && frac_part.is_empty();
    if sign == "-" && !is_zero {
        out.push('-');
    }
    out.push_str(int_part);
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    Some(out)
}

static ANSWER_IS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)answer is[:\s]*([^\n]*)").unwrap());

/// Pulls the final answer out of a chain-of-thought completion.
///
/// Uses the last "answer is ..." phrase when present, else the last
/// non-empty line. The result is normalized.
pub fn extract_answer(completion: &str) -> String {
    if let Some(caps) = ANSWER_IS.captures_iter(completion).last() {
        let raw = caps.get(1).map_or("", |m| m.as_str());
        return normalize_answer(raw.trim_start_matches('$'));
    }
    let last = completion.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
    normalize_answer(last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Ranking,
    Presample,
    Reasoning,
}

impl Step {
    pub const ALL: [Step; 3] = [Step::Ranking, Step::Presample, Step::Reasoning];

    pub fn as_str(self) -> &'static str {
        match self {
            Step::Ranking => "ranking",
            Step::Presample => "presample",
            Step::Reasoning => "reasoning",
        }
    }
}

impl FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranking" => Ok(Step::Ranking),
            "presample" => Ok(Step::Presample),
            "reasoning" => Ok(Step::Reasoning),
            other => Err(Error::InvalidParams(format!("unknown ledger step '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Input,
    Output,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Direction::Input),
            "output" => Ok(Direction::Output),
            other => Err(Error::InvalidParams(format!("unknown ledger direction '{other}'"))),
        }
    }
}

/// An amount of currency held as integer nano-units (1e-9).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Money(u64);

impl Money {
    pub const ZERO: Money = Money(0);
    const NANOS_PER_UNIT: u64 = 1_000_000_000;

    pub fn from_nanos(nanos: u64) -> Self {
        Money(nanos)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::NANOS_PER_UNIT as f64
    }

    /// Rounds half-up to four decimal places and renders like `0.0254`.
    pub fn to_4dp(self) -> String {
        let ten_thousandths = (self.0 + 50_000) / 100_000;
        format!("{}.{:04}", ten_thousandths / 10_000, ten_thousandths % 10_000)
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        Money(iter.map(|m| m.0).sum())
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_4dp())
    }
}

/// Provider prices, in currency per 1000 tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingTable {
    pub model_name: String,
    pub input_price_per_1k: f64,
    pub output_price_per_1k: f64,
}

impl Default for PricingTable {
    fn default() -> Self {
        Self::gpt4()
    }
}

impl PricingTable {
    pub fn new(model_name: impl Into<String>, input_per_1k: f64, output_per_1k: f64) -> Result<Self> {
        let table = Self {
            model_name: model_name.into(),
            input_price_per_1k: input_per_1k,
            output_price_per_1k: output_per_1k,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn gpt4() -> Self {
        Self {
            model_name: "gpt-4".into(),
            input_price_per_1k: 0.03,
            output_price_per_1k: 0.06,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("input", self.input_price_per_1k), ("output", self.output_price_per_1k)] {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidParams(format!("{name} price must be a finite value >= 0, got {p}")));
            }
        }
        Ok(())
    }

    /// Price of one token in nano-units; exact for prices with at most six
    /// decimals per 1k tokens.
    pub fn nanos_per_token(&self, direction: Direction) -> u64 {
        let per_1k = match direction {
            Direction::Input => self.input_price_per_1k,
            Direction::Output => self.output_price_per_1k,
        };
        (per_1k * 1e6).round() as u64
    }

    pub fn cost(&self, direction: Direction, tokens: u64) -> Money {
        Money(tokens * self.nanos_per_token(direction))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: Step,
    pub direction: Direction,
    pub tokens: u64,
    pub cost: Money,
}

/// Itemized token and currency spend for one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, step: Step, direction: Direction, tokens: u64, pricing: &PricingTable) {
        self.entries.push(LedgerEntry {
            step,
            direction,
            tokens,
            cost: pricing.cost(direction, tokens),
        });
    }

    /// String-keyed variant of [`CostLedger::add`] for callers working from
    /// serialized step/direction names.
    pub fn add_named(&mut self, step: &str, direction: &str, tokens: u64, pricing: &PricingTable) -> Result<()> {
        self.add(step.parse()?, direction.parse()?, tokens, pricing);
        Ok(())
    }

    /// Records both directions of one backend call.
    pub fn charge(&mut self, step: Step, input_tokens: u64, output_tokens: u64, pricing: &PricingTable) {
        self.add(step, Direction::Input, input_tokens, pricing);
        self.add(step, Direction::Output, output_tokens, pricing);
    }

    pub fn merge(&mut self, other: CostLedger) {
        self.entries.extend(other.entries);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    fn filtered(&self, step: Option<Step>, direction: Option<Direction>) -> impl Iterator<Item = &LedgerEntry> {
        self.entries
            .iter()
            .filter(move |e| step.is_none_or(|s| s == e.step) && direction.is_none_or(|d| d == e.direction))
    }

    pub fn tokens(&self, step: Option<Step>, direction: Option<Direction>) -> u64 {
        self.filtered(step, direction).map(|e| e.tokens).sum()
    }

    pub fn cost(&self, step: Option<Step>, direction: Option<Direction>) -> Money {
        self.filtered(step, direction).map(|e| e.cost).sum()
    }

    pub fn total_cost(&self) -> Money {
        self.cost(None, None)
    }

    pub fn input_tokens(&self) -> u64 {
        self.tokens(None, Some(Direction::Input))
    }

    pub fn output_tokens(&self) -> u64 {
        self.tokens(None, Some(Direction::Output))
    }
}

/// Tunables for all four methods.
///
/// Defaults: B=8, R=5, p=4, k=32, e=4, m=16, L=40, C_thresh=0.95, ESC window 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Questions per ranking batch (B).
    pub batch_size: usize,
    /// Random split rounds for ranking (R).
    pub split_rounds: usize,
    /// Samples drawn per question while scanning for the anchor (p).
    pub presample_size: usize,
    /// Consecutive zero-entropy questions that trigger the partition cut (k).
    pub judge_window: usize,
    /// Samples added per extension when the criterion has not fired (e).
    pub extend_window: usize,
    /// Completed neighbours averaged to pre-allocate a sample size (m).
    pub prediction_window: usize,
    /// Maximum samples per question (L).
    pub max_samples: usize,
    /// Dirichlet stopping threshold.
    pub c_thresh: f64,
    pub esc_window: usize,
    pub temperature: f64,
    /// Monte Carlo draws per Dirichlet check.
    pub mc_draws: usize,
    /// Seed the allocation step with the partition step's presamples.
    pub reuse_presamples: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            batch_size: 8,
            split_rounds: 5,
            presample_size: 4,
            judge_window: 32,
            extend_window: 4,
            prediction_window: 16,
            max_samples: 40,
            c_thresh: 0.95,
            esc_window: 5,
            temperature: 0.7,
            mc_draws: 10_000,
            reuse_presamples: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("batch_size", self.batch_size),
            ("split_rounds", self.split_rounds),
            ("presample_size", self.presample_size),
            ("judge_window", self.judge_window),
            ("extend_window", self.extend_window),
            ("prediction_window", self.prediction_window),
            ("max_samples", self.max_samples),
            ("esc_window", self.esc_window),
        ];
        for (name, v) in ints {
            if v < 1 {
                return Err(Error::InvalidParams(format!("{name} must be >= 1")));
            }
        }
        if self.presample_size > self.max_samples {
            return Err(Error::InvalidParams("presample_size must not exceed max_samples".into()));
        }
        if self.extend_window > self.max_samples {
            return Err(Error::InvalidParams("extend_window must not exceed max_samples".into()));
        }
        if !(self.c_thresh > 0.0 && self.c_thresh < 1.0) {
            return Err(Error::InvalidParams(format!("c_thresh must lie in (0, 1), got {}", self.c_thresh)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidParams("temperature must be >= 0".into()));
        }
        Ok(())
    }
}
