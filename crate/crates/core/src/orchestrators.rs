//! The four end-to-end methods: SC, ASC, ESC and DSC.
//!
//! Every method reads a question's samples from the same keyed stream
//! (draw `j` of question `q`), so under the simulator the methods differ
//! only in how many draws they take and how they group them into requests.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CompletionRequest};
use crate::error::{Error, Result};
use crate::model::{extract_answer, majority_vote, normalize_answer, CostLedger, HyperParams, PricingTable, Question, SampleTally, Step};
use crate::partition::{partition, solve_easy, PartitionResult};
use crate::prompt::ReasoningPrompt;
use crate::ranking::{rank_difficulty, RankingOutcome};
use crate::stopping::{unanimous, CheckContext, DirichletCriterion, StoppingCriterion, WindowCriterion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sc,
    Asc,
    Esc,
    Dsc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sc, Method::Asc, Method::Esc, Method::Dsc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sc => "sc",
            Method::Asc => "asc",
            Method::Esc => "esc",
            Method::Dsc => "dsc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str().to_uppercase())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc" => Ok(Method::Sc),
            "asc" => Ok(Method::Asc),
            "esc" => Ok(Method::Esc),
            "dsc" => Ok(Method::Dsc),
            other => Err(Error::InvalidParams(format!("unknown method '{other}'"))),
        }
    }
}

/// Stopping rule used by DSC's allocation step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionKind {
    #[default]
    Dirichlet,
    /// Latest `esc_window` samples unanimous.
    Window,
}

/// Everything a method needs besides the questions themselves.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub backend: &'a dyn Backend,
    pub pricing: &'a PricingTable,
    pub prompt: &'a ReasoningPrompt,
    pub params: &'a HyperParams,
    pub criterion: CriterionKind,
    pub seed: u64,
}

impl<'a> RunContext<'a> {
    pub fn new(backend: &'a dyn Backend, pricing: &'a PricingTable, prompt: &'a ReasoningPrompt, params: &'a HyperParams, seed: u64) -> Self {
        Self {
            backend,
            pricing,
            prompt,
            params,
            criterion: CriterionKind::Dirichlet,
            seed,
        }
    }

    /// Draws `n` samples of `q` in one request starting at stream position
    /// `first_draw`, and charges the call to `step`.
    pub fn draw(&self, q: &Question, n: usize, first_draw: u64, step: Step, ledger: &mut CostLedger) -> Result<SampleTally> {
        let request = CompletionRequest::new(self.prompt.render(&q.text), n, self.params.temperature).stream(&q.id, first_draw);
        let resp = self.backend.complete(&request)?;
        if resp.texts.len() != n {
            return Err(Error::Parse(format!("asked for {n} samples, got {}", resp.texts.len())));
        }
        ledger.charge(step, resp.input_tokens, resp.output_tokens, self.pricing);
        let mut tally = SampleTally::new();
        for (i, (text, out)) in resp.texts.iter().zip(&resp.per_sample_output).enumerate() {
            let inp = if i == 0 { resp.input_tokens } else { 0 };
            tally.push(extract_answer(text), inp, *out);
        }
        Ok(tally)
    }

    pub fn stopping_criterion(&self) -> Result<Box<dyn StoppingCriterion>> {
        Ok(match self.criterion {
            CriterionKind::Dirichlet => Box::new(DirichletCriterion::new(self.params.c_thresh, self.params.mc_draws, self.seed)?),
            CriterionKind::Window => Box::new(WindowCriterion {
                window: self.params.esc_window,
            }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    #[serde(rename = "easy")]
    Easy,
    #[serde(rename = "hard")]
    Hard,
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub final_answer: String,
    pub gold_answer: String,
    pub correct: bool,
    /// Samples in the final vote.
    pub samples_used: usize,
    pub part: Part,
    /// All tokens spent on this question, every step included.
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub params: HyperParams,
    pub records: Vec<QuestionRecord>,
    /// Fraction correct.
    pub accuracy: f64,
    pub ledger: CostLedger,
}

impl RunReport {
    fn new(method: Method, ctx: &RunContext<'_>, records: Vec<QuestionRecord>, ledger: CostLedger) -> Self {
        let correct = records.iter().filter(|r| r.correct).count();
        let accuracy = if records.is_empty() { 0.0 } else { correct as f64 / records.len() as f64 };
        Self {
            method,
            seed: ctx.seed,
            params: ctx.params.clone(),
            records,
            accuracy,
            ledger,
        }
    }

    pub fn mean_samples(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.samples_used).sum::<usize>() as f64 / self.records.len() as f64
    }

    pub fn record(&self, id: &str) -> Option<&QuestionRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// One JSON object per question, dataset order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn record(q: &Question, tally: &SampleTally, part: Part, extra: (u64, u64)) -> Result<QuestionRecord> {
    let (answer, _) = majority_vote(tally)?;
    Ok(QuestionRecord {
        id: q.id.clone(),
        correct: answer == normalize_answer(&q.gold_answer),
        final_answer: answer,
        gold_answer: q.gold_answer.clone(),
        samples_used: tally.len(),
        part,
        input_tokens: tally.input_tokens() + extra.0,
        output_tokens: tally.output_tokens() + extra.1,
    })
}

fn require_max(max: usize, min: usize, method: &str) -> Result<()> {
    if max < min {
        return Err(Error::InvalidParams(format!("{method} needs max_samples >= {min}")));
    }
    Ok(())
}

/// Self-consistency: `L` samples in one request, majority vote.
pub fn run_sc(questions: &[Question], ctx: &RunContext<'_>) -> Result<RunReport> {
    let l = ctx.params.max_samples;
    require_max(l, 1, "SC")?;
    let mut ledger = CostLedger::new();
    let mut records = Vec::with_capacity(questions.len());
    for q in questions {
        let tally = ctx.draw(q, l, 0, Step::Reasoning, &mut ledger)?;
        records.push(record(q, &tally, Part::NotApplicable, (0, 0))?);
    }
    Ok(RunReport::new(Method::Sc, ctx, records, ledger))
}

/// Adaptive SC: one sample per request, Dirichlet check after each, cap `L`.
pub fn run_asc(questions: &[Question], ctx: &RunContext<'_>) -> Result<RunReport> {
    let l = ctx.params.max_samples;
    require_max(l, 3, "ASC")?;
    let criterion = DirichletCriterion::new(ctx.params.c_thresh, ctx.params.mc_draws, ctx.seed)?;
    let mut ledger = CostLedger::new();
    let mut records = Vec::with_capacity(questions.len());
    for q in questions {
        let mut tally = SampleTally::new();
        while tally.len() < l {
            let one = ctx.draw(q, 1, tally.len() as u64, Step::Reasoning, &mut ledger)?;
            tally.extend_from(&one);
            let check = CheckContext {
                question_id: &q.id,
                check_index: tally.len() as u64,
            };
            if criterion.check(&tally, check)?.stop {
                break;
            }
        }
        records.push(record(q, &tally, Part::NotApplicable, (0, 0))?);
    }
    Ok(RunReport::new(Method::Asc, ctx, records, ledger))
}

/// Early-stopping SC: windows of `esc_window` samples per request; stops
/// when a window is unanimous or `L` is reached (the last window may be
/// truncated).
pub fn run_esc(questions: &[Question], ctx: &RunContext<'_>) -> Result<RunReport> {
    let l = ctx.params.max_samples;
    let w = ctx.params.esc_window;
    if w < 1 || w > l {
        return Err(Error::InvalidParams("ESC needs 1 <= esc_window <= max_samples".into()));
    }
    let mut ledger = CostLedger::new();
    let mut records = Vec::with_capacity(questions.len());
    for q in questions {
        let mut tally = SampleTally::new();
        while tally.len() < l {
            let n = w.min(l - tally.len());
            let window = ctx.draw(q, n, tally.len() as u64, Step::Reasoning, &mut ledger)?;
            tally.extend_from(&window);
            if unanimous(window.samples()) {
                break;
            }
        }
        records.push(record(q, &tally, Part::NotApplicable, (0, 0))?);
    }
    Ok(RunReport::new(Method::Esc, ctx, records, ledger))
}

/// Sample sizes and tallies of the hard questions completed so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationState {
    /// Final sample count of each completed hard question, easiest first.
    pub n_all: Vec<usize>,
    pub s_all: BTreeMap<String, SampleTally>,
}

/// Predicted total for the next question: mean of the last `m` totals,
/// rounded half up and capped at `max`; 0 while fewer than `m` exist.
pub fn pre_allocate(n_all: &[usize], m: usize, max: usize) -> usize {
    if m == 0 || n_all.len() < m {
        return 0;
    }
    let sum: usize = n_all[n_all.len() - m..].iter().sum();
    ((2 * sum + m) / (2 * m)).min(max)
}

/// Requests issued for one hard question, for tracing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AllocationTrace {
    pub pre_allocated: usize,
    pub request_sizes: Vec<usize>,
}

/// Samples the hard part easiest-first. Each question after the first `m`
/// gets a pre-allocated batch sized from its easier neighbours in a single
/// request; then, while the criterion has not fired and fewer than `L`
/// samples exist, extends by `e` at a time.
///
/// With `reuse_presamples`, a question's presamples open its tally and count
/// toward its total, and the pre-allocated request only tops the tally up
/// to the predicted size.
pub fn allocate_and_solve_hard(
    hard_easy_to_hard: &[&Question],
    presamples: &BTreeMap<String, SampleTally>,
    state: &mut AllocationState,
    criterion: &dyn StoppingCriterion,
    ctx: &RunContext<'_>,
    ledger: &mut CostLedger,
) -> Result<Vec<AllocationTrace>> {
    let p = ctx.params;
    let mut traces = Vec::with_capacity(hard_easy_to_hard.len());
    for q in hard_easy_to_hard {
        let mut tally = match presamples.get(&q.id) {
            Some(pre) if p.reuse_presamples => pre.clone(),
            _ => SampleTally::new(),
        };
        let mut trace = AllocationTrace {
            pre_allocated: pre_allocate(&state.n_all, p.prediction_window, p.max_samples),
            request_sizes: Vec::new(),
        };
        if trace.pre_allocated > tally.len() {
            let n = trace.pre_allocated - tally.len();
            tally.extend_from(&ctx.draw(q, n, tally.len() as u64, Step::Reasoning, ledger)?);
            trace.request_sizes.push(n);
        }
        let mut check_index = 0u64;
        while tally.len() < p.max_samples {
            let verdict = criterion.check(
                &tally,
                CheckContext {
                    question_id: &q.id,
                    check_index,
                },
            )?;
            check_index += 1;
            if verdict.stop {
                break;
            }
            let n = p.extend_window.min(p.max_samples - tally.len());
            tally.extend_from(&ctx.draw(q, n, tally.len() as u64, Step::Reasoning, ledger)?);
            trace.request_sizes.push(n);
        }
        state.n_all.push(tally.len());
        state.s_all.insert(q.id.clone(), tally);
        traces.push(trace);
    }
    Ok(traces)
}

#[derive(Debug, Clone)]
pub struct DscOutcome {
    pub report: RunReport,
    pub ranking: RankingOutcome,
    pub partition: PartitionResult,
    pub allocation: AllocationState,
}

fn stage<T>(name: &'static str, r: Result<T>, ledger: &CostLedger) -> Result<T> {
    r.map_err(|source| Error::Stage {
        stage: name,
        source: Box::new(source),
        partial_ledger: Box::new(ledger.clone()),
    })
}

/// Difficulty-adaptive SC: rank, partition, one sample per easy question,
/// pre-allocated sampling for the hard part. Pass `ranking` to reuse a
/// previously computed ranking (its ledger is then not charged again).
pub fn run_dsc(questions: &[Question], ctx: &RunContext<'_>, ranking: Option<RankingOutcome>) -> Result<DscOutcome> {
    ctx.params.validate()?;
    let mut ledger = CostLedger::new();
    let by_id: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    if by_id.len() != questions.len() {
        return Err(Error::InvalidParams("duplicate question ids".into()));
    }

    let ranking = match ranking {
        Some(r) => r,
        None => stage("ranking", rank_difficulty(questions, ctx.params, ctx.seed, ctx.backend, ctx.pricing), &ledger)?,
    };
    ledger.merge(ranking.ledger.clone());
    let lookup = |id: &String| {
        by_id
            .get(id.as_str())
            .copied()
            .ok_or_else(|| Error::InvalidParams(format!("ranking names unknown question {id}")))
    };
    let easy_to_hard: Vec<&Question> = stage("ranking", ranking.order.iter().map(lookup).collect(), &ledger)?;
    if easy_to_hard.len() != questions.len() {
        return Err(Error::InvalidParams("ranking does not cover every question exactly once".into()));
    }
    let hard_to_easy: Vec<&Question> = easy_to_hard.iter().rev().copied().collect();

    let part = stage("partition", partition(&hard_to_easy, ctx, &mut ledger), &ledger)?;
    let easy: Vec<&Question> = part.easy_ids.iter().map(|id| by_id[id.as_str()]).collect();
    let easy_tallies = stage("easy", solve_easy(&easy, ctx, &mut ledger), &ledger)?;

    let hard_easy_to_hard: Vec<&Question> = part.hard_ids.iter().rev().map(|id| by_id[id.as_str()]).collect();
    let criterion = ctx.stopping_criterion()?;
    let mut state = AllocationState::default();
    stage(
        "allocation",
        allocate_and_solve_hard(&hard_easy_to_hard, &part.presamples, &mut state, criterion.as_ref(), ctx, &mut ledger),
        &ledger,
    )?;

    let mut records = Vec::with_capacity(questions.len());
    for q in questions {
        let mut extra = ranking.usage.get(&q.id).copied().unwrap_or((0, 0));
        let (tally, part_label) = match easy_tallies.get(&q.id) {
            Some(t) => (t, Part::Easy),
            None => {
                if !ctx.params.reuse_presamples {
                    if let Some(pre) = part.presamples.get(&q.id) {
                        extra.0 += pre.input_tokens();
                        extra.1 += pre.output_tokens();
                    }
                }
                (&state.s_all[&q.id], Part::Hard)
            }
        };
        records.push(record(q, tally, part_label, extra)?);
    }
    Ok(DscOutcome {
        report: RunReport::new(Method::Dsc, ctx, records, ledger),
        ranking,
        partition: part,
        allocation: state,
    })
}

/// Runs one method; DSC's intermediate artifacts are dropped.
pub fn run_method(method: Method, questions: &[Question], ctx: &RunContext<'_>) -> Result<RunReport> {
    match method {
        Method::Sc => run_sc(questions, ctx),
        Method::Asc => run_asc(questions, ctx),
        Method::Esc => run_esc(questions, ctx),
        Method::Dsc => run_dsc(questions, ctx, None).map(|o| o.report),
    }
}
