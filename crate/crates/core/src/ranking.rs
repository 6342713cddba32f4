//! Difficulty ranking: split the question set into random batches `R`
//! times, have the model order each batch from easy to hard, and sort the
//! whole set by each question's mean normalized position.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CompletionRequest};
use crate::error::{Error, Result};
use crate::metrics::{self, Correlations};
use crate::model::{CostLedger, HyperParams, PricingTable, Question, Step};
use crate::seeding::keyed_rng;

const RANK_HEADER: &str = "Your task is to rank the given questions from easy to hard based on their difficulty level. Questions to be evaluated:";
const RANK_FOOTER: &str = "The output format should be a comma-separated list containing the Q{number of corresponding question}. Do not give any explanation.\n\nDifficulty Ranking result (from easy to hard):";

/// Re-queries allowed after a malformed ranking.
pub const RANK_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingBatch {
    pub round: usize,
    pub members: Vec<String>,
    /// Members from easiest to hardest, once the model has answered.
    pub model_order: Option<Vec<String>>,
}

/// Normalized rank of every question in every round (`None` where the
/// question's batch could not be ranked).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTable {
    pub per_question_ranks: BTreeMap<String, Vec<Option<f64>>>,
    pub rounds_completed: usize,
}

impl DifficultyTable {
    pub fn mean_rank(&self, id: &str) -> Option<f64> {
        let ranks = self.per_question_ranks.get(id)?;
        let recorded: Vec<f64> = ranks.iter().flatten().copied().collect();
        if recorded.is_empty() {
            None
        } else {
            Some(recorded.iter().sum::<f64>() / recorded.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
pub struct RankingOutcome {
    /// Question ids from easiest to hardest.
    pub order: Vec<String>,
    pub table: DifficultyTable,
    pub ledger: CostLedger,
    /// Ranking tokens apportioned to each question, `(input, output)`.
    pub usage: BTreeMap<String, (u64, u64)>,
}

/// `R` independent seeded shuffles, each chunked into `ceil(N/B)` batches
/// whose sizes differ by at most one.
pub fn make_splits(questions: &[Question], batch_size: usize, rounds: usize, seed: u64) -> Result<Vec<Vec<RankingBatch>>> {
    if batch_size < 2 {
        return Err(Error::InvalidParams("ranking batch size must be >= 2".into()));
    }
    if questions.is_empty() {
        return Err(Error::InvalidParams("cannot rank an empty question set".into()));
    }
    let n = questions.len();
    let n_batches = n.div_ceil(batch_size);
    let (base, extra) = (n / n_batches, n % n_batches);
    let mut out = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let mut ids: Vec<&str> = questions.iter().map(|q| q.id.as_str()).collect();
        ids.shuffle(&mut keyed_rng(seed, "split", "", round as u64));
        let mut batches = Vec::with_capacity(n_batches);
        let mut start = 0;
        for b in 0..n_batches {
            let size = base + usize::from(b < extra);
            batches.push(RankingBatch {
                round,
                members: ids[start..start + size].iter().map(|s| s.to_string()).collect(),
                model_order: None,
            });
            start += size;
        }
        out.push(batches);
    }
    Ok(out)
}

pub fn build_rank_prompt(question_texts: &[&str]) -> Result<String> {
    if question_texts.is_empty() {
        return Err(Error::InvalidParams("cannot build a ranking prompt for an empty batch".into()));
    }
    let mut prompt = String::from(RANK_HEADER);
    for (i, text) in question_texts.iter().enumerate() {
        prompt.push_str(&format!("\n\nQ{}: {}", i + 1, text));
    }
    prompt.push_str("\n\n");
    prompt.push_str(RANK_FOOTER);
    Ok(prompt)
}

static PROMPT_ITEM: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^Q\d+: ").unwrap());

/// Inverse of [`build_rank_prompt`]: the question texts, or `None` if the
/// prompt is not a ranking prompt.
pub fn split_rank_prompt(prompt: &str) -> Option<Vec<&str>> {
    let body = prompt.strip_prefix(RANK_HEADER)?.strip_suffix(RANK_FOOTER)?;
    let body = body.strip_prefix("\n\n")?.strip_suffix("\n\n")?;
    let starts: Vec<(usize, usize)> = PROMPT_ITEM.find_iter(body).map(|m| (m.start(), m.end())).collect();
    if starts.first().map(|s| s.0) != Some(0) {
        return None;
    }
    let mut texts = Vec::with_capacity(starts.len());
    for (i, &(_, text_start)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(body.len(), |next| next.0 - 2);
        texts.push(&body[text_start..end]);
    }
    Some(texts)
}

static RANK_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bQ\s*(\d+)").unwrap());

/// Extracts the `Q<i>` labels in order as a permutation of `1..=batch_size`.
pub fn parse_rank_output(raw: &str, batch_size: usize) -> Result<Vec<usize>> {
    let mut seen = vec![false; batch_size + 1];
    let mut order = Vec::with_capacity(batch_size);
    for caps in RANK_TOKEN.captures_iter(raw) {
        let idx: usize = caps[1]
            .parse()
            .map_err(|_| Error::MalformedRanking(format!("unreadable index in {raw:?}")))?;
        if idx == 0 || idx > batch_size {
            return Err(Error::MalformedRanking(format!("index Q{idx} out of range 1..={batch_size}")));
        }
        if seen[idx] {
            return Err(Error::MalformedRanking(format!("Q{idx} listed twice")));
        }
        seen[idx] = true;
        order.push(idx);
    }
    if order.len() != batch_size {
        return Err(Error::MalformedRanking(format!(
            "expected {batch_size} questions, found {} in {raw:?}",
            order.len()
        )));
    }
    Ok(order)
}

/// Position `pos` (1-based) in a batch of `size` mapped onto [0, 1].
pub fn normalized_rank(pos: usize, size: usize) -> f64 {
    debug_assert!(size >= 2 && (1..=size).contains(&pos));
    (pos - 1) as f64 / (size - 1) as f64
}

struct BatchResult {
    order: Option<Vec<String>>,
    calls: Vec<(u64, u64)>,
}

fn rank_batch(batch: &RankingBatch, texts: &BTreeMap<&str, &str>, batch_size: usize, backend: &dyn Backend) -> Result<BatchResult> {
    let member_texts: Vec<&str> = batch.members.iter().map(|id| texts[id.as_str()]).collect();
    let prompt = build_rank_prompt(&member_texts)?;
    let request = CompletionRequest::new(prompt, 1, 0.0).max_output_tokens((4 * batch_size + 16) as u32);
    let mut calls = Vec::new();
    for _ in 0..=RANK_RETRIES {
        let resp = backend.complete(&request)?;
        calls.push((resp.input_tokens, resp.output_tokens));
        if let Ok(perm) = parse_rank_output(&resp.texts[0], batch.members.len()) {
            let order = perm.into_iter().map(|i| batch.members[i - 1].clone()).collect();
            return Ok(BatchResult { order: Some(order), calls });
        }
    }
    Ok(BatchResult { order: None, calls })
}

/// Ranks the whole question set from easy to hard.
///
/// Batches are queried at temperature 0, concurrently. A batch that is still
/// malformed after [`RANK_RETRIES`] re-queries contributes no ranks. Ties in
/// mean rank keep dataset order.
pub fn rank_difficulty(
    questions: &[Question],
    params: &HyperParams,
    seed: u64,
    backend: &dyn Backend,
    pricing: &PricingTable,
) -> Result<RankingOutcome> {
    let rounds = params.split_rounds;
    let mut table = DifficultyTable {
        per_question_ranks: questions.iter().map(|q| (q.id.clone(), vec![None; rounds])).collect(),
        rounds_completed: rounds,
    };
    let mut ledger = CostLedger::new();
    let mut usage: BTreeMap<String, (u64, u64)> = questions.iter().map(|q| (q.id.clone(), (0, 0))).collect();
    if table.per_question_ranks.len() != questions.len() {
        return Err(Error::InvalidParams("duplicate question ids".into()));
    }
    if questions.len() == 1 {
        table.rounds_completed = 0;
        return Ok(RankingOutcome {
            order: vec![questions[0].id.clone()],
            table,
            ledger,
            usage,
        });
    }

    let splits = make_splits(questions, params.batch_size, rounds, seed)?;
    let texts: BTreeMap<&str, &str> = questions.iter().map(|q| (q.id.as_str(), q.text.as_str())).collect();
    let batches: Vec<&RankingBatch> = splits.iter().flatten().filter(|b| b.members.len() >= 2).collect();
    let results: Vec<Result<BatchResult>> = batches
        .par_iter()
        .map(|b| rank_batch(b, &texts, params.batch_size, backend))
        .collect();

    for (batch, result) in batches.iter().zip(results) {
        let result = result?;
        for &(inp, out) in &result.calls {
            ledger.charge(Step::Ranking, inp, out, pricing);
            apportion(&mut usage, &batch.members, inp, out);
        }
        if let Some(order) = result.order {
            let size = order.len();
            for (pos, id) in order.iter().enumerate() {
                let slot = &mut table.per_question_ranks.get_mut(id).expect("member of question set")[batch.round - 1];
                *slot = Some(normalized_rank(pos + 1, size));
            }
        }
    }

    let mut keyed: Vec<(usize, &Question, f64)> = Vec::with_capacity(questions.len());
    for (idx, q) in questions.iter().enumerate() {
        let mean = table.mean_rank(&q.id).ok_or_else(|| Error::Unranked(q.id.clone()))?;
        keyed.push((idx, q, mean));
    }
    keyed.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    Ok(RankingOutcome {
        order: keyed.into_iter().map(|(_, q, _)| q.id.clone()).collect(),
        table,
        ledger,
        usage,
    })
}

fn apportion(usage: &mut BTreeMap<String, (u64, u64)>, members: &[String], inp: u64, out: u64) {
    let n = members.len() as u64;
    for (i, id) in members.iter().enumerate() {
        let i = i as u64;
        let share = |total: u64| total / n + u64::from(i < total % n);
        let entry = usage.get_mut(id).expect("member of question set");
        entry.0 += share(inp);
        entry.1 += share(out);
    }
}

/// Correlation between mean normalized rank and gold difficulty.
pub fn evaluate_ranking(outcome: &RankingOutcome, questions: &[Question]) -> Result<Correlations> {
    let mut predicted = Vec::with_capacity(questions.len());
    let mut gold = Vec::with_capacity(questions.len());
    for q in questions {
        let g = q.gold_difficulty.ok_or_else(|| Error::MissingGold(q.id.clone()))?;
        let r = outcome.table.mean_rank(&q.id).ok_or_else(|| Error::Unranked(q.id.clone()))?;
        predicted.push(r);
        gold.push(g);
    }
    metrics::correlations(&predicted, &gold)
}

/// One line of the ranking artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub id: String,
    pub mean_rank: f64,
    pub round_ranks: Vec<Option<f64>>,
}

/// Writes one record per question, easiest first.
pub fn write_ranking_artifact<W: Write>(outcome: &RankingOutcome, mut w: W) -> Result<()> {
    for id in &outcome.order {
        let rec = RankingRecord {
            id: id.clone(),
            mean_rank: outcome.table.mean_rank(id).unwrap_or(0.0),
            round_ranks: outcome.table.per_question_ranks.get(id).cloned().unwrap_or_default(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a ranking artifact back into an outcome with an empty ledger.
pub fn read_ranking_artifact<R: BufRead>(r: R) -> Result<RankingOutcome> {
    let mut order = Vec::new();
    let mut table = DifficultyTable::default();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RankingRecord = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        table.rounds_completed = table.rounds_completed.max(rec.round_ranks.len());
        order.push(rec.id.clone());
        table.per_question_ranks.insert(rec.id, rec.round_ranks);
    }
    let usage = order.iter().map(|id| (id.clone(), (0, 0))).collect();
    Ok(RankingOutcome {
        order,
        table,
        ledger: CostLedger::new(),
        usage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::CompletionResponse;
    use std::sync::Mutex;

    fn qs(n: usize) -> Vec<Question> {
        (0..n).map(|i| Question::new(format!("q{i}"), format!("question {i}"), "1")).collect()
    }

    #[test]
    fn splits_single_batch() {
        let s = make_splits(&qs(8), 8, 1, 0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 1);
        assert_eq!(s[0][0].members.len(), 8);
    }

    #[test]
    fn splits_balance_remainder() {
        let s = make_splits(&qs(10), 8, 3, 0).unwrap();
        for round in &s {
            let sizes: Vec<usize> = round.iter().map(|b| b.members.len()).collect();
            assert_eq!(sizes, vec![5, 5]);
        }
    }

    #[test]
    fn splits_cover_each_round_once() {
        let questions = qs(100);
        let s = make_splits(&questions, 8, 5, 3).unwrap();
        assert_eq!(s.len(), 5);
        let mut appearances: BTreeMap<String, usize> = BTreeMap::new();
        for round in &s {
            assert_eq!(round.len(), 13);
            let sizes: Vec<usize> = round.iter().map(|b| b.members.len()).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut ids: Vec<&String> = round.iter().flat_map(|b| &b.members).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 100);
            for b in round {
                for id in &b.members {
                    *appearances.entry(id.clone()).or_default() += 1;
                }
            }
        }
        assert!(appearances.values().all(|&c| c == 5));
        assert_ne!(s[0][0].members, s[1][0].members);
    }

    #[test]
    fn splits_reject_tiny_batches() {
        assert!(make_splits(&qs(5), 1, 1, 0).is_err());
    }

    #[test]
    fn prompt_template() {
        let p = build_rank_prompt(&["What is 1+1?", "Integrate x^2."]).unwrap();
        assert!(p.starts_with("Your task is to rank the given questions from easy to hard"));
        assert!(p.contains("\nQ1: What is 1+1?\n"));
        assert!(p.contains("\nQ2: Integrate x^2.\n"));
        assert!(p.contains("comma-separated list containing the Q{number of corresponding question}"));
        assert!(p.contains("Do not give any explanation."));
        assert!(p.ends_with("Difficulty Ranking result (from easy to hard):"));
        assert!(build_rank_prompt(&[]).is_err());
        let eight: Vec<String> = (0..8).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = eight.iter().map(String::as_str).collect();
        let p = build_rank_prompt(&refs).unwrap();
        assert_eq!(p.lines().filter(|l| PROMPT_ITEM.is_match(l)).count(), 8);
        assert_eq!(split_rank_prompt(&p).unwrap(), refs);
    }

    #[test]
    fn prompt_roundtrip_multiline_text() {
        let texts = ["line one\nline two", "second"];
        let p = build_rank_prompt(&texts).unwrap();
        assert_eq!(split_rank_prompt(&p).unwrap(), texts);
        assert!(split_rank_prompt("Q: x\nA:").is_none());
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_rank_output("Q3, Q1, Q2", 3).unwrap(), vec![3, 1, 2]);
        assert!(matches!(parse_rank_output("Q1,Q1,Q2", 3), Err(Error::MalformedRanking(_))));
        assert_eq!(parse_rank_output("Ranking: Q2 , Q4, Q1, Q3", 4).unwrap(), vec![2, 4, 1, 3]);
        assert_eq!(parse_rank_output("  Q2, Q1 \n(easy to hard)", 2).unwrap(), vec![2, 1]);
        assert!(parse_rank_output("Q1, Q2", 3).is_err());
        assert!(parse_rank_output("Q1, Q4, Q2", 3).is_err());
        assert!(parse_rank_output("Q0, Q1", 2).is_err());
    }

    #[test]
    fn normalized_rank_bounds() {
        assert_eq!(normalized_rank(1, 2), 0.0);
        assert_eq!(normalized_rank(2, 2), 1.0);
        assert_eq!(normalized_rank(3, 5), 0.5);
    }

    #[test]
    fn mean_of_normalized_ranks() {
        let mut t = DifficultyTable::default();
        t.per_question_ranks.insert("a".into(), vec![Some(0.0), Some(0.5), Some(0.25)]);
        t.per_question_ranks.insert("b".into(), vec![Some(0.0), None, Some(0.0)]);
        t.per_question_ranks.insert("c".into(), vec![None, None]);
        assert_eq!(t.mean_rank("a"), Some(0.25));
        assert_eq!(t.mean_rank("b"), Some(0.0));
        assert_eq!(t.mean_rank("c"), None);
    }

    /// Answers every ranking prompt with a fixed text, counting calls.
    struct Scripted {
        reply: Box<dyn Fn(usize) -> String + Send + Sync>,
        calls: Mutex<usize>,
    }

    impl Backend for Scripted {
        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
            let n = split_rank_prompt(&req.prompt_text).unwrap().len();
            *self.calls.lock().unwrap() += 1;
            Ok(CompletionResponse {
                texts: vec![(self.reply)(n)],
                input_tokens: 10,
                output_tokens: 3,
                per_sample_output: vec![3],
            })
        }
        fn count_input_tokens(&self, _: &str) -> u64 {
            10
        }
    }

    #[test]
    fn malformed_batches_retry_then_degrade() {
        let backend = Scripted { reply: Box::new(|_| "I cannot rank these".into()), calls: Mutex::new(0) };
        let params = HyperParams { batch_size: 4, split_rounds: 1, ..HyperParams::default() };
        let err = rank_difficulty(&qs(4), &params, 0, &backend, &PricingTable::gpt4()).unwrap_err();
        assert!(matches!(err, Error::Unranked(_)));
        assert_eq!(*backend.calls.lock().unwrap(), 1 + RANK_RETRIES);
    }

    #[test]
    fn identity_reply_is_charged_to_ranking() {
        let backend = Scripted {
            reply: Box::new(|n| (1..=n).map(|i| format!("Q{i}")).collect::<Vec<_>>().join(", ")),
            calls: Mutex::new(0),
        };
        let params = HyperParams { batch_size: 4, split_rounds: 3, ..HyperParams::default() };
        let questions = qs(8);
        let out = rank_difficulty(&questions, &params, 0, &backend, &PricingTable::gpt4()).unwrap();
        assert_eq!(out.order.len(), 8);
        assert_eq!(*backend.calls.lock().unwrap(), 6);
        assert_eq!(out.ledger.tokens(Some(Step::Ranking), None), 6 * 13);
        assert_eq!(out.ledger.tokens(Some(Step::Reasoning), None), 0);
        let apportioned: u64 = out.usage.values().map(|(i, o)| i + o).sum();
        assert_eq!(apportioned, 6 * 13);
        for ranks in out.table.per_question_ranks.values() {
            assert_eq!(ranks.len(), 3);
            assert!(ranks.iter().flatten().all(|r| (0.0..=1.0).contains(r)));
        }
    }

    #[test]
    fn artifact_roundtrip() {
        let backend = Scripted {
            reply: Box::new(|n| (1..=n).rev().map(|i| format!("Q{i}")).collect::<Vec<_>>().join(",")),
            calls: Mutex::new(0),
        };
        let params = HyperParams { batch_size: 3, split_rounds: 2, ..HyperParams::default() };
        let out = rank_difficulty(&qs(7), &params, 5, &backend, &PricingTable::gpt4()).unwrap();
        let mut buf = Vec::new();
        write_ranking_artifact(&out, &mut buf).unwrap();
        let back = read_ranking_artifact(buf.as_slice()).unwrap();
        assert_eq!(back.order, out.order);
        assert_eq!(back.table.per_question_ranks, out.table.per_question_ranks);
    }
}
