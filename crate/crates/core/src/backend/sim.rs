//! Seeded model simulator.
//!
//! Each question has a profile: a latent difficulty, a categorical answer
//! distribution and token sizes. Reasoning samples are drawn from a ChaCha
//! stream keyed by `(root seed, question id)` and positioned by draw index,
//! so sample `j` of a question is the same no matter which method asks for
//! it, in what batch, or in what order. Ranking prompts are answered by
//! sorting the batch on (optionally noisy) latent difficulty.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{approx_token_count, Backend, CompletionRequest, CompletionResponse, InputBilling};
use crate::error::{Error, Result};
use crate::model::{normalize_answer, Question};
use crate::prompt::question_from_reasoning_prompt;
use crate::ranking::split_rank_prompt;
use crate::seeding::{keyed_rng, stream_seed};

/// ChaCha words reserved per draw; a draw consumes two `f64`s (four words).
const WORDS_PER_DRAW: u128 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerWeight {
    pub answer: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimQuestionProfile {
    pub id: String,
    pub latent_difficulty: f64,
    pub answer_distribution: Vec<AnswerWeight>,
    pub output_token_mean: f64,
    pub input_token_count: u64,
}

impl SimQuestionProfile {
    /// Gold gets `1 - d * (1 - 1/K)` of the mass and the distractors split
    /// the rest evenly, where `K` counts gold plus distractors.
    pub fn from_difficulty(
        id: impl Into<String>,
        gold: &str,
        distractors: &[String],
        difficulty: f64,
        output_token_mean: f64,
        input_token_count: u64,
    ) -> Self {
        let k = (distractors.len() + 1) as f64;
        let wrong_each = if distractors.is_empty() { 0.0 } else { difficulty / k };
        let gold_p = 1.0 - wrong_each * distractors.len() as f64;
        let mut answer_distribution = vec![AnswerWeight {
            answer: gold.to_string(),
            probability: gold_p,
        }];
        answer_distribution.extend(distractors.iter().map(|d| AnswerWeight {
            answer: d.clone(),
            probability: wrong_each,
        }));
        Self {
            id: id.into(),
            latent_difficulty: difficulty,
            answer_distribution,
            output_token_mean,
            input_token_count,
        }
    }

    pub fn validate(&self, gold: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("profile {}: {msg}", self.id)));
        if !(0.0..=1.0).contains(&self.latent_difficulty) {
            return bad(format!("latent_difficulty {} outside [0,1]", self.latent_difficulty));
        }
        if self.answer_distribution.iter().any(|w| w.probability.is_nan() || w.probability < 0.0) {
            return bad("negative probability".into());
        }
        let total: f64 = self.answer_distribution.iter().map(|w| w.probability).sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("answer distribution sums to {total}"));
        }
        let gold = normalize_answer(gold);
        if !self.answer_distribution.iter().any(|w| normalize_answer(&w.answer) == gold) {
            return bad("gold answer missing from support".into());
        }
        if self.output_token_mean.is_nan() || self.output_token_mean < 0.0 {
            return bad("output_token_mean must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub billing: InputBilling,
    /// Std-dev of Gaussian noise added to latent difficulty when ranking.
    pub ranking_noise: f64,
    /// Prompt tokens charged per question listed in a ranking prompt.
    pub ranking_tokens_per_question: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            billing: InputBilling::PerRequest,
            ranking_noise: 0.05,
            ranking_tokens_per_question: 73,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub question_id: Option<String>,
    pub n: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

struct Entry {
    profile: SimQuestionProfile,
    cdf: Vec<f64>,
    mode: usize,
    stream: [u8; 32],
}

pub struct SimBackend {
    seed: u64,
    settings: SimSettings,
    entries: HashMap<String, Entry>,
    by_text: HashMap<String, String>,
    log: Mutex<Vec<CallRecord>>,
}

impl SimBackend {
    pub fn new(questions: &[Question], profiles: &[SimQuestionProfile], settings: SimSettings, seed: u64) -> Result<Self> {
        if settings.ranking_noise.is_nan() || settings.ranking_noise < 0.0 {
            return Err(Error::Config("ranking_noise must be >= 0".into()));
        }
        let by_id: HashMap<&str, &SimQuestionProfile> = profiles.iter().map(|p| (p.id.as_str(), p)).collect();
        let mut entries = HashMap::with_capacity(questions.len());
        let mut by_text = HashMap::with_capacity(questions.len());
        for q in questions {
            let profile = by_id
                .get(q.id.as_str())
                .ok_or_else(|| Error::Config(format!("no simulation profile for question {}", q.id)))?;
            profile.validate(&q.gold_answer)?;
            let mut acc = 0.0;
            let cdf = profile
                .answer_distribution
                .iter()
                .map(|w| {
                    acc += w.probability;
                    acc
                })
                .collect();
            let mode = profile
                .answer_distribution
                .iter()
                .enumerate()
                .fold(0, |best, (i, w)| if w.probability > profile.answer_distribution[best].probability { i } else { best });
            entries.insert(
                q.id.clone(),
                Entry {
                    profile: (*profile).clone(),
                    cdf,
                    mode,
                    stream: stream_seed(seed, "sample", &q.id, 0),
                },
            );
            if by_text.insert(q.text.clone(), q.id.clone()).is_some() {
                return Err(Error::Config(format!("duplicate question text for {}", q.id)));
            }
        }
        Ok(Self {
            seed,
            settings,
            entries,
            by_text,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn settings(&self) -> &SimSettings {
        &self.settings
    }

    pub fn profile(&self, id: &str) -> Option<&SimQuestionProfile> {
        self.entries.get(id).map(|e| &e.profile)
    }

    /// Every call served so far, in arrival order.
    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log poisoned").clone()
    }

    fn record(&self, rec: CallRecord) {
        self.log.lock().expect("call log poisoned").push(rec);
    }

    fn billed_input(&self, per_call: u64, n: usize) -> u64 {
        match self.settings.billing {
            InputBilling::PerRequest => per_call,
            InputBilling::PerSample => per_call * n as u64,
        }
    }

    fn complete_ranking(&self, req: &CompletionRequest, members: Vec<&str>) -> Result<CompletionResponse> {
        let mut difficulties = Vec::with_capacity(members.len());
        for text in &members {
            let id = self
                .by_text
                .get(*text)
                .ok_or_else(|| Error::Backend(format!("ranking prompt names an unknown question: {text:?}")))?;
            difficulties.push(self.entries[id].profile.latent_difficulty);
        }
        let mut rng = keyed_rng(self.seed, "rank", &req.prompt_text, 0);
        let noisy: Vec<f64> = difficulties
            .iter()
            .map(|d| {
                let z: f64 = StandardNormal.sample(&mut rng);
                d + self.settings.ranking_noise * z
            })
            .collect();
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| noisy[a].total_cmp(&noisy[b]));
        let text = order.iter().map(|i| format!("Q{}", i + 1)).collect::<Vec<_>>().join(", ");
        let out_tokens = approx_token_count(&text);
        let per_call_input = self.settings.ranking_tokens_per_question * members.len() as u64;
        let input_tokens = self.billed_input(per_call_input, req.n);
        let texts = vec![text; req.n];
        let per_sample_output = vec![out_tokens; req.n];
        let output_tokens = out_tokens * req.n as u64;
        self.record(CallRecord {
            question_id: None,
            n: req.n,
            input_tokens,
            output_tokens,
        });
        Ok(CompletionResponse {
            texts,
            input_tokens,
            output_tokens,
            per_sample_output,
        })
    }
}

impl Backend for SimBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        req.validate()?;
        if let Some(members) = split_rank_prompt(&req.prompt_text) {
            return self.complete_ranking(req, members);
        }
        let key = req
            .stream
            .as_ref()
            .ok_or_else(|| Error::Backend("simulated reasoning request without a stream key".into()))?;
        let entry = self
            .entries
            .get(&key.question_id)
            .ok_or_else(|| Error::Backend(format!("no profile for question {}", key.question_id)))?;
        let mut rng = ChaCha8Rng::from_seed(entry.stream);
        let mut texts = Vec::with_capacity(req.n);
        let mut per_sample_output = Vec::with_capacity(req.n);
        for j in 0..req.n as u64 {
            let draw = key.first_draw + j;
            rng.set_word_pos(draw as u128 * WORDS_PER_DRAW);
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            let idx = if req.temperature == 0.0 {
                entry.mode
            } else {
                entry.cdf.iter().position(|&c| u < c).unwrap_or(entry.cdf.len() - 1)
            };
            let answer = &entry.profile.answer_distribution[idx].answer;
            texts.push(format!("Working through question {} (draw {draw}). The answer is {answer}.", key.question_id));
            per_sample_output.push((entry.profile.output_token_mean * (0.5 + v)).round().max(1.0) as u64);
        }
        let input_tokens = self.billed_input(entry.profile.input_token_count, req.n);
        let output_tokens = per_sample_output.iter().sum();
        self.record(CallRecord {
            question_id: Some(key.question_id.clone()),
            n: req.n,
            input_tokens,
            output_tokens,
        });
        Ok(CompletionResponse {
            texts,
            input_tokens,
            output_tokens,
            per_sample_output,
        })
    }

    fn count_input_tokens(&self, prompt_text: &str) -> u64 {
        if let Some(members) = split_rank_prompt(prompt_text) {
            return self.settings.ranking_tokens_per_question * members.len() as u64;
        }
        question_from_reasoning_prompt(prompt_text)
            .and_then(|text| self.by_text.get(text))
            .map(|id| self.entries[id].profile.input_token_count)
            .unwrap_or_else(|| approx_token_count(prompt_text))
    }
}

/// Shape of a generated simulation pool.
///
/// Latent difficulties are evenly spaced over `[0, max_difficulty]`. The
/// easiest `deterministic_fraction` of questions always get the gold answer;
/// the rest answer according to their latent difficulty, so accuracy drops
/// sharply at the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSpec {
    pub questions: usize,
    pub deterministic_fraction: f64,
    pub max_difficulty: f64,
    /// Distinct answers per question, gold included.
    pub support: usize,
    pub input_tokens: u64,
    pub output_token_mean: f64,
    pub seed: u64,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            questions: 200,
            deterministic_fraction: 0.3,
            max_difficulty: 1.0,
            support: 4,
            input_tokens: 846,
            output_token_mean: 142.1,
            seed: 0,
        }
    }
}

/// Generates a dataset and matching simulation profiles. Dataset order is
/// shuffled so it carries no difficulty information.
pub fn generate_pool(spec: &PoolSpec) -> Result<(Vec<Question>, Vec<SimQuestionProfile>)> {
    if spec.questions == 0 || spec.support == 0 {
        return Err(Error::InvalidParams("pool needs at least one question and one answer".into()));
    }
    if !(0.0..=1.0).contains(&spec.deterministic_fraction) || !(0.0..=1.0).contains(&spec.max_difficulty) {
        return Err(Error::InvalidParams("deterministic_fraction and max_difficulty must lie in [0,1]".into()));
    }
    let mut rng = keyed_rng(spec.seed, "pool", "", 0);
    let n = spec.questions;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut questions = Vec::with_capacity(n);
    let mut profiles = Vec::with_capacity(n);
    for (slot, &rank) in order.iter().enumerate() {
        let t = if n == 1 { 0.0 } else { rank as f64 / (n - 1) as f64 };
        let difficulty = spec.max_difficulty * t;
        let answer_difficulty = if t < spec.deterministic_fraction { 0.0 } else { difficulty };
        let id = format!("sim-{slot:04}");
        let base: u32 = rng.random_range(10..10_000);
        let gold = base.to_string();
        let distractors: Vec<String> = (1..spec.support as u32).map(|k| (base + 7 * k).to_string()).collect();
        questions.push(
            Question::new(&id, format!("Simulated problem {id}: find the value of item {base}."), &gold)
                .with_difficulty(difficulty),
        );
        let mut profile = SimQuestionProfile::from_difficulty(&id, &gold, &distractors, answer_difficulty, spec.output_token_mean, spec.input_tokens);
        profile.latent_difficulty = difficulty;
        profiles.push(profile);
    }
    Ok((questions, profiles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::extract_answer;

    fn single(gold_p: f64) -> (Vec<Question>, Vec<SimQuestionProfile>) {
        let q = Question::new("q1", "What?", "7");
        let mut dist = vec![AnswerWeight { answer: "7".into(), probability: gold_p }];
        if gold_p < 1.0 {
            dist.push(AnswerWeight { answer: "8".into(), probability: 1.0 - gold_p });
        }
        let p = SimQuestionProfile {
            id: "q1".into(),
            latent_difficulty: 1.0 - gold_p,
            answer_distribution: dist,
            output_token_mean: 100.0,
            input_token_count: 846,
        };
        (vec![q], vec![p])
    }

    fn req(n: usize, first: u64) -> CompletionRequest {
        CompletionRequest::new("Q: What?\nA:", n, 0.7).stream("q1", first)
    }

    #[test]
    fn degenerate_distribution_repeats_gold() {
        let (qs, ps) = single(1.0);
        let sim = SimBackend::new(&qs, &ps, SimSettings::default(), 1).unwrap();
        let resp = sim.complete(&req(4, 0)).unwrap();
        assert_eq!(resp.texts.len(), 4);
        assert!(resp.texts.iter().all(|t| extract_answer(t) == "7"));
    }

    #[test]
    fn zero_samples_rejected() {
        let (qs, ps) = single(1.0);
        let sim = SimBackend::new(&qs, &ps, SimSettings::default(), 1).unwrap();
        assert!(sim.complete(&req(0, 0)).is_err());
    }

    #[test]
    fn fair_coin_frequency() {
        let (qs, ps) = single(0.5);
        let sim = SimBackend::new(&qs, &ps, SimSettings::default(), 42).unwrap();
        let resp = sim.complete(&req(10_000, 0)).unwrap();
        let gold = resp.texts.iter().filter(|t| extract_answer(t) == "7").count();
        let freq = gold as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "gold frequency {freq}");
    }

    #[test]
    fn draws_are_keyed_by_index() {
        let (qs, ps) = single(0.5);
        let sim = SimBackend::new(&qs, &ps, SimSettings::default(), 9).unwrap();
        let all = sim.complete(&req(12, 0)).unwrap();
        let head = sim.complete(&req(5, 0)).unwrap();
        let tail = sim.complete(&req(7, 5)).unwrap();
        let joined: Vec<_> = head.texts.iter().chain(&tail.texts).cloned().collect();
        assert_eq!(all.texts, joined);
        let joined_out: Vec<_> = head.per_sample_output.iter().chain(&tail.per_sample_output).copied().collect();
        assert_eq!(all.per_sample_output, joined_out);
    }

    #[test]
    fn billing_modes() {
        let (qs, ps) = single(0.9);
        let per_req = SimBackend::new(&qs, &ps, SimSettings::default(), 1).unwrap();
        assert_eq!(per_req.complete(&req(5, 0)).unwrap().input_tokens, 846);
        let per_sample = SimSettings { billing: InputBilling::PerSample, ..SimSettings::default() };
        let per_sample = SimBackend::new(&qs, &ps, per_sample, 1).unwrap();
        assert_eq!(per_sample.complete(&req(5, 0)).unwrap().input_tokens, 5 * 846);
    }

    #[test]
    fn counts_input_from_profile() {
        let (qs, ps) = single(1.0);
        let sim = SimBackend::new(&qs, &ps, SimSettings::default(), 1).unwrap();
        assert_eq!(sim.count_input_tokens("Q: What?\nA:"), 846);
        assert_eq!(sim.count_input_tokens(""), 0);
    }

    #[test]
    fn rejects_profile_without_gold() {
        let (qs, mut ps) = single(1.0);
        ps[0].answer_distribution[0].answer = "9".into();
        assert!(SimBackend::new(&qs, &ps, SimSettings::default(), 1).is_err());
        let (qs, mut ps) = single(0.5);
        ps[0].answer_distribution[1].probability = 0.6;
        assert!(SimBackend::new(&qs, &ps, SimSettings::default(), 1).is_err());
    }

    #[test]
    fn difficulty_model() {
        let distractors: Vec<String> = vec!["b".into(), "c".into(), "d".into()];
        let p = SimQuestionProfile::from_difficulty("x", "a", &distractors, 1.0, 1.0, 1);
        for w in &p.answer_distribution {
            assert!((w.probability - 0.25).abs() < 1e-12);
        }
        let p = SimQuestionProfile::from_difficulty("x", "a", &distractors, 0.4, 1.0, 1);
        assert!((p.answer_distribution[0].probability - 0.7).abs() < 1e-12);
        p.validate("a").unwrap();
    }

    #[test]
    fn pool_gradient() {
        let spec = PoolSpec { questions: 11, deterministic_fraction: 0.3, ..PoolSpec::default() };
        let (qs, ps) = generate_pool(&spec).unwrap();
        assert_eq!(qs.len(), 11);
        let mut d: Vec<(f64, f64)> = ps.iter().map(|p| (p.latent_difficulty, p.answer_distribution[0].probability)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (i, (latent, gold_p)) in d.iter().enumerate() {
            assert!((latent - i as f64 / 10.0).abs() < 1e-12);
            assert_eq!(*gold_p == 1.0, i < 3, "question {i}");
        }
        for (q, p) in qs.iter().zip(&ps) {
            p.validate(&q.gold_answer).unwrap();
        }
        assert_eq!(generate_pool(&spec).unwrap().0, qs);
    }
}
