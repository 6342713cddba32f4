//! Experiment harness: dataset ingestion, config files, seeded repeats,
//! artifacts and report tables.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{generate_pool, Backend, HttpBackend, HttpSettings, InputBilling, PoolSpec, SimBackend, SimQuestionProfile, SimSettings};
use crate::error::{Error, Result};
use crate::metrics::{self, mean_sd};
use crate::model::{HyperParams, Money, PricingTable, Question};
use crate::orchestrators::{run_asc, run_dsc, run_esc, run_sc, CriterionKind, Method, RunContext, RunReport};
use crate::partition::write_partition_artifact;
use crate::prompt::ReasoningPrompt;
use crate::ranking::{rank_difficulty, read_ranking_artifact, write_ranking_artifact, RankingOutcome};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Sc,
    Asc,
    Esc,
    Dsc,
    #[default]
    All,
}

impl MethodChoice {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodChoice::Sc => vec![Method::Sc],
            MethodChoice::Asc => vec![Method::Asc],
            MethodChoice::Esc => vec![Method::Esc],
            MethodChoice::Dsc => vec![Method::Dsc],
            MethodChoice::All => Method::ALL.to_vec(),
        }
    }
}

impl std::str::FromStr for MethodChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(MethodChoice::All);
        }
        Ok(match s.parse::<Method>()? {
            Method::Sc => MethodChoice::Sc,
            Method::Asc => MethodChoice::Asc,
            Method::Esc => MethodChoice::Esc,
            Method::Dsc => MethodChoice::Dsc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Sim {
        /// JSONL, one profile per question id.
        profiles: PathBuf,
        #[serde(default, flatten)]
        settings: SimSettings,
    },
    Http(#[serde(default)] HttpSettings),
}

/// Experiment description, read from TOML. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub method: MethodChoice,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Few-shot demonstrations prepended to every reasoning prompt.
    #[serde(default)]
    pub prompt_file: Option<PathBuf>,
    /// Reuse a ranking produced by `rank` instead of ranking again.
    #[serde(default)]
    pub ranking_artifact: Option<PathBuf>,
    /// Issue n single-sample calls instead of one n-sample request, so
    /// every sample pays for the prompt.
    #[serde(default)]
    pub sequential_input_mode: bool,
    #[serde(default)]
    pub criterion: CriterionKind,
    /// Runs executed at once; 0 lets the thread pool decide.
    #[serde(default)]
    pub parallelism: usize,
    #[serde(default)]
    pub params: HyperParams,
    #[serde(default)]
    pub pricing: PricingTable,
    pub backend: BackendConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        if let Some(p) = self.prompt_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.ranking_artifact.as_mut() {
            fix(p);
        }
        if let BackendConfig::Sim { profiles, .. } = &mut self.backend {
            fix(profiles);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut files = vec![&self.dataset];
        files.extend(self.prompt_file.as_ref());
        files.extend(self.ranking_artifact.as_ref());
        if let BackendConfig::Sim { profiles, .. } = &self.backend {
            files.push(profiles);
        }
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("{} does not exist", f.display())));
            }
        }
        self.params.validate()?;
        self.pricing.validate()
    }

    fn billing(&self) -> InputBilling {
        if self.sequential_input_mode {
            InputBilling::PerSample
        } else {
            InputBilling::PerRequest
        }
    }
}

#[derive(Deserialize)]
struct DatasetLine {
    id: Value,
    question: String,
    answer: Value,
    #[serde(default)]
    difficulty: Option<f64>,
}

fn scalar_string(v: &Value, field: &str) -> std::result::Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(format!("field '{field}' must be a string or number")),
    }
}

/// Reads a JSONL dataset (`id`, `question`, `answer`, optional
/// `difficulty`). Blank lines are skipped.
pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Dataset { line: i + 1, message };
        let rec: DatasetLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let id = scalar_string(&rec.id, "id").map_err(bad)?;
        let answer = scalar_string(&rec.answer, "answer").map_err(bad)?;
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate id '{id}'")));
        }
        let mut q = Question::new(id, rec.question, answer);
        q.gold_difficulty = rec.difficulty;
        out.push(q);
    }
    Ok(out)
}

pub fn ingest_dataset(path: &Path) -> Result<Vec<Question>> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn read_profiles(path: &Path) -> Result<Vec<SimQuestionProfile>> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DatasetOut<'a> {
    id: &'a str,
    question: &'a str,
    answer: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    difficulty: Option<f64>,
}

/// Generates a simulated pool and writes `dataset.jsonl`,
/// `profiles.jsonl` and a starter `config.toml` into `dir`.
pub fn write_sim_pool(spec: &PoolSpec, dir: &Path) -> Result<(Vec<Question>, Vec<SimQuestionProfile>)> {
    let (questions, profiles) = generate_pool(spec)?;
    fs::create_dir_all(dir)?;
    let rows: Vec<DatasetOut<'_>> = questions
        .iter()
        .map(|q| DatasetOut {
            id: &q.id,
            question: &q.text,
            answer: &q.gold_answer,
            difficulty: q.gold_difficulty,
        })
        .collect();
    write_jsonl(&dir.join("dataset.jsonl"), &rows)?;
    write_jsonl(&dir.join("profiles.jsonl"), &profiles)?;
    let config = format!(
        "dataset = \"dataset.jsonl\"\nmethod = \"all\"\nseeds = [1, 2, 3, 4, 5]\noutput_dir = \"out\"\n\n[backend]\nkind = \"sim\"\nprofiles = \"profiles.jsonl\"\n\n[params]\n{}",
        toml::to_string(&HyperParams::default()).map_err(|e| Error::Config(e.to_string()))?
    );
    fs::write(dir.join("config.toml"), config)?;
    Ok((questions, profiles))
}

/// Inputs shared by every run of one experiment.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub questions: Vec<Question>,
    pub prompt: ReasoningPrompt,
    profiles: Vec<SimQuestionProfile>,
    http: Option<HttpBackend>,
    prior_ranking: Option<RankingOutcome>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let questions = ingest_dataset(&config.dataset)?;
        let prompt = match &config.prompt_file {
            Some(p) => ReasoningPrompt::new(fs::read_to_string(p)?),
            None => ReasoningPrompt::default(),
        };
        let (profiles, http) = match &config.backend {
            BackendConfig::Sim { profiles, .. } => (read_profiles(profiles)?, None),
            BackendConfig::Http(settings) => {
                let settings = HttpSettings {
                    billing: config.billing(),
                    ..settings.clone()
                };
                (Vec::new(), Some(HttpBackend::new(settings)))
            }
        };
        let prior_ranking = match &config.ranking_artifact {
            Some(p) => Some(read_ranking_artifact(BufReader::new(File::open(p)?))?),
            None => None,
        };
        Ok(Self {
            config,
            questions,
            prompt,
            profiles,
            http,
            prior_ranking,
        })
    }

    /// The simulator is keyed by the run seed; the HTTP backend is shared.
    fn with_backend<T>(&self, seed: u64, f: impl FnOnce(&dyn Backend) -> Result<T>) -> Result<T> {
        match (&self.config.backend, &self.http) {
            (_, Some(http)) => f(http),
            (BackendConfig::Sim { settings, .. }, None) => {
                let settings = SimSettings {
                    billing: self.config.billing(),
                    ..settings.clone()
                };
                let sim = SimBackend::new(&self.questions, &self.profiles, settings, seed)?;
                f(&sim)
            }
            (BackendConfig::Http(_), None) => unreachable!("http backend is built in Experiment::new"),
        }
    }

    fn context<'a>(&'a self, backend: &'a dyn Backend, seed: u64) -> RunContext<'a> {
        RunContext {
            criterion: self.config.criterion,
            ..RunContext::new(backend, &self.config.pricing, &self.prompt, &self.config.params, seed)
        }
    }

    /// Ranking step alone, for caching with `ranking_artifact`.
    pub fn rank(&self, seed: u64) -> Result<RankingOutcome> {
        self.with_backend(seed, |b| rank_difficulty(&self.questions, &self.config.params, seed, b, &self.config.pricing))
    }

    /// One method under one seed. DSC also returns its artifacts.
    pub fn run_one(&self, method: Method, seed: u64) -> Result<RunOutput> {
        self.with_backend(seed, |b| {
            let ctx = self.context(b, seed);
            Ok(match method {
                Method::Sc => RunOutput::plain(run_sc(&self.questions, &ctx)?),
                Method::Asc => RunOutput::plain(run_asc(&self.questions, &ctx)?),
                Method::Esc => RunOutput::plain(run_esc(&self.questions, &ctx)?),
                Method::Dsc => {
                    let out = run_dsc(&self.questions, &ctx, self.prior_ranking.clone())?;
                    let mut ranking = Vec::new();
                    write_ranking_artifact(&out.ranking, &mut ranking)?;
                    let mut partition = Vec::new();
                    write_partition_artifact(&out.partition, &mut partition)?;
                    RunOutput {
                        report: out.report,
                        ranking_artifact: Some(ranking),
                        partition_artifact: Some(partition),
                    }
                }
            })
        })
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub ranking_artifact: Option<Vec<u8>>,
    pub partition_artifact: Option<Vec<u8>>,
}

impl RunOutput {
    fn plain(report: RunReport) -> Self {
        Self {
            report,
            ranking_artifact: None,
            partition_artifact: None,
        }
    }
}

/// Money as a 4-decimal string in CSV files.
mod money_4dp {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Money, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&m.to_4dp())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Money, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad amount '{s}'")))
    }

    pub fn parse(s: &str) -> Option<Money> {
        let (whole, frac) = s.trim().split_once('.').unwrap_or((s.trim(), ""));
        if frac.len() > 9 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        let whole: u64 = whole.parse().ok()?;
        let frac: u64 = if frac.is_empty() { 0 } else { format!("{frac:0<9}").parse().ok()? };
        Some(Money::from_nanos(whole * 1_000_000_000 + frac))
    }
}

/// One seed × method run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: Method,
    pub seed: u64,
    pub ok: bool,
    /// Percent correct.
    pub accuracy: f64,
    #[serde(with = "money_4dp")]
    pub cost: Money,
    /// Totals over the run; equal to the sums over the results file.
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub mean_samples: f64,
    pub error: String,
}

/// Per-method aggregate over seeds. Token and sample columns are
/// per-question averages, cost is per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    #[serde(with = "money_4dp")]
    pub cost_mean: Money,
    pub input_tokens_mean: f64,
    pub output_tokens_mean: f64,
    pub samples_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub runs: Vec<RunRow>,
    pub methods: Vec<SummaryRow>,
}

fn run_row(method: Method, seed: u64, result: &Result<RunOutput>) -> Result<RunRow> {
    Ok(match result {
        Ok(out) => {
            let r = &out.report;
            let correct: Vec<bool> = r.records.iter().map(|x| x.correct).collect();
            RunRow {
                method,
                seed,
                ok: true,
                accuracy: metrics::accuracy(&correct)?,
                cost: r.ledger.total_cost(),
                input_tokens: r.ledger.input_tokens(),
                output_tokens: r.ledger.output_tokens(),
                mean_samples: r.mean_samples(),
                error: String::new(),
            }
        }
        Err(e) => {
            let partial = match e {
                Error::Stage { partial_ledger, .. } => partial_ledger.as_ref().clone(),
                _ => Default::default(),
            };
            RunRow {
                method,
                seed,
                ok: false,
                accuracy: 0.0,
                cost: partial.total_cost(),
                input_tokens: partial.input_tokens(),
                output_tokens: partial.output_tokens(),
                mean_samples: 0.0,
                error: e.to_string(),
            }
        }
    })
}

/// Aggregates run rows per method, in `Method` order. Failed runs are
/// counted but excluded from the means.
pub fn summarize(runs: &[RunRow], questions: usize) -> Vec<SummaryRow> {
    let mut by_method: BTreeMap<Method, Vec<&RunRow>> = BTreeMap::new();
    for r in runs {
        by_method.entry(r.method).or_default().push(r);
    }
    let per_q = questions.max(1) as f64;
    by_method
        .into_iter()
        .map(|(method, rows)| {
            let ok: Vec<&RunRow> = rows.iter().copied().filter(|r| r.ok).collect();
            let n = ok.len();
            let mean = |f: &dyn Fn(&RunRow) -> f64| if n == 0 { 0.0 } else { ok.iter().map(|r| f(r)).sum::<f64>() / n as f64 };
            let acc: Vec<f64> = ok.iter().map(|r| r.accuracy).collect();
            let (accuracy_mean, accuracy_sd) = if n == 0 { (0.0, 0.0) } else { mean_sd(&acc) };
            let nanos: u64 = ok.iter().map(|r| r.cost.nanos()).sum();
            let cost_mean = if n == 0 { Money::ZERO } else { Money::from_nanos((2 * nanos + n as u64) / (2 * n as u64)) };
            SummaryRow {
                method,
                runs: n,
                failed: rows.len() - n,
                accuracy_mean,
                accuracy_sd,
                cost_mean,
                input_tokens_mean: mean(&|r| r.input_tokens as f64 / per_q),
                output_tokens_mean: mean(&|r| r.output_tokens as f64 / per_q),
                samples_mean: mean(&|r| r.mean_samples),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Runs every seed × method and writes, under `output_dir`:
/// `results/{method}-seed{seed}.jsonl`, DSC's ranking and partition
/// artifacts under `artifacts/`, plus `runs.csv`, `summary.csv` and
/// `report.md`.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentSummary> {
    let exp = Experiment::new(config)?;
    let out_dir = exp.config.output_dir.clone();
    let results_dir = out_dir.join("results");
    let artifacts_dir = out_dir.join("artifacts");
    fs::create_dir_all(&results_dir)?;
    fs::create_dir_all(&artifacts_dir)?;

    let jobs: Vec<(u64, Method)> = exp
        .config
        .seeds
        .iter()
        .flat_map(|&s| exp.config.method.methods().into_iter().map(move |m| (s, m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.config.parallelism)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<Result<RunOutput>> = pool.install(|| jobs.par_iter().map(|&(seed, method)| exp.run_one(method, seed)).collect());

    let mut runs = Vec::with_capacity(jobs.len());
    for (&(seed, method), outcome) in jobs.iter().zip(&outcomes) {
        runs.push(run_row(method, seed, outcome)?);
        if let Ok(out) = outcome {
            let mut buf = Vec::new();
            out.report.write_jsonl(&mut buf)?;
            fs::write(results_dir.join(format!("{}-seed{seed}.jsonl", method.as_str())), buf)?;
            if let Some(bytes) = &out.ranking_artifact {
                fs::write(artifacts_dir.join(format!("ranking-seed{seed}.jsonl")), bytes)?;
            }
            if let Some(bytes) = &out.partition_artifact {
                fs::write(artifacts_dir.join(format!("partition-seed{seed}.jsonl")), bytes)?;
            }
        }
    }
    runs.sort_by_key(|r| (r.method, r.seed));
    let methods = summarize(&runs, exp.questions.len());
    write_csv(&out_dir.join("runs.csv"), &runs)?;
    write_csv(&out_dir.join("summary.csv"), &methods)?;
    if !methods.is_empty() {
        fs::write(out_dir.join("report.md"), emit_report(&methods)?.markdown)?;
    }
    Ok(ExperimentSummary { runs, methods })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub markdown: String,
    pub csv: String,
}

/// Renders an accuracy/cost table and a token table.
pub fn emit_report(summary: &[SummaryRow]) -> Result<Report> {
    if summary.is_empty() {
        return Err(Error::DegenerateInput("empty summary".into()));
    }
    let mut md = String::from("## Accuracy and cost\n\n| Method | Runs | Accuracy (%) | Cost ($) |\n|---|---:|---:|---:|\n");
    for r in summary {
        md.push_str(&format!(
            "| {} | {} | {:.2} ± {:.2} | {} |\n",
            r.method,
            r.runs,
            r.accuracy_mean,
            r.accuracy_sd,
            r.cost_mean.to_4dp()
        ));
    }
    md.push_str("\n## Tokens per question\n\n| Method | Input | Output | Samples |\n|---|---:|---:|---:|\n");
    for r in summary {
        md.push_str(&format!(
            "| {} | {:.1} | {:.1} | {:.2} |\n",
            r.method, r.input_tokens_mean, r.output_tokens_mean, r.samples_mean
        ));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "runs", "accuracy", "accuracy_sd", "cost", "input_tokens", "output_tokens", "samples"])?;
    for r in summary {
        w.write_record([
            r.method.as_str().to_string(),
            r.runs.to_string(),
            format!("{:.2}", r.accuracy_mean),
            format!("{:.2}", r.accuracy_sd),
            r.cost_mean.to_4dp(),
            format!("{:.1}", r.input_tokens_mean),
            format!("{:.1}", r.output_tokens_mean),
            format!("{:.2}", r.samples_mean),
        ])?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is utf-8");
    Ok(Report { markdown: md, csv })
}
