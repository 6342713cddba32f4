use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dsc_core::backend::PoolSpec;
use dsc_core::experiment::{emit_report, read_summary, run_experiment, write_sim_pool, Experiment, ExperimentConfig, MethodChoice};
use dsc_core::ranking::{evaluate_ranking, write_ranking_artifact};

#[derive(Parser)]
#[command(name = "dsc", version, about = "Difficulty-adaptive self-consistency experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank the dataset by difficulty and write the ranking artifact.
    Rank {
        #[arg(short, long)]
        config: PathBuf,
        /// Seed for batch splits; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to <output_dir>/ranking.jsonl.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the configured methods over every seed.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides the config's method.
        #[arg(short, long)]
        method: Option<MethodChoice>,
        /// Ranking artifact to use instead of ranking again.
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Generate a simulated pool with a difficulty gradient.
    Simulate {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        questions: usize,
        #[arg(long, default_value_t = 0.3)]
        deterministic_fraction: f64,
        #[arg(long, default_value_t = 4)]
        support: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render tables from a summary CSV.
    Report {
        summary: PathBuf,
        /// Write the markdown here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Print CSV instead of markdown.
        #[arg(long)]
        csv: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Rank { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let out = out.unwrap_or_else(|| cfg.output_dir.join("ranking.jsonl"));
            let exp = Experiment::new(cfg)?;
            let outcome = exp.rank(seed)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            write_ranking_artifact(&outcome, BufWriter::new(File::create(&out)?))?;
            println!(
                "ranked {} questions in {} rounds, cost {}",
                outcome.order.len(),
                outcome.table.rounds_completed,
                outcome.ledger.total_cost()
            );
            if exp.questions.iter().all(|q| q.gold_difficulty.is_some()) {
                let c = evaluate_ranking(&outcome, &exp.questions)?;
                println!("spearman {:.4}  pearson {:.4}  kendall {:.4}", c.spearman, c.pearson, c.kendall);
            }
            println!("wrote {}", out.display());
        }
        Command::Run { config, method, ranking } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(r) = ranking {
                cfg.ranking_artifact = Some(r);
                cfg.validate()?;
            }
            let out_dir = cfg.output_dir.clone();
            let summary = run_experiment(cfg)?;
            for r in summary.runs.iter().filter(|r| !r.ok) {
                eprintln!("{} seed {} failed: {}", r.method, r.seed, r.error);
            }
            if summary.methods.is_empty() {
                bail!("no runs");
            }
            print!("{}", emit_report(&summary.methods)?.markdown);
            println!("\nresults in {}", out_dir.display());
        }
        Command::Simulate {
            out,
            questions,
            deterministic_fraction,
            support,
            seed,
        } => {
            let spec = PoolSpec {
                questions,
                deterministic_fraction,
                support,
                seed,
                ..PoolSpec::default()
            };
            let (qs, _) = write_sim_pool(&spec, &out).with_context(|| format!("writing pool to {}", out.display()))?;
            println!("wrote {} questions, profiles and config.toml to {}", qs.len(), out.display());
        }
        Command::Report { summary, out, csv } => {
            let rows = read_summary(&summary).with_context(|| format!("reading {}", summary.display()))?;
            let report = emit_report(&rows)?;
            let text = if csv { report.csv } else { report.markdown };
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
