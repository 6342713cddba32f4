//! Sequential stopping criteria.
//!
//! * Dirichlet posterior criterion: with a symmetric Dirichlet(1) prior over
//!   the distinct answers observed so far, estimate by Monte Carlo the
//!   posterior probability that the leading answer's probability exceeds
//!   every other answer's, and stop once it clears the threshold.
//! * Window criterion: stop once the latest `w` answers are unanimous.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{majority_vote, normalize_answer, SampleTally};
use crate::seeding::derive_seed;

/// No Dirichlet verdict is given on fewer samples than this.
pub const DIRICHLET_MIN_SAMPLES: usize = 3;
/// Smallest draw count for which the estimator is usable at a 0.95 threshold.
pub const MIN_MC_DRAWS: usize = 1_000;
pub const DEFAULT_MC_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub stop: bool,
    pub confidence: Option<f64>,
}

impl CriterionVerdict {
    fn go_on() -> Self {
        Self {
            stop: false,
            confidence: None,
        }
    }
}

/// Monte Carlo estimate of P(p_leader > max_{i != leader} p_i) under
/// Dirichlet(counts + 1).
pub fn dirichlet_leader_confidence(counts: &[usize], leader: usize, mc_draws: usize, seed: u64) -> Result<f64> {
    if mc_draws < MIN_MC_DRAWS {
        return Err(Error::Config(format!("mc_draws must be >= {MIN_MC_DRAWS}, got {mc_draws}")));
    }
    if leader >= counts.len() {
        return Err(Error::InvalidParams("leader index out of range".into()));
    }
    if counts.len() == 1 {
        return Ok(1.0);
    }
    let gammas: Vec<Gamma<f64>> = counts
        .iter()
        .map(|&c| Gamma::new(c as f64 + 1.0, 1.0).expect("positive shape"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    for _ in 0..mc_draws {
        // normalizing the gammas does not change which one is largest
        let lead = gammas[leader].sample(&mut rng);
        let mut beaten = true;
        for (i, g) in gammas.iter().enumerate() {
            if i != leader && g.sample(&mut rng) >= lead {
                beaten = false;
            }
        }
        if beaten {
            wins += 1;
        }
    }
    Ok(wins as f64 / mc_draws as f64)
}

pub fn dirichlet_should_stop(tally: &SampleTally, c_thresh: f64, mc_draws: usize, seed: u64) -> Result<CriterionVerdict> {
    if mc_draws < MIN_MC_DRAWS {
        return Err(Error::Config(format!("mc_draws must be >= {MIN_MC_DRAWS}, got {mc_draws}")));
    }
    if !(c_thresh > 0.0 && c_thresh < 1.0) {
        return Err(Error::InvalidParams(format!("c_thresh must lie in (0, 1), got {c_thresh}")));
    }
    if tally.len() < DIRICHLET_MIN_SAMPLES {
        return Ok(CriterionVerdict::go_on());
    }
    let (winner, _) = majority_vote(tally)?;
    let counts = tally.counts();
    let leader = counts.iter().position(|(a, _)| *a == winner).expect("winner is counted");
    let counts: Vec<usize> = counts.into_iter().map(|(_, c)| c).collect();
    let confidence = dirichlet_leader_confidence(&counts, leader, mc_draws, seed)?;
    Ok(CriterionVerdict {
        stop: confidence > c_thresh,
        confidence: Some(confidence),
    })
}

/// True iff every answer in the window normalizes to the same string.
pub fn esc_window_should_stop<S: AsRef<str>>(window: &[S], window_size: usize) -> Result<bool> {
    if window.len() != window_size {
        return Err(Error::InvalidParams(format!(
            "window holds {} answers, expected {window_size}",
            window.len()
        )));
    }
    Ok(unanimous(window))
}

pub(crate) fn unanimous<S: AsRef<str>>(answers: &[S]) -> bool {
    let mut it = answers.iter().map(|a| normalize_answer(a.as_ref()));
    match it.next() {
        Some(first) => it.all(|a| a == first),
        None => false,
    }
}

/// Where in a question's sampling a criterion is being evaluated; used to
/// key the Monte Carlo seed.
#[derive(Debug, Clone, Copy)]
pub struct CheckContext<'a> {
    pub question_id: &'a str,
    pub check_index: u64,
}

pub trait StoppingCriterion: Send + Sync {
    fn check(&self, tally: &SampleTally, ctx: CheckContext<'_>) -> Result<CriterionVerdict>;
}

#[derive(Debug, Clone)]
pub struct DirichletCriterion {
    pub c_thresh: f64,
    pub mc_draws: usize,
    pub root_seed: u64,
}

impl DirichletCriterion {
    pub fn new(c_thresh: f64, mc_draws: usize, root_seed: u64) -> Result<Self> {
        if mc_draws < MIN_MC_DRAWS {
            return Err(Error::Config(format!("mc_draws must be >= {MIN_MC_DRAWS}, got {mc_draws}")));
        }
        if !(c_thresh > 0.0 && c_thresh < 1.0) {
            return Err(Error::InvalidParams(format!("c_thresh must lie in (0, 1), got {c_thresh}")));
        }
        Ok(Self {
            c_thresh,
            mc_draws,
            root_seed,
        })
    }
}

impl StoppingCriterion for DirichletCriterion {
    fn check(&self, tally: &SampleTally, ctx: CheckContext<'_>) -> Result<CriterionVerdict> {
        let seed = derive_seed(self.root_seed, "dirichlet", ctx.question_id, ctx.check_index);
        dirichlet_should_stop(tally, self.c_thresh, self.mc_draws, seed)
    }
}

/// Stops when the most recent `window` samples agree.
#[derive(Debug, Clone)]
pub struct WindowCriterion {
    pub window: usize,
}

impl StoppingCriterion for WindowCriterion {
    fn check(&self, tally: &SampleTally, _ctx: CheckContext<'_>) -> Result<CriterionVerdict> {
        if tally.len() < self.window {
            return Ok(CriterionVerdict::go_on());
        }
        let recent = &tally.samples()[tally.len() - self.window..];
        Ok(CriterionVerdict {
            stop: esc_window_should_stop(recent, self.window)?,
            confidence: None,
        })
    }
}
