//! Problem partition: pre-sample questions from hardest to easiest and cut
//! the set once `k` consecutive questions show zero answer entropy.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{entropy, CostLedger, Question, SampleTally, Step};
use crate::orchestrators::RunContext;

/// Incremental form of the anchor rule: feed entropies in scan order and
/// learn when the latest `k` (current one included) are all exactly zero.
#[derive(Debug, Clone)]
pub struct AnchorScan {
    judge_window: usize,
    zero_run: usize,
    trace: Vec<f64>,
}

impl AnchorScan {
    pub fn new(judge_window: usize) -> Result<Self> {
        if judge_window < 1 {
            return Err(Error::InvalidParams("judge window must be >= 1".into()));
        }
        Ok(Self {
            judge_window,
            zero_run: 0,
            trace: Vec::new(),
        })
    }

    /// Records one entropy; returns true when this entry triggers the cut.
    pub fn push(&mut self, entropy: f64) -> bool {
        self.trace.push(entropy);
        self.zero_run = if entropy == 0.0 { self.zero_run + 1 } else { 0 };
        self.zero_run >= self.judge_window
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }
}

/// Anchor (1-based) for a complete trace: the first index whose trailing `k`
/// entries are zero, or the trace length if none is.
pub fn find_anchor(trace: &[f64], judge_window: usize) -> Result<usize> {
    let mut scan = AnchorScan::new(judge_window)?;
    for (i, &e) in trace.iter().enumerate() {
        if scan.push(e) {
            return Ok(i + 1);
        }
    }
    Ok(trace.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub anchor: usize,
    /// Hardest first.
    pub hard_ids: Vec<String>,
    pub easy_ids: Vec<String>,
    pub presamples: BTreeMap<String, SampleTally>,
    pub entropy_trace: Vec<f64>,
}

/// Scans `hard_to_easy` drawing `p` presamples per question until the
/// anchor rule fires. Presample tokens go to ledger step "presample".
pub fn partition(hard_to_easy: &[&Question], ctx: &RunContext<'_>, ledger: &mut CostLedger) -> Result<PartitionResult> {
    let p = ctx.params.presample_size;
    if p < 2 {
        return Err(Error::InvalidParams("presample size must be >= 2".into()));
    }
    let mut scan = AnchorScan::new(ctx.params.judge_window)?;
    let mut presamples = BTreeMap::new();
    let mut anchor = hard_to_easy.len();
    for (i, q) in hard_to_easy.iter().enumerate() {
        let tally = ctx.draw(q, p, 0, Step::Presample, ledger)?;
        let h = entropy(&tally)?;
        presamples.insert(q.id.clone(), tally);
        if scan.push(h) {
            anchor = i + 1;
            break;
        }
    }
    Ok(PartitionResult {
        anchor,
        hard_ids: hard_to_easy[..anchor].iter().map(|q| q.id.clone()).collect(),
        easy_ids: hard_to_easy[anchor..].iter().map(|q| q.id.clone()).collect(),
        presamples,
        entropy_trace: scan.trace,
    })
}

/// One chain-of-thought sample per easy question, charged to "reasoning".
pub fn solve_easy(easy: &[&Question], ctx: &RunContext<'_>, ledger: &mut CostLedger) -> Result<BTreeMap<String, SampleTally>> {
    easy.iter()
        .map(|q| Ok((q.id.clone(), ctx.draw(q, 1, 0, Step::Reasoning, ledger)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartLabel {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub id: String,
    pub part: PartLabel,
    pub entropy: Option<f64>,
    pub presample_answers: Vec<String>,
}

/// One line per question in scan order (hardest first).
pub fn write_partition_artifact<W: Write>(result: &PartitionResult, mut w: W) -> Result<()> {
    let hard = result.hard_ids.iter().map(|id| (id, PartLabel::Hard));
    let easy = result.easy_ids.iter().map(|id| (id, PartLabel::Easy));
    for (i, (id, part)) in hard.chain(easy).enumerate() {
        let rec = PartitionRecord {
            id: id.clone(),
            part,
            entropy: result.entropy_trace.get(i).copied(),
            presample_answers: result.presamples.get(id).map(|t| t.samples().to_vec()).unwrap_or_default(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor_hand_traces() {
        assert_eq!(find_anchor(&[0.5, 0.0, 0.0, 0.0, 0.7, 0.0], 3).unwrap(), 4);
        assert_eq!(find_anchor(&[0.0; 10], 3).unwrap(), 3);
        assert_eq!(find_anchor(&[0.0, 0.0, 0.3, 0.0, 0.0, 0.2, 0.0], 3).unwrap(), 7);
        assert_eq!(find_anchor(&[0.1, 0.0], 1).unwrap(), 2);
        assert!(find_anchor(&[0.0], 0).is_err());
    }

    fn binary_trace() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![Just(0.0), 0.01f64..2.0], 0..60)
    }

    proptest! {
        #[test]
        fn anchor_is_first_trigger(trace in binary_trace(), k in 1usize..8) {
            let a = find_anchor(&trace, k).unwrap();
            let fires = |i: usize| i >= k && trace[i - k..i].iter().all(|e| *e == 0.0);
            prop_assert!(a == trace.len() || fires(a));
            for j in 1..a {
                prop_assert!(!fires(j));
            }
        }

        #[test]
        fn anchor_monotone_in_k(trace in binary_trace(), k in 1usize..8) {
            prop_assert!(find_anchor(&trace, k + 1).unwrap() >= find_anchor(&trace, k).unwrap());
        }

        #[test]
        fn anchor_depends_only_on_zero_pattern(trace in binary_trace(), k in 1usize..6, scale in 0.1f64..10.0) {
            let rescaled: Vec<f64> = trace.iter().map(|e| e * scale).collect();
            prop_assert_eq!(find_anchor(&trace, k).unwrap(), find_anchor(&rescaled, k).unwrap());
        }
    }
}
