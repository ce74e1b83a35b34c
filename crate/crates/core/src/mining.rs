//! Contrastive pair mining over attempt logs.
//!
//! Per example the worst and best attempts form one candidate pair with
//! improvement `delta = best - worst`. Candidates below `delta_min` are
//! dropped; if their best attempt also failed, the example goes to the
//! all-fail bucket for its error type instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metrics::{success, Score};
use crate::retry::{Attempt, AttemptSet, ErrorType};

/// Default minimum improvement for a pair to count.
pub const DEFAULT_DELTA_MIN: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSide {
    pub attempt_index: u32,
    pub trace: String,
    pub answer: String,
    pub score: Score,
    pub feedback_context: String,
}

impl From<&Attempt> for PairSide {
    fn from(a: &Attempt) -> Self {
        Self {
            attempt_index: a.index,
            trace: a.trace.clone(),
            answer: a.answer.clone(),
            score: a.score,
            feedback_context: a.feedback_context.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub example_id: String,
    pub input: String,
    pub failed: PairSide,
    pub success: PairSide,
    pub delta: f64,
    /// Error type of the failed attempt.
    pub error_type: ErrorType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllFailMember {
    pub example_id: String,
    pub input: String,
    pub best_trace: String,
    pub best_answer: String,
    pub best_score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllFailGroup {
    pub error_type: ErrorType,
    pub members: Vec<AllFailMember>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPriority {
    Contrastive,
    AllFail,
    Neither,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MineOptions {
    pub delta_min: f64,
    /// Overrides the per-set recorded thresholds when set.
    pub threshold: Option<f64>,
    /// Only pair when the best attempt also passes the success predicate.
    pub strict_success_pairs: bool,
}

impl Default for MineOptions {
    fn default() -> Self {
        Self {
            delta_min: DEFAULT_DELTA_MIN,
            threshold: None,
            strict_success_pairs: false,
        }
    }
}

impl MineOptions {
    pub fn new(delta_min: f64, threshold: f64) -> Self {
        Self {
            delta_min,
            threshold: Some(threshold),
            strict_success_pairs: false,
        }
    }

    fn threshold_for(&self, set: &AttemptSet) -> f64 {
        self.threshold.unwrap_or(set.threshold)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MineOutput {
    pub pairs: Vec<ContrastivePair>,
    pub groups: Vec<AllFailGroup>,
}

/// Which bucket an example belongs to. Provider-failed and empty sets are
/// always `Neither`.
pub fn pair_priority(set: &AttemptSet, options: &MineOptions) -> PairPriority {
    if set.provider_failure.is_some() {
        return PairPriority::Neither;
    }
    let (Some(best), Some(worst)) = (set.best(), set.worst()) else {
        return PairPriority::Neither;
    };
    let threshold = options.threshold_for(set);
    let delta = best.score.value() - worst.score.value();
    let best_passes = success(best.score, threshold);
    let contrastive = delta > 0.0
        && delta >= options.delta_min
        && (best_passes || !options.strict_success_pairs);
    if contrastive {
        PairPriority::Contrastive
    } else if !best_passes {
        PairPriority::AllFail
    } else {
        PairPriority::Neither
    }
}

pub fn mine(sets: &[AttemptSet], options: &MineOptions) -> MineOutput {
    let mut pairs = Vec::new();
    let mut groups: BTreeMap<ErrorType, Vec<AllFailMember>> = BTreeMap::new();
    for set in sets {
        match pair_priority(set, options) {
            PairPriority::Contrastive => {
                let best = set.best().expect("non-empty");
                let worst = set.worst().expect("non-empty");
                pairs.push(ContrastivePair {
                    example_id: set.example_id.clone(),
                    input: set.input.clone(),
                    failed: worst.into(),
                    success: best.into(),
                    delta: best.score.value() - worst.score.value(),
                    error_type: worst.error_type.unwrap_or(ErrorType::Other),
                });
            }
            PairPriority::AllFail => {
                let best = set.best().expect("non-empty");
                groups
                    .entry(best.error_type.unwrap_or(ErrorType::Other))
                    .or_default()
                    .push(AllFailMember {
                        example_id: set.example_id.clone(),
                        input: set.input.clone(),
                        best_trace: best.trace.clone(),
                        best_answer: best.answer.clone(),
                        best_score: best.score,
                    });
            }
            PairPriority::Neither => {}
        }
    }
    pairs.sort_by(|a, b| {
        b.delta
            .total_cmp(&a.delta)
            .then_with(|| a.example_id.cmp(&b.example_id))
    });
    let groups = groups
        .into_iter()
        .map(|(error_type, mut members)| {
            members.sort_by(|a, b| a.example_id.cmp(&b.example_id));
            AllFailGroup {
                error_type,
                members,
            }
        })
        .collect();
    MineOutput { pairs, groups }
}
