//! Scoring functions and the success predicate.
//!
//! Text normalization follows the usual QA convention: lowercase, drop
//! punctuation, drop the articles `a`/`an`/`the`, collapse whitespace.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::MetricError;

/// Threshold used by binary metrics.
pub const BINARY_THRESHOLD: f64 = 1.0;
/// Default success threshold for token F1 tasks.
pub const TOKEN_F1_THRESHOLD: f64 = 0.6;

/// A score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Score(f64);

impl Score {
    pub const ZERO: Score = Score(0.0);
    pub const ONE: Score = Score(1.0);

    /// Clamps into `[0, 1]`; NaN maps to zero.
    pub fn new(value: f64) -> Self {
        if value.is_nan() {
            Score(0.0)
        } else {
            Score(value.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TokenF1,
    ExactMatch,
    McAccuracy,
    MacroF1,
}

impl MetricKind {
    pub fn default_threshold(self) -> f64 {
        match self {
            MetricKind::TokenF1 => TOKEN_F1_THRESHOLD,
            _ => BINARY_THRESHOLD,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::TokenF1 => "token_f1",
            MetricKind::ExactMatch => "exact_match",
            MetricKind::McAccuracy => "mc_accuracy",
            MetricKind::MacroF1 => "macro_f1",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token_f1" => Ok(Self::TokenF1),
            "exact_match" => Ok(Self::ExactMatch),
            "mc_accuracy" => Ok(Self::McAccuracy),
            "macro_f1" => Ok(Self::MacroF1),
            other => Err(format!("unknown metric kind `{other}`")),
        }
    }
}

/// The gold answer `y` for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoldTarget {
    FreeText {
        text: String,
    },
    /// `index` is the post-shuffle position; `permutation[i]` is the original
    /// index of the option shown at position `i`.
    OptionIndex {
        index: usize,
        options: Vec<String>,
        permutation: Vec<usize>,
    },
    LabelSet {
        labels: Vec<String>,
        universe: Vec<String>,
    },
    ExactString {
        text: String,
    },
}

impl GoldTarget {
    pub fn metric_kind(&self) -> MetricKind {
        match self {
            GoldTarget::FreeText { .. } => MetricKind::TokenF1,
            GoldTarget::OptionIndex { .. } => MetricKind::McAccuracy,
            GoldTarget::LabelSet { .. } => MetricKind::MacroF1,
            GoldTarget::ExactString { .. } => MetricKind::ExactMatch,
        }
    }

    /// Label set with duplicates removed, first occurrence kept.
    pub fn label_set(labels: Vec<String>, universe: Vec<String>) -> Self {
        GoldTarget::LabelSet {
            labels: dedup_preserving(labels),
            universe: dedup_preserving(universe),
        }
    }

    /// Human-readable gold answer, used in prompts and logs.
    pub fn display(&self) -> String {
        match self {
            GoldTarget::FreeText { text } | GoldTarget::ExactString { text } => text.clone(),
            GoldTarget::OptionIndex { index, options, .. } => {
                format!("({}) {}", option_letter(*index), options[*index])
            }
            GoldTarget::LabelSet { labels, .. } => labels.join(", "),
        }
    }
}

pub fn option_letter(index: usize) -> char {
    (b'A' + (index % 26) as u8) as char
}

fn dedup_preserving(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items
        .into_iter()
        .filter(|item| seen.insert(item.clone()))
        .collect()
}

/// Text normalization shared by token F1 and exact match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Normalizer {
    pub strip_articles: bool,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            strip_articles: true,
        }
    }
}

impl Normalizer {
    pub fn tokens(&self, text: &str) -> Vec<String> {
        let lowered: String = text
            .to_lowercase()
            .chars()
            .filter(|c| !c.is_ascii_punctuation())
            .collect();
        lowered
            .split_whitespace()
            .filter(|t| !(self.strip_articles && matches!(*t, "a" | "an" | "the")))
            .map(str::to_string)
            .collect()
    }

    pub fn normalize(&self, text: &str) -> String {
        self.tokens(text).join(" ")
    }
}

pub fn token_f1(prediction: &str, gold: &str) -> Score {
    token_f1_with(&Normalizer::default(), prediction, gold)
}

pub fn token_f1_with(normalizer: &Normalizer, prediction: &str, gold: &str) -> Score {
    let pred = normalizer.tokens(prediction);
    let gold = normalizer.tokens(gold);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return Score::ONE,
        (true, false) | (false, true) => return Score::ZERO,
        _ => {}
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for token in &gold {
        *counts.entry(token.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for token in &pred {
        if let Some(c) = counts.get_mut(token.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return Score::ZERO;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    Score::new(2.0 * precision * recall / (precision + recall))
}

pub fn exact_match(prediction: &str, gold: &str) -> Score {
    let n = Normalizer::default();
    if n.normalize(prediction) == n.normalize(gold) {
        Score::ONE
    } else {
        Score::ZERO
    }
}

pub fn mc_accuracy(
    predicted: usize,
    gold: usize,
    option_count: usize,
) -> Result<Score, MetricError> {
    for ordinal in [predicted, gold] {
        if ordinal >= option_count {
            return Err(MetricError::OptionOutOfRange {
                ordinal,
                count: option_count,
            });
        }
    }
    Ok(if predicted == gold {
        Score::ONE
    } else {
        Score::ZERO
    })
}

/// Unweighted mean of per-label F1 over `universe`. Labels that never occur
/// in any prediction or gold set are left out of the average; if no label
/// occurs at all the result is 1.0.
pub fn macro_f1<S: AsRef<str>>(
    predictions: &[Vec<S>],
    golds: &[Vec<S>],
    universe: &[S],
) -> Result<Score, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    #[derive(Default, Clone, Copy)]
    struct Counts {
        tp: u64,
        fp: u64,
        fn_: u64,
    }
    let mut counts: BTreeMap<&str, Counts> = universe
        .iter()
        .map(|l| (l.as_ref(), Counts::default()))
        .collect();
    for (pred, gold) in predictions.iter().zip(golds) {
        let pred: BTreeSet<&str> = pred.iter().map(AsRef::as_ref).collect();
        let gold: BTreeSet<&str> = gold.iter().map(AsRef::as_ref).collect();
        for label in pred.union(&gold) {
            let entry = counts
                .get_mut(label)
                .ok_or_else(|| MetricError::UnknownLabel(label.to_string()))?;
            match (pred.contains(label), gold.contains(label)) {
                (true, true) => entry.tp += 1,
                (true, false) => entry.fp += 1,
                (false, true) => entry.fn_ += 1,
                (false, false) => unreachable!(),
            }
        }
    }
    let per_label: Vec<f64> = counts
        .values()
        .filter(|c| c.tp + c.fp + c.fn_ > 0)
        .map(|c| 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
        .collect();
    if per_label.is_empty() {
        return Ok(Score::ONE);
    }
    Ok(Score::new(
        per_label.iter().sum::<f64>() / per_label.len() as f64,
    ))
}

/// Inclusive threshold test.
pub fn success(score: Score, threshold: f64) -> bool {
    score.value() >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_articles() -> Normalizer {
        Normalizer {
            strip_articles: false,
        }
    }

    #[test]
    fn token_f1_examples() {
        assert_eq!(token_f1("Paris", "Paris").value(), 1.0);
        assert_eq!(
            token_f1_with(&no_articles(), "the answer is Paris", "Paris").value(),
            0.4
        );
        assert_eq!(token_f1("London", "Paris").value(), 0.0);
        assert_eq!(token_f1("", "").value(), 1.0);
        assert_eq!(token_f1("", "Paris").value(), 0.0);
        assert_eq!(token_f1("Paris", "  ").value(), 0.0);
    }

    #[test]
    fn article_stripping_changes_token_f1() {
        // "answer is paris" vs "paris": P = 1/3, R = 1
        assert!((token_f1("the answer is Paris", "Paris").value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("(A)", "(A)").value(), 1.0);
        assert_eq!(exact_match(" (a) ", "(A)").value(), 1.0);
        assert_eq!(exact_match("(B)", "(A)").value(), 0.0);
        assert_eq!(exact_match("New  York!", "new york").value(), 1.0);
    }

    #[test]
    fn mc_accuracy_examples() {
        assert_eq!(mc_accuracy(2, 2, 4).unwrap().value(), 1.0);
        assert_eq!(mc_accuracy(0, 3, 4).unwrap().value(), 0.0);
        assert!(matches!(
            mc_accuracy(4, 0, 4),
            Err(MetricError::OptionOutOfRange { ordinal: 4, count: 4 })
        ));
    }

    #[test]
    fn mc_accuracy_after_shuffle() {
        // gold at original index 0 shown at position 2
        let permutation = [3usize, 1, 0, 2];
        let gold_position = permutation.iter().position(|&o| o == 0).unwrap();
        assert_eq!(gold_position, 2);
        assert_eq!(mc_accuracy(2, gold_position, 4).unwrap().value(), 1.0);
    }

    #[test]
    fn macro_f1_examples() {
        let u = ["a", "b"];
        let same = vec![vec!["a"], vec!["b", "a"]];
        assert_eq!(macro_f1(&same, &same, &u).unwrap().value(), 1.0);
        assert_eq!(
            macro_f1(&[vec!["a"]], &[vec!["b"]], &u).unwrap().value(),
            0.0
        );
        assert_eq!(
            macro_f1(&[vec!["a", "b"]], &[vec!["a"]], &u).unwrap().value(),
            0.5
        );
    }

    #[test]
    fn macro_f1_errors() {
        assert!(matches!(
            macro_f1(&[vec!["z"]], &[vec!["a"]], &["a"]),
            Err(MetricError::UnknownLabel(l)) if l == "z"
        ));
        assert!(matches!(
            macro_f1::<&str>(&[], &[vec![]], &["a"]),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn macro_f1_skips_absent_labels() {
        // c never appears; only a counts
        let score = macro_f1(&[vec!["a"]], &[vec!["a"]], &["a", "b", "c"]).unwrap();
        assert_eq!(score.value(), 1.0);
    }

    #[test]
    fn success_threshold_is_inclusive() {
        assert!(success(Score::new(0.60), 0.6));
        assert!(!success(Score::new(0.59), 0.6));
        assert!(success(Score::ONE, BINARY_THRESHOLD));
    }

    #[test]
    fn gold_label_set_dedups() {
        let gold = GoldTarget::label_set(
            vec!["a".into(), "b".into(), "a".into()],
            vec!["a".into(), "b".into()],
        );
        let GoldTarget::LabelSet { labels, .. } = gold else {
            unreachable!()
        };
        assert_eq!(labels, ["a", "b"]);
    }

    proptest! {
        #[test]
        fn token_f1_in_range_and_reflexive(a in ".{0,40}", b in ".{0,40}") {
            let s = token_f1(&a, &b).value();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(token_f1(&a, &a).value(), 1.0);
            prop_assert_eq!(exact_match(&a, &a).value(), 1.0);
            let e = exact_match(&a, &b).value();
            prop_assert!(e == 0.0 || e == 1.0);
        }

        #[test]
        fn macro_f1_in_range(
            preds in proptest::collection::vec(proptest::collection::vec(0usize..5, 0..4), 1..10),
            golds in proptest::collection::vec(proptest::collection::vec(0usize..5, 0..4), 1..10),
        ) {
            let n = preds.len().min(golds.len());
            let to_labels = |v: &[Vec<usize>]| -> Vec<Vec<String>> {
                v[..n].iter().map(|s| s.iter().map(|i| format!("l{i}")).collect()).collect()
            };
            let universe: Vec<String> = (0..5).map(|i| format!("l{i}")).collect();
            let p = to_labels(&preds);
            let g = to_labels(&golds);
            let s = macro_f1(&p, &g, &universe).unwrap().value();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(macro_f1(&g, &g, &universe).unwrap().value(), 1.0);
        }
    }
}
