//! Line-delimited dataset files.
//!
//! One JSON object per line:
//!
//! | field            | type                    | notes                                   |
//! |------------------|-------------------------|-----------------------------------------|
//! | `id`             | string                  | unique within the file                  |
//! | `input`          | string                  | task text shown to the model            |
//! | `metric_kind`    | string                  | `token_f1`, `exact_match`, `mc_accuracy`, `macro_f1` |
//! | `gold`           | string / int / string[] | see below                               |
//! | `options`        | string[]                | required for `mc_accuracy`, else absent |
//! | `label_universe` | string[]                | required for `macro_f1`, else absent    |
//! | `task_threshold` | number in [0, 1]        | optional success threshold              |
//!
//! `gold` is the answer string for `token_f1` and `exact_match`, the 0-based
//! index into `options` (or the option text itself) for `mc_accuracy`, and
//! the list of gold labels for `macro_f1`.
//!
//! Options are shuffled on load with a permutation seeded by the run seed
//! and the example id, then rendered into the input as `(A) ...` lines.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DatasetError;
use crate::metrics::{option_letter, GoldTarget, MetricKind};
use crate::retry::TaskExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub input: String,
    pub metric_kind: MetricKind,
    pub gold: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_universe: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_threshold: Option<f64>,
}

/// Deterministic permutation of `0..n` for one example.
pub fn option_permutation(seed: u64, id: &str, n: usize) -> Vec<usize> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(bytes);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Input text with shuffled options listed after it.
pub fn render_options(input: &str, shown: &[String]) -> String {
    let mut out = format!("{input}\n");
    for (i, option) in shown.iter().enumerate() {
        out.push_str(&format!("\n({}) {option}", option_letter(i)));
    }
    out
}

pub fn render_labels(input: &str, universe: &[String]) -> String {
    format!(
        "{input}\n\nPossible labels: {}\nAnswer with every label that applies, separated by commas.",
        universe.join(", ")
    )
}

impl DatasetRecord {
    /// Validates the record and builds the example, shuffling options.
    pub fn to_example(&self, seed: u64) -> Result<TaskExample, String> {
        if self.id.trim().is_empty() {
            return Err("`id` is empty".into());
        }
        let is_mc = self.metric_kind == MetricKind::McAccuracy;
        if is_mc != self.options.is_some() {
            return Err("`options` must be present exactly when metric_kind is mc_accuracy".into());
        }
        let is_labels = self.metric_kind == MetricKind::MacroF1;
        if is_labels != self.label_universe.is_some() {
            return Err(
                "`label_universe` must be present exactly when metric_kind is macro_f1".into(),
            );
        }
        let (input, gold) = match self.metric_kind {
            MetricKind::TokenF1 | MetricKind::ExactMatch => {
                let text = self
                    .gold
                    .as_str()
                    .ok_or("`gold` must be a string for text metrics")?
                    .to_string();
                let gold = if self.metric_kind == MetricKind::TokenF1 {
                    GoldTarget::FreeText { text }
                } else {
                    GoldTarget::ExactString { text }
                };
                (self.input.clone(), gold)
            }
            MetricKind::McAccuracy => {
                let options = self.options.as_ref().expect("checked above");
                if options.len() < 2 {
                    return Err("`options` needs at least two entries".into());
                }
                let original = match &self.gold {
                    serde_json::Value::Number(n) => n
                        .as_u64()
                        .map(|n| n as usize)
                        .filter(|&n| n < options.len())
                        .ok_or("`gold` index out of range for `options`")?,
                    serde_json::Value::String(s) => options
                        .iter()
                        .position(|o| o == s)
                        .ok_or("`gold` text is not one of `options`")?,
                    _ => return Err("`gold` must be an option index or option text".into()),
                };
                let permutation = option_permutation(seed, &self.id, options.len());
                let shown: Vec<String> = permutation.iter().map(|&i| options[i].clone()).collect();
                let index = permutation
                    .iter()
                    .position(|&i| i == original)
                    .expect("permutation covers every index");
                (
                    render_options(&self.input, &shown),
                    GoldTarget::OptionIndex {
                        index,
                        options: shown,
                        permutation,
                    },
                )
            }
            MetricKind::MacroF1 => {
                let universe = self.label_universe.clone().expect("checked above");
                let labels: Vec<String> = serde_json::from_value(self.gold.clone())
                    .map_err(|_| "`gold` must be a list of labels for macro_f1")?;
                if let Some(bad) = labels.iter().find(|l| !universe.contains(l)) {
                    return Err(format!("gold label `{bad}` is not in `label_universe`"));
                }
                (
                    render_labels(&self.input, &universe),
                    GoldTarget::label_set(labels, universe),
                )
            }
        };
        let mut example = TaskExample::new(&self.id, input, gold);
        if let Some(t) = self.task_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(format!("`task_threshold` {t} outside [0, 1]"));
            }
            example = example.with_threshold(t);
        }
        Ok(example)
    }
}

pub fn parse_dataset(text: &str, seed: u64) -> Result<Vec<TaskExample>, DatasetError> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| DatasetError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = seen.get(&record.id) {
            return Err(DatasetError::DuplicateId {
                id: record.id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(record.id.clone(), line_no);
        let example = record.to_example(seed).map_err(|message| DatasetError::Schema {
            line: line_no,
            message,
        })?;
        out.push(example);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, seed: u64) -> Result<Vec<TaskExample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<TaskExample>,
    pub val: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

/// Seeded shuffle, then the first `train_n` go to train, the next `val_n`
/// to validation and the rest to test.
pub fn split(
    dataset: &[TaskExample],
    train_n: usize,
    val_n: usize,
    seed: u64,
) -> Result<Splits, DatasetError> {
    let needed = train_n + val_n;
    if needed > dataset.len() {
        return Err(DatasetError::Insufficient {
            needed,
            available: dataset.len(),
        });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |range: std::ops::Range<usize>| -> Vec<TaskExample> {
        order[range].iter().map(|&i| dataset[i].clone()).collect()
    };
    Ok(Splits {
        train: pick(0..train_n),
        val: pick(train_n..needed),
        test: pick(needed..dataset.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MC: &str = r#"{"id":"m1","input":"Pick one.","metric_kind":"mc_accuracy","gold":0,"options":["right","w1","w2","w3"]}"#;

    #[test]
    fn three_records() {
        let text = [
            r#"{"id":"a","input":"Q?","metric_kind":"token_f1","gold":"Paris"}"#,
            r#"{"id":"b","input":"Q?","metric_kind":"exact_match","gold":"(B)","task_threshold":1.0}"#,
            MC,
        ]
        .join("\n");
        let ds = parse_dataset(&text, 7).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds[0].task_threshold, 0.6);
        assert_eq!(ds[1].metric_kind(), MetricKind::ExactMatch);
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let text = "\n".to_string()
            + r#"{"id":"a","input":"x","metric_kind":"token_f1","gold":"y"}"#
            + "\n"
            + r#"{"id":"a","input":"z","metric_kind":"token_f1","gold":"y"}"#;
        match parse_dataset(&text, 0) {
            Err(DatasetError::DuplicateId {
                id,
                first_line,
                second_line,
            }) => assert_eq!((id.as_str(), first_line, second_line), ("a", 2, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_line() {
        let text = r#"{"id":"a","input":"x","metric_kind":"token_f1","gold":"y","options":["p","q"]}"#;
        assert!(matches!(
            parse_dataset(text, 0),
            Err(DatasetError::Schema { line: 1, .. })
        ));
        let text = "\n\n{not json";
        assert!(matches!(
            parse_dataset(text, 0),
            Err(DatasetError::Schema { line: 3, .. })
        ));
        let text = r#"{"id":"a","input":"x","metric_kind":"macro_f1","gold":["p","zz"],"label_universe":["p","q"]}"#;
        assert!(parse_dataset(text, 0).is_err());
    }

    #[test]
    fn mc_shuffle_is_deterministic_and_invertible() {
        let a = parse_dataset(MC, 42).unwrap();
        let b = parse_dataset(MC, 42).unwrap();
        assert_eq!(a, b);
        let GoldTarget::OptionIndex {
            index,
            options,
            permutation,
        } = &a[0].gold
        else {
            panic!()
        };
        assert_eq!(options[*index], "right");
        let original = ["right", "w1", "w2", "w3"];
        let mut restored = vec![""; 4];
        for (shown, &orig) in permutation.iter().enumerate() {
            restored[orig] = options[shown].as_str();
        }
        assert_eq!(restored, original);
        assert!(a[0].input.contains(&format!("({}) right", option_letter(*index))));
    }

    #[test]
    fn permutations_vary_with_seed() {
        let distinct: std::collections::HashSet<Vec<usize>> =
            (0..20).map(|s| option_permutation(s, "m1", 4)).collect();
        assert!(distinct.len() > 1);
    }

    fn many(n: usize) -> Vec<TaskExample> {
        (0..n)
            .map(|i| {
                TaskExample::new(
                    format!("e{i}"),
                    "q",
                    GoldTarget::FreeText { text: "a".into() },
                )
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = many(300);
        let s = split(&ds, 50, 50, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (50, 50, 200));
        let mut ids: Vec<&str> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .map(|e| e.id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 300);
        assert_eq!(split(&ds, 50, 50, 3).unwrap(), s);
        assert_eq!(split(&ds, 0, 10, 3).unwrap().train.len(), 0);
        assert!(matches!(
            split(&ds, 200, 101, 3),
            Err(DatasetError::Insufficient { needed: 301, available: 300 })
        ));
    }
}
