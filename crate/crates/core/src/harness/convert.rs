//! Converters from public benchmark dumps to dataset records.
//!
//! No data ships with the crate; these only reshape files you already have.
//!
//! - `hotpotqa`: the distractor-setting JSON (array or one object per line)
//!   with `_id`/`id`, `question`, `answer` and optional `context`, either
//!   `[[title, [sentences]]]` or `{"title": [...], "sentences": [[...]]}`.
//! - `gpqa`: the CSV release with `Question`, `Correct Answer`,
//!   `Incorrect Answer 1..3` and optional `Record ID` columns.
//! - `bbh`: one task file `{"examples": [{"input", "target"}]}`; ids are
//!   `<task>-<n>`.
//! - `gdpr`: JSONL with `id`, `input` (or `text`) and a `labels` array. The
//!   label universe is the explicit list passed in, or else the sorted union
//!   of labels seen in the file. This mapping is an assumption; check it
//!   against your copy of the benchmark.

use std::collections::BTreeSet;

use serde_json::Value;

use crate::harness::dataset::DatasetRecord;
use crate::metrics::MetricKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    HotpotQa,
    Gpqa,
    Bbh,
    Gdpr,
}

impl std::str::FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hotpotqa" => Ok(Self::HotpotQa),
            "gpqa" => Ok(Self::Gpqa),
            "bbh" => Ok(Self::Bbh),
            "gdpr" => Ok(Self::Gdpr),
            other => Err(format!("unknown benchmark `{other}` (hotpotqa, gpqa, bbh, gdpr)")),
        }
    }
}

fn json_documents(text: &str) -> Result<Vec<Value>, String> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return match serde_json::from_str(trimmed).map_err(|e| e.to_string())? {
            Value::Array(items) => Ok(items),
            _ => unreachable!("starts with ["),
        };
    }
    crate::io::from_jsonl(text).map_err(|(line, msg)| format!("line {line}: {msg}"))
}

fn str_field<'a>(v: &'a Value, keys: &[&str], n: usize) -> Result<&'a str, String> {
    keys.iter()
        .find_map(|k| v.get(*k).and_then(Value::as_str))
        .ok_or_else(|| format!("record {n}: missing string field `{}`", keys[0]))
}

fn hotpot_context(context: &Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    match context {
        Value::Array(items) => {
            for item in items {
                let title = item.get(0).and_then(Value::as_str).unwrap_or_default();
                let sentences = item
                    .get(1)
                    .and_then(Value::as_array)
                    .map(|s| s.iter().filter_map(Value::as_str).collect::<String>())
                    .unwrap_or_default();
                out.push((title.to_string(), sentences));
            }
        }
        Value::Object(map) => {
            let titles = map.get("title").and_then(Value::as_array);
            let sentences = map.get("sentences").and_then(Value::as_array);
            if let (Some(titles), Some(sentences)) = (titles, sentences) {
                for (t, s) in titles.iter().zip(sentences) {
                    let body = s
                        .as_array()
                        .map(|s| s.iter().filter_map(Value::as_str).collect::<String>())
                        .unwrap_or_default();
                    out.push((t.as_str().unwrap_or_default().to_string(), body));
                }
            }
        }
        _ => {}
    }
    out
}

pub fn hotpotqa(text: &str) -> Result<Vec<DatasetRecord>, String> {
    json_documents(text)?
        .iter()
        .enumerate()
        .map(|(n, v)| {
            let id = str_field(v, &["_id", "id"], n + 1)?;
            let question = str_field(v, &["question"], n + 1)?;
            let answer = str_field(v, &["answer"], n + 1)?;
            let mut input = format!("Question: {question}");
            let paragraphs = v.get("context").map(hotpot_context).unwrap_or_default();
            if !paragraphs.is_empty() {
                input.push_str("\n\nContext:");
                for (title, body) in paragraphs {
                    input.push_str(&format!("\n[{title}] {}", body.trim()));
                }
            }
            Ok(DatasetRecord {
                id: id.to_string(),
                input,
                metric_kind: MetricKind::TokenF1,
                gold: Value::String(answer.to_string()),
                options: None,
                label_universe: None,
                task_threshold: None,
            })
        })
        .collect()
}

/// The correct answer is listed first; shuffling happens on load.
pub fn gpqa(text: &str) -> Result<Vec<DatasetRecord>, String> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| format!("missing column `{name}`"));
    let question = need("Question")?;
    let correct = need("Correct Answer")?;
    let wrong = [
        need("Incorrect Answer 1")?,
        need("Incorrect Answer 2")?,
        need("Incorrect Answer 3")?,
    ];
    let record_id = col("Record ID");
    let mut out = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(|e| format!("row {}: {e}", n + 1))?;
        let get = |i: usize| row.get(i).unwrap_or_default().trim().to_string();
        let id = record_id
            .map(get)
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("gpqa-{}", n + 1));
        let mut options = vec![get(correct)];
        options.extend(wrong.iter().map(|&i| get(i)));
        out.push(DatasetRecord {
            id,
            input: get(question),
            metric_kind: MetricKind::McAccuracy,
            gold: Value::from(0),
            options: Some(options),
            label_universe: None,
            task_threshold: None,
        });
    }
    Ok(out)
}

pub fn bbh(text: &str, task: &str) -> Result<Vec<DatasetRecord>, String> {
    let doc: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let examples = doc
        .get("examples")
        .and_then(Value::as_array)
        .ok_or("expected an object with an `examples` array")?;
    examples
        .iter()
        .enumerate()
        .map(|(n, v)| {
            Ok(DatasetRecord {
                id: format!("{task}-{}", n + 1),
                input: str_field(v, &["input"], n + 1)?.to_string(),
                metric_kind: MetricKind::ExactMatch,
                gold: Value::String(str_field(v, &["target"], n + 1)?.to_string()),
                options: None,
                label_universe: None,
                task_threshold: None,
            })
        })
        .collect()
}

pub fn gdpr(text: &str, universe: Option<Vec<String>>) -> Result<Vec<DatasetRecord>, String> {
    let docs = json_documents(text)?;
    let mut parsed = Vec::new();
    for (n, v) in docs.iter().enumerate() {
        let id = v
            .get("id")
            .map(|id| match id {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .unwrap_or_else(|| format!("gdpr-{}", n + 1));
        let input = str_field(v, &["input", "text"], n + 1)?.to_string();
        let labels: Vec<String> = v
            .get("labels")
            .and_then(Value::as_array)
            .ok_or_else(|| format!("record {}: missing `labels` array", n + 1))?
            .iter()
            .map(|l| match l {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect();
        parsed.push((id, input, labels));
    }
    let universe = universe.unwrap_or_else(|| {
        parsed
            .iter()
            .flat_map(|(_, _, labels)| labels.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    });
    Ok(parsed
        .into_iter()
        .map(|(id, input, labels)| DatasetRecord {
            id,
            input,
            metric_kind: MetricKind::MacroF1,
            gold: Value::from(labels),
            options: None,
            label_universe: Some(universe.clone()),
            task_threshold: None,
        })
        .collect())
}
