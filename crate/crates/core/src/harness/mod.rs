//! Dataset ingestion, answer parsing, reporting and benchmark converters.

pub mod answer;
pub mod convert;
pub mod dataset;
pub mod report;

pub use answer::{parse_answer, score_completion, ParsedAnswer, ANSWER_SENTINEL};
pub use dataset::{load_dataset, parse_dataset, split, DatasetRecord, Splits};
pub use report::{build_report, RunReport};
