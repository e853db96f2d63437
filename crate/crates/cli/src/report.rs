use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use stackqa::metrics::EvalReport;
use stackqa::{Error, Result};

pub const SCHEMA: &str = "stackqa-report-v1";

/// Aggregate scores without the per-question breakdown.
pub fn scores(r: &EvalReport) -> Value {
    json!({ "em": r.em, "f1": r.f1, "na_accuracy": r.na_accuracy, "count": r.count })
}

pub fn print_scores(label: &str, r: &EvalReport) {
    println!("{:<12} {:>8} {:>8} {:>8} {:>7}", "", "EM", "F1", "NoAns", "Count");
    println!("{:<12} {:>8.3} {:>8.3} {:>8.3} {:>7}", label, r.em, r.f1, r.na_accuracy, r.count);
}

pub fn write_json(path: &Path, command: &str, result: Value) -> Result<()> {
    let doc = json!({ "schema": SCHEMA, "command": command, "result": result });
    let mut s = serde_json::to_string_pretty(&doc).expect("report serialization");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
