use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: Value,
    pub limit: String,
    pub pass: bool,
}

/// Outcome of one analysis: files written, headline values and invariant checks.
#[derive(Debug, Default, Serialize)]
pub struct AnalysisReport {
    pub name: String,
    pub files: Vec<String>,
    pub values: Map<String, Value>,
    pub checks: Vec<CheckResult>,
}

impl AnalysisReport {
    pub fn new(name: &str) -> Self {
        Self { name: name.into(), ..Default::default() }
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn file(&mut self, name: &str) {
        self.files.push(name.into());
    }

    pub fn value(&mut self, key: &str, v: impl Serialize) {
        self.values.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    pub fn at_most(&mut self, name: &str, value: f64, limit: f64) {
        self.push(name, value, format!("<= {limit:e}"), value <= limit);
    }

    pub fn at_least(&mut self, name: &str, value: f64, limit: f64) {
        self.push(name, value, format!(">= {limit:e}"), value >= limit);
    }

    pub fn holds(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(CheckResult { name: name.into(), value: Value::Bool(pass), limit: detail.into(), pass });
    }

    fn push(&mut self, name: &str, value: f64, limit: String, pass: bool) {
        // NaN never passes and serializes as null
        let value = serde_json::Number::from_f64(value).map_or(Value::Null, Value::Number);
        self.checks.push(CheckResult { name: name.into(), value, limit, pass });
    }
}
