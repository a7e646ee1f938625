//! Report structure. The body is what determinism is judged on: for a fixed
//! job document and seed it serializes to identical bytes. The wall-clock
//! timestamp sits outside the body.

use serde::Serialize;
use serde_json::{Map, Value};
use std::time::{SystemTime, UNIX_EPOCH};

use gammaforge_core::curvature::ExtReal;

#[derive(Debug, Serialize)]
pub struct Report {
    pub body: ReportBody,
    pub timestamp: u64,
}

impl Report {
    pub fn new(body: ReportBody) -> Report {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Report { body, timestamp }
    }
}

// serde_json::Map is BTreeMap-backed, so keys serialize in sorted order and
// the bytes are reproducible.
#[derive(Debug, Serialize)]
pub struct ReportBody {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub tolerance: f64,
    pub pass: bool,
    pub rows: Vec<Row>,
    pub aggregates: Map<String, Value>,
}

impl ReportBody {
    pub fn new(command: &str, seed: u64, tolerance: f64) -> ReportBody {
        ReportBody {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            tolerance,
            pass: true,
            rows: Vec::new(),
            aggregates: Map::new(),
        }
    }
}

#[derive(Debug, Default, Serialize)]
pub struct Row {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(flatten)]
    pub values: Map<String, Value>,
}

impl Row {
    pub fn at(point: &[f64]) -> Row {
        Row { point: Some(point.to_vec()), values: Map::new() }
    }

    pub fn set(mut self, key: &str, value: Value) -> Row {
        self.values.insert(key.to_owned(), value);
        self
    }
}

/// ±∞ are not JSON numbers; render them as the strings "inf" / "-inf".
pub fn ext_json(v: ExtReal) -> Value {
    match v {
        ExtReal::Finite(x) => num_json(x),
        ExtReal::PlusInf => Value::String("inf".into()),
        ExtReal::MinusInf => Value::String("-inf".into()),
    }
}

pub fn num_json(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else if x > 0.0 {
        Value::String("inf".into())
    } else {
        Value::String("-inf".into())
    }
}

pub fn opt_json<T: Into<Value>>(v: Option<T>) -> Value {
    v.map_or(Value::Null, Into::into)
}

/// RFC 4180: fields containing commas, quotes, or line breaks are quoted,
/// with embedded quotes doubled.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn value_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flat table: point coordinates first, then the union of row keys sorted.
pub fn rows_to_csv(rows: &[Row], dim: usize) -> String {
    let mut keys: Vec<&str> = Vec::new();
    for row in rows {
        for key in row.values.keys() {
            if !keys.contains(&key.as_str()) {
                keys.push(key);
            }
        }
    }
    keys.sort_unstable();

    let mut out = String::new();
    let has_points = rows.iter().any(|r| r.point.is_some());
    let mut header: Vec<String> = Vec::new();
    if has_points {
        header.extend((1..=dim).map(|i| format!("x{i}")));
    }
    header.extend(keys.iter().map(|k| csv_field(k)));
    out.push_str(&header.join(","));
    out.push_str("\r\n");

    for row in rows {
        let mut fields: Vec<String> = Vec::new();
        if has_points {
            match &row.point {
                Some(p) => fields.extend(p.iter().map(|c| c.to_string())),
                None => fields.extend(std::iter::repeat(String::new()).take(dim)),
            }
        }
        for key in &keys {
            let text = row.values.get(*key).map(value_text).unwrap_or_default();
            fields.push(csv_field(&text));
        }
        out.push_str(&fields.join(","));
        out.push_str("\r\n");
    }
    out
}
