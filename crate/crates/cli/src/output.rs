//! Serialization of reports.
//!
//! JSON is written by a small custom printer over `serde_json::Value` so
//! that every float carries 17 significant digits (`{:.16e}`): parsing and
//! re-serializing a report is then byte-identical, since 17 digits
//! round-trip f64 exactly and object keys iterate in sorted order.
//! Non-finite floats (an infinite upper bound, say) become `null`; the
//! structures carry explicit flags alongside.

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("report types serialize infallibly");
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    out
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                let f = n.as_f64().unwrap();
                if f.is_finite() {
                    out.push_str(&format!("{f:.16e}"));
                } else {
                    out.push_str("null");
                }
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).unwrap());
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push('\n');
                push_indent(indent + 1, out);
                write_value(item, indent + 1, out);
            }
            out.push('\n');
            push_indent(indent, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            for (k, (key, item)) in map.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push('\n');
                push_indent(indent + 1, out);
                out.push_str(&serde_json::to_string(key).unwrap());
                out.push_str(": ");
                write_value(item, indent + 1, out);
            }
            out.push('\n');
            push_indent(indent, out);
            out.push('}');
        }
    }
}

fn push_indent(level: usize, out: &mut String) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

/// Flatten a JSON report to `path,value` CSV rows, arrays indexed by
/// position. Plot-ready for the trace- and measure-shaped reports.
pub fn to_csv_string<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("report types serialize infallibly");
    let mut out = String::from("key,value\n");
    flatten("", &v, &mut out);
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (key, item) in map {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                flatten(&path, item, out);
            }
        }
        Value::Array(items) => {
            for (idx, item) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{idx}]"), item, out);
            }
        }
        other => {
            out.push_str(prefix);
            out.push(',');
            out.push_str(&scalar_text(other));
            out.push('\n');
        }
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "".into(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                u.to_string()
            } else if let Some(i) = n.as_i64() {
                i.to_string()
            } else {
                let f = n.as_f64().unwrap();
                if f.is_finite() {
                    format!("{f:.16e}")
                } else {
                    "inf".into()
                }
            }
        }
        Value::String(s) => s.clone(),
        _ => unreachable!("scalar_text only sees leaves"),
    }
}

/// Human-readable aligned `key: value` view of the same flattening.
pub fn to_table_string<T: Serialize>(value: &T) -> String {
    let csv = to_csv_string(value);
    let rows: Vec<(&str, &str)> = csv
        .lines()
        .skip(1)
        .filter_map(|line| line.split_once(','))
        .collect();
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        out.push_str(&format!("{k:<width$}  {v}\n"));
    }
    out
}
