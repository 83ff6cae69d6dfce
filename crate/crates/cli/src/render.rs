//! `--plain` output: one `key<TAB>value` line per scalar, keys sorted,
//! so scripts can `grep` and `cut` without a JSON parser.

use serde_json::Value;

pub fn plain(value: &Value) -> String {
    let mut out = String::new();
    flatten("", value, &mut out);
    out
}

fn flatten(prefix: &str, value: &Value, out: &mut String) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&key(k), v, out);
            }
        }
        Value::Array(items) if items.is_empty() => line(prefix, "[]", out),
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&key(&i.to_string()), v, out);
            }
        }
        Value::String(s) => line(prefix, s, out),
        Value::Null => line(prefix, "null", out),
        other => line(prefix, &other.to_string(), out),
    }
}

fn line(key: &str, value: &str, out: &mut String) {
    out.push_str(if key.is_empty() { "value" } else { key });
    out.push('\t');
    out.push_str(value);
    out.push('\n');
}

/// Summary of a deployment record: id, phase, order and placement.
pub fn record_summary(record: &Value) -> String {
    let mut out = String::new();
    let field = |k: &str| record.get(k).cloned().unwrap_or(Value::Null);
    line("deployment_id", field("deployment_id").as_str().unwrap_or(""), &mut out);
    line("phase", field("phase").as_str().unwrap_or(""), &mut out);
    if let Some(order) = record.get("order").and_then(Value::as_array).filter(|o| !o.is_empty()) {
        let names: Vec<&str> = order.iter().filter_map(Value::as_str).collect();
        line("order", &names.join(","), &mut out);
    }
    if let Some(placement) = record.get("placement").and_then(Value::as_object) {
        for (svc, edge) in placement {
            line(&format!("placement.{svc}"), edge.as_str().unwrap_or(""), &mut out);
        }
    }
    out
}
