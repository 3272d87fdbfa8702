#![allow(dead_code)]

use nalgebra::DMatrix;
use nettrim::datagen::{argmax_columns, gen_spirals, train_mlp, SpiralConfig, TrainConfig};
use nettrim::model::{forward, NetworkModel};

/// Spiral data plus a net trained on it, both seeded by `seed`.
pub fn trained_spiral(seed: u64, widths: &[usize], points_per_class: usize) -> (NetworkModel, DMatrix<f64>, Vec<usize>) {
    let (x, labels) = gen_spirals(&SpiralConfig { points_per_class, seed, ..Default::default() }).unwrap();
    let cfg = TrainConfig { widths: widths.to_vec(), seed, ..Default::default() };
    let net = train_mlp(&x, &labels, &cfg).unwrap();
    (net, x, labels)
}

/// Fraction of samples on which the two nets predict the same class.
pub fn agreement(a: &NetworkModel, b: &NetworkModel, x: &DMatrix<f64>) -> f64 {
    let pa = argmax_columns(forward(a, x).unwrap().output());
    let pb = argmax_columns(forward(b, x).unwrap().output());
    pa.iter().zip(&pb).filter(|(u, v)| u == v).count() as f64 / pa.len() as f64
}

/// Validates `v` against the subset of JSON Schema the report schema uses:
/// `type` (string or list), `required`, `properties`, `items`, `enum`, `minimum`.
/// Returns one message per violation.
pub fn schema_errors(schema: &serde_json::Value, v: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    walk(schema, v, "$", &mut out);
    out
}

fn type_matches(t: &str, v: &serde_json::Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        _ => false,
    }
}

fn walk(s: &serde_json::Value, v: &serde_json::Value, path: &str, out: &mut Vec<String>) {
    use serde_json::Value;
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(t, v),
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).any(|t| type_matches(t, v)),
            _ => false,
        };
        if !ok {
            out.push(format!("{path}: expected type {t}, got {v}"));
            return;
        }
    }
    if let Some(Value::Array(allowed)) = s.get("enum") {
        if !allowed.contains(v) {
            out.push(format!("{path}: {v} not in {allowed:?}"));
        }
    }
    if let (Some(min), Some(x)) = (s.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            out.push(format!("{path}: {x} below minimum {min}"));
        }
    }
    if let Value::Object(obj) = v {
        if let Some(Value::Array(req)) = s.get("required") {
            for k in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(k) {
                    out.push(format!("{path}: missing {k}"));
                }
            }
        }
        if let Some(Value::Object(props)) = s.get("properties") {
            for (k, sub) in props {
                if let Some(x) = obj.get(k) {
                    walk(sub, x, &format!("{path}.{k}"), out);
                }
            }
        }
    }
    if let (Value::Array(items), Some(sub)) = (v, s.get("items")) {
        for (i, x) in items.iter().enumerate() {
            walk(sub, x, &format!("{path}[{i}]"), out);
        }
    }
}

/// Object keys present in `v` that the schema does not declare.
pub fn undeclared_keys(schema: &serde_json::Value, v: &serde_json::Value, path: &str) -> Vec<String> {
    use serde_json::Value;
    let mut out = Vec::new();
    match v {
        Value::Object(obj) => {
            let props = schema.get("properties").and_then(Value::as_object);
            for (k, x) in obj {
                match props.and_then(|p| p.get(k)) {
                    Some(sub) => out.extend(undeclared_keys(sub, x, &format!("{path}.{k}"))),
                    // free-form objects declare no properties at all
                    None if props.is_some() => out.push(format!("{path}.{k}")),
                    None => {}
                }
            }
        }
        Value::Array(items) => {
            if let Some(sub) = schema.get("items") {
                for (i, x) in items.iter().enumerate() {
                    out.extend(undeclared_keys(sub, x, &format!("{path}[{i}]")));
                }
            }
        }
        _ => {}
    }
    out
}

pub fn report_schema() -> serde_json::Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../schemas/run_report.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
