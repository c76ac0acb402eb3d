//! Config layering: an optional JSON file, then `--set` overrides, then the
//! named flags of the subcommand (later layers win). The merged document is
//! deserialized into the command's typed config, which is also what gets
//! written back as `config.resolved.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use vulndiv::data::{gen_synthetic, load_idx, Dataset, Split, SyntheticSpec};

use crate::CliError;

/// Numeric precision of a run. Pipelines are single precision; double
/// precision exists in the library for gradient checking only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "f32")]
    F32,
}

/// Where a command reads its samples from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataRef {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Class count when the labels do not reach the top class.
        #[serde(default)]
        classes: Option<usize>,
    },
    Synthetic { spec: SyntheticSpec, split: Split },
}

impl DataRef {
    pub fn load(&self) -> Result<Dataset, CliError> {
        match self {
            DataRef::Idx { images, labels, classes } => {
                let d = load_idx(images, labels)?;
                Ok(match classes {
                    Some(c) => d.with_classes(*c)?,
                    None => d,
                })
            }
            DataRef::Synthetic { spec, split } => Ok(gen_synthetic(spec, *split)?),
        }
    }
}

/// Parses `a.b.c=<value>`; the value is JSON when it parses as JSON and a
/// plain string otherwise.
pub fn parse_set(arg: &str) -> Result<(String, Value), CliError> {
    let (path, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects PATH=VALUE, got `{arg}`")))?;
    if path.is_empty() {
        return Err(CliError::usage("--set path is empty"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.to_string(), value))
}

/// Writes `value` at the dotted `path`, creating objects along the way.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Map::new());
            } else {
                return Err(CliError::config(parts[..i].join("."), "is not an object"));
            }
        }
        let obj = cur.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let v: Value = serde_path_to_error::deserialize(&mut de).map_err(|e| CliError::config(e.path().to_string(), e.inner().to_string()))?;
    if !v.is_object() {
        return Err(CliError::config(".", "config must be a JSON object"));
    }
    Ok(v)
}

/// Merges `top` into `base`: objects key by key, anything else replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Deserializes the merged document, reporting failures with their path.
pub fn resolve<T: DeserializeOwned>(doc: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(doc).map_err(|e| CliError::config(e.path().to_string(), e.inner().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_creates_nested_objects() {
        let mut doc = Value::Object(Map::new());
        set_path(&mut doc, "plan.distill.epsilon", Value::from(0.1)).unwrap();
        set_path(&mut doc, "plan.mode", Value::from("dverge")).unwrap();
        assert_eq!(doc["plan"]["distill"]["epsilon"], 0.1);
        assert_eq!(doc["plan"]["mode"], "dverge");
    }

    #[test]
    fn merge_keeps_untouched_defaults() {
        let mut base = serde_json::json!({"attack": {"steps": 20, "momentum": 1.0}, "list": [1, 2]});
        merge(&mut base, serde_json::json!({"attack": {"steps": 5}, "list": [3], "x": null}));
        assert_eq!(base, serde_json::json!({"attack": {"steps": 5, "momentum": 1.0}, "list": [3], "x": null}));
    }

    #[test]
    fn set_refuses_to_descend_into_scalars() {
        let mut doc = serde_json::json!({"a": 3});
        let err = set_path(&mut doc, "a.b", Value::from(1)).unwrap_err();
        assert_eq!(err.path.as_deref(), Some("a"));
    }

    #[test]
    fn set_values_fall_back_to_strings() {
        assert_eq!(parse_set("a=7").unwrap().1, Value::from(7));
        assert_eq!(parse_set("mode=dverge").unwrap().1, Value::from("dverge"));
        assert_eq!(parse_set("x=[1,2]").unwrap().1, serde_json::json!([1, 2]));
        assert!(parse_set("novalue").is_err());
    }

    #[test]
    fn resolve_reports_the_failing_path() {
        #[derive(Deserialize, Debug)]
        #[serde(deny_unknown_fields)]
        struct Inner {
            #[allow(dead_code)]
            lambda: f32,
        }
        #[derive(Deserialize, Debug)]
        struct Outer {
            #[allow(dead_code)]
            plan: Inner,
        }
        let err = resolve::<Outer>(serde_json::json!({"plan": {"lambda": "big"}})).unwrap_err();
        assert_eq!(err.path.as_deref(), Some("plan.lambda"));
    }

    #[test]
    fn precision_accepts_only_single() {
        assert!(serde_json::from_str::<Precision>("\"f32\"").is_ok());
        assert!(serde_json::from_str::<Precision>("\"f64\"").is_err());
    }
}
