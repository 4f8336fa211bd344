//! Config resolution: defaults, then the JSON file, then `--set` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mfdl_core::data::{self, CsvSchema, Dataset};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Reads the config for one subcommand. Keys the command does not know are
/// rejected, whether they come from the file or from an override.
pub fn resolve<T>(file: Option<&Path>, sets: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let loaded: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut value, loaded);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    serde_json::from_value(value).context("invalid configuration")
}

/// Deep merge: objects merge key by key, anything else replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// `a.b.c=value`. The value is read as JSON when it parses, else as a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
    if path.is_empty() {
        bail!("override {assignment:?} has an empty key");
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().unwrap()
            }
            _ => bail!("override {path:?}: {:?} is not an object", keys[..i].join(".")),
        };
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

/// Where a labeled dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    TwoMoons {
        n: usize,
        noise: f64,
    },
    Blobs {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
    },
    ToySine,
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first rows; `None` keeps all.
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        Ok(match self {
            DatasetSource::TwoMoons { n, noise } => data::two_moons(*n, *noise, seed)?,
            DatasetSource::Blobs {
                n,
                dim,
                classes,
                separation,
            } => data::gaussian_blobs(*n, *dim, *classes, *separation, seed)?,
            DatasetSource::ToySine => data::toy_sine(seed),
            DatasetSource::Csv { path, schema } => data::load_csv_labeled(path, schema)?,
            DatasetSource::Idx { images, labels, limit } => {
                let ds = data::load_idx(images, labels)?;
                match limit {
                    Some(l) if *l < ds.len() => ds.subset(&(0..*l).collect::<Vec<_>>()),
                    _ => ds,
                }
            }
        })
    }
}
