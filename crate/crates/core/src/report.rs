//! Report records shared by every module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Tree,
    Mc,
}

/// Serializes non-finite numbers (and `None`) as `null`.
pub fn finite_or_null<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) if v.is_finite() => s.serialize_f64(*v),
        _ => s.serialize_none(),
    }
}

/// Flat record `{name, p, value, backend, error, metadata}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    #[serde(serialize_with = "finite_or_null")]
    pub p: Option<f64>,
    pub value: Option<f64>,
    pub backend: Backend,
    pub error: Option<f64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Record {
    pub fn new(name: impl Into<String>, backend: Backend) -> Self {
        Record { name: name.into(), p: None, value: None, backend, error: None, metadata: BTreeMap::new() }
    }
    pub fn p(mut self, p: f64) -> Self {
        self.p = Some(p);
        self
    }
    pub fn value(mut self, v: f64) -> Self {
        self.value = if v.is_finite() { Some(v) } else { None };
        if !v.is_finite() {
            self.metadata.insert("value_text".into(), serde_json::Value::String(format!("{v}")));
        }
        self
    }
    pub fn error(mut self, e: f64) -> Self {
        self.error = Some(e);
        self
    }
    pub fn meta(mut self, key: &str, v: impl Serialize) -> Self {
        self.metadata.insert(key.into(), serde_json::to_value(v).unwrap_or(serde_json::Value::Null));
        self
    }
}

impl From<&crate::bmo::NormReport> for Record {
    fn from(r: &crate::bmo::NormReport) -> Self {
        let name = serde_json::to_value(r.name).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let mut rec = Record::new(name, r.backend).value(r.value);
        rec.p = r.p;
        rec.error = r.error;
        rec
    }
}
