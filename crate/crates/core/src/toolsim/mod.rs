//! Data-driven registry and procedural simulator for visual-creation tools.
//!
//! Tools are declared in a JSON manifest (see `docs/formats.md`): a parameter
//! schema plus an output rule written in the small expression language of
//! [`expr`]. Executing a call validates the arguments against the episode's
//! [`AssetStore`], evaluates the output rule, and inserts assets whose
//! attributes follow the rule exactly while their placeholder file is drawn
//! from the [`MediaCatalog`].

pub mod catalog;
mod exec;
pub mod expr;
pub mod store;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use catalog::{CatalogEntry, CatalogError, MediaCatalog};
pub use exec::{args_digest, execute_call, validate_call, ExecError, ToolResult, ValidationResult, Violation};
pub use expr::Expr;
pub use store::{AssetStore, Attr, MediaAsset, Modality, Provenance, StoreError};

use expr::Reference;

const DEFAULT_MANIFEST: &str = include_str!("../../data/tools.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ToolCategory {
    TextToText,
    TextToImage,
    ImageToImage,
    ImageToVideo,
    Audio,
    MultimodalUnderstanding,
    Other,
}

impl ToolCategory {
    pub const ALL: [ToolCategory; 7] = [
        ToolCategory::TextToText,
        ToolCategory::TextToImage,
        ToolCategory::ImageToImage,
        ToolCategory::ImageToVideo,
        ToolCategory::Audio,
        ToolCategory::MultimodalUnderstanding,
        ToolCategory::Other,
    ];
}

impl fmt::Display for ToolCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    AssetRef,
    AssetRefList,
    Enum,
}

impl ParamType {
    fn is_asset(self) -> bool {
        matches!(self, ParamType::AssetRef | ParamType::AssetRefList)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<Value>>,
    /// Modality an asset reference must point at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepts: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl ParamSpec {
    /// Whether the value is always available when an output rule runs.
    fn always_bound(&self) -> bool {
        self.required || self.default.is_some()
    }
}

/// An expression together with the text it was compiled from.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleExpr {
    pub source: String,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputRule {
    pub modality: Modality,
    pub count: RuleExpr,
    pub attributes: BTreeMap<Attr, RuleExpr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolSpec {
    pub name: String,
    pub function: String,
    pub category: ToolCategory,
    pub params: Vec<ParamSpec>,
    pub output: OutputRule,
    pub failure_rate: f64,
}

impl ToolSpec {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn produces(&self) -> Modality {
        self.output.modality
    }

    /// Modalities of the required asset inputs.
    pub fn consumes(&self) -> Vec<Modality> {
        let mut out: Vec<Modality> = self
            .params
            .iter()
            .filter(|p| p.required && p.ty.is_asset())
            .filter_map(|p| p.accepts)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Visual generation: produces an image or video.
    pub fn is_visual_generation(&self) -> bool {
        self.output.modality.is_visual()
    }
}

// Manifest (wire) form.

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ToolsManifest {
    pub tools: Vec<ToolEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolEntry {
    pub name: String,
    #[serde(default)]
    pub function: String,
    pub category: ToolCategory,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    pub output: OutputEntry,
    #[serde(default)]
    pub failure_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputEntry {
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl From<&ToolSpec> for ToolEntry {
    fn from(t: &ToolSpec) -> Self {
        ToolEntry {
            name: t.name.clone(),
            function: t.function.clone(),
            category: t.category,
            params: t.params.clone(),
            output: OutputEntry {
                modality: t.output.modality,
                count: Some(t.output.count.source.clone()),
                attributes: t
                    .output
                    .attributes
                    .iter()
                    .map(|(k, v)| (k.name().to_string(), v.source.clone()))
                    .collect(),
            },
            failure_rate: t.failure_rate,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("malformed tools manifest: {0}")]
    Parse(String),
    #[error("duplicate tool name `{0}`")]
    DuplicateName(String),
    #[error("tool `{tool}`: parameter `{param}`: {reason}")]
    MalformedParam {
        tool: String,
        param: String,
        reason: String,
    },
    #[error("tool `{tool}`: output rule: {reason}")]
    BadDerivation { tool: String, reason: String },
    #[error("tool `{tool}`: failure_rate {rate} is outside [0, 1]")]
    BadFailureRate { tool: String, rate: f64 },
}

/// Immutable set of tool specifications.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: Vec<ToolSpec>,
    index: HashMap<String, usize>,
}

/// Parses and checks a tools manifest.
pub fn load_registry(manifest_json: &str) -> Result<ToolRegistry, RegistryError> {
    let manifest: ToolsManifest =
        serde_json::from_str(manifest_json).map_err(|e| RegistryError::Parse(e.to_string()))?;
    ToolRegistry::from_manifest(manifest)
}

impl ToolRegistry {
    pub fn from_manifest(manifest: ToolsManifest) -> Result<Self, RegistryError> {
        let mut reg = ToolRegistry::default();
        for entry in manifest.tools {
            if reg.index.contains_key(&entry.name) {
                return Err(RegistryError::DuplicateName(entry.name));
            }
            let spec = compile_entry(entry)?;
            reg.index.insert(spec.name.clone(), reg.tools.len());
            reg.tools.push(spec);
        }
        Ok(reg)
    }

    /// The shipped 36-tool manifest.
    pub fn builtin() -> Self {
        load_registry(DEFAULT_MANIFEST).expect("shipped manifest is valid")
    }

    pub fn builtin_manifest_json() -> &'static str {
        DEFAULT_MANIFEST
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.index.get(name).map(|&i| &self.tools[i])
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.name.as_str()).collect()
    }

    /// Every modality some tool outputs or accepts.
    pub fn modalities(&self) -> HashSet<Modality> {
        let mut out = HashSet::new();
        for t in &self.tools {
            out.insert(t.output.modality);
            out.extend(t.params.iter().filter_map(|p| p.accepts));
        }
        out
    }

    /// Returns a copy where every tool fails with the given probability.
    pub fn with_failure_rate(mut self, rate: f64) -> Self {
        for t in &mut self.tools {
            t.failure_rate = rate.clamp(0.0, 1.0);
        }
        self
    }

    pub fn with_tool_failure_rate(mut self, tool: &str, rate: f64) -> Self {
        if let Some(&i) = self.index.get(tool) {
            self.tools[i].failure_rate = rate.clamp(0.0, 1.0);
        }
        self
    }

    pub fn to_manifest(&self) -> ToolsManifest {
        ToolsManifest {
            tools: self.tools.iter().map(ToolEntry::from).collect(),
        }
    }
}

fn check_param(tool: &str, p: &ParamSpec) -> Result<(), RegistryError> {
    let bad = |reason: &str| RegistryError::MalformedParam {
        tool: tool.to_string(),
        param: p.name.clone(),
        reason: reason.to_string(),
    };
    if p.name.is_empty() {
        return Err(bad("empty name"));
    }
    if p.ty.is_asset() && p.accepts.is_none() {
        return Err(bad("asset references must declare `accepts`"));
    }
    if !p.ty.is_asset() && p.accepts.is_some() {
        return Err(bad("`accepts` is only valid on asset references"));
    }
    if p.ty == ParamType::Enum && p.values.as_ref().is_none_or(Vec::is_empty) {
        return Err(bad("enum parameters need a non-empty `values` list"));
    }
    if let (Some(lo), Some(hi)) = (p.min, p.max) {
        if lo > hi {
            return Err(bad("min is greater than max"));
        }
    }
    if (p.min.is_some() || p.max.is_some()) && !matches!(p.ty, ParamType::Integer | ParamType::Number) {
        return Err(bad("ranges apply only to integer and number parameters"));
    }
    if let Some(d) = &p.default {
        if p.ty.is_asset() {
            return Err(bad("asset references cannot have defaults"));
        }
        if let Some(v) = exec::check_scalar(p, d) {
            return Err(bad(&format!("default is invalid: {v}")));
        }
    }
    Ok(())
}

fn compile_entry(entry: ToolEntry) -> Result<ToolSpec, RegistryError> {
    let tool = entry.name.clone();
    if !(0.0..=1.0).contains(&entry.failure_rate) {
        return Err(RegistryError::BadFailureRate {
            tool,
            rate: entry.failure_rate,
        });
    }
    let mut names = HashSet::new();
    for p in &entry.params {
        if !names.insert(p.name.as_str()) {
            return Err(RegistryError::MalformedParam {
                tool,
                param: p.name.clone(),
                reason: "declared twice".into(),
            });
        }
        check_param(&tool, p)?;
    }
    let bad = |reason: String| RegistryError::BadDerivation {
        tool: tool.clone(),
        reason,
    };
    let compile = |src: &str| -> Result<RuleExpr, RegistryError> {
        let expr = Expr::parse(src).map_err(|e| bad(format!("`{src}`: {e}")))?;
        check_references(&entry.params, &expr).map_err(|e| bad(format!("`{src}`: {e}")))?;
        Ok(RuleExpr {
            source: src.to_string(),
            expr,
        })
    };

    let modality = entry.output.modality;
    let mut attributes = BTreeMap::new();
    for (name, src) in &entry.output.attributes {
        let attr = Attr::from_name(name).ok_or_else(|| bad(format!("unknown attribute `{name}`")))?;
        if !modality.required_attrs().contains(&attr) {
            return Err(bad(format!("{modality} outputs have no `{name}` attribute")));
        }
        attributes.insert(attr, compile(src)?);
    }
    for attr in modality.required_attrs() {
        if !attributes.contains_key(attr) {
            return Err(bad(format!("{modality} outputs need a `{attr}` derivation")));
        }
    }
    let count = compile(entry.output.count.as_deref().unwrap_or("1"))?;

    Ok(ToolSpec {
        name: entry.name,
        function: entry.function,
        category: entry.category,
        params: entry.params,
        output: OutputRule {
            modality,
            count,
            attributes,
        },
        failure_rate: entry.failure_rate,
    })
}

fn check_references(params: &[ParamSpec], expr: &Expr) -> Result<(), String> {
    let find = |name: &str| {
        params
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| format!("references undeclared parameter `{name}`"))
    };
    for r in expr.references() {
        match r {
            Reference::Arg(name) => {
                let p = find(name)?;
                let numeric = match p.ty {
                    ParamType::Integer | ParamType::Number | ParamType::Boolean => true,
                    ParamType::Enum => p.values.iter().flatten().all(Value::is_number),
                    _ => false,
                };
                if !numeric {
                    return Err(format!("`{name}` is not numeric"));
                }
                if !p.always_bound() {
                    return Err(format!("`{name}` is optional without a default"));
                }
            }
            Reference::Len(name) => {
                let p = find(name)?;
                if p.ty != ParamType::String || !p.always_bound() {
                    return Err(format!("len() needs a required string parameter, `{name}` is not"));
                }
            }
            Reference::Input(name, attr) | Reference::Inputs(name, attr) => {
                let p = find(name)?;
                let want = if matches!(r, Reference::Input(..)) {
                    ParamType::AssetRef
                } else {
                    ParamType::AssetRefList
                };
                if p.ty != want || !p.required {
                    return Err(format!("`{name}` must be a required {want:?} parameter"));
                }
                let accepts = p.accepts.expect("checked by check_param");
                if !accepts.required_attrs().contains(&attr) {
                    return Err(format!("{accepts} inputs have no `{attr}`"));
                }
            }
        }
    }
    Ok(())
}
