//! Argument validation and simulated execution of tool calls.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::catalog::MediaCatalog;
use super::expr::EvalContext;
use super::store::{AssetStore, Attr, MediaAsset, Modality, Provenance};
use super::{ParamSpec, ParamType, ToolRegistry, ToolSpec};
use crate::trajectory::ToolCallRecord;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    #[error("missing required parameter `{param}`")]
    MissingRequired { param: String },
    #[error("unknown parameter `{param}`")]
    UnknownParam { param: String },
    #[error("parameter `{param}` must be {expected}")]
    TypeMismatch { param: String, expected: String },
    #[error("parameter `{param}` = {value} is outside [{}, {}]", fmt_bound(*.min), fmt_bound(*.max))]
    OutOfRange {
        param: String,
        value: f64,
        min: Option<f64>,
        max: Option<f64>,
    },
    #[error("parameter `{param}` = {value} is not an allowed value")]
    NotInEnum { param: String, value: Value },
    #[error("parameter `{param}` references unknown asset `{id}`")]
    DanglingAssetRef { param: String, id: String },
    #[error("parameter `{param}` expects a {expected} asset but `{id}` is {found}")]
    WrongModality {
        param: String,
        id: String,
        expected: Modality,
        found: Modality,
    },
    #[error("derived {attribute} is invalid: {reason}")]
    InvalidDerivedAttribute { attribute: String, reason: String },
}

fn fmt_bound(b: Option<f64>) -> String {
    b.map_or_else(|| "-".to_string(), |v| v.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationResult {
    Ok,
    Invalid(Vec<Violation>),
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, ValidationResult::Ok)
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            ValidationResult::Ok => &[],
            ValidationResult::Invalid(v) => v,
        }
    }
}

/// Outcome of one executed call, serialized verbatim into `<tool_result>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: String,
    pub success: bool,
    #[serde(default)]
    pub assets: Vec<MediaAsset>,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl ToolResult {
    pub fn failure(tool: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            tool: tool.into(),
            success: false,
            assets: Vec::new(),
            message: message.into(),
            violations: Vec::new(),
        }
    }

    pub fn asset_ids(&self) -> Vec<&str> {
        self.assets.iter().map(|a| a.id.as_str()).collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("media catalog has no {0} placeholders")]
    CatalogGap(Modality),
}

/// Checks a non-asset value against its declaration.
pub(crate) fn check_scalar(p: &ParamSpec, v: &Value) -> Option<Violation> {
    let mismatch = |expected: &str| {
        Some(Violation::TypeMismatch {
            param: p.name.clone(),
            expected: expected.to_string(),
        })
    };
    match p.ty {
        ParamType::String if !v.is_string() => mismatch("a string"),
        ParamType::Boolean if !v.is_boolean() => mismatch("a boolean"),
        ParamType::Integer if !(v.is_i64() || v.is_u64()) => mismatch("an integer"),
        ParamType::Number if !v.is_number() => mismatch("a number"),
        ParamType::Integer | ParamType::Number => {
            let x = v.as_f64().unwrap_or(f64::NAN);
            let below = p.min.is_some_and(|lo| x < lo);
            let above = p.max.is_some_and(|hi| x > hi);
            (below || above || !x.is_finite()).then(|| Violation::OutOfRange {
                param: p.name.clone(),
                value: x,
                min: p.min,
                max: p.max,
            })
        }
        ParamType::Enum => {
            let allowed = p.values.iter().flatten().any(|a| match (a.as_f64(), v.as_f64()) {
                (Some(x), Some(y)) => x == y,
                _ => a == v,
            });
            (!allowed).then(|| Violation::NotInEnum {
                param: p.name.clone(),
                value: v.clone(),
            })
        }
        _ => None,
    }
}

/// A call whose arguments passed validation, with derived output values.
struct Resolved {
    args: Map<String, Value>,
    input_ids: Vec<String>,
    count: u32,
    attrs: BTreeMap<Attr, f64>,
}

fn resolve_asset(
    p: &ParamSpec,
    v: &Value,
    store: &AssetStore,
    out: &mut Vec<MediaAsset>,
    violations: &mut Vec<Violation>,
) {
    let Some(id) = v.as_str() else {
        violations.push(Violation::TypeMismatch {
            param: p.name.clone(),
            expected: "an asset id string".into(),
        });
        return;
    };
    let Some(asset) = store.get(id) else {
        violations.push(Violation::DanglingAssetRef {
            param: p.name.clone(),
            id: id.to_string(),
        });
        return;
    };
    let expected = p.accepts.expect("asset params declare accepts");
    if asset.modality != expected {
        violations.push(Violation::WrongModality {
            param: p.name.clone(),
            id: id.to_string(),
            expected,
            found: asset.modality,
        });
        return;
    }
    out.push(asset.clone());
}

fn resolve(spec: &ToolSpec, args: &Map<String, Value>, store: &AssetStore) -> Result<Resolved, Vec<Violation>> {
    let mut violations = Vec::new();
    for key in args.keys() {
        if spec.param(key).is_none() {
            violations.push(Violation::UnknownParam { param: key.clone() });
        }
    }

    let mut bound = Map::new();
    let mut inputs: HashMap<String, Vec<MediaAsset>> = HashMap::new();
    let mut input_ids = Vec::new();
    for p in &spec.params {
        let v = match args.get(&p.name) {
            Some(Value::Null) | None => {
                if p.required {
                    violations.push(Violation::MissingRequired { param: p.name.clone() });
                } else if let Some(d) = &p.default {
                    bound.insert(p.name.clone(), d.clone());
                }
                continue;
            }
            Some(v) => v,
        };
        match p.ty {
            ParamType::AssetRef => {
                let mut got = Vec::new();
                resolve_asset(p, v, store, &mut got, &mut violations);
                inputs.insert(p.name.clone(), got);
            }
            ParamType::AssetRefList => {
                let Some(items) = v.as_array() else {
                    violations.push(Violation::TypeMismatch {
                        param: p.name.clone(),
                        expected: "a list of asset ids".into(),
                    });
                    continue;
                };
                if items.is_empty() && p.required {
                    violations.push(Violation::TypeMismatch {
                        param: p.name.clone(),
                        expected: "a non-empty list of asset ids".into(),
                    });
                }
                let mut got = Vec::new();
                for item in items {
                    resolve_asset(p, item, store, &mut got, &mut violations);
                }
                inputs.insert(p.name.clone(), got);
            }
            _ => {
                if let Some(viol) = check_scalar(p, v) {
                    violations.push(viol);
                }
            }
        }
        bound.insert(p.name.clone(), v.clone());
    }
    if !violations.is_empty() {
        return Err(violations);
    }
    for p in &spec.params {
        if let Some(assets) = inputs.get(&p.name) {
            input_ids.extend(assets.iter().map(|a| a.id.clone()));
        }
    }

    let ctx = EvalContext {
        args: &bound,
        inputs: &inputs,
    };
    let derived = |attribute: &str, reason: String| {
        vec![Violation::InvalidDerivedAttribute {
            attribute: attribute.to_string(),
            reason,
        }]
    };
    let whole = |x: f64| x.is_finite() && x.fract() == 0.0 && x >= 1.0 && x <= f64::from(u32::MAX);

    let count = spec.output.count.expr.eval(&ctx).map_err(|e| derived("count", e.0))?;
    if !whole(count) {
        return Err(derived("count", format!("{count} is not a positive integer")));
    }
    let mut attrs = BTreeMap::new();
    for (attr, rule) in &spec.output.attributes {
        let x = rule.expr.eval(&ctx).map_err(|e| derived(attr.name(), e.0))?;
        let ok = if attr.is_integral() {
            whole(x)
        } else {
            x.is_finite() && x > 0.0
        };
        if !ok {
            return Err(derived(attr.name(), format!("`{}` evaluated to {x}", rule.source)));
        }
        attrs.insert(*attr, x);
    }
    Ok(Resolved {
        args: bound,
        input_ids,
        count: count as u32,
        attrs,
    })
}

/// Validates arguments and evaluates the output rule without side effects.
pub fn validate_call(spec: &ToolSpec, args: &Map<String, Value>, store: &AssetStore) -> ValidationResult {
    match resolve(spec, args, store) {
        Ok(_) => ValidationResult::Ok,
        Err(v) => ValidationResult::Invalid(v),
    }
}

/// First 16 hex digits of the SHA-256 of the canonical argument JSON.
pub fn args_digest(args: &Map<String, Value>) -> String {
    // serde_json maps without preserve_order are key-sorted, so this is canonical.
    let canon = serde_json::to_string(args).expect("JSON values serialize");
    let hash = Sha256::digest(canon.as_bytes());
    hex::encode(&hash[..8])
}

/// Executes one call against the episode's store.
///
/// Invalid arguments yield a failed result and leave the store untouched.
/// Valid calls may still fail with the tool's `failure_rate`; the draw is
/// taken from `rng` only after validation passes.
pub fn execute_call<R: Rng + ?Sized>(
    registry: &ToolRegistry,
    catalog: &MediaCatalog,
    store: &mut AssetStore,
    call: &ToolCallRecord,
    rng: &mut R,
) -> Result<ToolResult, ExecError> {
    let spec = registry
        .get(&call.name)
        .ok_or_else(|| ExecError::UnknownTool(call.name.clone()))?;
    let resolved = match resolve(spec, &call.arguments, store) {
        Ok(r) => r,
        Err(violations) => {
            let msg = violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ");
            let mut res = ToolResult::failure(&spec.name, format!("invalid arguments: {msg}"));
            res.violations = violations;
            return Ok(res);
        }
    };
    let modality = spec.output.modality;
    if catalog.entries_for(modality).is_empty() {
        return Err(ExecError::CatalogGap(modality));
    }
    if spec.failure_rate > 0.0 && rng.random::<f64>() < spec.failure_rate {
        return Ok(ToolResult::failure(
            &spec.name,
            "tool failed (simulated transient error)",
        ));
    }

    let digest = args_digest(&resolved.args);
    let attr = |a: Attr| resolved.attrs.get(&a).copied();
    let mut assets = Vec::with_capacity(resolved.count as usize);
    for _ in 0..resolved.count {
        let entry = catalog.sample(modality, rng).expect("checked above");
        let id = store.mint_id();
        let asset = MediaAsset {
            id: id.clone(),
            modality,
            width: attr(Attr::Width).map(|x| x as u32),
            height: attr(Attr::Height).map(|x| x as u32),
            duration: attr(Attr::Duration),
            segments: attr(Attr::Segments).map(|x| x as u32),
            text_content: (modality == Modality::Text)
                .then(|| format!("{} result {digest} ({})", spec.function, entry.id)),
            catalog_source: entry.id.clone(),
            provenance: Provenance {
                tool: spec.name.clone(),
                args_digest: digest.clone(),
                inputs: resolved.input_ids.clone(),
            },
        };
        store
            .insert(asset.clone())
            .expect("minted ids are fresh and derived attributes are valid");
        assets.push(asset);
    }
    let ids = assets.iter().map(|a| a.id.as_str()).collect::<Vec<_>>().join(", ");
    Ok(ToolResult {
        tool: spec.name.clone(),
        success: true,
        message: format!("produced {ids}"),
        assets,
        violations: Vec::new(),
    })
}
