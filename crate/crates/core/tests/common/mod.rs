//! Test support shared by integration targets: an independent evaluator for
//! output-rule expressions and a random valid tool-call generator.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

use vcgym_core::toolsim::{validate_call, AssetStore, MediaAsset, Modality, ParamType, ToolRegistry, ToolSpec};
use vcgym_core::trajectory::ToolCallRecord;

/// Raw manifest entry for `tool`, read straight from the shipped JSON.
pub fn raw_tool(tool: &str) -> Value {
    let manifest: Value = serde_json::from_str(ToolRegistry::builtin_manifest_json()).unwrap();
    manifest["tools"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["name"] == tool)
        .cloned()
        .unwrap_or_else(|| panic!("{tool} not in manifest"))
}

/// Arguments with manifest defaults filled in.
pub fn with_defaults(raw: &Value, args: &Map<String, Value>) -> Map<String, Value> {
    let mut out = args.clone();
    for p in raw["params"].as_array().unwrap() {
        let name = p["name"].as_str().unwrap();
        if !out.contains_key(name) {
            if let Some(d) = p.get("default") {
                out.insert(name.to_string(), d.clone());
            }
        }
    }
    out
}

fn attr_of(asset: &MediaAsset, attr: &str) -> f64 {
    match attr {
        "width" => asset.width.map(f64::from),
        "height" => asset.height.map(f64::from),
        "duration" => asset.duration,
        "segments" => asset.segments.map(f64::from),
        _ => None,
    }
    .unwrap_or_else(|| panic!("asset {} has no {attr}", asset.id))
}

/// Direct evaluation of an expression string, one token at a time.
pub struct Oracle<'a> {
    toks: Vec<String>,
    pos: usize,
    args: &'a Map<String, Value>,
    store: &'a AssetStore,
}

impl<'a> Oracle<'a> {
    pub fn eval(src: &str, args: &'a Map<String, Value>, store: &'a AssetStore) -> f64 {
        let mut toks = Vec::new();
        let chars: Vec<char> = src.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if "+-*/(),".contains(c) {
                toks.push(c.to_string());
                i += 1;
            } else {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                assert!(i > start, "bad char {c} in {src}");
                toks.push(chars[start..i].iter().collect());
            }
        }
        let mut o = Oracle {
            toks,
            pos: 0,
            args,
            store,
        };
        let v = o.sum();
        assert_eq!(o.pos, o.toks.len(), "trailing tokens in {src}");
        v
    }

    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(String::as_str)
    }

    fn next(&mut self) -> String {
        self.pos += 1;
        self.toks[self.pos - 1].clone()
    }

    fn expect(&mut self, t: &str) {
        assert_eq!(self.next(), t);
    }

    fn sum(&mut self) -> f64 {
        let mut v = self.product();
        while let Some(op @ ("+" | "-")) = self.peek() {
            let plus = op == "+";
            self.pos += 1;
            let r = self.product();
            v = if plus { v + r } else { v - r };
        }
        v
    }

    fn product(&mut self) -> f64 {
        let mut v = self.atom();
        while let Some(op @ ("*" | "/")) = self.peek() {
            let mul = op == "*";
            self.pos += 1;
            let r = self.atom();
            v = if mul { v * r } else { v / r };
        }
        v
    }

    fn asset(&self, id: &Value) -> &MediaAsset {
        self.store.get(id.as_str().unwrap()).unwrap()
    }

    fn atom(&mut self) -> f64 {
        let t = self.next();
        if t == "(" {
            let v = self.sum();
            self.expect(")");
            return v;
        }
        if let Ok(n) = t.parse::<f64>() {
            return n;
        }
        if matches!(t.as_str(), "sum" | "max" | "min" | "len") {
            self.expect("(");
            let inner = self.peek().unwrap().to_string();
            let v = if t == "len" {
                self.pos += 1;
                let name = inner.strip_prefix("args.").unwrap();
                self.args[name].as_str().unwrap().chars().count() as f64
            } else if let Some(rest) = inner.strip_prefix("inputs.") {
                self.pos += 1;
                let (param, attr) = rest.split_once('.').unwrap();
                let xs: Vec<f64> = self.args[param]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|id| attr_of(self.asset(id), attr))
                    .collect();
                match t.as_str() {
                    "sum" => xs.iter().sum(),
                    "max" => xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    _ => xs.iter().cloned().fold(f64::INFINITY, f64::min),
                }
            } else {
                let a = self.sum();
                self.expect(",");
                let b = self.sum();
                if t == "max" {
                    a.max(b)
                } else {
                    a.min(b)
                }
            };
            self.expect(")");
            return v;
        }
        if let Some(name) = t.strip_prefix("args.") {
            return self.args[name].as_f64().unwrap();
        }
        if let Some(rest) = t.strip_prefix("input.") {
            let (param, attr) = rest.split_once('.').unwrap();
            return attr_of(self.asset(&self.args[param]), attr);
        }
        panic!("unexpected token {t}");
    }
}

const WORDS: &[&str] = &[
    "fox", "city", "neon", "rain", "portrait", "sunset", "quiet", "mountain", "robot", "garden", "ocean", "story",
];

fn words<R: Rng>(rng: &mut R, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn of_modality(store: &AssetStore, m: Option<Modality>) -> Vec<String> {
    store
        .iter()
        .filter(|a| Some(a.modality) == m)
        .map(|a| a.id.clone())
        .collect()
}

/// Draws arguments for `spec`, or `None` when the store cannot supply a
/// required asset.
pub fn random_args<R: Rng>(rng: &mut R, spec: &ToolSpec, store: &AssetStore) -> Option<Map<String, Value>> {
    let mut args = Map::new();
    for p in &spec.params {
        if !p.required && rng.random_bool(0.5) {
            continue;
        }
        let v = match p.ty {
            ParamType::String => json!(words(rng, 12)),
            ParamType::Boolean => json!(rng.random_bool(0.5)),
            ParamType::Integer => {
                let lo = p.min.unwrap_or(0.0) as i64;
                let hi = p.max.unwrap_or(100.0) as i64;
                json!(rng.random_range(lo..=hi))
            }
            ParamType::Number => {
                let lo = p.min.unwrap_or(0.0);
                let hi = p.max.unwrap_or(100.0);
                json!((rng.random_range(lo..=hi) * 100.0).round() / 100.0)
            }
            ParamType::Enum => p.values.as_ref().unwrap().choose(rng).unwrap().clone(),
            ParamType::AssetRef => {
                let ids = of_modality(store, p.accepts);
                match ids.choose(rng) {
                    Some(id) => json!(id),
                    None if p.required => return None,
                    None => continue,
                }
            }
            ParamType::AssetRefList => {
                let ids = of_modality(store, p.accepts);
                if ids.is_empty() {
                    if p.required {
                        return None;
                    }
                    continue;
                }
                let n = rng.random_range(1..=3.min(ids.len()));
                json!(ids.choose_multiple(rng, n).collect::<Vec<_>>())
            }
        };
        args.insert(p.name.clone(), v);
    }
    Some(args)
}

/// A random call that passes validation against `store`, drawn from tools
/// whose inputs the store can supply.
pub fn random_valid_call<R: Rng>(rng: &mut R, registry: &ToolRegistry, store: &AssetStore) -> ToolCallRecord {
    let specs: Vec<&ToolSpec> = registry.iter().collect();
    loop {
        let spec = *specs.choose(rng).unwrap();
        if let Some(args) = random_args(rng, spec, store) {
            if validate_call(spec, &args, store).is_ok() {
                return ToolCallRecord::new(spec.name.clone(), args);
            }
        }
    }
}
