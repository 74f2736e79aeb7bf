//! Plan and trajectory-coherence judging.
//!
//! [`RuleJudger`] is a deterministic offline judge driven by a keyword file;
//! [`RemoteJudger`] forwards to an HTTP endpoint and falls back to the rule
//! judge when the endpoint is unavailable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::env::{RequiredModality, TaskSpec};
use crate::toolsim::{Modality, ToolCategory, ToolRegistry};
use crate::trajectory::ToolCallRecord;

const DEFAULT_KEYWORDS: &str = include_str!("../../data/judger_keywords.json");

/// Environment variable holding the remote judger URL.
pub const JUDGER_URL_ENV: &str = "VCGYM_JUDGER_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    RequirementFulfillment,
    LogicalCoherence,
    PragmaticExecutability,
    DecompositionAtomicity,
    ExpertGuidedOptimality,
}

impl Facet {
    pub const ALL: [Facet; 5] = [
        Facet::RequirementFulfillment,
        Facet::LogicalCoherence,
        Facet::PragmaticExecutability,
        Facet::DecompositionAtomicity,
        Facet::ExpertGuidedOptimality,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Facet::RequirementFulfillment => "requirement_fulfillment",
            Facet::LogicalCoherence => "logical_coherence",
            Facet::PragmaticExecutability => "pragmatic_executability",
            Facet::DecompositionAtomicity => "decomposition_atomicity",
            Facet::ExpertGuidedOptimality => "expert_guided_optimality",
        }
    }
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanJudgement {
    pub facets: BTreeMap<Facet, f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoherenceJudgement {
    pub score: f64,
    pub notes: Vec<String>,
}

pub trait Judger: Send + Sync {
    fn score_plan(&self, plan: &str, task: &TaskSpec, tool_names: &[&str]) -> PlanJudgement;
    fn score_coherence(&self, plan: &str, calls: &[ToolCallRecord]) -> CoherenceJudgement;
}

// Keyword data.

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct Capability {
    pub name: String,
    pub keywords: Vec<String>,
    pub category: ToolCategory,
    #[serde(default)]
    pub consumes: Vec<Modality>,
    #[serde(default)]
    pub produces: Vec<Modality>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct JudgerKeywords {
    pub capabilities: Vec<Capability>,
    pub reference_keywords: Vec<String>,
    pub composition_tools: Vec<String>,
    pub composition_keywords: Vec<String>,
    pub audio_task_types: Vec<String>,
    pub audio_keywords: Vec<String>,
    pub step_bands: BTreeMap<RequiredModality, [usize; 2]>,
}

impl JudgerKeywords {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_KEYWORDS).expect("shipped keyword file is valid")
    }

    /// Video or mixed tasks whose type or query implies a soundtrack.
    pub fn is_audio_task(&self, task: &TaskSpec) -> bool {
        if !task.required_modality.has_video() {
            return false;
        }
        let query = task.query.to_lowercase();
        self.audio_task_types
            .iter()
            .any(|t| t.eq_ignore_ascii_case(task.task_type.trim()))
            || self.audio_keywords.iter().any(|k| query.contains(k.as_str()))
    }
}

/// One enumerated plan step with what it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub text: String,
    /// Every `tool_*` token in the step.
    pub tools: Vec<String>,
    pub executable: bool,
    pub categories: BTreeSet<ToolCategory>,
    pub consumes: BTreeSet<Modality>,
    pub produces: BTreeSet<Modality>,
}

/// Enumerated lines (`1.`, `2)`, `-`, `*`); a plan without any is read one
/// step per non-empty line.
pub fn plan_steps(plan: &str) -> Vec<String> {
    let mut enumerated = Vec::new();
    for line in plan.lines() {
        let t = line.trim();
        let digits = t.chars().take_while(char::is_ascii_digit).count();
        let rest = if digits > 0 {
            t[digits..].strip_prefix(['.', ')'])
        } else {
            t.strip_prefix(['-', '*'])
        };
        if let Some(rest) = rest {
            if rest.starts_with(char::is_whitespace) && !rest.trim().is_empty() {
                enumerated.push(rest.trim().to_string());
            }
        }
    }
    if enumerated.is_empty() {
        plan.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    } else {
        enumerated
    }
}

fn tool_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(i) = rest.find("tool_") {
        let boundary = rest[..i]
            .chars()
            .next_back()
            .is_none_or(|c| !(c.is_ascii_alphanumeric() || c == '_'));
        let tail = &rest[i..];
        let len = tail
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(tail.len());
        if boundary && len > "tool_".len() {
            out.push(tail[..len].to_string());
        }
        rest = &tail[len.max(1)..];
    }
    out
}

fn mentions_number(text: &str, n: u32) -> bool {
    const WORDS: [&str; 13] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    ];
    let digits = n.to_string();
    let word = WORDS.get(n as usize).copied();
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .any(|tok| tok == digits || word.is_some_and(|w| tok.eq_ignore_ascii_case(w)))
}

fn fraction(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Deterministic keyword- and registry-driven judge.
#[derive(Debug, Clone)]
pub struct RuleJudger {
    registry: Arc<ToolRegistry>,
    keywords: JudgerKeywords,
}

impl RuleJudger {
    pub fn new(registry: Arc<ToolRegistry>, keywords: JudgerKeywords) -> Self {
        Self { registry, keywords }
    }

    pub fn builtin(registry: Arc<ToolRegistry>) -> Self {
        Self::new(registry, JudgerKeywords::builtin())
    }

    pub fn keywords(&self) -> &JudgerKeywords {
        &self.keywords
    }

    pub fn analyze_step(&self, text: &str) -> PlanStep {
        let lower = text.to_lowercase();
        let tools = tool_tokens(&lower);
        let mut step = PlanStep {
            text: text.to_string(),
            tools: tools.clone(),
            executable: false,
            categories: BTreeSet::new(),
            consumes: BTreeSet::new(),
            produces: BTreeSet::new(),
        };
        let registered: Vec<_> = tools.iter().filter_map(|t| self.registry.get(t)).collect();
        if !registered.is_empty() {
            step.executable = registered.len() == tools.len();
            for spec in registered {
                step.categories.insert(spec.category);
                step.consumes.extend(spec.consumes());
                step.produces.insert(spec.produces());
            }
            return step;
        }
        for cap in &self.keywords.capabilities {
            if cap.keywords.iter().any(|k| lower.contains(k.as_str())) {
                step.categories.insert(cap.category);
                step.consumes.extend(cap.consumes.iter().copied());
                step.produces.extend(cap.produces.iter().copied());
            }
        }
        // Naming a tool that does not exist is not executable, whatever the
        // surrounding words suggest.
        step.executable = tools.is_empty() && !step.categories.is_empty();
        step
    }

    pub fn analyze_plan(&self, plan: &str) -> Vec<PlanStep> {
        plan_steps(plan).iter().map(|s| self.analyze_step(s)).collect()
    }

    fn requirement_fulfillment(&self, steps: &[PlanStep], task: &TaskSpec, notes: &mut Vec<String>) -> f64 {
        let producing = |m: Modality| steps.iter().filter(|s| s.produces.contains(&m)).collect::<Vec<_>>();
        let enough = |m: Modality, need: u32| {
            let p = producing(m);
            p.len() >= need as usize || p.iter().any(|s| mentions_number(&s.text, need))
        };
        let (count_modality, needs) = match task.required_modality {
            RequiredModality::Image => (Modality::Image, vec![Modality::Image]),
            RequiredModality::Video => (Modality::Video, vec![Modality::Video]),
            RequiredModality::Mixed => (Modality::Image, vec![Modality::Image, Modality::Video]),
        };
        for m in needs {
            if producing(m).is_empty() {
                notes.push(format!("plan never produces {m}"));
                return 0.0;
            }
        }
        if let Some(n) = task.required_count {
            if !enough(count_modality, n) {
                notes.push(format!("plan does not account for {n} {count_modality} deliverables"));
                return 0.0;
            }
        }
        if let Some(n) = task.required_storyboards {
            if !enough(Modality::Video, n) {
                notes.push(format!("plan does not account for {n} storyboards"));
                return 0.0;
            }
        }
        1.0
    }

    fn logical_coherence(&self, steps: &[PlanStep], notes: &mut Vec<String>) -> f64 {
        let mut edges = 0;
        let mut violations = 0;
        for (i, step) in steps.iter().enumerate() {
            for m in step.consumes.iter().filter(|m| **m != Modality::Text) {
                edges += 1;
                if !steps[..i].iter().any(|s| s.produces.contains(m)) {
                    violations += 1;
                    notes.push(format!("step {} consumes {m} before any step produces it", i + 1));
                }
            }
        }
        if edges == 0 {
            1.0
        } else {
            1.0 - violations as f64 / edges as f64
        }
    }

    fn optimality(&self, steps: &[PlanStep], task: &TaskSpec, notes: &mut Vec<String>) -> f64 {
        let kw = &self.keywords;
        let mut items = Vec::new();
        if task.consistency {
            let reuse = steps.iter().any(|s| {
                let lower = s.text.to_lowercase();
                s.consumes.contains(&Modality::Image)
                    && s.produces.iter().any(|m| m.is_visual())
                    && kw.reference_keywords.iter().any(|k| lower.contains(k.as_str()))
            });
            if !reuse {
                notes.push("consistency task without a reference-reuse step".into());
            }
            items.push(reuse);
        }
        if kw.is_audio_task(task) {
            let composes = steps.iter().any(|s| {
                let lower = s.text.to_lowercase();
                s.tools.iter().any(|t| kw.composition_tools.contains(t))
                    || kw.composition_keywords.iter().any(|k| lower.contains(k.as_str()))
            });
            if !composes {
                notes.push("audio-bearing task without a composition step".into());
            }
            items.push(composes);
        }
        let [lo, hi] = kw
            .step_bands
            .get(&task.required_modality)
            .copied()
            .unwrap_or([1, usize::MAX]);
        let in_band = (lo..=hi).contains(&steps.len());
        if !in_band {
            notes.push(format!(
                "{} steps is outside the expected band [{lo}, {hi}]",
                steps.len()
            ));
        }
        items.push(in_band);
        fraction(items.iter().filter(|b| **b).count(), items.len())
    }
}

impl Judger for RuleJudger {
    fn score_plan(&self, plan: &str, task: &TaskSpec, _tool_names: &[&str]) -> PlanJudgement {
        let steps = self.analyze_plan(plan);
        let mut notes = Vec::new();
        if steps.is_empty() {
            notes.push("empty plan".into());
            return PlanJudgement {
                facets: Facet::ALL.iter().map(|f| (*f, 0.0)).collect(),
                notes,
            };
        }
        let n = steps.len();
        for (i, s) in steps.iter().enumerate() {
            if !s.executable {
                notes.push(format!("step {} is not grounded in a registered tool", i + 1));
            }
        }
        let facets = BTreeMap::from([
            (
                Facet::RequirementFulfillment,
                self.requirement_fulfillment(&steps, task, &mut notes),
            ),
            (Facet::LogicalCoherence, self.logical_coherence(&steps, &mut notes)),
            (
                Facet::PragmaticExecutability,
                fraction(steps.iter().filter(|s| s.executable).count(), n),
            ),
            (
                Facet::DecompositionAtomicity,
                fraction(steps.iter().filter(|s| s.categories.len() <= 1).count(), n),
            ),
            (Facet::ExpertGuidedOptimality, self.optimality(&steps, task, &mut notes)),
        ]);
        PlanJudgement { facets, notes }
    }

    fn score_coherence(&self, plan: &str, calls: &[ToolCallRecord]) -> CoherenceJudgement {
        let steps = self.analyze_plan(plan);
        if steps.is_empty() {
            return CoherenceJudgement {
                score: 0.0,
                notes: vec!["no plan steps to align".into()],
            };
        }
        let call_cats: Vec<Option<ToolCategory>> = calls
            .iter()
            .map(|c| self.registry.get(&c.name).map(|s| s.category))
            .collect();
        let mut used = vec![false; calls.len()];
        let mut matched: Vec<usize> = Vec::new();
        for step in &steps {
            let fits = |j: usize| !used[j] && call_cats[j].is_some_and(|c| step.categories.contains(&c));
            let after = matched.last().map_or(0, |&j| j + 1);
            let pick = (after..calls.len())
                .find(|&j| fits(j))
                .or_else(|| (0..calls.len()).find(|&j| fits(j)));
            if let Some(j) = pick {
                used[j] = true;
                matched.push(j);
            }
        }
        let m = matched.len();
        let coverage = m as f64 / steps.len() as f64;
        let order = match m {
            0 => 0.0,
            1 => 1.0,
            _ => {
                let inversions = (0..m)
                    .flat_map(|a| ((a + 1)..m).map(move |b| (a, b)))
                    .filter(|&(a, b)| matched[a] > matched[b])
                    .count();
                1.0 - inversions as f64 / (m * (m - 1) / 2) as f64
            }
        };
        let mut notes = Vec::new();
        if m < steps.len() {
            notes.push(format!("{} of {} plan steps were executed", m, steps.len()));
        }
        CoherenceJudgement {
            score: 0.5 * coverage + 0.5 * order,
            notes,
        }
    }
}

/// Forwards judging to an HTTP endpoint.
///
/// Requests are `POST {url}` with JSON `{plan, task, tool_names, rubric_id}`
/// for plans (response `{"facets": {name: score}}`) and `{plan, calls,
/// rubric_id}` for coherence (response `{"score": x}`). Any failure falls
/// back to the wrapped [`RuleJudger`] and records a note.
pub struct RemoteJudger {
    url: String,
    agent: ureq::Agent,
    fallback: RuleJudger,
}

pub const PLAN_RUBRIC: &str = "plan-facets-v1";
pub const COHERENCE_RUBRIC: &str = "trajectory-coherence-v1";

impl RemoteJudger {
    pub fn new(url: impl Into<String>, timeout: Duration, fallback: RuleJudger) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
            fallback,
        }
    }

    /// Reads the URL from [`JUDGER_URL_ENV`].
    pub fn from_env(timeout: Duration, fallback: RuleJudger) -> Option<Self> {
        std::env::var(JUDGER_URL_ENV)
            .ok()
            .filter(|u| !u.trim().is_empty())
            .map(|u| Self::new(u, timeout, fallback))
    }

    fn post(&self, body: &Value) -> Result<Value, String> {
        let mut resp = self.agent.post(&self.url).send_json(body).map_err(|e| e.to_string())?;
        resp.body_mut().read_json::<Value>().map_err(|e| e.to_string())
    }
}

fn score_in_range(v: &Value) -> Option<f64> {
    v.as_f64().filter(|x| (0.0..=1.0).contains(x))
}

impl Judger for RemoteJudger {
    fn score_plan(&self, plan: &str, task: &TaskSpec, tool_names: &[&str]) -> PlanJudgement {
        let body = json!({"plan": plan, "task": task, "tool_names": tool_names, "rubric_id": PLAN_RUBRIC});
        let parsed = self.post(&body).and_then(|v| {
            let facets = v.get("facets").ok_or("response has no `facets`")?;
            Facet::ALL
                .iter()
                .map(|f| {
                    facets
                        .get(f.key())
                        .and_then(score_in_range)
                        .map(|x| (*f, x))
                        .ok_or_else(|| format!("facet `{f}` missing or out of range"))
                })
                .collect::<Result<BTreeMap<_, _>, _>>()
        });
        match parsed {
            Ok(facets) => PlanJudgement {
                facets,
                notes: vec!["plan judged remotely".into()],
            },
            Err(e) => {
                let mut j = self.fallback.score_plan(plan, task, tool_names);
                j.notes
                    .insert(0, format!("remote judger failed ({e}); used rule judger"));
                j
            }
        }
    }

    fn score_coherence(&self, plan: &str, calls: &[ToolCallRecord]) -> CoherenceJudgement {
        let body = json!({"plan": plan, "calls": calls, "rubric_id": COHERENCE_RUBRIC});
        let parsed = self.post(&body).and_then(|v| {
            v.get("score")
                .and_then(score_in_range)
                .ok_or_else(|| "score missing or out of range".to_string())
        });
        match parsed {
            Ok(score) => CoherenceJudgement {
                score,
                notes: vec!["coherence judged remotely".into()],
            },
            Err(e) => {
                let mut j = self.fallback.score_coherence(plan, calls);
                j.notes
                    .insert(0, format!("remote judger failed ({e}); used rule judger"));
                j
            }
        }
    }
}
