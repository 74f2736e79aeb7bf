//! Trajectory reward: a plan score gating a weighted sum of five
//! execution components.
//!
//! `total = plan × fine`, `fine = Σ wᵢ·Rᵢ` over tool, format, result,
//! trajectory coherence and consistency. Without a sound plan no amount of
//! successful execution earns reward.

pub mod judger;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{RequiredModality, TaskSpec};
use crate::toolsim::{AssetStore, MediaAsset, Modality, ParamType, ToolRegistry, ToolResult};
use crate::trajectory::{parse_blocks, parse_trajectory, Block, BlockKind, DefectClass, ParseReport, ToolCallRecord};

pub use judger::{
    CoherenceJudgement, Facet, Judger, JudgerKeywords, PlanJudgement, PlanStep, RemoteJudger, RuleJudger,
    JUDGER_URL_ENV,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub tool: f64,
    pub format: f64,
    pub result: f64,
    pub traj: f64,
    pub cons: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            tool: 0.2,
            format: 0.2,
            result: 0.2,
            traj: 0.2,
            cons: 0.2,
        }
    }
}

impl Weights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.tool, self.format, self.result, self.traj, self.cons]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormatDeductions {
    pub unbalanced_tag: f64,
    pub unknown_tag: f64,
    pub invalid_json: f64,
    pub invalid_json_cap: f64,
    pub bad_ordering: f64,
    pub empty_block: f64,
}

impl Default for FormatDeductions {
    fn default() -> Self {
        Self {
            unbalanced_tag: 0.4,
            unknown_tag: 0.4,
            invalid_json: 0.3,
            invalid_json_cap: 0.6,
            bad_ordering: 0.2,
            empty_block: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolPenalties {
    pub intermediate: f64,
    #[serde(rename = "final")]
    pub final_call: f64,
}

impl Default for ToolPenalties {
    fn default() -> Self {
        Self {
            intermediate: 0.2,
            final_call: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub weights: Weights,
    /// Relative duration error tolerated at full credit.
    pub tau: f64,
    pub format_deductions: FormatDeductions,
    pub tool_penalties: ToolPenalties,
    /// Filter threshold on `total`.
    pub threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: Weights::default(),
            tau: 0.10,
            format_deductions: FormatDeductions::default(),
            tool_penalties: ToolPenalties::default(),
            threshold: 0.6,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid reward configuration: {0}")]
pub struct ConfigError(pub String);

fn unit(name: &str, x: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(ConfigError(format!("{name} = {x} is outside [0, 1]")))
    }
}

impl Weights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ConfigError(format!(
                "weights must be finite and non-negative, got {w:?}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.weights.validate()?;
        if !(0.0..1.0).contains(&self.tau) {
            return Err(ConfigError(format!("tau = {} is outside [0, 1)", self.tau)));
        }
        let d = &self.format_deductions;
        for (name, x) in [
            ("unbalanced_tag", d.unbalanced_tag),
            ("unknown_tag", d.unknown_tag),
            ("invalid_json", d.invalid_json),
            ("invalid_json_cap", d.invalid_json_cap),
            ("bad_ordering", d.bad_ordering),
            ("empty_block", d.empty_block),
            ("tool_penalties.intermediate", self.tool_penalties.intermediate),
            ("tool_penalties.final", self.tool_penalties.final_call),
            ("threshold", self.threshold),
        ] {
            unit(name, x)?;
        }
        Ok(())
    }
}

/// Raw component scores before composition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Components {
    pub plan: f64,
    pub format: f64,
    pub tool: f64,
    pub result: f64,
    pub traj: f64,
    pub cons: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub plan: f64,
    pub format: f64,
    pub tool: f64,
    pub result: f64,
    pub traj: f64,
    pub cons: f64,
    pub fine: f64,
    pub total: f64,
    pub facet_scores: BTreeMap<Facet, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Combines component scores: `fine = Σ wᵢRᵢ` (tool, format, result, traj,
/// cons, summed in that order) and `total = plan × fine`.
pub fn compose_reward(c: &Components, weights: &Weights) -> Result<RewardBreakdown, ConfigError> {
    weights.validate()?;
    let c = Components {
        plan: clamp01(c.plan),
        format: clamp01(c.format),
        tool: clamp01(c.tool),
        result: clamp01(c.result),
        traj: clamp01(c.traj),
        cons: clamp01(c.cons),
    };
    let fine = clamp01(
        weights.tool * c.tool
            + weights.format * c.format
            + weights.result * c.result
            + weights.traj * c.traj
            + weights.cons * c.cons,
    );
    Ok(RewardBreakdown {
        plan: c.plan,
        format: c.format,
        tool: c.tool,
        result: c.result,
        traj: c.traj,
        cons: c.cons,
        fine,
        total: c.plan * fine,
        facet_scores: BTreeMap::new(),
        notes: Vec::new(),
    })
}

/// 1 minus the summed deductions, floored at 0. Invalid JSON payloads are
/// charged per occurrence up to their cap.
pub fn score_format(report: &ParseReport, d: &FormatDeductions) -> f64 {
    let n = |c| report.count(c) as f64;
    let json = (n(DefectClass::InvalidJsonPayload) * d.invalid_json).min(d.invalid_json_cap);
    let total = n(DefectClass::UnbalancedTag) * d.unbalanced_tag
        + n(DefectClass::UnknownTag) * d.unknown_tag
        + json
        + n(DefectClass::BadOrdering) * d.bad_ordering
        + n(DefectClass::EmptyBlock) * d.empty_block;
    (1.0 - total).max(0.0)
}

pub fn score_tool(log: &[ToolResult], p: &ToolPenalties) -> f64 {
    let Some((last, rest)) = log.split_last() else {
        return 1.0;
    };
    let intermediate = rest.iter().filter(|r| !r.success).count() as f64;
    let final_failed = if last.success { 0.0 } else { 1.0 };
    (1.0 - p.intermediate * intermediate - p.final_call * final_failed).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultScore {
    pub score: f64,
    /// Applicable dimensions: modality, count, duration, storyboards.
    pub dims: BTreeMap<String, f64>,
}

/// Duration credit for one video.
pub fn duration_score(actual: f64, required: f64, tau: f64) -> f64 {
    let rel = (actual - required).abs() / required;
    if rel <= tau {
        1.0
    } else {
        (1.0 - (rel - tau)).max(0.0)
    }
}

/// Checks the delivered assets against the task's constraints.
pub fn score_result(spec: &TaskSpec, final_assets: &[MediaAsset], tau: f64) -> ResultScore {
    let of = |m: Modality| final_assets.iter().filter(move |a| a.modality == m);
    let images = of(Modality::Image).count();
    let videos: Vec<&MediaAsset> = of(Modality::Video).collect();
    let modality_ok = match spec.required_modality {
        RequiredModality::Image => images > 0,
        RequiredModality::Video => !videos.is_empty(),
        RequiredModality::Mixed => images > 0 && !videos.is_empty(),
    };
    let mut dims = BTreeMap::new();
    dims.insert("modality".to_string(), if modality_ok { 1.0 } else { 0.0 });
    if !modality_ok {
        return ResultScore { score: 0.0, dims };
    }
    let partial = |got: usize, need: u32| got.min(need as usize) as f64 / f64::from(need);
    if let Some(r) = spec.required_count {
        let got = match spec.required_modality {
            RequiredModality::Video => videos.len(),
            RequiredModality::Image | RequiredModality::Mixed => images,
        };
        dims.insert("count".to_string(), partial(got, r));
    }
    if let Some(d) = spec.required_duration_s {
        let total: f64 = videos
            .iter()
            .map(|v| duration_score(v.duration.unwrap_or(0.0), d, tau))
            .sum();
        dims.insert("duration".to_string(), total / videos.len() as f64);
    }
    if let Some(s) = spec.required_storyboards {
        let segments: u32 = videos.iter().map(|v| v.segments.unwrap_or(1)).sum();
        dims.insert("storyboards".to_string(), partial(segments as usize, s));
    }
    let score = dims.values().sum::<f64>() / dims.len() as f64;
    ResultScore { score, dims }
}

fn result_block(b: &Block) -> Option<ToolResult> {
    (b.kind == BlockKind::ToolResult)
        .then(|| serde_json::from_str(b.content.trim()).ok())
        .flatten()
}

/// Share of visual-generation calls (after the first) that build on an
/// asset produced earlier in the episode. Neutral when consistency is not
/// required.
pub fn score_consistency(spec: &TaskSpec, blocks: &[Block], registry: &ToolRegistry, store: &AssetStore) -> f64 {
    if !spec.consistency {
        return 1.0;
    }
    let mut seen: std::collections::HashSet<String> = Default::default();
    let mut generation_calls = 0usize;
    let mut grounded = 0usize;
    for b in blocks {
        if let Some(res) = result_block(b) {
            if res.success {
                seen.extend(res.assets.into_iter().map(|a| a.id));
            }
            continue;
        }
        let Some(call) = b.payload.as_ref().filter(|_| b.kind == BlockKind::ToolCall) else {
            continue;
        };
        let Some(tool) = registry.get(&call.name).filter(|t| t.is_visual_generation()) else {
            continue;
        };
        generation_calls += 1;
        if generation_calls == 1 {
            continue;
        }
        let refs_prior = tool.params.iter().any(|p| {
            let prior = |v: &serde_json::Value| v.as_str().is_some_and(|id| seen.contains(id) && store.contains(id));
            match (p.ty, call.arguments.get(&p.name)) {
                (ParamType::AssetRef, Some(v)) => prior(v),
                (ParamType::AssetRefList, Some(v)) => v.as_array().is_some_and(|xs| xs.iter().any(prior)),
                _ => false,
            }
        });
        grounded += usize::from(refs_prior);
    }
    if generation_calls <= 1 {
        1.0
    } else {
        grounded as f64 / (generation_calls - 1) as f64
    }
}

/// Assets the episode delivers: those whose ids the last answer names, or,
/// without an answer, the non-text assets no later asset was built from.
pub fn final_assets(blocks: &[Block], store: &AssetStore) -> Vec<MediaAsset> {
    if let Some(answer) = blocks.iter().rev().find(|b| b.kind == BlockKind::Answer) {
        let mut out: Vec<MediaAsset> = Vec::new();
        for tok in answer
            .content
            .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        {
            if let Some(a) = store.get(tok) {
                if !out.iter().any(|o| o.id == a.id) {
                    out.push(a.clone());
                }
            }
        }
        return out;
    }
    let consumed: std::collections::HashSet<&str> = store
        .iter()
        .filter(|a| a.modality != Modality::Text)
        .flat_map(|a| a.provenance.inputs.iter().map(String::as_str))
        .collect();
    store
        .iter()
        .filter(|a| a.modality != Modality::Text && !consumed.contains(a.id.as_str()))
        .cloned()
        .collect()
}

/// Rebuilds the tool log and asset store from the `<tool_result>` blocks of
/// a recorded trajectory.
pub fn reconstruct(blocks: &[Block]) -> (Vec<ToolResult>, AssetStore) {
    let mut log = Vec::new();
    let mut store = AssetStore::new("replay");
    for res in blocks.iter().filter_map(result_block) {
        for a in &res.assets {
            let _ = store.insert(a.clone());
        }
        log.push(res);
    }
    (log, store)
}

/// Scores trajectories against tasks.
#[derive(Debug, Clone)]
pub struct RewardEngine {
    config: RewardConfig,
    registry: Arc<ToolRegistry>,
}

impl RewardEngine {
    pub fn new(config: RewardConfig, registry: Arc<ToolRegistry>) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self { config, registry })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<ToolRegistry> {
        &self.registry
    }

    /// Scores an episode given its full text, tool log and final store.
    pub fn score_episode(
        &self,
        spec: &TaskSpec,
        source: &str,
        tool_log: &[ToolResult],
        store: &AssetStore,
        judger: &dyn Judger,
    ) -> RewardBreakdown {
        let report = parse_trajectory(source);
        let (blocks, _) = parse_blocks(source);
        let mut notes = Vec::new();

        let plan_text = blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Plan)
            .map(|b| b.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let names = self.registry.names();
        let pj = judger.score_plan(&plan_text, spec, &names);
        notes.extend(pj.notes.iter().map(|n| format!("plan: {n}")));
        let mut facet_scores = BTreeMap::new();
        for f in Facet::ALL {
            let v = pj.facets.get(&f).copied().map(clamp01).unwrap_or_else(|| {
                notes.push(format!("plan: judger returned no {f} score"));
                0.0
            });
            facet_scores.insert(f, v);
        }
        let plan = facet_scores.values().sum::<f64>() / Facet::ALL.len() as f64;

        let format = score_format(&report, &self.config.format_deductions);
        for d in &report.defects {
            notes.push(format!("format: {:?} at byte {}: {}", d.class, d.position, d.message));
        }

        let tool = score_tool(tool_log, &self.config.tool_penalties);
        for r in tool_log.iter().filter(|r| !r.success) {
            notes.push(format!("tool: {} failed: {}", r.tool, r.message));
        }

        let delivered = final_assets(&blocks, store);
        let result = score_result(spec, &delivered, self.config.tau);
        for (dim, v) in &result.dims {
            if *v < 1.0 {
                notes.push(format!("result: {dim} scored {v:.4}"));
            }
        }

        let calls: Vec<ToolCallRecord> = blocks
            .iter()
            .filter(|b| b.kind == BlockKind::ToolCall)
            .filter_map(|b| b.payload.clone())
            .collect();
        let cj = judger.score_coherence(&plan_text, &calls);
        notes.extend(cj.notes.iter().map(|n| format!("traj: {n}")));

        let cons = score_consistency(spec, &blocks, &self.registry, store);
        if cons < 1.0 {
            notes.push(format!("cons: {cons:.4} of follow-up generations reuse earlier assets"));
        }

        let c = Components {
            plan,
            format,
            tool,
            result: result.score,
            traj: cj.score,
            cons,
        };
        let mut b = compose_reward(&c, &self.config.weights).expect("weights validated at construction");
        b.facet_scores = facet_scores;
        b.notes = notes;
        b
    }

    /// Scores a recorded trajectory on its own, rebuilding tool outcomes and
    /// assets from its `<tool_result>` blocks.
    pub fn score_static(&self, spec: &TaskSpec, source: &str, judger: &dyn Judger) -> RewardBreakdown {
        let (blocks, _) = parse_blocks(source);
        let (log, store) = reconstruct(&blocks);
        self.score_episode(spec, source, &log, &store, judger)
    }
}

pub type Scored<T> = Vec<(T, RewardBreakdown)>;

/// Splits scored items at `threshold`, keeping order: `total ≥ threshold`
/// is kept.
pub fn filter_dataset<T>(scored: Scored<T>, threshold: f64) -> (Scored<T>, Scored<T>) {
    scored.into_iter().partition(|(_, b)| b.total >= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolsim::Provenance;
    use crate::trajectory::{Defect, Trajectory};

    fn report(classes: &[DefectClass]) -> ParseReport {
        ParseReport {
            trajectory: None::<Trajectory>,
            defects: classes
                .iter()
                .map(|c| Defect {
                    class: *c,
                    position: 0,
                    message: String::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn format_table() {
        let d = FormatDeductions::default();
        assert_eq!(score_format(&report(&[]), &d), 1.0);
        assert!((score_format(&report(&[DefectClass::InvalidJsonPayload]), &d) - 0.7).abs() < 1e-12);
        let capped = [
            DefectClass::InvalidJsonPayload,
            DefectClass::InvalidJsonPayload,
            DefectClass::InvalidJsonPayload,
            DefectClass::BadOrdering,
        ];
        assert!((score_format(&report(&capped), &d) - 0.2).abs() < 1e-12);
        assert_eq!(score_format(&report(&[DefectClass::UnbalancedTag; 3]), &d), 0.0);
    }

    fn result(success: bool) -> ToolResult {
        ToolResult {
            tool: "t".into(),
            success,
            assets: vec![],
            message: String::new(),
            violations: vec![],
        }
    }

    #[test]
    fn tool_penalties() {
        let p = ToolPenalties::default();
        assert_eq!(score_tool(&[], &p), 1.0);
        assert_eq!(score_tool(&[result(true), result(true)], &p), 1.0);
        assert!((score_tool(&[result(false), result(true)], &p) - 0.8).abs() < 1e-12);
        assert_eq!(score_tool(&[result(true), result(false)], &p), 0.5);
        assert_eq!(score_tool(&vec![result(false); 6], &p), 0.0);
    }

    fn asset(id: &str, modality: Modality, duration: Option<f64>) -> MediaAsset {
        MediaAsset {
            id: id.into(),
            modality,
            width: Some(64),
            height: Some(64),
            duration,
            segments: (modality == Modality::Video).then_some(1),
            text_content: None,
            catalog_source: "x".into(),
            provenance: Provenance {
                tool: "t".into(),
                args_digest: String::new(),
                inputs: vec![],
            },
        }
    }

    fn spec(m: RequiredModality) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            task_type: "Movies".into(),
            query: String::new(),
            required_modality: m,
            required_count: None,
            required_duration_s: None,
            required_storyboards: None,
            consistency: false,
            max_steps: 50,
        }
    }

    #[test]
    fn result_examples() {
        let mut s = spec(RequiredModality::Image);
        s.required_count = Some(3);
        let imgs: Vec<_> = (0..3).map(|i| asset(&format!("i{i}"), Modality::Image, None)).collect();
        assert_eq!(score_result(&s, &imgs, 0.1).score, 1.0);
        let r = score_result(&s, &imgs[..2], 0.1);
        assert!((r.dims["count"] - 2.0 / 3.0).abs() < 1e-12);

        let mut v = spec(RequiredModality::Video);
        v.required_duration_s = Some(10.0);
        let clip = asset("v", Modality::Video, Some(10.5));
        assert_eq!(score_result(&v, &[clip], 0.1).dims["duration"], 1.0);
        assert_eq!(score_result(&v, &imgs, 0.1).score, 0.0);
    }

    #[test]
    fn duration_tolerance_boundary() {
        assert_eq!(duration_score(11.0, 10.0, 0.1), 1.0);
        assert!(duration_score(11.01, 10.0, 0.1) < 1.0);
        assert_eq!(duration_score(40.0, 10.0, 0.1), 0.0);
    }

    #[test]
    fn mixed_needs_both() {
        let mut s = spec(RequiredModality::Mixed);
        s.required_count = Some(1);
        let img = asset("i", Modality::Image, None);
        let vid = asset("v", Modality::Video, Some(5.0));
        assert_eq!(score_result(&s, std::slice::from_ref(&img), 0.1).score, 0.0);
        assert_eq!(score_result(&s, &[img, vid], 0.1).score, 1.0);
    }

    #[test]
    fn compose_examples() {
        let w = Weights::default();
        let all = |x| Components {
            plan: x,
            format: x,
            tool: x,
            result: x,
            traj: x,
            cons: x,
        };
        assert_eq!(compose_reward(&all(1.0), &w).unwrap().total, 1.0);
        let mut c = all(1.0);
        c.plan = 0.0;
        assert_eq!(compose_reward(&c, &w).unwrap().total, 0.0);
        let mut c = all(0.5);
        c.plan = 0.8;
        let b = compose_reward(&c, &w).unwrap();
        assert!((b.fine - 0.5).abs() < 1e-12 && (b.total - 0.4).abs() < 1e-12);
        let bad = Weights { tool: 0.5, ..w };
        assert!(compose_reward(&c, &bad).is_err());
    }

    #[test]
    fn filter_examples() {
        let mk = |t: f64| {
            let mut b = compose_reward(&Components::default(), &Weights::default()).unwrap();
            b.total = t;
            b
        };
        let items = vec![(0, mk(0.3)), (1, mk(0.7)), (2, mk(0.9))];
        let (kept, dropped) = filter_dataset(items.clone(), 0.6);
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), [1, 2]);
        assert_eq!(dropped.len(), 1);
        assert_eq!(filter_dataset(items.clone(), 0.0).0.len(), 3);
        assert_eq!(filter_dataset(items, 1.0).0.len(), 0);
    }

    #[test]
    fn config_validation() {
        RewardConfig::default().validate().unwrap();
        let c = RewardConfig {
            tau: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let parsed: RewardConfig = serde_json::from_str(r#"{"tau": 0.2}"#).unwrap();
        assert_eq!(parsed.weights, Weights::default());
        assert_eq!(parsed.tau, 0.2);
    }
}
