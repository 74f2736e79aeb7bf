//! UTPC trajectory model and a strict parser for the metacognitive tag grammar.
//!
//! A trajectory is a flat sequence of `<think>`, `<plan>`, `<tool_call>`,
//! `<tool_result>` and `<answer>` blocks. Tags never nest. The parser never
//! fails: every problem it finds is reported as a [`Defect`] so that the
//! format reward can grade it.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Think,
    Plan,
    ToolCall,
    ToolResult,
    Answer,
}

impl BlockKind {
    pub const ALL: [BlockKind; 5] = [
        BlockKind::Think,
        BlockKind::Plan,
        BlockKind::ToolCall,
        BlockKind::ToolResult,
        BlockKind::Answer,
    ];

    /// Literal tag name used in the source text.
    pub fn tag(self) -> &'static str {
        match self {
            BlockKind::Think => "think",
            BlockKind::Plan => "plan",
            BlockKind::ToolCall => "tool_call",
            BlockKind::ToolResult => "tool_result",
            BlockKind::Answer => "answer",
        }
    }

    pub fn from_tag(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == name)
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Structured content of a `<tool_call>` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

impl ToolCallRecord {
    pub fn new(name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        Self {
            name: name.into(),
            arguments,
        }
    }

    /// Compact JSON form used as `<tool_call>` content.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tool call record serializes")
    }
}

/// Byte offsets `[start, end)` of a block (tags included) in its source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub content: String,
    /// Present exactly for `ToolCall` blocks whose content parsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<ToolCallRecord>,
    /// Empty (`0..0`) for blocks built in memory that were never parsed.
    #[serde(default)]
    pub span: Span,
}

impl Block {
    /// Builds an unparsed block. Tool-call content is decoded into a payload
    /// when it is valid.
    pub fn new(kind: BlockKind, content: impl Into<String>) -> Self {
        let content = content.into();
        let payload = match kind {
            BlockKind::ToolCall => decode_tool_call(&content).ok(),
            _ => None,
        };
        Self {
            kind,
            content,
            payload,
            span: Span::default(),
        }
    }

    pub fn tool_call(record: &ToolCallRecord) -> Self {
        Self {
            kind: BlockKind::ToolCall,
            content: record.to_json(),
            payload: Some(record.clone()),
            span: Span::default(),
        }
    }

    /// Equality on kind, content and payload; spans are ignored.
    pub fn same_as(&self, other: &Block) -> bool {
        self.kind == other.kind && self.content == other.content && self.payload == other.payload
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub source: String,
    pub blocks: Vec<Block>,
}

impl Trajectory {
    /// Builds a trajectory from blocks, rendering the source text.
    pub fn from_blocks(task_id: impl Into<String>, blocks: Vec<Block>) -> Self {
        let mut t = Trajectory {
            task_id: task_id.into(),
            source: String::new(),
            blocks,
        };
        t.source = serialize_trajectory(&t);
        t
    }

    pub fn block_equal(&self, other: &Trajectory) -> bool {
        self.blocks.len() == other.blocks.len() && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.same_as(b))
    }

    pub fn blocks_of(&self, kind: BlockKind) -> impl Iterator<Item = &Block> {
        self.blocks.iter().filter(move |b| b.kind == kind)
    }

    /// Number of tool invocations (the "steps" of a trajectory).
    pub fn step_count(&self) -> usize {
        self.blocks_of(BlockKind::ToolCall).count()
    }

    /// All plan blocks joined by newlines.
    pub fn plan_text(&self) -> String {
        self.blocks_of(BlockKind::Plan)
            .map(|b| b.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn answer(&self) -> Option<&Block> {
        self.blocks_of(BlockKind::Answer).last()
    }

    /// Checks the structural invariants: a single trailing answer and every
    /// tool result directly after a tool call.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, b) in self.blocks.iter().enumerate() {
            match b.kind {
                BlockKind::Answer if i + 1 != self.blocks.len() => {
                    return Err(format!("answer block {i} is not last"));
                }
                BlockKind::ToolResult if i == 0 || self.blocks[i - 1].kind != BlockKind::ToolCall => {
                    return Err(format!("tool_result block {i} does not follow a tool_call"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefectClass {
    UnbalancedTag,
    BadOrdering,
    InvalidJsonPayload,
    EmptyBlock,
    UnknownTag,
}

impl DefectClass {
    /// Structural defects prevent a trajectory from being produced.
    pub fn is_structural(self) -> bool {
        matches!(self, DefectClass::UnbalancedTag | DefectClass::UnknownTag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Defect {
    pub class: DefectClass,
    pub position: usize,
    pub message: String,
}

impl Defect {
    fn new(class: DefectClass, position: usize, message: impl Into<String>) -> Self {
        Self {
            class,
            position,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParseReport {
    pub trajectory: Option<Trajectory>,
    pub defects: Vec<Defect>,
}

impl ParseReport {
    pub fn is_clean(&self) -> bool {
        self.defects.is_empty()
    }

    pub fn count(&self, class: DefectClass) -> usize {
        self.defects.iter().filter(|d| d.class == class).count()
    }
}

struct Tag<'a> {
    closing: bool,
    name: &'a str,
    end: usize,
}

/// Recognizes `<name>` or `</name>` starting at byte `at` (which holds `<`).
fn lex_tag(source: &str, at: usize) -> Option<Tag<'_>> {
    let bytes = source.as_bytes();
    let mut i = at + 1;
    let closing = bytes.get(i) == Some(&b'/');
    if closing {
        i += 1;
    }
    let name_start = i;
    match bytes.get(i) {
        Some(c) if c.is_ascii_alphabetic() || *c == b'_' => i += 1,
        _ => return None,
    }
    while matches!(bytes.get(i), Some(c) if c.is_ascii_alphanumeric() || *c == b'_') {
        i += 1;
    }
    if bytes.get(i) != Some(&b'>') {
        return None;
    }
    Some(Tag {
        closing,
        name: &source[name_start..i],
        end: i + 1,
    })
}

/// Decodes tool-call content into a record with a name and an argument map.
pub fn decode_tool_call(content: &str) -> Result<ToolCallRecord, String> {
    let value: Value = serde_json::from_str(content.trim()).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("tool call is not a JSON object")?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or("tool call has no string `name` field")?;
    let arguments = match obj.get("arguments") {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err("`arguments` is not an object".into()),
    };
    Ok(ToolCallRecord::new(name, arguments))
}

/// Lenient block extraction: recovers every block it can and reports all
/// defects, sorted by position. Used by [`parse_trajectory`] and by the
/// environment, which must keep going on malformed actions.
pub fn parse_blocks(source: &str) -> (Vec<Block>, Vec<Defect>) {
    let mut blocks = Vec::new();
    let mut defects = Vec::new();
    // (kind, tag start, content start)
    let mut open: Option<(BlockKind, usize, usize)> = None;
    let mut pos = 0;

    let close = |blocks: &mut Vec<Block>, kind, start, content_start, content_end, end| {
        blocks.push(Block {
            kind,
            content: source[content_start..content_end].to_string(),
            payload: None,
            span: Span { start, end },
        });
    };

    while let Some(off) = source[pos..].find('<') {
        let at = pos + off;
        let Some(tag) = lex_tag(source, at) else {
            pos = at + 1;
            continue;
        };
        let known = BlockKind::from_tag(tag.name);
        match (open, known) {
            (None, Some(kind)) if !tag.closing => open = Some((kind, at, tag.end)),
            (None, Some(kind)) => defects.push(Defect::new(
                DefectClass::UnbalancedTag,
                at,
                format!("closing </{kind}> without a matching opening tag"),
            )),
            (None, None) => defects.push(Defect::new(
                DefectClass::UnknownTag,
                at,
                format!("unknown tag <{}{}>", if tag.closing { "/" } else { "" }, tag.name),
            )),
            (Some((kind, start, cstart)), Some(k)) if tag.closing => {
                if k != kind {
                    defects.push(Defect::new(
                        DefectClass::UnbalancedTag,
                        at,
                        format!("closing </{k}> does not match open <{kind}>"),
                    ));
                }
                close(&mut blocks, kind, start, cstart, at, tag.end);
                open = None;
            }
            (Some((kind, start, cstart)), Some(k)) => {
                defects.push(Defect::new(
                    DefectClass::UnbalancedTag,
                    start,
                    format!("<{kind}> is not closed before <{k}>"),
                ));
                close(&mut blocks, kind, start, cstart, at, at);
                open = Some((k, at, tag.end));
            }
            // Unknown tags inside a block are ordinary content.
            (Some(_), None) => {}
        }
        pos = tag.end;
    }
    if let Some((kind, start, cstart)) = open {
        defects.push(Defect::new(
            DefectClass::UnbalancedTag,
            start,
            format!("<{kind}> is not closed at end of input"),
        ));
        close(&mut blocks, kind, start, cstart, source.len(), source.len());
    }

    for b in &mut blocks {
        if b.content.trim().is_empty() {
            defects.push(Defect::new(
                DefectClass::EmptyBlock,
                b.span.start,
                format!("empty <{}> block", b.kind),
            ));
        }
        if b.kind == BlockKind::ToolCall {
            match decode_tool_call(&b.content) {
                Ok(rec) => b.payload = Some(rec),
                Err(e) => defects.push(Defect::new(
                    DefectClass::InvalidJsonPayload,
                    b.span.start,
                    format!("invalid tool call payload: {e}"),
                )),
            }
        }
    }

    defects.extend(ordering_defects(&blocks));
    defects.sort_by_key(|d| d.position);
    (blocks, defects)
}

fn ordering_defects(blocks: &[Block]) -> Vec<Defect> {
    let mut out = Vec::new();
    let mut seen_plan = false;
    let mut first_call_checked = false;
    for (i, b) in blocks.iter().enumerate() {
        match b.kind {
            BlockKind::Plan => seen_plan = true,
            BlockKind::ToolCall if !first_call_checked => {
                first_call_checked = true;
                if !seen_plan {
                    out.push(Defect::new(
                        DefectClass::BadOrdering,
                        b.span.start,
                        "first tool_call is not preceded by a plan",
                    ));
                }
            }
            BlockKind::ToolResult if i == 0 || blocks[i - 1].kind != BlockKind::ToolCall => {
                out.push(Defect::new(
                    DefectClass::BadOrdering,
                    b.span.start,
                    "tool_result does not directly follow a tool_call",
                ));
            }
            BlockKind::Answer if i + 1 < blocks.len() => out.push(Defect::new(
                DefectClass::BadOrdering,
                b.span.start,
                "answer is not the last block",
            )),
            _ => {}
        }
    }
    out
}

/// Parses a source text. The trajectory is withheld when the tag structure
/// itself is broken (unbalanced or unknown tags).
pub fn parse_trajectory(source: &str) -> ParseReport {
    parse_trajectory_with_id("", source)
}

pub fn parse_trajectory_with_id(task_id: &str, source: &str) -> ParseReport {
    let (blocks, defects) = parse_blocks(source);
    let trajectory = if defects.iter().any(|d| d.class.is_structural()) {
        None
    } else {
        Some(Trajectory {
            task_id: task_id.to_string(),
            source: source.to_string(),
            blocks,
        })
    };
    ParseReport { trajectory, defects }
}

/// Renders blocks as `<tag>content</tag>`, one per line.
pub fn serialize_trajectory(t: &Trajectory) -> String {
    serialize_blocks(&t.blocks)
}

pub fn serialize_blocks(blocks: &[Block]) -> String {
    let mut out = String::new();
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let tag = b.kind.tag();
        out.push('<');
        out.push_str(tag);
        out.push('>');
        out.push_str(&b.content);
        out.push_str("</");
        out.push_str(tag);
        out.push('>');
    }
    out
}

/// One line of a trajectory dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub source: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no trajectories to summarize")]
    Empty,
}

/// Thresholds for the "fraction exceeding" columns.
#[derive(Debug, Clone)]
pub struct StatsThresholds {
    pub steps: Vec<u32>,
    pub tokens: Vec<u64>,
}

impl Default for StatsThresholds {
    fn default() -> Self {
        Self {
            steps: vec![10, 20],
            tokens: vec![32_000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub trajectories: usize,
    pub mean_steps: f64,
    pub frac_steps_gt: BTreeMap<u32, f64>,
    pub mean_token_estimate: f64,
    pub frac_tokens_gt: BTreeMap<u64, f64>,
}

/// Whitespace-delimited unit count, the token proxy.
pub fn token_estimate(source: &str) -> usize {
    source.split_whitespace().count()
}

pub fn trajectory_stats(dataset: &[Trajectory], thresholds: &StatsThresholds) -> Result<TrajectoryStats, StatsError> {
    if dataset.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = dataset.len() as f64;
    let steps: Vec<usize> = dataset.iter().map(Trajectory::step_count).collect();
    let tokens: Vec<usize> = dataset.iter().map(|t| token_estimate(&t.source)).collect();
    let frac = |pred: &dyn Fn(usize) -> bool, xs: &[usize]| xs.iter().filter(|&&x| pred(x)).count() as f64 / n;
    Ok(TrajectoryStats {
        trajectories: dataset.len(),
        mean_steps: steps.iter().sum::<usize>() as f64 / n,
        frac_steps_gt: thresholds
            .steps
            .iter()
            .map(|&k| (k, frac(&|x| x > k as usize, &steps)))
            .collect(),
        mean_token_estimate: tokens.iter().sum::<usize>() as f64 / n,
        frac_tokens_gt: thresholds
            .tokens
            .iter()
            .map(|&k| (k, frac(&|x| x as u64 > k, &tokens)))
            .collect(),
    })
}

const WORDS: &[&str] = &[
    "poster",
    "scene",
    "character",
    "shot",
    "render",
    "light",
    "warm",
    "frame",
    "story",
    "brand",
    "color",
    "motion",
    "camera",
    "style",
    "music",
    "cut",
    "layout",
    "logo",
    "a",
    "the",
    "with",
    "then",
    "next",
    "3",
    "1024",
    "5s",
    "check",
    "done",
    "reference",
    "keep",
];

const TOOL_NAMES: &[&str] = &[
    "tool_text2image_qwen",
    "tool_image_edit_gpt",
    "tool_image2video_keling",
    "tool_video_composite",
    "tool_music_suno",
    "tool_prompt_refine",
];

fn random_text<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.random_range(1..12);
    let mut s = String::new();
    if rng.random_bool(0.2) {
        s.push_str(" \n ");
    }
    for i in 0..n {
        if i > 0 {
            s.push_str(if rng.random_bool(0.1) { "\n" } else { " " });
        }
        s.push_str(WORDS.choose(rng).unwrap());
    }
    if rng.random_bool(0.2) {
        s.push('\n');
    }
    s
}

fn random_call<R: Rng + ?Sized>(rng: &mut R) -> ToolCallRecord {
    let mut args = Map::new();
    for _ in 0..rng.random_range(0..4) {
        let key = format!("p{}", rng.random_range(0..6));
        let value = match rng.random_range(0..4) {
            0 => Value::from(random_text(rng).trim().to_string()),
            1 => Value::from(rng.random_range(0..4096)),
            2 => Value::from(rng.random_bool(0.5)),
            _ => Value::from(vec![Value::from(format!("asset_{}", rng.random_range(0..99)))]),
        };
        args.insert(key, value);
    }
    ToolCallRecord::new(*TOOL_NAMES.choose(rng).unwrap(), args)
}

/// Generates a random trajectory that obeys the grammar and every ordering
/// rule, so it parses without defects. Used as a fixture generator.
pub fn synthesize_trajectory<R: Rng + ?Sized>(rng: &mut R, task_id: &str, max_calls: usize) -> Trajectory {
    let mut blocks = Vec::new();
    for _ in 0..rng.random_range(0..3) {
        blocks.push(Block::new(BlockKind::Think, random_text(rng)));
    }
    blocks.push(Block::new(BlockKind::Plan, random_text(rng)));
    for _ in 0..rng.random_range(0..=max_calls) {
        if rng.random_bool(0.3) {
            blocks.push(Block::new(BlockKind::Think, random_text(rng)));
        }
        if rng.random_bool(0.05) {
            blocks.push(Block::new(BlockKind::Plan, random_text(rng)));
        }
        blocks.push(Block::tool_call(&random_call(rng)));
        if rng.random_bool(0.8) {
            let result = serde_json::json!({"success": rng.random_bool(0.9), "message": random_text(rng).trim()});
            blocks.push(Block::new(BlockKind::ToolResult, result.to_string()));
        }
    }
    if rng.random_bool(0.8) {
        blocks.push(Block::new(BlockKind::Answer, random_text(rng)));
    }
    Trajectory::from_blocks(task_id, blocks)
}
