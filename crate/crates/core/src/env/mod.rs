//! Episodic environment: `reset`, `step`, `finalize` over a shared tool
//! registry and media catalog.

mod task;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::reward::{Judger, RewardBreakdown, RewardEngine};
use crate::toolsim::{execute_call, AssetStore, Attr, MediaAsset, MediaCatalog, Modality, ToolRegistry, ToolResult};
use crate::trajectory::{parse_blocks, Block, BlockKind};

pub use task::{default_suite, known_task_types, load_suite, parse_suite, RequiredModality, TaskError, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeStatus {
    Running,
    Answered,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationKind {
    TaskPrompt,
    ToolFeedback,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSummary {
    pub id: String,
    pub modality: Modality,
    pub attributes: BTreeMap<Attr, f64>,
}

impl From<&MediaAsset> for AssetSummary {
    fn from(a: &MediaAsset) -> Self {
        Self {
            id: a.id.clone(),
            modality: a.modality,
            attributes: a
                .modality
                .required_attrs()
                .iter()
                .filter_map(|at| a.attribute(*at).map(|v| (*at, v)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub text: String,
    #[serde(default)]
    pub assets: Vec<AssetSummary>,
    /// Set on the task prompt only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    /// Outcomes of the calls executed by the step that produced this
    /// observation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<ToolResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Reset {
        task: TaskSpec,
        seed: u64,
    },
    Step {
        action: String,
    },
    /// The driver abandoned the episode (for example after a policy error).
    Truncate {
        reason: String,
    },
    Finalize {
        reward: RewardBreakdown,
    },
}

/// Ordered event log of one episode, sufficient to replay it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    pub events: Vec<TranscriptEvent>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EnvError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(line).map_err(|e| EnvError::Replay(format!("line {}: {e}", i + 1)))?;
            events.push(e);
        }
        Ok(Self { events })
    }

    pub fn reward(&self) -> Option<&RewardBreakdown> {
        self.events.iter().rev().find_map(|e| match e {
            TranscriptEvent::Finalize { reward } => Some(reward),
            _ => None,
        })
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    InvalidTask(#[from] TaskError),
    #[error("episode {handle} is {status:?}; no further steps are accepted")]
    Finished { handle: String, status: EpisodeStatus },
    #[error("episode {handle} is still running")]
    StillRunning { handle: String },
    #[error("replay failed: {0}")]
    Replay(String),
}

/// State of one episode. Owned by a single driver.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub handle: String,
    pub spec: TaskSpec,
    pub store: AssetStore,
    /// Accumulated trajectory text, tool results spliced in.
    pub source: String,
    /// Lenient parse of `source`.
    pub history: Vec<Block>,
    pub tool_log: Vec<ToolResult>,
    pub step_count: u32,
    pub action_count: u32,
    pub status: EpisodeStatus,
    pub seed: u64,
    rng: ChaCha8Rng,
    transcript: Transcript,
}

impl EpisodeState {
    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn is_running(&self) -> bool {
        self.status == EpisodeStatus::Running
    }

    /// Liveness cap on actions, counting those without tool calls.
    pub fn max_actions(&self) -> u32 {
        self.spec.max_steps.saturating_mul(2)
    }
}

fn episode_digest(task_id: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(task_id.as_bytes());
    h.update([0]);
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

/// JSON safe to embed between tags: `<` is escaped so payload text can never
/// close the block early.
fn embed_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable").replace('<', "\\u003c")
}

#[derive(Debug, Clone)]
pub struct Environment {
    registry: Arc<ToolRegistry>,
    catalog: Arc<MediaCatalog>,
}

impl Environment {
    pub fn new(registry: Arc<ToolRegistry>, catalog: Arc<MediaCatalog>) -> Self {
        Self { registry, catalog }
    }

    pub fn builtin() -> Self {
        Self::new(Arc::new(ToolRegistry::builtin()), Arc::new(MediaCatalog::builtin()))
    }

    pub fn registry(&self) -> &Arc<ToolRegistry> {
        &self.registry
    }

    pub fn catalog(&self) -> &Arc<MediaCatalog> {
        &self.catalog
    }

    fn tools_summary(&self) -> String {
        let mut out = String::new();
        for t in self.registry.iter() {
            let params: Vec<String> = t
                .params
                .iter()
                .map(|p| format!("{}{}", p.name, if p.required { "" } else { "?" }))
                .collect();
            let _ = writeln!(
                out,
                "- {} ({}): {} -> {}",
                t.name,
                t.function,
                params.join(", "),
                t.output.modality
            );
        }
        out
    }

    pub fn reset(&self, spec: TaskSpec, seed: u64) -> Result<(EpisodeState, Observation), EnvError> {
        spec.validate()?;
        let digest = episode_digest(&spec.task_id, seed);
        let handle = hex::encode(&digest[..6]);
        let rng_seed = u64::from_le_bytes(digest[8..16].try_into().expect("8 bytes"));
        let text = format!(
            "Task {} ({}):\n{}\n\nAvailable tools:\n{}",
            spec.task_id,
            spec.task_type,
            spec.query,
            self.tools_summary()
        );
        let obs = Observation {
            kind: ObservationKind::TaskPrompt,
            text,
            assets: Vec::new(),
            task: Some(spec.clone()),
            results: Vec::new(),
        };
        let state = EpisodeState {
            store: AssetStore::new(handle.clone()),
            handle,
            transcript: Transcript {
                events: vec![TranscriptEvent::Reset {
                    task: spec.clone(),
                    seed,
                }],
            },
            spec,
            source: String::new(),
            history: Vec::new(),
            tool_log: Vec::new(),
            step_count: 0,
            action_count: 0,
            status: EpisodeStatus::Running,
            seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        };
        Ok((state, obs))
    }

    fn run_call(&self, state: &mut EpisodeState, block: &Block) -> ToolResult {
        let Some(call) = &block.payload else {
            return ToolResult::failure(
                "",
                "invalid tool_call payload: expected {\"name\": ..., \"arguments\": {...}}",
            );
        };
        match execute_call(&self.registry, &self.catalog, &mut state.store, call, &mut state.rng) {
            Ok(r) => r,
            Err(e) => ToolResult::failure(call.name.clone(), e.to_string()),
        }
    }

    /// Applies one action. Every `<tool_call>` is executed in order and its
    /// result spliced in right after it; an `<answer>` ends the episode.
    pub fn step(&self, state: &mut EpisodeState, action: &str) -> Result<(Observation, bool), EnvError> {
        if !state.is_running() {
            return Err(EnvError::Finished {
                handle: state.handle.clone(),
                status: state.status,
            });
        }
        state.transcript.events.push(TranscriptEvent::Step {
            action: action.to_string(),
        });
        state.action_count += 1;

        let (blocks, _) = parse_blocks(action);
        let mut out = String::new();
        let mut cursor = 0;
        let mut results = Vec::new();
        for b in &blocks {
            match b.kind {
                BlockKind::ToolCall => {
                    let res = self.run_call(state, b);
                    out.push_str(&action[cursor..b.span.end]);
                    let _ = write!(out, "\n<tool_result>{}</tool_result>", embed_json(&res));
                    cursor = b.span.end;
                    state.tool_log.push(res.clone());
                    results.push(res);
                    state.step_count += 1;
                    if state.step_count >= state.spec.max_steps {
                        state.status = EpisodeStatus::Truncated;
                        break;
                    }
                }
                BlockKind::Answer => {
                    out.push_str(&action[cursor..b.span.end]);
                    cursor = action.len();
                    state.status = EpisodeStatus::Answered;
                    break;
                }
                _ => {}
            }
        }
        if state.is_running() {
            out.push_str(&action[cursor..]);
            if state.action_count >= state.max_actions() {
                state.status = EpisodeStatus::Truncated;
            }
        }
        if !state.source.is_empty() && !out.is_empty() {
            state.source.push('\n');
        }
        state.source.push_str(&out);
        state.history = parse_blocks(&state.source).0;

        let assets: Vec<AssetSummary> = results
            .iter()
            .flat_map(|r| r.assets.iter().map(AssetSummary::from))
            .collect();
        let mut text = results
            .iter()
            .map(|r| {
                format!(
                    "{}: {}",
                    if r.tool.is_empty() { "tool_call" } else { &r.tool },
                    r.message
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let done = !state.is_running();
        let kind = if done {
            let why = match state.status {
                EpisodeStatus::Answered => "answer received".to_string(),
                _ => format!("step budget exhausted after {} tool calls", state.step_count),
            };
            if !text.is_empty() {
                text.push('\n');
            }
            let _ = write!(text, "episode finished: {why}");
            ObservationKind::Terminal
        } else {
            if text.is_empty() {
                text = "no tool calls in action".into();
            }
            ObservationKind::ToolFeedback
        };
        Ok((
            Observation {
                kind,
                text,
                assets,
                task: None,
                results,
            },
            done,
        ))
    }

    /// Ends a running episode without an answer.
    pub fn truncate(&self, state: &mut EpisodeState, reason: impl Into<String>) {
        if state.is_running() {
            state.status = EpisodeStatus::Truncated;
            state
                .transcript
                .events
                .push(TranscriptEvent::Truncate { reason: reason.into() });
        }
    }

    pub fn finalize(
        &self,
        state: &mut EpisodeState,
        engine: &RewardEngine,
        judger: &dyn Judger,
    ) -> Result<RewardBreakdown, EnvError> {
        if state.is_running() {
            return Err(EnvError::StillRunning {
                handle: state.handle.clone(),
            });
        }
        let reward = engine.score_episode(&state.spec, &state.source, &state.tool_log, &state.store, judger);
        state
            .transcript
            .events
            .push(TranscriptEvent::Finalize { reward: reward.clone() });
        Ok(reward)
    }

    /// Re-runs a transcript from its reset event and scores it afresh.
    pub fn replay(
        &self,
        transcript: &Transcript,
        engine: &RewardEngine,
        judger: &dyn Judger,
    ) -> Result<(EpisodeState, RewardBreakdown), EnvError> {
        let mut events = transcript.events.iter();
        let Some(TranscriptEvent::Reset { task, seed }) = events.next() else {
            return Err(EnvError::Replay("transcript does not start with a reset event".into()));
        };
        let (mut state, _) = self.reset(task.clone(), *seed)?;
        for e in events {
            match e {
                TranscriptEvent::Step { action } => {
                    self.step(&mut state, action)?;
                }
                TranscriptEvent::Truncate { reason } => self.truncate(&mut state, reason.clone()),
                TranscriptEvent::Finalize { .. } => break,
                TranscriptEvent::Reset { .. } => {
                    return Err(EnvError::Replay("second reset event in one transcript".into()));
                }
            }
        }
        if state.is_running() {
            self.truncate(&mut state, "transcript ended before the episode did");
        }
        let reward = self.finalize(&mut state, engine, judger)?;
        Ok((state, reward))
    }
}
