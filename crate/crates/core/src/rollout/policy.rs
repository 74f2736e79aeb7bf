//! Scripted and remote policies.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::env::{Observation, ObservationKind, RequiredModality, TaskSpec};
use crate::reward::JudgerKeywords;

/// Environment variable holding the remote policy URL.
pub const POLICY_URL_ENV: &str = "VCGYM_POLICY_URL";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PolicyError {
    #[error("history does not start with a task prompt")]
    NoTask,
    #[error("remote policy: {0}")]
    Remote(String),
}

/// Maps the observations of an episode so far to the next action text.
/// Must be deterministic given `(history, seed)`.
pub trait Policy: Send + Sync {
    fn generate(&self, history: &[Observation], seed: u64) -> Result<String, PolicyError>;
}

const T2I: &str = "tool_text2image_qwen";
const EDIT: &str = "tool_image_edit_qwen";
const I2V: &str = "tool_image2video_keling";
const MUSIC: &str = "tool_music_suno";
const COMPOSITE: &str = "tool_video_composite";

/// Where an argument's asset id comes from.
#[derive(Debug, Clone, PartialEq)]
enum Input {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
struct WorkStep {
    tool: &'static str,
    args: Map<String, Value>,
    inputs: Vec<(&'static str, Input)>,
    plan_line: String,
    deliverable: bool,
}

impl WorkStep {
    fn new(tool: &'static str, plan_line: String) -> Self {
        Self {
            tool,
            args: Map::new(),
            inputs: Vec::new(),
            plan_line,
            deliverable: false,
        }
    }

    fn arg(mut self, k: &str, v: impl Into<Value>) -> Self {
        self.args.insert(k.to_string(), v.into());
        self
    }

    fn input(mut self, k: &'static str, i: Input) -> Self {
        self.inputs.push((k, i));
        self
    }

    fn deliver(mut self) -> Self {
        self.deliverable = true;
        self
    }
}

/// Defects [`NoisyPolicy`] can inject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Never emit a plan.
    DropPlan,
    /// Break the JSON of the first tool call (later calls are well-formed).
    CorruptJson,
    /// Generate follow-up images from scratch instead of from the reference.
    SkipReferences,
    /// Deliver one fewer item than asked (or one fewer shot).
    WrongCount,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 4] = [
        NoiseMode::DropPlan,
        NoiseMode::CorruptJson,
        NoiseMode::SkipReferences,
        NoiseMode::WrongCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::DropPlan => "drop-plan",
            NoiseMode::CorruptJson => "corrupt-json",
            NoiseMode::SkipReferences => "skip-references",
            NoiseMode::WrongCount => "wrong-count",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tweaks {
    drop_plan: bool,
    corrupt_first_call: bool,
    skip_references: bool,
}

/// Scripted reference workflow: plan every call up front, then issue one
/// call per action, retrying failed calls, and finally answer with the
/// deliverables.
#[derive(Debug, Clone)]
pub struct GoldenPolicy {
    keywords: JudgerKeywords,
    /// Consecutive failures on one step before giving up and answering.
    pub max_retries: usize,
}

impl Default for GoldenPolicy {
    fn default() -> Self {
        Self {
            keywords: JudgerKeywords::builtin(),
            max_retries: 3,
        }
    }
}

impl GoldenPolicy {
    pub fn new(keywords: JudgerKeywords) -> Self {
        Self {
            keywords,
            max_retries: 3,
        }
    }

    fn workflow(&self, task: &TaskSpec, skip_references: bool) -> Vec<WorkStep> {
        let mut steps: Vec<WorkStep> = Vec::new();
        let consistent = task.consistency && !skip_references;
        let mut reference: Option<usize> = None;
        let q = task.query.trim();

        // One image, either drawn afresh or edited from the shared reference.
        let mut image = |steps: &mut Vec<WorkStep>, what: String, deliver: bool| -> usize {
            let step = if task.consistency {
                let r = *reference.get_or_insert_with(|| {
                    steps.push(
                        WorkStep::new(T2I, format!("Generate the reference image with {T2I}."))
                            .arg("prompt", format!("{q} (reference)")),
                    );
                    steps.len() - 1
                });
                if consistent {
                    WorkStep::new(EDIT, format!("Edit the reference image with {EDIT} to create {what}."))
                        .arg("prompt", format!("{q} ({what}, keep the reference subject)"))
                        .input("image", Input::One(r))
                } else {
                    WorkStep::new(T2I, format!("Generate {what} with {T2I}."))
                        .arg("prompt", format!("{q} ({what}, same subject)"))
                }
            } else {
                WorkStep::new(T2I, format!("Generate {what} with {T2I}.")).arg("prompt", format!("{q} ({what})"))
            };
            steps.push(if deliver { step.deliver() } else { step });
            steps.len() - 1
        };

        if task.required_modality != RequiredModality::Video {
            let n = task.required_count.unwrap_or(1);
            for i in 1..=n {
                image(&mut steps, format!("image {i} of {n}"), true);
            }
        }
        if task.required_modality.has_video() {
            let videos = match task.required_modality {
                RequiredModality::Video => task.required_count.unwrap_or(1),
                _ => 1,
            };
            let shots = task.required_storyboards.unwrap_or_else(|| {
                task.required_duration_s
                    .map_or(1, |d| (d / 12.0).ceil().max(1.0) as u32)
            });
            let per_shot = task
                .required_duration_s
                .map(|d| (d / f64::from(shots.max(1))).clamp(3.0, 12.0));
            let audio = self.keywords.is_audio_task(task);
            for v in 1..=videos {
                let mut clips = Vec::new();
                for s in 1..=shots {
                    let key = image(&mut steps, format!("keyframe {s} of {shots} for video {v}"), false);
                    let mut step = WorkStep::new(I2V, format!("Animate keyframe {s} of video {v} with {I2V}."))
                        .arg("prompt", format!("{q} (shot {s} of {shots})"))
                        .input("image", Input::One(key));
                    if let Some(d) = per_shot {
                        step = step.arg("duration", d);
                    }
                    steps.push(step);
                    clips.push(steps.len() - 1);
                }
                let music = audio.then(|| {
                    let total = task
                        .required_duration_s
                        .unwrap_or(f64::from(shots) * per_shot.unwrap_or(5.0));
                    steps.push(
                        WorkStep::new(MUSIC, format!("Create the soundtrack for video {v} with {MUSIC}."))
                            .arg("prompt", format!("soundtrack for: {q}"))
                            .arg("duration", total.clamp(5.0, 300.0)),
                    );
                    steps.len() - 1
                });
                if shots > 1 || music.is_some() {
                    let mut step =
                        WorkStep::new(COMPOSITE, format!("Composite the clips of video {v} with {COMPOSITE}."))
                            .input("videos", Input::Many(clips));
                    if let Some(m) = music {
                        step = step.input("audio", Input::One(m));
                    }
                    steps.push(step.deliver());
                } else if let Some(&only) = clips.first() {
                    steps[only].deliverable = true;
                }
            }
        }
        steps
    }

    fn act(&self, history: &[Observation], task: &TaskSpec, tweaks: Tweaks) -> String {
        let steps = self.workflow(task, tweaks.skip_references);
        let mut outputs: Vec<Vec<String>> = Vec::new();
        let mut failures = 0;
        for obs in &history[1..] {
            for r in &obs.results {
                if outputs.len() >= steps.len() {
                    break;
                }
                if r.success && !r.assets.is_empty() {
                    outputs.push(r.assets.iter().map(|a| a.id.clone()).collect());
                    failures = 0;
                } else {
                    failures += 1;
                }
            }
        }
        let first_action = history.len() == 1;
        let mut out = String::new();
        if outputs.len() >= steps.len() || failures > self.max_retries {
            let delivered: Vec<&str> = steps
                .iter()
                .zip(&outputs)
                .filter(|(s, _)| s.deliverable)
                .flat_map(|(_, ids)| ids.iter().map(String::as_str))
                .collect();
            if first_action && !tweaks.drop_plan {
                out.push_str("<plan>1. Nothing to produce.</plan>\n");
            }
            out.push_str("<think>All planned steps are done.</think>\n");
            out.push_str(&format!("<answer>Delivered: {}</answer>", delivered.join(", ")));
            return out;
        }

        let k = outputs.len();
        let step = &steps[k];
        if first_action {
            out.push_str(&format!(
                "<think>The task asks for {}. I will plan the workflow and then run it step by step.</think>\n",
                describe(task)
            ));
            if !tweaks.drop_plan {
                let lines: Vec<String> = steps
                    .iter()
                    .enumerate()
                    .map(|(i, s)| format!("{}. {}", i + 1, s.plan_line))
                    .collect();
                out.push_str(&format!("<plan>\n{}\n</plan>\n", lines.join("\n")));
            }
        } else {
            let why = if failures > 0 { "Retrying" } else { "Next" };
            out.push_str(&format!("<think>{why}: step {} of {}.</think>\n", k + 1, steps.len()));
        }
        let mut args = step.args.clone();
        for (name, input) in &step.inputs {
            let v = match input {
                Input::One(i) => json!(outputs[*i][0]),
                Input::Many(is) => json!(is.iter().map(|i| outputs[*i][0].clone()).collect::<Vec<_>>()),
            };
            args.insert(name.to_string(), v);
        }
        let mut payload = json!({"name": step.tool, "arguments": args}).to_string();
        if tweaks.corrupt_first_call && first_action {
            payload.pop();
        }
        out.push_str(&format!("<tool_call>{payload}</tool_call>"));
        out
    }
}

fn describe(task: &TaskSpec) -> String {
    let mut parts = vec![format!("{} output", task.required_modality).to_lowercase()];
    if let Some(n) = task.required_count {
        parts.push(format!("{n} deliverable(s)"));
    }
    if let Some(d) = task.required_duration_s {
        parts.push(format!("{d} seconds"));
    }
    if let Some(s) = task.required_storyboards {
        parts.push(format!("{s} shots"));
    }
    parts.join(", ")
}

fn task_of(history: &[Observation]) -> Result<&TaskSpec, PolicyError> {
    history
        .first()
        .filter(|o| o.kind == ObservationKind::TaskPrompt)
        .and_then(|o| o.task.as_ref())
        .ok_or(PolicyError::NoTask)
}

impl Policy for GoldenPolicy {
    fn generate(&self, history: &[Observation], _seed: u64) -> Result<String, PolicyError> {
        let task = task_of(history)?;
        Ok(self.act(history, task, Tweaks::default()))
    }
}

/// [`GoldenPolicy`] with one injected defect.
#[derive(Debug, Clone)]
pub struct NoisyPolicy {
    pub golden: GoldenPolicy,
    pub mode: NoiseMode,
}

impl NoisyPolicy {
    pub fn new(mode: NoiseMode) -> Self {
        Self {
            golden: GoldenPolicy::default(),
            mode,
        }
    }
}

impl Policy for NoisyPolicy {
    fn generate(&self, history: &[Observation], _seed: u64) -> Result<String, PolicyError> {
        let task = task_of(history)?;
        let mut tweaks = Tweaks::default();
        let mut task = task.clone();
        match self.mode {
            NoiseMode::DropPlan => tweaks.drop_plan = true,
            NoiseMode::CorruptJson => tweaks.corrupt_first_call = true,
            NoiseMode::SkipReferences => tweaks.skip_references = true,
            NoiseMode::WrongCount => {
                if let Some(n) = task.required_count {
                    task.required_count = Some(n - 1);
                } else if let Some(s) = task.required_storyboards {
                    task.required_storyboards = Some(s - 1);
                } else if let Some(d) = task.required_duration_s {
                    task.required_duration_s = Some(d / 2.0);
                }
            }
        }
        Ok(self.golden.act(history, &task, tweaks))
    }
}

/// Forwards generation to an HTTP endpoint: `POST {url}` with
/// `{"history": [...], "seed": n}`, answered by `{"action": "..."}`.
pub struct RemotePolicy {
    url: String,
    agent: ureq::Agent,
}

impl RemotePolicy {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into(),
        }
    }

    pub fn from_env(timeout: Duration) -> Option<Self> {
        std::env::var(POLICY_URL_ENV)
            .ok()
            .filter(|u| !u.trim().is_empty())
            .map(|u| Self::new(u, timeout))
    }
}

impl Policy for RemotePolicy {
    fn generate(&self, history: &[Observation], seed: u64) -> Result<String, PolicyError> {
        let body = json!({"history": history, "seed": seed});
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&body)
            .map_err(|e| PolicyError::Remote(e.to_string()))?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| PolicyError::Remote(e.to_string()))?;
        v.get("action")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| PolicyError::Remote("response has no string `action`".into()))
    }
}
