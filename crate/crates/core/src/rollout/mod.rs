//! Group rollouts, group-relative advantages and training-record export.

mod policy;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvError, Environment, TaskSpec, Transcript};
use crate::reward::{Judger, RewardBreakdown, RewardEngine};

pub use policy::{GoldenPolicy, NoiseMode, NoisyPolicy, Policy, PolicyError, RemotePolicy, POLICY_URL_ENV};

/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Shared, read-only pieces every rollout needs.
#[derive(Clone)]
pub struct RolloutContext {
    pub env: Environment,
    pub engine: RewardEngine,
    pub judger: Arc<dyn Judger>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub transcript: Transcript,
    pub reward: RewardBreakdown,
    /// Set when the policy failed and the episode was cut short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub episodes: Vec<Episode>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.episodes.len()
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("group size must be at least 1")]
    EmptyGroup,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
}

/// `aᵢ = (rᵢ − mean) / (std + ε)` with the population standard deviation.
/// Groups whose rewards are all equal get all-zero advantages.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    let first = rewards[0];
    if rewards.iter().all(|r| *r == first) {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let denom = var.sqrt() + ADVANTAGE_EPS;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Runs one episode to completion. A policy error truncates the episode,
/// which is then scored on what it produced.
pub fn run_episode(ctx: &RolloutContext, spec: &TaskSpec, policy: &dyn Policy, seed: u64) -> Result<Episode, EnvError> {
    let (mut state, obs) = ctx.env.reset(spec.clone(), seed)?;
    let mut history = vec![obs];
    let mut policy_error = None;
    while state.is_running() {
        match policy.generate(&history, seed) {
            Ok(action) => {
                let (obs, _) = ctx.env.step(&mut state, &action)?;
                history.push(obs);
            }
            Err(e) => {
                ctx.env.truncate(&mut state, format!("policy error: {e}"));
                policy_error = Some(e.to_string());
            }
        }
    }
    let reward = ctx.env.finalize(&mut state, &ctx.engine, ctx.judger.as_ref())?;
    Ok(Episode {
        seed,
        transcript: state.transcript().clone(),
        reward,
        policy_error,
    })
}

fn assemble(task_id: &str, episodes: Vec<Episode>) -> RolloutGroup {
    let rewards: Vec<f64> = episodes.iter().map(|e| e.reward.total).collect();
    RolloutGroup {
        task_id: task_id.to_string(),
        advantages: compute_advantages(&rewards),
        rewards,
        episodes,
    }
}

/// One group with a (possibly different) policy per rollout; rollout `i`
/// uses seed `base_seed + i`.
pub fn run_group_with(
    ctx: &RolloutContext,
    spec: &TaskSpec,
    policies: &[&dyn Policy],
    base_seed: u64,
    parallel: bool,
) -> Result<RolloutGroup, RolloutError> {
    if policies.is_empty() {
        return Err(RolloutError::EmptyGroup);
    }
    let run = |(i, p): (usize, &&dyn Policy)| run_episode(ctx, spec, *p, base_seed.wrapping_add(i as u64));
    let episodes: Result<Vec<_>, _> = if parallel {
        policies.par_iter().enumerate().map(run).collect()
    } else {
        policies.iter().enumerate().map(run).collect()
    };
    Ok(assemble(&spec.task_id, episodes?))
}

pub fn run_group(
    ctx: &RolloutContext,
    spec: &TaskSpec,
    policy: &dyn Policy,
    group_size: usize,
    base_seed: u64,
    parallel: bool,
) -> Result<RolloutGroup, RolloutError> {
    let policies = vec![policy; group_size];
    run_group_with(ctx, spec, &policies, base_seed, parallel)
}

/// One group per task. With `parallel`, every episode of every group runs
/// concurrently; results are identical to a serial run.
pub fn run_groups(
    ctx: &RolloutContext,
    specs: &[TaskSpec],
    policy: &dyn Policy,
    group_size: usize,
    base_seed: u64,
    parallel: bool,
) -> Result<Vec<RolloutGroup>, RolloutError> {
    if group_size == 0 {
        return Err(RolloutError::EmptyGroup);
    }
    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|t| (0..group_size).map(move |i| (t, base_seed.wrapping_add(i as u64))))
        .collect();
    let run = |&(t, seed): &(usize, u64)| run_episode(ctx, &specs[t], policy, seed);
    let episodes: Vec<Episode> = if parallel {
        jobs.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    };
    let mut it = episodes.into_iter();
    Ok(specs
        .iter()
        .map(|s| assemble(&s.task_id, it.by_ref().take(group_size).collect()))
        .collect())
}

/// One line of the training export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task_id: String,
    pub seed: u64,
    pub transcript: Transcript,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

pub fn training_records(groups: &[RolloutGroup]) -> Vec<TrainingRecord> {
    groups
        .iter()
        .flat_map(|g| {
            g.episodes.iter().zip(&g.advantages).map(|(e, a)| TrainingRecord {
                task_id: g.task_id.clone(),
                seed: e.seed,
                transcript: e.transcript.clone(),
                reward: e.reward.clone(),
                advantage: *a,
            })
        })
        .collect()
}

pub fn records_to_jsonl(records: &[TrainingRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(contents)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Writes one JSONL record per rollout and returns the record count.
pub fn export_training_records(groups: &[RolloutGroup], destination: &Path) -> Result<usize, RolloutError> {
    let records = training_records(groups);
    write_atomic(destination, records_to_jsonl(&records).as_bytes()).map_err(|e| RolloutError::Write {
        path: destination.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok(records.len())
}

pub fn load_training_records(path: &Path) -> Result<Vec<TrainingRecord>, RolloutError> {
    let read_err = |reason: String| RolloutError::Read {
        path: path.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| read_err(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Replays a record's transcript and returns the fresh reward.
pub fn rescore(ctx: &RolloutContext, record: &TrainingRecord) -> Result<RewardBreakdown, EnvError> {
    ctx.env
        .replay(&record.transcript, &ctx.engine, ctx.judger.as_ref())
        .map(|(_, r)| r)
}
