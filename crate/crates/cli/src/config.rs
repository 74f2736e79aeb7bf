//! Configuration file and the loaded runtime context.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use vcgym_core::env::{default_suite, load_suite, Environment, TaskSpec};
use vcgym_core::reward::{Judger, RemoteJudger, RewardConfig, RewardEngine, RuleJudger, JUDGER_URL_ENV};
use vcgym_core::rollout::RolloutContext;
use vcgym_core::toolsim::{load_registry, MediaCatalog, ToolRegistry};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum JudgerKind {
    Rule,
    Remote,
}

/// `--config` document. Relative paths resolve against the file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub tools_manifest: Option<PathBuf>,
    pub media_catalog: Option<PathBuf>,
    pub reward_config: Option<PathBuf>,
    pub suite: Option<PathBuf>,
    pub seed: Option<u64>,
    pub judger: Option<JudgerKind>,
    pub out_dir: Option<PathBuf>,
    /// Seconds before a remote call gives up.
    pub remote_timeout_s: Option<f64>,
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let mut cfg: CliConfig =
            serde_json::from_str(&read(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.tools_manifest,
            &mut cfg.media_catalog,
            &mut cfg.reward_config,
            &mut cfg.suite,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Everything a command needs, loaded and checked up front.
pub struct Runtime {
    pub registry: Arc<ToolRegistry>,
    pub env: Environment,
    pub reward_config: RewardConfig,
    pub engine: RewardEngine,
    pub judger: Arc<dyn Judger>,
    pub suite_path: Option<PathBuf>,
    pub timeout: Duration,
}

impl Runtime {
    pub fn load(cfg: &CliConfig, judger: JudgerKind) -> Result<Self, Failure> {
        let registry = match &cfg.tools_manifest {
            Some(p) => load_registry(&read(p)?).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?,
            None => ToolRegistry::builtin(),
        };
        let registry = Arc::new(registry);
        let catalog = match &cfg.media_catalog {
            Some(p) => {
                let c =
                    MediaCatalog::from_json(&read(p)?).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new("."));
                c.verify_files(base).map_err(|e| Failure::input(e.to_string()))?;
                c
            }
            None => MediaCatalog::builtin(),
        };
        catalog
            .ensure_covers(registry.modalities())
            .map_err(|e| Failure::input(e.to_string()))?;
        let reward_config: RewardConfig = match &cfg.reward_config {
            Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?,
            None => RewardConfig::default(),
        };
        let engine = RewardEngine::new(reward_config, registry.clone()).map_err(|e| Failure::input(e.to_string()))?;
        let timeout = Duration::from_secs_f64(cfg.remote_timeout_s.unwrap_or(30.0).max(0.001));
        let rule = RuleJudger::builtin(registry.clone());
        let judger: Arc<dyn Judger> = match judger {
            JudgerKind::Rule => Arc::new(rule),
            JudgerKind::Remote => Arc::new(
                RemoteJudger::from_env(timeout, rule)
                    .ok_or_else(|| Failure::remote(format!("--judger remote needs {JUDGER_URL_ENV} to be set")))?,
            ),
        };
        if let Some(p) = &cfg.suite {
            if !p.is_file() {
                return Err(Failure::input(format!("suite {} does not exist", p.display())));
            }
        }
        Ok(Self {
            env: Environment::new(registry.clone(), Arc::new(catalog)),
            registry,
            reward_config,
            engine,
            judger,
            suite_path: cfg.suite.clone(),
            timeout,
        })
    }

    /// The configured suite, or the shipped one.
    pub fn suite(&self, override_path: Option<&Path>) -> Result<Vec<TaskSpec>, Failure> {
        match override_path.or(self.suite_path.as_deref()) {
            Some(p) => load_suite(p).map_err(|e| Failure::input(format!("{}: {e}", p.display()))),
            None => Ok(default_suite()),
        }
    }

    pub fn rollout_context(&self) -> RolloutContext {
        RolloutContext {
            env: self.env.clone(),
            engine: self.engine.clone(),
            judger: self.judger.clone(),
        }
    }
}
