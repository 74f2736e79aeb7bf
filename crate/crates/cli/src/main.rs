//! `vcgym`: batch front end for scoring, filtering, rollouts and diagnostics.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use vcgym_core::env::{TaskSpec, Transcript};
use vcgym_core::reward::{filter_dataset, RewardBreakdown};
use vcgym_core::rollout::{
    export_training_records, run_episode, run_groups, write_atomic, GoldenPolicy, NoiseMode, NoisyPolicy, Policy,
    RemotePolicy, POLICY_URL_ENV,
};
use vcgym_core::theory::{aggregate_kl, improvement_lower_bound, monotonicity_scan, uniform_grid, BoundInputs};
use vcgym_core::trajectory::{
    parse_blocks, parse_trajectory, trajectory_stats, StatsThresholds, Trajectory, TrajectoryRecord,
};

use config::{CliConfig, JudgerKind, Runtime};

const EXIT_INPUT: u8 = 2;
const EXIT_PARTIAL: u8 = 3;
const EXIT_REMOTE: u8 = 4;
const EXIT_USAGE: u8 = 64;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn remote(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_REMOTE,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vcgym",
    version,
    about = "Simulated visual-creation environment: scoring, rollouts and diagnostics"
)]
struct Cli {
    /// JSON configuration file (manifest, catalog, reward config, suite, seed, judger, out dir)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Task suite (JSONL of task specs); defaults to the shipped 24-task suite
    #[arg(long, global = true)]
    suite: Option<PathBuf>,
    /// Output directory for report files
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    judger: Option<JudgerKind>,
    /// golden | noisy:<drop-plan|corrupt-json|skip-references|wrong-count> | remote
    #[arg(long, global = true)]
    policy: Option<String>,
    #[arg(long, global = true)]
    group_size: Option<usize>,
    /// Filter threshold on the total reward
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Human-readable tables instead of JSON
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score trajectory datasets (JSONL of {task_id, source}) against the suite
    Score {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run G rollouts per suite task and export training records
    Rollout {
        /// Run episodes one after another instead of concurrently
        #[arg(long)]
        serial: bool,
    },
    /// Check trajectory datasets for format defects, or the configuration when no file is given
    Validate { files: Vec<PathBuf> },
    /// Split score records into kept.jsonl and dropped.jsonl at the threshold
    Filter { file: PathBuf },
    /// Step and length statistics of trajectory datasets
    Stats {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// List the registered tools
    Tools,
    /// Evaluate the transfer error bound and improvement lower bound
    Bounds {
        file: PathBuf,
        /// Also scan the lower bound over this many C_tool intervals on [0, 1]
        #[arg(long)]
        scan: Option<usize>,
    },
    /// Execute one scripted episode, or replay a recorded transcript
    Run {
        #[arg(long, conflicts_with = "replay")]
        task: Option<String>,
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

struct Ctx {
    cli: Cli,
    cfg: CliConfig,
    rt: Runtime,
}

impl Ctx {
    fn out_dir(&self) -> Option<PathBuf> {
        self.cli.out.clone().or_else(|| self.cfg.out_dir.clone())
    }

    fn seed(&self) -> Result<u64, Failure> {
        self.cli
            .seed
            .or(self.cfg.seed)
            .ok_or_else(|| Failure::usage("a seed is required (--seed or \"seed\" in --config)"))
    }

    fn suite(&self) -> Result<Vec<TaskSpec>, Failure> {
        self.rt.suite(self.cli.suite.as_deref())
    }

    fn policy(&self) -> Result<(Box<dyn Policy>, bool), Failure> {
        let spec = self.cli.policy.as_deref().unwrap_or("golden");
        match spec {
            "golden" => Ok((Box::new(GoldenPolicy::default()), false)),
            "remote" => RemotePolicy::from_env(self.rt.timeout)
                .map(|p| (Box::new(p) as Box<dyn Policy>, true))
                .ok_or_else(|| Failure::remote(format!("--policy remote needs {POLICY_URL_ENV} to be set"))),
            _ => {
                let mode = spec
                    .strip_prefix("noisy:")
                    .and_then(NoiseMode::from_name)
                    .ok_or_else(|| Failure::usage(format!("unknown policy `{spec}`")))?;
                Ok((Box::new(NoisyPolicy::new(mode)), false))
            }
        }
    }

    /// Writes `name` into the output directory, or prints it when there is none.
    fn emit(&self, name: &str, contents: &str) -> Result<(), Failure> {
        match self.out_dir() {
            Some(dir) => write_file(&dir, name, contents),
            None => {
                print!("{contents}");
                Ok(())
            }
        }
    }

    fn require_out(&self, what: &str) -> Result<PathBuf, Failure> {
        self.out_dir().ok_or_else(|| {
            Failure::usage(format!(
                "{what} needs an output directory (--out or \"out_dir\" in --config)"
            ))
        })
    }

    fn json(&self, v: &impl Serialize) -> String {
        if self.cli.pretty {
            serde_json::to_string_pretty(v).expect("serializable") + "\n"
        } else {
            serde_json::to_string(v).expect("serializable") + "\n"
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    write_atomic(&path, contents.as_bytes())
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(&it).expect("serializable"));
        out.push('\n');
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| Failure::input(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// One line of `score` output, also the input of `filter`.
#[derive(Debug, Serialize, Deserialize)]
struct ScoreRecord {
    file: String,
    line: usize,
    task_id: String,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reward: Option<RewardBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn cmd_score(ctx: &Ctx, files: &[PathBuf]) -> Result<u8, Failure> {
    let suite = ctx.suite()?;
    let mut inputs = Vec::new();
    for f in files {
        for (line, rec) in read_jsonl::<TrajectoryRecord>(f)? {
            inputs.push((f.display().to_string(), line, rec));
        }
    }
    let mut missing = 0;
    let records: Vec<ScoreRecord> = inputs
        .into_iter()
        .map(|(file, line, rec)| {
            let task = suite.iter().find(|t| t.task_id == rec.task_id);
            let (reward, error) = match task {
                Some(t) => (
                    Some(ctx.rt.engine.score_static(t, &rec.source, ctx.rt.judger.as_ref())),
                    None,
                ),
                None => {
                    missing += 1;
                    (None, Some(format!("no task `{}` in the suite", rec.task_id)))
                }
            };
            ScoreRecord {
                file,
                line,
                task_id: rec.task_id,
                source: rec.source,
                reward,
                error,
            }
        })
        .collect();
    if ctx.cli.pretty {
        let mut table = format!("{:<24} {:>7} {:>7} {:>7}\n", "task_id", "total", "plan", "fine");
        for r in &records {
            match &r.reward {
                Some(b) => writeln!(
                    table,
                    "{:<24} {:>7.4} {:>7.4} {:>7.4}",
                    r.task_id, b.total, b.plan, b.fine
                ),
                None => writeln!(table, "{:<24} {:>7}", r.task_id, "missing"),
            }
            .expect("string write");
        }
        print!("{table}");
        if let Some(dir) = ctx.out_dir() {
            write_file(&dir, "scores.jsonl", &jsonl(&records))?;
        }
    } else {
        ctx.emit("scores.jsonl", &jsonl(&records))?;
    }
    if missing > 0 {
        eprintln!("{missing} trajectories reference tasks missing from the suite");
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn cmd_filter(ctx: &Ctx, file: &Path) -> Result<u8, Failure> {
    let dir = ctx.require_out("filter")?;
    let threshold = ctx.cli.threshold.unwrap_or(ctx.rt.reward_config.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::usage(format!("threshold {threshold} is outside [0, 1]")));
    }
    let mut scored = Vec::new();
    let mut unscored = 0;
    for (_, rec) in read_jsonl::<ScoreRecord>(file)? {
        match rec.reward.clone() {
            Some(b) => scored.push((rec, b)),
            None => unscored += 1,
        }
    }
    let (kept, dropped) = filter_dataset(scored, threshold);
    write_file(&dir, "kept.jsonl", &jsonl(kept.iter().map(|(r, _)| r)))?;
    write_file(&dir, "dropped.jsonl", &jsonl(dropped.iter().map(|(r, _)| r)))?;
    print!(
        "{}",
        ctx.json(&json!({"threshold": threshold, "kept": kept.len(), "dropped": dropped.len(), "unscored": unscored}))
    );
    Ok(if unscored > 0 { EXIT_PARTIAL } else { 0 })
}

fn cmd_validate(ctx: &Ctx, files: &[PathBuf]) -> Result<u8, Failure> {
    if files.is_empty() {
        let suite = ctx.suite()?;
        print!(
            "{}",
            ctx.json(&json!({
                "tools": ctx.rt.registry.len(),
                "catalog_entries": ctx.rt.env.catalog().entries.len(),
                "tasks": suite.len(),
            }))
        );
        return Ok(0);
    }
    let mut rows = Vec::new();
    let mut defective = 0;
    for f in files {
        for (line, rec) in read_jsonl::<TrajectoryRecord>(f)? {
            let report = parse_trajectory(&rec.source);
            if !report.is_clean() {
                defective += 1;
            }
            rows.push(json!({
                "file": f.display().to_string(),
                "line": line,
                "task_id": rec.task_id,
                "clean": report.is_clean(),
                "defects": report.defects,
            }));
        }
    }
    ctx.emit("validation.jsonl", &jsonl(&rows))?;
    Ok(if defective > 0 { EXIT_PARTIAL } else { 0 })
}

fn cmd_stats(ctx: &Ctx, files: &[PathBuf]) -> Result<u8, Failure> {
    let mut dataset = Vec::new();
    for f in files {
        for (_, rec) in read_jsonl::<TrajectoryRecord>(f)? {
            let t = parse_trajectory(&rec.source).trajectory.unwrap_or_else(|| Trajectory {
                task_id: rec.task_id.clone(),
                source: rec.source.clone(),
                blocks: parse_blocks(&rec.source).0,
            });
            dataset.push(t);
        }
    }
    let stats = trajectory_stats(&dataset, &StatsThresholds::default()).map_err(|e| Failure::input(e.to_string()))?;
    if ctx.cli.pretty {
        let mut s = format!(
            "trajectories        {}\nmean steps          {:.2}\n",
            stats.trajectories, stats.mean_steps
        );
        for (k, v) in &stats.frac_steps_gt {
            let _ = writeln!(s, "steps > {k:<11} {:.1}%", v * 100.0);
        }
        let _ = writeln!(s, "mean tokens (est.)  {:.1}", stats.mean_token_estimate);
        for (k, v) in &stats.frac_tokens_gt {
            let _ = writeln!(s, "tokens > {k:<10} {:.1}%", v * 100.0);
        }
        print!("{s}");
        Ok(0)
    } else {
        ctx.emit("stats.json", &ctx.json(&stats))?;
        Ok(0)
    }
}

fn cmd_tools(ctx: &Ctx) -> Result<u8, Failure> {
    let mut out = String::new();
    for t in ctx.rt.registry.iter() {
        if ctx.cli.pretty {
            let _ = writeln!(out, "{:<30} {:<24} {}", t.name, t.category, t.function);
        } else {
            out.push_str(
                &serde_json::to_string(&json!({
                    "name": t.name,
                    "category": t.category,
                    "function": t.function,
                    "output": t.output.modality,
                }))
                .expect("serializable"),
            );
            out.push('\n');
        }
    }
    print!("{out}");
    Ok(0)
}

fn cmd_bounds(ctx: &Ctx, file: &Path, scan: Option<usize>) -> Result<u8, Failure> {
    let text =
        std::fs::read_to_string(file).map_err(|e| Failure::input(format!("cannot read {}: {e}", file.display())))?;
    let mut doc: serde_json::Map<String, Value> =
        serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", file.display())))?;
    if let Some(list) = doc.remove("divergences") {
        let xs: Vec<f64> = serde_json::from_value(list).map_err(|e| Failure::input(format!("divergences: {e}")))?;
        let d = aggregate_kl(&xs).map_err(|e| Failure::input(e.to_string()))?;
        doc.insert("d_kl".into(), json!(d));
    }
    let mut defaulted = Vec::new();
    for k in ["delta", "alpha", "beta", "kappa"] {
        if !doc.contains_key(k) {
            doc.insert(k.into(), json!(1.0));
            defaulted.push(k);
        }
    }
    if !defaulted.is_empty() {
        eprintln!(
            "note: {} defaulted to 1; these scaling factors are environment-specific and should be supplied",
            defaulted.join(", ")
        );
    }
    let inputs: BoundInputs =
        serde_json::from_value(Value::Object(doc)).map_err(|e| Failure::input(format!("{}: {e}", file.display())))?;
    let report = improvement_lower_bound(&inputs).map_err(|e| Failure::input(e.to_string()))?;
    let mut out = json!({"inputs": inputs, "report": report});
    if let Some(n) = scan {
        let points = monotonicity_scan(&inputs, &uniform_grid(n)).map_err(|e| Failure::input(e.to_string()))?;
        out["scan"] = json!(points);
    }
    ctx.emit("bounds.json", &ctx.json(&out))?;
    Ok(0)
}

fn cmd_rollout(ctx: &Ctx, serial: bool) -> Result<u8, Failure> {
    let seed = ctx.seed()?;
    let dir = ctx.require_out("rollout")?;
    let suite = ctx.suite()?;
    if suite.is_empty() {
        return Err(Failure::input("the task suite is empty"));
    }
    let g = ctx.cli.group_size.unwrap_or(4);
    if g == 0 {
        return Err(Failure::usage("--group-size must be at least 1"));
    }
    let (policy, remote) = ctx.policy()?;
    let groups = run_groups(&ctx.rt.rollout_context(), &suite, policy.as_ref(), g, seed, !serial)
        .map_err(|e| Failure::input(e.to_string()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))?;
    let n = export_training_records(&groups, &dir.join("records.jsonl")).map_err(|e| Failure::input(e.to_string()))?;
    let summary: Vec<Value> = groups
        .iter()
        .map(|gr| {
            json!({
                "task_id": gr.task_id,
                "mean_reward": gr.rewards.iter().sum::<f64>() / gr.rewards.len() as f64,
                "rewards": gr.rewards,
                "advantages": gr.advantages,
            })
        })
        .collect();
    if ctx.cli.pretty {
        let mut s = format!("{:<24} {:>8}  rewards\n", "task_id", "mean");
        for (gr, v) in groups.iter().zip(&summary) {
            let rewards: Vec<String> = gr.rewards.iter().map(|r| format!("{r:.3}")).collect();
            let _ = writeln!(
                s,
                "{:<24} {:>8.4}  {}",
                gr.task_id,
                v["mean_reward"].as_f64().unwrap_or(0.0),
                rewards.join(" ")
            );
        }
        print!("{s}");
    } else {
        print!("{}", jsonl(&summary));
    }
    eprintln!("wrote {n} training records to {}", dir.join("records.jsonl").display());
    let policy_errors = groups
        .iter()
        .flat_map(|g| &g.episodes)
        .filter(|e| e.policy_error.is_some())
        .count();
    if policy_errors > 0 {
        eprintln!("{policy_errors} rollouts were cut short by policy errors");
        if remote {
            return Ok(EXIT_REMOTE);
        }
    }
    Ok(0)
}

fn cmd_run(ctx: &Ctx, task: Option<&str>, replay: Option<&Path>) -> Result<u8, Failure> {
    let rc = ctx.rt.rollout_context();
    if let Some(path) = replay {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
        let transcript = Transcript::from_jsonl(&text).map_err(|e| Failure::input(e.to_string()))?;
        let (_, reward) = rc
            .env
            .replay(&transcript, &rc.engine, rc.judger.as_ref())
            .map_err(|e| Failure::input(e.to_string()))?;
        print!("{}", ctx.json(&reward));
        if let Some(recorded) = transcript.reward() {
            if *recorded != reward {
                eprintln!("replayed reward differs from the recorded one");
                return Ok(EXIT_PARTIAL);
            }
        }
        return Ok(0);
    }
    let seed = ctx.seed()?;
    let suite = ctx.suite()?;
    let spec = match task {
        Some(id) => suite.iter().find(|t| t.task_id == id).ok_or_else(|| Failure {
            code: EXIT_PARTIAL,
            message: format!("no task `{id}` in the suite"),
        })?,
        None => suite.first().ok_or_else(|| Failure::input("the task suite is empty"))?,
    };
    let (policy, remote) = ctx.policy()?;
    let ep = run_episode(&rc, spec, policy.as_ref(), seed).map_err(|e| Failure::input(e.to_string()))?;
    if let Some(dir) = ctx.out_dir() {
        let stem = format!("{}_{seed}", spec.task_id);
        write_file(&dir, &format!("{stem}.transcript.jsonl"), &ep.transcript.to_jsonl())?;
        let (state, _) = rc
            .env
            .replay(&ep.transcript, &rc.engine, rc.judger.as_ref())
            .map_err(|e| Failure::input(e.to_string()))?;
        let record = TrajectoryRecord {
            task_id: spec.task_id.clone(),
            source: state.source,
        };
        write_file(&dir, &format!("{stem}.trajectory.jsonl"), &jsonl([record]))?;
    }
    print!("{}", ctx.json(&ep.reward));
    if let Some(e) = &ep.policy_error {
        eprintln!("episode cut short: {e}");
        return Ok(if remote { EXIT_REMOTE } else { EXIT_PARTIAL });
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    let cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let judger = cli.judger.or(cfg.judger).unwrap_or(JudgerKind::Rule);
    let rt = Runtime::load(&cfg, judger)?;
    if let Some(p) = &cli.suite {
        if !p.is_file() {
            return Err(Failure::input(format!("suite {} does not exist", p.display())));
        }
    }
    let ctx = Ctx { cli, cfg, rt };
    match &ctx.cli.command {
        Command::Score { files } => cmd_score(&ctx, files),
        Command::Rollout { serial } => cmd_rollout(&ctx, *serial),
        Command::Validate { files } => cmd_validate(&ctx, files),
        Command::Filter { file } => cmd_filter(&ctx, file),
        Command::Stats { files } => cmd_stats(&ctx, files),
        Command::Tools => cmd_tools(&ctx),
        Command::Bounds { file, scan } => cmd_bounds(&ctx, file, *scan),
        Command::Run { task, replay } => cmd_run(&ctx, task.as_deref(), replay.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
