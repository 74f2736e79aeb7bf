//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use common::{random_valid_call, raw_tool, with_defaults, Oracle};
use vcgym_core::env::{default_suite, Environment, Transcript};
use vcgym_core::reward::{compose_reward, filter_dataset, Components, RewardConfig, RewardEngine, RuleJudger, Weights};
use vcgym_core::rollout::{
    compute_advantages, export_training_records, run_episode, run_groups, GoldenPolicy, NoiseMode, NoisyPolicy,
    RolloutContext,
};
use vcgym_core::theory::{error_bound, improvement_lower_bound, monotonicity_scan, uniform_grid, BoundInputs};
use vcgym_core::toolsim::{execute_call, AssetStore, MediaCatalog, ToolRegistry};
use vcgym_core::trajectory::{parse_trajectory, serialize_trajectory, synthesize_trajectory, TrajectoryRecord};

const TOOL_TABLE: [&str; 36] = [
    "tool_prompt_refine",
    "tool_video_shot_gen",
    "tool_video_script_gen",
    "tool_storyboard_polish",
    "tool_script_storyboard_merge",
    "tool_text2video_veo",
    "tool_text2image_gemini",
    "tool_text2image_hunyuan",
    "tool_text2image_seed",
    "tool_text2image_gpt",
    "tool_text2image_qwen",
    "tool_image_edit_gemini",
    "tool_image_edit_qwen",
    "tool_image_edit_gpt",
    "tool_image2video_keling",
    "tool_image2video_veo3",
    "tool_music_suno",
    "tool_sound_fx_gen",
    "tool_tts_generation",
    "tool_video_composite",
    "tool_video_postprocess",
    "tool_video_auto_pipeline",
    "tool_beat_detect",
    "tool_video_trim_edit",
    "tool_video_speed_adjust",
    "tool_tts_composite",
    "tool_audio_edit_cut",
    "tool_subtitle_add_text",
    "tool_video_analysis",
    "tool_audio_analysis",
    "tool_image_analysis",
    "tool_search_content",
    "tool_search_inspire",
    "tool_content_summary",
    "tool_task_manager",
    "tool_html_builder",
];

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data/fixtures")
}

fn ctx() -> RolloutContext {
    let env = Environment::builtin();
    let engine = RewardEngine::new(RewardConfig::default(), env.registry().clone()).unwrap();
    let judger = Arc::new(RuleJudger::builtin(env.registry().clone()));
    RolloutContext { env, engine, judger }
}

fn registry_fidelity() -> Outcome {
    let registry = ToolRegistry::builtin();
    let names = registry.names();
    ensure(names == TOOL_TABLE, format!("registry names differ: {names:?}"))?;
    let out = Command::new(env!("CARGO_BIN_EXE_vcgym"))
        .arg("tools")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("`tools` exited with {}", out.status))?;
    let listed: Vec<String> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["name"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    ensure(listed == TOOL_TABLE, format!("`tools` printed {} lines", listed.len()))?;
    Ok("36 tools match the table; `tools` prints 36 lines".into())
}

fn attribute_fidelity() -> Outcome {
    let registry = ToolRegistry::builtin();
    let catalog = MediaCatalog::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut calls, mut attrs, mut mismatches) = (0, 0, 0);
    let mut store = AssetStore::new("acc");
    while calls < 1000 {
        if calls % 250 == 0 {
            store = AssetStore::new(format!("acc{calls}"));
        }
        let call = random_valid_call(&mut rng, &registry, &store);
        let before = store.clone();
        let r = execute_call(&registry, &catalog, &mut store, &call, &mut rng).map_err(|e| e.to_string())?;
        ensure(r.success, format!("{} failed: {}", call.name, r.message))?;
        calls += 1;
        let raw = raw_tool(&call.name);
        let args = with_defaults(&raw, &call.arguments);
        let out = &raw["output"];
        let count = out["count"].as_str().map_or(1.0, |c| Oracle::eval(c, &args, &before));
        if r.assets.len() as f64 != count {
            mismatches += 1;
        }
        for a in &r.assets {
            for (attr, rule) in out["attributes"].as_object().into_iter().flatten() {
                let want = Oracle::eval(rule.as_str().unwrap(), &args, &before);
                let got = match attr.as_str() {
                    "width" => a.width.map(f64::from),
                    "height" => a.height.map(f64::from),
                    "duration" => a.duration,
                    "segments" => a.segments.map(f64::from),
                    _ => None,
                };
                attrs += 1;
                if got != Some(want) {
                    mismatches += 1;
                }
            }
        }
    }
    ensure(mismatches == 0, format!("{mismatches} mismatches"))?;
    Ok(format!("{calls} calls, {attrs} attributes, 0 mismatches"))
}

fn reward_gating() -> Outcome {
    let w = Weights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draw = |rng: &mut ChaCha8Rng| match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random::<f64>(),
    };
    for i in 0..10_000 {
        let c = Components {
            plan: draw(&mut rng),
            format: draw(&mut rng),
            tool: draw(&mut rng),
            result: draw(&mut rng),
            traj: draw(&mut rng),
            cons: draw(&mut rng),
        };
        let b = compose_reward(&c, &w).map_err(|e| e.to_string())?;
        let fine = w.tool * c.tool + w.format * c.format + w.result * c.result + w.traj * c.traj + w.cons * c.cons;
        ensure(
            b.total == c.plan * fine,
            format!("tuple {i}: total {} != {}", b.total, c.plan * fine),
        )?;
        ensure(
            c.plan != 0.0 || b.total == 0.0,
            format!("tuple {i}: plan 0 but total {}", b.total),
        )?;
        let all = [b.plan, b.format, b.tool, b.result, b.traj, b.cons, b.fine, b.total];
        ensure(
            all.iter().all(|x| (0.0..=1.0).contains(x)),
            format!("tuple {i}: out of range"),
        )?;
    }
    Ok("10000 tuples exact, gated and in range".into())
}

fn golden_episode() -> Outcome {
    let ctx = ctx();
    let suite = default_suite();
    let task = &suite[0];
    ensure(
        task.required_count == Some(1) && task.consistency,
        "task_001 is not a 1-image consistency task",
    )?;
    let text = std::fs::read_to_string(fixtures().join("golden_trajectories.jsonl")).map_err(|e| e.to_string())?;
    let rec: TrajectoryRecord = text
        .lines()
        .map(|l| serde_json::from_str::<TrajectoryRecord>(l).unwrap())
        .find(|r| r.task_id == task.task_id)
        .ok_or("no fixture for task_001")?;
    let fixture = ctx.engine.score_static(task, &rec.source, ctx.judger.as_ref());
    ensure(fixture.total == 1.0, format!("fixture total {}", fixture.total))?;
    let live = run_episode(&ctx, task, &GoldenPolicy::default(), 1)
        .map_err(|e| e.to_string())?
        .reward;
    ensure(live.total == 1.0, format!("live golden total {}", live.total))?;
    let mut parts = vec![];
    for mode in NoiseMode::ALL {
        let r = run_episode(&ctx, task, &NoisyPolicy::new(mode), 1)
            .map_err(|e| e.to_string())?
            .reward;
        let (name, value, ok) = match mode {
            NoiseMode::DropPlan => ("plan", r.plan, r.plan == 0.0),
            NoiseMode::CorruptJson => ("format", r.format, r.format <= 0.7),
            NoiseMode::SkipReferences => ("cons", r.cons, r.cons < 1.0),
            NoiseMode::WrongCount => ("result", r.result, r.result < 1.0),
        };
        ensure(ok, format!("{}: {name} = {value}", mode.name()))?;
        parts.push(format!("{} {name}={value:.2}", mode.name()));
    }
    Ok(format!("fixture 1.0, live 1.0; {}", parts.join(", ")))
}

fn grpo_advantages() -> Outcome {
    ensure(compute_advantages(&[1.0; 4]) == [0.0; 4], "[1,1,1,1] not all zero")?;
    let a = compute_advantages(&[0.2, 0.4, 0.6, 0.8]);
    let want = [-1.3416, -0.4472, 0.4472, 1.3416];
    // Exact values: ±3/√5 and ±1/√5.
    let exact = [
        -3.0 / 5f64.sqrt(),
        -1.0 / 5f64.sqrt(),
        1.0 / 5f64.sqrt(),
        3.0 / 5f64.sqrt(),
    ];
    for i in 0..4 {
        ensure(
            (a[i] - exact[i]).abs() < 1e-6,
            format!("a[{i}] = {} vs {}", a[i], exact[i]),
        )?;
        ensure(
            (a[i] - want[i]).abs() < 1e-4,
            format!("a[{i}] = {} vs {}", a[i], want[i]),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let rs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        worst = worst.max(compute_advantages(&rs).iter().sum::<f64>().abs());
    }
    ensure(worst <= 1e-9, format!("max |Σa| = {worst:e}"))?;
    Ok(format!("examples within 1e-6; max |Σa| over 1000 groups = {worst:.1e}"))
}

fn concurrency_isolation() -> Outcome {
    let ctx = ctx();
    let suite = default_suite();
    let policy = NoisyPolicy::new(NoiseMode::CorruptJson);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let par = run_groups(&ctx, &suite, &GoldenPolicy::default(), 4, 42, true).map_err(|e| e.to_string())?;
    let ser = run_groups(&ctx, &suite, &GoldenPolicy::default(), 4, 42, false).map_err(|e| e.to_string())?;
    let n = export_training_records(&par, &dir.path().join("p.jsonl")).map_err(|e| e.to_string())?;
    export_training_records(&ser, &dir.path().join("s.jsonl")).map_err(|e| e.to_string())?;
    ensure(n == 96, format!("{n} records"))?;
    let p = std::fs::read(dir.path().join("p.jsonl")).map_err(|e| e.to_string())?;
    let s = std::fs::read(dir.path().join("s.jsonl")).map_err(|e| e.to_string())?;
    ensure(p == s, "golden exports differ")?;
    let par = run_groups(&ctx, &suite, &policy, 4, 43, true).map_err(|e| e.to_string())?;
    let ser = run_groups(&ctx, &suite, &policy, 4, 43, false).map_err(|e| e.to_string())?;
    export_training_records(&par, &dir.path().join("p2.jsonl")).map_err(|e| e.to_string())?;
    export_training_records(&ser, &dir.path().join("s2.jsonl")).map_err(|e| e.to_string())?;
    let p = std::fs::read(dir.path().join("p2.jsonl")).map_err(|e| e.to_string())?;
    let s = std::fs::read(dir.path().join("s2.jsonl")).map_err(|e| e.to_string())?;
    ensure(p == s, "noisy exports differ")?;
    Ok("24 tasks x G=4: 96 records, concurrent and serial exports byte-identical (two policies)".into())
}

fn bound_evaluators() -> Outcome {
    let base = BoundInputs {
        c_tool: 0.9,
        d_kl: 0.05,
        phi_plan: 0.95,
        r_result: 0.95,
        delta: 1.0,
        alpha: 1.0,
        beta: 1.0,
        kappa: 1.0,
        delta_r_vrt: 0.0,
    };
    let e = error_bound(&base).map_err(|e| e.to_string())?.error_bound;
    // 0.1·1 + 0.05·1 + (1 − 0.9025)·1
    ensure((e - 0.2475).abs() < 1e-12, format!("E = {e}"))?;
    let worked = BoundInputs {
        c_tool: 0.95,
        d_kl: 0.02,
        delta_r_vrt: 0.95,
        ..base
    };
    let lb = improvement_lower_bound(&worked)
        .map_err(|e| e.to_string())?
        .improvement_lower_bound;
    ensure((lb - 0.6899).abs() < 1e-4, format!("lower bound = {lb}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut violations = 0;
    for _ in 0..1000 {
        let i = BoundInputs {
            c_tool: rng.random(),
            d_kl: rng.random_range(0.0..5.0),
            phi_plan: rng.random(),
            r_result: rng.random(),
            delta: rng.random_range(0.0..3.0),
            alpha: rng.random_range(0.0..3.0),
            beta: rng.random_range(0.0..3.0),
            kappa: rng.random_range(1e-6..=1.0),
            delta_r_vrt: rng.random_range(0.0..2.0),
        };
        let scan = monotonicity_scan(&i, &uniform_grid(50)).map_err(|e| e.to_string())?;
        violations += scan.windows(2).filter(|w| w[1].lower_bound < w[0].lower_bound).count();
    }
    ensure(violations == 0, format!("{violations} monotonicity violations"))?;
    Ok(format!("E = {e}, lower bound = {lb:.6}, 1000 scans monotone"))
}

fn parser_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut deletions = 0;
    for i in 0..10_000 {
        let t = synthesize_trajectory(&mut rng, "rt", 8);
        let src = serialize_trajectory(&t);
        let report = parse_trajectory(&src);
        ensure(report.is_clean(), format!("trajectory {i}: {:?}", report.defects))?;
        ensure(
            report.trajectory.as_ref().is_some_and(|p| p.block_equal(&t)),
            format!("trajectory {i} not block-equal"),
        )?;
        for (at, _) in src.match_indices('<') {
            let end = at + src[at..].find('>').unwrap() + 1;
            let broken = format!("{}{}", &src[..at], &src[end..]);
            deletions += 1;
            ensure(
                !parse_trajectory(&broken).is_clean(),
                format!("trajectory {i}: deleting `{}` left no defect", &src[at..end]),
            )?;
        }
    }
    Ok(format!(
        "10000 round trips clean; {deletions} single-tag deletions all defective"
    ))
}

fn replay_determinism() -> Outcome {
    let ctx = ctx();
    let mut transcripts = vec![];
    for (i, task) in default_suite().iter().enumerate() {
        let seed = 500 + i as u64;
        transcripts.push(
            run_episode(&ctx, task, &GoldenPolicy::default(), seed)
                .map_err(|e| e.to_string())?
                .transcript,
        );
        for mode in NoiseMode::ALL {
            let ep = run_episode(&ctx, task, &NoisyPolicy::new(mode), seed).map_err(|e| e.to_string())?;
            transcripts.push(ep.transcript);
        }
    }
    let fixture =
        std::fs::read_to_string(fixtures().join("task_001_golden.transcript.jsonl")).map_err(|e| e.to_string())?;
    transcripts.push(Transcript::from_jsonl(&fixture).map_err(|e| e.to_string())?);
    for (i, t) in transcripts.iter().enumerate() {
        let recorded = t.reward().ok_or(format!("transcript {i} has no reward"))?;
        let reloaded = Transcript::from_jsonl(&t.to_jsonl()).map_err(|e| e.to_string())?;
        let (state, replayed) = ctx
            .env
            .replay(&reloaded, &ctx.engine, ctx.judger.as_ref())
            .map_err(|e| e.to_string())?;
        ensure(&replayed == recorded, format!("transcript {i}: reward differs"))?;
        let bits = |b: &vcgym_core::reward::RewardBreakdown| {
            [b.plan, b.format, b.tool, b.result, b.traj, b.cons, b.fine, b.total].map(f64::to_bits)
        };
        ensure(
            bits(&replayed) == bits(recorded),
            format!("transcript {i}: bits differ"),
        )?;
        let (again, _) = ctx
            .env
            .replay(t, &ctx.engine, ctx.judger.as_ref())
            .map_err(|e| e.to_string())?;
        ensure(again.source == state.source, format!("transcript {i}: history differs"))?;
        ensure(
            again.store.iter().eq(state.store.iter()),
            format!("transcript {i}: store differs"),
        )?;
    }
    Ok(format!("{} transcripts replay bit-identically", transcripts.len()))
}

fn filter_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = Weights::default();
    let mut items = vec![];
    for i in 0..100 {
        let mut b = compose_reward(
            &Components {
                plan: rng.random(),
                format: rng.random(),
                tool: rng.random(),
                result: rng.random(),
                traj: rng.random(),
                cons: rng.random(),
            },
            &w,
        )
        .unwrap();
        match i % 10 {
            0 => b.total = 0.6,
            1 => b.total = 0.6f64.next_down(),
            2 => b.total = 1.0,
            3 => b.total = 0.0,
            _ => {}
        }
        items.push((format!("traj_{i:03}"), b));
    }
    let oracle_kept: Vec<String> = items
        .iter()
        .filter(|(_, b)| b.total >= 0.6)
        .map(|(id, _)| id.clone())
        .collect();
    let (kept, dropped) = filter_dataset(items.clone(), 0.6);
    let lib_kept: Vec<String> = kept.iter().map(|(id, _)| id.clone()).collect();
    ensure(lib_kept == oracle_kept, "library partition differs from oracle")?;
    ensure(kept.len() + dropped.len() == 100, "items lost")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scores: String = items
        .iter()
        .enumerate()
        .map(|(i, (id, b))| {
            json!({"file": "synthetic", "line": i + 1, "task_id": id, "source": "", "reward": b}).to_string() + "\n"
        })
        .collect();
    let input = dir.path().join("scores.jsonl");
    std::fs::write(&input, scores).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_vcgym"))
        .args(["filter", "--threshold", "0.6", "--out"])
        .arg(dir.path())
        .arg(&input)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("`filter` exited with {}", out.status))?;
    let ids = |name: &str| -> Vec<String> {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<Value>(l).unwrap()["task_id"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    ensure(ids("kept.jsonl") == oracle_kept, "CLI kept set differs from oracle")?;
    ensure(
        ids("dropped.jsonl").len() == 100 - oracle_kept.len(),
        "CLI dropped count differs",
    )?;
    Ok(format!(
        "{} kept, {} dropped; library and CLI match the oracle",
        oracle_kept.len(),
        100 - oracle_kept.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("tool-registry fidelity", Duration::from_secs(1), registry_fidelity),
        ("attribute-fidelity oracle", Duration::from_secs(10), attribute_fidelity),
        ("reward gating", Duration::from_secs(5), reward_gating),
        ("golden episode", Duration::from_secs(5), golden_episode),
        ("GRPO advantages", Duration::from_secs(2), grpo_advantages),
        ("concurrency isolation", Duration::from_secs(60), concurrency_isolation),
        ("bound evaluators", Duration::from_secs(5), bound_evaluators),
        ("parser round-trip", Duration::from_secs(10), parser_round_trip),
        ("replay determinism", Duration::from_secs(5), replay_determinism),
        ("filter pipeline", Duration::from_secs(2), filter_pipeline),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; took {took:.2?}, budget {budget:?}")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name} ({took:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2}. {name} ({took:.2?}): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
