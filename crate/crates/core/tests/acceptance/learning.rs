//! Criteria that train models: reconstruction, determinism, and the
//! reinforcement-learning runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pprl::harness::{checkpoint_dir, latest_checkpoint, load_run_checkpoint, train, ReconTrainConfig, RunConfig};
use pprl::tokenizer::TokenizerWidths;
use pprl::transformer::EncoderConfig;
use serde_json::Value;

use crate::suites::Outcome;

/// Budget for one reinforcement-learning run.
const RUN_BUDGET_SECS: f64 = 45.0 * 60.0;
const RECON_BUDGET_SECS: f64 = 10.0 * 60.0;
const SEEDS: [u64; 4] = [0, 1, 2, 3];

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn preset(name: &str) -> RunConfig {
    let path = configs_dir().join(format!("{name}.toml"));
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

pub fn reconstruction() -> Outcome {
    let encoder = preset("point_reach").encoder;
    let cfg = ReconTrainConfig { encoder, steps: 2000, shapes: 32, ..ReconTrainConfig::default() };
    let started = Instant::now();
    let (_, _, curve) = match pprl::harness::train_reconstruction(&cfg) {
        Ok(r) => r,
        Err(e) => return Outcome::fail(e.to_string()),
    };
    let secs = started.elapsed().as_secs_f64();
    let ratio = curve.last / curve.initial;
    Outcome::check(
        ratio <= 0.5 && secs < RECON_BUDGET_SECS,
        format!(
            "mean Chamfer {:.4} -> {:.4} after {} steps ({:.0}% reduction, {secs:.0}s)",
            curve.initial,
            curve.last,
            cfg.steps,
            100.0 * (1.0 - ratio)
        ),
    )
}

fn tiny_run(dir: &Path) -> RunConfig {
    let mut cfg = preset("point_reach");
    cfg.total_steps = 1000;
    cfg.random_steps = 200;
    cfg.eval_interval = 500;
    cfg.eval_episodes = 5;
    cfg.keep_checkpoints = true;
    cfg.output_dir = dir.to_path_buf();
    cfg.encoder = EncoderConfig {
        patches: 8,
        patch_size: 8,
        dim: 12,
        heads: 2,
        layers: 2,
        tokenizer: TokenizerWidths { first: [8, 16], second_hidden: 16 },
        ..cfg.encoder
    };
    cfg.sac.batch_size = 16;
    cfg.sac.hidden = 32;
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn determinism_and_resume() -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        if let Err(e) = train(&tiny_run(dir), None) {
            return Outcome::fail(e.to_string());
        }
    }
    let metrics_a = read(&a.join("metrics.csv"));
    let identical = metrics_a == read(&b.join("metrics.csv"));

    // Resume a copy of run `a` from its step-500 checkpoint.
    fs::create_dir_all(checkpoint_dir(&c)).unwrap();
    fs::copy(a.join("metrics.csv"), c.join("metrics.csv")).unwrap();
    let midway = checkpoint_dir(&a).join("step_500.ckpt");
    if let Err(e) = train(&tiny_run(&c), Some(&midway)) {
        return Outcome::fail(e.to_string());
    }
    let resumed_metrics = metrics_a == read(&c.join("metrics.csv"));
    let agent = |dir: &Path| load_run_checkpoint(&latest_checkpoint(dir)).unwrap().0.to_bytes(None);
    let resumed_agent = agent(&a) == agent(&c);
    let rows = String::from_utf8_lossy(&metrics_a).lines().count() - 1;
    Outcome::check(
        identical && resumed_metrics && resumed_agent,
        format!(
            "1000 steps, {rows} metric rows: repeat identical = {identical}, resumed metrics identical = {resumed_metrics}, resumed parameters identical = {resumed_agent}"
        ),
    )
}

/// Evaluation history of one finished training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub variant: &'static str,
    pub seed: u64,
    pub success: Vec<(u64, f64)>,
    pub elapsed_secs: f64,
}

impl RunResult {
    pub fn best(&self) -> f64 {
        self.success.iter().map(|s| s.1).fold(0.0, f64::max)
    }

    pub fn steps_to(&self, rate: f64) -> Option<u64> {
        self.success.iter().find(|s| s.1 >= rate).map(|s| s.0)
    }
}

pub const VARIANTS: [&str; 4] = ["point_reach", "color_touch", "color_touch_zeroed", "color_touch_noaux"];

fn runs_root() -> PathBuf {
    std::env::var_os("PPRL_RL_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-runs"))
}

fn stored_config_matches(dir: &Path, cfg: &RunConfig) -> bool {
    let Ok(text) = fs::read_to_string(dir.join("manifest.json")) else { return false };
    let Ok(manifest) = serde_json::from_str::<Value>(&text) else { return false };
    manifest.get("config") == Some(&serde_json::to_value(cfg).expect("config serializes"))
}

fn parse_summary(variant: &'static str, seed: u64, text: &str) -> Option<RunResult> {
    let v: Value = serde_json::from_str(text).ok()?;
    let success = v["evals"]
        .as_array()?
        .iter()
        .map(|e| Some((e["step"].as_u64()?, e["summary"]["success_rate"].as_f64()?)))
        .collect::<Option<Vec<_>>>()?;
    Some(RunResult { variant, seed, success, elapsed_secs: v["elapsed_secs"].as_f64()? })
}

/// Trains (or reuses) every variant for every seed.
pub fn rl_runs() -> Vec<RunResult> {
    let root = runs_root();
    let mut out = Vec::new();
    for variant in VARIANTS {
        for seed in SEEDS {
            let mut cfg = preset(variant);
            cfg.seed = seed;
            cfg.output_dir = root.join(variant).join(format!("seed_{seed}"));
            let dir = cfg.output_dir.clone();
            let summary = dir.join("summary.json");
            let fresh = !stored_config_matches(&dir, &cfg);
            if fresh || !summary.exists() {
                let latest = latest_checkpoint(&dir);
                let resume = (!fresh && latest.exists()).then_some(latest.as_path());
                if let Err(e) = train(&cfg, resume) {
                    panic!("{variant} seed {seed}: {e}");
                }
            }
            let text = fs::read_to_string(&summary).expect("summary written");
            let run = parse_summary(variant, seed, &text).expect("summary parses");
            eprintln!(
                "  {} seed {}: best success {:.2}, final {:.2}, {:.0}s",
                run.variant,
                run.seed,
                run.best(),
                run.success.last().map_or(0.0, |s| s.1),
                run.elapsed_secs
            );
            out.push(run);
        }
    }
    out
}

fn of<'a>(runs: &'a [RunResult], variant: &str) -> Vec<&'a RunResult> {
    runs.iter().filter(|r| r.variant == variant).collect()
}

fn majority(runs: &[&RunResult], pass: impl Fn(&RunResult) -> bool) -> (usize, bool) {
    let n = runs.iter().filter(|r| pass(r) && r.elapsed_secs < RUN_BUDGET_SECS).count();
    (n, 2 * n > runs.len())
}

fn rates(runs: &[&RunResult]) -> String {
    runs.iter().map(|r| format!("{:.2}", r.best())).collect::<Vec<_>>().join("/")
}

pub fn rl_learning(runs: &[RunResult]) -> Outcome {
    let reach = of(runs, "point_reach");
    let color = of(runs, "color_touch");
    let zeroed = of(runs, "color_touch_zeroed");
    let (n_reach, ok_reach) = majority(&reach, |r| r.best() >= 0.9);
    let (n_color, ok_color) = majority(&color, |r| r.best() >= 0.8);
    let (n_zero, ok_zero) = majority(&zeroed, |r| r.best() <= 0.55);
    let slowest = runs.iter().map(|r| r.elapsed_secs).fold(0.0, f64::max);
    Outcome::check(
        ok_reach && ok_color && ok_zero,
        format!(
            "best eval success per seed: reach {} ({n_reach}/4 >= 0.90), color {} ({n_color}/4 >= 0.80), zeroed colors {} ({n_zero}/4 <= 0.55); slowest run {:.0} min",
            rates(&reach),
            rates(&color),
            rates(&zeroed),
            slowest / 60.0
        ),
    )
}

fn median_steps(runs: &[&RunResult]) -> f64 {
    let mut s: Vec<f64> = runs.iter().map(|r| r.steps_to(0.8).map_or(f64::INFINITY, |v| v as f64)).collect();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn aux_benefit(runs: &[RunResult]) -> Outcome {
    let with = median_steps(&of(runs, "color_touch"));
    let without = median_steps(&of(runs, "color_touch_noaux"));
    Outcome::check(
        with.is_finite() && with <= without,
        format!("median steps to 80% success: with aux {with}, without aux {without}"),
    )
}
