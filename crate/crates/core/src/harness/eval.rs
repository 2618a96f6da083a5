use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::envs::{oracle_action, Env, EnvConfig, Observation};
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, seeded, StdRng};
use crate::sac::Agent;

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
const EVAL_TAG: u64 = 0x6576_616c;

/// Something that picks actions.
pub trait Policy: Sync {
    fn action(&self, env: &Env, obs: &Observation, rng: &mut StdRng) -> Result<Vec<f64>>;
}

/// Deterministic-mode agent policy.
pub struct AgentPolicy<'a>(pub &'a Agent);

impl Policy for AgentPolicy<'_> {
    fn action(&self, _env: &Env, obs: &Observation, rng: &mut StdRng) -> Result<Vec<f64>> {
        self.0.act(&obs.cloud, &obs.state, true, rng)
    }
}

/// Scripted straight-line policy with access to the true target.
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn action(&self, env: &Env, _obs: &Observation, _rng: &mut StdRng) -> Result<Vec<f64>> {
        Ok(oracle_action(&env.state))
    }
}

/// Uniform actions in [-1, 1]^3.
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn action(&self, _env: &Env, _obs: &Observation, rng: &mut StdRng) -> Result<Vec<f64>> {
        Ok((0..3).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub ret: f64,
    pub success: bool,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub success_ci: [f64; 2],
    pub mean_return: f64,
    pub return_ci: [f64; 2],
    pub mean_length: f64,
}

pub fn run_episode(policy: &dyn Policy, config: &EnvConfig, seed: u64) -> Result<EpisodeResult> {
    let (mut env, mut obs) = Env::reset(config.clone(), seed)?;
    let mut rng = seeded(derive_seed(seed, 1));
    let mut ret = 0.0;
    loop {
        let a = policy.action(&env, &obs, &mut rng)?;
        let out = env.step(&a)?;
        ret += out.reward;
        obs = out.obs;
        if out.done || out.truncated {
            return Ok(EpisodeResult { ret, success: out.success, length: env.state.step_count });
        }
    }
}

/// Runs `episodes` evaluation episodes (in parallel) on seeds derived from
/// `seed`, then summarizes with bootstrap intervals.
pub fn evaluate(policy: &dyn Policy, config: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let results: Vec<EpisodeResult> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| run_episode(policy, config, derive_seed(seed ^ EVAL_TAG, i)))
        .collect::<Result<_>>()?;
    summarize(&results, seed)
}

pub fn summarize(results: &[EpisodeResult], seed: u64) -> Result<EvalSummary> {
    let succ: Vec<f64> = results.iter().map(|r| f64::from(u8::from(r.success))).collect();
    let rets: Vec<f64> = results.iter().map(|r| r.ret).collect();
    let n = results.len() as f64;
    Ok(EvalSummary {
        episodes: results.len(),
        success_rate: succ.iter().sum::<f64>() / n,
        success_ci: bootstrap_ci(&succ, BOOTSTRAP_RESAMPLES, seed)?,
        mean_return: rets.iter().sum::<f64>() / n,
        return_ci: bootstrap_ci(&rets, BOOTSTRAP_RESAMPLES, derive_seed(seed, 2))?,
        mean_length: results.iter().map(|r| r.length as f64).sum::<f64>() / n,
    })
}

/// Percentile bootstrap 95% interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Result<[f64; 2]> {
    if values.is_empty() || resamples == 0 {
        return Err(invalid("bootstrap needs values and resamples"));
    }
    let mut rng = seeded(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok([at(0.025), at(0.975)])
}
