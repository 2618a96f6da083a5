//! Which losses reach which parameter groups.

use pprl::autodiff::{Gradients, Graph, ParamId};
use pprl::geometry::PointCloud;
use pprl::rng::{seeded, StdRng};
use pprl::sac::{Agent, AgentConfig, AgentSpec, Transition};
use pprl::tokenizer::TokenizerWidths;
use pprl::transformer::EncoderConfig;
use rand::Rng;

use super::Outcome;

fn spec(color: bool) -> AgentSpec {
    AgentSpec {
        encoder: EncoderConfig {
            patches: 6,
            patch_size: 4,
            dim: 12,
            heads: 2,
            layers: 2,
            color,
            tokenizer: TokenizerWidths { first: [8, 8], second_hidden: 8 },
            ..EncoderConfig::default()
        },
        sac: AgentConfig { batch_size: 4, hidden: 16, hidden_layers: 2, ..AgentConfig::default() },
        aux: true,
        state_dim: 3,
        action_dim: 3,
    }
}

fn cloud(rng: &mut StdRng, color: bool) -> PointCloud {
    let m = rng.random_range(8..40);
    let pts = (0..m).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
    if color {
        PointCloud::with_colors(pts, (0..m).map(|_| [0, 1, 2].map(|_| rng.random())).collect()).unwrap()
    } else {
        PointCloud::new(pts)
    }
}

fn transitions(rng: &mut StdRng, n: usize, color: bool) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            obs: cloud(rng, color),
            state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            reward: rng.random_range(-1.0..1.0),
            done: rng.random_bool(0.2),
            next_obs: cloud(rng, color),
            next_state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn max_abs(g: &Gradients, ids: &[ParamId]) -> f64 {
    g.max_abs(ids.iter().copied())
}

/// Checks routing on `trials` random agents and batches.
pub fn run(trials: usize, seed: u64) -> Outcome {
    let mut rng = seeded(seed);
    let mut failures = Vec::new();
    for trial in 0..trials {
        let color = trial % 2 == 1;
        let mut agent = Agent::new(spec(color), rng.random()).unwrap();
        let batch = agent.prepare_batch(&transitions(&mut rng, 4, color)).unwrap();
        let y = agent.critic_target(&batch).unwrap();
        let mut g = Graph::new();
        let terms = agent.losses(&mut g, &batch, &y).unwrap();
        let encoder = agent.model.encoder_params();
        let decoder = agent.model.decoder_params();
        let actor = agent.actor.params();

        let ga = g.backward(terms.actor).unwrap();
        if max_abs(&ga, &encoder) != 0.0 {
            failures.push(format!("trial {trial}: actor loss reached the encoder"));
        }
        if max_abs(&ga, &actor) == 0.0 {
            failures.push(format!("trial {trial}: actor loss has no actor gradient"));
        }
        let gc = g.backward(terms.critic).unwrap();
        if max_abs(&gc, &encoder) == 0.0 {
            failures.push(format!("trial {trial}: critic loss has no encoder gradient"));
        }
        if max_abs(&gc, &actor) != 0.0 {
            failures.push(format!("trial {trial}: critic loss reached the actor"));
        }
        let gx = g.backward(terms.aux.expect("aux enabled")).unwrap();
        if max_abs(&gx, &decoder) == 0.0 {
            failures.push(format!("trial {trial}: aux loss has no decoder gradient"));
        }
        if max_abs(&gx, &actor) != 0.0 {
            failures.push(format!("trial {trial}: aux loss reached the actor"));
        }
    }
    Outcome::from_failures(format!("{trials} random agents"), failures)
}
