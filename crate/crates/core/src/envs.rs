//! Synthetic point-cloud control tasks.
//!
//! The agent is a gray sphere of points moved by 3-D velocity actions. In
//! `PointReach` it must touch a red sphere; in `ColorTouch` a blue distractor
//! sits at an equally likely position and touching it ends the episode with
//! a penalty. Each episode views the scene through a random yaw and shift.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm, preprocess, sub, NormalizationSpec, PipelineConfig, Point3, PointCloud};
use crate::rng::{seeded, StdRng};

pub const ARENA: f64 = 1.0;
pub const SPAWN: f64 = 0.5;
pub const MIN_SEPARATION: f64 = 0.4;
pub const STEP_SIZE: f64 = 0.05;
pub const REACH_RADIUS: f64 = 0.1;
pub const SUCCESS_BONUS: f64 = 10.0;
pub const DISTRACTOR_PENALTY: f64 = -5.0;
pub const SPHERE_RADIUS: f64 = 0.06;
pub const SPHERE_POINTS: usize = 40;
pub const FLOOR_POINTS: usize = 120;
pub const FLOOR_HEIGHT: f64 = -1.0;

pub const GRAY: Point3 = [0.5, 0.5, 0.5];
pub const RED: Point3 = [1.0, 0.0, 0.0];
pub const BLUE: Point3 = [0.0, 0.0, 1.0];
pub const FLOOR_COLOR: Point3 = [0.2, 0.2, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PointReach,
    ColorTouch,
}

impl Task {
    pub fn has_color(self) -> bool {
        matches!(self, Task::ColorTouch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub task: Task,
    pub horizon: usize,
    /// Replace every color with black (ablation).
    pub zero_colors: bool,
    pub max_yaw_deg: f64,
    pub max_shift: f64,
    pub pipeline: PipelineConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::PointReach,
            horizon: 50,
            zero_colors: false,
            max_yaw_deg: 15.0,
            max_shift: 0.02,
            pipeline: PipelineConfig {
                max_points: Some(200),
                normalization: NormalizationSpec::fixed([0.0; 3], 1.0),
                ..PipelineConfig::default()
            },
        }
    }
}

impl EnvConfig {
    pub fn for_task(task: Task) -> Self {
        Self { task, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(self.max_yaw_deg >= 0.0) || !(self.max_shift >= 0.0) {
            return Err(Error::Config("viewpoint jitter bounds must be non-negative".into()));
        }
        self.pipeline.validate()
    }

    pub fn state_dim(&self) -> usize {
        3
    }

    pub fn action_dim(&self) -> usize {
        3
    }
}

/// Rotation about the vertical axis followed by a translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub yaw: f64,
    pub shift: Point3,
}

impl Viewpoint {
    pub fn identity() -> Self {
        Self { yaw: 0.0, shift: [0.0; 3] }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.shift[0], s * p[0] + c * p[1] + self.shift[1], p[2] + self.shift[2]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent_pos: Point3,
    pub target_pos: Point3,
    pub distractor_pos: Option<Point3>,
    pub step_count: usize,
    pub viewpoint: Viewpoint,
    /// Episode ended by success or by touching the distractor.
    pub done: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub cloud: PointCloud,
    pub state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    /// Genuine termination.
    pub done: bool,
    /// Horizon reached without termination.
    pub truncated: bool,
    pub success: bool,
}

fn uniform_box<R: Rng + ?Sized>(rng: &mut R, half: f64) -> Point3 {
    std::array::from_fn(|_| rng.random_range(-half..=half))
}

fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

/// One task instance. All randomness flows from the episode seed.
#[derive(Clone, Debug)]
pub struct Env {
    pub config: EnvConfig,
    pub state: EnvState,
    pub rng: StdRng,
}

impl Env {
    /// Starts an episode.
    pub fn reset(config: EnvConfig, seed: u64) -> Result<(Self, Observation)> {
        config.validate()?;
        let mut rng = seeded(seed);
        let n = if config.task.has_color() { 3 } else { 2 };
        let pos = loop {
            let p: Vec<Point3> = (0..n).map(|_| uniform_box(&mut rng, SPAWN)).collect();
            let ok = (0..n).all(|i| (i + 1..n).all(|j| dist(p[i], p[j]) >= MIN_SEPARATION));
            if ok {
                break p;
            }
        };
        let (target_pos, distractor_pos) = match config.task {
            Task::PointReach => (pos[1], None),
            Task::ColorTouch => {
                if rng.random_bool(0.5) {
                    (pos[1], Some(pos[2]))
                } else {
                    (pos[2], Some(pos[1]))
                }
            }
        };
        let yaw = config.max_yaw_deg.to_radians();
        let viewpoint = Viewpoint {
            yaw: if yaw > 0.0 { rng.random_range(-yaw..=yaw) } else { 0.0 },
            shift: if config.max_shift > 0.0 { uniform_box(&mut rng, config.max_shift) } else { [0.0; 3] },
        };
        let state = EnvState {
            agent_pos: pos[0],
            target_pos,
            distractor_pos,
            step_count: 0,
            viewpoint,
            done: false,
            truncated: false,
        };
        let mut env = Self { config, state, rng };
        let obs = env.observe()?;
        Ok((env, obs))
    }

    pub fn observe(&mut self) -> Result<Observation> {
        let cloud = render(&self.state, &self.config, &mut self.rng)?;
        Ok(Observation { cloud, state: self.state.agent_pos.to_vec() })
    }

    /// Advances one step; components of `action` are clipped to [-1, 1].
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.state.done || self.state.truncated {
            return Err(Error::InvalidState("episode is over; reset first".into()));
        }
        if action.len() != 3 || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument(format!("expected 3 finite action values, got {action:?}")));
        }
        let s = &mut self.state;
        for (p, a) in s.agent_pos.iter_mut().zip(action) {
            *p = (*p + STEP_SIZE * a.clamp(-1.0, 1.0)).clamp(-ARENA, ARENA);
        }
        s.step_count += 1;
        let d = dist(s.agent_pos, s.target_pos);
        let mut reward = -d;
        let mut success = false;
        if d < REACH_RADIUS {
            reward += SUCCESS_BONUS;
            success = true;
            s.done = true;
        } else if s.distractor_pos.is_some_and(|q| dist(s.agent_pos, q) < REACH_RADIUS) {
            reward = DISTRACTOR_PENALTY;
            s.done = true;
        }
        if !s.done && s.step_count >= self.config.horizon {
            s.truncated = true;
        }
        let (done, truncated) = (s.done, s.truncated);
        let obs = self.observe()?;
        Ok(StepOutcome { obs, reward, done, truncated, success })
    }
}

fn sphere<R: Rng + ?Sized>(rng: &mut R, center: Point3, out: &mut Vec<Point3>) {
    for _ in 0..SPHERE_POINTS {
        let v: Point3 = loop {
            let v: Point3 = std::array::from_fn(|_| rng.sample(StandardNormal));
            if norm(v) > 1e-12 {
                break v;
            }
        };
        let n = norm(v);
        out.push(std::array::from_fn(|a| center[a] + SPHERE_RADIUS * v[a] / n));
    }
}

/// Samples the scene, applies the episode viewpoint and preprocesses.
pub fn render<R: Rng + ?Sized>(state: &EnvState, config: &EnvConfig, rng: &mut R) -> Result<PointCloud> {
    let mut pos = Vec::new();
    let mut col = Vec::new();
    let mut add = |center: Point3, color: Point3, pos: &mut Vec<Point3>, rng: &mut R| {
        sphere(rng, center, pos);
        col.extend(std::iter::repeat_n(color, SPHERE_POINTS));
    };
    add(state.agent_pos, GRAY, &mut pos, rng);
    add(state.target_pos, RED, &mut pos, rng);
    if let Some(q) = state.distractor_pos {
        add(q, BLUE, &mut pos, rng);
    }
    for _ in 0..FLOOR_POINTS {
        pos.push([rng.random_range(-ARENA..=ARENA), rng.random_range(-ARENA..=ARENA), FLOOR_HEIGHT]);
        col.push(FLOOR_COLOR);
    }
    let pos = pos.into_iter().map(|p| state.viewpoint.apply(p)).collect();
    let cloud = if config.task.has_color() {
        if config.zero_colors {
            col.iter_mut().for_each(|c| *c = [0.0; 3]);
        }
        PointCloud::with_colors(pos, col)?
    } else {
        PointCloud::new(pos)
    };
    preprocess(&cloud, &config.pipeline, rng)
}

/// Moves straight at the target at full speed.
pub fn oracle_action(state: &EnvState) -> Vec<f64> {
    let d = sub(state.target_pos, state.agent_pos);
    let m = d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m == 0.0 {
        return vec![0.0; 3];
    }
    let s = (m / STEP_SIZE).min(1.0) / m;
    d.iter().map(|x| x * s).collect()
}
