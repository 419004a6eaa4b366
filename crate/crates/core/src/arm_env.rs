//! Deterministic planar k-link arms driven by joint torques.
//!
//! Dynamics are unit-inertia joints with viscous damping, integrated with
//! semi-implicit Euler. Observations follow the layout
//! `(ω_1..ω_k, ω̇_1..ω̇_k, x_g, y_g)`; a viewpoint offset of π reports the
//! first joint angle and the goal rotated by 180° about the base.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    if x > -PI && x <= PI {
        x
    } else {
        PI - (PI - x).rem_euclid(2.0 * PI)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub num_links: usize,
    pub link_lengths: Vec<f64>,
    /// Per-joint viscous damping coefficient.
    pub damping: f64,
    pub torque_limit: f64,
    pub dt: f64,
    /// 0 or π.
    pub viewpoint_offset: f64,
    pub max_steps: usize,
    pub goal_radius: f64,
}

impl ArmConfig {
    /// The base 2-link arm: links of 0.1 m, damping 0.5, dt 0.05 s.
    pub fn two_link() -> Self {
        Self {
            num_links: 2,
            link_lengths: vec![0.1, 0.1],
            damping: 0.5,
            torque_limit: 1.0,
            dt: 0.05,
            viewpoint_offset: 0.0,
            max_steps: 100,
            goal_radius: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let reach = self.reach();
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_links == 0 {
            return bad("arm needs at least one link".into());
        }
        if self.link_lengths.len() != self.num_links {
            return bad(format!(
                "{} link lengths for {} links",
                self.link_lengths.len(),
                self.num_links
            ));
        }
        if self.link_lengths.iter().any(|&l| !(l.is_finite() && l >= 0.0)) || reach <= 0.0 {
            return bad("link lengths must be non-negative with positive total".into());
        }
        if !(self.damping.is_finite() && self.damping >= 0.0) {
            return bad(format!("damping {} must be >= 0", self.damping));
        }
        if !(self.torque_limit > 0.0 && self.dt > 0.0) {
            return bad("torque_limit and dt must be positive".into());
        }
        if !(self.goal_radius > 0.0 && self.goal_radius < reach) {
            return bad(format!(
                "goal_radius {} must lie in (0, {reach})",
                self.goal_radius
            ));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        Ok(())
    }

    /// Total arm length.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Observation length `2k + 2`.
    pub fn obs_dim(&self) -> usize {
        2 * self.num_links + 2
    }

    /// Observation length without the two goal coordinates.
    pub fn nongoal_dim(&self) -> usize {
        2 * self.num_links
    }

    pub fn has_viewpoint_offset(&self) -> bool {
        self.viewpoint_offset != 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub angles: Vec<f64>,
    pub velocities: Vec<f64>,
    pub goal: [f64; 2],
    /// Index of the active goal within the task's goal list.
    pub goal_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Action(pub Vec<f64>);

impl Action {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn clamped(&self, limit: f64) -> Self {
        Self(self.0.iter().map(|t| t.clamp(-limit, limit)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    SequentialReach,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub goals: Vec<[f64; 2]>,
    pub task_id: String,
}

impl TaskSpec {
    pub fn reach(task_id: impl Into<String>, goal: [f64; 2]) -> Self {
        Self {
            kind: TaskKind::Reach,
            goals: vec![goal],
            task_id: task_id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.goals.len()) {
            (TaskKind::Reach, 1) => Ok(()),
            (TaskKind::SequentialReach, n) if n >= 2 => Ok(()),
            (kind, n) => Err(Error::InvalidConfig(format!(
                "task {} of kind {kind:?} cannot have {n} goals",
                self.task_id
            ))),
        }
    }
}

/// End-effector position of a planar chain with cumulative joint angles.
pub fn forward_kinematics(angles: &[f64], config: &ArmConfig) -> [f64; 2] {
    let mut cum = 0.0;
    let mut p = [0.0, 0.0];
    for (a, l) in angles.iter().zip(&config.link_lengths) {
        cum += a;
        p[0] += l * cum.cos();
        p[1] += l * cum.sin();
    }
    p
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Uniform joint angles in `(−π, π]`, zero velocities, first goal of the task.
pub fn reset(task: &TaskSpec, config: &ArmConfig, seed: u64) -> ArmState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reset_with(task, config, &mut rng)
}

pub fn reset_with<R: Rng + ?Sized>(task: &TaskSpec, config: &ArmConfig, rng: &mut R) -> ArmState {
    ArmState {
        angles: (0..config.num_links)
            .map(|_| PI - 2.0 * PI * rng.gen::<f64>())
            .collect(),
        velocities: vec![0.0; config.num_links],
        goal: task.goals[0],
        goal_index: 0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: ArmState,
    /// The active goal was reached by this step.
    pub reached_goal: bool,
    /// Goal index after the step (advances on sequential tasks).
    pub goal_index: usize,
    /// The task is complete: its last goal was reached.
    pub done: bool,
}

/// One integration step. Torques are clamped before use.
pub fn step(
    state: &ArmState,
    action: &Action,
    config: &ArmConfig,
    task: &TaskSpec,
) -> Result<StepOutcome> {
    let k = config.num_links;
    if action.0.len() != k || state.angles.len() != k || state.velocities.len() != k {
        return Err(Error::Dimension(format!(
            "step expects {k} joints, got action {} / state {}",
            action.0.len(),
            state.angles.len()
        )));
    }
    if action.0.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("action torque".into()));
    }
    let tau = action.clamped(config.torque_limit);
    let mut velocities = Vec::with_capacity(k);
    let mut angles = Vec::with_capacity(k);
    for i in 0..k {
        let v = state.velocities[i] + config.dt * (tau.0[i] - config.damping * state.velocities[i]);
        velocities.push(v);
        angles.push(wrap_angle(state.angles[i] + config.dt * v));
    }
    let ee = forward_kinematics(&angles, config);
    let reached_goal = distance(ee, state.goal) < config.goal_radius;
    let mut goal_index = state.goal_index;
    let mut goal = state.goal;
    let mut done = false;
    if reached_goal {
        if goal_index + 1 < task.goals.len() {
            goal_index += 1;
            goal = task.goals[goal_index];
        } else {
            done = true;
        }
    }
    Ok(StepOutcome {
        next: ArmState {
            angles,
            velocities,
            goal,
            goal_index,
        },
        reached_goal,
        goal_index,
        done,
    })
}

/// Observation vector `(ω…, ω̇…, x_g, y_g)` as seen from the configured viewpoint.
pub fn observe(state: &ArmState, config: &ArmConfig) -> Vec<f64> {
    let mut obs = Vec::with_capacity(config.obs_dim());
    obs.extend_from_slice(&state.angles);
    obs.extend_from_slice(&state.velocities);
    obs.extend_from_slice(&state.goal);
    if config.has_viewpoint_offset() {
        obs[0] = wrap_angle(obs[0] + config.viewpoint_offset);
        let (s, c) = config.viewpoint_offset.sin_cos();
        let (x, y) = (state.goal[0], state.goal[1]);
        let n = obs.len();
        obs[n - 2] = c * x - s * y;
        obs[n - 1] = s * x + c * y;
    }
    obs
}

/// Evaluation-only reward for the transition that produced `outcome`.
///
/// Reach: `−|EE − goal| − 0.01·|τ|²`. Sequential reach: `+100` when a vertex
/// is reached, `−1` otherwise.
pub fn eval_reward(
    state_before: &ArmState,
    action: &Action,
    outcome: &StepOutcome,
    config: &ArmConfig,
    task: &TaskSpec,
) -> f64 {
    match task.kind {
        TaskKind::Reach => {
            let tau = action.clamped(config.torque_limit);
            let ee = forward_kinematics(&outcome.next.angles, config);
            let ctrl: f64 = tau.0.iter().map(|t| t * t).sum();
            -distance(ee, state_before.goal) - 0.01 * ctrl
        }
        TaskKind::SequentialReach => {
            if outcome.reached_goal {
                100.0
            } else {
                -1.0
            }
        }
    }
}

/// How expert-frame goal coordinates map into the agent frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalFrame {
    Same,
    Rotated180,
}

impl GoalFrame {
    pub fn to_agent(self, goal: [f64; 2]) -> [f64; 2] {
        match self {
            GoalFrame::Same => goal,
            GoalFrame::Rotated180 => [-goal[0], -goal[1]],
        }
    }

    /// Inverse of [`GoalFrame::to_agent`]; both frames are involutions.
    pub fn to_expert(self, goal: [f64; 2]) -> [f64; 2] {
        self.to_agent(goal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 5.0, kd: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioName {
    #[serde(rename = "v-r2r")]
    ViewpointReach,
    #[serde(rename = "v-r2w")]
    ViewpointWrite,
    #[serde(rename = "d-r2r")]
    DynamicsReach,
    #[serde(rename = "m-r2r")]
    MorphologyReach,
    #[serde(rename = "self")]
    SelfDomain,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] = [
        ScenarioName::ViewpointReach,
        ScenarioName::ViewpointWrite,
        ScenarioName::DynamicsReach,
        ScenarioName::MorphologyReach,
        ScenarioName::SelfDomain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::ViewpointReach => "v-r2r",
            ScenarioName::ViewpointWrite => "v-r2w",
            ScenarioName::DynamicsReach => "d-r2r",
            ScenarioName::MorphologyReach => "m-r2r",
            ScenarioName::SelfDomain => "self",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: ScenarioName,
    pub expert: ArmConfig,
    pub agent: ArmConfig,
    pub proxy_tasks: Vec<TaskSpec>,
    pub inference_tasks: Vec<TaskSpec>,
    pub expert_gains: PdGains,
    pub agent_gains: PdGains,
    pub goal_frame: GoalFrame,
}

/// Radius of the proxy and inference reach goals.
pub const GOAL_RING_RADIUS: f64 = 0.18;
/// Radius of the letter-C arc traced by the writing task.
pub const LETTER_C_RADIUS: f64 = 0.15;

fn ring_goal(deg: f64) -> [f64; 2] {
    let a = deg.to_radians();
    [GOAL_RING_RADIUS * a.cos(), GOAL_RING_RADIUS * a.sin()]
}

fn ring_tasks(degrees: &[f64]) -> Vec<TaskSpec> {
    degrees
        .iter()
        .map(|&d| TaskSpec::reach(format!("reach_{:03}", d as u32), ring_goal(d)))
        .collect()
}

/// Six vertices on a 240° arc opening to the right, traced top to bottom.
pub fn letter_c_vertices() -> Vec<[f64; 2]> {
    (0..6)
        .map(|i| {
            let a = (60.0 + 48.0 * i as f64).to_radians();
            [LETTER_C_RADIUS * a.cos(), LETTER_C_RADIUS * a.sin()]
        })
        .collect()
}

/// Episode horizon for the writing scenario. Tracing six vertices under the
/// torque limit takes 100 to 200 steps, so the reach horizon is too short.
pub const WRITE_MAX_STEPS: usize = 300;

pub fn make_scenario(name: ScenarioName) -> Scenario {
    let mut agent = ArmConfig::two_link();
    if name == ScenarioName::ViewpointWrite {
        agent.max_steps = WRITE_MAX_STEPS;
    }
    let expert = match name {
        ScenarioName::ViewpointReach | ScenarioName::ViewpointWrite => ArmConfig {
            viewpoint_offset: PI,
            ..agent.clone()
        },
        ScenarioName::DynamicsReach => ArmConfig {
            damping: 2.0 * agent.damping,
            ..agent.clone()
        },
        ScenarioName::MorphologyReach => ArmConfig {
            num_links: 3,
            link_lengths: vec![0.2 / 3.0; 3],
            ..agent.clone()
        },
        ScenarioName::SelfDomain => agent.clone(),
    };
    let inference_tasks = match name {
        ScenarioName::ViewpointWrite => vec![TaskSpec {
            kind: TaskKind::SequentialReach,
            goals: letter_c_vertices(),
            task_id: "write_c".into(),
        }],
        _ => ring_tasks(&[45.0, 135.0, 225.0, 315.0]),
    };
    let goal_frame = if expert.has_viewpoint_offset() {
        GoalFrame::Rotated180
    } else {
        GoalFrame::Same
    };
    Scenario {
        name,
        expert,
        agent,
        proxy_tasks: ring_tasks(&[0.0, 90.0, 180.0, 270.0]),
        inference_tasks,
        expert_gains: PdGains::default(),
        agent_gains: PdGains::default(),
        goal_frame,
    }
}

pub fn scenario_by_name(name: &str) -> Result<Scenario> {
    Ok(make_scenario(name.parse()?))
}
