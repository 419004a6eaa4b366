//! Scripted PD experts and demonstration generation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm_env::{
    distance, forward_kinematics, observe, reset_with, step, wrap_angle, Action, ArmConfig,
    ArmState, PdGains, TaskSpec,
};
use crate::error::{Error, Result};
use crate::seeding::child_seed;
use crate::traj::{Domain, Trajectory};

/// Minimum fraction of episodes that must reach the goal.
pub const MIN_SUCCESS_RATE: f64 = 0.95;

const IK_TOL: f64 = 1e-6;
const IK_MAX_ITERS: usize = 500;
const IK_DAMPING: f64 = 1e-2;

/// Joint angles placing the end effector at `goal`.
///
/// Two links use the closed form with the elbow bent counter-clockwise
/// (`ω_2 ≥ 0`). Longer chains run damped least squares from a uniformly bent
/// pose, which keeps the solution branch consistent across goals.
pub fn inverse_kinematics(goal: [f64; 2], config: &ArmConfig) -> Result<Vec<f64>> {
    let r = goal[0].hypot(goal[1]);
    let reach = config.reach();
    let unreachable = || Error::Unreachable { goal, reach };
    if !r.is_finite() || r > reach + 1e-12 {
        return Err(unreachable());
    }
    match config.num_links {
        1 => {
            if (r - reach).abs() > 1e-9 {
                return Err(unreachable());
            }
            Ok(vec![goal[1].atan2(goal[0])])
        }
        2 => {
            let (l1, l2) = (config.link_lengths[0], config.link_lengths[1]);
            if r < (l1 - l2).abs() - 1e-12 {
                return Err(unreachable());
            }
            let c2 = ((r * r - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
            let q2 = c2.acos();
            let q1 = goal[1].atan2(goal[0]) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
            Ok(vec![wrap_angle(q1), q2])
        }
        k => damped_least_squares(goal, config, vec![PI / (2.0 * k as f64); k]),
    }
}

fn damped_least_squares(goal: [f64; 2], config: &ArmConfig, mut q: Vec<f64>) -> Result<Vec<f64>> {
    let k = q.len();
    for _ in 0..IK_MAX_ITERS {
        let p = forward_kinematics(&q, config);
        let e = [goal[0] - p[0], goal[1] - p[1]];
        if e[0].hypot(e[1]) < IK_TOL {
            return Ok(q.into_iter().map(wrap_angle).collect());
        }
        // Jacobian columns: ∂p/∂q_i = Σ_{m≥i} l_m (−sin φ_m, cos φ_m)
        let mut cum = 0.0;
        let phis: Vec<f64> = q
            .iter()
            .map(|a| {
                cum += a;
                cum
            })
            .collect();
        let mut jac = vec![[0.0; 2]; k];
        for i in 0..k {
            for m in i..k {
                let l = config.link_lengths[m];
                jac[i][0] -= l * phis[m].sin();
                jac[i][1] += l * phis[m].cos();
            }
        }
        // Δq = Jᵀ (J Jᵀ + λ² I)⁻¹ e
        let lam2 = IK_DAMPING * IK_DAMPING * config.reach() * config.reach();
        let mut a = [[lam2, 0.0], [0.0, lam2]];
        for c in &jac {
            a[0][0] += c[0] * c[0];
            a[0][1] += c[0] * c[1];
            a[1][0] += c[1] * c[0];
            a[1][1] += c[1] * c[1];
        }
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let y = [
            (a[1][1] * e[0] - a[0][1] * e[1]) / det,
            (a[0][0] * e[1] - a[1][0] * e[0]) / det,
        ];
        for (qi, c) in q.iter_mut().zip(&jac) {
            *qi += c[0] * y[0] + c[1] * y[1];
        }
    }
    let p = forward_kinematics(&q, config);
    if distance(p, goal) < 1e-3 {
        Ok(q.into_iter().map(wrap_angle).collect())
    } else {
        Err(Error::Unreachable {
            goal,
            reach: config.reach(),
        })
    }
}

/// PD controller tracking the inverse-kinematics pose of the active goal.
#[derive(Clone, Debug)]
pub struct PdExpert {
    pub gains: PdGains,
    target: Option<([f64; 2], Vec<f64>)>,
}

impl PdExpert {
    pub fn new(gains: PdGains) -> Result<Self> {
        if !(gains.kp > 0.0 && gains.kd > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "PD gains must be positive, got kp={} kd={}",
                gains.kp, gains.kd
            )));
        }
        Ok(Self {
            gains,
            target: None,
        })
    }

    fn target_for(&mut self, goal: [f64; 2], config: &ArmConfig) -> Result<&[f64]> {
        let stale = self.target.as_ref().is_none_or(|(g, _)| *g != goal);
        if stale {
            self.target = Some((goal, inverse_kinematics(goal, config)?));
        }
        Ok(&self.target.as_ref().expect("target cached above").1)
    }

    /// `τ = clamp(kp·wrap(θ* − ω) − kd·ω̇)`
    pub fn act(&mut self, state: &ArmState, config: &ArmConfig) -> Result<Action> {
        let gains = self.gains;
        let target = self.target_for(state.goal, config)?;
        Ok(expert_action(state, target, gains, config))
    }
}

pub fn expert_action(state: &ArmState, target: &[f64], gains: PdGains, config: &ArmConfig) -> Action {
    let limit = config.torque_limit;
    Action(
        target
            .iter()
            .zip(&state.angles)
            .zip(&state.velocities)
            .map(|((&t, &w), &v)| {
                (gains.kp * wrap_angle(t - w) - gains.kd * v).clamp(-limit, limit)
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRequest {
    pub domain: Domain,
    pub task: TaskSpec,
    pub num_trajectories: usize,
    pub record_actions: bool,
    pub seed: u64,
}

/// One expert episode recorded as observations.
pub fn expert_episode(
    task: &TaskSpec,
    config: &ArmConfig,
    gains: PdGains,
    domain: Domain,
    record_actions: bool,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = reset_with(task, config, &mut rng);
    let mut expert = PdExpert::new(gains)?;
    let mut states = vec![observe(&state, config)];
    let mut actions = Vec::new();
    let mut reached = false;
    for _ in 0..config.max_steps {
        let action = expert.act(&state, config)?;
        let out = step(&state, &action, config, task)?;
        state = out.next;
        states.push(observe(&state, config));
        if record_actions {
            actions.push(action.clamped(config.torque_limit).0);
        }
        if out.done {
            reached = true;
            break;
        }
    }
    Ok(Trajectory {
        domain,
        task_id: task.task_id.clone(),
        states,
        actions: record_actions.then_some(actions),
        reached: Some(reached),
    })
}

/// Generates `num_trajectories` episodes; episode `i` is seeded from `(seed, i)`.
pub fn generate_demos(request: &DemoRequest, config: &ArmConfig, gains: PdGains) -> Result<Vec<Trajectory>> {
    config.validate()?;
    request.task.validate()?;
    if request.num_trajectories == 0 {
        return Err(Error::InvalidConfig("num_trajectories must be >= 1".into()));
    }
    let trajs = (0..request.num_trajectories)
        .map(|i| {
            expert_episode(
                &request.task,
                config,
                gains,
                request.domain,
                request.record_actions,
                child_seed(request.seed, &format!("episode/{i}")),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let successes = trajs.iter().filter(|t| t.reached == Some(true)).count();
    if (successes as f64) < MIN_SUCCESS_RATE * trajs.len() as f64 {
        return Err(Error::ExpertFailure {
            task_id: request.task.task_id.clone(),
            successes,
            episodes: trajs.len(),
        });
    }
    Ok(trajs)
}


#[cfg(test)]
mod success_tests {
    use super::*;
    use crate::arm_env::{make_scenario, ScenarioName};

    #[test]
    fn experts_succeed_on_every_scenario_task() {
        for name in ScenarioName::ALL {
            let sc = make_scenario(name);
            let sides = [
                (Domain::Expert, &sc.expert, sc.expert_gains),
                (Domain::Agent, &sc.agent, sc.agent_gains),
            ];
            for (domain, cfg, gains) in sides {
                for task in sc.proxy_tasks.iter().chain(&sc.inference_tasks) {
                    let req = DemoRequest {
                        domain,
                        task: task.clone(),
                        num_trajectories: 50,
                        record_actions: false,
                        seed: 11,
                    };
                    let r = generate_demos(&req, cfg, gains);
                    assert!(r.is_ok(), "{name} {domain:?} {}: {:?}", task.task_id, r.err());
                }
            }
        }
    }
}
