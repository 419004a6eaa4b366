//! Behavioral cloning from observation.
//!
//! Random agent-domain exploration trains an inverse dynamics model, which
//! labels state-only demonstrations with actions; a policy is then cloned
//! from the labeled pairs and scored against expert and random references.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::arm_env::{eval_reward, observe, reset_with, step, Action, ArmConfig, ArmState, PdGains, TaskSpec};
use crate::error::{Error, Result};
use crate::expert::PdExpert;
use crate::numcore::{fit_mse_epochs, Activation, FitSettings, ModelFile};
use crate::seeding::child_seed;
use crate::traj::{fit_normalizer, fit_normalizer_matrix, Normalizer, Trajectory};
use crate::{Matrix, Mlp};

pub const DEFAULT_EXPLORATION_STEPS: usize = 50_000;
/// Fewer triplets than this cannot train an inverse model.
pub const MIN_EXPLORATION: usize = 1_000;
/// Bounds of the normalized score.
pub const SCORE_RANGE: (f64, f64) = (-0.5, 1.5);

/// Random-torque transitions `(s, a, s′)` of the agent arm, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationSet {
    pub states: Matrix,
    pub actions: Matrix,
    pub next_states: Matrix,
}

impl ExplorationSet {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A goal somewhere inside the workspace. Exploration ignores it except
/// for episode resets on accidental reaches.
fn random_goal<R: Rng + ?Sized>(config: &ArmConfig, rng: &mut R) -> [f64; 2] {
    let r = 0.9 * config.reach() * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(-PI..PI);
    [r * a.cos(), r * a.sin()]
}

/// Collects exactly `num_steps` triplets under uniform random torques.
pub fn collect_random(config: &ArmConfig, num_steps: usize, seed: u64) -> Result<ExplorationSet> {
    config.validate()?;
    let k = config.num_links;
    let limit = config.torque_limit;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Vec::with_capacity(num_steps);
    let mut a = Vec::with_capacity(num_steps);
    let mut s_next = Vec::with_capacity(num_steps);
    'episodes: while s.len() < num_steps {
        let task = TaskSpec::reach("explore", random_goal(config, &mut rng));
        let mut state = reset_with(&task, config, &mut rng);
        for _ in 0..config.max_steps {
            let action = Action((0..k).map(|_| rng.gen_range(-limit..=limit)).collect());
            let out = step(&state, &action, config, &task)?;
            s.push(observe(&state, config));
            s_next.push(observe(&out.next, config));
            a.push(action.0);
            state = out.next;
            if s.len() == num_steps {
                break 'episodes;
            }
            if out.done {
                break;
            }
        }
    }
    Ok(ExplorationSet {
        states: Matrix::from_rows(&s)?,
        actions: Matrix::from_rows(&a)?,
        next_states: Matrix::from_rows(&s_next)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heldout_fraction: f64,
}

impl Default for IdmSettings {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmReport {
    pub num_train: usize,
    pub num_heldout: usize,
    pub train_mse: f64,
    pub heldout_mse: f64,
    /// Per-joint held-out RMSE in torque units.
    pub heldout_rmse: Vec<f64>,
}

/// `I_A(s, s′) → a` over the non-goal dimensions of normalized agent states.
#[derive(Clone, Debug)]
pub struct InverseDynamicsModel {
    pub net: Mlp,
    pub normalizer: Normalizer,
    pub nongoal_dim: usize,
    pub torque_limit: f64,
}

impl InverseDynamicsModel {
    pub fn state_dim(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn features(&self, s: &Matrix, s_next: &Matrix) -> Result<Matrix> {
        if s.cols() != self.state_dim() || s_next.cols() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "inverse model expects states of dim {}, got {} and {}",
                self.state_dim(),
                s.cols(),
                s_next.cols()
            )));
        }
        let n = self.nongoal_dim;
        let a = self.normalizer.apply_matrix(s).cols_range(0..n)?;
        let b = self.normalizer.apply_matrix(s_next).cols_range(0..n)?;
        Ok(Matrix::hcat(&[&a, &b])?)
    }

    /// Raw network predictions, one action per row.
    pub fn predict_raw(&self, s: &Matrix, s_next: &Matrix) -> Result<Matrix> {
        Ok(self.net.forward(&self.features(s, s_next)?)?)
    }

    /// Predictions clamped to the torque limit.
    pub fn predict(&self, s: &Matrix, s_next: &Matrix) -> Result<Matrix> {
        let l = self.torque_limit;
        Ok(self.predict_raw(s, s_next)?.map(|a| a.clamp(-l, l)))
    }

    pub fn to_model_file(&self) -> Result<ModelFile> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), json!("inverse_dynamics"));
        meta.insert("normalizer".into(), serde_json::to_value(&self.normalizer)?);
        meta.insert("nongoal_dim".into(), json!(self.nongoal_dim));
        meta.insert("torque_limit".into(), json!(self.torque_limit));
        Ok(ModelFile::from_mlp(&self.net, meta))
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let normalizer: Normalizer = serde_json::from_value(meta_field(file, "normalizer")?)?;
        let nongoal_dim: usize = serde_json::from_value(meta_field(file, "nongoal_dim")?)?;
        let torque_limit: f64 = serde_json::from_value(meta_field(file, "torque_limit")?)?;
        let net: Mlp = file.to_mlp()?;
        if net.input_dim() != 2 * nongoal_dim || nongoal_dim > normalizer.dim() {
            return Err(Error::Dimension(format!(
                "inverse model net {:?} does not match {nongoal_dim} non-goal dims",
                net.layer_dims()
            )));
        }
        Ok(Self {
            net,
            normalizer,
            nongoal_dim,
            torque_limit,
        })
    }
}

fn meta_field(file: &ModelFile, key: &str) -> Result<serde_json::Value> {
    file.metadata
        .get(key)
        .cloned()
        .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks `{key}`")))
}

fn goal_dims(dim: usize) -> Vec<usize> {
    vec![dim - 2, dim - 1]
}

/// Fits the inverse model on agent exploration data and reports held-out error.
pub fn train_inverse_model(
    expl: &ExplorationSet,
    config: &ArmConfig,
    settings: &IdmSettings,
    seed: u64,
) -> Result<(InverseDynamicsModel, IdmReport)> {
    if expl.len() < MIN_EXPLORATION {
        return Err(Error::EmptyData(format!(
            "inverse model needs at least {MIN_EXPLORATION} triplets, got {}",
            expl.len()
        )));
    }
    let dim = config.obs_dim();
    let k = config.num_links;
    if expl.states.cols() != dim || expl.actions.cols() != k {
        return Err(Error::Dimension(format!(
            "exploration data has state dim {} and action dim {}, the agent needs {dim} and {k}",
            expl.states.cols(),
            expl.actions.cols()
        )));
    }
    if !(0.0..1.0).contains(&settings.heldout_fraction) {
        return Err(Error::InvalidConfig("heldout_fraction must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalizer = fit_normalizer_matrix(&expl.states, &goal_dims(dim))?;
    let net = Mlp::with_hidden(
        2 * config.nongoal_dim(),
        &settings.hidden,
        k,
        Activation::Relu,
        Activation::Identity,
        false,
        &mut rng,
    )?;
    let mut idm = InverseDynamicsModel {
        net,
        normalizer,
        nongoal_dim: config.nongoal_dim(),
        torque_limit: config.torque_limit,
    };
    let x = idm.features(&expl.states, &expl.next_states)?;
    let mut order: Vec<usize> = (0..expl.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let n_held = (settings.heldout_fraction * expl.len() as f64).round() as usize;
    let (held, train) = order.split_at(n_held);
    let fit = FitSettings {
        steps: 0,
        batch_size: settings.batch_size,
        lr: settings.lr,
    };
    let history = fit_mse_epochs(
        &mut idm.net,
        &x.select_rows(train),
        &expl.actions.select_rows(train),
        settings.epochs,
        fit,
        &mut rng,
    )?;
    let (heldout_mse, heldout_rmse) = if held.is_empty() {
        (f64::NAN, vec![f64::NAN; k])
    } else {
        let pred = idm.net.forward(&x.select_rows(held))?;
        let truth = expl.actions.select_rows(held);
        let mut sq = vec![0.0; k];
        for r in 0..pred.rows() {
            for (c, v) in sq.iter_mut().enumerate() {
                *v += (pred.get(r, c) - truth.get(r, c)).powi(2);
            }
        }
        let n = pred.rows() as f64;
        let mse = sq.iter().sum::<f64>() / (n * k as f64);
        (mse, sq.iter().map(|v| (v / n).sqrt()).collect())
    };
    let report = IdmReport {
        num_train: train.len(),
        num_heldout: held.len(),
        train_mse: history.last().copied().unwrap_or(f64::NAN),
        heldout_mse,
        heldout_rmse,
    };
    Ok((idm, report))
}

/// Attaches `actions[t] = I_A(s_t, s_{t+1})` to every trajectory.
pub fn label_actions(idm: &InverseDynamicsModel, trajs: &[Trajectory]) -> Result<Vec<Trajectory>> {
    trajs
        .iter()
        .map(|t| {
            t.validate()?;
            if t.state_dim() != idm.state_dim() {
                return Err(Error::Dimension(format!(
                    "trajectory {} has state dim {}, the inverse model expects {}",
                    t.task_id,
                    t.state_dim(),
                    idm.state_dim()
                )));
            }
            let h = t.len();
            let states = t.states_matrix();
            let actions = if h < 2 {
                Vec::new()
            } else {
                let a = idm.predict(&states.rows_range(0..h - 1)?, &states.rows_range(1..h)?)?;
                a.row_iter().map(<[f64]>::to_vec).collect()
            };
            Ok(Trajectory {
                actions: Some(actions),
                ..t.clone()
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BcSettings {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub num_pairs: usize,
    /// Mean training loss of every epoch, in units of `(torque / limit)²`.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Deterministic state → torque policy with a tanh head scaled to the limit.
#[derive(Clone, Debug)]
pub struct Policy {
    pub net: Mlp,
    pub normalizer: Normalizer,
    pub torque_limit: f64,
}

impl Policy {
    pub fn state_dim(&self) -> usize {
        self.normalizer.dim()
    }

    /// Actions for raw observations, one row each.
    pub fn act_matrix(&self, states: &Matrix) -> Result<Matrix> {
        if states.cols() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "policy expects states of dim {}, got {}",
                self.state_dim(),
                states.cols()
            )));
        }
        let l = self.torque_limit;
        Ok(self.net.forward(&self.normalizer.apply_matrix(states))?.map(|u| l * u))
    }

    pub fn act_obs(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.act_matrix(&Matrix::from_vec(1, obs.len(), obs.to_vec())?)?.into_vec())
    }

    pub fn to_model_file(&self) -> Result<ModelFile> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), json!("policy"));
        meta.insert("normalizer".into(), serde_json::to_value(&self.normalizer)?);
        meta.insert("torque_limit".into(), json!(self.torque_limit));
        Ok(ModelFile::from_mlp(&self.net, meta))
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let normalizer: Normalizer = serde_json::from_value(meta_field(file, "normalizer")?)?;
        let torque_limit: f64 = serde_json::from_value(meta_field(file, "torque_limit")?)?;
        let net: Mlp = file.to_mlp()?;
        if net.input_dim() != normalizer.dim() {
            return Err(Error::Dimension(format!(
                "policy net {:?} does not match state dim {}",
                net.layer_dims(),
                normalizer.dim()
            )));
        }
        Ok(Self {
            net,
            normalizer,
            torque_limit,
        })
    }
}

/// Regresses actions on states over every labeled pair.
pub fn behavioral_cloning(
    labeled: &[Trajectory],
    torque_limit: f64,
    settings: &BcSettings,
    seed: u64,
) -> Result<(Policy, BcReport)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in labeled {
        let actions = t.actions.as_ref().ok_or_else(|| {
            Error::InvalidConfig(format!("trajectory {} has no action labels", t.task_id))
        })?;
        for (s, a) in t.states.iter().zip(actions) {
            xs.push(s.clone());
            ys.push(a.iter().map(|u| u / torque_limit).collect::<Vec<_>>());
        }
    }
    if xs.is_empty() {
        return Err(Error::EmptyData("behavioral cloning needs labeled transitions".into()));
    }
    let dim = xs[0].len();
    let normalizer = fit_normalizer(labeled, &goal_dims(dim))?;
    let x = normalizer.apply_matrix(&Matrix::from_rows(&xs)?);
    let y = Matrix::from_rows(&ys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::with_hidden(
        dim,
        &settings.hidden,
        y.cols(),
        Activation::Relu,
        Activation::Tanh,
        false,
        &mut rng,
    )?;
    let fit = FitSettings {
        steps: 0,
        batch_size: settings.batch_size,
        lr: settings.lr,
    };
    let epoch_losses = fit_mse_epochs(&mut net, &x, &y, settings.epochs, fit, &mut rng)?;
    let report = BcReport {
        num_pairs: x.rows(),
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
    };
    Ok((
        Policy {
            net,
            normalizer,
            torque_limit,
        },
        report,
    ))
}

/// Anything that can drive the arm during evaluation.
pub trait Controller {
    /// Called before every episode with that episode's seed.
    fn begin_episode(&mut self, _seed: u64) {}

    fn act(&mut self, state: &ArmState, obs: &[f64]) -> Result<Action>;
}

impl Controller for Policy {
    fn act(&mut self, _state: &ArmState, obs: &[f64]) -> Result<Action> {
        Ok(Action(self.act_obs(obs)?))
    }
}

/// The scripted PD expert acting in a given arm.
pub struct ExpertController {
    expert: PdExpert,
    config: ArmConfig,
}

impl ExpertController {
    pub fn new(config: &ArmConfig, gains: PdGains) -> Result<Self> {
        Ok(Self {
            expert: PdExpert::new(gains)?,
            config: config.clone(),
        })
    }
}

impl Controller for ExpertController {
    fn act(&mut self, state: &ArmState, _obs: &[f64]) -> Result<Action> {
        self.expert.act(state, &self.config)
    }
}

/// Uniform random torques, reseeded per episode.
pub struct RandomController {
    rng: ChaCha8Rng,
    num_links: usize,
    limit: f64,
}

impl RandomController {
    pub fn new(config: &ArmConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            num_links: config.num_links,
            limit: config.torque_limit,
        }
    }
}

impl Controller for RandomController {
    fn begin_episode(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "random-torques"));
    }

    fn act(&mut self, _state: &ArmState, _obs: &[f64]) -> Result<Action> {
        let l = self.limit;
        Ok(Action((0..self.num_links).map(|_| self.rng.gen_range(-l..=l)).collect()))
    }
}

/// Undiscounted evaluation return of one episode.
pub fn run_episode(ctrl: &mut dyn Controller, config: &ArmConfig, task: &TaskSpec, seed: u64) -> Result<f64> {
    ctrl.begin_episode(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = reset_with(task, config, &mut rng);
    let mut ret = 0.0;
    for _ in 0..config.max_steps {
        let action = ctrl.act(&state, &observe(&state, config))?;
        let out = step(&state, &action, config, task)?;
        ret += eval_reward(&state, &action, &out, config, task);
        state = out.next;
        if out.done {
            break;
        }
    }
    Ok(ret)
}

fn episode_seed(seed: u64, task: &TaskSpec, ep: usize) -> u64 {
    child_seed(seed, &format!("eval/{}/{ep}", task.task_id))
}

/// Mean return over `episodes` seeded episodes of one task.
pub fn mean_return(
    ctrl: &mut dyn Controller,
    config: &ArmConfig,
    task: &TaskSpec,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("episodes must be >= 1".into()));
    }
    let mut sum = 0.0;
    for ep in 0..episodes {
        sum += run_episode(ctrl, config, task, episode_seed(seed, task, ep))?;
    }
    Ok(sum / episodes as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReference {
    pub task_id: String,
    pub expert_return: f64,
    pub random_return: f64,
}

/// Expert and random returns on the same episode seeds the policy will see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub episodes: usize,
    pub seed: u64,
    pub tasks: Vec<TaskReference>,
}

impl ReferenceReturns {
    pub fn get(&self, task_id: &str) -> Result<&TaskReference> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::NotReady(format!("no reference returns for task {task_id}")))
    }
}

pub fn reference_returns(
    config: &ArmConfig,
    gains: PdGains,
    tasks: &[TaskSpec],
    episodes: usize,
    seed: u64,
) -> Result<ReferenceReturns> {
    let mut expert = ExpertController::new(config, gains)?;
    let mut random = RandomController::new(config);
    let tasks = tasks
        .iter()
        .map(|task| {
            Ok(TaskReference {
                task_id: task.task_id.clone(),
                expert_return: mean_return(&mut expert, config, task, episodes, seed)?,
                random_return: mean_return(&mut random, config, task, episodes, seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceReturns { episodes, seed, tasks })
}

/// `(R − R_rand) / (R_E − R_rand)`, clamped to [`SCORE_RANGE`].
pub fn normalized_score(ret: f64, reference: &TaskReference) -> Result<f64> {
    let span = reference.expert_return - reference.random_return;
    if !(span > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "broken reference for {}: expert return {} does not exceed random return {}",
            reference.task_id, reference.expert_return, reference.random_return
        )));
    }
    Ok(((ret - reference.random_return) / span).clamp(SCORE_RANGE.0, SCORE_RANGE.1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub mean_return: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Option<String>,
    pub seed: u64,
    pub mean_return: f64,
    /// Mean of the per-task normalized scores.
    pub normalized: f64,
    pub per_task: Vec<TaskEval>,
}

/// Scores a controller on `tasks`, normalizing each task against its reference.
pub fn evaluate_policy(
    ctrl: &mut dyn Controller,
    config: &ArmConfig,
    tasks: &[TaskSpec],
    references: &ReferenceReturns,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::EmptyData("no evaluation tasks".into()));
    }
    let per_task = tasks
        .iter()
        .map(|task| {
            let reference = references.get(&task.task_id)?;
            let r = mean_return(ctrl, config, task, references.episodes, references.seed)?;
            Ok(TaskEval {
                task_id: task.task_id.clone(),
                mean_return: r,
                normalized: normalized_score(r, reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_task.len() as f64;
    Ok(EvalReport {
        scenario: None,
        seed: references.seed,
        mean_return: per_task.iter().map(|t| t.mean_return).sum::<f64>() / n,
        normalized: per_task.iter().map(|t| t.normalized).sum::<f64>() / n,
        per_task,
    })
}
