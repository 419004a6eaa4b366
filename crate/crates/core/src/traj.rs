//! Trajectory corpora, per-domain state normalization and transition sampling.
//!
//! Corpora are JSON-Lines files, one trajectory per line:
//! `{"domain":"E","task_id":"reach_000","states":[[...],...],"actions":[[...]],"reached":true}`.
//! `actions` and `reached` are optional. Numbers are written with 17
//! significant digits so a save/load round trip is exact.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "E")]
    Expert,
    #[serde(rename = "A")]
    Agent,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Expert => "E",
            Domain::Agent => "A",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub domain: Domain,
    pub task_id: String,
    pub states: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<Vec<f64>>>,
    /// Whether the final state is a goal state. Unknown for hand-built data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reached: Option<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Treats unknown as reaching.
    pub fn reached_goal(&self) -> bool {
        self.reached != Some(false)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Dimension(format!("trajectory {}: {msg}", self.task_id)));
        if self.states.len() < 2 {
            return bad(format!("needs at least 2 states, has {}", self.states.len()));
        }
        let d = self.state_dim();
        if d == 0 {
            return bad("states are empty vectors".into());
        }
        if let Some(i) = self.states.iter().position(|s| s.len() != d) {
            return bad(format!("state {i} has dim {}, expected {d}", self.states[i].len()));
        }
        if let Some(actions) = &self.actions {
            if actions.len() != self.states.len() - 1 {
                return bad(format!(
                    "{} actions for {} states",
                    actions.len(),
                    self.states.len()
                ));
            }
            if let Some(a0) = actions.first() {
                if actions.iter().any(|a| a.len() != a0.len()) {
                    return bad("ragged action dims".into());
                }
            }
        }
        let finite = |v: &Vec<f64>| v.iter().all(|x| x.is_finite());
        if !self.states.iter().all(finite) || !self.actions.iter().flatten().all(finite) {
            return Err(Error::NonFinite(format!("trajectory {}", self.task_id)));
        }
        Ok(())
    }

    pub fn states_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.states).expect("validated trajectory has uniform dims")
    }
}

fn write_vecs(out: &mut String, rows: &[Vec<f64>]) {
    out.push('[');
    for (i, row) in rows.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{x:.16e}").expect("writing to a String");
        }
        out.push(']');
    }
    out.push(']');
}

/// Serializes one trajectory as a single JSON line (no trailing newline).
pub fn trajectory_to_line(t: &Trajectory) -> Result<String> {
    t.validate()?;
    let mut s = String::with_capacity(32 * t.len() * t.state_dim());
    write!(
        s,
        "{{\"domain\":\"{}\",\"task_id\":{},\"states\":",
        t.domain.tag(),
        serde_json::to_string(&t.task_id)?
    )
    .expect("writing to a String");
    write_vecs(&mut s, &t.states);
    if let Some(a) = &t.actions {
        s.push_str(",\"actions\":");
        write_vecs(&mut s, a);
    }
    if let Some(r) = t.reached {
        write!(s, ",\"reached\":{r}").expect("writing to a String");
    }
    s.push('}');
    Ok(s)
}

pub fn save_corpus(trajs: &[Trajectory], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in trajs {
        out.push_str(&trajectory_to_line(t)?);
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a corpus. Blank lines are skipped; all trajectories must share a
/// state dimension.
pub fn load_corpus(path: &Path) -> Result<Vec<Trajectory>> {
    let file = fs::File::open(path)?;
    let corpus_err = |line: usize, msg: String| Error::Corpus {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory =
            serde_json::from_str(&line).map_err(|e| corpus_err(i + 1, e.to_string()))?;
        t.validate().map_err(|e| corpus_err(i + 1, e.to_string()))?;
        if let Some(first) = out.first() {
            if first.state_dim() != t.state_dim() {
                return Err(corpus_err(
                    i + 1,
                    format!("state dim {} differs from {}", t.state_dim(), first.state_dim()),
                ));
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// Per-dimension standardization of non-goal dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Indices passed through unchanged.
    pub goal_dims: Vec<usize>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl Normalizer {
    pub fn identity(dim: usize, goal_dims: Vec<usize>) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            goal_dims,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn is_goal(&self, i: usize) -> bool {
        self.goal_dims.contains(&i)
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(i, &x)| if self.is_goal(i) { x } else { (x - self.mean[i]) / self.std[i] })
            .collect()
    }

    pub fn unapply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &x)| if self.is_goal(i) { x } else { x * self.std[i] + self.mean[i] })
            .collect()
    }

    pub fn apply_matrix(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            let x = m.get(r, c);
            if self.is_goal(c) {
                x
            } else {
                (x - self.mean[c]) / self.std[c]
            }
        })
    }

    pub fn unapply_matrix(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |r, c| {
            let x = m.get(r, c);
            if self.is_goal(c) {
                x
            } else {
                x * self.std[c] + self.mean[c]
            }
        })
    }
}

/// Fits mean and (population) std over every state of every trajectory.
pub fn fit_normalizer(trajs: &[Trajectory], goal_dims: &[usize]) -> Result<Normalizer> {
    let dim = trajs
        .first()
        .map(Trajectory::state_dim)
        .ok_or_else(|| Error::EmptyData("cannot fit a normalizer on an empty corpus".into()))?;
    fit_rows(dim, || trajs.iter().flat_map(|t| t.states.iter().map(Vec::as_slice)), goal_dims)
}

/// [`fit_normalizer`] over the rows of a matrix.
pub fn fit_normalizer_matrix(m: &Matrix, goal_dims: &[usize]) -> Result<Normalizer> {
    if m.rows() == 0 {
        return Err(Error::EmptyData("cannot fit a normalizer on zero rows".into()));
    }
    fit_rows(m.cols(), || m.row_iter(), goal_dims)
}

fn fit_rows<'a, I, F>(dim: usize, rows: F, goal_dims: &[usize]) -> Result<Normalizer>
where
    I: Iterator<Item = &'a [f64]>,
    F: Fn() -> I,
{
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    for s in rows() {
        if s.len() != dim {
            return Err(Error::Dimension(format!("state dim {} != {dim}", s.len())));
        }
        n += 1;
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for s in rows() {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let mut norm = Normalizer {
        mean,
        std: var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect(),
        goal_dims: goal_dims.to_vec(),
    };
    for &g in goal_dims {
        if g >= dim {
            return Err(Error::Dimension(format!("goal dim {g} out of range for dim {dim}")));
        }
        norm.mean[g] = 0.0;
        norm.std[g] = 1.0;
    }
    Ok(norm)
}

/// Consecutive state pairs drawn from one task and domain.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub s: Matrix,
    pub s_next: Matrix,
    pub domain: Domain,
    pub task: usize,
}

/// All states of a trajectory set stacked row-wise, with the rows that start
/// a within-trajectory transition.
#[derive(Clone, Debug)]
pub struct TransitionPool {
    states: Matrix,
    starts: Vec<usize>,
}

impl TransitionPool {
    pub fn new(trajs: &[Trajectory]) -> Result<Self> {
        let dim = trajs.first().map_or(0, Trajectory::state_dim);
        let mut data = Vec::new();
        let mut starts = Vec::new();
        let mut row = 0;
        for t in trajs {
            t.validate()?;
            if t.state_dim() != dim {
                return Err(Error::Dimension(format!("state dim {} != {dim}", t.state_dim())));
            }
            starts.extend(row..row + t.len() - 1);
            row += t.len();
            data.extend(t.states.iter().flatten());
        }
        Ok(Self {
            states: Matrix::from_vec(row, dim, data)?,
            starts,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.starts.len()
    }

    pub fn states(&self) -> &Matrix {
        &self.states
    }

    /// Rows starting uniformly drawn pairs; row `r + 1` is the successor.
    pub fn sample_starts<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.starts.is_empty() {
            return Err(Error::EmptyData("no transitions to sample".into()));
        }
        Ok((0..batch)
            .map(|_| self.starts[rng.gen_range(0..self.starts.len())])
            .collect())
    }

    /// Uniform over all pairs, with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<(Matrix, Matrix)> {
        if self.starts.is_empty() {
            return Err(Error::EmptyData("no transitions to sample".into()));
        }
        let d = self.states.cols();
        let mut s = Vec::with_capacity(batch * d);
        let mut sn = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            let r = self.starts[rng.gen_range(0..self.starts.len())];
            s.extend_from_slice(self.states.row(r));
            sn.extend_from_slice(self.states.row(r + 1));
        }
        Ok((Matrix::from_vec(batch, d, s)?, Matrix::from_vec(batch, d, sn)?))
    }

    /// Uniform over all states, with replacement.
    pub fn sample_states<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Matrix> {
        if self.states.rows() == 0 {
            return Err(Error::EmptyData("no states to sample".into()));
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..self.states.rows())).collect();
        Ok(self.states.select_rows(&idx))
    }
}

/// Expert and agent demonstrations for one proxy task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task_id: String,
    pub expert: Vec<Trajectory>,
    pub agent: Vec<Trajectory>,
    expert_pool: TransitionPool,
    agent_pool: TransitionPool,
}

impl TaskData {
    pub fn trajectories(&self, domain: Domain) -> &[Trajectory] {
        match domain {
            Domain::Expert => &self.expert,
            Domain::Agent => &self.agent,
        }
    }

    pub fn pool(&self, domain: Domain) -> &TransitionPool {
        match domain {
            Domain::Expert => &self.expert_pool,
            Domain::Agent => &self.agent_pool,
        }
    }
}

/// Unpaired state-only demonstrations for every proxy task.
#[derive(Clone, Debug)]
pub struct ProxyDataset {
    tasks: Vec<TaskData>,
}

impl ProxyDataset {
    /// Builds the dataset from all trajectories of both domains, grouped by
    /// `task_ids` order. Expert trajectories carrying actions are rejected:
    /// alignment must never see expert actions.
    pub fn new(task_ids: &[String], expert: &[Trajectory], agent: &[Trajectory]) -> Result<Self> {
        if task_ids.is_empty() {
            return Err(Error::EmptyData("no proxy tasks".into()));
        }
        if expert.iter().any(|t| t.actions.is_some()) {
            return Err(Error::InvalidConfig(
                "expert-domain trajectories must be state-only".into(),
            ));
        }
        let pick = |src: &[Trajectory], id: &str, domain: Domain| -> Result<Vec<Trajectory>> {
            let v: Vec<Trajectory> = src
                .iter()
                .filter(|t| t.task_id == id && t.domain == domain)
                .cloned()
                .collect();
            if v.is_empty() {
                return Err(Error::EmptyData(format!(
                    "no {} trajectories for task {id}",
                    domain.tag()
                )));
            }
            Ok(v)
        };
        let tasks = task_ids
            .iter()
            .map(|id| {
                let e = pick(expert, id, Domain::Expert)?;
                let a = pick(agent, id, Domain::Agent)?;
                Ok(TaskData {
                    task_id: id.clone(),
                    expert_pool: TransitionPool::new(&e)?,
                    agent_pool: TransitionPool::new(&a)?,
                    expert: e,
                    agent: a,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn task(&self, j: usize) -> Result<&TaskData> {
        self.tasks
            .get(j)
            .ok_or_else(|| Error::InvalidConfig(format!("task index {j} out of range")))
    }

    pub fn all_trajectories(&self, domain: Domain) -> Vec<Trajectory> {
        self.tasks
            .iter()
            .flat_map(|t| t.trajectories(domain).iter().cloned())
            .collect()
    }
}

pub fn sample_transitions<R: Rng + ?Sized>(
    dataset: &ProxyDataset,
    task: usize,
    domain: Domain,
    batch: usize,
    rng: &mut R,
) -> Result<TransitionBatch> {
    let (s, s_next) = dataset.task(task)?.pool(domain).sample(batch, rng)?;
    Ok(TransitionBatch {
        s,
        s_next,
        domain,
        task,
    })
}
