//! Cross-domain state correspondence.
//!
//! ψ = Dec_E ∘ Enc_E maps expert non-goal state dimensions to the agent's and
//! φ = Dec_A ∘ Enc_A maps back, through a shared latent space. Training
//! alternates, per proxy task, least-squares discriminator updates, a latent
//! domain-classifier update and one generator update of the weighted
//! objective
//!
//! ```text
//! λ1(adv_A + adv_E) + λ2(cyc + z) + λ3·pos − λ4·MI
//! ```
//!
//! followed by an inference-adaptation phase on `λ5(cyc_inf + pos_inf)`.
//! All networks operate on per-domain normalized coordinates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::arm_env::{wrap_angle, GoalFrame};
use crate::error::{Error, Result};
use crate::numcore::{bce, bce_with_grad, lsq_adv_losses, mse, mse_with_grad, Activation, ModelFile};
use crate::temporal::PositionEstimator;
use crate::traj::{Domain, Normalizer, ProxyDataset, TransitionBatch, TransitionPool, Trajectory};
use crate::{Adam, Gradients, Matrix, Mlp};

/// Number of goal coordinates at the end of every observation.
pub const GOAL_DIMS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignHyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub outer_iterations: usize,
    pub latent_dim: usize,
    pub map_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub p_z_hidden: Vec<usize>,
    /// Include the latent position term in inference adaptation.
    pub inference_position: bool,
}

impl Default for AlignHyperparams {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            lr: 1e-4,
            batch_size: 128,
            inner_steps: 50,
            outer_iterations: 300,
            latent_dim: 8,
            map_hidden: vec![128, 64],
            disc_hidden: vec![128, 128],
            p_z_hidden: vec![64, 64],
            inference_position: true,
        }
    }
}

impl AlignHyperparams {
    pub fn lambdas(&self) -> [f64; 5] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5]
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas().iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and >= 0, got {:?}",
                self.lambdas()
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("inner_steps", self.inner_steps),
            ("outer_iterations", self.outer_iterations),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        Ok(())
    }

    fn pos_inf_active(&self) -> bool {
        self.inference_position && self.lambda5 > 0.0
    }
}

/// Smallest squared radius used when differentiating `atan2(s, c)`.
const MIN_RADIUS_SQ: f64 = 1e-2;

/// Circle coding of the leading joint-angle dimensions of a normalized state.
///
/// Encoders see every angle as `(cos θ, sin θ)` and decoders emit such a
/// pair, read back through `atan2`, so a rotated joint frame is a linear map
/// rather than a jump at ±π. Other dimensions pass through. The coded layout
/// is `(cos θ_1..θ_k, sin θ_1..θ_k, rest)`, one column wider per angle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AngleCodec {
    /// Raw-unit mean and std of every angle dimension.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AngleCodec {
    /// Circle coding for the first `count` dimensions of `norm`.
    pub fn from_normalizer(norm: &Normalizer, count: usize) -> Result<Self> {
        if count > norm.dim() {
            return Err(Error::Dimension(format!(
                "{count} angle dims exceed state dim {}",
                norm.dim()
            )));
        }
        Ok(Self {
            mean: norm.mean[..count].to_vec(),
            std: norm.std[..count].to_vec(),
        })
    }

    pub fn count(&self) -> usize {
        self.mean.len()
    }

    fn angle(&self, z: f64, i: usize) -> f64 {
        z * self.std[i] + self.mean[i]
    }

    /// Normalized states (`n` columns) to coded features (`n + k` columns).
    pub fn encode(&self, x: &Matrix) -> Matrix {
        let k = self.count();
        Matrix::from_fn(x.rows(), x.cols() + k, |r, c| {
            if c < k {
                self.angle(x.get(r, c), c).cos()
            } else if c < 2 * k {
                self.angle(x.get(r, c - k), c - k).sin()
            } else {
                x.get(r, c - k)
            }
        })
    }

    /// Gradient w.r.t. the normalized states given one w.r.t. the features.
    pub fn encode_backward(&self, x: &Matrix, d_feat: &Matrix) -> Matrix {
        let k = self.count();
        Matrix::from_fn(x.rows(), x.cols(), |r, c| {
            if c < k {
                let (sin, cos) = self.angle(x.get(r, c), c).sin_cos();
                self.std[c] * (-sin * d_feat.get(r, c) + cos * d_feat.get(r, c + k))
            } else {
                d_feat.get(r, c + k)
            }
        })
    }

    /// Coded decoder outputs (`n + k` columns) to normalized states (`n` columns).
    pub fn decode(&self, y: &Matrix) -> Matrix {
        let k = self.count();
        Matrix::from_fn(y.rows(), y.cols() - k, |r, c| {
            if c < k {
                (y.get(r, c + k).atan2(y.get(r, c)) - self.mean[c]) / self.std[c]
            } else {
                y.get(r, c + k)
            }
        })
    }

    /// Gradient w.r.t. the coded outputs given one w.r.t. the decoded states.
    pub fn decode_backward(&self, y: &Matrix, d_x: &Matrix) -> Matrix {
        let k = self.count();
        Matrix::from_fn(y.rows(), y.cols(), |r, c| {
            if c < 2 * k {
                let i = c % k;
                let (cos, sin) = (y.get(r, i), y.get(r, i + k));
                let scale = d_x.get(r, i) / (self.std[i] * (cos * cos + sin * sin).max(MIN_RADIUS_SQ));
                if c < k {
                    -sin * scale
                } else {
                    cos * scale
                }
            } else {
                d_x.get(r, c - k)
            }
        })
    }

    /// `out − target`, with angle columns replaced by the shortest angular difference.
    pub fn residual(&self, out: &Matrix, target: &Matrix) -> Result<Matrix> {
        let mut d = out.sub(target)?;
        for r in 0..d.rows() {
            for (c, sd) in self.std.iter().enumerate() {
                d.set(r, c, wrap_angle(d.get(r, c) * sd) / sd);
            }
        }
        Ok(d)
    }

    /// [`mse_with_grad`] on the periodic residual.
    pub fn mse_with_grad(&self, out: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
        let r = self.residual(out, target)?;
        Ok(mse_with_grad(out, &out.sub(&r)?)?)
    }

    pub fn mse(&self, out: &Matrix, target: &Matrix) -> Result<f64> {
        Ok(self.mse_with_grad(out, target)?.0)
    }
}

/// The four networks behind ψ and φ with the angle coding of each domain.
#[derive(Clone, Debug)]
pub struct StateMapPair {
    pub enc_e: Mlp,
    pub dec_e: Mlp,
    pub enc_a: Mlp,
    pub dec_a: Mlp,
    pub expert_angles: AngleCodec,
    pub agent_angles: AngleCodec,
}

fn coder<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Result<Mlp> {
    Ok(Mlp::with_hidden(
        input,
        hidden,
        output,
        Activation::LeakyRelu,
        Activation::Identity,
        false,
        rng,
    )?)
}

impl StateMapPair {
    /// Maps without angle coding. `expert_dim` and `agent_dim` count non-goal dimensions.
    pub fn new<R: Rng + ?Sized>(
        expert_dim: usize,
        agent_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_angles(
            expert_dim,
            agent_dim,
            AngleCodec::default(),
            AngleCodec::default(),
            latent_dim,
            hidden,
            rng,
        )
    }

    pub fn with_angles<R: Rng + ?Sized>(
        expert_dim: usize,
        agent_dim: usize,
        expert_angles: AngleCodec,
        agent_angles: AngleCodec,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if expert_angles.count() > expert_dim || agent_angles.count() > agent_dim {
            return Err(Error::Dimension("more angle dims than state dims".into()));
        }
        let fe = expert_dim + expert_angles.count();
        let fa = agent_dim + agent_angles.count();
        Ok(Self {
            enc_e: coder(fe, hidden, latent_dim, rng)?,
            dec_e: coder(latent_dim, hidden, fa, rng)?,
            enc_a: coder(fa, hidden, latent_dim, rng)?,
            dec_a: coder(latent_dim, hidden, fe, rng)?,
            expert_angles,
            agent_angles,
        })
    }

    pub fn from_nets(
        enc_e: Mlp,
        dec_e: Mlp,
        enc_a: Mlp,
        dec_a: Mlp,
        expert_angles: AngleCodec,
        agent_angles: AngleCodec,
    ) -> Result<Self> {
        let maps = Self {
            enc_e,
            dec_e,
            enc_a,
            dec_a,
            expert_angles,
            agent_angles,
        };
        let z = maps.enc_e.output_dim();
        let fe = maps.enc_e.input_dim();
        let fa = maps.enc_a.input_dim();
        let ok = maps.dec_e.input_dim() == z
            && maps.enc_a.output_dim() == z
            && maps.dec_a.input_dim() == z
            && maps.dec_e.output_dim() == fa
            && maps.dec_a.output_dim() == fe
            && fe >= 2 * maps.expert_angles.count()
            && fa >= 2 * maps.agent_angles.count();
        if !ok {
            return Err(Error::Dimension("state map networks do not compose".into()));
        }
        Ok(maps)
    }

    pub fn expert_dim(&self) -> usize {
        self.enc_e.input_dim() - self.expert_angles.count()
    }

    pub fn agent_dim(&self) -> usize {
        self.enc_a.input_dim() - self.agent_angles.count()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_e.output_dim()
    }

    pub fn encode_e(&self, x_e: &Matrix) -> Result<Matrix> {
        Ok(self.enc_e.forward(&self.expert_angles.encode(x_e))?)
    }

    pub fn encode_a(&self, x_a: &Matrix) -> Result<Matrix> {
        Ok(self.enc_a.forward(&self.agent_angles.encode(x_a))?)
    }

    /// `Dec_E`: latent to normalized agent states.
    pub fn decode_e(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.agent_angles.decode(&self.dec_e.forward(z)?))
    }

    /// `Dec_A`: latent to normalized expert states.
    pub fn decode_a(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.expert_angles.decode(&self.dec_a.forward(z)?))
    }

    pub fn psi(&self, x_e: &Matrix) -> Result<Matrix> {
        self.decode_e(&self.encode_e(x_e)?)
    }

    pub fn phi(&self, x_a: &Matrix) -> Result<Matrix> {
        self.decode_a(&self.encode_a(x_a)?)
    }

    pub fn nets(&self) -> [&Mlp; 4] {
        [&self.enc_e, &self.dec_e, &self.enc_a, &self.dec_a]
    }

    pub fn fingerprint(&self) -> Vec<u64> {
        self.nets().iter().flat_map(|n| n.fingerprint()).collect()
    }
}

/// Per-task transition discriminators and latent domain classifiers.
#[derive(Clone, Debug)]
pub struct DiscriminatorSet {
    /// Agent-frame discriminators, fed `(s, s′)` pairs.
    pub d_a: Vec<Mlp>,
    pub d_e: Vec<Mlp>,
    /// Sigmoid heads estimating P(expert | z, z′).
    pub q: Vec<Mlp>,
}

impl DiscriminatorSet {
    pub fn new<R: Rng + ?Sized>(
        num_tasks: usize,
        expert_dim: usize,
        agent_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let make = |input: usize, out_act: Activation, rng: &mut R| {
            Mlp::with_hidden(input, hidden, 1, Activation::LeakyRelu, out_act, true, rng)
        };
        let mut set = Self {
            d_a: Vec::new(),
            d_e: Vec::new(),
            q: Vec::new(),
        };
        for _ in 0..num_tasks {
            set.d_a.push(make(2 * agent_dim, Activation::Identity, rng)?);
            set.d_e.push(make(2 * expert_dim, Activation::Identity, rng)?);
            set.q.push(make(2 * latent_dim, Activation::Sigmoid, rng)?);
        }
        Ok(set)
    }

    pub fn num_tasks(&self) -> usize {
        self.d_a.len()
    }

    pub fn fingerprint(&self) -> Vec<u64> {
        self.d_a
            .iter()
            .chain(&self.d_e)
            .chain(&self.q)
            .flat_map(|n| n.fingerprint())
            .collect()
    }
}

/// Stacks `[x_t; x_{t+1}]` (2B rows) into `(x_t, x_{t+1})` pairs (B rows).
fn pairs(x: &Matrix) -> Result<Matrix> {
    let b = x.rows() / 2;
    Ok(Matrix::hcat(&[&x.rows_range(0..b)?, &x.rows_range(b..2 * b)?])?)
}

/// Inverse of [`pairs`] for gradients.
fn unpairs(g: &Matrix, n: usize) -> Result<Matrix> {
    Ok(Matrix::vcat(&[&g.cols_range(0..n)?, &g.cols_range(n..2 * n)?])?)
}

fn batch_states(batch: &TransitionBatch, n: usize) -> Result<Matrix> {
    Ok(Matrix::vcat(&[&batch.s.cols_range(0..n)?, &batch.s_next.cols_range(0..n)?])?)
}

fn check_batches(e: &TransitionBatch, a: &TransitionBatch, tasks: usize) -> Result<()> {
    if e.domain != Domain::Expert || a.domain != Domain::Agent {
        return Err(Error::InvalidConfig("batches must be (expert, agent)".into()));
    }
    if e.task != a.task || e.task >= tasks {
        return Err(Error::InvalidConfig(format!(
            "task mismatch: expert batch {}, agent batch {}, {tasks} discriminators",
            e.task, a.task
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ExpertToAgent,
    AgentToExpert,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvTerms {
    pub disc_loss: f64,
    pub gen_loss: f64,
}

/// Least-squares adversarial losses of one direction on normalized batches.
///
/// Expert→agent compares `(ψ(s_E), ψ(s_E′))` against real agent transitions
/// through `D_A^j`; agent→expert uses φ and `D_E^j`.
pub fn adv_loss_terms(
    maps: &StateMapPair,
    discs: &DiscriminatorSet,
    batch_e: &TransitionBatch,
    batch_a: &TransitionBatch,
    direction: Direction,
) -> Result<AdvTerms> {
    check_batches(batch_e, batch_a, discs.num_tasks())?;
    let j = batch_e.task;
    let xe = batch_states(batch_e, maps.expert_dim())?;
    let xa = batch_states(batch_a, maps.agent_dim())?;
    let (real, fake, d) = match direction {
        Direction::ExpertToAgent => (pairs(&xa)?, pairs(&maps.psi(&xe)?)?, &discs.d_a[j]),
        Direction::AgentToExpert => (pairs(&xe)?, pairs(&maps.phi(&xa)?)?, &discs.d_e[j]),
    };
    let l = lsq_adv_losses(&d.forward(&real)?, &d.forward(&fake)?)?;
    Ok(AdvTerms {
        disc_loss: l.disc_loss,
        gen_loss: l.gen_loss,
    })
}

/// `mse(φ(ψ(x_E)), x_E) + mse(ψ(φ(x_A)), x_A)` on non-goal normalized states,
/// with angular residuals on periodic dimensions.
pub fn cycle_loss(maps: &StateMapPair, x_e: &Matrix, x_a: &Matrix) -> Result<f64> {
    Ok(maps.expert_angles.mse(&maps.phi(&maps.psi(x_e)?)?, x_e)?
        + maps.agent_angles.mse(&maps.psi(&maps.phi(x_a)?)?, x_a)?)
}

/// `mse(Enc_A(ψ(x_E)), Enc_E(x_E)) + mse(Enc_E(φ(x_A)), Enc_A(x_A))`.
pub fn latent_consistency_loss(maps: &StateMapPair, x_e: &Matrix, x_a: &Matrix) -> Result<f64> {
    let ze = maps.encode_e(x_e)?;
    let za = maps.encode_a(x_a)?;
    let zea = maps.encode_a(&maps.decode_e(&ze)?)?;
    let zae = maps.encode_e(&maps.decode_a(&za)?)?;
    Ok(mse(&zea, &ze)? + mse(&zae, &za)?)
}

/// Mean over the two domains of the classifier's cross-entropy on latent
/// transitions, with label 1 for expert and 0 for agent.
pub fn mi_loss(
    maps: &StateMapPair,
    q: &Mlp,
    batch_e: &TransitionBatch,
    batch_a: &TransitionBatch,
) -> Result<f64> {
    let ze = maps.encode_e(&batch_states(batch_e, maps.expert_dim())?)?;
    let za = maps.encode_a(&batch_states(batch_a, maps.agent_dim())?)?;
    let pe = q.forward(&pairs(&ze)?)?;
    let pa = q.forward(&pairs(&za)?)?;
    let le = bce(&pe, &Matrix::filled(pe.rows(), 1, 1.0))?;
    let la = bce(&pa, &Matrix::zeros(pa.rows(), 1))?;
    Ok(0.5 * (le + la))
}

/// `mse(φ(ψ(x_E)), x_E)` on inference-task expert states.
pub fn inference_cycle_loss(maps: &StateMapPair, x_e: &Matrix) -> Result<f64> {
    maps.expert_angles.mse(&maps.phi(&maps.psi(x_e)?)?, x_e)
}

/// Unweighted loss values of one proxy task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskTerms {
    pub adv_a: f64,
    pub adv_e: f64,
    pub cyc: f64,
    pub z: f64,
    pub mi: f64,
    pub pos: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceTerms {
    pub cyc_inf: f64,
    pub pos_inf: f64,
}

/// `λ1(adv_A + adv_E) + λ2(cyc + z) + λ3·pos − λ4·MI` for one task.
pub fn task_objective(hp: &AlignHyperparams, t: &TaskTerms) -> f64 {
    hp.lambda1 * (t.adv_a + t.adv_e) + hp.lambda2 * (t.cyc + t.z) + hp.lambda3 * t.pos
        - hp.lambda4 * t.mi
}

pub fn inference_objective(hp: &AlignHyperparams, t: &InferenceTerms) -> f64 {
    hp.lambda5 * (t.cyc_inf + t.pos_inf)
}

/// The generator-side scalar with every signed, weighted contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub breakdown: Vec<(String, f64)>,
}

pub fn total_objective(hp: &AlignHyperparams, tasks: &[TaskTerms], inf: &InferenceTerms) -> Objective {
    let mut breakdown = Vec::new();
    for (j, t) in tasks.iter().enumerate() {
        breakdown.push((format!("task{j}/adv_A"), hp.lambda1 * t.adv_a));
        breakdown.push((format!("task{j}/adv_E"), hp.lambda1 * t.adv_e));
        breakdown.push((format!("task{j}/cyc"), hp.lambda2 * t.cyc));
        breakdown.push((format!("task{j}/z"), hp.lambda2 * t.z));
        breakdown.push((format!("task{j}/pos"), hp.lambda3 * t.pos));
        breakdown.push((format!("task{j}/MI"), -hp.lambda4 * t.mi));
    }
    breakdown.push(("cyc_inf".into(), hp.lambda5 * inf.cyc_inf));
    breakdown.push(("pos_inf".into(), hp.lambda5 * inf.pos_inf));
    Objective {
        total: breakdown.iter().map(|(_, v)| v).sum(),
        breakdown,
    }
}

/// Frozen estimators, aligned with the dataset's proxy tasks and with the
/// inference tasks.
#[derive(Clone, Debug)]
pub struct EstimatorSet {
    pub proxy_e: Vec<PositionEstimator>,
    pub proxy_a: Vec<PositionEstimator>,
    pub inference: Vec<PositionEstimator>,
}

impl EstimatorSet {
    pub fn fingerprint(&self) -> Vec<u64> {
        self.proxy_e
            .iter()
            .chain(&self.proxy_a)
            .chain(&self.inference)
            .flat_map(|e| e.net.fingerprint())
            .collect()
    }
}

/// Everything alignment reads. Trajectories are raw observations.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentData<'a> {
    pub dataset: &'a ProxyDataset,
    /// Expert demonstrations per inference task.
    pub inference: &'a [Vec<Trajectory>],
    pub norm_e: &'a Normalizer,
    pub norm_a: &'a Normalizer,
    pub estimators: &'a EstimatorSet,
    pub goal_frame: GoalFrame,
    /// Leading expert dimensions that are joint angles.
    pub expert_angle_dims: usize,
    /// Leading agent dimensions that are joint angles.
    pub agent_angle_dims: usize,
}

/// One row of the alignment metrics log: per-term means over an inner loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub task: String,
    pub terms: TaskTerms,
    pub inference: InferenceTerms,
    pub total: f64,
    /// Discriminator and classifier losses (diagnostics, not part of `total`).
    pub disc_a: f64,
    pub disc_e: f64,
    pub q_loss: f64,
}

pub const METRICS_HEADER: &str = "iter,task,L_adv_A,L_adv_E,L_cyc,L_z,L_MI,L_pos,L_cyc_inf,L_pos_inf,total";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let t = &r.terms;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.task,
            t.adv_a,
            t.adv_e,
            t.cyc,
            t.z,
            t.mi,
            t.pos,
            r.inference.cyc_inf,
            r.inference.pos_inf,
            r.total
        )
        .expect("writing to a String");
    }
    out
}

/// Trained maps with the frames needed to apply them to raw observations.
#[derive(Clone, Debug)]
pub struct AlignmentModel {
    pub maps: StateMapPair,
    pub norm_e: Normalizer,
    pub norm_a: Normalizer,
    pub goal_frame: GoalFrame,
    pub hyperparams: AlignHyperparams,
    pub seed: u64,
    pub scenario: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AlignmentManifest {
    format: String,
    scenario: Option<String>,
    seed: u64,
    hyperparams: AlignHyperparams,
    norm_e: Normalizer,
    norm_a: Normalizer,
    goal_frame: GoalFrame,
    expert_angles: AngleCodec,
    agent_angles: AngleCodec,
    num_tasks: usize,
    num_inference_tasks: usize,
}

const MAP_FILES: [&str; 4] = ["enc_e", "dec_e", "enc_a", "dec_a"];
const ALIGN_FORMAT: &str = "xalign-alignment/1";

fn write_net(dir: &Path, name: &str, net: &Mlp, role: &str) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("role".to_string(), json!(role));
    fs::write(dir.join(format!("{name}.json")), ModelFile::from_mlp(net, meta).to_json())?;
    Ok(())
}

fn read_net(dir: &Path, name: &str) -> Result<Mlp> {
    let path = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::MissingArtifacts(format!("{}: {e}", path.display())))?;
    Ok(ModelFile::from_json(&text)?.to_mlp()?)
}

impl AlignmentModel {
    pub fn expert_obs_dim(&self) -> usize {
        self.maps.expert_dim() + GOAL_DIMS
    }

    pub fn agent_obs_dim(&self) -> usize {
        self.maps.agent_dim() + GOAL_DIMS
    }

    /// Writes the maps, discriminators, latent predictors and a manifest into `dir`.
    pub fn save(&self, dir: &Path, discs: &DiscriminatorSet, p_z: &[Mlp]) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, net) in MAP_FILES.iter().zip(self.maps.nets()) {
            write_net(dir, name, net, "state_map")?;
        }
        for j in 0..discs.num_tasks() {
            write_net(dir, &format!("disc_a_{j}"), &discs.d_a[j], "discriminator")?;
            write_net(dir, &format!("disc_e_{j}"), &discs.d_e[j], "discriminator")?;
            write_net(dir, &format!("q_{j}"), &discs.q[j], "latent_classifier")?;
        }
        for (t, net) in p_z.iter().enumerate() {
            write_net(dir, &format!("p_z_{t}"), net, "latent_position")?;
        }
        let manifest = AlignmentManifest {
            format: ALIGN_FORMAT.into(),
            scenario: self.scenario.clone(),
            seed: self.seed,
            hyperparams: self.hyperparams.clone(),
            norm_e: self.norm_e.clone(),
            norm_a: self.norm_a.clone(),
            goal_frame: self.goal_frame,
            expert_angles: self.maps.expert_angles.clone(),
            agent_angles: self.maps.agent_angles.clone(),
            num_tasks: discs.num_tasks(),
            num_inference_tasks: p_z.len(),
        };
        fs::write(dir.join("alignment.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads the maps and frames written by [`AlignmentModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("alignment.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::MissingArtifacts(format!("{}: {e}", path.display())))?;
        let m: AlignmentManifest = serde_json::from_str(&text)?;
        if m.format != ALIGN_FORMAT {
            return Err(Error::InvalidConfig(format!("unknown alignment format {}", m.format)));
        }
        let maps = StateMapPair::from_nets(
            read_net(dir, "enc_e")?,
            read_net(dir, "dec_e")?,
            read_net(dir, "enc_a")?,
            read_net(dir, "dec_a")?,
            m.expert_angles,
            m.agent_angles,
        )?;
        let model = Self {
            maps,
            norm_e: m.norm_e,
            norm_a: m.norm_a,
            goal_frame: m.goal_frame,
            hyperparams: m.hyperparams,
            seed: m.seed,
            scenario: m.scenario,
        };
        if model.norm_e.dim() != model.expert_obs_dim() || model.norm_a.dim() != model.agent_obs_dim() {
            return Err(Error::Dimension("normalizers do not match the state maps".into()));
        }
        Ok(model)
    }

    /// ψ applied to raw expert observations, returning raw agent observations.
    pub fn map_states(&self, states: &Matrix) -> Result<Matrix> {
        if states.cols() != self.expert_obs_dim() {
            return Err(Error::Dimension(format!(
                "expert states have dim {}, the alignment expects {}",
                states.cols(),
                self.expert_obs_dim()
            )));
        }
        let n_e = self.maps.expert_dim();
        let z = self.norm_e.apply_matrix(states);
        let psi = self.maps.psi(&z.cols_range(0..n_e)?)?;
        let goals = map_goal_cols(&z.cols_range(n_e..n_e + GOAL_DIMS)?, |g| self.goal_frame.to_agent(g));
        let mut out = self.norm_a.unapply_matrix(&Matrix::hcat(&[&psi, &goals])?);
        // Denormalizing can push a wrapped angle a rounding error past ±π.
        for r in 0..out.rows() {
            for c in 0..self.maps.agent_angles.count() {
                out.set(r, c, wrap_angle(out.get(r, c)));
            }
        }
        Ok(out)
    }
}

fn map_goal_cols(g: &Matrix, f: impl Fn([f64; 2]) -> [f64; 2]) -> Matrix {
    let mut out = g.clone();
    for r in 0..g.rows() {
        let m = f([g.get(r, 0), g.get(r, 1)]);
        out.set(r, 0, m[0]);
        out.set(r, 1, m[1]);
    }
    out
}

/// Translates expert demonstrations into the agent domain. Lengths, task ids
/// and reach flags are preserved; actions are never carried over.
pub fn transfer_demos(model: &AlignmentModel, demos: &[Trajectory]) -> Result<Vec<Trajectory>> {
    demos
        .iter()
        .map(|t| {
            if t.domain != Domain::Expert {
                return Err(Error::InvalidConfig(format!(
                    "transfer expects expert trajectories, got {} for {}",
                    t.domain.tag(),
                    t.task_id
                )));
            }
            t.validate()?;
            let mapped = model.map_states(&t.states_matrix())?;
            Ok(Trajectory {
                domain: Domain::Agent,
                task_id: t.task_id.clone(),
                states: mapped.row_iter().map(<[f64]>::to_vec).collect(),
                actions: None,
                reached: t.reached,
            })
        })
        .collect()
}

/// Normalized states of one task and domain with the frozen estimator's
/// position for every row.
struct Side {
    pool: TransitionPool,
    positions: Vec<f64>,
}

impl Side {
    fn new(trajs: &[Trajectory], norm: &Normalizer, est: &PositionEstimator) -> Result<Self> {
        let normalized: Vec<Trajectory> = trajs
            .iter()
            .map(|t| Trajectory {
                states: t.states.iter().map(|s| norm.apply(s)).collect(),
                actions: None,
                ..t.clone()
            })
            .collect();
        let pool = TransitionPool::new(&normalized)?;
        let positions = est.predict_normalized(pool.states())?.into_vec();
        Ok(Self { pool, positions })
    }

    /// `[s_t; s_{t+1}]` (2B rows, full normalized states) and their positions.
    fn gather<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<(Matrix, Matrix)> {
        let starts = self.pool.sample_starts(batch, rng)?;
        let rows: Vec<usize> = starts.iter().copied().chain(starts.iter().map(|r| r + 1)).collect();
        let pos = rows.iter().map(|&r| self.positions[r]).collect();
        Ok((
            self.pool.states().select_rows(&rows),
            Matrix::from_vec(rows.len(), 1, pos)?,
        ))
    }
}

struct InferenceBuf {
    states: Matrix,
    positions: Vec<f64>,
}

#[derive(Default)]
struct Accum {
    n: usize,
    terms: TaskTerms,
    inf: InferenceTerms,
    disc_a: f64,
    disc_e: f64,
    q: f64,
}

impl Accum {
    fn mean(&self) -> Self {
        let k = self.n.max(1) as f64;
        let t = &self.terms;
        Self {
            n: self.n,
            terms: TaskTerms {
                adv_a: t.adv_a / k,
                adv_e: t.adv_e / k,
                cyc: t.cyc / k,
                z: t.z / k,
                mi: t.mi / k,
                pos: t.pos / k,
            },
            inf: InferenceTerms {
                cyc_inf: self.inf.cyc_inf / k,
                pos_inf: self.inf.pos_inf / k,
            },
            disc_a: self.disc_a / k,
            disc_e: self.disc_e / k,
            q: self.q / k,
        }
    }
}

fn finite(v: f64, term: &'static str, iter: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { term, iter })
    }
}

struct MapOpts {
    enc_e: Adam,
    dec_e: Adam,
    enc_a: Adam,
    dec_a: Adam,
}

/// Result of [`train_alignment`].
#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub model: AlignmentModel,
    pub discriminators: DiscriminatorSet,
    pub p_z: Vec<Mlp>,
    pub metrics: Vec<MetricsRow>,
}

struct Trainer<'a> {
    hp: &'a AlignHyperparams,
    data: AlignmentData<'a>,
    maps: StateMapPair,
    discs: DiscriminatorSet,
    p_z: Vec<Mlp>,
    map_opts: MapOpts,
    d_a_opts: Vec<Adam>,
    d_e_opts: Vec<Adam>,
    q_opts: Vec<Adam>,
    p_z_opts: Vec<Adam>,
    tasks: Vec<(Side, Side)>,
    inference: Vec<InferenceBuf>,
    rng: ChaCha8Rng,
    iter: usize,
}

fn lsq_disc_step(d: &mut Mlp, opt: &mut Adam, real: &Matrix, fake: &Matrix) -> Result<f64> {
    let b = real.rows();
    let (out, trace) = d.forward_trace(&Matrix::vcat(&[real, fake])?)?;
    let l = lsq_adv_losses(&out.rows_range(0..b)?, &out.rows_range(b..out.rows())?)?;
    let g = Matrix::vcat(&[&l.d_disc_d_real, &l.d_disc_d_fake])?;
    let (grads, _) = d.backward(&trace, &g)?;
    opt.step(d, &grads)?;
    d.power_iterate()?;
    Ok(l.disc_loss)
}

/// Generator-side adversarial loss and its gradient w.r.t. the stacked fake states.
fn lsq_gen_grad(d: &Mlp, fake_states: &Matrix) -> Result<(f64, Matrix)> {
    let n = fake_states.cols();
    let (out, trace) = d.forward_trace(&pairs(fake_states)?)?;
    let b = out.rows() as f64;
    let loss = out.as_slice().iter().map(|o| (o - 1.0).powi(2)).sum::<f64>() / b;
    let g = out.map(|o| 2.0 * (o - 1.0) / b);
    Ok((loss, unpairs(&d.backward_input(&trace, &g)?, n)?))
}

/// Position mismatch of mapped states and the gradient w.r.t. them.
fn pos_grad(est: &PositionEstimator, mapped: &Matrix, goals: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let n = mapped.cols();
    let mut loss = 0.0;
    let (_, dx) = est.predict_with_input_grad(&Matrix::hcat(&[mapped, goals])?, |out| {
        let (l, g) = mse_with_grad(out, target)?;
        loss = l;
        Ok(g)
    })?;
    Ok((loss, dx.cols_range(0..n)?))
}

impl<'a> Trainer<'a> {
    fn new(data: AlignmentData<'a>, hp: &'a AlignHyperparams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let ds = data.dataset;
        let est = data.estimators;
        let m = ds.num_tasks();
        if est.proxy_e.len() != m || est.proxy_a.len() != m {
            return Err(Error::NotReady(format!(
                "need expert and agent position estimators for {m} proxy tasks, have {} and {}",
                est.proxy_e.len(),
                est.proxy_a.len()
            )));
        }
        if data.inference.is_empty() && hp.lambda5 > 0.0 {
            return Err(Error::EmptyData("inference adaptation needs inference demonstrations".into()));
        }
        if hp.pos_inf_active() && est.inference.len() != data.inference.len() {
            return Err(Error::NotReady(format!(
                "need {} inference-task estimators, have {}",
                data.inference.len(),
                est.inference.len()
            )));
        }
        let check_est = |e: &PositionEstimator, domain: Domain, task: &str, norm: &Normalizer| {
            if !e.is_trained() || e.domain != domain || e.task_id != task {
                return Err(Error::NotReady(format!(
                    "missing trained {} position estimator for {task}",
                    domain.tag()
                )));
            }
            if &e.normalizer != norm {
                return Err(Error::InvalidConfig(format!(
                    "estimator {}/{task} was fit with a different normalizer",
                    domain.tag()
                )));
            }
            Ok(())
        };
        for (j, t) in ds.tasks().iter().enumerate() {
            check_est(&est.proxy_e[j], Domain::Expert, &t.task_id, data.norm_e)?;
            check_est(&est.proxy_a[j], Domain::Agent, &t.task_id, data.norm_a)?;
        }
        let n_e = data.norm_e.dim().checked_sub(GOAL_DIMS).filter(|&n| n > 0);
        let n_a = data.norm_a.dim().checked_sub(GOAL_DIMS).filter(|&n| n > 0);
        let (Some(n_e), Some(n_a)) = (n_e, n_a) else {
            return Err(Error::Dimension("observations need non-goal dimensions".into()));
        };
        let tasks = ds
            .tasks()
            .iter()
            .enumerate()
            .map(|(j, t)| {
                Ok((
                    Side::new(&t.expert, data.norm_e, &est.proxy_e[j])?,
                    Side::new(&t.agent, data.norm_a, &est.proxy_a[j])?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut inference = Vec::new();
        for (t, demos) in data.inference.iter().enumerate() {
            if demos.is_empty() {
                return Err(Error::EmptyData(format!("inference task {t} has no demonstrations")));
            }
            if demos.iter().any(|d| d.domain != Domain::Expert || d.state_dim() != n_e + GOAL_DIMS) {
                return Err(Error::Dimension(format!(
                    "inference task {t} needs expert states of dim {}",
                    n_e + GOAL_DIMS
                )));
            }
            let rows: Vec<Vec<f64>> = demos
                .iter()
                .flat_map(|d| d.states.iter().map(|s| data.norm_e.apply(s)))
                .collect();
            let states = Matrix::from_rows(&rows)?;
            let positions = if hp.pos_inf_active() {
                let e = &est.inference[t];
                check_est(e, Domain::Expert, &demos[0].task_id, data.norm_e)?;
                e.predict_normalized(&states)?.into_vec()
            } else {
                vec![0.0; states.rows()]
            };
            inference.push(InferenceBuf { states, positions });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = StateMapPair::with_angles(
            n_e,
            n_a,
            AngleCodec::from_normalizer(data.norm_e, data.expert_angle_dims)?,
            AngleCodec::from_normalizer(data.norm_a, data.agent_angle_dims)?,
            hp.latent_dim,
            &hp.map_hidden,
            &mut rng,
        )?;
        let discs = DiscriminatorSet::new(m, n_e, n_a, hp.latent_dim, &hp.disc_hidden, &mut rng)?;
        let p_z = (0..inference.len())
            .map(|_| {
                Mlp::with_hidden(
                    hp.latent_dim,
                    &hp.p_z_hidden,
                    1,
                    Activation::Relu,
                    Activation::Identity,
                    false,
                    &mut rng,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let adam = || Adam::new(hp.lr);
        Ok(Self {
            hp,
            data,
            maps,
            discs,
            map_opts: MapOpts {
                enc_e: adam(),
                dec_e: adam(),
                enc_a: adam(),
                dec_a: adam(),
            },
            d_a_opts: (0..m).map(|_| adam()).collect(),
            d_e_opts: (0..m).map(|_| adam()).collect(),
            q_opts: (0..m).map(|_| adam()).collect(),
            p_z_opts: p_z.iter().map(|_| adam()).collect(),
            p_z,
            tasks,
            inference,
            rng,
            iter: 0,
        })
    }

    fn n_e(&self) -> usize {
        self.maps.expert_dim()
    }

    fn n_a(&self) -> usize {
        self.maps.agent_dim()
    }

    fn apply_map_grads(&mut self, g: [Gradients; 4]) -> Result<()> {
        let [ge, gde, ga, gda] = g;
        self.map_opts.enc_e.step(&mut self.maps.enc_e, &ge)?;
        self.map_opts.dec_e.step(&mut self.maps.dec_e, &gde)?;
        self.map_opts.enc_a.step(&mut self.maps.enc_a, &ga)?;
        self.map_opts.dec_a.step(&mut self.maps.dec_a, &gda)?;
        Ok(())
    }

    /// One minibatch of Algorithm 1's inner loop for proxy task `j`.
    fn task_step(&mut self, j: usize, acc: &mut Accum) -> Result<()> {
        let hp = self.hp;
        let it = self.iter;
        let (n_e, n_a) = (self.n_e(), self.n_a());
        let (side_e, side_a) = &self.tasks[j];
        let (e_full, pos_e) = side_e.gather(hp.batch_size, &mut self.rng)?;
        let (a_full, pos_a) = side_a.gather(hp.batch_size, &mut self.rng)?;
        let xe = e_full.cols_range(0..n_e)?;
        let xa = a_full.cols_range(0..n_a)?;

        let maps = &self.maps;
        let (ce, ca) = (&maps.expert_angles, &maps.agent_angles);
        let (ze, t_ze) = maps.enc_e.forward_trace(&ce.encode(&xe))?;
        let (y_psi, t_psi) = maps.dec_e.forward_trace(&ze)?;
        let psi = ca.decode(&y_psi);
        let (zea, t_zea) = maps.enc_a.forward_trace(&ca.encode(&psi))?;
        let (y_cyc_e, t_cyc_e) = maps.dec_a.forward_trace(&zea)?;
        let cyc_e = ce.decode(&y_cyc_e);
        let (za, t_za) = maps.enc_a.forward_trace(&ca.encode(&xa))?;
        let (y_phi, t_phi) = maps.dec_a.forward_trace(&za)?;
        let phi = ce.decode(&y_phi);
        let (zae, t_zae) = maps.enc_e.forward_trace(&ce.encode(&phi))?;
        let (y_cyc_a, t_cyc_a) = maps.dec_e.forward_trace(&zae)?;
        let cyc_a = ca.decode(&y_cyc_a);

        // Adversaries first; the map parameters stay fixed until the
        // generator update below, so the traces above remain valid.
        acc.disc_a += finite(
            lsq_disc_step(&mut self.discs.d_a[j], &mut self.d_a_opts[j], &pairs(&xa)?, &pairs(&psi)?)?,
            "D_A",
            it,
        )?;
        acc.disc_e += finite(
            lsq_disc_step(&mut self.discs.d_e[j], &mut self.d_e_opts[j], &pairs(&xe)?, &pairs(&phi)?)?,
            "D_E",
            it,
        )?;
        if hp.lambda4 > 0.0 {
            let q = &mut self.discs.q[j];
            let x = Matrix::vcat(&[&pairs(&ze)?, &pairs(&za)?])?;
            let b = x.rows() / 2;
            let labels = Matrix::from_fn(2 * b, 1, |r, _| if r < b { 1.0 } else { 0.0 });
            let (p, trace) = q.forward_trace(&x)?;
            let (l, g) = bce_with_grad(&p, &labels)?;
            let (grads, _) = q.backward(&trace, &g)?;
            self.q_opts[j].step(q, &grads)?;
            q.power_iterate()?;
            acc.q += finite(l, "q", it)?;
        }

        let mut terms = TaskTerms::default();
        let mut d_psi = Matrix::zeros(psi.rows(), n_a);
        let mut d_phi = Matrix::zeros(phi.rows(), n_e);
        let mut d_ze = Matrix::zeros(ze.rows(), ze.cols());
        let mut d_za = Matrix::zeros(za.rows(), za.cols());
        let mut d_zea = Matrix::zeros(zea.rows(), zea.cols());
        let mut d_zae = Matrix::zeros(zae.rows(), zae.cols());
        let mut d_cyc_e = Matrix::zeros(cyc_e.rows(), n_e);
        let mut d_cyc_a = Matrix::zeros(cyc_a.rows(), n_a);

        if hp.lambda1 > 0.0 {
            let (la, ga) = lsq_gen_grad(&self.discs.d_a[j], &psi)?;
            let (le, ge) = lsq_gen_grad(&self.discs.d_e[j], &phi)?;
            terms.adv_a = finite(la, "L_adv_A", it)?;
            terms.adv_e = finite(le, "L_adv_E", it)?;
            d_psi.axpy(hp.lambda1, &ga)?;
            d_phi.axpy(hp.lambda1, &ge)?;
        }
        if hp.lambda2 > 0.0 {
            let (l1, g1) = ce.mse_with_grad(&cyc_e, &xe)?;
            let (l2, g2) = ca.mse_with_grad(&cyc_a, &xa)?;
            terms.cyc = finite(l1 + l2, "L_cyc", it)?;
            d_cyc_e.axpy(hp.lambda2, &g1)?;
            d_cyc_a.axpy(hp.lambda2, &g2)?;
            let (l3, g3) = mse_with_grad(&zea, &ze)?;
            let (l4, g4) = mse_with_grad(&zae, &za)?;
            terms.z = finite(l3 + l4, "L_z", it)?;
            d_zea.axpy(hp.lambda2, &g3)?;
            d_ze.axpy(-hp.lambda2, &g3)?;
            d_zae.axpy(hp.lambda2, &g4)?;
            d_za.axpy(-hp.lambda2, &g4)?;
        }
        if hp.lambda3 > 0.0 {
            let est = self.data.estimators;
            let frame = self.data.goal_frame;
            let goals_e = e_full.cols_range(n_e..n_e + GOAL_DIMS)?;
            let goals_a = a_full.cols_range(n_a..n_a + GOAL_DIMS)?;
            let (l1, g1) = pos_grad(
                &est.proxy_a[j],
                &psi,
                &map_goal_cols(&goals_e, |g| frame.to_agent(g)),
                &pos_e,
            )?;
            let (l2, g2) = pos_grad(
                &est.proxy_e[j],
                &phi,
                &map_goal_cols(&goals_a, |g| frame.to_expert(g)),
                &pos_a,
            )?;
            terms.pos = finite(l1 + l2, "L_pos", it)?;
            d_psi.axpy(hp.lambda3, &g1)?;
            d_phi.axpy(hp.lambda3, &g2)?;
        }
        if hp.lambda4 > 0.0 {
            let q = &self.discs.q[j];
            let z_dim = ze.cols();
            let mut mi = 0.0;
            for (z, label, d_z) in [(&ze, 1.0, &mut d_ze), (&za, 0.0, &mut d_za)] {
                let (p, trace) = q.forward_trace(&pairs(z)?)?;
                let (l, g) = bce_with_grad(&p, &Matrix::filled(p.rows(), 1, label))?;
                mi += 0.5 * l;
                // Encoders maximize the classifier's loss.
                let dz = unpairs(&q.backward_input(&trace, &g)?, z_dim)?;
                d_z.axpy(-0.5 * hp.lambda4, &dz)?;
            }
            terms.mi = finite(mi, "L_MI", it)?;
        }

        let (g_dec_a1, dz) = maps.dec_a.backward(&t_cyc_e, &ce.decode_backward(&y_cyc_e, &d_cyc_e))?;
        d_zea.add_assign(&dz)?;
        let (g_enc_a1, df) = maps.enc_a.backward(&t_zea, &d_zea)?;
        d_psi.add_assign(&ca.encode_backward(&psi, &df))?;
        let (g_dec_e1, dz) = maps.dec_e.backward(&t_psi, &ca.decode_backward(&y_psi, &d_psi))?;
        d_ze.add_assign(&dz)?;
        let (mut g_enc_e, _) = maps.enc_e.backward(&t_ze, &d_ze)?;

        let (mut g_dec_e, dz) = maps.dec_e.backward(&t_cyc_a, &ca.decode_backward(&y_cyc_a, &d_cyc_a))?;
        d_zae.add_assign(&dz)?;
        let (g_enc_e2, df) = maps.enc_e.backward(&t_zae, &d_zae)?;
        d_phi.add_assign(&ce.encode_backward(&phi, &df))?;
        let (mut g_dec_a, dz) = maps.dec_a.backward(&t_phi, &ce.decode_backward(&y_phi, &d_phi))?;
        d_za.add_assign(&dz)?;
        let (mut g_enc_a, _) = maps.enc_a.backward(&t_za, &d_za)?;

        g_enc_e.add_assign(&g_enc_e2)?;
        g_dec_e.add_assign(&g_dec_e1)?;
        g_enc_a.add_assign(&g_enc_a1)?;
        g_dec_a.add_assign(&g_dec_a1)?;
        self.apply_map_grads([g_enc_e, g_dec_e, g_enc_a, g_dec_a])?;

        let t = &mut acc.terms;
        t.adv_a += terms.adv_a;
        t.adv_e += terms.adv_e;
        t.cyc += terms.cyc;
        t.z += terms.z;
        t.mi += terms.mi;
        t.pos += terms.pos;
        acc.n += 1;
        Ok(())
    }

    /// One minibatch of inference-task adaptation on task `t`.
    fn inference_step(&mut self, t: usize, acc: &mut Accum) -> Result<()> {
        let hp = self.hp;
        let it = self.iter;
        let n_e = self.n_e();
        let buf = &self.inference[t];
        let idx: Vec<usize> = (0..hp.batch_size)
            .map(|_| self.rng.gen_range(0..buf.states.rows()))
            .collect();
        let x = buf.states.select_rows(&idx).cols_range(0..n_e)?;

        let maps = &self.maps;
        let (ce, ca) = (&maps.expert_angles, &maps.agent_angles);
        let (ze, t_ze) = maps.enc_e.forward_trace(&ce.encode(&x))?;
        let (y_psi, t_psi) = maps.dec_e.forward_trace(&ze)?;
        let psi = ca.decode(&y_psi);
        let (zea, t_zea) = maps.enc_a.forward_trace(&ca.encode(&psi))?;
        let (y_cyc, t_cyc) = maps.dec_a.forward_trace(&zea)?;
        let cyc = ce.decode(&y_cyc);

        let mut d_ze = Matrix::zeros(ze.rows(), ze.cols());
        if hp.pos_inf_active() {
            let target = Matrix::from_vec(idx.len(), 1, idx.iter().map(|&r| buf.positions[r]).collect())?;
            let p_z = &mut self.p_z[t];
            let (out, trace) = p_z.forward_trace(&ze)?;
            let (l, g) = mse_with_grad(&out, &target)?;
            acc.inf.pos_inf += finite(l, "L_pos_inf", it)?;
            let (grads, dz) = p_z.backward(&trace, &g)?;
            self.p_z_opts[t].step(p_z, &grads)?;
            d_ze.axpy(hp.lambda5, &dz)?;
        }
        let (l, g) = ce.mse_with_grad(&cyc, &x)?;
        acc.inf.cyc_inf += finite(l, "L_cyc_inf", it)?;

        let (g_dec_a, dz) = maps.dec_a.backward(&t_cyc, &ce.decode_backward(&y_cyc, &g.scale(hp.lambda5)))?;
        let (g_enc_a, df) = maps.enc_a.backward(&t_zea, &dz)?;
        let d_psi = ca.encode_backward(&psi, &df);
        let (g_dec_e, dz) = maps.dec_e.backward(&t_psi, &ca.decode_backward(&y_psi, &d_psi))?;
        d_ze.add_assign(&dz)?;
        let (g_enc_e, _) = maps.enc_e.backward(&t_ze, &d_ze)?;
        self.apply_map_grads([g_enc_e, g_dec_e, g_enc_a, g_dec_a])?;
        acc.n += 1;
        Ok(())
    }

    fn run(mut self, seed: u64) -> Result<AlignOutcome> {
        let hp = self.hp;
        let mut metrics = Vec::new();
        for it in 0..hp.outer_iterations {
            self.iter = it;
            for j in 0..self.tasks.len() {
                let mut acc = Accum::default();
                for _ in 0..hp.inner_steps {
                    self.task_step(j, &mut acc)?;
                }
                let m = acc.mean();
                metrics.push(MetricsRow {
                    iter: it,
                    task: self.data.dataset.tasks()[j].task_id.clone(),
                    total: task_objective(hp, &m.terms),
                    terms: m.terms,
                    inference: InferenceTerms::default(),
                    disc_a: m.disc_a,
                    disc_e: m.disc_e,
                    q_loss: m.q,
                });
            }
            if hp.lambda5 > 0.0 {
                let mut acc = Accum::default();
                for i in 0..hp.inner_steps {
                    self.inference_step(i % self.inference.len(), &mut acc)?;
                }
                let m = acc.mean();
                metrics.push(MetricsRow {
                    iter: it,
                    task: "inference".into(),
                    total: inference_objective(hp, &m.inf),
                    terms: TaskTerms::default(),
                    inference: m.inf,
                    disc_a: 0.0,
                    disc_e: 0.0,
                    q_loss: 0.0,
                });
            }
        }
        let model = AlignmentModel {
            maps: self.maps,
            norm_e: self.data.norm_e.clone(),
            norm_a: self.data.norm_a.clone(),
            goal_frame: self.data.goal_frame,
            hyperparams: hp.clone(),
            seed,
            scenario: None,
        };
        Ok(AlignOutcome {
            model,
            discriminators: self.discs,
            p_z: self.p_z,
            metrics,
        })
    }
}

/// Learns ψ and φ from unpaired proxy-task demonstrations.
///
/// Deterministic given `seed`. Any non-finite loss aborts with
/// [`Error::Diverged`] naming the term.
pub fn train_alignment(data: AlignmentData<'_>, hp: &AlignHyperparams, seed: u64) -> Result<AlignOutcome> {
    Trainer::new(data, hp, seed)?.run(seed)
}
