//! Staged experiment runner.
//!
//! Each stage reads declared inputs from the run directory and writes its
//! outputs under its own subdirectory, then records file hashes in
//! `manifest.json`. Shared stages (demos, position estimators) live at the
//! top level; method-specific stages live under the method's root, which is
//! the run directory itself for the full method.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::arm_env::{make_scenario, Scenario, ScenarioName, TaskSpec};
use crate::baselines::{
    cca_fit, cca_transfer_demos, results_csv, summarize, AblationFlags, CcaModel, MethodSummary,
    ScoreRow,
};
use crate::bco::{
    behavioral_cloning, collect_random, evaluate_policy, label_actions, reference_returns,
    train_inverse_model, BcReport, BcSettings, EvalReport, IdmReport, IdmSettings,
    InverseDynamicsModel, Policy, ReferenceReturns, DEFAULT_EXPLORATION_STEPS,
};
use crate::correspond::{
    metrics_csv, train_alignment, transfer_demos, AlignHyperparams, AlignmentData, AlignmentModel,
    EstimatorSet, GOAL_DIMS,
};
use crate::expert::{generate_demos, DemoRequest};
use crate::numcore::ModelFile;
use crate::seeding::child_seed;
use crate::temporal::{
    train_position_estimator, PositionEstimator, PositionReport, PositionSettings, DEFAULT_GAMMA_POS,
};
use crate::traj::{fit_normalizer, load_corpus, save_corpus, Domain, Normalizer, ProxyDataset, Trajectory};
use crate::{Error, Matrix, Result};

pub const MANIFEST_FORMAT: &str = "xalign-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcoConfig {
    pub exploration_steps: usize,
    pub idm: IdmSettings,
    pub bc: BcSettings,
}

impl Default for BcoConfig {
    fn default() -> Self {
        Self {
            exploration_steps: DEFAULT_EXPLORATION_STEPS,
            idm: IdmSettings::default(),
            bc: BcSettings::default(),
        }
    }
}

/// Everything a run depends on. Missing JSON fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioName,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub demos_per_proxy_task: usize,
    pub inference_demo_count: usize,
    pub gamma_pos: f64,
    pub position: PositionSettings,
    pub align: AlignHyperparams,
    pub bco: BcoConfig,
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioName::ViewpointReach,
            seed: 0,
            output_dir: PathBuf::from("out"),
            demos_per_proxy_task: 200,
            inference_demo_count: 64,
            gamma_pos: DEFAULT_GAMMA_POS,
            position: PositionSettings::default(),
            align: AlignHyperparams::default(),
            bco: BcoConfig::default(),
            eval_episodes: 50,
        }
    }
}

impl RunConfig {
    pub fn new(scenario: ScenarioName, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario,
            seed,
            output_dir: output_dir.into(),
            ..Self::default()
        }
    }

    /// Reduced budget that keeps an end-to-end run around two minutes on one core.
    /// Alignment trades the long low-rate schedule for a short one at a
    /// higher learning rate.
    pub fn quick(mut self) -> Self {
        self.position.fit.steps = 1000;
        self.align.lr = 1e-3;
        self.align.outer_iterations = 20;
        self.bco.exploration_steps = 20_000;
        self.bco.bc.epochs = 100;
        self.eval_episodes = 20;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Overrides one field by dotted path, e.g. `align.lambda4` or
    /// `bco.bc.epochs`. The value is parsed as JSON, falling back to a
    /// plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::InvalidConfig(format!("unknown config field `{key}`")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(root)
            .map_err(|e| Error::InvalidConfig(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("demos_per_proxy_task", self.demos_per_proxy_task),
            ("inference_demo_count", self.inference_demo_count),
            ("eval_episodes", self.eval_episodes),
            ("bco.exploration_steps", self.bco.exploration_steps),
            ("bco.bc.epochs", self.bco.bc.epochs),
            ("bco.idm.epochs", self.bco.idm.epochs),
            ("position.fit.steps", self.position.fit.steps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !(self.gamma_pos > 0.0 && self.gamma_pos < 1.0) {
            return Err(Error::InvalidConfig(format!("gamma_pos must lie in (0, 1), got {}", self.gamma_pos)));
        }
        self.align.validate()
    }

    pub fn scenario(&self) -> Scenario {
        make_scenario(self.scenario)
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        child_seed(self.seed, stage)
    }
}

/// Which correspondence produces the transferred demonstrations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Learned(AblationFlags),
    Cca,
}

impl Method {
    pub const FULL: Method = Method::Learned(AblationFlags::FULL);

    pub fn label(&self) -> String {
        match self {
            Method::Learned(flags) => flags.label(),
            Method::Cca => "cca".into(),
        }
    }

    /// Directory holding this method's align/transfer/bco/eval stages.
    pub fn root(&self, out: &Path) -> PathBuf {
        match self {
            Method::Learned(flags) if flags.is_full() => out.to_path_buf(),
            Method::Learned(flags) => out.join("ablations").join(flags.label()),
            Method::Cca => out.join("baselines").join("cca"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub method: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the run directory, mapped to SHA-256 hex digests.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub software_version: String,
    pub config: RunConfig,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        read_json(&out.join(MANIFEST_FILE))
    }

    /// Every output recorded by any stage.
    pub fn artifacts(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|s| s.outputs.clone()).collect()
    }

    /// Recorded outputs whose current contents no longer match their hash.
    pub fn stale_artifacts(&self, out: &Path) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for (rel, hash) in self.artifacts() {
            let path = out.join(&rel);
            if !path.exists() || sha256_file(&path)? != hash {
                stale.push(rel);
            }
        }
        Ok(stale)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifacts(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifacts(missing.join(", ")))
    }
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Starts a fresh stage directory so no stale outputs survive a rerun.
fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

struct StageLog<'a> {
    cfg: &'a RunConfig,
    stage: &'static str,
    method: String,
    seed: u64,
    started: u64,
    inputs: Vec<PathBuf>,
}

impl<'a> StageLog<'a> {
    fn start(cfg: &'a RunConfig, stage: &'static str, method: String, inputs: Vec<PathBuf>) -> Result<Self> {
        require(&inputs)?;
        Ok(Self {
            cfg,
            stage,
            method,
            seed: cfg.stage_seed(stage),
            started: unix_now(),
            inputs,
        })
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        let out = &self.cfg.output_dir;
        paths
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/");
                Ok((rel, sha256_file(p)?))
            })
            .collect()
    }

    fn finish(self, outputs: &[PathBuf]) -> Result<()> {
        let record = StageRecord {
            stage: self.stage.to_string(),
            method: self.method.clone(),
            seed: self.seed,
            started_unix: self.started,
            finished_unix: unix_now(),
            inputs: self.hashes(&self.inputs)?,
            outputs: self.hashes(outputs)?,
        };
        let out = &self.cfg.output_dir;
        let mut manifest = match Manifest::load(out) {
            Ok(m) => m,
            Err(Error::MissingArtifacts(_)) => Manifest {
                format: MANIFEST_FORMAT.into(),
                software_version: env!("CARGO_PKG_VERSION").into(),
                config: self.cfg.clone(),
                stages: Vec::new(),
            },
            Err(e) => return Err(e),
        };
        manifest.config = self.cfg.clone();
        manifest.stages.retain(|s| !(s.stage == record.stage && s.method == record.method));
        manifest.stages.push(record);
        write_json(&out.join(MANIFEST_FILE), &manifest)
    }
}

fn domain_setup(sc: &Scenario, domain: Domain) -> (&crate::arm_env::ArmConfig, crate::arm_env::PdGains) {
    match domain {
        Domain::Expert => (&sc.expert, sc.expert_gains),
        Domain::Agent => (&sc.agent, sc.agent_gains),
    }
}

fn goal_dims(dim: usize) -> Vec<usize> {
    (dim - GOAL_DIMS..dim).collect()
}

/// Artifact paths shared by every method of a run.
struct Shared {
    demos: PathBuf,
    positions: PathBuf,
}

impl Shared {
    fn new(out: &Path) -> Self {
        Self {
            demos: out.join("demos"),
            positions: out.join("positions"),
        }
    }

    fn proxy(&self, task: &str, domain: Domain) -> PathBuf {
        self.demos.join(format!("proxy_{task}_{}.jsonl", domain.tag()))
    }

    fn inference(&self, task: &str) -> PathBuf {
        self.demos.join(format!("inference_{task}_E.jsonl"))
    }

    fn self_demo(&self, task: &str) -> PathBuf {
        self.demos.join(format!("selfdemo_{task}_A.jsonl"))
    }

    fn normalizers(&self) -> PathBuf {
        self.positions.join("normalizers.json")
    }

    fn estimator(&self, task: &str, domain: Domain) -> PathBuf {
        self.positions.join(format!("{}_{task}.json", domain.tag()))
    }

    fn inference_estimator(&self, task: &str) -> PathBuf {
        self.positions.join(format!("inference_{task}.json"))
    }

    fn demo_inputs(&self, sc: &Scenario) -> Vec<PathBuf> {
        let mut v = Vec::new();
        for t in &sc.proxy_tasks {
            v.push(self.proxy(&t.task_id, Domain::Expert));
            v.push(self.proxy(&t.task_id, Domain::Agent));
        }
        for t in &sc.inference_tasks {
            v.push(self.inference(&t.task_id));
        }
        v
    }

    fn estimator_inputs(&self, sc: &Scenario) -> Vec<PathBuf> {
        let mut v = vec![self.normalizers()];
        for t in &sc.proxy_tasks {
            v.push(self.estimator(&t.task_id, Domain::Expert));
            v.push(self.estimator(&t.task_id, Domain::Agent));
        }
        for t in &sc.inference_tasks {
            v.push(self.inference_estimator(&t.task_id));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Normalizers {
    expert: Normalizer,
    agent: Normalizer,
}

/// Writes proxy corpora for both domains, expert-only inference corpora and
/// the agent-domain inference corpora used only by the self-demo bound.
/// Every corpus is state-only.
pub fn gen_demos(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let sc = cfg.scenario();
    let log = StageLog::start(cfg, "gen-demos", "shared".into(), Vec::new())?;
    let paths = Shared::new(&cfg.output_dir);
    reset_dir(&paths.demos)?;
    let mut outputs = Vec::new();
    let mut emit = |domain: Domain, task: &TaskSpec, count: usize, kind: &str, path: PathBuf| -> Result<()> {
        let (arm, gains) = domain_setup(&sc, domain);
        let request = DemoRequest {
            domain,
            task: task.clone(),
            num_trajectories: count,
            record_actions: false,
            seed: child_seed(log.seed, &format!("{kind}/{}/{}", task.task_id, domain.tag())),
        };
        save_corpus(&generate_demos(&request, arm, gains)?, &path)?;
        outputs.push(path);
        Ok(())
    };
    for task in &sc.proxy_tasks {
        for domain in [Domain::Expert, Domain::Agent] {
            emit(domain, task, cfg.demos_per_proxy_task, "proxy", paths.proxy(&task.task_id, domain))?;
        }
    }
    for task in &sc.inference_tasks {
        emit(Domain::Expert, task, cfg.inference_demo_count, "inference", paths.inference(&task.task_id))?;
        emit(Domain::Agent, task, cfg.inference_demo_count, "selfdemo", paths.self_demo(&task.task_id))?;
    }
    log.finish(&outputs)?;
    Ok(outputs)
}

fn load_proxy(paths: &Shared, sc: &Scenario, domain: Domain) -> Result<Vec<Trajectory>> {
    let mut all = Vec::new();
    for t in &sc.proxy_tasks {
        all.extend(load_corpus(&paths.proxy(&t.task_id, domain))?);
    }
    Ok(all)
}

fn load_inference(paths: &Shared, sc: &Scenario) -> Result<Vec<Vec<Trajectory>>> {
    sc.inference_tasks
        .iter()
        .map(|t| load_corpus(&paths.inference(&t.task_id)))
        .collect()
}

/// Fits the per-domain normalizers and one position estimator per
/// (domain, proxy task) plus one per inference task.
pub fn train_positions(cfg: &RunConfig) -> Result<Vec<PositionReport>> {
    cfg.validate()?;
    let sc = cfg.scenario();
    let paths = Shared::new(&cfg.output_dir);
    let log = StageLog::start(cfg, "train-positions", "shared".into(), paths.demo_inputs(&sc))?;
    let expert = load_proxy(&paths, &sc, Domain::Expert)?;
    let agent = load_proxy(&paths, &sc, Domain::Agent)?;
    let inference = load_inference(&paths, &sc)?;
    let norms = Normalizers {
        expert: fit_normalizer(&expert, &goal_dims(sc.expert.obs_dim()))?,
        agent: fit_normalizer(&agent, &goal_dims(sc.agent.obs_dim()))?,
    };

    reset_dir(&paths.positions)?;
    let mut outputs = vec![paths.normalizers()];
    write_json(&paths.normalizers(), &norms)?;
    let mut reports = Vec::new();
    let mut fit = |trajs: &[Trajectory], domain: Domain, task: &str, label: &str, path: PathBuf| -> Result<()> {
        let norm = match domain {
            Domain::Expert => &norms.expert,
            Domain::Agent => &norms.agent,
        };
        let seed = child_seed(log.seed, label);
        let (est, report) =
            train_position_estimator(trajs, domain, task, cfg.gamma_pos, norm, &cfg.position, seed)?;
        write_bytes(&path, est.to_model_file()?.to_json().as_bytes())?;
        outputs.push(path);
        reports.push(report);
        Ok(())
    };
    for task in &sc.proxy_tasks {
        let id = &task.task_id;
        let e: Vec<Trajectory> = expert.iter().filter(|t| &t.task_id == id).cloned().collect();
        let a: Vec<Trajectory> = agent.iter().filter(|t| &t.task_id == id).cloned().collect();
        fit(&e, Domain::Expert, id, &format!("proxy/{id}/E"), paths.estimator(id, Domain::Expert))?;
        fit(&a, Domain::Agent, id, &format!("proxy/{id}/A"), paths.estimator(id, Domain::Agent))?;
    }
    for (task, demos) in sc.inference_tasks.iter().zip(&inference) {
        let id = &task.task_id;
        fit(demos, Domain::Expert, id, &format!("inference/{id}"), paths.inference_estimator(id))?;
    }
    let report_path = paths.positions.join("report.json");
    write_json(&report_path, &reports)?;
    outputs.push(report_path);
    log.finish(&outputs)?;
    Ok(reports)
}

fn load_estimator(path: &Path) -> Result<PositionEstimator> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifacts(format!("{}: {e}", path.display())))?;
    PositionEstimator::from_model_file(&ModelFile::from_json(&text)?)
}

fn load_model_json(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifacts(format!("{}: {e}", path.display())))?;
    Ok(ModelFile::from_json(&text)?)
}

fn nongoal_states(trajs: &[Trajectory], dim: usize) -> Result<Matrix> {
    let rows: Vec<&[f64]> = trajs.iter().flat_map(|t| t.states.iter().map(|s| &s[..dim])).collect();
    Ok(Matrix::from_rows(&rows)?)
}

fn method_stage(cfg: &RunConfig, method: Method, stage: &str) -> PathBuf {
    method.root(&cfg.output_dir).join(stage)
}

/// Learns the state correspondence. The CCA baseline fits on the pooled
/// proxy states of each domain; the learned methods train ψ and φ with the
/// method's loss weights.
pub fn train_align(cfg: &RunConfig, method: Method) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let sc = cfg.scenario();
    let paths = Shared::new(&cfg.output_dir);
    let mut inputs = paths.demo_inputs(&sc);
    if let Method::Learned(_) = method {
        inputs.extend(paths.estimator_inputs(&sc));
    }
    let log = StageLog::start(cfg, "train-align", method.label(), inputs)?;
    let dir = method_stage(cfg, method, "align");
    let expert = load_proxy(&paths, &sc, Domain::Expert)?;
    let agent = load_proxy(&paths, &sc, Domain::Agent)?;

    let flags = match method {
        Method::Cca => {
            let x = nongoal_states(&expert, sc.expert.nongoal_dim())?;
            let y = nongoal_states(&agent, sc.agent.nongoal_dim())?;
            let model = cca_fit(&x, &y, child_seed(log.seed, "cca"))?;
            reset_dir(&dir)?;
            let path = dir.join("cca.json");
            write_json(&path, &model)?;
            log.finish(&[path.clone()])?;
            return Ok(vec![path]);
        }
        Method::Learned(flags) => flags,
    };

    let inference = load_inference(&paths, &sc)?;
    let norms: Normalizers = read_json(&paths.normalizers())?;
    let estimators = EstimatorSet {
        proxy_e: sc
            .proxy_tasks
            .iter()
            .map(|t| load_estimator(&paths.estimator(&t.task_id, Domain::Expert)))
            .collect::<Result<_>>()?,
        proxy_a: sc
            .proxy_tasks
            .iter()
            .map(|t| load_estimator(&paths.estimator(&t.task_id, Domain::Agent)))
            .collect::<Result<_>>()?,
        inference: sc
            .inference_tasks
            .iter()
            .map(|t| load_estimator(&paths.inference_estimator(&t.task_id)))
            .collect::<Result<_>>()?,
    };
    let ids: Vec<String> = sc.proxy_tasks.iter().map(|t| t.task_id.clone()).collect();
    let dataset = ProxyDataset::new(&ids, &expert, &agent)?;
    let data = AlignmentData {
        dataset: &dataset,
        inference: &inference,
        norm_e: &norms.expert,
        norm_a: &norms.agent,
        estimators: &estimators,
        goal_frame: sc.goal_frame,
        expert_angle_dims: sc.expert.num_links,
        agent_angle_dims: sc.agent.num_links,
    };
    // Every learned variant shares the alignment seed, so ablations differ
    // from the full method only in their loss weights.
    let hp = flags.apply(&cfg.align);
    let mut outcome = train_alignment(data, &hp, child_seed(log.seed, "learned"))?;
    outcome.model.scenario = Some(sc.name.to_string());

    reset_dir(&dir)?;
    outcome.model.save(&dir, &outcome.discriminators, &outcome.p_z)?;
    write_bytes(&dir.join("metrics.csv"), metrics_csv(&outcome.metrics).as_bytes())?;
    let outputs = files_under(&dir)?;
    log.finish(&outputs)?;
    Ok(outputs)
}

fn transfer_path(cfg: &RunConfig, method: Method, task: &str) -> PathBuf {
    method_stage(cfg, method, "transfer").join(format!("inference_{task}_A.jsonl"))
}

/// Maps the expert inference demonstrations into the agent domain.
pub fn transfer(cfg: &RunConfig, method: Method) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let sc = cfg.scenario();
    let paths = Shared::new(&cfg.output_dir);
    let align = method_stage(cfg, method, "align");
    let mut inputs: Vec<PathBuf> = sc.inference_tasks.iter().map(|t| paths.inference(&t.task_id)).collect();
    match method {
        Method::Cca => inputs.push(align.join("cca.json")),
        Method::Learned(_) => {
            inputs.extend(["alignment", "enc_e", "dec_e", "enc_a", "dec_a"].map(|n| align.join(format!("{n}.json"))))
        }
    }
    let log = StageLog::start(cfg, "transfer", method.label(), inputs)?;
    let demos = load_inference(&paths, &sc)?;
    let mapped: Vec<Vec<Trajectory>> = match method {
        Method::Cca => {
            let model: CcaModel = read_json(&align.join("cca.json"))?;
            demos.iter().map(|d| cca_transfer_demos(&model, d)).collect::<Result<_>>()?
        }
        Method::Learned(_) => {
            let model = AlignmentModel::load(&align)?;
            demos.iter().map(|d| transfer_demos(&model, d)).collect::<Result<_>>()?
        }
    };
    reset_dir(&method_stage(cfg, method, "transfer"))?;
    let mut outputs = Vec::new();
    for (task, trajs) in sc.inference_tasks.iter().zip(&mapped) {
        if let Some(t) = trajs.iter().find(|t| t.state_dim() != sc.agent.obs_dim()) {
            return Err(Error::Dimension(format!(
                "transferred state dim {} differs from agent observation dim {}",
                t.state_dim(),
                sc.agent.obs_dim()
            )));
        }
        let path = transfer_path(cfg, method, &task.task_id);
        save_corpus(trajs, &path)?;
        outputs.push(path);
    }
    log.finish(&outputs)?;
    Ok(outputs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcoStageReport {
    pub method: String,
    /// Present when this stage trained the inverse model itself.
    pub idm: Option<IdmReport>,
    pub policy: BcReport,
    pub self_demo: Option<BcReport>,
}

fn idm_path(cfg: &RunConfig) -> PathBuf {
    method_stage(cfg, Method::FULL, "bco").join("idm.json")
}

/// Labels transferred demonstrations with an inverse dynamics model and
/// clones them. The full method also trains the inverse model from random
/// exploration and a self-demo policy on genuine agent demonstrations;
/// other methods reuse its inverse model.
pub fn train_bco(cfg: &RunConfig, method: Method) -> Result<BcoStageReport> {
    cfg.validate()?;
    let sc = cfg.scenario();
    let paths = Shared::new(&cfg.output_dir);
    let owns_idm = method == Method::FULL;
    let mut inputs: Vec<PathBuf> =
        sc.inference_tasks.iter().map(|t| transfer_path(cfg, method, &t.task_id)).collect();
    if owns_idm {
        inputs.extend(sc.inference_tasks.iter().map(|t| paths.self_demo(&t.task_id)));
    } else {
        inputs.push(idm_path(cfg));
    }
    let log = StageLog::start(cfg, "train-bco", method.label(), inputs)?;
    let dir = method_stage(cfg, method, "bco");

    let (idm, idm_report) = if owns_idm {
        let expl = collect_random(&sc.agent, cfg.bco.exploration_steps, child_seed(log.seed, "exploration"))?;
        let (idm, report) = train_inverse_model(&expl, &sc.agent, &cfg.bco.idm, child_seed(log.seed, "idm"))?;
        (idm, Some(report))
    } else {
        (InverseDynamicsModel::from_model_file(&load_model_json(&idm_path(cfg))?)?, None)
    };

    let clone = |trajs: &[Trajectory], label: &str| -> Result<(Policy, BcReport)> {
        let labeled = label_actions(&idm, trajs)?;
        behavioral_cloning(&labeled, sc.agent.torque_limit, &cfg.bco.bc, child_seed(log.seed, label))
    };
    let mut transferred = Vec::new();
    for t in &sc.inference_tasks {
        transferred.extend(load_corpus(&transfer_path(cfg, method, &t.task_id))?);
    }
    let (policy, policy_report) = clone(&transferred, "bc")?;
    let self_demo = if owns_idm {
        let mut demos = Vec::new();
        for t in &sc.inference_tasks {
            demos.extend(load_corpus(&paths.self_demo(&t.task_id))?);
        }
        Some(clone(&demos, "bc/self-demo")?)
    } else {
        None
    };

    reset_dir(&dir)?;
    let mut outputs = Vec::new();
    let mut save_model = |name: &str, file: ModelFile| -> Result<()> {
        let path = dir.join(name);
        write_bytes(&path, file.to_json().as_bytes())?;
        outputs.push(path);
        Ok(())
    };
    if owns_idm {
        save_model("idm.json", idm.to_model_file()?)?;
    }
    save_model("policy.json", policy.to_model_file()?)?;
    if let Some((p, _)) = &self_demo {
        save_model("selfdemo_policy.json", p.to_model_file()?)?;
    }
    let report = BcoStageReport {
        method: method.label(),
        idm: idm_report,
        policy: policy_report,
        self_demo: self_demo.map(|(_, r)| r),
    };
    let report_path = dir.join("report.json");
    write_json(&report_path, &report)?;
    outputs.push(report_path);
    log.finish(&outputs)?;
    Ok(report)
}

/// Normalized-score summary written by the eval stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub normalized_score: f64,
    pub transferred: EvalReport,
    pub self_demo: Option<EvalReport>,
}

fn references_path(cfg: &RunConfig) -> PathBuf {
    method_stage(cfg, Method::FULL, "eval").join("references.json")
}

/// Scores the cloned policy against expert and random references on the
/// agent-domain inference tasks.
pub fn eval(cfg: &RunConfig, method: Method) -> Result<EvalSummary> {
    cfg.validate()?;
    let sc = cfg.scenario();
    let bco_dir = method_stage(cfg, method, "bco");
    let owns_refs = method == Method::FULL;
    let mut inputs = vec![bco_dir.join("policy.json")];
    if owns_refs {
        inputs.push(bco_dir.join("selfdemo_policy.json"));
    } else {
        inputs.push(references_path(cfg));
    }
    let log = StageLog::start(cfg, "eval", method.label(), inputs)?;
    let dir = method_stage(cfg, method, "eval");

    let refs: ReferenceReturns = if owns_refs {
        reference_returns(&sc.agent, sc.agent_gains, &sc.inference_tasks, cfg.eval_episodes, log.seed)?
    } else {
        read_json(&references_path(cfg))?
    };
    let load_policy = |name: &str| Policy::from_model_file(&load_model_json(&bco_dir.join(name))?);
    let mut policy = load_policy("policy.json")?;
    let mut transferred = evaluate_policy(&mut policy, &sc.agent, &sc.inference_tasks, &refs)?;
    transferred.scenario = Some(sc.name.to_string());
    let self_demo = if owns_refs {
        let mut p = load_policy("selfdemo_policy.json")?;
        let mut r = evaluate_policy(&mut p, &sc.agent, &sc.inference_tasks, &refs)?;
        r.scenario = Some(sc.name.to_string());
        Some(r)
    } else {
        None
    };

    reset_dir(&dir)?;
    let mut outputs = Vec::new();
    if owns_refs {
        write_json(&references_path(cfg), &refs)?;
        outputs.push(references_path(cfg));
    }
    let summary = EvalSummary {
        scenario: sc.name.to_string(),
        method: method.label(),
        seed: cfg.seed,
        normalized_score: transferred.normalized,
        transferred,
        self_demo,
    };
    let path = dir.join("report.json");
    write_json(&path, &summary)?;
    outputs.push(path);
    log.finish(&outputs)?;
    Ok(summary)
}

/// Runs the method-specific stages for `method`.
pub fn run_method(cfg: &RunConfig, method: Method) -> Result<EvalSummary> {
    named("train-align", train_align(cfg, method))?;
    named("transfer", transfer(cfg, method))?;
    named("train-bco", train_bco(cfg, method))?;
    named("eval", eval(cfg, method))
}

fn named<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunAllOptions {
    pub ablation: bool,
    pub cca: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAllReport {
    pub rows: Vec<ScoreRow>,
    pub summary: Vec<MethodSummary>,
    pub self_demo_score: Option<f64>,
    pub evals: Vec<EvalSummary>,
}

impl RunAllReport {
    pub fn score(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).map(|r| r.normalized_score)
    }
}

fn score_row(s: &EvalSummary) -> ScoreRow {
    ScoreRow {
        scenario: s.scenario.clone(),
        method: s.method.clone(),
        seed: s.seed,
        normalized_score: s.normalized_score,
    }
}

/// Runs every stage into a fresh output directory, then the requested
/// ablations and baselines, and writes `results/results.csv` and
/// `results/summary.json`.
pub fn run_all(cfg: &RunConfig, opts: &RunAllOptions) -> Result<RunAllReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::InvalidConfig(format!(
            "output directory {} is not empty",
            out.display()
        )));
    }
    named("gen-demos", gen_demos(cfg))?;
    named("train-positions", train_positions(cfg))?;
    let mut methods = vec![Method::FULL];
    if opts.ablation {
        methods.extend(AblationFlags::table()[1..].iter().map(|f| Method::Learned(*f)));
    }
    if opts.cca {
        methods.push(Method::Cca);
    }
    let mut evals = Vec::new();
    for m in methods {
        evals.push(run_method(cfg, m)?);
    }
    let rows: Vec<ScoreRow> = evals.iter().map(score_row).collect();
    let report = RunAllReport {
        summary: summarize(&rows),
        self_demo_score: evals[0].self_demo.as_ref().map(|r| r.normalized),
        rows,
        evals,
    };
    let results = out.join("results");
    fs::create_dir_all(&results)?;
    write_bytes(&results.join("results.csv"), results_csv(&report.rows).as_bytes())?;
    write_json(&results.join("summary.json"), &report.summary)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("align.lambda4", "0").unwrap();
        cfg.set("bco.bc.epochs", "7").unwrap();
        cfg.set("scenario", "d-r2r").unwrap();
        cfg.set("output_dir", "runs/x").unwrap();
        assert_eq!(cfg.align.lambda4, 0.0);
        assert_eq!(cfg.bco.bc.epochs, 7);
        assert_eq!(cfg.scenario, ScenarioName::DynamicsReach);
        assert_eq!(cfg.output_dir, PathBuf::from("runs/x"));
        assert!(cfg.set("align.nope", "1").is_err());
        assert!(cfg.set("seed", "\"abc\"").is_err());
    }

    #[test]
    fn partial_json_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"scenario": "self", "align": {"lr": 0.001}}"#).unwrap();
        assert_eq!(cfg.scenario, ScenarioName::SelfDomain);
        assert_eq!(cfg.align.lr, 1e-3);
        assert_eq!(cfg.align.lambda1, 2.0);
        assert_eq!(cfg.demos_per_proxy_task, 200);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn method_roots() {
        let out = Path::new("o");
        assert_eq!(Method::FULL.root(out), PathBuf::from("o"));
        assert_eq!(Method::Cca.root(out), PathBuf::from("o/baselines/cca"));
        let m = Method::Learned(AblationFlags { disable_mi: true, ..AblationFlags::FULL });
        assert_eq!(m.root(out), PathBuf::from("o/ablations/no-mi"));
    }
}
