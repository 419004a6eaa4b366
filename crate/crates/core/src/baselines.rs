//! Comparison methods: a linear CCA correspondence and the loss-term ablations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correspond::{AlignHyperparams, GOAL_DIMS};
use crate::pipeline::{run_all, run_method, Method, RunAllOptions, RunAllReport, RunConfig};
use crate::traj::{Domain, Trajectory};
use crate::{Error, Matrix, Result};

/// Diagonal ridge added to both covariance blocks.
pub const CCA_RIDGE: f64 = 1e-6;
/// Covariance blocks whose eigenvalue spread exceeds this are refused.
const MAX_CONDITION: f64 = 1e12;

/// Linear correspondence through a maximally correlated shared space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CcaModel {
    pub mean_e: Vec<f64>,
    pub mean_a: Vec<f64>,
    /// n_E × d, maps centered expert states to canonical variates.
    pub proj_e: Matrix,
    /// n_A × d.
    pub proj_a: Matrix,
    pub correlations: Vec<f64>,
    /// d × n_A pseudo-inverse of `proj_a`.
    pub back_a: Matrix,
    /// d × n_E pseudo-inverse of `proj_e`.
    pub back_e: Matrix,
}

impl CcaModel {
    pub fn expert_dim(&self) -> usize {
        self.mean_e.len()
    }

    pub fn agent_dim(&self) -> usize {
        self.mean_a.len()
    }

    pub fn shared_dim(&self) -> usize {
        self.correlations.len()
    }
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn center(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    (c, mean)
}

/// C^{-1/2} for a symmetric positive definite block.
fn inv_sqrt(c: DMatrix<f64>, which: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min.is_finite() && max.is_finite()) || min <= 0.0 || max / min > MAX_CONDITION {
        return Err(Error::Dimension(format!(
            "{which} covariance is rank deficient (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn pinv(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Dimension(format!("pseudo-inverse failed: {e}")))
}

/// Classical CCA on row-paired samples.
pub fn cca_fit_paired(x: &Matrix, y: &Matrix) -> Result<CcaModel> {
    if x.rows() == 0 || y.rows() == 0 || x.cols() == 0 || y.cols() == 0 {
        return Err(Error::EmptyData("CCA needs non-empty state sets".into()));
    }
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!("{} expert rows vs {} agent rows", x.rows(), y.rows())));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("CCA input".into()));
    }
    let n = x.rows() as f64;
    let (xc, mean_e) = center(&to_na(x));
    let (yc, mean_a) = center(&to_na(y));
    let ridge_x = DMatrix::identity(x.cols(), x.cols()) * CCA_RIDGE;
    let ridge_y = DMatrix::identity(y.cols(), y.cols()) * CCA_RIDGE;
    let cxx = xc.transpose() * &xc / n + ridge_x;
    let cyy = yc.transpose() * &yc / n + ridge_y;
    let cxy = xc.transpose() * &yc / n;

    let wx = inv_sqrt(cxx, "expert")?;
    let wy = inv_sqrt(cyy, "agent")?;
    let svd = (&wx * cxy * &wy).svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Dimension("SVD did not converge".into())),
    };
    let d = x.cols().min(y.cols());

    // nalgebra does not promise sorted singular values.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.truncate(d);
    let u_d = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v = v_t.transpose();
    let v_d = DMatrix::from_columns(&order.iter().map(|&i| v.column(i)).collect::<Vec<_>>());
    let correlations = order.iter().map(|&i| svd.singular_values[i].clamp(0.0, 1.0)).collect();

    let proj_e = wx * u_d;
    let proj_a = wy * v_d;
    Ok(CcaModel {
        mean_e: mean_e.iter().copied().collect(),
        mean_a: mean_a.iter().copied().collect(),
        back_e: from_na(&pinv(&proj_e)?),
        back_a: from_na(&pinv(&proj_a)?),
        proj_e: from_na(&proj_e),
        proj_a: from_na(&proj_a),
        correlations,
    })
}

/// CCA on unpaired state sets: each set is shuffled independently, rows are
/// paired by position and the longer set is truncated.
pub fn cca_fit(states_e: &Matrix, states_a: &Matrix, seed: u64) -> Result<CcaModel> {
    if states_e.rows() == 0 || states_a.rows() == 0 {
        return Err(Error::EmptyData("CCA needs non-empty state sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = states_e.rows().min(states_a.rows());
    let mut ie: Vec<usize> = (0..states_e.rows()).collect();
    let mut ia: Vec<usize> = (0..states_a.rows()).collect();
    ie.shuffle(&mut rng);
    ia.shuffle(&mut rng);
    cca_fit_paired(&states_e.select_rows(&ie[..n]), &states_a.select_rows(&ia[..n]))
}

/// Maps expert non-goal states (rows) into the agent frame.
pub fn cca_map(model: &CcaModel, x: &Matrix) -> Result<Matrix> {
    if x.cols() != model.expert_dim() {
        return Err(Error::Dimension(format!(
            "CCA expects {} expert columns, got {}",
            model.expert_dim(),
            x.cols()
        )));
    }
    let mut centered = x.clone();
    let neg: Vec<f64> = model.mean_e.iter().map(|m| -m).collect();
    centered.add_row_vector(&neg)?;
    let mut out = centered.matmul(&model.proj_e)?.matmul(&model.back_a)?;
    out.add_row_vector(&model.mean_a)?;
    Ok(out)
}

/// Transfers full expert observations: non-goal columns through the linear
/// map, the trailing goal columns copied verbatim.
pub fn cca_transfer(model: &CcaModel, expert_states: &Matrix) -> Result<Matrix> {
    let n_e = model.expert_dim();
    if expert_states.cols() != n_e + GOAL_DIMS {
        return Err(Error::Dimension(format!(
            "expected {} observation columns, got {}",
            n_e + GOAL_DIMS,
            expert_states.cols()
        )));
    }
    let mapped = cca_map(model, &expert_states.cols_range(0..n_e)?)?;
    let goals = expert_states.cols_range(n_e..n_e + GOAL_DIMS)?;
    Ok(Matrix::hcat(&[&mapped, &goals])?)
}

/// Applies [`cca_transfer`] to whole expert trajectories.
pub fn cca_transfer_demos(model: &CcaModel, demos: &[Trajectory]) -> Result<Vec<Trajectory>> {
    demos
        .iter()
        .map(|t| {
            if t.domain != Domain::Expert {
                return Err(Error::InvalidConfig(format!("trajectory {} is not expert-domain", t.task_id)));
            }
            let mapped = cca_transfer(model, &t.states_matrix())?;
            let out = Trajectory {
                domain: Domain::Agent,
                states: mapped.row_iter().map(|r| r.to_vec()).collect(),
                actions: None,
                ..t.clone()
            };
            out.validate()?;
            Ok(out)
        })
        .collect()
}

/// Which loss terms to switch off relative to the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub disable_inference_adaptation: bool,
    #[serde(default)]
    pub disable_mi: bool,
    #[serde(default)]
    pub disable_temporal: bool,
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        disable_inference_adaptation: false,
        disable_mi: false,
        disable_temporal: false,
    };

    /// The full method followed by one configuration per removed module.
    pub fn table() -> [AblationFlags; 4] {
        [
            Self::FULL,
            AblationFlags { disable_inference_adaptation: true, ..Self::FULL },
            AblationFlags { disable_mi: true, ..Self::FULL },
            AblationFlags { disable_temporal: true, ..Self::FULL },
        ]
    }

    /// All three modules removed: a plain cycle-consistent adversarial alignment.
    pub fn cyclegan() -> Self {
        AblationFlags {
            disable_inference_adaptation: true,
            disable_mi: true,
            disable_temporal: true,
        }
    }

    pub fn is_full(&self) -> bool {
        *self == Self::FULL
    }

    pub fn label(&self) -> String {
        match (self.disable_inference_adaptation, self.disable_mi, self.disable_temporal) {
            (false, false, false) => "full".into(),
            (true, false, false) => "no-adaptation".into(),
            (false, true, false) => "no-mi".into(),
            (false, false, true) => "no-temporal".into(),
            (true, true, true) => "cyclegan".into(),
            (a, m, t) => {
                let mut parts = Vec::new();
                if a {
                    parts.push("adaptation");
                }
                if m {
                    parts.push("mi");
                }
                if t {
                    parts.push("temporal");
                }
                format!("no-{}", parts.join("-"))
            }
        }
    }

    /// Hyperparameters with the flagged terms zeroed.
    pub fn apply(&self, hp: &AlignHyperparams) -> AlignHyperparams {
        let mut out = hp.clone();
        if self.disable_inference_adaptation {
            out.lambda5 = 0.0;
        }
        if self.disable_mi {
            out.lambda4 = 0.0;
        }
        if self.disable_temporal {
            out.lambda3 = 0.0;
            out.inference_position = false;
        }
        out
    }
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub normalized_score: f64,
}

pub const RESULTS_HEADER: &str = "scenario,method,seed,normalized_score";

pub fn results_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.scenario, r.method, r.seed, r.normalized_score));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub scenario: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

/// Mean ± std per (scenario, method), in first-appearance order.
pub fn summarize(rows: &[ScoreRow]) -> Vec<MethodSummary> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.scenario.clone(), r.method.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scenario, method)| {
            let sel: Vec<&ScoreRow> =
                rows.iter().filter(|r| r.scenario == scenario && r.method == method).collect();
            let n = sel.len() as f64;
            let mean = sel.iter().map(|r| r.normalized_score).sum::<f64>() / n;
            let var = sel.iter().map(|r| (r.normalized_score - mean).powi(2)).sum::<f64>() / n;
            MethodSummary {
                scenario,
                method,
                seeds: sel.iter().map(|r| r.seed).collect(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// Scores of the full method and the flagged ablations over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<ScoreRow>,
    pub summary: Vec<MethodSummary>,
    /// The full method's run report for each seed.
    pub runs: Vec<RunAllReport>,
}

/// Runs the pipeline once per seed into `template.output_dir/seed-{seed}`,
/// then every flagged variant on the same data. The full method always runs
/// first: the variants share its inverse model and reference returns.
pub fn run_ablation(template: &RunConfig, flags: &[AblationFlags], seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("run_ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut cfg = template.clone();
        cfg.seed = seed;
        cfg.output_dir = template.output_dir.join(format!("seed-{seed}"));
        let report = run_all(&cfg, &RunAllOptions::default())?;
        rows.extend(report.rows.iter().cloned());
        for f in flags.iter().filter(|f| !f.is_full()) {
            let s = run_method(&cfg, Method::Learned(*f))?;
            rows.push(ScoreRow {
                scenario: s.scenario,
                method: s.method,
                seed: s.seed,
                normalized_score: s.normalized_score,
            });
        }
        runs.push(report);
    }
    Ok(AblationTable {
        summary: summarize(&rows),
        rows,
        runs,
    })
}
