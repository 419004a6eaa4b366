//! Temporal position labels and estimators.
//!
//! A state `t` steps into a goal-reaching trajectory of `H` states carries the
//! label `γ^(H−t)` (1-indexed), so the terminal goal state is labelled 1.
//! Estimators regress these labels and are frozen while they shape the state
//! maps: gradients flow through them into their inputs, never into their
//! parameters.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numcore::{fit_mse, mse_with_grad, Activation, FitSettings, ModelFile};
use crate::traj::{Domain, Normalizer, Trajectory};
use crate::{Gradients, Matrix, Mlp};

pub const DEFAULT_GAMMA_POS: f64 = 0.95;

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("gamma_pos must lie in (0, 1), got {gamma}")))
    }
}

/// Labels built backwards from the terminal value 1, so
/// `label[t] == γ · label[t + 1]` holds exactly in floating point.
pub fn position_labels(traj: &Trajectory, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let n = traj.len();
    let mut labels = vec![1.0; n];
    for t in (0..n.saturating_sub(1)).rev() {
        labels[t] = gamma * labels[t + 1];
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PositionSettings {
    pub hidden: Vec<usize>,
    pub fit: FitSettings,
    /// Fraction of trajectories held out for the reported MSE.
    pub heldout_fraction: f64,
}

impl Default for PositionSettings {
    fn default() -> Self {
        Self {
            hidden: vec![200, 128],
            fit: FitSettings {
                steps: 2000,
                batch_size: 128,
                lr: 1e-3,
            },
            heldout_fraction: 0.1,
        }
    }
}

/// Regressor from a normalized observation to its temporal position.
#[derive(Clone, Debug)]
pub struct PositionEstimator {
    pub net: Mlp,
    pub domain: Domain,
    pub task_id: String,
    pub gamma_pos: f64,
    pub normalizer: Normalizer,
    trained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub domain: Domain,
    pub task_id: String,
    pub num_trajectories: usize,
    pub train_mse: f64,
    pub heldout_mse: f64,
}

impl PositionEstimator {
    pub fn untrained(
        hidden: &[usize],
        domain: Domain,
        task_id: impl Into<String>,
        gamma_pos: f64,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        check_gamma(gamma_pos)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::with_hidden(
            normalizer.dim(),
            hidden,
            1,
            Activation::Relu,
            Activation::Identity,
            false,
            &mut rng,
        )?;
        Ok(Self {
            net,
            domain,
            task_id: task_id.into(),
            gamma_pos,
            normalizer,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::NotReady(format!(
                "position estimator {}/{} is untrained",
                self.domain.tag(),
                self.task_id
            )))
        }
    }

    /// Positions for rows already in normalized coordinates.
    pub fn predict_normalized(&self, x: &Matrix) -> Result<Matrix> {
        self.ensure_trained()?;
        Ok(self.net.forward(x)?)
    }

    /// Positions for raw observations.
    pub fn predict(&self, states: &Matrix) -> Result<Matrix> {
        self.predict_normalized(&self.normalizer.apply_matrix(states))
    }

    /// Outputs and `∂(Σ d_out·P)/∂x` for normalized inputs. Parameters are untouched.
    pub fn predict_with_input_grad<F>(&self, x: &Matrix, d_out: F) -> Result<(Matrix, Matrix)>
    where
        F: FnOnce(&Matrix) -> Result<Matrix>,
    {
        self.ensure_trained()?;
        let (out, trace) = self.net.forward_trace(x)?;
        let g = d_out(&out)?;
        let dx = self.net.backward_input(&trace, &g)?;
        Ok((out, dx))
    }

    pub fn to_model_file(&self) -> Result<ModelFile> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), json!("position_estimator"));
        meta.insert("domain".into(), json!(self.domain));
        meta.insert("task_id".into(), json!(self.task_id));
        meta.insert("gamma_pos".into(), json!(self.gamma_pos));
        meta.insert("normalizer".into(), serde_json::to_value(&self.normalizer)?);
        Ok(ModelFile::from_mlp(&self.net, meta))
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let field = |k: &str| {
            file.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("estimator checkpoint lacks `{k}`")))
        };
        let normalizer: Normalizer = serde_json::from_value(field("normalizer")?)?;
        let net = file.to_mlp()?;
        if net.input_dim() != normalizer.dim() || net.output_dim() != 1 {
            return Err(Error::Dimension(format!(
                "estimator net {:?} does not match normalizer dim {}",
                net.layer_dims(),
                normalizer.dim()
            )));
        }
        let gamma_pos: f64 = serde_json::from_value(field("gamma_pos")?)?;
        check_gamma(gamma_pos)?;
        Ok(Self {
            net,
            domain: serde_json::from_value(field("domain")?)?,
            task_id: serde_json::from_value(field("task_id")?)?,
            gamma_pos,
            normalizer,
            trained: true,
        })
    }
}

fn stack_labelled(trajs: &[&Trajectory], norm: &Normalizer, gamma: f64) -> Result<(Matrix, Matrix)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for t in trajs {
        for (s, y) in t.states.iter().zip(position_labels(t, gamma)?) {
            xs.push(norm.apply(s));
            ys.push(y);
        }
    }
    let n = ys.len();
    Ok((Matrix::from_rows(&xs)?, Matrix::from_vec(n, 1, ys)?))
}

/// Trains an estimator on the goal-reaching trajectories of `trajs`.
/// Trajectories truncated before the goal are skipped.
pub fn train_position_estimator(
    trajs: &[Trajectory],
    domain: Domain,
    task_id: &str,
    gamma: f64,
    normalizer: &Normalizer,
    settings: &PositionSettings,
    seed: u64,
) -> Result<(PositionEstimator, PositionReport)> {
    check_gamma(gamma)?;
    let mut usable: Vec<&Trajectory> = trajs.iter().filter(|t| t.reached_goal()).collect();
    if usable.is_empty() {
        return Err(Error::EmptyData(format!(
            "no goal-reaching {} trajectories for task {task_id}",
            domain.tag()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = PositionEstimator::untrained(
        &settings.hidden,
        domain,
        task_id,
        gamma,
        normalizer.clone(),
        rand::Rng::gen(&mut rng),
    )?;
    usable.shuffle(&mut rng);
    let n_held = ((usable.len() as f64 * settings.heldout_fraction).round() as usize)
        .min(usable.len() - 1);
    let (held, train) = usable.split_at(n_held);
    let (x, y) = stack_labelled(train, normalizer, gamma)?;
    fit_mse(&mut est.net, &x, &y, settings.fit, &mut rng)?;
    est.trained = true;
    let mse_on = |x: &Matrix, y: &Matrix| -> Result<f64> {
        Ok(mse_with_grad(&est.net.forward(x)?, y)?.0)
    };
    let train_mse = mse_on(&x, &y)?;
    let heldout_mse = if held.is_empty() {
        train_mse
    } else {
        let (hx, hy) = stack_labelled(held, normalizer, gamma)?;
        mse_on(&hx, &hy)?
    };
    let report = PositionReport {
        domain,
        task_id: task_id.to_string(),
        num_trajectories: usable.len(),
        train_mse,
        heldout_mse,
    };
    Ok((est, report))
}

/// Position mismatch across the two maps and its gradients w.r.t. the mapped states.
#[derive(Clone, Debug)]
pub struct PosConsistency {
    pub loss: f64,
    pub d_psi: Matrix,
    pub d_phi: Matrix,
}

/// `mean‖P_A(ψ(s_E)) − P_E(s_E)‖² + mean‖P_E(φ(s_A)) − P_A(s_A)‖²`.
///
/// All matrices are estimator inputs (normalized observations). The targets
/// `P_E(s_E)` and `P_A(s_A)` are constants; only the mapped states receive
/// gradients.
pub fn pos_consistency_loss(
    p_e: &PositionEstimator,
    p_a: &PositionEstimator,
    s_e: &Matrix,
    psi_s_e: &Matrix,
    s_a: &Matrix,
    phi_s_a: &Matrix,
) -> Result<PosConsistency> {
    let direction = |p_target: &PositionEstimator, src: &Matrix, p_mapped: &PositionEstimator, mapped: &Matrix| {
        let target = p_target.predict_normalized(src)?;
        let mut loss = 0.0;
        let (_, d) = p_mapped.predict_with_input_grad(mapped, |out| {
            let (l, g) = mse_with_grad(out, &target)?;
            loss = l;
            Ok(g)
        })?;
        Ok::<_, Error>((loss, d))
    };
    let (l_psi, d_psi) = direction(p_e, s_e, p_a, psi_s_e)?;
    let (l_phi, d_phi) = direction(p_a, s_a, p_e, phi_s_a)?;
    Ok(PosConsistency {
        loss: l_psi + l_phi,
        d_psi,
        d_phi,
    })
}

/// Latent position regression against a frozen inference-task estimator.
#[derive(Clone, Debug)]
pub struct LatentPos {
    pub loss: f64,
    pub grads_p_z: Gradients,
    pub d_z: Matrix,
}

/// `mean‖P_z(z) − P_E^T(s_E)‖²` where `z = Enc_E(s_E)`; `s_e` is normalized.
pub fn latent_pos_loss(
    p_z: &Mlp,
    z: &Matrix,
    p_e_t: &PositionEstimator,
    s_e: &Matrix,
) -> Result<LatentPos> {
    if z.rows() == 0 {
        return Err(Error::EmptyData("latent_pos_loss needs inference states".into()));
    }
    let target = p_e_t.predict_normalized(s_e)?;
    let (out, trace) = p_z.forward_trace(z)?;
    let (loss, g) = mse_with_grad(&out, &target)?;
    let (grads_p_z, d_z) = p_z.backward(&trace, &g)?;
    Ok(LatentPos { loss, grads_p_z, d_z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Dense;

    fn traj(n: usize) -> Trajectory {
        Trajectory {
            domain: Domain::Agent,
            task_id: "t".into(),
            states: (0..n).map(|i| vec![i as f64, 0.0]).collect(),
            actions: None,
            reached: Some(true),
        }
    }

    fn constant_estimator(c: f64, domain: Domain) -> PositionEstimator {
        let layer = Dense {
            weight: Matrix::zeros(2, 1),
            bias: vec![c],
            activation: Activation::Identity,
            sn_u: None,
        };
        PositionEstimator {
            net: Mlp::from_layers(vec![layer], false).unwrap(),
            domain,
            task_id: "t".into(),
            gamma_pos: 0.9,
            normalizer: Normalizer::identity(2, vec![]),
            trained: true,
        }
    }

    #[test]
    fn label_examples() {
        let l = position_labels(&traj(3), 0.9).unwrap();
        assert_eq!(l[2], 1.0);
        assert!((l[0] - 0.81).abs() < 1e-15 && (l[1] - 0.9).abs() < 1e-15);
        assert_eq!(position_labels(&traj(4), 0.5).unwrap(), vec![0.125, 0.25, 0.5, 1.0]);
        assert!(position_labels(&traj(3), 1.0).is_err());
        assert!(position_labels(&traj(3), 0.0).is_err());
    }

    #[test]
    fn constant_estimators_give_closed_form_losses() {
        let x = Matrix::from_fn(5, 2, |i, j| (i + j) as f64);
        let same = pos_consistency_loss(
            &constant_estimator(0.3, Domain::Expert),
            &constant_estimator(0.3, Domain::Agent),
            &x,
            &x,
            &x,
            &x,
        )
        .unwrap();
        assert_eq!(same.loss, 0.0);
        let apart = pos_consistency_loss(
            &constant_estimator(0.0, Domain::Expert),
            &constant_estimator(1.0, Domain::Agent),
            &x,
            &x,
            &x,
            &x,
        )
        .unwrap();
        assert!((apart.loss - 2.0).abs() < 1e-15);
        // Constant heads have no input dependence.
        assert!(apart.d_psi.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn untrained_estimators_are_rejected() {
        let e = PositionEstimator::untrained(&[4], Domain::Expert, "t", 0.9, Normalizer::identity(2, vec![]), 0)
            .unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(pos_consistency_loss(&e, &e, &x, &x, &x, &x).is_err());
        assert!(e.predict(&x).is_err());
    }

    #[test]
    fn constant_labels_are_fit() {
        // Two-state trajectories with γ close to 1 give labels ≈ 1 everywhere.
        let trajs: Vec<Trajectory> = (0..20).map(|_| traj(2)).collect();
        let norm = Normalizer::identity(2, vec![]);
        let mut s = PositionSettings::default();
        s.hidden = vec![16];
        s.fit.steps = 1000;
        s.fit.lr = 1e-2;
        let (est, rep) = train_position_estimator(&trajs, Domain::Agent, "t", 0.999, &norm, &s, 4).unwrap();
        let pred = est.predict(&Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!(pred.as_slice().iter().all(|p| (p - 1.0).abs() < 0.01));
        assert!(rep.train_mse < 1e-4);
    }

    #[test]
    fn non_reaching_trajectories_are_excluded() {
        let mut t = traj(5);
        t.reached = Some(false);
        let norm = Normalizer::identity(2, vec![]);
        let r = train_position_estimator(&[t], Domain::Agent, "t", 0.9, &norm, &PositionSettings::default(), 0);
        assert!(matches!(r, Err(Error::EmptyData(_))));
    }

    #[test]
    fn latent_loss_at_mean_predictor_equals_target_variance() {
        let est = {
            let layer = Dense {
                weight: Matrix::from_rows(&[vec![0.5], vec![0.0]]).unwrap(),
                bias: vec![0.1],
                activation: Activation::Identity,
                sn_u: None,
            };
            PositionEstimator {
                net: Mlp::from_layers(vec![layer], false).unwrap(),
                ..constant_estimator(0.0, Domain::Expert)
            }
        };
        let s = Matrix::from_fn(6, 2, |i, j| if j == 0 { i as f64 * 0.3 } else { 1.0 });
        let target = est.predict_normalized(&s).unwrap();
        let mean = target.sum() / 6.0;
        let var = target.as_slice().iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 6.0;
        let p_z = Mlp::from_layers(
            vec![Dense {
                weight: Matrix::zeros(3, 1),
                bias: vec![mean],
                activation: Activation::Identity,
                sn_u: None,
            }],
            false,
        )
        .unwrap();
        let z = Matrix::from_fn(6, 3, |i, j| (i * j) as f64);
        let before = est.net.fingerprint();
        let lp = latent_pos_loss(&p_z, &z, &est, &s).unwrap();
        assert!((lp.loss - var).abs() < 1e-12);
        assert_eq!(est.net.fingerprint(), before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = constant_estimator(0.4, Domain::Agent);
        let back = PositionEstimator::from_model_file(&e.to_model_file().unwrap()).unwrap();
        assert_eq!(back.net.fingerprint(), e.net.fingerprint());
        assert_eq!(back.task_id, "t");
        assert_eq!(back.normalizer, e.normalizer);
        assert!(back.is_trained());
    }
}
