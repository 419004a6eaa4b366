//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xalign_core::arm_env::ScenarioName;
use xalign_core::baselines::{cca_fit_paired, CCA_RIDGE};
use xalign_core::numcore::{spectral_normalize, Activation};
use xalign_core::pipeline::RunConfig;
use xalign_core::{Matrix, Mlp};

/// Every network shape the pipeline trains: (role, hidden widths, hidden
/// activation, output activation, spectral norm).
pub const ARCHITECTURES: [(&str, &[usize], Activation, Activation, bool); 7] = [
    ("encoder/decoder", &[128, 64], Activation::LeakyRelu, Activation::Identity, false),
    ("state discriminator", &[128, 128], Activation::LeakyRelu, Activation::Identity, true),
    ("latent classifier", &[128, 128], Activation::LeakyRelu, Activation::Sigmoid, true),
    ("position estimator", &[200, 128], Activation::Relu, Activation::Identity, false),
    ("latent position predictor", &[64, 64], Activation::Relu, Activation::Identity, false),
    ("inverse dynamics", &[100, 100], Activation::Relu, Activation::Identity, false),
    ("policy", &[64, 64], Activation::Relu, Activation::Tanh, false),
];

fn weighted_sum(net: &Mlp, x: &Matrix, w: &Matrix) -> f64 {
    net.forward(x).unwrap().frobenius_dot(w).unwrap()
}

fn central_difference(net: &mut Mlp, x: &Matrix, w: &Matrix, layer: usize, slot: usize, h: f64) -> f64 {
    let orig = net.param_slices_mut()[layer][slot];
    net.param_slices_mut()[layer][slot] = orig + h;
    let up = weighted_sum(net, x, w);
    net.param_slices_mut()[layer][slot] = orig - h;
    let down = weighted_sum(net, x, w);
    net.param_slices_mut()[layer][slot] = orig;
    (up - down) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `L = Σ W ⊙ net(x)` for one random network of architecture
/// `seed % 7`, over 40 sampled parameters and every input coordinate.
///
/// The networks are only piecewise smooth, so a coordinate also passes when
/// the difference quotient at a ten times smaller step agrees; a kink within
/// `h` of the evaluation point can only fool one of the two.
pub fn gradient_check(seed: u64) -> (&'static str, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (name, hidden, hid, out_act, sn) = ARCHITECTURES[seed as usize % ARCHITECTURES.len()];
    let input = rng.gen_range(2..=16);
    let output = rng.gen_range(1..=6);
    let mut net = Mlp::with_hidden(input, hidden, output, hid, out_act, sn, &mut rng).unwrap();
    // Non-zero biases so every layer's bias gradient is exercised.
    for (i, p) in net.param_slices_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            p.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    let batch = 4;
    let x = Matrix::from_fn(batch, input, |_, _| rng.gen_range(-1.5..1.5));
    let w = Matrix::from_fn(batch, output, |_, _| rng.gen_range(-1.0..1.0));
    let (_, trace) = net.forward_trace(&x).unwrap();
    let (grads, d_in) = net.backward(&trace, &w).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let mut worst: f64 = 0.0;
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    for _ in 0..40 {
        let layer = rng.gen_range(0..sizes.len());
        let slot = rng.gen_range(0..sizes[layer]);
        let a = analytic[layer][slot];
        let mut e = rel_err(a, central_difference(&mut net, &x, &w, layer, slot, 1e-5));
        if e > 1e-4 {
            e = e.min(rel_err(a, central_difference(&mut net, &x, &w, layer, slot, 1e-6)));
        }
        worst = worst.max(e);
    }
    for i in 0..batch {
        for j in 0..input {
            let at = |h: f64| {
                let mut xp = x.clone();
                xp.set(i, j, x.get(i, j) + h);
                let mut xm = x.clone();
                xm.set(i, j, x.get(i, j) - h);
                (weighted_sum(&net, &xp, &w) - weighted_sum(&net, &xm, &w)) / (2.0 * h)
            };
            let a = d_in.get(i, j);
            let mut e = rel_err(a, at(1e-5));
            if e > 1e-4 {
                e = e.min(rel_err(a, at(1e-6)));
            }
            worst = worst.max(e);
        }
    }
    (name, worst)
}

/// |σ_max(normalized W) − 1| after 50 power iterations on a random 4×4
/// matrix, with σ_max from nalgebra's SVD.
pub fn spectral_norm_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (4, 4);
    let w = Matrix::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0));
    let u: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (wn, _) = spectral_normalize(&w, &u, 50).unwrap();
    let m = DMatrix::from_row_slice(r, c, wn.as_slice());
    (m.singular_values().max() - 1.0).abs()
}

fn covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() as f64;
    let ca = a - DMatrix::from_fn(a.nrows(), a.ncols(), |_, j| a.column(j).mean());
    let cb = b - DMatrix::from_fn(b.nrows(), b.ncols(), |_, j| b.column(j).mean());
    ca.transpose() * cb / n
}

/// Canonical correlations from the generalized eigenproblem
/// `Cxy Cyy⁻¹ Cyx a = ρ² Cxx a`, solved by forming `Cxx⁻¹ Cxy Cyy⁻¹ Cyx`
/// explicitly and taking its eigenvalues. Sorted descending, truncated to
/// `min(dx, dy)`.
pub fn cca_oracle(x: &Matrix, y: &Matrix) -> Vec<f64> {
    let xm = DMatrix::from_row_slice(x.rows(), x.cols(), x.as_slice());
    let ym = DMatrix::from_row_slice(y.rows(), y.cols(), y.as_slice());
    let cxx = covariance(&xm, &xm) + DMatrix::identity(x.cols(), x.cols()) * CCA_RIDGE;
    let cyy = covariance(&ym, &ym) + DMatrix::identity(y.cols(), y.cols()) * CCA_RIDGE;
    let cxy = covariance(&xm, &ym);
    let m = cxx.try_inverse().unwrap() * &cxy * cyy.try_inverse().unwrap() * cxy.transpose();
    let mut rho: Vec<f64> = m
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re.max(0.0).sqrt())
        .collect();
    rho.sort_by(|a, b| b.total_cmp(a));
    rho.truncate(x.cols().min(y.cols()));
    rho
}

/// A random instance with planted correlation: `y = x B + noise`.
pub fn cca_instance(seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = rng.gen_range(1..=4);
    let dy = rng.gen_range(1..=4);
    let n = rng.gen_range(30..=200);
    let x = Matrix::from_fn(n, dx, |_, _| rng.gen_range(-1.0..1.0));
    let b = Matrix::from_fn(dx, dy, |_, _| rng.gen_range(-1.0..1.0));
    let noise = Matrix::from_fn(n, dy, |_, _| rng.gen_range(-0.5..0.5));
    let y = x.matmul(&b).unwrap().add(&noise).unwrap();
    (x, y)
}

/// Largest correlation discrepancy against the oracle for one instance.
pub fn cca_oracle_error(seed: u64) -> f64 {
    let (x, y) = cca_instance(seed);
    let model = cca_fit_paired(&x, &y).unwrap();
    let oracle = cca_oracle(&x, &y);
    assert_eq!(model.correlations.len(), oracle.len());
    model
        .correlations
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// A configuration small enough for an end-to-end run in seconds.
pub fn tiny_config(scenario: ScenarioName, seed: u64, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(scenario, seed, out);
    // Twenty episodes per corpus tolerate one expert miss under the 95% success check.
    cfg.demos_per_proxy_task = 20;
    cfg.inference_demo_count = 20;
    cfg.position.fit.steps = 40;
    cfg.position.fit.batch_size = 32;
    cfg.align.outer_iterations = 2;
    cfg.align.inner_steps = 2;
    cfg.align.batch_size = 16;
    cfg.bco.exploration_steps = 1000;
    cfg.bco.idm.epochs = 1;
    cfg.bco.bc.epochs = 2;
    cfg.eval_episodes = 2;
    cfg
}
