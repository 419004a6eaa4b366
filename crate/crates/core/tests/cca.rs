mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use xalign_core::baselines::{cca_fit, cca_fit_paired, cca_map, cca_transfer};
use xalign_core::Matrix;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().as_slice().iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn matches_generalized_eigenproblem_oracle() {
    for seed in 0..20 {
        let err = common::cca_oracle_error(seed);
        assert!(err < 1e-6, "instance {seed}: correlation error {err:e}");
    }
}

// The ridge shrinks a perfect correlation along a direction of variance σ²
// to σ² / (σ² + ridge), so the exact-correlation cases use σ = 2.

#[test]
fn identical_data_is_fully_correlated_and_maps_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian(300, 4, &mut rng).scale(2.0);
    let model = cca_fit_paired(&x, &x).unwrap();
    assert!(model.correlations.iter().all(|r| (r - 1.0).abs() < 1e-6), "{:?}", model.correlations);
    assert!(max_abs_diff(&cca_map(&model, &x).unwrap(), &x) < 1e-6);
}

#[test]
fn rotation_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian(500, 3, &mut rng).scale(2.0);
    let (a, b) = (0.7f64, -0.4f64);
    let rz = Matrix::from_rows(&[[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]]).unwrap();
    let rx = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, b.cos(), -b.sin()], [0.0, b.sin(), b.cos()]]).unwrap();
    let r = rz.matmul(&rx).unwrap();
    let y = x.matmul(&r).unwrap();
    let model = cca_fit_paired(&x, &y).unwrap();
    assert!(model.correlations.iter().all(|c| (c - 1.0).abs() < 1e-6));
    // Mapping the basis vectors (around the mean) reads off the linear part.
    let probe = Matrix::identity(3);
    let zero = Matrix::zeros(1, 3);
    let origin = cca_map(&model, &zero).unwrap();
    let mut lin = cca_map(&model, &probe).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            lin.set(i, j, lin.get(i, j) - origin.get(0, j));
        }
    }
    assert!(max_abs_diff(&lin, &r) < 1e-3, "{lin:?}");
}

#[test]
fn independent_gaussians_are_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(10_000, 4, &mut rng);
    let y = gaussian(10_000, 4, &mut rng);
    let model = cca_fit_paired(&x, &y).unwrap();
    assert!(model.correlations[0] < 0.1, "{:?}", model.correlations);
}

#[test]
fn correlations_sorted_in_unit_interval_and_projections_whiten() {
    for seed in 0..10 {
        let (x, y) = common::cca_instance(seed);
        let model = cca_fit_paired(&x, &y).unwrap();
        assert!(model.correlations.windows(2).all(|w| w[0] >= w[1]));
        assert!(model.correlations.iter().all(|r| (0.0..=1.0).contains(r)));
        let mut xc = x.clone();
        let neg: Vec<f64> = model.mean_e.iter().map(|m| -m).collect();
        xc.add_row_vector(&neg).unwrap();
        let z = xc.matmul(&model.proj_e).unwrap();
        let cov = z.matmul_tn(&z).unwrap().scale(1.0 / x.rows() as f64);
        let eye = Matrix::identity(cov.rows());
        assert!(max_abs_diff(&cov, &eye) < 1e-4, "seed {seed}: {cov:?}");
    }
}

#[test]
fn transfer_maps_means_and_copies_goals() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xe = gaussian(400, 6, &mut rng);
    let xa = Matrix::from_fn(400, 4, |i, j| xe.get(i, j) * 2.0 + xe.get(i, j + 2) + rng.gen_range(-0.1..0.1));
    let model = cca_fit_paired(&xe, &xa).unwrap();
    let mean = Matrix::from_vec(1, 6, model.mean_e.clone()).unwrap();
    let mapped = cca_map(&model, &mean).unwrap();
    for (m, a) in mapped.row(0).iter().zip(&model.mean_a) {
        assert!((m - a).abs() < 1e-9);
    }
    let obs = Matrix::hcat(&[&xe.rows_range(0..5).unwrap(), &Matrix::filled(5, 2, 0.25)]).unwrap();
    let out = cca_transfer(&model, &obs).unwrap();
    assert_eq!(out.cols(), 4 + 2);
    assert!((0..5).all(|i| out.get(i, 4) == 0.25 && out.get(i, 5) == 0.25));
}

#[test]
fn unpaired_fit_shuffles_and_truncates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xe = gaussian(120, 3, &mut rng);
    let xa = gaussian(80, 2, &mut rng);
    let a = cca_fit(&xe, &xa, 9).unwrap();
    let b = cca_fit(&xe, &xa, 9).unwrap();
    assert_eq!(a.correlations, b.correlations);
    assert_eq!(a.shared_dim(), 2);
    assert!(cca_fit(&Matrix::zeros(0, 3), &xa, 0).is_err());
}

#[test]
fn rank_deficiency_beyond_ridge_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(100, 2, &mut rng).scale(1e5);
    let dup = Matrix::from_fn(100, 3, |i, j| x.get(i, j.min(1)));
    let y = gaussian(100, 2, &mut rng);
    assert!(cca_fit_paired(&dup, &y).is_err());
}
