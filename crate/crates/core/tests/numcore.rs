mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xalign_core::numcore::{
    bce, lsq_adv_losses, mse, spectral_normalize, Activation, Adam, ModelFile, NumError,
};
use xalign_core::{Matrix, Mlp};

#[test]
fn reverse_mode_matches_finite_differences_on_every_architecture() {
    for seed in 0..100 {
        let (arch, err) = common::gradient_check(seed);
        assert!(err < 1e-4, "seed {seed} ({arch}): relative error {err:e}");
    }
}

#[test]
fn spectral_norm_matches_svd_oracle() {
    for seed in 0..50 {
        let err = common::spectral_norm_error(seed);
        assert!(err < 1e-3, "seed {seed}: |σ − 1| = {err:e}");
    }
}

#[test]
fn spectral_norm_diag_and_identity() {
    let w = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
    let (n, _) = spectral_normalize(&w, &[0.6, 0.8], 60).unwrap();
    assert!((n.get(0, 0) - 1.0).abs() < 1e-9);
    assert!((n.get(1, 1) - 1.0 / 3.0).abs() < 1e-9);
    let (i, _) = spectral_normalize(&Matrix::identity(3), &[1.0, 0.5, 0.2], 1).unwrap();
    assert!(i.sub(&Matrix::identity(3)).unwrap().as_slice().iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn adam_first_step_hand_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Mlp::with_hidden(1, &[], 1, Activation::Identity, Activation::Identity, false, &mut rng).unwrap();
    net.param_slices_mut()[0][0] = 0.0;
    let x = Matrix::from_rows(&[[1.0]]).unwrap();
    let (_, trace) = net.forward_trace(&x).unwrap();
    // dL/dout = 1 with input 1 gives a unit weight gradient.
    let (grads, _) = net.backward(&trace, &Matrix::filled(1, 1, 1.0)).unwrap();
    let mut opt = Adam::new(1e-3);
    opt.step(&mut net, &grads).unwrap();
    let w = net.param_slices()[0][0];
    assert!((w + 9.99999e-4).abs() < 1e-9, "{w}");
}

#[test]
fn loss_primitives_hand_values() {
    let col = |v: &[f64]| Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap();
    let l = lsq_adv_losses(&col(&[1.0, 0.5]), &col(&[0.0, 0.5])).unwrap();
    // disc: mean(0, 0.25) + mean(0, 0.25); gen: mean(1, 0.25)
    assert!((l.disc_loss - 0.25).abs() < 1e-15);
    assert!((l.gen_loss - 0.625).abs() < 1e-15);
    let a = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
    let b = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
    assert_eq!(mse(&a, &b).unwrap(), 25.0);
    assert!((bce(&col(&[0.9]), &col(&[0.0])).unwrap() - 10f64.ln()).abs() < 1e-12);
    assert!((bce(&col(&[0.5]), &col(&[1.0])).unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn checkpoint_loader_rejects_wrong_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Mlp::with_hidden(4, &[5], 2, Activation::Relu, Activation::Identity, true, &mut rng).unwrap();
    let file = ModelFile::from_mlp(&net, Default::default());
    let back = ModelFile::from_json(&file.to_json()).unwrap();
    assert_eq!(back.to_mlp::<f64>().unwrap().fingerprint(), net.fingerprint());
    assert!(matches!(back.to_mlp_expecting::<f64>(&[4, 6, 2]), Err(NumError::InvalidArgument(_)) | Err(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, rows in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::with_hidden(3, &[8, 8], 2, Activation::LeakyRelu, Activation::Identity, true, &mut rng).unwrap();
        let x = Matrix::from_fn(rows, 3, |i, j| (i as f64 - j as f64) * 0.3);
        prop_assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn lsq_minimum_is_at_targets(r in -3.0f64..3.0, f in -3.0f64..3.0) {
        let m = |v: f64| Matrix::filled(1, 1, v);
        let l = lsq_adv_losses(&m(r), &m(f)).unwrap();
        let opt = lsq_adv_losses(&m(1.0), &m(0.0)).unwrap();
        prop_assert!(l.disc_loss >= opt.disc_loss);
        prop_assert!(l.gen_loss >= lsq_adv_losses(&m(r), &m(1.0)).unwrap().gen_loss);
    }
}
