//! Scalar losses with their gradients w.r.t. the prediction argument.

use super::error::{NumError, NumResult};
use super::matrix::Matrix;
use super::scalar::Scalar;

/// Probability clamp used by [`bce`].
pub const PROB_CLAMP: f64 = 1e-7;

/// Least-squares adversarial losses for one discriminator evaluation.
#[derive(Clone, Debug)]
pub struct LsqAdv<T> {
    /// `mean((d_real − 1)²) + mean(d_fake²)`
    pub disc_loss: T,
    /// `mean((d_fake − 1)²)`
    pub gen_loss: T,
    pub d_disc_d_real: Matrix<T>,
    pub d_disc_d_fake: Matrix<T>,
    pub d_gen_d_fake: Matrix<T>,
}

fn check_head<T: Scalar>(op: &'static str, m: &Matrix<T>) -> NumResult<()> {
    if m.rows() == 0 {
        return Err(NumError::EmptyBatch(op));
    }
    if m.cols() != 1 {
        return Err(NumError::ShapeMismatch {
            op,
            left: m.shape(),
            right: (m.rows(), 1),
        });
    }
    Ok(())
}

pub fn lsq_adv_losses<T: Scalar>(d_real: &Matrix<T>, d_fake: &Matrix<T>) -> NumResult<LsqAdv<T>> {
    check_head("lsq_adv_losses", d_real)?;
    check_head("lsq_adv_losses", d_fake)?;
    let nr = T::from_usize(d_real.rows()).unwrap_or_else(T::one);
    let nf = T::from_usize(d_fake.rows()).unwrap_or_else(T::one);
    let two = T::lit(2.0);
    let real_term: T = d_real.as_slice().iter().map(|&d| (d - T::one()).powi(2)).sum::<T>() / nr;
    let fake_term: T = d_fake.as_slice().iter().map(|&d| d * d).sum::<T>() / nf;
    let gen_loss: T = d_fake.as_slice().iter().map(|&d| (d - T::one()).powi(2)).sum::<T>() / nf;
    Ok(LsqAdv {
        disc_loss: real_term + fake_term,
        gen_loss,
        d_disc_d_real: d_real.map(|d| two * (d - T::one()) / nr),
        d_disc_d_fake: d_fake.map(|d| two * d / nf),
        d_gen_d_fake: d_fake.map(|d| two * (d - T::one()) / nf),
    })
}

/// Mean over rows of the squared L2 distance between rows of `a` and `b`.
pub fn mse<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> NumResult<T> {
    Ok(mse_with_grad(a, b)?.0)
}

/// [`mse`] and its gradient w.r.t. `a`.
pub fn mse_with_grad<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> NumResult<(T, Matrix<T>)> {
    if a.shape() != b.shape() {
        return Err(NumError::ShapeMismatch {
            op: "mse",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.rows() == 0 {
        return Err(NumError::EmptyBatch("mse"));
    }
    let n = T::from_usize(a.rows()).unwrap_or_else(T::one);
    let diff = a.sub(b)?;
    let value = diff.as_slice().iter().map(|&d| d * d).sum::<T>() / n;
    let two_over_n = T::lit(2.0) / n;
    Ok((value, diff.scale(two_over_n)))
}

/// Mean binary cross-entropy of probabilities against {0,1} labels, with
/// probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce<T: Scalar>(p: &Matrix<T>, y: &Matrix<T>) -> NumResult<T> {
    Ok(bce_with_grad(p, y)?.0)
}

/// [`bce`] and its gradient w.r.t. `p`, evaluated at the clamped probability.
pub fn bce_with_grad<T: Scalar>(p: &Matrix<T>, y: &Matrix<T>) -> NumResult<(T, Matrix<T>)> {
    if p.shape() != y.shape() {
        return Err(NumError::ShapeMismatch {
            op: "bce",
            left: p.shape(),
            right: y.shape(),
        });
    }
    if p.rows() == 0 {
        return Err(NumError::EmptyBatch("bce"));
    }
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let n = T::from_usize(p.rows() * p.cols()).unwrap_or_else(T::one);
    let mut value = T::zero();
    let grad = p.zip_map(y, |pi, yi| {
        let q = pi.max(lo).min(hi);
        -(yi / q - (T::one() - yi) / (T::one() - q)) / n
    })?;
    for (&pi, &yi) in p.as_slice().iter().zip(y.as_slice()) {
        let q = pi.max(lo).min(hi);
        value -= yi * q.ln() + (T::one() - yi) * (T::one() - q).ln();
    }
    Ok((value / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn lsq_fixed_point() {
        let l = lsq_adv_losses(&col(&[1.0]), &col(&[0.0])).unwrap();
        assert_eq!(l.disc_loss, 0.0);
        assert_eq!(l.gen_loss, 1.0);
    }

    #[test]
    fn lsq_at_one_half() {
        let l = lsq_adv_losses(&col(&[0.5]), &col(&[0.5])).unwrap();
        assert!((l.disc_loss - 0.5).abs() < 1e-15);
        assert!((l.gen_loss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn lsq_mixed_batch_matches_hand_means() {
        // real: (0.2-1)^2=0.64, (1.5-1)^2=0.25, (-1-1)^2=4 -> 4.89/3 = 1.63
        // fake: 0.3^2=0.09, (-0.6)^2=0.36 -> 0.225 ; gen: 0.49, 2.56 -> 1.525
        let l = lsq_adv_losses(&col(&[0.2, 1.5, -1.0]), &col(&[0.3, -0.6])).unwrap();
        assert!((l.disc_loss - (1.63 + 0.225)).abs() < 1e-12);
        assert!((l.gen_loss - 1.525).abs() < 1e-12);
    }

    #[test]
    fn lsq_rejects_empty_batch() {
        let e = Matrix::<f64>::zeros(0, 1);
        assert!(matches!(
            lsq_adv_losses(&e, &col(&[1.0])),
            Err(NumError::EmptyBatch(_))
        ));
    }

    #[test]
    fn mse_values() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 25.0);
        assert_eq!(mse(&b, &b).unwrap(), 0.0);
        // rows (1,2)-(0,0) -> 5 ; (−1,1)-(1,1) -> 4 ; mean 4.5
        let c = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 1.0]]).unwrap();
        let d = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(mse(&c, &d).unwrap(), 4.5);
        assert!(mse(&a, &c).is_err());
    }

    #[test]
    fn bce_values() {
        let half = col(&[0.5, 0.5]);
        let v = bce(&half, &col(&[0.0, 1.0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce(&col(&[1.0]), &col(&[1.0])).unwrap() < 1e-6);
        let v = bce(&col(&[0.9]), &col(&[0.0])).unwrap();
        assert!((v - 2.302_585_092_994_046).abs() < 1e-9);
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let p = col(&[0.3, 0.8]);
        let y = col(&[1.0, 0.0]);
        let (_, g) = bce_with_grad(&p, &y).unwrap();
        let h = 1e-7;
        for i in 0..2 {
            let mut pp = p.clone();
            pp.set(i, 0, p.get(i, 0) + h);
            let mut pm = p.clone();
            pm.set(i, 0, p.get(i, 0) - h);
            let fd = (bce(&pp, &y).unwrap() - bce(&pm, &y).unwrap()) / (2.0 * h);
            assert!((fd - g.get(i, 0)).abs() < 1e-6);
        }
    }
}
