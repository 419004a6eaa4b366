//! Spectral normalization by power iteration.
//!
//! A weight `W` is replaced by `W / σ(W)` where `σ` is estimated from a
//! persisted left vector `u`: `v = Wᵀu / ‖Wᵀu‖`, `σ = ‖W v‖`. Training calls
//! [`power_step`] once per update to refresh `u`; forward passes only read it.

use super::error::{NumError, NumResult};
use super::matrix::Matrix;
use super::scalar::Scalar;

/// Guard against division by a vanishing norm or singular value.
pub const SN_EPS: f64 = 1e-12;

fn norm<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|&a| a * a).sum::<T>().sqrt()
}

fn scaled<T: Scalar>(x: &[T], s: T) -> Vec<T> {
    x.iter().map(|&a| a * s).collect()
}

/// Quantities from one power-iteration estimate that the backward pass needs.
#[derive(Clone, Debug)]
pub struct SigmaEstimate<T> {
    pub sigma: T,
    /// Persisted vector the estimate started from.
    pub u: Vec<T>,
    /// Refreshed left vector `W v / σ`.
    pub u_next: Vec<T>,
    pub v: Vec<T>,
    a_norm: T,
    /// `(I − v vᵀ) Wᵀ W v`, the part of `∂σ/∂W` that flows through `v`.
    r: Vec<T>,
}

/// One power-iteration estimate of the top singular value of `w` (r×c)
/// starting from `u` (length r).
pub fn estimate<T: Scalar>(w: &Matrix<T>, u: &[T]) -> NumResult<SigmaEstimate<T>> {
    if u.len() != w.rows() {
        return Err(NumError::ShapeMismatch {
            op: "spectral estimate",
            left: w.shape(),
            right: (u.len(), 1),
        });
    }
    let eps = T::lit(SN_EPS);
    let a = w.tmul_vec(u)?;
    let a_norm = norm(&a).max(eps);
    let v = scaled(&a, T::one() / a_norm);
    let b = w.mul_vec(&v)?;
    let sigma = norm(&b);
    let u_next = scaled(&b, T::one() / sigma.max(eps));
    let wtb = w.tmul_vec(&b)?;
    let proj: T = v.iter().zip(&wtb).map(|(&x, &y)| x * y).sum();
    let r = wtb.iter().zip(&v).map(|(&g, &x)| g - proj * x).collect();
    Ok(SigmaEstimate {
        sigma,
        u: u.to_vec(),
        u_next,
        v,
        a_norm,
        r,
    })
}

impl<T: Scalar> SigmaEstimate<T> {
    /// Effective divisor applied to the weight.
    pub fn divisor(&self) -> T {
        self.sigma.max(T::lit(SN_EPS))
    }

    /// Exact `∂σ/∂W`, including the dependence of `v` on `W`.
    pub fn sigma_grad(&self) -> Matrix<T> {
        let eps = T::lit(SN_EPS);
        let rows = self.u.len();
        let cols = self.v.len();
        if self.sigma < eps {
            return Matrix::zeros(rows, cols);
        }
        let c = T::one() / (self.sigma * self.a_norm);
        Matrix::from_fn(rows, cols, |i, j| {
            self.u_next[i] * self.v[j] + c * self.u[i] * self.r[j]
        })
    }

    /// Maps `G = ∂L/∂(W/σ)` to `∂L/∂W`.
    pub fn backprop(&self, w: &Matrix<T>, g: &Matrix<T>) -> NumResult<Matrix<T>> {
        let d = self.divisor();
        let mut out = g.scale(T::one() / d);
        if self.sigma >= T::lit(SN_EPS) {
            let coupling = g.frobenius_dot(w)? / (d * d);
            out.axpy(-coupling, &self.sigma_grad())?;
        }
        Ok(out)
    }
}

/// Refreshes `u` in place with one power iteration.
pub fn power_step<T: Scalar>(w: &Matrix<T>, u: &mut [T]) -> NumResult<()> {
    let est = estimate(w, u)?;
    u.copy_from_slice(&est.u_next);
    Ok(())
}

/// Normalizes `w` by its top singular value after `n_iters` power iterations
/// from `u`. Returns the normalized matrix and the refreshed vector.
pub fn spectral_normalize<T: Scalar>(
    w: &Matrix<T>,
    u: &[T],
    n_iters: usize,
) -> NumResult<(Matrix<T>, Vec<T>)> {
    if n_iters == 0 {
        return Err(NumError::InvalidArgument(
            "spectral_normalize needs at least one iteration".into(),
        ));
    }
    if u.iter().all(|&x| x == T::zero()) {
        return Err(NumError::InvalidArgument(
            "power-iteration vector must be nonzero".into(),
        ));
    }
    let mut u = u.to_vec();
    for _ in 0..n_iters - 1 {
        power_step(w, &mut u)?;
    }
    let est = estimate(w, &u)?;
    Ok((w.scale(T::one() / est.divisor()), est.u_next))
}
