//! The deep-CCA training objective: negative total canonical correlation of a
//! feature batch pair, with exact gradients with respect to both batches.
//!
//! With centered batches f̄, ḡ and `t = Σx^{-1/2} Σxy Σy^{-1/2} = u·diag(d)·vᵀ`
//! on ε-ridged covariances, the gradient of Σdᵢ uses
//! `Δxy = Σx^{-1/2}·u·vᵀ·Σy^{-1/2}` and `Δxx = −½·Σx^{-1/2}·u·diag(d)·uᵀ·Σx^{-1/2}`:
//!
//!   ∂(Σdᵢ)/∂f̄ = (1/(N−1)) · (2·f̄·Δxx + ḡ·Δxyᵀ)
//!
//! and symmetrically for ḡ. The gradient is exact for the ridged objective;
//! its correctness is pinned by the finite-difference suite, which runs the
//! same computation at perturbed inputs.

use crate::cca::{center, covariance, cross_covariance, WHITEN_FLOOR};
use crate::error::{Error, Result};
use crate::numerics::{inv_sqrt_spd, svd, Matrix};

/// Loss, per-batch gradients, and the canonical correlations of the batch.
#[derive(Debug, Clone)]
pub struct DccaLossResult {
    /// `−Σdᵢ`, in `[−h, 0]`.
    pub loss: f64,
    pub grad_fx: Matrix,
    pub grad_gy: Matrix,
    /// Singular values of the batch coupling matrix, descending.
    pub corrs: Vec<f64>,
    /// Set when two singular values are within 1e-10 of each other, where the
    /// gradient of their sum is not unique. Diagnostic only.
    pub near_degenerate: bool,
}

/// Evaluates the DCCA loss and its gradients on one minibatch of encoder
/// outputs (rows are samples).
pub fn dcca_loss(fx: &Matrix, gy: &Matrix, eps: f64) -> Result<DccaLossResult> {
    if fx.rows() != gy.rows() || fx.cols() != gy.cols() {
        return Err(Error::Dimension(format!(
            "dcca_loss batches must agree: {}x{} vs {}x{}",
            fx.rows(),
            fx.cols(),
            gy.rows(),
            gy.cols()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Range(format!("dcca_loss eps must be positive, got {eps}")));
    }
    let n = fx.rows();
    let h = fx.cols();
    if n < h + 1 {
        return Err(Error::InsufficientSamples { needed: h + 1, got: n });
    }
    fx.ensure_finite("dcca_loss view-x batch")?;
    gy.ensure_finite("dcca_loss view-y batch")?;

    let (cf, _) = center(fx)?;
    let (cg, _) = center(gy)?;
    if cf.max_abs() < 1e-12 || cg.max_abs() < 1e-12 {
        return Err(Error::DegenerateBatch);
    }

    let sx = covariance(&cf, eps)?;
    let sy = covariance(&cg, eps)?;
    let sxy = cross_covariance(&cf, &cg)?;

    let isx = inv_sqrt_spd(&sx, WHITEN_FLOOR)?;
    let isy = inv_sqrt_spd(&sy, WHITEN_FLOOR)?;
    let t = isx.matmul(&sxy).matmul(&isy);
    let (u, d, v) = svd(&t)?;

    let total: f64 = d.iter().sum();
    let loss = -total;

    let near_degenerate = d.windows(2).any(|w| (w[0] - w[1]).abs() < 1e-10);

    // Δxy and the two within-view terms.
    let delta_xy = isx.matmul(&u).matmul(&v.transpose()).matmul(&isy);
    let delta_xx = isx
        .matmul(&u)
        .matmul(&Matrix::diag(&d))
        .matmul(&u.transpose())
        .matmul(&isx)
        .scale(-0.5);
    let delta_yy = isy
        .matmul(&v)
        .matmul(&Matrix::diag(&d))
        .matmul(&v.transpose())
        .matmul(&isy)
        .scale(-0.5);

    let scale = 1.0 / (n - 1) as f64;
    // Gradient of the (maximized) correlation wrt the centered batches.
    let corr_grad_f = cf
        .matmul(&delta_xx)
        .scale(2.0)
        .add(&cg.matmul(&delta_xy.transpose()))
        .scale(scale);
    let corr_grad_g = cg
        .matmul(&delta_yy)
        .scale(2.0)
        .add(&cf.matmul(&delta_xy))
        .scale(scale);

    // Loss is the negative; pass back through the centering map (subtract
    // column means — analytically already zero, zeroed exactly here).
    let grad_fx = remove_column_means(corr_grad_f.scale(-1.0));
    let grad_gy = remove_column_means(corr_grad_g.scale(-1.0));
    grad_fx.ensure_finite("dcca_loss grad_fx")?;
    grad_gy.ensure_finite("dcca_loss grad_gy")?;

    Ok(DccaLossResult { loss, grad_fx, grad_gy, corrs: d, near_degenerate })
}

fn remove_column_means(mut m: Matrix) -> Matrix {
    let means = m.column_means();
    for i in 0..m.rows() {
        for (v, mu) in m.row_mut(i).iter_mut().zip(means.iter()) {
            *v -= mu;
        }
    }
    m
}
