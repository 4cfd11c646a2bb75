//! Classical canonical correlation analysis on feature batches.
//!
//! Covariances are estimated with the 1/(N−1) convention and ridge-regularized
//! as `Σ + εI`. The whitened coupling matrix `t = Σx^{-1/2} Σxy Σy^{-1/2}` has
//! the canonical correlations as its singular values; the normalized
//! projections `Σx^{-1/2}·u` and `Σy^{-1/2}·v` map centered features into the
//! shared space where per-dimension variance is 1 and the cross-covariance is
//! `diag(corrs)`.

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::{inv_sqrt_spd, svd, sym_eig, Matrix};

/// Eigenvalue floor handed to [`inv_sqrt_spd`] when whitening regularized
/// covariances; the ridge keeps the spectrum well above this.
pub const WHITEN_FLOOR: f64 = 1e-12;

/// A fitted CCA model: per-view training means, normalized projection
/// matrices, and the canonical correlations (descending).
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub proj_x: Matrix,
    pub proj_y: Matrix,
    pub corrs: Vec<f64>,
    pub regularizer: f64,
}

/// Subtracts column means. Returns the centered matrix and the means.
pub fn center(f: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if f.rows() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: f.rows() });
    }
    let means = f.column_means();
    let mut centered = f.clone();
    for i in 0..centered.rows() {
        for (v, m) in centered.row_mut(i).iter_mut().zip(means.iter()) {
            *v -= m;
        }
    }
    Ok((centered, means))
}

/// `(1/(N−1))·cᵀc + eps·I` for a centered feature matrix.
pub fn covariance(centered: &Matrix, eps: f64) -> Result<Matrix> {
    if eps < 0.0 {
        return Err(Error::Range(format!("covariance eps must be >= 0, got {eps}")));
    }
    let worst_mean = centered
        .column_means()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if worst_mean >= 1e-8 {
        return Err(Error::Precondition(format!(
            "covariance requires centered input (worst column mean {worst_mean:e})"
        )));
    }
    let n = centered.rows();
    let mut cov = centered
        .transpose_matmul(centered)
        .scale(1.0 / (n - 1) as f64);
    if eps > 0.0 {
        cov.add_diag(eps);
    }
    Ok(cov)
}

/// `(1/(N−1))·cxᵀ·cy` for two centered feature matrices over the same samples.
pub fn cross_covariance(cx: &Matrix, cy: &Matrix) -> Result<Matrix> {
    if cx.rows() != cy.rows() {
        return Err(Error::Dimension(format!(
            "cross_covariance sample counts differ: {} vs {}",
            cx.rows(),
            cy.rows()
        )));
    }
    let n = cx.rows();
    Ok(cx.transpose_matmul(cy).scale(1.0 / (n - 1) as f64))
}

/// The whitened coupling matrix `Σx^{-1/2} · Σxy · Σy^{-1/2}`.
pub fn compute_t(sx: &Matrix, sxy: &Matrix, sy: &Matrix, floor: f64) -> Result<Matrix> {
    let isx = inv_sqrt_spd(sx, floor)?;
    let isy = inv_sqrt_spd(sy, floor)?;
    Ok(isx.matmul(sxy).matmul(&isy))
}

/// Sum of singular values of `t` — the total canonical correlation, equal to
/// the trace norm `tr((tᵀt)^{1/2})`.
pub fn total_correlation(t: &Matrix) -> Result<f64> {
    let (_, d, _) = svd(t)?;
    Ok(d.iter().sum())
}

/// Trace norm computed through the eigendecomposition of `tᵀt`. Independent
/// route used to cross-check [`total_correlation`].
pub fn trace_norm_via_eig(t: &Matrix) -> Result<f64> {
    let gram = t.transpose_matmul(t);
    let eig = sym_eig(&gram)?;
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum())
}

/// Fits a CCA model on two feature batches of equal dimensionality.
pub fn fit_cca(fx: &Matrix, gy: &Matrix, eps: f64) -> Result<CcaModel> {
    if fx.cols() != gy.cols() {
        return Err(Error::Dimension(format!(
            "fit_cca feature dims differ: {} vs {}",
            fx.cols(),
            gy.cols()
        )));
    }
    if fx.rows() != gy.rows() {
        return Err(Error::Dimension(format!(
            "fit_cca sample counts differ: {} vs {}",
            fx.rows(),
            gy.rows()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Range(format!("fit_cca eps must be positive, got {eps}")));
    }
    let h = fx.cols();
    if fx.rows() < h + 1 {
        return Err(Error::InsufficientSamples { needed: h + 1, got: fx.rows() });
    }
    fx.ensure_finite("fit_cca view-x features")?;
    gy.ensure_finite("fit_cca view-y features")?;

    let (cx, mean_x) = center(fx)?;
    let (cy, mean_y) = center(gy)?;
    let sx = covariance(&cx, eps)?;
    let sy = covariance(&cy, eps)?;
    let sxy = cross_covariance(&cx, &cy)?;

    let isx = inv_sqrt_spd(&sx, WHITEN_FLOOR)?;
    let isy = inv_sqrt_spd(&sy, WHITEN_FLOOR)?;
    let t = isx.matmul(&sxy).matmul(&isy);
    let (u, corrs, v) = svd(&t)?;

    let proj_x = isx.matmul(&u);
    let proj_y = isy.matmul(&v);
    proj_x.ensure_finite("fit_cca proj_x")?;
    proj_y.ensure_finite("fit_cca proj_y")?;

    Ok(CcaModel { mean_x, mean_y, proj_x, proj_y, corrs, regularizer: eps })
}

impl CcaModel {
    pub fn h(&self) -> usize {
        self.mean_x.len()
    }

    /// Number of retained components (columns of the projections).
    pub fn components(&self) -> usize {
        self.corrs.len()
    }

    /// Projects view-X features: `(fx − mean_x) · proj_x`.
    pub fn project_x(&self, fx: &Matrix) -> Result<Matrix> {
        project(fx, &self.mean_x, &self.proj_x, "x")
    }

    /// Projects view-Y features: `(gy − mean_y) · proj_y`.
    pub fn project_y(&self, gy: &Matrix) -> Result<Matrix> {
        project(gy, &self.mean_y, &self.proj_y, "y")
    }

    /// Keeps only the leading `k` canonical components.
    pub fn truncate(&self, k: usize) -> Result<CcaModel> {
        if k == 0 || k > self.components() {
            return Err(Error::Bounds(format!(
                "cannot truncate to {k} components out of {}",
                self.components()
            )));
        }
        Ok(CcaModel {
            mean_x: self.mean_x.clone(),
            mean_y: self.mean_y.clone(),
            proj_x: self.proj_x.take_cols(k),
            proj_y: self.proj_y.take_cols(k),
            corrs: self.corrs[..k].to_vec(),
            regularizer: self.regularizer,
        })
    }

    pub fn write_to(&self, w: &mut ByteWriter) {
        w.put_u32(self.h() as u32);
        w.put_u32(self.components() as u32);
        w.put_f64(self.regularizer);
        w.put_f64_slice(&self.mean_x);
        w.put_f64_slice(&self.mean_y);
        w.put_f64_slice(&self.corrs);
        for m in [&self.proj_x, &self.proj_y] {
            w.put_shape(&[m.rows(), m.cols()]);
            w.put_f64_slice(m.data());
        }
    }

    pub fn read_from(r: &mut ByteReader) -> Result<CcaModel> {
        let h = r.take_u32()? as usize;
        let k = r.take_u32()? as usize;
        let regularizer = r.take_f64()?;
        let mean_x = r.take_f64_vec(h)?;
        let mean_y = r.take_f64_vec(h)?;
        let corrs = r.take_f64_vec(k)?;
        let mut mats = Vec::with_capacity(2);
        for _ in 0..2 {
            let dims = r.take_shape()?;
            if dims.len() != 2 {
                return Err(Error::Format("projection matrix must be rank 2".into()));
            }
            let data = r.take_f64_vec(dims[0] * dims[1])?;
            mats.push(Matrix::from_vec(dims[0], dims[1], data)?);
        }
        let proj_y = mats.pop().unwrap();
        let proj_x = mats.pop().unwrap();
        Ok(CcaModel { mean_x, mean_y, proj_x, proj_y, corrs, regularizer })
    }
}

fn project(features: &Matrix, mean: &[f64], proj: &Matrix, view: &str) -> Result<Matrix> {
    if features.cols() != mean.len() {
        return Err(Error::Dimension(format!(
            "project_{view}: feature dim {} does not match model dim {}",
            features.cols(),
            mean.len()
        )));
    }
    let mut centered = features.clone();
    for i in 0..centered.rows() {
        for (v, m) in centered.row_mut(i).iter_mut().zip(mean.iter()) {
            *v -= m;
        }
    }
    Ok(centered.matmul(proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(n: usize, h: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(n, h, |_, _| rng.normal())
    }

    #[test]
    fn center_hand_case() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let (c, mean) = center(&f).unwrap();
        assert_eq!(mean, vec![2.0, 0.0]);
        assert_eq!(c.data(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn center_zero_mean_input_unchanged() {
        let f = Matrix::from_rows(&[vec![-1.0, 2.0], vec![1.0, -2.0]]).unwrap();
        let (c, mean) = center(&f).unwrap();
        assert_eq!(c, f);
        assert!(mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn center_random_columns_sum_to_zero() {
        let mut rng = Rng::new(2);
        let f = random_matrix(100, 8, &mut rng);
        let (c, _) = center(&f).unwrap();
        for j in 0..8 {
            let sum: f64 = (0..100).map(|i| c.get(i, j)).sum();
            assert!(sum.abs() < 1e-10, "column {j} sum {sum}");
        }
    }

    #[test]
    fn center_needs_two_samples() {
        let f = Matrix::zeros(1, 3);
        assert!(matches!(center(&f), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn covariance_hand_case() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let cov = covariance(&c, 0.0).unwrap();
        assert_eq!(cov.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_ridge_is_additive() {
        let mut rng = Rng::new(3);
        let (c, _) = center(&random_matrix(50, 4, &mut rng)).unwrap();
        let plain = covariance(&c, 0.0).unwrap();
        let ridged = covariance(&c, 0.1).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = plain.get(i, j) + if i == j { 0.1 } else { 0.0 };
                assert!((ridged.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn covariance_monte_carlo_identity() {
        let mut rng = Rng::new(4);
        let (c, _) = center(&random_matrix(10_000, 4, &mut rng)).unwrap();
        let cov = covariance(&c, 0.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov.get(i, j) - expect).abs() < 0.05,
                    "cov[{i}][{j}] = {}",
                    cov.get(i, j)
                );
            }
        }
    }

    #[test]
    fn covariance_rejects_uncentered() {
        let f = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 3.0]]).unwrap();
        assert!(matches!(covariance(&f, 0.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn cross_covariance_self_is_covariance() {
        let mut rng = Rng::new(5);
        let (c, _) = center(&random_matrix(60, 5, &mut rng)).unwrap();
        let cross = cross_covariance(&c, &c).unwrap();
        let cov = covariance(&c, 0.0).unwrap();
        assert!(cross.max_abs_diff(&cov) < 1e-14);
    }

    #[test]
    fn cross_covariance_sign_flip() {
        let mut rng = Rng::new(6);
        let (c, _) = center(&random_matrix(60, 5, &mut rng)).unwrap();
        let neg = c.scale(-1.0);
        let cross = cross_covariance(&c, &neg).unwrap();
        let cov = covariance(&c, 0.0).unwrap();
        assert!(cross.max_abs_diff(&cov.scale(-1.0)) < 1e-14);
    }

    #[test]
    fn cross_covariance_independent_views_small() {
        let mut rng = Rng::new(7);
        let (cx, _) = center(&random_matrix(10_000, 3, &mut rng)).unwrap();
        let (cy, _) = center(&random_matrix(10_000, 3, &mut rng)).unwrap();
        let cross = cross_covariance(&cx, &cy).unwrap();
        assert!(cross.max_abs() < 0.05);
    }

    #[test]
    fn cross_covariance_rejects_mismatched_n() {
        let a = Matrix::zeros(4, 2);
        let b = Matrix::zeros(5, 2);
        assert!(matches!(cross_covariance(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn compute_t_identity_inputs() {
        let i = Matrix::identity(3);
        let t = compute_t(&i, &i, &i, 1e-12).unwrap();
        assert!(t.max_abs_diff(&Matrix::identity(3)) < 1e-10);
    }

    #[test]
    fn compute_t_zero_cross() {
        let i = Matrix::identity(3);
        let z = Matrix::zeros(3, 3);
        let t = compute_t(&i, &z, &i, 1e-12).unwrap();
        assert!(t.max_abs() < 1e-14);
    }

    #[test]
    fn compute_t_identical_views_is_identity() {
        let mut rng = Rng::new(8);
        let b = random_matrix(5, 5, &mut rng);
        let mut sigma = b.transpose_matmul(&b);
        sigma.add_diag(0.5);
        let t = compute_t(&sigma, &sigma, &sigma, 1e-12).unwrap();
        assert!(t.max_abs_diff(&Matrix::identity(5)) < 1e-8);
    }

    #[test]
    fn total_correlation_identity_and_zero() {
        assert!((total_correlation(&Matrix::identity(4)).unwrap() - 4.0).abs() < 1e-10);
        assert!(total_correlation(&Matrix::zeros(4, 4)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn total_correlation_matches_trace_norm() {
        let mut rng = Rng::new(9);
        for _ in 0..5 {
            let t = random_matrix(6, 6, &mut rng);
            let via_svd = total_correlation(&t).unwrap();
            let via_eig = trace_norm_via_eig(&t).unwrap();
            assert!((via_svd - via_eig).abs() < 1e-8, "{via_svd} vs {via_eig}");
        }
    }

    #[test]
    fn fit_identical_views_saturates() {
        let mut rng = Rng::new(10);
        let fx = random_matrix(1000, 4, &mut rng);
        let model = fit_cca(&fx, &fx, 1e-6).unwrap();
        for c in &model.corrs {
            assert!(*c >= 0.999, "corr {c}");
        }
    }

    #[test]
    fn fit_independent_views_near_zero() {
        let mut rng = Rng::new(11);
        let fx = random_matrix(10_000, 4, &mut rng);
        let gy = random_matrix(10_000, 4, &mut rng);
        let model = fit_cca(&fx, &gy, 1e-6).unwrap();
        for c in &model.corrs {
            assert!(*c < 0.1, "corr {c}");
        }
    }

    #[test]
    fn fit_needs_enough_samples() {
        let fx = Matrix::zeros(4, 4);
        let gy = Matrix::zeros(4, 4);
        assert!(matches!(
            fit_cca(&fx, &gy, 1e-3),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn corrs_sorted_and_bounded() {
        let mut rng = Rng::new(12);
        let shared = random_matrix(500, 4, &mut rng);
        let noise = random_matrix(500, 4, &mut rng);
        let gy = shared.add(&noise.scale(0.5));
        let model = fit_cca(&shared, &gy, 1e-4).unwrap();
        for w in model.corrs.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for c in &model.corrs {
            assert!(*c >= 0.0 && *c <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn projection_whitens_fitting_batch() {
        let mut rng = Rng::new(13);
        let fx = random_matrix(2000, 4, &mut rng);
        let gy = random_matrix(2000, 4, &mut rng).add(&fx.scale(0.8));
        let model = fit_cca(&fx, &gy, 1e-6).unwrap();
        let px = model.project_x(&fx).unwrap();
        let n = px.rows() as f64;
        for j in 0..4 {
            let var: f64 = (0..px.rows()).map(|i| px.get(i, j) * px.get(i, j)).sum::<f64>() / (n - 1.0);
            assert!((var - 1.0).abs() < 1e-3, "dim {j} variance {var}");
        }
    }

    #[test]
    fn projection_diagonalizes_cross_covariance() {
        let mut rng = Rng::new(14);
        let fx = random_matrix(2000, 4, &mut rng);
        let gy = random_matrix(2000, 4, &mut rng).add(&fx.scale(0.6));
        let model = fit_cca(&fx, &gy, 1e-6).unwrap();
        let px = model.project_x(&fx).unwrap();
        let py = model.project_y(&gy).unwrap();
        let cross = cross_covariance(&px, &py).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { model.corrs[i] } else { 0.0 };
                assert!(
                    (cross.get(i, j) - expect).abs() < 1e-3,
                    "cross[{i}][{j}] = {} expected {expect}",
                    cross.get(i, j)
                );
            }
        }
    }

    #[test]
    fn projecting_the_mean_gives_zero() {
        let mut rng = Rng::new(15);
        let fx = random_matrix(300, 4, &mut rng);
        let gy = random_matrix(300, 4, &mut rng);
        let model = fit_cca(&fx, &gy, 1e-3).unwrap();
        let mean_row = Matrix::from_vec(1, 4, model.mean_x.clone()).unwrap();
        let proj = model.project_x(&mean_row).unwrap();
        assert!(proj.max_abs() < 1e-12);
    }

    #[test]
    fn scale_invariance_of_correlations() {
        let mut rng = Rng::new(16);
        let fx = random_matrix(800, 4, &mut rng);
        let gy = random_matrix(800, 4, &mut rng).add(&fx.scale(0.5));
        // Whitening cancels per-view scale exactly when the ridge is
        // negligible against the spectrum.
        let base = fit_cca(&fx, &gy, 1e-10).unwrap();
        let scaled = fit_cca(&fx.scale(3.0), &gy, 1e-10).unwrap();
        for (a, b) in base.corrs.iter().zip(scaled.corrs.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn joint_row_permutation_leaves_model_unchanged() {
        let mut rng = Rng::new(17);
        let fx = random_matrix(200, 3, &mut rng);
        let gy = random_matrix(200, 3, &mut rng).add(&fx.scale(0.4));
        let base = fit_cca(&fx, &gy, 1e-4).unwrap();

        let mut perm: Vec<usize> = (0..200).collect();
        rng.shuffle(&mut perm);
        let fx_p = Matrix::from_fn(200, 3, |i, j| fx.get(perm[i], j));
        let gy_p = Matrix::from_fn(200, 3, |i, j| gy.get(perm[i], j));
        let permuted = fit_cca(&fx_p, &gy_p, 1e-4).unwrap();

        for (a, b) in base.corrs.iter().zip(permuted.corrs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(base.proj_x.max_abs_diff(&permuted.proj_x) < 1e-8);
    }

    #[test]
    fn view_swap_symmetry() {
        let mut rng = Rng::new(18);
        let fx = random_matrix(300, 3, &mut rng);
        let gy = random_matrix(300, 3, &mut rng).add(&fx.scale(0.7));
        let ab = fit_cca(&fx, &gy, 1e-4).unwrap();
        let ba = fit_cca(&gy, &fx, 1e-4).unwrap();
        for (a, b) in ab.corrs.iter().zip(ba.corrs.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(ab.proj_x.max_abs_diff(&ba.proj_y) < 1e-8);
        assert!(ab.proj_y.max_abs_diff(&ba.proj_x) < 1e-8);
    }

    #[test]
    fn truncate_keeps_leading_components() {
        let mut rng = Rng::new(19);
        let fx = random_matrix(300, 4, &mut rng);
        let gy = random_matrix(300, 4, &mut rng).add(&fx.scale(0.5));
        let model = fit_cca(&fx, &gy, 1e-4).unwrap();
        let cut = model.truncate(2).unwrap();
        assert_eq!(cut.components(), 2);
        assert_eq!(cut.corrs, model.corrs[..2].to_vec());
        let projected = cut.project_x(&fx).unwrap();
        assert_eq!(projected.cols(), 2);
        assert!(model.truncate(0).is_err());
        assert!(model.truncate(5).is_err());
    }

    #[test]
    fn model_round_trips_through_bytes() {
        let mut rng = Rng::new(20);
        let fx = random_matrix(100, 3, &mut rng);
        let gy = random_matrix(100, 3, &mut rng);
        let model = fit_cca(&fx, &gy, 1e-3).unwrap();
        let mut w = ByteWriter::new();
        model.write_to(&mut w);
        let bytes = w.into_bytes();
        let mut r = ByteReader::new(&bytes);
        let back = CcaModel::read_from(&mut r).unwrap();
        assert_eq!(model, back);
    }
}
