//! Links the cheap-fidelity GP and the expensive-fidelity GP through a joint
//! Gaussian with cross-covariance rho * k_alpha, the Schur-complement transfer
//! update, and joint-conditioned prediction of the expensive objective.

use crate::gp::{cholesky_with_jitter, kernel_matern52, GpError, GpModel, KernelHyper};
use crate::space::Configuration;
use crate::stats::{mean, sample_std};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CouplingError {
    #[error("cross-covariance shapes do not conform")]
    DimensionMismatch,
    #[error("cheap-fidelity covariance is singular: {0}")]
    SingularTransfer(GpError),
    #[error("joint covariance is singular: {0}")]
    SingularModel(GpError),
}

pub const RHO_DEFAULT: f64 = 0.9;
pub const RHO_MAX: f64 = 0.99;

/// Cross-fidelity correlation from co-observed (cheap, expensive) FOM pairs.
/// Pearson correlation clamped to [0, RHO_MAX]; falls back to RHO_DEFAULT
/// below 3 pairs or when either side is constant.
pub fn estimate_rho(co_observations: &[(f64, f64)]) -> f64 {
    if co_observations.len() < 3 {
        return RHO_DEFAULT;
    }
    let a: Vec<f64> = co_observations.iter().map(|p| p.0).collect();
    let b: Vec<f64> = co_observations.iter().map(|p| p.1).collect();
    let (sa, sb) = (sample_std(&a), sample_std(&b));
    if sa == 0.0 || sb == 0.0 {
        return RHO_DEFAULT;
    }
    let (ma, mb) = (mean(&a), mean(&b));
    let cov = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (a.len() - 1) as f64;
    (cov / (sa * sb)).clamp(0.0, RHO_MAX)
}

/// Cross-covariance block: entry (i, j) = rho * k_alpha(rows[i], cols[j]).
pub fn cross_covariance(
    rows: &[Vec<f64>],
    cols: &[Vec<f64>],
    hyper_alpha: &KernelHyper,
    rho: f64,
) -> Result<DMatrix<f64>, CouplingError> {
    let mut m = DMatrix::zeros(rows.len(), cols.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            m[(i, j)] = rho
                * kernel_matern52(r, c, hyper_alpha)
                    .map_err(|_| CouplingError::DimensionMismatch)?;
        }
    }
    Ok(m)
}

/// Schur complement K_beta - K_beta_alpha K_alpha^{-1} K_alpha_beta, computed
/// through a factorization of K_alpha and symmetrized.
pub fn transfer_update(
    k_beta: &DMatrix<f64>,
    k_beta_alpha: &DMatrix<f64>,
    k_alpha: &DMatrix<f64>,
) -> Result<DMatrix<f64>, CouplingError> {
    if k_beta_alpha.ncols() != k_alpha.nrows()
        || k_beta_alpha.nrows() != k_beta.nrows()
        || k_beta.nrows() != k_beta.ncols()
        || k_alpha.nrows() != k_alpha.ncols()
    {
        return Err(CouplingError::DimensionMismatch);
    }
    let (factor, _) = cholesky_with_jitter(k_alpha).map_err(CouplingError::SingularTransfer)?;
    let solved = factor.solve(&k_beta_alpha.transpose());
    let s = k_beta - k_beta_alpha * solved;
    Ok((&s + s.transpose()) * 0.5)
}

/// The two fidelity surrogates plus the joint factorization they induce.
#[derive(Debug, Clone)]
pub struct CoupledGp {
    pub gp_alpha: GpModel,
    pub gp_beta: GpModel,
    pub rho: f64,
    co_observations: Vec<(Configuration, f64, f64)>,
    joint_factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    joint_weights: DVector<f64>,
}

impl CoupledGp {
    /// Builds the joint model. `rho` is clamped so the implied joint
    /// covariance stays PSD for the two signal variances.
    pub fn new(
        gp_alpha: GpModel,
        gp_beta: GpModel,
        rho: f64,
        co_observations: Vec<(Configuration, f64, f64)>,
    ) -> Result<Self, CouplingError> {
        let sv_ratio = (gp_beta.hyper().signal_variance / gp_alpha.hyper().signal_variance).sqrt();
        let rho_requested = rho.clamp(0.0, RHO_MAX.min(sv_ratio));

        let na = gp_alpha.len();
        let nb = gp_beta.len();
        let n = na + nb;
        let ka = crate::gp::gram(gp_alpha.inputs(), gp_alpha.hyper());
        let kb = crate::gp::gram(gp_beta.inputs(), gp_beta.hyper());
        let assemble = |rho: f64| -> Result<DMatrix<f64>, CouplingError> {
            let mut k = DMatrix::zeros(n, n);
            let kx =
                cross_covariance(gp_alpha.inputs(), gp_beta.inputs(), gp_alpha.hyper(), rho)?;
            k.view_mut((0, 0), (na, na)).copy_from(&ka);
            k.view_mut((na, na), (nb, nb)).copy_from(&kb);
            k.view_mut((0, na), (na, nb)).copy_from(&kx);
            k.view_mut((na, 0), (nb, na)).copy_from(&kx.transpose());
            for i in 0..na {
                k[(i, i)] += gp_alpha.hyper().noise_variance;
            }
            for i in 0..nb {
                k[(na + i, na + i)] += gp_beta.hyper().noise_variance;
            }
            Ok(k)
        };

        // When the two kernels disagree, the joint matrix can be indefinite
        // even for admissible rho; shrink the coupling until it factorizes
        // (rho = 0 is block diagonal and always succeeds).
        let mut rho = rho_requested;
        let (joint_factor, rho) = loop {
            match cholesky_with_jitter(&assemble(rho)?) {
                Ok((factor, _)) => break (factor, rho),
                Err(err) => {
                    if rho == 0.0 {
                        return Err(CouplingError::SingularModel(err));
                    }
                    rho = if rho < 1e-3 { 0.0 } else { rho * 0.5 };
                }
            }
        };

        let resid = DVector::from_iterator(
            n,
            gp_alpha
                .targets()
                .iter()
                .map(|y| y - gp_alpha.hyper().prior_mean)
                .chain(
                    gp_beta
                        .targets()
                        .iter()
                        .map(|y| y - gp_beta.hyper().prior_mean),
                ),
        );
        let joint_weights = joint_factor.solve(&resid);

        Ok(Self {
            gp_alpha,
            gp_beta,
            rho,
            co_observations,
            joint_factor,
            joint_weights,
        })
    }

    pub fn co_observations(&self) -> &[(Configuration, f64, f64)] {
        &self.co_observations
    }

    /// Posterior of the expensive objective conditioned on every cheap and
    /// expensive observation through the joint covariance. Reduces to the
    /// beta-only posterior at rho = 0.
    pub fn predict_expensive(&self, x: &[f64]) -> (f64, f64) {
        let na = self.gp_alpha.len();
        let nb = self.gp_beta.len();
        let k_star = DVector::from_iterator(
            na + nb,
            self.gp_alpha
                .inputs()
                .iter()
                .map(|xi| {
                    self.rho * kernel_matern52(x, xi, self.gp_alpha.hyper()).unwrap_or(0.0)
                })
                .chain(self.gp_beta.inputs().iter().map(|xi| {
                    kernel_matern52(x, xi, self.gp_beta.hyper()).unwrap_or(0.0)
                })),
        );
        let mean = self.gp_beta.hyper().prior_mean + k_star.dot(&self.joint_weights);
        let solved = self.joint_factor.solve(&k_star);
        let prior = kernel_matern52(x, x, self.gp_beta.hyper()).unwrap_or(0.0);
        let var = prior - k_star.dot(&solved);
        (mean, var.max(0.0))
    }
}
