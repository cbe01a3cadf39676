//! Gaussian process surrogate over the encoded unit cube: Matern 5/2 kernel
//! with per-dimension lengthscales, exact posterior via Cholesky with
//! escalating jitter, log marginal likelihood, and closed-form expected
//! improvement (maximization convention).

use crate::par::par_map;
use crate::stats::{mean, normal_cdf, normal_pdf, variance};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("kernel inputs have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cannot fit a GP without observations")]
    Empty,
    #[error("covariance factorization failed even at jitter {0:e}")]
    SingularModel(f64),
}

/// Jitter escalation ladder; fitting fails hard past the last entry.
const JITTERS: &[f64] = &[0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

const SQRT_5: f64 = 2.23606797749979;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelHyper {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub prior_mean: f64,
}

impl KernelHyper {
    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        Self {
            lengthscales: vec![lengthscale; dim],
            signal_variance,
            noise_variance,
            prior_mean: 0.0,
        }
    }
}

fn matern52_unchecked(a: &[f64], b: &[f64], hyper: &KernelHyper) -> f64 {
    let mut r2 = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / hyper.lengthscales[i];
        r2 += d * d;
    }
    let r = r2.sqrt();
    hyper.signal_variance * (1.0 + SQRT_5 * r + 5.0 * r2 / 3.0) * (-SQRT_5 * r).exp()
}

pub fn kernel_matern52(a: &[f64], b: &[f64], hyper: &KernelHyper) -> Result<f64, GpError> {
    if a.len() != b.len() || a.len() != hyper.lengthscales.len() {
        return Err(GpError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(matern52_unchecked(a, b, hyper))
}

/// Gram matrix of the kernel over one point set (no noise term).
pub fn gram(xs: &[Vec<f64>], hyper: &KernelHyper) -> DMatrix<f64> {
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = matern52_unchecked(&xs[i], &xs[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorize `m + jitter I` with escalating jitter, returning the factor and
/// the jitter that succeeded.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let scale = m.diagonal().amax().max(1.0);
    for &j in JITTERS {
        let mut k = m.clone();
        if j > 0.0 {
            for i in 0..k.nrows() {
                k[(i, i)] += j * scale;
            }
        }
        if let Some(f) = Cholesky::new(k) {
            return Ok((f, j * scale));
        }
    }
    Err(GpError::SingularModel(JITTERS[JITTERS.len() - 1] * scale))
}

#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    hyper: KernelHyper,
    factor: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    half_log_det: f64,
    jitter: f64,
}

impl GpModel {
    /// Fit with fixed hyperparameters.
    pub fn with_hyper(
        observations: &[(Vec<f64>, f64)],
        hyper: KernelHyper,
    ) -> Result<Self, GpError> {
        if observations.is_empty() {
            return Err(GpError::Empty);
        }
        let inputs: Vec<Vec<f64>> = observations.iter().map(|(x, _)| x.clone()).collect();
        let targets: Vec<f64> = observations.iter().map(|(_, y)| *y).collect();
        let mut k = gram(&inputs, &hyper);
        for i in 0..k.nrows() {
            k[(i, i)] += hyper.noise_variance;
        }
        let (factor, jitter) = cholesky_with_jitter(&k)?;
        let resid = DVector::from_iterator(
            targets.len(),
            targets.iter().map(|y| y - hyper.prior_mean),
        );
        let alpha = factor.solve(&resid);
        let half_log_det = factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self {
            inputs,
            targets,
            hyper,
            factor,
            alpha,
            half_log_det,
            jitter,
        })
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let k_star = DVector::from_iterator(
            n,
            self.inputs.iter().map(|xi| matern52_unchecked(x, xi, &self.hyper)),
        );
        let mean = self.hyper.prior_mean + k_star.dot(&self.alpha);
        let solved = self.factor.solve(&k_star);
        let var = matern52_unchecked(x, x, &self.hyper) - k_star.dot(&solved);
        (mean, var.max(0.0))
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.targets.len() as f64;
        let resid = DVector::from_iterator(
            self.targets.len(),
            self.targets.iter().map(|y| y - self.hyper.prior_mean),
        );
        -0.5 * resid.dot(&self.alpha)
            - self.half_log_det
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

struct SearchBounds {
    ls: (f64, f64),
    sv: (f64, f64),
    nv: (f64, f64),
}

fn lml_for(observations: &[(Vec<f64>, f64)], hyper: &KernelHyper) -> Option<f64> {
    GpModel::with_hyper(observations, hyper.clone())
        .ok()
        .map(|m| m.log_marginal_likelihood())
}

/// Fit a GP; with `fit_hyper` the hyperparameters maximize the log marginal
/// likelihood via a 64-sample log-uniform random search followed by 100 steps
/// of multiplicative coordinate descent. Deterministic for a fixed rng state.
pub fn fit_gp<R: Rng>(
    observations: &[(Vec<f64>, f64)],
    fit_hyper: bool,
    rng: &mut R,
) -> Result<GpModel, GpError> {
    if observations.is_empty() {
        return Err(GpError::Empty);
    }
    let dim = observations[0].0.len();
    let ys: Vec<f64> = observations.iter().map(|(_, y)| *y).collect();
    let mu0 = mean(&ys);
    let vy = variance(&ys).max(1e-10);

    if !fit_hyper {
        return GpModel::with_hyper(
            observations,
            KernelHyper {
                lengthscales: vec![0.5; dim],
                signal_variance: vy,
                noise_variance: 1e-4 * vy,
                prior_mean: mu0,
            },
        );
    }

    let bounds = SearchBounds {
        ls: (0.05, 5.0),
        sv: (0.1 * vy, 10.0 * vy),
        nv: (1e-6 * vy, 1e-1 * vy),
    };

    let candidates: Vec<KernelHyper> = (0..64)
        .map(|_| KernelHyper {
            lengthscales: (0..dim)
                .map(|_| log_uniform(rng, bounds.ls.0, bounds.ls.1))
                .collect(),
            signal_variance: log_uniform(rng, bounds.sv.0, bounds.sv.1),
            noise_variance: log_uniform(rng, bounds.nv.0, bounds.nv.1),
            prior_mean: mu0,
        })
        .collect();

    let scored = par_map(&candidates, |h| lml_for(observations, h));
    let mut best: Option<(f64, KernelHyper)> = None;
    for (h, s) in candidates.iter().zip(&scored) {
        if let Some(s) = s {
            if best.as_ref().map_or(true, |(b, _)| s > b) {
                best = Some((*s, h.clone()));
            }
        }
    }
    let (mut best_lml, mut hyper) = best.ok_or(GpError::SingularModel(1e-4))?;

    // Coordinate descent: cycle lengthscales, then signal, then noise,
    // trying a multiplicative step in both directions.
    let n_coords = dim + 2;
    for step in 0..100 {
        let coord = step % n_coords;
        for &factor in &[1.25, 0.8] {
            let mut trial = hyper.clone();
            match coord {
                c if c < dim => {
                    trial.lengthscales[c] =
                        (trial.lengthscales[c] * factor).clamp(bounds.ls.0, bounds.ls.1);
                }
                c if c == dim => {
                    trial.signal_variance =
                        (trial.signal_variance * factor).clamp(bounds.sv.0, bounds.sv.1);
                }
                _ => {
                    trial.noise_variance =
                        (trial.noise_variance * factor).clamp(bounds.nv.0, bounds.nv.1);
                }
            }
            if let Some(s) = lml_for(observations, &trial) {
                if s > best_lml {
                    best_lml = s;
                    hyper = trial;
                }
            }
        }
    }

    GpModel::with_hyper(observations, hyper)
}

/// Closed-form expected improvement above `incumbent`, maximization
/// convention. Returns max(mean - incumbent, 0) at zero variance.
pub fn expected_improvement(mean: f64, variance: f64, incumbent: f64) -> f64 {
    let s = variance.max(0.0).sqrt();
    if s == 0.0 {
        return (mean - incumbent).max(0.0);
    }
    let z = (mean - incumbent) / s;
    ((mean - incumbent) * normal_cdf(z) + s * normal_pdf(z)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points<R: Rng>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn kernel_at_equal_points_is_signal_variance() {
        let h = KernelHyper::isotropic(3, 0.7, 2.5, 0.0);
        let a = vec![0.1, 0.5, 0.9];
        assert!((kernel_matern52(&a, &a, &h).unwrap() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn kernel_symmetry() {
        let h = KernelHyper::isotropic(4, 0.3, 1.2, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random_points(&mut rng, 1, 4).pop().unwrap();
            let b = random_points(&mut rng, 1, 4).pop().unwrap();
            assert_eq!(
                kernel_matern52(&a, &b, &h).unwrap(),
                kernel_matern52(&b, &a, &h).unwrap()
            );
        }
    }

    #[test]
    fn kernel_unit_distance_value() {
        let h = KernelHyper::isotropic(1, 1.0, 1.0, 0.0);
        let v = kernel_matern52(&[0.0], &[1.0], &h).unwrap();
        assert!((v - 0.52399).abs() < 1e-4, "got {v}");
    }

    #[test]
    fn kernel_dimension_mismatch() {
        let h = KernelHyper::isotropic(2, 1.0, 1.0, 0.0);
        assert!(kernel_matern52(&[0.0, 1.0], &[0.0], &h).is_err());
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let xs = random_points(&mut rng, 12, 3);
            let h = KernelHyper::isotropic(3, rng.random_range(0.1..1.0), 1.0, 0.0);
            let k = gram(&xs, &h);
            let eig = k.symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-8), "min eig {}", eig.min());
        }
    }

    #[test]
    fn noiseless_gp_interpolates() {
        let obs = vec![(vec![0.3, 0.4], 1.7)];
        let m = GpModel::with_hyper(&obs, KernelHyper::isotropic(2, 0.5, 1.0, 0.0)).unwrap();
        let (mu, var) = m.posterior(&[0.3, 0.4]);
        assert!((mu - 1.7).abs() < 1e-8);
        assert!(var < 1e-8);
    }

    #[test]
    fn duplicate_inputs_with_noise_fit() {
        let obs = vec![
            (vec![0.5], 1.0),
            (vec![0.5], 1.2),
            (vec![0.9], 0.3),
        ];
        let m = GpModel::with_hyper(&obs, KernelHyper::isotropic(1, 0.5, 1.0, 0.01)).unwrap();
        assert_eq!(m.jitter(), 0.0);
    }

    #[test]
    fn alpha_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs = random_points(&mut rng, 20, 4);
        let ys: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let obs: Vec<_> = xs.iter().cloned().zip(ys.iter().cloned()).collect();
        let mut hyper = KernelHyper::isotropic(4, 0.4, 1.5, 0.05);
        hyper.prior_mean = mean(&ys);
        let m = GpModel::with_hyper(&obs, hyper.clone()).unwrap();

        let mut k = gram(&xs, &hyper);
        for i in 0..20 {
            k[(i, i)] += hyper.noise_variance;
        }
        let resid = DVector::from_iterator(20, ys.iter().map(|y| y - hyper.prior_mean));
        let dense = k.lu().solve(&resid).unwrap();
        for i in 0..20 {
            assert!((m.alpha[i] - dense[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn posterior_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = random_points(&mut rng, 5, 2);
        let ys: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obs: Vec<_> = xs.iter().cloned().zip(ys.iter().cloned()).collect();
        let hyper = KernelHyper::isotropic(2, 0.6, 2.0, 0.1);
        let m = GpModel::with_hyper(&obs, hyper.clone()).unwrap();

        let mut k = gram(&xs, &hyper);
        for i in 0..5 {
            k[(i, i)] += hyper.noise_variance;
        }
        let kinv = k.try_inverse().unwrap();
        let q = vec![0.21, 0.77];
        let k_star = DVector::from_iterator(
            5,
            xs.iter().map(|x| kernel_matern52(&q, x, &hyper).unwrap()),
        );
        let resid = DVector::from_iterator(5, ys.iter().map(|y| *y));
        let want_mean = k_star.dot(&(&kinv * &resid));
        let want_var = hyper.signal_variance - k_star.dot(&(&kinv * &k_star));
        let (mu, var) = m.posterior(&q);
        assert!((mu - want_mean).abs() < 1e-8);
        assert!((var - want_var).abs() < 1e-8);
    }

    #[test]
    fn posterior_recovers_prior_far_away() {
        let obs = vec![(vec![0.0], 3.0)];
        let mut hyper = KernelHyper::isotropic(1, 0.05, 2.0, 0.0);
        hyper.prior_mean = 1.0;
        let m = GpModel::with_hyper(&obs, hyper).unwrap();
        let (mu, var) = m.posterior(&[1.0]);
        assert!((mu - 1.0).abs() < 1e-6);
        assert!((var - 2.0).abs() < 1e-6);
    }

    #[test]
    fn posterior_variance_bounded_by_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xs = random_points(&mut rng, 15, 3);
        let ys: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obs: Vec<_> = xs.into_iter().zip(ys).collect();
        let hyper = KernelHyper::isotropic(3, 0.3, 1.3, 0.01);
        let m = GpModel::with_hyper(&obs, hyper).unwrap();
        for _ in 0..50 {
            let q = random_points(&mut rng, 1, 3).pop().unwrap();
            let (_, var) = m.posterior(&q);
            assert!(var <= 1.3 + 1e-8);
        }
    }

    #[test]
    fn lml_single_standard_normal() {
        // one point, k(x,x) + noise = 1, y = prior mean
        let obs = vec![(vec![0.5], 0.0)];
        let m = GpModel::with_hyper(&obs, KernelHyper::isotropic(1, 1.0, 0.7, 0.3)).unwrap();
        let want = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((m.log_marginal_likelihood() - want).abs() < 1e-10);
    }

    #[test]
    fn lml_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let xs = random_points(&mut rng, 6, 2);
            let ys: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let obs: Vec<_> = xs.iter().cloned().zip(ys.iter().cloned()).collect();
            let hyper = KernelHyper::isotropic(2, 0.5, 1.0, 0.1);
            let m = GpModel::with_hyper(&obs, hyper.clone()).unwrap();

            let mut k = gram(&xs, &hyper);
            for i in 0..6 {
                k[(i, i)] += hyper.noise_variance;
            }
            let det = k.determinant();
            let kinv = k.try_inverse().unwrap();
            let y = DVector::from_vec(ys.clone());
            let want = -0.5 * y.dot(&(&kinv * &y))
                - 0.5 * det.ln()
                - 3.0 * (2.0 * std::f64::consts::PI).ln();
            assert!((m.log_marginal_likelihood() - want).abs() < 1e-8);
        }
    }

    #[test]
    fn fit_is_deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xs = random_points(&mut rng, 12, 2);
        let ys: Vec<f64> = xs.iter().map(|x| (x[0] * 3.0).sin() + x[1]).collect();
        let obs: Vec<_> = xs.into_iter().zip(ys).collect();
        let m1 = fit_gp(&obs, true, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let m2 = fit_gp(&obs, true, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(m1.hyper(), m2.hyper());
        assert_eq!(m1.alpha, m2.alpha);
    }

    #[test]
    fn ei_zero_variance() {
        assert_eq!(expected_improvement(3.0, 0.0, 1.0), 2.0);
        assert_eq!(expected_improvement(0.5, 0.0, 1.0), 0.0);
    }

    #[test]
    fn ei_symmetric_case() {
        let v = expected_improvement(1.0, 1.0, 1.0);
        assert!((v - 0.3989422804).abs() < 1e-9);
    }

    #[test]
    fn ei_monotone_in_mean_and_spread() {
        let mut prev = 0.0;
        for i in 0..20 {
            let m = -1.0 + 0.2 * i as f64;
            let v = expected_improvement(m, 1.0, 0.0);
            assert!(v >= prev);
            prev = v;
        }
        // wider spread helps when mean <= incumbent
        let mut prev = 0.0;
        for i in 1..20 {
            let s = 0.1 * i as f64;
            let v = expected_improvement(-0.5, s * s, 0.0);
            assert!(v >= prev);
            prev = v;
        }
    }
}
