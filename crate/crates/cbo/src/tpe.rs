//! Tree-structured Parzen estimator over mixed variables: threshold split,
//! per-dimension Parzen densities (Gaussian kernels, renormalized over the
//! grid for discrete dimensions), density sampling, and the g/l ratio
//! acquisition in the maximization orientation.

use crate::space::{Configuration, ParameterKind, ParameterSpace};
use crate::stats::{normal_cdf, normal_pdf, normal_quantile, sample_std};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TpeError {
    #[error("a threshold split needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("gamma must lie strictly between 0 and 1, got {0}")]
    BadGamma(f64),
    #[error("a density model needs at least one point")]
    EmptyDensity,
}

/// Threshold split of the history into good (FOM >= threshold) and bad.
#[derive(Debug, Clone)]
pub struct TpeSplit {
    pub threshold: f64,
    /// Indices into the history, best FOM first.
    pub good: Vec<usize>,
    pub bad: Vec<usize>,
    pub gamma: f64,
}

/// Splits at the (1 - gamma) quantile so about gamma * n observations land in
/// the good set; both sides always get at least one point. Ties break toward
/// the most recent observation.
pub fn split_by_threshold(foms: &[f64], gamma: f64) -> Result<TpeSplit, TpeError> {
    let n = foms.len();
    if n < 2 {
        return Err(TpeError::TooFewObservations(n));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(TpeError::BadGamma(gamma));
    }
    let n_good = ((gamma * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        foms[b]
            .partial_cmp(&foms[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    let good: Vec<usize> = order[..n_good].to_vec();
    let bad: Vec<usize> = order[n_good..].to_vec();
    let threshold = foms[*good.last().unwrap()];
    Ok(TpeSplit {
        threshold,
        good,
        bad,
        gamma,
    })
}

/// Silverman bandwidth with floors: 1.06 * sigma * n^(-1/5), where sigma is
/// floored at 0.05 and the result at max(0.01, half the encoded grid step).
pub fn bandwidth(n: usize, sample_sigma: f64, grid_floor: f64) -> f64 {
    let sigma = sample_sigma.max(0.05);
    let h = 1.06 * sigma * (n as f64).powf(-0.2);
    h.max(0.01).max(grid_floor)
}

#[derive(Debug, Clone)]
enum DimKind {
    Continuous,
    /// Encoded grid values k / (count - 1); singleton grids hold only 0.
    Grid { count: usize },
}

impl DimKind {
    fn grid_values(count: usize) -> Vec<f64> {
        if count <= 1 {
            vec![0.0]
        } else {
            (0..count).map(|k| k as f64 / (count - 1) as f64).collect()
        }
    }
}

/// Product Parzen density over encoded configurations.
#[derive(Debug, Clone)]
pub struct DensityModel {
    points: Vec<Vec<f64>>,
    bandwidths: Vec<f64>,
    dims: Vec<DimKind>,
}

impl DensityModel {
    pub fn new(points: Vec<Vec<f64>>, space: &ParameterSpace) -> Result<Self, TpeError> {
        if points.is_empty() {
            return Err(TpeError::EmptyDensity);
        }
        let n = points.len();
        let dims: Vec<DimKind> = space
            .specs()
            .iter()
            .map(|s| match s.kind {
                ParameterKind::Continuous { .. } => DimKind::Continuous,
                _ => DimKind::Grid {
                    count: s.kind.grid_count().unwrap(),
                },
            })
            .collect();
        let bandwidths = (0..space.len())
            .map(|d| {
                let col: Vec<f64> = points.iter().map(|p| p[d]).collect();
                let grid_floor = match dims[d] {
                    DimKind::Continuous => 0.0,
                    DimKind::Grid { count } => {
                        if count > 1 {
                            0.5 / (count - 1) as f64
                        } else {
                            0.0
                        }
                    }
                };
                bandwidth(n, sample_std(&col), grid_floor)
            })
            .collect();
        Ok(Self {
            points,
            bandwidths,
            dims,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Encoded component centers, one per observation.
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Kernel mass of component center `c` over the dimension's grid,
    /// renormalized to sum to one.
    fn grid_weights(&self, dim: usize, center: f64) -> Vec<f64> {
        let DimKind::Grid { count } = self.dims[dim] else {
            unreachable!("grid_weights on a continuous dimension");
        };
        let h = self.bandwidths[dim];
        let values = DimKind::grid_values(count);
        let raw: Vec<f64> = values
            .iter()
            .map(|g| normal_pdf((g - center) / h))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    }

    fn nearest_grid_index(count: usize, x: f64) -> usize {
        if count <= 1 {
            return 0;
        }
        let k = (x * (count - 1) as f64 + 0.5).floor();
        (k.max(0.0) as usize).min(count - 1)
    }

    /// Density (probability mass on grid dimensions) at an encoded point;
    /// strictly positive everywhere.
    pub fn density(&self, x: &[f64]) -> f64 {
        let n = self.points.len() as f64;
        let mut out = 1.0;
        for (d, kind) in self.dims.iter().enumerate() {
            let h = self.bandwidths[d];
            let per_dim = match *kind {
                DimKind::Continuous => {
                    let sum: f64 = self
                        .points
                        .iter()
                        .map(|p| normal_pdf((x[d] - p[d]) / h))
                        .sum();
                    sum / (n * h)
                }
                DimKind::Grid { count } => {
                    let q = Self::nearest_grid_index(count, x[d]);
                    let sum: f64 = self
                        .points
                        .iter()
                        .map(|p| self.grid_weights(d, p[d])[q])
                        .sum();
                    sum / n
                }
            };
            out *= per_dim;
        }
        out
    }

    /// Draws one configuration: a uniformly chosen component point, then each
    /// dimension from its kernel (truncated to [0, 1] for continuous,
    /// renormalized grid mass for discrete), decoded and snapped.
    pub fn sample<R: Rng>(&self, space: &ParameterSpace, rng: &mut R) -> Configuration {
        let comp = &self.points[rng.random_range(0..self.points.len())];
        let encoded: Vec<f64> = self
            .dims
            .iter()
            .enumerate()
            .map(|(d, kind)| {
                let h = self.bandwidths[d];
                let c = comp[d];
                match *kind {
                    DimKind::Continuous => {
                        let lo = normal_cdf((0.0 - c) / h);
                        let hi = normal_cdf((1.0 - c) / h);
                        let u = rng.random_range(lo..=hi);
                        (c + h * normal_quantile(u)).clamp(0.0, 1.0)
                    }
                    DimKind::Grid { count } => {
                        let w = self.grid_weights(d, c);
                        let mut u: f64 = rng.random_range(0.0..1.0);
                        let mut idx = count - 1;
                        for (k, wk) in w.iter().enumerate() {
                            if u < *wk {
                                idx = k;
                                break;
                            }
                            u -= wk;
                        }
                        DimKind::grid_values(count)[idx]
                    }
                }
            })
            .collect();
        space.decode(&encoded).expect("dimensions match the space")
    }
}

/// g(x) / l(x): good-set density over bad-set density.
pub fn acquisition_ratio(x: &[f64], good: &DensityModel, bad: &DensityModel) -> f64 {
    good.density(x) / bad.density(x)
}

/// One TPE proposal: split the history, model the good and bad densities,
/// draw `n_candidates` from the good density, and return the draw with the
/// highest g/l ratio (first-drawn wins ties). Falls back to a uniform sample
/// with fewer than 2 observations.
pub fn propose_next<R: Rng>(
    history: &[(Configuration, f64)],
    gamma: f64,
    n_candidates: usize,
    space: &ParameterSpace,
    rng: &mut R,
) -> Result<Configuration, TpeError> {
    if history.len() < 2 {
        return Ok(space.sample_uniform(rng));
    }
    let foms: Vec<f64> = history.iter().map(|(_, f)| *f).collect();
    let split = split_by_threshold(&foms, gamma)?;
    let encode = |idx: &usize| {
        space
            .encode(&history[*idx].0)
            .expect("history configurations match the space")
    };
    let good = DensityModel::new(split.good.iter().map(encode).collect(), space)?;
    let bad = DensityModel::new(split.bad.iter().map(encode).collect(), space)?;

    let mut best: Option<(f64, Configuration)> = None;
    for _ in 0..n_candidates.max(1) {
        let c = good.sample(space, rng);
        let enc = space.encode(&c).expect("sampled config is legal");
        let score = acquisition_ratio(&enc, &good, &bad);
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, c));
        }
    }
    Ok(best.unwrap().1)
}
