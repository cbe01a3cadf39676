//! The coupled optimization loop: cheap-fidelity TPE exploration interleaved
//! with expensive-fidelity GP exploitation every `interval` iterations, with
//! the expensive evaluation overlapping subsequent cheap iterations. Model
//! updates are applied in logical-index order, so the proposal sequence is a
//! pure function of (config, seed) no matter how long evaluations take.

use crate::coupling::{estimate_rho, CoupledGp, CouplingError};
use crate::evaluator::{EvalFailure, EvalRequest, Evaluator, Fidelity};
use crate::gp::{expected_improvement, fit_gp, GpError, GpModel, KernelHyper};
use crate::objective::{effective_fom, FomResult, FomSpec};
use crate::space::{Configuration, ParameterSpace};
use crate::stats::normal_quantile;
use crate::tpe::{propose_next, split_by_threshold, DensityModel, TpeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::mpsc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{failed} of {completed} expensive evaluations failed; aborting")]
    TooManyExpensiveFailures { failed: usize, completed: usize },
    #[error("no successful expensive observation; no incumbent")]
    NoIncumbent,
    #[error("invalid run configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Tpe(#[from] TpeError),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub space: ParameterSpace,
    pub fom: FomSpec,
    pub n_pre: usize,
    pub interval: usize,
    pub n_init: usize,
    pub seed: u64,
    pub gamma_alpha: f64,
    pub gamma_beta: f64,
    pub n_candidates: usize,
    /// Explicit expensive budget; defaults to floor(n_pre / interval).
    pub n_post: Option<usize>,
}

impl RunConfig {
    pub fn new(space: ParameterSpace, fom: FomSpec) -> Self {
        Self {
            space,
            fom,
            n_pre: 120,
            interval: 4,
            n_init: 10,
            seed: 0,
            gamma_alpha: 0.5,
            gamma_beta: 0.15,
            n_candidates: 64,
            n_post: None,
        }
    }

    pub fn expensive_budget(&self) -> usize {
        self.n_post.unwrap_or(self.n_pre / self.interval.max(1))
    }

    fn validate(&self) -> Result<(), RunError> {
        if self.interval == 0 {
            return Err(RunError::BadConfig("interval must be at least 1".into()));
        }
        if self.n_init > self.n_pre {
            return Err(RunError::BadConfig(
                "n_init cannot exceed n_pre".into(),
            ));
        }
        if self.n_candidates == 0 {
            return Err(RunError::BadConfig("n_candidates must be positive".into()));
        }
        for (name, g) in [("gamma_alpha", self.gamma_alpha), ("gamma_beta", self.gamma_beta)] {
            if !(g > 0.0 && g < 1.0) {
                return Err(RunError::BadConfig(format!("{name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsStatus {
    Ok,
    Timeout,
    EvalError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub index: usize,
    pub fidelity: Fidelity,
    pub config: Configuration,
    pub metrics: Option<crate::objective::MetricSet>,
    pub fom: Option<FomResult>,
    pub duration_ms: u64,
    pub status: ObsStatus,
}

impl Observation {
    pub fn effective(&self) -> Option<f64> {
        self.fom.as_ref().map(|f| f.effective)
    }

    pub fn is_ok(&self) -> bool {
        self.status == ObsStatus::Ok
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub history: Vec<Observation>,
    pub incumbent: Option<(Configuration, f64)>,
    pub wall_ms: u64,
}

/// Best successful expensive observation; ties go to the earliest index.
pub fn incumbent(history: &[Observation]) -> Result<(&Observation, f64), RunError> {
    let mut best: Option<(&Observation, f64)> = None;
    for obs in history {
        if obs.fidelity == Fidelity::Post && obs.is_ok() {
            let eff = obs.effective().expect("ok observations carry a FOM");
            if best.as_ref().map_or(true, |(_, b)| eff > *b) {
                best = Some((obs, eff));
            }
        }
    }
    best.ok_or(RunError::NoIncumbent)
}

/// Running best effective FOM at each fidelity, aligned with the history.
pub fn best_so_far_traces(history: &[Observation]) -> Vec<(Option<f64>, Option<f64>)> {
    let mut best_pre = None;
    let mut best_post = None;
    history
        .iter()
        .map(|obs| {
            if obs.is_ok() {
                let eff = obs.effective().unwrap();
                let slot = match obs.fidelity {
                    Fidelity::Pre => &mut best_pre,
                    Fidelity::Post => &mut best_post,
                };
                *slot = Some(slot.map_or(eff, |b: f64| eff.max(b)));
            }
            (best_pre, best_post)
        })
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn slot_rng(seed: u64, tag: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ splitmix64(tag) ^ splitmix64(slot as u64),
    ))
}

const TAG_ALPHA: u64 = 0xA1;
const TAG_BETA: u64 = 0xBE;
const TAG_FIT: u64 = 0xF1;

/// Hyperparameters are re-searched on this cadence of expensive count;
/// between refits the previous kernel is reused with an updated prior mean.
fn should_refit(n_expensive: usize) -> bool {
    n_expensive <= 2 || n_expensive % 8 == 0
}

struct LoopState<'a> {
    cfg: &'a RunConfig,
    evaluator: &'a dyn Evaluator,
    history: Vec<Observation>,
    next_id: u64,
    /// Expensive observations folded into the models so far (logical order).
    folded_expensive: Vec<(Configuration, f64)>,
    /// (cheap FOM, expensive FOM) pairs from folded co-observations.
    co_pairs: Vec<(f64, f64)>,
    expensive_completed: usize,
    expensive_failed: usize,
    alpha_hyper: Option<KernelHyper>,
    beta_hyper: Option<KernelHyper>,
}

struct PendingBeta {
    cheap_fom: Option<f64>,
    rx: mpsc::Receiver<Observation>,
}

impl<'a> LoopState<'a> {
    fn new(cfg: &'a RunConfig, evaluator: &'a dyn Evaluator) -> Self {
        Self {
            cfg,
            evaluator,
            history: Vec::new(),
            next_id: 0,
            folded_expensive: Vec::new(),
            co_pairs: Vec::new(),
            expensive_completed: 0,
            expensive_failed: 0,
            alpha_hyper: None,
            beta_hyper: None,
        }
    }

    fn make_request(&mut self, fidelity: Fidelity, config: &Configuration) -> EvalRequest {
        let id = self.next_id;
        self.next_id += 1;
        let map = self
            .cfg
            .space
            .specs()
            .iter()
            .zip(&config.values)
            .map(|(s, v)| (s.name.clone(), *v))
            .collect();
        EvalRequest {
            id,
            fidelity,
            config: map,
        }
    }

    fn evaluate_sync(&mut self, fidelity: Fidelity, config: Configuration, index: usize) -> Observation {
        let req = self.make_request(fidelity, &config);
        evaluate_request(self.evaluator, &self.cfg.fom, req, config, index)
    }

    /// Successful cheap observations in logical order.
    fn cheap_history(&self) -> Vec<(Configuration, f64)> {
        self.history
            .iter()
            .filter(|o| o.fidelity == Fidelity::Pre && o.is_ok())
            .map(|o| (o.config.clone(), o.effective().unwrap()))
            .collect()
    }

    /// The exploration loop's view: cheap observations plus folded expensive
    /// observations, each with weight one.
    fn alpha_history(&self) -> Vec<(Configuration, f64)> {
        let mut h = self.cheap_history();
        h.extend(self.folded_expensive.iter().cloned());
        h
    }

    fn current_incumbent(&self) -> Option<(Configuration, f64)> {
        let mut best: Option<(&Configuration, f64)> = None;
        for (c, f) in &self.folded_expensive {
            if best.map_or(true, |(_, b)| *f > b) {
                best = Some((c, *f));
            }
        }
        best.map(|(c, f)| (c.clone(), f))
    }

    fn alpha_iteration(&mut self, slot: usize) {
        let mut rng = slot_rng(self.cfg.seed, TAG_ALPHA, slot);
        let proposal = if slot <= self.cfg.n_init {
            self.cfg.space.sample_uniform(&mut rng)
        } else {
            let hist = self.alpha_history();
            propose_next(
                &hist,
                self.cfg.gamma_alpha,
                self.cfg.n_candidates,
                &self.cfg.space,
                &mut rng,
            )
            .unwrap_or_else(|_| self.cfg.space.sample_uniform(&mut rng))
        };
        let obs = self.evaluate_sync(Fidelity::Pre, proposal, slot);
        self.history.push(obs);
    }

    fn fit_cached(
        &self,
        data: &[(Vec<f64>, f64)],
        cached: &Option<KernelHyper>,
        refit: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(GpModel, KernelHyper), RunError> {
        let model = match cached {
            Some(hyper) if !refit => {
                let ys: Vec<f64> = data.iter().map(|(_, y)| *y).collect();
                let hyper = KernelHyper {
                    prior_mean: crate::stats::mean(&ys),
                    ..hyper.clone()
                };
                GpModel::with_hyper(data, hyper)?
            }
            _ => fit_gp(data, true, rng)?,
        };
        let hyper = model.hyper().clone();
        Ok((model, hyper))
    }

    /// Candidate pool for a beta iteration: TPE good-density samples from the
    /// cheap history, plus the incumbent and Gaussian perturbations of it.
    fn beta_pool(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Configuration>, RunError> {
        let cheap = self.cheap_history();
        let mut pool = Vec::with_capacity(self.cfg.n_candidates + 9);
        if cheap.len() >= 2 {
            let foms: Vec<f64> = cheap.iter().map(|(_, f)| *f).collect();
            let split = split_by_threshold(&foms, self.cfg.gamma_beta)?;
            let pts: Vec<Vec<f64>> = split
                .good
                .iter()
                .map(|&i| self.cfg.space.encode(&cheap[i].0).unwrap())
                .collect();
            let good = DensityModel::new(pts, &self.cfg.space)?;
            for _ in 0..self.cfg.n_candidates {
                pool.push(good.sample(&self.cfg.space, rng));
            }
        } else {
            for _ in 0..self.cfg.n_candidates {
                pool.push(self.cfg.space.sample_uniform(rng));
            }
        }
        if let Some((inc, _)) = self.current_incumbent() {
            let enc = self.cfg.space.encode(&inc).unwrap();
            pool.push(inc);
            for _ in 0..8 {
                let perturbed: Vec<f64> = enc
                    .iter()
                    .map(|u| u + 0.05 * normal_quantile(rng.random_range(0.0..1.0)))
                    .collect();
                pool.push(self.cfg.space.decode(&perturbed).unwrap());
            }
        }
        Ok(pool)
    }

    /// Picks the beta proposal by expected improvement under the coupled
    /// joint posterior (posterior-mean ranking before an incumbent exists).
    fn beta_proposal(&mut self, rng: &mut ChaCha8Rng) -> Result<Configuration, RunError> {
        let pool = self.beta_pool(rng)?;
        let cheap: Vec<(Vec<f64>, f64)> = self
            .cheap_history()
            .iter()
            .map(|(c, f)| (self.cfg.space.encode(c).unwrap(), *f))
            .collect();
        let mut fit_rng = slot_rng(self.cfg.seed, TAG_FIT, self.expensive_completed);
        let refit = should_refit(self.folded_expensive.len());

        let scores: Vec<f64> = if !self.folded_expensive.is_empty() && !cheap.is_empty() {
            let expensive: Vec<(Vec<f64>, f64)> = self
                .folded_expensive
                .iter()
                .map(|(c, f)| (self.cfg.space.encode(c).unwrap(), *f))
                .collect();
            let (gp_alpha, ha) = self.fit_cached(&cheap, &self.alpha_hyper, refit, &mut fit_rng)?;
            self.alpha_hyper = Some(ha);
            let (gp_beta, hb) = self.fit_cached(&expensive, &self.beta_hyper, refit, &mut fit_rng)?;
            self.beta_hyper = Some(hb);
            let rho = estimate_rho(&self.co_pairs);
            let coupled = CoupledGp::new(gp_alpha, gp_beta, rho, Vec::new())?;
            let incumbent_fom = self.current_incumbent().unwrap().1;
            pool.iter()
                .map(|c| {
                    let enc = self.cfg.space.encode(c).unwrap();
                    let (m, v) = coupled.predict_expensive(&enc);
                    expected_improvement(m, v, incumbent_fom)
                })
                .collect()
        } else if !cheap.is_empty() {
            // cold start: no expensive data yet, rank by the cheap model's
            // posterior mean
            let (gp_alpha, ha) = self.fit_cached(&cheap, &self.alpha_hyper, refit, &mut fit_rng)?;
            self.alpha_hyper = Some(ha);
            pool.iter()
                .map(|c| gp_alpha.posterior(&self.cfg.space.encode(c).unwrap()).0)
                .collect()
        } else {
            vec![0.0; pool.len()]
        };

        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        Ok(pool.into_iter().nth(best).unwrap())
    }

    /// Starts a beta iteration at `slot`: proposes, records the cheap
    /// co-observation synchronously, and dispatches the expensive evaluation
    /// to a worker so cheap iterations can proceed underneath it.
    fn beta_iteration<'s>(
        &mut self,
        slot: usize,
        scope: &'s std::thread::Scope<'s, '_>,
    ) -> Result<PendingBeta, RunError>
    where
        'a: 's,
    {
        let mut rng = slot_rng(self.cfg.seed, TAG_BETA, slot);
        let config = self.beta_proposal(&mut rng)?;

        let cheap_obs = self.evaluate_sync(Fidelity::Pre, config.clone(), slot);
        let cheap_fom = if cheap_obs.is_ok() {
            cheap_obs.effective()
        } else {
            None
        };
        self.history.push(cheap_obs);

        let req = self.make_request(Fidelity::Post, &config);
        let evaluator = self.evaluator;
        let fom_spec = self.cfg.fom.clone();
        let (tx, rx) = mpsc::channel();
        scope.spawn(move || {
            let obs = evaluate_request(evaluator, &fom_spec, req, config, slot);
            let _ = tx.send(obs);
        });
        Ok(PendingBeta { cheap_fom, rx })
    }

    /// Applies a finished beta iteration's expensive result to the models.
    fn fold(&mut self, pending: PendingBeta) -> Result<(), RunError> {
        let obs = pending.rx.recv().expect("beta worker always reports");
        self.expensive_completed += 1;
        if obs.is_ok() {
            let eff = obs.effective().unwrap();
            self.folded_expensive.push((obs.config.clone(), eff));
            if let Some(cheap) = pending.cheap_fom {
                self.co_pairs.push((cheap, eff));
            }
        } else {
            self.expensive_failed += 1;
        }
        // insert at the logical position: right after the co-observed cheap
        // record of the same slot
        let pos = self
            .history
            .iter()
            .position(|o| o.index > obs.index)
            .unwrap_or(self.history.len());
        self.history.insert(pos, obs);

        if self.expensive_completed >= 4 && self.expensive_failed * 2 > self.expensive_completed {
            return Err(RunError::TooManyExpensiveFailures {
                failed: self.expensive_failed,
                completed: self.expensive_completed,
            });
        }
        Ok(())
    }
}

fn evaluate_request(
    evaluator: &dyn Evaluator,
    fom: &FomSpec,
    req: EvalRequest,
    config: Configuration,
    index: usize,
) -> Observation {
    let fidelity = req.fidelity;
    let start = Instant::now();
    let outcome = evaluator.evaluate(&req);
    let duration_ms = start.elapsed().as_millis() as u64;
    match outcome {
        Ok(metrics) => match effective_fom(&metrics, fom) {
            Ok(result) => Observation {
                index,
                fidelity,
                config,
                metrics: Some(metrics),
                fom: Some(result),
                duration_ms,
                status: ObsStatus::Ok,
            },
            Err(_) => Observation {
                index,
                fidelity,
                config,
                metrics: None,
                fom: None,
                duration_ms,
                status: ObsStatus::EvalError,
            },
        },
        Err(EvalFailure::Timeout) => Observation {
            index,
            fidelity,
            config,
            metrics: None,
            fom: None,
            duration_ms,
            status: ObsStatus::Timeout,
        },
        Err(EvalFailure::Error(_)) => Observation {
            index,
            fidelity,
            config,
            metrics: None,
            fom: None,
            duration_ms,
            status: ObsStatus::EvalError,
        },
    }
}

/// Which cheap slots double as beta iterations, plus trailing beta-only
/// iterations when an explicit expensive budget exceeds the cadence.
fn beta_schedule(cfg: &RunConfig) -> (Vec<bool>, usize) {
    let n = cfg.n_pre;
    match cfg.n_post {
        None => {
            let flags = (1..=n).map(|i| i % cfg.interval == 0).collect();
            (flags, 0)
        }
        Some(m) => {
            if n == 0 {
                return (Vec::new(), m);
            }
            if m <= n {
                // spread m beta slots evenly over the n cheap slots
                let flags = (1..=n).map(|i| (i * m) / n > ((i - 1) * m) / n).collect();
                (flags, 0)
            } else {
                (vec![true; n], m - n)
            }
        }
    }
}

pub fn run_coupled(cfg: &RunConfig, evaluator: &dyn Evaluator) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let start = Instant::now();
    let (beta_flags, trailing) = beta_schedule(cfg);

    let history = std::thread::scope(|scope| -> Result<Vec<Observation>, RunError> {
        let mut state = LoopState::new(cfg, evaluator);
        let mut pending: Option<PendingBeta> = None;
        for slot in 1..=cfg.n_pre {
            if beta_flags[slot - 1] {
                if let Some(p) = pending.take() {
                    state.fold(p)?;
                }
                pending = Some(state.beta_iteration(slot, scope)?);
            } else {
                state.alpha_iteration(slot);
            }
        }
        for extra in 1..=trailing {
            if let Some(p) = pending.take() {
                state.fold(p)?;
            }
            pending = Some(state.beta_iteration(cfg.n_pre + extra, scope)?);
        }
        if let Some(p) = pending.take() {
            state.fold(p)?;
        }
        Ok(state.history)
    })?;

    let incumbent = incumbent(&history)
        .ok()
        .map(|(o, f)| (o.config.clone(), f));
    Ok(RunResult {
        history,
        incumbent,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Cheap-only TPE optimization; the best cheap configuration gets a single
/// expensive evaluation at the end, which becomes the incumbent.
pub fn run_plain_baseline(cfg: &RunConfig, evaluator: &dyn Evaluator) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = LoopState::new(cfg, evaluator);
    for slot in 1..=cfg.n_pre {
        state.alpha_iteration(slot);
    }
    let cheap = state.cheap_history();
    let best = cheap
        .iter()
        .fold(None::<(Configuration, f64)>, |best, (c, f)| match best {
            Some((_, b)) if b >= *f => best,
            _ => Some((c.clone(), *f)),
        });
    if let Some((config, _)) = best {
        let obs = state.evaluate_sync(Fidelity::Post, config, cfg.n_pre + 1);
        state.history.push(obs);
    }
    let incumbent = incumbent(&state.history)
        .ok()
        .map(|(o, f)| (o.config.clone(), f));
    Ok(RunResult {
        history: state.history,
        incumbent,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Model-fusion style baseline: cheap-only search, then the top `n_train`
/// distinct cheap configurations are evaluated expensively as training data,
/// then `n_train` sequential EI iterations on the expensive GP.
pub fn run_fusion_baseline(
    cfg: &RunConfig,
    evaluator: &dyn Evaluator,
    n_train: usize,
) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = LoopState::new(cfg, evaluator);
    for slot in 1..=cfg.n_pre {
        state.alpha_iteration(slot);
    }

    // phase 2: expensive training set from the best distinct cheap configs
    let mut ranked = state.cheap_history();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut train: Vec<Configuration> = Vec::new();
    for (c, _) in ranked {
        if train.len() >= n_train {
            break;
        }
        if !train.contains(&c) {
            train.push(c);
        }
    }
    let mut slot = cfg.n_pre;
    for config in train {
        slot += 1;
        let obs = state.evaluate_sync(Fidelity::Post, config, slot);
        state.expensive_completed += 1;
        if !obs.is_ok() {
            state.expensive_failed += 1;
        } else {
            state
                .folded_expensive
                .push((obs.config.clone(), obs.effective().unwrap()));
        }
        state.history.push(obs);
    }

    // phase 3: sequential EI on the expensive GP over uniform candidate pools
    for t in 1..=n_train {
        slot += 1;
        let mut rng = slot_rng(cfg.seed, TAG_BETA, slot);
        let pool: Vec<Configuration> = (0..cfg.n_candidates)
            .map(|_| cfg.space.sample_uniform(&mut rng))
            .collect();
        let expensive: Vec<(Vec<f64>, f64)> = state
            .folded_expensive
            .iter()
            .map(|(c, f)| (cfg.space.encode(c).unwrap(), *f))
            .collect();
        let chosen = if expensive.is_empty() {
            pool.into_iter().next().unwrap()
        } else {
            let mut fit_rng = slot_rng(cfg.seed, TAG_FIT, slot);
            let refit = t <= 2 || t % 4 == 0;
            let (gp, hyper) = state.fit_cached(&expensive, &state.beta_hyper.clone(), refit, &mut fit_rng)?;
            state.beta_hyper = Some(hyper);
            let best_fom = state.current_incumbent().map(|(_, f)| f).unwrap();
            let mut best_i = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (i, c) in pool.iter().enumerate() {
                let (m, v) = gp.posterior(&cfg.space.encode(c).unwrap());
                let s = expected_improvement(m, v, best_fom);
                if s > best_s {
                    best_s = s;
                    best_i = i;
                }
            }
            pool.into_iter().nth(best_i).unwrap()
        };
        let obs = state.evaluate_sync(Fidelity::Post, chosen, slot);
        state.expensive_completed += 1;
        if !obs.is_ok() {
            state.expensive_failed += 1;
        } else {
            state
                .folded_expensive
                .push((obs.config.clone(), obs.effective().unwrap()));
        }
        state.history.push(obs);
    }

    let incumbent = incumbent(&state.history)
        .ok()
        .map(|(o, f)| (o.config.clone(), f));
    Ok(RunResult {
        history: state.history,
        incumbent,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}
