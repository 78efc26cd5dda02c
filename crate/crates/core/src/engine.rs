//! FA-LD chain execution.
//!
//! Each iteration every client takes one noisy local step
//!
//! ```text
//! β^c ← θ^c − η ∇f̃^c(θ^c) + √(2ητρ²) ξ̇ + √(2ητ(1−ρ²)/p_c) ξ^c
//! ```
//!
//! where `ξ̇` is shared by all clients and `ξ^c` is private. Every `K`
//! iterations the server aggregates (`Σ p_c β^c` with full participation,
//! `(1/S) Σ_{c∈S} β^c` for a sampled device set) and broadcasts the result to
//! all `N` clients.
//!
//! All randomness comes from [`derive_stream`], so a chain is a pure function
//! of `(config, model, replication)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::EnergyModel;
use crate::rng::{derive_stream, ClientTag, CounterStream, Purpose};

/// States with norm above this abort the chain.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
const WEIGHT_TOL: f64 = 1e-12;

/// Device participation rule applied at every synchronisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Full,
    /// `S` draws with replacement, client `c` with probability `p_c`.
    SchemeI { s: usize },
    /// `S` distinct clients uniformly without replacement (balanced data).
    SchemeII { s: usize },
}

impl Scheme {
    pub fn devices(&self, n_clients: usize) -> usize {
        match *self {
            Scheme::Full => n_clients,
            Scheme::SchemeI { s } | Scheme::SchemeII { s } => s,
        }
    }

    pub fn is_partial(&self) -> bool {
        !matches!(self, Scheme::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Fixed { eta: f64 },
    /// `η_k = 1 / (2L + m k / 12)`
    Decaying { l: f64, m: f64 },
}

pub fn step_size(schedule: &Schedule, k: usize) -> Result<f64> {
    match *schedule {
        Schedule::Fixed { eta } => {
            if eta > 0.0 && eta.is_finite() {
                Ok(eta)
            } else {
                Err(Error::invalid(format!("step size must be > 0, got {eta}")))
            }
        }
        Schedule::Decaying { l, m } => {
            if !(l > 0.0 && m > 0.0 && l.is_finite() && m.is_finite()) {
                return Err(Error::invalid(format!(
                    "decaying schedule needs L, m > 0 (got L = {l}, m = {m})"
                )));
            }
            Ok(1.0 / (2.0 * l + m * k as f64 / 12.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub local_steps: usize,
    pub tau: f64,
    pub rho: f64,
    pub schedule: Schedule,
    pub scheme: Scheme,
    pub subsample: f64,
    /// Total iterations `T`, a multiple of `local_steps`.
    pub horizon: usize,
    pub master_seed: u64,
    /// Per-client θ₀^c; all-zero when `None`.
    pub init: Option<Vec<Vec<f64>>>,
}

impl RunConfig {
    pub fn new(local_steps: usize, eta: f64, horizon: usize, seed: u64) -> Self {
        Self {
            local_steps,
            tau: 1.0,
            rho: 0.0,
            schedule: Schedule::Fixed { eta },
            scheme: Scheme::Full,
            subsample: 1.0,
            horizon,
            master_seed: seed,
            init: None,
        }
    }

    pub fn rounds(&self) -> usize {
        self.horizon / self.local_steps.max(1)
    }

    pub fn validate(&self, model: &dyn EnergyModel) -> Result<()> {
        let n = model.dataset().n_clients();
        if self.local_steps == 0 {
            return Err(Error::invalid("local_steps K must be >= 1"));
        }
        if !self.horizon.is_multiple_of(self.local_steps) {
            return Err(Error::invalid(format!(
                "horizon {} is not a multiple of K = {}",
                self.horizon, self.local_steps
            )));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::invalid(format!(
                "subsample ratio must lie in (0, 1], got {}",
                self.subsample
            )));
        }
        step_size(&self.schedule, 0)?;
        match self.scheme {
            Scheme::Full => {}
            Scheme::SchemeI { s } | Scheme::SchemeII { s } => {
                if s == 0 || s > n {
                    return Err(Error::invalid(format!("need 1 <= S <= N = {n}, got S = {s}")));
                }
            }
        }
        if matches!(self.scheme, Scheme::SchemeII { .. }) && !weights_balanced(model.dataset().weights()) {
            return Err(Error::invalid(
                "scheme II assumes balanced data: all clients must hold the same number of points",
            ));
        }
        if let Some(init) = &self.init {
            if init.len() != n || init.iter().any(|t| t.len() != model.dim()) {
                return Err(Error::invalid("init must hold one d-vector per client"));
            }
        }
        Ok(())
    }
}

/// Client states at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub thetas: Vec<Vec<f64>>,
    pub iteration: usize,
    pub replication: u64,
}

/// Global parameter at one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub iteration: usize,
    /// Step size used on the last iteration before this round.
    pub eta: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub replication: u64,
    pub rounds: Vec<RoundRecord>,
}

/// Writes `√(2ητρ²) ξ̇ + √(2ητ(1−ρ²)/p_c) ξ^c` into `out`.
#[allow(clippy::too_many_arguments)]
pub fn injected_noise_into(
    shared: &mut CounterStream,
    private: &mut CounterStream,
    eta: f64,
    tau: f64,
    rho: f64,
    p_c: f64,
    out: &mut [f64],
) {
    let a = (2.0 * eta * tau * rho * rho).sqrt();
    let b = (2.0 * eta * tau * (1.0 - rho * rho) / p_c).sqrt();
    for o in out.iter_mut() {
        let s = shared.normal();
        let x = private.normal();
        *o = a * s + b * x;
    }
}

/// ρ-correlated injected noise with per-coordinate variance
/// `2ητ(ρ² + (1−ρ²)/p_c)`.
pub fn injected_noise(
    shared: &mut CounterStream,
    private: &mut CounterStream,
    d: usize,
    eta: f64,
    tau: f64,
    rho: f64,
    p_c: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; d];
    injected_noise_into(shared, private, eta, tau, rho, p_c, &mut out);
    out
}

/// Global injected noise `Σ_c p_c z^c / √(2ητ)` at iteration `k`, where `z^c`
/// is client `c`'s injected noise. Equals `ρξ̇ + √(1−ρ²) Σ_c √p_c ξ^c`, a
/// standard Gaussian when the weights sum to one.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_noise(
    master_seed: u64,
    replication: u64,
    k: u64,
    weights: &[f64],
    d: usize,
    eta: f64,
    tau: f64,
    rho: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let mut z = vec![0.0; d];
    for (c, p) in weights.iter().enumerate() {
        let mut shared = derive_stream(master_seed, replication, k, ClientTag::Shared, Purpose::Noise);
        let mut private = derive_stream(master_seed, replication, k, ClientTag::Client(c), Purpose::Noise);
        injected_noise_into(&mut shared, &mut private, eta, tau, rho, *p, &mut z);
        linalg::axpy(*p, &z, &mut out);
    }
    let scale = 1.0 / (2.0 * eta * tau).sqrt();
    out.iter_mut().for_each(|x| *x *= scale);
    out
}

/// `θ − η g + noise`, in place.
#[inline]
pub fn local_step_in_place(theta: &mut [f64], grad: &[f64], noise: &[f64], eta: f64) {
    for ((t, g), z) in theta.iter_mut().zip(grad).zip(noise) {
        *t = *t - eta * g + z;
    }
}

pub fn local_step(theta: &[f64], grad: &[f64], noise: &[f64], eta: f64) -> Result<Vec<f64>> {
    let mut out = theta.to_vec();
    local_step_in_place(&mut out, grad, noise, eta);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("local step".into()));
    }
    Ok(out)
}

/// Devices participating in one synchronisation. Scheme I may repeat a
/// client; Scheme II never does. `Full` returns every client.
pub fn sample_devices(
    scheme: &Scheme,
    weights: &[f64],
    rng: &mut CounterStream,
) -> Result<Vec<usize>> {
    let n = weights.len();
    match *scheme {
        Scheme::Full => Ok((0..n).collect()),
        Scheme::SchemeI { s } => {
            if s == 0 {
                return Err(Error::invalid("S must be >= 1"));
            }
            let dist = WeightedIndex::new(weights)
                .map_err(|e| Error::invalid(format!("bad device weights: {e}")))?;
            Ok((0..s).map(|_| dist.sample(rng)).collect())
        }
        Scheme::SchemeII { s } => {
            if s == 0 || s > n {
                return Err(Error::invalid(format!(
                    "scheme II needs 1 <= S <= N = {n}, got S = {s}"
                )));
            }
            Ok(rand::seq::index::sample(rng, n, s).into_vec())
        }
    }
}

/// Aggregate client states: `Σ_c p_c β^c` for full participation, the plain
/// average of the sampled states otherwise (duplicates counted each time).
pub fn synchronize(
    betas: &[Vec<f64>],
    scheme: &Scheme,
    weights: &[f64],
    devices: &[usize],
) -> Vec<f64> {
    let d = betas[0].len();
    let mut out = vec![0.0; d];
    match scheme {
        Scheme::Full => {
            for (b, p) in betas.iter().zip(weights) {
                linalg::axpy(*p, b, &mut out);
            }
        }
        Scheme::SchemeI { .. } | Scheme::SchemeII { .. } => {
            // Index order, so that S = N under scheme II reproduces the full
            // average bit for bit.
            let mut sorted = devices.to_vec();
            sorted.sort_unstable();
            let w = 1.0 / sorted.len() as f64;
            for &c in &sorted {
                linalg::axpy(w, &betas[c], &mut out);
            }
        }
    }
    out
}

fn diverged(state: &[f64]) -> Option<f64> {
    let n = linalg::norm(state);
    if !n.is_finite() || n > DIVERGENCE_LIMIT {
        Some(n)
    } else {
        None
    }
}

/// Run one FA-LD chain, recording the synchronised global parameter at round
/// 0 (initialisation) and after every synchronisation.
pub fn run_chain(
    config: &RunConfig,
    model: &dyn EnergyModel,
    replication: u64,
) -> Result<Trajectory> {
    config.validate(model)?;
    let n = model.dataset().n_clients();
    let d = model.dim();
    let weights = model.dataset().weights();
    let seed = config.master_seed;
    let k_local = config.local_steps;

    let mut thetas = config
        .init
        .clone()
        .unwrap_or_else(|| vec![vec![0.0; d]; n]);
    let mut rounds = Vec::with_capacity(config.rounds() + 1);
    rounds.push(RoundRecord {
        round: 0,
        iteration: 0,
        eta: step_size(&config.schedule, 0)?,
        theta: synchronize(&thetas, &Scheme::Full, weights, &[]),
    });

    let mut grad = vec![0.0; d];
    let mut noise = vec![0.0; d];
    for k in 0..config.horizon {
        let eta = step_size(&config.schedule, k)?;
        for (c, theta) in thetas.iter_mut().enumerate() {
            let mut batch = derive_stream(seed, replication, k as u64, ClientTag::Client(c), Purpose::Minibatch);
            model.client_grad_stochastic_into(c, theta, config.subsample, &mut batch, &mut grad);
            let mut shared = derive_stream(seed, replication, k as u64, ClientTag::Shared, Purpose::Noise);
            let mut private = derive_stream(seed, replication, k as u64, ClientTag::Client(c), Purpose::Noise);
            injected_noise_into(
                &mut shared,
                &mut private,
                eta,
                config.tau,
                config.rho,
                weights[c],
                &mut noise,
            );
            local_step_in_place(theta, &grad, &noise, eta);
            if let Some(norm) = diverged(theta) {
                return Err(Error::Diverged {
                    replication,
                    iteration: k,
                    client: c,
                    norm,
                });
            }
        }
        if (k + 1) % k_local == 0 {
            let devices = if config.scheme.is_partial() {
                let mut rng = derive_stream(seed, replication, (k + 1) as u64, ClientTag::Shared, Purpose::Devices);
                sample_devices(&config.scheme, weights, &mut rng)?
            } else {
                Vec::new()
            };
            let global = synchronize(&thetas, &config.scheme, weights, &devices);
            for theta in thetas.iter_mut() {
                theta.copy_from_slice(&global);
            }
            rounds.push(RoundRecord {
                round: (k + 1) / k_local,
                iteration: k + 1,
                eta,
                theta: global,
            });
        }
    }
    Ok(Trajectory {
        replication,
        rounds,
    })
}

/// `R` independent chains (replications `0..R`), run in parallel on the
/// current rayon pool. Output order is by replication id regardless of
/// scheduling.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicated {
    pub trajectories: Vec<Trajectory>,
}

impl Replicated {
    pub fn replications(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_rounds(&self) -> usize {
        self.trajectories[0].rounds.len()
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.trajectories[0].rounds
    }

    /// `R × d` matrix of global parameters at round index `r`.
    pub fn round_samples(&self, r: usize) -> Vec<Vec<f64>> {
        self.trajectories
            .iter()
            .map(|t| t.rounds[r].theta.clone())
            .collect()
    }
}

pub fn run_replicated(
    config: &RunConfig,
    model: &dyn EnergyModel,
    replications: usize,
) -> Result<Replicated> {
    if replications < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 replications, got {replications}"
        )));
    }
    config.validate(model)?;
    let trajectories = (0..replications as u64)
        .into_par_iter()
        .map(|rep| run_chain(config, model, rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(Replicated { trajectories })
}

/// Sequential variant of [`run_replicated`], used to check scheduling
/// independence.
pub fn run_replicated_sequential(
    config: &RunConfig,
    model: &dyn EnergyModel,
    replications: usize,
) -> Result<Replicated> {
    if replications < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 replications, got {replications}"
        )));
    }
    let trajectories = (0..replications as u64)
        .map(|rep| run_chain(config, model, rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(Replicated { trajectories })
}

/// Writes `replication,round,iteration,theta_1..theta_d` rows.
pub fn write_trajectories<W: std::io::Write>(out: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = trajectories
        .first()
        .and_then(|t| t.rounds.first())
        .map_or(0, |r| r.theta.len());
    let mut header = vec!["replication".to_string(), "round".into(), "iteration".into()];
    header.extend((1..=d).map(|i| format!("theta_{i}")));
    w.write_record(&header)?;
    for t in trajectories {
        for r in &t.rounds {
            let mut row = vec![t.replication.to_string(), r.round.to_string(), r.iteration.to_string()];
            row.extend(r.theta.iter().map(|x| format!("{x:.17e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Checks the balanced-weight requirement of scheme II on raw weights.
pub fn weights_balanced(weights: &[f64]) -> bool {
    weights
        .first()
        .is_some_and(|w0| weights.iter().all(|w| (w - w0).abs() <= WEIGHT_TOL))
}
