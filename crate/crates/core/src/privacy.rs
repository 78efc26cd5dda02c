//! Differential-privacy accounting for FA-LD.
//!
//! The chain releases one Gaussian-mechanism step per local iteration. Steps
//! are composed `K` times within a round, amplified by device sampling, then
//! composed over `T/K` rounds:
//!
//! ```text
//! ε₁ ─compose_local→ (ε_K, δ_K) ─amplify_scheme→ (ε̃, δ̃) ─compose_rounds→ (ε, δ)
//! ```
//!
//! The subsampling ratio is called `q` here; it only enters the δ terms and
//! the admissible step size.

use std::fmt;

use crate::error::{Error, Result};

/// Below this ε_K the scheme I δ terms use their `ε → 0` limit.
pub const EPS_LIMIT: f64 = 1e-12;

/// ρ grid scanned by [`budget_search`].
pub const RHO_GRID: [f64; 12] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpScheme {
    /// Devices drawn with replacement by weight.
    SchemeI,
    /// Devices drawn uniformly without replacement. Full participation is
    /// this scheme with `S = N`.
    SchemeII,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpParams {
    pub delta_l: f64,
    pub q: f64,
    pub eta: f64,
    pub tau: f64,
    pub rho: f64,
    pub min_weight: f64,
    pub local_steps: usize,
    pub horizon: usize,
    pub devices: usize,
    pub n_clients: usize,
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub scheme: DpScheme,
}

impl DpParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.delta_l > 0.0 && self.delta_l.is_finite()) {
            return bad(format!("delta_l must be > 0, got {}", self.delta_l));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad(format!("q must lie in (0, 1], got {}", self.q));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be >= 0, got {}", self.eta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!(
                "rho must lie in [0, 1); rho = 1 leaves no private noise (got {})",
                self.rho
            ));
        }
        if !(self.min_weight > 0.0 && self.min_weight <= 1.0) {
            return bad(format!("min p_c must lie in (0, 1], got {}", self.min_weight));
        }
        if self.local_steps == 0 {
            return bad("K must be >= 1".into());
        }
        if self.horizon == 0 || !self.horizon.is_multiple_of(self.local_steps) {
            return bad(format!(
                "T = {} must be a positive multiple of K = {}",
                self.horizon, self.local_steps
            ));
        }
        if self.devices == 0 || self.devices > self.n_clients {
            return bad(format!(
                "need 1 <= S <= N = {}, got S = {}",
                self.n_clients, self.devices
            ));
        }
        if !(self.delta0 > 0.0 && self.delta0 < 1.0) {
            return bad(format!("delta0 must lie in (0, 1), got {}", self.delta0));
        }
        for (name, v) in [("delta1", self.delta1), ("delta2", self.delta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.horizon / self.local_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
}

/// Largest step size for which the per-step mechanism bound holds:
/// `τ(1−ρ²)q² min p_c / (Δ² ln(1.25/δ₀))`.
pub fn eta_max_dp(params: &DpParams) -> Result<f64> {
    params.validate()?;
    Ok(params.tau * (1.0 - params.rho * params.rho) * params.q * params.q * params.min_weight
        / (params.delta_l * params.delta_l * (1.25 / params.delta0).ln()))
}

/// Per-step privacy loss `2Δ √(η ln(1.25/δ₀) / (τ(1−ρ²) min p_c))`.
pub fn epsilon_one(params: &DpParams) -> Result<f64> {
    let eta_max = eta_max_dp(params)?;
    if params.eta > eta_max {
        return Err(Error::InadmissibleStep {
            eta: params.eta,
            eta_max,
        });
    }
    Ok(2.0
        * params.delta_l
        * (params.eta * (1.25 / params.delta0).ln()
            / (params.tau * (1.0 - params.rho * params.rho) * params.min_weight))
            .sqrt())
}

/// `min{√(2n ln(1/δ)) ε + n ε (e^ε − 1), n ε}`; `δ = 0` leaves only the
/// linear branch.
fn compose(eps: f64, n: usize, delta: f64) -> f64 {
    let n = n as f64;
    let linear = n * eps;
    if delta <= 0.0 || eps == 0.0 {
        return linear;
    }
    let advanced = (2.0 * n * (1.0 / delta).ln()).sqrt() * eps + n * eps * eps.exp_m1();
    advanced.min(linear)
}

/// `K`-fold composition of one local step within a round.
pub fn compose_local(epsilon1: f64, k_local: usize, q: f64, delta0: f64, delta1: f64) -> DpBudget {
    DpBudget {
        epsilon: compose(epsilon1, k_local, delta1),
        delta: k_local as f64 * q * delta0 + delta1,
    }
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    (1..=k).map(|j| ((n - k + j) as f64 / j as f64).ln()).sum()
}

/// Amplification by device sampling of one round's budget.
#[allow(clippy::too_many_arguments)]
pub fn amplify_scheme(
    epsilon_k: f64,
    scheme: DpScheme,
    devices: usize,
    n_clients: usize,
    k_local: usize,
    q: f64,
    delta0: f64,
    delta1: f64,
) -> Result<DpBudget> {
    if devices == 0 || devices > n_clients {
        return Err(Error::invalid(format!(
            "need 1 <= S <= N = {n_clients}, got S = {devices}"
        )));
    }
    let s = devices as f64;
    let n = n_clients as f64;
    let k = k_local as f64;
    match scheme {
        DpScheme::SchemeII => Ok(DpBudget {
            epsilon: (s / n * epsilon_k.exp_m1()).ln_1p(),
            delta: s / n * (k * q * delta0 + delta1),
        }),
        DpScheme::SchemeI => {
            // 1 − (1 − 1/N)^S
            let hit = -(s * (-1.0 / n).ln_1p()).exp_m1();
            let epsilon = (hit * epsilon_k.exp_m1()).ln_1p();
            let ln_p = (1.0 / n).ln();
            let ln_miss = (-1.0 / n).ln_1p();
            let mut delta = 0.0;
            for j in 1..=devices {
                let jf = j as f64;
                let rest = (devices - j) as f64;
                let ln_pmf = ln_binomial(devices, j)
                    + jf * ln_p
                    + if devices == j { 0.0 } else { rest * ln_miss };
                let base = 1.25 * k * q * (delta0 / 1.25).powf(1.0 / (jf * jf)) + delta1;
                let d_js = if epsilon_k < EPS_LIMIT {
                    jf * base
                } else {
                    epsilon_k.exp_m1() * base / (epsilon_k / jf).exp_m1()
                };
                delta += ln_pmf.exp() * d_js;
            }
            Ok(DpBudget { epsilon, delta })
        }
    }
}

/// Composition of `rounds` amplified round budgets.
pub fn compose_rounds(eps_tilde: f64, delta_tilde: f64, rounds: usize, delta2: f64) -> DpBudget {
    DpBudget {
        epsilon: compose(eps_tilde, rounds, delta2),
        delta: rounds as f64 * delta_tilde + delta2,
    }
}

/// Scheme II round composition written in terms of the un-amplified `ε_K`:
/// `ε̃ min{√(2E ln(1/δ₂)) + E(S/N)(e^{ε_K} − 1), E}` with `E = T/K`.
pub fn compose_rounds_scheme_two(
    eps_tilde: f64,
    epsilon_k: f64,
    devices: usize,
    n_clients: usize,
    rounds: usize,
    delta2: f64,
) -> f64 {
    let e = rounds as f64;
    if delta2 <= 0.0 || eps_tilde == 0.0 {
        return e * eps_tilde;
    }
    let rate = devices as f64 / n_clients as f64;
    eps_tilde * ((2.0 * e * (1.0 / delta2).ln()).sqrt() + e * rate * epsilon_k.exp_m1()).min(e)
}

/// Every intermediate of one accounting pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpReport {
    pub eta_max: f64,
    pub epsilon1: f64,
    pub local: DpBudget,
    pub amplified: DpBudget,
    pub total: DpBudget,
    /// Scheme II closed form of the total ε, when applicable.
    pub epsilon_scheme_two: Option<f64>,
    /// Set when the raw total δ exceeded 1 and was clamped.
    pub delta_clamped: bool,
}

impl fmt::Display for DpReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eta_max={:.12e}", self.eta_max)?;
        writeln!(f, "epsilon_1={:.12e}", self.epsilon1)?;
        writeln!(f, "epsilon_K={:.12e}", self.local.epsilon)?;
        writeln!(f, "delta_K={:.12e}", self.local.delta)?;
        writeln!(f, "epsilon_tilde_K={:.12e}", self.amplified.epsilon)?;
        writeln!(f, "delta_tilde_K={:.12e}", self.amplified.delta)?;
        writeln!(f, "epsilon_total={:.12e}", self.total.epsilon)?;
        writeln!(f, "delta_total={:.12e}", self.total.delta)?;
        if let Some(e) = self.epsilon_scheme_two {
            writeln!(f, "epsilon_total_scheme2_form={e:.12e}")?;
        }
        writeln!(f, "delta_clamped={}", self.delta_clamped)
    }
}

/// Full accounting pass.
pub fn account_report(params: &DpParams) -> Result<DpReport> {
    let report = account_quiet(params)?;
    if report.delta_clamped {
        log::warn!("total delta exceeds 1; clamped");
    }
    Ok(report)
}

fn account_quiet(params: &DpParams) -> Result<DpReport> {
    let eta_max = eta_max_dp(params)?;
    let epsilon1 = epsilon_one(params)?;
    let local = compose_local(epsilon1, params.local_steps, params.q, params.delta0, params.delta1);
    let amplified = amplify_scheme(
        local.epsilon,
        params.scheme,
        params.devices,
        params.n_clients,
        params.local_steps,
        params.q,
        params.delta0,
        params.delta1,
    )?;
    let rounds = params.rounds();
    let mut total = compose_rounds(amplified.epsilon, amplified.delta, rounds, params.delta2);
    let epsilon_scheme_two = (params.scheme == DpScheme::SchemeII).then(|| {
        compose_rounds_scheme_two(
            amplified.epsilon,
            local.epsilon,
            params.devices,
            params.n_clients,
            rounds,
            params.delta2,
        )
    });
    let delta_clamped = total.delta > 1.0;
    if delta_clamped {
        total.delta = 1.0;
    }
    Ok(DpReport {
        eta_max,
        epsilon1,
        local,
        amplified,
        total,
        epsilon_scheme_two,
        delta_clamped,
    })
}

pub fn account(params: &DpParams) -> Result<DpBudget> {
    Ok(account_report(params)?.total)
}

/// Largest `(ρ, S)` on the search grid, ρ first, meeting both budgets.
/// Grid points with an inadmissible step size are infeasible.
pub fn budget_search(eps_star: f64, delta_star: f64, params: &DpParams) -> Option<(f64, usize)> {
    for &rho in RHO_GRID.iter().rev() {
        for s in (1..=params.n_clients).rev() {
            let p = DpParams {
                rho,
                devices: s,
                ..*params
            };
            if let Ok(r) = account_quiet(&p) {
                if !r.delta_clamped && r.total.epsilon <= eps_star && r.total.delta <= delta_star {
                    return Some((rho, s));
                }
            }
        }
    }
    None
}
