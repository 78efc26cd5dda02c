//! Non-asymptotic W2 bounds for FA-LD and the step-size planner derived from
//! them.
//!
//! All bounds share the quantity
//!
//! ```text
//! H_ρ = D² + max_c T_{c,ρ} / m + γ² / (m² d) + σ² / m²
//! T_{c,ρ} = τ (ρ² + (1−ρ²) / p_c)
//! ```
//!
//! and an initialisation term `√(2d) (D + √(τ/m))` that contracts at rate
//! `1 − ηm/4` per iteration.

use std::io::Write;

use crate::engine::Scheme;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub l_smooth: f64,
    pub m_convex: f64,
    pub dim: usize,
    /// Initial distance term `D`.
    pub init_d: f64,
    pub gamma_het: f64,
    pub sigma_sg: f64,
    pub tau: f64,
    pub rho: f64,
    pub min_weight: f64,
    pub local_steps: usize,
    pub n_clients: usize,
    pub scheme: Scheme,
    pub eta: f64,
}

impl BoundInputs {
    pub fn kappa(&self) -> f64 {
        self.l_smooth / self.m_convex
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be > 0, got {v}")))
            }
        };
        let nonneg = |v: f64, name: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be >= 0, got {v}")))
            }
        };
        pos(self.l_smooth, "L")?;
        pos(self.m_convex, "m")?;
        if self.m_convex > self.l_smooth {
            return Err(Error::invalid(format!(
                "need m <= L, got m = {} > L = {}",
                self.m_convex, self.l_smooth
            )));
        }
        if self.dim == 0 || self.local_steps == 0 || self.n_clients == 0 {
            return Err(Error::invalid("d, K and N must be >= 1"));
        }
        nonneg(self.init_d, "D")?;
        nonneg(self.gamma_het, "gamma")?;
        nonneg(self.sigma_sg, "sigma")?;
        nonneg(self.tau, "tau")?;
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.min_weight > 0.0 && self.min_weight <= 1.0) {
            return Err(Error::invalid(format!(
                "min p_c must lie in (0, 1], got {}",
                self.min_weight
            )));
        }
        let s = self.scheme.devices(self.n_clients);
        if s == 0 || s > self.n_clients {
            return Err(Error::invalid(format!(
                "need 1 <= S <= N = {}, got S = {s}",
                self.n_clients
            )));
        }
        pos(self.eta, "eta")
    }

    /// Largest step size covered by the fixed-step bounds, `1/(2L)`.
    pub fn eta_limit(&self) -> f64 {
        1.0 / (2.0 * self.l_smooth)
    }

    fn check_eta(&self) -> Result<()> {
        self.validate()?;
        if self.eta > self.eta_limit() {
            return Err(Error::invalid(format!(
                "bound requires eta <= 1/(2L) = {:e}, got {:e}",
                self.eta_limit(),
                self.eta
            )));
        }
        Ok(())
    }
}

/// Effective per-client temperature `T_{c,ρ} = τ(ρ² + (1−ρ²)/p_c)`.
pub fn temperature(tau: f64, rho: f64, p_c: f64) -> f64 {
    tau * (rho * rho + (1.0 - rho * rho) / p_c)
}

/// `H_ρ`. The maximum over clients of `T_{c,ρ}` is attained at the smallest
/// weight.
pub fn h_rho(inputs: &BoundInputs) -> f64 {
    let m = inputs.m_convex;
    inputs.init_d * inputs.init_d
        + temperature(inputs.tau, inputs.rho, inputs.min_weight) / m
        + inputs.gamma_het * inputs.gamma_het / (m * m * inputs.dim as f64)
        + inputs.sigma_sg * inputs.sigma_sg / (m * m)
}

/// `√(2d)(D + √(τ/m))`
pub fn init_term(inputs: &BoundInputs) -> f64 {
    (2.0 * inputs.dim as f64).sqrt() * (inputs.init_d + (inputs.tau / inputs.m_convex).sqrt())
}

fn contraction(inputs: &BoundInputs, k: usize) -> f64 {
    // (1 − ηm/4)^k, kept accurate when ηm/4 is below f64 resolution.
    let log_r = (-inputs.eta * inputs.m_convex / 4.0).ln_1p();
    (k as f64 * log_r).exp() * init_term(inputs)
}

fn local_factor(k_local: usize, kappa: f64, shifted: bool) -> f64 {
    let k = if shifted { k_local as f64 - 1.0 } else { k_local as f64 };
    k * k + kappa
}

/// Full-device fixed-step bound on `W2(μ_k, π)`.
pub fn bound_full_fixed(inputs: &BoundInputs, k: usize) -> Result<f64> {
    inputs.check_eta()?;
    Ok(contraction(inputs, k) + asymptotic_full(inputs))
}

/// The `k`-independent part of [`bound_full_fixed`],
/// `30κ √(ηmd) √(((K−1)² + κ) H_ρ)`.
pub fn asymptotic_full(inputs: &BoundInputs) -> f64 {
    let kappa = inputs.kappa();
    30.0 * kappa
        * (inputs.eta * inputs.m_convex * inputs.dim as f64).sqrt()
        * (local_factor(inputs.local_steps, kappa, true) * h_rho(inputs)).sqrt()
}

/// Step size of the decaying schedule at iteration `k`.
pub fn decaying_eta(l: f64, m: f64, k: usize) -> f64 {
    1.0 / (2.0 * l + m * k as f64 / 12.0)
}

/// Full-device bound under `η_k = 1/(2L + mk/12)` with independent noise
/// (`ρ = 0` regardless of `inputs.rho`); `inputs.eta` is ignored.
pub fn bound_decaying(inputs: &BoundInputs, k: usize) -> Result<f64> {
    let mut base = inputs.clone();
    base.rho = 0.0;
    base.eta = base.eta_limit();
    base.validate()?;
    let kappa = base.kappa();
    let eta_k = decaying_eta(base.l_smooth, base.m_convex, k);
    Ok(45.0
        * kappa
        * (local_factor(base.local_steps, kappa, true) * h_rho(&base)).sqrt()
        * (eta_k * base.m_convex * base.dim as f64).sqrt())
}

/// `C_K = ηmK / (1 − e^{−ηmK/2})`, equal to 2 in the limit `ηmK → 0`.
pub fn c_k(eta: f64, m: f64, k_local: usize) -> f64 {
    let x = eta * m * k_local as f64;
    if x == 0.0 {
        return 2.0;
    }
    x / -(-x / 2.0).exp_m1()
}

/// Device-sampling variance factor: 1 for scheme I, `(N−S)/(N−1)` for
/// scheme II, 0 with full participation.
pub fn c_s(scheme: &Scheme, n_clients: usize) -> f64 {
    match *scheme {
        Scheme::Full => 0.0,
        Scheme::SchemeI { .. } => 1.0,
        Scheme::SchemeII { s } => {
            if n_clients <= 1 {
                0.0
            } else {
                (n_clients - s) as f64 / (n_clients - 1) as f64
            }
        }
    }
}

/// Partial-device bound on `W2(μ_k, π)`. The middle term uses `K²`, which is
/// never smaller than the `(K−1)²` of the full-device bound.
pub fn bound_partial(inputs: &BoundInputs, k: usize) -> Result<f64> {
    inputs.check_eta()?;
    let kappa = inputs.kappa();
    let m = inputs.m_convex;
    let d = inputs.dim as f64;
    let n = inputs.n_clients as f64;
    let s = inputs.scheme.devices(inputs.n_clients) as f64;
    let rho2 = inputs.rho * inputs.rho;
    let middle = 30.0
        * kappa
        * (inputs.eta * m * d).sqrt()
        * (h_rho(inputs) * local_factor(inputs.local_steps, kappa, false)).sqrt();
    let sampling = 2.0
        * (c_k(inputs.eta, m, inputs.local_steps) * d * inputs.tau / (s * m)
            * (rho2 + n * (1.0 - rho2))
            * c_s(&inputs.scheme, inputs.n_clients))
        .sqrt();
    Ok(contraction(inputs, k) + middle + sampling)
}

/// Step size and horizon that bring the full-device bound below `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    pub eta: f64,
    /// Iterations, a multiple of `K`.
    pub iterations: usize,
    pub rounds: usize,
}

/// Solves `30κ√(ηmd)√((K²+κ)H_ρ) ≤ ε/2` for the largest admissible `η`
/// (capped at `1/(2L)`), then the smallest `T` (multiple of `K`) with
/// `exp(−ηmT/4) √(2d)(D + √(τ/m)) ≤ ε/2`. `inputs.eta` is ignored.
pub fn plan_steps(epsilon: f64, inputs: &BoundInputs) -> Result<Plan> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    let mut base = inputs.clone();
    base.eta = base.eta_limit();
    base.validate()?;
    let kappa = base.kappa();
    let m = base.m_convex;
    let d = base.dim as f64;
    let half = epsilon / 2.0;
    let h = h_rho(&base);
    let eta_eq = half * half / (900.0 * kappa * kappa * m * d * local_factor(base.local_steps, kappa, false) * h);
    let eta = eta_eq.min(base.eta_limit());
    let init = init_term(&base);
    let raw = if init <= half {
        0.0
    } else {
        4.0 * (init / half).ln() / (eta * m)
    };
    let k = base.local_steps;
    let rounds = (raw / k as f64).ceil() as usize;
    Ok(Plan {
        eta,
        iterations: rounds * k,
        rounds,
    })
}

/// `argmin_{K ≥ 1} K + κ/K`, ties to the smaller `K`.
pub fn optimal_local_steps(kappa: f64) -> Result<usize> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::invalid(format!("kappa must be > 0, got {kappa}")));
    }
    // The objective is convex in K; compare floor(√κ) with its successor.
    // K + κ/K <= (K+1) + κ/(K+1)  iff  κ <= K(K+1).
    let k = (kappa.sqrt().floor() as usize).max(1);
    if kappa <= (k * (k + 1)) as f64 {
        Ok(k)
    } else {
        Ok(k + 1)
    }
}

/// Which bound a curve evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    FullFixed,
    Decaying,
    Partial,
}

impl BoundKind {
    pub fn name(&self) -> &'static str {
        match self {
            BoundKind::FullFixed => "full_fixed",
            BoundKind::Decaying => "decaying",
            BoundKind::Partial => "partial",
        }
    }

    pub fn evaluate(&self, inputs: &BoundInputs, k: usize) -> Result<f64> {
        match self {
            BoundKind::FullFixed => bound_full_fixed(inputs, k),
            BoundKind::Decaying => bound_decaying(inputs, k),
            BoundKind::Partial => bound_partial(inputs, k),
        }
    }
}

/// Writes `k,bound` rows for every `k` in `iterations`.
pub fn write_bound_curve<W: Write>(
    out: W,
    inputs: &BoundInputs,
    kind: BoundKind,
    iterations: &[usize],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "bound"])?;
    for &k in iterations {
        let v = kind.evaluate(inputs, k)?;
        w.write_record([k.to_string(), format!("{v:.12e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn gaussian_inputs() -> BoundInputs {
        // Σ = [[5,−2],[−2,1]], n = 200, N = 10 balanced clients, θ₀ = u.
        let s2 = std::f64::consts::SQRT_2;
        let lam_min = 3.0 - 2.0 * s2;
        let lam_max = 3.0 + 2.0 * s2;
        BoundInputs {
            l_smooth: 200.0 / lam_min,
            m_convex: 200.0 / lam_max,
            dim: 2,
            init_d: 0.0,
            gamma_het: 0.0,
            sigma_sg: 0.0,
            tau: 1.0,
            rho: 0.0,
            min_weight: 0.1,
            local_steps: 1,
            n_clients: 10,
            scheme: Scheme::Full,
            eta: 1e-4,
        }
    }

    #[test]
    fn temperature_limits() {
        assert_eq!(temperature(2.0, 1.0, 0.1), 2.0);
        assert!((temperature(2.0, 0.0, 0.1) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_of_gaussian_setup() {
        let k = gaussian_inputs().kappa();
        assert!((k - (17.0 + 12.0 * 2f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn eta_above_limit_rejected() {
        let mut x = gaussian_inputs();
        x.eta = 1.01 * x.eta_limit();
        assert!(bound_full_fixed(&x, 10).is_err());
        assert!(bound_partial(&x, 10).is_err());
        x.eta = x.eta_limit();
        assert!(bound_full_fixed(&x, 10).is_ok());
    }

    #[test]
    fn full_bound_at_zero_is_init_plus_asymptote() {
        let x = gaussian_inputs();
        let b = bound_full_fixed(&x, 0).unwrap();
        assert!((b - init_term(&x) - asymptotic_full(&x)).abs() < 1e-12);
    }

    #[test]
    fn bound_decreases_to_asymptote() {
        let x = gaussian_inputs();
        let mut prev = f64::INFINITY;
        for k in (0..2_000_000).step_by(50_000) {
            let b = bound_full_fixed(&x, k).unwrap();
            assert!(b <= prev);
            prev = b;
        }
        assert!((prev - asymptotic_full(&x)).abs() < 1e-9 * prev);
    }

    #[test]
    fn c_k_limit_and_value() {
        assert_eq!(c_k(0.0, 1.0, 3), 2.0);
        assert!((c_k(1e-8, 1.0, 1) - 2.0).abs() < 1e-6);
        let x: f64 = 0.3;
        assert!((c_k(0.1, 1.0, 3) - x / (1.0 - (-x / 2.0).exp())).abs() < 1e-13);
    }

    #[test]
    fn c_s_values() {
        assert_eq!(c_s(&Scheme::SchemeI { s: 3 }, 10), 1.0);
        assert_eq!(c_s(&Scheme::SchemeII { s: 10 }, 10), 0.0);
        assert!((c_s(&Scheme::SchemeII { s: 4 }, 10) - 6.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn partial_with_all_devices_under_scheme_two() {
        let mut x = gaussian_inputs();
        x.local_steps = 4;
        x.scheme = Scheme::SchemeII { s: 10 };
        let p = bound_partial(&x, 100).unwrap();
        let mut full = x.clone();
        full.scheme = Scheme::Full;
        let f = bound_full_fixed(&full, 100).unwrap();
        assert!(p >= f);
    }

    #[test]
    fn optimal_k_small_cases() {
        assert_eq!(optimal_local_steps(0.5).unwrap(), 1);
        assert_eq!(optimal_local_steps(2.0).unwrap(), 1);
        assert_eq!(optimal_local_steps(2.5).unwrap(), 2);
        assert_eq!(optimal_local_steps(6.0).unwrap(), 2);
        assert_eq!(optimal_local_steps(6.1).unwrap(), 3);
        assert_eq!(optimal_local_steps(17.0 + 12.0 * 2f64.sqrt()).unwrap(), 6);
        assert!(optimal_local_steps(0.0).is_err());
    }

    #[test]
    fn plan_meets_target() {
        let mut x = gaussian_inputs();
        x.init_d = 1.0;
        let eps = 0.05;
        let plan = plan_steps(eps, &x).unwrap();
        assert_eq!(plan.iterations % x.local_steps, 0);
        let mut at = x.clone();
        at.eta = plan.eta;
        let k2 = local_factor(at.local_steps, at.kappa(), false);
        let middle = 30.0 * at.kappa() * (at.eta * at.m_convex * 2.0).sqrt() * (k2 * h_rho(&at)).sqrt();
        assert!(middle <= eps / 2.0 * (1.0 + 1e-12));
        let tail = (-at.eta * at.m_convex * plan.iterations as f64 / 4.0).exp() * init_term(&at);
        assert!(tail <= eps / 2.0 * (1.0 + 1e-12));
    }

    #[test]
    fn curve_csv_has_rows() {
        let x = gaussian_inputs();
        let mut buf = Vec::new();
        write_bound_curve(&mut buf, &x, BoundKind::Decaying, &[0, 10, 20]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("k,bound\n"));
    }
}
