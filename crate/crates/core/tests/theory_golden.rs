//! Bound values checked against the high-precision reference in
//! `oracles/theory_oracle.py`.

#![allow(clippy::excessive_precision)]

use fald::engine::Scheme;
use fald::theory::*;

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn desk() -> BoundInputs {
    let s2 = std::f64::consts::SQRT_2;
    BoundInputs {
        l_smooth: 200.0 / (3.0 - 2.0 * s2),
        m_convex: 200.0 / (3.0 + 2.0 * s2),
        dim: 2,
        init_d: 1.0,
        gamma_het: 0.0,
        sigma_sg: 0.0,
        tau: 1.0,
        rho: 0.0,
        min_weight: 0.1,
        local_steps: 10,
        n_clients: 10,
        scheme: Scheme::Full,
        eta: 1e-4,
    }
}

#[test]
fn toy_full_bound_golden() {
    let x = BoundInputs {
        l_smooth: 2.0,
        m_convex: 1.0,
        dim: 2,
        init_d: 1.0,
        gamma_het: 0.0,
        sigma_sg: 0.0,
        tau: 1.0,
        rho: 0.0,
        min_weight: 0.5,
        local_steps: 1,
        n_clients: 2,
        scheme: Scheme::Full,
        eta: 0.25,
    };
    assert!(rel(bound_full_fixed(&x, 0).unwrap(), 107.92304845413263761) < 1e-12);
}

#[test]
fn desk_h_golden() {
    assert!(rel(h_rho(&desk()), 1.2914213562373095049) < 1e-12);
}

#[test]
fn desk_decaying_golden() {
    assert!(rel(bound_decaying(&desk(), 100).unwrap(), 3016.254591681167032) < 1e-12);
}

#[test]
fn desk_partial_golden() {
    let x = BoundInputs {
        rho: 0.5,
        scheme: Scheme::SchemeI { s: 5 },
        ..desk()
    };
    assert!(rel(bound_partial(&x, 50).unwrap(), 1085.0337657637874822) < 1e-12);
}

#[test]
fn desk_plan_golden() {
    let plan = plan_steps(1e-3, &desk()).unwrap();
    assert!(rel(plan.eta, 2.0272441234927558808e-17) < 1e-12);
    assert!(rel(plan.iterations as f64, 48597884631495090.0) < 1e-9);
    assert_eq!(plan.iterations % 10, 0);
    assert_eq!(plan.rounds * 10, plan.iterations);
}

#[test]
fn optimal_k_brute_force() {
    for kappa in [1.0, 2.0, 100.0] {
        let best = (1..=1000usize)
            .min_by(|&a, &b| {
                let fa = a as f64 + kappa / a as f64;
                let fb = b as f64 + kappa / b as f64;
                fa.partial_cmp(&fb).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        assert_eq!(optimal_local_steps(kappa).unwrap(), best, "kappa {kappa}");
    }
    assert_eq!(optimal_local_steps(100.0).unwrap(), 10);
}

#[test]
fn plan_scan_over_k_prefers_near_optimal() {
    // Rounds T/K over K follow K + κ/K up to the log factor.
    let mut x = desk();
    let kappa = x.kappa();
    let mut best = (usize::MAX, 0);
    for k in 1..=60 {
        x.local_steps = k;
        let p = plan_steps(0.5, &x).unwrap();
        if p.rounds < best.0 {
            best = (p.rounds, k);
        }
    }
    let k_star = optimal_local_steps(kappa).unwrap();
    assert!((best.1 as i64 - k_star as i64).abs() <= 1, "{best:?} vs {k_star}");
}
