//! Accountant values checked against the high-precision reference in
//! `oracles/dp_oracle.py`.

#![allow(clippy::excessive_precision)]

use fald::privacy::*;

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn desk(scheme: DpScheme) -> DpParams {
    DpParams {
        delta_l: 1.0,
        q: 0.5,
        eta: 1e-6,
        tau: 1.0,
        rho: 0.0,
        min_weight: 0.1,
        local_steps: 10,
        horizon: 200,
        devices: 2,
        n_clients: 10,
        delta0: 1e-5,
        delta1: 1e-6,
        delta2: 1e-6,
        scheme,
    }
}

#[test]
fn admissible_step_golden() {
    let p = DpParams {
        q: 0.1,
        eta: 1e-5,
        ..desk(DpScheme::SchemeII)
    };
    assert!(rel(eta_max_dp(&p).unwrap(), 0.000085207406211777151397) < 1e-12);
}

#[test]
fn epsilon_one_golden() {
    let p = DpParams {
        q: 1.0,
        eta: 1e-4,
        ..desk(DpScheme::SchemeII)
    };
    assert!(rel(epsilon_one(&p).unwrap(), 0.21666627809868741248) < 1e-12);
}

#[test]
fn local_composition_golden() {
    let b = compose_local(0.01, 100, 0.5, 1e-5, 1e-6);
    assert!(rel(b.epsilon, 0.53570234405986125541) < 1e-12);
}

#[test]
fn scheme_one_binomial_sum_golden() {
    let b = amplify_scheme(0.5, DpScheme::SchemeI, 3, 10, 10, 0.1, 1e-6, 0.0).unwrap();
    assert!(rel(b.epsilon, 0.16195171336689101741) < 1e-12);
    assert!(rel(b.delta, 0.0032453521603866266949) < 1e-12);
}

#[test]
fn desk_account_golden() {
    let two = account(&desk(DpScheme::SchemeII)).unwrap();
    assert!(rel(two.epsilon, 0.94503514808799469032) < 1e-12);
    assert!(rel(two.delta, 0.000205) < 1e-12);
    let one = account(&desk(DpScheme::SchemeI)).unwrap();
    assert!(rel(one.epsilon, 0.89882904332251475797) < 1e-12);
    assert!(rel(one.delta, 0.14074884254789862665) < 1e-12);
}

#[test]
fn scheme_two_delta_closed_form() {
    let p = desk(DpScheme::SchemeII);
    let b = account(&p).unwrap();
    let (s, n, t, k) = (2.0, 10.0, 200.0, 10.0);
    let expect = s / n * p.q * t * p.delta0 + t * s / (k * n) * p.delta1 + p.delta2;
    assert!(rel(b.delta, expect) < 1e-12);
}

#[test]
fn budget_search_matches_enumeration() {
    let p = DpParams {
        eta: 1e-7,
        ..desk(DpScheme::SchemeII)
    };
    let (eps_star, delta_star) = (0.2, 1e-3);
    let mut best: Option<(f64, usize)> = None;
    for &rho in RHO_GRID.iter() {
        for s in 1..=p.n_clients {
            let q = DpParams {
                rho,
                devices: s,
                ..p
            };
            let Ok(b) = account(&q) else { continue };
            if b.epsilon <= eps_star && b.delta <= delta_star {
                let better = match best {
                    None => true,
                    Some((r0, s0)) => rho > r0 || (rho == r0 && s > s0),
                };
                if better {
                    best = Some((rho, s));
                }
            }
        }
    }
    assert!(best.is_some());
    assert_eq!(budget_search(eps_star, delta_star, &p), best);
}
