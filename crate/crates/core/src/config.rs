//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are rejected. List values are comma separated;
//! matrix rows are separated by `;`.

use std::collections::HashMap;
use std::path::PathBuf;

use crate::engine::{weights_balanced, Scheme};
use crate::error::{Error, Result};
use crate::linalg::{check_spd, Matrix};

pub const KEYS: &[&str] = &[
    "model",
    "n_clients",
    "points_per_client",
    "alpha",
    "sigma",
    "data_seed",
    "data_file",
    "n_features",
    "n_classes",
    "ridge",
    "test_points",
    "k_local",
    "eta",
    "schedule",
    "eta_rule",
    "tau",
    "rho",
    "scheme",
    "s_devices",
    "subsample",
    "horizon",
    "replications",
    "seed",
    "sweep",
    "sweep_values",
    "output_dir",
    "epsilon",
    "collect_every",
    "warmup",
    "bound_points",
    "delta_l",
    "delta0",
    "delta1",
    "delta2",
    "eps_budget",
    "delta_budget",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gaussian,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Fixed,
    Decaying,
}

/// How the step size follows the local-step count in a `K` sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaRule {
    /// `eta` for every `K`.
    Fixed,
    /// `eta` is the `K = 1` anchor; each `K` gets the step size that keeps the
    /// full-device asymptotic bound `√η · √((K−1)² + κ)` at its anchor value.
    BoundMatched,
    /// As `BoundMatched` with the planner's `K² + κ` factor.
    Planned,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    None,
    LocalSteps(Vec<usize>),
    Alpha(Vec<f64>),
    Rho(Vec<f64>),
    Eta(Vec<f64>),
    Scheme(Vec<Scheme>),
}

impl Sweep {
    pub fn axis(&self) -> &'static str {
        match self {
            Sweep::None => "none",
            Sweep::LocalSteps(_) => "k",
            Sweep::Alpha(_) => "alpha",
            Sweep::Rho(_) => "rho",
            Sweep::Eta(_) => "eta",
            Sweep::Scheme(_) => "scheme",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::None => 0,
            Sweep::LocalSteps(v) => v.len(),
            Sweep::Alpha(v) | Sweep::Rho(v) | Sweep::Eta(v) => v.len(),
            Sweep::Scheme(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn scheme_label(s: &Scheme) -> String {
    match s {
        Scheme::Full => "full".into(),
        Scheme::SchemeI { s } => format!("scheme1:{s}"),
        Scheme::SchemeII { s } => format!("scheme2:{s}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub n_clients: usize,
    pub points_per_client: Vec<usize>,
    pub alpha: f64,
    pub sigma: Matrix,
    pub data_seed: u64,
    pub data_file: Option<PathBuf>,
    pub n_features: usize,
    pub n_classes: usize,
    pub ridge: f64,
    pub test_points: usize,
    pub k_local: usize,
    pub eta: f64,
    pub schedule: ScheduleKind,
    pub eta_rule: EtaRule,
    pub tau: f64,
    pub rho: f64,
    pub scheme: Scheme,
    pub subsample: f64,
    pub horizon: usize,
    pub replications: usize,
    pub seed: u64,
    pub sweep: Sweep,
    pub output_dir: PathBuf,
    pub epsilon: f64,
    pub collect_every: usize,
    pub warmup: usize,
    pub bound_points: usize,
    pub delta_l: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub eps_budget: Option<f64>,
    pub delta_budget: Option<f64>,
}

struct Entries {
    map: HashMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: Option<T>) -> Result<T> {
        match self.take(key) {
            Some((line, raw)) => raw.parse().map_err(|_| {
                Error::config(line, format!("`{key}`: cannot parse `{raw}`"))
            }),
            None => default.ok_or_else(|| Error::config(0, format!("missing required key `{key}`"))),
        }
    }

    fn optional<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            Some((line, raw)) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::config(line, format!("`{key}`: cannot parse `{raw}`"))),
            None => Ok(None),
        }
    }

    fn line(&self, key: &str) -> usize {
        self.map.get(key).map_or(0, |(l, _)| *l)
    }
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::config(line, format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_scheme(line: usize, raw: &str, s_devices: Option<usize>) -> Result<Scheme> {
    let (name, count) = match raw.split_once(':') {
        Some((n, c)) => (
            n.trim(),
            Some(c.trim().parse::<usize>().map_err(|_| {
                Error::config(line, format!("bad device count in `{raw}`"))
            })?),
        ),
        None => (raw.trim(), s_devices),
    };
    let need = |c: Option<usize>| {
        c.ok_or_else(|| Error::config(line, format!("scheme `{name}` needs s_devices")))
    };
    match name {
        "full" => Ok(Scheme::Full),
        "scheme1" => Ok(Scheme::SchemeI { s: need(count)? }),
        "scheme2" => Ok(Scheme::SchemeII { s: need(count)? }),
        other => Err(Error::config(
            line,
            format!("unknown scheme `{other}` (expected full, scheme1 or scheme2)"),
        )),
    }
}

fn parse_matrix(line: usize, raw: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = raw
        .split(';')
        .map(|r| parse_list(line, "sigma", r))
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows).map_err(|e| Error::config(line, format!("`sigma`: {e}")))
}

/// Parse and validate a configuration file's text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map = HashMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("expected key=value, got `{content}`")))?;
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::config(line, format!("unknown key `{key}`")));
        }
        if let Some((first, _)) = map.get(&key) {
            return Err(Error::config(
                line,
                format!("duplicate key `{key}` (first set on line {first})"),
            ));
        }
        map.insert(key, (line, value.trim().to_string()));
    }
    let mut e = Entries { map };

    let model = match e.take("model") {
        None => ModelKind::Gaussian,
        Some((_, v)) if v == "gaussian" => ModelKind::Gaussian,
        Some((_, v)) if v == "logistic" => ModelKind::Logistic,
        Some((line, v)) => {
            return Err(Error::config(line, format!("unknown model `{v}`")));
        }
    };
    let n_clients: usize = e.parse("n_clients", None)?;
    if n_clients == 0 {
        return Err(Error::config(0, "n_clients must be >= 1"));
    }
    let ppc_line = e.line("points_per_client");
    let points_per_client = match e.take("points_per_client") {
        None => vec![20; n_clients],
        Some((line, raw)) => {
            let v: Vec<usize> = parse_list(line, "points_per_client", &raw)?;
            match v.len() {
                1 => vec![v[0]; n_clients],
                n if n == n_clients => v,
                n => {
                    return Err(Error::config(
                        line,
                        format!("points_per_client lists {n} entries for {n_clients} clients"),
                    ))
                }
            }
        }
    };
    if points_per_client.contains(&0) {
        return Err(Error::config(ppc_line, "every client needs at least one point"));
    }
    let alpha = e.parse("alpha", Some(1.0))?;
    let sigma = match e.take("sigma") {
        None => Matrix::from_rows(&[vec![5.0, -2.0], vec![-2.0, 1.0]])?,
        Some((line, raw)) => {
            let m = parse_matrix(line, &raw)?;
            check_spd(&m, 1e-12).map_err(|err| Error::config(line, format!("`sigma`: {err}")))?;
            m
        }
    };
    let seed: u64 = e.parse("seed", Some(0))?;
    let data_seed = e.parse("data_seed", Some(seed))?;
    let data_file = e.take("data_file").map(|(_, v)| PathBuf::from(v));
    let n_features = e.parse("n_features", Some(5))?;
    let n_classes = e.parse("n_classes", Some(3))?;
    let ridge = e.parse("ridge", Some(1.0))?;
    let test_points = e.parse("test_points", Some(500))?;
    let k_line = e.line("k_local");
    let k_local: usize = e.parse("k_local", None)?;
    if k_local == 0 {
        return Err(Error::config(k_line, "k_local must be >= 1"));
    }
    let schedule = match e.take("schedule") {
        None => ScheduleKind::Fixed,
        Some((_, v)) if v == "fixed" => ScheduleKind::Fixed,
        Some((_, v)) if v == "decaying" => ScheduleKind::Decaying,
        Some((line, v)) => return Err(Error::config(line, format!("unknown schedule `{v}`"))),
    };
    let eta_line = e.line("eta");
    let eta: f64 = match schedule {
        ScheduleKind::Fixed => e.parse("eta", None)?,
        ScheduleKind::Decaying => e.parse("eta", Some(0.0))?,
    };
    if schedule == ScheduleKind::Fixed && (eta.is_nan() || eta <= 0.0) {
        return Err(Error::config(eta_line, format!("eta must be > 0, got {eta}")));
    }
    let eta_rule = match e.take("eta_rule") {
        None => EtaRule::Fixed,
        Some((_, v)) if v == "fixed" => EtaRule::Fixed,
        Some((_, v)) if v == "bound_matched" => EtaRule::BoundMatched,
        Some((_, v)) if v == "planned" => EtaRule::Planned,
        Some((line, v)) => return Err(Error::config(line, format!("unknown eta_rule `{v}`"))),
    };
    let tau = e.parse("tau", Some(1.0))?;
    let rho_line = e.line("rho");
    let rho: f64 = e.parse("rho", Some(0.0))?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(rho_line, format!("rho must lie in [0, 1], got {rho}")));
    }
    let s_devices: Option<usize> = e.optional("s_devices")?;
    let scheme_line = e.line("scheme");
    let scheme = match e.take("scheme") {
        None => Scheme::Full,
        Some((line, raw)) => parse_scheme(line, &raw, s_devices)?,
    };
    let subsample_line = e.line("subsample");
    let subsample: f64 = e.parse("subsample", Some(1.0))?;
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(Error::config(subsample_line, format!("subsample must lie in (0, 1], got {subsample}")));
    }
    let horizon_line = e.line("horizon");
    let horizon: usize = e.parse("horizon", None)?;
    let replications = e.parse("replications", Some(100))?;
    let sweep_line = e.line("sweep");
    let sweep_axis = e.take("sweep").map(|(_, v)| v);
    let values = e.take("sweep_values");
    let sweep = match (sweep_axis.as_deref(), values) {
        (None | Some("none"), None) => Sweep::None,
        (None | Some("none"), Some((line, _))) => {
            return Err(Error::config(line, "sweep_values given without a sweep axis"));
        }
        (Some(_), None) => return Err(Error::config(sweep_line, "sweep needs sweep_values")),
        (Some(axis), Some((line, raw))) => {
            let sweep = match axis {
                "k" | "K" => Sweep::LocalSteps(parse_list(line, "sweep_values", &raw)?),
                "alpha" => Sweep::Alpha(parse_list(line, "sweep_values", &raw)?),
                "rho" => Sweep::Rho(parse_list(line, "sweep_values", &raw)?),
                "eta" => Sweep::Eta(parse_list(line, "sweep_values", &raw)?),
                "scheme" => Sweep::Scheme(
                    raw.split(',')
                        .map(|s| s.trim())
                        .filter(|s| !s.is_empty())
                        .map(|s| parse_scheme(line, s, s_devices))
                        .collect::<Result<_>>()?,
                ),
                other => {
                    return Err(Error::config(
                        sweep_line,
                        format!("unknown sweep axis `{other}` (expected k, alpha, rho, eta or scheme)"),
                    ))
                }
            };
            if sweep.is_empty() {
                return Err(Error::config(line, "sweep_values is empty"));
            }
            sweep
        }
    };
    let output_dir = e
        .take("output_dir")
        .map_or_else(|| PathBuf::from("out"), |(_, v)| PathBuf::from(v));
    let epsilon = e.parse("epsilon", Some(0.05))?;
    let collect_every = e.parse("collect_every", Some(10))?;
    let warmup = e.parse("warmup", Some(0))?;
    let bound_points = e.parse("bound_points", Some(101))?;
    let delta_l = e.parse("delta_l", Some(1.0))?;
    let delta0 = e.parse("delta0", Some(1e-5))?;
    let delta1 = e.parse("delta1", Some(1e-6))?;
    let delta2 = e.parse("delta2", Some(1e-6))?;
    let eps_budget = e.optional("eps_budget")?;
    let delta_budget = e.optional("delta_budget")?;

    let cfg = ExperimentConfig {
        model,
        n_clients,
        points_per_client,
        alpha,
        sigma,
        data_seed,
        data_file,
        n_features,
        n_classes,
        ridge,
        test_points,
        k_local,
        eta,
        schedule,
        eta_rule,
        tau,
        rho,
        scheme,
        subsample,
        horizon,
        replications,
        seed,
        sweep,
        output_dir,
        epsilon,
        collect_every,
        warmup,
        bound_points,
        delta_l,
        delta0,
        delta1,
        delta2,
        eps_budget,
        delta_budget,
    };

    // Cross-key constraints.
    if !cfg.horizon.is_multiple_of(cfg.k_local) && cfg.eta_rule == EtaRule::Fixed && !matches!(cfg.sweep, Sweep::LocalSteps(_)) {
        return Err(Error::config(
            horizon_line,
            format!("horizon {} is not a multiple of k_local = {}", cfg.horizon, cfg.k_local),
        ));
    }
    if let Sweep::LocalSteps(ks) = &cfg.sweep {
        if ks.contains(&0) {
            return Err(Error::config(sweep_line, "local step counts must be >= 1"));
        }
    }
    let mut schemes = vec![cfg.scheme];
    if let Sweep::Scheme(v) = &cfg.sweep {
        schemes.extend(v.iter().copied());
    }
    for s in schemes {
        let n = s.devices(cfg.n_clients);
        if n == 0 || n > cfg.n_clients {
            return Err(Error::config(
                scheme_line,
                format!("need 1 <= s_devices <= n_clients = {}, got {n}", cfg.n_clients),
            ));
        }
        if matches!(s, Scheme::SchemeII { .. }) && cfg.data_file.is_none() {
            let weights: Vec<f64> = cfg.points_per_client.iter().map(|&p| p as f64).collect();
            if !weights_balanced(&weights) {
                return Err(Error::config(
                    scheme_line,
                    "scheme2 requires balanced data: every client must hold the same number of points",
                ));
            }
        }
    }
    if cfg.replications < 2 {
        return Err(Error::config(0, "replications must be >= 2"));
    }
    if cfg.collect_every == 0 {
        return Err(Error::config(0, "collect_every must be >= 1"));
    }
    Ok(cfg)
}
