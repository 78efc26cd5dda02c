//! Experiment orchestration shared by the command-line front end and the
//! acceptance tests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{scheme_label, EtaRule, ExperimentConfig, ModelKind, ScheduleKind, Sweep};
use crate::engine::{run_replicated, Replicated, RunConfig, Schedule, Scheme};
use crate::error::{Error, Result};
use crate::metrics::{
    classification_metrics, empirical_summary, w2_gaussian, GaussianSummary, PredictiveAverager,
};
use crate::model::{
    gen_gaussian_federation, gen_logistic_task, init_radius, EnergyModel, FederatedDataset,
    GaussianModel, LogisticModel, Model,
};
use crate::privacy::{self, DpParams, DpScheme};
use crate::svg::chart_from_long_csv;
use crate::theory::{self, BoundInputs, BoundKind};

/// Window of the centred moving average applied before `T_ε` detection.
pub const SMOOTHING_WINDOW: usize = 5;
/// Confidence bins of the calibration error.
pub const ECE_BINS: usize = 10;

/// A model plus an optional held-out set for predictive metrics.
#[derive(Debug, Clone)]
pub struct Built {
    pub model: Model,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<usize>,
}

/// Build the model described by `cfg`, with `alpha` overriding the
/// configured heterogeneity.
pub fn build_model(cfg: &ExperimentConfig, alpha: f64) -> Result<Built> {
    match cfg.model {
        ModelKind::Gaussian => {
            let model = match &cfg.data_file {
                Some(path) => {
                    let ds = FederatedDataset::read_csv(fs::File::open(path)?)?;
                    GaussianModel::new(ds, cfg.sigma.clone(), cfg.tau)?
                }
                None => gen_gaussian_federation(
                    &cfg.points_per_client,
                    alpha,
                    &cfg.sigma,
                    cfg.tau,
                    cfg.data_seed,
                )?,
            };
            Ok(Built {
                model: Model::Gaussian(model),
                test_x: Vec::new(),
                test_y: Vec::new(),
            })
        }
        ModelKind::Logistic => {
            let task = gen_logistic_task(
                &cfg.points_per_client,
                cfg.n_features,
                cfg.n_classes,
                alpha,
                cfg.test_points,
                cfg.data_seed,
            )?;
            let train = match &cfg.data_file {
                Some(path) => FederatedDataset::read_csv(fs::File::open(path)?)?,
                None => task.train,
            };
            let model = LogisticModel::new(train, cfg.n_classes, cfg.ridge, cfg.tau)?;
            Ok(Built {
                model: Model::Logistic(model),
                test_x: task.test_x,
                test_y: task.test_y,
            })
        }
    }
}

/// Step size for `k_local` local steps under `rule`, anchored at `eta` for
/// `K = 1` and capped at `1/(2L)`.
pub fn eta_for_local_steps(rule: EtaRule, eta: f64, k_local: usize, l_smooth: f64, m_convex: f64) -> f64 {
    let kappa = l_smooth / m_convex;
    let k = k_local as f64;
    let scaled = match rule {
        EtaRule::Fixed => return eta,
        EtaRule::BoundMatched => eta * kappa / ((k - 1.0) * (k - 1.0) + kappa),
        EtaRule::Planned => eta * (1.0 + kappa) / (k * k + kappa),
    };
    scaled.min(1.0 / (2.0 * l_smooth))
}

/// One curve of a sweep: the run it came from and the model it ran on.
#[derive(Debug, Clone)]
pub struct CurveSpec {
    pub label: String,
    pub run: RunConfig,
    pub alpha: f64,
}

fn round_up(t: usize, k: usize) -> usize {
    t.div_ceil(k) * k
}

/// Expand `cfg` into one run per sweep value (one run when there is no sweep
/// or `single` is set).
pub fn curve_specs(cfg: &ExperimentConfig, model: &dyn EnergyModel, single: bool) -> Result<Vec<CurveSpec>> {
    let schedule = |eta: f64| -> Result<Schedule> {
        Ok(match cfg.schedule {
            ScheduleKind::Fixed => Schedule::Fixed { eta },
            ScheduleKind::Decaying => {
                let c = model.constants(0.0, 1.0)?;
                Schedule::Decaying {
                    l: c.l_smooth,
                    m: c.m_convex,
                }
            }
        })
    };
    let base = RunConfig {
        local_steps: cfg.k_local,
        tau: cfg.tau,
        rho: cfg.rho,
        schedule: schedule(cfg.eta)?,
        scheme: cfg.scheme,
        subsample: cfg.subsample,
        horizon: cfg.horizon,
        master_seed: cfg.seed,
        init: None,
    };
    let one = |label: String, run: RunConfig, alpha: f64| CurveSpec { label, run, alpha };
    let sweep = if single { &Sweep::None } else { &cfg.sweep };
    let specs = match sweep {
        Sweep::None => vec![one("run".to_string(), base, cfg.alpha)],
        Sweep::LocalSteps(ks) => {
            let (l, m) = if cfg.eta_rule == EtaRule::Fixed {
                (1.0, 1.0)
            } else {
                let c = model.constants(0.0, 1.0)?;
                (c.l_smooth, c.m_convex)
            };
            ks.iter()
                .map(|&k| {
                    let eta = eta_for_local_steps(cfg.eta_rule, cfg.eta, k, l, m);
                    let horizon = (cfg.horizon as f64 * cfg.eta / eta).round() as usize;
                    let run = RunConfig {
                        local_steps: k,
                        schedule: schedule(eta)?,
                        horizon: round_up(horizon.max(1), k),
                        ..base.clone()
                    };
                    Ok(one(k.to_string(), run, cfg.alpha))
                })
                .collect::<Result<_>>()?
        }
        Sweep::Alpha(v) => v.iter().map(|&a| one(a.to_string(), base.clone(), a)).collect(),
        Sweep::Rho(v) => v
            .iter()
            .map(|&r| one(r.to_string(), RunConfig { rho: r, ..base.clone() }, cfg.alpha))
            .collect(),
        Sweep::Eta(v) => v
            .iter()
            .map(|&e| Ok(one(e.to_string(), RunConfig { schedule: schedule(e)?, ..base.clone() }, cfg.alpha)))
            .collect::<Result<_>>()?,
        Sweep::Scheme(v) => v
            .iter()
            .map(|s| one(scheme_label(s), RunConfig { scheme: *s, ..base.clone() }, cfg.alpha))
            .collect(),
    };
    Ok(specs)
}

/// Per-round measurements of one curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveResult {
    pub label: String,
    pub local_steps: usize,
    /// `(metric, round, value)` in output order.
    pub rows: Vec<(String, usize, f64)>,
    /// First round at which the smoothed W2 is at most `ε`.
    pub t_eps: Option<usize>,
    /// Set when the chain diverged: the error message.
    pub truncated: Option<String>,
}

/// W2 between the empirical replication summary and `target` at every round.
pub fn w2_curve(rep: &Replicated, target: &GaussianSummary) -> Result<Vec<f64>> {
    (0..rep.n_rounds())
        .map(|r| w2_gaussian(&empirical_summary(&rep.round_samples(r))?, target))
        .collect()
}

/// Centred moving average; the window shrinks at the ends.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// First index whose smoothed value is at most `epsilon`.
pub fn first_crossing(values: &[f64], epsilon: f64) -> Option<usize> {
    smooth(values, SMOOTHING_WINDOW)
        .iter()
        .position(|&v| v <= epsilon)
}

/// Mean of the second half of a curve.
pub fn plateau(values: &[f64]) -> f64 {
    let half = values.len() / 2;
    let tail = &values[half..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn logistic_rows(
    rep: &Replicated,
    model: &LogisticModel,
    built: &Built,
    cfg: &ExperimentConfig,
) -> Result<Vec<(String, usize, f64)>> {
    let mut avg = PredictiveAverager::new(built.test_y.clone());
    let mut rows = Vec::new();
    for r in 0..rep.n_rounds() {
        if r < cfg.warmup || r == 0 || r % cfg.collect_every != 0 {
            continue;
        }
        for t in &rep.trajectories {
            let theta = &t.rounds[r].theta;
            let probs: Vec<Vec<f64>> = built
                .test_x
                .iter()
                .map(|x| model.predict_proba(theta, x))
                .collect();
            avg.push(&probs)?;
        }
        let m = classification_metrics(&avg.records(), ECE_BINS)?;
        rows.push(("accuracy".to_string(), r, m.accuracy));
        rows.push(("brier".to_string(), r, m.brier));
        rows.push(("ece".to_string(), r, m.ece));
    }
    Ok(rows)
}

/// Run one curve; the replications are returned unless the chain diverged.
pub fn run_curve(
    cfg: &ExperimentConfig,
    spec: &CurveSpec,
    built: &Built,
) -> Result<(CurveResult, Option<Replicated>)> {
    let mut result = CurveResult {
        label: spec.label.clone(),
        local_steps: spec.run.local_steps,
        rows: Vec::new(),
        t_eps: None,
        truncated: None,
    };
    let rep = match run_replicated(&spec.run, built.model.as_energy(), cfg.replications) {
        Ok(rep) => rep,
        Err(e) if e.is_numeric() => {
            log::warn!("curve {} truncated: {e}", spec.label);
            result.truncated = Some(e.to_string());
            return Ok((result, None));
        }
        Err(e) => return Err(e),
    };
    match &built.model {
        Model::Gaussian(g) => {
            let w2 = w2_curve(&rep, &g.target_posterior())?;
            result.t_eps = first_crossing(&w2, cfg.epsilon);
            result.rows = w2.iter().enumerate().map(|(r, v)| ("w2".to_string(), r, *v)).collect();
        }
        Model::Logistic(l) => {
            result.rows = logistic_rows(&rep, l, built, cfg)?;
        }
    }
    Ok((result, Some(rep)))
}

/// Run every curve of the experiment. Diverged curves are kept with their
/// error and no measurements.
pub fn run_curves(cfg: &ExperimentConfig, single: bool) -> Result<Vec<CurveResult>> {
    let base = build_model(cfg, cfg.alpha)?;
    let specs = curve_specs(cfg, base.model.as_energy(), single)?;
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let built = if spec.alpha == cfg.alpha {
            base.clone()
        } else {
            build_model(cfg, spec.alpha)?
        };
        out.push(run_curve(cfg, &spec, &built)?.0);
    }
    Ok(out)
}

fn fmt_value(v: f64) -> String {
    format!("{v:.10e}")
}

/// Long-format `sweep_value,round,metric,value` CSV. A diverged curve
/// contributes one `truncated` row.
pub fn curves_csv(curves: &[CurveResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sweep_value", "round", "metric", "value"])?;
    for c in curves {
        if c.truncated.is_some() {
            w.write_record([c.label.as_str(), "0", "truncated", "NaN"])?;
        }
        for (metric, round, value) in &c.rows {
            w.write_record([c.label.clone(), round.to_string(), metric.clone(), fmt_value(*value)])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `sweep_value,local_steps,t_eps_rounds,t_eps_iterations`; `inf` when the
/// threshold was never reached.
pub fn t_eps_csv(curves: &[CurveResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sweep_value", "local_steps", "t_eps_rounds", "t_eps_iterations"])?;
    for c in curves {
        let (r, i) = match c.t_eps {
            Some(r) => (r.to_string(), (r * c.local_steps).to_string()),
            None => ("inf".to_string(), "inf".to_string()),
        };
        w.write_record([c.label.clone(), c.local_steps.to_string(), r, i])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() || ch == '.' || ch == '-' { ch } else { '_' })
        .collect()
}

/// Write curve CSVs and charts into `dir`; returns the written paths.
pub fn write_curve_artifacts(
    dir: &Path,
    name: &str,
    cfg: &ExperimentConfig,
    curves: &[CurveResult],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let csv_text = curves_csv(curves)?;
    let csv_path = dir.join(format!("{name}.csv"));
    fs::write(&csv_path, &csv_text)?;
    written.push(csv_path);
    if curves.len() > 1 {
        for c in curves {
            let path = dir.join(format!("{name}_{}.csv", file_label(&c.label)));
            fs::write(&path, curves_csv(std::slice::from_ref(c))?)?;
            written.push(path);
        }
    }
    let charts: &[(&str, &str, bool)] = match cfg.model {
        ModelKind::Gaussian => &[("w2", "W2 to target", true)],
        ModelKind::Logistic => &[
            ("accuracy", "accuracy", false),
            ("brier", "Brier score", false),
            ("ece", "calibration error", false),
        ],
    };
    let axis = if cfg.sweep == Sweep::None { "run" } else { cfg.sweep.axis() };
    for (metric, label, log_y) in charts {
        let chart = chart_from_long_csv(&csv_text, metric, &format!("{label} by {axis}"), label, *log_y)?;
        let path = dir.join(format!("{name}_{metric}.svg"));
        fs::write(&path, chart.render())?;
        written.push(path);
    }
    if cfg.model == ModelKind::Gaussian {
        let path = dir.join(format!("{name}_t_eps.csv"));
        fs::write(&path, t_eps_csv(curves)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Bound inputs for the configured run on `model`, all clients started at 0.
pub fn bound_inputs(cfg: &ExperimentConfig, model: &dyn EnergyModel) -> Result<BoundInputs> {
    let theta_star = model.theta_star()?;
    let inits = vec![vec![0.0; model.dim()]; model.dataset().n_clients()];
    let c = model.constants(init_radius(&inits, &theta_star), cfg.subsample)?;
    Ok(BoundInputs {
        l_smooth: c.l_smooth,
        m_convex: c.m_convex,
        dim: model.dim(),
        init_d: c.init_d,
        gamma_het: c.gamma_het,
        sigma_sg: c.sigma_sg,
        tau: cfg.tau,
        rho: cfg.rho,
        min_weight: model.dataset().min_weight(),
        local_steps: cfg.k_local,
        n_clients: model.dataset().n_clients(),
        scheme: cfg.scheme,
        eta: if cfg.schedule == ScheduleKind::Fixed {
            cfg.eta
        } else {
            1.0 / (2.0 * c.l_smooth)
        },
    })
}

pub fn bound_kind(cfg: &ExperimentConfig) -> BoundKind {
    match (cfg.schedule, cfg.scheme) {
        (ScheduleKind::Decaying, _) => BoundKind::Decaying,
        (_, Scheme::Full) => BoundKind::FullFixed,
        _ => BoundKind::Partial,
    }
}

/// Evaluation points `0, T/(n−1), ..., T`, deduplicated.
pub fn bound_grid(horizon: usize, points: usize) -> Vec<usize> {
    let n = points.max(2);
    let mut ks: Vec<usize> = (0..n)
        .map(|i| ((horizon as f64) * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    ks.dedup();
    ks
}

pub fn dp_params(cfg: &ExperimentConfig, model: &dyn EnergyModel) -> DpParams {
    let n = model.dataset().n_clients();
    let (scheme, devices) = match cfg.scheme {
        Scheme::Full => (DpScheme::SchemeII, n),
        Scheme::SchemeI { s } => (DpScheme::SchemeI, s),
        Scheme::SchemeII { s } => (DpScheme::SchemeII, s),
    };
    DpParams {
        delta_l: cfg.delta_l,
        q: cfg.subsample,
        eta: cfg.eta,
        tau: cfg.tau,
        rho: cfg.rho,
        min_weight: model.dataset().min_weight(),
        local_steps: cfg.k_local,
        horizon: cfg.horizon,
        devices,
        n_clients: n,
        delta0: cfg.delta0,
        delta1: cfg.delta1,
        delta2: cfg.delta2,
        scheme,
    }
}

/// Privacy audit text: every accountant intermediate, then the budget search
/// result when both budgets are configured.
pub fn privacy_report(cfg: &ExperimentConfig, model: &dyn EnergyModel) -> Result<String> {
    let params = dp_params(cfg, model);
    let report = privacy::account_report(&params)?;
    let mut text = report.to_string();
    if let (Some(e), Some(d)) = (cfg.eps_budget, cfg.delta_budget) {
        match privacy::budget_search(e, d, &params) {
            Some((rho, s)) => {
                text.push_str(&format!("budget_search_rho={rho}\nbudget_search_s={s}\n"));
            }
            None => text.push_str("budget_search=none\n"),
        }
    }
    Ok(text)
}

/// Planner output as `key=value` lines.
pub fn plan_report(cfg: &ExperimentConfig, model: &dyn EnergyModel) -> Result<String> {
    let inputs = bound_inputs(cfg, model)?;
    let plan = theory::plan_steps(cfg.epsilon, &inputs)?;
    let k_opt = theory::optimal_local_steps(inputs.kappa())?;
    Ok(format!(
        "kappa={:.12e}\noptimal_k={k_opt}\nepsilon={:e}\nk_local={}\neta={:.12e}\nt_eps={}\nrounds={}\n",
        inputs.kappa(),
        cfg.epsilon,
        cfg.k_local,
        plan.eta,
        plan.iterations,
        plan.rounds
    ))
}
