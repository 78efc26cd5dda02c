//! Python bindings for the `fald` crate.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fald::config::parse_config;
use fald::engine::{run_replicated, RunConfig, Schedule, Scheme};
use fald::experiment;
use fald::linalg::Matrix;
use fald::metrics::{empirical_summary, w2_gaussian as w2_core, GaussianSummary};
use fald::model::{gen_gaussian_federation, EnergyModel, GaussianModel};
use fald::privacy::{self, DpParams, DpScheme};
use fald::theory;

fn py_err(e: fald::Error) -> PyErr {
    if e.is_numeric() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn parse_scheme(name: &str, devices: usize) -> PyResult<Scheme> {
    match name {
        "full" => Ok(Scheme::Full),
        "scheme1" => Ok(Scheme::SchemeI { s: devices }),
        "scheme2" => Ok(Scheme::SchemeII { s: devices }),
        other => Err(PyValueError::new_err(format!(
            "unknown scheme `{other}` (expected full, scheme1 or scheme2)"
        ))),
    }
}

/// Federated Gaussian-mean target with a shared covariance.
#[pyclass(frozen)]
struct GaussianFederation {
    inner: GaussianModel,
}

#[pymethods]
impl GaussianFederation {
    #[new]
    #[pyo3(signature = (points_per_client, alpha, sigma, tau = 1.0, seed = 0))]
    fn new(points_per_client: Vec<usize>, alpha: f64, sigma: Vec<Vec<f64>>, tau: f64, seed: u64) -> PyResult<Self> {
        let inner = gen_gaussian_federation(&points_per_client, alpha, &matrix(sigma)?, tau, seed)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_clients(&self) -> usize {
        self.inner.dataset().n_clients()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.dataset().weights().to_vec()
    }

    /// Mean and covariance of the exact posterior.
    fn target(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let t = self.inner.target_posterior();
        (t.mean().to_vec(), rows(t.cov()))
    }

    /// `(L, m, kappa, gamma, sigma)` with every client started at the origin.
    fn constants(&self) -> PyResult<(f64, f64, f64, f64, f64)> {
        let star = self.inner.theta_star().map_err(py_err)?;
        let radius = star.iter().map(|x| x * x).sum::<f64>().sqrt();
        let c = self.inner.constants(radius, 1.0).map_err(py_err)?;
        Ok((c.l_smooth, c.m_convex, c.kappa, c.gamma_het, c.sigma_sg))
    }

    /// Run `replications` chains and return the per-round W2 to the target.
    #[pyo3(signature = (local_steps, eta, horizon, replications, seed = 0, rho = 0.0, scheme = "full", devices = 0, subsample = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn w2_curve(
        &self,
        py: Python<'_>,
        local_steps: usize,
        eta: f64,
        horizon: usize,
        replications: usize,
        seed: u64,
        rho: f64,
        scheme: &str,
        devices: usize,
        subsample: f64,
    ) -> PyResult<Vec<f64>> {
        let config = RunConfig {
            rho,
            scheme: parse_scheme(scheme, devices)?,
            subsample,
            schedule: Schedule::Fixed { eta },
            ..RunConfig::new(local_steps, eta, horizon, seed)
        };
        py.detach(|| {
            let rep = run_replicated(&config, &self.inner, replications)?;
            experiment::w2_curve(&rep, &self.inner.target_posterior())
        })
        .map_err(py_err)
    }
}

/// Closed-form W2 between two Gaussians.
#[pyfunction]
fn w2_gaussian(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = GaussianSummary::new(mean_a, matrix(cov_a)?).map_err(py_err)?;
    let b = GaussianSummary::new(mean_b, matrix(cov_b)?).map_err(py_err)?;
    w2_core(&a, &b).map_err(py_err)
}

/// W2 between the sample Gaussian fit of `samples` and a target Gaussian.
#[pyfunction]
fn w2_to_samples(samples: Vec<Vec<f64>>, mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<f64> {
    let fit = empirical_summary(&samples).map_err(py_err)?;
    let target = GaussianSummary::new(mean, matrix(cov)?).map_err(py_err)?;
    w2_core(&fit, &target).map_err(py_err)
}

/// `argmin_K K + kappa/K`.
#[pyfunction]
fn optimal_local_steps(kappa: f64) -> PyResult<usize> {
    theory::optimal_local_steps(kappa).map_err(py_err)
}

/// Total `(epsilon, delta)` of a private run.
#[pyfunction]
#[pyo3(signature = (eta, horizon, local_steps, devices, n_clients, q = 1.0, rho = 0.0, scheme = "scheme2", delta_l = 1.0, tau = 1.0, min_weight = None, delta0 = 1e-5, delta1 = 1e-6, delta2 = 1e-6))]
#[allow(clippy::too_many_arguments)]
fn dp_account(
    eta: f64,
    horizon: usize,
    local_steps: usize,
    devices: usize,
    n_clients: usize,
    q: f64,
    rho: f64,
    scheme: &str,
    delta_l: f64,
    tau: f64,
    min_weight: Option<f64>,
    delta0: f64,
    delta1: f64,
    delta2: f64,
) -> PyResult<(f64, f64)> {
    let scheme = match scheme {
        "scheme1" => DpScheme::SchemeI,
        "scheme2" => DpScheme::SchemeII,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown scheme `{other}` (expected scheme1 or scheme2)"
            )))
        }
    };
    let params = DpParams {
        delta_l,
        q,
        eta,
        tau,
        rho,
        min_weight: min_weight.unwrap_or(1.0 / n_clients.max(1) as f64),
        local_steps,
        horizon,
        devices,
        n_clients,
        delta0,
        delta1,
        delta2,
        scheme,
    };
    let b = privacy::account(&params).map_err(py_err)?;
    Ok((b.epsilon, b.delta))
}

/// Run the experiment in a configuration text and return the long-format CSV.
#[pyfunction]
fn sweep_csv(py: Python<'_>, config: &str) -> PyResult<String> {
    let cfg = parse_config(config).map_err(py_err)?;
    py.detach(|| experiment::run_curves(&cfg, false).and_then(|c| experiment::curves_csv(&c)))
        .map_err(py_err)
}

#[pymodule]
fn fald_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<GaussianFederation>()?;
    m.add_function(wrap_pyfunction!(w2_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(w2_to_samples, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_local_steps, m)?)?;
    m.add_function(wrap_pyfunction!(dp_account, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_csv, m)?)?;
    Ok(())
}
