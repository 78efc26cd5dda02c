//! Federated target distributions.
//!
//! A federation holds one point list per client with weights
//! `p_c = n_c / Σ n_i`. Client `c` owns the local energy
//! `f^c(θ) = ℓ^c(θ) / p_c` with `ℓ^c(θ) = Σ_i l(θ; x_{c,i})`, so that the global
//! energy is `f = Σ_c p_c f^c = Σ_c ℓ^c` and the sampling target is
//! `π ∝ exp(-f/τ)`.
//!
//! Two energies are provided:
//!
//! * [`GaussianModel`]: `l(θ; x) = ½ (θ-x)ᵀ Σ⁻¹ (θ-x)` (the log-normaliser is a
//!   constant and is dropped). The target is Gaussian in closed form.
//! * [`LogisticModel`]: multiclass softmax cross-entropy with a ridge term,
//!   `ℓ^c(θ) = Σ_i CE(θ; x_i, y_i) + p_c·(ridge/2)‖θ‖²`, so each `f^c` carries
//!   the full ridge and is `ridge`-strongly convex.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm, Matrix};
use crate::metrics::GaussianSummary;
use crate::rng::{derive_stream, ClientTag, CounterStream, Purpose};

/// Safety factor applied to the Monte Carlo estimate of the gradient noise.
pub const SIGMA_SAFETY: f64 = 1.5;
/// Number of probe points used to estimate the gradient-noise scale.
pub const SIGMA_PROBES: usize = 20;
/// Monte Carlo draws per probe point and client.
pub const SIGMA_DRAWS: usize = 400;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    clients: Vec<Vec<Vec<f64>>>,
    labels: Option<Vec<Vec<usize>>>,
    weights: Vec<f64>,
    dim: usize,
}

impl FederatedDataset {
    pub fn new(clients: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Self::build(clients, None)
    }

    pub fn with_labels(clients: Vec<Vec<Vec<f64>>>, labels: Vec<Vec<usize>>) -> Result<Self> {
        if labels.len() != clients.len()
            || labels.iter().zip(&clients).any(|(l, c)| l.len() != c.len())
        {
            return Err(Error::invalid("labels must match the client point lists"));
        }
        Self::build(clients, Some(labels))
    }

    fn build(clients: Vec<Vec<Vec<f64>>>, labels: Option<Vec<Vec<usize>>>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("federation needs at least one client"));
        }
        if let Some(c) = clients.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("client {c} holds no points")));
        }
        let dim = clients[0][0].len();
        if dim == 0 {
            return Err(Error::invalid("points must have dimension >= 1"));
        }
        for (c, pts) in clients.iter().enumerate() {
            if let Some(p) = pts.iter().find(|p| p.len() != dim) {
                return Err(Error::invalid(format!(
                    "client {c}: point of dimension {} (expected {dim})",
                    p.len()
                )));
            }
            if pts.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("data of client {c}")));
            }
        }
        let total: usize = clients.iter().map(Vec::len).sum();
        let weights = clients
            .iter()
            .map(|c| c.len() as f64 / total as f64)
            .collect();
        Ok(Self {
            clients,
            labels,
            weights,
            dim,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    pub fn total_points(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    pub fn points(&self, c: usize) -> &[Vec<f64>] {
        &self.clients[c]
    }

    pub fn labels(&self, c: usize) -> Option<&[usize]> {
        self.labels.as_ref().map(|l| l[c].as_slice())
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// All clients hold the same number of points (so the weights are equal).
    pub fn is_balanced(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|w| (w - w0).abs() <= WEIGHT_TOL)
    }

    /// CSV with header `client_id,x_1,..,x_d[,label]`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["client_id".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        for (c, pts) in self.clients.iter().enumerate() {
            for (i, p) in pts.iter().enumerate() {
                let mut rec = vec![c.to_string()];
                rec.extend(p.iter().map(|x| x.to_string()));
                if let Some(l) = &self.labels {
                    rec.push(l[c][i].to_string());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("client_id") {
            return Err(Error::invalid("dataset CSV must start with a client_id column"));
        }
        let has_label = header.iter().next_back() == Some("label");
        let dim = header.len() - 1 - usize::from(has_label);
        for (i, name) in header.iter().skip(1).take(dim).enumerate() {
            if name != format!("x_{}", i + 1) {
                return Err(Error::invalid(format!("unexpected column '{name}'")));
            }
        }
        let mut clients: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut labels: Vec<Vec<usize>> = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::invalid(format!("data row {}: bad {what}", row + 2));
            let c: usize = rec[0].trim().parse().map_err(|_| bad("client_id"))?;
            let x = (1..=dim)
                .map(|j| rec[j].trim().parse::<f64>().map_err(|_| bad("coordinate")))
                .collect::<Result<Vec<_>>>()?;
            if clients.len() <= c {
                clients.resize_with(c + 1, Vec::new);
                labels.resize_with(c + 1, Vec::new);
            }
            clients[c].push(x);
            if has_label {
                labels[c].push(rec[dim + 1].trim().parse().map_err(|_| bad("label"))?);
            }
        }
        if has_label {
            Self::with_labels(clients, labels)
        } else {
            Self::new(clients)
        }
    }
}

/// Regularity constants of a federated energy.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyConstants {
    pub l_smooth: f64,
    pub m_convex: f64,
    pub kappa: f64,
    pub theta_star: Vec<f64>,
    /// Heterogeneity `max_c ‖∇f^c(θ*)‖₂`.
    pub gamma_het: f64,
    /// Stochastic-gradient noise scale with `E‖∇f̃^c − ∇f^c‖² ≤ σ² d`.
    pub sigma_sg: f64,
    /// Initialisation constant with `‖θ₀^c − θ*‖² ≤ d D²`.
    pub init_d: f64,
}

/// A federated energy with per-client gradient oracles.
pub trait EnergyModel: Send + Sync {
    fn dataset(&self) -> &FederatedDataset;

    /// Dimension of the parameter θ (not necessarily that of the data).
    fn dim(&self) -> usize;

    fn tau(&self) -> f64;

    /// Global energy `f(θ) = Σ_c ℓ^c(θ)` up to an additive constant.
    fn energy(&self, theta: &[f64]) -> f64;

    /// Adds `∇_θ l(θ; x_{c,i})` to `out`.
    fn add_point_grad(&self, c: usize, i: usize, theta: &[f64], out: &mut [f64]);

    /// Gradient of the part of `f^c` that does not depend on the data. Zero by
    /// default.
    fn add_regularizer_grad(&self, _theta: &[f64], _out: &mut [f64]) {}

    /// Writes the exact `∇f^c(θ)` into `out`. The default sums point gradients.
    fn client_grad_into(&self, c: usize, theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let n_c = self.dataset().points(c).len();
        for i in 0..n_c {
            self.add_point_grad(c, i, theta, out);
        }
        let inv_p = 1.0 / self.dataset().weights()[c];
        out.iter_mut().for_each(|o| *o *= inv_p);
        self.add_regularizer_grad(theta, out);
    }

    /// Minibatch estimate of `∇f^c(θ)` from a uniform without-replacement
    /// subset of `max(1, ⌊q n_c⌋)` points, rescaled by `n_c / |S|` so that it
    /// is unbiased. `q = 1` returns the exact gradient.
    fn client_grad_stochastic_into(
        &self,
        c: usize,
        theta: &[f64],
        q: f64,
        rng: &mut CounterStream,
        out: &mut [f64],
    ) {
        let n_c = self.dataset().points(c).len();
        let size = minibatch_size(n_c, q);
        if size >= n_c {
            self.client_grad_into(c, theta, out);
            return;
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in rand::seq::index::sample(rng, n_c, size) {
            self.add_point_grad(c, i, theta, out);
        }
        let scale = n_c as f64 / (size as f64 * self.dataset().weights()[c]);
        out.iter_mut().for_each(|o| *o *= scale);
        self.add_regularizer_grad(theta, out);
    }

    /// Regularity constants. `theta0_radius` bounds `‖θ₀^c − θ*‖` over clients
    /// and `q` is the subsample ratio the chain will use.
    fn constants(&self, theta0_radius: f64, q: f64) -> Result<EnergyConstants>;

    /// Minimiser of `f`.
    fn theta_star(&self) -> Result<Vec<f64>>;
}

/// Minibatch size for subsample ratio `q`: `⌊q n_c⌋`, at least 1.
pub fn minibatch_size(n_c: usize, q: f64) -> usize {
    ((q * n_c as f64 + 1e-9).floor() as usize).clamp(1, n_c)
}

fn check_client(model: &dyn EnergyModel, c: usize) -> Result<()> {
    let n = model.dataset().n_clients();
    if c >= n {
        return Err(Error::invalid(format!("client index {c} out of range (N = {n})")));
    }
    Ok(())
}

fn check_theta(model: &dyn EnergyModel, theta: &[f64]) -> Result<()> {
    if theta.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: theta.len(),
        });
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("theta".into()));
    }
    Ok(())
}

/// Exact client gradient `∇f^c(θ) = ∇ℓ^c(θ) / p_c`.
pub fn client_grad(model: &dyn EnergyModel, c: usize, theta: &[f64]) -> Result<Vec<f64>> {
    check_client(model, c)?;
    check_theta(model, theta)?;
    let mut out = vec![0.0; model.dim()];
    model.client_grad_into(c, theta, &mut out);
    Ok(out)
}

/// Unbiased minibatch client gradient with subsample ratio `q ∈ (0, 1]`.
pub fn client_grad_stochastic(
    model: &dyn EnergyModel,
    c: usize,
    theta: &[f64],
    q: f64,
    rng: &mut CounterStream,
) -> Result<Vec<f64>> {
    check_client(model, c)?;
    check_theta(model, theta)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("subsample ratio {q} not in (0, 1]")));
    }
    let mut out = vec![0.0; model.dim()];
    model.client_grad_stochastic_into(c, theta, q, rng, &mut out);
    Ok(out)
}

/// Gradient of the global energy, `Σ_c p_c ∇f^c(θ)`.
pub fn total_grad(model: &dyn EnergyModel, theta: &[f64]) -> Vec<f64> {
    let d = model.dim();
    let mut total = vec![0.0; d];
    let mut g = vec![0.0; d];
    for (c, p) in model.dataset().weights().iter().enumerate() {
        model.client_grad_into(c, theta, &mut g);
        linalg::axpy(*p, &g, &mut total);
    }
    total
}

/// Largest `‖θ₀^c − θ*‖` over the given client initialisations.
pub fn init_radius(inits: &[Vec<f64>], theta_star: &[f64]) -> f64 {
    inits
        .iter()
        .map(|t| {
            t.iter()
                .zip(theta_star)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Heterogeneity `max_c ‖∇f^c(θ*)‖`.
fn gamma_het(model: &dyn EnergyModel, theta_star: &[f64]) -> f64 {
    let mut g = vec![0.0; model.dim()];
    (0..model.dataset().n_clients())
        .map(|c| {
            model.client_grad_into(c, theta_star, &mut g);
            norm(&g)
        })
        .fold(0.0, f64::max)
}

/// Monte Carlo sup over probe points and clients of `E‖∇f̃^c − ∇f^c‖² / d`,
/// times [`SIGMA_SAFETY`], square-rooted.
fn estimate_sigma_sg(
    model: &dyn EnergyModel,
    theta_star: &[f64],
    probe_scale: f64,
    q: f64,
) -> f64 {
    let data = model.dataset();
    if (0..data.n_clients()).all(|c| minibatch_size(data.points(c).len(), q) == data.points(c).len())
    {
        return 0.0;
    }
    let d = model.dim();
    let mut exact = vec![0.0; d];
    let mut noisy = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for j in 0..SIGMA_PROBES {
        let mut probe_rng = derive_stream(0x5167, j as u64, 0, ClientTag::Shared, Purpose::Probe);
        let probe: Vec<f64> = theta_star
            .iter()
            .map(|t| t + probe_scale * probe_rng.normal())
            .collect();
        for c in 0..data.n_clients() {
            model.client_grad_into(c, &probe, &mut exact);
            let mut rng = derive_stream(0x5167, j as u64, 1, ClientTag::Client(c), Purpose::Minibatch);
            let mut acc = 0.0;
            for _ in 0..SIGMA_DRAWS {
                model.client_grad_stochastic_into(c, &probe, q, &mut rng, &mut noisy);
                acc += noisy
                    .iter()
                    .zip(&exact)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            worst = worst.max(acc / (SIGMA_DRAWS as f64 * d as f64));
        }
    }
    (SIGMA_SAFETY * worst).sqrt()
}

// ---------------------------------------------------------------------------
// Gaussian location model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GaussianModel {
    data: FederatedDataset,
    sigma: Matrix,
    precision: Matrix,
    precision_eig: (f64, f64),
    client_sums: Vec<Vec<f64>>,
    tau: f64,
}

impl GaussianModel {
    pub fn new(data: FederatedDataset, sigma: Matrix, tau: f64) -> Result<Self> {
        if data.has_labels() {
            return Err(Error::invalid("Gaussian model takes unlabelled points"));
        }
        if sigma.rows() != data.dim() || !sigma.is_square() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                got: sigma.rows(),
            });
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
        }
        let eig = linalg::check_spd(&sigma, 1e-12)?;
        let precision = eig.map(|x| 1.0 / x);
        // eigenvalues of Σ⁻¹ are reciprocals of those of Σ
        let precision_eig = (1.0 / eig.max(), 1.0 / eig.min());
        let client_sums = (0..data.n_clients())
            .map(|c| {
                let mut s = vec![0.0; data.dim()];
                for p in data.points(c) {
                    linalg::axpy(1.0, p, &mut s);
                }
                s
            })
            .collect();
        Ok(Self {
            data,
            sigma,
            precision,
            precision_eig,
            client_sums,
            tau,
        })
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    /// Sample mean of all points, the minimiser of `f`.
    pub fn data_mean(&self) -> Vec<f64> {
        let n = self.data.total_points() as f64;
        let mut u = vec![0.0; self.data.dim()];
        for s in &self.client_sums {
            linalg::axpy(1.0 / n, s, &mut u);
        }
        u
    }

    /// Closed-form target `N(u, (τ/n) Σ)`.
    pub fn target_posterior(&self) -> GaussianSummary {
        let n = self.data.total_points() as f64;
        GaussianSummary::new_unchecked(self.data_mean(), self.sigma.scale(self.tau / n))
    }
}

impl EnergyModel for GaussianModel {
    fn dataset(&self) -> &FederatedDataset {
        &self.data
    }

    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn energy(&self, theta: &[f64]) -> f64 {
        let mut e = 0.0;
        let mut diff = vec![0.0; theta.len()];
        for c in 0..self.data.n_clients() {
            for x in self.data.points(c) {
                for ((d, t), xi) in diff.iter_mut().zip(theta).zip(x) {
                    *d = t - xi;
                }
                e += 0.5 * dot(&diff, &self.precision.mat_vec(&diff));
            }
        }
        e
    }

    fn add_point_grad(&self, c: usize, i: usize, theta: &[f64], out: &mut [f64]) {
        let x = &self.data.points(c)[i];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.precision.row(r);
            *o += row
                .iter()
                .zip(theta.iter().zip(x))
                .map(|(p, (t, xi))| p * (t - xi))
                .sum::<f64>();
        }
    }

    // (1/p_c) Σ⁻¹ (n_c θ − Σ_i x_i), from sufficient statistics.
    fn client_grad_into(&self, c: usize, theta: &[f64], out: &mut [f64]) {
        let n_c = self.data.points(c).len() as f64;
        let inv_p = 1.0 / self.data.weights()[c];
        let sums = &self.client_sums[c];
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.precision.row(r);
            *o = inv_p
                * row
                    .iter()
                    .zip(theta.iter().zip(sums))
                    .map(|(p, (t, s))| p * (n_c * t - s))
                    .sum::<f64>();
        }
    }

    fn constants(&self, theta0_radius: f64, q: f64) -> Result<EnergyConstants> {
        let n = self.data.total_points() as f64;
        let (lo, hi) = self.precision_eig;
        let l_smooth = n * hi;
        let m_convex = n * lo;
        let theta_star = self.data_mean();
        let d = self.dim() as f64;
        let gamma = gamma_het(self, &theta_star);
        let sigma_sg = estimate_sigma_sg(self, &theta_star, (d * self.tau / m_convex).sqrt(), q);
        Ok(EnergyConstants {
            l_smooth,
            m_convex,
            kappa: l_smooth / m_convex,
            theta_star,
            gamma_het: gamma,
            sigma_sg,
            init_d: theta0_radius / d.sqrt(),
        })
    }

    fn theta_star(&self) -> Result<Vec<f64>> {
        Ok(self.data_mean())
    }
}

/// Draw a Gaussian federation: client centres from `N(0, α I_d)` and
/// `points_per_client[c]` points from `N(centre_c, Σ)` for each client.
pub fn gen_gaussian_federation(
    points_per_client: &[usize],
    alpha: f64,
    sigma: &Matrix,
    tau: f64,
    seed: u64,
) -> Result<GaussianModel> {
    if points_per_client.is_empty() || points_per_client.contains(&0) {
        return Err(Error::invalid("need >= 1 client and >= 1 point per client"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let eig = linalg::check_spd(sigma, 1e-12)?;
    let root = eig.map(f64::sqrt);
    let d = sigma.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = alpha.sqrt();
    let mut clients = Vec::with_capacity(points_per_client.len());
    for &n_c in points_per_client {
        let centre: Vec<f64> = (0..d)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let pts = (0..n_c)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mut x = root.mat_vec(&z);
                linalg::axpy(1.0, &centre, &mut x);
                x
            })
            .collect();
        clients.push(pts);
    }
    GaussianModel::new(FederatedDataset::new(clients)?, sigma.clone(), tau)
}

// ---------------------------------------------------------------------------
// Multiclass logistic regression
// ---------------------------------------------------------------------------

pub const NEWTON_MAX_ITERS: usize = 200;
pub const NEWTON_TOL: f64 = 1e-10;

/// θ is laid out class-major: weights of class k are `θ[k·p .. (k+1)·p]`.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    data: FederatedDataset,
    n_classes: usize,
    ridge: f64,
    tau: f64,
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

impl LogisticModel {
    pub fn new(data: FederatedDataset, n_classes: usize, ridge: f64, tau: f64) -> Result<Self> {
        if !data.has_labels() {
            return Err(Error::invalid("logistic model needs labelled points"));
        }
        if n_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        for c in 0..data.n_clients() {
            if let Some(y) = data.labels(c).unwrap().iter().find(|&&y| y >= n_classes) {
                return Err(Error::invalid(format!("label {y} >= n_classes {n_classes}")));
            }
        }
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::invalid(format!(
                "ridge must be > 0 for strong convexity, got {ridge}"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Self {
            data,
            n_classes,
            ridge,
            tau,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.data.dim()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Class probabilities `softmax(W x)`.
    pub fn predict_proba(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let p = self.n_features();
        let mut z: Vec<f64> = (0..self.n_classes)
            .map(|k| dot(&theta[k * p..(k + 1) * p], x))
            .collect();
        softmax_in_place(&mut z);
        z
    }

    fn hessian(&self, theta: &[f64]) -> Matrix {
        let p = self.n_features();
        let k = self.n_classes;
        let dim = k * p;
        let mut h = Matrix::identity(dim).scale(self.ridge);
        for c in 0..self.data.n_clients() {
            for x in self.data.points(c) {
                let s = self.predict_proba(theta, x);
                for a in 0..k {
                    for b in 0..k {
                        let w = if a == b { s[a] * (1.0 - s[a]) } else { -s[a] * s[b] };
                        if w == 0.0 {
                            continue;
                        }
                        for i in 0..p {
                            for j in 0..p {
                                h[(a * p + i, b * p + j)] += w * x[i] * x[j];
                            }
                        }
                    }
                }
            }
        }
        h
    }
}

impl EnergyModel for LogisticModel {
    fn dataset(&self) -> &FederatedDataset {
        &self.data
    }

    fn dim(&self) -> usize {
        self.n_classes * self.data.dim()
    }

    fn tau(&self) -> f64 {
        self.tau
    }

    fn energy(&self, theta: &[f64]) -> f64 {
        let p = self.n_features();
        let mut e = 0.5 * self.ridge * dot(theta, theta);
        for c in 0..self.data.n_clients() {
            let labels = self.data.labels(c).unwrap();
            for (x, &y) in self.data.points(c).iter().zip(labels) {
                let z: Vec<f64> = (0..self.n_classes)
                    .map(|k| dot(&theta[k * p..(k + 1) * p], x))
                    .collect();
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                e += lse - z[y];
            }
        }
        e
    }

    fn add_point_grad(&self, c: usize, i: usize, theta: &[f64], out: &mut [f64]) {
        let p = self.n_features();
        let x = &self.data.points(c)[i];
        let y = self.data.labels(c).unwrap()[i];
        let s = self.predict_proba(theta, x);
        for (k, sk) in s.iter().enumerate() {
            let r = sk - if k == y { 1.0 } else { 0.0 };
            linalg::axpy(r, x, &mut out[k * p..(k + 1) * p]);
        }
    }

    fn add_regularizer_grad(&self, theta: &[f64], out: &mut [f64]) {
        linalg::axpy(self.ridge, theta, out);
    }

    /// `L = max_c λmax(X_cᵀX_c) / (2 p_c) + ridge` from the bound
    /// `diag(s) − s sᵀ ⪯ ½ I` on the softmax Hessian, and `m = ridge`.
    fn constants(&self, theta0_radius: f64, q: f64) -> Result<EnergyConstants> {
        let p = self.n_features();
        let mut l_data: f64 = 0.0;
        for c in 0..self.data.n_clients() {
            let mut gram = Matrix::zeros(p, p);
            for x in self.data.points(c) {
                for i in 0..p {
                    for j in 0..p {
                        gram[(i, j)] += x[i] * x[j];
                    }
                }
            }
            let top = linalg::sym_eigen(&gram)?.max();
            l_data = l_data.max(top / (2.0 * self.data.weights()[c]));
        }
        let l_smooth = l_data + self.ridge;
        let m_convex = self.ridge;
        let theta_star = self.theta_star()?;
        let d = self.dim() as f64;
        let gamma = gamma_het(self, &theta_star);
        let sigma_sg = estimate_sigma_sg(self, &theta_star, (d * self.tau / l_smooth).sqrt(), q);
        Ok(EnergyConstants {
            l_smooth,
            m_convex,
            kappa: l_smooth / m_convex,
            theta_star,
            gamma_het: gamma,
            sigma_sg,
            init_d: theta0_radius / d.sqrt(),
        })
    }

    /// Damped Newton with backtracking on `f`.
    fn theta_star(&self) -> Result<Vec<f64>> {
        let mut theta = vec![0.0; self.dim()];
        let mut f_cur = self.energy(&theta);
        for _ in 0..NEWTON_MAX_ITERS {
            let g = total_grad(self, &theta);
            if norm(&g) < NEWTON_TOL {
                return Ok(theta);
            }
            let step = linalg::solve_spd(&self.hessian(&theta), &g)?;
            let slope = dot(&g, &step);
            // Below the energy's resolution the Armijo test is noise; the full
            // step is then inside the quadratic-convergence region.
            if slope <= 1e-10 * f_cur.abs().max(1.0) {
                theta.iter_mut().zip(&step).for_each(|(a, s)| *a -= s);
                f_cur = self.energy(&theta);
                continue;
            }
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
                let f_new = self.energy(&cand);
                if f_new <= f_cur - 1e-4 * t * slope || t < 1e-12 {
                    theta = cand;
                    f_cur = f_new;
                    break;
                }
                t *= 0.5;
            }
        }
        let g = total_grad(self, &theta);
        if norm(&g) < NEWTON_TOL {
            return Ok(theta);
        }
        Err(Error::NoConvergence(format!(
            "Newton solve after {NEWTON_MAX_ITERS} iterations (|grad| = {:e})",
            norm(&g)
        )))
    }
}

/// Synthetic multiclass data. Class means are shared across clients, and each
/// client adds its own offset drawn from `N(0, α I)`, which controls how
/// non-i.i.d. the federation is. A constant 1 is appended as bias feature.
#[derive(Debug, Clone)]
pub struct LogisticTask {
    pub train: FederatedDataset,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<usize>,
}

pub fn gen_logistic_task(
    points_per_client: &[usize],
    n_features: usize,
    n_classes: usize,
    alpha: f64,
    test_points: usize,
    seed: u64,
) -> Result<LogisticTask> {
    if points_per_client.is_empty() || points_per_client.contains(&0) {
        return Err(Error::invalid("need >= 1 client and >= 1 point per client"));
    }
    if n_features == 0 || n_classes < 2 {
        return Err(Error::invalid("need n_features >= 1 and n_classes >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..n_features).map(|_| 1.5 * normal()).collect())
        .collect();
    let sd = alpha.max(0.0).sqrt();
    let draw = |offset: &[f64], label: usize, normal: &mut dyn FnMut() -> f64| {
        let mut x: Vec<f64> = means[label]
            .iter()
            .zip(offset)
            .map(|(m, o)| m + o + normal())
            .collect();
        x.push(1.0);
        x
    };
    let mut clients = Vec::new();
    let mut labels = Vec::new();
    let mut label_seq = 0usize;
    for &n_c in points_per_client {
        let offset: Vec<f64> = (0..n_features).map(|_| sd * normal()).collect();
        let mut pts = Vec::with_capacity(n_c);
        let mut ys = Vec::with_capacity(n_c);
        for _ in 0..n_c {
            let y = label_seq % n_classes;
            label_seq += 1;
            pts.push(draw(&offset, y, &mut normal));
            ys.push(y);
        }
        clients.push(pts);
        labels.push(ys);
    }
    let zero = vec![0.0; n_features];
    let mut test_x = Vec::with_capacity(test_points);
    let mut test_y = Vec::with_capacity(test_points);
    for i in 0..test_points {
        let y = i % n_classes;
        test_x.push(draw(&zero, y, &mut normal));
        test_y.push(y);
    }
    Ok(LogisticTask {
        train: FederatedDataset::with_labels(clients, labels)?,
        test_x,
        test_y,
    })
}

/// Either energy behind one handle, for the front end.
#[derive(Debug, Clone)]
pub enum Model {
    Gaussian(GaussianModel),
    Logistic(LogisticModel),
}

impl Model {
    pub fn as_energy(&self) -> &dyn EnergyModel {
        match self {
            Model::Gaussian(g) => g,
            Model::Logistic(l) => l,
        }
    }

    /// Closed-form target posterior, Gaussian model only.
    pub fn target_posterior(&self) -> Result<GaussianSummary> {
        match self {
            Model::Gaussian(g) => Ok(g.target_posterior()),
            Model::Logistic(_) => Err(Error::Unsupported(
                "target_posterior needs the Gaussian model".into(),
            )),
        }
    }
}
