//! Shared oracle machinery for the integration suites.
//!
//! Everything here re-derives library quantities through a second route:
//! dense linear algebra on `nalgebra` types, Gauss-Hermite quadrature with
//! nodes from an eigen-decomposition, or plain Monte Carlo over the prior.
//! None of it calls back into the library's own factorizations or tape;
//! that independence is what makes these oracles worth trusting.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pacmeta::env::{Dataset, TaskEnvironment};
use pacmeta::gp::GpModel;
use pacmeta::rng::Stream;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

/// Gauss-Hermite nodes and weights for integrals against exp(-t^2) dt,
/// via the Jacobi matrix (Golub-Welsch): off-diagonals sqrt(k/2), weights
/// sqrt(pi) times the squared first eigenvector component.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Integral of `g` against the N(mean, var) density by Gauss-Hermite.
pub fn gauss_expectation<F: FnMut(f64) -> f64>(
    mut g: F,
    mean: f64,
    var: f64,
    nodes: &(Vec<f64>, Vec<f64>),
) -> f64 {
    let (ts, ws) = nodes;
    let scale = (2.0 * var).sqrt();
    let mut s = 0.0;
    for (t, w) in ts.iter().zip(ws) {
        s += w * g(mean + scale * t);
    }
    s / PI.sqrt()
}

/// The library's neural kernel, recomputed from raw feature vectors.
pub fn neural_kernel(a: &[f64], b: &[f64]) -> f64 {
    let q: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    0.5 * (-q).exp()
}

/// Prior mean and feature vectors of a [`GpModel`] at every row of `d`.
/// Theta's layout (mean-net weights, then feature-net weights) is part of
/// the model's documented contract.
pub fn gp_maps(model: &GpModel, theta: &[f64], d: &Dataset) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (tm, tf) = theta.split_at(model.mean.param_count());
    let means = (0..d.len())
        .map(|i| model.mean.forward_val(tm, d.x_row(i))[0])
        .collect();
    let feats = (0..d.len())
        .map(|i| model.feat.forward_val(tf, d.x_row(i)))
        .collect();
    (means, feats)
}

/// Dense GP posterior: mu and full joint covariance of the regression with
/// noise variance m'/(2 alpha), solved with nalgebra's Cholesky.
pub struct DenseGp {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn dense_gp_regression(
    model: &GpModel,
    theta: &[f64],
    train: &Dataset,
    alpha: f64,
    query: &Dataset,
) -> DenseGp {
    let (mu_t, phi_t) = gp_maps(model, theta, train);
    let (mu_q, phi_q) = gp_maps(model, theta, query);
    let mp = train.len();
    let q = query.len();
    let kq = DMatrix::from_fn(q, q, |s, t| neural_kernel(&phi_q[s], &phi_q[t]));
    if mp == 0 {
        return DenseGp {
            mu: DVector::from_vec(mu_q),
            cov: kq,
        };
    }
    let noise = mp as f64 / (2.0 * alpha);
    let mut kt = DMatrix::from_fn(mp, mp, |i, j| neural_kernel(&phi_t[i], &phi_t[j]));
    for i in 0..mp {
        kt[(i, i)] += noise;
    }
    let chol = nalgebra::Cholesky::new(kt).expect("train kernel plus noise is SPD");
    let resid = DVector::from_fn(mp, |i, _| train.ys[i] - mu_t[i]);
    let kx = DMatrix::from_fn(q, mp, |t, i| neural_kernel(&phi_q[t], &phi_t[i]));
    let mu = DVector::from_vec(mu_q) + &kx * chol.solve(&resid);
    let cov = kq - &kx * chol.solve(&kx.transpose());
    DenseGp { mu, cov }
}

/// Numerically stable log of the mean of exp(vals).
pub fn log_mean_exp(vals: &[f64]) -> f64 {
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (vals.iter().map(|v| (v - hi).exp()).sum::<f64>() / vals.len() as f64).ln() + hi
}

/// Monte Carlo estimate of log Z_alpha(S, theta): draw the prior function
/// values f ~ N(m_theta(X), K) through a dense Cholesky factor and average
/// exp(-alpha Lhat(f)) with Lhat the mean squared residual.
pub fn mc_log_partition(
    model: &GpModel,
    theta: &[f64],
    s: &Dataset,
    alpha: f64,
    draws: usize,
    rng: &mut Stream,
) -> f64 {
    let (mu, phi) = gp_maps(model, theta, s);
    let m = s.len();
    assert!(m > 0 && draws > 0);
    let k = DMatrix::from_fn(m, m, |i, j| neural_kernel(&phi[i], &phi[j]));
    let chol = nalgebra::Cholesky::new(k).expect("prior kernel is SPD");
    let l = chol.l();
    let mut logs = Vec::with_capacity(draws);
    let mut z = DVector::zeros(m);
    for _ in 0..draws {
        for i in 0..m {
            z[i] = rng.sample::<f64, _>(StandardNormal);
        }
        let f = &l * &z;
        let mut sq = 0.0;
        for i in 0..m {
            let r = s.ys[i] - (mu[i] + f[i]);
            sq += r * r;
        }
        logs.push(-alpha * sq / m as f64);
    }
    log_mean_exp(&logs)
}

/// Gauss-Hermite estimate of log Z_alpha for a single observation: the
/// prior marginal at x is N(mu, k(x,x)) and the integrand is
/// exp(-alpha (y - f)^2).
pub fn gh_log_partition_m1(
    model: &GpModel,
    theta: &[f64],
    s: &Dataset,
    alpha: f64,
    nodes: &(Vec<f64>, Vec<f64>),
) -> f64 {
    assert_eq!(s.len(), 1);
    let (mu, phi) = gp_maps(model, theta, s);
    let var = neural_kernel(&phi[0], &phi[0]);
    let y = s.ys[0];
    gauss_expectation(|f| (-alpha * (y - f) * (y - f)).exp(), mu[0], var, nodes).ln()
}

/// Analytic dW1/dp for the diagonal quadratic loss
/// L(v) = 1/2 sum_j h_j (v_j - a_j)^2 under the prior N(p, sigma^2 I):
/// coordinate j is h_j (p_j - a_j) / (1 + beta h_j sigma^2).
pub fn quadratic_w1_grad(p: &[f64], a: &[f64], h: &[f64], beta: f64, sigma_sq: f64) -> Vec<f64> {
    p.iter()
        .zip(a)
        .zip(h)
        .map(|((pj, aj), hj)| hj * (pj - aj) / (1.0 + beta * hj * sigma_sq))
        .collect()
}

/// Quadrature expectation of the W1 estimator integrand under the exact
/// Gibbs posterior Q^beta(w) prop N(w|0, sigma^2) exp(-beta L(p+w)), per
/// coordinate (the diagonal quadratic factorizes). The rule runs against a
/// deliberately offset and widened reference Gaussian with the ratio
/// prior/reference carried explicitly, so the reference placement cannot
/// bias the value; it only keeps the nodes where the posterior mass is
/// when beta h sigma^2 makes the posterior much narrower than the prior.
pub fn gh_quadratic_w1_grad(
    p: &[f64],
    a: &[f64],
    h: &[f64],
    beta: f64,
    sigma_sq: f64,
    nodes: &(Vec<f64>, Vec<f64>),
) -> Vec<f64> {
    let mut g = Vec::with_capacity(p.len());
    for j in 0..p.len() {
        let kappa = 1.0 / sigma_sq + beta * h[j];
        let s_sq = 1.5 / kappa;
        let c = beta * h[j] * sigma_sq * (a[j] - p[j]) / (1.0 + beta * h[j] * sigma_sq)
            + 0.15 * s_sq.sqrt();
        let log_ratio = |w: f64| {
            -beta * 0.5 * h[j] * (p[j] + w - a[j]).powi(2) - 0.5 * w * w / sigma_sq
                + 0.5 * (w - c) * (w - c) / s_sq
        };
        // Gaussian normalizers of prior and reference cancel in num/den.
        let num = gauss_expectation(
            |w| h[j] * (p[j] + w - a[j]) * log_ratio(w).exp(),
            c,
            s_sq,
            nodes,
        );
        let den = gauss_expectation(|w| log_ratio(w).exp(), c, s_sq, nodes);
        g.push(num / den);
    }
    g
}

/// A loss that ignores its argument; the degenerate integrand for the
/// surrogate equality case.
pub struct ConstLoss {
    pub dim: usize,
    pub value: f64,
}

impl pacmeta::meta::InnerLoss for ConstLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(
        &self,
        tape: &mut pacmeta::autodiff::Tape,
        _q: &[pacmeta::autodiff::Node],
    ) -> pacmeta::autodiff::Node {
        tape.constant(self.value)
    }
}

/// One random sinusoid dataset of `m` points (task then observations).
pub fn random_dataset(env: &TaskEnvironment, m: usize, rng: &mut Stream) -> Dataset {
    let task = env.sample_task(m, rng);
    env.sample_dataset(&task, m, rng)
}

/// Random init vector for an MLP-sized parameter block.
pub fn random_params(dim: usize, scale: f64, rng: &mut Stream) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
