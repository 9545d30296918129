//! The analytic Gaussian-process base learner.
//!
//! The prior over hypotheses is a GP with neural mean and neural kernel
//! features:
//!
//!   h ~ GP(m_theta, k_theta),
//!   k_theta(x, x') = 1/2 exp(-||phi_theta(x) - phi_theta(x')||^2),
//!
//! where m_theta and phi_theta are small MLPs (widths 1-32-32-1 and
//! 1-32-32-2). Under squared loss, scaled so the likelihood reads
//! P(y | h, x) = N(y | h(x), m/(2 alpha)), the Gibbs posterior with inverse
//! temperature alpha is exact GP regression with noise variance m/(2 alpha),
//! and the partition function is Gaussian:
//!
//!   log Z_alpha(S, theta) = (m/2) log(pi m / alpha)
//!                         + log N(y | m_theta(X), K + (m/(2 alpha)) I).
//!
//! The Gibbs empirical error of a posterior N(mu, K) on targets y has the
//! closed form
//!
//!   L(Q, S) = (1/m) (y.y - 2 mu.y + mu.mu + tr K),
//!
//! which is the exact posterior expectation of the empirical squared risk.
//! Everything below is recorded on the tape, so d/d theta of any of these
//! quantities is one backward sweep away; `*_val` variants compute plain
//! values for evaluation loops that need no gradients.

use crate::autodiff::matrix::{
    cholesky_logdet, cholesky_logdet_val, mvn_logpdf, solve_lower, solve_lower_val,
};
use crate::autodiff::mlp::MlpSpec;
use crate::autodiff::{Node, Tape};
use crate::env::Dataset;
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Architecture of the GP hyper-network: one mean net and one feature net
/// over the same scalar input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GpModel {
    pub mean: MlpSpec,
    pub feat: MlpSpec,
}

impl GpModel {
    /// The sinusoid-study architecture.
    pub fn sinusoid() -> Self {
        GpModel {
            mean: MlpSpec::new(&[1, 32, 32, 1]),
            feat: MlpSpec::new(&[1, 32, 32, 2]),
        }
    }

    /// A narrow variant for fast tests; same structure, fewer units.
    pub fn narrow() -> Self {
        GpModel {
            mean: MlpSpec::new(&[1, 8, 8, 1]),
            feat: MlpSpec::new(&[1, 8, 8, 2]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.mean.param_count() + self.feat.param_count()
    }

    /// Seeded initialization of theta = (mean-net weights, feature-net
    /// weights), concatenated in that order.
    pub fn init(&self, rng: &mut Stream) -> Vec<f64> {
        let mut theta = self.mean.init(rng);
        theta.extend(self.feat.init(rng));
        theta
    }

    fn split<'a, T>(&self, theta: &'a [T]) -> (&'a [T], &'a [T]) {
        assert_eq!(
            theta.len(),
            self.param_count(),
            "theta length does not match architecture"
        );
        theta.split_at(self.mean.param_count())
    }

    /// Feature vectors phi_theta(x) for every row of `xs`, on the tape.
    fn features(&self, tape: &mut Tape, theta: &[Node], xs: &Dataset) -> Vec<Vec<Node>> {
        let (_, feat) = self.split(theta);
        (0..xs.len())
            .map(|i| {
                let x = tape.constants(xs.x_row(i));
                self.feat.forward(tape, feat, &x)
            })
            .collect()
    }

    /// Prior mean m_theta(x) for every row of `xs`, on the tape.
    fn means(&self, tape: &mut Tape, theta: &[Node], xs: &Dataset) -> Vec<Node> {
        let (mean, _) = self.split(theta);
        (0..xs.len())
            .map(|i| {
                let x = tape.constants(xs.x_row(i));
                self.mean.forward(tape, mean, &x)[0]
            })
            .collect()
    }

    fn features_val(&self, theta: &[f64], xs: &Dataset) -> Vec<Vec<f64>> {
        let (_, feat) = self.split(theta);
        (0..xs.len())
            .map(|i| self.feat.forward_val(feat, xs.x_row(i)))
            .collect()
    }

    fn means_val(&self, theta: &[f64], xs: &Dataset) -> Vec<f64> {
        let (mean, _) = self.split(theta);
        (0..xs.len())
            .map(|i| self.mean.forward_val(mean, xs.x_row(i))[0])
            .collect()
    }
}

fn kernel_entry(tape: &mut Tape, fi: &[Node], fj: &[Node]) -> Node {
    let d: Vec<Node> = fi.iter().zip(fj).map(|(&a, &b)| tape.sub(a, b)).collect();
    let q = tape.dot(&d, &d);
    let nq = tape.neg(q);
    let e = tape.exp(nq);
    tape.scale(e, 0.5)
}

fn kernel_entry_val(fi: &[f64], fj: &[f64]) -> f64 {
    let q: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * (-q).exp()
}

/// Gram matrix of the neural kernel at the rows of `xs` (row-major n x n).
/// The diagonal is exactly 1/2 (recorded as constants: d k(x,x)/d theta = 0),
/// entries lie in (0, 1/2], and the matrix is symmetric by construction.
pub fn kernel_matrix(tape: &mut Tape, model: &GpModel, theta: &[Node], xs: &Dataset) -> Vec<Node> {
    let f = model.features(tape, theta, xs);
    let n = f.len();
    let half = tape.constant(0.5);
    let mut k = vec![half; n * n];
    for i in 0..n {
        for j in 0..i {
            let e = kernel_entry(tape, &f[i], &f[j]);
            k[i * n + j] = e;
            k[j * n + i] = e;
        }
    }
    k
}

/// Log partition function of the Gibbs base learner on `s` at inverse
/// temperature `alpha`; 0 for the empty dataset (Z = 1 by convention).
pub fn log_partition(
    tape: &mut Tape,
    model: &GpModel,
    theta: &[Node],
    s: &Dataset,
    alpha: f64,
) -> Result<Node> {
    assert!(alpha > 0.0, "alpha must be positive");
    let m = s.len();
    if m == 0 {
        return Ok(tape.constant(0.0));
    }
    let mf = m as f64;
    let noise = mf / (2.0 * alpha);
    let mut k = kernel_matrix(tape, model, theta, s);
    for i in 0..m {
        k[i * m + i] = tape.add_const(k[i * m + i], noise);
    }
    let mean = model.means(tape, theta, s);
    let y = tape.constants(&s.ys);
    let lp = mvn_logpdf(tape, &y, &mean, &k, m)?;
    let c = 0.5 * mf * (std::f64::consts::PI * mf / alpha).ln();
    Ok(tape.add_const(lp, c))
}

/// Posterior covariance, either the full joint matrix over the query points
/// or only its diagonal. The trace (all the Gibbs error needs) is identical
/// for both; the diagonal form keeps large-query evaluations linear.
pub enum PosteriorCov {
    Full { k: Vec<Node>, n: usize },
    Diag(Vec<Node>),
}

pub struct GpPosterior {
    pub mu: Vec<Node>,
    pub cov: PosteriorCov,
}

impl GpPosterior {
    pub fn diag(&self) -> Vec<Node> {
        match &self.cov {
            PosteriorCov::Full { k, n } => (0..*n).map(|i| k[i * n + i]).collect(),
            PosteriorCov::Diag(d) => d.clone(),
        }
    }

    pub fn trace(&self, tape: &mut Tape) -> Node {
        let d = self.diag();
        tape.sum(&d)
    }
}

struct PosteriorBuild {
    /// Cholesky factor pieces for the observed block, if any.
    z: Vec<Node>,
    v: Vec<Vec<Node>>,
    mu: Vec<Node>,
    kq_feat: Vec<Vec<Node>>,
}

fn posterior_build(
    tape: &mut Tape,
    model: &GpModel,
    theta: &[Node],
    s_prime: &Dataset,
    alpha: f64,
    query: &Dataset,
) -> Result<PosteriorBuild> {
    let mp = s_prime.len();
    let fq = model.features(tape, theta, query);
    let mq = model.means(tape, theta, query);
    if mp == 0 {
        return Ok(PosteriorBuild {
            z: Vec::new(),
            v: vec![Vec::new(); query.len()],
            mu: mq,
            kq_feat: fq,
        });
    }
    let noise = mp as f64 / (2.0 * alpha);
    let mut k = kernel_matrix(tape, model, theta, s_prime);
    for i in 0..mp {
        k[i * mp + i] = tape.add_const(k[i * mp + i], noise);
    }
    let f = cholesky_logdet(tape, &k, mp)?;
    let fobs = model.features(tape, theta, s_prime);
    let mobs = model.means(tape, theta, s_prime);
    let r: Vec<Node> = (0..mp)
        .map(|i| {
            let yi = tape.constant(s_prime.ys[i]);
            tape.sub(yi, mobs[i])
        })
        .collect();
    let z = solve_lower(tape, &f, &r);
    let mut v = Vec::with_capacity(query.len());
    let mut mu = Vec::with_capacity(query.len());
    for t in 0..query.len() {
        let kt: Vec<Node> = (0..mp).map(|i| kernel_entry(tape, &fobs[i], &fq[t])).collect();
        let vt = solve_lower(tape, &f, &kt);
        let proj = tape.dot(&vt, &z);
        mu.push(tape.add(mq[t], proj));
        v.push(vt);
    }
    Ok(PosteriorBuild {
        z,
        v,
        mu,
        kq_feat: fq,
    })
}

/// Gibbs posterior at the query points: exact GP regression on `s_prime`
/// with noise variance |S'|/(2 alpha). Empty `s_prime` returns the prior.
/// Returns the full joint covariance.
pub fn gibbs_posterior(
    tape: &mut Tape,
    model: &GpModel,
    theta: &[Node],
    s_prime: &Dataset,
    alpha: f64,
    query: &Dataset,
) -> Result<GpPosterior> {
    assert!(alpha > 0.0, "alpha must be positive");
    let b = posterior_build(tape, model, theta, s_prime, alpha, query)?;
    let q = query.len();
    let half = tape.constant(0.5);
    let mut k = vec![half; q * q];
    for t in 0..q {
        for s in 0..=t {
            let prior = if s == t {
                half
            } else {
                kernel_entry(tape, &b.kq_feat[t], &b.kq_feat[s])
            };
            let e = if b.v[t].is_empty() {
                prior
            } else {
                let c = tape.dot(&b.v[t], &b.v[s]);
                tape.sub(prior, c)
            };
            k[t * q + s] = e;
            k[s * q + t] = e;
        }
    }
    let _ = b.z;
    Ok(GpPosterior {
        mu: b.mu,
        cov: PosteriorCov::Full { k, n: q },
    })
}

/// Same posterior, but only the marginal variances. The joint trace equals
/// the sum of marginals, so Gibbs errors computed from this form are exact.
pub fn gibbs_posterior_diag(
    tape: &mut Tape,
    model: &GpModel,
    theta: &[Node],
    s_prime: &Dataset,
    alpha: f64,
    query: &Dataset,
) -> Result<GpPosterior> {
    assert!(alpha > 0.0, "alpha must be positive");
    let b = posterior_build(tape, model, theta, s_prime, alpha, query)?;
    let q = query.len();
    let half = tape.constant(0.5);
    let mut d = Vec::with_capacity(q);
    for t in 0..q {
        if b.v[t].is_empty() {
            d.push(half);
        } else {
            let c = tape.dot(&b.v[t], &b.v[t]);
            d.push(tape.sub(half, c));
        }
    }
    Ok(GpPosterior {
        mu: b.mu,
        cov: PosteriorCov::Diag(d),
    })
}

/// Closed-form Gibbs empirical error of a posterior N(mu, K) against
/// targets `y`: (1/m)(y.y - 2 mu.y + mu.mu + tr K). Empty data gives 0.
pub fn gibbs_empirical_error(tape: &mut Tape, post: &GpPosterior, y: &[f64]) -> Result<Node> {
    let m = post.mu.len();
    if y.len() != m {
        return Err(Error::DimensionMismatch {
            context: "gibbs_empirical_error",
            expected: m,
            got: y.len(),
        });
    }
    if m == 0 {
        return Ok(tape.constant(0.0));
    }
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let yn = tape.constants(y);
    let muy = tape.dot(&post.mu, &yn);
    let mumu = tape.dot(&post.mu, &post.mu);
    let tr = post.trace(tape);
    let m2 = tape.scale(muy, -2.0);
    let s1 = tape.add_const(m2, yy);
    let s2 = tape.add(s1, mumu);
    let s3 = tape.add(s2, tr);
    Ok(tape.scale(s3, 1.0 / m as f64))
}

/// Value-level posterior (mu, marginal variances) without a tape.
pub fn posterior_val(
    model: &GpModel,
    theta: &[f64],
    s_prime: &Dataset,
    alpha: f64,
    query: &Dataset,
) -> Result<(Vec<f64>, Vec<f64>)> {
    assert!(alpha > 0.0);
    let mp = s_prime.len();
    let fq = model.features_val(theta, query);
    let mq = model.means_val(theta, query);
    if mp == 0 {
        return Ok((mq, vec![0.5; query.len()]));
    }
    let noise = mp as f64 / (2.0 * alpha);
    let fobs = model.features_val(theta, s_prime);
    let mut k = vec![0.0; mp * mp];
    for i in 0..mp {
        for j in 0..mp {
            k[i * mp + j] = if i == j {
                0.5 + noise
            } else {
                kernel_entry_val(&fobs[i], &fobs[j])
            };
        }
    }
    let (l, _logdet, _jit) = cholesky_logdet_val(&k, mp)?;
    let mobs = model.means_val(theta, s_prime);
    let r: Vec<f64> = (0..mp).map(|i| s_prime.ys[i] - mobs[i]).collect();
    let z = solve_lower_val(&l, mp, &r);
    let mut mu = Vec::with_capacity(query.len());
    let mut var = Vec::with_capacity(query.len());
    for t in 0..query.len() {
        let kt: Vec<f64> = (0..mp).map(|i| kernel_entry_val(&fobs[i], &fq[t])).collect();
        let vt = solve_lower_val(&l, mp, &kt);
        mu.push(mq[t] + vt.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>());
        var.push(0.5 - vt.iter().map(|a| a * a).sum::<f64>());
    }
    Ok((mu, var))
}

/// Value-level Gibbs error of the posterior fit on `train` evaluated
/// against `eval`: mean squared residual of mu plus mean marginal variance.
pub fn gibbs_error_val(
    model: &GpModel,
    theta: &[f64],
    train: &Dataset,
    alpha: f64,
    eval: &Dataset,
) -> Result<f64> {
    if eval.is_empty() {
        return Ok(0.0);
    }
    let (mu, var) = posterior_val(model, theta, train, alpha, eval)?;
    let m = eval.len() as f64;
    let mut s = 0.0;
    for i in 0..eval.len() {
        let r = eval.ys[i] - mu[i];
        s += r * r + var[i];
    }
    Ok(s / m)
}

/// Root-mean-squared error of the posterior mean on the test inputs after
/// fitting on `train` at inverse temperature `alpha`.
pub fn target_rmse(
    model: &GpModel,
    theta: &[f64],
    train: &Dataset,
    test: &Dataset,
    alpha: f64,
) -> Result<f64> {
    let (mu, _) = posterior_val(model, theta, train, alpha, test)?;
    let m = test.len() as f64;
    let mse: f64 = (0..test.len())
        .map(|i| {
            let r = test.ys[i] - mu[i];
            r * r
        })
        .sum::<f64>()
        / m;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{numerical_gradient, relative_error};
    use crate::env::{sample_meta_train, TaskEnvironment};
    use crate::rng::{Domain, SeedTree};

    fn small_instance(
        seed: u64,
        n_points: usize,
    ) -> (GpModel, Vec<f64>, Dataset) {
        let model = GpModel::narrow();
        let tree = SeedTree::new(seed);
        let theta = model.init(&mut tree.stream(Domain::Init, 0));
        let env = TaskEnvironment::sinusoid(n_points.max(1), n_points.max(1), 0.1).unwrap();
        let sets = sample_meta_train(&env, 1, &mut tree.stream(Domain::MetaTrainTasks, 0));
        (model, theta, sets.into_iter().next().unwrap().1)
    }

    #[test]
    fn kernel_single_and_duplicated_points() {
        let (model, theta, _) = small_instance(1, 1);
        let mut d = Dataset::empty(1);
        d.push(&[0.7], 0.0);
        let mut tape = Tape::new();
        let tn = tape.vars(&theta);
        let k = kernel_matrix(&mut tape, &model, &tn, &d);
        assert_eq!(tape.val(k[0]), 0.5);

        let mut d2 = Dataset::empty(1);
        d2.push(&[0.7], 0.0);
        d2.push(&[0.7], 0.0);
        let k2 = kernel_matrix(&mut tape, &model, &tn, &d2);
        for &e in &k2 {
            assert!((tape.val(e) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_entries_in_range_and_symmetric() {
        let (model, theta, data) = small_instance(2, 6);
        let mut tape = Tape::new();
        let tn = tape.vars(&theta);
        let k = kernel_matrix(&mut tape, &model, &tn, &data);
        let n = data.len();
        for i in 0..n {
            assert_eq!(tape.val(k[i * n + i]), 0.5);
            for j in 0..n {
                let v = tape.val(k[i * n + j]);
                assert!(v > 0.0 && v <= 0.5);
                assert_eq!(v, tape.val(k[j * n + i]));
            }
        }
    }

    #[test]
    fn log_partition_empty_and_single_point() {
        let model = GpModel::narrow();
        let theta = vec![0.0; model.param_count()];
        let alpha = 2.0;

        let empty = Dataset::empty(1);
        let mut tape = Tape::new();
        let tn = tape.vars(&theta);
        let lz = log_partition(&mut tape, &model, &tn, &empty, alpha).unwrap();
        assert_eq!(tape.val(lz), 0.0);

        // Zero net: m_theta = 0; with y = 0 the residual vanishes and
        // log Z = 1/2 log(pi/alpha) + log N(0 | 0, 1/2 + 1/(2 alpha)).
        let mut one = Dataset::empty(1);
        one.push(&[0.3], 0.0);
        let lz = log_partition(&mut tape, &model, &tn, &one, alpha).unwrap();
        let v: f64 = 0.5 + 1.0 / (2.0 * alpha);
        let expect = 0.5 * (std::f64::consts::PI / alpha).ln()
            - 0.5 * v.ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((tape.val(lz) - expect).abs() < 1e-12);
    }

    #[test]
    fn log_partition_gradient_matches_fd() {
        let (model, theta, data) = small_instance(3, 4);
        let alpha = 10.0;
        let f = |t: &mut Tape, th: &[Node]| log_partition(t, &model, th, &data, alpha).unwrap();
        let g = crate::autodiff::grad(f, &theta).unwrap();
        let fd = numerical_gradient(|p| crate::autodiff::eval(f, p), &theta, 1e-5);
        assert!(relative_error(&g, &fd) < 1e-4, "{}", relative_error(&g, &fd));
    }

    #[test]
    fn log_partition_nonincreasing_in_alpha() {
        let (model, theta, data) = small_instance(4, 5);
        let mut prev = f64::INFINITY;
        for &alpha in &[0.5, 1.0, 2.0, 5.0, 20.0, 100.0] {
            let mut tape = Tape::new();
            let tn = tape.vars(&theta);
            let lz = log_partition(&mut tape, &model, &tn, &data, alpha).unwrap();
            let v = tape.val(lz);
            assert!(v <= prev + 1e-12, "alpha {alpha}: {v} > {prev}");
            prev = v;
        }
    }

    #[test]
    fn empty_observations_give_prior() {
        let (model, theta, data) = small_instance(5, 3);
        let empty = Dataset::empty(1);
        let mut tape = Tape::new();
        let tn = tape.vars(&theta);
        let post = gibbs_posterior(&mut tape, &model, &tn, &empty, 3.0, &data).unwrap();
        let prior_mu = model.means_val(&theta, &data);
        let prior_k = {
            let f = model.features_val(&theta, &data);
            let n = f.len();
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] = if i == j {
                        0.5
                    } else {
                        kernel_entry_val(&f[i], &f[j])
                    };
                }
            }
            k
        };
        for (a, b) in post.mu.iter().zip(&prior_mu) {
            assert!((tape.val(*a) - b).abs() < 1e-14);
        }
        if let PosteriorCov::Full { k, n } = &post.cov {
            for (a, b) in k.iter().zip(&prior_k) {
                assert!((tape.val(*a) - b).abs() < 1e-14);
            }
            assert_eq!(*n, 3);
        } else {
            panic!("expected full covariance");
        }
    }

    #[test]
    fn large_alpha_interpolates_training_point() {
        let (model, theta, data) = small_instance(6, 3);
        let mut tape = Tape::new();
        let tn = tape.vars(&theta);
        let post = gibbs_posterior(&mut tape, &model, &tn, &data, 1e7, &data).unwrap();
        for i in 0..data.len() {
            assert!(
                (tape.val(post.mu[i]) - data.ys[i]).abs() < 1e-3,
                "point {i}"
            );
        }
    }

    #[test]
    fn diag_posterior_matches_full() {
        let (model, theta, data) = small_instance(7, 5);
        let query = {
            let mut q = Dataset::empty(1);
            for i in 0..4 {
                q.push(&[-2.0 + i as f64], 0.0);
            }
            q
        };
        let mut tape = Tape::new();
        let tn = tape.vars(&theta);
        let full = gibbs_posterior(&mut tape, &model, &tn, &data, 4.0, &query).unwrap();
        let diag = gibbs_posterior_diag(&mut tape, &model, &tn, &data, 4.0, &query).unwrap();
        for (a, b) in full.mu.iter().zip(&diag.mu) {
            assert_eq!(tape.val(*a), tape.val(*b));
        }
        for (a, b) in full.diag().iter().zip(&diag.diag()) {
            assert!((tape.val(*a) - tape.val(*b)).abs() < 1e-14);
        }
    }

    #[test]
    fn value_posterior_matches_tape() {
        let (model, theta, data) = small_instance(8, 4);
        let query = {
            let mut q = Dataset::empty(1);
            q.push(&[0.1], 0.0);
            q.push(&[-1.2], 0.0);
            q
        };
        let mut tape = Tape::new();
        let tn = tape.vars(&theta);
        let post = gibbs_posterior_diag(&mut tape, &model, &tn, &data, 6.0, &query).unwrap();
        let (mu, var) = posterior_val(&model, &theta, &data, 6.0, &query).unwrap();
        for i in 0..2 {
            assert!((tape.val(post.mu[i]) - mu[i]).abs() < 1e-13);
            assert!((tape.val(post.diag()[i]) - var[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn gibbs_error_trivial_cases() {
        // mu = y, K = 0 -> 0; mu = 0, y = 0, K = I -> 1.
        let mut tape = Tape::new();
        let y = [0.4, -0.6, 1.2];
        let mu = tape.constants(&y);
        let zero = tape.constant(0.0);
        let post = GpPosterior {
            mu,
            cov: PosteriorCov::Diag(vec![zero; 3]),
        };
        let e = gibbs_empirical_error(&mut tape, &post, &y).unwrap();
        assert_eq!(tape.val(e), 0.0);

        let mu0 = tape.constants(&[0.0; 3]);
        let one = tape.constant(1.0);
        let post = GpPosterior {
            mu: mu0,
            cov: PosteriorCov::Diag(vec![one; 3]),
        };
        let e = gibbs_empirical_error(&mut tape, &post, &[0.0; 3]).unwrap();
        assert!((tape.val(e) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gibbs_error_permutation_invariant() {
        let (model, theta, data) = small_instance(9, 6);
        let err = |d: &Dataset| {
            let mut tape = Tape::new();
            let tn = tape.vars(&theta);
            let post = gibbs_posterior(&mut tape, &model, &tn, d, 5.0, d).unwrap();
            let e = gibbs_empirical_error(&mut tape, &post, &d.ys).unwrap();
            tape.val(e)
        };
        let direct = err(&data);
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let shuffled = data.select(&perm);
        let permuted = err(&shuffled);
        assert!((direct - permuted).abs() < 1e-12);
    }

    #[test]
    fn rmse_noise_free_interpolation() {
        let model = GpModel::narrow();
        let tree = SeedTree::new(10);
        let theta = model.init(&mut tree.stream(Domain::Init, 0));
        let env = TaskEnvironment::sinusoid(5, 5, 0.0).unwrap();
        let sets = sample_meta_train(&env, 1, &mut tree.stream(Domain::MetaTrainTasks, 0));
        let (_, data) = &sets[0];
        let rmse = target_rmse(&model, &theta, data, data, 1e8).unwrap();
        assert!(rmse < 1e-3, "rmse {rmse}");
    }

    #[test]
    fn rmse_prior_only_zero_net_zero_targets() {
        let model = GpModel::narrow();
        let theta = vec![0.0; model.param_count()];
        let empty = Dataset::empty(1);
        let mut test = Dataset::empty(1);
        for i in 0..10 {
            test.push(&[i as f64 / 2.0 - 2.0], 0.0);
        }
        let rmse = target_rmse(&model, &theta, &empty, &test, 1.0).unwrap();
        assert_eq!(rmse, 0.0);
    }
}
