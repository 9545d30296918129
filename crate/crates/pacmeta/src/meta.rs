//! The Dirac-MAP meta-gradient family.
//!
//! When both the hyper-posterior and the base learners are Dirac measures,
//! the task-level bound collapses to the joint objective
//!
//!   PacB(p0, q_1..q_n) = (1/n) sum_i L(q_i, S_i)
//!                      + xi_tilde ||p0||^2 / (2 sigma_0^2)
//!                      + (1/(n beta)) sum_i ||p0 - q_i||^2 / (2 sigma^2),
//!
//! whose inner minimizers are the proximal solutions
//!
//!   q_i* = argmin_q [ L(q, S_i) + ||p0 - q||^2 / (2 beta sigma^2) ].
//!
//! By the envelope theorem the gradient of PacB(p0, q*(p0)) in p0 is
//!
//!   xi_tilde p0 / sigma_0^2 + (1/n) sum_i (p0 - q_i*) / (beta sigma^2),
//!
//! the Reptile update direction; at stationarity the per-task term equals
//! grad_q L(q_i*, S_i), the implicit form. Replacing the exact minimizer by
//! k steps of gradient descent on the plain task loss and differentiating
//! through the unrolled loop gives MAML (sigma^2 -> infinity limit);
//! suppressing the inner Jacobian gives FOMAML; tying q_i = p0 gives
//! multi-task pretraining. Everything in this module works against any
//! [`InnerLoss`], and [`meta_train`] runs the stochastic outer loop for the
//! whole family, including the two bound objectives over the GP
//! hyper-network.

use crate::autodiff::mlp::MlpSpec;
use crate::autodiff::{Node, Tape};
use crate::bounds::{hyper_kl_node, w1, w2, BoundConfig};
use crate::env::{Dataset, SubsamplePair};
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::rng::{Domain, SeedTree};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Hard cap on unrolled inner steps; keeps the recorded graph bounded.
pub const MAX_UNROLLED_STEPS: usize = 10;

/// A task-level empirical loss, differentiable on the tape.
pub trait InnerLoss {
    fn dim(&self) -> usize;

    /// Record the loss at `q` (data enter as constants).
    fn loss(&self, tape: &mut Tape, q: &[Node]) -> Node;

    fn loss_value(&self, q: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let qn = tape.constants(q);
        let l = self.loss(&mut tape, &qn);
        tape.val(l)
    }

    fn loss_grad(&self, q: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let qn = tape.vars(q);
        let l = self.loss(&mut tape, &qn);
        tape.gradient(l, &qn)
    }
}

/// Mean squared error of an MLP on a dataset.
pub struct MlpRegressionLoss<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset,
}

impl InnerLoss for MlpRegressionLoss<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn loss(&self, tape: &mut Tape, q: &[Node]) -> Node {
        let m = self.data.len();
        if m == 0 {
            return tape.constant(0.0);
        }
        let mut terms = Vec::with_capacity(m);
        for i in 0..m {
            let x = tape.constants(self.data.x_row(i));
            let pred = self.spec.forward(tape, q, &x)[0];
            let y = tape.constant(self.data.ys[i]);
            let r = tape.sub(pred, y);
            terms.push(tape.mul(r, r));
        }
        let s = tape.sum(&terms);
        tape.scale(s, 1.0 / m as f64)
    }
}

/// Softmax cross-entropy of an MLP on a dataset of integer class targets.
pub struct MlpSoftmaxLoss<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Dataset,
}

fn log_sum_exp(tape: &mut Tape, zs: &[Node]) -> Node {
    // The stabilizing shift is a constant picked from current values; any
    // constant shift leaves both the value and the derivative exact.
    let c = zs
        .iter()
        .map(|&z| tape.val(z))
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Node> = zs
        .iter()
        .map(|&z| {
            let s = tape.add_const(z, -c);
            tape.exp(s)
        })
        .collect();
    let s = tape.sum(&exps);
    let l = tape.ln(s);
    tape.add_const(l, c)
}

impl InnerLoss for MlpSoftmaxLoss<'_> {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn loss(&self, tape: &mut Tape, q: &[Node]) -> Node {
        let m = self.data.len();
        if m == 0 {
            return tape.constant(0.0);
        }
        let classes = self.spec.output_dim();
        let mut terms = Vec::with_capacity(m);
        for i in 0..m {
            let x = tape.constants(self.data.x_row(i));
            let logits = self.spec.forward(tape, q, &x);
            let target = self.data.ys[i] as usize;
            assert!(target < classes, "class label out of range");
            let lse = log_sum_exp(tape, &logits);
            terms.push(tape.sub(lse, logits[target]));
        }
        let s = tape.sum(&terms);
        tape.scale(s, 1.0 / m as f64)
    }
}

/// Diagonal quadratic L(q) = 1/2 sum_j h_j (q_j - a_j)^2; the closed-form
/// test loss for every oracle in this module.
pub struct QuadraticLoss {
    pub a: Vec<f64>,
    pub h: Vec<f64>,
}

impl QuadraticLoss {
    pub fn isotropic(a: Vec<f64>) -> Self {
        let h = vec![1.0; a.len()];
        QuadraticLoss { a, h }
    }
}

impl InnerLoss for QuadraticLoss {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn loss(&self, tape: &mut Tape, q: &[Node]) -> Node {
        assert_eq!(q.len(), self.a.len());
        let mut terms = Vec::with_capacity(q.len());
        for j in 0..q.len() {
            let aj = tape.constant(self.a[j]);
            let r = tape.sub(q[j], aj);
            let r2 = tape.mul(r, r);
            terms.push(tape.scale(r2, 0.5 * self.h[j]));
        }
        tape.sum(&terms)
    }
}

/// Either task loss over an MLP, picked by the environment's family.
pub enum TaskLoss<'a> {
    Regression(MlpRegressionLoss<'a>),
    Classification(MlpSoftmaxLoss<'a>),
}

impl<'a> TaskLoss<'a> {
    pub fn new(kind: TaskLossKind, spec: &'a MlpSpec, data: &'a Dataset) -> Self {
        match kind {
            TaskLossKind::Regression => TaskLoss::Regression(MlpRegressionLoss { spec, data }),
            TaskLossKind::Classification => {
                TaskLoss::Classification(MlpSoftmaxLoss { spec, data })
            }
        }
    }
}

impl InnerLoss for TaskLoss<'_> {
    fn dim(&self) -> usize {
        match self {
            TaskLoss::Regression(l) => l.dim(),
            TaskLoss::Classification(l) => l.dim(),
        }
    }

    fn loss(&self, tape: &mut Tape, q: &[Node]) -> Node {
        match self {
            TaskLoss::Regression(l) => l.loss(tape, q),
            TaskLoss::Classification(l) => l.loss(tape, q),
        }
    }
}

/// How an [`InnerSolution`] was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Optimal,
    KStepGd,
    TiedToP0,
}

#[derive(Clone, Debug)]
pub struct InnerSolution {
    pub q: Vec<f64>,
    pub provenance: Provenance,
    pub steps_used: usize,
    /// Norm of the proximal stationarity residual
    /// grad L(q) - (p0 - q)/(beta sigma^2) at the returned q.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMethod {
    GradientDescent,
    QuasiNewton,
}

/// Inner-solver settings. The defaults are the reference protocol for the
/// Reptile path: limited-memory quasi-Newton, history 10, at most 10
/// iterations per call, step size 5e-3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerOptConfig {
    pub method: InnerMethod,
    pub steps: usize,
    pub lr: f64,
    pub tol: f64,
    pub history: usize,
}

impl Default for InnerOptConfig {
    fn default() -> Self {
        InnerOptConfig {
            method: InnerMethod::QuasiNewton,
            steps: 10,
            lr: 5e-3,
            tol: 1e-6,
            history: 10,
        }
    }
}

impl InnerOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config("inner.tol must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("inner.lr must be positive".into()));
        }
        if self.history < 1 {
            return Err(Error::Config("inner.history must be >= 1".into()));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Limited-memory BFGS with Armijo backtracking. Returns the iterate, the
/// iterations consumed, and the final gradient norm.
fn lbfgs<FG>(mut fg: FG, x0: &[f64], steps: usize, history: usize, lr: f64, tol: f64) -> (Vec<f64>, usize, f64)
where
    FG: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut f, mut g) = fg(&x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut used = 0;
    for _ in 0..steps {
        let gnorm = norm(&g);
        if gnorm <= tol {
            break;
        }
        // Two-loop recursion; H0 = gamma I from the newest pair, or lr I
        // before any curvature is available.
        let mut d = g.clone();
        let mut alphas = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &d);
            alphas[i] = a;
            for (dj, yj) in d.iter_mut().zip(&y_hist[i]) {
                *dj -= a * yj;
            }
        }
        let gamma = match s_hist.last() {
            Some(s) => {
                let y = y_hist.last().unwrap();
                dot(s, y) / dot(y, y)
            }
            None => lr,
        };
        for dj in d.iter_mut() {
            *dj *= gamma;
        }
        for i in 0..s_hist.len() {
            let b = rho_hist[i] * dot(&y_hist[i], &d);
            for (dj, sj) in d.iter_mut().zip(&s_hist[i]) {
                *dj += (alphas[i] - b) * sj;
            }
        }
        for dj in d.iter_mut() {
            *dj = -*dj;
        }

        let slope = dot(&g, &d);
        if slope >= 0.0 {
            // Not a descent direction (stale curvature); fall back to
            // steepest descent.
            d = g.iter().map(|gj| -gamma * gj).collect();
        }
        let slope = dot(&g, &d);

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xj, dj)| xj + t * dj).collect();
            let (ft, gt) = fg(&xt);
            if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                accepted = Some((xt, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((xt, ft, gt)) = accepted else { break };
        used += 1;

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if s_hist.len() == history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }
        x = xt;
        f = ft;
        g = gt;
    }
    let gnorm = norm(&g);
    (x, used, gnorm)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve the proximal problem q* = argmin_q L(q, S) + ||p0 - q||^2 /
/// (2 beta sigma^2). The returned residual is the norm of the proximal
/// gradient at q (the stationarity certificate); `converged` records
/// whether it reached `cfg.tol` within the step budget. A loss with an
/// exactly zero gradient at p0 short-circuits to q = p0 with provenance
/// [`Provenance::TiedToP0`].
pub fn inner_optimal<L: InnerLoss + ?Sized>(
    p0: &[f64],
    loss: &L,
    beta: f64,
    sigma_sq: f64,
    cfg: &InnerOptConfig,
) -> Result<InnerSolution> {
    cfg.validate()?;
    assert!(beta > 0.0 && sigma_sq > 0.0);
    assert_eq!(p0.len(), loss.dim());
    let t = beta * sigma_sq;

    let g0 = loss.loss_grad(p0)?;
    let g0_norm = norm(&g0);
    if g0_norm == 0.0 {
        return Ok(InnerSolution {
            q: p0.to_vec(),
            provenance: Provenance::TiedToP0,
            steps_used: 0,
            residual: 0.0,
            converged: true,
        });
    }
    // At q = p0 the penalty gradient vanishes, so the proximal gradient is
    // the loss gradient itself.
    if g0_norm <= cfg.tol {
        return Ok(InnerSolution {
            q: p0.to_vec(),
            provenance: Provenance::Optimal,
            steps_used: 0,
            residual: g0_norm,
            converged: true,
        });
    }

    let prox_fg = |q: &[f64]| -> (f64, Vec<f64>) {
        let lv = loss.loss_value(q);
        let lg = loss.loss_grad(q).unwrap_or_else(|_| vec![f64::NAN; q.len()]);
        let mut pen = 0.0;
        let mut g = lg;
        for j in 0..q.len() {
            let d = q[j] - p0[j];
            pen += d * d;
            g[j] += d / t;
        }
        (lv + pen / (2.0 * t), g)
    };

    let (q, steps_used, residual) = match cfg.method {
        InnerMethod::QuasiNewton => lbfgs(prox_fg, p0, cfg.steps, cfg.history, cfg.lr, cfg.tol),
        InnerMethod::GradientDescent => {
            let mut q = p0.to_vec();
            let mut used = 0;
            for _ in 0..cfg.steps {
                let (_, g) = prox_fg(&q);
                if norm(&g) <= cfg.tol {
                    break;
                }
                for j in 0..q.len() {
                    q[j] -= cfg.lr * g[j];
                }
                used += 1;
            }
            let (_, g) = prox_fg(&q);
            (q, used, norm(&g))
        }
    };
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "inner_optimal iterate",
        });
    }
    Ok(InnerSolution {
        q,
        provenance: Provenance::Optimal,
        steps_used,
        residual,
        converged: residual <= cfg.tol,
    })
}

/// Evaluate the joint objective at explicit (p0, q_1..q_n).
pub fn pacb_objective<L: InnerLoss>(
    p0: &[f64],
    inner: &[InnerSolution],
    losses: &[L],
    beta: f64,
    sigma_sq: f64,
    xi_tilde: f64,
    sigma0_sq: f64,
) -> f64 {
    assert_eq!(inner.len(), losses.len());
    assert!(!losses.is_empty());
    assert!(beta > 0.0 && sigma_sq > 0.0 && sigma0_sq > 0.0);
    let n = losses.len() as f64;
    let mut loss_sum = 0.0;
    let mut prox_sum = 0.0;
    for (sol, loss) in inner.iter().zip(losses) {
        loss_sum += loss.loss_value(&sol.q);
        prox_sum += sol
            .q
            .iter()
            .zip(p0)
            .map(|(qj, pj)| (pj - qj) * (pj - qj))
            .sum::<f64>();
    }
    let ridge = xi_tilde * dot(p0, p0) / (2.0 * sigma0_sq);
    loss_sum / n + ridge + prox_sum / (2.0 * n * beta * sigma_sq)
}

/// A meta-gradient paired with the value of its defining scalar objective,
/// so finite-difference checks can probe the same composition.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grad: Vec<f64>,
    pub objective: f64,
}

/// Reptile/implicit meta-gradient at p0: solve every task's proximal
/// problem, then return xi_tilde p0 / sigma_0^2 + (1/n) sum (p0 - q_i*) /
/// (beta sigma^2) together with the envelope objective PacB(p0, q*).
pub fn reptile_meta_gradient<L: InnerLoss>(
    p0: &[f64],
    losses: &[L],
    beta: f64,
    sigma_sq: f64,
    xi_tilde: f64,
    sigma0_sq: f64,
    cfg: &InnerOptConfig,
) -> Result<(MetaGradient, Vec<InnerSolution>)> {
    assert!(!losses.is_empty());
    let n = losses.len() as f64;
    let mut solutions = Vec::with_capacity(losses.len());
    for loss in losses {
        solutions.push(inner_optimal(p0, loss, beta, sigma_sq, cfg)?);
    }
    let t = beta * sigma_sq;
    let mut grad: Vec<f64> = p0.iter().map(|pj| xi_tilde * pj / sigma0_sq).collect();
    for sol in &solutions {
        for j in 0..grad.len() {
            grad[j] += (p0[j] - sol.q[j]) / (t * n);
        }
    }
    let objective = pacb_objective(p0, &solutions, losses, beta, sigma_sq, xi_tilde, sigma0_sq);
    Ok((
        MetaGradient { grad, objective },
        solutions,
    ))
}

fn unrolled_inner_gd(
    tape: &mut Tape,
    loss: &impl InnerLoss,
    p: &[Node],
    k: usize,
    eta: f64,
    prox: Option<f64>,
) -> Result<Vec<Node>> {
    let mut q = p.to_vec();
    for _ in 0..k {
        let mut l = loss.loss(tape, &q);
        if let Some(t) = prox {
            // Proximal variant: the inner map descends
            // L(q) + ||p0 - q||^2 / (2 t); the extra term references the
            // p0 nodes directly, so its influence survives the leaf stop.
            let diffs: Vec<Node> = q.iter().zip(p).map(|(&qj, &pj)| tape.sub(qj, pj)).collect();
            let pen = tape.dot(&diffs, &diffs);
            let pen = tape.scale(pen, 1.0 / (2.0 * t));
            l = tape.add(l, pen);
        }
        let g = tape.grad_nodes_leaf(l, &q)?;
        q = q
            .iter()
            .zip(&g)
            .map(|(&qj, &gj)| {
                let step = tape.scale(gj, eta);
                tape.sub(qj, step)
            })
            .collect();
    }
    Ok(q)
}

fn check_unroll_args(k: usize, eta: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("unrolled inner loop needs k >= 1".into()));
    }
    if k > MAX_UNROLLED_STEPS {
        return Err(Error::Config(format!(
            "unrolled inner loop capped at k <= {MAX_UNROLLED_STEPS}, got {k}"
        )));
    }
    if !(eta >= 0.0) {
        return Err(Error::Config("inner step size must be >= 0".into()));
    }
    Ok(())
}

/// MAML meta-gradient: per task, k gradient-descent steps on the inner loss
/// from p0 (recorded on the tape), then the outer loss at q_k; the returned
/// gradient is the exact derivative through the unrolled loop, second-order
/// terms included. `tasks` pairs (inner loss on S', outer loss on S).
pub fn maml_meta_gradient<L: InnerLoss>(
    p0: &[f64],
    tasks: &[(L, L)],
    k: usize,
    eta: f64,
    xi_tilde: f64,
    sigma0_sq: f64,
) -> Result<MetaGradient> {
    check_unroll_args(k, eta)?;
    assert!(!tasks.is_empty());
    let n = tasks.len() as f64;
    let mut grad: Vec<f64> = p0.iter().map(|pj| xi_tilde * pj / sigma0_sq).collect();
    let mut outer_sum = 0.0;
    for (inner, outer) in tasks {
        let mut tape = Tape::new();
        let p = tape.vars(p0);
        let q = unrolled_inner_gd(&mut tape, inner, &p, k, eta, None)?;
        let l = outer.loss(&mut tape, &q);
        outer_sum += tape.val(l);
        let gi = tape.gradient(l, &p)?;
        for j in 0..grad.len() {
            grad[j] += gi[j] / n;
        }
    }
    let ridge = xi_tilde * dot(p0, p0) / (2.0 * sigma0_sq);
    Ok(MetaGradient {
        grad,
        objective: outer_sum / n + ridge,
    })
}

/// First-order MAML: same inner map as [`maml_meta_gradient`], but the
/// derivative of q_k with respect to p0 is suppressed — the outer gradient
/// is evaluated at q_k and used as-is.
pub fn fomaml_meta_gradient<L: InnerLoss>(
    p0: &[f64],
    tasks: &[(L, L)],
    k: usize,
    eta: f64,
    xi_tilde: f64,
    sigma0_sq: f64,
) -> Result<MetaGradient> {
    check_unroll_args(k, eta)?;
    assert!(!tasks.is_empty());
    let n = tasks.len() as f64;
    let mut grad: Vec<f64> = p0.iter().map(|pj| xi_tilde * pj / sigma0_sq).collect();
    let mut outer_sum = 0.0;
    for (inner, outer) in tasks {
        let mut q = p0.to_vec();
        for _ in 0..k {
            let g = inner.loss_grad(&q)?;
            for j in 0..q.len() {
                q[j] -= eta * g[j];
            }
        }
        outer_sum += outer.loss_value(&q);
        let go = outer.loss_grad(&q)?;
        for j in 0..grad.len() {
            grad[j] += go[j] / n;
        }
    }
    let ridge = xi_tilde * dot(p0, p0) / (2.0 * sigma0_sq);
    Ok(MetaGradient {
        grad,
        objective: outer_sum / n + ridge,
    })
}

/// Value-level gradient-descent adaptation: k steps on `loss` from q0.
/// This is the deployment-time inner map of MAML and FOMAML.
pub fn adapt_gd<L: InnerLoss>(loss: &L, q0: &[f64], k: usize, eta: f64) -> Result<Vec<f64>> {
    let mut q = q0.to_vec();
    for _ in 0..k {
        let g = loss.loss_grad(&q)?;
        for j in 0..q.len() {
            q[j] -= eta * g[j];
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "adapt_gd iterate".into(),
            });
        }
    }
    Ok(q)
}

/// Multi-task pretraining: every q_i tied to p0.
pub fn pretrain_meta_gradient<L: InnerLoss>(
    p0: &[f64],
    losses: &[L],
    xi_tilde: f64,
    sigma0_sq: f64,
) -> Result<MetaGradient> {
    assert!(!losses.is_empty());
    let n = losses.len() as f64;
    let mut grad: Vec<f64> = p0.iter().map(|pj| xi_tilde * pj / sigma0_sq).collect();
    let mut loss_sum = 0.0;
    for loss in losses {
        loss_sum += loss.loss_value(p0);
        let g = loss.loss_grad(p0)?;
        for j in 0..grad.len() {
            grad[j] += g[j] / n;
        }
    }
    let ridge = xi_tilde * dot(p0, p0) / (2.0 * sigma0_sq);
    Ok(MetaGradient {
        grad,
        objective: loss_sum / n + ridge,
    })
}

/// Exact gradient of the PacB objective when q_i(p0) is produced by k
/// unrolled gradient-descent steps on the *proximal* inner loss. As
/// sigma^2 grows the proximal terms vanish and this converges to the MAML
/// meta-gradient with the same (k, eta); the sigma^2 limit tests pin that.
pub fn pacb_unrolled_meta_gradient<L: InnerLoss>(
    p0: &[f64],
    tasks: &[(L, L)],
    k: usize,
    eta: f64,
    beta: f64,
    sigma_sq: f64,
    xi_tilde: f64,
    sigma0_sq: f64,
) -> Result<MetaGradient> {
    check_unroll_args(k, eta)?;
    assert!(!tasks.is_empty());
    assert!(beta > 0.0 && sigma_sq > 0.0);
    let n = tasks.len() as f64;
    let t = beta * sigma_sq;
    let mut grad: Vec<f64> = vec![0.0; p0.len()];
    let mut obj = 0.0;
    for (inner, outer) in tasks {
        let mut tape = Tape::new();
        let p = tape.vars(p0);
        let q = unrolled_inner_gd(&mut tape, inner, &p, k, eta, Some(t))?;
        let l = outer.loss(&mut tape, &q);
        let diffs: Vec<Node> = q.iter().zip(&p).map(|(&qj, &pj)| tape.sub(pj, qj)).collect();
        let pen = tape.dot(&diffs, &diffs);
        let pen = tape.scale(pen, 1.0 / (2.0 * t));
        let total = tape.add(l, pen);
        obj += tape.val(total);
        let gi = tape.gradient(total, &p)?;
        for j in 0..grad.len() {
            grad[j] += gi[j] / n;
        }
    }
    let ridge = xi_tilde * dot(p0, p0) / (2.0 * sigma0_sq);
    for (gj, pj) in grad.iter_mut().zip(p0) {
        *gj += xi_tilde * pj / sigma0_sq;
    }
    Ok(MetaGradient {
        grad,
        objective: obj / n + ridge,
    })
}

/// Adaptive-moment outer optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, dim: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for j in 0..params.len() {
            self.m[j] = b1 * self.m[j] + (1.0 - b1) * grad[j];
            self.v[j] = b2 * self.v[j] + (1.0 - b2) * grad[j] * grad[j];
            let mh = self.m[j] / c1;
            let vh = self.v[j] / c2;
            params[j] -= self.cfg.lr * mh / (vh.sqrt() + self.cfg.eps);
        }
    }
}

/// The whole trainable family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum MetaAlgorithm {
    Pacoh,
    Pacmaml,
    Reptile,
    Maml,
    Fomaml,
    Pretrain,
}

impl MetaAlgorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetaAlgorithm::Pacoh => "pacoh",
            MetaAlgorithm::Pacmaml => "pacmaml",
            MetaAlgorithm::Reptile => "reptile",
            MetaAlgorithm::Maml => "maml",
            MetaAlgorithm::Fomaml => "fomaml",
            MetaAlgorithm::Pretrain => "pretrain",
        }
    }

    pub fn needs_gp(&self) -> bool {
        matches!(self, MetaAlgorithm::Pacoh | MetaAlgorithm::Pacmaml)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskLossKind {
    Regression,
    Classification,
}

/// What the meta-parameters parameterize: the GP hyper-network (bound
/// objectives) or a plain MLP (MAP family).
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Gp(GpModel),
    Mlp { spec: MlpSpec, kind: TaskLossKind },
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        match self {
            ModelSpec::Gp(m) => m.param_count(),
            ModelSpec::Mlp { spec, .. } => spec.param_count(),
        }
    }

    pub fn init(&self, rng: &mut crate::rng::Stream) -> Vec<f64> {
        match self {
            ModelSpec::Gp(m) => m.init(rng),
            ModelSpec::Mlp { spec, .. } => spec.init(rng),
        }
    }
}

/// Outer-loop settings shared by every algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iterations: usize,
    /// Tasks per meta-batch.
    pub batch: usize,
    pub adam: AdamConfig,
    /// Inner solver for the Reptile path.
    pub inner: InnerOptConfig,
    /// Unrolled inner steps (MAML/FOMAML).
    pub k: usize,
    /// Unrolled inner step size.
    pub eta: f64,
    /// Trace every this many iterations (the last one is always traced).
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iterations: 1000,
            batch: 5,
            adam: AdamConfig::default(),
            inner: InnerOptConfig::default(),
            k: 1,
            eta: 0.01,
            log_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: Vec<f64>,
    pub trace: Vec<TracePoint>,
    /// Iteration at which the objective stopped being finite, if training
    /// aborted; the params are the last finite iterate.
    pub diverged_at: Option<usize>,
}

/// Write a training trace as CSV.
pub fn write_trace_csv<P: AsRef<std::path::Path>>(path: P, trace: &[TracePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["iteration", "objective", "gradient_norm", "wall_time"])?;
    for t in trace {
        w.write_record([
            t.iteration.to_string(),
            t.objective.to_string(),
            t.grad_norm.to_string(),
            t.wall_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn batch_indices(n: usize, batch: usize, rng: &mut crate::rng::Stream) -> Vec<usize> {
    use rand::Rng;
    let take = batch.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Stochastic meta-training over pre-sampled observed tasks.
///
/// Per iteration a batch of tasks is drawn without replacement, the chosen
/// algorithm's meta-gradient is computed in batch order, and one Adam step
/// is applied. All randomness comes from the seed tree (init and batch
/// streams), so a rerun with the same inputs is bit-identical. A non-finite
/// objective aborts the loop, keeping the last finite iterate and trace.
pub fn meta_train(
    model: &ModelSpec,
    algorithm: MetaAlgorithm,
    pairs: &[SubsamplePair],
    bound: &BoundConfig,
    opts: &TrainOptions,
    tree: &SeedTree,
) -> Result<TrainResult> {
    bound.validate()?;
    opts.inner.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("meta_train: no observed tasks".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Config("meta_train: batch must be >= 1".into()));
    }
    if opts.log_every == 0 {
        return Err(Error::Config("meta_train: log_every must be >= 1".into()));
    }
    match (algorithm.needs_gp(), model) {
        (true, ModelSpec::Gp(_)) | (false, ModelSpec::Mlp { .. }) => {}
        _ => {
            return Err(Error::Config(format!(
                "algorithm {} does not match the model family",
                algorithm.as_str()
            )))
        }
    }

    let xi = bound.xi_tilde();
    let mut params = model.init(&mut tree.stream(Domain::Init, 0));
    let mut batch_rng = tree.stream(Domain::Batch, 0);
    let mut adam = Adam::new(opts.adam, params.len());
    let mut trace = Vec::new();
    let start = Instant::now();
    let mut diverged_at = None;

    for it in 0..opts.iterations {
        let batch = batch_indices(pairs.len(), opts.batch, &mut batch_rng);
        let step = match model {
            ModelSpec::Gp(gp) => gp_step(gp, algorithm, &params, pairs, &batch, bound, xi),
            ModelSpec::Mlp { spec, kind } => {
                mlp_step(spec, *kind, algorithm, &params, pairs, &batch, bound, xi, opts)
            }
        };
        let step = match step {
            Ok(s) => s,
            Err(Error::NonFinite { .. }) => {
                diverged_at = Some(it);
                break;
            }
            Err(e) => return Err(e),
        };
        if !step.objective.is_finite() || step.grad.iter().any(|g| !g.is_finite()) {
            diverged_at = Some(it);
            break;
        }
        if it % opts.log_every == 0 || it + 1 == opts.iterations {
            trace.push(TracePoint {
                iteration: it,
                objective: step.objective,
                grad_norm: norm(&step.grad),
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
        let prev = params.clone();
        adam.step(&mut params, &step.grad);
        if params.iter().any(|p| !p.is_finite()) {
            params = prev;
            diverged_at = Some(it);
            break;
        }
    }
    Ok(TrainResult {
        params,
        trace,
        diverged_at,
    })
}

fn gp_step(
    gp: &GpModel,
    algorithm: MetaAlgorithm,
    params: &[f64],
    pairs: &[SubsamplePair],
    batch: &[usize],
    bound: &BoundConfig,
    xi: f64,
) -> Result<MetaGradient> {
    let mut tape = Tape::new();
    let theta = tape.vars(params);
    let mut terms = Vec::with_capacity(batch.len());
    for &i in batch {
        let node = match algorithm {
            MetaAlgorithm::Pacoh => w1(&mut tape, gp, &theta, &pairs[i].full, bound.beta)?,
            MetaAlgorithm::Pacmaml => {
                w2(&mut tape, gp, &theta, &pairs[i], bound.alpha, bound.beta)?
            }
            _ => unreachable!("gp_step only serves the bound objectives"),
        };
        terms.push(node);
    }
    let s = tape.sum(&terms);
    let mean = tape.scale(s, 1.0 / batch.len() as f64);
    let kl = hyper_kl_node(&mut tape, &theta, bound.sigma0_sq);
    let reg = tape.scale(kl, xi);
    let obj = tape.add(mean, reg);
    let objective = tape.val(obj);
    if !objective.is_finite() {
        return Err(Error::NonFinite {
            context: "gp meta objective",
        });
    }
    let grad = tape.gradient(obj, &theta)?;
    Ok(MetaGradient { grad, objective })
}

#[allow(clippy::too_many_arguments)]
fn mlp_step(
    spec: &MlpSpec,
    kind: TaskLossKind,
    algorithm: MetaAlgorithm,
    params: &[f64],
    pairs: &[SubsamplePair],
    batch: &[usize],
    bound: &BoundConfig,
    xi: f64,
    opts: &TrainOptions,
) -> Result<MetaGradient> {
    match algorithm {
        MetaAlgorithm::Reptile => {
            let losses: Vec<TaskLoss> = batch
                .iter()
                .map(|&i| TaskLoss::new(kind, spec, &pairs[i].full))
                .collect();
            let (mg, _) = reptile_meta_gradient(
                params,
                &losses,
                bound.beta,
                bound.sigma_sq,
                xi,
                bound.sigma0_sq,
                &opts.inner,
            )?;
            Ok(mg)
        }
        MetaAlgorithm::Maml => {
            let tasks: Vec<(TaskLoss, TaskLoss)> = batch
                .iter()
                .map(|&i| {
                    (
                        TaskLoss::new(kind, spec, &pairs[i].inner),
                        TaskLoss::new(kind, spec, &pairs[i].full),
                    )
                })
                .collect();
            maml_meta_gradient(params, &tasks, opts.k, opts.eta, xi, bound.sigma0_sq)
        }
        MetaAlgorithm::Fomaml => {
            let tasks: Vec<(TaskLoss, TaskLoss)> = batch
                .iter()
                .map(|&i| {
                    (
                        TaskLoss::new(kind, spec, &pairs[i].inner),
                        TaskLoss::new(kind, spec, &pairs[i].full),
                    )
                })
                .collect();
            fomaml_meta_gradient(params, &tasks, opts.k, opts.eta, xi, bound.sigma0_sq)
        }
        MetaAlgorithm::Pretrain => {
            let losses: Vec<TaskLoss> = batch
                .iter()
                .map(|&i| TaskLoss::new(kind, spec, &pairs[i].full))
                .collect();
            pretrain_meta_gradient(params, &losses, xi, bound.sigma0_sq)
        }
        _ => unreachable!("mlp_step only serves the MAP family"),
    }
}

/// Posterior-mean RMSE of an MLP on a test set.
pub fn mlp_rmse(spec: &MlpSpec, q: &[f64], test: &Dataset) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let mse: f64 = (0..test.len())
        .map(|i| {
            let pred = spec.forward_val(q, test.x_row(i))[0];
            let r = pred - test.ys[i];
            r * r
        })
        .sum::<f64>()
        / test.len() as f64;
    mse.sqrt()
}

/// Argmax classification accuracy of an MLP on a test set.
pub fn mlp_accuracy(spec: &MlpSpec, q: &[f64], test: &Dataset) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for i in 0..test.len() {
        let logits = spec.forward_val(q, test.x_row(i));
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        if pred == test.ys[i] as usize {
            hits += 1;
        }
    }
    hits as f64 / test.len() as f64
}
