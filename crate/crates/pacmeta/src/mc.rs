//! Monte-Carlo gradient machinery for non-conjugate losses.
//!
//! When the per-task loss is not squared error the Gibbs integrals behind
//! the bound terms have no closed form, so the *gradients* are estimated
//! instead of the objectives; the resulting estimator is unbiased where the
//! direct objective estimate is not. Reparameterize the hypothesis as
//! v = p + w with w ~ N(0, sigma^2 I), so the meta-parameter p enters the
//! loss argument rather than the sampling measure:
//!
//!   dW1/dp = E_{Q^beta(w;S)} [dL(p+w, S)/dp],
//!     Q^gamma(w;D) prop N(w|0, sigma^2 I) exp(-gamma L(p+w, D)).
//!
//! The W2 gradient keeps the same reparameterization for its log-partition
//! term and replaces the high-variance score-function term by the softmax
//! policy gradient, giving
//!
//!   dW2/dp ~= E_{Q^alpha(w;S')}[dL(p+w, S)/dp]
//!           + (alpha/beta) (E_{Q^beta(w;S)} - E_{Q^alpha(w;S')})[dL(p+w, S')/dp].
//!
//! The replacement is a Jensen step: with LD(v) = L(v,S) - (alpha/beta) L(v,S'),
//! the exact term -(1/beta) E_{Q^alpha}[-beta LD] dominates the surrogate
//! -(1/beta) log E_{Q^alpha}[exp(-beta LD)], with equality when LD is constant
//! over the posterior (in particular at alpha = beta, S' = S). The stop-grad
//! semantics are structural here: samples w are plain numbers, never
//! differentiated through, so only d/dp terms appear.
//!
//! Sampling uses SGLD chains on U(w) = gamma L(p+w) + ||w||^2 / (2 sigma^2)
//! with constant step size and no Metropolis correction. One-sample mode
//! keeps only the final iterate of a short chain; the classification
//! experiments use it so each task adapts a single parameter vector, the
//! same budget MAML-style baselines get.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::{
    sample_meta_train, sample_target_tasks, subsample, SubsampleMode, SubsamplePair,
    TargetTask, TaskEnvironment,
};
use crate::error::{Error, Result};
use crate::meta::{
    batch_indices, mlp_accuracy, Adam, AdamConfig, InnerLoss, MlpSoftmaxLoss, TracePoint,
};
use crate::autodiff::mlp::MlpSpec;
use crate::rng::{Domain, SeedTree, Stream};

/// SGLD chain settings. `step_size` defaults to 1e-3 sigma^2 via [`SamplerConfig::new`];
/// the kept draws are the iterates after `burn_in`, every `thin` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Prior variance sigma^2 of the offset w.
    pub sigma_sq: f64,
}

impl SamplerConfig {
    /// Defaults: eps = 1e-3 sigma^2, 50 steps, 10 burn-in, no thinning.
    pub fn new(sigma_sq: f64) -> Self {
        SamplerConfig {
            step_size: 1e-3 * sigma_sq,
            steps: 50,
            burn_in: 10,
            thin: 1,
            sigma_sq,
        }
    }

    /// One-sample mode: run `steps` updates, keep only the final iterate.
    pub fn one_sample(steps: usize, sigma_sq: f64) -> Self {
        SamplerConfig {
            step_size: 1e-3 * sigma_sq,
            steps,
            burn_in: steps.saturating_sub(1),
            thin: 1,
            sigma_sq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config("sampler step_size must be > 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        if self.thin < 1 {
            return Err(Error::Config("sampler thin must be >= 1".into()));
        }
        if !(self.sigma_sq > 0.0) {
            return Err(Error::Config("sampler sigma_sq must be > 0".into()));
        }
        if self.burn_in + self.thin > self.steps {
            return Err(Error::Config(format!(
                "sampler keeps no draws: burn_in ({}) + thin ({}) > steps ({})",
                self.burn_in, self.thin, self.steps
            )));
        }
        Ok(())
    }

    /// Number of draws a chain with this config keeps.
    pub fn kept(&self) -> usize {
        (self.steps - self.burn_in) / self.thin
    }
}

/// Which Gibbs posterior a sample set came from. The estimators check this
/// tag so a chain on the wrong dataset or temperature cannot be mixed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosteriorKind {
    /// Q^alpha(w; S'): temperature alpha, inner subsample.
    AlphaOnInner,
    /// Q^beta(w; S): temperature beta, full task dataset.
    BetaOnFull,
}

/// Kept draws of the offset w (the hypothesis is v = p + w).
#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    pub samples: Vec<Vec<f64>>,
    pub which: PosteriorKind,
}

impl PosteriorSamples {
    /// The last kept draw; the one-sample mode's single vector.
    pub fn last(&self) -> &[f64] {
        self.samples.last().expect("PosteriorSamples is nonempty")
    }
}

/// SGLD chain targeting Q^gamma(w; D) prop N(w|0, sigma^2 I) exp(-gamma L(p+w, D)).
///
/// Update: w <- w - (eps/2) (gamma grad L(p+w) + w/sigma^2) + N(0, eps I).
/// `init` warm-starts the chain (meta-iterations move p slowly, so the
/// previous chain end is a good start); `None` starts at w = 0.
pub fn sgld_sample<L: InnerLoss>(
    p: &[f64],
    loss: &L,
    gamma: f64,
    which: PosteriorKind,
    cfg: &SamplerConfig,
    init: Option<&[f64]>,
    rng: &mut Stream,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    if !(gamma > 0.0) {
        return Err(Error::Config("sgld temperature must be > 0".into()));
    }
    if loss.dim() != p.len() {
        return Err(Error::DimensionMismatch {
            context: "sgld_sample loss dim".into(),
            expected: p.len(),
            got: loss.dim(),
        });
    }
    let dim = p.len();
    let mut w = match init {
        Some(w0) => {
            if w0.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "sgld_sample init".into(),
                    expected: dim,
                    got: w0.len(),
                });
            }
            w0.to_vec()
        }
        None => vec![0.0; dim],
    };
    let eps = cfg.step_size;
    let noise_sd = eps.sqrt();
    let mut v = vec![0.0; dim];
    let mut samples = Vec::with_capacity(cfg.kept());
    for step in 1..=cfg.steps {
        for j in 0..dim {
            v[j] = p[j] + w[j];
        }
        let g = loss.loss_grad(&v)?;
        for j in 0..dim {
            let drift = gamma * g[j] + w[j] / cfg.sigma_sq;
            let z: f64 = rng.sample(StandardNormal);
            w[j] += -0.5 * eps * drift + noise_sd * z;
            if !w[j].is_finite() {
                return Err(Error::NonFinite {
                    context: "sgld iterate".into(),
                });
            }
        }
        if step > cfg.burn_in && (step - cfg.burn_in) % cfg.thin == 0 {
            samples.push(w.clone());
        }
    }
    Ok(PosteriorSamples { samples, which })
}

fn check_kind(samples: &PosteriorSamples, want: PosteriorKind, what: &str) -> Result<()> {
    if samples.which != want {
        return Err(Error::Config(format!(
            "{what}: expected {want:?} samples, got {:?}",
            samples.which
        )));
    }
    if samples.samples.is_empty() {
        return Err(Error::Config(format!("{what}: empty sample set")));
    }
    Ok(())
}

/// Mean of grad L(p+w) over a sample set, fixed summation order.
fn mean_loss_grad<L: InnerLoss>(
    p: &[f64],
    loss: &L,
    samples: &PosteriorSamples,
) -> Result<Vec<f64>> {
    let n = samples.samples.len() as f64;
    let mut acc = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for w in &samples.samples {
        for j in 0..p.len() {
            v[j] = p[j] + w[j];
        }
        let g = loss.loss_grad(&v)?;
        for j in 0..p.len() {
            acc[j] += g[j] / n;
        }
    }
    Ok(acc)
}

/// Unbiased W1 gradient estimate: the sample mean of dL(p+w, S)/dp under
/// Q^beta(w; S). Since w is held fixed, the partial derivative in p is the
/// loss gradient evaluated at v = p + w; only first-order derivatives appear.
pub fn grad_w1_estimator<L: InnerLoss>(
    p: &[f64],
    loss_full: &L,
    samples_beta: &PosteriorSamples,
) -> Result<Vec<f64>> {
    check_kind(samples_beta, PosteriorKind::BetaOnFull, "grad_w1_estimator")?;
    mean_loss_grad(p, loss_full, samples_beta)
}

/// Softmax-policy-gradient W2 estimate:
///
///   E_{Q^alpha}[dL(p+w, S)/dp]
///   + (alpha/beta) (E_{Q^beta} - E_{Q^alpha})[dL(p+w, S')/dp].
///
/// With alpha = beta, S' = S and the same sample set passed twice, the
/// second term is exactly zero (identical fixed-order means cancel) and the
/// estimator degenerates to the FOMAML-style first term.
pub fn grad_w2_estimator<L: InnerLoss>(
    p: &[f64],
    loss_full: &L,
    loss_inner: &L,
    alpha: f64,
    beta: f64,
    samples_alpha: &PosteriorSamples,
    samples_beta: &PosteriorSamples,
) -> Result<Vec<f64>> {
    check_kind(samples_alpha, PosteriorKind::AlphaOnInner, "grad_w2_estimator")?;
    check_kind(samples_beta, PosteriorKind::BetaOnFull, "grad_w2_estimator")?;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Config("grad_w2_estimator needs alpha, beta > 0".into()));
    }
    let mut grad = mean_loss_grad(p, loss_full, samples_alpha)?;
    let lead = mean_loss_grad(p, loss_inner, samples_beta)?;
    let chase = mean_loss_grad(p, loss_inner, samples_alpha)?;
    let r = alpha / beta;
    for j in 0..grad.len() {
        grad[j] += r * (lead[j] - chase[j]);
    }
    Ok(grad)
}

/// Both sides of the softmax surrogate inequality over one sample set:
/// with LD(v) = L(v, S) - (alpha/beta) L(v, S'),
///
///   exact     = -(1/beta) E_{Q^alpha}[-beta LD]   = E_{Q^alpha}[LD],
///   surrogate = -(1/beta) log E_{Q^alpha}[exp(-beta LD)],
///
/// and exact >= surrogate (Jensen), with equality when LD is constant over
/// the samples. The log-mean-exp is max-shifted so large beta LD cannot
/// overflow.
pub fn surrogate_gap<L: InnerLoss>(
    p: &[f64],
    loss_full: &L,
    loss_inner: &L,
    alpha: f64,
    beta: f64,
    samples_alpha: &PosteriorSamples,
) -> Result<(f64, f64)> {
    check_kind(samples_alpha, PosteriorKind::AlphaOnInner, "surrogate_gap")?;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Config("surrogate_gap needs alpha, beta > 0".into()));
    }
    let n = samples_alpha.samples.len() as f64;
    let mut v = vec![0.0; p.len()];
    let mut deltas = Vec::with_capacity(samples_alpha.samples.len());
    for w in &samples_alpha.samples {
        for j in 0..p.len() {
            v[j] = p[j] + w[j];
        }
        let ld = loss_full.loss_value(&v) - (alpha / beta) * loss_inner.loss_value(&v);
        if !ld.is_finite() {
            return Err(Error::NonFinite {
                context: "surrogate_gap loss delta".into(),
            });
        }
        deltas.push(ld);
    }
    let exact = deltas.iter().sum::<f64>() / n;
    let hi = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lme = (deltas.iter().map(|d| (-beta * (d - hi)).exp()).sum::<f64>() / n).ln()
        - beta * hi;
    let surrogate = -lme / beta;
    Ok((exact, surrogate))
}

/// Accuracy on one logged iteration of classifier training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyPoint {
    pub iteration: usize,
    pub accuracy: f64,
}

/// Settings for one-sample PACMAML classifier training on the toy
/// classification environment.
#[derive(Clone, Debug)]
pub struct ClassifierConfig {
    /// Observed tasks n.
    pub n_tasks: usize,
    pub iterations: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Inner chain; one-sample mode with a short step count.
    pub sampler: SamplerConfig,
    pub alpha: f64,
    pub beta: f64,
    pub xi_tilde: f64,
    pub sigma0_sq: f64,
    /// Warm-start each task's chains from the previous meta-iteration.
    pub warm_start: bool,
    /// Held-out tasks scored into the accuracy trace.
    pub eval_tasks: usize,
    pub log_every: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let sampler = SamplerConfig {
            step_size: 5e-2,
            ..SamplerConfig::one_sample(6, 1.0)
        };
        ClassifierConfig {
            n_tasks: 20,
            iterations: 300,
            batch: 5,
            adam: AdamConfig::default(),
            sampler,
            alpha: 5.0,
            beta: 10.0,
            xi_tilde: 1.0 / (20.0 * 10.0),
            sigma0_sq: 3.0,
            warm_start: true,
            eval_tasks: 20,
            log_every: 50,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.n_tasks == 0 {
            return Err(Error::Config("classifier n_tasks must be >= 1".into()));
        }
        if self.batch == 0 || self.batch > self.n_tasks {
            return Err(Error::Config(format!(
                "classifier batch must be in 1..=n_tasks, got {}",
                self.batch
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("classifier log_every must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("classifier needs alpha, beta > 0".into()));
        }
        if !(self.xi_tilde >= 0.0 && self.sigma0_sq > 0.0) {
            return Err(Error::Config(
                "classifier needs xi_tilde >= 0 and sigma0_sq > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Trained meta-parameters plus traces from [`pacmaml_train_classifier`].
#[derive(Clone, Debug)]
pub struct ClassifierResult {
    pub params: Vec<f64>,
    /// Objective column holds the one-sample estimate of the dominant W2
    /// term, mean L(p + w_alpha, S) over the batch, plus the prior ridge;
    /// a monitoring value, not the bound.
    pub trace: Vec<TracePoint>,
    pub accuracy: Vec<AccuracyPoint>,
    pub diverged_at: Option<usize>,
}

/// One-sample per-task adaptation: a short SGLD chain from w = 0 on the
/// task's adaptation set, final iterate only, scored on its test set.
pub fn pacmaml_adapted_accuracy(
    spec: &MlpSpec,
    p: &[f64],
    targets: &[TargetTask],
    alpha: f64,
    sampler: &SamplerConfig,
    rng: &mut Stream,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Config("pacmaml_adapted_accuracy: no target tasks".into()));
    }
    let one = SamplerConfig {
        burn_in: sampler.steps.saturating_sub(1),
        thin: 1,
        ..*sampler
    };
    let mut acc = 0.0;
    for t in targets {
        let loss = MlpSoftmaxLoss {
            spec,
            data: &t.train,
        };
        let s = sgld_sample(p, &loss, alpha, PosteriorKind::AlphaOnInner, &one, None, rng)?;
        let w = s.last();
        let v: Vec<f64> = p.iter().zip(w).map(|(pj, wj)| pj + wj).collect();
        acc += mlp_accuracy(spec, &v, &t.test);
    }
    Ok(acc / targets.len() as f64)
}

/// Train p with the one-sample W2 estimator on the toy classification
/// environment. Per meta-iteration and batch task: one draw from
/// Q^alpha(w; S') and one from Q^beta(w; S) (final SGLD iterates, chains
/// warm-started when configured), the Eq-style W2 gradient from those
/// single draws, plus the hyper-prior ridge xi_tilde p / sigma0_sq.
/// Divergence rolls back the last step and stops, flagged in the result.
pub fn pacmaml_train_classifier(
    spec: &MlpSpec,
    env: &TaskEnvironment,
    cfg: &ClassifierConfig,
    tree: &SeedTree,
) -> Result<ClassifierResult> {
    cfg.validate()?;
    if spec.input_dim() != env.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "classifier spec input".into(),
            expected: env.input_dim(),
            got: spec.input_dim(),
        });
    }
    let sets = sample_meta_train(env, cfg.n_tasks, &mut tree.stream(Domain::MetaTrainTasks, 0));
    let mut sub_rng = tree.stream(Domain::Subsample, 0);
    let pairs: Vec<SubsamplePair> = sets
        .iter()
        .map(|(task, full)| {
            subsample(env, task, full, env.m, SubsampleMode::Subset, &mut sub_rng)
        })
        .collect::<Result<_>>()?;
    let evals = sample_target_tasks(env, cfg.eval_tasks, &mut tree.stream(Domain::TargetTasks, 0));

    let mut params = spec.init(&mut tree.stream(Domain::Init, 0));
    let mut adam = Adam::new(cfg.adam, params.len());
    let mut batch_rng = tree.stream(Domain::Batch, 0);
    let mut sgld_rng = tree.stream(Domain::Sgld, 0);
    let mut warm_alpha: Vec<Option<Vec<f64>>> = vec![None; cfg.n_tasks];
    let mut warm_beta: Vec<Option<Vec<f64>>> = vec![None; cfg.n_tasks];
    let mut trace = Vec::new();
    let mut accuracy = Vec::new();
    let mut diverged_at = None;
    let started = std::time::Instant::now();

    for it in 0..cfg.iterations {
        let batch = batch_indices(cfg.n_tasks, cfg.batch, &mut batch_rng);
        let nb = batch.len() as f64;
        let mut grad: Vec<f64> = params
            .iter()
            .map(|pj| cfg.xi_tilde * pj / cfg.sigma0_sq)
            .collect();
        let mut monitor = cfg.xi_tilde
            * params.iter().map(|v| v * v).sum::<f64>()
            / (2.0 * cfg.sigma0_sq);
        let mut failed = false;
        for &ti in &batch {
            let loss_full = MlpSoftmaxLoss {
                spec,
                data: &pairs[ti].full,
            };
            let loss_inner = MlpSoftmaxLoss {
                spec,
                data: &pairs[ti].inner,
            };
            let step = (|| -> Result<Vec<f64>> {
                let sa = sgld_sample(
                    &params,
                    &loss_inner,
                    cfg.alpha,
                    PosteriorKind::AlphaOnInner,
                    &cfg.sampler,
                    warm_alpha[ti].as_deref(),
                    &mut sgld_rng,
                )?;
                let sb = sgld_sample(
                    &params,
                    &loss_full,
                    cfg.beta,
                    PosteriorKind::BetaOnFull,
                    &cfg.sampler,
                    warm_beta[ti].as_deref(),
                    &mut sgld_rng,
                )?;
                if cfg.warm_start {
                    warm_alpha[ti] = Some(sa.last().to_vec());
                    warm_beta[ti] = Some(sb.last().to_vec());
                }
                let v: Vec<f64> = params
                    .iter()
                    .zip(sa.last())
                    .map(|(pj, wj)| pj + wj)
                    .collect();
                monitor += loss_full.loss_value(&v) / nb;
                grad_w2_estimator(
                    &params,
                    &loss_full,
                    &loss_inner,
                    cfg.alpha,
                    cfg.beta,
                    &sa,
                    &sb,
                )
            })();
            match step {
                Ok(g) => {
                    for j in 0..grad.len() {
                        grad[j] += g[j] / nb;
                    }
                }
                Err(Error::NonFinite { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if failed || !grad_norm.is_finite() || !monitor.is_finite() {
            diverged_at = Some(it);
            break;
        }
        let prev = params.clone();
        adam.step(&mut params, &grad);
        if !params.iter().all(|v| v.is_finite()) {
            params = prev;
            diverged_at = Some(it);
            break;
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            trace.push(TracePoint {
                iteration: it,
                objective: monitor,
                grad_norm,
                wall_time: started.elapsed().as_secs_f64(),
            });
            let acc = pacmaml_adapted_accuracy(
                spec,
                &params,
                &evals,
                cfg.alpha,
                &cfg.sampler,
                &mut tree.stream(Domain::Eval, it as u64),
            )?;
            accuracy.push(AccuracyPoint {
                iteration: it,
                accuracy: acc,
            });
        }
    }
    Ok(ClassifierResult {
        params,
        trace,
        accuracy,
        diverged_at,
    })
}
