//! Experiment orchestration: grid search, cross-validation over target
//! tasks, bound sweeps over m_i, and plot-ready CSV emission.
//!
//! A grid run trains one model per (grid point, meta-train set, init seed)
//! and scores all of them on a single panel of target tasks shared by the
//! whole experiment. Temperatures are specified per example and scale with
//! the data they see: a hyper-posterior trained at beta = c m_i on
//! m_i-point tasks deploys at c m on an m-point target set, and the W2
//! base learner keeps alpha m / m' (exactly alpha when m' = m), so the
//! per-example weight of the likelihood is invariant between training and
//! deployment.
//!
//! Cross-validation splits the target panel into `folds` consecutive
//! blocks. Fold f's validation mean is taken over the other blocks and its
//! test mean over block f, so each task is tested exactly once per model.
//! Selection happens twice: the headline (beta, alpha) per m_i minimizes
//! the validation mean pooled over folds, sets, and seeds (ties broken by
//! smaller alpha, then beta), while the reported test curve is the honest
//! cross-validated one, averaging each fold's held-out mean at that fold's
//! own winner. Accuracy metrics flip the direction; everything else is
//! shared.
//!
//! Determinism contract: every sample is drawn from a seed-tree path that
//! names its scope. Target tasks hang off the root; meta-train sets and
//! subsample draws depend on (m_i, set) only; initialization and batch
//! order add the init seed. Grid points therefore share common random
//! numbers, turning hyperparameter comparisons into paired comparisons,
//! and a rerun of the same config is bit-identical whatever the worker
//! count: jobs run in a pool sized by `PACMETA_WORKERS`, but rows are
//! assembled in job order after the parallel map.

use crate::autodiff::mlp::MlpSpec;
use crate::bounds::{
    assemble_bound, delta_lambda_estimate, BoundConfig, BoundPath, BoundReport, NEGLECTED,
};
use crate::env::{
    sample_meta_train, sample_target_tasks, subsample, Family, SubsampleMode, SubsamplePair,
    TargetTask, TaskEnvironment,
};
use crate::error::{Error, Result};
use crate::gp::{target_rmse, GpModel};
use crate::meta::{
    adapt_gd, inner_optimal, meta_train, mlp_accuracy, mlp_rmse, AdamConfig, InnerOptConfig,
    MetaAlgorithm, ModelSpec, TaskLoss, TaskLossKind, TrainOptions, TrainResult,
};
use crate::rng::{Domain, SeedTree};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cmp::Ordering;
use std::path::Path;
use std::time::Instant;

/// Worker-pool size override; unset means the detected core count.
pub const WORKERS_ENV: &str = "PACMETA_WORKERS";

// Seed-tree scope labels. Stable: changing one rewires every stream below it.
const SCOPE_TARGETS: u64 = 1;
const SCOPE_SET: u64 = 2;
const SCOPE_BOUND: u64 = 3;

fn d_name() -> String {
    "experiment".into()
}
fn d_n() -> usize {
    20
}
fn d_m_i() -> Vec<usize> {
    vec![5, 10, 30, 50, 100]
}
fn d_beta_over_mi() -> Vec<f64> {
    vec![10.0, 30.0, 100.0]
}
fn d_alpha_over_beta() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
}
fn d_k() -> Vec<usize> {
    vec![1]
}
fn d_eta() -> Vec<f64> {
    vec![0.01]
}
fn d_sets() -> usize {
    2
}
fn d_init_seeds() -> usize {
    3
}
fn d_target_tasks() -> usize {
    20
}
fn d_folds() -> usize {
    4
}
fn d_iterations() -> usize {
    500
}
fn d_batch() -> usize {
    5
}
fn d_adam_lr() -> f64 {
    3e-3
}
fn d_sigma_sq() -> f64 {
    1.0
}
fn d_sigma0_sq() -> f64 {
    3.0
}
fn d_delta() -> f64 {
    0.1
}
fn d_lambda() -> f64 {
    f64::INFINITY
}
fn d_log_every() -> usize {
    100
}

/// One experiment, declaratively. `environment` and `algorithm` are the
/// only required keys; every other field defaults to the desk-scale
/// protocol (2 meta-train sets x 3 init seeds, 500 outer iterations) with
/// the published temperatures and grids. [`ExperimentConfig::paper_scale`]
/// restores the full 8 x 5 x 8000 protocol.
///
/// Tables (`environment`, `inner`) are declared last so the TOML
/// serialization used by manifests stays valid.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    #[serde(default = "d_name")]
    pub name: String,
    /// Root seed; every stream in the run derives from it.
    #[serde(default)]
    pub seed: u64,
    pub algorithm: MetaAlgorithm,
    /// Observed (meta-training) task count.
    #[serde(default = "d_n")]
    pub n: usize,
    /// Observed-task sizes to sweep.
    #[serde(default = "d_m_i")]
    pub m_i: Vec<usize>,
    /// Inner-set size m'; required by the algorithms that subsample
    /// (pacmaml, maml, fomaml), identity-subsampled otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_prime: Option<usize>,
    /// Grid for beta, as the per-example ratio beta / m_i.
    #[serde(default = "d_beta_over_mi")]
    pub beta_over_mi: Vec<f64>,
    /// Grid for alpha, as the ratio alpha / beta (pacmaml only).
    #[serde(default = "d_alpha_over_beta")]
    pub alpha_over_beta: Vec<f64>,
    /// Grid for the unrolled step count (maml, fomaml only).
    #[serde(default = "d_k")]
    pub k: Vec<usize>,
    /// Grid for the unrolled step size (maml, fomaml only).
    #[serde(default = "d_eta")]
    pub eta: Vec<f64>,
    /// Independent meta-train sets per grid point.
    #[serde(default = "d_sets")]
    pub sets: usize,
    /// Initialization seeds per meta-train set.
    #[serde(default = "d_init_seeds")]
    pub init_seeds: usize,
    /// Target-task panel size; shared by every model in the run.
    #[serde(default = "d_target_tasks")]
    pub target_tasks: usize,
    /// Cross-validation folds; must divide `target_tasks`.
    #[serde(default = "d_folds")]
    pub folds: usize,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    /// Tasks per outer-loop batch.
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_adam_lr")]
    pub adam_lr: f64,
    /// Prior variance sigma^2 of the Dirac/MAP family.
    #[serde(default = "d_sigma_sq")]
    pub sigma_sq: f64,
    /// Hyper-prior variance sigma_0^2.
    #[serde(default = "d_sigma0_sq")]
    pub sigma0_sq: f64,
    /// Confidence level delta of the bound.
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Hyper-level temperature; infinity drops 1/lambda from xi-tilde.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    pub environment: TaskEnvironment,
    /// Inner solver for the Reptile path (training and deployment).
    #[serde(default)]
    pub inner: InnerOptConfig,
}

impl ExperimentConfig {
    /// Parse and validate a TOML config.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Load a config file; also returns the SHA-256 of the raw bytes, which
    /// is what the manifest records.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let config = Self::from_toml(&text)?;
        Ok((config, sha256_hex(text.as_bytes())))
    }

    /// The full published protocol: 8 meta-train sets x 5 init seeds,
    /// 8000 outer iterations.
    pub fn paper_scale(mut self) -> Self {
        self.sets = 8;
        self.init_seeds = 5;
        self.iterations = 8000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if self.m_i.is_empty() {
            return Err(Error::Config("m_i grid must not be empty".into()));
        }
        for &mi in &self.m_i {
            if mi < self.environment.m {
                return Err(Error::Config(format!(
                    "m_i value {mi} is smaller than environment.m = {}",
                    self.environment.m
                )));
            }
        }
        if self.beta_over_mi.is_empty() {
            return Err(Error::Config("beta_over_mi grid must not be empty".into()));
        }
        for &b in &self.beta_over_mi {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!(
                    "beta_over_mi values must be positive and finite, got {b}"
                )));
            }
        }
        if self.sets == 0 || self.init_seeds == 0 {
            return Err(Error::Config("sets and init_seeds must be >= 1".into()));
        }
        if self.target_tasks == 0 {
            return Err(Error::Config("target_tasks must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if self.target_tasks % self.folds != 0 {
            return Err(Error::Config(format!(
                "folds ({}) must evenly divide target_tasks ({})",
                self.folds, self.target_tasks
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if !(self.adam_lr > 0.0 && self.adam_lr.is_finite()) {
            return Err(Error::Config("adam_lr must be positive and finite".into()));
        }
        if !(self.sigma_sq > 0.0) || !(self.sigma0_sq > 0.0) {
            return Err(Error::Config("sigma_sq and sigma0_sq must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config("delta must lie in (0, 1]".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive (infinity allowed)".into()));
        }
        self.inner.validate()?;
        let needs_m_prime = matches!(
            self.algorithm,
            MetaAlgorithm::Pacmaml | MetaAlgorithm::Maml | MetaAlgorithm::Fomaml
        );
        if needs_m_prime && self.m_prime.is_none() {
            return Err(Error::Config(format!(
                "m_prime is required for algorithm {}",
                self.algorithm.as_str()
            )));
        }
        if let Some(mp) = self.m_prime {
            if mp == 0 {
                return Err(Error::Config("m_prime must be >= 1".into()));
            }
            for &mi in &self.m_i {
                if mp > mi {
                    return Err(Error::Config(format!(
                        "m_prime ({mp}) exceeds m_i value {mi}"
                    )));
                }
            }
        }
        if self.algorithm == MetaAlgorithm::Pacmaml {
            if self.alpha_over_beta.is_empty() {
                return Err(Error::Config("alpha_over_beta grid must not be empty".into()));
            }
            for &a in &self.alpha_over_beta {
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::Config(format!(
                        "alpha_over_beta values must lie in (0, 1], got {a}"
                    )));
                }
            }
        }
        if matches!(self.algorithm, MetaAlgorithm::Maml | MetaAlgorithm::Fomaml) {
            if self.eta.is_empty() || self.k.is_empty() {
                return Err(Error::Config("eta and k grids must not be empty".into()));
            }
            for &e in &self.eta {
                if !(e > 0.0 && e.is_finite()) {
                    return Err(Error::Config(format!(
                        "eta values must be positive and finite, got {e}"
                    )));
                }
            }
            for &k in &self.k {
                if k == 0 {
                    return Err(Error::Config("k values must be >= 1".into()));
                }
            }
        }
        if self.algorithm.needs_gp()
            && !matches!(self.environment.family, Family::Sinusoid(_))
        {
            return Err(Error::Config(format!(
                "algorithm {} requires a regression environment",
                self.algorithm.as_str()
            )));
        }
        Ok(())
    }

    /// Hyperparameter grid for the configured algorithm, in emission order.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        match self.algorithm {
            MetaAlgorithm::Pacoh | MetaAlgorithm::Reptile | MetaAlgorithm::Pretrain => {
                for &b in &self.beta_over_mi {
                    points.push(GridPoint { beta_over_mi: b, alpha_over_beta: None, k: None, eta: None });
                }
            }
            MetaAlgorithm::Pacmaml => {
                for &b in &self.beta_over_mi {
                    for &a in &self.alpha_over_beta {
                        points.push(GridPoint {
                            beta_over_mi: b,
                            alpha_over_beta: Some(a),
                            k: None,
                            eta: None,
                        });
                    }
                }
            }
            MetaAlgorithm::Maml | MetaAlgorithm::Fomaml => {
                for &b in &self.beta_over_mi {
                    for &k in &self.k {
                        for &e in &self.eta {
                            points.push(GridPoint {
                                beta_over_mi: b,
                                alpha_over_beta: None,
                                k: Some(k),
                                eta: Some(e),
                            });
                        }
                    }
                }
            }
        }
        points
    }

    /// Larger metric is better exactly for accuracy environments.
    pub fn higher_is_better(&self) -> bool {
        matches!(self.environment.family, Family::ToyClassification(_))
    }

    /// The trainable family: GP hyper-network for the bound objectives,
    /// an MLP matching the environment's signature for the MAP family.
    pub fn model_spec(&self) -> ModelSpec {
        if self.algorithm.needs_gp() {
            ModelSpec::Gp(GpModel::sinusoid())
        } else {
            let (layers, kind) = match &self.environment.family {
                Family::Sinusoid(_) => (vec![1usize, 32, 32, 1], TaskLossKind::Regression),
                Family::ToyClassification(b) => {
                    (vec![2usize, 32, 32, b.ways], TaskLossKind::Classification)
                }
            };
            ModelSpec::Mlp { spec: MlpSpec::new(&layers), kind }
        }
    }

    fn bound_config(&self, m_i: usize, point: &GridPoint) -> BoundConfig {
        let beta = point.beta_over_mi * m_i as f64;
        // alpha is read only on the W2 path; beta is a valid placeholder.
        let alpha = point.alpha_over_beta.map_or(beta, |r| r * beta);
        BoundConfig {
            n: self.n,
            beta,
            alpha,
            lambda: self.lambda,
            delta: self.delta,
            sigma0_sq: self.sigma0_sq,
            sigma_sq: self.sigma_sq,
        }
    }

    fn train_options(&self, point: &GridPoint) -> TrainOptions {
        TrainOptions {
            iterations: self.iterations,
            batch: self.batch,
            adam: AdamConfig { lr: self.adam_lr, ..AdamConfig::default() },
            inner: self.inner,
            k: point.k.unwrap_or(1),
            eta: point.eta.unwrap_or(0.01),
            log_every: self.log_every,
        }
    }
}

/// One grid coordinate. Temperatures are stored as ratios; the absolute
/// beta and alpha depend on m_i.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub beta_over_mi: f64,
    pub alpha_over_beta: Option<f64>,
    pub k: Option<usize>,
    pub eta: Option<f64>,
}

impl GridPoint {
    pub fn beta(&self, m_i: usize) -> f64 {
        self.beta_over_mi * m_i as f64
    }

    pub fn alpha(&self, m_i: usize) -> Option<f64> {
        self.alpha_over_beta.map(|r| r * self.beta(m_i))
    }
}

/// One (grid point, fold) outcome of one trained model. Metrics are RMSE
/// for regression environments and accuracy for classification ones; bound
/// columns are present exactly for the GP algorithms. A failed run keeps
/// its rows (NaN metrics, `error` set) so the rest of the grid survives.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub algorithm: MetaAlgorithm,
    pub m_i: usize,
    pub beta: f64,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub eta: Option<f64>,
    pub set: usize,
    pub init_seed: usize,
    pub fold: usize,
    pub validation: f64,
    pub test: f64,
    pub w_term: Option<f64>,
    pub kl_term: Option<f64>,
    pub conf_term: Option<f64>,
    pub bound_total: Option<f64>,
    /// Seconds for the whole job (training + evaluation), repeated on each
    /// of its fold rows.
    pub wall_time: f64,
    pub error: Option<String>,
}

const RESULT_COLUMNS: [&str; 17] = [
    "algorithm",
    "m_i",
    "beta",
    "alpha",
    "k",
    "eta",
    "set",
    "init_seed",
    "fold",
    "validation",
    "test",
    "w_term",
    "kl_term",
    "conf_term",
    "bound_total",
    "wall_time",
    "error",
];

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn row_record(row: &ResultRow, wall_time: bool) -> Vec<String> {
    let mut rec = vec![
        row.algorithm.as_str().to_string(),
        row.m_i.to_string(),
        row.beta.to_string(),
        opt_str(&row.alpha),
        opt_str(&row.k),
        opt_str(&row.eta),
        row.set.to_string(),
        row.init_seed.to_string(),
        row.fold.to_string(),
        row.validation.to_string(),
        row.test.to_string(),
        opt_str(&row.w_term),
        opt_str(&row.kl_term),
        opt_str(&row.conf_term),
        opt_str(&row.bound_total),
    ];
    if wall_time {
        rec.push(row.wall_time.to_string());
    }
    rec.push(row.error.clone().unwrap_or_default());
    rec
}

/// Full result table, wall times included.
pub fn write_results_csv<P: AsRef<Path>>(path: P, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(RESULT_COLUMNS)?;
    for row in rows {
        w.write_record(row_record(row, true))?;
    }
    w.flush()?;
    Ok(())
}

/// The same table without the wall-time column; two runs of the same
/// config produce byte-identical files.
pub fn write_metrics_csv<P: AsRef<Path>>(path: P, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let cols: Vec<&str> = RESULT_COLUMNS.iter().copied().filter(|c| *c != "wall_time").collect();
    w.write_record(cols)?;
    for row in rows {
        w.write_record(row_record(row, false))?;
    }
    w.flush()?;
    Ok(())
}

fn algorithm_from_str(s: &str) -> Result<MetaAlgorithm> {
    Ok(match s {
        "pacoh" => MetaAlgorithm::Pacoh,
        "pacmaml" => MetaAlgorithm::Pacmaml,
        "reptile" => MetaAlgorithm::Reptile,
        "maml" => MetaAlgorithm::Maml,
        "fomaml" => MetaAlgorithm::Fomaml,
        "pretrain" => MetaAlgorithm::Pretrain,
        other => return Err(Error::Config(format!("unknown algorithm {other:?}"))),
    })
}

fn parse_field<T: std::str::FromStr>(field: &str, col: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("results csv: bad {col} value {field:?}")))
}

fn parse_opt<T: std::str::FromStr>(field: &str, col: &str) -> Result<Option<T>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_field(field, col).map(Some)
    }
}

/// Read a table written by [`write_results_csv`] (or the metrics variant;
/// a missing wall-time column reads as zero).
pub fn read_results_csv<P: AsRef<Path>>(path: P) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Config(format!("results csv: missing column {name}")))
    };
    let idx: Vec<usize> = RESULT_COLUMNS
        .iter()
        .filter(|c| **c != "wall_time")
        .map(|c| need(c))
        .collect::<Result<_>>()?;
    let wall = col("wall_time");
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |k: usize| record.get(idx[k]).unwrap_or("");
        let error = get(15);
        rows.push(ResultRow {
            algorithm: algorithm_from_str(get(0))?,
            m_i: parse_field(get(1), "m_i")?,
            beta: parse_field(get(2), "beta")?,
            alpha: parse_opt(get(3), "alpha")?,
            k: parse_opt(get(4), "k")?,
            eta: parse_opt(get(5), "eta")?,
            set: parse_field(get(6), "set")?,
            init_seed: parse_field(get(7), "init_seed")?,
            fold: parse_field(get(8), "fold")?,
            validation: parse_field(get(9), "validation")?,
            test: parse_field(get(10), "test")?,
            w_term: parse_opt(get(11), "w_term")?,
            kl_term: parse_opt(get(12), "kl_term")?,
            conf_term: parse_opt(get(13), "conf_term")?,
            bound_total: parse_opt(get(14), "bound_total")?,
            wall_time: match wall {
                Some(i) => parse_field(record.get(i).unwrap_or("0"), "wall_time")?,
                None => 0.0,
            },
            error: if error.is_empty() { None } else { Some(error.to_string()) },
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug)]
struct Job {
    m_i: usize,
    point: GridPoint,
    set: usize,
    init_seed: usize,
}

/// Per-fold (validation mean, test mean) of one model's per-task metrics;
/// fold f holds out block f. The blocks partition the panel, so across
/// folds each task is tested exactly once.
pub(crate) fn fold_split_means(per_task: &[f64], folds: usize) -> Vec<(f64, f64)> {
    assert!(folds >= 2 && per_task.len() % folds == 0 && !per_task.is_empty());
    let block = per_task.len() / folds;
    (0..folds)
        .map(|f| {
            let (mut vs, mut ts) = (0.0, 0.0);
            for (i, &x) in per_task.iter().enumerate() {
                if i / block == f {
                    ts += x;
                } else {
                    vs += x;
                }
            }
            (vs / (per_task.len() - block) as f64, ts / block as f64)
        })
        .collect()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn parse_workers(s: &str) -> Result<usize> {
    s.trim().parse::<usize>().ok().filter(|w| *w > 0).ok_or_else(|| {
        Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {s:?}"))
    })
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(s) => parse_workers(&s)?,
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Run the whole grid: every (m_i, grid point, set, init seed) job trains
/// one model and contributes one row per fold, in job order.
pub fn run_grid(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let tree = SeedTree::new(config.seed);
    let targets = sample_target_tasks(
        &config.environment,
        config.target_tasks,
        &mut tree.child(SCOPE_TARGETS).stream(Domain::TargetTasks, 0),
    );
    let mut jobs = Vec::new();
    for &m_i in &config.m_i {
        for &point in &config.grid_points() {
            for set in 0..config.sets {
                for init_seed in 0..config.init_seeds {
                    jobs.push(Job { m_i, point, set, init_seed });
                }
            }
        }
    }
    let pool = worker_pool()?;
    let rows: Vec<Vec<ResultRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_one(config, &tree, &targets, job))
            .collect()
    });
    Ok(rows.into_iter().flatten().collect())
}

fn run_one(
    config: &ExperimentConfig,
    tree: &SeedTree,
    targets: &[TargetTask],
    job: &Job,
) -> Vec<ResultRow> {
    let start = Instant::now();
    let outcome = train_and_eval(config, tree, targets, job);
    let wall = start.elapsed().as_secs_f64();
    match outcome {
        Ok((per_task, bound)) => fold_split_means(&per_task, config.folds)
            .into_iter()
            .enumerate()
            .map(|(fold, (validation, test))| ResultRow {
                algorithm: config.algorithm,
                m_i: job.m_i,
                beta: job.point.beta(job.m_i),
                alpha: job.point.alpha(job.m_i),
                k: job.point.k,
                eta: job.point.eta,
                set: job.set,
                init_seed: job.init_seed,
                fold,
                validation,
                test,
                w_term: bound.as_ref().map(|b| b.w_term),
                kl_term: bound.as_ref().map(|b| b.kl_term),
                conf_term: bound.as_ref().map(|b| b.conf_term),
                bound_total: bound.as_ref().map(|b| b.total),
                wall_time: wall,
                error: None,
            })
            .collect(),
        Err(e) => (0..config.folds)
            .map(|fold| ResultRow {
                algorithm: config.algorithm,
                m_i: job.m_i,
                beta: job.point.beta(job.m_i),
                alpha: job.point.alpha(job.m_i),
                k: job.point.k,
                eta: job.point.eta,
                set: job.set,
                init_seed: job.init_seed,
                fold,
                validation: f64::NAN,
                test: f64::NAN,
                w_term: None,
                kl_term: None,
                conf_term: None,
                bound_total: None,
                wall_time: wall,
                error: Some(e.to_string()),
            })
            .collect(),
    }
}

struct TrainedJob {
    model: ModelSpec,
    result: TrainResult,
    pairs: Vec<SubsamplePair>,
    bound_cfg: BoundConfig,
}

fn train_job(config: &ExperimentConfig, tree: &SeedTree, job: &Job) -> Result<TrainedJob> {
    let env_i = config.environment.with_m_obs(job.m_i)?;
    let set_tree = tree
        .child(SCOPE_SET)
        .child(job.m_i as u64)
        .child(job.set as u64);
    let tasks = sample_meta_train(&env_i, config.n, &mut set_tree.stream(Domain::MetaTrainTasks, 0));
    let m_prime = config.m_prime.unwrap_or(job.m_i);
    let mut sub_rng = set_tree.stream(Domain::Subsample, 0);
    let pairs: Vec<SubsamplePair> = tasks
        .iter()
        .map(|(task, full)| subsample(&env_i, task, full, m_prime, SubsampleMode::Subset, &mut sub_rng))
        .collect::<Result<_>>()?;
    let bound_cfg = config.bound_config(job.m_i, &job.point);
    let opts = config.train_options(&job.point);
    let model = config.model_spec();
    let run_tree = set_tree.child(job.init_seed as u64);
    let result = meta_train(&model, config.algorithm, &pairs, &bound_cfg, &opts, &run_tree)?;
    Ok(TrainedJob { model, result, pairs, bound_cfg })
}

fn train_and_eval(
    config: &ExperimentConfig,
    tree: &SeedTree,
    targets: &[TargetTask],
    job: &Job,
) -> Result<(Vec<f64>, Option<BoundReport>)> {
    let trained = train_job(config, tree, job)?;
    if let Some(iteration) = trained.result.diverged_at {
        return Err(Error::Diverged { iteration });
    }
    let per_task = eval_targets(config, &trained.model, &trained.result.params, targets, job)?;
    let bound = match &trained.model {
        ModelSpec::Gp(gp) => {
            let path = match config.algorithm {
                MetaAlgorithm::Pacoh => BoundPath::Pacoh,
                MetaAlgorithm::Pacmaml => BoundPath::Pacmaml,
                _ => unreachable!("only the bound objectives train a GP"),
            };
            Some(assemble_bound(
                path,
                gp,
                &trained.result.params,
                &trained.pairs,
                &trained.bound_cfg,
                None,
                job.m_i,
                job.init_seed as u64,
            )?)
        }
        ModelSpec::Mlp { .. } => None,
    };
    Ok((per_task, bound))
}

/// Score one trained model on every target task. Deployment keeps the
/// training run's per-example temperature: pacoh adapts at (beta/m_i) m,
/// pacmaml at alpha m/m', reptile solves its proximal problem at
/// (beta/m_i) m sigma^2, maml and fomaml replay their k eta-steps, and
/// pretrain deploys the shared initialization as is.
fn eval_targets(
    config: &ExperimentConfig,
    model: &ModelSpec,
    params: &[f64],
    targets: &[TargetTask],
    job: &Job,
) -> Result<Vec<f64>> {
    let m = config.environment.m as f64;
    targets
        .iter()
        .map(|t| match model {
            ModelSpec::Gp(gp) => {
                let gamma = match config.algorithm {
                    MetaAlgorithm::Pacoh => job.point.beta_over_mi * m,
                    MetaAlgorithm::Pacmaml => {
                        let alpha = job.point.alpha(job.m_i).expect("pacmaml grid point");
                        alpha * m / config.m_prime.unwrap_or(job.m_i) as f64
                    }
                    _ => unreachable!("only the bound objectives train a GP"),
                };
                target_rmse(gp, params, &t.train, &t.test, gamma)
            }
            ModelSpec::Mlp { spec, kind } => {
                let loss = TaskLoss::new(*kind, spec, &t.train);
                let q = match config.algorithm {
                    MetaAlgorithm::Reptile => {
                        inner_optimal(
                            params,
                            &loss,
                            job.point.beta_over_mi * m,
                            config.sigma_sq,
                            &config.inner,
                        )?
                        .q
                    }
                    MetaAlgorithm::Maml | MetaAlgorithm::Fomaml => adapt_gd(
                        &loss,
                        params,
                        job.point.k.expect("maml grid point"),
                        job.point.eta.expect("maml grid point"),
                    )?,
                    MetaAlgorithm::Pretrain => params.to_vec(),
                    _ => unreachable!("GP algorithms do not reach the MLP arm"),
                };
                Ok(match kind {
                    TaskLossKind::Regression => mlp_rmse(spec, &q, &t.test),
                    TaskLossKind::Classification => mlp_accuracy(spec, &q, &t.test),
                })
            }
        })
        .collect()
}

/// Train the first job of the grid (first m_i, first grid point, set 0,
/// seed 0) and return its trace; the model and streams are exactly those
/// the full grid would use for that job.
pub fn train_single(config: &ExperimentConfig) -> Result<TrainResult> {
    config.validate()?;
    let tree = SeedTree::new(config.seed);
    let job = Job {
        m_i: config.m_i[0],
        point: config.grid_points()[0],
        set: 0,
        init_seed: 0,
    };
    Ok(train_job(config, &tree, &job)?.result)
}

/// The cross-validated choice for one m_i: the headline grid point with
/// its pooled validation mean, and the honest test estimate from per-fold
/// winners. `replicates` counts the (fold, set, seed) test values pooled
/// into the estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub algorithm: MetaAlgorithm,
    pub m_i: usize,
    pub beta: f64,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub eta: Option<f64>,
    pub validation: f64,
    pub test: f64,
    pub test_se: f64,
    pub replicates: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct PointKey {
    beta: u64,
    alpha: u64,
    k: u64,
    eta: u64,
}

impl PointKey {
    fn of(row: &ResultRow) -> Self {
        PointKey {
            beta: row.beta.to_bits(),
            alpha: row.alpha.map_or(u64::MAX, f64::to_bits),
            k: row.k.map_or(u64::MAX, |k| k as u64),
            eta: row.eta.map_or(u64::MAX, f64::to_bits),
        }
    }
}

struct Group<'a> {
    key: PointKey,
    beta: f64,
    alpha: Option<f64>,
    k: Option<usize>,
    eta: Option<f64>,
    rows: Vec<&'a ResultRow>,
}

fn opt_f64_cmp(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal),
    }
}

// Deterministic tie rule: smaller alpha, then beta, then eta, then k.
fn tie_order(a: &Group, b: &Group) -> Ordering {
    opt_f64_cmp(a.alpha, b.alpha)
        .then(a.beta.partial_cmp(&b.beta).unwrap_or(Ordering::Equal))
        .then(opt_f64_cmp(a.eta, b.eta))
        .then(a.k.cmp(&b.k))
}

/// Cross-validate a result table: per m_i, check the grid is complete,
/// drop failed points, and select as described in the module docs.
pub fn crossval_select(rows: &[ResultRow], config: &ExperimentConfig) -> Result<Vec<Selection>> {
    config.validate()?;
    let need = config.sets * config.init_seeds * config.folds;
    let sign = if config.higher_is_better() { -1.0 } else { 1.0 };
    let mut selections = Vec::with_capacity(config.m_i.len());
    for &m_i in &config.m_i {
        let mut groups: Vec<Group> = Vec::new();
        for row in rows.iter().filter(|r| r.m_i == m_i) {
            if row.algorithm != config.algorithm {
                return Err(Error::Config(format!(
                    "results table holds algorithm {}, config says {}",
                    row.algorithm.as_str(),
                    config.algorithm.as_str()
                )));
            }
            let key = PointKey::of(row);
            match groups.iter_mut().find(|g| g.key == key) {
                Some(g) => g.rows.push(row),
                None => groups.push(Group {
                    key,
                    beta: row.beta,
                    alpha: row.alpha,
                    k: row.k,
                    eta: row.eta,
                    rows: vec![row],
                }),
            }
        }
        if groups.is_empty() {
            return Err(Error::IncompleteGrid(format!("no rows for m_i = {m_i}")));
        }
        for g in &groups {
            // Exactly one row per (set, init seed, fold), no duplicates.
            let mut seen = vec![false; need];
            if g.rows.len() != need {
                return Err(Error::IncompleteGrid(format!(
                    "m_i = {m_i}, beta = {}, alpha = {:?}: expected {need} rows, found {}",
                    g.beta,
                    g.alpha,
                    g.rows.len()
                )));
            }
            for r in &g.rows {
                let in_range =
                    r.set < config.sets && r.init_seed < config.init_seeds && r.fold < config.folds;
                let idx = (r.set * config.init_seeds + r.init_seed) * config.folds + r.fold;
                if !in_range || seen[idx] {
                    return Err(Error::IncompleteGrid(format!(
                        "m_i = {m_i}, beta = {}: bad or duplicate (set {}, init_seed {}, fold {})",
                        g.beta, r.set, r.init_seed, r.fold
                    )));
                }
                seen[idx] = true;
            }
        }
        struct Scored<'a, 'b> {
            group: &'b Group<'a>,
            pooled: f64,
            fold_val: Vec<f64>,
        }
        let scored: Vec<Scored> = groups
            .iter()
            .filter(|g| {
                g.rows
                    .iter()
                    .all(|r| r.error.is_none() && r.validation.is_finite() && r.test.is_finite())
            })
            .map(|group| {
                let pooled = group.rows.iter().map(|r| r.validation).sum::<f64>()
                    / group.rows.len() as f64;
                let fold_val = (0..config.folds)
                    .map(|f| {
                        let vals: Vec<f64> = group
                            .rows
                            .iter()
                            .filter(|r| r.fold == f)
                            .map(|r| r.validation)
                            .collect();
                        vals.iter().sum::<f64>() / vals.len() as f64
                    })
                    .collect();
                Scored { group, pooled, fold_val }
            })
            .collect();
        if scored.is_empty() {
            return Err(Error::IncompleteGrid(format!(
                "m_i = {m_i}: every grid point failed"
            )));
        }
        let by = |va: f64, vb: f64, a: &Scored, b: &Scored| {
            (sign * va)
                .partial_cmp(&(sign * vb))
                .unwrap_or(Ordering::Equal)
                .then_with(|| tie_order(a.group, b.group))
        };
        let best = scored
            .iter()
            .min_by(|a, b| by(a.pooled, b.pooled, a, b))
            .unwrap();
        let mut tests = Vec::with_capacity(need);
        for f in 0..config.folds {
            let winner = scored
                .iter()
                .min_by(|a, b| by(a.fold_val[f], b.fold_val[f], a, b))
                .unwrap();
            tests.extend(
                winner
                    .group
                    .rows
                    .iter()
                    .filter(|r| r.fold == f)
                    .map(|r| r.test),
            );
        }
        let (test, test_se) = mean_se(&tests);
        selections.push(Selection {
            algorithm: config.algorithm,
            m_i,
            beta: best.group.beta,
            alpha: best.group.alpha,
            k: best.group.k,
            eta: best.group.eta,
            validation: best.pooled,
            test,
            test_se,
            replicates: tests.len(),
        });
    }
    Ok(selections)
}

/// One row per m_i: the selected hyperparameters and the test estimate.
pub fn write_selection_csv<P: AsRef<Path>>(path: P, selections: &[Selection]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record([
        "algorithm",
        "m_i",
        "beta",
        "alpha",
        "k",
        "eta",
        "validation",
        "test",
        "test_se",
        "replicates",
    ])?;
    for s in selections {
        w.write_record([
            s.algorithm.as_str().to_string(),
            s.m_i.to_string(),
            s.beta.to_string(),
            opt_str(&s.alpha),
            opt_str(&s.k),
            opt_str(&s.eta),
            s.validation.to_string(),
            s.test.to_string(),
            s.test_se.to_string(),
            s.replicates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Bound-sweep settings: fixed temperature ratios, replicate count, and
/// the Monte-Carlo budget for the shift estimate on the W1 path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub beta_over_mi: f64,
    pub alpha_over_beta: f64,
    /// Independent (meta-train set, init) replicates per (path, m_i).
    pub seeds: usize,
    /// Shift-estimate draws per W1 row; 0 disables the estimate.
    pub delta_mc: usize,
    /// Fresh evaluation points per shift draw.
    pub delta_eval: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            beta_over_mi: 30.0,
            alpha_over_beta: 0.2,
            seeds: 3,
            delta_mc: 500,
            delta_eval: 100,
        }
    }
}

impl SweepOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_over_mi > 0.0 && self.beta_over_mi.is_finite()) {
            return Err(Error::Config("sweep beta_over_mi must be positive".into()));
        }
        if !(self.alpha_over_beta > 0.0 && self.alpha_over_beta <= 1.0) {
            return Err(Error::Config("sweep alpha_over_beta must lie in (0, 1]".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("sweep seeds must be >= 1".into()));
        }
        if self.delta_mc > 0 && self.delta_eval == 0 {
            return Err(Error::Config("sweep delta_eval must be >= 1".into()));
        }
        Ok(())
    }
}

/// Train and assemble both bound paths over the m_i sweep. All points of
/// one replicate share the task functions, the initialization, the batch
/// order, and the shift-estimate draws; each task's dataset at m_i is a
/// prefix of one master draw, and S' is its first m' examples. Examples
/// are i.i.d., so every prefix has the right marginal law, while both the
/// path comparison at fixed m_i and adjacent m_i comparisons along a
/// curve are paired; only the objective and the temperatures vary.
pub fn bound_sweep(config: &ExperimentConfig, sweep: &SweepOptions) -> Result<Vec<BoundReport>> {
    config.validate()?;
    sweep.validate()?;
    if !matches!(config.environment.family, Family::Sinusoid(_)) {
        return Err(Error::Config(
            "bound_sweep requires a regression environment".into(),
        ));
    }
    let m_prime = config.m_prime.unwrap_or(config.environment.m);
    for &mi in &config.m_i {
        if m_prime > mi {
            return Err(Error::Config(format!(
                "m_prime ({m_prime}) exceeds m_i value {mi}"
            )));
        }
    }
    let gp = GpModel::sinusoid();
    let tree = SeedTree::new(config.seed);
    let mut jobs = Vec::new();
    for path in [BoundPath::Pacoh, BoundPath::Pacmaml] {
        for &m_i in &config.m_i {
            for r in 0..sweep.seeds {
                jobs.push((path, m_i, r));
            }
        }
    }
    let pool = worker_pool()?;
    let reports: Vec<Result<BoundReport>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(path, m_i, r)| sweep_one(config, sweep, &gp, &tree, path, m_i, r, m_prime))
            .collect()
    });
    reports.into_iter().collect()
}

#[allow(clippy::too_many_arguments)]
fn sweep_one(
    config: &ExperimentConfig,
    sweep: &SweepOptions,
    gp: &GpModel,
    tree: &SeedTree,
    path: BoundPath,
    m_i: usize,
    r: usize,
    m_prime: usize,
) -> Result<BoundReport> {
    let m_max = config.m_i.iter().copied().max().unwrap_or(m_i).max(m_i);
    let env_max = config.environment.with_m_obs(m_max)?;
    // The replicate scope excludes m_i and the path on purpose: prefix
    // nesting continues the same stream, so S at m_i is the master draw
    // truncated, and S' is its first m' points at every m_i.
    let rep_tree = tree.child(SCOPE_BOUND).child(r as u64);
    let masters =
        sample_meta_train(&env_max, config.n, &mut rep_tree.stream(Domain::MetaTrainTasks, 0));
    let prefix: Vec<usize> = (0..m_i).collect();
    let inner: Vec<usize> = (0..m_prime).collect();
    let pairs: Vec<SubsamplePair> = masters
        .iter()
        .map(|(_, full)| SubsamplePair {
            full: full.select(&prefix),
            inner: full.select(&inner),
            mode: SubsampleMode::Subset,
        })
        .collect();
    let beta = sweep.beta_over_mi * m_i as f64;
    let bound_cfg = BoundConfig {
        n: config.n,
        beta,
        alpha: sweep.alpha_over_beta * beta,
        lambda: config.lambda,
        delta: config.delta,
        sigma0_sq: config.sigma0_sq,
        sigma_sq: config.sigma_sq,
    };
    let algorithm = match path {
        BoundPath::Pacoh => MetaAlgorithm::Pacoh,
        BoundPath::Pacmaml => MetaAlgorithm::Pacmaml,
    };
    let opts = TrainOptions {
        iterations: config.iterations,
        batch: config.batch,
        adam: AdamConfig { lr: config.adam_lr, ..AdamConfig::default() },
        inner: config.inner,
        k: 1,
        eta: 0.01,
        log_every: config.log_every,
    };
    let model = ModelSpec::Gp(gp.clone());
    let trained = meta_train(&model, algorithm, &pairs, &bound_cfg, &opts, &rep_tree)?;
    if let Some(iteration) = trained.diverged_at {
        return Err(Error::Diverged { iteration });
    }
    let delta = match path {
        BoundPath::Pacoh if sweep.delta_mc > 0 => {
            let env_target = config.environment.with_m_obs(config.environment.m)?;
            let env_i = config.environment.with_m_obs(m_i)?;
            let mut rng = rep_tree.stream(Domain::DeltaLambda, 0);
            Some(delta_lambda_estimate(
                gp,
                &trained.params,
                &env_target,
                &env_i,
                config.lambda,
                beta,
                sweep.delta_mc,
                sweep.delta_eval,
                &mut rng,
            )?)
        }
        _ => None,
    };
    assemble_bound(
        path,
        gp,
        &trained.params,
        &pairs,
        &bound_cfg,
        delta.as_ref(),
        m_i,
        r as u64,
    )
}

/// Read back a table written by `write_bound_reports`.
pub fn read_bound_reports<P: AsRef<Path>>(path: P) -> Result<Vec<BoundReport>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let mut reports = Vec::new();
    for record in reader.records() {
        let record = record?;
        let get = |i: usize| record.get(i).unwrap_or("");
        let path = match get(0) {
            "pacoh" => BoundPath::Pacoh,
            "pacmaml" => BoundPath::Pacmaml,
            other => return Err(Error::Config(format!("unknown bound path {other:?}"))),
        };
        reports.push(BoundReport {
            path,
            m_i: parse_field(get(1), "m_i")?,
            beta: parse_field(get(2), "beta")?,
            alpha: parse_field(get(3), "alpha")?,
            w_term: parse_field(get(4), "w_term")?,
            kl_term: parse_field(get(5), "kl_term")?,
            conf_term: parse_field(get(6), "conf_term")?,
            delta_lambda: parse_field(get(7), "delta_lambda")?,
            total: parse_field(get(8), "total")?,
            seed: parse_field(get(9), "seed")?,
            neglected: NEGLECTED,
        });
    }
    Ok(reports)
}

/// One aggregated curve point: mean and standard error of the bound total
/// over replicates.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub path: BoundPath,
    pub m_i: usize,
    pub total: f64,
    pub se: f64,
    pub n: usize,
}

/// Aggregate sweep rows into (path, m_i) curve points, paths in report
/// order and m_i ascending.
pub fn bound_curve(reports: &[BoundReport]) -> Vec<CurvePoint> {
    let mut keys: Vec<(BoundPath, usize)> = Vec::new();
    for r in reports {
        if !keys.contains(&(r.path, r.m_i)) {
            keys.push((r.path, r.m_i));
        }
    }
    let rank = |path: BoundPath| match path {
        BoundPath::Pacoh => 0u8,
        BoundPath::Pacmaml => 1,
    };
    keys.sort_by_key(|(path, m_i)| (rank(*path), *m_i));
    keys.into_iter()
        .map(|(path, m_i)| {
            let totals: Vec<f64> = reports
                .iter()
                .filter(|r| r.path == path && r.m_i == m_i)
                .map(|r| r.total)
                .collect();
            let (total, se) = mean_se(&totals);
            CurvePoint { path, m_i, total, se, n: totals.len() }
        })
        .collect()
}

/// Plot-ready curve table with columns (path, m_i, total, se, n).
pub fn write_bound_curve_csv<P: AsRef<Path>>(path: P, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["path", "m_i", "total", "se", "n"])?;
    for p in points {
        w.write_record([
            p.path.as_str().to_string(),
            p.m_i.to_string(),
            p.total.to_string(),
            p.se.to_string(),
            p.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct JobRecord {
    pub m_i: usize,
    pub beta: f64,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub eta: Option<f64>,
    pub sets: usize,
    pub init_seeds: usize,
}

/// Everything needed to re-run any row in isolation: the full config (as
/// TOML text, hash alongside), the root seed, and the job listing. No
/// timestamps, so reruns rewrite it byte-identically.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub name: String,
    pub crate_version: &'static str,
    pub seed: u64,
    pub config_sha256: String,
    pub config_toml: String,
    pub jobs: Vec<JobRecord>,
    pub outputs: Vec<String>,
}

impl Manifest {
    /// `config_sha256` should hash the bytes the config was loaded from;
    /// for programmatic configs pass the hash of `config_toml` itself.
    pub fn new(
        config: &ExperimentConfig,
        config_sha256: String,
        outputs: Vec<String>,
    ) -> Result<Self> {
        let config_toml = toml::to_string(config)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        let mut jobs = Vec::new();
        for &m_i in &config.m_i {
            for point in config.grid_points() {
                jobs.push(JobRecord {
                    m_i,
                    beta: point.beta(m_i),
                    alpha: point.alpha(m_i),
                    k: point.k,
                    eta: point.eta,
                    sets: config.sets,
                    init_seeds: config.init_seeds,
                });
            }
        }
        Ok(Manifest {
            name: config.name.clone(),
            crate_version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config_sha256,
            config_toml,
            jobs,
            outputs,
        })
    }

    pub fn write<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN_SINUSOID: &str = r#"
        algorithm = "pacoh"

        [environment]
        family = "sinusoid"
        m = 5
        m_obs = 5
        noise = 0.1
    "#;

    fn tiny_pretrain_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        config.algorithm = MetaAlgorithm::Pretrain;
        config.environment.m = 2;
        config.environment.m_obs = 2;
        config.n = 3;
        config.m_i = vec![2];
        config.beta_over_mi = vec![30.0];
        config.sets = 1;
        config.init_seeds = 1;
        config.target_tasks = 4;
        config.folds = 2;
        config.iterations = 0;
        config.validate().unwrap();
        config
    }

    #[test]
    fn config_defaults_match_protocol() {
        let config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        assert_eq!(config.name, "experiment");
        assert_eq!(config.seed, 0);
        assert_eq!(config.n, 20);
        assert_eq!(config.m_i, vec![5, 10, 30, 50, 100]);
        assert_eq!(config.beta_over_mi, vec![10.0, 30.0, 100.0]);
        assert_eq!(config.alpha_over_beta, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!((config.sets, config.init_seeds), (2, 3));
        assert_eq!((config.target_tasks, config.folds), (20, 4));
        assert_eq!(config.batch, 5);
        assert_eq!(config.adam_lr, 3e-3);
        assert_eq!(config.sigma0_sq, 3.0);
        assert_eq!(config.delta, 0.1);
        assert!(config.lambda.is_infinite());
        assert!(!config.higher_is_better());

        let paper = config.paper_scale();
        assert_eq!((paper.sets, paper.init_seeds, paper.iterations), (8, 5, 8000));
    }

    #[test]
    fn config_errors_name_the_field() {
        let missing = "[environment]\nfamily = \"sinusoid\"\nm = 5\nm_obs = 5\n";
        let err = ExperimentConfig::from_toml(missing).unwrap_err().to_string();
        assert!(err.contains("algorithm"), "{err}");

        let mut config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        config.algorithm = MetaAlgorithm::Pacmaml;
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("m_prime"), "{err}");

        let mut config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        config.folds = 3;
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("folds"), "{err}");

        let mut config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        config.m_i = vec![3];
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("m_i"), "{err}");

        let mut config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        config.environment = TaskEnvironment::toy_classification(5, 5, 5).unwrap();
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("regression"), "{err}");
    }

    #[test]
    fn grid_points_enumerate_per_algorithm() {
        let mut config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        assert_eq!(config.grid_points().len(), 3);

        config.algorithm = MetaAlgorithm::Pacmaml;
        config.m_prime = Some(5);
        assert_eq!(config.grid_points().len(), 18);
        let p = config.grid_points()[0];
        assert_eq!(p.beta(10), 100.0);
        assert_eq!(p.alpha(10), Some(10.0));

        config.algorithm = MetaAlgorithm::Maml;
        config.k = vec![1, 2];
        config.eta = vec![0.01, 0.05];
        assert_eq!(config.grid_points().len(), 3 * 2 * 2);
    }

    #[test]
    fn fold_split_is_a_partition() {
        let per_task: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let folds = fold_split_means(&per_task, 4);
        assert_eq!(folds.len(), 4);
        // Block f holds tasks 5f..5f+5; its mean is 5f + 2.
        for (f, &(val, test)) in folds.iter().enumerate() {
            assert!((test - (5.0 * f as f64 + 2.0)).abs() < 1e-12);
            let expect_val = (190.0 - 5.0 * (5.0 * f as f64 + 2.0)) / 15.0;
            assert!((val - expect_val).abs() < 1e-12);
        }
        // Test blocks cover the panel exactly once.
        let total: f64 = folds.iter().map(|(_, t)| t * 5.0).sum();
        assert!((total - 190.0).abs() < 1e-12);
    }

    fn planted_row(
        m_i: usize,
        beta: f64,
        alpha: f64,
        set: usize,
        init_seed: usize,
        fold: usize,
        validation: f64,
        test: f64,
    ) -> ResultRow {
        ResultRow {
            algorithm: MetaAlgorithm::Pacmaml,
            m_i,
            beta,
            alpha: Some(alpha),
            k: None,
            eta: None,
            set,
            init_seed,
            fold,
            validation,
            test,
            w_term: None,
            kl_term: None,
            conf_term: None,
            bound_total: None,
            wall_time: 0.0,
            error: None,
        }
    }

    fn planted_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        config.algorithm = MetaAlgorithm::Pacmaml;
        config.m_prime = Some(5);
        config.m_i = vec![5];
        config.beta_over_mi = vec![2.0, 4.0];
        config.alpha_over_beta = vec![0.5, 1.0];
        config.sets = 1;
        config.init_seeds = 1;
        config.folds = 2;
        config.target_tasks = 4;
        config
    }

    #[test]
    fn crossval_recovers_planted_optimum() {
        let config = planted_config();
        let mut rows = Vec::new();
        // Four points; (beta = 20, alpha = 20) planted best everywhere.
        for (beta, alpha) in [(10.0, 5.0), (10.0, 10.0), (20.0, 10.0), (20.0, 20.0)] {
            let base = if (beta, alpha) == (20.0, 20.0) { 0.1 } else { 1.0 };
            for fold in 0..2 {
                rows.push(planted_row(5, beta, alpha, 0, 0, fold, base, base + 0.01));
            }
        }
        let sel = crossval_select(&rows, &config).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].beta, 20.0);
        assert_eq!(sel[0].alpha, Some(20.0));
        assert!((sel[0].validation - 0.1).abs() < 1e-12);
        assert!((sel[0].test - 0.11).abs() < 1e-12);
        assert_eq!(sel[0].replicates, 2);
    }

    #[test]
    fn crossval_ties_prefer_smaller_alpha_then_beta() {
        let config = planted_config();
        let mut rows = Vec::new();
        for (beta, alpha) in [(10.0, 5.0), (10.0, 10.0), (20.0, 10.0), (20.0, 20.0)] {
            for fold in 0..2 {
                rows.push(planted_row(5, beta, alpha, 0, 0, fold, 1.0, 1.0));
            }
        }
        let sel = crossval_select(&rows, &config).unwrap();
        assert_eq!((sel[0].alpha, sel[0].beta), (Some(5.0), 10.0));

        // Same alpha twice: smaller beta wins.
        let mut rows = Vec::new();
        for (beta, alpha) in [(20.0, 10.0), (10.0, 10.0)] {
            for fold in 0..2 {
                rows.push(planted_row(5, beta, alpha, 0, 0, fold, 1.0, 1.0));
            }
        }
        let mut config = planted_config();
        config.alpha_over_beta = vec![0.5, 1.0];
        let sel = crossval_select(&rows, &config).unwrap();
        assert_eq!((sel[0].alpha, sel[0].beta), (Some(10.0), 10.0));
    }

    #[test]
    fn crossval_per_fold_winners_build_the_test_curve() {
        let config = planted_config();
        let mut rows = Vec::new();
        // Point A wins fold 0, point B wins fold 1; the pooled headline is
        // A, but the test estimate mixes each fold's own winner.
        for (beta, alpha, v0, v1, t0, t1) in [
            (10.0, 5.0, 0.1, 0.9, 0.3, 0.8),
            (10.0, 10.0, 0.8, 0.2, 0.6, 0.4),
            (20.0, 10.0, 2.0, 2.0, 2.0, 2.0),
            (20.0, 20.0, 2.0, 2.0, 2.0, 2.0),
        ] {
            rows.push(planted_row(5, beta, alpha, 0, 0, 0, v0, t0));
            rows.push(planted_row(5, beta, alpha, 0, 0, 1, v1, t1));
        }
        let sel = crossval_select(&rows, &config).unwrap();
        // Pooled: A = 0.5, B = 0.5 -> tie, smaller alpha (A) wins headline.
        assert_eq!(sel[0].alpha, Some(5.0));
        // Fold 0 winner A (0.1 < 0.8), fold 1 winner B (0.2 < 0.9).
        let expect = (0.3 + 0.4) / 2.0;
        assert!((sel[0].test - expect).abs() < 1e-12);
    }

    #[test]
    fn crossval_flags_incomplete_and_failed_grids() {
        let config = planted_config();
        // Missing one fold row.
        let rows = vec![planted_row(5, 10.0, 5.0, 0, 0, 0, 1.0, 1.0)];
        match crossval_select(&rows, &config) {
            Err(Error::IncompleteGrid(msg)) => assert!(msg.contains("expected"), "{msg}"),
            other => panic!("expected IncompleteGrid, got {other:?}"),
        }

        // All points errored.
        let mut rows = Vec::new();
        for (beta, alpha) in [(10.0, 5.0), (10.0, 10.0), (20.0, 10.0), (20.0, 20.0)] {
            for fold in 0..2 {
                let mut r = planted_row(5, beta, alpha, 0, 0, fold, f64::NAN, f64::NAN);
                r.error = Some("diverged".into());
                rows.push(r);
            }
        }
        match crossval_select(&rows, &config) {
            Err(Error::IncompleteGrid(msg)) => assert!(msg.contains("failed"), "{msg}"),
            other => panic!("expected IncompleteGrid, got {other:?}"),
        }

        // One errored point is skipped, the healthy one selected.
        let mut rows = Vec::new();
        for fold in 0..2 {
            let mut bad = planted_row(5, 10.0, 5.0, 0, 0, fold, f64::NAN, f64::NAN);
            bad.error = Some("diverged".into());
            rows.push(bad);
            rows.push(planted_row(5, 10.0, 10.0, 0, 0, fold, 0.5, 0.5));
        }
        let sel = crossval_select(&rows, &config).unwrap();
        assert_eq!(sel[0].alpha, Some(10.0));
    }

    #[test]
    fn accuracy_environments_select_by_maximum() {
        let mut config = planted_config();
        config.environment = TaskEnvironment::toy_classification(5, 5, 5).unwrap();
        config.algorithm = MetaAlgorithm::Fomaml;
        config.k = vec![1];
        config.eta = vec![0.01];
        config.beta_over_mi = vec![2.0];
        let mut rows = Vec::new();
        for (eta, acc) in [(0.01, 0.6), (0.05, 0.9)] {
            for fold in 0..2 {
                let mut r = planted_row(5, 10.0, 0.0, 0, 0, fold, acc, acc);
                r.algorithm = MetaAlgorithm::Fomaml;
                r.alpha = None;
                r.k = Some(1);
                r.eta = Some(eta);
                rows.push(r);
            }
        }
        let sel = crossval_select(&rows, &config).unwrap();
        assert_eq!(sel[0].eta, Some(0.05));
        assert!((sel[0].test - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_iteration_grid_emits_initialization_metrics() {
        let config = tiny_pretrain_config();
        let rows = run_grid(&config).unwrap();
        assert_eq!(rows.len(), 2);
        for (fold, row) in rows.iter().enumerate() {
            assert_eq!(row.fold, fold);
            assert!(row.validation.is_finite() && row.test.is_finite());
            assert!(row.error.is_none());
            assert!(row.w_term.is_none());
        }
        let sel = crossval_select(&rows, &config).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].beta, 60.0);
    }

    #[test]
    fn grid_reruns_are_byte_identical() {
        let config = tiny_pretrain_config();
        let rows_a = run_grid(&config).unwrap();
        let rows_b = run_grid(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_metrics_csv(&pa, &rows_a).unwrap();
        write_metrics_csv(&pb, &rows_b).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn diverged_runs_become_error_rows_and_the_grid_continues() {
        let mut config = tiny_pretrain_config();
        config.iterations = 3;
        config.adam_lr = 1e300;
        let rows = run_grid(&config).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.error.as_deref().unwrap_or("").contains("diverged"));
            assert!(row.validation.is_nan());
        }
        match crossval_select(&rows, &config) {
            Err(Error::IncompleteGrid(_)) => {}
            other => panic!("expected IncompleteGrid, got {other:?}"),
        }
    }

    #[test]
    fn results_csv_round_trips() {
        let mut rows = vec![
            planted_row(5, 10.0, 5.0, 0, 1, 2, 0.25, 0.5),
            planted_row(10, 20.0, 10.0, 1, 0, 0, 1.5, 2.5),
        ];
        rows[1].w_term = Some(-3.5);
        rows[1].kl_term = Some(0.25);
        rows[1].conf_term = Some(0.125);
        rows[1].bound_total = Some(-3.125);
        let mut bad = planted_row(10, 20.0, 10.0, 1, 0, 1, f64::NAN, f64::NAN);
        bad.error = Some("training diverged at iteration 7".into());
        rows.push(bad);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_results_csv(&path, &rows).unwrap();
        let back = read_results_csv(&path).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.algorithm, b.algorithm);
            assert_eq!((a.m_i, a.set, a.init_seed, a.fold), (b.m_i, b.set, b.init_seed, b.fold));
            assert_eq!(a.beta, b.beta);
            assert_eq!(a.alpha, b.alpha);
            assert_eq!(a.w_term, b.w_term);
            assert_eq!(a.bound_total, b.bound_total);
            assert_eq!(a.error, b.error);
            assert_eq!(a.validation.is_nan(), b.validation.is_nan());
            if !a.validation.is_nan() {
                assert_eq!(a.validation, b.validation);
                assert_eq!(a.test, b.test);
            }
        }

        // The metrics variant reads back with zero wall time.
        let mpath = dir.path().join("metrics.csv");
        write_metrics_csv(&mpath, &rows).unwrap();
        let back = read_results_csv(&mpath).unwrap();
        assert!(back.iter().all(|r| r.wall_time == 0.0));
    }

    #[test]
    fn bound_sweep_reduces_to_w1_at_alpha_beta_and_m() {
        // At m_i = m with m' = m_i the subsample is the identity and
        // alpha = beta, so the W2 rows must match the W1 rows up to the
        // shift estimate, whose mean is zero there.
        let mut config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        config.m_i = vec![5];
        config.n = 6;
        config.iterations = 10;
        config.log_every = 5;
        let sweep = SweepOptions {
            beta_over_mi: 10.0,
            alpha_over_beta: 1.0,
            seeds: 1,
            delta_mc: 200,
            delta_eval: 50,
        };
        let reports = bound_sweep(&config, &sweep).unwrap();
        assert_eq!(reports.len(), 2);
        let pacoh = reports.iter().find(|r| r.path == BoundPath::Pacoh).unwrap();
        let pacmaml = reports.iter().find(|r| r.path == BoundPath::Pacmaml).unwrap();
        assert!((pacoh.total - pacoh.delta_lambda - pacmaml.total).abs() < 1e-9);
        assert_eq!(pacmaml.delta_lambda, 0.0);
        // Same-size arms are exchangeable: the shift is MC noise around 0.
        assert!(pacoh.delta_lambda.abs() < 0.5, "{}", pacoh.delta_lambda);
    }

    #[test]
    fn bound_curve_aggregates_and_keeps_schema() {
        let mk = |path, m_i, total, seed| BoundReport {
            path,
            m_i,
            beta: 30.0 * m_i as f64,
            alpha: 6.0 * m_i as f64,
            w_term: 0.0,
            kl_term: 0.0,
            conf_term: 0.0,
            delta_lambda: 0.0,
            total,
            seed,
            neglected: NEGLECTED,
        };
        let reports = vec![
            mk(BoundPath::Pacmaml, 10, 2.0, 0),
            mk(BoundPath::Pacmaml, 10, 4.0, 1),
            mk(BoundPath::Pacoh, 5, 1.0, 0),
        ];
        let curve = bound_curve(&reports);
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0].path, BoundPath::Pacoh);
        assert_eq!(curve[1].m_i, 10);
        assert!((curve[1].total - 3.0).abs() < 1e-12);
        assert!((curve[1].se - 1.0).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_bound_curve_csv(&path, &curve).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,m_i,total,se,n\n"), "{text}");

        // Sweep rows round-trip through their CSV too.
        let bpath = dir.path().join("bounds.csv");
        crate::bounds::write_bound_reports(&bpath, &reports).unwrap();
        let back = read_bound_reports(&bpath).unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn manifest_embeds_config_and_hashes() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );

        let config = ExperimentConfig::from_toml(MIN_SINUSOID).unwrap();
        let manifest = Manifest::new(&config, sha256_hex(MIN_SINUSOID.as_bytes()), vec![
            "results.csv".into(),
            "metrics.csv".into(),
        ])
        .unwrap();
        assert_eq!(manifest.jobs.len(), 5 * 3);
        // The embedded TOML re-parses to the same config.
        let back = ExperimentConfig::from_toml(&manifest.config_toml).unwrap();
        assert_eq!(back, config);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.write(&path).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["name", "crate_version", "seed", "config_sha256", "config_toml", "jobs", "outputs"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn config_load_hashes_the_file_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, MIN_SINUSOID).unwrap();
        let (config, sha) = ExperimentConfig::load(&path).unwrap();
        assert_eq!(config.algorithm, MetaAlgorithm::Pacoh);
        assert_eq!(sha, sha256_hex(MIN_SINUSOID.as_bytes()));
    }

    #[test]
    fn worker_pool_respects_the_env_var() {
        // Invalid values are checked on the pure parser; setting a bad
        // value in the process environment would race parallel tests.
        assert_eq!(parse_workers("2").unwrap(), 2);
        assert_eq!(parse_workers(" 8 ").unwrap(), 8);
        assert!(parse_workers("zero").is_err());
        assert!(parse_workers("0").is_err());
        assert!(parse_workers("-1").is_err());

        std::env::set_var(WORKERS_ENV, "2");
        let pool = worker_pool().unwrap();
        assert_eq!(pool.current_num_threads(), 2);
        std::env::remove_var(WORKERS_ENV);
        assert!(worker_pool().is_ok());
    }
}
