//! Task environments, datasets, and subsampling.
//!
//! An environment is a distribution over tasks; a task is a data
//! distribution plus a sample budget. Meta-training sees n observed tasks
//! with m_obs examples each; meta-testing adapts on m examples per target
//! task and is scored on held-out points. The structural property the
//! subsample machinery maintains is that the inner set S' handed to the
//! base learner has the target-task size: E[m'] = E[m].
//!
//! Two families are provided. The sinusoid family draws
//! f(x) = A sin(x - phi) + b with A ~ U(1.4, 2.6), phi ~ U(0, pi),
//! b ~ U(-1, 1), inputs x ~ U(-5, 5), and Gaussian observation noise. The
//! toy classification family draws N-way tasks of 2-D Gaussian blobs with
//! centroids from U(-3, 3)^2; labels are class indices and the intended
//! loss is softmax cross-entropy.

use crate::error::{Error, Result};
use crate::rng::Stream;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Sinusoid hyper-distribution; the exact constants are part of the crate's
/// reproducibility contract, not tunable defaults.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SinusoidFamily {
    pub amp_lo: f64,
    pub amp_hi: f64,
    pub phase_lo: f64,
    pub phase_hi: f64,
    pub offset_lo: f64,
    pub offset_hi: f64,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl Default for SinusoidFamily {
    fn default() -> Self {
        SinusoidFamily {
            amp_lo: 1.4,
            amp_hi: 2.6,
            phase_lo: 0.0,
            phase_hi: std::f64::consts::PI,
            offset_lo: -1.0,
            offset_hi: 1.0,
            x_lo: -5.0,
            x_hi: 5.0,
        }
    }
}

/// N-way Gaussian-blob classification in the plane.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct BlobFamily {
    pub ways: usize,
    pub centroid_lo: f64,
    pub centroid_hi: f64,
    /// Within-class standard deviation.
    pub spread: f64,
}

impl Default for BlobFamily {
    fn default() -> Self {
        BlobFamily {
            ways: 5,
            centroid_lo: -3.0,
            centroid_hi: 3.0,
            spread: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum Family {
    Sinusoid(SinusoidFamily),
    ToyClassification(BlobFamily),
}

/// A task environment: the hyper-distribution plus the sample budgets.
/// `m` is the target-task training size, `m_obs` the observed-task size
/// (m_i in the bounds); the observed environment must not be poorer than
/// the target one.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskEnvironment {
    /// Flattened so a config table reads `family = "sinusoid"` inline.
    #[serde(flatten)]
    pub family: Family,
    pub m: usize,
    pub m_obs: usize,
    /// Observation noise sigma_n (sinusoid only; ignored for blobs).
    #[serde(default)]
    pub noise: f64,
}

impl TaskEnvironment {
    pub fn sinusoid(m: usize, m_obs: usize, noise: f64) -> Result<Self> {
        let env = TaskEnvironment {
            family: Family::Sinusoid(SinusoidFamily::default()),
            m,
            m_obs,
            noise,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn toy_classification(ways: usize, m: usize, m_obs: usize) -> Result<Self> {
        let env = TaskEnvironment {
            family: Family::ToyClassification(BlobFamily {
                ways,
                ..BlobFamily::default()
            }),
            m,
            m_obs,
            noise: 0.0,
        };
        env.validate()?;
        Ok(env)
    }

    /// A copy with a different observed-task size; used by m_i sweeps.
    pub fn with_m_obs(&self, m_obs: usize) -> Result<Self> {
        let mut env = self.clone();
        env.m_obs = m_obs;
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::Config("env.m must be >= 1".into()));
        }
        if self.m_obs < self.m {
            return Err(Error::Config(format!(
                "env.m_obs ({}) must be >= env.m ({})",
                self.m_obs, self.m
            )));
        }
        match &self.family {
            Family::Sinusoid(f) => {
                if !(f.amp_lo <= f.amp_hi && f.x_lo < f.x_hi) {
                    return Err(Error::Config("sinusoid family ranges invalid".into()));
                }
            }
            Family::ToyClassification(f) => {
                if f.ways < 2 {
                    return Err(Error::Config("classification needs >= 2 classes".into()));
                }
                if !(f.spread > 0.0) {
                    return Err(Error::Config("blob spread must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.family {
            Family::Sinusoid(_) => 1,
            Family::ToyClassification(_) => 2,
        }
    }

    /// Draw one task's generative parameters.
    pub fn sample_task(&self, m_i: usize, rng: &mut Stream) -> Task {
        let params = match &self.family {
            Family::Sinusoid(f) => TaskParams::Sinusoid {
                amplitude: rng.random_range(f.amp_lo..f.amp_hi),
                phase: rng.random_range(f.phase_lo..f.phase_hi),
                offset: rng.random_range(f.offset_lo..f.offset_hi),
            },
            Family::ToyClassification(f) => {
                let centroids = (0..f.ways)
                    .map(|_| {
                        [
                            rng.random_range(f.centroid_lo..f.centroid_hi),
                            rng.random_range(f.centroid_lo..f.centroid_hi),
                        ]
                    })
                    .collect();
                TaskParams::Blobs { centroids }
            }
        };
        Task { params, m_i }
    }

    /// Draw `count` examples from a task's data distribution.
    pub fn sample_dataset(&self, task: &Task, count: usize, rng: &mut Stream) -> Dataset {
        let mut data = Dataset::empty(self.input_dim());
        match (&self.family, &task.params) {
            (
                Family::Sinusoid(f),
                TaskParams::Sinusoid {
                    amplitude,
                    phase,
                    offset,
                },
            ) => {
                let noise = Normal::new(0.0, self.noise.max(0.0)).unwrap();
                for _ in 0..count {
                    let x = rng.random_range(f.x_lo..f.x_hi);
                    let mut y = amplitude * (x - phase).sin() + offset;
                    if self.noise > 0.0 {
                        y += noise.sample(rng);
                    }
                    data.push(&[x], y);
                }
            }
            (Family::ToyClassification(f), TaskParams::Blobs { centroids }) => {
                let spread = Normal::new(0.0, f.spread).unwrap();
                for _ in 0..count {
                    let c = rng.random_range(0..centroids.len());
                    let x = [
                        centroids[c][0] + spread.sample(rng),
                        centroids[c][1] + spread.sample(rng),
                    ];
                    data.push(&x, c as f64);
                }
            }
            _ => unreachable!("task params do not match environment family"),
        }
        data
    }
}

/// Generative parameters of one task.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum TaskParams {
    Sinusoid {
        amplitude: f64,
        phase: f64,
        offset: f64,
    },
    Blobs {
        centroids: Vec<[f64; 2]>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Task {
    pub params: TaskParams,
    /// Sample budget of this task when observed.
    pub m_i: usize,
}

impl Task {
    /// Noise-free regression target; panics for classification tasks.
    pub fn mean_at(&self, x: f64) -> f64 {
        match &self.params {
            TaskParams::Sinusoid {
                amplitude,
                phase,
                offset,
            } => amplitude * (x - phase).sin() + offset,
            TaskParams::Blobs { .. } => panic!("mean_at is regression-only"),
        }
    }
}

/// A flat columnar dataset: `xs` holds row-major input rows of width
/// `x_dim`, `ys` one target per row (real value or class index).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Dataset {
    pub x_dim: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Dataset {
    pub fn empty(x_dim: usize) -> Self {
        Dataset {
            x_dim,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        assert_eq!(x.len(), self.x_dim);
        self.xs.extend_from_slice(x);
        self.ys.push(y);
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.x_dim..(i + 1) * self.x_dim]
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.x_dim);
        for &i in indices {
            out.push(self.x_row(i), self.ys[i]);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.xs.iter().all(|v| v.is_finite()) && self.ys.iter().all(|v| v.is_finite())
    }
}

/// How the base-learner subsample relates to the full observed set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsampleMode {
    /// S' is a uniform without-replacement subset of S.
    Subset,
    /// S' is freshly drawn from the task distribution, disjoint from S.
    Disjoint,
}

/// The (S, S') pair: full observed dataset and the inner set that trains
/// the base learner.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SubsamplePair {
    pub full: Dataset,
    pub inner: Dataset,
    pub mode: SubsampleMode,
}

/// n i.i.d. observed tasks, each with a dataset of `env.m_obs` examples.
pub fn sample_meta_train(
    env: &TaskEnvironment,
    n: usize,
    rng: &mut Stream,
) -> Vec<(Task, Dataset)> {
    (0..n)
        .map(|_| {
            let task = env.sample_task(env.m_obs, rng);
            let data = env.sample_dataset(&task, env.m_obs, rng);
            (task, data)
        })
        .collect()
}

/// One target task: adaptation set of size m plus held-out evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TargetTask {
    pub task: Task,
    pub train: Dataset,
    pub test: Dataset,
}

/// Default held-out evaluation size per target task.
pub const TARGET_TEST_SIZE: usize = 100;

pub fn sample_target_tasks(
    env: &TaskEnvironment,
    count: usize,
    rng: &mut Stream,
) -> Vec<TargetTask> {
    sample_target_tasks_with(env, count, TARGET_TEST_SIZE, rng)
}

pub fn sample_target_tasks_with(
    env: &TaskEnvironment,
    count: usize,
    test_size: usize,
    rng: &mut Stream,
) -> Vec<TargetTask> {
    (0..count)
        .map(|_| {
            let task = env.sample_task(env.m, rng);
            let train = env.sample_dataset(&task, env.m, rng);
            let test = env.sample_dataset(&task, test_size, rng);
            TargetTask { task, train, test }
        })
        .collect()
}

/// Build the (S, S') pair for one observed task.
///
/// Subset mode draws m' indices uniformly without replacement (kept in
/// ascending order). Disjoint mode draws m' fresh examples from the task's
/// distribution; with continuous inputs the overlap with S is empty almost
/// surely, and tests pin it exactly.
pub fn subsample(
    env: &TaskEnvironment,
    task: &Task,
    full: &Dataset,
    m_prime: usize,
    mode: SubsampleMode,
    rng: &mut Stream,
) -> Result<SubsamplePair> {
    let inner = match mode {
        SubsampleMode::Subset => {
            if m_prime > full.len() {
                return Err(Error::Config(format!(
                    "subsample: m_prime ({m_prime}) exceeds |S| ({})",
                    full.len()
                )));
            }
            // Floyd's algorithm would also work; a partial Fisher-Yates on
            // an index buffer is simpler and m is tiny.
            let mut indices: Vec<usize> = (0..full.len()).collect();
            for i in 0..m_prime {
                let j = rng.random_range(i..indices.len());
                indices.swap(i, j);
            }
            let mut chosen = indices[0..m_prime].to_vec();
            chosen.sort_unstable();
            full.select(&chosen)
        }
        SubsampleMode::Disjoint => env.sample_dataset(task, m_prime, rng),
    };
    Ok(SubsamplePair {
        full: full.clone(),
        inner,
        mode,
    })
}

/// Serialize tasks' datasets to a columnar CSV: one row per example with
/// input columns `x0..`, target `y`, and the owning `task` id.
pub fn write_datasets_csv<P: AsRef<Path>>(path: P, sets: &[(Task, Dataset)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let x_dim = sets.first().map(|(_, d)| d.x_dim).unwrap_or(1);
    let mut header: Vec<String> = (0..x_dim).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    header.push("task".into());
    w.write_record(&header)?;
    for (tid, (_, data)) in sets.iter().enumerate() {
        for i in 0..data.len() {
            let mut rec: Vec<String> = data.x_row(i).iter().map(|v| v.to_string()).collect();
            rec.push(data.ys[i].to_string());
            rec.push(tid.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back a columnar dataset CSV (inverse of [`write_datasets_csv`],
/// minus the task parameters, which are not stored).
pub fn read_datasets_csv<P: AsRef<Path>>(path: P) -> Result<Vec<Dataset>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let headers = r.headers()?.clone();
    let x_dim = headers.iter().filter(|h| h.starts_with('x')).count();
    let mut out: Vec<Dataset> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad CSV number: {s}")))
        };
        let x: Vec<f64> = (0..x_dim)
            .map(|i| parse(&rec[i]))
            .collect::<Result<_>>()?;
        let y = parse(&rec[x_dim])?;
        let tid: usize = rec[x_dim + 1]
            .parse()
            .map_err(|_| Error::Config("bad CSV task id".into()))?;
        while out.len() <= tid {
            out.push(Dataset::empty(x_dim));
        }
        out[tid].push(&x, y);
    }
    Ok(out)
}
