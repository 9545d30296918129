//! Dense symmetric linear algebra on the tape.
//!
//! Everything here is built from fused dot nodes: a Cholesky factorization
//! of an n x n matrix records O(n^2) nodes carrying O(n^3/6) flops, and the
//! reverse sweep differentiates through the factorization with the same
//! cost. The multivariate normal log-density
//!
//!   log N(y | mu, Sigma) = -1/2 z.z - 1/2 log|Sigma| - d/2 log(2 pi),
//!   L L^T = Sigma,  L z = y - mu,
//!
//! is assembled from the factor and one forward substitution.
//!
//! Jitter policy: a factorization is first attempted on the matrix as given.
//! If a pivot fails, 1e-8 * trace(A)/dim is added to the diagonal and
//! escalated tenfold up to 1e-2 * trace(A)/dim before giving up. The jitter
//! level is chosen on plain values and then baked into the recorded graph as
//! a constant, so it does not contribute gradient terms.

use super::{Node, Tape};
use crate::error::{Error, Result};

/// Relative jitter ladder applied to the diagonal, scaled by trace(A)/dim.
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Lower-triangular factor recorded on the tape, with its log-determinant.
#[derive(Debug)]
pub struct CholFactor {
    /// Row-major n x n; entries above the diagonal are unused.
    pub l: Vec<Node>,
    pub n: usize,
    pub logdet: Node,
    /// Diagonal shift that was required (0.0 when the matrix factorized
    /// as given).
    pub jitter: f64,
}

fn jitter_ladder(trace: f64, n: usize) -> Vec<f64> {
    let scale = trace.abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut ladder = vec![0.0];
    let mut level = JITTER_START;
    while level <= JITTER_MAX * (1.0 + 1e-12) {
        ladder.push(level * scale);
        level *= 10.0;
    }
    ladder
}

/// Value-level Cholesky attempt; returns the factor when every pivot is
/// strictly positive and finite.
fn chol_attempt(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        for i in j..n {
            let mut s = a[i * n + j];
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Value-level factorization with the jitter ladder. Returns the factor,
/// the log-determinant of A + jitter*I, and the jitter used.
pub fn cholesky_logdet_val(a: &[f64], n: usize) -> Result<(Vec<f64>, f64, f64)> {
    assert_eq!(a.len(), n * n, "matrix buffer size mismatch");
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let mut last = 0.0;
    for jitter in jitter_ladder(trace, n) {
        last = jitter;
        if let Some(l) = chol_attempt(a, n, jitter) {
            let logdet = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
            return Ok((l, logdet, jitter));
        }
    }
    Err(Error::CholeskyFailure {
        size: n,
        last_jitter: last,
    })
}

/// Forward substitution L x = b on plain values.
pub fn solve_lower_val(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Back substitution L^T x = b on plain values.
pub fn solve_lower_t_val(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Cholesky factorization recorded on the tape.
///
/// The jitter level is decided by a value-level pre-pass (same ladder), so
/// the recorded graph is a single clean factorization. L L^T = A + jitter*I
/// and logdet = 2 sum_i log L_ii.
pub fn cholesky_logdet(tape: &mut Tape, a: &[Node], n: usize) -> Result<CholFactor> {
    assert_eq!(a.len(), n * n, "matrix buffer size mismatch");
    let vals = tape.vals_of(a);
    let trace: f64 = (0..n).map(|i| vals[i * n + i]).sum();
    let mut chosen = None;
    let mut last = 0.0;
    for jitter in jitter_ladder(trace, n) {
        last = jitter;
        if chol_attempt(&vals, n, jitter).is_some() {
            chosen = Some(jitter);
            break;
        }
    }
    let Some(jitter) = chosen else {
        return Err(Error::CholeskyFailure {
            size: n,
            last_jitter: last,
        });
    };

    let zero = tape.constant(0.0);
    let jit = tape.constant(jitter);
    let mut l = vec![zero; n * n];
    let mut diag_logs = Vec::with_capacity(n);
    for j in 0..n {
        for i in j..n {
            // Rows of L are contiguous, so the partial inner products fuse
            // into single dot nodes.
            let s = tape.dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                let mut d = tape.sub(a[i * n + i], s);
                if jitter > 0.0 {
                    d = tape.add(d, jit);
                }
                let p = tape.sqrt(d);
                l[i * n + j] = p;
                diag_logs.push(tape.ln(p));
            } else {
                let num = tape.sub(a[i * n + j], s);
                l[i * n + j] = tape.div(num, l[j * n + j]);
            }
        }
    }
    let sl = tape.sum(&diag_logs);
    let logdet = tape.scale(sl, 2.0);
    Ok(CholFactor {
        l,
        n,
        logdet,
        jitter,
    })
}

/// Forward substitution L x = b on the tape.
pub fn solve_lower(tape: &mut Tape, f: &CholFactor, b: &[Node]) -> Vec<Node> {
    let n = f.n;
    assert_eq!(b.len(), n);
    let mut x: Vec<Node> = Vec::with_capacity(n);
    for i in 0..n {
        let s = tape.dot(&f.l[i * n..i * n + i], &x[0..i]);
        let num = tape.sub(b[i], s);
        x.push(tape.div(num, f.l[i * n + i]));
    }
    x
}

/// Back substitution L^T x = b on the tape.
pub fn solve_lower_t(tape: &mut Tape, f: &CholFactor, b: &[Node]) -> Vec<Node> {
    let n = f.n;
    assert_eq!(b.len(), n);
    let mut x: Vec<Node> = vec![b[0]; n];
    for i in (0..n).rev() {
        let col: Vec<Node> = (i + 1..n).map(|k| f.l[k * n + i]).collect();
        let s = tape.dot(&col, &x[i + 1..n]);
        let num = tape.sub(b[i], s);
        x[i] = tape.div(num, f.l[i * n + i]);
    }
    x
}

/// Solve (A + jitter I) x = b given the factor: two triangular solves.
pub fn solve_spd(tape: &mut Tape, f: &CholFactor, b: &[Node]) -> Vec<Node> {
    let z = solve_lower(tape, f, b);
    solve_lower_t(tape, f, &z)
}

/// Multivariate normal log-density on the tape, differentiable w.r.t. the
/// mean and covariance nodes.
pub fn mvn_logpdf(
    tape: &mut Tape,
    y: &[Node],
    mean: &[Node],
    cov: &[Node],
    n: usize,
) -> Result<Node> {
    if y.len() != n || mean.len() != n {
        return Err(Error::DimensionMismatch {
            context: "mvn_logpdf",
            expected: n,
            got: y.len().min(mean.len()),
        });
    }
    let f = cholesky_logdet(tape, cov, n)?;
    let r: Vec<Node> = (0..n).map(|i| tape.sub(y[i], mean[i])).collect();
    let z = solve_lower(tape, &f, &r);
    let q = tape.dot(&z, &z);
    let qh = tape.scale(q, -0.5);
    let ldh = tape.scale(f.logdet, -0.5);
    let s = tape.add(qh, ldh);
    let c = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(tape.add_const(s, c))
}
