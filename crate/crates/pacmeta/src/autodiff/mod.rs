//! Scalar reverse-mode differentiation on a flat tape.
//!
//! Every differentiable scalar in the crate is a [`Node`]: an index into a
//! growing arena that stores, per node, the operation that produced it and
//! its forward value. Recording is eager (values are computed at emission),
//! so a `Tape` doubles as an evaluator.
//!
//! Two backward passes are provided:
//!
//! * [`Tape::backward`] walks the arena once in reverse and returns plain
//!   `f64` adjoints — the fast path for first-order gradients.
//! * [`Tape::grad_nodes`] performs the same walk but emits the adjoint
//!   computation *back onto the tape*, so the returned gradients are
//!   themselves nodes and can be differentiated again. Unrolled inner-loop
//!   meta-gradients (the double backward) are built from this.
//!
//! Inner products are fused into a single [`Op::Dot`] node whose operand
//! ids live in a side arena. Cholesky factorizations and Gram matrices are
//! chains of dots, so fusing keeps the op count (and the reverse sweep)
//! proportional to flops / vector-length rather than flops.
//!
//! A tape is single-use and thread-confined; distinct evaluations on
//! distinct tapes may run in parallel. Replaying a tape reproduces the
//! forward values bit-identically (`replay` exists so tests can pin that
//! invariant).

pub mod check;
pub mod matrix;
pub mod mlp;

use crate::error::{Error, Result};

/// Handle to one scalar on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node(u32);

impl Node {
    #[inline]
    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    /// Leaf with zero adjoint; used for data, hyperparameters, jitter.
    Const,
    /// Leaf that accumulates an adjoint.
    Var,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Sqrt(u32),
    Tanh(u32),
    /// Fused inner product of two id slices in the index arena.
    Dot { x: u32, y: u32, len: u32 },
    /// Fused sum of one id slice in the index arena.
    Sum { x: u32, len: u32 },
}

#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    idx: Vec<u32>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Drop all nodes but keep allocations; reuse across iterations keeps
    /// the hot training loops allocation-free.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.vals.clear();
        self.idx.clear();
    }

    #[inline]
    pub fn val(&self, n: Node) -> f64 {
        self.vals[n.index()]
    }

    pub fn vals_of(&self, ns: &[Node]) -> Vec<f64> {
        ns.iter().map(|&n| self.val(n)).collect()
    }

    #[inline]
    fn push(&mut self, op: Op, val: f64) -> Node {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        Node(id)
    }

    #[inline]
    pub fn var(&mut self, v: f64) -> Node {
        self.push(Op::Var, v)
    }

    #[inline]
    pub fn constant(&mut self, v: f64) -> Node {
        self.push(Op::Const, v)
    }

    pub fn vars(&mut self, vs: &[f64]) -> Vec<Node> {
        vs.iter().map(|&v| self.var(v)).collect()
    }

    pub fn constants(&mut self, vs: &[f64]) -> Vec<Node> {
        vs.iter().map(|&v| self.constant(v)).collect()
    }

    #[inline]
    pub fn add(&mut self, a: Node, b: Node) -> Node {
        let v = self.vals[a.index()] + self.vals[b.index()];
        self.push(Op::Add(a.0, b.0), v)
    }

    #[inline]
    pub fn sub(&mut self, a: Node, b: Node) -> Node {
        let v = self.vals[a.index()] - self.vals[b.index()];
        self.push(Op::Sub(a.0, b.0), v)
    }

    #[inline]
    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        let v = self.vals[a.index()] * self.vals[b.index()];
        self.push(Op::Mul(a.0, b.0), v)
    }

    #[inline]
    pub fn div(&mut self, a: Node, b: Node) -> Node {
        let v = self.vals[a.index()] / self.vals[b.index()];
        self.push(Op::Div(a.0, b.0), v)
    }

    #[inline]
    pub fn neg(&mut self, a: Node) -> Node {
        let v = -self.vals[a.index()];
        self.push(Op::Neg(a.0), v)
    }

    #[inline]
    pub fn exp(&mut self, a: Node) -> Node {
        let v = self.vals[a.index()].exp();
        self.push(Op::Exp(a.0), v)
    }

    #[inline]
    pub fn ln(&mut self, a: Node) -> Node {
        let v = self.vals[a.index()].ln();
        self.push(Op::Ln(a.0), v)
    }

    #[inline]
    pub fn sqrt(&mut self, a: Node) -> Node {
        let v = self.vals[a.index()].sqrt();
        self.push(Op::Sqrt(a.0), v)
    }

    #[inline]
    pub fn tanh(&mut self, a: Node) -> Node {
        let v = self.vals[a.index()].tanh();
        self.push(Op::Tanh(a.0), v)
    }

    /// Convenience: `a + c` with a fresh constant.
    pub fn add_const(&mut self, a: Node, c: f64) -> Node {
        let c = self.constant(c);
        self.add(a, c)
    }

    /// Convenience: `a * c` with a fresh constant.
    pub fn scale(&mut self, a: Node, c: f64) -> Node {
        let c = self.constant(c);
        self.mul(a, c)
    }

    /// Fused inner product `sum_i xs[i]*ys[i]`. Zero-length dots collapse to
    /// a constant 0 so callers need not special-case empty slices.
    pub fn dot(&mut self, xs: &[Node], ys: &[Node]) -> Node {
        assert_eq!(xs.len(), ys.len(), "dot operands must have equal length");
        if xs.is_empty() {
            return self.constant(0.0);
        }
        let x = self.idx.len() as u32;
        self.idx.extend(xs.iter().map(|n| n.0));
        let y = self.idx.len() as u32;
        self.idx.extend(ys.iter().map(|n| n.0));
        let mut v = 0.0;
        for i in 0..xs.len() {
            v += self.vals[xs[i].index()] * self.vals[ys[i].index()];
        }
        self.push(
            Op::Dot {
                x,
                y,
                len: xs.len() as u32,
            },
            v,
        )
    }

    /// Fused sum of a slice of nodes.
    pub fn sum(&mut self, xs: &[Node]) -> Node {
        if xs.is_empty() {
            return self.constant(0.0);
        }
        let x = self.idx.len() as u32;
        self.idx.extend(xs.iter().map(|n| n.0));
        let v = xs.iter().map(|n| self.vals[n.index()]).sum();
        self.push(
            Op::Sum {
                x,
                len: xs.len() as u32,
            },
            v,
        )
    }

    /// Recompute every forward value from the recorded ops. The result must
    /// be bit-identical to the eagerly computed values; tests assert this.
    pub fn replay(&mut self) {
        for u in 0..self.ops.len() {
            let v = match self.ops[u] {
                Op::Const | Op::Var => self.vals[u],
                Op::Add(a, b) => self.vals[a as usize] + self.vals[b as usize],
                Op::Sub(a, b) => self.vals[a as usize] - self.vals[b as usize],
                Op::Mul(a, b) => self.vals[a as usize] * self.vals[b as usize],
                Op::Div(a, b) => self.vals[a as usize] / self.vals[b as usize],
                Op::Neg(a) => -self.vals[a as usize],
                Op::Exp(a) => self.vals[a as usize].exp(),
                Op::Ln(a) => self.vals[a as usize].ln(),
                Op::Sqrt(a) => self.vals[a as usize].sqrt(),
                Op::Tanh(a) => self.vals[a as usize].tanh(),
                Op::Dot { x, y, len } => {
                    let mut s = 0.0;
                    for i in 0..len as usize {
                        s += self.vals[self.idx[x as usize + i] as usize]
                            * self.vals[self.idx[y as usize + i] as usize];
                    }
                    s
                }
                Op::Sum { x, len } => (0..len as usize)
                    .map(|i| self.vals[self.idx[x as usize + i] as usize])
                    .sum(),
            };
            self.vals[u] = v;
        }
    }

    /// Reverse sweep from `root`; returns the adjoint of every node with
    /// index <= root. Nodes after `root` cannot influence it and are skipped.
    pub fn backward(&self, root: Node) -> Result<Vec<f64>> {
        if !self.val(root).is_finite() {
            return Err(Error::NonFinite {
                context: "backward root",
            });
        }
        let n = root.index() + 1;
        let mut adj = vec![0.0; n];
        adj[root.index()] = 1.0;
        for u in (0..n).rev() {
            let a = adj[u];
            if a == 0.0 {
                continue;
            }
            match self.ops[u] {
                Op::Const | Op::Var => {}
                Op::Add(l, r) => {
                    adj[l as usize] += a;
                    adj[r as usize] += a;
                }
                Op::Sub(l, r) => {
                    adj[l as usize] += a;
                    adj[r as usize] -= a;
                }
                Op::Mul(l, r) => {
                    adj[l as usize] += a * self.vals[r as usize];
                    adj[r as usize] += a * self.vals[l as usize];
                }
                Op::Div(l, r) => {
                    let rv = self.vals[r as usize];
                    adj[l as usize] += a / rv;
                    adj[r as usize] -= a * self.vals[u] / rv;
                }
                Op::Neg(x) => adj[x as usize] -= a,
                Op::Exp(x) => adj[x as usize] += a * self.vals[u],
                Op::Ln(x) => adj[x as usize] += a / self.vals[x as usize],
                Op::Sqrt(x) => adj[x as usize] += a / (2.0 * self.vals[u]),
                Op::Tanh(x) => {
                    let y = self.vals[u];
                    adj[x as usize] += a * (1.0 - y * y);
                }
                Op::Dot { x, y, len } => {
                    for i in 0..len as usize {
                        let xi = self.idx[x as usize + i] as usize;
                        let yi = self.idx[y as usize + i] as usize;
                        // Self-dots (x aliasing y) accumulate both halves,
                        // which is exactly d(x._x)/dx = 2x.
                        adj[xi] += a * self.vals[yi];
                        adj[yi] += a * self.vals[xi];
                    }
                }
                Op::Sum { x, len } => {
                    for i in 0..len as usize {
                        adj[self.idx[x as usize + i] as usize] += a;
                    }
                }
            }
        }
        Ok(adj)
    }

    /// First-order gradient of `root` with respect to `wrt`.
    pub fn gradient(&self, root: Node, wrt: &[Node]) -> Result<Vec<f64>> {
        let adj = self.backward(root)?;
        Ok(wrt
            .iter()
            .map(|w| if w.index() < adj.len() { adj[w.index()] } else { 0.0 })
            .collect())
    }

    fn acc(&mut self, adj: &mut [Option<Node>], target: u32, g: Node) {
        // Constants never need adjoints; skipping them keeps the emitted
        // graph from growing over data-heavy regions.
        if matches!(self.ops[target as usize], Op::Const) {
            return;
        }
        adj[target as usize] = Some(match adj[target as usize] {
            Some(e) => self.add(e, g),
            None => g,
        });
    }

    /// Reverse sweep that emits adjoints as new tape nodes, making the
    /// gradient differentiable. Returns one node per `wrt` entry (a fresh
    /// constant 0 where `root` does not depend on it).
    pub fn grad_nodes(&mut self, root: Node, wrt: &[Node]) -> Result<Vec<Node>> {
        self.grad_nodes_impl(root, wrt, false)
    }

    /// Like [`Tape::grad_nodes`], but `wrt` nodes are treated as independent
    /// leaves: their adjoints accumulate and are never propagated to their
    /// parents. The returned nodes then compute the partial gradient of
    /// `root` with respect to `wrt` holding everything upstream of `wrt`
    /// fixed. When `root` depends on earlier tape state *only* through
    /// `wrt`, this equals the full gradient while touching only the span
    /// between `wrt` and `root`; unrolled inner loops rely on that to stay
    /// linear in the step count.
    pub fn grad_nodes_leaf(&mut self, root: Node, wrt: &[Node]) -> Result<Vec<Node>> {
        self.grad_nodes_impl(root, wrt, true)
    }

    fn grad_nodes_impl(&mut self, root: Node, wrt: &[Node], leaf: bool) -> Result<Vec<Node>> {
        if !self.val(root).is_finite() {
            return Err(Error::NonFinite {
                context: "grad_nodes root",
            });
        }
        let n = root.index() + 1;
        let mut stop = vec![false; if leaf { n } else { 0 }];
        if leaf {
            for w in wrt {
                if w.index() < n {
                    stop[w.index()] = true;
                }
            }
        }
        let mut adj: Vec<Option<Node>> = vec![None; n];
        adj[root.index()] = Some(self.constant(1.0));
        for u in (0..n).rev() {
            let Some(a) = adj[u] else { continue };
            if leaf && stop[u] {
                continue;
            }
            match self.ops[u] {
                Op::Const | Op::Var => {}
                Op::Add(l, r) => {
                    self.acc(&mut adj, l, a);
                    self.acc(&mut adj, r, a);
                }
                Op::Sub(l, r) => {
                    self.acc(&mut adj, l, a);
                    let na = self.neg(a);
                    self.acc(&mut adj, r, na);
                }
                Op::Mul(l, r) => {
                    let gl = self.mul(a, Node(r));
                    self.acc(&mut adj, l, gl);
                    let gr = self.mul(a, Node(l));
                    self.acc(&mut adj, r, gr);
                }
                Op::Div(l, r) => {
                    let gl = self.div(a, Node(r));
                    self.acc(&mut adj, l, gl);
                    let t = self.mul(a, Node(u as u32));
                    let t = self.div(t, Node(r));
                    let gr = self.neg(t);
                    self.acc(&mut adj, r, gr);
                }
                Op::Neg(x) => {
                    let g = self.neg(a);
                    self.acc(&mut adj, x, g);
                }
                Op::Exp(x) => {
                    let g = self.mul(a, Node(u as u32));
                    self.acc(&mut adj, x, g);
                }
                Op::Ln(x) => {
                    let g = self.div(a, Node(x));
                    self.acc(&mut adj, x, g);
                }
                Op::Sqrt(x) => {
                    let y2 = self.scale(Node(u as u32), 2.0);
                    let g = self.div(a, y2);
                    self.acc(&mut adj, x, g);
                }
                Op::Tanh(x) => {
                    let y2 = self.mul(Node(u as u32), Node(u as u32));
                    let one = self.constant(1.0);
                    let s = self.sub(one, y2);
                    let g = self.mul(a, s);
                    self.acc(&mut adj, x, g);
                }
                Op::Dot { x, y, len } => {
                    let xs: Vec<u32> =
                        self.idx[x as usize..x as usize + len as usize].to_vec();
                    let ys: Vec<u32> =
                        self.idx[y as usize..y as usize + len as usize].to_vec();
                    for i in 0..len as usize {
                        let gx = self.mul(a, Node(ys[i]));
                        self.acc(&mut adj, xs[i], gx);
                        let gy = self.mul(a, Node(xs[i]));
                        self.acc(&mut adj, ys[i], gy);
                    }
                }
                Op::Sum { x, len } => {
                    let xs: Vec<u32> =
                        self.idx[x as usize..x as usize + len as usize].to_vec();
                    for &xi in &xs {
                        self.acc(&mut adj, xi, a);
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.index()).copied().flatten() {
                Some(g) => g,
                None => self.constant(0.0),
            })
            .collect())
    }
}

/// Evaluate `f`'s gradient at `at` on a fresh tape.
///
/// `f` receives the tape and one variable node per entry of `at` and must
/// return the scalar root. Deterministic: identical inputs produce identical
/// outputs bit for bit.
pub fn grad<F>(f: F, at: &[f64]) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, &[Node]) -> Node,
{
    let mut tape = Tape::new();
    let vars = tape.vars(at);
    let root = f(&mut tape, &vars);
    if !tape.val(root).is_finite() {
        return Err(Error::NonFinite {
            context: "grad forward value",
        });
    }
    tape.gradient(root, &vars)
}

/// Evaluate `f` at `at` without keeping the tape.
pub fn eval<F>(f: F, at: &[f64]) -> f64
where
    F: FnOnce(&mut Tape, &[Node]) -> Node,
{
    let mut tape = Tape::new();
    let vars = tape.vars(at);
    let root = f(&mut tape, &vars);
    tape.val(root)
}
