//! Small feed-forward networks on the tape.
//!
//! Layers are dense with bias; hidden activations are tanh and the output
//! layer is linear. Parameters live in one flat vector laid out layer by
//! layer, weights (row-major, one row per output unit) before biases, so a
//! network is just a view over a `ParamVector` slice.
//!
//! Initialization draws weights from N(0, 1/fan_in) and zeroes biases; the
//! scale keeps tanh pre-activations O(1) at any width.

use super::{Node, Tape};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    /// Layer widths, input first: `[1, 32, 32, 1]` is the scalar-regression
    /// shape used throughout the sinusoid study.
    pub sizes: Vec<usize>,
}

impl MlpSpec {
    pub fn new(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output");
        assert!(sizes.iter().all(|&s| s > 0), "zero-width layer");
        MlpSpec {
            sizes: sizes.to_vec(),
        }
    }

    /// Total parameter count: sum over layers of (fan_in + 1) * fan_out.
    pub fn param_count(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Seeded Gaussian initialization: weights N(0, 1/fan_in), biases 0.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            for _ in 0..fan_in * fan_out {
                params.push(normal.sample(rng));
            }
            for _ in 0..fan_out {
                params.push(0.0);
            }
        }
        params
    }

    /// Forward pass on the tape. `params` must have length `param_count()`;
    /// `x` must match the input width. Returns the output nodes.
    pub fn forward(&self, tape: &mut Tape, params: &[Node], x: &[Node]) -> Vec<Node> {
        assert_eq!(
            params.len(),
            self.param_count(),
            "parameter vector length mismatch"
        );
        assert_eq!(x.len(), self.input_dim(), "input width mismatch");
        let mut h: Vec<Node> = x.to_vec();
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        for (layer, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &params[offset..offset + fan_in * fan_out];
            let biases = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let pre = tape.dot(row, &h);
                let pre = tape.add(pre, biases[o]);
                out.push(if layer == last { pre } else { tape.tanh(pre) });
            }
            h = out;
        }
        h
    }

    /// Value-level forward pass (no tape); used by evaluation loops where
    /// no gradient is needed.
    pub fn forward_val(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(params.len(), self.param_count());
        assert_eq!(x.len(), self.input_dim());
        let mut h: Vec<f64> = x.to_vec();
        let mut offset = 0;
        let last = self.sizes.len() - 2;
        for (layer, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &params[offset..offset + fan_in * fan_out];
            let biases = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let mut pre = biases[o];
                for (k, &hk) in h.iter().enumerate() {
                    pre += weights[o * fan_in + k] * hk;
                }
                out.push(if layer == last { pre } else { pre.tanh() });
            }
            h = out;
        }
        h
    }
}
