//! Layer building blocks shared by the encoders and the decoder.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = store.add_zeros(format!("{name}.bias"), 1, out_dim);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// 1-D convolution over the row (time) axis with "same" output length.
///
/// Even widths pad `ceil((w-1)/2)` on the left and `floor((w-1)/2)` on the right.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        assert!(width >= 1, "convolution width must be positive");
        let kernel = store.add_xavier(format!("{name}.kernel"), width * in_channels, out_channels, rng);
        let bias = store.add_zeros(format!("{name}.bias"), 1, out_channels);
        Self {
            kernel,
            bias,
            width,
            in_channels,
            out_channels,
        }
    }

    pub fn padding(&self) -> (usize, usize) {
        same_padding(self.width)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (left, right) = self.padding();
        let cols = g.unfold(x, self.width, left, right);
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        let y = g.matmul(cols, k);
        g.add_row(y, b)
    }
}

pub fn same_padding(width: usize) -> (usize, usize) {
    let total = width - 1;
    (total.div_ceil(2), total / 2)
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(1, dim, 1.0));
        let bias = store.add_zeros(format!("{name}.bias"), 1, dim);
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Highway {
    pub transform: Linear,
    pub gate: Linear,
}

impl Highway {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let transform = Linear::new(store, &format!("{name}.transform"), dim, dim, rng);
        let gate = Linear::new(store, &format!("{name}.gate"), dim, dim, rng);
        // carry-biased at init
        store.value_mut(gate.bias).data_mut().fill(-1.0);
        Self { transform, gate }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.transform.forward(g, x);
        let h = g.relu(h);
        let t = self.gate.forward(g, x);
        let t = g.sigmoid(t);
        let carry = g.sub(h, x);
        let gated = g.mul(t, carry);
        // t*h + (1-t)*x == x + t*(h - x)
        g.add(x, gated)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// LSTM cell operating on a batch of rows; gate order `i, f, g, o`.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input = store.add_xavier(format!("{name}.input"), in_dim, 4 * hidden, rng);
        let recurrent = store.add_xavier(format!("{name}.recurrent"), hidden, 4 * hidden, rng);
        let mut b = Tensor::zeros(1, 4 * hidden);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            input,
            recurrent,
            bias,
            in_dim,
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(batch, self.hidden));
        let c = g.constant(Tensor::zeros(batch, self.hidden));
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph, x: Var, state: LstmState) -> LstmState {
        let wi = g.param(self.input);
        let wh = g.param(self.recurrent);
        let b = g.param(self.bias);
        let xi = g.matmul(x, wi);
        let hh = g.matmul(state.h, wh);
        let z = g.add(xi, hh);
        let z = g.add_row(z, b);
        let n = self.hidden;
        let i = g.slice_cols(z, 0, n);
        let f = g.slice_cols(z, n, 2 * n);
        let c_hat = g.slice_cols(z, 2 * n, 3 * n);
        let o = g.slice_cols(z, 3 * n, 4 * n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_hat = g.tanh(c_hat);
        let o = g.sigmoid(o);
        let keep = g.mul(f, state.c);
        let write = g.mul(i, c_hat);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }

    /// Run over the rows of a single sequence (`N x in_dim`), returning the
    /// hidden state for every row in input order.
    pub fn run_sequence(&self, g: &mut Graph, x: Var, reverse: bool) -> Vec<Var> {
        let n = g.shape(x).0;
        let mut state = self.zero_state(g, 1);
        let mut out = vec![None; n];
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let xt = g.slice_rows(x, t, t + 1);
            state = self.step(g, xt, state);
            out[t] = Some(state.h);
        }
        out.into_iter().map(|v| v.expect("every step visited")).collect()
    }
}

/// Bidirectional LSTM over one sequence; output `N x 2*hidden`
/// (forward half first).
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            forward: Lstm::new(store, &format!("{name}.fwd"), in_dim, hidden, rng),
            backward: Lstm::new(store, &format!("{name}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let fwd = self.forward.run_sequence(g, x, false);
        let bwd = self.backward.run_sequence(g, x, true);
        let f = g.concat_rows(&fwd);
        let b = g.concat_rows(&bwd);
        g.concat_cols(&[f, b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_padding_splits_even_widths_left_heavy() {
        assert_eq!(same_padding(1), (0, 0));
        assert_eq!(same_padding(2), (1, 0));
        assert_eq!(same_padding(3), (1, 1));
        assert_eq!(same_padding(8), (4, 3));
    }

    #[test]
    fn conv_preserves_length_for_all_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let convs: Vec<_> = (1..=8)
            .map(|w| Conv1d::new(&mut store, &format!("c{w}"), 3, 2, w, &mut rng))
            .collect();
        for n in [1usize, 2, 7] {
            let mut g = Graph::new(&store);
            let x = g.constant(Tensor::randn(n, 3, 1.0, &mut rng));
            for c in &convs {
                let y = c.forward(&mut g, x);
                assert_eq!(g.shape(y), (n, 2));
            }
        }
    }

    #[test]
    fn bilstm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let lstm = BiLstm::new(&mut store, "rnn", 3, 4, &mut rng);
        let x = Tensor::randn(4, 3, 1.0, &mut rng);
        let probe = Tensor::randn(4, 8, 1.0, &mut rng);
        for id in [lstm.forward.input, lstm.backward.recurrent, lstm.forward.bias] {
            let report = check_param_gradient(&store, id, 1e-5, 64, |g| {
                let xv = g.constant(x.clone());
                let y = lstm.forward(g, xv);
                let p = g.constant(probe.clone());
                let m = g.mul(y, p);
                g.sum(m)
            });
            assert!(report.max_rel_err < 1e-6, "{report:?}");
        }
    }
}
