//! Multi-scale prosody encoder: filter bank of widths `1..=m`, max-pool,
//! 1-D convolution and a bidirectional LSTM, all length preserving.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Conv1d};
use crate::params::ParamStore;

pub const INPUT_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProsodyEncoderConfig {
    pub bank_max_width: usize,
    pub bank_channels_per_width: usize,
    pub post_conv_channels: usize,
    pub blstm_hidden: usize,
}

impl Default for ProsodyEncoderConfig {
    fn default() -> Self {
        Self {
            bank_max_width: 8,
            bank_channels_per_width: 32,
            post_conv_channels: 128,
            blstm_hidden: 64,
        }
    }
}

impl ProsodyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("prosody_encoder.bank_max_width", self.bank_max_width),
            ("prosody_encoder.bank_channels_per_width", self.bank_channels_per_width),
            ("prosody_encoder.post_conv_channels", self.post_conv_channels),
            ("prosody_encoder.blstm_hidden", self.blstm_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.blstm_hidden
    }
}

#[derive(Clone, Debug)]
pub struct ProsodyEncoder {
    pub config: ProsodyEncoderConfig,
    pub bank: Vec<Conv1d>,
    pub post_conv: Conv1d,
    pub rnn: BiLstm,
}

impl ProsodyEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &ProsodyEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.bank_channels_per_width;
        let bank = (1..=config.bank_max_width)
            .map(|w| Conv1d::new(store, &format!("prosody_encoder.bank.{w}"), INPUT_DIM, c, w, rng))
            .collect();
        let post_conv = Conv1d::new(
            store,
            "prosody_encoder.post_conv",
            config.bank_max_width * c,
            config.post_conv_channels,
            3,
            rng,
        );
        let rnn = BiLstm::new(store, "prosody_encoder.rnn", config.post_conv_channels, config.blstm_hidden, rng);
        Ok(Self {
            config: config.clone(),
            bank,
            post_conv,
            rnn,
        })
    }

    /// Width-`i` branches stacked along channels: `N x (m * C)`.
    pub fn conv_bank(&self, g: &mut Graph, prosody: Var) -> Result<Var> {
        let (n, d) = g.shape(prosody);
        if d != INPUT_DIM || n == 0 {
            return Err(Error::input(format!("prosody must be N x 3 with N >= 1, got {n} x {d}")));
        }
        let branches: Vec<Var> = self.bank.iter().map(|conv| conv.forward(g, prosody)).collect();
        Ok(g.concat_cols(&branches))
    }

    /// `N x 3` normalized prosody to `N x 2*blstm_hidden`.
    pub fn encode_prosody(&self, g: &mut Graph, prosody: Var) -> Result<Var> {
        if !g.value(prosody).all_finite() {
            return Err(Error::input("prosody contains non-finite values"));
        }
        let bank = self.conv_bank(g, prosody)?;
        let bank = g.relu(bank);
        let pooled = g.max_pool2(bank);
        let h = self.post_conv.forward(g, pooled);
        let h = g.relu(h);
        Ok(self.rnn.forward(g, h))
    }

    /// Rows of input that can influence output row `n` through the
    /// convolutional stack (before the recurrent layer), as `(before, after)`.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (bank_left, bank_right) = crate::nn::same_padding(self.config.bank_max_width);
        // max-pool looks one row ahead; post conv is width 3
        (bank_left + 1, bank_right + 1 + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradient;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ProsodyEncoderConfig {
        ProsodyEncoderConfig {
            bank_max_width: 8,
            bank_channels_per_width: 3,
            post_conv_channels: 5,
            blstm_hidden: 4,
        }
    }

    fn build() -> (ParamStore, ProsodyEncoder) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let e = ProsodyEncoder::new(&mut store, &small(), &mut rng).unwrap();
        (store, e)
    }

    #[test]
    fn default_bank_has_eight_widths() {
        assert_eq!(ProsodyEncoderConfig::default().bank_max_width, 8);
        let (_, e) = build();
        let widths: Vec<usize> = e.bank.iter().map(|c| c.width).collect();
        assert_eq!(widths, (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn lengths_are_preserved() {
        let (store, e) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 2, 20] {
            let mut g = Graph::new(&store);
            let x = g.constant(Tensor::randn(n, 3, 1.0, &mut rng));
            let bank = e.conv_bank(&mut g, x).unwrap();
            assert_eq!(g.shape(bank), (n, 8 * 3));
            let out = e.encode_prosody(&mut g, x).unwrap();
            assert_eq!(g.shape(out), (n, 8));
        }
    }

    #[test]
    fn identity_width_one_branch_reproduces_input() {
        let (mut store, e) = build();
        let mut k = Tensor::zeros(3, 3);
        for i in 0..3 {
            k.set(i, i, 1.0);
        }
        *store.value_mut(e.bank[0].kernel) = k;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = Tensor::randn(6, 3, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(input.clone());
        let bank = e.conv_bank(&mut g, x).unwrap();
        let first = g.value(bank).slice_cols(0, 3);
        assert_eq!(first, input);
    }

    #[test]
    fn pooling_is_positively_homogeneous() {
        let store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let acts = Tensor::randn(7, 5, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let a = g.constant(acts.clone());
        let b = g.constant(acts.map(|v| 2.5 * v));
        let pa = g.max_pool2(a);
        let pb = g.max_pool2(b);
        let scaled = g.value(pa).map(|v| 2.5 * v);
        for (x, y) in scaled.data().iter().zip(g.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_state_ignores_inputs_beyond_receptive_field() {
        let (store, e) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 12;
        let input = Tensor::randn(n, 3, 1.0, &mut rng);
        let mut perturbed = input.clone();
        perturbed.set(n - 1, 0, perturbed.get(n - 1, 0) + 5.0);
        let run = |t: Tensor| {
            let mut g = Graph::new(&store);
            let x = g.constant(t);
            let out = e.encode_prosody(&mut g, x).unwrap();
            g.value(out).clone()
        };
        let a = run(input);
        let b = run(perturbed);
        let (_, after) = e.receptive_field();
        let hidden = e.config.blstm_hidden;
        // forward-direction rows whose receptive field stops before row n-1
        for row in 0..n - 1 - after {
            for c in 0..hidden {
                assert_eq!(a.get(row, c), b.get(row, c), "row {row}");
            }
        }
        // the backward direction does see the end of the sequence
        assert_ne!(a.get(0, hidden), b.get(0, hidden));
    }

    #[test]
    fn bidirectional_output_is_not_reversal_symmetric() {
        let (store, e) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let input = Tensor::randn(6, 3, 1.0, &mut rng);
        let reversed = Tensor::from_rows(&input.to_rows().into_iter().rev().collect::<Vec<_>>());
        let run = |t: Tensor| {
            let mut g = Graph::new(&store);
            let x = g.constant(t);
            let out = e.encode_prosody(&mut g, x).unwrap();
            g.value(out).clone()
        };
        let a = run(input);
        let b = run(reversed);
        let b_back = Tensor::from_rows(&b.to_rows().into_iter().rev().collect::<Vec<_>>());
        assert!(a.zip_map(&b_back, |x, y| (x - y).abs()).max_abs() > 1e-6);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let (store, e) = build();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(&[vec![0.0, f64::NAN, 1.0]]));
        assert!(matches!(e.encode_prosody(&mut g, x), Err(Error::Input(_))));
    }

    #[test]
    fn full_stack_gradient_matches_central_differences() {
        let (store, e) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = Tensor::randn(5, 3, 1.0, &mut rng);
        let probe = Tensor::randn(5, 8, 1.0, &mut rng);
        for id in [e.bank[2].kernel, e.bank[7].kernel, e.post_conv.kernel, e.rnn.backward.input] {
            let report = check_param_gradient(&store, id, 1e-3, 80, |g| {
                let x = g.constant(input.clone());
                let out = e.encode_prosody(g, x).unwrap();
                let p = g.constant(probe.clone());
                let m = g.mul(out, p);
                g.sum(m)
            });
            assert!(report.max_rel_err <= 1e-4, "{}: {report:?}", store.name(id));
        }
    }
}
