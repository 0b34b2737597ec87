//! Phoneme embedding, two-layer pre-net and CBHG body, plus the speaker and
//! style lookup tables.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Conv1d, Highway, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub phoneme_vocab_size: usize,
    pub embed_dim: usize,
    pub prenet_dims: Vec<usize>,
    pub prenet_dropout: f64,
    pub cbhg_bank_size: usize,
    pub cbhg_channels: usize,
    pub cbhg_projection_channels: usize,
    pub highway_layers: usize,
    pub output_dim: usize,
    pub speaker_embed_dim: usize,
    pub style_embed_dim: usize,
    pub num_speakers: usize,
    pub num_styles: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            phoneme_vocab_size: 24,
            embed_dim: 128,
            prenet_dims: vec![128, 64],
            prenet_dropout: 0.5,
            cbhg_bank_size: 8,
            cbhg_channels: 128,
            cbhg_projection_channels: 128,
            highway_layers: 4,
            output_dim: 128,
            speaker_embed_dim: 256,
            style_embed_dim: 64,
            num_speakers: 3,
            num_styles: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.phoneme_vocab_size", self.phoneme_vocab_size),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.cbhg_bank_size", self.cbhg_bank_size),
            ("encoder.cbhg_channels", self.cbhg_channels),
            ("encoder.cbhg_projection_channels", self.cbhg_projection_channels),
            ("encoder.output_dim", self.output_dim),
            ("encoder.speaker_embed_dim", self.speaker_embed_dim),
            ("encoder.style_embed_dim", self.style_embed_dim),
            ("encoder.num_speakers", self.num_speakers),
            ("encoder.num_styles", self.num_styles),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.prenet_dims.len() != 2 || self.prenet_dims.contains(&0) {
            return Err(Error::config(
                "encoder.prenet_dims",
                "pre-net has exactly two layers with positive widths",
            ));
        }
        if !self.output_dim.is_multiple_of(2) {
            return Err(Error::config(
                "encoder.output_dim",
                "must be even (bidirectional halves)",
            ));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::config("encoder.prenet_dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub speaker_table: ParamId,
    pub style_table: ParamId,
    prenet: [Linear; 2],
    bank: Vec<Conv1d>,
    projection1: Conv1d,
    projection2: Conv1d,
    pre_highway: Linear,
    highways: Vec<Highway>,
    rnn: BiLstm,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let embedding = store.add(
            "encoder.embedding",
            Tensor::randn(c.phoneme_vocab_size, c.embed_dim, 0.3, rng),
        );
        let speaker_table = store.add(
            "encoder.speaker_embedding",
            Tensor::randn(c.num_speakers, c.speaker_embed_dim, 0.3, rng),
        );
        let style_table = store.add(
            "encoder.style_embedding",
            Tensor::randn(c.num_styles, c.style_embed_dim, 0.3, rng),
        );
        let (p1, p2) = (c.prenet_dims[0], c.prenet_dims[1]);
        let prenet = [
            Linear::new(store, "encoder.prenet.0", c.embed_dim, p1, rng),
            Linear::new(store, "encoder.prenet.1", p1, p2, rng),
        ];
        let bank = (1..=c.cbhg_bank_size)
            .map(|w| Conv1d::new(store, &format!("encoder.cbhg.bank.{w}"), p2, c.cbhg_channels, w, rng))
            .collect();
        let projection1 = Conv1d::new(
            store,
            "encoder.cbhg.projection.0",
            c.cbhg_bank_size * c.cbhg_channels,
            c.cbhg_projection_channels,
            3,
            rng,
        );
        let projection2 = Conv1d::new(store, "encoder.cbhg.projection.1", c.cbhg_projection_channels, p2, 3, rng);
        let half = c.output_dim / 2;
        let pre_highway = Linear::new(store, "encoder.cbhg.pre_highway", p2, half, rng);
        let highways = (0..c.highway_layers)
            .map(|i| Highway::new(store, &format!("encoder.cbhg.highway.{i}"), half, rng))
            .collect();
        let rnn = BiLstm::new(store, "encoder.cbhg.rnn", half, half, rng);
        Ok(Self {
            config: config.clone(),
            embedding,
            speaker_table,
            style_table,
            prenet,
            bank,
            projection1,
            projection2,
            pre_highway,
            highways,
            rnn,
        })
    }

    pub fn check_phonemes(&self, phonemes: &[usize]) -> Result<()> {
        if phonemes.is_empty() {
            return Err(Error::input("phoneme sequence is empty"));
        }
        if let Some(&bad) = phonemes.iter().find(|&&p| p >= self.config.phoneme_vocab_size) {
            return Err(Error::input(format!(
                "phoneme id {bad} outside vocabulary of {}",
                self.config.phoneme_vocab_size
            )));
        }
        Ok(())
    }

    /// Phonemes of one utterance to an `N x output_dim` hidden sequence.
    pub fn encode_text(&self, g: &mut Graph, phonemes: &[usize]) -> Result<Var> {
        self.check_phonemes(phonemes)?;
        let table = g.param(self.embedding);
        let mut x = g.gather_rows(table, phonemes);
        for layer in &self.prenet {
            x = layer.forward(g, x);
            x = g.relu(x);
            x = g.dropout(x, self.config.prenet_dropout);
        }
        let prenet_out = x;

        let branches: Vec<Var> = self
            .bank
            .iter()
            .map(|conv| {
                let y = conv.forward(g, prenet_out);
                g.relu(y)
            })
            .collect();
        let stacked = g.concat_cols(&branches);
        let pooled = g.max_pool2(stacked);
        let y = self.projection1.forward(g, pooled);
        let y = g.relu(y);
        let y = self.projection2.forward(g, y);
        let residual = g.add(y, prenet_out);

        let mut h = self.pre_highway.forward(g, residual);
        for hw in &self.highways {
            h = hw.forward(g, h);
        }
        Ok(self.rnn.forward(g, h))
    }

    /// One row per id, `B x speaker_embed_dim`.
    pub fn embed_speaker(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.num_speakers) {
            return Err(Error::input(format!(
                "speaker id {bad} outside table of {}",
                self.config.num_speakers
            )));
        }
        let table = g.param(self.speaker_table);
        Ok(g.gather_rows(table, ids))
    }

    /// One row per id, `B x style_embed_dim`.
    pub fn embed_style(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.num_styles) {
            return Err(Error::input(format!(
                "style id {bad} outside table of {}",
                self.config.num_styles
            )));
        }
        let table = g.param(self.style_table);
        Ok(g.gather_rows(table, ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradient;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            phoneme_vocab_size: 10,
            embed_dim: 6,
            prenet_dims: vec![6, 5],
            cbhg_bank_size: 3,
            cbhg_channels: 3,
            cbhg_projection_channels: 4,
            highway_layers: 2,
            output_dim: 6,
            speaker_embed_dim: 4,
            style_embed_dim: 3,
            num_speakers: 3,
            num_styles: 3,
            ..EncoderConfig::default()
        }
    }

    fn build(config: &EncoderConfig) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = TextEncoder::new(&mut store, config, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn defaults_match_documented_sizes() {
        let c = EncoderConfig::default();
        assert_eq!(c.speaker_embed_dim, 256);
        assert_eq!(c.prenet_dims.len(), 2);
        assert_eq!(c.style_embed_dim, 64);
        c.validate().unwrap();
    }

    #[test]
    fn output_shape_and_length_preservation() {
        let (store, enc) = build(&small());
        for n in [1usize, 2, 7, 40] {
            let phonemes: Vec<usize> = (0..n).map(|i| i % 10).collect();
            let mut g = Graph::new(&store);
            let out = enc.encode_text(&mut g, &phonemes).unwrap();
            assert_eq!(g.shape(out), (n, 6));
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, enc) = build(&small());
        let seq = [1usize, 4, 2, 9, 0, 3, 3];
        let mut g = Graph::new(&store);
        let a = enc.encode_text(&mut g, &seq).unwrap();
        let b = enc.encode_text(&mut g, &seq).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn rejects_out_of_vocabulary_and_bad_ids() {
        let (store, enc) = build(&small());
        let mut g = Graph::new(&store);
        assert!(matches!(enc.encode_text(&mut g, &[1, 10]), Err(Error::Input(_))));
        assert!(matches!(enc.encode_text(&mut g, &[]), Err(Error::Input(_))));
        assert!(enc.embed_speaker(&mut g, &[3]).is_err());
        assert!(enc.embed_style(&mut g, &[3]).is_err());
    }

    #[test]
    fn speaker_lookup_is_stable_and_grad_is_row_local() {
        let (store, enc) = build(&small());
        let mut g = Graph::new(&store);
        let a = enc.embed_speaker(&mut g, &[0]).unwrap();
        let b = enc.embed_speaker(&mut g, &[0]).unwrap();
        assert_eq!(g.value(a), g.value(b));

        let mut g = Graph::new(&store);
        let e = enc.embed_speaker(&mut g, &[1]).unwrap();
        let sq = g.square(e);
        let loss = g.sum(sq);
        g.backward(loss);
        let grads = g.param_grads();
        let (_, grad) = grads.iter().find(|(id, _)| *id == enc.speaker_table).unwrap();
        for r in [0usize, 2] {
            assert!(grad.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(grad.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn embedding_gradient_matches_central_differences() {
        let (store, enc) = build(&small());
        let probe = Tensor::from_rows(&[
            vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2],
            vec![-0.1, 0.6, -0.3, 0.2, 0.1, -0.5],
            vec![0.4, 0.1, 0.2, -0.6, 0.3, 0.2],
        ]);
        let report = check_param_gradient(&store, enc.embedding, 1e-3, 60, |g| {
            let h = enc.encode_text(g, &[2, 7, 4]).unwrap();
            let p = g.constant(probe.clone());
            let m = g.mul(h, p);
            g.sum(m)
        });
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}
