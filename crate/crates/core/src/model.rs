//! The full acoustic model: text encoder, style-conditioned prosody
//! predictor, prosody encoder and decoder over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{sha256_hex, CorpusSpec};
use crate::decoder::{Decoder, DecoderConfig, PackedMemory, TracedOutput};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prosody::{NormStats, FEATURE_NAMES};
use crate::prosody_encoder::{ProsodyEncoder, ProsodyEncoderConfig};
use crate::prosody_predictor::{PredictorConfig, ProsodyPredictor};
use crate::tensor::Tensor;
use crate::text_encoder::{EncoderConfig, TextEncoder};

/// Prosody columns removed from the model (zeroed in normalized units in the
/// predictor targets and outputs and in the prosody encoder input).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProsodyMask {
    pub dropped: [bool; 3],
}

impl ProsodyMask {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut dropped = [false; 3];
        for n in names {
            let n = n.as_ref();
            if n == "all" {
                dropped = [true; 3];
                continue;
            }
            let c = FEATURE_NAMES
                .iter()
                .position(|f| *f == n)
                .ok_or_else(|| Error::config("train.masked_features", format!("unknown feature `{n}`")))?;
            dropped[c] = true;
        }
        Ok(Self { dropped })
    }

    pub fn names(&self) -> Vec<String> {
        (0..3)
            .filter(|&c| self.dropped[c])
            .map(|c| FEATURE_NAMES[c].to_string())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.dropped.iter().any(|&d| d)
    }

    /// Zero the dropped columns of an `N x 3` normalized matrix.
    pub fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for i in 0..out.rows() {
            for c in 0..3 {
                if self.dropped[c] {
                    out.set(i, c, 0.0);
                }
            }
        }
        out
    }

    pub fn apply_var(&self, g: &mut Graph, v: Var) -> Var {
        if self.is_empty() {
            return v;
        }
        let (rows, cols) = g.shape(v);
        let mut m = Tensor::full(rows, cols, 1.0);
        for i in 0..rows {
            for c in 0..3 {
                if self.dropped[c] {
                    m.set(i, c, 0.0);
                }
            }
        }
        g.mul_const(v, m)
    }
}

impl Serialize for ProsodyMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProsodyMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        ProsodyMask::from_names(&names).map_err(serde::de::Error::custom)
    }
}

/// Everything that determines the parameter layout and the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub prosody_encoder: ProsodyEncoderConfig,
    pub decoder: DecoderConfig,
    pub mask: ProsodyMask,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.predictor.validate()?;
        self.prosody_encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.phoneme_vocab_size != self.corpus.phoneme_inventory_size {
            return Err(Error::config(
                "encoder.phoneme_vocab_size",
                "must equal corpus.phoneme_inventory_size",
            ));
        }
        if self.encoder.num_speakers != self.corpus.num_speakers || self.encoder.num_styles != self.corpus.num_styles {
            return Err(Error::config("encoder.num_speakers", "speaker and style tables must match the corpus"));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }

    pub fn memory_dim(&self) -> usize {
        self.encoder.output_dim + self.prosody_encoder.output_dim()
    }
}

/// One utterance prepared for teacher-forced training.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub phonemes: Vec<usize>,
    pub speaker_id: usize,
    pub style_id: usize,
    /// Normalized ground-truth prosody with the mask applied, `N x 3`.
    pub prosody: Tensor,
    pub mel: Tensor,
}

/// Graph handles for one utterance of a teacher-forced batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub decoder: TracedOutput,
    /// Predicted normalized prosody, mask applied, `N x 3`.
    pub prosody_pred: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub stats: NormStats,
    pub text_encoder: TextEncoder,
    pub predictor: ProsodyPredictor,
    pub prosody_encoder: ProsodyEncoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(spec: &ModelSpec, stats: NormStats, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let text_encoder = TextEncoder::new(&mut store, &spec.encoder, &mut rng)?;
        let predictor = ProsodyPredictor::new(
            &mut store,
            &spec.predictor,
            spec.encoder.output_dim,
            spec.encoder.style_embed_dim,
            &mut rng,
        )?;
        let prosody_encoder = ProsodyEncoder::new(&mut store, &spec.prosody_encoder, &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            &spec.decoder,
            spec.corpus.mel_bins,
            spec.memory_dim(),
            spec.encoder.speaker_embed_dim,
            &mut rng,
        )?;
        Ok(Self {
            spec: spec.clone(),
            store,
            stats,
            text_encoder,
            predictor,
            prosody_encoder,
            decoder,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    /// Per-phoneme memory `[text encoding | prosody encoding]`.
    pub fn memory(&self, g: &mut Graph, text: Var, prosody_normed: &Tensor) -> Result<Var> {
        let p = g.constant(self.spec.mask.apply(prosody_normed));
        let enc = self.prosody_encoder.encode_prosody(g, p)?;
        if g.shape(enc).0 != g.shape(text).0 {
            return Err(Error::input(format!(
                "{} prosody rows for {} phonemes",
                g.shape(enc).0,
                g.shape(text).0
            )));
        }
        Ok(g.concat_cols(&[text, enc]))
    }

    /// Predicted normalized prosody for one utterance, mask applied.
    pub fn predict(&self, g: &mut Graph, text: Var, style_id: usize) -> Result<Var> {
        let style = self.text_encoder.embed_style(g, &[style_id])?;
        let pred = self.predictor.predict_prosody(g, text, style)?;
        Ok(self.spec.mask.apply_var(g, pred))
    }

    /// Teacher-forced pass: ground-truth prosody into the prosody encoder,
    /// predicted prosody returned for the predictor loss.
    pub fn forward_batch(&self, g: &mut Graph, items: &[&TrainItem]) -> Result<Vec<ForwardOutput>> {
        if items.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mut memories = Vec::with_capacity(items.len());
        let mut preds = Vec::with_capacity(items.len());
        for item in items {
            if item.prosody.rows() != item.phonemes.len() {
                return Err(Error::input(format!(
                    "{} prosody rows for {} phonemes",
                    item.prosody.rows(),
                    item.phonemes.len()
                )));
            }
            let text = self.text_encoder.encode_text(g, &item.phonemes)?;
            preds.push(self.predict(g, text, item.style_id)?);
            memories.push(self.memory(g, text, &item.prosody)?);
        }
        let packed = PackedMemory::new(g, &memories)?;
        let ids: Vec<usize> = items.iter().map(|i| i.speaker_id).collect();
        let speakers = self.text_encoder.embed_speaker(g, &ids)?;
        let targets: Vec<&Tensor> = items.iter().map(|i| &i.mel).collect();
        let outs = self.decoder.teacher_forced(g, &packed, speakers, &targets)?;
        Ok(outs
            .into_iter()
            .zip(preds)
            .map(|(decoder, prosody_pred)| ForwardOutput { decoder, prosody_pred })
            .collect())
    }
}
