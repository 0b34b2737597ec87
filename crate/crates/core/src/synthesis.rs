//! Inference: text and style id to predicted prosody, optional scaling,
//! prosody encoding and free-running decoding with a chosen speaker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::decoder::DecodeMode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prosody::{round_frames, ProsodyMatrix, DURATION, ENERGY, PITCH};
use crate::tensor::Tensor;
use crate::vocoder;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSpec {
    pub pitch_scale: f64,
    pub energy_scale: f64,
    pub duration_scale: f64,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        Self {
            pitch_scale: 1.0,
            energy_scale: 1.0,
            duration_scale: 1.0,
        }
    }
}

impl ScaleSpec {
    pub fn pitch(s: f64) -> Self {
        Self {
            pitch_scale: s,
            ..Self::default()
        }
    }

    pub fn energy(s: f64) -> Self {
        Self {
            energy_scale: s,
            ..Self::default()
        }
    }

    pub fn duration(s: f64) -> Self {
        Self {
            duration_scale: s,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pitch_scale", self.pitch_scale),
            ("energy_scale", self.energy_scale),
            ("duration_scale", self.duration_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Scales outside the ranges the controls were tested in: 20% for pitch
    /// and energy, 50% for duration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [("pitch_scale", self.pitch_scale), ("energy_scale", self.energy_scale)] {
            if !(0.8..=1.25).contains(&v) {
                out.push(format!("{name} {v} is outside [0.8, 1.25]; output may degrade"));
            }
        }
        if !(0.5..=1.5).contains(&self.duration_scale) {
            out.push(format!(
                "duration_scale {} is outside [0.5, 1.5]; output may degrade",
                self.duration_scale
            ));
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        self.pitch_scale == 1.0 && self.energy_scale == 1.0 && self.duration_scale == 1.0
    }
}

/// Multiply prosody (linear units) column-wise. Durations are re-rounded
/// half-up with a floor of one frame; pitch and energy are multiplied exactly.
/// Division by `s` is multiplication by `1/s`.
pub fn scale_prosody(prosody: &ProsodyMatrix, scales: &ScaleSpec) -> Result<ProsodyMatrix> {
    scales.validate()?;
    let mut out = prosody.clone();
    if scales.pitch_scale != 1.0 {
        out.scale_column(PITCH, scales.pitch_scale);
    }
    if scales.energy_scale != 1.0 {
        out.scale_column(ENERGY, scales.energy_scale);
    }
    if scales.duration_scale != 1.0 {
        for i in 0..out.len() {
            let d = round_frames(prosody.duration(i) * scales.duration_scale);
            out.set(i, DURATION, d);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub phonemes: Vec<usize>,
    pub speaker_id: usize,
    pub style_id: usize,
    pub scales: ScaleSpec,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    pub mel_before: Tensor,
    pub mel_after: Tensor,
    /// Predictor output after denormalization and duration rounding.
    pub prosody_predicted: ProsodyMatrix,
    /// Prosody fed to the prosody encoder, after scaling.
    pub prosody_used: ProsodyMatrix,
    pub alignments: Tensor,
    pub means: Tensor,
    pub reached_cap: bool,
}

impl SynthesisOutput {
    pub fn waveform(&self, hop_length: usize) -> Result<Vec<f64>> {
        vocoder::mel_to_waveform(&self.mel_after, hop_length)
    }
}

/// Run the inference pipeline up to the mel (no waveform).
pub fn synthesize_mel(model: &Model, request: &SynthesisRequest) -> Result<SynthesisOutput> {
    request.scales.validate()?;
    let mut g = Graph::new(&model.store);
    let text = model.text_encoder.encode_text(&mut g, &request.phonemes)?;
    let pred = model.predict(&mut g, text, request.style_id)?;
    let speaker = model.text_encoder.embed_speaker(&mut g, &[request.speaker_id])?;
    let predicted = model.stats.denormalize_frames(g.value(pred));
    let used = scale_prosody(&predicted, &request.scales)?;
    let normed = model.stats.normalize(&used);
    let memory = model.memory(&mut g, text, &normed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let out = model
        .decoder
        .decode_sequence(&mut g, memory, speaker, DecodeMode::FreeRunning, Some(&mut rng))?;
    Ok(SynthesisOutput {
        mel_before: out.mel_before,
        mel_after: out.mel_after,
        prosody_predicted: predicted,
        prosody_used: used,
        alignments: out.alignments,
        means: out.means,
        reached_cap: out.reached_cap,
    })
}

/// Full pipeline including the waveform stub.
pub fn synthesize(model: &Model, request: &SynthesisRequest) -> Result<(SynthesisOutput, Vec<f64>)> {
    let out = synthesize_mel(model, request)?;
    let wav = out.waveform(model.spec.corpus.hop_length())?;
    Ok((out, wav))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::model::ModelSpec;
    use proptest::prelude::*;

    fn matrix() -> ProsodyMatrix {
        ProsodyMatrix::from_rows(&[[200.0, 3.0, 2.5], [250.0, 1.0, 4.0]])
    }

    #[test]
    fn identity_scale_is_exact() {
        let p = matrix();
        assert_eq!(scale_prosody(&p, &ScaleSpec::default()).unwrap(), p);
    }

    #[test]
    fn pitch_scale_multiplies_only_pitch() {
        let p = matrix();
        let s = scale_prosody(&p, &ScaleSpec::pitch(1.2)).unwrap();
        assert_eq!(s.column(PITCH), vec![200.0 * 1.2, 250.0 * 1.2]);
        assert!((s.pitch(0) - 240.0).abs() < 1e-12 && (s.pitch(1) - 300.0).abs() < 1e-12);
        assert_eq!(s.column(DURATION), p.column(DURATION));
        assert_eq!(s.column(ENERGY), p.column(ENERGY));
    }

    #[test]
    fn duration_rounds_half_up_with_floor() {
        let p = matrix();
        let s = scale_prosody(&p, &ScaleSpec::duration(0.5)).unwrap();
        assert_eq!(s.column(DURATION), vec![2.0, 1.0]);
    }

    #[test]
    fn non_positive_scales_are_rejected() {
        for bad in [0.0, -1.0, f64::NAN] {
            assert!(matches!(scale_prosody(&matrix(), &ScaleSpec::energy(bad)), Err(Error::Input(_))));
        }
    }

    #[test]
    fn warning_bands() {
        assert!(ScaleSpec::pitch(1.2).warnings().is_empty());
        assert_eq!(ScaleSpec::pitch(1.3).warnings().len(), 1);
        assert!(ScaleSpec::duration(1.5).warnings().is_empty());
        assert_eq!(ScaleSpec::duration(1.6).warnings().len(), 1);
    }

    proptest! {
        #[test]
        fn scaling_round_trips_for_pitch_and_energy(
            rows in proptest::collection::vec((80.0f64..400.0, 1.0f64..9.0, 0.5f64..6.0), 1..12),
            s in 0.5f64..2.0,
        ) {
            let rows: Vec<[f64; 3]> = rows.into_iter().map(|(a, b, c)| [a, b.round(), c]).collect();
            let p = ProsodyMatrix::from_rows(&rows);
            let spec = ScaleSpec { pitch_scale: s, energy_scale: s, duration_scale: 1.0 };
            let inv = ScaleSpec { pitch_scale: 1.0 / s, energy_scale: 1.0 / s, duration_scale: 1.0 };
            let back = scale_prosody(&scale_prosody(&p, &spec).unwrap(), &inv).unwrap();
            for i in 0..p.len() {
                prop_assert!((back.pitch(i) - p.pitch(i)).abs() <= 1e-9 * p.pitch(i));
                prop_assert!((back.energy(i) - p.energy(i)).abs() <= 1e-9 * p.energy(i));
                prop_assert_eq!(back.duration(i), p.duration(i));
            }
            // changing one scale leaves the other columns bit-identical
            let only_pitch = scale_prosody(&p, &ScaleSpec::pitch(s)).unwrap();
            prop_assert_eq!(only_pitch.column(DURATION), p.column(DURATION));
            prop_assert_eq!(only_pitch.column(ENERGY), p.column(ENERGY));
        }
    }

    fn tiny_model() -> (crate::corpus::Corpus, Model) {
        let spec: ModelSpec = crate::training::tests::tiny_spec();
        let corpus = generate_corpus(&CorpusSpec { ..spec.corpus.clone() }).unwrap();
        let model = Model::new(&spec, corpus.stats.clone(), 2).unwrap();
        (corpus, model)
    }

    #[test]
    fn synthesis_is_deterministic_and_audits_scaling() {
        let (corpus, model) = tiny_model();
        let phonemes = corpus.utterances[0].phonemes.clone();
        let req = SynthesisRequest {
            phonemes,
            speaker_id: 1,
            style_id: 2,
            scales: ScaleSpec::default(),
            seed: 9,
        };
        let a = synthesize_mel(&model, &req).unwrap();
        let b = synthesize_mel(&model, &req).unwrap();
        assert_eq!(a.mel_after, b.mel_after);
        let scaled = synthesize_mel(
            &model,
            &SynthesisRequest {
                scales: ScaleSpec::pitch(1.2),
                ..req.clone()
            },
        )
        .unwrap();
        assert_eq!(scaled.prosody_predicted, a.prosody_predicted);
        for i in 0..a.prosody_used.len() {
            assert_eq!(scaled.prosody_used.pitch(i), a.prosody_used.pitch(i) * 1.2);
            assert_eq!(scaled.prosody_used.energy(i), a.prosody_used.energy(i));
        }
        let bad = SynthesisRequest { style_id: 7, ..req };
        assert!(matches!(synthesize_mel(&model, &bad), Err(Error::Input(_))));
    }
}
