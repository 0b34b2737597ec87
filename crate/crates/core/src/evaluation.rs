//! Objective proxies for style similarity, speaker similarity, the prosody
//! ablation and the control-response curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{analyze_frame, cosine, extract_prosody_oracle, unit_bump, BinAxis, Corpus, SpeakerTimbre};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, ProsodyMask};
use crate::prosody::ProsodyMatrix;
use crate::synthesis::{synthesize_mel, ScaleSpec, SynthesisOutput, SynthesisRequest};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, Trainer};

pub const NUM_FEATURES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out texts per (speaker, style) cell.
    pub texts_per_cell: usize,
    pub seed: u64,
    pub pitch_scales: Vec<f64>,
    pub energy_scales: Vec<f64>,
    pub duration_scales: Vec<f64>,
    /// Ablation variants by name: `full`, `without_pitch`,
    /// `without_duration`, `without_energy`, `without_all`.
    pub ablation_variants: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            texts_per_cell: 10,
            seed: 0,
            pitch_scales: vec![0.8, 1.0, 1.2],
            energy_scales: vec![0.8, 1.0, 1.2],
            duration_scales: vec![0.8, 1.0, 1.2],
            ablation_variants: ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.texts_per_cell == 0 {
            return Err(Error::config("eval.texts_per_cell", "must be at least 1"));
        }
        for (field, grid) in [
            ("eval.pitch_scales", &self.pitch_scales),
            ("eval.energy_scales", &self.energy_scales),
            ("eval.duration_scales", &self.duration_scales),
        ] {
            if !grid.contains(&1.0) {
                return Err(Error::config(field, "must include the identity scale 1.0"));
            }
            if grid.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::config(field, "scales must be positive"));
            }
        }
        for v in &self.ablation_variants {
            variant_mask(v)?;
        }
        Ok(())
    }
}

pub const ABLATION_VARIANTS: [&str; 5] = ["full", "without_pitch", "without_duration", "without_energy", "without_all"];

pub fn variant_mask(name: &str) -> Result<ProsodyMask> {
    match name {
        "full" => Ok(ProsodyMask::default()),
        other => match other.strip_prefix("without_") {
            Some(f) => ProsodyMask::from_names(&[f]).map_err(|_| {
                Error::config("eval.ablation_variants", format!("unknown variant `{name}`"))
            }),
            None => Err(Error::config("eval.ablation_variants", format!("unknown variant `{name}`"))),
        },
    }
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

/// Mean and variance of pitch, duration and energy over an utterance.
pub fn style_features(p: &ProsodyMatrix) -> [f64; NUM_FEATURES] {
    let (pm, pv) = mean_var(&p.column(0));
    let (dm, dv) = mean_var(&p.column(1));
    let (em, ev) = mean_var(&p.column(2));
    [pm, pv, dm, dv, em, ev]
}

/// Where classifier training data came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Oracle extraction on corpus mels with their true boundaries.
    GroundTruth,
    /// Caller-supplied samples.
    External,
}

/// Nearest centroid over utterance statistics scaled by the pooled
/// within-style spread.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StyleClassifier {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
    /// Standardized centroid per style id.
    pub centroids: Vec<[f64; NUM_FEATURES]>,
    pub provenance: Provenance,
}

impl StyleClassifier {
    pub fn fit(samples: &[([f64; NUM_FEATURES], usize)], num_styles: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::input("no samples to fit the style classifier"));
        }
        let n = samples.len() as f64;
        let mut mean = [0.0; NUM_FEATURES];
        for (f, _) in samples {
            for i in 0..NUM_FEATURES {
                mean[i] += f[i] / n;
            }
        }
        let mut raw = vec![[0.0; NUM_FEATURES]; num_styles];
        let mut counts = vec![0usize; num_styles];
        for (f, style) in samples {
            if *style >= num_styles {
                return Err(Error::input(format!("style {style} outside {num_styles}")));
            }
            counts[*style] += 1;
            for i in 0..NUM_FEATURES {
                raw[*style][i] += f[i];
            }
        }
        for (c, &k) in raw.iter_mut().zip(&counts) {
            if k == 0 {
                return Err(Error::input("every style needs at least one sample"));
            }
            for v in c.iter_mut() {
                *v /= k as f64;
            }
        }
        // pooled within-style spread
        let mut std = [0.0; NUM_FEATURES];
        for (f, style) in samples {
            for i in 0..NUM_FEATURES {
                std[i] += (f[i] - raw[*style][i]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt().max(1e-9);
        }
        let centroids = raw
            .iter()
            .map(|c| std::array::from_fn(|i| (c[i] - mean[i]) / std[i]))
            .collect();
        Ok(Self {
            mean,
            std,
            centroids,
            provenance: Provenance::External,
        })
    }

    /// Fit on oracle-extracted prosody of the ground-truth training mels.
    pub fn fit_corpus(corpus: &Corpus) -> Result<Self> {
        let mut samples = Vec::new();
        for u in corpus.train() {
            let timbre = corpus.timbre(u.speaker_id)?;
            let p = extract_prosody_oracle(&u.mel, &u.phone_boundaries, timbre)?;
            samples.push((style_features(&p), u.style_id));
        }
        let mut clf = Self::fit(&samples, corpus.spec.num_styles)?;
        clf.provenance = Provenance::GroundTruth;
        Ok(clf)
    }

    pub fn classify(&self, features: &[f64; NUM_FEATURES]) -> Option<usize> {
        if features.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let z: Vec<f64> = (0..NUM_FEATURES).map(|i| (features[i] - self.mean[i]) / self.std[i]).collect();
        self.centroids
            .iter()
            .enumerate()
            .map(|(k, c)| (k, c.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }
}

/// Speaker identity from the spectral residual left after fitting a pitch
/// bump to each frame.
#[derive(Clone, Debug)]
pub struct SpeakerProbe {
    pub timbres: Vec<SpeakerTimbre>,
}

impl SpeakerProbe {
    pub fn new(timbres: &[SpeakerTimbre]) -> Self {
        Self {
            timbres: timbres.to_vec(),
        }
    }

    /// Time-averaged residual under the hypothesis that `timbre` spoke.
    fn residual(mel: &Tensor, timbre: &SpeakerTimbre) -> Option<Vec<f64>> {
        let bins = mel.cols();
        let axis = BinAxis::new(bins);
        let mut acc = vec![0.0; bins];
        let mut used = 0usize;
        for t in 0..mel.rows() {
            let frame = mel.row(t);
            if let Some((hz, norm)) = analyze_frame(frame, timbre) {
                let bump = unit_bump(axis.position(hz), bins);
                for ((a, f), b) in acc.iter_mut().zip(frame).zip(&bump) {
                    *a += f - norm * b;
                }
                used += 1;
            }
        }
        (used > 0).then(|| acc.into_iter().map(|a| a / used as f64).collect())
    }

    /// Speaker whose signature best matches the residual computed under its
    /// own hypothesis.
    pub fn classify(&self, mel: &Tensor) -> Option<usize> {
        self.timbres
            .iter()
            .filter_map(|t| Some((t.speaker_id, cosine(&Self::residual(mel, t)?, &t.spectral_signature))))
            .filter(|(_, c)| c.is_finite())
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(s, _)| s)
    }
}

/// Phone boundaries of a synthesized mel from its attention: each frame goes
/// to the most attended phoneme, made monotone. Spans may be empty.
pub fn attention_boundaries(alignments: &Tensor) -> Vec<usize> {
    let (frames, n) = alignments.shape();
    let mut owner = Vec::with_capacity(frames);
    let mut current = 0usize;
    for t in 0..frames {
        let row = alignments.row(t);
        let arg = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
        current = current.max(arg);
        owner.push(current);
    }
    let mut bounds = vec![0usize; n + 1];
    for i in 0..n {
        bounds[i + 1] = owner.iter().filter(|&&o| o <= i).count();
    }
    bounds
}

/// Prosody measured on a synthesized mel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasuredProsody {
    /// Per-phoneme pitch (speaker offset removed); phonemes without frames or
    /// without a peak are skipped.
    pub pitches: Vec<f64>,
    pub energies: Vec<f64>,
    /// Frames per phoneme, zero allowed.
    pub durations: Vec<f64>,
    pub total_frames: usize,
}

impl MeasuredProsody {
    pub fn mean_pitch(&self) -> f64 {
        mean_var(&self.pitches).0
    }

    pub fn mean_energy(&self) -> f64 {
        mean_var(&self.energies).0
    }

    pub fn features(&self) -> [f64; NUM_FEATURES] {
        let (pm, pv) = mean_var(&self.pitches);
        let (em, ev) = mean_var(&self.energies);
        let (_, dv) = mean_var(&self.durations);
        let dm = self.total_frames as f64 / self.durations.len().max(1) as f64;
        [pm, pv, dm, dv, em, ev]
    }
}

pub fn measure_output(mel: &Tensor, alignments: &Tensor, timbre: &SpeakerTimbre) -> MeasuredProsody {
    let bounds = attention_boundaries(alignments);
    let mut pitches = Vec::new();
    let mut energies = Vec::new();
    let mut durations = Vec::new();
    for w in bounds.windows(2) {
        durations.push((w[1] - w[0]) as f64);
        if w[1] > w[0] {
            if let Ok(p) = extract_prosody_oracle(mel, &[w[0], w[1]], timbre) {
                pitches.push(p.pitch(0));
                energies.push(p.energy(0));
            }
        }
    }
    MeasuredProsody {
        pitches,
        energies,
        durations,
        total_frames: mel.rows(),
    }
}

/// JSON has no NaN; serde_json writes it as `null`, so read `null` back as NaN.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellReport {
    pub speaker_id: usize,
    pub style_id: usize,
    pub count: usize,
    #[serde(deserialize_with = "nan_if_null")]
    pub style_accuracy: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub speaker_accuracy: f64,
    /// Items that hit the decoding cap; excluded from the accuracies.
    pub non_terminated: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossReport {
    pub cells: Vec<CellReport>,
    #[serde(deserialize_with = "nan_if_null")]
    pub diagonal_style_accuracy: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub off_diagonal_style_accuracy: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub diagonal_speaker_accuracy: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub off_diagonal_speaker_accuracy: f64,
    pub items: usize,
}

/// Held-out phoneme sequences: the first `per_speaker` test texts of each
/// speaker, interleaved by speaker.
pub fn held_out_texts(corpus: &Corpus, count: usize) -> Vec<Vec<usize>> {
    let mut by_speaker: BTreeMap<usize, Vec<&Vec<usize>>> = BTreeMap::new();
    for u in corpus.test() {
        by_speaker.entry(u.speaker_id).or_default().push(&u.phonemes);
    }
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    while out.len() < count {
        let mut added = false;
        for list in by_speaker.values() {
            if out.len() < count {
                if let Some(p) = list.get(i) {
                    out.push((*p).clone());
                    added = true;
                }
            }
        }
        if !added {
            break;
        }
        i += 1;
    }
    out
}

fn request(phonemes: &[usize], speaker: usize, style: usize, scales: ScaleSpec, seed: u64, item: usize) -> SynthesisRequest {
    SynthesisRequest {
        phonemes: phonemes.to_vec(),
        speaker_id: speaker,
        style_id: style,
        scales,
        seed: seed.wrapping_add(item as u64),
    }
}

/// Every (speaker, style) pair over `texts`, judged by the oracle classifiers.
/// `on_item` sees each synthesized output (for attention audits).
pub fn eval_cross_combination(
    model: &Model,
    classifier: &StyleClassifier,
    probe: &SpeakerProbe,
    texts: &[Vec<usize>],
    seed: u64,
    mut on_item: impl FnMut(&SynthesisOutput),
) -> Result<CrossReport> {
    let speakers = model.spec.corpus.num_speakers;
    let styles = model.spec.corpus.num_styles;
    let mut cells = Vec::new();
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [0usize; 2];
    let mut items = 0;
    for spk in 0..speakers {
        let timbre = probe
            .timbres
            .get(spk)
            .ok_or_else(|| Error::input(format!("no timbre for speaker {spk}")))?;
        for sty in 0..styles {
            let mut style_ok = 0usize;
            let mut spk_ok = 0usize;
            let mut non_terminated = 0usize;
            for (i, text) in texts.iter().enumerate() {
                let out = synthesize_mel(model, &request(text, spk, sty, ScaleSpec::default(), seed, i))?;
                on_item(&out);
                items += 1;
                if out.reached_cap {
                    non_terminated += 1;
                    continue;
                }
                let m = measure_output(&out.mel_after, &out.alignments, timbre);
                if classifier.classify(&m.features()) == Some(sty) {
                    style_ok += 1;
                }
                if probe.classify(&out.mel_after) == Some(spk) {
                    spk_ok += 1;
                }
            }
            let judged = texts.len() - non_terminated;
            let acc = |k: usize| if judged == 0 { 0.0 } else { k as f64 / judged as f64 };
            let cell = CellReport {
                speaker_id: spk,
                style_id: sty,
                count: texts.len(),
                style_accuracy: acc(style_ok),
                speaker_accuracy: acc(spk_ok),
                non_terminated,
            };
            let d = usize::from(spk != sty);
            sums[d][0] += cell.style_accuracy;
            sums[d][1] += cell.speaker_accuracy;
            counts[d] += 1;
            cells.push(cell);
        }
    }
    let avg = |d: usize, k: usize| if counts[d] == 0 { f64::NAN } else { sums[d][k] / counts[d] as f64 };
    Ok(CrossReport {
        cells,
        diagonal_style_accuracy: avg(0, 0),
        off_diagonal_style_accuracy: avg(1, 0),
        diagonal_speaker_accuracy: avg(0, 1),
        off_diagonal_speaker_accuracy: avg(1, 1),
        items,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub masked_features: Vec<String>,
    #[serde(deserialize_with = "nan_if_null")]
    pub off_diagonal_style_accuracy: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub diagonal_style_accuracy: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub off_diagonal_speaker_accuracy: f64,
}

/// Retrain one model per variant and score its cross-combination output.
/// `on_trained` receives each variant's trainer (to save it, or to reuse a
/// model trained elsewhere via `pretrained`); `on_item` sees every
/// synthesized output.
#[allow(clippy::too_many_arguments)]
pub fn eval_ablation(
    corpus: &Corpus,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    seed: u64,
    variants: &[String],
    texts: &[Vec<usize>],
    eval_seed: u64,
    mut pretrained: impl FnMut(&str) -> Option<Model>,
    mut on_trained: impl FnMut(&str, &Trainer) -> Result<()>,
    mut on_item: impl FnMut(&str, &SynthesisOutput),
) -> Result<Vec<AblationRow>> {
    let classifier = StyleClassifier::fit_corpus(corpus)?;
    let probe = SpeakerProbe::new(&corpus.timbres);
    let mut rows = Vec::new();
    for name in variants {
        let mask = variant_mask(name)?;
        let model = match pretrained(name) {
            Some(m) => m,
            None => {
                let vspec = ModelSpec {
                    mask,
                    ..spec.clone()
                };
                let trainer = train(corpus, &vspec, train_cfg, seed, |_, _| Ok(()))?;
                on_trained(name, &trainer)?;
                trainer.model
            }
        };
        let report = eval_cross_combination(&model, &classifier, &probe, texts, eval_seed, |o| on_item(name, o))?;
        rows.push(AblationRow {
            variant: name.clone(),
            masked_features: mask.names(),
            off_diagonal_style_accuracy: report.off_diagonal_style_accuracy,
            diagonal_style_accuracy: report.diagonal_style_accuracy,
            off_diagonal_speaker_accuracy: report.off_diagonal_speaker_accuracy,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlPoint {
    /// `pitch`, `duration` or `energy`.
    pub feature: String,
    pub scale: f64,
    /// Mean pitch (Hz), mean total frames, or mean energy over the items.
    #[serde(deserialize_with = "nan_if_null")]
    pub measured: f64,
    /// `measured` divided by the value at scale 1.0.
    #[serde(deserialize_with = "nan_if_null")]
    pub ratio: f64,
    pub items: usize,
    pub non_terminated: usize,
}

/// Scale sweeps on the diagonal (speaker, own style) pairs.
pub fn eval_control_response(
    model: &Model,
    timbres: &[SpeakerTimbre],
    texts: &[Vec<usize>],
    cfg: &EvalConfig,
    mut on_item: impl FnMut(&str, f64, &SynthesisOutput),
) -> Result<Vec<ControlPoint>> {
    let speakers = model.spec.corpus.num_speakers;
    let mut points = Vec::new();
    for (feature, grid) in [
        ("pitch", &cfg.pitch_scales),
        ("duration", &cfg.duration_scales),
        ("energy", &cfg.energy_scales),
    ] {
        let mut measured = Vec::new();
        for &scale in grid {
            let scales = match feature {
                "pitch" => ScaleSpec::pitch(scale),
                "duration" => ScaleSpec::duration(scale),
                _ => ScaleSpec::energy(scale),
            };
            let mut values = Vec::new();
            let mut non_terminated = 0;
            for spk in 0..speakers {
                let timbre = timbres
                    .get(spk)
                    .ok_or_else(|| Error::input(format!("no timbre for speaker {spk}")))?;
                for (i, text) in texts.iter().enumerate() {
                    let out = synthesize_mel(model, &request(text, spk, spk, scales, cfg.seed, i))?;
                    on_item(feature, scale, &out);
                    if out.reached_cap {
                        non_terminated += 1;
                        continue;
                    }
                    let m = measure_output(&out.mel_after, &out.alignments, timbre);
                    let v = match feature {
                        "pitch" => m.mean_pitch(),
                        "duration" => m.total_frames as f64,
                        _ => m.mean_energy(),
                    };
                    if v.is_finite() {
                        values.push(v);
                    }
                }
            }
            let mean = mean_var(&values).0;
            measured.push((scale, mean, values.len(), non_terminated));
        }
        let base = measured
            .iter()
            .find(|(s, ..)| *s == 1.0)
            .map(|(_, m, ..)| *m)
            .ok_or_else(|| Error::config("eval", format!("{feature} grid lacks scale 1.0")))?;
        for (scale, mean, items, non_terminated) in measured {
            points.push(ControlPoint {
                feature: feature.to_string(),
                scale,
                measured: mean,
                ratio: mean / base,
                items,
                non_terminated,
            });
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross: Option<CrossReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<Vec<ControlPoint>>,
}

/// One row per (feature, scale) with the measured value and ratio.
pub fn curves_csv(points: &[ControlPoint]) -> String {
    let mut s = String::from("feature,scale,measured,ratio,items,non_terminated\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{}",
            p.feature, p.scale, p.measured, p.ratio, p.items, p.non_terminated
        );
    }
    s
}

/// Measured ratio against commanded scale, with the identity line.
pub fn control_svg(points: &[ControlPoint], feature: &str) -> String {
    let pts: Vec<&ControlPoint> = points.iter().filter(|p| p.feature == feature).collect();
    let (w, h, pad) = (360.0, 300.0, 40.0);
    let lo = pts
        .iter()
        .flat_map(|p| [p.scale, p.ratio])
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min)
        .min(0.5);
    let hi = pts
        .iter()
        .flat_map(|p| [p.scale, p.ratio])
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1.5);
    let x = |v: f64| pad + (v - lo) / (hi - lo) * (w - 2.0 * pad);
    let y = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4"/>"#,
        x(lo),
        y(lo),
        x(hi),
        y(hi)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{:.1}" stroke="black"/>"#, h - pad);
    let path: Vec<String> = pts
        .iter()
        .filter(|p| p.ratio.is_finite())
        .map(|p| format!("{:.1},{:.1}", x(p.scale), y(p.ratio)))
        .collect();
    let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
    for p in pts.iter().filter(|p| p.ratio.is_finite()) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#,
            x(p.scale),
            y(p.ratio)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="13" text-anchor="middle">{feature}: measured ratio vs scale</text>"#,
        w / 2.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, render_mel, CorpusSpec};
    use std::sync::OnceLock;

    fn corpus() -> &'static Corpus {
        static C: OnceLock<Corpus> = OnceLock::new();
        C.get_or_init(|| {
            generate_corpus(&CorpusSpec {
                mel_bins: 32,
                ..CorpusSpec::default()
            })
            .unwrap()
        })
    }

    #[test]
    fn classifier_is_perfect_on_ground_truth() {
        let c = corpus();
        let clf = StyleClassifier::fit_corpus(c).unwrap();
        assert_eq!(clf.provenance, Provenance::GroundTruth);
        for u in &c.utterances {
            let p = extract_prosody_oracle(&u.mel, &u.phone_boundaries, c.timbre(u.speaker_id).unwrap()).unwrap();
            assert_eq!(clf.classify(&style_features(&p)), Some(u.style_id), "{}", u.utt_id);
        }
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let c = corpus();
        let mut samples: Vec<_> = c
            .train()
            .map(|u| {
                let p = extract_prosody_oracle(&u.mel, &u.phone_boundaries, c.timbre(u.speaker_id).unwrap()).unwrap();
                (style_features(&p), u.style_id)
            })
            .collect();
        let truth: Vec<usize> = samples.iter().map(|s| s.1).collect();
        let test: Vec<_> = c
            .test()
            .map(|u| {
                let p = extract_prosody_oracle(&u.mel, &u.phone_boundaries, c.timbre(u.speaker_id).unwrap()).unwrap();
                (style_features(&p), u.style_id)
            })
            .collect();
        // a single shuffle maps whole style clusters to one label, so average
        let shuffles = 30;
        let mut total = 0.0;
        for seed in 0..shuffles {
            let mut labels = truth.clone();
            labels.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            for (s, l) in samples.iter_mut().zip(labels) {
                s.1 = l;
            }
            let clf = StyleClassifier::fit(&samples, 3).unwrap();
            assert_eq!(clf.provenance, Provenance::External);
            let hits = test.iter().filter(|(f, y)| clf.classify(f) == Some(*y)).count();
            total += hits as f64 / test.len() as f64;
        }
        let n = test.len() as f64;
        let p = 1.0 / 3.0;
        let band = 1.96 * (p * (1.0 - p) / n).sqrt();
        let acc = total / shuffles as f64;
        assert!((acc - p).abs() <= band, "accuracy {acc} outside {p} ± {band}");
    }

    #[test]
    fn classifier_is_perfect_with_six_styles() {
        let c = generate_corpus(&CorpusSpec {
            num_speakers: 6,
            num_styles: 6,
            utterances_per_speaker: 40,
            mel_bins: 32,
            ..CorpusSpec::default()
        })
        .unwrap();
        let clf = StyleClassifier::fit_corpus(&c).unwrap();
        for u in &c.utterances {
            let p = extract_prosody_oracle(&u.mel, &u.phone_boundaries, c.timbre(u.speaker_id).unwrap()).unwrap();
            assert_eq!(clf.classify(&style_features(&p)), Some(u.style_id), "{}", u.utt_id);
        }
    }

    #[test]
    fn speaker_probe_is_perfect_on_ground_truth() {
        let c = corpus();
        let probe = SpeakerProbe::new(&c.timbres);
        for u in &c.utterances {
            assert_eq!(probe.classify(&u.mel), Some(u.speaker_id), "{}", u.utt_id);
        }
    }

    #[test]
    fn speaker_probe_follows_timbre_not_prosody() {
        // speaker 0's voice with style 2's prosody
        let c = corpus();
        let probe = SpeakerProbe::new(&c.timbres);
        for u in c.utterances.iter().filter(|u| u.style_id == 2).take(10) {
            let mel = render_mel(&u.prosody, &c.timbres[0], 32).unwrap().mel;
            assert_eq!(probe.classify(&mel), Some(0));
        }
    }

    #[test]
    fn attention_boundaries_cover_all_frames() {
        let mut a = Tensor::zeros(6, 3);
        for (t, n) in [0usize, 0, 1, 0, 2, 2].iter().enumerate() {
            a.set(t, *n, 1.0);
        }
        // the backward jump at frame 3 is absorbed by the running maximum
        assert_eq!(attention_boundaries(&a), vec![0, 2, 4, 6]);
        let mut skip = Tensor::zeros(4, 3);
        for (t, n) in [0usize, 0, 2, 2].iter().enumerate() {
            skip.set(t, *n, 1.0);
        }
        assert_eq!(attention_boundaries(&skip), vec![0, 2, 2, 4]);
    }

    #[test]
    fn measurement_recovers_rendered_prosody_with_true_alignment() {
        let c = corpus();
        let u = &c.utterances[0];
        let n = u.phonemes.len();
        let mut align = Tensor::zeros(u.mel.rows(), n);
        for i in 0..n {
            for t in u.phone_boundaries[i]..u.phone_boundaries[i + 1] {
                align.set(t, i, 1.0);
            }
        }
        let m = measure_output(&u.mel, &align, c.timbre(u.speaker_id).unwrap());
        assert_eq!(m.durations, u.prosody.column(1));
        for i in 0..n {
            assert!((m.pitches[i] - u.prosody.pitch(i)).abs() < 1e-6 * u.prosody.pitch(i));
        }
    }

    #[test]
    fn variant_names() {
        assert!(variant_mask("full").unwrap().is_empty());
        assert_eq!(variant_mask("without_all").unwrap().dropped, [true; 3]);
        assert_eq!(variant_mask("without_duration").unwrap().dropped, [false, true, false]);
        assert!(variant_mask("without_timbre").is_err());
        assert_eq!(EvalConfig::default().ablation_variants.len(), 5);
    }

    #[test]
    fn held_out_texts_come_from_the_test_split() {
        let c = corpus();
        let texts = held_out_texts(c, 10);
        assert_eq!(texts.len(), 10);
        for t in &texts {
            assert!(c.test().any(|u| &u.phonemes == t));
        }
    }

    #[test]
    fn csv_and_svg_shapes() {
        let pts: Vec<ControlPoint> = [0.8, 1.0, 1.2]
            .iter()
            .map(|&s| ControlPoint {
                feature: "pitch".into(),
                scale: s,
                measured: 150.0 * s,
                ratio: s,
                items: 3,
                non_terminated: 0,
            })
            .collect();
        let csv = curves_csv(&pts);
        assert_eq!(csv.lines().count(), 4);
        let svg = control_svg(&pts, "pitch");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
